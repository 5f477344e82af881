// Scratch harness probe (not shipped): prints ablation grid rows.
// Knobs override defaults via env vars so sweeps don't need recompiles.
use ctvis_core::harness::*;
use std::time::Instant;

fn envf(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn envu(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds_n: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let which = args.get(2).map(String::as_str).unwrap_or("all");
    let seeds: Vec<u64> = (0..seeds_n).collect();
    let mut cfg = BenchmarkConfig::default();

    cfg.trainer.iterations = envu("ITER", cfg.trainer.iterations);
    cfg.trainer.lr = envf("LR", cfg.trainer.lr);
    cfg.trainer.emb_dim = envu("EMB", cfg.trainer.emb_dim);
    cfg.trainer.noise_prob = envf("NOISEP", cfg.trainer.noise_prob);
    cfg.stream.feature_dim = envu("FDIM", cfg.stream.feature_dim);
    cfg.stream.latent_scale = envf("LSCALE", cfg.stream.latent_scale);
    cfg.stream.latent_crowding = envf("CROWD", cfg.stream.latent_crowding);
    cfg.stream.nuisance_std = envf("NUI", cfg.stream.nuisance_std);
    cfg.stream.noise_std = envf("NSTD", cfg.stream.noise_std);
    cfg.stream.drift_std = envf("DSTD", cfg.stream.drift_std);
    cfg.stream.occlusion_prob = envf("OCCL", cfg.stream.occlusion_prob);
    cfg.stream.background_alignment = envf("BGA", cfg.stream.background_alignment);
    cfg.stream.corruption_prob = envf("CORR", cfg.stream.corruption_prob);
    cfg.stream.corruption_strength = envf("CORRS", cfg.stream.corruption_strength);
    cfg.stream.background_scale = envf("BGSCALE", cfg.stream.background_scale);
    cfg.stream.background_drift_std = envf("BGDRIFT", cfg.stream.background_drift_std);
    let occl_hi = envu("OCCLEN", 0);
    if occl_hi > 0 {
        cfg.stream.occlusion_len = (2, occl_hi);
    }
    let bgc = envu("BGCOUNT", 0);
    if bgc > 0 {
        cfg.stream.background_count = (bgc.saturating_sub(2), bgc + 2);
    }
    cfg.stream.clutter_confidence = (
        envf("CCLO", cfg.stream.clutter_confidence.0),
        envf("CCHI", cfg.stream.clutter_confidence.1),
    );
    let reid_hi = envu("REIDLEN", 0);
    if reid_hi > 0 {
        cfg.reid_occlusion_len = (2, reid_hi);
    }

    println!("stream: {}", serde_json::to_string(&cfg.stream).unwrap());
    println!("trainer: {}", serde_json::to_string(&cfg.trainer).unwrap());

    let t0 = Instant::now();
    if which == "all" || which == "t3" {
        println!("── table 3 ──");
        let rows = run_grid(&cfg, &table3_cells(), &seeds).unwrap();
        print_rows(&rows);
        let acc: Vec<f64> = rows.iter().map(|r| r.mean_accuracy).collect();
        println!(
            "  bank-base {:+.4} | mom-bank {:+.4} | reid: noise-mom {:+.4} | full-base {:+.4} (need ≥0.03) | idsw full-base {:+.2} (need <0)",
            acc[1] - acc[0],
            acc[2] - acc[1],
            rows[3].mean_reid_accuracy - rows[2].mean_reid_accuracy,
            acc[3] - acc[0],
            rows[3].mean_id_switches - rows[0].mean_id_switches,
        );
    }
    if which == "all" || which == "t4" {
        println!("── table 4 ──");
        let rows = run_grid(&cfg, &table4_cells(), &seeds).unwrap();
        print_rows(&rows);
        let acc: Vec<f64> = rows.iter().map(|r| r.mean_accuracy).collect();
        println!(
            "  major-supp {:+.4} (need >0) | global-major {:+.4} (need >0) | local-global {:+.4} (need ≥0)",
            acc[1] - acc[0],
            acc[2] - acc[1],
            acc[3] - acc[2],
        );
    }
    if which == "all" || which == "len" {
        println!("── clip length ──");
        let rows = run_grid(&cfg, &clip_length_cells(), &seeds).unwrap();
        print_rows(&rows);
        println!(
            "  len8-len2 {:+.4} (need ≥0)",
            rows[1].mean_accuracy - rows[0].mean_accuracy
        );
    }
    println!("elapsed: {:?}", t0.elapsed());
}

fn print_rows(rows: &[RowSummary]) {
    for r in rows {
        println!(
            "{:>20}  acc {:.4}±{:.4}  idsw {:6.2}  reid_acc {:.4}  reid_idsw {:6.2}  intra {:.3} inter {:.3}",
            r.label,
            r.mean_accuracy,
            r.std_accuracy,
            r.mean_id_switches,
            r.mean_reid_accuracy,
            r.mean_reid_id_switches,
            r.mean_intra_margin,
            r.mean_inter_margin,
        );
    }
}
