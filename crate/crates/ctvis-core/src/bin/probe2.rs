// Scratch diagnostic (not shipped): trains each table-3 cell and prints
// loss tail, embedding norms, and bi-softmax score stats on eval videos.
use ctvis_core::association::{associate_frame, FrameDetections, InstanceObservation};
use ctvis_core::harness::*;
use ctvis_core::memory::MemoryBank;
use ctvis_core::trainer::*;

fn envf(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn envu(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let mut cfg = BenchmarkConfig::default();
    cfg.trainer.iterations = envu("ITER", cfg.trainer.iterations);
    cfg.trainer.lr = envf("LR", cfg.trainer.lr);
    cfg.trainer.emb_dim = envu("EMB", cfg.trainer.emb_dim);
    cfg.stream.latent_scale = envf("LSCALE", cfg.stream.latent_scale);
    cfg.stream.latent_crowding = envf("CROWD", cfg.stream.latent_crowding);
    cfg.stream.nuisance_std = envf("NUI", cfg.stream.nuisance_std);
    cfg.stream.noise_std = envf("NSTD", cfg.stream.noise_std);
    cfg.stream.occlusion_prob = envf("OCCL", cfg.stream.occlusion_prob);
    cfg.stream.background_alignment = envf("BGA", cfg.stream.background_alignment);
    cfg.stream.corruption_prob = envf("CORR", cfg.stream.corruption_prob);
    cfg.stream.corruption_strength = envf("CORRS", cfg.stream.corruption_strength);

    let stream = SyntheticStream::new(cfg.stream.clone());
    for cell in table3_cells() {
        let mut tcfg = cfg.trainer.clone();
        tcfg.seed = 12345;
        let head = match cell.variant {
            Variant::Baseline => train_baseline(&tcfg, &stream).unwrap().0,
            Variant::Consistent(flags) => train_consistent(&tcfg, &stream, flags).unwrap().0,
        };
        diagnose(&cell.label, &head, &cfg);
    }
}

fn diagnose(label: &str, head: &EmbeddingHead, cfg: &BenchmarkConfig) {
    let videos = eval_videos(cfg, 7);
    let mut norms = Vec::new();
    let mut matched_f = Vec::new();
    let mut new_f = Vec::new();
    let mut wnorm = 0.0f64;
    for row in &head.weight {
        for w in row {
            wnorm += w * w;
        }
    }
    for (clip, _) in videos.iter().take(8) {
        let mut bank = MemoryBank::new(head.output_dim());
        for (t, frame) in clip.frames.iter().enumerate() {
            let mut detections = Vec::new();
            for obs in &frame.instances {
                let e = head.embed(&obs.features, false);
                norms.push(e.norm());
                detections.push(InstanceObservation {
                    embedding: e,
                    class_scores: obs.class_scores.clone(),
                    mask: None,
                    confidence: obs.confidence,
                });
            }
            for bg in &frame.background {
                detections.push(InstanceObservation {
                    embedding: head.embed(&bg.features, false),
                    class_scores: bg.class_scores.clone(),
                    mask: None,
                    confidence: bg.confidence,
                });
            }
            let fd = FrameDetections { frame_index: t as u64, detections };
            let res = associate_frame(&mut bank, &fd, 0.5, 0.3).unwrap();
            for a in &res.assignments {
                if a.is_new {
                    new_f.push(a.score);
                } else {
                    matched_f.push(a.score);
                }
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let m = evaluate_head(head, cfg, 7);
    println!(
        "{label:>14}  |W|={:.2} emb_norm={:.2} matched(n={} f̄={:.2}) new(n={}) → acc {:.4} idsw {:.1} reid {:.4} intra {:.2} inter {:.2}",
        wnorm.sqrt(),
        mean(&norms),
        matched_f.len(),
        mean(&matched_f),
        new_f.len(),
        m.assoc_accuracy,
        m.id_switches,
        m.reid_accuracy,
        m.intra_margin,
        m.inter_margin,
    );
}
