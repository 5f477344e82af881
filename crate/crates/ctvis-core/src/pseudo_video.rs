//! Pseudo-video generation from single labeled scenes.
//!
//! A labeled scene is a set of disjoint instance masks with class labels and
//! a depth order. Videos are produced by sweeping augmentation parameters
//! smoothly across frames — sorted rotation angles, interpolated crop
//! windows, jittered paste trajectories — so the result mimics target motion
//! rather than independent per-frame jitters. All resampling is
//! nearest-neighbor to keep masks binary.
//!
//! Dataset form: one JSON-lines file per video, one frame record per line,
//! masks run-length encoded (row-major, background run first).

use crate::association::{FrameDetections, InstanceObservation};
use crate::embedding::Embedding;
use crate::mask::BinaryMask;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GenError {
    #[error("scene has no instances")]
    EmptyScene,
    #[error("crop window degenerate: {w}x{h} px (minimum 8)")]
    DegenerateWindow { w: usize, h: usize },
    #[error("donor instance {0} does not fit in the target canvas")]
    DonorDoesNotFit(u64),
    #[error("bad dataset record: {0}")]
    BadRecord(String),
}

// ─────────────────────────────────────────────────────────────────────────────
// Scenes and videos
// ─────────────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneInstance {
    pub instance_id: u64,
    pub class_label: usize,
    pub mask: BinaryMask,
    pub depth_order: usize,
}

/// One frame: disjoint visible instance masks over a fixed canvas.
/// Fully-occluded or out-of-view instances are absent from the list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledScene {
    pub width: usize,
    pub height: usize,
    pub instances: Vec<SceneInstance>,
}

impl LabeledScene {
    pub fn instance(&self, id: u64) -> Option<&SceneInstance> {
        self.instances.iter().find(|i| i.instance_id == id)
    }

    /// Check the scene invariants: raster agreement, pairwise-disjoint
    /// visible masks, unique depth orders, no empty masks.
    pub fn validate(&self) -> Result<(), String> {
        for inst in &self.instances {
            if inst.mask.width() != self.width || inst.mask.height() != self.height {
                return Err(format!("instance {} raster mismatch", inst.instance_id));
            }
            if inst.mask.is_empty() {
                return Err(format!("instance {} has an empty mask", inst.instance_id));
            }
        }
        for i in 0..self.instances.len() {
            for j in (i + 1)..self.instances.len() {
                if !self.instances[i]
                    .mask
                    .is_disjoint(&self.instances[j].mask)
                    .unwrap_or(false)
                {
                    return Err(format!(
                        "instances {} and {} overlap",
                        self.instances[i].instance_id, self.instances[j].instance_id
                    ));
                }
                if self.instances[i].depth_order == self.instances[j].depth_order {
                    return Err("duplicate depth order".into());
                }
            }
        }
        Ok(())
    }

    /// Instance index per pixel (−1 = background), by visible mask.
    fn ownership(&self) -> Vec<i32> {
        let mut owner = vec![-1i32; self.width * self.height];
        for (idx, inst) in self.instances.iter().enumerate() {
            for y in 0..self.height {
                for x in 0..self.width {
                    if inst.mask.get(x, y) {
                        owner[y * self.width + x] = idx as i32;
                    }
                }
            }
        }
        owner
    }

    /// Rebuild a scene from a transformed ownership raster; instances whose
    /// visible mask became empty are dropped.
    fn from_ownership(&self, owner: &[i32]) -> LabeledScene {
        let mut masks: Vec<BinaryMask> = self
            .instances
            .iter()
            .map(|_| BinaryMask::empty(self.width, self.height))
            .collect();
        for y in 0..self.height {
            for x in 0..self.width {
                let o = owner[y * self.width + x];
                if o >= 0 {
                    masks[o as usize].set(x, y, true);
                }
            }
        }
        let instances = self
            .instances
            .iter()
            .zip(masks)
            .filter(|(_, m)| !m.is_empty())
            .map(|(inst, mask)| SceneInstance {
                instance_id: inst.instance_id,
                class_label: inst.class_label,
                mask,
                depth_order: inst.depth_order,
            })
            .collect();
        LabeledScene { width: self.width, height: self.height, instances }
    }
}

/// Applied augmentation parameters for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProvenanceStep {
    Rotation { angle_deg: f64 },
    CropZoom { zoom: f64 },
    CropShift { x0: i64, y0: i64, w: usize, h: usize },
    Paste { track_id: u64, dx: i64, dy: i64 },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameProvenance {
    pub steps: Vec<ProvenanceStep>,
}

/// Ordered frames with stable track identities and per-frame provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoVideo {
    pub frames: Vec<LabeledScene>,
    pub provenance: Vec<FrameProvenance>,
}

impl PseudoVideo {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    /// All track ids appearing anywhere in the video, with class labels.
    pub fn track_classes(&self) -> BTreeMap<u64, usize> {
        let mut map = BTreeMap::new();
        for frame in &self.frames {
            for inst in &frame.instances {
                map.insert(inst.instance_id, inst.class_label);
            }
        }
        map
    }

    pub fn visible_mask(&self, frame: usize, track_id: u64) -> Option<&BinaryMask> {
        self.frames[frame].instance(track_id).map(|i| &i.mask)
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut classes: BTreeMap<u64, usize> = BTreeMap::new();
        for (t, frame) in self.frames.iter().enumerate() {
            frame.validate().map_err(|e| format!("frame {t}: {e}"))?;
            if (frame.width, frame.height) != (self.frames[0].width, self.frames[0].height) {
                return Err(format!("frame {t}: raster differs from frame 0"));
            }
            for inst in &frame.instances {
                match classes.get(&inst.instance_id) {
                    Some(&c) if c != inst.class_label => {
                        return Err(format!(
                            "track {} changed class {c} → {}",
                            inst.instance_id, inst.class_label
                        ));
                    }
                    _ => {
                        classes.insert(inst.instance_id, inst.class_label);
                    }
                }
            }
        }
        Ok(())
    }
}

// ─────────────────────────────────────────────────────────────────────────────
// Rotation
// ─────────────────────────────────────────────────────────────────────────────

/// Rotate a scene about its center by `angle_deg`, nearest-neighbor.
/// Pixels leaving the canvas are cropped; entering pixels are background.
pub fn rotate_scene(scene: &LabeledScene, angle_deg: f64) -> LabeledScene {
    let owner = scene.ownership();
    let (w, h) = (scene.width, scene.height);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let mut out = vec![-1i32; w * h];
    for y in 0..h {
        for x in 0..w {
            // Inverse map: rotate the output pixel back by −θ.
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = (cos * dx + sin * dy + cx).round();
            let sy = (-sin * dx + cos * dy + cy).round();
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
                out[y * w + x] = owner[sy as usize * w + sx as usize];
            }
        }
    }
    scene.from_ownership(&out)
}

/// Pseudo-video from random rotations: `num_frames` angles sampled uniformly
/// from `angle_range` and sorted into a smooth trajectory.
pub fn gen_rotation<R: Rng>(
    scene: &LabeledScene,
    num_frames: usize,
    angle_range: (f64, f64),
    rng: &mut R,
) -> Result<PseudoVideo, GenError> {
    if scene.instances.is_empty() {
        return Err(GenError::EmptyScene);
    }
    let mut angles: Vec<f64> = (0..num_frames)
        .map(|_| {
            if angle_range.0 == angle_range.1 {
                angle_range.0
            } else {
                rng.random_range(angle_range.0..angle_range.1)
            }
        })
        .collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let frames: Vec<LabeledScene> = angles.iter().map(|&a| rotate_scene(scene, a)).collect();
    let provenance = angles
        .iter()
        .map(|&a| FrameProvenance { steps: vec![ProvenanceStep::Rotation { angle_deg: a }] })
        .collect();
    Ok(PseudoVideo { frames, provenance })
}

// ─────────────────────────────────────────────────────────────────────────────
// Crop (zoom and shift)
// ─────────────────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropMode {
    Zoom,
    Shift,
}

/// Camera zoom about the canvas center. `zoom > 1` magnifies (crops a
/// `1/zoom`-sized window and rescales it up); `zoom < 1` shrinks the scene
/// into the center with a background border.
pub fn zoom_scene(scene: &LabeledScene, zoom: f64) -> Result<LabeledScene, GenError> {
    let (w, h) = (scene.width, scene.height);
    let implied_w = (w as f64 / zoom) as usize;
    let implied_h = (h as f64 / zoom) as usize;
    if zoom > 1.0 && (implied_w < 8 || implied_h < 8) {
        return Err(GenError::DegenerateWindow { w: implied_w, h: implied_h });
    }
    let owner = scene.ownership();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let mut out = vec![-1i32; w * h];
    for y in 0..h {
        for x in 0..w {
            let sx = (cx + (x as f64 - cx) / zoom).round();
            let sy = (cy + (y as f64 - cy) / zoom).round();
            if sx >= 0.0 && sy >= 0.0 && (sx as usize) < w && (sy as usize) < h {
                out[y * w + x] = owner[sy as usize * w + sx as usize];
            }
        }
    }
    Ok(scene.from_ownership(&out))
}

/// Crop the window at `(x0, y0)` of size `(win_w, win_h)` and rescale it to
/// the scene resolution, nearest-neighbor. The window must lie inside the
/// canvas.
pub fn crop_window_scene(
    scene: &LabeledScene,
    x0: i64,
    y0: i64,
    win_w: usize,
    win_h: usize,
) -> Result<LabeledScene, GenError> {
    let (w, h) = (scene.width, scene.height);
    if win_w < 8 || win_h < 8 {
        return Err(GenError::DegenerateWindow { w: win_w, h: win_h });
    }
    assert!(
        x0 >= 0 && y0 >= 0 && x0 as usize + win_w <= w && y0 as usize + win_h <= h,
        "crop window must remain inside the canvas"
    );
    let owner = scene.ownership();
    let mut out = vec![-1i32; w * h];
    for y in 0..h {
        for x in 0..w {
            let sx = x0 as usize + (x as f64 * win_w as f64 / w as f64) as usize;
            let sy = y0 as usize + (y as f64 * win_h as f64 / h as f64) as usize;
            out[y * w + x] = owner[sy.min(h - 1) * w + sx.min(w - 1)];
        }
    }
    Ok(scene.from_ownership(&out))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CropParams {
    /// Zoom factors sampled for the trajectory endpoints (zoom mode).
    pub zoom_range: (f64, f64),
    /// Window size as a fraction of the canvas (shift mode).
    pub window_scale: f64,
}

impl Default for CropParams {
    fn default() -> Self {
        Self { zoom_range: (0.6, 1.6), window_scale: 0.6 }
    }
}

/// Pseudo-video from a crop sweep: zoom interpolates monotonically between
/// two sampled scales; shift translates a fixed-size window along a sampled
/// straight line. Instances fully outside a window are absent from that
/// frame, which is how presence schedules arise.
pub fn gen_crop_with<R: Rng>(
    scene: &LabeledScene,
    num_frames: usize,
    mode: CropMode,
    params: &CropParams,
    rng: &mut R,
) -> Result<PseudoVideo, GenError> {
    if scene.instances.is_empty() {
        return Err(GenError::EmptyScene);
    }
    let mut frames = Vec::with_capacity(num_frames);
    let mut provenance = Vec::with_capacity(num_frames);
    match mode {
        CropMode::Zoom => {
            let z0 = rng.random_range(params.zoom_range.0..=params.zoom_range.1);
            let z1 = rng.random_range(params.zoom_range.0..=params.zoom_range.1);
            for t in 0..num_frames {
                let a = if num_frames > 1 { t as f64 / (num_frames - 1) as f64 } else { 0.0 };
                let zoom = z0 + (z1 - z0) * a;
                frames.push(zoom_scene(scene, zoom)?);
                provenance.push(FrameProvenance {
                    steps: vec![ProvenanceStep::CropZoom { zoom }],
                });
            }
        }
        CropMode::Shift => {
            let win_w = ((scene.width as f64 * params.window_scale) as usize).max(8);
            let win_h = ((scene.height as f64 * params.window_scale) as usize).max(8);
            let max_x = (scene.width - win_w) as i64;
            let max_y = (scene.height - win_h) as i64;
            let (sx, sy) = (rng.random_range(0..=max_x), rng.random_range(0..=max_y));
            let (ex, ey) = (rng.random_range(0..=max_x), rng.random_range(0..=max_y));
            for t in 0..num_frames {
                let a = if num_frames > 1 { t as f64 / (num_frames - 1) as f64 } else { 0.0 };
                let x0 = sx + ((ex - sx) as f64 * a).round() as i64;
                let y0 = sy + ((ey - sy) as f64 * a).round() as i64;
                frames.push(crop_window_scene(scene, x0, y0, win_w, win_h)?);
                provenance.push(FrameProvenance {
                    steps: vec![ProvenanceStep::CropShift { x0, y0, w: win_w, h: win_h }],
                });
            }
        }
    }
    Ok(PseudoVideo { frames, provenance })
}

pub fn gen_crop<R: Rng>(
    scene: &LabeledScene,
    num_frames: usize,
    mode: CropMode,
    rng: &mut R,
) -> Result<PseudoVideo, GenError> {
    gen_crop_with(scene, num_frames, mode, &CropParams::default(), rng)
}

// ─────────────────────────────────────────────────────────────────────────────
// Copy & paste
// ─────────────────────────────────────────────────────────────────────────────

/// Paste `num_pastes` donor instances into the target video at per-frame
/// jittered positions along a straight trajectory. Pasted instances receive
/// fresh track ids and sit above everything already in the frame; occluded
/// regions are removed from underlying visible masks, so frames stay
/// pairwise disjoint.
pub fn gen_copy_paste<R: Rng>(
    target: &PseudoVideo,
    donor: &LabeledScene,
    num_pastes: usize,
    rng: &mut R,
) -> Result<PseudoVideo, GenError> {
    if num_pastes == 0 {
        return Ok(target.clone());
    }
    if donor.instances.is_empty() {
        return Err(GenError::EmptyScene);
    }
    let canvas_w = target.frames[0].width;
    let canvas_h = target.frames[0].height;
    let mut next_id = target.track_classes().keys().max().map_or(0, |m| m + 1);
    let mut next_depth = target
        .frames
        .iter()
        .flat_map(|f| f.instances.iter().map(|i| i.depth_order))
        .max()
        .map_or(0, |d| d + 1);

    let mut video = target.clone();
    let num_frames = video.num_frames();
    for _ in 0..num_pastes {
        let donor_inst = &donor.instances[rng.random_range(0..donor.instances.len())];
        let (bx0, by0, bx1, by1) = donor_inst
            .mask
            .bounding_box()
            .ok_or(GenError::EmptyScene)?;
        let bw = bx1 - bx0 + 1;
        let bh = by1 - by0 + 1;
        if bw > canvas_w || bh > canvas_h {
            return Err(GenError::DonorDoesNotFit(donor_inst.instance_id));
        }
        // Offsets that keep the bounding box inside the canvas.
        let max_dx = (canvas_w - bw) as i64 - bx0 as i64;
        let max_dy = (canvas_h - bh) as i64 - by0 as i64;
        let min_dx = -(bx0 as i64);
        let min_dy = -(by0 as i64);
        let sample_offset = |rng: &mut R| {
            (
                rng.random_range(min_dx..=max_dx),
                rng.random_range(min_dy..=max_dy),
            )
        };
        let (sx, sy) = sample_offset(rng);
        let (ex, ey) = sample_offset(rng);

        let track_id = next_id;
        next_id += 1;
        let depth = next_depth;
        next_depth += 1;

        for (t, frame) in video.frames.iter_mut().enumerate() {
            let a = if num_frames > 1 { t as f64 / (num_frames - 1) as f64 } else { 0.0 };
            let jitter_x: i64 = rng.random_range(-2..=2);
            let jitter_y: i64 = rng.random_range(-2..=2);
            let dx = (sx + ((ex - sx) as f64 * a).round() as i64 + jitter_x)
                .clamp(min_dx, max_dx);
            let dy = (sy + ((ey - sy) as f64 * a).round() as i64 + jitter_y)
                .clamp(min_dy, max_dy);
            let pasted = donor_inst.mask.translated(dx, dy);
            // The paste occludes whatever is below it.
            for inst in &mut frame.instances {
                inst.mask.subtract(&pasted).expect("same canvas");
            }
            frame.instances.retain(|i| !i.mask.is_empty());
            frame.instances.push(SceneInstance {
                instance_id: track_id,
                class_label: donor_inst.class_label,
                mask: pasted,
                depth_order: depth,
            });
            video.provenance[t]
                .steps
                .push(ProvenanceStep::Paste { track_id, dx, dy });
        }
    }
    Ok(video)
}

// ─────────────────────────────────────────────────────────────────────────────
// Observation bridge
// ─────────────────────────────────────────────────────────────────────────────

/// Noise model for turning a pseudo-video into detection streams.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObserveConfig {
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Std-dev of per-frame Gaussian perturbation on instance features.
    pub feature_noise_std: f64,
    /// Std-dev of noise on class scores (clamped back into [0, 1]).
    pub score_noise_std: f64,
    /// Expected number of background clutter detections per frame.
    pub clutter_rate: f64,
    pub instance_confidence: (f64, f64),
    pub clutter_confidence: (f64, f64),
}

impl Default for ObserveConfig {
    fn default() -> Self {
        Self {
            feature_dim: 16,
            num_classes: 3,
            feature_noise_std: 0.1,
            score_noise_std: 0.05,
            clutter_rate: 1.0,
            instance_confidence: (0.7, 1.0),
            clutter_confidence: (0.1, 0.6),
        }
    }
}

/// Detections for one frame plus GT track ids aligned with the detection
/// list (`None` marks clutter).
#[derive(Debug, Clone)]
pub struct ObservedFrame {
    pub detections: FrameDetections,
    pub gt_ids: Vec<Option<u64>>,
}

/// Emit per-frame observations whose features derive from instance identity
/// and class plus perturbation noise, with background clutter mixed in.
/// Deterministic given the rng state.
pub fn observe<R: Rng>(
    video: &PseudoVideo,
    cfg: &ObserveConfig,
    rng: &mut R,
) -> Vec<ObservedFrame> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let classes = video.track_classes();
    // Identity latents: unit vectors, fixed for the whole video.
    let mut latents: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    for &id in classes.keys() {
        let mut v: Vec<f64> = (0..cfg.feature_dim).map(|_| normal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        v.iter_mut().for_each(|x| *x /= n);
        latents.insert(id, v);
    }
    // Per-class offsets, weaker than the identity component.
    let class_vecs: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| {
            (0..cfg.feature_dim)
                .map(|_| 0.3 * normal.sample(rng))
                .collect()
        })
        .collect();

    let mut frames = Vec::with_capacity(video.num_frames());
    for (t, frame) in video.frames.iter().enumerate() {
        let mut detections = Vec::new();
        let mut gt_ids = Vec::new();
        for inst in &frame.instances {
            let latent = &latents[&inst.instance_id];
            let class_vec = &class_vecs[inst.class_label % cfg.num_classes];
            let features: Vec<f64> = (0..cfg.feature_dim)
                .map(|d| latent[d] + class_vec[d] + cfg.feature_noise_std * normal.sample(rng))
                .collect();
            let mut scores = vec![0.05; cfg.num_classes];
            scores[inst.class_label % cfg.num_classes] = 0.9;
            for s in &mut scores {
                *s = (*s + cfg.score_noise_std * normal.sample(rng)).clamp(0.0, 1.0);
            }
            detections.push(InstanceObservation {
                embedding: Embedding::new(features),
                class_scores: scores,
                mask: Some(inst.mask.clone()),
                confidence: rng
                    .random_range(cfg.instance_confidence.0..=cfg.instance_confidence.1),
            });
            gt_ids.push(Some(inst.instance_id));
        }
        // Clutter count ~ Poisson(clutter_rate) via inversion.
        let clutter = poisson_sample(cfg.clutter_rate, rng);
        for _ in 0..clutter {
            let features: Vec<f64> = (0..cfg.feature_dim)
                .map(|_| 0.5 * normal.sample(rng))
                .collect();
            let scores: Vec<f64> = (0..cfg.num_classes)
                .map(|_| rng.random_range(0.0..0.3))
                .collect();
            detections.push(InstanceObservation {
                embedding: Embedding::new(features),
                class_scores: scores,
                mask: None,
                confidence: rng
                    .random_range(cfg.clutter_confidence.0..=cfg.clutter_confidence.1),
            });
            gt_ids.push(None);
        }
        frames.push(ObservedFrame {
            detections: FrameDetections { frame_index: t as u64, detections },
            gt_ids,
        });
    }
    frames
}

fn poisson_sample<R: Rng>(rate: f64, rng: &mut R) -> usize {
    if rate <= 0.0 {
        return 0;
    }
    let limit = (-rate).exp();
    let mut product = rng.random::<f64>();
    let mut count = 0usize;
    while product > limit {
        product *= rng.random::<f64>();
        count += 1;
    }
    count
}

// ─────────────────────────────────────────────────────────────────────────────
// Procedural scenes and composed generation
// ─────────────────────────────────────────────────────────────────────────────

/// Procedural scene parameters. Classes are shape kinds:
/// 0 = rectangle, 1 = ellipse, 2 = blob.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub num_instances: (usize, usize),
    pub size_range: (usize, usize),
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { width: 96, height: 96, num_instances: (3, 6), size_range: (10, 24) }
    }
}

pub const NUM_SHAPE_CLASSES: usize = 3;

fn shape_mask<R: Rng>(
    kind: usize,
    canvas_w: usize,
    canvas_h: usize,
    size: usize,
    cx: usize,
    cy: usize,
    rng: &mut R,
) -> BinaryMask {
    let mut mask = BinaryMask::empty(canvas_w, canvas_h);
    match kind {
        0 => {
            let w = size;
            let h = (size as f64 * rng.random_range(0.6..1.4)) as usize;
            mask = BinaryMask::rect(
                canvas_w,
                canvas_h,
                cx as i64 - (w / 2) as i64,
                cy as i64 - (h / 2) as i64,
                w.max(2),
                h.max(2),
            );
        }
        1 => {
            let rx = (size / 2).max(1) as f64;
            let ry = (size as f64 * rng.random_range(0.5..1.0) / 2.0).max(1.0);
            for y in 0..canvas_h {
                for x in 0..canvas_w {
                    let dx = (x as f64 - cx as f64) / rx;
                    let dy = (y as f64 - cy as f64) / ry;
                    if dx * dx + dy * dy <= 1.0 {
                        mask.set(x, y, true);
                    }
                }
            }
        }
        _ => {
            // Blob: union of a few overlapping disks around the center.
            for _ in 0..4 {
                let r = (size as f64 / 3.0 * rng.random_range(0.6..1.2)).max(1.5);
                let ox = cx as f64 + rng.random_range(-(size as f64) / 3.0..size as f64 / 3.0);
                let oy = cy as f64 + rng.random_range(-(size as f64) / 3.0..size as f64 / 3.0);
                for y in 0..canvas_h {
                    for x in 0..canvas_w {
                        let dx = x as f64 - ox;
                        let dy = y as f64 - oy;
                        if dx * dx + dy * dy <= r * r {
                            mask.set(x, y, true);
                        }
                    }
                }
            }
        }
    }
    mask
}

/// Generate a labeled scene of disjoint procedural shapes. Later shapes sit
/// deeper in the stack; overlaps are resolved by occlusion (higher depth
/// wins) and fully-hidden shapes are discarded.
pub fn gen_scene<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> LabeledScene {
    let count = rng.random_range(cfg.num_instances.0..=cfg.num_instances.1);
    let mut instances: Vec<SceneInstance> = Vec::new();
    for i in 0..count {
        let kind = rng.random_range(0..NUM_SHAPE_CLASSES);
        let size = rng.random_range(cfg.size_range.0..=cfg.size_range.1);
        let margin = size / 2 + 1;
        let cx = rng.random_range(margin..cfg.width.saturating_sub(margin).max(margin + 1));
        let cy = rng.random_range(margin..cfg.height.saturating_sub(margin).max(margin + 1));
        let mask = shape_mask(kind, cfg.width, cfg.height, size, cx, cy, rng);
        // New shape goes on top: carve it out of everything below.
        for existing in &mut instances {
            existing.mask.subtract(&mask).expect("same canvas");
        }
        instances.push(SceneInstance {
            instance_id: i as u64,
            class_label: kind,
            mask,
            depth_order: i,
        });
        instances.retain(|inst| !inst.mask.is_empty());
    }
    LabeledScene { width: cfg.width, height: cfg.height, instances }
}

/// Composition switches for full video generation. Augmentations compose in
/// rotation → crop order per frame, with copy&paste applied to the result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoGenConfig {
    pub num_frames: usize,
    pub rotation: Option<(f64, f64)>,
    pub crop: Option<(CropMode, CropParams)>,
    /// Number of donor instances pasted from a second generated scene.
    pub copy_paste: Option<usize>,
    pub scene: SceneConfig,
}

impl Default for VideoGenConfig {
    fn default() -> Self {
        Self {
            num_frames: 8,
            rotation: Some((-15.0, 15.0)),
            crop: Some((CropMode::Shift, CropParams::default())),
            copy_paste: Some(2),
            scene: SceneConfig::default(),
        }
    }
}

/// Generate one pseudo-video: procedural scene, then the enabled
/// augmentations composed. Pure function of the config and rng state.
pub fn generate_video<R: Rng>(cfg: &VideoGenConfig, rng: &mut R) -> Result<PseudoVideo, GenError> {
    let scene = gen_scene(&cfg.scene, rng);
    if scene.instances.is_empty() {
        return Err(GenError::EmptyScene);
    }

    let mut video = match cfg.rotation {
        Some(range) => gen_rotation(&scene, cfg.num_frames, range, rng)?,
        None => PseudoVideo {
            frames: vec![scene.clone(); cfg.num_frames],
            provenance: vec![FrameProvenance::default(); cfg.num_frames],
        },
    };

    if let Some((mode, ref params)) = cfg.crop {
        match mode {
            CropMode::Zoom => {
                let z0 = rng.random_range(params.zoom_range.0..=params.zoom_range.1);
                let z1 = rng.random_range(params.zoom_range.0..=params.zoom_range.1);
                let n = video.frames.len();
                for (t, frame) in video.frames.iter_mut().enumerate() {
                    let a = if n > 1 { t as f64 / (n - 1) as f64 } else { 0.0 };
                    let zoom = z0 + (z1 - z0) * a;
                    *frame = zoom_scene(frame, zoom)?;
                    video.provenance[t].steps.push(ProvenanceStep::CropZoom { zoom });
                }
            }
            CropMode::Shift => {
                let w = video.frames[0].width;
                let h = video.frames[0].height;
                let win_w = ((w as f64 * params.window_scale) as usize).max(8);
                let win_h = ((h as f64 * params.window_scale) as usize).max(8);
                let max_x = (w - win_w) as i64;
                let max_y = (h - win_h) as i64;
                let (sx, sy) = (rng.random_range(0..=max_x), rng.random_range(0..=max_y));
                let (ex, ey) = (rng.random_range(0..=max_x), rng.random_range(0..=max_y));
                let n = video.frames.len();
                for (t, frame) in video.frames.iter_mut().enumerate() {
                    let a = if n > 1 { t as f64 / (n - 1) as f64 } else { 0.0 };
                    let x0 = sx + ((ex - sx) as f64 * a).round() as i64;
                    let y0 = sy + ((ey - sy) as f64 * a).round() as i64;
                    *frame = crop_window_scene(frame, x0, y0, win_w, win_h)?;
                    video.provenance[t].steps.push(ProvenanceStep::CropShift {
                        x0,
                        y0,
                        w: win_w,
                        h: win_h,
                    });
                }
            }
        }
    }

    if let Some(num_pastes) = cfg.copy_paste {
        let donor = gen_scene(&cfg.scene, rng);
        if !donor.instances.is_empty() {
            video = gen_copy_paste(&video, &donor, num_pastes, rng)?;
        }
    }
    Ok(video)
}

// ─────────────────────────────────────────────────────────────────────────────
// JSON-lines dataset format
// ─────────────────────────────────────────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct FrameRecord {
    frame: u64,
    width: usize,
    height: usize,
    instances: Vec<SceneInstance>,
    provenance: FrameProvenance,
}

/// Serialize a video as JSON lines, one frame record per line.
pub fn video_to_jsonl(video: &PseudoVideo) -> serde_json::Result<String> {
    let mut out = String::new();
    for (t, frame) in video.frames.iter().enumerate() {
        let record = FrameRecord {
            frame: t as u64,
            width: frame.width,
            height: frame.height,
            instances: frame.instances.clone(),
            provenance: video.provenance[t].clone(),
        };
        out.push_str(&serde_json::to_string(&record)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn video_from_jsonl(data: &str) -> Result<PseudoVideo, GenError> {
    let mut frames = Vec::new();
    let mut provenance = Vec::new();
    for (i, line) in data.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: FrameRecord = serde_json::from_str(line)
            .map_err(|e| GenError::BadRecord(format!("line {}: {e}", i + 1)))?;
        if record.frame as usize != frames.len() {
            return Err(GenError::BadRecord(format!(
                "line {}: expected frame {}, got {}",
                i + 1,
                frames.len(),
                record.frame
            )));
        }
        frames.push(LabeledScene {
            width: record.width,
            height: record.height,
            instances: record.instances,
        });
        provenance.push(record.provenance);
    }
    if frames.is_empty() {
        return Err(GenError::BadRecord("empty dataset file".into()));
    }
    Ok(PseudoVideo { frames, provenance })
}
