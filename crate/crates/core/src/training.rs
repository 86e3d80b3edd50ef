//! Synthetic scenes, the routed training step and the fit loop.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    inv_depth_from_sigmoid, warp_sequence, warp_stereo, CameraIntrinsics, DepthMap, PoseVar, RigidTransform,
    StereoDirection,
};
use crate::losses::{
    cross_entropy_seg, min_reprojection_automask, photometric_error_map, smoothness_loss, total_loss,
    with_invalid_surrogate, LossBreakdown, LossWeights,
};
use crate::ops::Mode;
use crate::optim::{AdamConfig, AdamState};
use crate::params::{Owner, ParamId, ParamKind, ParamStore, TaskId};
use crate::tensor::Tensor;
use crate::units::SafeNet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Rectified pair; the left view is reconstructed from the right one.
    Stereo,
    /// Triplet `t−1, t, t+1`; the middle frame is reconstructed.
    Sequence,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stereo" => Ok(Self::Stereo),
            "sequence" => Ok(Self::Sequence),
            _ => Err(Error::Config(format!("mode must be stereo or sequence, got {s:?}"))),
        }
    }
}

/// Where sequence-mode poses come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseSource {
    GroundTruth,
    Network,
}

impl std::str::FromStr for PoseSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "groundtruth" | "gt" => Ok(Self::GroundTruth),
            "network" => Ok(Self::Network),
            _ => Err(Error::Config(format!("pose source must be gt or network, got {s:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Scenes

/// An infinite textured plane `n · X = offset` in target-camera coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub normal: [f64; 3],
    pub offset: f64,
    pub class_id: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Stereo baseline in metres; the right camera sits at `+baseline` along x.
    pub baseline: f64,
    /// Camera centre of frame `t+1` in frame `t`; frame `t−1` sits at the negation.
    pub motion: [f64; 3],
    pub planes: Vec<PlaneSpec>,
    /// Longest texture period in target-view pixels.
    pub texture_period: f64,
    pub illumination_scale: f64,
}

impl SceneSpec {
    /// One fronto-parallel plane at `depth`, class 0.
    pub fn fronto_parallel(width: usize, height: usize, focal: f64, baseline: f64, depth: f64) -> Self {
        Self {
            width,
            height,
            focal,
            baseline,
            motion: [baseline, 0.0, 0.0],
            planes: vec![PlaneSpec {
                normal: [0.0, 0.0, 1.0],
                offset: depth,
                class_id: 0,
            }],
            texture_period: 24.0,
            illumination_scale: 1.0,
        }
    }

    /// Back wall, floor and left wall (classes 0, 1, 2) with seed-jittered
    /// placement, a small corridor at 2–8 m.
    pub fn three_planes(width: usize, height: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce4_e5ee_d000_0001);
        let focal = width as f64 * 0.8;
        let back = rng.gen_range(5.0..8.0);
        let floor = rng.gen_range(0.8..1.4);
        let wall = rng.gen_range(1.2..2.5);
        let tilt: f64 = rng.gen_range(-0.15..0.15);
        Self {
            width,
            height,
            focal,
            baseline: 0.1,
            motion: [0.05, 0.0, 0.15],
            planes: vec![
                PlaneSpec {
                    normal: [tilt.sin(), 0.0, tilt.cos()],
                    offset: back,
                    class_id: 0,
                },
                PlaneSpec {
                    normal: [0.0, 1.0, 0.0],
                    offset: floor,
                    class_id: 1,
                },
                PlaneSpec {
                    normal: [-1.0, 0.0, 0.0],
                    offset: wall,
                    class_id: 2,
                },
            ],
            texture_period: 24.0,
            illumination_scale: 1.0,
        }
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(
            self.focal,
            self.focal,
            (self.width as f64 - 1.0) / 2.0,
            (self.height as f64 - 1.0) / 2.0,
        )
        .map_err(|e| Error::Scene(e.to_string()))
    }

    fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Scene(m));
        if self.width < 2 || self.height < 2 {
            return err(format!("image must be at least 2×2, got {}×{}", self.width, self.height));
        }
        if !(self.baseline > 0.0) || !(self.texture_period > 0.0) {
            return err("baseline and texture period must be positive".into());
        }
        if !(self.illumination_scale > 0.0 && self.illumination_scale <= 1.0) {
            return err(format!("illumination scale must lie in (0, 1], got {}", self.illumination_scale));
        }
        if self.planes.is_empty() {
            return err("scene has no planes".into());
        }
        let centres = [
            [0.0; 3],
            [self.baseline, 0.0, 0.0],
            self.motion,
            self.motion.map(|v| -v),
        ];
        for (i, p) in self.planes.iter().enumerate() {
            let norm = dot(p.normal, p.normal).sqrt();
            if !(norm > 1e-12) || !norm.is_finite() {
                return err(format!("plane {i} has a zero normal"));
            }
            for c in &centres {
                if ((dot(p.normal, *c) - p.offset) / norm).abs() < 1e-9 {
                    return err(format!("plane {i} passes through a camera centre"));
                }
            }
        }
        Ok(())
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Colour as a function of the 3D point: a sum of oriented sinusoids over
/// the point's projection from the target centre (like a slide projector at
/// the target camera), on a per-plane base colour. Being a function of the
/// point, it is consistent across views, and it stays smooth in pixel space
/// at any surface slant.
#[derive(Clone, Debug)]
struct Texture {
    base: [f64; 3],
    waves: Vec<(f64, f64, f64, [f64; 3])>, // (ω, cos θ, sin θ, phase per channel)
}

const WAVE_AMPLITUDE: f64 = 0.08;

impl Texture {
    fn new(period_px: f64, rng: &mut ChaCha8Rng) -> Self {
        let base = [(); 3].map(|_| rng.gen_range(0.35..0.65));
        let waves = [1.0, 0.71, 0.53, 0.41]
            .iter()
            .map(|&f| {
                let theta: f64 = rng.gen_range(0.0..TAU);
                let omega = TAU / (period_px * f);
                (omega, theta.cos(), theta.sin(), [(); 3].map(|_| rng.gen_range(0.0..TAU)))
            })
            .collect();
        Self { base, waves }
    }

    fn color(&self, x: [f64; 3], focal: f64) -> [f64; 3] {
        let (a, b) = (focal * x[0] / x[2], focal * x[1] / x[2]);
        let mut c = self.base;
        for &(omega, ct, st, phase) in &self.waves {
            let arg = omega * (a * ct + b * st);
            for ch in 0..3 {
                c[ch] += WAVE_AMPLITUDE * (arg + phase[ch]).sin();
            }
        }
        c
    }
}

struct Render {
    image: Tensor,
    depth: Vec<f64>,
    labels: Vec<u8>,
}

fn render(spec: &SceneSpec, k: &CameraIntrinsics, textures: &[Texture], centre: [f64; 3]) -> Result<Render> {
    let (w, h) = (spec.width, spec.height);
    let mut image = Tensor::zeros(&[3, h, w]);
    let mut depth = vec![0.0; h * w];
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let r = k.ray(x as f64, y as f64);
            let mut best: Option<(f64, usize)> = None;
            for (i, p) in spec.planes.iter().enumerate() {
                let denom = dot(p.normal, r);
                if denom.abs() < 1e-12 {
                    continue;
                }
                let t = (p.offset - dot(p.normal, centre)) / denom;
                if t > 1e-9 && best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, i));
                }
            }
            let (t, i) = best.ok_or_else(|| Error::Scene(format!("ray through pixel ({x}, {y}) hits no plane")))?;
            let hit = [centre[0] + t * r[0], centre[1] + t * r[1], centre[2] + t * r[2]];
            let c = textures[i].color(hit, spec.focal);
            for (ch, v) in c.iter().enumerate() {
                image.set(&[ch, y, x], v * spec.illumination_scale);
            }
            // rays have unit z, so the ray parameter is the depth
            depth[y * w + x] = t;
            labels[y * w + x] = spec.planes[i].class_id;
        }
    }
    Ok(Render { image, depth, labels })
}

/// A rendered training/evaluation example. Frame 0 is the target view.
#[derive(Clone, Debug)]
pub struct SceneSample {
    pub mode: TrainMode,
    /// Stereo: `[left, right]`. Sequence: `[t, t−1, t+1]`. Each `[3, H, W]`.
    pub frames: Vec<Tensor>,
    pub intrinsics: CameraIntrinsics,
    pub baseline: f64,
    pub gt_depth: DepthMap,
    /// Target→source transform for each of `frames[1..]`.
    pub gt_poses: Vec<RigidTransform>,
    /// Class id per target pixel, row-major.
    pub seg_mask: Vec<u8>,
    pub illumination_scale: f64,
}

impl SceneSample {
    pub fn target(&self) -> &Tensor {
        &self.frames[0]
    }

    pub fn sources(&self) -> &[Tensor] {
        &self.frames[1..]
    }

    pub fn height(&self) -> usize {
        self.frames[0].shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames[0].shape()[2]
    }
}

/// Ray-casts the scene from every camera. Surfaces carry world-anchored
/// textures, so views agree exactly under the true geometry.
pub fn generate_synthetic_scene(spec: &SceneSpec, mode: TrainMode, seed: u64) -> Result<SceneSample> {
    spec.validate()?;
    let k = spec.intrinsics()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let textures: Vec<_> = spec
        .planes
        .iter()
        .map(|_| Texture::new(spec.texture_period, &mut rng))
        .collect();
    let centres = match mode {
        TrainMode::Stereo => vec![[0.0; 3], [spec.baseline, 0.0, 0.0]],
        TrainMode::Sequence => vec![[0.0; 3], spec.motion.map(|v| -v), spec.motion],
    };
    let mut frames = Vec::new();
    let mut target = None;
    for c in &centres {
        let r = render(spec, &k, &textures, *c)?;
        frames.push(r.image.clone());
        target.get_or_insert(r);
    }
    let target = target.expect("at least one view");
    let gt_poses = centres[1..]
        .iter()
        .map(|c| RigidTransform::from_translation(c.map(|v| -v)))
        .collect();
    let depth = Tensor::new(&[1, spec.height, spec.width], target.depth)?;
    Ok(SceneSample {
        mode,
        frames,
        intrinsics: k,
        baseline: spec.baseline,
        gt_depth: DepthMap::from_tensor(depth)?,
        gt_poses,
        seg_mask: target.labels,
        illumination_scale: spec.illumination_scale,
    })
}

/// `count` jittered three-plane scenes.
pub fn three_plane_scene_set(width: usize, height: usize, mode: TrainMode, count: usize, seed: u64) -> Result<Vec<SceneSample>> {
    (0..count as u64)
        .map(|i| {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i);
            generate_synthetic_scene(&SceneSpec::three_planes(width, height, s), mode, s)
        })
        .collect()
}

/// Pixel-wise brightness scaling clamped to `[0, 1]`.
pub fn darken(img: &Tensor, scale: f64) -> Result<Tensor> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::Range(format!("brightness scale must lie in (0, 1], got {scale}")));
    }
    Ok(img.map(|v| (v * scale).clamp(0.0, 1.0)))
}

// ---------------------------------------------------------------------------
// Batches and predictors

/// Stacked samples of one mode.
#[derive(Clone, Debug)]
pub struct Batch {
    pub mode: TrainMode,
    /// `[N, 3, H, W]`
    pub target: Tensor,
    /// One `[N, 3, H, W]` tensor per source view.
    pub sources: Vec<Tensor>,
    /// `poses[s][n]`: target→source for source `s` of sample `n`.
    pub poses: Vec<Vec<RigidTransform>>,
    pub labels: Vec<u8>,
    pub intrinsics: CameraIntrinsics,
    pub baseline: f64,
}

impl Batch {
    pub fn from_samples(samples: &[&SceneSample]) -> Result<Self> {
        let first = *samples.first().ok_or_else(|| Error::Config("empty batch".into()))?;
        for s in samples {
            if s.mode != first.mode || s.frames.len() != first.frames.len() || s.intrinsics != first.intrinsics {
                return Err(Error::Config("batch samples disagree in mode, views or intrinsics".into()));
            }
        }
        let stack = |i: usize| Tensor::stack(&samples.iter().map(|s| s.frames[i].clone()).collect::<Vec<_>>());
        Ok(Self {
            mode: first.mode,
            target: stack(0)?,
            sources: (1..first.frames.len()).map(stack).collect::<Result<_>>()?,
            poses: (0..first.gt_poses.len())
                .map(|j| samples.iter().map(|s| s.gt_poses[j]).collect())
                .collect(),
            labels: samples.iter().flat_map(|s| s.seg_mask.iter().copied()).collect(),
            intrinsics: first.intrinsics,
            baseline: first.baseline,
        })
    }

    pub fn size(&self) -> usize {
        self.target.shape()[0]
    }

    /// `b · f`, converting inverse depth to stereo disparity in pixels.
    pub fn disparity_factor(&self) -> f64 {
        self.baseline * self.intrinsics.fx
    }
}

/// Outputs a trainable model hands to the loss.
pub struct Outputs<'t> {
    /// Inverse depth `[N, 1, H/2^s, W/2^s]`, finest first.
    pub inv_depth: Vec<Var<'t>>,
    pub seg_logits: Option<Var<'t>>,
    /// Target→source poses, one per source; `None` uses ground truth.
    pub poses: Option<Vec<PoseVar<'t>>>,
}

pub trait Predictor {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn predict<'t>(&mut self, tape: &'t Tape, batch: &Batch, pose: PoseSource) -> Result<Outputs<'t>>;
}

impl Predictor for SafeNet {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn predict<'t>(&mut self, tape: &'t Tape, batch: &Batch, pose: PoseSource) -> Result<Outputs<'t>> {
        let target = tape.constant(batch.target.clone());
        let pred = self.forward(tape, target, Mode::Train)?;
        let poses = match (batch.mode, pose) {
            (TrainMode::Sequence, PoseSource::Network) => Some(
                batch
                    .sources
                    .iter()
                    .map(|s| self.pose_forward(tape, target, tape.constant(s.clone())))
                    .collect::<Result<Vec<_>>>()?,
            ),
            _ => None,
        };
        Ok(Outputs {
            inv_depth: pred.disp.into_iter().map(inv_depth_from_sigmoid).collect(),
            seg_logits: Some(pred.seg_logits),
            poses,
        })
    }
}

/// A free per-pixel disparity field, optimised directly. The parameter is
/// the log of the disparity in pixels, keeping it positive and making Adam's
/// step size relative.
#[derive(Clone, Debug)]
pub struct DisparityField {
    pub store: ParamStore,
    pub id: ParamId,
}

impl DisparityField {
    pub fn new(batch: usize, height: usize, width: usize, initial: f64) -> Result<Self> {
        if !(initial > 0.0) {
            return Err(Error::Range(format!("initial disparity must be positive, got {initial}")));
        }
        let mut store = ParamStore::new();
        let id = store.trainable(
            "log_disparity",
            Owner::Task(TaskId::Depth),
            Tensor::full(&[batch, 1, height, width], initial.ln()),
        );
        Ok(Self { store, id })
    }

    /// Current disparity in pixels.
    pub fn disparity(&self) -> Tensor {
        self.store.value(self.id).map(f64::exp)
    }
}

impl Predictor for DisparityField {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn predict<'t>(&mut self, tape: &'t Tape, batch: &Batch, _pose: PoseSource) -> Result<Outputs<'t>> {
        let d = tape.param(&self.store, self.id).exp();
        if d.shape() != [batch.size(), 1, batch.target.shape()[2], batch.target.shape()[3]] {
            return Err(Error::dim("disparity_field", &d.shape(), batch.target.shape()));
        }
        Ok(Outputs {
            inv_depth: vec![d.scale(1.0 / batch.disparity_factor())],
            seg_logits: None,
            poses: None,
        })
    }
}

// ---------------------------------------------------------------------------
// Training step

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub iterations: u64,
    pub weights: LossWeights,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub mode: TrainMode,
    pub pose_source: PoseSource,
    /// Identity-reprojection auto-masking (sequence mode only).
    pub automask: bool,
    /// Checkpoint period in iterations; 0 disables.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch_size: 8,
            iterations: 1000,
            weights: LossWeights::default(),
            seed: 0,
            height: 64,
            width: 192,
            mode: TrainMode::Stereo,
            pose_source: PoseSource::GroundTruth,
            automask: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.height < 2 || self.width < 2 {
            return Err(Error::Config(format!("resolution {}×{} too small", self.height, self.width)));
        }
        self.adam().map(|_| ())
    }

    pub fn adam(&self) -> Result<AdamState> {
        AdamState::new(AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        })
    }
}

/// Result of one training step.
#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Applied(LossBreakdown),
    /// No pixel survived masking; parameters are untouched.
    Skipped(String),
}

/// Per-task objectives of a batch, before any backward pass.
pub struct Objectives<'t> {
    /// `L_photo + λ_smooth · L_smooth`
    pub depth: Var<'t>,
    /// `λ_seg · L_seg`, absent for models without a segmentation head.
    pub seg: Option<Var<'t>>,
    pub breakdown: LossBreakdown,
}

fn reconstruct<'t>(
    batch: &Batch,
    tape: &'t Tape,
    inv: Var<'t>,
    poses: &Option<Vec<PoseVar<'t>>>,
    alpha: f64,
) -> Result<Vec<Var<'t>>> {
    let target = tape.constant(batch.target.clone());
    let mut maps = Vec::new();
    for (i, src) in batch.sources.iter().enumerate() {
        let src = tape.constant(src.clone());
        let warped = match batch.mode {
            TrainMode::Stereo => warp_stereo(src, inv.scale(batch.disparity_factor()), StereoDirection::Left)?,
            TrainMode::Sequence => {
                let pose = match poses {
                    Some(p) => p[i],
                    None => PoseVar::constant(tape, &batch.poses[i])?,
                };
                warp_sequence(src, inv.recip(), &pose, &batch.intrinsics)?
            }
        };
        let err = photometric_error_map(target, warped.image, alpha)?;
        maps.push(with_invalid_surrogate(err, &warped.valid)?);
    }
    Ok(maps)
}

/// Builds both task objectives. Every inverse-depth scale is upsampled
/// (nearest) to full resolution; photometric terms are averaged over scales
/// and smoothness terms are weighted by `1/2^s`.
pub fn objectives<'t>(outputs: &Outputs<'t>, batch: &Batch, tape: &'t Tape, cfg: &TrainConfig) -> Result<Objectives<'t>> {
    let w = &cfg.weights;
    let full = batch.target.shape()[2];
    let identity: Vec<Tensor> = if batch.mode == TrainMode::Sequence && cfg.automask {
        let target = tape.constant(batch.target.clone());
        batch
            .sources
            .iter()
            .map(|s| Ok(photometric_error_map(target, tape.constant(s.clone()), w.alpha_ssim)?.value().as_ref().clone()))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let mut photo: Option<Var<'t>> = None;
    let mut smooth: Option<Var<'t>> = None;
    let mut valid = 0;
    let scales = outputs.inv_depth.len();
    if scales == 0 {
        return Err(Error::Config("model produced no depth scales".into()));
    }
    for (s, &inv) in outputs.inv_depth.iter().enumerate() {
        let factor = full / inv.shape()[2];
        let inv = inv.upsample_nearest(factor)?;
        let maps = reconstruct(batch, tape, inv, &outputs.poses, w.alpha_ssim)?;
        let rep = min_reprojection_automask(&maps, &identity)?;
        let loss = rep.loss()?;
        valid += rep.valid_count();
        let sm = smoothness_loss(inv, &batch.target)?.scale(1.0 / (1u64 << s) as f64);
        photo = Some(match photo {
            None => loss,
            Some(p) => p.add(loss)?,
        });
        smooth = Some(match smooth {
            None => sm,
            Some(p) => p.add(sm)?,
        });
    }
    let photo = photo.expect("at least one scale").scale(1.0 / scales as f64);
    let smooth = smooth.expect("at least one scale");
    let seg = outputs
        .seg_logits
        .map(|l| cross_entropy_seg(l, &batch.labels))
        .transpose()?;
    let breakdown = total_loss(
        photo.item(),
        smooth.item(),
        seg.map_or(0.0, |s| s.item()),
        valid / scales,
        w,
    )?;
    Ok(Objectives {
        depth: photo.add(smooth.scale(w.lambda_smooth))?,
        seg: seg.map(|s| s.scale(w.lambda_seg)),
        breakdown,
    })
}

/// Gradients of both objectives, routed by ownership: shared parameters get
/// the sum, task-owned parameters only their own task's gradient.
pub fn routed_gradients(tape: &Tape, obj: &Objectives<'_>, store: &ParamStore) -> Result<Vec<(ParamId, Tensor)>> {
    let roots: Vec<Var<'_>> = std::iter::once(obj.depth).chain(obj.seg).collect();
    let grads = tape.backward_multi(&roots)?;
    let mut out = Vec::new();
    for id in store.trainable_ids() {
        let d = grads[0].param(id);
        let s = grads.get(1).and_then(|g| g.param(id));
        let g = match store.owner(id) {
            Owner::Task(TaskId::Depth) => d.cloned(),
            Owner::Task(TaskId::Seg) => s.cloned(),
            Owner::Shared => match (d, s) {
                (Some(a), Some(b)) => Some(a.zip_map(b, |x, y| x + y)?),
                (a, b) => a.or(b).cloned(),
            },
        };
        if let Some(g) = g {
            out.push((id, g));
        }
    }
    Ok(out)
}

/// Forward both tasks, route gradients and apply one Adam update.
pub fn training_step<P: Predictor>(model: &mut P, adam: &mut AdamState, batch: &Batch, cfg: &TrainConfig) -> Result<StepOutcome> {
    // running statistics advance during the forward pass; a skipped step
    // must not leave them moved
    let buffers: Vec<(ParamId, Tensor)> = model
        .store()
        .entries()
        .filter(|(_, e)| e.kind == ParamKind::Buffer)
        .map(|(id, e)| (id, e.value.clone()))
        .collect();
    let tape = Tape::new();
    let outputs = model.predict(&tape, batch, cfg.pose_source)?;
    let obj = match objectives(&outputs, batch, &tape, cfg) {
        Ok(o) => o,
        Err(Error::Degenerate(m)) => {
            for (id, v) in buffers {
                *model.store_mut().value_mut(id) = v;
            }
            return Ok(StepOutcome::Skipped(m));
        }
        Err(e) => return Err(e),
    };
    let grads = routed_gradients(&tape, &obj, model.store())?;
    for (id, g) in &grads {
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", model.store().entry(*id).name)));
        }
    }
    adam.step(model.store_mut(), &grads)?;
    Ok(StepOutcome::Applied(obj.breakdown))
}

// ---------------------------------------------------------------------------
// Fit loop

/// Optimizer state and position of a run, everything needed to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct FitState {
    pub adam: AdamState,
    pub iteration: u64,
}

impl FitState {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            adam: cfg.adam()?,
            iteration: 0,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitReport {
    pub rows: Vec<(u64, LossBreakdown)>,
    pub skipped: BTreeMap<u64, String>,
}

pub const LOSS_CSV_HEADER: &str = "iter,photo,smooth,seg,total,valid_px";

impl FitReport {
    pub fn csv_row(iter: u64, l: &LossBreakdown) -> String {
        format!("{iter},{},{},{},{},{}", l.photo, l.smooth, l.seg, l.total, l.valid_pixel_count)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOSS_CSV_HEADER);
        s.push('\n');
        for (i, l) in &self.rows {
            s.push_str(&Self::csv_row(*i, l));
            s.push('\n');
        }
        s
    }
}

/// Sample indices of iteration `iter`: consecutive slices of per-epoch
/// shuffles, so any iteration can be reproduced without replaying earlier ones.
pub fn batch_indices(iter: u64, batch_size: usize, len: usize, seed: u64) -> Vec<usize> {
    let mut cache: Option<(u64, Vec<usize>)> = None;
    (0..batch_size as u64)
        .map(|j| {
            let k = iter * batch_size as u64 + j;
            let epoch = k / len as u64;
            if cache.as_ref().map_or(true, |(e, _)| *e != epoch) {
                let mut perm: Vec<usize> = (0..len).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15)));
                cache = Some((epoch, perm));
            }
            cache.as_ref().expect("filled above").1[(k % len as u64) as usize]
        })
        .collect()
}

/// Runs until `state.iteration == cfg.iterations`, calling `after_step` after
/// every iteration (for logging and checkpoints).
pub fn fit<P: Predictor>(
    model: &mut P,
    state: &mut FitState,
    scenes: &[SceneSample],
    cfg: &TrainConfig,
    mut after_step: impl FnMut(u64, &StepOutcome, &P, &FitState) -> Result<()>,
) -> Result<FitReport> {
    cfg.validate()?;
    if scenes.is_empty() && state.iteration < cfg.iterations {
        return Err(Error::Config("no training scenes".into()));
    }
    let mut report = FitReport::default();
    while state.iteration < cfg.iterations {
        let iter = state.iteration;
        let picks: Vec<&SceneSample> = batch_indices(iter, cfg.batch_size, scenes.len(), cfg.seed)
            .into_iter()
            .map(|i| &scenes[i])
            .collect();
        let batch = Batch::from_samples(&picks)?;
        let outcome = training_step(model, &mut state.adam, &batch, cfg).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("iteration {iter}: {m}")),
            e => e,
        })?;
        match &outcome {
            StepOutcome::Applied(l) => report.rows.push((iter, *l)),
            StepOutcome::Skipped(m) => {
                report.skipped.insert(iter, m.clone());
            }
        }
        state.iteration += 1;
        after_step(iter, &outcome, model, state)?;
    }
    Ok(report)
}
