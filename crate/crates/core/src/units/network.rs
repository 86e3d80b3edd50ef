//! The two-task network: shared encoder, paired decoders with fusion units,
//! and the pose head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{pose_from_axis_angle, PoseVar};
use crate::ops::{Conv2dSpec, Mode};
use crate::params::{Owner, ParamStore, TaskId};

use super::fusion::{AffinityPropagation, CrossPropagation};
use super::layers::{Builder, Conv, Ctx, Init, ResidualBlock, TaskBatchNorm};

pub const NUM_STAGES: usize = 5;
pub const NUM_DISP_SCALES: usize = 4;

/// Scale applied to the pose head's raw output before exponentiation.
pub const POSE_SCALE: f64 = 0.01;

const DOWN: Conv2dSpec = Conv2dSpec { stride: 2, padding: 1 };
const IMAGE_MEAN: f64 = 0.45;
const IMAGE_STD: f64 = 0.225;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Encoder widths at 1/2 … 1/32 resolution.
    pub enc_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Decoder widths at 1/1 … 1/16 resolution (stage `i` upsamples to `1/2^i`).
    pub dec_channels: Vec<usize>,
    pub num_classes: usize,
    /// Decoder stages (0 = finest) that host an affinity propagation unit.
    pub apu_stages: Vec<usize>,
    /// Initial bias of the sigmoid disparity heads.
    pub disp_bias_init: f64,
    pub pose_channels: Vec<usize>,
    /// When false, CPU, APU and residual adapters are bypassed.
    pub fusion: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            enc_channels: vec![16, 32, 64, 128, 256],
            blocks_per_stage: 2,
            dec_channels: vec![16, 32, 64, 128, 256],
            num_classes: 19,
            apu_stages: vec![NUM_STAGES - 1],
            disp_bias_init: 0.0,
            pose_channels: vec![16, 32, 64, 64],
            fusion: true,
        }
    }
}

impl NetConfig {
    /// A narrow variant for desk-scale training.
    pub fn tiny() -> Self {
        Self {
            enc_channels: vec![16, 16, 16, 32, 32],
            blocks_per_stage: 1,
            dec_channels: vec![8, 8, 16, 16, 32],
            pose_channels: vec![8, 16, 16],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enc_channels.len() != NUM_STAGES || self.dec_channels.len() != NUM_STAGES {
            return Err(Error::Config(format!(
                "encoder and decoder need {NUM_STAGES} stages, got {} and {}",
                self.enc_channels.len(),
                self.dec_channels.len()
            )));
        }
        if self.dec_channels.iter().any(|&c| c < 2) {
            return Err(Error::Config("decoder widths must be at least 2".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 segmentation classes".into()));
        }
        if let Some(&s) = self.apu_stages.iter().find(|&&s| s >= NUM_STAGES) {
            return Err(Error::Config(format!("apu stage {s} out of range")));
        }
        if self.pose_channels.is_empty() {
            return Err(Error::Config("pose network needs at least one stage".into()));
        }
        Ok(())
    }

    /// Input sides must divide by this.
    pub fn input_multiple(&self) -> usize {
        (1 << NUM_STAGES).max(1 << self.pose_channels.len())
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    down: Conv,
    bn: TaskBatchNorm,
    blocks: Vec<ResidualBlock>,
}

/// Shared trunk with task-specific SE, batch norm and residual adapters.
#[derive(Clone, Debug)]
pub struct SharedEncoder {
    stages: Vec<EncoderStage>,
}

impl SharedEncoder {
    fn new<R: Rng>(b: &mut Builder<'_, R>, cfg: &NetConfig) -> Result<Self> {
        let mut cin = 3;
        let mut stages = Vec::new();
        for (i, &c) in cfg.enc_channels.iter().enumerate() {
            let name = format!("enc.s{i}");
            let down = Conv::new(b, &format!("{name}.down"), Owner::Shared, cin, c, 4, DOWN, false, Init::FanIn);
            let bn = TaskBatchNorm::new_task(b, &format!("{name}.bn"), c);
            let blocks = (0..cfg.blocks_per_stage)
                .map(|k| ResidualBlock::new(b, &format!("{name}.b{k}"), c))
                .collect::<Result<_>>()?;
            stages.push(EncoderStage { down, bn, blocks });
            cin = c;
        }
        Ok(Self { stages })
    }

    /// Features at 1/2 … 1/32 resolution for `task`.
    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, image: Var<'t>, task: TaskId, fusion: bool) -> Result<Vec<Var<'t>>> {
        let mut x = image.add_scalar(-IMAGE_MEAN).scale(1.0 / IMAGE_STD);
        let mut feats = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            x = st.down.forward(ctx, x)?;
            x = st.bn.forward_task(ctx, x, task)?.relu();
            for blk in &st.blocks {
                x = blk.forward(ctx, x, task, fusion)?;
            }
            feats.push(x);
        }
        Ok(feats)
    }
}

#[derive(Clone, Debug)]
struct DecoderStream {
    upconv0: Vec<Conv>,
    upconv1: Vec<Conv>,
}

impl DecoderStream {
    fn new<R: Rng>(b: &mut Builder<'_, R>, cfg: &NetConfig, task: TaskId) -> Self {
        let owner = Owner::Task(task);
        let (enc, dec) = (&cfg.enc_channels, &cfg.dec_channels);
        let mut upconv0 = Vec::new();
        let mut upconv1 = Vec::new();
        for i in 0..NUM_STAGES {
            let cin0 = if i == NUM_STAGES - 1 { enc[NUM_STAGES - 1] } else { dec[i + 1] };
            let cin1 = dec[i] + if i > 0 { enc[i - 1] } else { 0 };
            let name = format!("dec.{task}.s{i}");
            upconv0.push(Conv::new(b, &format!("{name}.up0"), owner, cin0, dec[i], 3, Conv2dSpec::SAME_3X3, true, Init::FanIn));
            upconv1.push(Conv::new(b, &format!("{name}.up1"), owner, cin1, dec[i], 3, Conv2dSpec::SAME_3X3, true, Init::FanIn));
        }
        Self { upconv0, upconv1 }
    }

    fn finish_stage<'t>(&self, ctx: &Ctx<'t, '_>, i: usize, x: Var<'t>, skip: Option<Var<'t>>) -> Result<Var<'t>> {
        let mut x = x.upsample_nearest(2)?;
        if let Some(s) = skip {
            x = Var::concat(&[x, s], 1)?;
        }
        Ok(self.upconv1[i].forward(ctx, x)?.elu())
    }
}

/// Depth and segmentation decoders exchanging features through CPUs at every
/// stage and APUs at the configured stages.
#[derive(Clone, Debug)]
pub struct DecoderPair {
    depth: DecoderStream,
    seg: DecoderStream,
    cpu: Vec<CrossPropagation>,
    apu: Vec<Option<AffinityPropagation>>,
    disp_heads: Vec<Conv>,
    seg_head: Conv,
}

/// Network outputs for one batch.
#[derive(Clone, Debug)]
pub struct Prediction<'t> {
    /// Sigmoid disparity `[N, 1, H/2^s, W/2^s]` for scales `s = 0..4`.
    pub disp: Vec<Var<'t>>,
    /// Class logits `[N, K, H, W]`.
    pub seg_logits: Var<'t>,
}

impl DecoderPair {
    fn new<R: Rng>(b: &mut Builder<'_, R>, cfg: &NetConfig) -> Result<Self> {
        let depth = DecoderStream::new(b, cfg, TaskId::Depth);
        let seg = DecoderStream::new(b, cfg, TaskId::Seg);
        let dec = &cfg.dec_channels;
        let cpu = (0..NUM_STAGES)
            .map(|i| CrossPropagation::new(b, &format!("cpu.s{i}"), dec[i], dec[i]))
            .collect();
        let apu = (0..NUM_STAGES)
            .map(|i| {
                cfg.apu_stages
                    .contains(&i)
                    .then(|| AffinityPropagation::new(b, &format!("apu.s{i}"), dec[i], dec[i]))
                    .transpose()
            })
            .collect::<Result<_>>()?;
        let owner = Owner::Task(TaskId::Depth);
        let disp_heads = (0..NUM_DISP_SCALES)
            .map(|i| {
                let head = Conv::new(b, &format!("dec.depth.disp{i}"), owner, dec[i], 1, 3, Conv2dSpec::SAME_3X3, true, Init::FanIn);
                b.store
                    .value_mut(head.bias.expect("head has bias"))
                    .data_mut()
                    .fill(cfg.disp_bias_init);
                head
            })
            .collect();
        let seg_head = Conv::new(
            b,
            "dec.seg.logits",
            Owner::Task(TaskId::Seg),
            dec[0],
            cfg.num_classes,
            3,
            Conv2dSpec::SAME_3X3,
            true,
            Init::FanIn,
        );
        Ok(Self {
            depth,
            seg,
            cpu,
            apu,
            disp_heads,
            seg_head,
        })
    }

    pub fn forward<'t>(
        &self,
        ctx: &mut Ctx<'t, '_>,
        enc_depth: &[Var<'t>],
        enc_seg: &[Var<'t>],
        fusion: bool,
    ) -> Result<Prediction<'t>> {
        if enc_depth.len() != NUM_STAGES || enc_seg.len() != NUM_STAGES {
            return Err(Error::Config(format!(
                "decoder expects {NUM_STAGES} encoder scales, got {} and {}",
                enc_depth.len(),
                enc_seg.len()
            )));
        }
        let mut d = enc_depth[NUM_STAGES - 1];
        let mut s = enc_seg[NUM_STAGES - 1];
        let mut disp = vec![None; NUM_DISP_SCALES];
        for i in (0..NUM_STAGES).rev() {
            d = self.depth.upconv0[i].forward(ctx, d)?.elu();
            s = self.seg.upconv0[i].forward(ctx, s)?.elu();
            if fusion {
                (d, s) = self.cpu[i].forward(ctx, d, s)?;
                if let Some(apu) = &self.apu[i] {
                    d = apu.forward(ctx, d, s)?;
                }
            }
            let skip = |feats: &[Var<'t>]| (i > 0).then(|| feats[i - 1]);
            d = self.depth.finish_stage(ctx, i, d, skip(enc_depth))?;
            s = self.seg.finish_stage(ctx, i, s, skip(enc_seg))?;
            if i < NUM_DISP_SCALES {
                disp[i] = Some(self.disp_heads[i].forward(ctx, d)?.sigmoid());
            }
        }
        Ok(Prediction {
            disp: disp.into_iter().map(|d| d.expect("every scale filled")).collect(),
            seg_logits: self.seg_head.forward(ctx, s)?,
        })
    }
}

/// Frame-pair pose regressor producing target→source transforms.
#[derive(Clone, Debug)]
pub struct PoseNet {
    convs: Vec<Conv>,
    head: Conv,
}

impl PoseNet {
    fn new<R: Rng>(b: &mut Builder<'_, R>, cfg: &NetConfig) -> Self {
        let owner = Owner::Task(TaskId::Depth);
        let mut cin = 6;
        let convs = cfg
            .pose_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv::new(b, &format!("pose.c{i}"), owner, cin, c, 4, DOWN, true, Init::FanIn);
                cin = c;
                conv
            })
            .collect();
        let head = Conv::pointwise(b, "pose.head", owner, cin, 6, Init::FanIn);
        Self { convs, head }
    }

    /// Raw 6-vectors `[N, 6]` (axis-angle, translation) after output scaling.
    pub fn raw<'t>(&self, ctx: &Ctx<'t, '_>, target: Var<'t>, source: Var<'t>) -> Result<Var<'t>> {
        let mut x = Var::concat(&[target, source], 1)?
            .add_scalar(-IMAGE_MEAN)
            .scale(1.0 / IMAGE_STD);
        for c in &self.convs {
            x = c.forward(ctx, x)?.relu();
        }
        Ok(self.head.forward(ctx, x)?.global_avg_pool()?.scale(POSE_SCALE))
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, target: Var<'t>, source: Var<'t>) -> Result<PoseVar<'t>> {
        pose_from_axis_angle(self.raw(ctx, target, source)?)
    }
}

/// The full model with its parameters.
#[derive(Clone, Debug)]
pub struct SafeNet {
    pub config: NetConfig,
    pub store: ParamStore,
    pub encoder: SharedEncoder,
    pub decoder: DecoderPair,
    pub pose: PoseNet,
}

impl SafeNet {
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let encoder = SharedEncoder::new(&mut b, &config)?;
        let decoder = DecoderPair::new(&mut b, &config)?;
        let pose = PoseNet::new(&mut b, &config);
        Ok(Self {
            config,
            store,
            encoder,
            decoder,
            pose,
        })
    }

    pub fn num_trainable(&self) -> usize {
        self.store.num_trainable()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.input_multiple();
        match *shape {
            [_, 3, h, w] if h % m == 0 && w % m == 0 => Ok(()),
            _ => Err(Error::shape(shape, format!("input must be [N, 3, H, W] with H, W divisible by {m}"))),
        }
    }

    /// Both task forwards for a batch `[N, 3, H, W]`.
    pub fn forward<'t>(&mut self, tape: &'t Tape, image: Var<'t>, mode: Mode) -> Result<Prediction<'t>> {
        self.check_input(&image.shape())?;
        let fusion = self.config.fusion;
        let mut ctx = Ctx::new(tape, &mut self.store, mode);
        let enc_depth = self.encoder.forward(&mut ctx, image, TaskId::Depth, fusion)?;
        let enc_seg = self.encoder.forward(&mut ctx, image, TaskId::Seg, fusion)?;
        self.decoder.forward(&mut ctx, &enc_depth, &enc_seg, fusion)
    }

    /// Pose target→source for frame batches `[N, 3, H, W]`.
    pub fn pose_forward<'t>(&mut self, tape: &'t Tape, target: Var<'t>, source: Var<'t>) -> Result<PoseVar<'t>> {
        self.check_input(&target.shape())?;
        let ctx = Ctx::new(tape, &mut self.store, Mode::Train);
        self.pose.forward(&ctx, target, source)
    }

    /// Per-task encoder features, for inspecting the shared trunk.
    pub fn encode<'t>(&mut self, tape: &'t Tape, image: Var<'t>, task: TaskId, mode: Mode) -> Result<Vec<Var<'t>>> {
        self.check_input(&image.shape())?;
        let fusion = self.config.fusion;
        let mut ctx = Ctx::new(tape, &mut self.store, mode);
        self.encoder.forward(&mut ctx, image, task, fusion)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn image(n: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[n, 3, h, w], |i| 0.5 + 0.4 * (i as f64 * 0.13).sin())
    }

    #[test]
    fn toy_config_output_shapes() {
        let mut net = SafeNet::new(NetConfig::default(), 0).unwrap();
        let tape = Tape::new();
        let x = tape.constant(image(1, 64, 192));
        let out = net.forward(&tape, x, Mode::Eval).unwrap();
        let shapes: Vec<_> = out.disp.iter().map(|d| d.shape()).collect();
        assert_eq!(
            shapes,
            vec![vec![1, 1, 64, 192], vec![1, 1, 32, 96], vec![1, 1, 16, 48], vec![1, 1, 8, 24]]
        );
        assert_eq!(out.seg_logits.shape(), vec![1, 19, 64, 192]);
        for d in &out.disp {
            assert!(d.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn fusion_free_twin_matches_at_init() {
        let mut net = SafeNet::new(NetConfig::tiny(), 5).unwrap();
        let mut twin = net.clone();
        twin.config.fusion = false;
        let x = image(2, 32, 64);
        let (t1, t2) = (Tape::new(), Tape::new());
        let a = net.forward(&t1, t1.constant(x.clone()), Mode::Train).unwrap();
        let b = twin.forward(&t2, t2.constant(x), Mode::Train).unwrap();
        for (p, q) in a.disp.iter().zip(&b.disp) {
            assert_eq!(p.value(), q.value());
        }
        assert_eq!(a.seg_logits.value(), b.seg_logits.value());
    }

    #[test]
    fn zero_pose_head_gives_identity() {
        let mut net = SafeNet::new(NetConfig::tiny(), 1).unwrap();
        let head = net.pose.head.clone();
        net.store.value_mut(head.weight).data_mut().fill(0.0);
        let tape = Tape::new();
        let x = tape.constant(image(2, 32, 64));
        let pose = net.pose_forward(&tape, x, x).unwrap();
        for t in pose.to_transforms() {
            assert_eq!(t, crate::geometry::RigidTransform::identity());
        }
    }

    #[test]
    fn random_pose_is_orthonormal() {
        let mut net = SafeNet::new(NetConfig::tiny(), 2).unwrap();
        let head = net.pose.head.clone();
        let w = net.store.value_mut(head.weight);
        *w = w.map(|v| v * 500.0);
        let tape = Tape::new();
        let a = tape.constant(image(2, 32, 64));
        let b = tape.constant(image(2, 32, 64).map(|v| 1.0 - v));
        for t in net.pose_forward(&tape, a, b).unwrap().to_transforms() {
            assert!(t.orthonormality_error() < 1e-9);
        }
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let mut net = SafeNet::new(NetConfig::tiny(), 0).unwrap();
        let tape = Tape::new();
        assert!(net.forward(&tape, tape.constant(image(1, 30, 64)), Mode::Eval).is_err());
        let mut cfg = NetConfig::tiny();
        cfg.enc_channels.pop();
        assert!(matches!(SafeNet::new(cfg, 0), Err(Error::Config(_))));
    }
}
