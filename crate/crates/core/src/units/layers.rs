use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{Conv2dSpec, Mode, RunningStats};
use crate::params::{fan_in_uniform, Owner, ParamId, ParamStore, TaskId};
use crate::tensor::Tensor;

/// Forward-pass context: the tape being recorded, the parameter store (whose
/// batch-norm buffers are updated in train mode) and the mode.
pub struct Ctx<'t, 's> {
    pub tape: &'t Tape,
    pub store: &'s mut ParamStore,
    pub mode: Mode,
}

impl<'t, 's> Ctx<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s mut ParamStore, mode: Mode) -> Self {
        Self { tape, store, mode }
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        self.tape.param(self.store, id)
    }
}

/// How a layer's weights start out.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`, bias zero.
    FanIn,
    /// All zeros, so the layer initially outputs exactly zero.
    Zero,
}

/// Construction helper threading the store and the initialisation RNG.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    pub fn weight(&mut self, name: &str, owner: Owner, shape: &[usize], fan_in: usize, init: Init) -> ParamId {
        let value = match init {
            Init::FanIn => fan_in_uniform(shape, fan_in, self.rng),
            Init::Zero => Tensor::zeros(shape),
        };
        self.store.trainable(name, owner, value)
    }

    pub fn constant(&mut self, name: &str, owner: Owner, value: Tensor) -> ParamId {
        self.store.trainable(name, owner, value)
    }

    pub fn buffer(&mut self, name: &str, owner: Owner, value: Tensor) -> ParamId {
        self.store.buffer(name, owner, value)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        owner: Owner,
        cin: usize,
        cout: usize,
        k: usize,
        spec: Conv2dSpec,
        bias: bool,
        init: Init,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = b.weight(&format!("{name}.w"), owner, &[cout, cin, k, k], fan_in, init);
        let bias = bias.then(|| b.constant(&format!("{name}.b"), owner, Tensor::zeros(&[cout])));
        Self {
            weight,
            bias,
            spec,
            in_channels: cin,
            out_channels: cout,
        }
    }

    /// 1×1, stride 1, with bias.
    pub fn pointwise<R: Rng>(b: &mut Builder<'_, R>, name: &str, owner: Owner, cin: usize, cout: usize, init: Init) -> Self {
        Self::new(b, name, owner, cin, cout, 1, Conv2dSpec::SAME_1X1, true, init)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let c = x.shape().get(1).copied().unwrap_or(0);
        if c != self.in_channels {
            return Err(Error::dim("conv channels", &x.shape(), ctx.store.value(self.weight).shape()));
        }
        x.conv2d(ctx.param(self.weight), self.bias.map(|b| ctx.param(b)), self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, owner: Owner, c: usize) -> Self {
        Self {
            gamma: b.constant(&format!("{name}.gamma"), owner, Tensor::ones(&[c])),
            beta: b.constant(&format!("{name}.beta"), owner, Tensor::zeros(&[c])),
            running_mean: b.buffer(&format!("{name}.running_mean"), owner, Tensor::zeros(&[c])),
            running_var: b.buffer(&format!("{name}.running_var"), owner, Tensor::ones(&[c])),
        }
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let mode = ctx.mode;
        let (mean, var) = ctx.store.pair_mut(self.running_mean, self.running_var);
        x.batch_norm(gamma, beta, RunningStats { mean, var }, mode)
    }
}

/// A pair of same-shaped modules, one per task.
#[derive(Clone, Debug)]
pub struct PerTask<T> {
    pub depth: T,
    pub seg: T,
}

impl<T> PerTask<T> {
    pub fn build(mut f: impl FnMut(TaskId) -> T) -> Self {
        Self {
            depth: f(TaskId::Depth),
            seg: f(TaskId::Seg),
        }
    }

    pub fn get(&self, task: TaskId) -> &T {
        match task {
            TaskId::Depth => &self.depth,
            TaskId::Seg => &self.seg,
        }
    }
}

/// Batch norm with statistics and affine parameters owned by each task.
pub type TaskBatchNorm = PerTask<BatchNorm>;

impl TaskBatchNorm {
    pub fn new_task<R: Rng>(b: &mut Builder<'_, R>, name: &str, c: usize) -> Self {
        PerTask::build(|t| BatchNorm::new(b, &format!("{name}.{t}"), Owner::Task(t), c))
    }

    pub fn forward_task<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>, task: TaskId) -> Result<Var<'t>> {
        self.get(task).forward(ctx, x)
    }
}

pub const SE_REDUCTION: usize = 16;

/// Squeeze-and-excitation: `x · sigmoid(FC₂(relu(FC₁(GAP(x)))))`.
#[derive(Clone, Debug)]
pub struct SeBlock {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
    pub channels: usize,
}

impl SeBlock {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, owner: Owner, c: usize) -> Result<Self> {
        if c < SE_REDUCTION {
            return Err(Error::Config(format!(
                "squeeze-excitation needs at least {SE_REDUCTION} channels, got {c}"
            )));
        }
        let hidden = c / SE_REDUCTION;
        Ok(Self {
            fc1_w: b.weight(&format!("{name}.fc1.w"), owner, &[hidden, c], c, Init::FanIn),
            fc1_b: b.constant(&format!("{name}.fc1.b"), owner, Tensor::zeros(&[hidden])),
            fc2_w: b.weight(&format!("{name}.fc2.w"), owner, &[c, hidden], hidden, Init::FanIn),
            fc2_b: b.constant(&format!("{name}.fc2.b"), owner, Tensor::zeros(&[c])),
            channels: c,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::dim("se_block", &shape, &[self.channels]));
        }
        let gate = x
            .global_avg_pool()?
            .linear(ctx.param(self.fc1_w), Some(ctx.param(self.fc1_b)))?
            .relu()
            .linear(ctx.param(self.fc2_w), Some(ctx.param(self.fc2_b)))?
            .sigmoid()
            .reshape(&[shape[0], shape[1], 1, 1])?;
        x.mul(gate)
    }
}

/// A shared residual layer with task-specific SE, batch norm and residual
/// adapter: `y = x + L(x) + RA_T(x)` where
/// `L = SE_T ∘ BN_T ∘ conv ∘ relu ∘ BN_T ∘ conv` with shared convolutions.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub bn1: TaskBatchNorm,
    pub bn2: TaskBatchNorm,
    pub se: PerTask<SeBlock>,
    pub adapter: PerTask<Conv>,
}

impl ResidualBlock {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, c: usize) -> Result<Self> {
        let conv = |b: &mut Builder<'_, R>, n: &str| {
            Conv::new(b, &format!("{name}.{n}"), Owner::Shared, c, c, 3, Conv2dSpec::SAME_3X3, false, Init::FanIn)
        };
        let conv1 = conv(b, "conv1");
        let conv2 = conv(b, "conv2");
        let bn1 = TaskBatchNorm::new_task(b, &format!("{name}.bn1"), c);
        let bn2 = TaskBatchNorm::new_task(b, &format!("{name}.bn2"), c);
        let se = PerTask {
            depth: SeBlock::new(b, &format!("{name}.se.depth"), Owner::Task(TaskId::Depth), c)?,
            seg: SeBlock::new(b, &format!("{name}.se.seg"), Owner::Task(TaskId::Seg), c)?,
        };
        let adapter = PerTask::build(|t| Conv::pointwise(b, &format!("{name}.ra.{t}"), Owner::Task(t), c, c, Init::Zero));
        Ok(Self {
            conv1,
            conv2,
            bn1,
            bn2,
            se,
            adapter,
        })
    }

    /// The shared-conv path `L(x)` for `task`.
    pub fn body<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>, task: TaskId) -> Result<Var<'t>> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward_task(ctx, h, task)?.relu();
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward_task(ctx, h, task)?;
        self.se.get(task).forward(ctx, h)
    }

    /// `with_adapter = false` drops the adapter term (the fusion-free baseline).
    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, x: Var<'t>, task: TaskId, with_adapter: bool) -> Result<Var<'t>> {
        let body = self.body(ctx, x, task)?;
        let y = x.add(body)?;
        if with_adapter {
            y.add(self.adapter.get(task).forward(ctx, x)?)
        } else {
            Ok(y)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feats(shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |i| (i as f64 * 0.37).sin())
    }

    #[test]
    fn se_with_zero_fc_halves_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let se = SeBlock::new(&mut Builder { store: &mut store, rng: &mut rng }, "se", Owner::Shared, 16).unwrap();
        store.value_mut(se.fc1_w).data_mut().fill(0.0);
        store.value_mut(se.fc2_w).data_mut().fill(0.0);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &mut store, Mode::Train);
        let x = tape.constant(feats(&[2, 16, 2, 2]));
        let y = se.forward(&ctx, x).unwrap().value();
        for (a, b) in y.data().iter().zip(x.value().data()) {
            assert_eq!(*a, b * 0.5);
        }
        let zero = se.forward(&ctx, tape.constant(Tensor::zeros(&[1, 16, 2, 2]))).unwrap();
        assert!(zero.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn se_rejects_narrow_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = SeBlock::new(&mut Builder { store: &mut store, rng: &mut rng }, "se", Owner::Shared, 8);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn depth_forward_touches_only_depth_parameters() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = ResidualBlock::new(&mut Builder { store: &mut store, rng: &mut rng }, "b", 16).unwrap();
        let seg_stats = store.value(block.bn1.seg.running_mean).clone();
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, &mut store, Mode::Train);
        let x = tape.constant(feats(&[2, 16, 4, 4]));
        let y = block.forward(&mut ctx, x, TaskId::Depth, true).unwrap();
        let grads = tape.backward(y.square().sum()).unwrap();
        for (id, e) in store.entries() {
            if e.owner == Owner::Task(TaskId::Seg) {
                assert!(grads.param(id).is_none(), "{} has a gradient", e.name);
            }
        }
        assert!(grads.param(block.se.depth.fc1_w).is_some());
        assert_eq!(store.value(block.bn1.seg.running_mean), &seg_stats);
        assert_ne!(store.value(block.bn1.depth.running_mean), &seg_stats);
    }

    #[test]
    fn zero_body_and_adapter_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let block = ResidualBlock::new(&mut Builder { store: &mut store, rng: &mut rng }, "b", 16).unwrap();
        store.value_mut(block.bn2.seg.gamma).data_mut().fill(0.0);
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, &mut store, Mode::Train);
        let x = tape.constant(feats(&[1, 16, 3, 3]));
        let y = block.forward(&mut ctx, x, TaskId::Seg, true).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn task_batch_norm_uses_task_affine_and_eval_is_deterministic() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bn = TaskBatchNorm::new_task(&mut Builder { store: &mut store, rng: &mut rng }, "bn", 2);
        store.value_mut(bn.seg.beta).data_mut().fill(0.5);
        let x = feats(&[2, 2, 2, 2]);
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, &mut store, Mode::Eval);
        let d = bn.forward_task(&mut ctx, tape.constant(x.clone()), TaskId::Depth).unwrap().value();
        let s = bn.forward_task(&mut ctx, tape.constant(x.clone()), TaskId::Seg).unwrap().value();
        let d2 = bn.forward_task(&mut ctx, tape.constant(x), TaskId::Depth).unwrap().value();
        assert_ne!(d, s);
        assert_eq!(d, d2);
    }
}
