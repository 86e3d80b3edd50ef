//! The registered gradient audit: every differentiable op and composite
//! unit checked against central differences on small fixed-seed instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::geometry::{
    bilinear_sample, inv_depth_from_sigmoid, pose_from_axis_angle, project_depth, warp_sequence, warp_stereo,
    CameraIntrinsics, StereoDirection,
};
use crate::gradcheck::{finite_diff_check_params, finite_diff_check_with, GradCheckOptions, GradCheckReport};
use crate::losses::{cross_entropy_seg, min_reprojection_automask, photometric_error_map, photometric_loss, smoothness_loss, ssim};
use crate::ops::{Conv2dSpec, Mode, RunningStats};
use crate::params::{Owner, ParamId, ParamStore, TaskId};
use crate::tensor::Tensor;
use crate::units::{
    apu_affinity, apu_propagate, AffinityPropagation, Builder, CrossPropagation, Ctx, ResidualBlock, SeBlock,
    TaskBatchNorm,
};

/// Bound for smooth elementwise and linear-algebra ops.
pub const SMOOTH_TOL: f64 = 1e-6;
/// Bound for composite units and piecewise-smooth samplers.
pub const COMPOSITE_TOL: f64 = 1e-4;

const EPS: f64 = 1e-5;
const UNIT_PROBES: usize = 48;

#[derive(Clone, Copy)]
pub struct GradCase {
    pub name: &'static str,
    pub threshold: f64,
    run: fn() -> Result<GradCheckReport>,
}

impl GradCase {
    pub fn run(&self) -> CaseOutcome {
        let result = (self.run)();
        let (max_rel_error, error) = match &result {
            Ok(r) => (r.max_rel_error, None),
            Err(e) => (f64::NAN, Some(e.to_string())),
        };
        CaseOutcome {
            name: self.name,
            threshold: self.threshold,
            max_rel_error,
            probes: result.as_ref().map_or(0, |r| r.probes),
            error,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseOutcome {
    pub name: &'static str,
    pub threshold: f64,
    pub max_rel_error: f64,
    pub probes: usize,
    pub error: Option<String>,
}

impl CaseOutcome {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_rel_error < self.threshold
    }
}

fn rand_t(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    Tensor::rand_uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Values bounded away from zero, for ops with a kink or pole there.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn opts(max_probes: Option<usize>) -> GradCheckOptions {
    GradCheckOptions {
        eps: EPS,
        max_probes,
        ..GradCheckOptions::default()
    }
}

fn check<F>(f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    finite_diff_check_with(f, inputs, opts(None))
}

fn worse(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    GradCheckReport {
        max_rel_error: a.max_rel_error.max(b.max_rel_error),
        max_abs_error: a.max_abs_error.max(b.max_abs_error),
        worst: if b.max_rel_error > a.max_rel_error { b.worst } else { a.worst },
        probes: a.probes + b.probes,
    }
}

/// Gives every trainable parameter a random value so that zero-initialised
/// paths are exercised.
fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::rand_uniform(&shape, -0.5, 0.5, &mut rng);
    }
}

/// Builds a unit on a fresh store and checks input and parameter gradients.
fn unit_check<U, B, F>(build: B, inputs: &[Tensor], forward: F) -> Result<GradCheckReport>
where
    B: FnOnce(&mut Builder<'_, ChaCha8Rng>) -> Result<U>,
    F: for<'t> Fn(&U, &mut Ctx<'t, '_>, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let unit = build(&mut Builder {
        store: &mut store,
        rng: &mut rng,
    })?;
    randomize(&mut store, 23);
    let wrt_inputs = finite_diff_check_with(
        |tape, v| {
            let mut st = store.clone();
            let mut ctx = Ctx::new(tape, &mut st, Mode::Train);
            forward(&unit, &mut ctx, v)
        },
        inputs,
        opts(None),
    )?;
    let ids: Vec<ParamId> = store.trainable_ids().collect();
    let wrt_params = finite_diff_check_params(
        &store,
        &ids,
        |tape, st| {
            let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            let mut ctx = Ctx::new(tape, st, Mode::Train);
            forward(&unit, &mut ctx, &vars)
        },
        opts(Some(UNIT_PROBES)),
    )?;
    Ok(worse(wrt_inputs, wrt_params))
}

fn feat(seed: u64) -> Tensor {
    rand_t(&[2, 4, 4, 4], seed, -1.0, 1.0)
}

fn img(shape: &[usize], seed: u64) -> Tensor {
    rand_t(shape, seed, 0.1, 0.9)
}

fn cam8() -> CameraIntrinsics {
    CameraIntrinsics::new(8.0, 8.0, 3.5, 3.5).expect("valid intrinsics")
}

fn smooth_img(n: usize, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[n, c, h, w], |i| {
        let (x, y, ch) = ((i % w) as f64, ((i / w) % h) as f64, (i / (w * h)) as f64);
        0.5 + 0.4 * (x * 0.9 + ch).sin() * (y * 0.7 - ch).cos()
    })
}

macro_rules! case {
    ($name:expr, $tol:expr, $body:expr) => {
        GradCase {
            name: $name,
            threshold: $tol,
            run: $body,
        }
    };
}

/// Every registered check, smooth ops first.
pub fn gradient_suite() -> Vec<GradCase> {
    vec![
        case!("op/add_broadcast", SMOOTH_TOL, || check(|_, v| v[0].add(v[1]), &[feat(1), rand_t(&[1, 4, 1, 1], 2, -1.0, 1.0)])),
        case!("op/sub", SMOOTH_TOL, || check(|_, v| v[0].sub(v[1]), &[feat(3), feat(4)])),
        case!("op/mul", SMOOTH_TOL, || check(|_, v| v[0].mul(v[1]), &[feat(5), feat(6)])),
        case!("op/div", SMOOTH_TOL, || check(|_, v| v[0].div(v[1]), &[feat(7), rand_t(&[2, 4, 4, 4], 8, 0.5, 2.0)])),
        case!("op/exp", SMOOTH_TOL, || check(|_, v| Ok(v[0].exp()), &[feat(9)])),
        case!("op/ln", SMOOTH_TOL, || check(|_, v| Ok(v[0].ln()), &[rand_t(&[4, 4], 10, 0.5, 2.0)])),
        case!("op/sqrt", SMOOTH_TOL, || check(|_, v| Ok(v[0].sqrt()), &[rand_t(&[4, 4], 11, 0.5, 2.0)])),
        case!("op/square", SMOOTH_TOL, || check(|_, v| Ok(v[0].square()), &[feat(12)])),
        case!("op/recip", SMOOTH_TOL, || check(|_, v| Ok(v[0].recip()), &[rand_t(&[4, 4], 13, 0.5, 2.0)])),
        case!("op/sigmoid", SMOOTH_TOL, || check(|_, v| Ok(v[0].sigmoid()), &[feat(14)])),
        case!("op/elu", SMOOTH_TOL, || check(|_, v| Ok(v[0].elu()), &[away_from_zero(&[4, 4], 15)])),
        case!("op/abs", SMOOTH_TOL, || check(|_, v| Ok(v[0].abs()), &[away_from_zero(&[4, 4], 16)])),
        case!("op/relu", SMOOTH_TOL, || check(|_, v| Ok(v[0].relu()), &[away_from_zero(&[4, 4], 17)])),
        case!("op/leaky_relu", SMOOTH_TOL, || check(|_, v| Ok(v[0].leaky_relu(0.1)), &[away_from_zero(&[4, 4], 18)])),
        case!("op/clamp", SMOOTH_TOL, || check(|_, v| Ok(v[0].clamp(-0.05, 0.05)), &[away_from_zero(&[4, 4], 19).map(|x| x * 0.2)])),
        case!("op/minimum", SMOOTH_TOL, || check(|_, v| v[0].minimum(v[1]), &[feat(20), feat(21)])),
        case!("op/sum_mean_axes", SMOOTH_TOL, || check(|_, v| Ok(v[0].sum_axes(&[1])?.add(v[0].mean_axes(&[1])?)?), &[feat(22)])),
        case!("op/reshape_transpose", SMOOTH_TOL, || check(|_, v| v[0].reshape(&[2, 4, 16])?.transpose(), &[feat(23)])),
        case!("op/concat_slice", SMOOTH_TOL, || check(|_, v| Var::concat(&[v[0], v[1]], 1)?.slice(1, 2, 4), &[feat(24), feat(25)])),
        case!("op/matmul", SMOOTH_TOL, || check(|_, v| v[0].matmul(v[1]), &[rand_t(&[2, 3, 4], 26, -1.0, 1.0), rand_t(&[2, 4, 5], 27, -1.0, 1.0)])),
        case!("op/linear", SMOOTH_TOL, || check(|_, v| v[0].linear(v[1], Some(v[2])), &[rand_t(&[3, 4], 28, -1.0, 1.0), rand_t(&[2, 4], 29, -1.0, 1.0), rand_t(&[2], 30, -1.0, 1.0)])),
        case!("op/softmax", SMOOTH_TOL, || check(|_, v| v[0].softmax(1), &[feat(31)])),
        case!("op/log_softmax", SMOOTH_TOL, || check(|_, v| v[0].log_softmax(1), &[feat(32)])),
        case!("op/conv2d_3x3", SMOOTH_TOL, || check(|_, v| v[0].conv2d(v[1], Some(v[2]), Conv2dSpec::SAME_3X3), &[feat(33), rand_t(&[3, 4, 3, 3], 34, -0.5, 0.5), rand_t(&[3], 35, -0.5, 0.5)])),
        case!("op/conv2d_4x4_stride2", SMOOTH_TOL, || check(|_, v| v[0].conv2d(v[1], None, Conv2dSpec { stride: 2, padding: 1 }), &[feat(36), rand_t(&[2, 4, 4, 4], 37, -0.5, 0.5)])),
        case!("op/upsample_nearest", SMOOTH_TOL, || check(|_, v| v[0].upsample_nearest(2), &[feat(38)])),
        case!("op/global_avg_pool", SMOOTH_TOL, || check(|_, v| v[0].global_avg_pool(), &[feat(39)])),
        case!("op/avg_pool3x3_reflect", SMOOTH_TOL, || check(|_, v| v[0].avg_pool3x3_reflect(), &[feat(40)])),
        case!("op/batch_norm_train", SMOOTH_TOL, || {
            check(
                |_, v| {
                    let (mut m, mut var) = (Tensor::zeros(&[4]), Tensor::ones(&[4]));
                    v[0].batch_norm(v[1], v[2], RunningStats { mean: &mut m, var: &mut var }, Mode::Train)
                },
                &[feat(41), rand_t(&[4], 42, 0.5, 1.5), rand_t(&[4], 43, -0.5, 0.5)],
            )
        }),
        case!("op/pose_from_axis_angle", SMOOTH_TOL, || {
            check(
                |_, v| {
                    let p = pose_from_axis_angle(v[0])?;
                    Ok(p.rotation.reshape(&[2, 9])?.add(p.translation.sum_axes(&[1])?)?)
                },
                &[rand_t(&[2, 6], 44, -0.8, 0.8)],
            )
        }),
        case!("op/inv_depth_from_sigmoid", SMOOTH_TOL, || check(|_, v| Ok(inv_depth_from_sigmoid(v[0].sigmoid()).recip()), &[feat(45)])),
        case!("op/cross_entropy", SMOOTH_TOL, || {
            let labels: Vec<u8> = (0..32).map(|i| if i % 7 == 3 { 255 } else { (i % 4) as u8 }).collect();
            check(move |_, v| cross_entropy_seg(v[0], &labels), &[feat(46)])
        }),
        case!("op/bilinear_sample", COMPOSITE_TOL, || {
            let coords = Tensor::from_fn(&[1, 2, 4, 4], |i| 0.37 + (i % 16) as f64 * 0.29 * if i < 16 { 1.0 } else { 0.7 });
            check(|_, v| Ok(bilinear_sample(v[0], v[1])?.0), &[img(&[1, 2, 6, 6], 47), coords])
        }),
        case!("op/project_depth", COMPOSITE_TOL, || {
            check(
                |_, v| Ok(project_depth(v[0], &pose_from_axis_angle(v[1])?, &cam8())?.0),
                &[rand_t(&[1, 1, 4, 4], 48, 2.0, 4.0), Tensor::new(&[1, 6], vec![0.02, -0.03, 0.01, 0.13, -0.07, 0.05])?],
            )
        }),
        case!("loss/ssim", COMPOSITE_TOL, || check(|_, v| ssim(v[0], v[1]), &[img(&[1, 2, 5, 5], 50), img(&[1, 2, 5, 5], 51)])),
        case!("loss/photometric_map", COMPOSITE_TOL, || {
            check(|_, v| photometric_error_map(v[0], v[1], 0.85), &[img(&[1, 3, 4, 4], 52), img(&[1, 3, 4, 4], 53)])
        }),
        case!("loss/photometric", COMPOSITE_TOL, || {
            let mask = Tensor::from_fn(&[1, 1, 4, 4], |i| if i % 5 == 0 { 0.0 } else { 1.0 });
            check(move |_, v| photometric_loss(v[0], v[1], &mask, 0.85), &[img(&[1, 3, 4, 4], 54), img(&[1, 3, 4, 4], 55)])
        }),
        case!("loss/min_reprojection", COMPOSITE_TOL, || {
            check(|_, v| Ok(min_reprojection_automask(&[v[0], v[1]], &[])?.loss_map), &[rand_t(&[2, 1, 4, 4], 56, 0.1, 1.0), rand_t(&[2, 1, 4, 4], 57, 0.1, 1.0)])
        }),
        case!("loss/smoothness", COMPOSITE_TOL, || {
            let image = img(&[2, 3, 4, 4], 58);
            check(move |_, v| smoothness_loss(v[0], &image), &[rand_t(&[2, 1, 4, 4], 59, 0.2, 1.0)])
        }),
        case!("geometry/warp_stereo", COMPOSITE_TOL, || {
            check(
                |_, v| Ok(warp_stereo(v[0], v[1], StereoDirection::Left)?.image),
                &[smooth_img(1, 2, 6, 8), rand_t(&[1, 1, 6, 8], 60, 0.3, 1.7)],
            )
        }),
        case!("geometry/warp_sequence", COMPOSITE_TOL, || {
            let depth = Tensor::from_fn(&[1, 1, 8, 8], |i| 3.0 + 0.37 * ((i as f64) * 0.61).sin());
            let pose = Tensor::new(&[1, 6], vec![0.02, -0.03, 0.01, 0.13, -0.07, 0.05])?;
            check(
                |_, v| Ok(warp_sequence(v[0], v[1], &pose_from_axis_angle(v[2])?, &cam8())?.image),
                &[smooth_img(1, 1, 8, 8), depth, pose],
            )
        }),
        case!("unit/se_block", COMPOSITE_TOL, || {
            unit_check(
                |b| SeBlock::new(b, "se", Owner::Task(TaskId::Depth), 16),
                &[rand_t(&[2, 16, 4, 4], 61, -1.0, 1.0)],
                |u, ctx, v| u.forward(ctx, v[0]),
            )
        }),
        case!("unit/residual_adapter", COMPOSITE_TOL, || {
            unit_check(
                |b| ResidualBlock::new(b, "res", 16),
                &[rand_t(&[2, 16, 4, 4], 62, -1.0, 1.0)],
                |u, ctx, v| u.forward(ctx, v[0], TaskId::Seg, true),
            )
        }),
        case!("unit/task_batch_norm", COMPOSITE_TOL, || {
            unit_check(
                |b| Ok(TaskBatchNorm::new_task(b, "bn", 4)),
                &[feat(63)],
                |u, ctx, v| u.forward_task(ctx, v[0], TaskId::Depth),
            )
        }),
        case!("unit/cpu", COMPOSITE_TOL, || {
            unit_check(
                |b| Ok(CrossPropagation::new(b, "cpu", 4, 4)),
                &[feat(64), feat(65)],
                |u, ctx, v| {
                    let (d, s) = u.forward(ctx, v[0], v[1])?;
                    Var::concat(&[d, s], 1)
                },
            )
        }),
        case!("unit/apu_affinity", COMPOSITE_TOL, || check(|_, v| apu_affinity(v[0], v[1]), &[feat(66), feat(67)])),
        case!("unit/apu_propagate", COMPOSITE_TOL, || {
            check(|_, v| apu_propagate(v[0], v[1].softmax(2)?), &[feat(68), rand_t(&[2, 16, 16], 69, -1.0, 1.0)])
        }),
        case!("unit/apu", COMPOSITE_TOL, || {
            unit_check(
                |b| AffinityPropagation::new(b, "apu", 4, 4),
                &[feat(70), feat(71)],
                |u, ctx, v| u.forward(ctx, v[0], v[1]),
            )
        }),
    ]
}

/// A deliberately wrong gradient (`d(x²)/dx` reported as `3x`): the negative
/// control the audit must flag.
pub fn corrupted_fixture() -> GradCase {
    case!("fixture/corrupted_square", SMOOTH_TOL, || {
        check(
            |tape, v| {
                let x = v[0];
                let saved = x.value();
                Ok(tape.op(x.value().map(|a| a * a), &[x], move |g| {
                    vec![g.zip_map(&saved, |g, x| 3.0 * g * x).expect("same shape")]
                }))
            },
            &[rand_t(&[4, 4], 72, 0.5, 1.5)],
        )
    })
}

/// Runs the cases whose name contains `filter` (all when `None`).
pub fn run_suite(cases: &[GradCase], filter: Option<&str>) -> Vec<CaseOutcome> {
    cases
        .iter()
        .filter(|c| filter.map_or(true, |f| c.name.contains(f)))
        .map(GradCase::run)
        .collect()
}
