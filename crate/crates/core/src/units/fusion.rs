//! Cross-task feature exchange between the two decoder streams.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::Owner;

use super::layers::{BatchNorm, Builder, Conv, Ctx, Init};

/// Largest spatial extent the dense `HW × HW` affinity is built for.
pub const MAX_AFFINITY_PIXELS: usize = 4096;

/// Cross propagation unit:
/// `d' = d + H₁(s) + H₂(d)`, `s' = s + B₁(d) + B₂(s)` with 1×1 convolutions.
#[derive(Clone, Debug)]
pub struct CrossPropagation {
    pub h1: Conv,
    pub h2: Conv,
    pub b1: Conv,
    pub b2: Conv,
}

impl CrossPropagation {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, c_depth: usize, c_seg: usize) -> Self {
        let mut pw = |n: &str, cin, cout| Conv::pointwise(b, &format!("{name}.{n}"), Owner::Shared, cin, cout, Init::Zero);
        Self {
            h1: pw("h1", c_seg, c_depth),
            h2: pw("h2", c_depth, c_depth),
            b1: pw("b1", c_depth, c_seg),
            b2: pw("b2", c_seg, c_seg),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_>, d: Var<'t>, s: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let (ds, ss) = (d.shape(), s.shape());
        if ds.len() != 4 || ss.len() != 4 || ds[0] != ss[0] || ds[2..] != ss[2..] {
            return Err(Error::dim("cross_propagation", &ds, &ss));
        }
        let d_next = d.add(self.h1.forward(ctx, s)?)?.add(self.h2.forward(ctx, d)?)?;
        let s_next = s.add(self.b1.forward(ctx, d)?)?.add(self.b2.forward(ctx, s)?)?;
        Ok((d_next, s_next))
    }
}

fn flatten(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    x.reshape(&[s[0], s[1], s[2] * s[3]])
}

/// Row-stochastic affinity `A[n, j, i] = softmax_i(F_iᵀ K_j)` from feature
/// maps `F, K` of shape `[N, C, H, W]`.
pub fn apu_affinity<'t>(f: Var<'t>, k: Var<'t>) -> Result<Var<'t>> {
    let (fs, ks) = (f.shape(), k.shape());
    if fs.len() != 4 || fs != ks {
        return Err(Error::dim("apu_affinity", &fs, &ks));
    }
    let hw = fs[2] * fs[3];
    if hw > MAX_AFFINITY_PIXELS {
        return Err(Error::Config(format!(
            "affinity over {hw} pixels exceeds the {MAX_AFFINITY_PIXELS}-pixel limit"
        )));
    }
    // [N, HW(j), C] · [N, C, HW(i)]
    flatten(k)?.transpose()?.matmul(flatten(f)?)?.softmax(2)
}

/// `out[n, c, j] = Σ_i A[n, j, i] · G[n, c, i]`, returned as `[N, C, H, W]`.
pub fn apu_propagate<'t>(g: Var<'t>, affinity: Var<'t>) -> Result<Var<'t>> {
    let gs = g.shape();
    if gs.len() != 4 {
        return Err(Error::shape(&gs, "apu_propagate expects [N, C, H, W]"));
    }
    let hw = gs[2] * gs[3];
    if affinity.shape() != [gs[0], hw, hw] {
        return Err(Error::dim("apu_propagate", &gs, &affinity.shape()));
    }
    flatten(g)?.matmul(affinity.transpose()?)?.reshape(&gs)
}

/// Affinity propagation unit: `d' = BN(P(A · G(d))) + d`, with the affinity
/// computed from the segmentation feature `s`.
#[derive(Clone, Debug)]
pub struct AffinityPropagation {
    pub f: Conv,
    pub k: Conv,
    pub g: Conv,
    pub p: Conv,
    pub bn: BatchNorm,
}

impl AffinityPropagation {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, c_depth: usize, c_seg: usize) -> Result<Self> {
        if c_depth < 2 || c_seg < 2 {
            return Err(Error::Config("affinity propagation needs at least 2 channels per stream".into()));
        }
        let (hs, hd) = (c_seg / 2, c_depth / 2);
        Ok(Self {
            f: Conv::pointwise(b, &format!("{name}.f"), Owner::Shared, c_seg, hs, Init::FanIn),
            k: Conv::pointwise(b, &format!("{name}.k"), Owner::Shared, c_seg, hs, Init::FanIn),
            g: Conv::pointwise(b, &format!("{name}.g"), Owner::Shared, c_depth, hd, Init::FanIn),
            p: Conv::pointwise(b, &format!("{name}.p"), Owner::Shared, hd, c_depth, Init::Zero),
            bn: BatchNorm::new(b, &format!("{name}.bn"), Owner::Shared, c_depth),
        })
    }

    pub fn affinity<'t>(&self, ctx: &Ctx<'t, '_>, s: Var<'t>) -> Result<Var<'t>> {
        apu_affinity(self.f.forward(ctx, s)?, self.k.forward(ctx, s)?)
    }

    pub fn forward<'t>(&self, ctx: &mut Ctx<'t, '_>, d: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
        let (ds, ss) = (d.shape(), s.shape());
        if ds.len() != 4 || ss.len() != 4 || ds[0] != ss[0] || ds[2..] != ss[2..] {
            return Err(Error::dim("affinity_propagation", &ds, &ss));
        }
        let a = self.affinity(ctx, s)?;
        let spread = apu_propagate(self.g.forward(ctx, d)?, a)?;
        let out = self.p.forward(ctx, spread)?;
        self.bn.forward(ctx, out)?.add(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::ops::Mode;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn feats(shape: &[usize], phase: f64) -> Tensor {
        Tensor::from_fn(shape, |i| (i as f64 * 0.61 + phase).sin())
    }

    #[test]
    fn zero_cpu_is_identity_and_identity_h1_adds_seg() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cpu = CrossPropagation::new(&mut Builder { store: &mut store, rng: &mut rng }, "cpu", 3, 3);
        let tape = Tape::new();
        let (d, s) = (tape.constant(feats(&[2, 3, 2, 2], 0.0)), tape.constant(feats(&[2, 3, 2, 2], 1.0)));
        {
            let ctx = Ctx::new(&tape, &mut store, Mode::Train);
            let (d1, s1) = cpu.forward(&ctx, d, s).unwrap();
            assert_eq!(d1.value(), d.value());
            assert_eq!(s1.value(), s.value());
        }
        let w = store.value_mut(cpu.h1.weight);
        for c in 0..3 {
            w.set(&[c, c, 0, 0], 1.0);
        }
        // parameters are bound once per tape, so re-bind on a fresh one
        let tape = Tape::new();
        let (d, s) = (tape.constant(d.value().as_ref().clone()), tape.constant(s.value().as_ref().clone()));
        let ctx = Ctx::new(&tape, &mut store, Mode::Train);
        let (d1, _) = cpu.forward(&ctx, d, s).unwrap();
        let expect = d.value().zip_map(&s.value(), |a, b| a + b).unwrap();
        assert_eq!(*d1.value(), expect);
    }

    #[test]
    fn uniform_features_give_uniform_affinity() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::full(&[1, 2, 3, 4], 0.7));
        let a = apu_affinity(f, f).unwrap().value();
        assert!(a.data().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-12));
    }

    #[test]
    fn two_pixel_affinity_by_hand() {
        // F = [1, 2], K = [3, -1] along the pixel axis, one channel.
        let tape = Tape::new();
        let f = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let k = tape.constant(Tensor::new(&[1, 1, 1, 2], vec![3.0, -1.0]).unwrap());
        let a = apu_affinity(f, k).unwrap().value();
        // row j: softmax_i(F_i K_j)
        let row = |kj: f64| {
            let (e1, e2) = ((1.0 * kj as f64).exp(), (2.0 * kj).exp());
            [e1 / (e1 + e2), e2 / (e1 + e2)]
        };
        let expect = [row(3.0), row(-1.0)].concat();
        for (x, y) in a.data().iter().zip(&expect) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn propagation_with_identity_or_uniform_affinity() {
        let tape = Tape::new();
        let g = tape.constant(feats(&[1, 2, 2, 3], 0.3));
        let eye = tape.constant(Tensor::from_fn(&[1, 6, 6], |i| if i % 7 == 0 { 1.0 } else { 0.0 }));
        assert_eq!(apu_propagate(g, eye).unwrap().value(), g.value());
        let uniform = tape.constant(Tensor::full(&[1, 6, 6], 1.0 / 6.0));
        let out = apu_propagate(g, uniform).unwrap().value();
        for c in 0..2 {
            let mean: f64 = (0..6).map(|p| g.value().data()[c * 6 + p]).sum::<f64>() / 6.0;
            for p in 0..6 {
                assert!((out.data()[c * 6 + p] - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_projection_apu_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let apu = AffinityPropagation::new(&mut Builder { store: &mut store, rng: &mut rng }, "apu", 4, 6).unwrap();
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, &mut store, Mode::Train);
        let d = tape.constant(feats(&[2, 4, 2, 3], 0.0));
        let s = tape.constant(feats(&[2, 6, 2, 3], 2.0));
        assert_eq!(apu.forward(&mut ctx, d, s).unwrap().value(), d.value());
    }

    #[test]
    fn oversized_affinity_is_config_error() {
        let tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[1, 1, 65, 64]));
        assert!(matches!(apu_affinity(f, f), Err(Error::Config(_))));
    }
}
