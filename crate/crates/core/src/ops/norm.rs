//! Batch normalization over the channel axis (axis 1).

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics updated in train mode.
pub struct RunningStats<'a> {
    pub mean: &'a mut Tensor,
    pub var: &'a mut Tensor,
}

impl<'t> Var<'t> {
    /// Normalizes each channel of `[N, C, ...]`. Train mode uses batch
    /// statistics (biased variance) and folds them into `running` with
    /// momentum [`BN_MOMENTUM`] (unbiased variance); eval mode uses `running`.
    pub fn batch_norm(
        self,
        gamma: Var<'t>,
        beta: Var<'t>,
        running: RunningStats<'_>,
        mode: Mode,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(&shape, "batch_norm expects [N, C, ...]"));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        for t in [gamma.shape(), beta.shape()] {
            if t != [c] {
                return Err(Error::dim("batch_norm", &shape, &t));
            }
        }
        if running.mean.shape() != [c] || running.var.shape() != [c] {
            return Err(Error::dim("batch_norm running stats", &shape, running.mean.shape()));
        }
        let count = n * inner;
        let xd = x.data();
        let at = |b: usize, ch: usize| &xd[(b * c + ch) * inner..(b * c + ch + 1) * inner];

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let s: f64 = (0..n).map(|b| at(b, ch).iter().sum::<f64>()).sum();
                    let m = s / count as f64;
                    let v: f64 = (0..n)
                        .map(|b| at(b, ch).iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                        .sum::<f64>()
                        / count as f64;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let unbias = if count > 1 {
                    count as f64 / (count - 1) as f64
                } else {
                    1.0
                };
                for ch in 0..c {
                    let rm = &mut running.mean.data_mut()[ch];
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean[ch];
                    let rv = &mut running.var.data_mut()[ch];
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (running.mean.data().to_vec(), running.var.data().to_vec()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();

        let g_val = gamma.value();
        let b_val = beta.value();
        let mut x_hat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for i in 0..inner {
                    let xh = (xd[base + i] - mean[ch]) * inv_std[ch];
                    x_hat[base + i] = xh;
                    out[base + i] = g_val.data()[ch] * xh + b_val.data()[ch];
                }
            }
        }
        let out_shape = shape.clone();
        Ok(self.tape().op(Tensor::from_parts(out_shape, out), &[self, gamma, beta], move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; gd.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for ch in 0..c {
                let mut sum_g = 0.0;
                let mut sum_gxh = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * inner;
                    for i in 0..inner {
                        sum_g += gd[base + i];
                        sum_gxh += gd[base + i] * x_hat[base + i];
                    }
                }
                ggamma[ch] = sum_gxh;
                gbeta[ch] = sum_g;
                let gam = g_val.data()[ch];
                let is = inv_std[ch];
                for b in 0..n {
                    let base = (b * c + ch) * inner;
                    for i in 0..inner {
                        gx[base + i] = match mode {
                            Mode::Train => {
                                let m = count as f64;
                                gam * is * (gd[base + i] - sum_g / m - x_hat[base + i] * sum_gxh / m)
                            }
                            Mode::Eval => gam * is * gd[base + i],
                        };
                    }
                }
            }
            vec![
                Tensor::from_parts(shape.clone(), gx),
                Tensor::from_parts(vec![c], ggamma),
                Tensor::from_parts(vec![c], gbeta),
            ]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn stats(c: usize) -> (Tensor, Tensor) {
        (Tensor::zeros(&[c]), Tensor::ones(&[c]))
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 1, 3, 3], 4.2));
        let (mut m, mut v) = stats(1);
        let y = x
            .batch_norm(
                tape.leaf(Tensor::ones(&[1])),
                tape.leaf(Tensor::zeros(&[1])),
                RunningStats { mean: &mut m, var: &mut v },
                Mode::Train,
            )
            .unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        assert!(y.value().is_finite());
    }

    #[test]
    fn zero_gamma_outputs_beta() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[3, 2, 2, 2], |i| (i as f64 * 0.37).sin()));
        let (mut m, mut v) = stats(2);
        let beta = Tensor::new(&[2], vec![0.5, -1.5]).unwrap();
        let y = x
            .batch_norm(
                tape.leaf(Tensor::zeros(&[2])),
                tape.leaf(beta),
                RunningStats { mean: &mut m, var: &mut v },
                Mode::Train,
            )
            .unwrap()
            .value();
        for b in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(y.get(&[b, 0, i, j]), 0.5);
                    assert_eq!(y.get(&[b, 1, i, j]), -1.5);
                }
            }
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[4, 1], vec![1., 2., 3., 4.]).unwrap());
        let (mut m, mut v) = stats(1);
        x.batch_norm(
            tape.leaf(Tensor::ones(&[1])),
            tape.leaf(Tensor::zeros(&[1])),
            RunningStats { mean: &mut m, var: &mut v },
            Mode::Train,
        )
        .unwrap();
        assert!((m.item() - 0.25).abs() < 1e-15);
        // unbiased variance 5/3
        assert!((v.item() - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 1], vec![3.0, 5.0]).unwrap());
        let mut m = Tensor::full(&[1], 1.0);
        let mut v = Tensor::full(&[1], 4.0 - BN_EPS);
        let y = x
            .batch_norm(
                tape.leaf(Tensor::ones(&[1])),
                tape.leaf(Tensor::zeros(&[1])),
                RunningStats { mean: &mut m, var: &mut v },
                Mode::Eval,
            )
            .unwrap();
        let d = y.value();
        assert!((d.data()[0] - 1.0).abs() < 1e-12 && (d.data()[1] - 2.0).abs() < 1e-12);
        assert_eq!(m.item(), 1.0);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3]));
        let (mut m, mut v) = stats(3);
        let r = x.batch_norm(
            tape.leaf(Tensor::ones(&[2])),
            tape.leaf(Tensor::zeros(&[3])),
            RunningStats { mean: &mut m, var: &mut v },
            Mode::Train,
        );
        assert!(matches!(r, Err(Error::Dimension { .. })));
    }
}
