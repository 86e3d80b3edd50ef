//! Softmax and log-softmax along one axis, max-subtracted for stability.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::shape::split_at_axis;

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(shape, format!("softmax axis {axis} out of range")));
    }
    Ok(())
}

/// Applies `f(lane, out_lane)` to every 1-D lane along `axis`.
fn for_each_lane(shape: &[usize], axis: usize, x: &[f64], out: &mut [f64], mut f: impl FnMut(&[f64], &mut [f64])) {
    let (outer, len, inner) = split_at_axis(shape, axis);
    let mut lane = vec![0.0; len];
    let mut res = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for k in 0..len {
                lane[k] = x[base + k * inner];
            }
            f(&lane, &mut res);
            for k in 0..len {
                out[base + k * inner] = res[k];
            }
        }
    }
}

pub(crate) fn softmax_lane(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}

pub(crate) fn log_softmax_lane(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

impl<'t> Var<'t> {
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        check_axis(&shape, axis)?;
        let mut y = vec![0.0; x.numel()];
        for_each_lane(&shape, axis, x.data(), &mut y, softmax_lane);
        let y = Tensor::from_parts(shape.clone(), y);
        let y_saved = y.clone();
        Ok(self.tape().op(y, &[self], move |g| {
            // dx = y ⊙ (g − Σ g·y)
            let (outer, len, inner) = split_at_axis(&shape, axis);
            let (yd, gd) = (y_saved.data(), g.data());
            let mut gx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let dot: f64 = (0..len).map(|k| gd[base + k * inner] * yd[base + k * inner]).sum();
                    for k in 0..len {
                        let j = base + k * inner;
                        gx[j] = yd[j] * (gd[j] - dot);
                    }
                }
            }
            vec![Tensor::from_parts(shape.clone(), gx)]
        }))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        check_axis(&shape, axis)?;
        let mut y = vec![0.0; x.numel()];
        for_each_lane(&shape, axis, x.data(), &mut y, log_softmax_lane);
        let y = Tensor::from_parts(shape.clone(), y);
        let y_saved = y.clone();
        Ok(self.tape().op(y, &[self], move |g| {
            // dx = g − softmax · Σ g
            let (outer, len, inner) = split_at_axis(&shape, axis);
            let (yd, gd) = (y_saved.data(), g.data());
            let mut gx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let sg: f64 = (0..len).map(|k| gd[base + k * inner]).sum();
                    for k in 0..len {
                        let j = base + k * inner;
                        gx[j] = gd[j] - yd[j].exp() * sg;
                    }
                }
            }
            vec![Tensor::from_parts(shape.clone(), gx)]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn uniform_input_gives_uniform_output() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        let y = x.softmax(0).unwrap().value();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2], vec![1000.0, 0.0]).unwrap());
        let y = x.softmax(0).unwrap().value();
        assert_eq!(y.data()[0], 1.0);
        assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-300);
        assert!(y.is_finite());
    }

    #[test]
    fn softmax_along_middle_axis_sums_to_one() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 4, 3], |i| (i as f64 * 1.7).cos() * 5.0));
        let y = x.softmax(1).unwrap().value();
        for a in 0..2 {
            for c in 0..3 {
                let s: f64 = (0..4).map(|k| y.get(&[a, k, c])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[3, 5], |i| i as f64 * 0.3 - 2.0));
        let a = x.log_softmax(1).unwrap().value();
        let b = x.softmax(1).unwrap().value();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q.ln()).abs() < 1e-12);
        }
    }
}
