//! Reductions and shape manipulation.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{numel_of, Tensor};

/// (outer, axis, inner) extents around `axis`.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel_of(&shape[..axis]),
        shape[axis],
        numel_of(&shape[axis + 1..]),
    )
}

impl<'t> Var<'t> {
    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape().op(Tensor::scalar(x.sum()), &[self], move |g| {
            vec![Tensor::full(&shape, g.item())]
        })
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over `axes`, keeping them as unit extents.
    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::shape(&shape, format!("axis {bad} out of range")));
        }
        let mut out_shape = shape.clone();
        for &a in axes {
            out_shape[a] = 1;
        }
        let reduced = super::elementwise::reduce_to(&x, &out_shape);
        Ok(self.tape().op(reduced, &[self], move |g| {
            // broadcast the reduced gradient back
            let mut out = Tensor::zeros(&shape);
            let gd = g.data();
            let strides = strides_in(&out_shape, &shape);
            for_each_index(&shape, |o, idx| {
                let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
                out.data_mut()[o] = gd[off];
            });
            vec![out]
        }))
    }

    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let count: usize = axes.iter().filter(|&&a| a < shape.len()).map(|&a| shape[a]).product();
        Ok(self.sum_axes(axes)?.scale(1.0 / count as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let value = x.reshape(shape)?;
        let orig = x.shape().to_vec();
        Ok(self.tape().op(value, &[self], move |g| {
            vec![Tensor::from_parts(orig.clone(), g.data().to_vec())]
        }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let tape = first.tape();
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape(&base, format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(numel_of(&out_shape));
        for o in 0..outer {
            for v in &values {
                let len = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(tape.op(Tensor::from_parts(out_shape, out), parts, move |g| {
            let gd = g.data();
            let mut grads: Vec<Vec<f64>> = shapes.iter().map(|s| Vec::with_capacity(numel_of(s))).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (k, &e) in extents.iter().enumerate() {
                    let len = e * inner;
                    grads[k].extend_from_slice(&gd[pos..pos + len]);
                    pos += len;
                }
            }
            grads
                .into_iter()
                .zip(&shapes)
                .map(|(d, s)| Tensor::from_parts(s.clone(), d))
                .collect()
        }))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                &shape,
                format!("slice axis {axis} [{start}, {start}+{len}) out of range"),
            ));
        }
        let (outer, ext, inner) = split_at_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        Ok(self.tape().op(Tensor::from_parts(out_shape, out), &[self], move |g| {
            let mut gx = Tensor::zeros(&shape);
            let gd = g.data();
            for o in 0..outer {
                let base = o * ext * inner + start * inner;
                gx.data_mut()[base..base + len * inner]
                    .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![gx]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::shape(&shape, "transpose needs rank >= 2"));
        }
        let value = transpose_last2(&x);
        Ok(self.tape().op(value, &[self], move |g| vec![transpose_last2(g)]))
    }
}

pub(crate) fn transpose_last2(x: &Tensor) -> Tensor {
    let shape = x.shape();
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let batch = numel_of(&shape[..r - 2]);
    let mut out = vec![0.0; x.numel()];
    let xd = x.data();
    for b in 0..batch {
        let src = &xd[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(r - 2, r - 1);
    Tensor::from_parts(out_shape, out)
}

fn strides_in(reduced: &[usize], _full: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; reduced.len()];
    let mut acc = 1;
    for i in (0..reduced.len()).rev() {
        strides[i] = if reduced[i] == 1 { 0 } else { acc };
        acc *= reduced[i];
    }
    strides
}

fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let n = numel_of(shape);
    let mut idx = vec![0usize; shape.len()];
    for o in 0..n {
        f(o, &idx);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn mean_value_and_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let m = x.mean();
        assert_eq!(m.item(), 2.0);
        let g = tape.backward(m).unwrap();
        for &v in g.get(x).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sum_axes_keeps_dims() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let s = x.sum_axes(&[1]).unwrap();
        assert_eq!(s.shape(), vec![2, 1, 2]);
        assert_eq!(s.value().data(), &[6.0, 9.0, 24.0, 27.0]);
        let w = tape.constant(Tensor::new(&[2, 1, 2], vec![1., 2., 3., 4.]).unwrap());
        let g = tape.backward(s.mul(w).unwrap().sum()).unwrap();
        assert_eq!(
            g.get(x).unwrap().data(),
            &[1., 2., 1., 2., 1., 2., 3., 4., 3., 4., 3., 4.]
        );
    }

    #[test]
    fn concat_and_slice_invert() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 1, 3], |i| i as f64));
        let b = tape.leaf(Tensor::from_fn(&[2, 2, 3], |i| 100.0 + i as f64));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 3, 3]);
        let back = c.slice(1, 1, 2).unwrap();
        assert_eq!(*back.value(), *b.value());
        let g = tape.backward(back.sum()).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0; 6]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0; 12]);
    }

    #[test]
    fn concat_rejects_mismatch() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 3]));
        assert!(Var::concat(&[a, b], 1).is_err());
    }

    #[test]
    fn transpose_batched() {
        let x = Tensor::from_fn(&[2, 2, 3], |i| i as f64);
        let t = transpose_last2(&x);
        assert_eq!(t.shape(), &[2, 3, 2]);
        assert_eq!(t.get(&[1, 2, 0]), x.get(&[1, 0, 2]));
        assert_eq!(transpose_last2(&t), x);
    }
}
