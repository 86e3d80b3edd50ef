//! Matrix products.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c += a · b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &aip) in a_row.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c += aᵀ · b` for `a: k×m`, `b: k×n`.
pub(crate) fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &api) in a_row.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += api * bv;
            }
        }
    }
}

/// `c += a · bᵀ` for `a: m×k`, `b: n×k`.
pub(crate) fn gemm_nt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

impl<'t> Var<'t> {
    /// `[M,K] · [K,N]`, or batched `[B,M,K] · [B,K,N]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let ok = match (sa.len(), sb.len()) {
            (2, 2) => sa[1] == sb[0],
            (3, 3) => sa[0] == sb[0] && sa[2] == sb[1],
            _ => false,
        };
        if !ok {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let batched = sa.len() == 3;
        let (batch, m, k, n) = if batched {
            (sa[0], sa[1], sa[2], sb[2])
        } else {
            (1, sa[0], sa[1], sb[1])
        };
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm_acc(
                m,
                k,
                n,
                &a.data()[bi * m * k..],
                &b.data()[bi * k * n..],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let out_shape = if batched { vec![batch, m, n] } else { vec![m, n] };
        Ok(self.tape().op(Tensor::from_parts(out_shape, out), &[self, other], move |g| {
            let gd = g.data();
            let mut ga = vec![0.0; batch * m * k];
            let mut gb = vec![0.0; batch * k * n];
            for bi in 0..batch {
                let gs = &gd[bi * m * n..(bi + 1) * m * n];
                // dA = G · Bᵀ, dB = Aᵀ · G
                gemm_nt_acc(m, n, k, gs, &b.data()[bi * k * n..], &mut ga[bi * m * k..(bi + 1) * m * k]);
                gemm_tn_acc(k, m, n, &a.data()[bi * m * k..], gs, &mut gb[bi * k * n..(bi + 1) * k * n]);
            }
            vec![
                Tensor::from_parts(sa.clone(), ga),
                Tensor::from_parts(sb.clone(), gb),
            ]
        }))
    }

    /// Fully connected layer: `x [N,in] · wᵀ + b` with `w [out,in]`, `b [out]`.
    pub fn linear(self, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
        let wt = w.transpose()?;
        let y = self.matmul(wt)?;
        match b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

/// Plain (non-differentiable) product used by geometry helpers and tests.
pub fn matmul_plain(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::dim("matmul", sa, sb));
    }
    let mut out = vec![0.0; sa[0] * sb[1]];
    gemm_acc(sa[0], sa[1], sb[1], a.data(), b.data(), &mut out);
    Ok(Tensor::from_parts(vec![sa[0], sb[1]], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let tape = Tape::new();
        let i = tape.leaf(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        assert_eq!(i.matmul(m).unwrap().value().data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn selector_row() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1., 0.]));
        let b = tape.leaf(t(&[2, 1], &[5., 7.]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[5.]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[3, 4]));
        let b = tape.leaf(Tensor::zeros(&[3, 2]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[3, 4]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn gradient_formulas() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[1, 2], &[1., 2.]));
        let b = tape.leaf(t(&[2, 1], &[3., 4.]));
        let g = tape.backward(a.matmul(b).unwrap().sum()).unwrap();
        // dA = 1 · Bᵀ, dB = Aᵀ · 1
        assert_eq!(g.get(a).unwrap().data(), &[3., 4.]);
        assert_eq!(g.get(b).unwrap().data(), &[1., 2.]);
    }

    #[test]
    fn batched_matches_per_batch() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn(&[2, 2, 3], |i| i as f64 * 0.5));
        let b = tape.leaf(Tensor::from_fn(&[2, 3, 2], |i| 1.0 - i as f64 * 0.25));
        let y = a.matmul(b).unwrap().value();
        for bi in 0..2 {
            let p = matmul_plain(&a.value().index_first(bi), &b.value().index_first(bi)).unwrap();
            assert_eq!(y.index_first(bi), p);
        }
    }
}
