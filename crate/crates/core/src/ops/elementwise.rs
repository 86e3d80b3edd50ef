//! Broadcasting binary ops and pointwise unary ops.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::{numel_of, Tensor};

/// Numpy-style broadcast of two shapes, aligned at the trailing axis.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out`, with zero stride on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` for every output element.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel_of(out);
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let last = rank - 1;
    let mut o = 0;
    while o < n {
        for _ in 0..out[last] {
            f(o, oa, ob);
            o += 1;
            oa += sa[last];
            ob += sb[last];
        }
        oa -= sa[last] * out[last];
        ob -= sb[last] * out[last];
        // carry
        let mut d = last;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums a gradient of shape `out` down to a broadcast operand's `shape`.
pub(crate) fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let strides = broadcast_strides(shape, g.shape());
    let mut acc = vec![0.0; numel_of(shape)];
    let gd = g.data();
    for_each_broadcast(g.shape(), &strides, &strides, |o, a, _| acc[a] += gd[o]);
    Tensor::from_parts(shape.to_vec(), acc)
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
}

impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, kind: Binary, name: &'static str) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let out_shape =
            broadcast_shape(a.shape(), b.shape()).ok_or_else(|| Error::dim(name, a.shape(), b.shape()))?;
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![0.0; numel_of(&out_shape)];
        let same = a.shape() == b.shape();
        match (kind, same) {
            (Binary::Add, true) => out.iter_mut().zip(ad.iter().zip(bd)).for_each(|(o, (x, y))| *o = x + y),
            (Binary::Mul, true) => out.iter_mut().zip(ad.iter().zip(bd)).for_each(|(o, (x, y))| *o = x * y),
            _ => for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| {
                let (x, y) = (ad[i], bd[j]);
                out[o] = match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                    Binary::Min => {
                        if y < x {
                            y
                        } else {
                            x
                        }
                    }
                };
            }),
        }
        let value = Tensor::from_parts(out_shape.clone(), out);
        let (a_shape, b_shape) = (a.shape().to_vec(), b.shape().to_vec());
        Ok(self.tape().op(value, &[self, other], move |g| {
            let gd = g.data();
            let mut ga = vec![0.0; gd.len()];
            let mut gb = vec![0.0; gd.len()];
            let (ad, bd) = (a.data(), b.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| {
                let (x, y) = (ad[i], bd[j]);
                let (da, db) = match kind {
                    Binary::Add => (1.0, 1.0),
                    Binary::Sub => (1.0, -1.0),
                    Binary::Mul => (y, x),
                    Binary::Div => (1.0 / y, -x / (y * y)),
                    Binary::Min => {
                        if y < x {
                            (0.0, 1.0)
                        } else {
                            (1.0, 0.0)
                        }
                    }
                };
                ga[o] = gd[o] * da;
                gb[o] = gd[o] * db;
            });
            let ga = Tensor::from_parts(out_shape.clone(), ga);
            let gb = Tensor::from_parts(out_shape.clone(), gb);
            vec![reduce_to(&ga, &a_shape), reduce_to(&gb, &b_shape)]
        }))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Mul, "mul")
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Div, "div")
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Binary::Min, "minimum")
    }

    /// Multiplies by a constant tensor (typically a 0/1 mask).
    pub fn mul_const(self, c: &Tensor) -> Result<Var<'t>> {
        let c = self.tape().constant(c.clone());
        self.mul(c)
    }

    /// Pointwise map with derivative `df(x, y)` expressed from input and output.
    fn unary(self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var<'t> {
        let x = self.value();
        let y = x.map(f);
        let y_saved = y.clone();
        self.tape().op(y, &[self], move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data().iter().zip(y_saved.data()))
                .map(|(&g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Tensor::from_parts(g.shape().to_vec(), data)]
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(|x| c * x, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.unary(|x| x + c, |_, _| 1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(|x| 1.0 / x, |_, y| -y * y)
    }

    /// Absolute value with subgradient 0 at 0.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.unary(
            move |x| if x > 0.0 { x } else { slope * x },
            move |x, _| if x > 0.0 { 1.0 } else { slope },
        )
    }

    /// ELU with unit alpha.
    pub fn elu(self) -> Var<'t> {
        self.unary(
            |x| if x > 0.0 { x } else { x.exp_m1() },
            |x, y| if x > 0.0 { 1.0 } else { y + 1.0 },
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x < lo || x > hi { 0.0 } else { 1.0 },
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn incompatible_shapes_name_both() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2]));
        let err = a.add(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.leaf(t(&[3], &[10., 20., 30.]));
        let y = a.add(b).unwrap();
        assert_eq!(y.value().data(), &[11., 22., 33., 14., 25., 36.]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[2., 2., 2.]);
        assert_eq!(g.get(a).unwrap().data(), &[1.; 6]);
    }

    #[test]
    fn middle_axis_broadcast() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[2, 1, 2], &[1., 2., 3., 4.]));
        let b = tape.leaf(t(&[3, 1], &[1., 10., 100.]));
        let y = a.mul(b).unwrap();
        assert_eq!(y.shape(), vec![2, 3, 2]);
        assert_eq!(
            y.value().data(),
            &[1., 2., 10., 20., 100., 200., 3., 4., 30., 40., 300., 400.]
        );
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[111.; 4]);
        assert_eq!(g.get(b).unwrap().data(), &[10., 10., 10.]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        assert_eq!(x.sigmoid().item(), 0.5);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-2.0, 0.0, 3.0]));
        let g = tape.backward(x.abs().sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn minimum_tie_goes_to_self() {
        let tape = Tape::new();
        let a = tape.leaf(t(&[3], &[0.2, 0.1, 0.5]));
        let b = tape.leaf(t(&[3], &[0.1, 0.2, 0.5]));
        let m = a.minimum(b).unwrap();
        assert_eq!(m.value().data(), &[0.1, 0.1, 0.5]);
        let g = tape.backward(m.sum()).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 1.0, 1.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 0.0, 0.0]);
    }
}
