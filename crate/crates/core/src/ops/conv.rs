//! Spatial ops over `[N, C, H, W]` tensors (a `[C, H, W]` input is treated
//! as a batch of one and returned without the batch axis).

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::linalg::{gemm_acc, gemm_nt_acc, gemm_tn_acc};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const SAME_1X1: Conv2dSpec = Conv2dSpec { stride: 1, padding: 0 };
    pub const SAME_3X3: Conv2dSpec = Conv2dSpec { stride: 1, padding: 1 };

    pub fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// Output extent for one spatial axis. Errors unless the kernel tiles the
    /// padded input exactly.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::Config("conv stride must be >= 1".into()));
        }
        let padded = input + 2 * self.padding;
        if kernel > padded {
            return Err(Error::Config(format!(
                "kernel {kernel} does not fit padded input {padded}"
            )));
        }
        if (padded - kernel) % self.stride != 0 {
            return Err(Error::Config(format!(
                "non-integer conv output extent: ({input} + 2*{} - {kernel}) / {}",
                self.padding, self.stride
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

/// Lifts `[C,H,W]` to `[1,C,H,W]`; returns whether it did.
fn as_batched(shape: &[usize], op: &'static str) -> Result<(bool, [usize; 4])> {
    match *shape {
        [c, h, w] => Ok((true, [1, c, h, w])),
        [n, c, h, w] => Ok((false, [n, c, h, w])),
        _ => Err(Error::shape(shape, format!("{op} expects [N,C,H,W] or [C,H,W]"))),
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k_h: usize,
    k_w: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.c * self.k_h * self.k_w
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let n_out = self.ho * self.wo;
        for ci in 0..self.c {
            for ky in 0..self.k_h {
                for kx in 0..self.k_w {
                    let row = (ci * self.k_h + ky) * self.k_w + kx;
                    let dst = &mut cols[row * n_out..(row + 1) * n_out];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let src = &x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let n_out = self.ho * self.wo;
        for ci in 0..self.c {
            for ky in 0..self.k_h {
                for kx in 0..self.k_w {
                    let row = (ci * self.k_h + ky) * self.k_w + kx;
                    let src = &cols[row * n_out..(row + 1) * n_out];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == 1 && self.pad == 0
    }
}

impl<'t> Var<'t> {
    /// 2-D cross-correlation with weights `[O, C, kh, kw]` and optional bias `[O]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, spec: Conv2dSpec) -> Result<Var<'t>> {
        let x = self.value();
        let w = weight.value();
        let (unbatched, [n, c, h, wd]) = as_batched(x.shape(), "conv2d")?;
        let &[o, wc, k_h, k_w] = w.shape() else {
            return Err(Error::shape(w.shape(), "conv2d weight must be [O,C,kh,kw]"));
        };
        if wc != c {
            return Err(Error::dim("conv2d", x.shape(), w.shape()));
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(Error::dim("conv2d bias", w.shape(), &b.shape()));
            }
        }
        let ho = spec.output_extent(h, k_h)?;
        let wo = spec.output_extent(wd, k_w)?;
        let geo = Geometry {
            c,
            h,
            w: wd,
            k_h,
            k_w,
            ho,
            wo,
            stride: spec.stride,
            pad: spec.padding,
        };
        let rows = geo.col_rows();
        let n_out = ho * wo;
        let pointwise = geo.is_pointwise();
        let mut cols_all = if pointwise { Vec::new() } else { vec![0.0; n * rows * n_out] };
        let mut out = vec![0.0; n * o * n_out];
        let bias_vals = bias.map(|b| b.value());
        for bi in 0..n {
            let xin = &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd];
            let cols: &[f64] = if pointwise {
                xin
            } else {
                let slot = &mut cols_all[bi * rows * n_out..(bi + 1) * rows * n_out];
                geo.im2col(xin, slot);
                slot
            };
            let dst = &mut out[bi * o * n_out..(bi + 1) * o * n_out];
            if let Some(b) = &bias_vals {
                for (oc, chunk) in dst.chunks_mut(n_out).enumerate() {
                    chunk.fill(b.data()[oc]);
                }
            }
            gemm_acc(o, rows, n_out, w.data(), cols, dst);
        }
        let out_shape = if unbatched {
            vec![o, ho, wo]
        } else {
            vec![n, o, ho, wo]
        };
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        let x_shape = x.shape().to_vec();
        let w_shape = w.shape().to_vec();
        Ok(self.tape().op(Tensor::from_parts(out_shape, out), &inputs, move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; n * c * h * wd];
            let mut gw = vec![0.0; w.numel()];
            let mut gb = vec![0.0; o];
            let mut dcols = vec![0.0; rows * n_out];
            for bi in 0..n {
                let gs = &gd[bi * o * n_out..(bi + 1) * o * n_out];
                let cols: &[f64] = if pointwise {
                    &x.data()[bi * c * h * wd..(bi + 1) * c * h * wd]
                } else {
                    &cols_all[bi * rows * n_out..(bi + 1) * rows * n_out]
                };
                // dW += G · colsᵀ
                gemm_nt_acc(o, n_out, rows, gs, cols, &mut gw);
                if has_bias {
                    for (oc, chunk) in gs.chunks(n_out).enumerate() {
                        gb[oc] += chunk.iter().sum::<f64>();
                    }
                }
                // dcols = Wᵀ · G
                let gxs = &mut gx[bi * c * h * wd..(bi + 1) * c * h * wd];
                if pointwise {
                    gemm_tn_acc(rows, o, n_out, w.data(), gs, gxs);
                } else {
                    dcols.fill(0.0);
                    gemm_tn_acc(rows, o, n_out, w.data(), gs, &mut dcols);
                    geo.col2im(&dcols, gxs);
                }
            }
            let mut grads = vec![
                Tensor::from_parts(x_shape.clone(), gx),
                Tensor::from_parts(w_shape.clone(), gw),
            ];
            if has_bias {
                grads.push(Tensor::from_parts(vec![o], gb));
            }
            grads
        }))
    }

    /// Nearest-neighbour upsampling by an integer factor in both spatial axes.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t>> {
        if factor == 0 {
            return Err(Error::Config("upsample factor must be >= 1".into()));
        }
        let x = self.value();
        let (unbatched, [n, c, h, w]) = as_batched(x.shape(), "upsample_nearest")?;
        if factor == 1 {
            return Ok(self);
        }
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![0.0; n * c * ho * wo];
        let xd = x.data();
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for oy in 0..ho {
                let srow = &src[(oy / factor) * w..][..w];
                let drow = &mut dst[oy * wo..(oy + 1) * wo];
                for (ox, d) in drow.iter_mut().enumerate() {
                    *d = srow[ox / factor];
                }
            }
        }
        let out_shape = if unbatched { vec![c, ho, wo] } else { vec![n, c, ho, wo] };
        let x_shape = x.shape().to_vec();
        Ok(self.tape().op(Tensor::from_parts(out_shape, out), &[self], move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; n * c * h * w];
            for plane in 0..n * c {
                let src = &gd[plane * ho * wo..(plane + 1) * ho * wo];
                let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        dst[(oy / factor) * w + ox / factor] += src[oy * wo + ox];
                    }
                }
            }
            vec![Tensor::from_parts(x_shape.clone(), gx)]
        }))
    }

    /// Per-channel spatial mean: `[N,C,H,W] -> [N,C]` (or `[C,H,W] -> [C]`).
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let x = self.value();
        let (unbatched, [n, c, h, w]) = as_batched(x.shape(), "global_avg_pool")?;
        let hw = h * w;
        let out: Vec<f64> = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let out_shape = if unbatched { vec![c] } else { vec![n, c] };
        let x_shape = x.shape().to_vec();
        Ok(self.tape().op(Tensor::from_parts(out_shape, out), &[self], move |g| {
            let mut gx = Vec::with_capacity(n * c * hw);
            for &gv in g.data() {
                gx.extend(std::iter::repeat(gv / hw as f64).take(hw));
            }
            vec![Tensor::from_parts(x_shape.clone(), gx)]
        }))
    }

    /// 3×3 box filter with reflect padding; output has the input's shape.
    pub fn avg_pool3x3_reflect(self) -> Result<Var<'t>> {
        let x = self.value();
        let (_, [n, c, h, w]) = as_batched(x.shape(), "avg_pool3x3_reflect")?;
        if h < 2 || w < 2 {
            return Err(Error::shape(x.shape(), "reflect padding needs H, W >= 2"));
        }
        let reflect = |i: isize, n: usize| -> usize {
            if i < 0 {
                (-i) as usize
            } else if i as usize >= n {
                2 * (n - 1) - i as usize
            } else {
                i as usize
            }
        };
        let mut out = vec![0.0; x.numel()];
        let xd = x.data();
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * h * w..(plane + 1) * h * w];
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for dy in -1..=1isize {
                        let sy = reflect(y as isize + dy, h);
                        for dx in -1..=1isize {
                            s += src[sy * w + reflect(xx as isize + dx, w)];
                        }
                    }
                    dst[y * w + xx] = s / 9.0;
                }
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.tape().op(Tensor::from_parts(shape.clone(), out), &[self], move |g| {
            let gd = g.data();
            let mut gx = vec![0.0; gd.len()];
            for plane in 0..n * c {
                let src = &gd[plane * h * w..(plane + 1) * h * w];
                let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                for y in 0..h {
                    for xx in 0..w {
                        let v = src[y * w + xx] / 9.0;
                        for dy in -1..=1isize {
                            let sy = reflect(y as isize + dy, h);
                            for dx in -1..=1isize {
                                dst[sy * w + reflect(xx as isize + dx, w)] += v;
                            }
                        }
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
    fn unit_1x1_kernel_is_identity() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 4, 5], |i| (i as f64).sin()));
        let w = tape.leaf(Tensor::ones(&[1, 1, 1, 1]));
        let y = x.conv2d(w, None, Conv2dSpec::SAME_1X1).unwrap();
        assert_eq!(*y.value(), *x.value());
    }

    #[test]
    fn ones_3x3_on_constant_image() {
        let tape = Tape::new();
        let c = 0.7;
        let x = tape.leaf(Tensor::full(&[1, 5, 6], c));
        let w = tape.leaf(Tensor::ones(&[1, 1, 3, 3]));
        let y = x.conv2d(w, None, Conv2dSpec::SAME_3X3).unwrap().value();
        assert_eq!(y.shape(), &[1, 5, 6]);
        for yy in 1..4 {
            for xx in 1..5 {
                assert!((y.get(&[0, yy, xx]) - 9.0 * c).abs() < 1e-12);
            }
        }
        // corners see four pixels
        assert!((y.get(&[0, 0, 0]) - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn output_extent_rules() {
        let s = Conv2dSpec::new(2, 1);
        assert_eq!(s.output_extent(8, 4).unwrap(), 4);
        assert!(matches!(s.output_extent(8, 3), Err(Error::Config(_))));
        assert!(Conv2dSpec::new(0, 0).output_extent(4, 1).is_err());
        assert!(Conv2dSpec::new(1, 0).output_extent(2, 3).is_err());
    }

    #[test]
    fn upsample_replicates_and_sums_back() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 1], vec![1.0]).unwrap());
        let y = x.upsample_nearest(2).unwrap();
        assert_eq!(y.shape(), vec![1, 2, 2]);
        assert_eq!(y.value().data(), &[1.0; 4]);
        let w = tape.constant(Tensor::new(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let g = tape.backward(y.mul(w).unwrap().sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[10.0]);

        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2, 3, 4, 5]));
        assert_eq!(x.upsample_nearest(2).unwrap().shape(), vec![2, 3, 8, 10]);
    }

    #[test]
    fn global_pool_values_and_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 2, 2], vec![1., 3., 5., 7.]).unwrap());
        let p = x.global_avg_pool().unwrap();
        assert_eq!(p.value().data(), &[4.0]);
        let g = tape.backward(p.sum()).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);

        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 4, 4], 2.5));
        assert_eq!(x.global_avg_pool().unwrap().value().data(), &[2.5; 6]);
    }

    #[test]
    fn box_filter_preserves_constants() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 2, 4, 5], 0.3));
        let y = x.avg_pool3x3_reflect().unwrap().value();
        assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
    }
}
