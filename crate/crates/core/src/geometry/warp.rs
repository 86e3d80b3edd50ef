use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::camera::CameraIntrinsics;
use super::transform::{PoseVar, RigidTransform};

/// Points with transformed depth `Z' <= BEHIND_CAMERA_EPS` metres are invalid.
pub const BEHIND_CAMERA_EPS: f64 = 1e-6;

/// Coordinate written for pixels whose projection failed; always out of range.
const OFF_IMAGE: f64 = -1.0;

/// Continuous pixel coordinates of a projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    /// False when the point lies at or behind the camera plane.
    pub in_front: bool,
}

impl Projection {
    pub fn inside(&self, width: usize, height: usize) -> bool {
        self.in_front
            && self.u >= 0.0
            && self.v >= 0.0
            && self.u <= (width - 1) as f64
            && self.v <= (height - 1) as f64
    }
}

/// `X = D · K⁻¹ [u, v, 1]ᵀ`.
pub fn backproject(k: &CameraIntrinsics, u: f64, v: f64, depth: f64) -> [f64; 3] {
    let r = k.ray(u, v);
    [depth * r[0], depth * r[1], depth]
}

/// `p = K (R X + t)`, dehomogenised.
pub fn project(k: &CameraIntrinsics, t: &RigidTransform, x: [f64; 3]) -> Projection {
    let p = t.apply(x);
    if !(p[2] > BEHIND_CAMERA_EPS) {
        return Projection {
            u: OFF_IMAGE,
            v: OFF_IMAGE,
            in_front: false,
        };
    }
    Projection {
        u: k.fx * p[0] / p[2] + k.cx,
        v: k.fy * p[1] / p[2] + k.cy,
        in_front: true,
    }
}

/// A resampled image with its `[N, 1, H, W]` 0/1 validity mask.
#[derive(Clone, Debug)]
pub struct Warped<'t> {
    pub image: Var<'t>,
    pub valid: Tensor,
}

impl Warped<'_> {
    pub fn valid_count(&self) -> usize {
        self.valid.data().iter().filter(|&&v| v > 0.0).count()
    }
}

fn as_batched(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        [c, h, w] => Ok([1, c, h, w]),
        _ => Err(Error::shape(shape, format!("{what} must be [N, C, H, W] or [C, H, W]"))),
    }
}

/// Bilinear interpolation of `img` (`[N, C, H, W]` or `[C, H, W]`) at
/// `coords` (`[N, 2, H', W']` holding x then y, or `[2, H', W']`).
///
/// Out-of-range coordinates are clamped to the border (so that windowed
/// losses around them see plausible values) and clear the validity flag;
/// the clamped axis then carries no coordinate gradient. The result is
/// differentiable with respect to both the image and coordinates.
pub fn bilinear_sample<'t>(img: Var<'t>, coords: Var<'t>) -> Result<(Var<'t>, Tensor)> {
    let img_shape = img.shape();
    let [n, c, h, w] = as_batched(&img_shape, "image")?;
    let cshape = coords.shape();
    let [cn, two, oh, ow] = as_batched(&cshape, "coords")?;
    if cn != n || two != 2 || cshape.len() != img_shape.len() {
        return Err(Error::dim("bilinear_sample", &img_shape, &cshape));
    }
    let iv = img.value();
    let cv = coords.value();
    if !cv.is_finite() {
        return Err(Error::NonFinite("bilinear_sample coordinates".into()));
    }
    let hw = oh * ow;
    let plane = h * w;
    let mut out = vec![0.0; n * c * hw];
    let mut valid = vec![0.0; n * hw];
    // per output pixel: top-left index, tap strides, offsets and whether each
    // axis was in range
    let mut taps: Vec<(usize, usize, usize, f64, f64, bool, bool)> = Vec::with_capacity(n * hw);
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    for b in 0..n {
        for p in 0..hw {
            let x = cv.data()[(b * 2) * hw + p];
            let y = cv.data()[(b * 2 + 1) * hw + p];
            let x_in = (0.0..=xmax).contains(&x);
            let y_in = (0.0..=ymax).contains(&y);
            if x_in && y_in {
                valid[b * hw + p] = 1.0;
            }
            let (x, y) = (x.clamp(0.0, xmax), y.clamp(0.0, ymax));
            let x0 = (x.floor() as usize).min(w.saturating_sub(2));
            let y0 = (y.floor() as usize).min(h.saturating_sub(2));
            let (ax, ay) = (x - x0 as f64, y - y0 as f64);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            taps.push((y0 * w + x0, x1 - x0, (y1 - y0) * w, ax, ay, x_in, y_in));
            for ch in 0..c {
                let src = &iv.data()[(b * c + ch) * plane..];
                let i00 = src[y0 * w + x0];
                let i01 = src[y0 * w + x1];
                let i10 = src[y1 * w + x0];
                let i11 = src[y1 * w + x1];
                // convex form so that ax, ay ∈ {0, 1} reproduce pixels exactly
                let top = (1.0 - ax) * i00 + ax * i01;
                let bot = (1.0 - ax) * i10 + ax * i11;
                out[(b * c + ch) * hw + p] = (1.0 - ay) * top + ay * bot;
            }
        }
    }
    let mut out_shape = img_shape.clone();
    let nd = out_shape.len();
    out_shape[nd - 2] = oh;
    out_shape[nd - 1] = ow;
    let mut valid_shape = cshape.clone();
    valid_shape[nd - 3] = 1;
    let valid = Tensor::from_parts(valid_shape, valid);

    let (img_shape_b, cshape_b) = (img_shape.clone(), cshape.clone());
    let result = img.tape().op(Tensor::from_parts(out_shape, out), &[img, coords], move |g| {
        let gd = g.data();
        let mut gi = vec![0.0; n * c * plane];
        let mut gc = vec![0.0; n * 2 * hw];
        for b in 0..n {
            for p in 0..hw {
                let (base, dx, dy, ax, ay, x_in, y_in) = taps[b * hw + p];
                let (mut gx, mut gy) = (0.0, 0.0);
                for ch in 0..c {
                    let go = gd[(b * c + ch) * hw + p];
                    if go == 0.0 {
                        continue;
                    }
                    let off = (b * c + ch) * plane + base;
                    let src = &iv.data()[off..];
                    let (i00, i01, i10, i11) = (src[0], src[dx], src[dy], src[dy + dx]);
                    gi[off] += go * (1.0 - ax) * (1.0 - ay);
                    gi[off + dx] += go * ax * (1.0 - ay);
                    gi[off + dy] += go * (1.0 - ax) * ay;
                    gi[off + dy + dx] += go * ax * ay;
                    gx += go * ((1.0 - ay) * (i01 - i00) + ay * (i11 - i10));
                    gy += go * ((1.0 - ax) * (i10 - i00) + ax * (i11 - i01));
                }
                // a clamped axis (or a one-pixel-wide image) carries no coordinate gradient
                gc[(b * 2) * hw + p] = if dx == 0 || !x_in { 0.0 } else { gx };
                gc[(b * 2 + 1) * hw + p] = if dy == 0 || !y_in { 0.0 } else { gy };
            }
        }
        vec![
            Tensor::from_parts(img_shape_b.clone(), gi),
            Tensor::from_parts(cshape_b.clone(), gc),
        ]
    });
    Ok((result, valid))
}

fn pixel_grid(n: usize, h: usize, w: usize) -> Tensor {
    let hw = h * w;
    Tensor::from_fn(&[n, 2, h, w], |i| {
        let p = i % hw;
        if (i / hw) % 2 == 0 {
            (p % w) as f64
        } else {
            (p / w) as f64
        }
    })
}

/// Source-image coordinates `[N, 2, H, W]` of every target pixel for depth
/// `[N, 1, H, W]` and pose target→source. The second value marks pixels that
/// land in front of the source camera.
///
/// The projection is written as `u' = u + fx·(X' − r_x Z')/Z'` so that the
/// identity pose maps every pixel onto itself exactly.
pub fn project_depth<'t>(depth: Var<'t>, pose: &PoseVar<'t>, k: &CameraIntrinsics) -> Result<(Var<'t>, Tensor)> {
    let dshape = depth.shape();
    let [n, h, w] = match *dshape {
        [n, 1, h, w] => [n, h, w],
        _ => return Err(Error::shape(&dshape, "depth must be [N, 1, H, W]")),
    };
    if pose.batch() != n {
        return Err(Error::dim("project_depth", &dshape, &pose.rotation.shape()));
    }
    let dv = depth.value();
    let rv = pose.rotation.value();
    let tv = pose.translation.value();
    let hw = h * w;
    let mut coords = vec![0.0; n * 2 * hw];
    let mut front = vec![0.0; n * hw];
    // cached per pixel for the backward pass: X', Y', Z'
    let mut cam = vec![[0.0; 3]; n * hw];
    let k = *k;
    for b in 0..n {
        let r = &rv.data()[b * 9..b * 9 + 9];
        let t = &tv.data()[b * 3..b * 3 + 3];
        for p in 0..hw {
            let (u, v) = ((p % w) as f64, (p / w) as f64);
            let (rx, ry) = ((u - k.cx) / k.fx, (v - k.cy) / k.fy);
            let d = dv.data()[b * hw + p];
            let xs = [d * rx, d * ry, d];
            let xp = r[0] * xs[0] + r[1] * xs[1] + r[2] * xs[2] + t[0];
            let yp = r[3] * xs[0] + r[4] * xs[1] + r[5] * xs[2] + t[1];
            let zp = r[6] * xs[0] + r[7] * xs[1] + r[8] * xs[2] + t[2];
            cam[b * hw + p] = [xp, yp, zp];
            if zp > BEHIND_CAMERA_EPS && d.is_finite() {
                front[b * hw + p] = 1.0;
                coords[(b * 2) * hw + p] = u + k.fx * (xp - rx * zp) / zp;
                coords[(b * 2 + 1) * hw + p] = v + k.fy * (yp - ry * zp) / zp;
            } else {
                coords[(b * 2) * hw + p] = OFF_IMAGE;
                coords[(b * 2 + 1) * hw + p] = OFF_IMAGE;
            }
        }
    }
    let front_t = Tensor::from_parts(vec![n, 1, h, w], front.clone());
    let coords = depth.tape().op(
        Tensor::from_parts(vec![n, 2, h, w], coords),
        &[depth, pose.rotation, pose.translation],
        move |g| {
            let gd = g.data();
            let mut g_depth = vec![0.0; n * hw];
            let mut g_rot = vec![0.0; n * 9];
            let mut g_tr = vec![0.0; n * 3];
            for b in 0..n {
                let r = &rv.data()[b * 9..b * 9 + 9];
                for p in 0..hw {
                    if front[b * hw + p] == 0.0 {
                        continue;
                    }
                    let (u, v) = ((p % w) as f64, (p / w) as f64);
                    let (rx, ry) = ((u - k.cx) / k.fx, (v - k.cy) / k.fy);
                    let d = dv.data()[b * hw + p];
                    let [xp, yp, zp] = cam[b * hw + p];
                    let (gu, gv) = (gd[(b * 2) * hw + p], gd[(b * 2 + 1) * hw + p]);
                    // u' = u + fx (X'/Z' − rx), v' = v + fy (Y'/Z' − ry)
                    let gx = gu * k.fx / zp;
                    let gy = gv * k.fy / zp;
                    let gz = -(gu * k.fx * xp + gv * k.fy * yp) / (zp * zp);
                    let ray = [rx, ry, 1.0];
                    let gcam = [gx, gy, gz];
                    for i in 0..3 {
                        let a_i = r[i * 3] * rx + r[i * 3 + 1] * ry + r[i * 3 + 2];
                        g_depth[b * hw + p] += gcam[i] * a_i;
                        for j in 0..3 {
                            g_rot[b * 9 + i * 3 + j] += gcam[i] * d * ray[j];
                        }
                        g_tr[b * 3 + i] += gcam[i];
                    }
                }
            }
            vec![
                Tensor::from_parts(vec![n, 1, h, w], g_depth),
                Tensor::from_parts(vec![n, 3, 3], g_rot),
                Tensor::from_parts(vec![n, 3], g_tr),
            ]
        },
    );
    Ok((coords, front_t))
}

/// Inverse-warps `source` (`[N, C, H, W]`) into the target view using target
/// depth `[N, 1, H, W]` and the pose target→source. Validity is the product of
/// the in-front test and the sampler's in-range test.
pub fn warp_sequence<'t>(
    source: Var<'t>,
    depth: Var<'t>,
    pose: &PoseVar<'t>,
    k: &CameraIntrinsics,
) -> Result<Warped<'t>> {
    let (s, d) = (source.shape(), depth.shape());
    if s.len() != 4 || d.len() != 4 || s[0] != d[0] || s[2..] != d[2..] {
        return Err(Error::dim("warp_sequence", &s, &d));
    }
    let (coords, front) = project_depth(depth, pose, k)?;
    let (image, inside) = bilinear_sample(source, coords)?;
    let valid = front.zip_map(&inside, |a, b| a * b)?;
    Ok(Warped { image, valid })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StereoDirection {
    /// Reconstruct the left view from the right image: `I'(p) = I_r(p − d)`.
    Left,
    /// Reconstruct the right view from the left image: `I'(p) = I_l(p + d)`.
    Right,
}

impl StereoDirection {
    fn sign(self) -> f64 {
        match self {
            StereoDirection::Left => -1.0,
            StereoDirection::Right => 1.0,
        }
    }
}

/// Horizontal resampling of `source` (`[N, C, H, W]`) by a disparity field in
/// pixels (`[N, 1, H, W]`).
pub fn warp_stereo<'t>(source: Var<'t>, disparity: Var<'t>, direction: StereoDirection) -> Result<Warped<'t>> {
    let (s, d) = (source.shape(), disparity.shape());
    if s.len() != 4 || d.len() != 4 || d[1] != 1 || s[0] != d[0] || s[2..] != d[2..] {
        return Err(Error::dim("warp_stereo", &s, &d));
    }
    if disparity.value().data().iter().any(|&v| v < 0.0) {
        return Err(Error::Range("disparity must be non-negative".into()));
    }
    let (n, h, w) = (s[0], s[2], s[3]);
    let tape = source.tape();
    let grid = pixel_grid(n, h, w);
    let gx = tape.constant(grid.reshape(&[n, 2, h, w])?).slice(1, 0, 1)?;
    let gy = tape.constant(grid).slice(1, 1, 1)?;
    let x = gx.add(disparity.scale(direction.sign()))?;
    let coords = Var::concat(&[x, gy], 1)?;
    let (image, valid) = bilinear_sample(source, coords)?;
    Ok(Warped { image, valid })
}
