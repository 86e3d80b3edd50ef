use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type Mat3 = [[f64; 3]; 3];

/// Rotation followed by translation: `X' = R X + t`, translation in metres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Mat3,
    pub translation: [f64; 3],
}

const ORTHO_TOL: f64 = 1e-9;

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

impl RigidTransform {
    pub fn new(rotation: Mat3, translation: [f64; 3]) -> Result<Self> {
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| rotation[k][i] * rotation[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                if (dot - target).abs() > ORTHO_TOL {
                    return Err(Error::Config(format!("rotation is not orthonormal (RᵀR[{i}][{j}] = {dot})")));
                }
            }
        }
        let det = det3(&rotation);
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::Config(format!("rotation determinant is {det}, expected +1")));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("translation must be finite".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn from_translation(t: [f64; 3]) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rodrigues' formula for an axis-angle vector `r` (angle `|r|` radians).
    pub fn from_axis_angle(r: [f64; 3], t: [f64; 3]) -> Self {
        let s = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
        let (a, b) = (rodrigues_a(s).0, rodrigues_b(s).0);
        let k = [[0.0, -r[2], r[1]], [r[2], 0.0, -r[0]], [-r[1], r[0], 0.0]];
        let mut rot = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let k2: f64 = (0..3).map(|p| k[i][p] * k[p][j]).sum();
                rot[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2;
            }
        }
        Self {
            rotation: rot,
            translation: t,
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let mut out = self.translation;
        for i in 0..3 {
            out[i] += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
        }
        out
    }

    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let rt = [[r[0][0], r[1][0], r[2][0]], [r[0][1], r[1][1], r[2][1]], [r[0][2], r[1][2], r[2][2]]];
        let t = self.translation;
        let mut ti = [0.0; 3];
        for i in 0..3 {
            ti[i] = -(rt[i][0] * t[0] + rt[i][1] * t[1] + rt[i][2] * t[2]);
        }
        Self {
            rotation: rt,
            translation: ti,
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let mut rot = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rot[i][j] = (0..3).map(|k| self.rotation[i][k] * other.rotation[k][j]).sum();
            }
        }
        Self {
            rotation: rot,
            translation: self.apply(other.translation),
        }
    }

    /// Largest deviation of `RᵀR` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                worst = worst.max((dot - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        worst.max((det3(r) - 1.0).abs())
    }
}

/// `sin θ / θ` as a function of `s = θ²`, with its derivative.
fn rodrigues_a(s: f64) -> (f64, f64) {
    if s < 1e-2 {
        (
            1.0 - s / 6.0 + s * s / 120.0 - s * s * s / 5040.0,
            -1.0 / 6.0 + s / 60.0 - s * s / 1680.0,
        )
    } else {
        let th = s.sqrt();
        let (sn, cs) = th.sin_cos();
        (sn / th, (th * cs - sn) / (2.0 * th * s))
    }
}

/// `(1 − cos θ) / θ²` as a function of `s = θ²`, with its derivative.
fn rodrigues_b(s: f64) -> (f64, f64) {
    if s < 1e-2 {
        (
            0.5 - s / 24.0 + s * s / 720.0 - s * s * s / 40320.0,
            -1.0 / 24.0 + s / 360.0 - s * s / 13440.0,
        )
    } else {
        let th = s.sqrt();
        let (sn, cs) = th.sin_cos();
        ((1.0 - cs) / s, (th * sn - 2.0 * (1.0 - cs)) / (2.0 * s * s))
    }
}

/// A batch of differentiable rigid transforms.
#[derive(Clone, Copy, Debug)]
pub struct PoseVar<'t> {
    /// `[N, 3, 3]`
    pub rotation: Var<'t>,
    /// `[N, 3]`
    pub translation: Var<'t>,
}

impl<'t> PoseVar<'t> {
    pub fn constant(tape: &'t Tape, poses: &[RigidTransform]) -> Result<Self> {
        let n = poses.len();
        if n == 0 {
            return Err(Error::Config("empty pose batch".into()));
        }
        let rot = Tensor::from_fn(&[n, 3, 3], |i| poses[i / 9].rotation[(i % 9) / 3][i % 3]);
        let tr = Tensor::from_fn(&[n, 3], |i| poses[i / 3].translation[i % 3]);
        Ok(Self {
            rotation: tape.constant(rot),
            translation: tape.constant(tr),
        })
    }

    pub fn batch(&self) -> usize {
        self.rotation.shape()[0]
    }

    /// Current values as plain transforms.
    pub fn to_transforms(&self) -> Vec<RigidTransform> {
        let r = self.rotation.value();
        let t = self.translation.value();
        (0..self.batch())
            .map(|b| {
                let mut rot = [[0.0; 3]; 3];
                for (i, row) in rot.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = r.get(&[b, i, j]);
                    }
                }
                RigidTransform {
                    rotation: rot,
                    translation: [t.get(&[b, 0]), t.get(&[b, 1]), t.get(&[b, 2])],
                }
            })
            .collect()
    }
}

fn rodrigues_coeffs<'t>(s: Var<'t>) -> (Var<'t>, Var<'t>) {
    let sv = s.value();
    let apply = |f: fn(f64) -> (f64, f64)| {
        let vals = sv.map(|x| f(x).0);
        let saved = sv.clone();
        s.tape().op(vals, &[s], move |g| {
            vec![g.zip_map(&saved, |g, x| g * f(x).1).expect("same shape")]
        })
    };
    (apply(rodrigues_a), apply(rodrigues_b))
}

/// Maps `[N, 6]` (axis-angle rotation, translation) to differentiable
/// transforms. The rotation is orthonormal by construction.
pub fn pose_from_axis_angle<'t>(params: Var<'t>) -> Result<PoseVar<'t>> {
    let shape = params.shape();
    if shape.len() != 2 || shape[1] != 6 {
        return Err(Error::shape(&shape, "pose parameters must be [N, 6]"));
    }
    let n = shape[0];
    let tape = params.tape();
    let r = params.slice(1, 0, 3)?;
    let t = params.slice(1, 3, 3)?;
    let s = r.square().sum_axes(&[1])?; // [N,1]
    let (a, b) = rodrigues_coeffs(s);
    let comp = |i: usize| r.slice(1, i, 1); // [N,1]
    let (r1, r2, r3) = (comp(0)?, comp(1)?, comp(2)?);
    let zero = tape.constant(Tensor::zeros(&[n, 1]));
    let row = |a: Var<'t>, b: Var<'t>, c: Var<'t>| Var::concat(&[a, b, c], 1)?.reshape(&[n, 1, 3]);
    let k = Var::concat(
        &[
            row(zero, r3.neg(), r2)?,
            row(r3, zero, r1.neg())?,
            row(r2.neg(), r1, zero)?,
        ],
        1,
    )?; // [N,3,3]
    let k2 = k.matmul(k)?;
    let eye = tape.constant(Tensor::from_fn(&[1, 3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
    let rot = eye
        .add(a.reshape(&[n, 1, 1])?.mul(k)?)?
        .add(b.reshape(&[n, 1, 1])?.mul(k2)?)?;
    Ok(PoseVar {
        rotation: rot,
        translation: t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_valid_and_inverse_round_trips() {
        let t = RigidTransform::from_axis_angle([0.1, -0.2, 0.3], [1.0, 2.0, -0.5]);
        assert!(t.orthonormality_error() < 1e-12);
        let p = [0.3, -1.2, 4.0];
        let q = t.inverse().apply(t.apply(p));
        for i in 0..3 {
            assert!((p[i] - q[i]).abs() < 1e-12);
        }
        assert!(RigidTransform::new(t.rotation, t.translation).is_ok());
    }

    #[test]
    fn rejects_non_rotation() {
        let mut r = RigidTransform::identity().rotation;
        r[0][0] = -1.0; // reflection
        assert!(RigidTransform::new(r, [0.0; 3]).is_err());
        r[0][0] = 1.1;
        assert!(RigidTransform::new(r, [0.0; 3]).is_err());
    }

    #[test]
    fn zero_axis_angle_is_identity() {
        let tape = Tape::new();
        let p = tape.leaf(Tensor::zeros(&[2, 6]));
        let pose = pose_from_axis_angle(p).unwrap();
        for t in pose.to_transforms() {
            assert_eq!(t, RigidTransform::identity());
        }
    }

    #[test]
    fn differentiable_rotation_matches_plain_rodrigues() {
        let tape = Tape::new();
        let raw = [0.4, -0.1, 0.25, 0.5, 0.0, -1.0, 1e-4, 2e-4, -1e-4, 0.0, 0.1, 0.2];
        let p = tape.leaf(Tensor::new(&[2, 6], raw.to_vec()).unwrap());
        let pose = pose_from_axis_angle(p).unwrap();
        for (b, t) in pose.to_transforms().iter().enumerate() {
            let r = &raw[b * 6..b * 6 + 3];
            let expect = RigidTransform::from_axis_angle([r[0], r[1], r[2]], [raw[b * 6 + 3], raw[b * 6 + 4], raw[b * 6 + 5]]);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((t.rotation[i][j] - expect.rotation[i][j]).abs() < 1e-14);
                }
            }
            assert!(t.orthonormality_error() < 1e-9);
        }
    }

    #[test]
    fn series_and_closed_form_agree_at_switch() {
        let s: f64 = 1e-2;
        let th = s.sqrt();
        let (a, da) = rodrigues_a(s * (1.0 - 1e-12));
        let (b, db) = rodrigues_b(s * (1.0 - 1e-12));
        assert!((a - th.sin() / th).abs() < 1e-13);
        assert!((b - (1.0 - th.cos()) / s).abs() < 1e-13);
        let (a2, da2) = rodrigues_a(s);
        let (b2, db2) = rodrigues_b(s);
        assert!((a - a2).abs() < 1e-12 && (da - da2).abs() < 1e-9);
        assert!((b - b2).abs() < 1e-12 && (db - db2).abs() < 1e-9);
    }
}
