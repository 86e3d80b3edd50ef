//! Training objectives. Images are `[N, C, H, W]` in `[0, 1]`; per-pixel maps
//! are `[N, 1, H, W]`.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Label value excluded from the segmentation loss and metrics.
pub const IGNORE_INDEX: u8 = 255;

/// Per-pixel loss substituted where a source pixel could not be sampled, so
/// that the minimum over sources never selects it.
pub const INVALID_SURROGATE: f64 = 1e6;

const MEAN_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_seg: f64,
    pub lambda_smooth: f64,
    pub alpha_ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_seg: 1.0,
            lambda_smooth: 1e-3,
            alpha_ssim: 0.85,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_seg", self.lambda_seg),
            ("lambda_smooth", self.lambda_smooth),
            ("alpha_ssim", self.alpha_ssim),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if self.alpha_ssim > 1.0 {
            return Err(Error::Config(format!("alpha_ssim must be <= 1, got {}", self.alpha_ssim)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub photo: f64,
    pub smooth: f64,
    pub seg: f64,
    pub total: f64,
    pub valid_pixel_count: usize,
}

fn check_image_pair(a: &[usize], b: &[usize], op: &'static str) -> Result<()> {
    if a != b || a.len() != 4 {
        return Err(Error::dim(op, a, b));
    }
    Ok(())
}

/// Per-pixel, per-channel SSIM with 3×3 reflect-padded box statistics.
pub fn ssim<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    check_image_pair(&a.shape(), &b.shape(), "ssim")?;
    let mu_a = a.avg_pool3x3_reflect()?;
    let mu_b = b.avg_pool3x3_reflect()?;
    let sigma_a = a.square().avg_pool3x3_reflect()?.sub(mu_a.square())?;
    let sigma_b = b.square().avg_pool3x3_reflect()?.sub(mu_b.square())?;
    let sigma_ab = a.mul(b)?.avg_pool3x3_reflect()?.sub(mu_a.mul(mu_b)?)?;
    let num = mu_a
        .mul(mu_b)?
        .scale(2.0)
        .add_scalar(SSIM_C1)
        .mul(sigma_ab.scale(2.0).add_scalar(SSIM_C2))?;
    let den = mu_a
        .square()
        .add(mu_b.square())?
        .add_scalar(SSIM_C1)
        .mul(sigma_a.add(sigma_b)?.add_scalar(SSIM_C2))?;
    num.div(den)
}

/// `α·clamp((1 − SSIM)/2, 0, 1) + (1 − α)·|a − b|`, both averaged over channels.
pub fn photometric_error_map<'t>(target: Var<'t>, recon: Var<'t>, alpha: f64) -> Result<Var<'t>> {
    let dssim = ssim(target, recon)?.neg().add_scalar(1.0).scale(0.5).clamp(0.0, 1.0);
    let l1 = target.sub(recon)?.abs();
    dssim
        .scale(alpha)
        .add(l1.scale(1.0 - alpha))?
        .mean_axes(&[1])
}

fn count_valid(mask: &Tensor) -> usize {
    mask.data().iter().filter(|&&v| v > 0.0).count()
}

/// Mean of a per-pixel map over the pixels where `mask` is non-zero.
pub fn masked_mean<'t>(map: Var<'t>, mask: &Tensor) -> Result<Var<'t>> {
    if map.shape() != mask.shape() {
        return Err(Error::dim("masked_mean", &map.shape(), mask.shape()));
    }
    let n = count_valid(mask);
    if n == 0 {
        return Err(Error::Degenerate("no valid pixels".into()));
    }
    Ok(map.mul_const(mask)?.sum().scale(1.0 / n as f64))
}

/// Photometric loss averaged over the `N` valid pixels.
pub fn photometric_loss<'t>(target: Var<'t>, recon: Var<'t>, valid: &Tensor, alpha: f64) -> Result<Var<'t>> {
    masked_mean(photometric_error_map(target, recon, alpha)?, valid)
}

/// Replaces the loss of unsampled pixels by [`INVALID_SURROGATE`].
pub fn with_invalid_surrogate<'t>(map: Var<'t>, valid: &Tensor) -> Result<Var<'t>> {
    if map.shape() != valid.shape() {
        return Err(Error::dim("with_invalid_surrogate", &map.shape(), valid.shape()));
    }
    let fill = valid.map(|v| if v > 0.0 { 0.0 } else { INVALID_SURROGATE });
    let fill = map.tape().constant(fill);
    map.mul_const(valid)?.add(fill)
}

/// Minimum reprojection output: per-pixel loss and the pixels that count.
#[derive(Clone, Debug)]
pub struct Reprojection<'t> {
    pub loss_map: Var<'t>,
    pub mask: Tensor,
}

impl<'t> Reprojection<'t> {
    pub fn valid_count(&self) -> usize {
        count_valid(&self.mask)
    }

    pub fn loss(&self) -> Result<Var<'t>> {
        masked_mean(self.loss_map, &self.mask)
    }
}

/// Per-pixel minimum over source losses, keeping a pixel only where that
/// minimum is strictly below the minimum identity (unwarped) loss. An empty
/// `identity` list disables auto-masking. Pixels whose minimum is the
/// invalid surrogate are dropped as well.
pub fn min_reprojection_automask<'t>(per_source: &[Var<'t>], identity: &[Tensor]) -> Result<Reprojection<'t>> {
    let (first, rest) = per_source
        .split_first()
        .ok_or_else(|| Error::Config("minimum reprojection needs at least one source".into()))?;
    let mut best = *first;
    for s in rest {
        best = best.minimum(*s)?;
    }
    let shape = best.shape();
    let bv = best.value();
    let mut keep: Vec<f64> = bv
        .data()
        .iter()
        .map(|&v| if v < INVALID_SURROGATE { 1.0 } else { 0.0 })
        .collect();
    if let Some((id0, id_rest)) = identity.split_first() {
        let mut id_min = id0.clone();
        for t in id_rest {
            id_min = id_min.zip_map(t, f64::min)?;
        }
        if id_min.shape() != shape.as_slice() {
            return Err(Error::dim("min_reprojection_automask", &shape, id_min.shape()));
        }
        for ((k, &w), &i) in keep.iter_mut().zip(bv.data()).zip(id_min.data()) {
            if !(w < i) {
                *k = 0.0;
            }
        }
    }
    Ok(Reprojection {
        loss_map: best,
        mask: Tensor::new(&shape, keep)?,
    })
}

/// Edge-aware smoothness of a mean-normalised disparity `[N, 1, H, W]`
/// against image `[N, C, H, W]`.
pub fn smoothness_loss<'t>(disp: Var<'t>, image: &Tensor) -> Result<Var<'t>> {
    let ds = disp.shape();
    let is = image.shape();
    if ds.len() != 4 || ds[1] != 1 || is.len() != 4 || ds[0] != is[0] || ds[2..] != is[2..] {
        return Err(Error::dim("smoothness_loss", &ds, is));
    }
    let (n, c, h, w) = (is[0], is[1], is[2], is[3]);
    if h < 2 || w < 2 {
        return Err(Error::shape(&ds, "smoothness needs H, W >= 2"));
    }
    let mean = disp.mean_axes(&[2, 3])?;
    if mean.value().data().iter().any(|&m| !(m > MEAN_EPS)) {
        return Err(Error::Degenerate("disparity mean is not positive".into()));
    }
    let dn = disp.div(mean)?;
    // image edge weights exp(−mean_c |∂I|)
    let weight = |dx: usize, dy: usize| {
        let (hh, ww) = (h - dy, w - dx);
        Tensor::from_fn(&[n, 1, hh, ww], |i| {
            let (b, y, x) = (i / (hh * ww), (i / ww) % hh, i % ww);
            let g: f64 = (0..c)
                .map(|ch| {
                    let at = |yy: usize, xx: usize| image.data()[((b * c + ch) * h + yy) * w + xx];
                    (at(y + dy, x + dx) - at(y, x)).abs()
                })
                .sum::<f64>()
                / c as f64;
            (-g).exp()
        })
    };
    let gx = dn.slice(3, 1, w - 1)?.sub(dn.slice(3, 0, w - 1)?)?.abs();
    let gy = dn.slice(2, 1, h - 1)?.sub(dn.slice(2, 0, h - 1)?)?.abs();
    gx.mul_const(&weight(1, 0))?
        .mean()
        .add(gy.mul_const(&weight(0, 1))?.mean())
}

/// Mean cross-entropy of logits `[N, C, H, W]` against labels `[N·H·W]`
/// (row-major `N, H, W`), skipping [`IGNORE_INDEX`].
pub fn cross_entropy_seg<'t>(logits: Var<'t>, labels: &[u8]) -> Result<Var<'t>> {
    let shape = logits.shape();
    let [n, c, h, w] = match *shape {
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(Error::shape(&shape, "logits must be [N, C, H, W]")),
    };
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::dim("cross_entropy_seg", &shape, &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE_INDEX && l as usize >= c) {
        return Err(Error::Range(format!("label {bad} outside [0, {c})")));
    }
    let count = labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
    if count == 0 {
        return Err(Error::Degenerate("every pixel carries the ignore label".into()));
    }
    let x = logits.value();
    let xd = x.data();
    // softmax probabilities, kept for the backward pass
    let mut prob = vec![0.0; n * c * hw];
    let mut total = 0.0;
    for b in 0..n {
        for p in 0..hw {
            let at = |k: usize| (b * c + k) * hw + p;
            let m = (0..c).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..c).map(|k| (xd[at(k)] - m).exp()).sum();
            for k in 0..c {
                prob[at(k)] = (xd[at(k)] - m).exp() / s;
            }
            let l = labels[b * hw + p];
            if l != IGNORE_INDEX {
                total += m + s.ln() - xd[at(l as usize)];
            }
        }
    }
    let labels = labels.to_vec();
    let inv = 1.0 / count as f64;
    Ok(logits.tape().op(Tensor::scalar(total * inv), &[logits], move |g| {
        let g = g.item() * inv;
        let mut gx = vec![0.0; n * c * hw];
        for b in 0..n {
            for p in 0..hw {
                let l = labels[b * hw + p];
                if l == IGNORE_INDEX {
                    continue;
                }
                for k in 0..c {
                    let i = (b * c + k) * hw + p;
                    let onehot = if k == l as usize { 1.0 } else { 0.0 };
                    gx[i] = g * (prob[i] - onehot);
                }
            }
        }
        vec![Tensor::from_parts(vec![n, c, h, w], gx)]
    }))
}

/// `photo + λ_smooth·smooth + λ_seg·seg`, rejecting non-finite parts.
pub fn total_loss(photo: f64, smooth: f64, seg: f64, valid_pixel_count: usize, w: &LossWeights) -> Result<LossBreakdown> {
    for (name, v) in [("photo", photo), ("smooth", smooth), ("seg", seg)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss ({v})")));
        }
    }
    Ok(LossBreakdown {
        photo,
        smooth,
        seg,
        total: photo + w.lambda_smooth * smooth + w.lambda_seg * seg,
        valid_pixel_count,
    })
}
