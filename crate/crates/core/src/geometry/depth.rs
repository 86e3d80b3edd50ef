use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Depth range covered by the bounded disparity head.
pub const MIN_DEPTH: f64 = 0.1;
pub const MAX_DEPTH: f64 = 100.0;

/// Disparities at or below this are treated as infinitely far (invalid).
const DISPARITY_EPS: f64 = 1e-12;

/// Metric depth `[1, H, W]` with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub values: Tensor,
    pub valid: Vec<bool>,
}

/// Disparity in pixels `[1, H, W]` with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    pub values: Tensor,
    pub valid: Vec<bool>,
}

fn check_map(values: &Tensor, valid: &[bool]) -> Result<(usize, usize)> {
    match *values.shape() {
        [1, h, w] if valid.len() == h * w => Ok((h, w)),
        _ => Err(Error::shape(values.shape(), "maps must be [1, H, W] with a matching mask")),
    }
}

impl DepthMap {
    /// Marks every strictly positive finite pixel valid.
    pub fn from_tensor(values: Tensor) -> Result<Self> {
        let valid = values.data().iter().map(|&d| d > 0.0 && d.is_finite()).collect();
        Self::new(values, valid)
    }

    pub fn new(values: Tensor, valid: Vec<bool>) -> Result<Self> {
        check_map(&values, &valid)?;
        if values
            .data()
            .iter()
            .zip(&valid)
            .any(|(&d, &ok)| ok && !(d > 0.0 && d.is_finite()))
        {
            return Err(Error::Range("valid depth must be strictly positive".into()));
        }
        Ok(Self { values, valid })
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.values.data()[y * self.width() + x]
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width() + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

impl DisparityMap {
    pub fn from_tensor(values: Tensor) -> Result<Self> {
        let valid = values.data().iter().map(|&d| d > DISPARITY_EPS && d.is_finite()).collect();
        Self::new(values, valid)
    }

    pub fn new(values: Tensor, valid: Vec<bool>) -> Result<Self> {
        check_map(&values, &valid)?;
        if values.data().iter().any(|&d| d < 0.0) {
            return Err(Error::Range("disparity must be non-negative".into()));
        }
        Ok(Self { values, valid })
    }
}

fn check_rig(baseline: f64, focal: f64) -> Result<()> {
    if !(baseline > 0.0) || !(focal > 0.0) {
        return Err(Error::Config(format!(
            "baseline and focal must be positive, got b={baseline} f={focal}"
        )));
    }
    Ok(())
}

/// `D = b·f / d`; pixels with `d <= eps` become invalid without dividing.
pub fn disparity_to_depth(d: &DisparityMap, baseline: f64, focal: f64) -> Result<DepthMap> {
    check_rig(baseline, focal)?;
    let bf = baseline * focal;
    let mut valid = d.valid.clone();
    let values = d
        .values
        .data()
        .iter()
        .zip(valid.iter_mut())
        .map(|(&dv, ok)| {
            if *ok && dv > DISPARITY_EPS {
                bf / dv
            } else {
                *ok = false;
                0.0
            }
        })
        .collect();
    Ok(DepthMap {
        values: Tensor::from_parts(d.values.shape().to_vec(), values),
        valid,
    })
}

/// `d = b·f / D` on valid pixels.
pub fn depth_to_disparity(depth: &DepthMap, baseline: f64, focal: f64) -> Result<DisparityMap> {
    check_rig(baseline, focal)?;
    let bf = baseline * focal;
    let values = depth
        .values
        .data()
        .iter()
        .zip(&depth.valid)
        .map(|(&dv, &ok)| if ok { bf / dv } else { 0.0 })
        .collect();
    Ok(DisparityMap {
        values: Tensor::from_parts(depth.values.shape().to_vec(), values),
        valid: depth.valid.clone(),
    })
}

/// Bounded sigmoid output to depth:
/// `D = 1 / (1/D_max + (1/D_min − 1/D_max)·σ)`.
pub fn sigmoid_to_depth(sigma: &Tensor) -> Result<Tensor> {
    if sigma.data().iter().any(|&s| !(0.0..=1.0).contains(&s)) {
        return Err(Error::Range("sigmoid output must lie in [0, 1]".into()));
    }
    let (lo, hi) = (1.0 / MAX_DEPTH, 1.0 / MIN_DEPTH);
    Ok(sigma.map(|s| 1.0 / (lo + (hi - lo) * s)))
}

/// Differentiable inverse depth `1/D` for a sigmoid output.
pub fn inv_depth_from_sigmoid(sigma: Var<'_>) -> Var<'_> {
    let (lo, hi) = (1.0 / MAX_DEPTH, 1.0 / MIN_DEPTH);
    sigma.scale(hi - lo).add_scalar(lo)
}
