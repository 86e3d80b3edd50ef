use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels. Pixel centres sit at integer coordinates,
/// x to the right and y down.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !fx.is_finite() || !fy.is_finite() {
            return Err(Error::Config(format!("focal lengths must be positive, got fx={fx} fy={fy}")));
        }
        if !cx.is_finite() || !cy.is_finite() {
            return Err(Error::Config("principal point must be finite".into()));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn k(&self) -> [[f64; 3]; 3] {
        [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
    }

    pub fn k_inv(&self) -> [[f64; 3]; 3] {
        [
            [1.0 / self.fx, 0.0, -self.cx / self.fx],
            [0.0, 1.0 / self.fy, -self.cy / self.fy],
            [0.0, 0.0, 1.0],
        ]
    }

    /// `K⁻¹ [u, v, 1]ᵀ`.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    /// Intrinsics of the same camera at `1/factor` resolution.
    pub fn downscaled(&self, factor: f64) -> Self {
        Self {
            fx: self.fx / factor,
            fy: self.fy / factor,
            cx: self.cx / factor,
            cy: self.cy / factor,
        }
    }
}
