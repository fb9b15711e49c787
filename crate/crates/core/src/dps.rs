//! Pixel-level spatial scales and the attention-map blend.
//!
//! Maps here are pixel-major (`pixels × tokens`, one row per query pixel),
//! so the per-pixel scale multiplies whole rows and every token column of
//! the edited prompt shares it.

use crate::backend::FEATURE_GRID;
use crate::error::{Error, Result};
use crate::fwt::KeyEmbedding;
use crate::tensor::{dot, l2_normalize_rows, Matrix, Resampler};

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialScales {
    /// One value in `[0, 1]` per pixel, row-major over `grid`.
    pub s: Vec<f32>,
    pub grid: (usize, usize),
    pub lambda_sv: f32,
    /// Overall interpolation weight.
    pub lambda_s: f32,
}

impl SpatialScales {
    pub fn new(s: Vec<f32>, grid: (usize, usize), lambda_sv: f32, lambda_s: f32) -> Result<Self> {
        if s.len() != grid.0 * grid.1 {
            return Err(Error::dim("SpatialScales::new", "scale count does not match grid"));
        }
        if s.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Contract("spatial scales must lie in [0, 1]".into()));
        }
        check_lambda_s(lambda_s)?;
        Ok(Self {
            s,
            grid,
            lambda_sv,
            lambda_s,
        })
    }

    pub fn with_interpolation(mut self, lambda_s: f32) -> Result<Self> {
        check_lambda_s(lambda_s)?;
        self.lambda_s = lambda_s;
        Ok(self)
    }

    /// Bilinearly resampled to another grid, re-clamped to `[0, 1]`.
    pub fn at_resolution(&self, grid: (usize, usize)) -> SpatialScales {
        if grid == self.grid {
            return self.clone();
        }
        let s = Resampler::new(self.grid, grid)
            .resample(&self.s)
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        SpatialScales {
            s,
            grid,
            lambda_sv: self.lambda_sv,
            lambda_s: self.lambda_s,
        }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

fn check_lambda_s(lambda_s: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda_s) {
        return Err(Error::Config(format!("lambda_s must lie in [0, 1], got {lambda_s}")));
    }
    Ok(())
}

/// `S = clamp(λ_S[V] · Ê_[V] k, 0, 1)` over the 32×32 grid, with the visual
/// feature rows L2-normalized. `lambda_s` starts at 1; set it with
/// [`SpatialScales::with_interpolation`].
pub fn spatial_scales(k: &KeyEmbedding, ev: &Matrix, lambda_sv: f32) -> Result<SpatialScales> {
    if !lambda_sv.is_finite() || lambda_sv < 0.0 {
        return Err(Error::Config(format!("lambda_sv must be ≥ 0, got {lambda_sv}")));
    }
    if ev.cols() != k.dim() {
        return Err(Error::dim(
            "spatial_scales",
            format!("features have width {}, key has {}", ev.cols(), k.dim()),
        ));
    }
    if ev.rows() != FEATURE_GRID * FEATURE_GRID {
        return Err(Error::dim(
            "spatial_scales",
            format!("expected {} pixels, got {}", FEATURE_GRID * FEATURE_GRID, ev.rows()),
        ));
    }
    let unit = l2_normalize_rows(ev);
    let s = unit
        .iter_rows()
        .map(|r| ((f64::from(lambda_sv) * dot(r, k.as_slice())) as f32).clamp(0.0, 1.0))
        .collect();
    Ok(SpatialScales {
        s,
        grid: (FEATURE_GRID, FEATURE_GRID),
        lambda_sv,
        lambda_s: 1.0,
    })
}

/// `C = λ_S·[S⊙M* + (1−S)⊙M] + (1−λ_S)·M`, with `S` indexed by row.
pub fn blend_maps(m_c: &Matrix, m_cstar: &Matrix, s: &SpatialScales) -> Result<Matrix> {
    m_c.check_same_shape(m_cstar, "blend_maps")?;
    if m_c.rows() != s.len() {
        return Err(Error::dim(
            "blend_maps",
            format!("maps have {} pixel rows, scales cover {}", m_c.rows(), s.len()),
        ));
    }
    let l = s.lambda_s;
    let mut out = Matrix::zeros(m_c.rows(), m_c.cols());
    for (p, &sp) in s.s.iter().enumerate() {
        let (a, b) = (m_c.row(p), m_cstar.row(p));
        for ((o, &x), &y) in out.row_mut(p).iter_mut().zip(a).zip(b) {
            *o = l * (sp * y + (1.0 - sp) * x) + (1.0 - l) * x;
        }
    }
    Ok(out)
}
