//! Overlapping image patches: extraction into a dataset with pixel-grid
//! locations, recomposition by per-pixel averaging, and patch-based
//! denoising with either the mixture model or OMP-ALS.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baseline::{baseline_fit, BaselineConfig};
use crate::em::{fit_msc, hard_reconstruction, posterior_mean, FitConfig, FitResult, RcSchedule};
use crate::model::{DataKind, Dataset, ModelFamily};
use crate::spatial::KernelFamily;
use crate::{MscError, Result};

/// Top-left offsets along one side: `0, s, 2s, …` plus a final offset
/// clamped to `side - patch` so the border is covered.
pub fn patch_offsets(side: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || stride == 0 {
        return Err(MscError::invalid("patch size and stride must be positive"));
    }
    if patch > side {
        return Err(MscError::invalid(format!("patch size {patch} exceeds image side {side}")));
    }
    let last = side - patch;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().unwrap() != last {
        out.push(last);
    }
    Ok(out)
}

/// Row/column coordinates of each element of a row-major `patch × patch`
/// vector, as a `patch² × 2` location matrix.
pub fn patch_grid(patch: usize) -> DMatrix<f64> {
    DMatrix::from_fn(patch * patch, 2, |l, c| if c == 0 { (l / patch) as f64 } else { (l % patch) as f64 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    /// Top-left `(row, col)` of each patch, in dataset order.
    pub origins: Vec<(usize, usize)>,
    pub data: Dataset,
}

/// All `patch × patch` blocks at the given stride, vectorized row-major.
pub fn extract_patches(image: &DMatrix<f64>, patch: usize, stride: usize) -> Result<PatchSet> {
    let (h, w) = image.shape();
    let rows = patch_offsets(h, patch, stride)?;
    let cols = patch_offsets(w, patch, stride)?;
    let m = patch * patch;
    let mut origins = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            origins.push((r, c));
        }
    }
    let values = DMatrix::from_fn(m, origins.len(), |l, i| {
        let (r, c) = origins[i];
        image[(r + l / patch, c + l % patch)]
    });
    let data = Dataset::new(values, DataKind::Real)?.with_locations(patch_grid(patch))?;
    Ok(PatchSet { patch, height: h, width: w, origins, data })
}

impl PatchSet {
    /// Averages the `m × n` patch estimates back into an image. Pixels no
    /// patch covers are zero.
    pub fn recompose(&self, patches: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let p = self.patch;
        if patches.shape() != (p * p, self.origins.len()) {
            return Err(MscError::invalid("patch matrix does not match the extraction"));
        }
        let mut sum = DMatrix::<f64>::zeros(self.height, self.width);
        let mut count = DMatrix::<f64>::zeros(self.height, self.width);
        for (i, &(r0, c0)) in self.origins.iter().enumerate() {
            for l in 0..p * p {
                let (r, c) = (r0 + l / p, c0 + l % p);
                sum[(r, c)] += patches[(l, i)];
                count[(r, c)] += 1.0;
            }
        }
        Ok(sum.zip_map(&count, |s, n| if n > 0.0 { s / n } else { 0.0 }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig {
    pub patch: usize,
    pub stride: usize,
    pub n_atoms: usize,
    pub d_max: usize,
    pub kernel: Option<KernelFamily>,
    /// Reconstruct from the most probable component instead of the
    /// posterior mean.
    pub hard: bool,
    /// Known noise variance, used as the starting σ².
    pub sigma2: Option<f64>,
    /// Choose the sparsity by BIC instead of fitting exactly `d_max`.
    pub select_d: bool,
    pub max_iter: usize,
    pub rejection: RcSchedule,
    pub seed: u64,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            patch: 12,
            stride: 3,
            n_atoms: 16,
            d_max: 2,
            kernel: Some(KernelFamily::Exponential),
            hard: false,
            sigma2: None,
            select_d: false,
            max_iter: 20,
            rejection: RcSchedule::default(),
            seed: 0,
        }
    }
}

impl DenoiseConfig {
    pub fn fit_config(&self) -> FitConfig {
        let family = if self.kernel.is_some() { ModelFamily::SpatialGaussian } else { ModelFamily::SimpleGaussian };
        let mut cfg = FitConfig::new(family, self.n_atoms, self.d_max);
        if let Some(k) = self.kernel {
            cfg.kernel = k;
        }
        cfg.max_iter = self.max_iter;
        cfg.rejection = self.rejection;
        cfg.seed = self.seed;
        cfg.sigma2_init = self.sigma2;
        cfg.stop_on_bic = self.select_d;
        cfg
    }
}

pub struct Denoised {
    pub image: DMatrix<f64>,
    pub fit: FitResult,
    pub n_patches: usize,
}

/// Fits the mixture model to the image patches and recomposes the
/// per-patch reconstructions.
pub fn denoise_msc(image: &DMatrix<f64>, config: &DenoiseConfig) -> Result<Denoised> {
    let set = extract_patches(image, config.patch, config.stride)?;
    let cfg = config.fit_config();
    let fit = fit_msc(&set.data, &cfg)?;
    let recon = if config.hard {
        hard_reconstruction(&fit.state, &fit.responsibilities, cfg.family)
    } else {
        posterior_mean(&fit.state, &fit.responsibilities, cfg.family)
    };
    let image = set.recompose(&recon)?.map(|v| v.round().clamp(0.0, 255.0));
    Ok(Denoised { image, fit, n_patches: set.origins.len() })
}

/// OMP-ALS patch denoising with `K` atoms at sparsity `d`.
pub fn denoise_baseline(image: &DMatrix<f64>, patch: usize, stride: usize, config: &BaselineConfig) -> Result<DMatrix<f64>> {
    let set = extract_patches(image, patch, stride)?;
    let fit = baseline_fit(&set.data, config)?;
    Ok(set.recompose(&fit.reconstruction())?.map(|v| v.round().clamp(0.0, 255.0)))
}
