//! Motion estimation between cardiac frames.
//!
//! Two backends share one configuration: a dense per-voxel field optimized
//! directly, and a cubic B-spline FFD optimized stochastically. Fields map
//! fixed-frame (end-diastole) points into the moving frame.

pub mod dense;
pub mod ffd;
mod field;
mod pyramid;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use dense::{laplacian, loss_dense, loss_dense_gradient, register_dense, LossTerms};
pub use ffd::{register_ffd, FfdOutcome, FfdTransform};
pub use field::{compose_fields, warp_image, DisplacementField};

use crate::error::{Error, Result};
use crate::volume::{FrameSequence, ImageVolume};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Dense,
    Ffd,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Every frame registered directly to end-diastole.
    #[default]
    FixedReference,
    /// Each frame registered to its predecessor.
    Sequential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub backend: Backend,
    pub lambda: f64,
    /// Per pyramid level. `None` picks the backend default.
    pub iterations: Option<usize>,
    pub ffd_samples: usize,
    pub pyramid_levels: usize,
    /// Dense backend: Adam step in voxels of the current level.
    pub learning_rate: f64,
    /// Dense backend: Gaussian width (voxels) of the smoothing applied to the
    /// optimized increment. Zero optimizes every voxel independently.
    pub smoothing_sigma_vox: f64,
    pub gain_a: f64,
    pub gain_big_a: f64,
    pub gain_alpha: f64,
    pub control_spacing_vox: f64,
    pub seed: u64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Dense,
            lambda: 1e-3,
            iterations: None,
            ffd_samples: 2048,
            pyramid_levels: 3,
            learning_rate: 0.05,
            smoothing_sigma_vox: 1.0,
            gain_a: 1.0,
            gain_big_a: 20.0,
            gain_alpha: 0.602,
            control_spacing_vox: 8.0,
            seed: 0,
        }
    }
}

impl RegistrationConfig {
    pub const DENSE_ITERATIONS: usize = 150;
    pub const FFD_ITERATIONS: usize = 500;

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.iterations == Some(0) {
            return Err(Error::InvalidArgument("iterations must be >= 1".into()));
        }
        if self.pyramid_levels == 0 {
            return Err(Error::InvalidArgument("pyramid_levels must be >= 1".into()));
        }
        if self.ffd_samples == 0 {
            return Err(Error::InvalidArgument("ffd_samples must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.gain_a > 0.0) || !(self.gain_big_a >= 0.0) || !(self.gain_alpha > 0.0) {
            return Err(Error::InvalidArgument("step-size parameters must be positive".into()));
        }
        if !(self.smoothing_sigma_vox >= 0.0) {
            return Err(Error::InvalidArgument("smoothing_sigma_vox must be >= 0".into()));
        }
        if !(self.control_spacing_vox > 0.0) {
            return Err(Error::InvalidArgument("control_spacing_vox must be positive".into()));
        }
        Ok(())
    }

    pub fn dense_iterations(&self) -> usize {
        self.iterations.unwrap_or(Self::DENSE_ITERATIONS)
    }

    pub fn ffd_iterations(&self) -> usize {
        self.iterations.unwrap_or(Self::FFD_ITERATIONS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub level: usize,
    pub iteration: usize,
    pub total: f64,
    pub similarity: f64,
    pub smooth: f64,
}

/// A registered field with its optimization trace.
#[derive(Clone, Debug)]
pub struct RegistrationOutcome {
    pub field: DisplacementField,
    pub log: Vec<IterationLog>,
    /// Full-resolution loss after each pyramid level, coarse to fine
    /// (dense backend only).
    pub level_losses: Vec<f64>,
}

/// Registers `moving` to `fixed` with the configured backend; FFD results
/// are converted to a dense field.
pub fn register(fixed: &ImageVolume, moving: &ImageVolume, config: &RegistrationConfig) -> Result<RegistrationOutcome> {
    match config.backend {
        Backend::Dense => register_dense(fixed, moving, config),
        Backend::Ffd => {
            let out = register_ffd(fixed, moving, config)?;
            Ok(RegistrationOutcome {
                field: out.transform.to_dense(),
                log: out.log,
                level_losses: Vec::new(),
            })
        }
    }
}

/// Fields for frame pairs `t = 1..N`: `(ED, t)` under fixed-reference
/// pairing, `(t-1, t)` under sequential pairing.
pub fn register_sequence(
    frames: &FrameSequence,
    config: &RegistrationConfig,
    pairing: Pairing,
) -> Result<Vec<RegistrationOutcome>> {
    config.validate()?;
    (1..frames.len())
        .into_par_iter()
        .map(|t| {
            let fixed = match pairing {
                Pairing::FixedReference => frames.end_diastole(),
                Pairing::Sequential => frames.frame(t - 1),
            };
            register(fixed, frames.frame(t), config).map_err(|e| e.in_stage("register", Some(t)))
        })
        .collect()
}

/// Chains sequential fields into end-diastole-to-frame fields.
pub fn accumulate_sequential(fields: &[DisplacementField]) -> Vec<DisplacementField> {
    let mut out: Vec<DisplacementField> = Vec::with_capacity(fields.len());
    for f in fields {
        let next = match out.last() {
            Some(prev) => compose_fields(prev, f),
            None => f.clone(),
        };
        out.push(next);
    }
    out
}

/// `level,iteration,total,similarity,smooth` CSV.
pub fn loss_log_csv(log: &[IterationLog]) -> String {
    let mut s = String::from("level,iteration,total,similarity,smooth\n");
    for l in log {
        s.push_str(&format!(
            "{},{},{:.12e},{:.12e},{:.12e}\n",
            l.level, l.iteration, l.total, l.similarity, l.smooth
        ));
    }
    s
}
