//! Analytic-vs-finite-difference gradient check on random toy configurations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_terms::ProblemKind;
use crate::diffusion::{Model, StageParams};
use crate::error::{Result, TnrdError};
use crate::filters::{DctBasis, FilterAtom};
use crate::image::Image;
use crate::influence::{InfluenceFunction, RbfSpec};
use crate::io::degrade;
use crate::training::{Scope, TrainingObjective, TrainingSample};

/// Attempts before giving up on finding a configuration whose finite-difference
/// probes all see the same set of clamped coefficients.
const MAX_RESAMPLES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub problem: ProblemKind,
    pub size: usize,
    pub kernel: usize,
    pub filters: usize,
    pub stages: usize,
    pub samples: usize,
    pub scope: Scope,
    /// Five-point stencil step.
    pub step: f64,
    pub seed: u64,
}

impl GradcheckConfig {
    pub fn new(problem: ProblemKind, seed: u64) -> Self {
        GradcheckConfig {
            problem,
            size: 8,
            kernel: 3,
            filters: 2,
            stages: 1,
            samples: 2,
            scope: Scope::Joint,
            step: 1e-3,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub coordinates: usize,
    /// Coordinates outside the tolerance.
    pub failures: usize,
    /// Largest `|a − fd| / max(abs_tol, rel_tol · max(|a|, |fd|))`; at most 1 on success.
    pub worst_score: f64,
    pub worst_coordinate: usize,
    pub max_abs_error: f64,
    /// Configurations discarded because a probe changed the clamp pattern.
    pub resamples: usize,
    pub analytic: Vec<f64>,
    pub finite_difference: Vec<f64>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Random model and samples for a toy check.
pub fn random_problem(cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<(Model, Vec<TrainingSample>)> {
    let basis = DctBasis::new(cfg.kernel)?;
    let rbf = RbfSpec::default();
    if cfg.filters == 0 || cfg.filters > basis.len() || cfg.stages == 0 || cfg.samples == 0 {
        return Err(TnrdError::invalid("gradient check needs positive filter, stage and sample counts"));
    }
    let stages = (0..cfg.stages)
        .map(|_| StageParams {
            lambda_raw: rng.random_range(-3.0..-1.0),
            filters: (0..cfg.filters)
                .map(|_| FilterAtom::new((0..basis.len()).map(|_| rng.random_range(-1.0..1.0)).collect()))
                .collect(),
            influences: (0..cfg.filters)
                .map(|_| InfluenceFunction::new((0..rbf.count).map(|_| rng.random_range(-0.3..0.3)).collect()))
                .collect(),
        })
        .collect();
    let model = Model::new(cfg.problem, cfg.kernel, rbf, stages)?;
    let samples = (0..cfg.samples)
        .map(|_| {
            let gt = Image::from_fn(cfg.size, cfg.size, |_, _| rng.random_range(0.0..255.0));
            Ok(TrainingSample {
                observation: degrade(&gt, cfg.problem, rng.random())?,
                ground_truth: gt,
            })
        })
        .collect::<Result<_>>()?;
    Ok((model, samples))
}

/// Compares the analytic gradient with a five-point finite difference.
///
/// A coordinate passes when `|a − fd| ≤ abs_tol` or `|a − fd| ≤ rel_tol · max(|a|, |fd|)`.
pub fn gradient_check(cfg: &GradcheckConfig, rel_tol: f64, abs_tol: f64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for resamples in 0..MAX_RESAMPLES {
        let (model, samples) = random_problem(cfg, &mut rng)?;
        let obj = TrainingObjective::new(&model, &samples, cfg.scope)?;
        let x = obj.initial_point();
        let pattern = obj.clamp_pattern(&x)?;
        let check_pattern = !pattern.is_empty();
        let (_, analytic) = obj.value_and_gradient(&x)?;
        let mut fd = Vec::with_capacity(x.len());
        let mut probe = x.clone();
        let mut straddles = false;
        'coords: for i in 0..x.len() {
            let mut vals = [0.0; 4];
            for (v, d) in vals.iter_mut().zip([cfg.step, -cfg.step, 2.0 * cfg.step, -2.0 * cfg.step]) {
                probe[i] = x[i] + d;
                if check_pattern && obj.clamp_pattern(&probe)? != pattern {
                    straddles = true;
                    break 'coords;
                }
                *v = obj.value(&probe)?;
            }
            probe[i] = x[i];
            fd.push((8.0 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12.0 * cfg.step));
        }
        if straddles {
            continue;
        }
        let mut report = GradcheckReport {
            coordinates: x.len(),
            failures: 0,
            worst_score: 0.0,
            worst_coordinate: 0,
            max_abs_error: 0.0,
            resamples,
            analytic,
            finite_difference: fd,
        };
        for (i, (a, f)) in report.analytic.iter().zip(&report.finite_difference).enumerate() {
            let err = (a - f).abs();
            let score = err / abs_tol.max(rel_tol * a.abs().max(f.abs()));
            report.max_abs_error = report.max_abs_error.max(err);
            if score > 1.0 {
                report.failures += 1;
            }
            if score > report.worst_score {
                report.worst_score = score;
                report.worst_coordinate = i;
            }
        }
        return Ok(report);
    }
    Err(TnrdError::invalid(format!(
        "no configuration without clamp-boundary crossings after {MAX_RESAMPLES} draws"
    )))
}
