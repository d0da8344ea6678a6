//! Loss, back-propagation through stages, L-BFGS and the greedy/joint training loops.

use rayon::prelude::*;

use crate::diffusion::{stage_forward, stage_forward_taped, Model, Observation, Prepared, StageParams, StageTape, DEFAULT_LAMBDA};
use crate::error::{Result, TnrdError};
use crate::filters::{materialize_jacobian_apply, DctBasis, FilterAtom};
use crate::image::{convolve_adjoint, convolve_kernel_gradient, Boundary, Image, Kernel};
use crate::influence::{accumulate_weight_gradient, fit_weights, InfluenceFunction, RbfSpec};
use crate::data_terms::ProblemKind;

/// One training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub observation: Observation,
    pub ground_truth: Image,
}

/// `½‖u_out − u_gt‖²`.
pub fn loss(u_out: &Image, u_gt: &Image) -> Result<f64> {
    u_out.check_same_dims(u_gt, "loss")?;
    Ok(0.5 * u_out.sub(u_gt).norm_sq())
}

/// Gradient of one stage's output with respect to its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct StageGradient {
    pub lambda_raw: f64,
    pub omega: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
}

impl StageGradient {
    fn append_to(&self, out: &mut Vec<f64>) {
        out.push(self.lambda_raw);
        self.omega.iter().for_each(|o| out.extend_from_slice(o));
        self.weights.iter().for_each(|w| out.extend_from_slice(w));
    }
}

fn add_taps(acc: &mut [f64], k: &Kernel) {
    acc.iter_mut().zip(k.taps()).for_each(|(a, b)| *a += b);
}

/// Adjoint of one stage: maps `∂L/∂u_t` to `∂L/∂u_{t−1}` and the stage's parameter gradient.
pub fn stage_backward(
    tape: &StageTape,
    prep: &Prepared,
    stage: &StageParams,
    basis: &DctBasis,
    rbf: &RbfSpec,
    grad_out: &Image,
) -> Result<(Image, StageGradient)> {
    let m = basis.kernel_size();
    let e = prep.prox_adjoint(grad_out, tape.mask.as_deref())?;
    let mut grad_u = e.clone();
    let lambda = stage.lambda();

    let mut lambda_grad = 0.0;
    if let Some(r) = &tape.reaction {
        if lambda != 0.0 {
            lambda_grad = -lambda * e.dot(r);
            if let Some(back) = prep.reaction_adjoint(&e)? {
                grad_u.axpy(-lambda, &back);
            }
        }
    }

    let mut neg = e;
    neg.scale(-1.0);
    let mut omega = Vec::with_capacity(stage.num_filters());
    let mut weights = Vec::with_capacity(stage.num_filters());
    for (i, k) in tape.kernels.iter().enumerate() {
        let rotated = k.rotate180();
        // Second convolution: d = k̄ ∗ a enters the update with a minus sign.
        let g_a = convolve_adjoint(&neg, &rotated, Boundary::Symmetric)?;
        let mut dk = vec![0.0; m * m];
        add_taps(
            &mut dk,
            &convolve_kernel_gradient(&tape.activations[i], &neg, m, Boundary::Symmetric)?.rotate180(),
        );
        let mut dw = vec![0.0; rbf.count];
        accumulate_weight_gradient(rbf, tape.responses[i].data(), g_a.data(), &mut dw);
        let mut g_z = g_a;
        g_z.data_mut()
            .iter_mut()
            .zip(tape.slopes[i].data())
            .for_each(|(g, s)| *g *= s);
        add_taps(
            &mut dk,
            &convolve_kernel_gradient(&tape.u_prev, &g_z, m, Boundary::Symmetric)?,
        );
        grad_u.axpy(1.0, &convolve_adjoint(&g_z, k, Boundary::Symmetric)?);
        omega.push(materialize_jacobian_apply(
            &stage.filters[i],
            basis,
            &Kernel::new(m, dk)?,
        )?);
        weights.push(dw);
    }
    Ok((
        grad_u,
        StageGradient {
            lambda_raw: lambda_grad,
            omega,
            weights,
        },
    ))
}

/// Flat parameter layout: per stage `[lambda_raw, ω_1 … ω_Nk, w_1 … w_Nk]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamLayout {
    pub num_filters: usize,
    pub basis_len: usize,
    pub rbf_count: usize,
}

impl ParamLayout {
    pub fn of(model: &Model) -> Self {
        ParamLayout {
            num_filters: model.num_filters(),
            basis_len: model.basis().len(),
            rbf_count: model.rbf.count,
        }
    }

    pub fn stage_len(&self) -> usize {
        1 + self.num_filters * (self.basis_len + self.rbf_count)
    }

    pub fn pack(&self, stages: &[StageParams]) -> Vec<f64> {
        let mut out = Vec::with_capacity(stages.len() * self.stage_len());
        for s in stages {
            out.push(s.lambda_raw);
            s.filters.iter().for_each(|f| out.extend_from_slice(&f.omega));
            s.influences.iter().for_each(|p| out.extend_from_slice(&p.weights));
        }
        out
    }

    pub fn unpack(&self, x: &[f64]) -> Result<Vec<StageParams>> {
        let len = self.stage_len();
        if x.is_empty() || x.len() % len != 0 {
            return Err(TnrdError::dims(format!(
                "parameter vector of length {} is not a multiple of the stage length {len}",
                x.len()
            )));
        }
        Ok(x.chunks(len)
            .map(|c| {
                let (omegas, weights) = c[1..].split_at(self.num_filters * self.basis_len);
                StageParams {
                    lambda_raw: c[0],
                    filters: omegas
                        .chunks(self.basis_len)
                        .map(|o| FilterAtom::new(o.to_vec()))
                        .collect(),
                    influences: weights
                        .chunks(self.rbf_count)
                        .map(|w| InfluenceFunction::new(w.to_vec()))
                        .collect(),
                }
            })
            .collect())
    }
}

/// Which parameters an objective optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// All stages against the final output.
    Joint,
    /// Stage `t` (0-based) against its own output, earlier stages frozen.
    Greedy(usize),
}

/// Training loss over a fixed sample set, as a function of the scoped parameters.
#[derive(Debug, Clone)]
pub struct TrainingObjective {
    model: Model,
    layout: ParamLayout,
    scope: Scope,
    prepared: Vec<Prepared>,
    targets: Vec<Image>,
    /// Canvas input to the first optimized stage, per sample.
    inputs: Vec<Image>,
}

impl TrainingObjective {
    /// Prepares the samples and, for greedy scopes, runs the frozen stages once.
    pub fn new(model: &Model, samples: &[TrainingSample], scope: Scope) -> Result<Self> {
        if samples.is_empty() {
            return Err(TnrdError::invalid("training needs at least one sample"));
        }
        let frozen = match scope {
            Scope::Joint => 0,
            Scope::Greedy(t) if t < model.num_stages() => t,
            Scope::Greedy(t) => {
                return Err(TnrdError::invalid(format!(
                    "stage {t} out of range for a {}-stage model",
                    model.num_stages()
                )))
            }
        };
        let prepared_inputs: Vec<(Prepared, Image)> = samples
            .par_iter()
            .map(|s| {
                let prep = Prepared::new(model.problem, &s.observation, model.pad_border)?;
                let expected = prep.crop(prep.initial())?.dims();
                if s.ground_truth.dims() != expected {
                    return Err(TnrdError::dims(format!(
                        "ground truth is {:?}, restored image would be {expected:?}",
                        s.ground_truth.dims()
                    )));
                }
                let mut u = prep.initial().clone();
                for stage in &model.stages[..frozen] {
                    u = stage_forward(&u, &prep, stage, model.basis(), &model.rbf)?;
                }
                Ok((prep, u))
            })
            .collect::<Result<_>>()?;
        let (prepared, inputs) = prepared_inputs.into_iter().unzip();
        Ok(TrainingObjective {
            model: model.clone(),
            layout: ParamLayout::of(model),
            scope,
            prepared,
            targets: samples.iter().map(|s| s.ground_truth.clone()).collect(),
            inputs,
        })
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn layout(&self) -> ParamLayout {
        self.layout
    }

    fn stage_range(&self) -> std::ops::Range<usize> {
        match self.scope {
            Scope::Joint => 0..self.model.num_stages(),
            Scope::Greedy(t) => t..t + 1,
        }
    }

    /// Packed scoped parameters of the model the objective was built from.
    pub fn initial_point(&self) -> Vec<f64> {
        self.layout.pack(&self.model.stages[self.stage_range()])
    }

    /// The model with its scoped stages replaced by `x`.
    pub fn model_at(&self, x: &[f64]) -> Result<Model> {
        let mut model = self.model.clone();
        let stages = self.layout.unpack(x)?;
        let range = self.stage_range();
        if stages.len() != range.len() {
            return Err(TnrdError::dims("parameter vector does not match the objective scope"));
        }
        for s in &stages {
            s.validate(model.basis(), &model.rbf)?;
        }
        model.stages.splice(range, stages);
        Ok(model)
    }

    fn sample_loss_and_gradient(
        &self,
        index: usize,
        stages: &[StageParams],
        want_grad: bool,
    ) -> Result<(f64, Vec<f64>)> {
        let prep = &self.prepared[index];
        let basis = self.model.basis();
        let rbf = &self.model.rbf;
        let mut u = self.inputs[index].clone();
        let mut tapes = Vec::with_capacity(stages.len());
        for stage in stages {
            let (next, tape) = stage_forward_taped(&u, prep, stage, basis, rbf, want_grad)?;
            tapes.extend(tape);
            u = next;
        }
        let residual = prep.crop(&u)?.sub(&self.targets[index]);
        let value = 0.5 * residual.norm_sq();
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let mut grad = prep.embed(&residual);
        let mut per_stage = Vec::with_capacity(stages.len());
        for (stage, tape) in stages.iter().zip(&tapes).rev() {
            let (g_prev, g_stage) = stage_backward(tape, prep, stage, basis, rbf, &grad)?;
            per_stage.push(g_stage);
            grad = g_prev;
        }
        let mut flat = Vec::with_capacity(stages.len() * self.layout.stage_len());
        per_stage.iter().rev().for_each(|g| g.append_to(&mut flat));
        Ok((value, flat))
    }

    fn run(&self, x: &[f64], want_grad: bool) -> Result<(f64, Vec<f64>)> {
        let stages = self.layout.unpack(x)?;
        if stages.len() != self.stage_range().len() {
            return Err(TnrdError::dims("parameter vector does not match the objective scope"));
        }
        let per_sample: Vec<(f64, Vec<f64>)> = (0..self.prepared.len())
            .into_par_iter()
            .map(|i| self.sample_loss_and_gradient(i, &stages, want_grad))
            .collect::<Result<_>>()?;
        // Reduce in sample order so the result does not depend on the worker count.
        let mut total = 0.0;
        let mut grad = if want_grad { vec![0.0; x.len()] } else { Vec::new() };
        for (value, g) in &per_sample {
            total += value;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(TnrdError::NonFinite("training objective".into()));
        }
        Ok((total, grad))
    }

    /// Which quantization-box coefficients are strictly inside (unclamped) at `x`,
    /// over all samples and optimized stages; empty for smooth problems.
    pub fn clamp_pattern(&self, x: &[f64]) -> Result<Vec<bool>> {
        let stages = self.layout.unpack(x)?;
        let mut pattern = Vec::new();
        for (prep, input) in self.prepared.iter().zip(&self.inputs) {
            if prep.is_smooth() {
                continue;
            }
            let mut u = input.clone();
            for stage in &stages {
                let (next, tape) =
                    stage_forward_taped(&u, prep, stage, self.model.basis(), &self.model.rbf, true)?;
                pattern.extend(tape.and_then(|t| t.mask).unwrap_or_default());
                u = next;
            }
        }
        Ok(pattern)
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.run(x, false)?.0)
    }

    pub fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.run(x, true)
    }
}

/// Total loss and gradient of `model`'s scoped parameters over `samples`.
pub fn loss_and_gradient(model: &Model, samples: &[TrainingSample], scope: Scope) -> Result<(f64, Vec<f64>)> {
    let objective = TrainingObjective::new(model, samples, scope)?;
    objective.value_and_gradient(&objective.initial_point())
}

/// Finite-difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`.
    #[default]
    Central,
    /// Fourth-order `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`.
    FivePoint,
}

/// Coordinate-wise finite-difference gradient.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    step: f64,
    stencil: Stencil,
) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut at = |i: usize, d: f64, probe: &mut Vec<f64>| -> Result<f64> {
        probe[i] = x[i] + d;
        let v = f(probe);
        probe[i] = x[i];
        v
    };
    (0..x.len())
        .map(|i| match stencil {
            Stencil::Central => Ok((at(i, step, &mut probe)? - at(i, -step, &mut probe)?) / (2.0 * step)),
            Stencil::FivePoint => {
                let p1 = at(i, step, &mut probe)?;
                let m1 = at(i, -step, &mut probe)?;
                let p2 = at(i, 2.0 * step, &mut probe)?;
                let m2 = at(i, -2.0 * step, &mut probe)?;
                Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub max_iters: usize,
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    /// Objective evaluations allowed per line search.
    pub max_line_evals: usize,
    /// Stop once `‖g‖∞` falls to this value.
    pub grad_tol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            max_iters: 200,
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            max_line_evals: 25,
            grad_tol: 1e-10,
        }
    }
}

/// One accepted L-BFGS iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub step: f64,
}

impl std::fmt::Display for IterationLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "iter {:4}  loss {:.10e}  |g| {:.4e}  step {:.4e}",
            self.iter, self.loss, self.grad_norm, self.step
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    MaxIterations,
    GradientTolerance,
    LineSearchFailed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    /// Best point seen.
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Running minimum of the objective after each iteration, starting with the initial value.
    pub trace: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Trial {
    alpha: f64,
    value: f64,
    slope: f64,
    x: Vec<f64>,
    grad: Vec<f64>,
}

/// Minimizer of the cubic through `(a, fa, da)` and `(b, fb, db)`, safeguarded into the interval.
fn cubic_step(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * (hi - lo);
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if fb.is_finite() && db.is_finite() && disc >= 0.0 {
        let d2 = (b - a).signum() * disc.sqrt();
        let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
        if t.is_finite() && t >= lo + margin && t <= hi - margin {
            return t;
        }
    }
    0.5 * (a + b)
}

/// Limited-memory BFGS with a strong-Wolfe line search.
///
/// The objective returns value and gradient. A [`TnrdError::NonFinite`] at a trial
/// point is treated as an infinite value and the step is shortened; any other
/// error, or a non-finite value at `x0`, aborts.
pub fn lbfgs_minimize(
    mut objective: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    x0: Vec<f64>,
    config: &LbfgsConfig,
    mut log: impl FnMut(&IterationLog),
) -> Result<LbfgsResult> {
    if config.max_iters == 0 || config.memory == 0 {
        return Err(TnrdError::invalid("L-BFGS needs at least one iteration and one memory pair"));
    }
    if !(0.0 < config.c1 && config.c1 < config.c2 && config.c2 < 1.0) {
        return Err(TnrdError::invalid("line-search constants must satisfy 0 < c1 < c2 < 1"));
    }
    let (mut f, mut g) = objective(&x0)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(TnrdError::NonFinite("objective at the initial point".into()));
    }
    let mut evaluations = 1;
    let mut x = x0;
    let mut trace = vec![f];
    let mut best_x = x.clone();
    let mut best_f = f;
    let mut best_g = dot(&g, &g).sqrt();
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    let mut eval = |x: &[f64], d: &[f64], alpha: f64, evaluations: &mut usize| -> Result<Trial> {
        let xt: Vec<f64> = x.iter().zip(d).map(|(a, b)| a + alpha * b).collect();
        *evaluations += 1;
        match objective(&xt) {
            Ok((v, gt)) if v.is_finite() && gt.iter().all(|c| c.is_finite()) => Ok(Trial {
                alpha,
                value: v,
                slope: dot(&gt, d),
                x: xt,
                grad: gt,
            }),
            Ok(_) | Err(TnrdError::NonFinite(_)) => Ok(Trial {
                alpha,
                value: f64::INFINITY,
                slope: f64::NAN,
                x: xt,
                grad: Vec::new(),
            }),
            Err(e) => Err(e),
        }
    };

    while iterations < config.max_iters {
        if inf_norm(&g) <= config.grad_tol {
            termination = Termination::GradientTolerance;
            break;
        }
        // Two-loop recursion.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let a = dot(s, &d) / dot(y, s);
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
            alphas.push(a);
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|v| *v *= gamma);
        }
        for ((s, y), a) in s_hist.iter().zip(&y_hist).zip(alphas.iter().rev()) {
            let b = dot(y, &d) / dot(y, s);
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - b) * si);
        }
        let mut slope0 = dot(&g, &d);
        if !(slope0 < 0.0) {
            // Not a descent direction: restart from steepest descent.
            s_hist.clear();
            y_hist.clear();
            d = g.iter().map(|v| -v).collect();
            slope0 = -dot(&g, &g);
        }
        let alpha0 = if s_hist.is_empty() {
            (1.0 / inf_norm(&d)).min(1.0)
        } else {
            1.0
        };

        // Strong-Wolfe bracketing and zoom.
        // Sufficient decrease, or its derivative form once f differences reach rounding level.
        let noise = 1e-12 * f.abs();
        let armijo = |t: &Trial| {
            t.value <= f + config.c1 * t.alpha * slope0
                || (t.value <= f + noise && t.slope <= (2.0 * config.c1 - 1.0) * slope0)
        };
        let curvature = |t: &Trial| t.slope.abs() <= -config.c2 * slope0;
        let mut used = 0;
        let mut best: Option<Trial> = None;
        let mut accepted: Option<Trial> = None;
        let remember = |t: &Trial, best: &mut Option<Trial>| {
            if t.value < best.as_ref().map_or(f, |b| b.value) {
                *best = Some(Trial {
                    alpha: t.alpha,
                    value: t.value,
                    slope: t.slope,
                    x: t.x.clone(),
                    grad: t.grad.clone(),
                });
            }
        };
        let mut prev = Trial {
            alpha: 0.0,
            value: f,
            slope: slope0,
            x: Vec::new(),
            grad: Vec::new(),
        };
        let mut alpha = alpha0;
        let mut bracket: Option<(Trial, Trial)> = None;
        while used < config.max_line_evals {
            let t = eval(&x, &d, alpha, &mut evaluations)?;
            used += 1;
            remember(&t, &mut best);
            if !armijo(&t) || (prev.alpha > 0.0 && t.value > prev.value + noise) {
                bracket = Some((prev, t));
                break;
            }
            if curvature(&t) {
                accepted = Some(t);
                break;
            }
            if t.slope >= 0.0 {
                bracket = Some((t, prev));
                break;
            }
            alpha = 2.0 * t.alpha;
            prev = t;
        }
        if let Some((mut lo, mut hi)) = bracket {
            while accepted.is_none() && used < config.max_line_evals {
                let a = cubic_step(lo.alpha, lo.value, lo.slope, hi.alpha, hi.value, hi.slope);
                if (a - lo.alpha).abs() <= 1e-16 * a.abs().max(1.0) {
                    break;
                }
                let t = eval(&x, &d, a, &mut evaluations)?;
                used += 1;
                remember(&t, &mut best);
                if !armijo(&t) || t.value > lo.value + noise {
                    hi = t;
                } else if curvature(&t) {
                    accepted = Some(t);
                } else {
                    if t.slope * (hi.alpha - lo.alpha) >= 0.0 {
                        hi = lo;
                    }
                    lo = t;
                }
            }
        }

        let (step, curvature_ok) = match (accepted, best) {
            (Some(t), _) => (t, true),
            (None, Some(b)) => (b, false),
            (None, None) => {
                termination = Termination::LineSearchFailed;
                break;
            }
        };
        iterations += 1;
        let s: Vec<f64> = step.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = step.grad.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if curvature_ok && sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if s_hist.len() == config.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        } else {
            s_hist.clear();
            y_hist.clear();
        }
        let step_len = step.alpha * dot(&d, &d).sqrt();
        x = step.x;
        f = step.value;
        g = step.grad;
        // Ties at rounding level go to the smaller gradient.
        let gnorm = dot(&g, &g).sqrt();
        let tol = 4.0 * f64::EPSILON * best_f.abs();
        if f < best_f - tol || (f <= best_f + tol && gnorm < best_g) {
            best_f = f;
            best_g = gnorm;
            best_x.clone_from(&x);
        }
        trace.push(f.min(*trace.last().unwrap()));
        log(&IterationLog {
            iter: iterations,
            loss: f,
            grad_norm: gnorm,
            step: step_len,
        });
    }

    Ok(LbfgsResult {
        x: best_x,
        value: best_f,
        iterations,
        evaluations,
        termination,
        trace,
    })
}

/// Training schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Greedy,
    Joint,
    GreedyJoint,
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Greedy => "greedy",
            Scheme::Joint => "joint",
            Scheme::GreedyJoint => "greedy+joint",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "greedy" => Some(Scheme::Greedy),
            "joint" => Some(Scheme::Joint),
            "greedy+joint" => Some(Scheme::GreedyJoint),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub scheme: Scheme,
    /// L-BFGS iterations per phase (each greedy stage, and the joint pass).
    pub lbfgs_iters: usize,
    pub lbfgs_memory: usize,
    /// Worker threads for per-sample work; `None` uses the global pool.
    pub workers: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            scheme: Scheme::GreedyJoint,
            lbfgs_iters: 200,
            lbfgs_memory: 10,
            workers: None,
        }
    }
}

/// Which optimization phase a log line belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Greedy(usize),
    Joint,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Greedy(t) => write!(f, "greedy stage {}", t + 1),
            Phase::Joint => write!(f, "joint"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub model: Model,
    /// Final-output training loss of the initial model.
    pub initial_loss: f64,
    /// Final-output training loss after the greedy phase, if it ran.
    pub greedy_loss: Option<f64>,
    /// Final-output training loss of the returned model.
    pub final_loss: f64,
}

/// Trains `init` on `samples`.
pub fn train(
    samples: &[TrainingSample],
    init: &Model,
    config: &TrainConfig,
    mut log: impl FnMut(Phase, &IterationLog) + Send,
) -> Result<TrainReport> {
    if config.lbfgs_iters == 0 {
        return Err(TnrdError::invalid("training needs at least one L-BFGS iteration"));
    }
    let run = |log: &mut dyn FnMut(Phase, &IterationLog)| -> Result<TrainReport> {
        let lbfgs = LbfgsConfig {
            max_iters: config.lbfgs_iters,
            memory: config.lbfgs_memory,
            ..LbfgsConfig::default()
        };
        let final_loss = |model: &Model| -> Result<f64> {
            let obj = TrainingObjective::new(model, samples, Scope::Joint)?;
            obj.value(&obj.initial_point())
        };
        let initial_loss = final_loss(init)?;
        let mut model = init.clone();
        let mut greedy_loss = None;
        if matches!(config.scheme, Scheme::Greedy | Scheme::GreedyJoint) {
            for t in 0..model.num_stages() {
                let obj = TrainingObjective::new(&model, samples, Scope::Greedy(t))?;
                let res = lbfgs_minimize(
                    |x| obj.value_and_gradient(x),
                    obj.initial_point(),
                    &lbfgs,
                    |it| log(Phase::Greedy(t), it),
                )?;
                model = obj.model_at(&res.x)?;
            }
            greedy_loss = Some(final_loss(&model)?);
        }
        let mut final_value = greedy_loss;
        if matches!(config.scheme, Scheme::Joint | Scheme::GreedyJoint) {
            let obj = TrainingObjective::new(&model, samples, Scope::Joint)?;
            let res = lbfgs_minimize(
                |x| obj.value_and_gradient(x),
                obj.initial_point(),
                &lbfgs,
                |it| log(Phase::Joint, it),
            )?;
            model = obj.model_at(&res.x)?;
            final_value = Some(res.value);
        }
        Ok(TrainReport {
            model,
            initial_loss,
            greedy_loss,
            final_loss: final_value.unwrap_or(initial_loss),
        })
    };
    match config.workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| TnrdError::invalid(format!("cannot start worker pool: {e}")))?;
            pool.install(|| run(&mut log))
        }
        None => run(&mut log),
    }
}

/// The starting influence function `φ(z) = 2z / (1 + z²)`.
pub fn plain_influence_target(z: f64) -> f64 {
    2.0 * z / (1.0 + z * z)
}

/// Plain initialization: one-hot DCT filters in zig-zag order, the least-squares
/// RBF fit of [`plain_influence_target`] and `λ = 0.1` in every stage.
pub fn plain_init(
    problem: ProblemKind,
    kernel_size: usize,
    num_filters: usize,
    rbf: RbfSpec,
    num_stages: usize,
) -> Result<Model> {
    let basis = DctBasis::new(kernel_size)?;
    if num_filters == 0 || num_filters > basis.len() {
        return Err(TnrdError::invalid(format!(
            "number of filters must be in 1..={}, got {num_filters}",
            basis.len()
        )));
    }
    let phi = fit_weights(plain_influence_target, &rbf, &rbf.default_fit_grid())?;
    let stage = StageParams {
        lambda_raw: DEFAULT_LAMBDA.ln(),
        filters: (0..num_filters)
            .map(|i| FilterAtom::one_hot(basis.len(), i))
            .collect(),
        influences: vec![phi; num_filters],
    };
    Model::new(problem, kernel_size, rbf, vec![stage; num_stages])
}
