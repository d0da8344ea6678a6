//! Learnable influence functions expanded over radial basis functions.
//!
//! `φ(z) = Σ_j w_j · φ_b((z − μ_j) / γ)` with equidistant centres `μ_j` and a
//! shared scale `γ`. The penalty `ρ` is the antiderivative of `φ` anchored at
//! `ρ(0) = 0`.

use crate::error::{Result, TnrdError};

/// Gaussian bases are evaluated only for `|z − μ| ≤ GAUSSIAN_SUPPORT · γ`;
/// outside that window every basis value is below `exp(−50) ≈ 2e−22`.
pub const GAUSSIAN_SUPPORT: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RbfKind {
    #[default]
    Gaussian,
    Triangular,
}

impl RbfKind {
    pub fn name(self) -> &'static str {
        match self {
            RbfKind::Gaussian => "gaussian",
            RbfKind::Triangular => "triangular",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "gaussian" => Some(RbfKind::Gaussian),
            "triangular" => Some(RbfKind::Triangular),
            _ => None,
        }
    }
}

/// Centre grid and scale shared by every influence function of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbfSpec {
    pub kind: RbfKind,
    pub min: f64,
    pub step: f64,
    pub count: usize,
    pub gamma: f64,
}

impl Default for RbfSpec {
    /// 63 centres on `[−310, 310]` spaced by 10, `γ = 10`.
    fn default() -> Self {
        RbfSpec {
            kind: RbfKind::Gaussian,
            min: -310.0,
            step: 10.0,
            count: 63,
            gamma: 10.0,
        }
    }
}

impl RbfSpec {
    pub fn new(kind: RbfKind, min: f64, step: f64, count: usize, gamma: f64) -> Result<Self> {
        let spec = RbfSpec {
            kind,
            min,
            step,
            count,
            gamma,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_kind(kind: RbfKind) -> Self {
        RbfSpec {
            kind,
            ..RbfSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 2 || !(self.step > 0.0) || !(self.gamma > 0.0) || !self.min.is_finite() {
            return Err(TnrdError::invalid(format!(
                "RBF grid needs count >= 2, step > 0, gamma > 0 (got count={}, step={}, gamma={})",
                self.count, self.step, self.gamma
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn center(&self, j: usize) -> f64 {
        self.min + j as f64 * self.step
    }

    #[inline]
    pub fn max(&self) -> f64 {
        self.center(self.count - 1)
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.count).map(|j| self.center(j)).collect()
    }

    /// Sample points spaced a quarter step apart over the centre span.
    pub fn default_fit_grid(&self) -> Vec<f64> {
        let n = 4 * (self.count - 1);
        (0..=n)
            .map(|i| self.min + i as f64 * self.step / 4.0)
            .collect()
    }

    /// Calls `f(j, basis_j(z), d basis_j / dz)` for every centre whose basis
    /// is active at `z`.
    ///
    /// Triangular slopes at kinks take the left limit.
    #[inline]
    pub fn visit(&self, z: f64, mut f: impl FnMut(usize, f64, f64)) {
        match self.kind {
            RbfKind::Gaussian => {
                let reach = GAUSSIAN_SUPPORT * self.gamma;
                let lo = ((z - reach - self.min) / self.step).ceil().max(0.0);
                let hi = ((z + reach - self.min) / self.step)
                    .floor()
                    .min((self.count - 1) as f64);
                if !(lo <= hi) {
                    return;
                }
                let (lo, hi) = (lo as usize, hi as usize);
                let inv_g2 = 1.0 / (self.gamma * self.gamma);
                let mut d = z - self.center(lo);
                // g_{j+1} = g_j · r_j and r_{j+1} = r_j · q on an equidistant grid.
                let mut g = (-0.5 * d * d * inv_g2).exp();
                let mut r = (d * self.step * inv_g2 - 0.5 * self.step * self.step * inv_g2).exp();
                let q = (-self.step * self.step * inv_g2).exp();
                for j in lo..=hi {
                    f(j, g, -d * inv_g2 * g);
                    g *= r;
                    r *= q;
                    d -= self.step;
                }
            }
            RbfKind::Triangular => {
                let gamma = self.gamma;
                let lo = ((z - gamma - self.min) / self.step).ceil().max(0.0);
                let hi = ((z + gamma - self.min) / self.step)
                    .ceil()
                    .min(self.count as f64);
                if !(lo < hi) {
                    return;
                }
                for j in lo as usize..hi as usize {
                    let x = z - self.center(j);
                    if x <= -gamma || x > gamma {
                        continue;
                    }
                    let value = 1.0 - x.abs() / gamma;
                    let slope = if x <= 0.0 { 1.0 / gamma } else { -1.0 / gamma };
                    f(j, value, slope);
                }
            }
        }
    }

    /// Single basis value, evaluated directly from its definition.
    pub fn basis(&self, j: usize, z: f64) -> f64 {
        let x = z - self.center(j);
        match self.kind {
            RbfKind::Gaussian => (-x * x / (2.0 * self.gamma * self.gamma)).exp(),
            RbfKind::Triangular => (1.0 - x.abs() / self.gamma).max(0.0),
        }
    }

    /// `∫_0^z basis_j(t) dt`.
    fn basis_integral(&self, j: usize, z: f64) -> f64 {
        let mu = self.center(j);
        let gamma = self.gamma;
        match self.kind {
            RbfKind::Gaussian => {
                let s = std::f64::consts::SQRT_2 * gamma;
                let c = gamma * (std::f64::consts::PI / 2.0).sqrt();
                c * (libm::erf((z - mu) / s) - libm::erf(-mu / s))
            }
            RbfKind::Triangular => {
                let cdf = |x: f64| {
                    if x <= -gamma {
                        0.0
                    } else if x <= 0.0 {
                        (x + gamma) * (x + gamma) / (2.0 * gamma)
                    } else if x <= gamma {
                        gamma - (gamma - x) * (gamma - x) / (2.0 * gamma)
                    } else {
                        gamma
                    }
                };
                cdf(z - mu) - cdf(-mu)
            }
        }
    }
}

/// Weights of one influence function over an [`RbfSpec`] grid.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceFunction {
    pub weights: Vec<f64>,
}

impl InfluenceFunction {
    pub fn new(weights: Vec<f64>) -> Self {
        InfluenceFunction { weights }
    }

    pub fn zeros(count: usize) -> Self {
        InfluenceFunction {
            weights: vec![0.0; count],
        }
    }

    pub fn check(&self, spec: &RbfSpec) -> Result<()> {
        if self.weights.len() != spec.count {
            return Err(TnrdError::dims(format!(
                "influence function has {} weights, RBF grid has {} centres",
                self.weights.len(),
                spec.count
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn phi(&self, spec: &RbfSpec, z: f64) -> f64 {
        let mut acc = 0.0;
        spec.visit(z, |j, v, _| acc += self.weights[j] * v);
        acc
    }

    #[inline]
    pub fn phi_prime(&self, spec: &RbfSpec, z: f64) -> f64 {
        let mut acc = 0.0;
        spec.visit(z, |j, _, s| acc += self.weights[j] * s);
        acc
    }

    /// Penalty `ρ(z) = ∫_0^z φ(t) dt`, closed form for both basis kinds.
    pub fn rho(&self, spec: &RbfSpec, z: f64) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(j, w)| w * spec.basis_integral(j, z))
            .sum()
    }

    pub fn eval_phi(&self, spec: &RbfSpec, z: &[f64]) -> Vec<f64> {
        z.iter().map(|&v| self.phi(spec, v)).collect()
    }

    pub fn eval_phi_prime(&self, spec: &RbfSpec, z: &[f64]) -> Vec<f64> {
        z.iter().map(|&v| self.phi_prime(spec, v)).collect()
    }

    pub fn eval_rho(&self, spec: &RbfSpec, z: &[f64]) -> Vec<f64> {
        z.iter().map(|&v| self.rho(spec, v)).collect()
    }

    /// Writes `φ(z)` into `phi` and `φ'(z)` into `phi_prime` in one pass.
    pub fn eval_phi_and_prime(&self, spec: &RbfSpec, z: &[f64], phi: &mut [f64], phi_prime: &mut [f64]) {
        for ((&v, p), d) in z.iter().zip(phi.iter_mut()).zip(phi_prime.iter_mut()) {
            let mut a = 0.0;
            let mut b = 0.0;
            spec.visit(v, |j, g, s| {
                a += self.weights[j] * g;
                b += self.weights[j] * s;
            });
            *p = a;
            *d = b;
        }
    }
}

/// `∂φ(z)/∂w_j` for every centre: the row of basis values at `z`.
pub fn eval_phi_weight_gradient(spec: &RbfSpec, z: f64) -> Vec<f64> {
    let mut row = vec![0.0; spec.count];
    spec.visit(z, |j, v, _| row[j] = v);
    row
}

/// Accumulates `Σ_p a(p) · basis_j(z(p))` into `out[j]`.
pub fn accumulate_weight_gradient(spec: &RbfSpec, z: &[f64], a: &[f64], out: &mut [f64]) {
    for (&zv, &av) in z.iter().zip(a) {
        if av == 0.0 {
            continue;
        }
        spec.visit(zv, |j, v, _| out[j] += av * v);
    }
}

/// Least-squares RBF weights reproducing `target` on `grid`.
pub fn fit_weights(
    target: impl Fn(f64) -> f64,
    spec: &RbfSpec,
    grid: &[f64],
) -> Result<InfluenceFunction> {
    spec.validate()?;
    let inside = grid
        .iter()
        .filter(|&&z| z >= spec.min && z <= spec.max())
        .count();
    if inside < 4 * (spec.count - 1) {
        return Err(TnrdError::invalid(format!(
            "fit grid has {inside} samples inside the centre span; at least {} required",
            4 * (spec.count - 1)
        )));
    }
    let rows = grid.len();
    let cols = spec.count;
    // Column-major design matrix for Householder QR.
    let mut a = vec![0.0; rows * cols];
    for (i, &z) in grid.iter().enumerate() {
        for j in 0..cols {
            a[j * rows + i] = spec.basis(j, z);
        }
    }
    let b: Vec<f64> = grid.iter().map(|&z| target(z)).collect();
    if b.iter().any(|v| !v.is_finite()) {
        return Err(TnrdError::NonFinite("fit target".into()));
    }
    let w = householder_least_squares(&mut a, b, rows, cols)?;
    Ok(InfluenceFunction::new(w))
}

/// Solves `min ‖A x − b‖₂` for column-major `A` (`rows × cols`, rows ≥ cols).
fn householder_least_squares(
    a: &mut [f64],
    mut b: Vec<f64>,
    rows: usize,
    cols: usize,
) -> Result<Vec<f64>> {
    let col_norm_max = (0..cols)
        .map(|j| a[j * rows..(j + 1) * rows].iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let tol = 1e-12 * col_norm_max.max(f64::MIN_POSITIVE);
    let mut diag = vec![0.0; cols];
    for k in 0..cols {
        let col = &mut a[k * rows..(k + 1) * rows];
        let norm = col[k..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= tol {
            return Err(TnrdError::NumericalRank { pivot: norm });
        }
        let alpha = if col[k] > 0.0 { -norm } else { norm };
        col[k] -= alpha;
        let vnorm_sq: f64 = col[k..].iter().map(|v| v * v).sum();
        diag[k] = alpha;
        // Reflect remaining columns and the right-hand side.
        let v: Vec<f64> = col[k..].to_vec();
        for j in k + 1..cols {
            let cj = &mut a[j * rows + k..(j + 1) * rows];
            let s = 2.0 * v.iter().zip(cj.iter()).map(|(x, y)| x * y).sum::<f64>() / vnorm_sq;
            cj.iter_mut().zip(&v).for_each(|(c, x)| *c -= s * x);
        }
        let s = 2.0 * v.iter().zip(&b[k..]).map(|(x, y)| x * y).sum::<f64>() / vnorm_sq;
        b[k..].iter_mut().zip(&v).for_each(|(c, x)| *c -= s * x);
    }
    let mut x = vec![0.0; cols];
    for k in (0..cols).rev() {
        let mut acc = b[k];
        for j in k + 1..cols {
            acc -= a[j * rows + k] * x[j];
        }
        x[k] = acc / diag[k];
    }
    Ok(x)
}
