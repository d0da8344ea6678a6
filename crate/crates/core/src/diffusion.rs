//! Stage update, multi-stage inference, pattern synthesis and the stage energy.
//!
//! All stages run on a padded canvas: the initial estimate is extended by
//! `pad_border` pixels with symmetric reflection, every stage convolves with
//! symmetric boundary, and the result is cropped back at the end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_terms::{
    bicubic_upscale, block_dct, downsampler, prox_deblock_with_mask, quality_table,
    quant_box_from_jpeg, BicubicResampler, ProblemKind, QuantBox, BLOCK,
};
use crate::error::{Result, TnrdError};
use crate::filters::{materialize, DctBasis, FilterAtom};
use crate::image::{convolve, crop, embed, pad_symmetric, Boundary, Image, Kernel};
use crate::influence::{InfluenceFunction, RbfSpec};

/// Default initial reaction weight.
pub const DEFAULT_LAMBDA: f64 = 0.1;

/// Parameters `Θ_t` of one diffusion stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    /// `λ = exp(lambda_raw)`.
    pub lambda_raw: f64,
    pub filters: Vec<FilterAtom>,
    pub influences: Vec<InfluenceFunction>,
}

impl StageParams {
    pub fn lambda(&self) -> f64 {
        self.lambda_raw.exp()
    }

    pub fn num_filters(&self) -> usize {
        self.filters.len()
    }

    /// Stage with one-hot filters on the first `num_filters` atoms, zero influences and `λ = 0`
    /// (in the limit: `lambda_raw = −∞`).
    pub fn null(basis: &DctBasis, rbf: &RbfSpec, num_filters: usize) -> Result<Self> {
        if num_filters == 0 || num_filters > basis.len() {
            return Err(TnrdError::invalid(format!(
                "number of filters must be in 1..={}, got {num_filters}",
                basis.len()
            )));
        }
        Ok(StageParams {
            lambda_raw: f64::NEG_INFINITY,
            filters: (0..num_filters)
                .map(|i| FilterAtom::one_hot(basis.len(), i))
                .collect(),
            influences: vec![InfluenceFunction::zeros(rbf.count); num_filters],
        })
    }

    pub fn validate(&self, basis: &DctBasis, rbf: &RbfSpec) -> Result<()> {
        if self.filters.is_empty() || self.filters.len() != self.influences.len() {
            return Err(TnrdError::invalid(format!(
                "stage has {} filters and {} influence functions",
                self.filters.len(),
                self.influences.len()
            )));
        }
        if self.lambda_raw.is_nan() || self.lambda_raw == f64::INFINITY {
            return Err(TnrdError::NonFinite("reaction weight".into()));
        }
        for f in &self.filters {
            if f.omega.len() != basis.len() {
                return Err(TnrdError::dims(format!(
                    "filter has {} coefficients, basis has {} atoms",
                    f.omega.len(),
                    basis.len()
                )));
            }
            if f.omega.iter().any(|v| !v.is_finite()) {
                return Err(TnrdError::NonFinite("filter coefficients".into()));
            }
        }
        for phi in &self.influences {
            phi.check(rbf)?;
        }
        Ok(())
    }

    pub fn kernels(&self, basis: &DctBasis) -> Result<Vec<Kernel>> {
        self.filters.iter().map(|f| materialize(f, basis)).collect()
    }
}

/// A trained (or initialized) multi-stage diffusion model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub problem: ProblemKind,
    pub rbf: RbfSpec,
    pub stages: Vec<StageParams>,
    pub pad_border: usize,
    basis: DctBasis,
}

impl Model {
    /// Builds a model with the default border `T · (m − 1)`.
    pub fn new(
        problem: ProblemKind,
        kernel_size: usize,
        rbf: RbfSpec,
        stages: Vec<StageParams>,
    ) -> Result<Self> {
        let border = stages.len() * kernel_size.saturating_sub(1);
        Self::with_pad_border(problem, kernel_size, rbf, stages, border)
    }

    pub fn with_pad_border(
        problem: ProblemKind,
        kernel_size: usize,
        rbf: RbfSpec,
        stages: Vec<StageParams>,
        pad_border: usize,
    ) -> Result<Self> {
        let basis = DctBasis::new(kernel_size)?;
        rbf.validate()?;
        if stages.is_empty() {
            return Err(TnrdError::invalid("a model needs at least one stage"));
        }
        let nk = stages[0].num_filters();
        for s in &stages {
            s.validate(&basis, &rbf)?;
            if s.num_filters() != nk {
                return Err(TnrdError::invalid("all stages must have the same number of filters"));
            }
        }
        Ok(Model {
            problem,
            rbf,
            stages,
            pad_border,
            basis,
        })
    }

    /// Zero-parameter model: every stage is the identity map for denoising and SISR.
    pub fn null(
        problem: ProblemKind,
        kernel_size: usize,
        num_filters: usize,
        rbf: RbfSpec,
        num_stages: usize,
    ) -> Result<Self> {
        let basis = DctBasis::new(kernel_size)?;
        let stage = StageParams::null(&basis, &rbf, num_filters)?;
        Self::new(problem, kernel_size, rbf, vec![stage; num_stages])
    }

    pub fn basis(&self) -> &DctBasis {
        &self.basis
    }

    pub fn kernel_size(&self) -> usize {
        self.basis.kernel_size()
    }

    pub fn num_filters(&self) -> usize {
        self.stages[0].num_filters()
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Short capacity label, e.g. `TNRD^5_{7x7}`.
    pub fn label(&self) -> String {
        let m = self.kernel_size();
        format!("TNRD^{}_{{{m}x{m}}}", self.num_stages())
    }
}

/// Degraded input to a restoration model.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    /// Noisy image `f`.
    Denoise(Image),
    /// Low-resolution image `f`.
    SuperResolve(Image),
    /// Decoded JPEG image and the quantization constraint it came from.
    Deblock { decoded: Image, qbox: QuantBox },
}

impl Observation {
    /// Wraps a plain image for `problem`. For deblocking the quantized levels are
    /// recovered by rounding the block DCT of `img` against the quality table.
    pub fn from_image(problem: ProblemKind, img: Image) -> Result<Self> {
        match problem {
            ProblemKind::Denoise { .. } => Ok(Observation::Denoise(img)),
            ProblemKind::SuperResolve { .. } => Ok(Observation::SuperResolve(img)),
            ProblemKind::Deblock { quality } => {
                let table = quality_table(quality)?;
                let coeffs = block_dct(&img)?;
                let levels = Image::from_fn(img.width(), img.height(), |x, y| {
                    (coeffs.get(x, y) / table[(y % BLOCK) * BLOCK + x % BLOCK]).round()
                });
                let qbox = quant_box_from_jpeg(&levels, quality, false)?;
                Ok(Observation::Deblock { decoded: img, qbox })
            }
        }
    }

    pub fn image(&self) -> &Image {
        match self {
            Observation::Denoise(f) | Observation::SuperResolve(f) => f,
            Observation::Deblock { decoded, .. } => decoded,
        }
    }

    /// Dimensions of the restored image.
    pub fn output_dims(&self, problem: ProblemKind) -> (usize, usize) {
        let (w, h) = self.image().dims();
        match (self, problem) {
            (Observation::SuperResolve(_), ProblemKind::SuperResolve { factor }) => {
                (w * factor, h * factor)
            }
            _ => (w, h),
        }
    }
}

/// Per-problem data term evaluated on the padded canvas.
#[derive(Debug, Clone)]
enum DataTerm {
    /// `ψ = λ (u − f̃)` with `f̃` padded like the canvas.
    Denoise { f: Image },
    /// `ψ = λ embed(Aᵀ(A crop(u) − f))`.
    Sisr { f: Image, a: BicubicResampler },
    /// `ψ = 0`, prox = projection on the interior.
    Deblock { qbox: QuantBox },
}

/// Observation prepared for a given canvas border: initial estimate and data term.
#[derive(Debug, Clone)]
pub struct Prepared {
    border: usize,
    u0: Image,
    term: DataTerm,
}

impl Prepared {
    pub fn new(problem: ProblemKind, obs: &Observation, border: usize) -> Result<Self> {
        let (u0, term) = match (problem, obs) {
            (ProblemKind::Denoise { .. }, Observation::Denoise(f)) => (
                f.clone(),
                DataTerm::Denoise {
                    f: pad_symmetric(f, border),
                },
            ),
            (ProblemKind::SuperResolve { factor }, Observation::SuperResolve(f)) => {
                let up = bicubic_upscale(f, factor)?;
                let a = downsampler(up.dims(), factor)?;
                (up, DataTerm::Sisr { f: f.clone(), a })
            }
            (ProblemKind::Deblock { .. }, Observation::Deblock { decoded, qbox }) => {
                decoded.check_same_dims(&qbox.lower, "deblocking observation")?;
                (decoded.clone(), DataTerm::Deblock { qbox: qbox.clone() })
            }
            _ => {
                return Err(TnrdError::invalid(format!(
                    "observation does not match a {} model",
                    problem.name()
                )))
            }
        };
        let (w, h) = u0.dims();
        if border > 0 && (border > w || border > h) {
            // Half-sample reflection handles any border, but beyond one image width
            // the padding starts to repeat itself; keep it meaningful.
            return Err(TnrdError::invalid(format!(
                "border {border} exceeds the {w}x{h} image"
            )));
        }
        Ok(Prepared {
            border,
            u0: pad_symmetric(&u0, border),
            term,
        })
    }

    pub fn border(&self) -> usize {
        self.border
    }

    /// Padded initial estimate `u₀`.
    pub fn initial(&self) -> &Image {
        &self.u0
    }

    pub fn canvas_dims(&self) -> (usize, usize) {
        self.u0.dims()
    }

    /// Removes the padding ring.
    pub fn crop(&self, u: &Image) -> Result<Image> {
        crop(u, self.border)
    }

    /// Zero-embeds an interior image into the canvas (adjoint of [`Prepared::crop`]).
    pub fn embed(&self, u: &Image) -> Image {
        embed(u, self.border)
    }

    pub fn is_smooth(&self) -> bool {
        !matches!(self.term, DataTerm::Deblock { .. })
    }

    /// Unscaled reaction `ψ/λ`, or `None` when the problem has no reaction term.
    fn reaction(&self, u: &Image) -> Result<Option<Image>> {
        match &self.term {
            DataTerm::Denoise { f } => {
                u.check_same_dims(f, "denoising reaction")?;
                Ok(Some(u.sub(f)))
            }
            DataTerm::Sisr { f, a } => {
                let residual = a.apply(&self.crop(u)?)?.sub(f);
                Ok(Some(self.embed(&a.apply_transpose(&residual)?)))
            }
            DataTerm::Deblock { .. } => Ok(None),
        }
    }

    /// `(∂(ψ/λ)/∂u)ᵀ g`; the reaction is linear in `u`, so this is its (symmetric) linear part.
    pub(crate) fn reaction_adjoint(&self, g: &Image) -> Result<Option<Image>> {
        match &self.term {
            DataTerm::Denoise { .. } => Ok(Some(g.clone())),
            DataTerm::Sisr { a, .. } => {
                let low = a.apply(&self.crop(g)?)?;
                Ok(Some(self.embed(&a.apply_transpose(&low)?)))
            }
            DataTerm::Deblock { .. } => Ok(None),
        }
    }

    /// Proximal step; returns the Jacobian mask for deblocking.
    fn prox(&self, v: Image) -> Result<(Image, Option<Vec<bool>>)> {
        match &self.term {
            DataTerm::Deblock { qbox } => {
                let (inner, mask) = prox_deblock_with_mask(&self.crop(&v)?, qbox)?;
                Ok((replace_interior(v, &inner, self.border), Some(mask)))
            }
            _ => Ok((v, None)),
        }
    }

    /// Adjoint of the proximal step's Jacobian.
    pub(crate) fn prox_adjoint(&self, g: &Image, mask: Option<&[bool]>) -> Result<Image> {
        match (&self.term, mask) {
            (DataTerm::Deblock { .. }, Some(mask)) => {
                let inner = crate::data_terms::prox_deblock_adjoint(&self.crop(g)?, mask)?;
                Ok(replace_interior(g.clone(), &inner, self.border))
            }
            (DataTerm::Deblock { .. }, None) => Err(TnrdError::invalid("missing prox mask")),
            _ => Ok(g.clone()),
        }
    }

    /// Data-fidelity part of the stage energy, `½‖A crop(u) − f‖²` or `½‖u − f̃‖²`.
    fn data_energy(&self, u: &Image) -> Result<f64> {
        match &self.term {
            DataTerm::Denoise { f } => Ok(0.5 * u.sub(f).norm_sq()),
            DataTerm::Sisr { f, a } => Ok(0.5 * a.apply(&self.crop(u)?)?.sub(f).norm_sq()),
            DataTerm::Deblock { .. } => Err(TnrdError::Unsupported(
                "stage energy of the deblocking model (non-smooth constraint)".into(),
            )),
        }
    }
}

fn replace_interior(mut canvas: Image, inner: &Image, border: usize) -> Image {
    for y in 0..inner.height() {
        for x in 0..inner.width() {
            canvas.set(x + border, y + border, inner.get(x, y));
        }
    }
    canvas
}

/// Intermediate values of one stage, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StageTape {
    pub(crate) u_prev: Image,
    pub(crate) kernels: Vec<Kernel>,
    /// `φ_i(k_i ∗ u)`.
    pub(crate) activations: Vec<Image>,
    /// Filter responses `k_i ∗ u`.
    pub(crate) responses: Vec<Image>,
    /// `φ_i′(k_i ∗ u)`.
    pub(crate) slopes: Vec<Image>,
    /// Unscaled reaction `ψ/λ`.
    pub(crate) reaction: Option<Image>,
    pub(crate) mask: Option<Vec<bool>>,
}

/// Diffusion term `Σ_i k̄_i ∗ φ_i(k_i ∗ u)`, optionally keeping intermediates.
fn diffusion_term(
    u: &Image,
    kernels: &[Kernel],
    influences: &[InfluenceFunction],
    rbf: &RbfSpec,
    keep: bool,
) -> Result<(Image, Vec<Image>, Vec<Image>, Vec<Image>)> {
    let mut total = Image::zeros(u.width(), u.height());
    let (mut zs, mut acts, mut slopes) = (Vec::new(), Vec::new(), Vec::new());
    for (k, phi) in kernels.iter().zip(influences) {
        let z = convolve(u, k, Boundary::Symmetric)?;
        let mut a = Image::zeros(u.width(), u.height());
        let mut s = Image::zeros(u.width(), u.height());
        phi.eval_phi_and_prime(rbf, z.data(), a.data_mut(), s.data_mut());
        total.axpy(1.0, &convolve(&a, &k.rotate180(), Boundary::Symmetric)?);
        if keep {
            zs.push(z);
            acts.push(a);
            slopes.push(s);
        }
    }
    Ok((total, zs, acts, slopes))
}

/// One stage `u_t = Prox(u_{t−1} − Σ_i k̄_i ∗ φ_i(k_i ∗ u_{t−1}) − ψ(u_{t−1}))` on the canvas.
pub fn stage_forward(
    u_prev: &Image,
    prep: &Prepared,
    stage: &StageParams,
    basis: &DctBasis,
    rbf: &RbfSpec,
) -> Result<Image> {
    Ok(stage_forward_taped(u_prev, prep, stage, basis, rbf, false)?.0)
}

/// [`stage_forward`] that optionally records a [`StageTape`].
pub fn stage_forward_taped(
    u_prev: &Image,
    prep: &Prepared,
    stage: &StageParams,
    basis: &DctBasis,
    rbf: &RbfSpec,
    keep: bool,
) -> Result<(Image, Option<StageTape>)> {
    if u_prev.dims() != prep.canvas_dims() {
        return Err(TnrdError::dims(format!(
            "stage input is {:?}, canvas is {:?}",
            u_prev.dims(),
            prep.canvas_dims()
        )));
    }
    let kernels = stage.kernels(basis)?;
    let (diff, responses, activations, slopes) =
        diffusion_term(u_prev, &kernels, &stage.influences, rbf, keep)?;
    let mut v = u_prev.clone();
    v.axpy(-1.0, &diff);
    let reaction = prep.reaction(u_prev)?;
    let lambda = stage.lambda();
    if let Some(r) = &reaction {
        if lambda != 0.0 {
            v.axpy(-lambda, r);
        }
    }
    let (out, mask) = prep.prox(v)?;
    if !out.is_finite() {
        return Err(TnrdError::NonFinite("stage output".into()));
    }
    let tape = keep.then(|| StageTape {
        u_prev: u_prev.clone(),
        kernels,
        activations,
        responses,
        slopes,
        reaction,
        mask,
    });
    Ok((out, tape))
}

/// Runs all stages and returns every cropped intermediate `u_1 … u_T`.
pub fn infer_stages(model: &Model, obs: &Observation) -> Result<Vec<Image>> {
    let prep = Prepared::new(model.problem, obs, model.pad_border)?;
    let mut u = prep.initial().clone();
    let mut outs = Vec::with_capacity(model.num_stages());
    for stage in &model.stages {
        u = stage_forward(&u, &prep, stage, model.basis(), &model.rbf)?;
        outs.push(prep.crop(&u)?);
    }
    Ok(outs)
}

/// Restores `obs` with `model`.
pub fn infer(model: &Model, obs: &Observation) -> Result<Image> {
    let prep = Prepared::new(model.problem, obs, model.pad_border)?;
    let mut u = prep.initial().clone();
    for stage in &model.stages {
        u = stage_forward(&u, &prep, stage, model.basis(), &model.rbf)?;
    }
    prep.crop(&u)
}

/// Pure diffusion from uniform noise, clamped to `[0, 255]` after every step.
pub fn synthesize_pattern(
    stage: &StageParams,
    basis: &DctBasis,
    rbf: &RbfSpec,
    dims: (usize, usize),
    steps: usize,
    seed: u64,
) -> Result<Image> {
    Ok(synthesize_pattern_with_input(stage, basis, rbf, dims, steps, seed)?.1)
}

/// As [`synthesize_pattern`], also returning the initial noise image.
pub fn synthesize_pattern_with_input(
    stage: &StageParams,
    basis: &DctBasis,
    rbf: &RbfSpec,
    dims: (usize, usize),
    steps: usize,
    seed: u64,
) -> Result<(Image, Image)> {
    if steps == 0 {
        return Err(TnrdError::invalid("synthesis needs at least one step"));
    }
    if dims.0 == 0 || dims.1 == 0 {
        return Err(TnrdError::invalid("synthesis canvas must be non-empty"));
    }
    stage.validate(basis, rbf)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Image::from_fn(dims.0, dims.1, |_, _| rng.random_range(0.0..=255.0));
    let kernels = stage.kernels(basis)?;
    let mut u = noise.clone();
    for _ in 0..steps {
        let (diff, ..) = diffusion_term(&u, &kernels, &stage.influences, rbf, false)?;
        u.axpy(-1.0, &diff);
        u.clamp(0.0, 255.0);
    }
    Ok((noise, u))
}

/// Stage energy `Σ_i Σ_p ρ_i((k_i ∗ u)_p) + λ/2 ‖A u − f‖²` on the canvas.
///
/// Its gradient equals the stage's descent direction wherever the adjoint of the
/// boundary-handled convolution agrees with the rotated kernel, i.e. at least
/// `(m − 1)/2` pixels from the canvas edge.
pub fn stage_energy(
    u: &Image,
    prep: &Prepared,
    stage: &StageParams,
    basis: &DctBasis,
    rbf: &RbfSpec,
) -> Result<f64> {
    let data = prep.data_energy(u)?;
    let mut e = 0.0;
    for (k, phi) in stage.kernels(basis)?.iter().zip(&stage.influences) {
        let z = convolve(u, k, Boundary::Symmetric)?;
        e += phi.eval_rho(rbf, z.data()).iter().sum::<f64>();
    }
    let lambda = stage.lambda();
    if lambda != 0.0 {
        e += lambda * data;
    }
    Ok(e)
}
