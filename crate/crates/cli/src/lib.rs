//! Command-line front end for training and applying diffusion models.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use tnrd::data_terms::{bicubic_upscale, ProblemKind, BLOCK};
use tnrd::diffusion::{infer, synthesize_pattern_with_input};
use tnrd::gradcheck::{gradient_check, GradcheckConfig};
use tnrd::image::{lag1_autocorrelation, psnr, Image, PSNR_CAP_DB};
use tnrd::influence::{RbfKind, RbfSpec};
use tnrd::io::{
    degrade, filter_grid, ingest_dataset, list_images, load_image, load_model, penalty_table, save_image,
    save_model, write_penalties_csv, DatasetManifest,
};
use tnrd::training::{plain_init, train, Scheme, TrainConfig};
use tnrd::{Model, Observation};

#[derive(Debug, Parser)]
#[command(name = "tnrd", version, about = "Trainable nonlinear reaction-diffusion image restoration")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on this.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on crops of a directory of PGM images.
    Train(TrainArgs),
    /// Restore one image, or every PGM in a directory.
    Apply(ApplyArgs),
    /// Per-image PSNR report against ground truth.
    Eval(EvalArgs),
    /// Compare analytic gradients with finite differences on random toy problems.
    Gradcheck(GradcheckArgs),
    /// Run one trained stage as pure diffusion from uniform noise.
    Synthesize(SynthesizeArgs),
    /// Write a filter montage and sampled influence/penalty tables.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProblemArg {
    Denoise,
    Sisr,
    Deblock,
}

impl ProblemArg {
    fn name(self) -> &'static str {
        match self {
            ProblemArg::Denoise => "denoise",
            ProblemArg::Sisr => "sisr",
            ProblemArg::Deblock => "deblock",
        }
    }

    fn default_param(self) -> f64 {
        match self {
            ProblemArg::Denoise => 25.0,
            ProblemArg::Sisr => 3.0,
            ProblemArg::Deblock => 10.0,
        }
    }
}

#[derive(Debug, Args)]
pub struct ProblemSpec {
    #[arg(long, value_enum)]
    pub problem: ProblemArg,
    /// Noise σ, upscaling factor or JPEG quality.
    #[arg(long)]
    pub param: Option<f64>,
    /// Accept degradation parameters outside the tested set (σ 15/25/50, ×2/3/4, q 10/20/30).
    #[arg(long)]
    pub allow_untested: bool,
}

impl ProblemSpec {
    fn resolve(&self) -> Result<ProblemKind> {
        let param = self.param.unwrap_or_else(|| self.problem.default_param());
        let kind = ProblemKind::from_name(self.problem.name(), param)?;
        kind.validate(!self.allow_untested)?;
        Ok(kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SchemeArg {
    Greedy,
    Joint,
    #[value(name = "greedy+joint")]
    GreedyJoint,
}

impl From<SchemeArg> for Scheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Greedy => Scheme::Greedy,
            SchemeArg::Joint => Scheme::Joint,
            SchemeArg::GreedyJoint => Scheme::GreedyJoint,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RbfArg {
    Gaussian,
    Triangular,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub problem: ProblemSpec,
    #[arg(long, default_value_t = 5)]
    pub stages: usize,
    #[arg(long, default_value_t = 5)]
    pub kernel: usize,
    /// Filters per stage (default: m² − 1).
    #[arg(long)]
    pub filters: Option<usize>,
    #[arg(long, value_enum, default_value_t = RbfArg::Gaussian)]
    pub rbf: RbfArg,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 180)]
    pub crop: usize,
    #[arg(long, default_value_t = 1)]
    pub crops_per_image: usize,
    #[arg(long, value_enum, default_value_t = SchemeArg::GreedyJoint)]
    pub scheme: SchemeArg,
    /// L-BFGS iterations per phase.
    #[arg(long, default_value_t = 200)]
    pub iters: usize,
    #[arg(long, default_value_t = 10)]
    pub memory: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the per-iteration log here instead of stderr.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Degrade each ground-truth image for this model and restore it.
    #[arg(long, conflicts_with = "restored_dir", required_unless_present = "restored_dir")]
    pub model: Option<PathBuf>,
    /// Compare already restored images (matched by file name) instead of running a model.
    #[arg(long)]
    pub restored_dir: Option<PathBuf>,
    #[arg(long)]
    pub gt_dir: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    /// Seed for synthetic degradations.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = ProblemArg::Denoise)]
    pub problem: ProblemArg,
    #[arg(long)]
    pub param: Option<f64>,
    #[arg(long, default_value_t = 8)]
    pub size: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    #[arg(long, default_value_t = 2)]
    pub filters: usize,
    #[arg(long, default_value_t = 1)]
    pub stages: usize,
    /// Number of random configurations.
    #[arg(long, default_value_t = 1)]
    pub trials: usize,
    /// Relative tolerance; the absolute floor is `--abs-tol`.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-7)]
    pub abs_tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// 1-based stage index.
    #[arg(long, default_value_t = 1)]
    pub stage: usize,
    /// Canvas size as WxH.
    #[arg(long, default_value = "128x128", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub filters: Option<PathBuf>,
    #[arg(long)]
    pub penalties: Option<PathBuf>,
    /// Pixels per kernel tap in the montage.
    #[arg(long, default_value_t = 8)]
    pub zoom: usize,
    /// Sampling step for the penalty table.
    #[arg(long, default_value_t = 1.0)]
    pub step: f64,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got '{s}'"))?;
    let w: usize = w.parse().map_err(|_| format!("invalid width '{w}'"))?;
    let h: usize = h.parse().map_err(|_| format!("invalid height '{h}'"))?;
    if w == 0 || h == 0 {
        return Err("size must be positive".into());
    }
    Ok((w, h))
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    let workers = cli.workers;
    if workers == Some(0) {
        bail!("--workers must be positive");
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .context("cannot start worker pool")?;
    pool.install(|| match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Apply(a) => cmd_apply(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synthesize(a) => cmd_synthesize(a),
        Command::Export(a) => cmd_export(a),
    })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let problem = a.problem.resolve()?;
    let filters = a.filters.unwrap_or(a.kernel * a.kernel - 1);
    let rbf = RbfSpec::with_kind(match a.rbf {
        RbfArg::Gaussian => RbfKind::Gaussian,
        RbfArg::Triangular => RbfKind::Triangular,
    });
    let sources = list_images(&a.data)?;
    ensure!(!sources.is_empty(), "no .pgm images in {}", a.data.display());
    let manifest = DatasetManifest {
        sources,
        crop: a.crop,
        crops_per_image: a.crops_per_image,
        problem,
        seed: a.seed,
    };
    let samples = ingest_dataset(&manifest)?;
    let init = plain_init(problem, a.kernel, filters, rbf, a.stages)?;
    let config = TrainConfig {
        scheme: a.scheme.into(),
        lbfgs_iters: a.iters,
        lbfgs_memory: a.memory,
        workers: None,
    };
    let mut sink: Box<dyn Write + Send> = match &a.log {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("cannot create {}", p.display()))?),
        None => Box::new(std::io::stderr()),
    };
    let _ = writeln!(
        sink,
        "# {} {} on {} samples of {}x{}",
        init.label(),
        problem.name(),
        samples.len(),
        manifest.effective_crop(),
        manifest.effective_crop()
    );
    let report = train(&samples, &init, &config, |phase, it| {
        let _ = writeln!(sink, "{phase}: {it}");
    })?;
    eprintln!(
        "training loss: init {:.6e}{} final {:.6e}",
        report.initial_loss,
        report.greedy_loss.map(|g| format!(", greedy {g:.6e},")).unwrap_or_default(),
        report.final_loss
    );
    save_model(&report.model, &a.out)?;
    Ok(())
}

fn restore(model: &Model, img: Image) -> Result<Image> {
    let obs = Observation::from_image(model.problem, img)?;
    Ok(infer(model, &obs)?)
}

fn cmd_apply(a: ApplyArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    if a.input.is_dir() {
        fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
        let inputs = list_images(&a.input)?;
        inputs.par_iter().try_for_each(|p| -> Result<()> {
            let out = restore(&model, load_image(p)?)?;
            save_image(&out, a.out.join(p.file_name().unwrap()))?;
            Ok(())
        })
    } else {
        let out = restore(&model, load_image(&a.input)?)?;
        save_image(&out, &a.out)?;
        Ok(())
    }
}

/// Largest top-left crop whose sides are multiples of `unit`.
fn align(img: Image, unit: usize) -> Result<Image> {
    let w = img.width() / unit * unit;
    let h = img.height() / unit * unit;
    ensure!(w > 0 && h > 0, "image smaller than {unit}x{unit}");
    if (w, h) == img.dims() {
        Ok(img)
    } else {
        Ok(img.sub_image(0, 0, w, h)?)
    }
}

/// One report row: file name, degraded-input PSNR (if any) and restored PSNR.
type Row = (String, Option<f64>, f64);

fn eval_rows(a: &EvalArgs) -> Result<Vec<Row>> {
    let gts = list_images(&a.gt_dir)?;
    ensure!(!gts.is_empty(), "no .pgm images in {}", a.gt_dir.display());
    let name = |p: &Path| p.file_name().unwrap().to_string_lossy().into_owned();
    if let Some(dir) = &a.restored_dir {
        return gts
            .par_iter()
            .map(|p| {
                let gt = load_image(p)?;
                let other = dir.join(p.file_name().unwrap());
                let restored = load_image(&other)?;
                ensure!(restored.dims() == gt.dims(), "{} differs in size from its ground truth", other.display());
                Ok((name(p), None, psnr(&restored, &gt, 255.0)?.db))
            })
            .collect();
    }
    let model = load_model(a.model.as_ref().unwrap())?;
    gts.par_iter()
        .enumerate()
        .map(|(i, p)| {
            let gt = load_image(p)?;
            let gt = match model.problem {
                ProblemKind::Denoise { .. } => gt,
                ProblemKind::SuperResolve { factor } => align(gt, factor)?,
                ProblemKind::Deblock { .. } => align(gt, BLOCK)?,
            };
            let obs = degrade(&gt, model.problem, a.seed.wrapping_add(i as u64))?;
            let input = match (&obs, model.problem) {
                (Observation::SuperResolve(f), ProblemKind::SuperResolve { factor }) => bicubic_upscale(f, factor)?,
                _ => obs.image().clone(),
            };
            let restored = infer(&model, &obs)?;
            Ok((name(p), Some(psnr(&input, &gt, 255.0)?.db), psnr(&restored, &gt, 255.0)?.db))
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let rows = eval_rows(&a)?;
    let mut out = String::from("image,input_psnr,restored_psnr\n");
    let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
    for (name, input, restored) in &rows {
        out.push_str(&format!("{name},{},{restored:.4}\n", fmt(*input)));
    }
    let n = rows.len() as f64;
    let mean_in = rows.iter().map(|r| r.1).sum::<Option<f64>>().map(|s| s / n);
    let mean_out = rows.iter().map(|r| r.2).sum::<f64>() / n;
    out.push_str(&format!("average,{},{mean_out:.4}\n", fmt(mean_in)));
    fs::write(&a.report, out).with_context(|| format!("cannot write {}", a.report.display()))?;
    let exact = rows.iter().filter(|r| r.2 >= PSNR_CAP_DB).count();
    println!(
        "{} images, average PSNR {mean_out:.2} dB{}",
        rows.len(),
        if exact > 0 { format!(" ({exact} identical)") } else { String::new() }
    );
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let param = a.param.unwrap_or(match a.problem {
        ProblemArg::Sisr => 2.0,
        other => other.default_param(),
    });
    let problem = ProblemKind::from_name(a.problem.name(), param)?;
    let mut failed = 0;
    for trial in 0..a.trials {
        let cfg = GradcheckConfig {
            size: a.size,
            kernel: a.kernel,
            filters: a.filters,
            stages: a.stages,
            ..GradcheckConfig::new(problem, a.seed.wrapping_add(trial as u64))
        };
        let r = gradient_check(&cfg, a.tol, a.abs_tol)?;
        println!(
            "trial {trial}: {} coordinates, {} outside tolerance, worst score {:.3} at {} (analytic {:e}, fd {:e})",
            r.coordinates,
            r.failures,
            r.worst_score,
            r.worst_coordinate,
            r.analytic[r.worst_coordinate],
            r.finite_difference[r.worst_coordinate]
        );
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", a.trials);
    }
    println!("gradient check passed");
    Ok(())
}

fn cmd_synthesize(a: SynthesizeArgs) -> Result<()> {
    let model = load_model(&a.model)?;
    ensure!(
        (1..=model.num_stages()).contains(&a.stage),
        "stage must be in 1..={}",
        model.num_stages()
    );
    let (noise, out) = synthesize_pattern_with_input(
        &model.stages[a.stage - 1],
        model.basis(),
        &model.rbf,
        a.size,
        a.steps,
        a.seed,
    )?;
    save_image(&out, &a.out)?;
    println!(
        "lag-1 autocorrelation: input {:.4}, output {:.4}",
        lag1_autocorrelation(&noise),
        lag1_autocorrelation(&out)
    );
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    ensure!(a.filters.is_some() || a.penalties.is_some(), "nothing to export: pass --filters and/or --penalties");
    let model = load_model(&a.model)?;
    if let Some(p) = &a.filters {
        save_image(&filter_grid(&model, a.zoom)?, p)?;
    }
    if let Some(p) = &a.penalties {
        write_penalties_csv(&penalty_table(&model, a.step)?, p)?;
    }
    Ok(())
}
