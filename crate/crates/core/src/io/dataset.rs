//! Training-set ingestion and the JPEG quantization simulation.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::pgm::load_image;
use crate::data_terms::{
    bicubic_downsample, block_dct, block_idct, quality_table, quant_box_from_jpeg, ProblemKind, BLOCK,
};
use crate::diffusion::Observation;
use crate::error::{Result, TnrdError};
use crate::image::{add_gaussian_noise, Image};
use crate::training::TrainingSample;

/// Result of a simulated baseline JPEG round trip.
#[derive(Debug, Clone, PartialEq)]
pub struct JpegData {
    pub decoded: Image,
    /// Quantized integer levels `d_k` in the block-DCT layout.
    pub levels: Image,
    pub quality: u32,
}

impl JpegData {
    pub fn observation(&self) -> Result<Observation> {
        Ok(Observation::Deblock {
            decoded: self.decoded.clone(),
            qbox: quant_box_from_jpeg(&self.levels, self.quality, false)?,
        })
    }
}

/// Block DCT, quantize to the nearest level with the quality-`q` table, de-quantize, inverse DCT.
/// The decoded image is left unrounded so it stays inside its quantization box.
pub fn jpeg_roundtrip(img: &Image, quality: u32) -> Result<JpegData> {
    let table = quality_table(quality)?;
    let coeffs = block_dct(img)?;
    let step = |x: usize, y: usize| table[(y % BLOCK) * BLOCK + x % BLOCK];
    let levels = Image::from_fn(img.width(), img.height(), |x, y| (coeffs.get(x, y) / step(x, y)).round());
    let dequant = Image::from_fn(img.width(), img.height(), |x, y| levels.get(x, y) * step(x, y));
    Ok(JpegData {
        decoded: block_idct(&dequant)?,
        levels,
        quality,
    })
}

/// Reproducible description of a training set.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub sources: Vec<PathBuf>,
    pub crop: usize,
    pub crops_per_image: usize,
    pub problem: ProblemKind,
    pub seed: u64,
}

impl DatasetManifest {
    /// Crop side actually used: rounded down to a multiple of the SISR factor or the JPEG block.
    pub fn effective_crop(&self) -> usize {
        let unit = match self.problem {
            ProblemKind::Denoise { .. } => 1,
            ProblemKind::SuperResolve { factor } => factor,
            ProblemKind::Deblock { .. } => BLOCK,
        };
        self.crop / unit * unit
    }
}

/// `*.pgm` files in `dir`, sorted by name.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| TnrdError::io(dir, e))? {
        let path = entry.map_err(|e| TnrdError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Degrades a clean crop for `problem`.
pub fn degrade(gt: &Image, problem: ProblemKind, noise_seed: u64) -> Result<Observation> {
    match problem {
        ProblemKind::Denoise { sigma } => Ok(Observation::Denoise(add_gaussian_noise(gt, sigma, noise_seed)?)),
        ProblemKind::SuperResolve { factor } => Ok(Observation::SuperResolve(bicubic_downsample(gt, factor)?)),
        ProblemKind::Deblock { quality } => jpeg_roundtrip(gt, quality)?.observation(),
    }
}

/// Loads, crops and degrades the manifest's images.
///
/// Crop positions and noise seeds are drawn from one generator in image-then-crop
/// order, so the result depends only on the manifest.
pub fn ingest_dataset(manifest: &DatasetManifest) -> Result<Vec<TrainingSample>> {
    let crop = manifest.effective_crop();
    if crop == 0 || manifest.crops_per_image == 0 {
        return Err(TnrdError::invalid("crop size and crops per image must be positive"));
    }
    if manifest.sources.is_empty() {
        return Err(TnrdError::invalid("dataset has no source images"));
    }
    manifest.problem.validate(false)?;
    let images: Vec<Image> = manifest
        .sources
        .par_iter()
        .map(load_image)
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(manifest.seed);
    let mut jobs = Vec::new();
    for (img, path) in images.iter().zip(&manifest.sources) {
        if img.width() < crop || img.height() < crop {
            return Err(TnrdError::invalid(format!(
                "{} is {}x{}, smaller than the {crop}x{crop} crop",
                path.display(),
                img.width(),
                img.height()
            )));
        }
        for _ in 0..manifest.crops_per_image {
            let x0 = rng.random_range(0..=img.width() - crop);
            let y0 = rng.random_range(0..=img.height() - crop);
            jobs.push((img, x0, y0, rng.random::<u64>()));
        }
    }
    jobs.into_par_iter()
        .map(|(img, x0, y0, noise_seed)| {
            let gt = img.sub_image(x0, y0, crop, crop)?;
            Ok(TrainingSample {
                observation: degrade(&gt, manifest.problem, noise_seed)?,
                ground_truth: gt,
            })
        })
        .collect()
}
