//! Filter montages and sampled influence/penalty tables for external plotting.

use std::io::Write;
use std::path::Path;

use crate::diffusion::Model;
use crate::error::{Result, TnrdError};
use crate::image::Image;

/// One sample of `φ` and `ρ` for a given stage and filter (both 1-based).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyRow {
    pub stage: usize,
    pub filter: usize,
    pub z: f64,
    pub phi: f64,
    pub rho: f64,
}

/// Samples every influence function on `[min, max]` of the RBF grid with spacing `step`.
pub fn penalty_table(model: &Model, step: f64) -> Result<Vec<PenaltyRow>> {
    if !(step > 0.0) {
        return Err(TnrdError::invalid(format!("sampling step must be positive, got {step}")));
    }
    let rbf = &model.rbf;
    let n = ((rbf.max() - rbf.min) / step).floor() as usize + 1;
    let mut rows = Vec::new();
    for (t, stage) in model.stages.iter().enumerate() {
        for (i, phi) in stage.influences.iter().enumerate() {
            for k in 0..n {
                let z = rbf.min + k as f64 * step;
                rows.push(PenaltyRow {
                    stage: t + 1,
                    filter: i + 1,
                    z,
                    phi: phi.phi(rbf, z),
                    rho: phi.rho(rbf, z),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_penalties_csv(rows: &[PenaltyRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| TnrdError::io(path, e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    writeln!(out, "stage,filter,z,phi,rho").map_err(io)?;
    for r in rows {
        writeln!(out, "{},{},{},{:e},{:e}", r.stage, r.filter, r.z, r.phi, r.rho).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Montage of all filters: one row per stage, each kernel min-max scaled to
/// `[0, 255]` and magnified `zoom` times, separated by 1-pixel mid-grey gaps.
pub fn filter_grid(model: &Model, zoom: usize) -> Result<Image> {
    if zoom == 0 {
        return Err(TnrdError::invalid("zoom must be positive"));
    }
    let m = model.kernel_size();
    let tile = m * zoom;
    let cols = model.num_filters();
    let rows = model.num_stages();
    let mut img = Image::filled(cols * (tile + 1) + 1, rows * (tile + 1) + 1, 128.0);
    for (t, stage) in model.stages.iter().enumerate() {
        for (i, k) in stage.kernels(model.basis())?.iter().enumerate() {
            let (lo, hi) = k
                .taps()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let span = if hi > lo { hi - lo } else { 1.0 };
            for y in 0..tile {
                for x in 0..tile {
                    let v = k.taps()[(y / zoom) * m + x / zoom];
                    img.set(1 + i * (tile + 1) + x, 1 + t * (tile + 1) + y, 255.0 * (v - lo) / span);
                }
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_terms::ProblemKind;
    use crate::influence::RbfSpec;
    use crate::training::plain_init;

    #[test]
    fn penalty_table_shape_and_anchor() {
        let model = plain_init(ProblemKind::Denoise { sigma: 25.0 }, 3, 2, RbfSpec::default(), 2).unwrap();
        let rows = penalty_table(&model, 1.0).unwrap();
        assert_eq!(rows.len(), 2 * 2 * 621);
        let at_zero = rows.iter().find(|r| r.z == 0.0).unwrap();
        assert_eq!(at_zero.rho, 0.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        write_penalties_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next(), Some("stage,filter,z,phi,rho"));
        assert_eq!(text.lines().count(), rows.len() + 1);
        assert!(penalty_table(&model, 0.0).is_err());
    }

    #[test]
    fn filter_grid_layout() {
        let model = plain_init(ProblemKind::Denoise { sigma: 25.0 }, 3, 4, RbfSpec::default(), 2).unwrap();
        let img = filter_grid(&model, 5).unwrap();
        assert_eq!(img.dims(), (4 * 16 + 1, 2 * 16 + 1));
        assert!(img.data().iter().all(|v| (0.0..=255.0).contains(v)));
        assert_eq!(img.get(0, 0), 128.0);
    }
}
