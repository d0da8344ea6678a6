//! Reaction terms and proximal operators for the three restoration problems:
//! identity (denoising), bicubic decimation (super resolution) and the block-DCT
//! quantization constraint (JPEG deblocking).

use crate::error::{Result, TnrdError};
use crate::image::{reflect, Image};

/// Restoration problem and its degradation parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProblemKind {
    Denoise { sigma: f64 },
    SuperResolve { factor: usize },
    Deblock { quality: u32 },
}

impl ProblemKind {
    pub const DENOISE_SIGMAS: [f64; 3] = [15.0, 25.0, 50.0];
    pub const SR_FACTORS: [usize; 3] = [2, 3, 4];
    pub const JPEG_QUALITIES: [u32; 3] = [10, 20, 30];

    pub fn name(&self) -> &'static str {
        match self {
            ProblemKind::Denoise { .. } => "denoise",
            ProblemKind::SuperResolve { .. } => "sisr",
            ProblemKind::Deblock { .. } => "deblock",
        }
    }

    /// Numeric degradation parameter (σ, factor or quality).
    pub fn parameter(&self) -> f64 {
        match *self {
            ProblemKind::Denoise { sigma } => sigma,
            ProblemKind::SuperResolve { factor } => factor as f64,
            ProblemKind::Deblock { quality } => quality as f64,
        }
    }

    pub fn from_name(name: &str, parameter: f64) -> Result<Self> {
        let integral = |what: &str| -> Result<u64> {
            if parameter.fract() != 0.0 || parameter < 1.0 {
                Err(TnrdError::invalid(format!(
                    "{what} must be a positive integer, got {parameter}"
                )))
            } else {
                Ok(parameter as u64)
            }
        };
        match name {
            "denoise" => Ok(ProblemKind::Denoise { sigma: parameter }),
            "sisr" => Ok(ProblemKind::SuperResolve {
                factor: integral("upscaling factor")? as usize,
            }),
            "deblock" => Ok(ProblemKind::Deblock {
                quality: integral("JPEG quality")? as u32,
            }),
            other => Err(TnrdError::invalid(format!("unknown problem kind '{other}'"))),
        }
    }

    /// Checks the parameter range; `strict` additionally restricts it to the tested settings.
    pub fn validate(&self, strict: bool) -> Result<()> {
        match *self {
            ProblemKind::Denoise { sigma } => {
                if !(sigma >= 0.0) || !sigma.is_finite() {
                    return Err(TnrdError::invalid(format!("invalid noise level {sigma}")));
                }
                if strict && !Self::DENOISE_SIGMAS.contains(&sigma) {
                    return Err(TnrdError::Unsupported(format!("noise level {sigma}")));
                }
            }
            ProblemKind::SuperResolve { factor } => {
                if factor < 2 {
                    return Err(TnrdError::invalid(format!("invalid upscaling factor {factor}")));
                }
                if strict && !Self::SR_FACTORS.contains(&factor) {
                    return Err(TnrdError::Unsupported(format!("upscaling factor {factor}")));
                }
            }
            ProblemKind::Deblock { quality } => {
                if !(1..=100).contains(&quality) {
                    return Err(TnrdError::invalid(format!("invalid JPEG quality {quality}")));
                }
                if strict && !Self::JPEG_QUALITIES.contains(&quality) {
                    return Err(TnrdError::Unsupported(format!("JPEG quality {quality}")));
                }
            }
        }
        Ok(())
    }
}

/// `ψ(u) = λ (u − f)`.
pub fn reaction_denoise(u: &Image, f: &Image, lambda: f64) -> Result<Image> {
    u.check_same_dims(f, "denoising reaction")?;
    let mut out = u.sub(f);
    out.scale(lambda);
    Ok(out)
}

/// Cubic convolution kernel with `a = −0.5`.
pub fn cubic(x: f64) -> f64 {
    let ax = x.abs();
    if ax <= 1.0 {
        (1.5 * ax - 2.5) * ax * ax + 1.0
    } else if ax < 2.0 {
        ((-0.5 * ax + 2.5) * ax - 4.0) * ax + 2.0
    } else {
        0.0
    }
}

/// Sparse 1D resampling matrix, one row of `(source index, weight)` per output sample.
#[derive(Debug, Clone)]
struct Resample1d {
    in_len: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl Resample1d {
    /// Bicubic resampling by `scale = out_len / in_len`, widening the kernel
    /// when shrinking (antialiasing) and reflecting indices symmetrically.
    fn bicubic(in_len: usize, out_len: usize) -> Self {
        let scale = out_len as f64 / in_len as f64;
        let (kscale, width) = if scale < 1.0 {
            (scale, 4.0 / scale)
        } else {
            (1.0, 4.0)
        };
        let taps = width.ceil() as isize + 2;
        let rows = (0..out_len)
            .map(|i| {
                let u = (i as f64 + 0.5) / scale - 0.5;
                let left = (u - width / 2.0).floor() as isize;
                let mut row: Vec<(usize, f64)> = Vec::with_capacity(taps as usize);
                let mut total = 0.0;
                for t in 0..taps {
                    let idx = left + t;
                    let w = kscale * cubic(kscale * (u - idx as f64));
                    if w == 0.0 {
                        continue;
                    }
                    total += w;
                    let src = reflect(idx, in_len);
                    match row.iter_mut().find(|(s, _)| *s == src) {
                        Some(entry) => entry.1 += w,
                        None => row.push((src, w)),
                    }
                }
                row.iter_mut().for_each(|e| e.1 /= total);
                row
            })
            .collect();
        Resample1d { in_len, rows }
    }

    fn out_len(&self) -> usize {
        self.rows.len()
    }

    fn apply(&self, src: &[f64], stride: usize, dst: &mut [f64], dst_stride: usize) {
        for (i, row) in self.rows.iter().enumerate() {
            dst[i * dst_stride] = row.iter().map(|&(s, w)| w * src[s * stride]).sum();
        }
    }

    fn apply_transpose(&self, src: &[f64], stride: usize, dst: &mut [f64], dst_stride: usize) {
        for v in (0..self.in_len).map(|i| i * dst_stride) {
            dst[v] = 0.0;
        }
        for (i, row) in self.rows.iter().enumerate() {
            let v = src[i * stride];
            for &(s, w) in row {
                dst[s * dst_stride] += w * v;
            }
        }
    }
}

/// Separable 2D resampler (x pass then y pass) and its transpose.
#[derive(Debug, Clone)]
pub struct BicubicResampler {
    x: Resample1d,
    y: Resample1d,
}

impl BicubicResampler {
    pub fn new(in_dims: (usize, usize), out_dims: (usize, usize)) -> Self {
        BicubicResampler {
            x: Resample1d::bicubic(in_dims.0, out_dims.0),
            y: Resample1d::bicubic(in_dims.1, out_dims.1),
        }
    }

    pub fn in_dims(&self) -> (usize, usize) {
        (self.x.in_len, self.y.in_len)
    }

    pub fn out_dims(&self) -> (usize, usize) {
        (self.x.out_len(), self.y.out_len())
    }

    pub fn apply(&self, img: &Image) -> Result<Image> {
        if img.dims() != self.in_dims() {
            return Err(TnrdError::dims(format!(
                "resampler expects {:?}, got {:?}",
                self.in_dims(),
                img.dims()
            )));
        }
        let (iw, ih) = self.in_dims();
        let (ow, oh) = self.out_dims();
        let mut tmp = vec![0.0; ow * ih];
        for y in 0..ih {
            self.x
                .apply(&img.data()[y * iw..], 1, &mut tmp[y * ow..], 1);
        }
        let mut out = vec![0.0; ow * oh];
        for x in 0..ow {
            self.y.apply(&tmp[x..], ow, &mut out[x..], ow);
        }
        Image::new(ow, oh, out)
    }

    pub fn apply_transpose(&self, img: &Image) -> Result<Image> {
        if img.dims() != self.out_dims() {
            return Err(TnrdError::dims(format!(
                "resampler transpose expects {:?}, got {:?}",
                self.out_dims(),
                img.dims()
            )));
        }
        let (iw, ih) = self.in_dims();
        let (ow, _) = self.out_dims();
        let mut tmp = vec![0.0; ow * ih];
        for x in 0..ow {
            self.y
                .apply_transpose(&img.data()[x..], ow, &mut tmp[x..], ow);
        }
        let mut out = vec![0.0; iw * ih];
        for y in 0..ih {
            self.x
                .apply_transpose(&tmp[y * ow..], 1, &mut out[y * iw..], 1);
        }
        Image::new(iw, ih, out)
    }
}

fn check_factor(factor: usize) -> Result<()> {
    if factor < 2 {
        return Err(TnrdError::invalid(format!(
            "resampling factor must be at least 2, got {factor}"
        )));
    }
    Ok(())
}

/// Downsampling operator `A` for a high-resolution canvas of `hr_dims`.
pub fn downsampler(hr_dims: (usize, usize), factor: usize) -> Result<BicubicResampler> {
    check_factor(factor)?;
    let (w, h) = hr_dims;
    if w % factor != 0 || h % factor != 0 {
        return Err(TnrdError::invalid(format!(
            "{w}x{h} image is not divisible by factor {factor}"
        )));
    }
    Ok(BicubicResampler::new(hr_dims, (w / factor, h / factor)))
}

/// `A h`: antialiased bicubic decimation by an integer factor.
pub fn bicubic_downsample(h: &Image, factor: usize) -> Result<Image> {
    downsampler(h.dims(), factor)?.apply(h)
}

/// `Aᵀ l` for the high-resolution dimensions `out_dims`.
pub fn bicubic_downsample_adjoint(l: &Image, factor: usize, out_dims: (usize, usize)) -> Result<Image> {
    let a = downsampler(out_dims, factor)?;
    a.apply_transpose(l)
}

/// Bicubic interpolation to `factor ×` the input dimensions.
pub fn bicubic_upscale(l: &Image, factor: usize) -> Result<Image> {
    check_factor(factor)?;
    let (w, h) = l.dims();
    BicubicResampler::new((w, h), (w * factor, h * factor)).apply(l)
}

/// `ψ(u) = λ Aᵀ (A u − f)`.
pub fn reaction_sisr(u: &Image, f: &Image, lambda: f64, factor: usize) -> Result<Image> {
    let a = downsampler(u.dims(), factor)?;
    if a.out_dims() != f.dims() {
        return Err(TnrdError::dims(format!(
            "low-resolution observation is {:?}, expected {:?}",
            f.dims(),
            a.out_dims()
        )));
    }
    let residual = a.apply(u)?.sub(f);
    let mut out = a.apply_transpose(&residual)?;
    out.scale(lambda);
    Ok(out)
}

pub const BLOCK: usize = 8;

fn dct8_matrix() -> [[f64; BLOCK]; BLOCK] {
    let mut c = [[0.0; BLOCK]; BLOCK];
    for (k, row) in c.iter_mut().enumerate() {
        let alpha = if k == 0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
        for (n, v) in row.iter_mut().enumerate() {
            *v = alpha * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    c
}

fn check_blocks(img: &Image) -> Result<()> {
    let (w, h) = img.dims();
    if w % BLOCK != 0 || h % BLOCK != 0 {
        return Err(TnrdError::invalid(format!(
            "block DCT needs dimensions divisible by {BLOCK}, got {w}x{h}"
        )));
    }
    Ok(())
}

fn block_transform(img: &Image, inverse: bool) -> Result<Image> {
    check_blocks(img)?;
    let c = dct8_matrix();
    let (w, h) = img.dims();
    let mut out = Image::zeros(w, h);
    let mut block = [[0.0; BLOCK]; BLOCK];
    let mut tmp = [[0.0; BLOCK]; BLOCK];
    for by in (0..h).step_by(BLOCK) {
        for bx in (0..w).step_by(BLOCK) {
            for (y, row) in block.iter_mut().enumerate() {
                for (x, v) in row.iter_mut().enumerate() {
                    *v = img.get(bx + x, by + y);
                }
            }
            // forward: C X Cᵀ, inverse: Cᵀ X C
            for i in 0..BLOCK {
                for j in 0..BLOCK {
                    tmp[i][j] = (0..BLOCK)
                        .map(|k| {
                            let m = if inverse { c[k][i] } else { c[i][k] };
                            m * block[k][j]
                        })
                        .sum();
                }
            }
            for i in 0..BLOCK {
                for j in 0..BLOCK {
                    let v: f64 = (0..BLOCK)
                        .map(|k| {
                            let m = if inverse { c[k][j] } else { c[j][k] };
                            tmp[i][k] * m
                        })
                        .sum();
                    out.set(bx + j, by + i, v);
                }
            }
        }
    }
    Ok(out)
}

/// Orthonormal 8×8 block DCT-II.
pub fn block_dct(u: &Image) -> Result<Image> {
    block_transform(u, false)
}

/// Inverse of [`block_dct`] (its transpose).
pub fn block_idct(c: &Image) -> Result<Image> {
    block_transform(c, true)
}

/// Standard JPEG luminance quantization table, row-major.
pub const JPEG_LUMA_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Quantization steps for a quality in `1..=100` (IJG scaling, baseline clamp to `[1, 255]`).
pub fn quality_table(quality: u32) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(TnrdError::invalid(format!("JPEG quality must be in 1..=100, got {quality}")));
    }
    let scale = if quality < 50 {
        5000 / quality
    } else {
        200 - 2 * quality
    };
    let mut table = [0.0; 64];
    for (t, &base) in table.iter_mut().zip(JPEG_LUMA_TABLE.iter()) {
        *t = ((base as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(table)
}

/// Per-coefficient interval constraint in the block-DCT domain.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantBox {
    pub lower: Image,
    pub upper: Image,
}

impl QuantBox {
    pub fn dims(&self) -> (usize, usize) {
        self.lower.dims()
    }

    /// Whether every coefficient of `u`'s block DCT lies within the box (up to `tol`).
    pub fn contains(&self, u: &Image, tol: f64) -> Result<bool> {
        let c = block_dct(u)?;
        c.check_same_dims(&self.lower, "quantization box")?;
        Ok(c
            .data()
            .iter()
            .zip(self.lower.data().iter().zip(self.upper.data()))
            .all(|(v, (lo, hi))| *v >= lo - tol && *v <= hi + tol))
    }
}

/// Box `[(d − ½) q_k, (d + ½) q_k]` from quantized levels `d` and the quality-`q` steps.
pub fn quant_box_from_jpeg(levels: &Image, quality: u32, strict: bool) -> Result<QuantBox> {
    if strict {
        ProblemKind::Deblock { quality }.validate(true)?;
    }
    check_blocks(levels)?;
    let table = quality_table(quality)?;
    let (w, h) = levels.dims();
    let mut lower = Image::zeros(w, h);
    let mut upper = Image::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let step = table[(y % BLOCK) * BLOCK + x % BLOCK];
            let d = levels.get(x, y);
            lower.set(x, y, (d - 0.5) * step);
            upper.set(x, y, (d + 0.5) * step);
        }
    }
    Ok(QuantBox { lower, upper })
}

/// Projection onto the quantization constraint set: `Dᵀ clamp(D u, box)`.
pub fn prox_deblock(u: &Image, qbox: &QuantBox) -> Result<Image> {
    Ok(prox_deblock_with_mask(u, qbox)?.0)
}

/// As [`prox_deblock`], also returning the Jacobian mask in the DCT domain
/// (1 strictly inside the box, 0 where the coefficient was clamped or sits on a bound).
pub fn prox_deblock_with_mask(u: &Image, qbox: &QuantBox) -> Result<(Image, Vec<bool>)> {
    let mut c = block_dct(u)?;
    c.check_same_dims(&qbox.lower, "quantization box")?;
    let mut mask = Vec::with_capacity(c.len());
    for (v, (lo, hi)) in c
        .data_mut()
        .iter_mut()
        .zip(qbox.lower.data().iter().zip(qbox.upper.data()))
    {
        let inside = *v > *lo && *v < *hi;
        mask.push(inside);
        if !inside {
            *v = v.clamp(*lo, *hi);
        }
    }
    Ok((block_idct(&c)?, mask))
}

/// Applies `Dᵀ M D` for a prox Jacobian mask.
pub fn prox_deblock_adjoint(g: &Image, mask: &[bool]) -> Result<Image> {
    let mut c = block_dct(g)?;
    if mask.len() != c.len() {
        return Err(TnrdError::dims("prox mask size mismatch"));
    }
    for (v, &m) in c.data_mut().iter_mut().zip(mask) {
        if !m {
            *v = 0.0;
        }
    }
    block_idct(&c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Image {
        Image::from_fn(w, h, |_, _| rng.random_range(lo..hi))
    }

    /// Dense matrix of a linear image map, built column by column from unit images.
    fn dense(
        in_dims: (usize, usize),
        op: impl Fn(&Image) -> Image,
    ) -> (Vec<Vec<f64>>, (usize, usize)) {
        let n = in_dims.0 * in_dims.1;
        let mut cols = Vec::with_capacity(n);
        let mut out_dims = (0, 0);
        for i in 0..n {
            let mut e = Image::zeros(in_dims.0, in_dims.1);
            e.data_mut()[i] = 1.0;
            let col = op(&e);
            out_dims = col.dims();
            cols.push(col.into_data());
        }
        (cols, out_dims)
    }

    #[test]
    fn denoise_reaction_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u = random_image(6, 5, 0.0, 255.0, &mut rng);
        let f = random_image(6, 5, 0.0, 255.0, &mut rng);
        assert!(reaction_denoise(&u, &u, 0.7).unwrap().data().iter().all(|v| *v == 0.0));
        assert!(reaction_denoise(&u, &f, 0.0).unwrap().data().iter().all(|v| *v == 0.0));
        let r = reaction_denoise(&u, &f, 0.3).unwrap();
        for i in 0..u.len() {
            assert!((r.data()[i] - 0.3 * (u.data()[i] - f.data()[i])).abs() < 1e-12);
        }
        assert!(reaction_denoise(&u, &Image::zeros(5, 5), 1.0).is_err());
    }

    #[test]
    fn cubic_kernel_partition_of_unity() {
        for t in [0.0, 0.25, 0.5, 0.9] {
            let s: f64 = (-3..=3).map(|k| cubic(t - k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
        assert_eq!(cubic(0.0), 1.0);
        assert_eq!(cubic(1.0), 0.0);
        assert_eq!(cubic(2.0), 0.0);
    }

    #[test]
    fn constants_are_preserved_by_resampling() {
        let c = Image::filled(12, 9, 77.0);
        for f in [3] {
            let d = bicubic_downsample(&c, f).unwrap();
            assert_eq!(d.dims(), (4, 3));
            assert!(d.data().iter().all(|v| (v - 77.0).abs() < 1e-12));
        }
        let small = Image::filled(5, 4, 12.5);
        for f in [2, 3, 4] {
            let u = bicubic_upscale(&small, f).unwrap();
            assert_eq!(u.dims(), (5 * f, 4 * f));
            assert!(u.data().iter().all(|v| (v - 12.5).abs() < 1e-12));
        }
    }

    #[test]
    fn downsample_requires_divisible_dims() {
        let img = Image::zeros(10, 9);
        assert!(bicubic_downsample(&img, 3).is_err());
        assert!(bicubic_downsample(&img, 1).is_err());
    }

    #[test]
    fn downsample_adjoint_matches_dense_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for factor in [2, 3, 4] {
            let dims = (4 * factor, 3 * factor);
            let (cols, out_dims) = dense(dims, |e| bicubic_downsample(e, factor).unwrap());
            let l = random_image(out_dims.0, out_dims.1, -1.0, 1.0, &mut rng);
            let at = bicubic_downsample_adjoint(&l, factor, dims).unwrap();
            for (i, col) in cols.iter().enumerate() {
                let expected: f64 = col.iter().zip(l.data()).map(|(a, b)| a * b).sum();
                assert!((at.data()[i] - expected).abs() < 1e-12);
            }
        }
        // <A h, l> = <h, Aᵀ l> at 12×12 → 4×4
        let h = random_image(12, 12, 0.0, 255.0, &mut rng);
        let l = random_image(4, 4, 0.0, 255.0, &mut rng);
        let lhs = bicubic_downsample(&h, 3).unwrap().dot(&l);
        let rhs = h.dot(&bicubic_downsample_adjoint(&l, 3, (12, 12)).unwrap());
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs());
    }

    #[test]
    fn upscale_checker_matches_reference() {
        // Golden values from an independent per-pixel reference of
        // MATLAB-style bicubic interpolation (a = -0.5, symmetric boundary).
        let checker = Image::from_fn(4, 4, |x, y| if (x + y) % 2 == 0 { 255.0 } else { 0.0 });
        let up = bicubic_upscale(&checker, 2).unwrap();
        assert_eq!(up.dims(), (8, 8));
        let golden = UPSCALE_CHECKER_X2;
        for (a, b) in up.data().iter().zip(golden.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    const UPSCALE_CHECKER_X2: [f64; 64] = include!("../tests/golden/upscale_checker_x2.in");

    #[test]
    fn sisr_reaction_recomposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = random_image(12, 9, 0.0, 255.0, &mut rng);
        let f = random_image(4, 3, 0.0, 255.0, &mut rng);
        let r = reaction_sisr(&u, &f, 0.4, 3).unwrap();
        let mut expected =
            bicubic_downsample_adjoint(&bicubic_downsample(&u, 3).unwrap().sub(&f), 3, (12, 9))
                .unwrap();
        expected.scale(0.4);
        assert!(r.max_abs_diff(&expected) < 1e-12);
        let consistent = bicubic_downsample(&u, 3).unwrap();
        assert!(reaction_sisr(&u, &consistent, 0.4, 3).unwrap().data().iter().all(|v| v.abs() < 1e-12));
        assert!(reaction_sisr(&u, &f, 0.0, 3).unwrap().data().iter().all(|v| *v == 0.0));
        assert!(reaction_sisr(&u, &Image::zeros(3, 3), 1.0, 3).is_err());
    }

    #[test]
    fn block_dct_of_constant_block() {
        let c = Image::filled(8, 8, 10.0);
        let d = block_dct(&c).unwrap();
        assert!((d.get(0, 0) - 80.0).abs() < 1e-12);
        for i in 1..64 {
            assert!(d.data()[i].abs() < 1e-12);
        }
    }

    #[test]
    fn block_dct_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = random_image(16, 16, 0.0, 255.0, &mut rng);
        let c = block_dct(&u).unwrap();
        let back = block_idct(&c).unwrap();
        assert!(back.max_abs_diff(&u) < 1e-12 * 255.0);
        assert!((c.norm_sq().sqrt() - u.norm_sq().sqrt()).abs() < 1e-12 * u.norm_sq().sqrt());
        assert!(block_dct(&Image::zeros(12, 8)).is_err());
    }

    #[test]
    fn quality_fifty_is_the_base_table() {
        let t = quality_table(50).unwrap();
        // Independent evaluation of the IJG formula: scale = 200 - 2q = 100.
        for (a, b) in t.iter().zip(JPEG_LUMA_TABLE.iter()) {
            assert_eq!(*a, ((*b as u32 * 100 + 50) / 100) as f64);
            assert_eq!(*a, *b as f64);
        }
        let q10 = quality_table(10).unwrap();
        assert_eq!(q10[0], 80.0);
        assert_eq!(q10[63], 255.0);
        assert!(quality_table(0).is_err());
    }

    #[test]
    fn quant_box_bounds() {
        let levels = Image::zeros(8, 8);
        let b = quant_box_from_jpeg(&levels, 50, false).unwrap();
        assert_eq!((b.lower.get(0, 0), b.upper.get(0, 0)), (-8.0, 8.0));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let levels = Image::from_fn(16, 8, |_, _| rng.random_range(-5..=5) as f64);
        let b = quant_box_from_jpeg(&levels, 20, true).unwrap();
        let t = quality_table(20).unwrap();
        for y in 0..8 {
            for x in 0..16 {
                let center = levels.get(x, y) * t[y * 8 + x % 8];
                assert!(b.lower.get(x, y) < center && center < b.upper.get(x, y));
            }
        }
        assert!(quant_box_from_jpeg(&levels, 55, true).is_err());
        assert!(quant_box_from_jpeg(&levels, 55, false).is_ok());
    }

    fn random_box(w: usize, h: usize, quality: u32, rng: &mut ChaCha8Rng) -> (QuantBox, Image) {
        let levels = Image::from_fn(w, h, |_, _| rng.random_range(-3..=3) as f64);
        let b = quant_box_from_jpeg(&levels, quality, false).unwrap();
        let table = quality_table(quality).unwrap();
        let coeffs = Image::from_fn(w, h, |x, y| levels.get(x, y) * table[(y % 8) * 8 + x % 8]);
        (b, block_idct(&coeffs).unwrap())
    }

    #[test]
    fn prox_fixed_point_idempotence_and_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (qbox, decoded) = random_box(16, 16, 10, &mut rng);
        assert!(prox_deblock(&decoded, &qbox).unwrap().max_abs_diff(&decoded) < 1e-10);
        let u = random_image(16, 16, 0.0, 255.0, &mut rng);
        let p = prox_deblock(&u, &qbox).unwrap();
        let pp = prox_deblock(&p, &qbox).unwrap();
        assert!(p.max_abs_diff(&pp) < 1e-10);
        assert!(qbox.contains(&p, 1e-9).unwrap());

        // Push one coefficient to d + 0.7 q_k and check it lands on d + 0.5 q_k.
        let table = quality_table(10).unwrap();
        let mut c = block_dct(&decoded).unwrap();
        let (x, y) = (3, 2);
        let q = table[y * 8 + x];
        let d = c.get(x, y) / q;
        c.set(x, y, (d + 0.7) * q);
        let pushed = block_idct(&c).unwrap();
        let fixed = block_dct(&prox_deblock(&pushed, &qbox).unwrap()).unwrap();
        assert!((fixed.get(x, y) - (d + 0.5) * q).abs() < 1e-9);
    }

    #[test]
    fn prox_is_nonexpansive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (qbox, _) = random_box(16, 8, 20, &mut rng);
        for _ in 0..20 {
            let u = random_image(16, 8, 0.0, 255.0, &mut rng);
            let v = random_image(16, 8, 0.0, 255.0, &mut rng);
            let pu = prox_deblock(&u, &qbox).unwrap();
            let pv = prox_deblock(&v, &qbox).unwrap();
            assert!(pu.sub(&pv).norm_sq() <= u.sub(&v).norm_sq() * (1.0 + 1e-12));
        }
    }

    #[test]
    fn prox_adjoint_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (qbox, _) = random_box(8, 16, 30, &mut rng);
        let u = random_image(8, 16, 0.0, 255.0, &mut rng);
        let (_, mask) = prox_deblock_with_mask(&u, &qbox).unwrap();
        let a = random_image(8, 16, -1.0, 1.0, &mut rng);
        let b = random_image(8, 16, -1.0, 1.0, &mut rng);
        let lhs = prox_deblock_adjoint(&a, &mask).unwrap().dot(&b);
        let rhs = a.dot(&prox_deblock_adjoint(&b, &mask).unwrap());
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn problem_kind_parsing_and_validation() {
        assert_eq!(
            ProblemKind::from_name("sisr", 3.0).unwrap(),
            ProblemKind::SuperResolve { factor: 3 }
        );
        assert!(ProblemKind::from_name("sisr", 2.5).is_err());
        assert!(ProblemKind::from_name("deblur", 1.0).is_err());
        assert!(ProblemKind::Denoise { sigma: 25.0 }.validate(true).is_ok());
        assert!(ProblemKind::Denoise { sigma: 30.0 }.validate(true).is_err());
        assert!(ProblemKind::Denoise { sigma: 30.0 }.validate(false).is_ok());
        assert!(ProblemKind::SuperResolve { factor: 5 }.validate(true).is_err());
        assert!(ProblemKind::Deblock { quality: 0 }.validate(false).is_err());
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn prox_is_an_idempotent_projection(seed in any::<u64>(), q in 1u32..=100) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let levels = Image::from_fn(16, 8, |_, _| rng.random_range(-20i32..20) as f64);
                let qbox = quant_box_from_jpeg(&levels, q, false).unwrap();
                let v = random_image(16, 8, -500.0, 500.0, &mut rng);
                let p = prox_deblock(&v, &qbox).unwrap();
                prop_assert!(qbox.contains(&p, 1e-9).unwrap());
                prop_assert!(prox_deblock(&p, &qbox).unwrap().max_abs_diff(&p) < 1e-10);
            }

            #[test]
            fn block_dct_round_trips(seed in any::<u64>(), bw in 1usize..4, bh in 1usize..4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let u = random_image(8 * bw, 8 * bh, 0.0, 255.0, &mut rng);
                let c = block_dct(&u).unwrap();
                prop_assert!(block_idct(&c).unwrap().max_abs_diff(&u) < 1e-10);
                prop_assert!((c.norm_sq() - u.norm_sq()).abs() <= 1e-10 * u.norm_sq());
            }

            #[test]
            fn resampler_transpose_is_the_adjoint(
                seed in any::<u64>(),
                iw in 1usize..20, ih in 1usize..20, ow in 1usize..20, oh in 1usize..20,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let op = BicubicResampler::new((iw, ih), (ow, oh));
                let x = random_image(iw, ih, -1.0, 1.0, &mut rng);
                let y = random_image(ow, oh, -1.0, 1.0, &mut rng);
                let lhs = op.apply(&x).unwrap().dot(&y);
                let rhs = x.dot(&op.apply_transpose(&y).unwrap());
                prop_assert!((lhs - rhs).abs() < 1e-10);
            }
        }
    }
}
