//! Grayscale image container and the boundary-aware convolution machinery.
//!
//! Convolution follows the true-convolution convention
//! `out(p) = Σ_q k(q) · img(p − q)` with the kernel centred on its middle tap.
//! All routines reduce to a single primitive, [`correlate_valid`], applied to
//! a padded source, so the forward map and its exact adjoint share one inner
//! loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TnrdError};

/// Sentinel reported by [`psnr`] when both images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Row-major grayscale image with real-valued samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(TnrdError::invalid(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(TnrdError::invalid(format!(
                "image data has {} samples, expected {}x{}={}",
                data.len(),
                width,
                height,
                width * height
            )));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Image {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    /// Builds an image from `f(x, y)`.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Image {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn row(&self, y: usize) -> &[f64] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn check_same_dims(&self, other: &Image, what: &str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(TnrdError::dims(format!(
                "{what}: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Image) {
        debug_assert!(self.same_dims(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn sub(&self, other: &Image) -> Image {
        debug_assert!(self.same_dims(other));
        Image {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn dot(&self, other: &Image) -> f64 {
        debug_assert!(self.same_dims(other));
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        debug_assert!(self.same_dims(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn clamp(&mut self, lo: f64, hi: f64) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Copies the rectangle `[x0, x0+w) × [y0, y0+h)`.
    pub fn sub_image(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image> {
        if w == 0 || h == 0 || x0 + w > self.width || y0 + h > self.height {
            return Err(TnrdError::invalid(format!(
                "region {w}x{h}+{x0}+{y0} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(Image {
            width: w,
            height: h,
            data,
        })
    }
}

/// Square, odd-sized convolution kernel stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    size: usize,
    taps: Vec<f64>,
}

impl Kernel {
    pub fn new(size: usize, taps: Vec<f64>) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(TnrdError::invalid(format!(
                "kernel size must be odd and positive, got {size}"
            )));
        }
        if taps.len() != size * size {
            return Err(TnrdError::invalid(format!(
                "kernel of size {size} needs {} taps, got {}",
                size * size,
                taps.len()
            )));
        }
        Ok(Kernel { size, taps })
    }

    /// Centred unit impulse.
    pub fn delta(size: usize) -> Result<Self> {
        let mut taps = vec![0.0; size * size];
        if let Some(mid) = taps.get_mut((size * size) / 2) {
            *mid = 1.0;
        }
        Kernel::new(size, taps)
    }

    #[inline]
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn radius(&self) -> usize {
        self.size / 2
    }

    #[inline]
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    /// Kernel rotated by 180 degrees (taps reversed in both axes).
    pub fn rotate180(&self) -> Kernel {
        let mut taps = self.taps.clone();
        taps.reverse();
        Kernel {
            size: self.size,
            taps,
        }
    }

    pub fn norm(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum::<f64>().sqrt()
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }
}

/// How samples outside the image support are defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    /// Half-sample mirror: the edge pixel is duplicated (`[.. c b a | a b c ..]`).
    #[default]
    Symmetric,
    Zero,
}

/// Maps any integer index onto `[0, n)` by half-sample reflection.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let t = i.rem_euclid(period);
    if t < n as isize {
        t as usize
    } else {
        (period - 1 - t) as usize
    }
}

/// Extends `img` by `border` pixels on every side.
pub fn pad(img: &Image, border: usize, boundary: Boundary) -> Image {
    if border == 0 {
        return img.clone();
    }
    let (w, h) = img.dims();
    let pw = w + 2 * border;
    let ph = h + 2 * border;
    let mut out = vec![0.0; pw * ph];
    let b = border as isize;
    match boundary {
        Boundary::Symmetric => {
            let cols: Vec<usize> = (0..pw).map(|x| reflect(x as isize - b, w)).collect();
            for y in 0..ph {
                let sy = reflect(y as isize - b, h);
                let src = img.row(sy);
                let dst = &mut out[y * pw..(y + 1) * pw];
                for (d, &sx) in dst.iter_mut().zip(&cols) {
                    *d = src[sx];
                }
            }
        }
        Boundary::Zero => {
            for y in 0..h {
                let dst = &mut out[(y + border) * pw + border..(y + border) * pw + border + w];
                dst.copy_from_slice(img.row(y));
            }
        }
    }
    Image {
        width: pw,
        height: ph,
        data: out,
    }
}

/// Symmetric (half-sample) padding.
pub fn pad_symmetric(img: &Image, border: usize) -> Image {
    pad(img, border, Boundary::Symmetric)
}

/// Removes `border` pixels from every side.
pub fn crop(img: &Image, border: usize) -> Result<Image> {
    let (w, h) = img.dims();
    if 2 * border >= w.min(h) {
        return Err(TnrdError::invalid(format!(
            "cannot crop {border} pixels from a {w}x{h} image"
        )));
    }
    img.sub_image(border, border, w - 2 * border, h - 2 * border)
}

/// Places `img` in the centre of a zero canvas enlarged by `border` (adjoint of [`crop`]).
pub fn embed(img: &Image, border: usize) -> Image {
    pad(img, border, Boundary::Zero)
}

/// Adjoint of [`pad`]: folds an extended image back onto the inner support.
pub fn unpad(ext: &Image, border: usize, boundary: Boundary) -> Result<Image> {
    if border == 0 {
        return Ok(ext.clone());
    }
    let (pw, ph) = ext.dims();
    if pw <= 2 * border || ph <= 2 * border {
        return Err(TnrdError::invalid(format!(
            "cannot fold a {border}-pixel border from a {pw}x{ph} image"
        )));
    }
    let w = pw - 2 * border;
    let h = ph - 2 * border;
    match boundary {
        Boundary::Zero => crop(ext, border),
        Boundary::Symmetric => {
            let b = border as isize;
            let cols: Vec<usize> = (0..pw).map(|x| reflect(x as isize - b, w)).collect();
            let mut out = vec![0.0; w * h];
            for y in 0..ph {
                let ty = reflect(y as isize - b, h);
                let dst = &mut out[ty * w..(ty + 1) * w];
                for (x, &tx) in cols.iter().enumerate() {
                    dst[tx] += ext.data[y * pw + x];
                }
            }
            Image::new(w, h, out)
        }
    }
}

/// Valid-mode correlation: `out(t) = Σ_a kernel(a) · src(t + a)`.
///
/// `kernel` is `kw × kh` row-major; the output is `(sw − kw + 1) × (sh − kh + 1)`.
pub fn correlate_valid(src: &Image, kernel: &[f64], kw: usize, kh: usize) -> Result<Image> {
    let (sw, sh) = src.dims();
    if kw == 0 || kh == 0 || kernel.len() != kw * kh {
        return Err(TnrdError::invalid("malformed correlation kernel"));
    }
    if kw > sw || kh > sh {
        return Err(TnrdError::invalid(format!(
            "kernel {kw}x{kh} larger than source {sw}x{sh}"
        )));
    }
    let ow = sw - kw + 1;
    let oh = sh - kh + 1;
    let mut out = vec![0.0; ow * oh];
    if ow >= kw {
        // Image-sized output: stream one tap at a time across whole rows.
        for ky in 0..kh {
            for kx in 0..kw {
                let wgt = kernel[ky * kw + kx];
                if wgt == 0.0 {
                    continue;
                }
                for y in 0..oh {
                    let s = &src.data[(y + ky) * sw + kx..(y + ky) * sw + kx + ow];
                    let d = &mut out[y * ow..(y + 1) * ow];
                    for (o, v) in d.iter_mut().zip(s) {
                        *o += wgt * v;
                    }
                }
            }
        }
    } else {
        // Tap-sized output (kernel-gradient case): one dot product per output.
        for ty in 0..oh {
            for tx in 0..ow {
                let mut acc = 0.0;
                for ky in 0..kh {
                    let s = &src.data[(ty + ky) * sw + tx..(ty + ky) * sw + tx + kw];
                    let k = &kernel[ky * kw..(ky + 1) * kw];
                    acc += s.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
                }
                out[ty * ow + tx] = acc;
            }
        }
    }
    Image::new(ow, oh, out)
}

/// Same-size 2D convolution `out(p) = Σ_q k(q) img(p − q)`.
pub fn convolve(img: &Image, k: &Kernel, boundary: Boundary) -> Result<Image> {
    let r = k.radius();
    let padded = pad(img, r, boundary);
    let flipped = k.rotate180();
    correlate_valid(&padded, flipped.taps(), k.size(), k.size())
}

/// Exact adjoint of `convolve(·, k, boundary)`.
///
/// Under zero boundary this coincides with `convolve(·, rotate180(k), Zero)`;
/// under symmetric boundary the reflected contributions are folded back.
pub fn convolve_adjoint(img: &Image, k: &Kernel, boundary: Boundary) -> Result<Image> {
    let r = k.radius();
    let zp = pad(img, 2 * r, Boundary::Zero);
    let ext = correlate_valid(&zp, k.taps(), k.size(), k.size())?;
    unpad(&ext, r, boundary)
}

/// Gradient of `⟨g, convolve(x, k, boundary)⟩` with respect to the taps of `k`.
pub fn convolve_kernel_gradient(x: &Image, g: &Image, size: usize, boundary: Boundary) -> Result<Kernel> {
    x.check_same_dims(g, "kernel gradient")?;
    let r = size / 2;
    let padded = pad(x, r, boundary);
    let flipped = correlate_valid(&padded, g.data(), g.width(), g.height())?;
    let mut taps = flipped.into_data();
    taps.reverse();
    Kernel::new(size, taps)
}

/// Peak signal-to-noise ratio in dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// Set when the images are identical and `db` holds [`PSNR_CAP_DB`].
    pub exact: bool,
}

pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<Psnr> {
    a.check_same_dims(b, "psnr")?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr {
            db: PSNR_CAP_DB,
            exact: true,
        });
    }
    Ok(Psnr {
        db: (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB),
        exact: false,
    })
}

/// Adds i.i.d. `N(0, sigma²)` noise; deterministic for a given seed, no clamping.
pub fn add_gaussian_noise(img: &Image, sigma: f64, seed: u64) -> Result<Image> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(TnrdError::invalid(format!(
            "noise level must be finite and non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for v in out.data.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v += sigma * n;
    }
    Ok(out)
}

/// Mean of the horizontal and vertical lag-1 autocorrelation coefficients.
pub fn lag1_autocorrelation(img: &Image) -> f64 {
    let mean = img.mean();
    let var: f64 = img.data.iter().map(|v| (v - mean) * (v - mean)).sum();
    if var == 0.0 {
        return 0.0;
    }
    let (w, h) = img.dims();
    let mut horiz = 0.0;
    let mut vert = 0.0;
    for y in 0..h {
        for x in 0..w {
            let c = img.get(x, y) - mean;
            if x + 1 < w {
                horiz += c * (img.get(x + 1, y) - mean);
            }
            if y + 1 < h {
                vert += c * (img.get(x, y + 1) - mean);
            }
        }
    }
    let n = (w * h) as f64;
    let hn = (h * (w - 1)).max(1) as f64;
    let vn = (w * (h - 1)).max(1) as f64;
    0.5 * (horiz / hn + vert / vn) / (var / n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Image {
        Image::from_fn(w, h, |_, _| rng.random_range(-1.0..1.0))
    }

    fn random_kernel(m: usize, rng: &mut ChaCha8Rng) -> Kernel {
        Kernel::new(m, (0..m * m).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct double-loop `Σ_q k(q) img(reflect(p − q))`.
    fn brute_convolve(img: &Image, k: &Kernel, boundary: Boundary) -> Image {
        let (w, h) = img.dims();
        let r = k.radius() as isize;
        let m = k.size();
        Image::from_fn(w, h, |x, y| {
            let mut acc = 0.0;
            for ky in 0..m {
                for kx in 0..m {
                    let qy = ky as isize - r;
                    let qx = kx as isize - r;
                    let sx = x as isize - qx;
                    let sy = y as isize - qy;
                    let v = match boundary {
                        Boundary::Symmetric => img.get(reflect(sx, w), reflect(sy, h)),
                        Boundary::Zero => {
                            if sx < 0 || sy < 0 || sx >= w as isize || sy >= h as isize {
                                0.0
                            } else {
                                img.get(sx as usize, sy as usize)
                            }
                        }
                    };
                    acc += k.taps()[ky * m + kx] * v;
                }
            }
            acc
        })
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(7, 5, &mut rng);
        for b in [Boundary::Symmetric, Boundary::Zero] {
            let out = convolve(&img, &Kernel::delta(5).unwrap(), b).unwrap();
            assert_eq!(out, img);
        }
    }

    #[test]
    fn zero_mean_kernel_annihilates_constants() {
        let img = Image::filled(6, 9, 42.0);
        let k = Kernel::new(3, vec![1.0, -2.0, 0.5, 0.25, 0.0, -0.75, 1.0, 0.0, 0.0]).unwrap();
        assert!(k.sum().abs() < 1e-15);
        let out = convolve(&img, &k, Boundary::Symmetric).unwrap();
        assert!(out.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn ramp_image_matches_direct_summation() {
        let img = Image::from_fn(4, 4, |x, y| (x + 4 * y) as f64);
        let k = Kernel::new(3, (1..=9).map(f64::from).collect()).unwrap();
        let out = convolve(&img, &k, Boundary::Symmetric).unwrap();
        // Frozen from an independent direct summation (numpy, cross-checked with scipy.ndimage reflect mode).
        let expected = [
            36.0, 63.0, 108.0, 141.0, 120.0, 147.0, 192.0, 225.0, 300.0, 327.0, 372.0, 405.0,
            456.0, 483.0, 528.0, 561.0,
        ];
        assert_eq!(brute_convolve(&img, &k, Boundary::Symmetric).data(), &expected);
        for (a, b) in out.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn convolve_matches_brute_force_on_odd_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(w, h, m) in &[(1, 1, 3), (2, 3, 5), (9, 4, 7), (5, 5, 9), (13, 11, 3)] {
            let img = random_image(w, h, &mut rng);
            let k = random_kernel(m, &mut rng);
            for b in [Boundary::Symmetric, Boundary::Zero] {
                let fast = convolve(&img, &k, b).unwrap();
                let slow = brute_convolve(&img, &k, b);
                assert!(fast.max_abs_diff(&slow) < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_identity_holds_for_both_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let w = rng.random_range(1..=16);
            let h = rng.random_range(1..=16);
            let m = [3, 5, 7][rng.random_range(0..3)];
            let u = random_image(w, h, &mut rng);
            let v = random_image(w, h, &mut rng);
            let k = random_kernel(m, &mut rng);
            for b in [Boundary::Symmetric, Boundary::Zero] {
                let lhs = convolve(&u, &k, b).unwrap().dot(&v);
                let rhs = u.dot(&convolve_adjoint(&v, &k, b).unwrap());
                assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
            }
            let zero_adj = convolve(&v, &k.rotate180(), Boundary::Zero).unwrap();
            let exact = convolve_adjoint(&v, &k, Boundary::Zero).unwrap();
            assert!(zero_adj.max_abs_diff(&exact) < 1e-12);
        }
    }

    #[test]
    fn kernel_gradient_matches_directional_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_image(9, 7, &mut rng);
        let g = random_image(9, 7, &mut rng);
        let dk = convolve_kernel_gradient(&x, &g, 5, Boundary::Symmetric).unwrap();
        // The map k -> <g, x*k> is linear, so the gradient is read off basis kernels.
        for i in 0..25 {
            let mut taps = vec![0.0; 25];
            taps[i] = 1.0;
            let e = Kernel::new(5, taps).unwrap();
            let val = convolve(&x, &e, Boundary::Symmetric).unwrap().dot(&g);
            assert!((val - dk.taps()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn rotate180_reverses_taps() {
        let k = Kernel::new(3, (0..9).map(f64::from).collect()).unwrap();
        let r = k.rotate180();
        assert_eq!(r.taps(), &[8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0, 0.0]);
        assert_eq!(r.rotate180(), k);
        let d = Kernel::delta(5).unwrap();
        assert_eq!(d.rotate180(), d);
        let sym = Kernel::new(3, vec![1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0]).unwrap();
        assert_eq!(sym.rotate180(), sym);
    }

    #[test]
    fn pad_row_uses_half_sample_reflection() {
        let row = Image::new(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let p = pad_symmetric(&row, 2);
        assert_eq!(p.row(2), &[2.0, 1.0, 1.0, 2.0, 3.0, 3.0, 2.0]);
        assert_eq!(pad_symmetric(&row, 0), row);
    }

    #[test]
    fn crop_rules() {
        let img = Image::from_fn(5, 5, |x, y| (x * 10 + y) as f64);
        let c = crop(&img, 2).unwrap();
        assert_eq!(c.dims(), (1, 1));
        assert_eq!(c.get(0, 0), 22.0);
        assert_eq!(crop(&img, 0).unwrap(), img);
        assert!(matches!(crop(&img, 3), Err(TnrdError::InvalidArgument(_))));
    }

    #[test]
    fn unpad_is_adjoint_of_pad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for border in [1, 3, 6] {
            let u = random_image(4, 3, &mut rng);
            let v = random_image(4 + 2 * border, 3 + 2 * border, &mut rng);
            for b in [Boundary::Symmetric, Boundary::Zero] {
                let lhs = pad(&u, border, b).dot(&v);
                let rhs = u.dot(&unpad(&v, border, b).unwrap());
                assert!((lhs - rhs).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn invalid_shapes_are_rejected() {
        assert!(Image::new(0, 3, vec![]).is_err());
        assert!(Image::new(2, 2, vec![0.0; 3]).is_err());
        assert!(Kernel::new(4, vec![0.0; 16]).is_err());
        assert!(Kernel::new(3, vec![0.0; 8]).is_err());
    }

    #[test]
    fn psnr_closed_forms() {
        let a = Image::from_fn(8, 8, |x, y| (x * 8 + y) as f64);
        let b = a.map(|v| v + 16.0);
        let p = psnr(&a, &b, 255.0).unwrap();
        assert!((p.db - 20.0 * (255.0f64 / 16.0).log10()).abs() < 1e-12);
        assert!((p.db - 24.0484).abs() < 1e-4);
        assert!(!p.exact);
        let same = psnr(&a, &a, 255.0).unwrap();
        assert_eq!(same, Psnr { db: PSNR_CAP_DB, exact: true });
        assert!(psnr(&a, &Image::zeros(4, 4), 255.0).is_err());
    }

    #[test]
    fn psnr_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = Image::from_fn(17, 13, |_, _| rng.random_range(0.0..255.0));
        let b = Image::from_fn(17, 13, |_, _| rng.random_range(0.0..255.0));
        let mut sum = 0.0;
        for y in 0..13 {
            for x in 0..17 {
                let d = a.get(x, y) - b.get(x, y);
                sum += d * d;
            }
        }
        let mse = sum / (17.0 * 13.0);
        let oracle = 10.0 * (255.0 * 255.0 / mse).log10();
        let p = psnr(&a, &b, 255.0).unwrap().db;
        assert!((p - oracle).abs() < 1e-10);
        assert_eq!(p, psnr(&b, &a, 255.0).unwrap().db);
    }

    #[test]
    fn noise_contract() {
        let img = Image::filled(256, 256, 100.0);
        assert_eq!(add_gaussian_noise(&img, 0.0, 9).unwrap(), img);
        let a = add_gaussian_noise(&img, 25.0, 9).unwrap();
        let b = add_gaussian_noise(&img, 25.0, 9).unwrap();
        assert_eq!(a, b);
        let mean = a.mean();
        let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (a.len() - 1) as f64;
        assert!((var.sqrt() - 25.0).abs() < 0.5, "std {}", var.sqrt());
        assert!(add_gaussian_noise(&img, -1.0, 0).is_err());
        assert!(add_gaussian_noise(&img, f64::NAN, 0).is_err());
    }

    #[test]
    fn white_noise_has_small_autocorrelation() {
        let noise = add_gaussian_noise(&Image::zeros(64, 64), 1.0, 4).unwrap();
        assert!(lag1_autocorrelation(&noise).abs() < 0.05);
        let ramp = Image::from_fn(64, 64, |x, _| x as f64);
        assert!(lag1_autocorrelation(&ramp) > 0.45);
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        fn image_strategy() -> impl Strategy<Value = Image> {
            (1usize..10, 1usize..10).prop_flat_map(|(w, h)| {
                proptest::collection::vec(-100.0f64..100.0, w * h)
                    .prop_map(move |d| Image::new(w, h, d).unwrap())
            })
        }

        proptest! {
            #[test]
            fn pad_then_crop_is_identity(img in image_strategy(), border in 0usize..12) {
                prop_assert_eq!(crop(&pad_symmetric(&img, border), border).unwrap(), img);
            }

            #[test]
            fn convolution_is_linear(
                seed in any::<u64>(),
                alpha in -3.0f64..3.0,
                beta in -3.0f64..3.0,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let u = random_image(9, 6, &mut rng);
                let v = random_image(9, 6, &mut rng);
                let k = random_kernel(5, &mut rng);
                let mut comb = u.clone();
                comb.scale(alpha);
                comb.axpy(beta, &v);
                let lhs = convolve(&comb, &k, Boundary::Symmetric).unwrap();
                let mut rhs = convolve(&u, &k, Boundary::Symmetric).unwrap();
                rhs.scale(alpha);
                rhs.axpy(beta, &convolve(&v, &k, Boundary::Symmetric).unwrap());
                prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
            }
        }
    }
}
