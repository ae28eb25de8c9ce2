//! Output composition, the computable regularization losses, and the
//! PSNR/SSIM image-similarity metrics.
//!
//! All pixel losses use mean normalization so values are independent of
//! resolution. PSNR takes peak 1.0 on normalized images.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Soft foreground mask with entries in `[0, 1]`, `H x W`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    values: Array2<f32>,
}

impl AttentionMap {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Invariant(
                "attention map entries must lie in [0, 1]".into(),
            ));
        }
        Ok(AttentionMap { values })
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn from_silhouette(sil: &Array2<bool>) -> Self {
        AttentionMap {
            values: sil.map(|&b| if b { 1.0 } else { 0.0 }),
        }
    }
}

/// Loss weights; defaults follow the training recipe (10.0, 5.0, 2.5).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_f: f64,
    pub lambda_a: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_p: 10.0,
            lambda_f: 5.0,
            lambda_a: 2.5,
        }
    }
}

fn check_dims(a: &Array3<f32>, b: &Array3<f32>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "image shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Per-pixel convex blend: `out = P ⊙ A + bg ⊙ (1 - A)`, per channel.
/// Images are `H x W x C` in `[0, 1]`.
pub fn compose_output(
    color: &Array3<f32>,
    attention: &AttentionMap,
    bg: &Array3<f32>,
) -> Result<Array3<f32>> {
    check_dims(color, bg)?;
    let (h, w, c) = color.dim();
    if attention.values.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "attention map is {:?}, image {h}x{w}",
            attention.values.dim()
        )));
    }
    let mut out = Array3::zeros((h, w, c));
    for i in 0..h {
        for j in 0..w {
            let a = attention.values[[i, j]];
            for k in 0..c {
                out[[i, j, k]] = color[[i, j, k]] * a + bg[[i, j, k]] * (1.0 - a);
            }
        }
    }
    Ok(out)
}

/// Total-variation regularizer: mean of the squared vertical and horizontal
/// forward differences over the `(H-1)·W + H·(W-1)` valid offsets.
pub fn tv(attention: &AttentionMap) -> Result<f64> {
    let (h, w) = attention.values.dim();
    if h < 2 || w < 2 {
        return Err(Error::ShapeMismatch(format!(
            "tv needs at least a 2x2 map, got {h}x{w}"
        )));
    }
    let a = &attention.values;
    let mut sum = 0.0f64;
    for i in 1..h {
        for j in 0..w {
            let d = a[[i, j]] as f64 - a[[i - 1, j]] as f64;
            sum += d * d;
        }
    }
    for i in 0..h {
        for j in 1..w {
            let d = a[[i, j]] as f64 - a[[i, j - 1]] as f64;
            sum += d * d;
        }
    }
    let count = ((h - 1) * w + h * (w - 1)) as f64;
    Ok(sum / count)
}

/// Attention regularization: mean over the supplied map/silhouette pairs of
/// `MSE(A, S) + TV(A)`.
pub fn attention_reg(maps: &[AttentionMap], silhouettes: &[Array2<bool>]) -> Result<f64> {
    if maps.len() != silhouettes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} attention maps but {} silhouettes",
            maps.len(),
            silhouettes.len()
        )));
    }
    if maps.is_empty() {
        return Err(Error::ShapeMismatch("no attention maps given".into()));
    }
    let mut total = 0.0;
    for (a, s) in maps.iter().zip(silhouettes) {
        if a.values.dim() != s.dim() {
            return Err(Error::ShapeMismatch(format!(
                "attention map {:?} does not match silhouette {:?}",
                a.values.dim(),
                s.dim()
            )));
        }
        let n = (s.nrows() * s.ncols()) as f64;
        let mse: f64 = a
            .values
            .iter()
            .zip(s.iter())
            .map(|(&av, &sv)| {
                let d = av as f64 - if sv { 1.0 } else { 0.0 };
                d * d
            })
            .sum::<f64>()
            / n;
        total += mse + tv(a)?;
    }
    Ok(total / maps.len() as f64)
}

/// Mean absolute difference.
pub fn pixel_l1(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.len() as f64;
    Ok(a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB with peak 1.0; +inf for identical images.
pub fn psnr(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.len() as f64;
    let mse: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn to_gray(img: &Array3<f32>) -> Result<Array2<f64>> {
    let (h, w, c) = img.dim();
    match c {
        1 => Ok(Array2::from_shape_fn((h, w), |(i, j)| img[[i, j, 0]] as f64)),
        3 => Ok(Array2::from_shape_fn((h, w), |(i, j)| {
            0.299 * img[[i, j, 0]] as f64
                + 0.587 * img[[i, j, 1]] as f64
                + 0.114 * img[[i, j, 2]] as f64
        })),
        _ => Err(Error::ShapeMismatch(format!(
            "ssim expects 1 or 3 channels, got {c}"
        ))),
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut total = 0.0;
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let d2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[i * SSIM_WINDOW + j] = v;
            total += v;
        }
    }
    for v in w.iter_mut() {
        *v /= total;
    }
    w
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), valid windows only,
/// on the luma of `[0, 1]` images.
pub fn ssim(a: &Array3<f32>, b: &Array3<f32>) -> Result<f64> {
    check_dims(a, b)?;
    let (h, w, _) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ShapeMismatch(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let ga = to_gray(a)?;
    let gb = to_gray(b)?;
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for i0 in 0..=h - SSIM_WINDOW {
        for j0 in 0..=w - SSIM_WINDOW {
            let mut mx = 0.0;
            let mut my = 0.0;
            let mut sxx = 0.0;
            let mut syy = 0.0;
            let mut sxy = 0.0;
            for di in 0..SSIM_WINDOW {
                for dj in 0..SSIM_WINDOW {
                    let wt = win[di * SSIM_WINDOW + dj];
                    let x = ga[[i0 + di, j0 + dj]];
                    let y = gb[[i0 + di, j0 + dj]];
                    mx += wt * x;
                    my += wt * y;
                    sxx += wt * x * x;
                    syy += wt * y * y;
                    sxy += wt * x * y;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            let s = ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
