//! Bilinear sampling under a transformation flow and multi-source warped
//! image composition.

use ndarray::{Array2, Array3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::TransformFlow;
use crate::raster::norm_to_pix;

/// Dense `C x H x W` feature map (channel-first, f32).
pub type FeatureMap = Array3<f32>;

/// Bilinear interpolation of `src` at the flow target of each valid pixel,
/// zero-padded outside `[-1, 1]`. Invalid pixels come out as 0.
pub fn bilinear_sample(src: &FeatureMap, tf: &TransformFlow) -> Result<FeatureMap> {
    let (c, h, w) = src.dim();
    if (tf.height(), tf.width()) != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "flow is {}x{}, features {h}x{w}",
            tf.height(),
            tf.width()
        )));
    }
    let mut out = Array3::zeros((c, h, w));
    let rows: Vec<Vec<f32>> = (0..h)
        .into_par_iter()
        .map(|i| {
            let mut row = vec![0.0f32; c * w];
            for j in 0..w {
                if !tf.valid[[i, j]] {
                    continue;
                }
                let px = norm_to_pix(tf.flow[[i, j, 0]], w);
                let py = norm_to_pix(tf.flow[[i, j, 1]], h);
                let x0 = px.floor();
                let y0 = py.floor();
                let fx = px - x0;
                let fy = py - y0;
                let x0 = x0 as i64;
                let y0 = y0 as i64;
                let taps = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x0 + 1, (1.0 - fy) * fx),
                    (y0 + 1, x0, fy * (1.0 - fx)),
                    (y0 + 1, x0 + 1, fy * fx),
                ];
                for ch in 0..c {
                    let mut acc = 0.0f64;
                    for &(yy, xx, wt) in &taps {
                        if wt == 0.0 {
                            continue;
                        }
                        if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                            acc += wt * src[[ch, yy as usize, xx as usize]] as f64;
                        }
                    }
                    row[ch * w + j] = acc as f32;
                }
            }
            row
        })
        .collect();
    for (i, row) in rows.into_iter().enumerate() {
        for ch in 0..c {
            for j in 0..w {
                out[[ch, i, j]] = row[ch * w + j];
            }
        }
    }
    Ok(out)
}

/// Warps every source under its flow and averages them per pixel over the
/// sources whose flow is valid there. Returns the composite and the
/// per-pixel valid-source count.
pub fn compose_syn(
    sources: &[FeatureMap],
    flows: &[TransformFlow],
) -> Result<(FeatureMap, Array2<u32>)> {
    if sources.is_empty() {
        return Err(Error::ShapeMismatch("empty source list".into()));
    }
    if sources.len() != flows.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} sources but {} flows",
            sources.len(),
            flows.len()
        )));
    }
    let (c, h, w) = sources[0].dim();
    for s in sources.iter().skip(1) {
        if s.dim() != (c, h, w) {
            return Err(Error::ShapeMismatch("source dimensions differ".into()));
        }
    }
    let mut acc: Array3<f64> = Array3::zeros((c, h, w));
    let mut count = Array2::zeros((h, w));
    for (src, tf) in sources.iter().zip(flows) {
        let warped = bilinear_sample(src, tf)?;
        for i in 0..h {
            for j in 0..w {
                if tf.valid[[i, j]] {
                    count[[i, j]] += 1;
                    for ch in 0..c {
                        acc[[ch, i, j]] += warped[[ch, i, j]] as f64;
                    }
                }
            }
        }
    }
    let mut out = Array3::zeros((c, h, w));
    for i in 0..h {
        for j in 0..w {
            let n = count[[i, j]];
            if n > 0 {
                for ch in 0..c {
                    out[[ch, i, j]] = (acc[[ch, i, j]] / n as f64) as f32;
                }
            }
        }
    }
    Ok((out, count))
}
