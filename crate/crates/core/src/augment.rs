//! Training-time augmentation: clip-consistent random resized crop on frames,
//! and Mixup / CutMix on batches of composed super images.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SitarError};
use crate::frame::FrameSequence;
use crate::superimage::SuperImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropParams {
    /// Range of the crop area as a fraction of the frame area.
    pub scale: (f64, f64),
    /// Range of the crop aspect ratio (width / height), sampled log-uniformly.
    pub ratio: (f64, f64),
    /// Probability of a horizontal flip, shared by every frame of the clip.
    pub hflip_prob: f64,
}

impl Default for CropParams {
    fn default() -> Self {
        CropParams {
            scale: (0.6, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            hflip_prob: 0.0,
        }
    }
}

/// Pixel rectangle `(x, y, w, h)` in source coordinates.
pub type CropRect = (usize, usize, usize, usize);

/// Draws one crop rectangle for a `width x height` frame. Draws that give an
/// empty or oversized box are retried; after ten failures the whole frame is
/// used.
pub fn sample_crop_rect<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    params: &CropParams,
    rng: &mut R,
) -> CropRect {
    let area = (width * height) as f64;
    let (log_lo, log_hi) = (params.ratio.0.ln(), params.ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, params.scale.0, params.scale.1);
        let aspect = uniform(rng, log_lo, log_hi).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w >= 1 && h >= 1 && w <= width && h <= height {
            let x = rng.gen_range(0..=width - w);
            let y = rng.gen_range(0..=height - h);
            return (x, y, w, h);
        }
    }
    (0, 0, width, height)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Crops every frame of the clip with one shared rectangle and resizes it back
/// to the original frame size.
pub fn random_resized_crop_clip<R: Rng + ?Sized>(
    clip: &FrameSequence,
    params: &CropParams,
    rng: &mut R,
) -> Result<FrameSequence> {
    let first = clip
        .frames
        .first()
        .ok_or_else(|| SitarError::Argument("cannot crop an empty clip".into()))?;
    let (w, h) = (first.width, first.height);
    let (x, y, cw, ch) = sample_crop_rect(w, h, params, rng);
    let flip = params.hflip_prob > 0.0 && rng.gen_bool(params.hflip_prob.min(1.0));
    let frames = clip
        .frames
        .iter()
        .map(|f| {
            let mut out = f.resize_region(x as f32, y as f32, cw as f32, ch as f32, w, h);
            if flip {
                for row in out.data.chunks_mut(w * 3) {
                    for xx in 0..w / 2 {
                        for c in 0..3 {
                            row.swap(xx * 3 + c, (w - 1 - xx) * 3 + c);
                        }
                    }
                }
            }
            out
        })
        .collect();
    Ok(FrameSequence::new(frames, clip.indices.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixParams {
    pub mixup_alpha: f64,
    pub cutmix_alpha: f64,
    /// Probability of using CutMix when both are enabled.
    pub switch_prob: f64,
}

impl Default for MixParams {
    fn default() -> Self {
        MixParams {
            mixup_alpha: 0.8,
            cutmix_alpha: 1.0,
            switch_prob: 0.5,
        }
    }
}

/// Mixing partner of row `i`: the batch is paired with its reversal.
fn partner(i: usize, n: usize) -> usize {
    n - 1 - i
}

fn mix_labels(labels: &[Vec<f64>], lambda: f64) -> Vec<Vec<f64>> {
    let n = labels.len();
    (0..n)
        .map(|i| {
            let j = partner(i, n);
            labels[i]
                .iter()
                .zip(&labels[j])
                .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
                .collect()
        })
        .collect()
}

/// `x'_i = lambda * x_i + (1 - lambda) * x_j` for pixels and label distributions.
pub fn mixup(
    images: &[SuperImage],
    labels: &[Vec<f64>],
    lambda: f64,
) -> (Vec<SuperImage>, Vec<Vec<f64>>) {
    let n = images.len();
    let lam = lambda as f32;
    let mixed = (0..n)
        .map(|i| {
            let j = partner(i, n);
            let mut out = images[i].clone();
            for (p, &q) in out.pixels.iter_mut().zip(&images[j].pixels) {
                *p = lam * *p + (1.0 - lam) * q;
            }
            out
        })
        .collect();
    (mixed, mix_labels(labels, lambda))
}

/// Pastes a rectangle covering a `1 - lambda` area fraction from each image's
/// partner. Labels are mixed by the realized (pixel-quantized) area; that
/// weight is returned as the third element.
pub fn cutmix<R: Rng + ?Sized>(
    images: &[SuperImage],
    labels: &[Vec<f64>],
    lambda: f64,
    rng: &mut R,
) -> (Vec<SuperImage>, Vec<Vec<f64>>, f64) {
    let n = images.len();
    if n == 0 {
        return (Vec::new(), Vec::new(), lambda);
    }
    let side = images[0].side();
    let cut = (1.0 - lambda).max(0.0).sqrt();
    let cut_side = ((side as f64 * cut).round() as usize).min(side);
    let x0 = rng.gen_range(0..=side - cut_side);
    let y0 = rng.gen_range(0..=side - cut_side);
    let realized = 1.0 - (cut_side * cut_side) as f64 / (side * side) as f64;
    let mixed = (0..n)
        .map(|i| {
            let j = partner(i, n);
            let mut out = images[i].clone();
            for y in y0..y0 + cut_side {
                let start = (y * side + x0) * 3;
                let end = start + cut_side * 3;
                out.pixels[start..end].copy_from_slice(&images[j].pixels[start..end]);
            }
            out
        })
        .collect();
    (mixed, mix_labels(labels, realized), realized)
}

/// Applies Mixup or CutMix to a batch, drawing the coefficient from the
/// corresponding Beta(alpha, alpha). A zero alpha disables that method.
pub fn mix_batch<R: Rng + ?Sized>(
    params: &MixParams,
    images: &[SuperImage],
    labels: &[Vec<f64>],
    rng: &mut R,
) -> (Vec<SuperImage>, Vec<Vec<f64>>) {
    let use_mixup = params.mixup_alpha > 0.0;
    let use_cutmix = params.cutmix_alpha > 0.0;
    let cut = match (use_mixup, use_cutmix) {
        (false, false) => return (images.to_vec(), labels.to_vec()),
        (true, false) => false,
        (false, true) => true,
        (true, true) => rng.gen_bool(params.switch_prob.clamp(0.0, 1.0)),
    };
    if cut {
        let lam = Beta::new(params.cutmix_alpha, params.cutmix_alpha)
            .expect("positive alpha")
            .sample(rng);
        let (x, y, _) = cutmix(images, labels, lam, rng);
        (x, y)
    } else {
        let lam = Beta::new(params.mixup_alpha, params.mixup_alpha)
            .expect("positive alpha")
            .sample(rng);
        mixup(images, labels, lam)
    }
}

/// `(1 - eps) * onehot(label) + eps / C`.
pub fn smoothed_onehot(label: usize, num_classes: usize, smoothing: f64) -> Vec<f64> {
    let off = smoothing / num_classes as f64;
    (0..num_classes)
        .map(|c| if c == label { 1.0 - smoothing + off } else { off })
        .collect()
}
