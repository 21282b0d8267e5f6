//! Pad-and-crop random shift augmentation of raw observations.

use crate::error::{invalid, Result};
use crate::tensor::Tensor;
use rand::Rng;

/// Replicate-pads every image by `pad` and crops an `H×W` window whose top-left
/// corner is `offsets[b] = (row, column)` in the padded image.
pub fn shift_crop(images: &Tensor, pad: usize, offsets: &[(usize, usize)]) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 {
        return invalid(format!("shift augmentation expects [B,C,H,W], got {s:?}"));
    }
    let (batch, channels, h, w) = (s[0], s[1], s[2], s[3]);
    if pad >= h.min(w) {
        return invalid(format!("pad {pad} must be smaller than the image extent {}", h.min(w)));
    }
    if offsets.len() != batch {
        return invalid("one offset pair per batch element is required");
    }
    if offsets.iter().any(|&(r, c)| r > 2 * pad || c > 2 * pad) {
        return invalid("crop offset outside [0, 2·pad]");
    }
    let mut out = vec![0.0; images.len()];
    let src = images.data();
    for (b, &(oy, ox)) in offsets.iter().enumerate() {
        for c in 0..channels {
            let base = (b * channels + c) * h * w;
            for i in 0..h {
                // padded row i + oy maps back to source row clamp(i + oy − pad)
                let si = (i + oy).saturating_sub(pad).min(h - 1);
                for j in 0..w {
                    let sj = (j + ox).saturating_sub(pad).min(w - 1);
                    out[base + i * w + j] = src[base + si * w + sj];
                }
            }
        }
    }
    Tensor::new(s, out)
}

/// Random shifts: one uniform integer offset pair in `[0, 2·pad]` per image.
pub fn random_shift_aug<R: Rng + ?Sized>(images: &Tensor, pad: usize, rng: &mut R) -> Result<Tensor> {
    let batch = images.shape().first().copied().unwrap_or(0);
    let offsets: Vec<(usize, usize)> = (0..batch)
        .map(|_| (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad)))
        .collect();
    shift_crop(images, pad, &offsets)
}
