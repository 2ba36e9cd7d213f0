//! Random single-transform image augmentation.
//!
//! One transform is drawn per batch (uniformly among the enabled ops) and
//! applied to every image in it. Drawing is separated from applying so a
//! caller can apply the same drawn [`Transform`] to a paired batch, or
//! replay it by reusing the [`RngStream`] value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    /// Zero-padded random crop; translation of up to `pad` pixels.
    pub crop_pad: Option<usize>,
    /// Horizontal flip with this probability.
    pub hflip_prob: Option<f64>,
    /// Rotation by a uniform angle in `[-max, max]` degrees.
    pub rotate_max_deg: Option<f64>,
    /// Zoom by a uniform factor in `[lo, hi]`, centre crop / pad.
    pub scale_range: Option<(f64, f64)>,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self {
            crop_pad: Some(2),
            hflip_prob: Some(0.5),
            rotate_max_deg: Some(15.0),
            scale_range: Some((0.9, 1.1)),
        }
    }
}

impl AugmentationSpec {
    pub fn none() -> Self {
        Self {
            crop_pad: None,
            hflip_prob: None,
            rotate_max_deg: None,
            scale_range: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = self.hflip_prob {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("augment.hflip_prob", format!("must be in [0, 1], got {p}")));
            }
        }
        if let Some(d) = self.rotate_max_deg {
            if !(d.is_finite() && d >= 0.0) {
                return Err(Error::config("augment.rotate_max_deg", format!("must be >= 0, got {d}")));
            }
        }
        if let Some((lo, hi)) = self.scale_range {
            if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
                return Err(Error::config(
                    "augment.scale_range",
                    format!("need 0 < lo <= hi, got ({lo}, {hi})"),
                ));
            }
        }
        Ok(())
    }

    fn enabled(&self) -> usize {
        [
            self.crop_pad.is_some(),
            self.hflip_prob.is_some(),
            self.rotate_max_deg.is_some(),
            self.scale_range.is_some(),
        ]
        .iter()
        .filter(|&&e| e)
        .count()
    }
}

/// A concrete drawn transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Identity,
    /// A pixel at `(y, x)` moves to `(y + dy, x + dx)`; vacated pixels are 0.
    Translate { dx: isize, dy: isize },
    HFlip,
    Rotate { degrees: f64 },
    Scale { factor: f64 },
}

/// Draws one transform: pick an enabled op uniformly, then its parameters.
pub fn draw_transform(spec: &AugmentationSpec, rng: &mut RngStream) -> Transform {
    let n = spec.enabled();
    if n == 0 {
        return Transform::Identity;
    }
    let mut pick = rng.below(n as u64) as usize;
    if let Some(pad) = spec.crop_pad {
        if pick == 0 {
            let span = 2 * pad as u64 + 1;
            let dx = rng.below(span) as isize - pad as isize;
            let dy = rng.below(span) as isize - pad as isize;
            return Transform::Translate { dx, dy };
        }
        pick -= 1;
    }
    if let Some(p) = spec.hflip_prob {
        if pick == 0 {
            return if rng.next_f64() < p {
                Transform::HFlip
            } else {
                Transform::Identity
            };
        }
        pick -= 1;
    }
    if let Some(max) = spec.rotate_max_deg {
        if pick == 0 {
            return Transform::Rotate {
                degrees: rng.uniform(-max, max),
            };
        }
        pick -= 1;
    }
    let (lo, hi) = spec.scale_range.expect("remaining enabled op is scale");
    debug_assert_eq!(pick, 0);
    Transform::Scale {
        factor: rng.uniform(lo, hi),
    }
}

fn image_dims(batch: &Tensor) -> Result<(usize, usize, usize)> {
    match *batch.shape() {
        [b, h, w] => Ok((b, h, w)),
        [b, w] => Ok((b, 1, w)),
        ref s => Err(Error::Shape(format!("expected B x H x W images, got {s:?}"))),
    }
}

/// Bilinear sample with zero outside the image.
fn bilinear(img: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            img[yy as usize * w + xx as usize]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0))
}

impl Transform {
    /// Applies the transform to every `H x W` image of the batch. Output
    /// keeps the input shape and stays in `[0, 1]` for inputs in `[0, 1]`.
    pub fn apply(&self, batch: &Tensor) -> Result<Tensor> {
        let (b, h, w) = image_dims(batch)?;
        let mut out = batch.clone();
        if matches!(self, Transform::Identity) {
            return Ok(out);
        }
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        for i in 0..b {
            let src = batch.row(i);
            let dst = out.row_mut(i);
            for y in 0..h {
                for x in 0..w {
                    let v = match *self {
                        Transform::Identity => src[y * w + x],
                        Transform::Translate { dx, dy } => {
                            let sy = y as isize - dy;
                            let sx = x as isize - dx;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                0.0
                            } else {
                                src[sy as usize * w + sx as usize]
                            }
                        }
                        Transform::HFlip => src[y * w + (w - 1 - x)],
                        Transform::Rotate { degrees } => {
                            let (s, c) = degrees.to_radians().sin_cos();
                            let (ry, rx) = (y as f64 - cy, x as f64 - cx);
                            // inverse rotation maps output pixel to its source
                            let sy = c * ry - s * rx + cy;
                            let sx = s * ry + c * rx + cx;
                            bilinear(src, h, w, sy, sx)
                        }
                        Transform::Scale { factor } => {
                            let sy = (y as f64 - cy) / factor + cy;
                            let sx = (x as f64 - cx) / factor + cx;
                            bilinear(src, h, w, sy, sx)
                        }
                    };
                    dst[y * w + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        Ok(out)
    }
}

/// Draws a transform from `rng` and applies it. Calling again with the same
/// `rng` value replays the identical transform.
pub fn augment_batch(batch: &Tensor, spec: &AugmentationSpec, rng: RngStream) -> Result<Tensor> {
    let mut rng = rng;
    draw_transform(spec, &mut rng).apply(batch)
}
