//! Source-target statistical divergence: color and frequency transforms
//! applied to exactly one side of the (source, target) pair.
//!
//! All randomness is resolved up front into [`TransformParams`]; applying a
//! transform is then a pure function of the image and the params. Neutral
//! sub-transforms are skipped entirely so they stay bit-exact identities.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::raster::Image;

/// Ranges and per-sub-transform probabilities, from the pipeline config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TransformRanges {
    pub p_rgb: f64,
    pub rgb_shift_max: f32,
    pub p_hue: f64,
    pub hue_shift_max: f32,
    pub p_brightness: f64,
    pub brightness_min: f32,
    pub brightness_max: f32,
    pub p_contrast: f64,
    pub contrast_min: f32,
    pub contrast_max: f32,
    pub p_frequency: f64,
    /// Given a frequency op fires, probability it is sharpening (otherwise
    /// a down-up resample).
    pub p_sharpen: f64,
    pub sharpen_max: f32,
    pub sharpen_sigma: f32,
    pub downscale_min: f32,
    pub downscale_max: f32,
}

impl Default for TransformRanges {
    fn default() -> Self {
        TransformRanges {
            p_rgb: 0.5,
            rgb_shift_max: 0.08,
            p_hue: 0.5,
            hue_shift_max: 0.1,
            p_brightness: 0.5,
            brightness_min: 0.9,
            brightness_max: 1.1,
            p_contrast: 0.5,
            contrast_min: 0.9,
            contrast_max: 1.1,
            p_frequency: 0.5,
            p_sharpen: 0.5,
            sharpen_max: 0.5,
            sharpen_sigma: 1.0,
            downscale_min: 0.25,
            downscale_max: 0.5,
        }
    }
}

impl TransformRanges {
    /// A configuration under which sampling always yields the identity.
    pub fn disabled() -> Self {
        TransformRanges {
            p_rgb: 0.0,
            p_hue: 0.0,
            p_brightness: 0.0,
            p_contrast: 0.0,
            p_frequency: 0.0,
            ..TransformRanges::default()
        }
    }

    fn all_disabled(&self) -> bool {
        self.p_rgb == 0.0
            && self.p_hue == 0.0
            && self.p_brightness == 0.0
            && self.p_contrast == 0.0
            && self.p_frequency == 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreqOp {
    /// Unsharp masking: `img + amount * (img - blur(img))`.
    Sharpen { amount: f32 },
    /// Bilinear resample down to `factor` and back up.
    Downscale { factor: f32 },
}

/// Fully resolved transform parameters for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub rgb_shift: [f32; 3],
    pub hue_shift: f32,
    pub brightness: f32,
    pub contrast: f32,
    pub freq_op: Option<FreqOp>,
}

impl TransformParams {
    pub fn identity() -> Self {
        TransformParams {
            rgb_shift: [0.0; 3],
            hue_shift: 0.0,
            brightness: 1.0,
            contrast: 1.0,
            freq_op: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rgb_shift == [0.0; 3]
            && self.hue_shift == 0.0
            && self.brightness == 1.0
            && self.contrast == 1.0
            && matches!(
                self.freq_op,
                None | Some(FreqOp::Sharpen { amount: 0.0 })
                    | Some(FreqOp::Downscale { factor: 1.0 })
            )
    }

    /// Sample params in a fixed draw order (rgb gate+values, hue, brightness,
    /// contrast, frequency gate+op+value). Unless every probability is zero,
    /// resamples until at least one sub-transform is enabled.
    pub fn sample(rng: &mut impl Rng, ranges: &TransformRanges) -> Self {
        if ranges.all_disabled() {
            return TransformParams::identity();
        }
        loop {
            let params = Self::sample_once(rng, ranges);
            if !params.is_identity() {
                return params;
            }
        }
    }

    fn sample_once(rng: &mut impl Rng, r: &TransformRanges) -> Self {
        let rgb_shift = if rng.random::<f64>() < r.p_rgb {
            [
                rng.random_range(-r.rgb_shift_max..=r.rgb_shift_max),
                rng.random_range(-r.rgb_shift_max..=r.rgb_shift_max),
                rng.random_range(-r.rgb_shift_max..=r.rgb_shift_max),
            ]
        } else {
            [0.0; 3]
        };
        let hue_shift = if rng.random::<f64>() < r.p_hue {
            rng.random_range(-r.hue_shift_max..=r.hue_shift_max)
        } else {
            0.0
        };
        let brightness = if rng.random::<f64>() < r.p_brightness {
            rng.random_range(r.brightness_min..=r.brightness_max)
        } else {
            1.0
        };
        let contrast = if rng.random::<f64>() < r.p_contrast {
            rng.random_range(r.contrast_min..=r.contrast_max)
        } else {
            1.0
        };
        let freq_op = if rng.random::<f64>() < r.p_frequency {
            if rng.random::<f64>() < r.p_sharpen {
                Some(FreqOp::Sharpen {
                    amount: rng.random_range(0.0..=r.sharpen_max),
                })
            } else {
                Some(FreqOp::Downscale {
                    factor: rng.random_range(r.downscale_min..=r.downscale_max),
                })
            }
        } else {
            None
        };
        TransformParams {
            rgb_shift,
            hue_shift,
            brightness,
            contrast,
            freq_op,
        }
    }
}

/// Apply rgb shift, hue shift, brightness, contrast in that order, then
/// clip to `[0, 1]`.
pub fn color_transform(image: &Image, params: &TransformParams) -> Image {
    let mut out = image.clone();
    if params.rgb_shift != [0.0; 3] {
        for px in out.data_mut().chunks_exact_mut(3) {
            px[0] += params.rgb_shift[0];
            px[1] += params.rgb_shift[1];
            px[2] += params.rgb_shift[2];
        }
    }
    if params.hue_shift != 0.0 {
        for px in out.data_mut().chunks_exact_mut(3) {
            let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
            let shifted = (h + params.hue_shift).rem_euclid(1.0);
            let (r, g, b) = hsv_to_rgb(shifted, s, v);
            px[0] = r;
            px[1] = g;
            px[2] = b;
        }
    }
    if params.brightness != 1.0 {
        for v in out.data_mut() {
            *v *= params.brightness;
        }
    }
    if params.contrast != 1.0 {
        for v in out.data_mut() {
            *v = (*v - 0.5) * params.contrast + 0.5;
        }
    }
    out.clamp01();
    out
}

/// Apply the resolved frequency op, if any; clip to `[0, 1]`.
pub fn frequency_transform(image: &Image, params: &TransformParams) -> Image {
    match params.freq_op {
        None => image.clone(),
        Some(FreqOp::Sharpen { amount }) => {
            if amount == 0.0 {
                return image.clone();
            }
            let mut out = unsharp_mask(image, amount, 1.0);
            out.clamp01();
            out
        }
        Some(FreqOp::Downscale { factor }) => {
            if factor >= 1.0 {
                return image.clone();
            }
            let (w, h) = image.dims();
            let dw = ((w as f32 * factor).round() as usize).max(1);
            let dh = ((h as f32 * factor).round() as usize).max(1);
            let mut out = image.resize_bilinear(dw, dh).resize_bilinear(w, h);
            out.clamp01();
            out
        }
    }
}

/// `img + amount * (img - blur(img, sigma))`.
pub fn unsharp_mask(image: &Image, amount: f32, sigma: f32) -> Image {
    let blurred = image.gaussian_blur(sigma);
    let mut out = image.clone();
    for (o, &b) in out.data_mut().iter_mut().zip(blurred.data()) {
        *o += amount * (*o - b);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformSide {
    Source,
    Target,
}

/// Which side a uniform draw selects: `u < 0.5` transforms the source.
pub fn side_for_draw(u: f64) -> TransformSide {
    if u < 0.5 {
        TransformSide::Source
    } else {
        TransformSide::Target
    }
}

/// Draw the side, sample params, and transform exactly that side. The
/// untransformed side is returned bit-identical.
pub fn apply_source_target(
    source: &Image,
    target: &Image,
    rng: &mut impl Rng,
    ranges: &TransformRanges,
) -> (Image, Image, TransformSide, TransformParams) {
    let side = side_for_draw(rng.random::<f64>());
    let params = TransformParams::sample(rng, ranges);
    apply_to_side(source, target, side, &params)
}

/// Deterministic application once side and params are known.
pub fn apply_to_side(
    source: &Image,
    target: &Image,
    side: TransformSide,
    params: &TransformParams,
) -> (Image, Image, TransformSide, TransformParams) {
    let transform = |img: &Image| frequency_transform(&color_transform(img, params), params);
    match side {
        TransformSide::Source => (transform(source), target.clone(), side, params.clone()),
        TransformSide::Target => (source.clone(), transform(target), side, params.clone()),
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, v)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}
