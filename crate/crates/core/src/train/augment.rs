use image::RgbImage;
use rand::Rng;

use super::AugmentConfig;
use crate::stain::StainTriplet;

/// One geometric draw: a square crop and a horizontal flip bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentTrace {
    pub x: u32,
    pub y: u32,
    pub side: u32,
    pub flip: bool,
}

impl AugmentTrace {
    /// Source pixel for output pixel `(ox, oy)` of an `out`-sized result.
    pub fn source(&self, ox: u32, oy: u32, out: u32) -> (u32, u32) {
        let ox = if self.flip { out - 1 - ox } else { ox };
        let map = |o: u32| ((2 * o as u64 + 1) * self.side as u64 / (2 * out as u64)) as u32;
        (self.x + map(ox), self.y + map(oy))
    }
}

fn resample(img: &RgbImage, t: &AugmentTrace, out: u32) -> RgbImage {
    RgbImage::from_fn(out, out, |ox, oy| {
        let (sx, sy) = t.source(ox, oy, out);
        *img.get_pixel(sx, sy)
    })
}

/// Applies a fixed trace to all three images, resampling (nearest) to
/// `out × out`.
pub fn augment_with(triplet: &StainTriplet, trace: &AugmentTrace, out: u32) -> StainTriplet {
    StainTriplet {
        rgb: resample(&triplet.rgb, trace, out),
        h_channel: resample(&triplet.h_channel, trace, out),
        e_channel: resample(&triplet.e_channel, trace, out),
    }
}

/// Random-resized square crop plus optional horizontal flip, drawn once and
/// applied identically to RGB, H and E.
pub fn augment(
    triplet: &StainTriplet,
    cfg: &AugmentConfig,
    out: u32,
    rng: &mut impl Rng,
) -> (StainTriplet, AugmentTrace) {
    let (w, h) = triplet.rgb.dimensions();
    let size = w.min(h);
    let [lo, hi] = cfg.scale;
    let area = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let side = ((area.sqrt() * size as f64).round() as u32).clamp(1, size);
    let x = rng.random_range(0..=w - side);
    let y = rng.random_range(0..=h - side);
    let flip = rng.random_bool(cfg.flip_prob);
    let trace = AugmentTrace { x, y, side, flip };
    (augment_with(triplet, &trace, out), trace)
}

pub fn flip_horizontal(triplet: &StainTriplet) -> StainTriplet {
    let (w, _) = triplet.rgb.dimensions();
    let trace = AugmentTrace {
        x: 0,
        y: 0,
        side: w,
        flip: true,
    };
    augment_with(triplet, &trace, w)
}
