//! Random crop from a zero-padded image and horizontal flip.
//!
//! A crop is described by its displacement `(dy, dx)` from the centred
//! window, each in `[−pad, pad]`: output pixel `(y, x)` is input pixel
//! `(y + dy, x + dx)`, or zero when that falls in the padding. Displacement
//! `(0, 0)` reproduces the image.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Augment {
    pub crop_pad: usize,
    pub flip: bool,
}

impl Augment {
    pub fn new(crop_pad: usize, flip: bool) -> Self {
        Self { crop_pad, flip }
    }

    /// Draws the crop displacement, then the flip, from `rng`.
    pub fn apply<R: Rng + ?Sized>(
        &self,
        img: &[f32],
        h: usize,
        w: usize,
        c: usize,
        rng: &mut R,
    ) -> Vec<f32> {
        let p = self.crop_pad as i64;
        let mut out = if p > 0 {
            let dy = rng.random_range(-p..=p) as isize;
            let dx = rng.random_range(-p..=p) as isize;
            shift_crop(img, h, w, c, dy, dx)
        } else {
            img.to_vec()
        };
        if self.flip && rng.random_bool(0.5) {
            out = hflip(&out, h, w, c);
        }
        out
    }
}

pub fn shift_crop(img: &[f32], h: usize, w: usize, c: usize, dy: isize, dx: isize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        let sy = y as isize + dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w {
            let sx = x as isize + dx;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            let (o, s) = ((y * w + x) * c, (sy as usize * w + sx as usize) * c);
            out[o..o + c].copy_from_slice(&img[s..s + c]);
        }
    }
    out
}

pub fn hflip(img: &[f32], h: usize, w: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let (o, s) = ((y * w + x) * c, (y * w + (w - 1 - x)) * c);
            out[o..o + c].copy_from_slice(&img[s..s + c]);
        }
    }
    out
}
