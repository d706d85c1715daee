//! Image augmentations on CHW `f32` buffers.

use rand::Rng;

use crate::error::{invalid, shape, Result};
use crate::tensor::Tensor;

/// Mirrors every row of a CHW image in place.
pub fn hflip(img: &mut [f32], shape: [usize; 3]) {
    let w = shape[2];
    for row in img.chunks_mut(w) {
        row.reverse();
    }
}

/// Random `h × w` window of the image zero-padded by `pad` on every side.
pub fn pad_crop<G: Rng + ?Sized>(
    img: &[f32],
    shape: [usize; 3],
    pad: usize,
    rng: &mut G,
) -> Vec<f32> {
    let [c, h, w] = shape;
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = x as isize + dx;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Standard student/expert augmentation: horizontal flip with probability
/// 1/2, then a padded random crop. Applied independently per image.
pub fn flip_crop_batch<G: Rng + ?Sized>(batch: &Tensor, pad: usize, rng: &mut G) -> Result<Tensor> {
    let s = batch.shape();
    if s.len() != 4 {
        return Err(shape(format!("augment batch {s:?}")));
    }
    let chw = [s[1], s[2], s[3]];
    let mut out = Vec::with_capacity(batch.numel());
    for img in batch.data().chunks(batch.row_len().max(1)) {
        let mut v = img.to_vec();
        if rng.random::<bool>() {
            hflip(&mut v, chw);
        }
        out.extend(if pad > 0 {
            pad_crop(&v, chw, pad, rng)
        } else {
            v
        });
    }
    Tensor::new(s.to_vec(), out)
}

/// Random resized crop: a window with area fraction in `area` and aspect
/// ratio (w/h) in `ratio`, resampled bilinearly to the input size, then
/// flipped with probability `flip_prob`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResizedCropConfig {
    pub area: (f32, f32),
    pub ratio: (f32, f32),
    pub flip_prob: f32,
}

impl Default for ResizedCropConfig {
    fn default() -> Self {
        Self {
            area: (0.3, 1.0),
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
        }
    }
}

impl ResizedCropConfig {
    /// Whole-image window, no flip: the output equals the input.
    pub fn identity() -> Self {
        Self {
            area: (1.0, 1.0),
            ratio: (1.0, 1.0),
            flip_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (a0, a1) = self.area;
        let (r0, r1) = self.ratio;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return Err(invalid(format!("crop area range {:?}", self.area)));
        }
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return Err(invalid(format!("crop ratio range {:?}", self.ratio)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(invalid(format!("flip probability {}", self.flip_prob)));
        }
        Ok(())
    }
}

/// Picks `(top, left, height, width)` of the crop window. Up to ten draws
/// are tried; if none fits, the largest centered window with ratio in range
/// is used.
fn crop_window<G: Rng + ?Sized>(
    h: usize,
    w: usize,
    cfg: &ResizedCropConfig,
    rng: &mut G,
) -> Result<(f32, f32, f32, f32)> {
    let (hf, wf) = (h as f32, w as f32);
    let area = hf * wf;
    let (lr0, lr1) = (cfg.ratio.0.ln(), cfg.ratio.1.ln());
    for _ in 0..10 {
        let target = area * sample(rng, cfg.area.0, cfg.area.1);
        let ratio = sample(rng, lr0, lr1).exp();
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= wf + 1e-4 && ch <= hf + 1e-4 {
            let (cw, ch) = (cw.min(wf), ch.min(hf));
            let top = sample(rng, 0.0, hf - ch);
            let left = sample(rng, 0.0, wf - cw);
            return check(top, left, ch, cw);
        }
    }
    let in_ratio = wf / hf;
    let (ch, cw) = if in_ratio < cfg.ratio.0 {
        (wf / cfg.ratio.0, wf)
    } else if in_ratio > cfg.ratio.1 {
        (hf, hf * cfg.ratio.1)
    } else {
        (hf, wf)
    };
    check((hf - ch) / 2.0, (wf - cw) / 2.0, ch, cw)
}

fn check(top: f32, left: f32, ch: f32, cw: f32) -> Result<(f32, f32, f32, f32)> {
    if !(ch >= 1.0 && cw >= 1.0) {
        return Err(invalid(format!("degenerate crop window {ch}x{cw}")));
    }
    Ok((top, left, ch, cw))
}

fn sample<G: Rng + ?Sized>(rng: &mut G, lo: f32, hi: f32) -> f32 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn random_resized_crop<G: Rng + ?Sized>(
    img: &[f32],
    shape: [usize; 3],
    cfg: &ResizedCropConfig,
    rng: &mut G,
) -> Result<Vec<f32>> {
    cfg.validate()?;
    let [c, h, w] = shape;
    if img.len() != c * h * w {
        return Err(crate::error::shape(format!(
            "{} pixels for {shape:?}",
            img.len()
        )));
    }
    let (top, left, ch, cw) = crop_window(h, w, cfg, rng)?;
    let (sy, sx) = (ch / h as f32, cw / w as f32);
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        // Pixel centers of the output map onto the window with half-pixel alignment.
        let fy = (top + (y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..w {
            let fx = (left + (x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            for k in 0..c {
                let p = |yy: usize, xx: usize| img[(k * h + yy) * w + xx];
                let top_row = p(y0, x0) * (1.0 - tx) + p(y0, x1) * tx;
                let bottom = p(y1, x0) * (1.0 - tx) + p(y1, x1) * tx;
                out[(k * h + y) * w + x] = top_row * (1.0 - ty) + bottom * ty;
            }
        }
    }
    if rng.random::<f32>() < cfg.flip_prob {
        hflip(&mut out, shape);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(shape: [usize; 3]) -> Vec<f32> {
        let n: usize = shape.iter().product();
        (0..n).map(|i| (i as f32 * 0.37).sin().abs()).collect()
    }

    #[test]
    fn identity_crop_returns_input() {
        let s = [3, 8, 8];
        let img = ramp(s);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = random_resized_crop(&img, s, &ResizedCropConfig::identity(), &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn crops_are_seeded_and_varied() {
        let s = [3, 8, 8];
        let img = ramp(s);
        let cfg = ResizedCropConfig::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..8)
                .map(|_| random_resized_crop(&img, s, &cfg, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        let a = draw(5);
        assert_eq!(a, draw(5));
        for i in 0..a.len() {
            for j in i + 1..a.len() {
                assert_ne!(a[i], a[j]);
            }
        }
        for v in a.iter().flatten() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn degenerate_windows_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tiny = ResizedCropConfig {
            area: (0.001, 0.001),
            ratio: (1.0, 1.0),
            flip_prob: 0.0,
        };
        assert!(random_resized_crop(&ramp([1, 4, 4]), [1, 4, 4], &tiny, &mut rng).is_err());
        let bad = ResizedCropConfig {
            area: (0.8, 0.2),
            ..ResizedCropConfig::default()
        };
        assert!(random_resized_crop(&ramp([1, 4, 4]), [1, 4, 4], &bad, &mut rng).is_err());
    }

    #[test]
    fn flip_twice_is_identity() {
        let s = [2, 3, 5];
        let img = ramp(s);
        let mut v = img.clone();
        hflip(&mut v, s);
        assert_eq!(v[0], img[4]);
        hflip(&mut v, s);
        assert_eq!(v, img);
    }

    #[test]
    fn pad_crop_shifts_content() {
        let s = [1, 4, 4];
        let img: Vec<f32> = (1..=16).map(|v| v as f32).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(pad_crop(&img, s, 0, &mut rng), img);
        for _ in 0..20 {
            let out = pad_crop(&img, s, 1, &mut rng);
            // Every surviving value appears at most one pixel away from its origin.
            for (i, &v) in out.iter().enumerate() {
                if v != 0.0 {
                    let src = v as usize - 1;
                    assert!((src / 4).abs_diff(i / 4) <= 1 && (src % 4).abs_diff(i % 4) <= 1);
                }
            }
        }
    }
}
