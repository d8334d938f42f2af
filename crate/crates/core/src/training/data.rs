//! Procedural foreground/alpha/background triples and the augmentation that
//! turns them into training samples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::AugmentConfig;
use crate::error::{Error, Result};
use crate::model::input_tensor;
use crate::numerics::{Real, Tensor};
use crate::trimap::{composite, trimap_from_alpha, AlphaMatte, RgbImage, Trimap};

use super::losses::LossTargets;

/// One composited sample with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: RgbImage,
    pub trimap: Trimap,
    pub alpha: AlphaMatte,
    pub fg: Option<RgbImage>,
    pub bg: Option<RgbImage>,
}

/// Tensors of a sample, built once and reused across steps.
#[derive(Clone, Debug)]
pub struct PreparedSample<T: Real = f32> {
    pub input: Tensor<T>,
    pub trimap: Trimap,
    pub targets: LossTargets<T>,
}

impl TrainSample {
    pub fn prepare<T: Real>(&self) -> Result<PreparedSample<T>> {
        Ok(PreparedSample {
            input: input_tensor(&self.image, &self.trimap)?,
            trimap: self.trimap.clone(),
            targets: LossTargets {
                alpha: self.alpha.to_tensor(),
                image: self.image.to_tensor(),
                fg: self.fg.as_ref().map(|f| f.to_tensor()),
                bg: self.bg.as_ref().map(|b| b.to_tensor()),
            },
        })
    }
}

// ---- synthetic triples -------------------------------------------------------

/// Smooth random color field: base color plus a few low-frequency waves.
fn smooth_field(rng: &mut ChaCha8Rng, size: usize) -> RgbImage {
    let n = size * size;
    let mut data = vec![0.0f32; 3 * n];
    for c in 0..3 {
        let base: f32 = rng.random_range(0.15..0.85);
        let waves: Vec<(f32, f32, f32, f32)> = (0..3)
            .map(|_| {
                (
                    rng.random_range(0.03..0.15),
                    rng.random_range(-0.25..0.25),
                    rng.random_range(-0.25..0.25),
                    rng.random_range(0.0..std::f32::consts::TAU),
                )
            })
            .collect();
        for y in 0..size {
            for x in 0..size {
                let mut v = base;
                for &(amp, fy, fx, ph) in &waves {
                    v += amp * (fy * y as f32 + fx * x as f32 + ph).sin();
                }
                data[c * n + y * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    RgbImage { height: size, width: size, data }
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// `(fg, alpha, bg)` of side `size`: a soft-edged disk plus a few
/// semi-transparent strokes over smooth color fields.
pub fn synth_sample(seed: u64, size: usize) -> (RgbImage, AlphaMatte, RgbImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f32;
    let center = (s / 2.0 + rng.random_range(-s / 10.0..=s / 10.0), s / 2.0 + rng.random_range(-s / 10.0..=s / 10.0));
    let radius = rng.random_range(s / 6.0..s / 4.0);
    let soft = rng.random_range(1.5f32..3.5);
    let strokes: Vec<((f32, f32), (f32, f32), f32, f32)> = (0..rng.random_range(1..=3))
        .map(|_| {
            let ang: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            let len = rng.random_range(radius * 0.8..radius * 1.8);
            let start = (center.0 + radius * 0.7 * ang.cos(), center.1 + radius * 0.7 * ang.sin());
            let dir: f32 = ang + rng.random_range(-0.6..0.6);
            let end = (start.0 + len * dir.cos(), start.1 + len * dir.sin());
            (start, end, rng.random_range(0.8f32..2.0), rng.random_range(0.35f32..0.85))
        })
        .collect();
    let mut alpha = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let p = (x as f32 + 0.5, y as f32 + 0.5);
            let d = ((p.0 - center.0).powi(2) + (p.1 - center.1).powi(2)).sqrt();
            let mut a = ((radius - d) / soft + 0.5).clamp(0.0, 1.0);
            for &(a0, b0, width, opacity) in &strokes {
                let sd = segment_distance(p, a0, b0);
                a = a.max(opacity * ((width - sd) / 1.0 + 0.5).clamp(0.0, 1.0));
            }
            alpha.push(a);
        }
    }
    let fg = smooth_field(&mut rng, size);
    let bg = smooth_field(&mut rng, size);
    (fg, AlphaMatte { height: size, width: size, values: alpha }, bg)
}

// ---- augmentation ------------------------------------------------------------

/// Bilinear sample of a plane at fractional `(y, x)`; `None` outside.
fn bilinear(plane: &[f32], h: usize, w: usize, y: f32, x: f32) -> Option<f32> {
    if y < 0.0 || x < 0.0 || y > (h - 1) as f32 || x > (w - 1) as f32 {
        return None;
    }
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f32, x - x0 as f32);
    let at = |yy: usize, xx: usize| plane[yy * w + xx];
    Some((1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1)))
}

/// Rotation by `deg`, isotropic `scale` and optional horizontal flip about
/// the image center. Alpha outside the source is 0; colors clamp to the edge.
fn affine(fg: &RgbImage, alpha: &AlphaMatte, deg: f64, scale: f64, flip: bool) -> (RgbImage, AlphaMatte) {
    let (h, w) = (alpha.height, alpha.width);
    let (cy, cx) = ((h as f32 - 1.0) / 2.0, (w as f32 - 1.0) / 2.0);
    let (sin, cos) = ((-deg.to_radians()) as f32).sin_cos();
    let inv = 1.0 / scale as f32;
    let n = h * w;
    let mut a = vec![0.0f32; n];
    let mut f = vec![0.0f32; 3 * n];
    for y in 0..h {
        for x in 0..w {
            let mut u = x as f32 - cx;
            let v = y as f32 - cy;
            if flip {
                u = -u;
            }
            let sx = (cos * u - sin * v) * inv + cx;
            let sy = (sin * u + cos * v) * inv + cy;
            let p = y * w + x;
            a[p] = bilinear(&alpha.values, h, w, sy, sx).unwrap_or(0.0).clamp(0.0, 1.0);
            let (ey, ex) = (sy.clamp(0.0, (h - 1) as f32), sx.clamp(0.0, (w - 1) as f32));
            for c in 0..3 {
                f[c * n + p] = bilinear(fg.plane(c), h, w, ey, ex).unwrap_or(0.0);
            }
        }
    }
    (RgbImage { height: h, width: w, data: f }, AlphaMatte { height: h, width: w, values: a })
}

/// `c×c` window at `(top, left)` of `planes` stacked planes of `h×w`, with
/// edge replication where the window leaves the source.
fn crop_planes(data: &[f32], planes: usize, h: usize, w: usize, top: isize, left: isize, c: usize, fill: Option<f32>) -> Vec<f32> {
    let mut out = Vec::with_capacity(planes * c * c);
    for p in 0..planes {
        for y in 0..c {
            for x in 0..c {
                let (sy, sx) = (top + y as isize, left + x as isize);
                let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                out.push(match (inside, fill) {
                    (false, Some(v)) => v,
                    _ => {
                        let (cy, cx) = (sy.clamp(0, h as isize - 1) as usize, sx.clamp(0, w as isize - 1) as usize);
                        data[p * h * w + cy * w + cx]
                    }
                });
            }
        }
    }
    out
}

/// Top-left corner placing a `c`-window around `center` inside `[0, n)`;
/// centered with padding when `n < c`.
fn window_start(center: isize, n: usize, c: usize) -> isize {
    if n < c {
        return -(((c - n) / 2) as isize);
    }
    (center - (c / 2) as isize).clamp(0, (n - c) as isize)
}

/// Affine → crop → color jitter → composite → trimap, deterministic in `seed`.
pub fn augment_sample(
    fg: &RgbImage,
    alpha: &AlphaMatte,
    bg: &RgbImage,
    cfg: &AugmentConfig,
    crop: usize,
    seed: u64,
) -> Result<TrainSample> {
    if crop == 0 || crop % 32 != 0 {
        return Err(Error::Config(format!("crop must be a positive multiple of 32, got {crop}")));
    }
    if (fg.height, fg.width) != (alpha.height, alpha.width) {
        return Err(crate::error::shape_err("foreground and alpha sizes differ"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let deg = if cfg.rotation_deg > 0.0 { rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg) } else { 0.0 };
    let scale = if cfg.scale_max > cfg.scale_min { rng.random_range(cfg.scale_min..=cfg.scale_max) } else { cfg.scale_min };
    let flip = rng.random::<f64>() < cfg.flip_prob;
    let (fg_t, alpha_t) =
        if deg == 0.0 && scale == 1.0 && !flip { (fg.clone(), alpha.clone()) } else { affine(fg, alpha, deg, scale, flip) };

    let (h, w) = (alpha_t.height, alpha_t.width);
    let (cy, cx) = if cfg.random_crop {
        let unknown: Vec<usize> = (0..h * w).filter(|&i| alpha_t.values[i] > 0.0 && alpha_t.values[i] < 1.0).collect();
        if unknown.is_empty() {
            (rng.random_range(0..h) as isize, rng.random_range(0..w) as isize)
        } else {
            let p = unknown[rng.random_range(0..unknown.len())];
            ((p / w) as isize, (p % w) as isize)
        }
    } else {
        ((h / 2) as isize, (w / 2) as isize)
    };
    let (top, left) = (window_start(cy, h, crop), window_start(cx, w, crop));
    let a_crop = crop_planes(&alpha_t.values, 1, h, w, top, left, crop, Some(0.0));
    let mut f_crop = crop_planes(&fg_t.data, 3, h, w, top, left, crop, None);

    let (bh, bw) = (bg.height, bg.width);
    let (btop, bleft) = if cfg.random_crop && bh >= crop && bw >= crop {
        (rng.random_range(0..=bh - crop) as isize, rng.random_range(0..=bw - crop) as isize)
    } else {
        (window_start((bh / 2) as isize, bh, crop), window_start((bw / 2) as isize, bw, crop))
    };
    let b_crop = crop_planes(&bg.data, 3, bh, bw, btop, bleft, crop, None);

    if cfg.jitter > 0.0 {
        let n = crop * crop;
        for c in 0..3 {
            let gain = rng.random_range(1.0 - cfg.jitter..=1.0 + cfg.jitter) as f32;
            let offset = rng.random_range(-cfg.jitter / 2.0..=cfg.jitter / 2.0) as f32;
            for v in &mut f_crop[c * n..(c + 1) * n] {
                *v = (*v * gain + offset).clamp(0.0, 1.0);
            }
        }
    }

    let fg_c = RgbImage::new(crop, crop, f_crop)?;
    let bg_c = RgbImage::new(crop, crop, b_crop)?;
    let alpha_c = AlphaMatte::new(crop, crop, a_crop)?;
    let image = composite(&fg_c, &bg_c, &alpha_c)?;
    let radius = rng.random_range(cfg.radius_min..=cfg.radius_max);
    let trimap = trimap_from_alpha(&alpha_c, cfg.trimap_lo, cfg.trimap_hi, radius)?;
    Ok(TrainSample { image, trimap, alpha: alpha_c, fg: Some(fg_c), bg: Some(bg_c) })
}

/// Base triples for a run: `pool_size` synthetic images from `seed`.
pub fn synthetic_pool(seed: u64, pool_size: usize, size: usize) -> Vec<(RgbImage, AlphaMatte, RgbImage)> {
    (0..pool_size as u64).map(|i| synth_sample(seed.wrapping_mul(1_000_003).wrapping_add(i), size)).collect()
}
