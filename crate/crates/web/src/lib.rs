//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Images cross the boundary as row-major 8-bit grayscale buffers.

use matteformer::config::Config;
use matteformer::decoder::{prm_fuse, AlphaTriple};
use matteformer::eval::dump_attention;
use matteformer::numerics::{avg_pool, Tensor};
use matteformer::prior_attention::Probe;
use matteformer::training::synth_sample;
use matteformer::trimap::{composite, trimap_from_alpha, AlphaMatte};
use matteformer::{MatteFormer, PriorMode, Result};
use wasm_bindgen::prelude::*;

fn to_gray(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

fn matte(gray: &[u8], size: usize) -> Result<AlphaMatte> {
    AlphaMatte::new(size, size, gray.iter().map(|&v| v as f32 / 255.0).collect())
}

fn js(e: matteformer::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Synthetic ground-truth matte, `size×size`.
#[wasm_bindgen]
pub fn synthetic_alpha(seed: u64, size: usize) -> Vec<u8> {
    let (_, alpha, _) = synth_sample(seed, size);
    to_gray(alpha.values)
}

/// Trimap (0/128/255) from an alpha buffer: pixels strictly between 0 and 1
/// plus a `radius`-pixel band around them become unknown.
#[wasm_bindgen]
pub fn trimap_gray(alpha: &[u8], size: usize, radius: usize) -> std::result::Result<Vec<u8>, JsError> {
    trimap_of(alpha, size, radius).map_err(js)
}

fn trimap_of(alpha: &[u8], size: usize, radius: usize) -> Result<Vec<u8>> {
    let t = trimap_from_alpha(&matte(alpha, size)?, 0.0, 1.0, radius)?;
    Ok(t.labels.iter().map(|r| r.to_gray()).collect())
}

/// Fuses a synthetic prediction pyramid built from `alpha` (coarse average at
/// stride 8 and 4 plus a noisy full-resolution estimate). Returns three
/// concatenated images: coarse matte, pixels taken from each finer level
/// (128 for stride 4, 255 for stride 1) and the fused matte.
#[wasm_bindgen]
pub fn refine(alpha: &[u8], size: usize, noise: f32) -> std::result::Result<Vec<u8>, JsError> {
    refine_of(alpha, size, noise).map_err(js)
}

fn refine_of(alpha: &[u8], size: usize, noise: f32) -> Result<Vec<u8>> {
    let gt = matte(alpha, size)?.to_tensor::<f32>();
    let os8 = avg_pool(&gt, 8)?;
    let os4 = avg_pool(&gt, 4)?;
    let wobble: Vec<f32> =
        gt.to_vec().iter().enumerate().map(|(i, &v)| (v + noise * ((i as f32) * 12.9898).sin()).clamp(0.0, 1.0)).collect();
    let os1 = Tensor::from_vec(&[1, size, size], wobble)?;
    let out = prm_fuse(&AlphaTriple { os8, os4, os1 }, 0.0)?;
    let source = out.gate1.iter().zip(&out.gate2).map(|(&g1, &g2)| {
        if g2 > 0.0 {
            1.0
        } else if g1 > 0.0 {
            0.5
        } else {
            0.0
        }
    });
    let mut img = to_gray(out.alpha0.to_vec());
    img.extend(to_gray(source));
    img.extend(to_gray(out.alpha2.to_vec()));
    Ok(img)
}

/// Runs an untrained toy model on the synthetic sample for `seed` and returns
/// the per-block attention mass as CSV (`stage,block,n_prior,spatial,prior`,
/// heads averaged).
#[wasm_bindgen]
pub fn attention_mass(seed: u64, mode: &str) -> std::result::Result<String, JsError> {
    mass_of(seed, mode).map_err(js)
}

fn mass_of(seed: u64, mode: &str) -> Result<String> {
    let mode: PriorMode = mode.parse()?;
    let mut cfg = Config::toy();
    cfg.encoder.prior_mode = mode;
    let model = MatteFormer::<f32>::new(&cfg.encoder, &cfg.decoder, seed)?;
    let (fg, alpha, bg) = synth_sample(seed, 64);
    let image = composite(&fg, &bg, &alpha)?;
    let trimap = trimap_from_alpha(&alpha, 0.0, 1.0, 3)?;
    let (report, _) = dump_attention(&model, &image, &trimap, Probe::capturing(), None)?;
    let mut csv = String::from("stage,block,n_prior,spatial,prior\n");
    for b in &report.blocks {
        let n = b.mass.len() as f64;
        let spatial = b.mass.iter().map(|m| m.spatial).sum::<f64>() / n;
        let prior = b.mass.iter().map(|m| m.prior()).sum::<f64>() / n;
        csv.push_str(&format!("{},{},{},{spatial:.4},{prior:.4}\n", b.stage, b.block + 1, b.n_prior));
    }
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trimap_marks_soft_pixels_unknown() {
        let a = synthetic_alpha(3, 64);
        let t = trimap_gray(&a, 64, 0).unwrap();
        for (&av, &tv) in a.iter().zip(&t) {
            let want = match av {
                0 => 0,
                255 => 255,
                _ => 128,
            };
            assert_eq!(tv, want);
        }
        let wide = trimap_gray(&a, 64, 4).unwrap();
        let count = |t: &[u8]| t.iter().filter(|&&v| v == 128).count();
        assert!(count(&wide) > count(&t));
    }

    #[test]
    fn refine_keeps_confident_coarse_pixels() {
        let a = synthetic_alpha(1, 64);
        let img = refine(&a, 64, 0.2).unwrap();
        assert_eq!(img.len(), 3 * 64 * 64);
        let (coarse, rest) = img.split_at(64 * 64);
        let (source, fused) = rest.split_at(64 * 64);
        for i in 0..64 * 64 {
            if source[i] == 0 {
                assert_eq!(fused[i], coarse[i]);
            }
        }
        assert!(source.contains(&255));
    }

    #[test]
    fn wrong_buffer_length_is_an_error() {
        assert!(refine_of(&[0; 10], 64, 0.0).is_err());
        assert!(trimap_of(&[0; 10], 64, 1).is_err());
        assert!(mass_of(0, "sideways").is_err());
    }

    #[test]
    fn attention_mass_lists_every_block() {
        let csv = attention_mass(0, "memory").unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        let cfg = Config::toy();
        assert_eq!(rows.len(), cfg.encoder.depths.iter().sum::<usize>());
        for r in rows {
            let f: Vec<f64> = r.split(',').map(|v| v.parse().unwrap()).collect();
            assert!((f[3] + f[4] - 1.0).abs() < 1e-3, "{r}");
            assert!(f[4] > 0.0);
        }
        let none = attention_mass(0, "none").unwrap();
        assert!(none.lines().skip(1).all(|r| r.ends_with(",0.0000")));
    }
}
