//! Fixed resampling operators built as sparse linear maps.

use std::rc::Rc;

use super::ops::SparseMap;
use super::tensor::{Real, Tensor};
use crate::error::{shape_err, Result};

/// Source coordinate and weights for one output index, align-corners=false.
fn bilinear_taps(dst: usize, factor: usize, src_len: usize) -> (usize, usize, f64) {
    let src = ((dst as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(src_len - 1);
    let i1 = if i0 + 1 < src_len { i0 + 1 } else { i0 };
    (i0, i1, src - i0 as f64)
}

/// Bilinear upsampling map for a `c×h×w` map by an integer factor.
///
/// Uses the align-corners=false convention: output pixel centers are mapped
/// to `(x + 0.5)/factor − 0.5` in source coordinates, clamped at the borders.
pub fn bilinear_map(c: usize, h: usize, w: usize, factor: usize) -> SparseMap {
    let (ho, wo) = (h * factor, w * factor);
    let ys: Vec<_> = (0..ho).map(|y| bilinear_taps(y, factor, h)).collect();
    let xs: Vec<_> = (0..wo).map(|x| bilinear_taps(x, factor, w)).collect();
    let mut rows = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let base = ch * h * w;
        for &(y0, y1, ly) in &ys {
            for &(x0, x1, lx) in &xs {
                let mut row = Vec::with_capacity(4);
                for (yy, wy) in [(y0, 1.0 - ly), (y1, ly)] {
                    for (xx, wx) in [(x0, 1.0 - lx), (x1, lx)] {
                        let wgt = wy * wx;
                        if wgt != 0.0 {
                            row.push((base + yy * w + xx, wgt));
                        }
                    }
                }
                rows.push(row);
            }
        }
    }
    SparseMap::from_rows(c * h * w, rows)
}

/// Non-overlapping `factor×factor` mean pooling of a `c×h×w` map.
pub fn avg_pool_map(c: usize, h: usize, w: usize, factor: usize) -> SparseMap {
    let (ho, wo) = (h / factor, w / factor);
    let wgt = 1.0 / (factor * factor) as f64;
    let mut rows = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for y in 0..ho {
            for x in 0..wo {
                let mut row = Vec::with_capacity(factor * factor);
                for dy in 0..factor {
                    for dx in 0..factor {
                        row.push((ch * h * w + (y * factor + dy) * w + x * factor + dx, wgt));
                    }
                }
                rows.push(row);
            }
        }
    }
    SparseMap::from_rows(c * h * w, rows)
}

fn chw<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(shape_err(format!("expected C×H×W, got {:?}", x.shape()))),
    }
}

/// Bilinear upsampling of a `C×H×W` map, factor in {2, 4, 8}.
pub fn upsample_bilinear<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if !matches!(factor, 2 | 4 | 8) {
        return Err(shape_err(format!("upsample factor {factor} not in {{2,4,8}}")));
    }
    let (c, h, w) = chw(x)?;
    x.sparse_map(Rc::new(bilinear_map(c, h, w, factor)), &[c, h * factor, w * factor])
}

/// Mean pooling of a `C×H×W` map over `factor×factor` blocks.
pub fn avg_pool<T: Real>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (c, h, w) = chw(x)?;
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(shape_err(format!("avg_pool factor {factor} on {h}×{w}")));
    }
    x.sparse_map(Rc::new(avg_pool_map(c, h, w, factor)), &[c, h / factor, w / factor])
}
