//! Alpha, composition and Laplacian-pyramid losses on `[1×H×W]` mattes.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::decoder::PrmOutput;
use crate::error::{shape_err, Error, Result};
use crate::numerics::{Real, SparseMap, Tensor};

/// Relative weights of the three loss terms and of the intermediate mattes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub comp: f64,
    pub lap: f64,
    /// Applied to each of the two intermediate fused mattes.
    pub aux: f64,
    pub lap_levels: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { l1: 1.0, comp: 1.0, lap: 1.0, aux: 0.5, lap_levels: 5 }
    }
}

impl LossWeights {
    pub fn from_config(t: &crate::config::TrainConfig) -> Self {
        LossWeights { l1: t.w_l1, comp: t.w_comp, lap: t.w_lap, aux: t.aux_weight, lap_levels: t.lap_levels }
    }
}

/// Targets of one training sample as tensors.
#[derive(Clone, Debug)]
pub struct LossTargets<T: Real = f32> {
    /// `[1×H×W]`.
    pub alpha: Tensor<T>,
    /// `[3×H×W]`.
    pub image: Tensor<T>,
    pub fg: Option<Tensor<T>>,
    pub bg: Option<Tensor<T>>,
}

fn check_same<T: Real>(what: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn loss_l1<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Tensor<T>> {
    check_same("l1 loss", pred, gt)?;
    Ok(pred.sub(gt)?.abs().mean())
}

/// Mean absolute difference between `image` and `α·F + (1 − α)·B` over all
/// three channels.
pub fn loss_comp<T: Real>(pred: &Tensor<T>, fg: &Tensor<T>, bg: &Tensor<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    check_same("composition loss", fg, bg)?;
    check_same("composition loss", fg, image)?;
    let n = pred.numel();
    if fg.shape().len() != 3 || fg.shape()[0] != 3 || fg.numel() != 3 * n || pred.shape()[1..] != fg.shape()[1..] {
        return Err(shape_err(format!("composition loss: α {:?} with F {:?}", pred.shape(), fg.shape())));
    }
    let a3 = pred.gather(Rc::new((0..3 * n).map(|i| i % n).collect()), fg.shape())?;
    let comp = bg.add(&a3.mul(&fg.sub(bg)?)?)?;
    Ok(comp.sub(image)?.abs().mean())
}

const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// 5×5 binomial blur with replicated borders on one `h×w` plane.
pub fn blur_map(h: usize, w: usize) -> SparseMap {
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    SparseMap::from_rows(
        h * w,
        (0..h * w).map(|p| {
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            let mut row = Vec::with_capacity(25);
            for (i, wy) in BINOMIAL.iter().enumerate() {
                for (j, wx) in BINOMIAL.iter().enumerate() {
                    let sy = clamp(y + i as isize - 2, h);
                    let sx = clamp(x + j as isize - 2, w);
                    row.push((sy * w + sx, wy * wx));
                }
            }
            row
        }),
    )
}

/// Per-level `(blur, 2×2 average pool)` maps, finest first.
type Pyramid = Rc<Vec<(Rc<SparseMap>, Rc<SparseMap>)>>;

thread_local! {
    static PYRAMIDS: RefCell<HashMap<(usize, usize, usize), Pyramid>> = RefCell::new(HashMap::new());
}

fn pyramid(h: usize, w: usize, levels: usize) -> Pyramid {
    PYRAMIDS.with(|cache| {
        cache
            .borrow_mut()
            .entry((h, w, levels))
            .or_insert_with(|| {
                Rc::new(
                    (0..levels)
                        .map(|i| {
                            let (lh, lw) = (h >> i, w >> i);
                            let pool = crate::numerics::resample::avg_pool_map(1, lh, lw, 2);
                            (Rc::new(blur_map(lh, lw)), Rc::new(pool))
                        })
                        .collect(),
                )
            })
            .clone()
    })
}

/// Band-pass images `Lap_i = G_i − blur(G_i)` with `G_{i+1} = pool(blur(G_i))`.
pub fn laplacian_pyramid<T: Real>(x: &Tensor<T>, levels: usize) -> Result<Vec<Tensor<T>>> {
    let (h, w) = match x.shape() {
        &[1, h, w] => (h, w),
        s => return Err(shape_err(format!("Laplacian pyramid expects [1×H×W], got {s:?}"))),
    };
    if levels == 0 {
        return Err(Error::Config("Laplacian pyramid needs at least one level".into()));
    }
    let f = 1usize << (levels - 1);
    if h % f != 0 || w % f != 0 || h < f || w < f {
        return Err(shape_err(format!("{h}×{w} not divisible by 2^{}", levels - 1)));
    }
    let maps = pyramid(h, w, levels);
    let mut g = x.clone();
    let mut out = Vec::with_capacity(levels);
    for (i, (blur, pool)) in maps.iter().enumerate() {
        let (lh, lw) = (h >> i, w >> i);
        let b = g.sparse_map(blur.clone(), &[1, lh, lw])?;
        out.push(g.sub(&b)?);
        if i + 1 < levels {
            g = b.sparse_map(pool.clone(), &[1, lh / 2, lw / 2])?;
        }
    }
    Ok(out)
}

/// `Σ_i 2^i · L1(Lap_i(pred), Lap_i(gt))`.
pub fn loss_lap<T: Real>(pred: &Tensor<T>, gt: &Tensor<T>, levels: usize) -> Result<Tensor<T>> {
    check_same("Laplacian loss", pred, gt)?;
    let (a, b) = (laplacian_pyramid(pred, levels)?, laplacian_pyramid(gt, levels)?);
    let mut total: Option<Tensor<T>> = None;
    for (i, (la, lb)) in a.iter().zip(&b).enumerate() {
        let term = loss_l1(la, lb)?.mul_scalar(T::lit((1u64 << i) as f64));
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
    }
    Ok(total.expect("at least one level"))
}

/// Scalar values of the three terms, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub l1: f64,
    pub comp: f64,
    pub lap: f64,
}

/// Weighted sum of the three terms for one matte.
pub fn matte_loss<T: Real>(pred: &Tensor<T>, t: &LossTargets<T>, w: &LossWeights) -> Result<(Tensor<T>, LossParts)> {
    let l1 = loss_l1(pred, &t.alpha)?;
    let mut parts = LossParts { l1: l1.item().as_f64(), ..LossParts::default() };
    let mut total = l1.mul_scalar(T::lit(w.l1));
    if w.comp > 0.0 {
        let (fg, bg) = match (&t.fg, &t.bg) {
            (Some(f), Some(b)) => (f, b),
            _ => return Err(Error::Contract("composition loss needs foreground and background".into())),
        };
        let comp = loss_comp(pred, fg, bg, &t.image)?;
        parts.comp = comp.item().as_f64();
        total = total.add(&comp.mul_scalar(T::lit(w.comp)))?;
    }
    if w.lap > 0.0 {
        let lap = loss_lap(pred, &t.alpha, w.lap_levels)?;
        parts.lap = lap.item().as_f64();
        total = total.add(&lap.mul_scalar(T::lit(w.lap)))?;
    }
    parts.total = total.item().as_f64();
    Ok((total, parts))
}

/// Loss on the final fused matte plus `aux`-weighted losses on the two
/// intermediate fused mattes. Reported parts refer to the final matte.
pub fn loss_total<T: Real>(prm: &PrmOutput<T>, t: &LossTargets<T>, w: &LossWeights) -> Result<(Tensor<T>, LossParts)> {
    let (fin, mut parts) = matte_loss(&prm.alpha2, t, w)?;
    let mut total = fin;
    if w.aux > 0.0 {
        for inter in [&prm.alpha0, &prm.alpha1] {
            let (l, _) = matte_loss(inter, t, w)?;
            total = total.add(&l.mul_scalar(T::lit(w.aux)))?;
        }
    }
    parts.total = total.item().as_f64();
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    fn rand_map(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
        (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn l1_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_map(&mut rng, 4, 4);
        assert_eq!(loss_l1(&t(&[1, 4, 4], a.clone()), &t(&[1, 4, 4], a.clone())).unwrap().item(), 0.0);
        let shifted: Vec<f64> = a.iter().map(|v| v + 0.1).collect();
        let l = loss_l1(&t(&[1, 4, 4], shifted), &t(&[1, 4, 4], a.clone())).unwrap().item();
        assert!((l - 0.1).abs() < 1e-12);
        let b = rand_map(&mut rng, 4, 4);
        let oracle = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 16.0;
        let l = loss_l1(&t(&[1, 4, 4], a), &t(&[1, 4, 4], b)).unwrap().item();
        assert!((l - oracle).abs() < 1e-12);
        assert!(loss_l1(&t(&[1, 2, 2], vec![0.0; 4]), &t(&[1, 1, 4], vec![0.0; 4])).is_err());
    }

    #[test]
    fn comp_examples() {
        let one = t(&[3, 1, 1], vec![1.0; 3]);
        let zero = t(&[3, 1, 1], vec![0.0; 3]);
        let image = t(&[3, 1, 1], vec![0.5; 3]);
        let l = loss_comp(&t(&[1, 1, 1], vec![0.7]), &one, &zero, &image).unwrap().item();
        assert!((l - 0.2).abs() < 1e-12);
        let same = t(&[3, 1, 1], vec![0.3, 0.6, 0.9]);
        let img = same.clone();
        assert_eq!(loss_comp(&t(&[1, 1, 1], vec![0.123]), &same, &same, &img).unwrap().item(), 0.0);
        assert_eq!(loss_comp(&t(&[1, 1, 1], vec![0.5]), &one, &zero, &image).unwrap().item(), 0.0);
    }

    /// Straightforward pyramid with an explicitly padded direct 5×5 filter.
    fn pyramid_oracle(x: &[f64], h: usize, w: usize, levels: usize) -> Vec<Vec<f64>> {
        let k: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];
        let mut g = x.to_vec();
        let (mut h, mut w) = (h, w);
        let mut out = Vec::new();
        for i in 0..levels {
            let (ph, pw) = (h + 4, w + 4);
            let mut padded = vec![0.0; ph * pw];
            for y in 0..ph {
                for xx in 0..pw {
                    let sy = (y as isize - 2).clamp(0, h as isize - 1) as usize;
                    let sx = (xx as isize - 2).clamp(0, w as isize - 1) as usize;
                    padded[y * pw + xx] = g[sy * w + sx];
                }
            }
            let mut blur = vec![0.0; h * w];
            for y in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for a in 0..5 {
                        for b in 0..5 {
                            s += k[a] * k[b] * padded[(y + a) * pw + xx + b];
                        }
                    }
                    blur[y * w + xx] = s / 256.0;
                }
            }
            out.push(g.iter().zip(&blur).map(|(a, b)| a - b).collect());
            if i + 1 < levels {
                let mut next = vec![0.0; (h / 2) * (w / 2)];
                for y in 0..h / 2 {
                    for xx in 0..w / 2 {
                        next[y * (w / 2) + xx] = (blur[2 * y * w + 2 * xx]
                            + blur[2 * y * w + 2 * xx + 1]
                            + blur[(2 * y + 1) * w + 2 * xx]
                            + blur[(2 * y + 1) * w + 2 * xx + 1])
                            / 4.0;
                    }
                }
                g = next;
                h /= 2;
                w /= 2;
            }
        }
        out
    }

    #[test]
    fn lap_matches_pyramid_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (a, b) = (rand_map(&mut rng, 8, 8), rand_map(&mut rng, 8, 8));
        for levels in 1..=4 {
            let pa = pyramid_oracle(&a, 8, 8, levels);
            let pb = pyramid_oracle(&b, 8, 8, levels);
            let oracle: f64 = pa
                .iter()
                .zip(&pb)
                .enumerate()
                .map(|(i, (x, y))| (1 << i) as f64 * x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum::<f64>() / x.len() as f64)
                .sum();
            let got = loss_lap(&t(&[1, 8, 8], a.clone()), &t(&[1, 8, 8], b.clone()), levels).unwrap().item();
            assert!((got - oracle).abs() < 1e-12, "levels {levels}: {got} vs {oracle}");
        }
        assert!(loss_lap(&t(&[1, 8, 8], a.clone()), &t(&[1, 8, 8], b), 5).is_err());
    }

    #[test]
    fn lap_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_map(&mut rng, 16, 16);
        assert_eq!(loss_lap(&t(&[1, 16, 16], a.clone()), &t(&[1, 16, 16], a), 5).unwrap().item(), 0.0);
        let c1 = t(&[1, 16, 16], vec![0.2; 256]);
        let c2 = t(&[1, 16, 16], vec![0.9; 256]);
        assert!(loss_lap(&c1, &c2, 1).unwrap().item().abs() < 1e-12);
    }

    #[test]
    fn total_reduces_to_multiscale_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let maps: Vec<Tensor<f64>> = (0..4).map(|_| t(&[1, 16, 16], rand_map(&mut rng, 16, 16))).collect();
        let prm = PrmOutput { alpha0: maps[0].clone(), alpha1: maps[1].clone(), alpha2: maps[2].clone(), gate1: vec![], gate2: vec![] };
        let targets = LossTargets { alpha: maps[3].clone(), image: Tensor::zeros(&[3, 16, 16]), fg: None, bg: None };
        let w = LossWeights { l1: 1.0, comp: 0.0, lap: 0.0, ..LossWeights::default() };
        let (l, _) = loss_total(&prm, &targets, &w).unwrap();
        let l1 = |m: &Tensor<f64>| loss_l1(m, &maps[3]).unwrap().item();
        let expect = l1(&maps[2]) + 0.5 * (l1(&maps[0]) + l1(&maps[1]));
        assert!((l.item() - expect).abs() < 1e-12);

        let perfect = PrmOutput { alpha0: maps[3].clone(), alpha1: maps[3].clone(), alpha2: maps[3].clone(), gate1: vec![], gate2: vec![] };
        let w = LossWeights { comp: 0.0, ..LossWeights::default() };
        assert_eq!(loss_total(&perfect, &targets, &w).unwrap().0.item(), 0.0);
        assert!(matches!(loss_total(&prm, &targets, &LossWeights::default()), Err(Error::Contract(_))));
    }
}
