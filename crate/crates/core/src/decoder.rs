//! Convolutional decoder with encoder shortcuts, three sigmoid alpha heads,
//! and progressive refinement of the heads into one matte.
//!
//! Feature maps here are channels first, `[C×H×W]`.

use crate::config::DecoderConfig;
use crate::encoder::StageOutputs;
use crate::error::{shape_err, Result};
use crate::numerics::{avg_pool, upsample_bilinear, Builder, Real, Tensor};
use crate::trimap::{Region, Trimap};

const NORM_EPS: f64 = 1e-5;

/// 3×3 conv (stride 1, pad 1) followed by per-channel spatial norm.
#[derive(Clone, Debug)]
pub struct ConvNorm<T: Real = f32> {
    pub weight: Tensor<T>,
    pub norm: (Tensor<T>, Tensor<T>),
}

impl<T: Real> ConvNorm<T> {
    pub fn new(b: &mut Builder<'_, T>, c_in: usize, c_out: usize) -> Result<Self> {
        let std = (2.0 / (9 * c_in) as f64).sqrt();
        Ok(ConvNorm {
            weight: b.trunc_normal("conv.weight", &[c_out, c_in, 3, 3], std)?,
            norm: (b.constant("norm.weight", &[c_out], 1.0)?, b.constant("norm.bias", &[c_out], 0.0)?),
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.conv2d(&self.weight, None, 1, 1)?.spatial_norm(&self.norm.0, &self.norm.1, NORM_EPS)
    }
}

/// Two conv-norm layers with an identity skip.
#[derive(Clone, Debug)]
pub struct ResBlock<T: Real = f32> {
    pub a: ConvNorm<T>,
    pub b: ConvNorm<T>,
}

impl<T: Real> ResBlock<T> {
    pub fn new(b: &mut Builder<'_, T>, c: usize) -> Result<Self> {
        Ok(ResBlock { a: ConvNorm::new(&mut b.sub("a"), c, c)?, b: ConvNorm::new(&mut b.sub("b"), c, c)? })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.a.forward(x)?.relu();
        Ok(x.add(&self.b.forward(&h)?)?.relu())
    }
}

/// Single-channel sigmoid head.
#[derive(Clone, Debug)]
pub struct Head<T: Real = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Head<T> {
    pub fn new(b: &mut Builder<'_, T>, c_in: usize) -> Result<Self> {
        Ok(Head {
            weight: b.trunc_normal("weight", &[1, c_in, 3, 3], (1.0 / (9 * c_in) as f64).sqrt())?,
            bias: b.constant("bias", &[1], 0.0)?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.conv2d(&self.weight, Some(&self.bias), 1, 1)?.sigmoid())
    }
}

/// Shortcut projection: conv-norm then ReLU, spatial size preserved.
pub fn shortcut_project<T: Real>(feature: &Tensor<T>, proj: &ConvNorm<T>) -> Result<Tensor<T>> {
    Ok(proj.forward(feature)?.relu())
}

/// One upsampling level: entry conv, residual blocks, 2× upsample, then the
/// projected shortcut is added.
#[derive(Clone, Debug)]
pub struct Level<T: Real = f32> {
    pub entry: ConvNorm<T>,
    pub blocks: Vec<ResBlock<T>>,
    pub shortcut: ConvNorm<T>,
}

#[derive(Clone, Debug)]
pub struct Decoder<T: Real = f32> {
    pub cfg: DecoderConfig,
    pub neck: Vec<ResBlock<T>>,
    pub levels: Vec<Level<T>>,
    pub head_os8: Head<T>,
    pub head_os4: Head<T>,
    pub head_os1: Head<T>,
}

/// Channel counts of the five shortcut taps (1/16, 1/8, 1/4, 1/2, 1/1).
pub fn tap_channels(embed_dim: usize) -> [usize; 5] {
    [4 * embed_dim, 2 * embed_dim, 2 * embed_dim, 6, 6]
}

impl<T: Real> Decoder<T> {
    pub fn new(b: &mut Builder<'_, T>, cfg: &DecoderConfig, embed_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let bottom = 8 * embed_dim;
        let neck = (0..cfg.neck_blocks).map(|i| ResBlock::new(&mut b.sub(&format!("neck.{i}")), bottom)).collect::<Result<Vec<_>>>()?;
        let taps = tap_channels(embed_dim);
        let mut levels = Vec::new();
        let mut c_in = bottom;
        for l in 0..5 {
            let c = cfg.widths[l];
            let mut lb = b.sub(&format!("level{l}"));
            let entry = ConvNorm::new(&mut lb.sub("entry"), c_in, c)?;
            let blocks = (0..cfg.blocks[l]).map(|i| ResBlock::new(&mut lb.sub(&format!("block{i}")), c)).collect::<Result<Vec<_>>>()?;
            let shortcut = ConvNorm::new(&mut lb.sub("shortcut"), taps[l], c)?;
            levels.push(Level { entry, blocks, shortcut });
            c_in = c;
        }
        Ok(Decoder {
            cfg: cfg.clone(),
            neck,
            head_os8: Head::new(&mut b.sub("head_os8"), cfg.widths[1])?,
            head_os4: Head::new(&mut b.sub("head_os4"), cfg.widths[2])?,
            head_os1: Head::new(&mut b.sub("head_os1"), cfg.widths[4])?,
            levels,
        })
    }
}

/// Raw sigmoid outputs at strides 8, 4 and 1, each `[1×h×w]`.
#[derive(Clone, Debug)]
pub struct AlphaTriple<T: Real = f32> {
    pub os8: Tensor<T>,
    pub os4: Tensor<T>,
    pub os1: Tensor<T>,
}

fn to_chw<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.permute(&[2, 0, 1])
}

/// Bottom-up decoding from the 1/32 stage output.
pub fn decoder_forward<T: Real>(stages: &StageOutputs<T>, image6: &Tensor<T>, dec: &Decoder<T>) -> Result<AlphaTriple<T>> {
    if stages.stages.len() != 4 {
        return Err(shape_err(format!("decoder needs 4 stage outputs, got {}", stages.stages.len())));
    }
    let s1 = to_chw(&stages.stages[0])?;
    let embed = to_chw(&stages.embed)?;
    let taps =
        [to_chw(&stages.stages[2])?, to_chw(&stages.stages[1])?, Tensor::concat(&[&s1, &embed], 0)?, avg_pool(image6, 2)?, image6.clone()];
    let mut x = to_chw(&stages.stages[3])?;
    for blk in &dec.neck {
        x = blk.forward(&x)?;
    }
    let mut heads = [None, None, None];
    for (l, level) in dec.levels.iter().enumerate() {
        x = level.entry.forward(&x)?.relu();
        for blk in &level.blocks {
            x = blk.forward(&x)?;
        }
        x = upsample_bilinear(&x, 2)?;
        if x.shape()[1..] != taps[l].shape()[1..] {
            return Err(shape_err(format!("level {l}: decoder {:?} vs shortcut {:?}", x.shape(), taps[l].shape())));
        }
        x = x.add(&shortcut_project(&taps[l], &level.shortcut)?)?;
        match l {
            1 => heads[0] = Some(dec.head_os8.forward(&x)?),
            2 => heads[1] = Some(dec.head_os4.forward(&x)?),
            4 => heads[2] = Some(dec.head_os1.forward(&x)?),
            _ => {}
        }
    }
    let [os8, os4, os1] = heads.map(|h| h.expect("all levels ran"));
    Ok(AlphaTriple { os8, os4, os1 })
}

// ---- progressive refinement --------------------------------------------------

/// 1 where `eps < α < 1 − eps`, else 0.
pub fn uncertainty_gate(prev: &[f64], eps: f64) -> Vec<f64> {
    prev.iter().map(|&a| if a > eps && a < 1.0 - eps { 1.0 } else { 0.0 }).collect()
}

/// `cur·g + prev·(1 − g)` on plain maps; returns `(fused, g)`.
pub fn prm_step(prev: &[f64], cur: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let g = uncertainty_gate(prev, eps);
    let fused = prev.iter().zip(cur).zip(&g).map(|((&p, &c), &g)| c * g + p * (1.0 - g)).collect();
    (fused, g)
}

/// Fused mattes at full input resolution, each `[1×H×W]`.
#[derive(Clone, Debug)]
pub struct PrmOutput<T: Real = f32> {
    /// Resized stride-8 output.
    pub alpha0: Tensor<T>,
    /// After fusing the stride-4 output.
    pub alpha1: Tensor<T>,
    /// After fusing the stride-1 output; the final prediction.
    pub alpha2: Tensor<T>,
    pub gate1: Vec<f64>,
    pub gate2: Vec<f64>,
}

fn fuse<T: Real>(prev: &Tensor<T>, cur: &Tensor<T>, eps: f64) -> Result<(Tensor<T>, Vec<f64>)> {
    let g = uncertainty_gate(&prev.to_f64_vec(), eps);
    let gt = Tensor::from_f64(prev.shape(), &g)?;
    let inv = Tensor::from_f64(prev.shape(), &g.iter().map(|v| 1.0 - v).collect::<Vec<_>>())?;
    Ok((cur.mul(&gt)?.add(&prev.mul(&inv)?)?, g))
}

/// Resizes the raw outputs to full resolution and fuses coarse to fine; the
/// gate is a constant of the forward pass.
pub fn prm_fuse<T: Real>(triple: &AlphaTriple<T>, eps: f64) -> Result<PrmOutput<T>> {
    let alpha0 = upsample_bilinear(&triple.os8, 8)?;
    let up4 = upsample_bilinear(&triple.os4, 4)?;
    if alpha0.shape() != up4.shape() || up4.shape() != triple.os1.shape() {
        return Err(shape_err(format!("PRM inputs resize to {:?}, {:?}, {:?}", alpha0.shape(), up4.shape(), triple.os1.shape())));
    }
    let (alpha1, gate1) = fuse(&alpha0, &up4, eps)?;
    let (alpha2, gate2) = fuse(&alpha1, &triple.os1, eps)?;
    Ok(PrmOutput { alpha0, alpha1, alpha2, gate1, gate2 })
}

/// Sets α to 1 on trimap FG and 0 on trimap BG.
pub fn clamp_to_trimap(alpha: &mut [f32], trimap: &Trimap) {
    for (a, r) in alpha.iter_mut().zip(&trimap.labels) {
        match r {
            Region::Fg => *a = 1.0,
            Region::Bg => *a = 0.0,
            Region::Uk => {}
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamStore;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prm_examples() {
        let (f, g) = prm_step(&[0.0, 1.0, 1.0, 0.0], &[0.3, 0.8, 0.5, 0.9], 0.0);
        assert_eq!(f, vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(g, vec![0.0; 4]);
        let cur = [0.1, 0.77, 0.33, 0.9];
        assert_eq!(prm_step(&[0.5; 4], &cur, 0.0).0, cur.to_vec());
        let (f, _) = prm_step(&[0.0, 1.0, 0.3, 0.7], &[0.9; 4], 0.0);
        assert_eq!(f, vec![0.0, 1.0, 0.9, 0.9]);
        let (_, g) = prm_step(&[0.005, 0.5, 0.995], &[0.0; 3], 0.01);
        assert_eq!(g, vec![0.0, 1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn prm_preserves_confident_pixels(
            prev in proptest::collection::vec(prop_oneof![Just(0.0f64), Just(1.0f64), 0.0f64..=1.0], 16),
            cur in proptest::collection::vec(0.0f64..=1.0, 16),
        ) {
            let (fused, g) = prm_step(&prev, &cur, 0.0);
            for i in 0..16 {
                prop_assert!(g[i] == 0.0 || g[i] == 1.0);
                prop_assert_eq!(g[i] == 1.0, prev[i] > 0.0 && prev[i] < 1.0);
                if prev[i] == 0.0 || prev[i] == 1.0 {
                    prop_assert_eq!(fused[i].to_bits(), prev[i].to_bits());
                }
            }
            prop_assert_eq!(prm_step(&fused, &fused, 0.0).0, fused.clone());
        }
    }

    #[test]
    fn tensor_prm_matches_plain_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut map = |h: usize, w: usize| {
            let v: Vec<f64> = (0..h * w).map(|_| [0.0, 1.0, rng.random_range(0.0..1.0)][rng.random_range(0..3)]).collect();
            Tensor::<f64>::from_vec(&[1, h, w], v).unwrap()
        };
        let triple = AlphaTriple { os8: map(2, 2), os4: map(4, 4), os1: map(16, 16) };
        let out = prm_fuse(&triple, 0.0).unwrap();
        let a0 = upsample_bilinear(&triple.os8, 8).unwrap().to_vec();
        let a4 = upsample_bilinear(&triple.os4, 4).unwrap().to_vec();
        let (f1, g1) = prm_step(&a0, &a4, 0.0);
        let (f2, g2) = prm_step(&f1, &triple.os1.to_vec(), 0.0);
        assert_eq!(out.alpha1.to_vec(), f1);
        assert_eq!(out.alpha2.to_vec(), f2);
        assert_eq!((out.gate1, out.gate2), (g1, g2));
    }

    fn conv_oracle(x: &[f64], c_in: usize, h: usize, w: usize, k: &[f64], c_out: usize) -> Vec<f64> {
        let mut y = vec![0.0; c_out * h * w];
        for o in 0..c_out {
            for yy in 0..h {
                for xx in 0..w {
                    let mut s = 0.0;
                    for c in 0..c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (yy as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    s += k[((o * c_in + c) * 3 + ky) * 3 + kx] * x[(c * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                    }
                    y[(o * h + yy) * w + xx] = s;
                }
            }
        }
        y
    }

    #[test]
    fn shortcut_matches_layer_oracle() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let proj = ConvNorm::new(&mut Builder::new(&mut store, &mut rng, "sc"), 3, 4).unwrap();
        for v in proj.norm.0.data_mut().iter_mut() {
            *v = rng.random_range(0.5..1.5);
        }
        for v in proj.norm.1.data_mut().iter_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        let x: Vec<f64> = (0..3 * 5 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = shortcut_project(&Tensor::from_vec(&[3, 5, 6], x.clone()).unwrap(), &proj).unwrap();
        assert_eq!(got.shape(), &[4, 5, 6]);
        let conv = conv_oracle(&x, 3, 5, 6, &proj.weight.to_vec(), 4);
        let (g, b) = (proj.norm.0.to_vec(), proj.norm.1.to_vec());
        let got = got.to_vec();
        for c in 0..4 {
            let ch = &conv[c * 30..(c + 1) * 30];
            let mean = ch.iter().sum::<f64>() / 30.0;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 30.0;
            for p in 0..30 {
                let e = ((ch[p] - mean) / (var + NORM_EPS).sqrt() * g[c] + b[c]).max(0.0);
                assert!((got[c * 30 + p] - e).abs() < 1e-10);
            }
        }
        let zero = shortcut_project(&Tensor::<f64>::zeros(&[3, 5, 6]), &proj).unwrap().to_vec();
        for c in 0..4 {
            assert!(zero[c * 30..(c + 1) * 30].iter().all(|&v| v == b[c].max(0.0)));
        }
    }

    #[test]
    fn clamp_rule() {
        let t = Trimap::new(1, 3, vec![Region::Fg, Region::Uk, Region::Bg]).unwrap();
        let mut a = vec![0.2, 0.4, 0.6];
        clamp_to_trimap(&mut a, &t);
        assert_eq!(a, vec![1.0, 0.4, 0.0]);
    }
}
