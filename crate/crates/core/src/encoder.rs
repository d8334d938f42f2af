//! Four-stage hierarchical encoder over the 6-plane network input.

use std::rc::Rc;

use crate::config::EncoderConfig;
use crate::error::{shape_err, Result};
use crate::numerics::{Builder, Real, Tensor};
use crate::prior_attention::{past_block_forward, PastBlock, PriorMemory, Probe};
use crate::trimap::{region_downsample, Trimap};

pub const PATCH: usize = 4;
const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Feature maps collected before each patch merging, channels last.
#[derive(Clone, Debug)]
pub struct StageOutputs<T: Real = f32> {
    /// Normalized patch embedding `[(H/4)×(W/4)×C]`.
    pub embed: Tensor<T>,
    /// `[(H/2^{s+2})×(W/2^{s+2})×C·2^s]` for s = 0..4.
    pub stages: Vec<Tensor<T>>,
    /// Triples held by each stage's memory when the stage finished.
    pub memory_lens: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct PatchMerging<T: Real = f32> {
    pub norm: (Tensor<T>, Tensor<T>),
    /// `[4d × 2d]`, no bias.
    pub reduction: Tensor<T>,
}

impl<T: Real> PatchMerging<T> {
    pub fn new(b: &mut Builder<'_, T>, dim: usize) -> Result<Self> {
        Ok(PatchMerging {
            norm: (b.constant("norm.weight", &[4 * dim], 1.0)?, b.constant("norm.bias", &[4 * dim], 0.0)?),
            reduction: b.trunc_normal("reduction.weight", &[4 * dim, 2 * dim], INIT_STD)?,
        })
    }
}

/// Gathers each 2×2 neighborhood into `[(H/2)×(W/2)×4d]` in the order
/// (0,0), (1,0), (0,1), (1,1) as (row, col) offsets.
pub fn merge_neighborhoods<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, d) = match x.shape() {
        &[h, w, d] => (h, w, d),
        s => return Err(shape_err(format!("patch merging expects [H×W×d], got {s:?}"))),
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err(format!("patch merging needs even sides, got {h}×{w}")));
    }
    let mut idx = Vec::with_capacity(h * w * d);
    for y in 0..h / 2 {
        for xx in 0..w / 2 {
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                let src = ((2 * y + dy) * w + 2 * xx + dx) * d;
                idx.extend(src..src + d);
            }
        }
    }
    x.gather(Rc::new(idx), &[h / 2, w / 2, 4 * d])
}

pub fn patch_merging<T: Real>(x: &Tensor<T>, pm: &PatchMerging<T>) -> Result<Tensor<T>> {
    merge_neighborhoods(x)?.layer_norm(&pm.norm.0, &pm.norm.1, LN_EPS)?.linear(&pm.reduction, None)
}

#[derive(Clone, Debug)]
pub struct Stage<T: Real = f32> {
    pub blocks: Vec<PastBlock<T>>,
    pub norm: (Tensor<T>, Tensor<T>),
    /// Present on the first three stages.
    pub merge: Option<PatchMerging<T>>,
}

#[derive(Clone, Debug)]
pub struct Encoder<T: Real = f32> {
    pub cfg: EncoderConfig,
    /// `[6·16 × C]`; rows 0..48 read the RGB planes, 48..96 the trimap planes.
    pub embed_w: Tensor<T>,
    pub embed_b: Tensor<T>,
    pub embed_norm: (Tensor<T>, Tensor<T>),
    pub stages: Vec<Stage<T>>,
}

impl<T: Real> Encoder<T> {
    pub fn new(b: &mut Builder<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let k = cfg.input_channels * PATCH * PATCH;
        let mut pe = b.sub("patch_embed");
        let embed_w = pe.trunc_normal("proj.weight", &[k, c], INIT_STD)?;
        let embed_b = pe.constant("proj.bias", &[c], 0.0)?;
        let embed_norm = (pe.constant("norm.weight", &[c], 1.0)?, pe.constant("norm.bias", &[c], 0.0)?);
        let mut stages = Vec::new();
        for s in 0..4 {
            let dim = cfg.dim(s);
            let mut sb = b.sub(&format!("stage{}", s + 1));
            let blocks = (0..cfg.depths[s])
                .map(|i| {
                    let n_prior = cfg.prior_mode.prior_count(i);
                    PastBlock::new(&mut sb.sub(&format!("block{}", i + 1)), dim, cfg.heads[s], cfg.window, i, n_prior)
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = (sb.constant("norm.weight", &[dim], 1.0)?, sb.constant("norm.bias", &[dim], 0.0)?);
            let merge = if s < 3 { Some(PatchMerging::new(&mut sb.sub("merge"), dim)?) } else { None };
            stages.push(Stage { blocks, norm, merge });
        }
        Ok(Encoder { cfg: cfg.clone(), embed_w, embed_b, embed_norm, stages })
    }
}

/// Non-overlapping 4×4 patches of `[C×H×W]` as `[(H/4·W/4) × C·16]` rows,
/// column `c·16 + ky·4 + kx`.
pub fn unfold_patches<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(shape_err(format!("expected [C×H×W] image, got {s:?}"))),
    };
    if h % PATCH != 0 || w % PATCH != 0 {
        return Err(shape_err(format!("{h}×{w} not divisible by patch {PATCH}")));
    }
    let (gh, gw) = (h / PATCH, w / PATCH);
    let k = c * PATCH * PATCH;
    let mut idx = Vec::with_capacity(gh * gw * k);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for ky in 0..PATCH {
                    for kx in 0..PATCH {
                        idx.push((ch * h + py * PATCH + ky) * w + px * PATCH + kx);
                    }
                }
            }
        }
    }
    image.gather(Rc::new(idx), &[gh * gw, k])
}

/// `[6×H×W] → [(H/4)×(W/4)×C]`: patch projection then layer norm.
pub fn patch_embed<T: Real>(image6: &Tensor<T>, enc: &Encoder<T>) -> Result<Tensor<T>> {
    let (h, w) = check_input(image6, enc.cfg.input_channels)?;
    let tokens = unfold_patches(image6)?.linear(&enc.embed_w, Some(&enc.embed_b))?;
    let tokens = tokens.layer_norm(&enc.embed_norm.0, &enc.embed_norm.1, LN_EPS)?;
    tokens.reshape(&[h / PATCH, w / PATCH, enc.cfg.embed_dim])
}

fn check_input<T: Real>(image6: &Tensor<T>, channels: usize) -> Result<(usize, usize)> {
    match image6.shape() {
        &[c, h, w] if c == channels => {
            if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
                Err(shape_err(format!("input {h}×{w} must be a positive multiple of 32 on each side")))
            } else {
                Ok((h, w))
            }
        }
        s => Err(shape_err(format!("expected [{channels}×H×W] input, got {s:?}"))),
    }
}

/// Runs all four stages. The trimap is majority-downsampled to each stage's
/// token grid and each stage starts with an empty prior memory.
pub fn encoder_forward<T: Real>(
    image6: &Tensor<T>,
    trimap: &Trimap,
    enc: &Encoder<T>,
    mut probe: Option<&mut Probe>,
) -> Result<StageOutputs<T>> {
    let (h, w) = check_input(image6, enc.cfg.input_channels)?;
    if (trimap.height, trimap.width) != (h, w) {
        return Err(shape_err(format!("trimap {}×{} for a {h}×{w} image", trimap.height, trimap.width)));
    }
    let embed = patch_embed(image6, enc)?;
    let mut x = embed.clone();
    let mut stages = Vec::with_capacity(4);
    let mut memory_lens = Vec::with_capacity(4);
    let mut memory = PriorMemory::new(0);
    for (s, stage) in enc.stages.iter().enumerate() {
        let regions = region_downsample(trimap, PATCH << s)?;
        memory.clear(s + 1);
        for blk in &stage.blocks {
            x = past_block_forward(&x, &regions, &mut memory, blk, enc.cfg.prior_mode, probe.as_deref_mut())?;
        }
        memory_lens.push(memory.len());
        stages.push(x.layer_norm(&stage.norm.0, &stage.norm.1, LN_EPS)?);
        if let Some(pm) = &stage.merge {
            x = patch_merging(&x, pm)?;
        }
    }
    Ok(StageOutputs { embed, stages, memory_lens })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamStore;
    use crate::prior_attention::PriorMode;
    use crate::trimap::Region;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg(mode: PriorMode) -> EncoderConfig {
        EncoderConfig { embed_dim: 8, depths: [1, 1, 2, 1], heads: [1, 2, 2, 4], window: 4, prior_mode: mode, input_channels: 6 }
    }

    fn build(cfg: &EncoderConfig, seed: u64) -> (ParamStore<f64>, Encoder<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::new(&mut Builder::new(&mut store, &mut rng, "enc"), cfg).unwrap();
        (store, enc)
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn patch_embed_examples() {
        let (_s, enc) = build(&toy_cfg(PriorMode::None), 1);
        let zero = Tensor::<f64>::zeros(&[6, 32, 32]);
        let y = patch_embed(&zero, &enc).unwrap();
        assert_eq!(y.shape(), &[8, 8, 8]);
        let v = y.to_vec();
        assert!(v.chunks(8).all(|t| t == &v[..8]));
        let (_s, enc) = build(&toy_cfg(PriorMode::None), 1);
        assert_eq!(patch_embed(&Tensor::<f64>::zeros(&[6, 64, 64]), &enc).unwrap().shape(), &[16, 16, 8]);
        assert!(patch_embed(&Tensor::<f64>::zeros(&[6, 40, 64]), &enc).is_err());
    }

    #[test]
    fn unfold_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = rand_tensor(&mut rng, &[6, 8, 8]);
        let got = unfold_patches(&img).unwrap().to_vec();
        let src = img.to_vec();
        for py in 0..2 {
            for px in 0..2 {
                let row = py * 2 + px;
                for c in 0..6 {
                    for ky in 0..4 {
                        for kx in 0..4 {
                            let col = c * 16 + ky * 4 + kx;
                            assert_eq!(got[row * 96 + col], src[(c * 8 + py * 4 + ky) * 8 + px * 4 + kx]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn merging_examples() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pm = PatchMerging::new(&mut Builder::new(&mut store, &mut rng, "m"), 3).unwrap();
        let x = rand_tensor(&mut rng, &[2, 2, 3]);
        assert_eq!(patch_merging(&x, &pm).unwrap().shape(), &[1, 1, 6]);
        let c = Tensor::<f64>::from_vec(&[4, 4, 3], [0.2, -1.0, 0.5].repeat(16)).unwrap();
        let y = patch_merging(&c, &pm).unwrap().to_vec();
        assert!(y.chunks(6).all(|t| t == &y[..6]));
        assert!(patch_merging(&rand_tensor(&mut rng, &[3, 4, 3]), &pm).is_err());

        // index oracle on a 4×4 grid: value = grid index
        let idx = Tensor::<f64>::from_vec(&[4, 4, 1], (0..16).map(|v| v as f64).collect()).unwrap();
        let got = merge_neighborhoods(&idx).unwrap().to_vec();
        let mut expect = Vec::new();
        for y in 0..2 {
            for x in 0..2 {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    expect.push(((2 * y + dy) * 4 + 2 * x + dx) as f64);
                }
            }
        }
        assert_eq!(got, expect);
    }

    #[test]
    fn stage_shapes_follow_halving_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for mode in [PriorMode::None, PriorMode::UkFgBgMemory] {
            let (_s, enc) = build(&toy_cfg(mode), 5);
            for (h, w) in [(64, 64), (32, 96)] {
                let img = rand_tensor(&mut rng, &[6, h, w]);
                let labels = (0..h * w).map(|_| Region::ALL[rng.random_range(0..3)]).collect();
                let tri = Trimap::new(h, w, labels).unwrap();
                let out = encoder_forward(&img, &tri, &enc, None).unwrap();
                assert_eq!(out.embed.shape(), &[h / 4, w / 4, 8]);
                for s in 0..4 {
                    assert_eq!(out.stages[s].shape(), &[h >> (s + 2), w >> (s + 2), 8 << s]);
                }
                let expect = if mode.uses_memory() { vec![1, 1, 2, 1] } else { vec![0; 4] };
                assert_eq!(out.memory_lens, expect);
            }
        }
    }

    #[test]
    fn trimap_size_mismatch_is_rejected() {
        let (_s, enc) = build(&toy_cfg(PriorMode::Uk), 6);
        let img = Tensor::<f64>::zeros(&[6, 64, 64]);
        assert!(encoder_forward(&img, &Trimap::filled(32, 64, Region::Fg), &enc, None).is_err());
    }
}
