//! The full matting network: encoder, decoder and refinement.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{DecoderConfig, EncoderConfig};
use crate::decoder::{clamp_to_trimap, decoder_forward, prm_fuse, AlphaTriple, Decoder, PrmOutput};
use crate::encoder::{encoder_forward, Encoder, StageOutputs};
use crate::error::{shape_err, Result};
use crate::numerics::{checkpoint, no_grad, Builder, ParamStore, Real, Tensor};
use crate::prior_attention::Probe;
use crate::trimap::{one_hot_trimap, AlphaMatte, RgbImage, Trimap};

pub struct MatteFormer<T: Real = f32> {
    pub params: ParamStore<T>,
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

/// Everything a forward pass produces.
pub struct Forward<T: Real = f32> {
    pub stages: StageOutputs<T>,
    pub triple: AlphaTriple<T>,
    pub prm: PrmOutput<T>,
}

/// RGB planes followed by the one-hot trimap planes (BG, UK, FG), `[6×H×W]`.
pub fn input_tensor<T: Real>(image: &RgbImage, trimap: &Trimap) -> Result<Tensor<T>> {
    if (image.height, image.width) != (trimap.height, trimap.width) {
        return Err(shape_err(format!("image {}×{} with trimap {}×{}", image.height, image.width, trimap.height, trimap.width)));
    }
    Tensor::concat(&[&image.to_tensor(), &one_hot_trimap(trimap)], 0)
}

impl<T: Real> MatteFormer<T> {
    /// Builds a freshly initialized model; parameters are drawn from `seed`.
    pub fn new(enc: &EncoderConfig, dec: &DecoderConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(&mut Builder::new(&mut params, &mut rng, "enc"), enc)?;
        let decoder = Decoder::new(&mut Builder::new(&mut params, &mut rng, "dec"), dec, enc.embed_dim)?;
        Ok(MatteFormer { params, encoder, decoder })
    }

    pub fn forward(&self, image6: &Tensor<T>, trimap: &Trimap, probe: Option<&mut Probe>) -> Result<Forward<T>> {
        let stages = encoder_forward(image6, trimap, &self.encoder, probe)?;
        let triple = decoder_forward(&stages, image6, &self.decoder)?;
        let prm = prm_fuse(&triple, self.decoder.cfg.prm_eps)?;
        Ok(Forward { stages, triple, prm })
    }

    /// Final matte without recording gradients, clamped to the trimap when
    /// the decoder config asks for it.
    pub fn predict(&self, image: &RgbImage, trimap: &Trimap, probe: Option<&mut Probe>) -> Result<AlphaMatte> {
        no_grad(|| {
            let out = self.forward(&input_tensor(image, trimap)?, trimap, probe)?;
            let mut alpha: Vec<f32> = out.prm.alpha2.to_f64_vec().into_iter().map(|v| v as f32).collect();
            if self.decoder.cfg.clamp_to_trimap {
                clamp_to_trimap(&mut alpha, trimap);
            }
            AlphaMatte::from_clamped(image.height, image.width, alpha)
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.params, path)
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        checkpoint::load(&self.params, path)
    }

    pub fn count_params(&self) -> ParamCount {
        count_params(&self.params)
    }
}

/// Learnable scalars, in total and grouped by the first two name segments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub by_module: BTreeMap<String, usize>,
    /// Scalars in attention bias tables.
    pub bias_slots: usize,
}

impl ParamCount {
    /// Sum over modules whose name starts with `prefix`.
    pub fn under(&self, prefix: &str) -> usize {
        self.by_module.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v).sum()
    }
}

pub fn count_params<T: Real>(store: &ParamStore<T>) -> ParamCount {
    let mut by_module = BTreeMap::new();
    let mut bias_slots = 0;
    for p in store.iter() {
        let n = p.tensor.numel();
        let key: Vec<&str> = p.name.split('.').take(2).collect();
        *by_module.entry(key.join(".")).or_insert(0) += n;
        if p.name.ends_with("bias_table") {
            bias_slots += n;
        }
    }
    ParamCount { total: store.total(), by_module, bias_slots }
}

/// Bias-table scalars implied by an encoder config: per block,
/// `heads · ((2M−1)² + N_p)`.
pub fn symbolic_bias_slots(cfg: &EncoderConfig) -> usize {
    let r = 2 * cfg.window - 1;
    (0..4).map(|s| (0..cfg.depths[s]).map(|b| cfg.heads[s] * (r * r + cfg.prior_mode.prior_count(b))).sum::<usize>()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::prior_attention::PriorMode;
    use crate::trimap::Region;

    #[test]
    fn toy_model_runs_end_to_end() {
        let cfg = Config::toy();
        let model = MatteFormer::<f32>::new(&cfg.encoder, &cfg.decoder, 0).unwrap();
        let img = RgbImage::filled(64, 64, [0.2, 0.5, 0.8]);
        let mut labels = vec![Region::Bg; 64 * 64];
        for (i, l) in labels.iter_mut().enumerate() {
            let (y, x) = (i / 64, i % 64);
            if (16..48).contains(&y) && (16..48).contains(&x) {
                *l = if (24..40).contains(&y) && (24..40).contains(&x) { Region::Fg } else { Region::Uk };
            }
        }
        let tri = Trimap::new(64, 64, labels).unwrap();
        let out = model.forward(&input_tensor(&img, &tri).unwrap(), &tri, None).unwrap();
        assert_eq!(out.triple.os8.shape(), &[1, 8, 8]);
        assert_eq!(out.triple.os4.shape(), &[1, 16, 16]);
        assert_eq!(out.triple.os1.shape(), &[1, 64, 64]);
        for t in [&out.triple.os8, &out.triple.os4, &out.triple.os1] {
            assert!(t.to_vec().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let alpha = model.predict(&img, &tri, None).unwrap();
        for (a, r) in alpha.values.iter().zip(&tri.labels) {
            match r {
                Region::Fg => assert_eq!(*a, 1.0),
                Region::Bg => assert_eq!(*a, 0.0),
                Region::Uk => {}
            }
        }
    }

    #[test]
    fn one_conv_counts_ten() {
        let mut store = ParamStore::<f32>::new();
        store.register("conv.weight".into(), &[1, 1, 3, 3], vec![0.0; 9]).unwrap();
        store.register("conv.bias".into(), &[1], vec![0.0]).unwrap();
        assert_eq!(count_params(&store).total, 10);
    }

    #[test]
    fn bias_slots_match_symbolic_count() {
        for mode in PriorMode::ALL {
            let mut cfg = Config::toy();
            cfg.encoder.prior_mode = mode;
            let model = MatteFormer::<f32>::new(&cfg.encoder, &cfg.decoder, 0).unwrap();
            assert_eq!(model.count_params().bias_slots, symbolic_bias_slots(&cfg.encoder));
        }
    }
}
