//! Losses, synthetic data, augmentation and the optimization loop.

pub mod data;
pub mod losses;
pub mod optim;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::MatteFormer;
use crate::numerics::{Real, Tensor};
use crate::trimap::{AlphaMatte, RgbImage};

pub use data::{augment_sample, synth_sample, synthetic_pool, PreparedSample, TrainSample};
pub use losses::{loss_comp, loss_l1, loss_lap, loss_total, LossParts, LossTargets, LossWeights};
pub use optim::TrainState;

/// Forward, loss, backward and one Adam update on a batch.
///
/// The batch loss is the mean of the per-sample totals; the returned parts are
/// batch means as well. A non-finite loss aborts before any parameter moves.
pub fn train_step<T: Real>(
    state: &mut TrainState,
    model: &MatteFormer<T>,
    batch: &[PreparedSample<T>],
    weights: &LossWeights,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    model.params.zero_grad();
    let mut total: Option<Tensor<T>> = None;
    let mut parts = LossParts::default();
    for s in batch {
        let out = model.forward(&s.input, &s.trimap, None)?;
        let (l, p) = loss_total(&out.prm, &s.targets, weights)?;
        parts.l1 += p.l1;
        parts.comp += p.comp;
        parts.lap += p.lap;
        total = Some(match total {
            None => l,
            Some(t) => t.add(&l)?,
        });
    }
    let n = batch.len() as f64;
    let loss = total.expect("non-empty batch").mul_scalar(T::lit(1.0 / n));
    parts = LossParts { total: loss.item().as_f64(), l1: parts.l1 / n, comp: parts.comp / n, lap: parts.lap / n };
    if !parts.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {} at step {} (l1 {}, comp {}, lap {})",
            parts.total,
            state.step + 1,
            parts.l1,
            parts.comp,
            parts.lap
        )));
    }
    loss.backward()?;
    state.apply(&model.params.tensors())?;
    Ok(parts)
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub parts: LossParts,
}

pub const LOG_HEADER: &str = "step,loss,l1,comp,lap";

impl LogRow {
    pub fn csv(&self) -> String {
        let p = &self.parts;
        format!("{},{:.6},{:.6},{:.6},{:.6}", self.step, p.total, p.l1, p.comp, p.lap)
    }
}

/// Seed of the `i`-th sample of step `step` in a run seeded with `seed`.
fn sample_seed(seed: u64, step: usize, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((step as u64) << 16 | i as u64)
}

/// Augmented samples for one step, drawn from `pool`.
pub fn draw_batch(pool: &[(RgbImage, AlphaMatte, RgbImage)], cfg: &TrainConfig, step: usize) -> Result<Vec<TrainSample>> {
    if pool.is_empty() {
        return Err(Error::Contract("empty sample pool".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, step, usize::MAX >> 16));
    (0..cfg.batch_size)
        .map(|i| {
            let (fg, alpha, _) = &pool[rng.random_range(0..pool.len())];
            let (_, _, bg) = &pool[rng.random_range(0..pool.len())];
            augment_sample(fg, alpha, bg, &cfg.augment, cfg.crop, sample_seed(cfg.seed, step, i))
        })
        .collect()
}

/// Where a run writes its log and checkpoints.
pub struct RunOutput<'a> {
    pub dir: &'a Path,
}

/// Trains `model` for `cfg.steps` steps on augmented draws from `pool`.
///
/// With an output directory, `train_log.csv` receives a row every
/// `log_every` steps (and on the first and last), `step_<n>.ckpt` every
/// `checkpoint_every` steps, and `final.ckpt` at the end. `on_log` sees the
/// same rows.
pub fn train<T: Real>(
    model: &MatteFormer<T>,
    cfg: &TrainConfig,
    pool: &[(RgbImage, AlphaMatte, RgbImage)],
    out: Option<RunOutput<'_>>,
    mut on_log: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    let weights = LossWeights::from_config(cfg);
    let mut state = TrainState::from_config(&model.params.tensors(), cfg);
    let mut log = match &out {
        Some(o) => {
            std::fs::create_dir_all(o.dir)?;
            let mut w = BufWriter::new(File::create(o.dir.join("train_log.csv"))?);
            writeln!(w, "{LOG_HEADER}")?;
            Some(w)
        }
        None => None,
    };
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch: Vec<PreparedSample<T>> = draw_batch(pool, cfg, step)?.iter().map(|s| s.prepare()).collect::<Result<_>>()?;
        let parts = train_step(&mut state, model, &batch, &weights)?;
        let row = LogRow { step, parts };
        rows.push(row);
        if step == 1 || step == cfg.steps || (cfg.log_every > 0 && step % cfg.log_every == 0) {
            on_log(&row);
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", row.csv())?;
                w.flush()?;
            }
        }
        if let Some(o) = &out {
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                model.save(&o.dir.join(format!("step_{step}.ckpt")))?;
            }
        }
    }
    if let Some(o) = &out {
        model.save(&o.dir.join("final.ckpt"))?;
    }
    Ok(rows)
}
