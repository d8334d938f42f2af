//! Quick built-in oracle checks, run by `matteformer selfcheck`.
//!
//! Each check compares library output against a direct loop computation or
//! an invariant and finishes in well under a second.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, EvalConfig};
use crate::decoder::prm_step;
use crate::error::Result;
use crate::eval::compute_metrics;
use crate::numerics::{check_leaves, checkpoint, Builder, ParamStore, Tensor};
use crate::prior_attention::{compute_prior_tokens, past_block_forward, BiasTable, PastBlock, PriorMemory, PriorMode};
use crate::training::TrainState;
use crate::trimap::{AlphaMatte, Region, RegionMap, Trimap};
use crate::MatteFormer;

/// Outcome of one check.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random_regions(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> RegionMap {
    let allowed: Vec<Region> = Region::ALL.into_iter().filter(|_| rng.random::<f64>() < 0.7).collect();
    let allowed = if allowed.is_empty() { vec![Region::Uk] } else { allowed };
    let labels = (0..rows * cols).map(|_| allowed[rng.random_range(0..allowed.len())]).collect();
    RegionMap { rows, cols, labels }
}

fn prior_tokens() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (rows, cols, d) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..5));
        let regions = random_regions(&mut rng, rows, cols);
        let x: Vec<f64> = (0..rows * cols * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = compute_prior_tokens(&Tensor::from_vec(&[rows * cols, d], x.clone())?, &regions)?.to_vec();
        for (k, region) in [Region::Uk, Region::Fg, Region::Bg].into_iter().enumerate() {
            let members: Vec<usize> = (0..rows * cols).filter(|&i| regions.labels[i] == region).collect();
            for j in 0..d {
                let want = if members.is_empty() { 0.0 } else { members.iter().map(|&i| x[i * d + j]).sum::<f64>() / members.len() as f64 };
                worst = worst.max((got[k * d + j] - want).abs());
            }
        }
    }
    Ok((worst < 1e-9, format!("max |Δ| {worst:.2e} over 50 cases")))
}

fn prm_invariants() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bad = 0;
    for _ in 0..500 {
        let prev: Vec<f64> = (0..16)
            .map(|_| match rng.random_range(0..3) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.random_range(0.0..1.0),
            })
            .collect();
        let cur: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
        let (fused, g) = prm_step(&prev, &cur, 0.0);
        for i in 0..16 {
            let confident = prev[i] == 0.0 || prev[i] == 1.0;
            if (g[i] != 0.0 && g[i] != 1.0) || (confident && fused[i] != prev[i]) || (!confident && fused[i] != cur[i]) {
                bad += 1;
            }
        }
    }
    Ok((bad == 0, format!("{bad} violations in 8000 pixels")))
}

fn metrics_zero() -> Result<(bool, String)> {
    let a = AlphaMatte::from_clamped(16, 16, (0..256).map(|i| ((i as f32) * 0.11).sin().abs()))?;
    let t = Trimap::new(16, 16, (0..256).map(|i| if (4..12).contains(&(i / 16)) { Region::Uk } else { Region::Bg }).collect())?;
    let r = compute_metrics(&a, &a, &t, &EvalConfig::default())?;
    let mut b = a.clone();
    for v in b.values[64..164].iter_mut() {
        *v = (*v + 0.1).min(1.0);
    }
    let expect: f64 = b.values[64..164].iter().zip(&a.values[64..164]).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / 1000.0;
    let s = compute_metrics(&b, &a, &t, &EvalConfig::default())?;
    let ok = r.sad == 0.0 && r.mse == 0.0 && r.grad == 0.0 && r.conn == 0.0 && (s.sad - expect).abs() < 1e-9;
    Ok((ok, format!("identical → ({}, {}, {}, {}); SAD {:.6} vs {:.6}", r.sad, r.mse, r.grad, r.conn, s.sad, expect)))
}

fn block_gradients() -> Result<(bool, String)> {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mode = PriorMode::UkFgBgMemory;
    let blk = PastBlock::new(&mut Builder::new(&mut store, &mut rng, "blk"), 4, 2, 2, 1, mode.prior_count(1))?;
    let x = Tensor::from_vec(&[4, 4, 4], (0..64).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let regions = random_regions(&mut rng, 4, 4);
    let stored = Tensor::from_vec(&[3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let probe = Tensor::from_vec(&[4, 4, 4], (0..64).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let f = || {
        let mut mem = PriorMemory::new(0);
        mem.push(stored.clone())?;
        past_block_forward(&x, &regions, &mut mem, &blk, mode, None)?.mul(&probe).map(|y| y.sum())
    };
    let leaves = store.tensors();
    let rep = check_leaves(f, &leaves, None, 1e-5)?;
    Ok((rep.max_rel_error < 1e-6, format!("max rel err {:.2e} over {} coordinates", rep.max_rel_error, rep.checked)))
}

fn bias_table() -> Result<(bool, String)> {
    let mut worst = String::new();
    let mut ok = true;
    for m in [2usize, 4, 7] {
        for n_p in [0usize, 1, 3, 18] {
            let bt = BiasTable { window: m, n_prior: n_p, table: Tensor::<f32>::zeros(&[2, (2 * m - 1).pow(2) + n_p]) };
            let b = bt.build(m, n_p)?;
            let okh = bt.len_per_head() == (2 * m - 1).pow(2) + n_p && b.shape() == [2, m * m, m * m + n_p];
            if !okh {
                ok = false;
                worst = format!("M={m} N_p={n_p}: {:?}", b.shape());
            }
        }
    }
    Ok((ok, if ok { "length (2M−1)²+N_p for 12 shapes".into() } else { worst }))
}

fn adam_step() -> Result<(bool, String)> {
    let theta = Tensor::<f64>::param(&[1], vec![-0.75])?;
    let mut st = TrainState::new(&[theta.clone()], 0.01, 0.5, 0.999, 1e-8);
    theta.square().sum().backward()?;
    st.apply(&[theta.clone()])?;
    let g: f64 = -1.5;
    let want = -0.75 - 0.01 * g / (g.abs() + 1e-8);
    let err = (theta.item() - want).abs();
    Ok((err < 1e-15, format!("θ {:.12} vs {want:.12}", theta.item())))
}

fn checkpoint_round_trip() -> Result<(bool, String)> {
    let cfg = Config::toy();
    let a = MatteFormer::<f32>::new(&cfg.encoder, &cfg.decoder, 1)?;
    let b = MatteFormer::<f32>::new(&cfg.encoder, &cfg.decoder, 2)?;
    let mut buf = Vec::new();
    checkpoint::write_entries(&mut buf, &checkpoint::entries_of(&a.params))?;
    checkpoint::restore(&b.params, &checkpoint::read_entries(buf.as_slice())?)?;
    let same = a.params.iter().zip(b.params.iter()).all(|(x, y)| x.tensor.to_vec() == y.tensor.to_vec());
    Ok((same, format!("{} tensors, {} bytes", a.params.len(), buf.len())))
}

/// Runs every check; a check that errors counts as failed.
pub fn run_all() -> Vec<CheckResult> {
    let checks: [(&'static str, fn() -> Result<(bool, String)>); 7] = [
        ("prior-token means", prior_tokens),
        ("refinement invariants", prm_invariants),
        ("metrics on identical input", metrics_zero),
        ("attention block gradients", block_gradients),
        ("bias table length", bias_table),
        ("single Adam step", adam_step),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok((passed, detail)) => CheckResult { name, passed, detail },
            Err(e) => CheckResult { name, passed: false, detail: format!("error: {e}") },
        })
        .collect()
}
