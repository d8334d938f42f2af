//! Matting metrics over the unknown region, attention diagnostics and
//! dataset-level evaluation.
//!
//! Metric conventions (alpha in `[0, 1]`, UK pixels only):
//!
//! - SAD  = Σ|p − g| / 1000
//! - MSE  = mean (p − g)² × 1000
//! - Grad = Σ(‖∇p‖ − ‖∇g‖)² / 1000, gradients from first-derivative-of-Gaussian
//!   filters (σ = 1.4, half size 4, unit L2 norm) with replicate borders
//! - Conn = Σ|φ(p) − φ(g)| / 1000 over thresholds `step, 2·step, …, 1`; each
//!   pixel's level is the last threshold at which it still belonged to the
//!   largest 4-connected component of `p ≥ t ∧ g ≥ t`, and
//!   φ(x) = 1 − d·[d ≥ 0.15] with d = x − level. Equal-size components are
//!   broken toward the one met first in a column-major scan.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::{AugmentConfig, Config, EvalConfig};
use crate::error::{shape_err, Error, Result};
use crate::model::MatteFormer;
use crate::numerics::Real;
use crate::prior_attention::{Mass, Probe};
use crate::training::data::{augment_sample, synth_sample, TrainSample};
use crate::trimap::{AlphaMatte, Region, RgbImage, Trimap};

/// The four scores of one prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub sad: f64,
    pub mse: f64,
    pub grad: f64,
    pub conn: f64,
    /// Pixels in the evaluation region (trimap UK).
    pub region_pixels: usize,
    /// The trimap had no UK pixel; all scores are 0.
    pub region_empty: bool,
}

pub const METRIC_HEADER: &str = "name,sad,mse,grad,conn,uk_pixels";

impl MetricReport {
    pub fn csv(&self, name: &str) -> String {
        format!("{name},{:.6},{:.6},{:.6},{:.6},{}", self.sad, self.mse, self.grad, self.conn, self.region_pixels)
    }

    /// Unweighted mean of per-sample scores, summed in the given order.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let n = reports.len().max(1) as f64;
        let mut m = MetricReport::default();
        for r in reports {
            m.sad += r.sad;
            m.mse += r.mse;
            m.grad += r.grad;
            m.conn += r.conn;
            m.region_pixels += r.region_pixels;
        }
        m.sad /= n;
        m.mse /= n;
        m.grad /= n;
        m.conn /= n;
        m.region_empty = reports.iter().all(|r| r.region_empty);
        m
    }
}

fn gauss(x: f64, sigma: f64) -> f64 {
    (-x * x / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

fn dgauss(x: f64, sigma: f64) -> f64 {
    -x * gauss(x, sigma) / (sigma * sigma)
}

/// Half size of the derivative filter: where the Gaussian falls below 1% of
/// its peak-normalized value.
pub fn gradient_half_size(sigma: f64) -> usize {
    (sigma * (-2.0 * ((2.0 * std::f64::consts::PI).sqrt() * sigma * 0.01).ln()).sqrt()).ceil() as usize
}

/// Separable factors `(smooth, derivative)` of the x-derivative filter,
/// scaled so the 2-D product has unit L2 norm.
fn gradient_factors(sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let hs = gradient_half_size(sigma) as isize;
    let g: Vec<f64> = (-hs..=hs).map(|u| gauss(u as f64, sigma)).collect();
    let d: Vec<f64> = (-hs..=hs).map(|v| dgauss(v as f64, sigma)).collect();
    let norm = (g.iter().map(|v| v * v).sum::<f64>() * d.iter().map(|v| v * v).sum::<f64>()).sqrt();
    (g, d.into_iter().map(|v| v / norm).collect())
}

/// Correlates along rows (`axis = 1`) or columns (`axis = 0`) with edge
/// replication.
fn filter_axis(x: &[f64], h: usize, w: usize, k: &[f64], axis: usize) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let o = i as isize - r;
                let (sy, sx) = if axis == 0 { (y as isize + o, xx as isize) } else { (y as isize, xx as isize + o) };
                let sy = sy.clamp(0, h as isize - 1) as usize;
                let sx = sx.clamp(0, w as isize - 1) as usize;
                acc += kv * x[sy * w + sx];
            }
            out[y * w + xx] = acc;
        }
    }
    out
}

/// Gradient magnitude under the derivative-of-Gaussian filters.
pub fn gradient_magnitude(x: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let (g, d) = gradient_factors(sigma);
    let gx = filter_axis(&filter_axis(x, h, w, &d, 1), h, w, &g, 0);
    let gy = filter_axis(&filter_axis(x, h, w, &d, 0), h, w, &g, 1);
    gx.iter().zip(&gy).map(|(a, b)| (a * a + b * b).sqrt()).collect()
}

/// Mask of the largest 4-connected component of `mask`.
fn largest_component(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut label = vec![0usize; h * w];
    let mut sizes = vec![0usize];
    let mut stack = Vec::new();
    for x in 0..w {
        for y in 0..h {
            let p = y * w + x;
            if !mask[p] || label[p] != 0 {
                continue;
            }
            let id = sizes.len();
            sizes.push(0);
            label[p] = id;
            stack.push(p);
            while let Some(q) = stack.pop() {
                sizes[id] += 1;
                let (qy, qx) = (q / w, q % w);
                let mut visit = |n: usize| {
                    if mask[n] && label[n] == 0 {
                        label[n] = id;
                        stack.push(n);
                    }
                };
                if qy > 0 {
                    visit(q - w);
                }
                if qy + 1 < h {
                    visit(q + w);
                }
                if qx > 0 {
                    visit(q - 1);
                }
                if qx + 1 < w {
                    visit(q + 1);
                }
            }
        }
    }
    let mut best = 0;
    for id in 1..sizes.len() {
        if sizes[id] > sizes[best] {
            best = id;
        }
    }
    label.iter().map(|&l| best != 0 && l == best).collect()
}

/// Per-pixel connectivity level (see the module docs).
fn connectivity_levels(p: &[f64], g: &[f64], h: usize, w: usize, step: f64) -> Vec<f64> {
    let n_steps = (1.0 / step).round() as usize;
    let mut level = vec![-1.0; h * w];
    for i in 1..=n_steps {
        let t = i as f64 * step;
        let mask: Vec<bool> = p.iter().zip(g).map(|(a, b)| *a >= t && *b >= t).collect();
        let omega = largest_component(&mask, h, w);
        let prev = (i - 1) as f64 * step;
        for (l, &in_c) in level.iter_mut().zip(&omega) {
            if *l == -1.0 && !in_c {
                *l = prev;
            }
        }
    }
    level.iter().map(|&l| if l == -1.0 { 1.0 } else { l }).collect()
}

fn phi(x: f64, level: f64) -> f64 {
    let d = x - level;
    1.0 - if d >= 0.15 { d } else { 0.0 }
}

/// SAD, MSE, Grad and Conn of `pred` against `gt` over the trimap's UK pixels.
pub fn compute_metrics(pred: &AlphaMatte, gt: &AlphaMatte, trimap: &Trimap, cfg: &EvalConfig) -> Result<MetricReport> {
    let (h, w) = (gt.height, gt.width);
    if (pred.height, pred.width) != (h, w) || (trimap.height, trimap.width) != (h, w) {
        return Err(shape_err(format!("pred {}×{}, gt {h}×{w}, trimap {}×{}", pred.height, pred.width, trimap.height, trimap.width)));
    }
    let region: Vec<bool> = trimap.labels.iter().map(|&r| r == Region::Uk).collect();
    let n = region.iter().filter(|&&u| u).count();
    if n == 0 {
        return Ok(MetricReport { region_empty: true, ..MetricReport::default() });
    }
    let p: Vec<f64> = pred.values.iter().map(|&v| v as f64).collect();
    let g: Vec<f64> = gt.values.iter().map(|&v| v as f64).collect();
    let over = |f: &dyn Fn(usize) -> f64| (0..h * w).filter(|&i| region[i]).map(f).sum::<f64>();

    let sad = over(&|i| (p[i] - g[i]).abs()) / 1000.0;
    let mse = over(&|i| (p[i] - g[i]).powi(2)) / n as f64 * 1000.0;
    let (gp, gg) = (gradient_magnitude(&p, h, w, cfg.grad_sigma), gradient_magnitude(&g, h, w, cfg.grad_sigma));
    let grad = over(&|i| (gp[i] - gg[i]).powi(2)) / 1000.0;
    let level = connectivity_levels(&p, &g, h, w, cfg.conn_step);
    let conn = over(&|i| (phi(p[i], level[i]) - phi(g[i], level[i])).abs()) / 1000.0;
    Ok(MetricReport { sad, mse, grad, conn, region_pixels: n, region_empty: false })
}

// ---- attention diagnostics ---------------------------------------------------

/// Attention mass of one block, per head.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMass {
    pub stage: usize,
    pub block: usize,
    pub n_prior: usize,
    pub mass: Vec<Mass>,
}

/// Mass split of every captured block.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttnReport {
    pub blocks: Vec<BlockMass>,
}

pub const MASS_HEADER: &str = "stage,block,head,n_prior,spatial,uk,fg,bg,gap";

impl AttnReport {
    pub fn from_probe(probe: &Probe) -> Result<Self> {
        if !probe.capture_attention {
            return Err(Error::Contract("attention capture is disabled on this probe".into()));
        }
        let blocks = probe
            .records
            .iter()
            .map(|r| {
                let a = r.attention.as_ref().ok_or_else(|| Error::Contract("a block recorded no attention".into()))?;
                Ok(BlockMass { stage: r.stage, block: r.block, n_prior: r.n_prior(), mass: a.mass.clone() })
            })
            .collect::<Result<_>>()?;
        Ok(AttnReport { blocks })
    }

    pub fn mass_csv(&self) -> String {
        let mut s = format!("{MASS_HEADER}\n");
        for b in &self.blocks {
            for (h, m) in b.mass.iter().enumerate() {
                writeln!(s, "{},{},{h},{},{:.8},{:.8},{:.8},{:.8},{:.8}", b.stage, b.block, b.n_prior, m.spatial, m.uk, m.fg, m.bg, m.gap)
                    .expect("string write");
            }
        }
        s
    }
}

/// Runs one forward pass with `probe` and writes `attn_mass.csv` plus one
/// `attn_map_s<stage>_b<block>.csv` per block (rows: head, query; columns:
/// keys, spatial first then priors) into `out_dir`.
pub fn dump_attention<T: Real>(
    model: &MatteFormer<T>,
    image: &RgbImage,
    trimap: &Trimap,
    mut probe: Probe,
    out_dir: Option<&Path>,
) -> Result<(AttnReport, Probe)> {
    if !probe.capture_attention {
        return Err(Error::Contract("attention capture is disabled on this probe".into()));
    }
    model.predict(image, trimap, Some(&mut probe))?;
    let report = AttnReport::from_probe(&probe)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("attn_mass.csv"), report.mass_csv())?;
        for r in &probe.records {
            let a = r.attention.as_ref().expect("checked by from_probe");
            let mut s = String::from("head,query");
            for k in 0..a.keys {
                if k < a.queries {
                    write!(s, ",s{k}").expect("string write");
                } else {
                    write!(s, ",{}", r.kinds[k - a.queries].name()).expect("string write");
                }
            }
            s.push('\n');
            for h in 0..r.heads {
                for q in 0..a.queries {
                    write!(s, "{h},{q}").expect("string write");
                    for v in &a.mean_map[(h * a.queries + q) * a.keys..(h * a.queries + q + 1) * a.keys] {
                        write!(s, ",{v:.8}").expect("string write");
                    }
                    s.push('\n');
                }
            }
            fs::write(dir.join(format!("attn_map_s{}_b{}.csv", r.stage, r.block)), s)?;
        }
    }
    Ok((report, probe))
}

// ---- dataset evaluation --------------------------------------------------------

/// A named evaluation case.
#[derive(Clone, Debug)]
pub struct EvalCase {
    pub name: String,
    pub image: RgbImage,
    pub trimap: Trimap,
    pub alpha: AlphaMatte,
}

impl From<(String, TrainSample)> for EvalCase {
    fn from((name, s): (String, TrainSample)) -> Self {
        EvalCase { name, image: s.image, trimap: s.trimap, alpha: s.alpha }
    }
}

/// Held-out synthetic composites: center crops with a fixed trimap radius
/// (midpoint of the training range).
pub fn synthetic_cases(cfg: &Config) -> Result<Vec<EvalCase>> {
    let a = &cfg.train.augment;
    let aug = AugmentConfig {
        radius_min: (a.radius_min + a.radius_max) / 2,
        radius_max: (a.radius_min + a.radius_max) / 2,
        ..AugmentConfig::identity()
    };
    (0..cfg.eval.samples as u64)
        .map(|i| {
            let seed = cfg.eval.seed + i;
            let (fg, alpha, bg) = synth_sample(seed, cfg.train.synth_size);
            let s = augment_sample(&fg, &alpha, &bg, &aug, cfg.train.crop, seed)?;
            Ok(EvalCase::from((format!("synth_{seed}"), s)))
        })
        .collect()
}

/// Cases from `dir/image/*.png`, `dir/trimap/*.png` and `dir/alpha/*.png`,
/// matched by file name and sorted.
pub fn load_cases(dir: &Path) -> Result<Vec<EvalCase>> {
    let mut names: Vec<String> = fs::read_dir(dir.join("image"))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            Ok(EvalCase {
                image: RgbImage::load_png(&dir.join("image").join(&n))?,
                trimap: Trimap::load_png(&dir.join("trimap").join(&n))?,
                alpha: AlphaMatte::load_png(&dir.join("alpha").join(&n))?,
                name: n,
            })
        })
        .collect()
}

/// Thread count from `MATTEFORMER_THREADS`, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("MATTEFORMER_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Predictions and metrics for every case.
///
/// Inference runs on the calling thread; metric computation fans out over
/// `threads` workers. Results keep case order.
pub fn evaluate<T: Real>(model: &MatteFormer<T>, cases: &[EvalCase], cfg: &EvalConfig, threads: usize) -> Result<Vec<MetricReport>> {
    let preds = cases.iter().map(|c| model.predict(&c.image, &c.trimap, None)).collect::<Result<Vec<_>>>()?;
    let threads = threads.clamp(1, cases.len().max(1));
    let chunk = cases.len().div_ceil(threads).max(1);
    let pairs: Vec<(&AlphaMatte, &EvalCase)> = preds.iter().zip(cases).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = pairs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|(p, c)| compute_metrics(p, &c.alpha, &c.trimap, cfg)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("metric worker panicked")).collect()
    })
}

/// Per-case rows plus a final `mean` row.
pub fn metrics_csv(cases: &[EvalCase], reports: &[MetricReport]) -> String {
    let mut s = format!("{METRIC_HEADER}\n");
    for (c, r) in cases.iter().zip(reports) {
        s.push_str(&r.csv(&c.name));
        s.push('\n');
    }
    s.push_str(&MetricReport::mean(reports).csv("mean"));
    s.push('\n');
    s
}
