//! Prior tokens, prior-aware window attention and the transformer block that
//! carries them.
//!
//! Token maps are `[H×W×d]` (row-major grid, channels last). Prior tokens are
//! stacked as `[N_p×d]`; a full triple is ordered (uk, fg, bg).

use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Builder, Real, Tensor};
use crate::trimap::{Region, RegionMap};

/// Additive logit for masked spatial pairs in shifted windows.
pub const MASK_VALUE: f64 = -100.0;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PriorMode {
    None,
    Gap,
    Uk,
    UkFgBg,
    UkFgBgMemory,
}

impl PriorMode {
    pub const ALL: [PriorMode; 5] = [PriorMode::None, PriorMode::Gap, PriorMode::Uk, PriorMode::UkFgBg, PriorMode::UkFgBgMemory];

    /// Prior tokens computed afresh by every block.
    pub fn fresh_count(self) -> usize {
        match self {
            PriorMode::None => 0,
            PriorMode::Gap | PriorMode::Uk => 1,
            PriorMode::UkFgBg | PriorMode::UkFgBgMemory => 3,
        }
    }

    pub fn uses_memory(self) -> bool {
        self == PriorMode::UkFgBgMemory
    }

    /// Prior keys seen by the block at 0-based position `block` in its stage.
    pub fn prior_count(self, block: usize) -> usize {
        if self.uses_memory() {
            3 * (block + 1)
        } else {
            self.fresh_count()
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PriorMode::None => "NONE",
            PriorMode::Gap => "GAP",
            PriorMode::Uk => "UK",
            PriorMode::UkFgBg => "UK_FG_BG",
            PriorMode::UkFgBgMemory => "UK_FG_BG_MEMORY",
        }
    }
}

impl fmt::Display for PriorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PriorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        PriorMode::ALL
            .into_iter()
            .find(|m| m.name() == norm || (norm == "MEMORY" && m.uses_memory()))
            .ok_or_else(|| Error::Config(format!("unknown prior mode {s:?}")))
    }
}

/// What a prior key column summarizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PriorKind {
    Uk,
    Fg,
    Bg,
    Gap,
}

impl PriorKind {
    pub fn name(self) -> &'static str {
        match self {
            PriorKind::Uk => "uk",
            PriorKind::Fg => "fg",
            PriorKind::Bg => "bg",
            PriorKind::Gap => "gap",
        }
    }
}

fn fresh_kinds(mode: PriorMode) -> &'static [PriorKind] {
    match mode {
        PriorMode::None => &[],
        PriorMode::Gap => &[PriorKind::Gap],
        PriorMode::Uk => &[PriorKind::Uk],
        PriorMode::UkFgBg | PriorMode::UkFgBgMemory => &[PriorKind::Uk, PriorKind::Fg, PriorKind::Bg],
    }
}

// ---- prior tokens ------------------------------------------------------------

fn check_tokens<T: Real>(tokens: &Tensor<T>) -> Result<(usize, usize)> {
    match tokens.shape() {
        &[n, d] => Ok((n, d)),
        s => Err(shape_err(format!("expected [N×d] tokens, got {s:?}"))),
    }
}

/// Region means `[3×d]` in (uk, fg, bg) order; an empty region yields zeros.
pub fn compute_prior_tokens<T: Real>(tokens: &Tensor<T>, regions: &RegionMap) -> Result<Tensor<T>> {
    let (n, _) = check_tokens(tokens)?;
    if n != regions.len() {
        return Err(shape_err(format!("{n} tokens for a {}×{} region map", regions.rows, regions.cols)));
    }
    let counts = regions.counts();
    let mut weights = vec![T::zero(); 3 * n];
    for (row, region) in [Region::Uk, Region::Fg, Region::Bg].into_iter().enumerate() {
        let c = counts[region as usize];
        if c == 0 {
            continue;
        }
        let w = T::lit(1.0 / c as f64);
        for (i, &r) in regions.labels.iter().enumerate() {
            if r == region {
                weights[row * n + i] = w;
            }
        }
    }
    Tensor::from_vec(&[3, n], weights)?.matmul(tokens)
}

/// Mean of all tokens, `[1×d]`.
pub fn gap_token<T: Real>(tokens: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, _) = check_tokens(tokens)?;
    if n == 0 {
        return Err(shape_err("gap_token of zero tokens"));
    }
    Tensor::full(&[1, n], T::lit(1.0 / n as f64)).matmul(tokens)
}

fn fresh_priors<T: Real>(tokens: &Tensor<T>, regions: &RegionMap, mode: PriorMode) -> Result<Option<Tensor<T>>> {
    Ok(match mode {
        PriorMode::None => None,
        PriorMode::Gap => Some(gap_token(tokens)?),
        PriorMode::Uk => Some(compute_prior_tokens(tokens, regions)?.narrow(0, 0, 1)?),
        PriorMode::UkFgBg | PriorMode::UkFgBgMemory => Some(compute_prior_tokens(tokens, regions)?),
    })
}

// ---- window geometry ---------------------------------------------------------

/// Window side and shift actually used on an `h×w` grid.
///
/// A grid no larger than the configured window is covered by one window
/// without shifting; otherwise both sides must be multiples of the window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    pub h: usize,
    pub w: usize,
    pub m: usize,
    pub shift: usize,
}

impl WindowGeometry {
    pub fn new(h: usize, w: usize, window: usize, shifted: bool) -> Result<Self> {
        let (m, shift) = if h.min(w) <= window { (h.min(w), 0) } else { (window, if shifted { window / 2 } else { 0 }) };
        if m == 0 || h % m != 0 || w % m != 0 {
            return Err(shape_err(format!("{h}×{w} grid not divisible by window {m}")));
        }
        Ok(WindowGeometry { h, w, m, shift })
    }

    pub fn windows(&self) -> usize {
        (self.h / self.m) * (self.w / self.m)
    }

    /// For each row of the partitioned `[nW·m²]` layout, the grid index it
    /// reads after rolling the grid by `−shift`.
    fn order(&self) -> Vec<usize> {
        let (h, w, m, s) = (self.h, self.w, self.m, self.shift);
        let mut out = Vec::with_capacity(h * w);
        for wy in 0..h / m {
            for wx in 0..w / m {
                for iy in 0..m {
                    for ix in 0..m {
                        let y = (wy * m + iy + s) % h;
                        let x = (wx * m + ix + s) % w;
                        out.push(y * w + x);
                    }
                }
            }
        }
        out
    }
}

fn expand_rows(order: &[usize], d: usize) -> Rc<Vec<usize>> {
    Rc::new(order.iter().flat_map(|&r| r * d..(r + 1) * d).collect())
}

fn invert(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

fn grid_dims<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match x.shape() {
        &[h, w, d] => Ok((h, w, d)),
        s => Err(shape_err(format!("expected [H×W×d] token map, got {s:?}"))),
    }
}

/// `[H×W×d] → [(H/M·W/M)×M²×d]`, windows in row-major order.
pub fn window_partition<T: Real>(x: &Tensor<T>, m: usize) -> Result<Tensor<T>> {
    let (h, w, d) = grid_dims(x)?;
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(shape_err(format!("{h}×{w} grid not divisible by window {m}")));
    }
    let g = WindowGeometry { h, w, m, shift: 0 };
    x.gather(expand_rows(&g.order(), d), &[g.windows(), m * m, d])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Real>(windows: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (nw, mm, d) = match windows.shape() {
        &[a, b, c] => (a, b, c),
        s => return Err(shape_err(format!("expected [nW×M²×d], got {s:?}"))),
    };
    let m = (mm as f64).sqrt().round() as usize;
    if m * m != mm || m == 0 || h % m != 0 || w % m != 0 || nw * mm != h * w {
        return Err(shape_err(format!("cannot tile {:?} windows into {h}×{w}", windows.shape())));
    }
    let g = WindowGeometry { h, w, m, shift: 0 };
    windows.gather(expand_rows(&invert(&g.order()), d), &[h, w, d])
}

/// Toroidal roll by `(−offset, −offset)`; a negative offset undoes it.
pub fn cyclic_shift<T: Real>(x: &Tensor<T>, offset: isize) -> Result<Tensor<T>> {
    let (h, w, d) = grid_dims(x)?;
    let mut order = Vec::with_capacity(h * w);
    for y in 0..h {
        for xx in 0..w {
            let sy = (y as isize + offset).rem_euclid(h as isize) as usize;
            let sx = (xx as isize + offset).rem_euclid(w as isize) as usize;
            order.push(sy * w + sx);
        }
    }
    x.gather(expand_rows(&order, d), &[h, w, d])
}

/// Per-window `[nW×M²×M²]` additive mask for a grid rolled by `offset`:
/// 0 for pairs from the same pre-roll region, [`MASK_VALUE`] otherwise.
pub fn shift_attention_mask(h: usize, w: usize, m: usize, offset: usize) -> Result<Tensor<f64>> {
    if m == 0 || h % m != 0 || w % m != 0 {
        return Err(shape_err(format!("{h}×{w} grid not divisible by window {m}")));
    }
    let nw = (h / m) * (w / m);
    let mm = m * m;
    if offset == 0 {
        return Ok(Tensor::zeros(&[nw, mm, mm]));
    }
    let slice = |v: usize, len: usize| {
        if v < len - m {
            0
        } else if v < len - offset {
            1
        } else {
            2
        }
    };
    let geom = WindowGeometry { h, w, m, shift: 0 };
    let ids: Vec<usize> = geom.order().iter().map(|&p| slice(p / w, h) * 3 + slice(p % w, w)).collect();
    let mut data = vec![0.0; nw * mm * mm];
    for win in 0..nw {
        let id = &ids[win * mm..(win + 1) * mm];
        for i in 0..mm {
            for j in 0..mm {
                if id[i] != id[j] {
                    data[(win * mm + i) * mm + j] = MASK_VALUE;
                }
            }
        }
    }
    Tensor::from_vec(&[nw, mm, mm], data)
}

// ---- bias table --------------------------------------------------------------

/// Learned per-head table: `(2M−1)²` relative-position slots followed by
/// `n_prior` prior slots.
#[derive(Clone, Debug)]
pub struct BiasTable<T: Real = f32> {
    pub window: usize,
    pub n_prior: usize,
    /// `[heads × ((2M−1)² + n_prior)]`.
    pub table: Tensor<T>,
}

impl<T: Real> BiasTable<T> {
    pub fn len_per_head(&self) -> usize {
        let r = 2 * self.window - 1;
        r * r + self.n_prior
    }

    pub fn heads(&self) -> usize {
        self.table.shape()[0]
    }

    /// Flat table indices for an `m`-window with `n_p` prior keys, laid out
    /// `[heads × m² × (m²+n_p)]`.
    fn index(&self, m: usize, n_p: usize) -> Result<Vec<usize>> {
        if n_p > self.n_prior {
            return Err(Error::Capacity { requested: n_p, available: self.n_prior });
        }
        if m > self.window || m == 0 {
            return Err(shape_err(format!("window {m} exceeds bias table window {}", self.window)));
        }
        let big = self.window;
        let r = 2 * big - 1;
        let len = self.len_per_head();
        let mm = m * m;
        let keys = mm + n_p;
        let mut per_head = Vec::with_capacity(mm * keys);
        for i in 0..mm {
            let (iy, ix) = (i / m, i % m);
            for j in 0..mm {
                let (jy, jx) = (j / m, j % m);
                per_head.push((iy + big - 1 - jy) * r + (ix + big - 1 - jx));
            }
            for p in 0..n_p {
                per_head.push(len - n_p + p);
            }
        }
        Ok((0..self.heads()).flat_map(|hh| per_head.iter().map(move |&k| hh * len + k)).collect())
    }

    /// `[heads × m² × (m²+n_p)]` bias for an effective window `m ≤ M`.
    pub fn build(&self, m: usize, n_p: usize) -> Result<Tensor<T>> {
        let idx = self.index(m, n_p)?;
        self.table.gather(Rc::new(idx), &[self.heads(), m * m, m * m + n_p])
    }

    /// Prior-key slots only, `[heads × n_p]`.
    fn prior_slots(&self, n_p: usize) -> Result<Tensor<T>> {
        if n_p > self.n_prior {
            return Err(Error::Capacity { requested: n_p, available: self.n_prior });
        }
        let len = self.len_per_head();
        let idx = (0..self.heads()).flat_map(|hh| (0..n_p).map(move |p| hh * len + len - n_p + p)).collect();
        self.table.gather(Rc::new(idx), &[self.heads(), n_p])
    }
}

/// Full-window bias, `[heads × M² × (M²+N_p)]`.
pub fn build_bias<T: Real>(bt: &BiasTable<T>, n_p: usize) -> Result<Tensor<T>> {
    bt.build(bt.window, n_p)
}

// ---- block parameters --------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PastBlock<T: Real = f32> {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub shifted: bool,
    /// Position within the stage, 0-based.
    pub index: usize,
    pub norm1: (Tensor<T>, Tensor<T>),
    pub qkv_w: Tensor<T>,
    pub qkv_b: Tensor<T>,
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
    pub bias: BiasTable<T>,
    pub norm2: (Tensor<T>, Tensor<T>),
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

pub const MLP_RATIO: usize = 4;
const INIT_STD: f64 = 0.02;

impl<T: Real> PastBlock<T> {
    /// Registers one block; odd `index` blocks use shifted windows.
    pub fn new(b: &mut Builder<'_, T>, dim: usize, heads: usize, window: usize, index: usize, n_prior: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide dim {dim}")));
        }
        if window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        let r = 2 * window - 1;
        let hidden = MLP_RATIO * dim;
        Ok(PastBlock {
            dim,
            heads,
            window,
            shifted: index % 2 == 1,
            index,
            norm1: (b.constant("norm1.weight", &[dim], 1.0)?, b.constant("norm1.bias", &[dim], 0.0)?),
            qkv_w: b.trunc_normal("attn.qkv.weight", &[dim, 3 * dim], INIT_STD)?,
            qkv_b: b.constant("attn.qkv.bias", &[3 * dim], 0.0)?,
            proj_w: b.trunc_normal("attn.proj.weight", &[dim, dim], INIT_STD)?,
            proj_b: b.constant("attn.proj.bias", &[dim], 0.0)?,
            bias: BiasTable { window, n_prior, table: b.trunc_normal("attn.bias_table", &[heads, r * r + n_prior], INIT_STD)? },
            norm2: (b.constant("norm2.weight", &[dim], 1.0)?, b.constant("norm2.bias", &[dim], 0.0)?),
            fc1_w: b.trunc_normal("mlp.fc1.weight", &[dim, hidden], INIT_STD)?,
            fc1_b: b.constant("mlp.fc1.bias", &[hidden], 0.0)?,
            fc2_w: b.trunc_normal("mlp.fc2.weight", &[hidden, dim], INIT_STD)?,
            fc2_b: b.constant("mlp.fc2.bias", &[dim], 0.0)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn norm1(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm(&self.norm1.0, &self.norm1.1, LN_EPS)
    }

    /// `x + MLP(LN2(x))`.
    pub fn mlp_residual(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = x.layer_norm(&self.norm2.0, &self.norm2.1, LN_EPS)?;
        let h = h.linear(&self.fc1_w, Some(&self.fc1_b))?.gelu();
        x.add(&h.linear(&self.fc2_w, Some(&self.fc2_b))?)
    }
}

// ---- attention ---------------------------------------------------------------

/// Result of one windowed attention pass.
pub struct WindowAttention<T: Real = f32> {
    /// `[nW×m²×d]`, after the output projection.
    pub out: Tensor<T>,
    /// Softmax weights `[nW×heads×m²×(m²+N_p)]`.
    pub attn: Tensor<T>,
    keys: Tensor<T>,
    values: Tensor<T>,
}

/// Splits `[rows×3d]` projections into q, k, v, each `[heads×rows×dh]`.
fn split_heads<T: Real>(qkv: &Tensor<T>, heads: usize) -> Result<[Tensor<T>; 3]> {
    let rows = qkv.shape()[0];
    let dh = qkv.shape()[1] / (3 * heads);
    let p = qkv.reshape(&[rows, 3, heads, dh])?.permute(&[1, 2, 0, 3])?;
    let part = |i| p.narrow(0, i, 1)?.reshape(&[heads, rows, dh]);
    Ok([part(0)?, part(1)?, part(2)?])
}

/// Repeats `x` `n` times along a new leading axis.
fn repeat_leading<T: Real>(x: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let k = x.numel();
    let mut shape = vec![n];
    shape.extend_from_slice(x.shape());
    x.gather(Rc::new((0..n * k).map(|i| i % k).collect()), &shape)
}

/// Window attention with prior keys.
///
/// `windows` are normalized spatial tokens `[nW×m²×d]`; `priors` are
/// normalized prior tokens `[N_p×d]` shared by every window. Queries come
/// from spatial tokens only. `mask` is the `[nW×m²×m²]` shift mask and only
/// touches spatial key columns.
pub fn pa_wsa<T: Real>(
    windows: &Tensor<T>,
    priors: Option<&Tensor<T>>,
    block: &PastBlock<T>,
    mask: Option<&Tensor<f64>>,
) -> Result<WindowAttention<T>> {
    let (nw, mm, d) = match windows.shape() {
        &[a, b, c] => (a, b, c),
        s => return Err(shape_err(format!("pa_wsa expects [nW×M²×d], got {s:?}"))),
    };
    if d != block.dim {
        return Err(shape_err(format!("pa_wsa: token dim {d}, block dim {}", block.dim)));
    }
    let m = (mm as f64).sqrt().round() as usize;
    if m * m != mm {
        return Err(shape_err(format!("{mm} tokens per window is not a square")));
    }
    let heads = block.heads;
    let dh = block.head_dim();
    let n_p = priors.map_or(0, |p| p.shape()[0]);
    let keys = mm + n_p;

    let qkv = windows.linear(&block.qkv_w, Some(&block.qkv_b))?;
    let qkv = qkv.reshape(&[nw, mm, 3, heads, dh])?.permute(&[2, 0, 3, 1, 4])?;
    let part = |i| qkv.narrow(0, i, 1)?.reshape(&[nw * heads, mm, dh]);
    let (q, k_s, v_s) = (part(0)?, part(1)?, part(2)?);

    let (k, v) = match priors {
        Some(p) if n_p > 0 => {
            let [_, k_p, v_p] = split_heads(&p.linear(&block.qkv_w, Some(&block.qkv_b))?, heads)?;
            let k_p = repeat_leading(&k_p, nw)?.reshape(&[nw * heads, n_p, dh])?;
            let v_p = repeat_leading(&v_p, nw)?.reshape(&[nw * heads, n_p, dh])?;
            (Tensor::concat(&[&k_s, &k_p], 1)?, Tensor::concat(&[&v_s, &v_p], 1)?)
        }
        _ => (k_s.clone(), v_s.clone()),
    };

    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let scores = q.bmm(&k, true)?.mul_scalar(scale).reshape(&[nw, heads, mm, keys])?;
    let mut scores = scores.broadcast_add(&block.bias.build(m, n_p)?)?;
    if let Some(mask) = mask {
        if mask.shape() != [nw, mm, mm] {
            return Err(shape_err(format!("mask {:?} for {nw} windows of {mm}", mask.shape())));
        }
        let md = mask.data();
        let mut full = vec![T::zero(); nw * heads * mm * keys];
        for w in 0..nw {
            for hh in 0..heads {
                for i in 0..mm {
                    let dst = ((w * heads + hh) * mm + i) * keys;
                    for j in 0..mm {
                        full[dst + j] = T::lit(md[(w * mm + i) * mm + j]);
                    }
                }
            }
        }
        scores = scores.add(&Tensor::from_vec(&[nw, heads, mm, keys], full)?)?;
    }
    let attn = scores.softmax_last_dim()?;
    let out = attn.reshape(&[nw * heads, mm, keys])?.bmm(&v, false)?;
    let out = out.reshape(&[nw, heads, mm, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[nw, mm, d])?;
    let out = out.linear(&block.proj_w, Some(&block.proj_b))?;
    Ok(WindowAttention { out, attn, keys: k_s, values: v_s })
}

/// Global attention step for prior tokens.
///
/// Each row of `queries` (raw, un-normalized fresh priors) attends over all
/// spatial keys/values `[heads×N×dh]` and all normalized priors
/// `priors_norm [N_p×d]`, with zero bias on spatial keys and the trailing
/// table slots on prior keys. Returns `queries + proj(attn)` followed by the
/// block's MLP residual.
pub fn update_prior_tokens<T: Real>(
    queries: &Tensor<T>,
    spatial_kv: (&Tensor<T>, &Tensor<T>),
    priors_norm: &Tensor<T>,
    block: &PastBlock<T>,
) -> Result<Tensor<T>> {
    let heads = block.heads;
    let dh = block.head_dim();
    let (k_s, v_s) = spatial_kv;
    let n = k_s.shape()[1];
    let n_p = priors_norm.shape()[0];
    let f = queries.shape()[0];

    let [q, _, _] = split_heads(&block.norm1(queries)?.linear(&block.qkv_w, Some(&block.qkv_b))?, heads)?;
    let [_, k_p, v_p] = split_heads(&priors_norm.linear(&block.qkv_w, Some(&block.qkv_b))?, heads)?;
    let k = Tensor::concat(&[k_s, &k_p], 1)?;
    let v = Tensor::concat(&[v_s, &v_p], 1)?;

    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let scores = q.bmm(&k, true)?.mul_scalar(scale);
    let prior_bias = block.bias.prior_slots(n_p)?;
    let prior_bias =
        prior_bias.gather(Rc::new((0..heads * f * n_p).map(|i| (i / (f * n_p)) * n_p + i % n_p).collect()), &[heads, f, n_p])?;
    let bias = Tensor::concat(&[&Tensor::zeros(&[heads, f, n]), &prior_bias], 2)?;
    let attn = scores.add(&bias)?.softmax_last_dim()?;
    let out = attn.bmm(&v, false)?.permute(&[1, 0, 2])?.reshape(&[f, block.dim])?;
    let out = out.linear(&block.proj_w, Some(&block.proj_b))?;
    block.mlp_residual(&queries.add(&out)?)
}

/// Per-head `[heads×N×dh]` spatial keys and values in windowed order, for
/// reuse by [`update_prior_tokens`].
pub fn spatial_kv<T: Real>(wa: &WindowAttention<T>, heads: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (nwh, mm, dh) = (wa.keys.shape()[0], wa.keys.shape()[1], wa.keys.shape()[2]);
    let nw = nwh / heads;
    let f = |t: &Tensor<T>| t.reshape(&[nw, heads, mm, dh])?.permute(&[1, 0, 2, 3])?.reshape(&[heads, nw * mm, dh]);
    Ok((f(&wa.keys)?, f(&wa.values)?))
}

// ---- memory and block --------------------------------------------------------

/// Prior-token triples accumulated by the blocks of one stage.
#[derive(Clone, Debug)]
pub struct PriorMemory<T: Real = f32> {
    pub stage_index: usize,
    entries: Vec<Tensor<T>>,
}

impl<T: Real> PriorMemory<T> {
    pub fn new(stage_index: usize) -> Self {
        PriorMemory { stage_index, entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Tensor<T>] {
        &self.entries
    }

    /// Appends a `[3×d]` triple.
    pub fn push(&mut self, triple: Tensor<T>) -> Result<()> {
        if triple.ndim() != 2 || triple.shape()[0] != 3 {
            return Err(shape_err(format!("memory entry must be [3×d], got {:?}", triple.shape())));
        }
        self.entries.push(triple);
        Ok(())
    }

    pub fn clear(&mut self, stage_index: usize) {
        self.entries.clear();
        self.stage_index = stage_index;
    }
}

/// Per-head attention mass split, averaged over windows and query rows.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Mass {
    pub spatial: f64,
    pub uk: f64,
    pub fg: f64,
    pub bg: f64,
    pub gap: f64,
}

impl Mass {
    pub fn prior(&self) -> f64 {
        self.uk + self.fg + self.bg + self.gap
    }

    pub fn total(&self) -> f64 {
        self.spatial + self.prior()
    }
}

/// Captured attention of one block.
#[derive(Clone, Debug)]
pub struct BlockAttention {
    pub queries: usize,
    pub keys: usize,
    /// `[heads × queries × keys]`, averaged over windows.
    pub mean_map: Vec<f64>,
    pub mass: Vec<Mass>,
}

/// What one block did during a forward pass.
#[derive(Clone, Debug)]
pub struct BlockRecord {
    pub stage: usize,
    pub block: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
    /// One entry per prior key column, in column order.
    pub kinds: Vec<PriorKind>,
    pub attention: Option<BlockAttention>,
}

impl BlockRecord {
    pub fn n_prior(&self) -> usize {
        self.kinds.len()
    }
}

/// Optional instrumentation threaded through forward passes.
#[derive(Clone, Debug, Default)]
pub struct Probe {
    pub capture_attention: bool,
    pub records: Vec<BlockRecord>,
}

impl Probe {
    pub fn capturing() -> Self {
        Probe { capture_attention: true, records: Vec::new() }
    }
}

fn summarize<T: Real>(attn: &Tensor<T>, kinds: &[PriorKind]) -> BlockAttention {
    let s = attn.shape();
    let (nw, heads, mm, keys) = (s[0], s[1], s[2], s[3]);
    let data = attn.data();
    let mut mean_map = vec![0.0; heads * mm * keys];
    for w in 0..nw {
        for (k, v) in mean_map.iter_mut().enumerate() {
            *v += data[w * heads * mm * keys + k].as_f64();
        }
    }
    mean_map.iter_mut().for_each(|v| *v /= nw as f64);
    let mass = (0..heads)
        .map(|hh| {
            let mut m = Mass::default();
            for i in 0..mm {
                let row = &mean_map[(hh * mm + i) * keys..(hh * mm + i + 1) * keys];
                m.spatial += row[..mm].iter().sum::<f64>();
                for (kind, v) in kinds.iter().zip(&row[mm..]) {
                    match kind {
                        PriorKind::Uk => m.uk += v,
                        PriorKind::Fg => m.fg += v,
                        PriorKind::Bg => m.bg += v,
                        PriorKind::Gap => m.gap += v,
                    }
                }
            }
            let q = mm as f64;
            Mass { spatial: m.spatial / q, uk: m.uk / q, fg: m.fg / q, bg: m.bg / q, gap: m.gap / q }
        })
        .collect();
    BlockAttention { queries: mm, keys, mean_map, mass }
}

/// One transformer block with prior tokens.
///
/// Fresh priors are region means of the block input `x`; together with any
/// stored triples they are normalized alongside the spatial tokens and
/// appended to every window's keys. In memory mode the fresh triple is then
/// refined by [`update_prior_tokens`] and appended to `memory`.
pub fn past_block_forward<T: Real>(
    x: &Tensor<T>,
    regions: &RegionMap,
    memory: &mut PriorMemory<T>,
    block: &PastBlock<T>,
    mode: PriorMode,
    probe: Option<&mut Probe>,
) -> Result<Tensor<T>> {
    let (h, w, d) = grid_dims(x)?;
    if regions.rows != h || regions.cols != w {
        return Err(shape_err(format!("region map {}×{} for a {h}×{w} token grid", regions.rows, regions.cols)));
    }
    let geom = WindowGeometry::new(h, w, block.window, block.shifted)?;
    let flat = x.reshape(&[h * w, d])?;
    let fresh = fresh_priors(&flat, regions, mode)?;

    let mut kinds: Vec<PriorKind> = Vec::new();
    let priors = match &fresh {
        None => None,
        Some(f) => {
            let mut parts: Vec<&Tensor<T>> = Vec::new();
            if mode.uses_memory() {
                for e in memory.entries() {
                    parts.push(e);
                    kinds.extend_from_slice(fresh_kinds(mode));
                }
            }
            parts.push(f);
            kinds.extend_from_slice(fresh_kinds(mode));
            Some(if parts.len() == 1 { f.clone() } else { Tensor::concat(&parts, 0)? })
        }
    };
    let priors_norm = priors.as_ref().map(|p| block.norm1(p)).transpose()?;

    let order = geom.order();
    let windows = block.norm1(&flat)?.gather(expand_rows(&order, d), &[geom.windows(), geom.m * geom.m, d])?;
    let mask = if geom.shift > 0 { Some(shift_attention_mask(h, w, geom.m, geom.shift)?) } else { None };
    let wa = pa_wsa(&windows, priors_norm.as_ref(), block, mask.as_ref())?;
    let attn_out = wa.out.gather(expand_rows(&invert(&order), d), &[h, w, d])?;
    let y = block.mlp_residual(&x.add(&attn_out)?)?;

    if mode.uses_memory() {
        let (fresh, priors_norm) = (fresh.as_ref().unwrap(), priors_norm.as_ref().unwrap());
        let (k_s, v_s) = spatial_kv(&wa, block.heads)?;
        let updated = update_prior_tokens(fresh, (&k_s, &v_s), priors_norm, block)?;
        memory.push(updated)?;
    }

    if let Some(probe) = probe {
        let attention = probe.capture_attention.then(|| summarize(&wa.attn, &kinds));
        probe.records.push(BlockRecord {
            stage: memory.stage_index,
            block: block.index,
            heads: block.heads,
            window: geom.m,
            shift: geom.shift,
            kinds,
            attention,
        });
    }
    Ok(y)
}
