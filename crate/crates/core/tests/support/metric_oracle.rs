//! Straightforward reference versions of the four matting metrics, written
//! from the published definitions without sharing code with the library:
//! a dense 2-D derivative filter for Grad and union-find labelling for Conn.

#![allow(dead_code)]

pub struct Scores {
    pub sad: f64,
    pub mse: f64,
    pub grad: f64,
    pub conn: f64,
}

fn g1(x: f64, s: f64) -> f64 {
    (-x * x / (2.0 * s * s)).exp() / (s * (2.0 * std::f64::consts::PI).sqrt())
}

/// Dense `(2r+1)²` x-derivative kernel, unit Frobenius norm.
fn kernel(sigma: f64) -> (usize, Vec<Vec<f64>>) {
    let eps: f64 = 1e-2;
    let r = (sigma * (-2.0 * ((2.0 * std::f64::consts::PI).sqrt() * sigma * eps).ln()).sqrt()).ceil() as usize;
    let n = 2 * r + 1;
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let u = i as f64 - r as f64;
            let v = j as f64 - r as f64;
            k[i][j] = g1(u, sigma) * (-v * g1(v, sigma) / (sigma * sigma));
        }
    }
    let norm = k.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    k.iter_mut().flatten().for_each(|v| *v /= norm);
    (r, k)
}

fn filter(img: &[f64], h: usize, w: usize, k: &[Vec<f64>], r: usize, transpose: bool) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for i in 0..2 * r + 1 {
                for j in 0..2 * r + 1 {
                    let kv = if transpose { k[j][i] } else { k[i][j] };
                    let sy = (y + i as isize - r as isize).clamp(0, h as isize - 1) as usize;
                    let sx = (x + j as isize - r as isize).clamp(0, w as isize - 1) as usize;
                    acc += kv * img[sy * w + sx];
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

fn grad_mag(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let (r, k) = kernel(sigma);
    let gx = filter(img, h, w, &k, r, false);
    let gy = filter(img, h, w, &k, r, true);
    (0..h * w).map(|i| (gx[i].powi(2) + gy[i].powi(2)).sqrt()).collect()
}

fn find(parent: &mut [usize], mut a: usize) -> usize {
    while parent[a] != a {
        parent[a] = parent[parent[a]];
        a = parent[a];
    }
    a
}

/// Largest 4-connected component; ties go to the component whose earliest
/// pixel in column-major order comes first.
fn largest(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if !mask[p] {
                continue;
            }
            for q in [if x + 1 < w { Some(p + 1) } else { None }, if y + 1 < h { Some(p + w) } else { None }].into_iter().flatten() {
                if mask[q] {
                    let (a, b) = (find(&mut parent, p), find(&mut parent, q));
                    if a != b {
                        parent[a] = b;
                    }
                }
            }
        }
    }
    let mut size = vec![0usize; h * w];
    let mut first = vec![usize::MAX; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            if mask[p] {
                let root = find(&mut parent, p);
                size[root] += 1;
                first[root] = first[root].min(x * h + y);
            }
        }
    }
    let mut best: Option<usize> = None;
    for root in 0..h * w {
        if size[root] == 0 {
            continue;
        }
        best = match best {
            Some(b) if size[b] > size[root] || (size[b] == size[root] && first[b] < first[root]) => Some(b),
            _ => Some(root),
        };
    }
    (0..h * w).map(|p| mask[p] && Some(find(&mut parent, p)) == best).collect()
}

/// Scores over pixels where `unknown` holds; alpha values in `[0, 1]`.
pub fn metrics(pred: &[f64], gt: &[f64], unknown: &[bool], h: usize, w: usize, sigma: f64, step: f64) -> Scores {
    let n = unknown.iter().filter(|u| **u).count();
    let mut s = Scores { sad: 0.0, mse: 0.0, grad: 0.0, conn: 0.0 };
    if n == 0 {
        return s;
    }
    let (gp, gg) = (grad_mag(pred, h, w, sigma), grad_mag(gt, h, w, sigma));

    let steps = (1.0 / step).round() as usize;
    let mut level = vec![-1.0f64; h * w];
    for i in 1..=steps {
        let t = i as f64 * step;
        let both: Vec<bool> = (0..h * w).map(|p| pred[p] >= t && gt[p] >= t).collect();
        let omega = largest(&both, h, w);
        for p in 0..h * w {
            if level[p] == -1.0 && !omega[p] {
                level[p] = (i - 1) as f64 * step;
            }
        }
    }
    for p in 0..h * w {
        if !unknown[p] {
            continue;
        }
        let d = pred[p] - gt[p];
        s.sad += d.abs();
        s.mse += d * d;
        s.grad += (gp[p] - gg[p]).powi(2);
        let l = if level[p] == -1.0 { 1.0 } else { level[p] };
        let (dp, dg) = (pred[p] - l, gt[p] - l);
        let phi_p = 1.0 - if dp >= 0.15 { dp } else { 0.0 };
        let phi_g = 1.0 - if dg >= 0.15 { dg } else { 0.0 };
        s.conn += (phi_p - phi_g).abs();
    }
    s.sad /= 1000.0;
    s.mse = s.mse / n as f64 * 1000.0;
    s.grad /= 1000.0;
    s.conn /= 1000.0;
    s
}

/// A random `(pred, gt, unknown)` triple of side `n`: a smooth blob matte,
/// a perturbed and partly saturated prediction, and a band-shaped region.
pub fn random_case(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (cy, cx) = (rng.random_range(0.3..0.7) * n as f64, rng.random_range(0.3..0.7) * n as f64);
    let rad = rng.random_range(0.2..0.35) * n as f64;
    let soft = rng.random_range(1.0..4.0);
    let gt: Vec<f64> = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
            ((rad - d) / soft + 0.5).clamp(0.0, 1.0)
        })
        .collect();
    let noise = rng.random_range(0.02..0.3);
    let pred: Vec<f64> = gt
        .iter()
        .map(|g| {
            let v = g + rng.random_range(-noise..noise);
            if rng.random::<f64>() < 0.1 { v.round() } else { v }.clamp(0.0, 1.0)
        })
        .map(|v| v as f32 as f64)
        .collect();
    let gt: Vec<f64> = gt.into_iter().map(|v| v as f32 as f64).collect();
    let band = rng.random_range(2.0..8.0);
    let unknown = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            (((y - cy).powi(2) + (x - cx).powi(2)).sqrt() - rad).abs() < band
        })
        .collect();
    (pred, gt, unknown)
}
