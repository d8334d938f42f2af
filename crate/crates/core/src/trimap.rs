//! Trimaps, alpha mattes, RGB images and the compositing equation.

use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Real, Tensor};

/// Per-pixel trimap label. Discriminants give the one-hot channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Region {
    Bg = 0,
    Uk = 1,
    Fg = 2,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Bg, Region::Uk, Region::Fg];

    /// 8-bit grayscale encoding used in trimap files.
    pub fn to_gray(self) -> u8 {
        match self {
            Region::Bg => 0,
            Region::Uk => 128,
            Region::Fg => 255,
        }
    }

    /// 0 → BG, 255 → FG, anything else → UK.
    pub fn from_gray(v: u8) -> Region {
        match v {
            0 => Region::Bg,
            255 => Region::Fg,
            _ => Region::Uk,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trimap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<Region>,
}

/// Token-grid labels for one encoder stage.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionMap {
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<Region>,
}

/// Per-pixel opacity in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMatte {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

/// Planar RGB image, three `height×width` planes with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Trimap {
    pub fn new(height: usize, width: usize, labels: Vec<Region>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_err(format!("trimap {height}×{width} with {} labels", labels.len())));
        }
        Ok(Trimap { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, region: Region) -> Self {
        Trimap { height, width, labels: vec![region; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> Region {
        self.labels[y * self.width + x]
    }

    pub fn count(&self, region: Region) -> usize {
        self.labels.iter().filter(|&&r| r == region).count()
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = img.dimensions();
        Trimap::new(h as usize, w as usize, img.pixels().map(|p| Region::from_gray(p.0[0])).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.labels.iter().map(|r| r.to_gray()).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, buf).ok_or_else(|| shape_err("trimap buffer size"))?;
        img.save(path)?;
        Ok(())
    }
}

impl RegionMap {
    /// `[N_bg, N_uk, N_fg]`.
    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for &r in &self.labels {
            c[r as usize] += 1;
        }
        c
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl AlphaMatte {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != height * width {
            return Err(shape_err(format!("alpha {height}×{width} with {} values", values.len())));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Contract(format!("alpha value {v} outside [0, 1]")));
        }
        Ok(AlphaMatte { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        AlphaMatte { height, width, values: vec![value.clamp(0.0, 1.0); height * width] }
    }

    /// Clamps into `[0, 1]`; used for network outputs and resampled mattes.
    pub fn from_clamped(height: usize, width: usize, values: impl IntoIterator<Item = f32>) -> Result<Self> {
        Self::new(height, width, values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.values.iter().map(|&v| T::lit(v as f64)).collect();
        Tensor::from_vec(&[1, self.height, self.width], data).expect("alpha dims")
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = img.dimensions();
        AlphaMatte::new(h as usize, w as usize, img.pixels().map(|p| p.0[0] as f32 / 255.0).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf: Vec<u8> = self.values.iter().map(|v| (v * 255.0).round() as u8).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, buf).ok_or_else(|| shape_err("alpha buffer size"))?;
        img.save(path)?;
        Ok(())
    }
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(shape_err(format!("RGB {height}×{width} needs {} values, got {}", 3 * height * width, data.len())));
        }
        Ok(RgbImage { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let n = height * width;
        let mut data = Vec::with_capacity(3 * n);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, n));
        }
        RgbImage { height, width, data }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::lit(v as f64)).collect();
        Tensor::from_vec(&[3, self.height, self.width], data).expect("rgb dims")
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.into_rgb8();
        let (w, h) = img.dimensions();
        let n = (w * h) as usize;
        let mut data = vec![0.0; 3 * n];
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * n + i] = p.0[c] as f32 / 255.0;
            }
        }
        RgbImage::new(h as usize, w as usize, data)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let n = self.height * self.width;
        let mut buf = Vec::with_capacity(3 * n);
        for i in 0..n {
            for c in 0..3 {
                buf.push((self.data[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, buf).ok_or_else(|| shape_err("rgb buffer size"))?;
        img.save(path)?;
        Ok(())
    }
}

/// Three planes in (BG, UK, FG) order; each pixel is 1 in exactly one plane.
pub fn one_hot_trimap<T: Real>(t: &Trimap) -> Tensor<T> {
    let n = t.height * t.width;
    let mut data = vec![T::zero(); 3 * n];
    for (i, &r) in t.labels.iter().enumerate() {
        data[r as usize * n + i] = T::one();
    }
    Tensor::from_vec(&[3, t.height, t.width], data).expect("trimap dims")
}

/// Rank used to break majority ties: UK beats FG beats BG.
fn tie_rank(r: Region) -> u8 {
    match r {
        Region::Uk => 2,
        Region::Fg => 1,
        Region::Bg => 0,
    }
}

/// Labels each `factor×factor` footprint with its majority region.
pub fn region_downsample(t: &Trimap, factor: usize) -> Result<RegionMap> {
    if factor == 0 || t.height % factor != 0 || t.width % factor != 0 {
        return Err(shape_err(format!("trimap {}×{} not divisible by {factor}", t.height, t.width)));
    }
    let (rows, cols) = (t.height / factor, t.width / factor);
    let mut labels = Vec::with_capacity(rows * cols);
    for ty in 0..rows {
        for tx in 0..cols {
            let mut counts = [0usize; 3];
            for y in ty * factor..(ty + 1) * factor {
                for x in tx * factor..(tx + 1) * factor {
                    counts[t.get(y, x) as usize] += 1;
                }
            }
            let best = Region::ALL.into_iter().max_by_key(|&r| (counts[r as usize], tie_rank(r))).expect("three regions");
            labels.push(best);
        }
    }
    Ok(RegionMap { rows, cols, labels })
}

/// Square-element dilation of a boolean mask with Chebyshev radius `r`.
pub fn dilate(mask: &[bool], height: usize, width: usize, r: usize) -> Vec<bool> {
    if r == 0 {
        return mask.to_vec();
    }
    let pass = |src: &[bool], len: usize, lines: usize, at: &dyn Fn(usize, usize) -> usize| {
        let mut out = vec![false; src.len()];
        for line in 0..lines {
            // prefix counts of set pixels along the line
            let mut prefix = vec![0usize; len + 1];
            for i in 0..len {
                prefix[i + 1] = prefix[i] + src[at(line, i)] as usize;
            }
            for i in 0..len {
                let lo = i.saturating_sub(r);
                let hi = (i + r + 1).min(len);
                out[at(line, i)] = prefix[hi] > prefix[lo];
            }
        }
        out
    };
    let rows = pass(mask, width, height, &|y, x| y * width + x);
    pass(&rows, height, width, &|x, y| y * width + x)
}

/// Trimap from a ground-truth alpha.
///
/// `α ≤ lo` is BG, `α ≥ hi` is FG, the rest UK. The unknown band is then
/// grown by `radius`: a pixel becomes UK when an initial UK pixel lies within
/// Chebyshev distance `radius`, or when both an FG and a BG pixel do (the
/// dilated FG/BG boundary).
pub fn trimap_from_alpha(a: &AlphaMatte, lo: f32, hi: f32, radius: usize) -> Result<Trimap> {
    if !(0.0 <= lo && lo < hi && hi <= 1.0) {
        return Err(Error::Config(format!("need 0 ≤ lo < hi ≤ 1, got lo={lo} hi={hi}")));
    }
    let (h, w) = (a.height, a.width);
    let fg: Vec<bool> = a.values.iter().map(|&v| v >= hi).collect();
    let bg: Vec<bool> = a.values.iter().map(|&v| v <= lo).collect();
    let uk: Vec<bool> = fg.iter().zip(&bg).map(|(&f, &b)| !f && !b).collect();
    let (uk_d, fg_d, bg_d) = (dilate(&uk, h, w, radius), dilate(&fg, h, w, radius), dilate(&bg, h, w, radius));
    let labels = (0..h * w)
        .map(|i| {
            if uk_d[i] || (fg_d[i] && bg_d[i]) {
                Region::Uk
            } else if fg[i] {
                Region::Fg
            } else {
                Region::Bg
            }
        })
        .collect();
    Trimap::new(h, w, labels)
}

/// `I = α·F + (1 − α)·B` per pixel and channel.
pub fn composite(f: &RgbImage, b: &RgbImage, a: &AlphaMatte) -> Result<RgbImage> {
    let dims = (a.height, a.width);
    if (f.height, f.width) != dims || (b.height, b.width) != dims {
        return Err(shape_err(format!("composite: F {}×{}, B {}×{}, α {}×{}", f.height, f.width, b.height, b.width, a.height, a.width)));
    }
    let n = a.height * a.width;
    let data = (0..3 * n)
        .map(|k| {
            let al = a.values[k % n];
            al * f.data[k] + (1.0 - al) * b.data[k]
        })
        .collect();
    RgbImage::new(a.height, a.width, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trimap_of(rows: &[&str]) -> Trimap {
        let h = rows.len();
        let w = rows[0].len();
        let labels = rows
            .iter()
            .flat_map(|r| {
                r.chars().map(|c| match c {
                    'F' => Region::Fg,
                    'U' => Region::Uk,
                    _ => Region::Bg,
                })
            })
            .collect();
        Trimap::new(h, w, labels).unwrap()
    }

    #[test]
    fn one_hot_examples() {
        let fg = one_hot_trimap::<f32>(&Trimap::filled(2, 3, Region::Fg));
        let d = fg.to_vec();
        assert!(d[..12].iter().all(|&v| v == 0.0) && d[12..].iter().all(|&v| v == 1.0));
        let bg = one_hot_trimap::<f32>(&Trimap::filled(2, 3, Region::Bg)).to_vec();
        assert!(bg[..6].iter().all(|&v| v == 1.0) && bg[6..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn downsample_majority_and_ties() {
        let all_fg = Trimap::filled(8, 8, Region::Fg);
        for f in [1, 2, 4, 8] {
            assert!(region_downsample(&all_fg, f).unwrap().labels.iter().all(|&r| r == Region::Fg));
        }
        // 9 FG / 7 BG
        let t = trimap_of(&["FFFF", "FFFF", "FBBB", "BBBB"]);
        assert_eq!(region_downsample(&t, 4).unwrap().labels, vec![Region::Fg]);
        // 8 UK / 8 FG
        let t = trimap_of(&["UUUU", "UUUU", "FFFF", "FFFF"]);
        assert_eq!(region_downsample(&t, 4).unwrap().labels, vec![Region::Uk]);
        // 8 FG / 8 BG
        let t = trimap_of(&["BBBB", "BBBB", "FFFF", "FFFF"]);
        assert_eq!(region_downsample(&t, 4).unwrap().labels, vec![Region::Fg]);
        assert!(region_downsample(&t, 3).is_err());
    }

    #[test]
    fn trimap_from_binary_alpha() {
        let mut v = vec![0.0; 36];
        for y in 0..6 {
            for x in 3..6 {
                v[y * 6 + x] = 1.0;
            }
        }
        let a = AlphaMatte::new(6, 6, v).unwrap();
        let t0 = trimap_from_alpha(&a, 0.0, 1.0, 0).unwrap();
        assert_eq!(t0.count(Region::Uk), 0);
        assert_eq!(t0.count(Region::Fg), 18);
        let t1 = trimap_from_alpha(&a, 0.0, 1.0, 1).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let expect = if x == 2 || x == 3 {
                    Region::Uk
                } else if x > 3 {
                    Region::Fg
                } else {
                    Region::Bg
                };
                assert_eq!(t1.get(y, x), expect, "({y},{x})");
            }
        }
        let half = AlphaMatte::filled(4, 4, 0.5);
        assert_eq!(trimap_from_alpha(&half, 0.0, 1.0, 0).unwrap().count(Region::Uk), 16);
        assert!(trimap_from_alpha(&half, 0.6, 0.5, 0).is_err());
    }

    /// Brute-force window scan: UK iff an initial UK pixel, or both an FG and
    /// a BG pixel, lie within the square neighborhood.
    fn trimap_oracle(a: &AlphaMatte, lo: f32, hi: f32, r: usize) -> Vec<Region> {
        let (h, w) = (a.height as isize, a.width as isize);
        let r = r as isize;
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let (mut any_uk, mut any_fg, mut any_bg) = (false, false, false);
                for yy in (y - r).max(0)..=(y + r).min(h - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(w - 1) {
                        let v = a.values[(yy * w + xx) as usize];
                        if v >= hi {
                            any_fg = true;
                        } else if v <= lo {
                            any_bg = true;
                        } else {
                            any_uk = true;
                        }
                    }
                }
                let v = a.values[(y * w + x) as usize];
                out.push(if any_uk || (any_fg && any_bg) {
                    Region::Uk
                } else if v >= hi {
                    Region::Fg
                } else {
                    Region::Bg
                });
            }
        }
        out
    }

    proptest! {
        #[test]
        fn dilation_matches_window_oracle_and_is_monotone(
            vals in proptest::collection::vec(prop_oneof![Just(0.0f32), Just(1.0f32), 0.0f32..1.0], 49),
            r in 0usize..4,
        ) {
            let a = AlphaMatte::new(7, 7, vals).unwrap();
            let t = trimap_from_alpha(&a, 0.1, 0.9, r).unwrap();
            prop_assert_eq!(&t.labels, &trimap_oracle(&a, 0.1, 0.9, r));
            let t_next = trimap_from_alpha(&a, 0.1, 0.9, r + 1).unwrap();
            for (p, q) in t.labels.iter().zip(&t_next.labels) {
                prop_assert!(*p != Region::Uk || *q == Region::Uk);
            }
        }

        #[test]
        fn region_counts_cover_every_token(labels in proptest::collection::vec(0u8..3, 64)) {
            let t = Trimap::new(8, 8, labels.iter().map(|&v| Region::ALL[v as usize]).collect()).unwrap();
            for f in [1usize, 2, 4, 8] {
                let m = region_downsample(&t, f).unwrap();
                prop_assert_eq!(m.counts().iter().sum::<usize>(), (8 / f) * (8 / f));
            }
            let oh = one_hot_trimap::<f64>(&t).to_vec();
            for i in 0..64 {
                prop_assert_eq!(oh[i] + oh[64 + i] + oh[128 + i], 1.0);
            }
        }

        #[test]
        fn composite_is_affine_in_alpha(
            a1 in proptest::collection::vec(0.0f32..=1.0, 6),
            a2 in proptest::collection::vec(0.0f32..=1.0, 6),
            fv in proptest::collection::vec(0.0f32..=1.0, 18),
            bv in proptest::collection::vec(0.0f32..=1.0, 18),
        ) {
            let f = RgbImage::new(2, 3, fv).unwrap();
            let b = RgbImage::new(2, 3, bv).unwrap();
            let mid: Vec<f32> = a1.iter().zip(&a2).map(|(x, y)| (x + y) / 2.0).collect();
            let c1 = composite(&f, &b, &AlphaMatte::new(2, 3, a1).unwrap()).unwrap();
            let c2 = composite(&f, &b, &AlphaMatte::new(2, 3, a2).unwrap()).unwrap();
            let cm = composite(&f, &b, &AlphaMatte::new(2, 3, mid).unwrap()).unwrap();
            for k in 0..18 {
                prop_assert!((cm.data[k] - (c1.data[k] + c2.data[k]) / 2.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn composite_examples() {
        let f = RgbImage::filled(2, 2, [1.0, 0.5, 0.25]);
        let b = RgbImage::filled(2, 2, [0.0, 0.1, 0.9]);
        assert_eq!(composite(&f, &b, &AlphaMatte::filled(2, 2, 1.0)).unwrap(), f);
        assert_eq!(composite(&f, &b, &AlphaMatte::filled(2, 2, 0.0)).unwrap(), b);
        let white = RgbImage::filled(2, 2, [1.0; 3]);
        let black = RgbImage::filled(2, 2, [0.0; 3]);
        let c = composite(&white, &black, &AlphaMatte::filled(2, 2, 0.5)).unwrap();
        assert!(c.data.iter().all(|&v| v == 0.5));
        assert!(composite(&f, &RgbImage::filled(3, 2, [0.0; 3]), &AlphaMatte::filled(2, 2, 0.5)).is_err());
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = trimap_of(&["FUB", "BUF"]);
        let p = dir.path().join("t.png");
        t.save_png(&p).unwrap();
        assert_eq!(Trimap::load_png(&p).unwrap(), t);
        let a = AlphaMatte::new(1, 3, vec![0.0, 128.0 / 255.0, 1.0]).unwrap();
        let p = dir.path().join("a.png");
        a.save_png(&p).unwrap();
        assert_eq!(AlphaMatte::load_png(&p).unwrap(), a);
    }
}
