//! Parameter-free pseudo mask construction from CLS attention maps.
//!
//! Everything here works on plain `f64`/`u8` buffers copied out of the tape,
//! so nothing built here can carry gradient history.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use g2d_tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const OTSU_BINS: usize = 64;

/// Per-head CLS-to-pixel attention of one image, `heads×h×w` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub heads: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl AttentionMaps {
    pub fn new(heads: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if heads == 0 || h == 0 || w == 0 || data.len() != heads * h * w {
            return Err(Error::input(
                "attention_maps",
                format!("{} values for {heads}×{h}×{w}", data.len()),
            ));
        }
        Ok(Self { heads, h, w, data })
    }

    pub fn head(&self, i: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[i * n..(i + 1) * n]
    }

    /// Splits a `[K×heads×h×w]` tensor into one map per batch item.
    pub fn from_batch(t: &Tensor) -> Result<Vec<Self>> {
        let [k, heads, h, w] = *t.shape() else {
            return Err(Error::input(
                "attention_maps",
                format!("expected rank 4, got {:?}", t.shape()),
            ));
        };
        let n = heads * h * w;
        (0..k)
            .map(|i| Self::new(heads, h, w, t.data()[i * n..(i + 1) * n].to_vec()))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != h * w || bits.iter().any(|&b| b > 1) {
            return Err(Error::input("binary_mask", format!("need {} values in {{0,1}}", h * w)));
        }
        Ok(Self { h, w, bits })
    }

    pub fn full(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![1; h * w],
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| a <= b)
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyMask {
    pub mask: BinaryMask,
    /// Set when the image had no usable intensity split and the whole image
    /// was taken as body.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoMask {
    pub mask: BinaryMask,
    pub threshold: f64,
    pub smoothed: bool,
}

/// Which scores the percentile is taken over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdScope {
    WithinBody,
    /// Outside-body scores are zeroed and kept in the sample.
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskOptions {
    pub pct: f64,
    pub aggregate: bool,
    pub body_mask: bool,
    pub smoothing: bool,
    pub sigma_s: f64,
    pub sigma_r: f64,
    pub scope: ThresholdScope,
}

impl Default for MaskOptions {
    fn default() -> Self {
        Self {
            pct: 0.85,
            aggregate: true,
            body_mask: true,
            smoothing: true,
            sigma_s: 2.0,
            sigma_r: 0.5,
            scope: ThresholdScope::WithinBody,
        }
    }
}

/// Mean over heads. Each pixel's head values are summed in sorted order, so
/// the result is bitwise independent of head order.
pub fn aggregate_heads(attn: &AttentionMaps) -> Vec<f64> {
    let n = attn.h * attn.w;
    let mut vals = vec![0.0; attn.heads];
    (0..n)
        .map(|p| {
            for (h, v) in vals.iter_mut().enumerate() {
                *v = attn.data[h * n + p];
            }
            vals.sort_by(f64::total_cmp);
            vals.iter().sum::<f64>() / attn.heads as f64
        })
        .collect()
}

/// Bilinear resize of an `h×w` map (half-pixel centers).
pub fn upsample(map: &[f64], (h, w): (usize, usize), (out_h, out_w): (usize, usize)) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(&[h, w], map.to_vec())?);
    let up = tape.upsample_bilinear(v, out_h, out_w)?;
    Ok(tape.value(up).data().to_vec())
}

/// Otsu split over `OTSU_BINS` bins. Returns the first bin of the bright
/// class, or `None` when no split separates two non-empty classes.
pub fn otsu_bin(img: &[f64]) -> Option<usize> {
    let mut count = [0usize; OTSU_BINS];
    let mut sum = [0.0f64; OTSU_BINS];
    for &v in img {
        let b = ((v * OTSU_BINS as f64).floor().max(0.0) as usize).min(OTSU_BINS - 1);
        count[b] += 1;
        sum[b] += v;
    }
    let total = img.len() as f64;
    let total_sum: f64 = sum.iter().sum();
    let (mut n0, mut s0) = (0usize, 0.0f64);
    let mut best: Option<(usize, f64)> = None;
    for t in 1..OTSU_BINS {
        n0 += count[t - 1];
        s0 += sum[t - 1];
        let n1 = img.len() - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let (w0, w1) = (n0 as f64 / total, n1 as f64 / total);
        let (m0, m1) = (s0 / n0 as f64, (total_sum - s0) / n1 as f64);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if best.map_or(true, |(_, b)| between > b) {
            best = Some((t, between));
        }
    }
    best.filter(|&(_, b)| b > 0.0).map(|(t, _)| t)
}

const NEIGHBORS: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

fn neighbors(p: usize, h: usize, w: usize) -> impl Iterator<Item = usize> {
    let (y, x) = ((p / w) as isize, (p % w) as isize);
    NEIGHBORS.iter().filter_map(move |&(dy, dx)| {
        let (ny, nx) = (y + dy, x + dx);
        (ny >= 0 && nx >= 0 && ny < h as isize && nx < w as isize).then(|| ny as usize * w + nx as usize)
    })
}

/// Keeps the largest 4-connected component; ties go to the component met
/// first in raster order.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.h, mask.w);
    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(usize, usize)> = None;
    let mut queue = VecDeque::new();
    let mut id = 0;
    for start in 0..h * w {
        if mask.bits[start] == 0 || label[start] != usize::MAX {
            continue;
        }
        label[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            for q in neighbors(p, h, w) {
                if mask.bits[q] == 1 && label[q] == usize::MAX {
                    label[q] = id;
                    queue.push_back(q);
                }
            }
        }
        if best.map_or(true, |(_, s)| size > s) {
            best = Some((id, size));
        }
        id += 1;
    }
    let keep = best.map(|(i, _)| i);
    BinaryMask {
        h,
        w,
        bits: label.iter().map(|&l| (Some(l) == keep) as u8).collect(),
    }
}

/// Sets every background pixel not 4-connected to the border.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.h, mask.w);
    let mut outside = vec![false; h * w];
    let mut queue = VecDeque::new();
    for p in 0..h * w {
        let (y, x) = (p / w, p % w);
        let border = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
        if border && mask.bits[p] == 0 {
            outside[p] = true;
            queue.push_back(p);
        }
    }
    while let Some(p) = queue.pop_front() {
        for q in neighbors(p, h, w) {
            if mask.bits[q] == 0 && !outside[q] {
                outside[q] = true;
                queue.push_back(q);
            }
        }
    }
    BinaryMask {
        h,
        w,
        bits: outside.iter().map(|&o| (!o) as u8).collect(),
    }
}

/// Otsu foreground (the brighter class), largest component, holes filled.
pub fn body_mask(img: &[f64], h: usize, w: usize) -> Result<BodyMask> {
    if img.len() != h * w || h == 0 || w == 0 {
        return Err(Error::input("body_mask", format!("{} pixels for {h}×{w}", img.len())));
    }
    if img.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::input("body_mask", "pixel values must lie in [0,1]"));
    }
    let Some(t) = otsu_bin(img) else {
        return Ok(BodyMask {
            mask: BinaryMask::full(h, w),
            degenerate: true,
        });
    };
    let fg = BinaryMask {
        h,
        w,
        bits: img
            .iter()
            .map(|&v| (((v * OTSU_BINS as f64).floor() as usize).min(OTSU_BINS - 1) >= t) as u8)
            .collect(),
    };
    Ok(BodyMask {
        mask: fill_holes(&largest_component(&fg)),
        degenerate: false,
    })
}

/// Nearest-rank percentile: the value at ascending rank `⌈pct·n⌉`.
pub fn nearest_rank(sorted: &[f64], pct: f64) -> f64 {
    let n = sorted.len();
    // The small offset keeps products such as 0.85·20 from rounding up a rank.
    let rank = ((pct * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Binarizes `scores` at the `pct` percentile; nothing outside the body is
/// ever positive.
pub fn threshold_mask(scores: &[f64], body: &BodyMask, pct: f64, scope: ThresholdScope) -> Result<PseudoMask> {
    let b = &body.mask;
    if scores.len() != b.bits.len() {
        return Err(Error::input("threshold_mask", "score map and body mask differ in size"));
    }
    if !(pct > 0.0 && pct < 1.0) {
        return Err(Error::input("threshold_mask", format!("pct {pct} outside (0,1)")));
    }
    let mut sample: Vec<f64> = match scope {
        ThresholdScope::WithinBody => scores
            .iter()
            .zip(&b.bits)
            .filter(|(_, &m)| m == 1)
            .map(|(&s, _)| s)
            .collect(),
        ThresholdScope::Global => scores
            .iter()
            .zip(&b.bits)
            .map(|(&s, &m)| if m == 1 { s } else { 0.0 })
            .collect(),
    };
    if sample.is_empty() || b.count() == 0 {
        return Err(Error::input("threshold_mask", "empty body mask"));
    }
    sample.sort_by(f64::total_cmp);
    let t = nearest_rank(&sample, pct);
    let bits = scores
        .iter()
        .zip(&b.bits)
        .map(|(&s, &m)| (m == 1 && s >= t) as u8)
        .collect();
    Ok(PseudoMask {
        mask: BinaryMask { h: b.h, w: b.w, bits },
        threshold: t,
        smoothed: false,
    })
}

/// Bilateral filter on the `{0,1}` mask, re-binarized at 0.5 and
/// re-intersected with the body.
pub fn bilateral_smooth(m: &PseudoMask, body: &BodyMask, sigma_s: f64, sigma_r: f64) -> Result<PseudoMask> {
    if !(sigma_s > 0.0 && sigma_r > 0.0) {
        return Err(Error::input("bilateral_smooth", "sigmas must be positive"));
    }
    let (h, w) = (m.mask.h, m.mask.w);
    if body.mask.h != h || body.mask.w != w {
        return Err(Error::input("bilateral_smooth", "mask and body differ in size"));
    }
    // With a {0,1} image the range weight is 1 for equal values and
    // `r_diff` otherwise, and clamp-to-edge keeps every window full, so the
    // filter reduces to one Gaussian blur of the mask:
    //   S1 = Σ spatial·mask, S = Σ spatial
    //   p=1: S1 / (S1 + r_diff·(S−S1))    p=0: r_diff·S1 / ((S−S1) + r_diff·S1)
    let r = (2.0 * sigma_s).ceil() as isize;
    let g1: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma_s * sigma_s)).exp())
        .collect();
    let g_sum: f64 = g1.iter().sum();
    let s_all = g_sum * g_sum;
    let r_diff = (-1.0 / (2.0 * sigma_r * sigma_r)).exp();
    let src = &m.mask.bits;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            rows[y * w + x] = (-r..=r)
                .map(|d| g1[(d + r) as usize] * src[y * w + clamp(x as isize + d, w)] as f64)
                .sum();
        }
    }
    let mut bits = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let s1: f64 = (-r..=r)
                .map(|d| g1[(d + r) as usize] * rows[clamp(y as isize + d, h) * w + x])
                .sum();
            let p = y * w + x;
            let value = if src[p] == 1 {
                s1 / (s1 + r_diff * (s_all - s1))
            } else {
                r_diff * s1 / ((s_all - s1) + r_diff * s1)
            };
            bits[p] = (value >= 0.5 && body.mask.bits[p] == 1) as u8;
        }
    }
    Ok(PseudoMask {
        mask: BinaryMask { h, w, bits },
        threshold: m.threshold,
        smoothed: true,
    })
}

/// Full pipeline for one image. Returns one mask, or one per head when
/// aggregation is off.
pub fn build_pseudo_mask(
    img: &[f64],
    img_hw: usize,
    attn: &AttentionMaps,
    opts: &MaskOptions,
) -> Result<Vec<PseudoMask>> {
    let body = if opts.body_mask {
        body_mask(img, img_hw, img_hw)?
    } else {
        BodyMask {
            mask: BinaryMask::full(img_hw, img_hw),
            degenerate: false,
        }
    };
    let maps: Vec<Vec<f64>> = if opts.aggregate {
        vec![aggregate_heads(attn)]
    } else {
        (0..attn.heads).map(|h| attn.head(h).to_vec()).collect()
    };
    maps.iter()
        .map(|map| {
            let up = upsample(map, (attn.h, attn.w), (img_hw, img_hw))?;
            let m = threshold_mask(&up, &body, opts.pct, opts.scope)?;
            if opts.smoothing {
                bilateral_smooth(&m, &body, opts.sigma_s, opts.sigma_r)
            } else {
                Ok(m)
            }
        })
        .collect()
}

/// Fisher–Yates shuffle of masks across samples.
pub fn shuffle_masks<T>(masks: &mut [T], rng: &mut ChaCha8Rng) {
    masks.shuffle(rng);
}

/// Seeded convenience wrapper around [`shuffle_masks`].
pub fn shuffle_masks_seeded<T: Clone>(masks: &[T], seed: u64) -> Vec<T> {
    let mut out = masks.to_vec();
    shuffle_masks(&mut out, &mut ChaCha8Rng::seed_from_u64(seed));
    out
}

/// Binary PGM (P5), 0 or 255 per pixel.
pub fn export_pgm(path: &Path, mask: &BinaryMask) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", mask.w, mask.h)?;
    let px: Vec<u8> = mask.bits.iter().map(|&b| b * 255).collect();
    f.write_all(&px)?;
    Ok(())
}

/// Raw little-endian `f64` dump, row-major.
pub fn export_raw(path: &Path, values: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes)?;
    Ok(())
}
