//! Synthetic image-caption corpus and its `G2DS` container format.
//!
//! Each image is a bright ellipse ("body") on a dark background. Three in
//! four records also carry a brighter shape at one of nine grid positions;
//! the caption names the shape, its position and its size.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

pub const PAD: u32 = 0;
pub const NO_FINDING: u32 = 1;
pub const SHAPE_BASE: u32 = 2;
pub const POSITION_BASE: u32 = 5;
pub const SIZE_BASE: u32 = 14;
/// Number of distinct grammar words including the pad id.
pub const GRAMMAR_WORDS: usize = 16;

pub const BACKGROUND: f64 = 0.05;
pub const BODY: f64 = 0.45;
pub const FINDING: f64 = 0.9;

const MAGIC: &[u8; 4] = b"G2DS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shape {
    Disk,
    Square,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Disk, Shape::Square, Shape::Cross];

    pub fn token(self) -> u32 {
        SHAPE_BASE + self as u32
    }

    pub fn from_token(t: u32) -> Option<Shape> {
        t.checked_sub(SHAPE_BASE)
            .and_then(|i| Self::ALL.get(i as usize).copied())
    }
}

/// Where and how a finding is drawn. `position` indexes a 3×3 grid in
/// row-major order; `large` selects the size word.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Finding {
    pub shape: Shape,
    pub position: usize,
    pub large: bool,
    pub jitter: (i32, i32),
}

impl Finding {
    pub fn caption(&self) -> Vec<u32> {
        vec![
            self.shape.token(),
            POSITION_BASE + self.position as u32,
            SIZE_BASE + self.large as u32,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub n_records: usize,
    pub img_hw: usize,
    pub vocab: usize,
    pub maxlen: usize,
    pub noise_sigma: f64,
    /// Body semi-axes as fractions of the image side.
    pub body_ry: f64,
    pub body_rx: f64,
    pub p_finding: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_records: 512,
            img_hw: 32,
            vocab: 32,
            maxlen: 8,
            noise_sigma: 0.05,
            body_ry: 14.0 / 32.0,
            body_rx: 13.0 / 32.0,
            p_finding: 0.75,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Config(m));
        if self.img_hw < 16 {
            return bad(format!("img_hw {} is below the minimum of 16", self.img_hw));
        }
        if self.vocab < GRAMMAR_WORDS {
            return bad(format!(
                "vocab {} cannot hold {GRAMMAR_WORDS} grammar words",
                self.vocab
            ));
        }
        if self.maxlen < 3 {
            return bad(format!("maxlen {} is shorter than a caption", self.maxlen));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be finite and ≥ 0", self.noise_sigma));
        }
        if !(0.0..=1.0).contains(&self.p_finding) {
            return bad(format!("p_finding {} is not a probability", self.p_finding));
        }
        if !(self.body_ry > 0.0 && self.body_ry <= 0.5 && self.body_rx > 0.0 && self.body_rx <= 0.5) {
            return bad("body semi-axes must lie in (0, 0.5]".into());
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        self.img_hw as f64 / 32.0
    }

    pub fn radius(&self, large: bool) -> i32 {
        ((if large { 5.0 } else { 3.0 }) * self.scale()).round() as i32
    }

    fn grid_step(&self) -> i32 {
        (6.0 * self.scale()).round() as i32
    }

    /// Binary body ellipse.
    pub fn body_region(&self) -> Vec<u8> {
        let n = self.img_hw;
        let c = n as f64 / 2.0 - 0.5;
        let (ry, rx) = (self.body_ry * n as f64, self.body_rx * n as f64);
        let mut out = vec![0u8; n * n];
        for y in 0..n {
            for x in 0..n {
                let dy = (y as f64 - c) / ry;
                let dx = (x as f64 - c) / rx;
                out[y * n + x] = (dy * dy + dx * dx <= 1.0) as u8;
            }
        }
        out
    }

    /// Support of a finding, clipped to the body.
    pub fn finding_mask(&self, f: &Finding) -> Vec<u8> {
        let n = self.img_hw as i32;
        let body = self.body_region();
        let step = self.grid_step();
        let cy = n / 2 + (f.position / 3) as i32 * step - step + f.jitter.0;
        let cx = n / 2 + (f.position % 3) as i32 * step - step + f.jitter.1;
        let r = self.radius(f.large);
        let mut out = vec![0u8; (n * n) as usize];
        for y in 0..n {
            for x in 0..n {
                let (dy, dx) = (y - cy, x - cx);
                let inside = match f.shape {
                    Shape::Disk => dy * dy + dx * dx <= r * r,
                    Shape::Square => dy.abs() < r && dx.abs() < r,
                    Shape::Cross => (dy.abs() <= r && dx.abs() <= 1) || (dx.abs() <= r && dy.abs() <= 1),
                };
                let i = (y * n + x) as usize;
                out[i] = (inside && body[i] == 1) as u8;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    /// Row-major `img_hw²` intensities in `[0,1]`.
    pub image: Vec<f32>,
    pub tokens: Vec<u32>,
    pub label: u8,
    /// Exact finding support; never a training input.
    pub gt_mask: Vec<u8>,
}

impl Record {
    pub fn image_f64(&self) -> Vec<f64> {
        self.image.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub img_hw: usize,
    pub vocab: usize,
    pub maxlen: usize,
    pub records: Vec<Record>,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("not a G2DS file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("G2DS version {found} is not supported (expected {VERSION})")]
    VersionMismatch { found: u32 },
    #[error("G2DS payload truncated while reading {what}")]
    Truncated { what: String },
    #[error("malformed G2DS content: {0}")]
    Malformed(String),
    #[error("invalid corpus configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws the finding (if any) for one record.
pub fn draw_finding(cfg: &CorpusConfig, rng: &mut impl Rng) -> Option<Finding> {
    if !rng.gen_bool(cfg.p_finding) {
        return None;
    }
    let shape = Shape::ALL[rng.gen_range(0..3)];
    let position = rng.gen_range(0..9);
    let large = rng.gen_bool(0.5);
    let jitter = (rng.gen_range(-1..=1), rng.gen_range(-1..=1));
    Some(Finding {
        shape,
        position,
        large,
        jitter,
    })
}

/// Noiseless intensities for a record.
pub fn template(cfg: &CorpusConfig, finding: Option<&Finding>) -> Vec<f64> {
    let body = cfg.body_region();
    let mask = finding.map(|f| cfg.finding_mask(f));
    (0..body.len())
        .map(|i| match (&mask, body[i]) {
            (Some(m), _) if m[i] == 1 => FINDING,
            (_, 1) => BODY,
            _ => BACKGROUND,
        })
        .collect()
}

pub fn generate_record(cfg: &CorpusConfig, index: u64) -> Record {
    let mut rng = record_rng(cfg.seed, index);
    let finding = draw_finding(cfg, &mut rng);
    let base = template(cfg, finding.as_ref());
    let image = if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("validated sigma");
        base.iter()
            .map(|&v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
            .collect()
    } else {
        base.iter().map(|&v| v as f32).collect()
    };
    let (tokens, gt_mask) = match &finding {
        Some(f) => (f.caption(), cfg.finding_mask(f)),
        None => (vec![NO_FINDING], vec![0; cfg.img_hw * cfg.img_hw]),
    };
    let label = gt_mask.iter().any(|&b| b == 1) as u8;
    Record {
        image,
        tokens,
        label,
        gt_mask,
    }
}

/// Generates `cfg.n_records` records. Each record has its own RNG stream, so
/// the result does not depend on the rayon thread count.
pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus, CorpusError> {
    cfg.validate()?;
    let records = (0..cfg.n_records as u64)
        .into_par_iter()
        .map(|i| generate_record(cfg, i))
        .collect();
    Ok(Corpus {
        img_hw: cfg.img_hw,
        vocab: cfg.vocab,
        maxlen: cfg.maxlen,
        records,
    })
}

pub fn encode_corpus(corpus: &Corpus) -> Result<Vec<u8>, CorpusError> {
    let px = corpus.img_hw * corpus.img_hw;
    let mut out = Vec::with_capacity(28 + corpus.records.len() * (px * 5 + 20));
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        corpus.records.len() as u32,
        corpus.img_hw as u32,
        corpus.img_hw as u32,
        corpus.vocab as u32,
        corpus.maxlen as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for (i, r) in corpus.records.iter().enumerate() {
        if r.image.len() != px || r.gt_mask.len() != px || r.tokens.len() > corpus.maxlen {
            return Err(CorpusError::Malformed(format!(
                "record {i} does not match the header geometry"
            )));
        }
        r.image.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        out.extend_from_slice(&(r.tokens.len() as u32).to_le_bytes());
        r.tokens.iter().for_each(|t| out.extend_from_slice(&t.to_le_bytes()));
        out.push(r.label);
        out.extend_from_slice(&r.gt_mask);
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CorpusError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CorpusError::Truncated { what: what.to_string() })?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CorpusError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

pub fn decode_corpus(buf: &[u8]) -> Result<Corpus, CorpusError> {
    let mut c = Cursor { buf, at: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(CorpusError::BadMagic(magic));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(CorpusError::VersionMismatch { found: version });
    }
    let count = c.u32("count")? as usize;
    let (h, w) = (c.u32("img_h")? as usize, c.u32("img_w")? as usize);
    let vocab = c.u32("vocab")? as usize;
    let maxlen = c.u32("maxlen")? as usize;
    if h != w {
        return Err(CorpusError::Malformed(format!("non-square images {h}×{w}")));
    }
    let px = h * w;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let what = format!("record {i}");
        let image = c
            .take(px * 4, &what)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let n_tok = c.u32(&what)? as usize;
        if n_tok > maxlen {
            return Err(CorpusError::Malformed(format!(
                "record {i} has {n_tok} tokens, maxlen {maxlen}"
            )));
        }
        let tokens: Vec<u32> = c
            .take(n_tok * 4, &what)?
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(CorpusError::Malformed(format!(
                "record {i}: token {t} outside vocabulary {vocab}"
            )));
        }
        let label = c.take(1, &what)?[0];
        let gt_mask = c.take(px, &what)?.to_vec();
        if label > 1 || gt_mask.iter().any(|&b| b > 1) {
            return Err(CorpusError::Malformed(format!("record {i}: non-binary label or mask")));
        }
        records.push(Record {
            image,
            tokens,
            label,
            gt_mask,
        });
    }
    if c.at != buf.len() {
        return Err(CorpusError::Malformed(format!("{} trailing bytes", buf.len() - c.at)));
    }
    Ok(Corpus {
        img_hw: h,
        vocab,
        maxlen,
        records,
    })
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<(), CorpusError> {
    let bytes = encode_corpus(corpus)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_corpus(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_negative_is_the_body_template() {
        let cfg = CorpusConfig {
            noise_sigma: 0.0,
            ..CorpusConfig::default()
        };
        let i = (0..100)
            .find(|&i| generate_record(&cfg, i).label == 0)
            .expect("a negative within 100 draws");
        let r = generate_record(&cfg, i);
        assert_eq!(r.tokens, vec![NO_FINDING]);
        assert!(r.gt_mask.iter().all(|&b| b == 0));
        let want: Vec<f32> = template(&cfg, None).iter().map(|&v| v as f32).collect();
        assert_eq!(r.image, want);
    }

    #[test]
    fn records_are_deterministic_per_index() {
        let cfg = CorpusConfig::default();
        assert_eq!(generate_record(&cfg, 17), generate_record(&cfg, 17));
        assert_ne!(generate_record(&cfg, 17), generate_record(&cfg, 18));
    }

    #[test]
    fn findings_stay_inside_the_body() {
        let cfg = CorpusConfig::default();
        let body = cfg.body_region();
        for i in 0..300 {
            let r = generate_record(&cfg, i);
            assert!(r.gt_mask.iter().zip(&body).all(|(&m, &b)| m <= b));
            assert_eq!(r.label == 1, r.gt_mask.contains(&1));
        }
    }

    #[test]
    fn shape_tokens_round_trip() {
        for s in Shape::ALL {
            assert_eq!(Shape::from_token(s.token()), Some(s));
        }
        assert_eq!(Shape::from_token(NO_FINDING), None);
    }

    #[test]
    fn config_rejects_small_vocab() {
        let cfg = CorpusConfig {
            vocab: 10,
            ..CorpusConfig::default()
        };
        assert!(matches!(generate_corpus(&cfg), Err(CorpusError::Config(_))));
    }
}
