//! The network: conv encoder, attention pooling, text encoder, projectors,
//! and a U-Net style decoder.
//!
//! Every forward function works on a batch of `K` items recorded on a
//! [`Tape`]. Parameters are bound to the tape once per step with
//! [`Model::bind`].

use std::collections::HashMap;

use g2d_tensor::{Tape, Tensor, Var};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub img_hw: usize,
    pub enc_channels: Vec<usize>,
    pub text_vocab: usize,
    pub text_maxlen: usize,
    pub text_dim: usize,
    pub proj_dim: usize,
    pub attn_heads: usize,
    pub attn_head_dim: usize,
    pub decoder_skip: bool,
    /// Output channels of each decoder stage, coarse to fine.
    pub dec_channels: Vec<usize>,
    /// When false the decoder parameters are not created at all.
    pub decoder: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            img_hw: 32,
            enc_channels: vec![16, 32],
            text_vocab: 32,
            text_maxlen: 8,
            text_dim: 32,
            proj_dim: 128,
            attn_heads: 3,
            attn_head_dim: 16,
            decoder_skip: true,
            dec_channels: vec![8, 8],
            decoder: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.enc_channels.is_empty() || self.enc_channels.contains(&0) {
            return fail(format!(
                "enc_channels {:?} must be nonempty and positive",
                self.enc_channels
            ));
        }
        let stride = 1usize << self.enc_channels.len();
        if self.img_hw == 0 || self.img_hw % stride != 0 {
            return fail(format!(
                "img_hw {} is not divisible by 2^{}",
                self.img_hw,
                self.enc_channels.len()
            ));
        }
        if self.attn_heads == 0 {
            return fail("attn_heads must be at least 1".into());
        }
        if self.proj_dim < 2 {
            return fail("proj_dim must be at least 2".into());
        }
        if self.attn_head_dim == 0 || self.text_dim == 0 || self.text_maxlen == 0 || self.text_vocab < 2 {
            return fail("attn_head_dim, text_dim, text_maxlen must be positive and text_vocab ≥ 2".into());
        }
        if self.decoder && self.dec_channels.len() != self.enc_channels.len() {
            return fail(format!(
                "dec_channels {:?} needs one entry per encoder stage ({})",
                self.dec_channels,
                self.enc_channels.len()
            ));
        }
        if self.dec_channels.contains(&0) {
            return fail("dec_channels must be positive".into());
        }
        Ok(())
    }

    /// Channels of the dense map.
    pub fn dense_channels(&self) -> usize {
        *self.enc_channels.last().expect("validated")
    }

    /// Side length of the dense map.
    pub fn dense_hw(&self) -> usize {
        self.img_hw >> self.enc_channels.len()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let p = |k: &str, v: String| (k.to_string(), v);
        vec![
            p("img_hw", self.img_hw.to_string()),
            p("enc_channels", kv::render_list(&self.enc_channels)),
            p("text_vocab", self.text_vocab.to_string()),
            p("text_maxlen", self.text_maxlen.to_string()),
            p("text_dim", self.text_dim.to_string()),
            p("proj_dim", self.proj_dim.to_string()),
            p("attn_heads", self.attn_heads.to_string()),
            p("attn_head_dim", self.attn_head_dim.to_string()),
            p("decoder_skip", self.decoder_skip.to_string()),
            p("dec_channels", kv::render_list(&self.dec_channels)),
            p("decoder", self.decoder.to_string()),
            p("model_seed", self.seed.to_string()),
        ]
    }

    /// Applies one key. Returns `Ok(false)` when the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "img_hw" => self.img_hw = kv::parse_value(key, value)?,
            "enc_channels" => self.enc_channels = kv::parse_list(key, value)?,
            "text_vocab" => self.text_vocab = kv::parse_value(key, value)?,
            "text_maxlen" => self.text_maxlen = kv::parse_value(key, value)?,
            "text_dim" => self.text_dim = kv::parse_value(key, value)?,
            "proj_dim" => self.proj_dim = kv::parse_value(key, value)?,
            "attn_heads" => self.attn_heads = kv::parse_value(key, value)?,
            "attn_head_dim" => self.attn_head_dim = kv::parse_value(key, value)?,
            "decoder_skip" => self.decoder_skip = kv::parse_bool(key, value)?,
            "dec_channels" => self.dec_channels = kv::parse_list(key, value)?,
            "decoder" => self.decoder = kv::parse_bool(key, value)?,
            "model_seed" => self.seed = kv::parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Named parameter table in creation order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.values[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn bitwise_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names && self.values.iter().zip(&other.values).all(|(a, b)| a.bitwise_eq(b))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Parameters bound to one tape.
pub struct Bound<'m> {
    store: &'m ParamStore,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        let i = self
            .store
            .position(name)
            .unwrap_or_else(|| panic!("parameter {name:?} is not part of this model"));
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Output of the image encoder.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// `[K×C×h×w]`
    pub dense: Var,
    /// Input image followed by every encoder stage except the last, finest
    /// first. The decoder consumes them in reverse.
    pub skips: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct Pooled {
    /// `[K×C]`
    pub pooled: Var,
    /// `[K×heads×h×w]`, each head's map sums to one.
    pub attn: Var,
}

/// Which per-pixel features are compared against a text embedding during
/// zero-shot grounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelFeatures {
    /// The vision projector applied to each raw dense-map vector.
    Direct,
    /// Each pixel sent through the attention value/output path (as if the
    /// pool attended to it alone) before the vision projector.
    ValuePath,
}

impl std::str::FromStr for PixelFeatures {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(Self::Direct),
            "value_path" => Ok(Self::ValuePath),
            _ => Err(Error::Config(format!("unknown pixel feature path {s:?}"))),
        }
    }
}

impl std::fmt::Display for PixelFeatures {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Direct => "direct",
            Self::ValuePath => "value_path",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let seed = config.seed;
        let mut add = |name: String, shape: &[usize], fan_in: usize| -> Result<()> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
            let dist = Uniform::new_inclusive(-bound, bound);
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| dist.sample(&mut rng)).collect();
            params.insert(name, Tensor::new(shape, data)?)
        };
        let mut zeros = Vec::new();
        let c = config.dense_channels();
        let hw = config.dense_hw() * config.dense_hw();
        let (heads, dh, d, dl) = (
            config.attn_heads,
            config.attn_head_dim,
            config.proj_dim,
            config.text_dim,
        );

        let mut c_in = 1;
        for (i, &co) in config.enc_channels.iter().enumerate() {
            add(format!("enc.{i}.w"), &[co, c_in, 3, 3], c_in * 9)?;
            zeros.push((format!("enc.{i}.b"), vec![co]));
            c_in = co;
        }

        add("attn.pos".into(), &[hw, c], c)?;
        add("attn.cls".into(), &[1, c], c)?;
        for h in 0..heads {
            for part in ["wq", "wk", "wv"] {
                add(format!("attn.{h}.{part}"), &[c, dh], c)?;
            }
        }
        add("attn.out.w".into(), &[heads * dh, c], heads * dh)?;
        zeros.push(("attn.out.b".into(), vec![c]));

        add("text.tok".into(), &[config.text_vocab, dl], dl)?;
        add("text.pos".into(), &[config.text_maxlen, dl], dl)?;
        add("text.w".into(), &[dl, dl], dl)?;
        zeros.push(("text.b".into(), vec![dl]));

        for (tag, width) in [("proj_v", c), ("proj_l", dl)] {
            add(format!("{tag}.w1"), &[width, d], width)?;
            zeros.push((format!("{tag}.b1"), vec![d]));
            add(format!("{tag}.w2"), &[d, d], d)?;
            zeros.push((format!("{tag}.b2"), vec![d]));
        }

        if config.decoder {
            let stages = config.enc_channels.len();
            let mut prev = c;
            for i in 0..stages {
                let skip = if !config.decoder_skip {
                    0
                } else if i + 1 == stages {
                    1
                } else {
                    config.enc_channels[stages - 2 - i]
                };
                let ci = prev + skip;
                let co = config.dec_channels[i];
                add(format!("dec.{i}.w"), &[co, ci, 3, 3], ci * 9)?;
                zeros.push((format!("dec.{i}.b"), vec![co]));
                prev = co;
            }
            add("dec.out.w".into(), &[1, prev, 1, 1], prev)?;
            zeros.push(("dec.out.b".into(), vec![1]));
        }

        for (name, shape) in zeros {
            params.insert(name, Tensor::zeros(&shape))?;
        }
        Ok(Self { config, params })
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound<'_> {
        self.bind_with(tape, true)
    }

    /// Records every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound<'_> {
        self.bind_with(tape, false)
    }

    /// Uses `vars`, already on a tape, as the parameters in store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound<'_>> {
        if vars.len() != self.params.len() {
            return Err(Error::input(
                "bind_vars",
                format!("{} vars for {} parameters", vars.len(), self.params.len()),
            ));
        }
        Ok(Bound {
            store: &self.params,
            vars,
        })
    }

    fn bind_with(&self, tape: &mut Tape, requires_grad: bool) -> Bound<'_> {
        let vars = self
            .params
            .values()
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect();
        Bound {
            store: &self.params,
            vars,
        }
    }

    /// `imgs`: `[K×1×H×W]` with values in `[0,1]`.
    pub fn encode_images(&self, tape: &mut Tape, b: &Bound, imgs: Var) -> Result<Encoded> {
        let hw = self.config.img_hw;
        let shape = tape.shape(imgs).to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != hw || shape[3] != hw {
            return Err(Error::input(
                "encode_image",
                format!("expected [K×1×{hw}×{hw}], got {shape:?}"),
            ));
        }
        if tape.value(imgs).data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::input("encode_image", "pixel values must lie in [0,1]"));
        }
        let mut x = imgs;
        let mut skips = vec![imgs];
        let stages = self.config.enc_channels.len();
        for i in 0..stages {
            let conv = tape.conv2d(
                x,
                b.var(&format!("enc.{i}.w")),
                Some(b.var(&format!("enc.{i}.b"))),
                2,
                1,
            )?;
            x = tape.relu(conv)?;
            if i + 1 < stages {
                skips.push(x);
            }
        }
        Ok(Encoded { dense: x, skips })
    }

    /// Pixel tokens `[K·h·w × C]` of a dense map, with or without the
    /// learned positional embedding.
    fn tokens(&self, tape: &mut Tape, b: &Bound, dense: Var, with_pos: bool) -> Result<Var> {
        let (c, hw) = (self.config.dense_channels(), self.config.dense_hw().pow(2));
        let k = tape.shape(dense)[0];
        let flat = tape.reshape(dense, &[k, c, hw])?;
        let mut tok = tape.transpose(flat)?;
        if with_pos {
            tok = tape.add_bias(tok, b.var("attn.pos"))?;
        }
        Ok(tape.reshape(tok, &[k * hw, c])?)
    }

    /// Concatenated per-head value projections followed by the output
    /// projection, for `[N×C]` rows.
    fn value_path(&self, tape: &mut Tape, b: &Bound, rows: Var) -> Result<Var> {
        let heads: Vec<Var> = (0..self.config.attn_heads)
            .map(|h| tape.matmul(rows, b.var(&format!("attn.{h}.wv"))))
            .collect::<std::result::Result<_, _>>()?;
        let cat = tape.concat(&heads, 1)?;
        let out = tape.matmul(cat, b.var("attn.out.w"))?;
        Ok(tape.add_bias(out, b.var("attn.out.b"))?)
    }

    /// Multi-head attention pooling of the dense map with a learned CLS query.
    pub fn attention_pool(&self, tape: &mut Tape, b: &Bound, dense: Var) -> Result<Pooled> {
        let cfg = &self.config;
        let (side, dh) = (cfg.dense_hw(), cfg.attn_head_dim);
        let hw = side * side;
        let k = tape.shape(dense)[0];
        let tokens = self.tokens(tape, b, dense, true)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(cfg.attn_heads);
        let mut maps = Vec::with_capacity(cfg.attn_heads);
        for h in 0..cfg.attn_heads {
            let q = tape.matmul(b.var("attn.cls"), b.var(&format!("attn.{h}.wq")))?;
            let keys = tape.matmul(tokens, b.var(&format!("attn.{h}.wk")))?;
            let vals = tape.matmul(tokens, b.var(&format!("attn.{h}.wv")))?;
            let qt = tape.transpose(q)?;
            let raw = tape.matmul(keys, qt)?;
            let raw = tape.mul_scalar(raw, scale)?;
            let raw = tape.reshape(raw, &[k, hw])?;
            let attn = tape.softmax(raw, 1)?;
            let a3 = tape.reshape(attn, &[k, 1, hw])?;
            let v3 = tape.reshape(vals, &[k, hw, dh])?;
            let o = tape.matmul(a3, v3)?;
            outs.push(tape.reshape(o, &[k, dh])?);
            maps.push(a3);
        }
        let cat = tape.concat(&outs, 1)?;
        let pooled = tape.matmul(cat, b.var("attn.out.w"))?;
        let pooled = tape.add_bias(pooled, b.var("attn.out.b"))?;
        let attn = tape.concat(&maps, 1)?;
        let attn = tape.reshape(attn, &[k, cfg.attn_heads, side, side])?;
        Ok(Pooled { pooled, attn })
    }

    /// Mean of token+position embeddings over non-pad ids, then linear+relu.
    /// Returns `[K×D_l]`.
    pub fn encode_texts(&self, tape: &mut Tape, b: &Bound, captions: &[&[u32]]) -> Result<Var> {
        let cfg = &self.config;
        if captions.is_empty() {
            return Err(Error::input("encode_text", "empty batch"));
        }
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut spans = Vec::with_capacity(captions.len());
        for cap in captions {
            if cap.len() > cfg.text_maxlen {
                return Err(Error::input(
                    "encode_text",
                    format!("{} tokens exceed maxlen {}", cap.len(), cfg.text_maxlen),
                ));
            }
            let start = ids.len();
            for (p, &t) in cap.iter().enumerate() {
                if t as usize >= cfg.text_vocab {
                    return Err(Error::input(
                        "encode_text",
                        format!("token {t} out of range for vocabulary {}", cfg.text_vocab),
                    ));
                }
                if t != crate::corpus::PAD {
                    ids.push(t as usize);
                    pos.push(p);
                }
            }
            if ids.len() == start {
                return Err(Error::input("encode_text", "caption has no non-pad tokens"));
            }
            spans.push((start, ids.len()));
        }
        let n = ids.len();
        let mut avg = vec![0.0; captions.len() * n];
        for (row, &(s, e)) in spans.iter().enumerate() {
            let w = 1.0 / (e - s) as f64;
            avg[row * n + s..row * n + e].fill(w);
        }
        let avg = tape.constant(Tensor::new(&[captions.len(), n], avg)?);
        let tok = tape.embedding(b.var("text.tok"), &ids)?;
        let pe = tape.embedding(b.var("text.pos"), &pos)?;
        let emb = tape.add(tok, pe)?;
        let mean = tape.matmul(avg, emb)?;
        let lin = tape.matmul(mean, b.var("text.w"))?;
        let lin = tape.add_bias(lin, b.var("text.b"))?;
        Ok(tape.relu(lin)?)
    }

    fn projector(&self, tape: &mut Tape, b: &Bound, tag: &str, x: Var) -> Result<Var> {
        let h = tape.matmul(x, b.var(&format!("{tag}.w1")))?;
        let h = tape.add_bias(h, b.var(&format!("{tag}.b1")))?;
        let h = tape.relu(h)?;
        let o = tape.matmul(h, b.var(&format!("{tag}.w2")))?;
        let o = tape.add_bias(o, b.var(&format!("{tag}.b2")))?;
        Ok(tape.l2_normalize(o)?)
    }

    /// Vision projector: `[N×C]` → unit rows `[N×d]`.
    pub fn project_vision(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        self.check_width("project", tape, x, self.config.dense_channels())?;
        self.projector(tape, b, "proj_v", x)
    }

    /// Language projector: `[N×D_l]` → unit rows `[N×d]`.
    pub fn project_text(&self, tape: &mut Tape, b: &Bound, x: Var) -> Result<Var> {
        self.check_width("project", tape, x, self.config.text_dim)?;
        self.projector(tape, b, "proj_l", x)
    }

    fn check_width(&self, op: &'static str, tape: &Tape, x: Var, want: usize) -> Result<()> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != want {
            return Err(Error::input(op, format!("expected [N×{want}], got {s:?}")));
        }
        Ok(())
    }

    /// The vision projector applied at every pixel of the dense map.
    /// Returns `[K×h·w×d]`, pixels in row-major order, unit norm each.
    pub fn project_pixelwise(&self, tape: &mut Tape, b: &Bound, dense: Var, path: PixelFeatures) -> Result<Var> {
        let k = tape.shape(dense)[0];
        let hw = self.config.dense_hw().pow(2);
        let rows = match path {
            PixelFeatures::Direct => self.tokens(tape, b, dense, false)?,
            PixelFeatures::ValuePath => {
                let t = self.tokens(tape, b, dense, true)?;
                self.value_path(tape, b, t)?
            }
        };
        let p = self.projector(tape, b, "proj_v", rows)?;
        Ok(tape.reshape(p, &[k, hw, self.config.proj_dim])?)
    }

    /// Decoder from the dense map back to `[K×1×H×W]` probabilities.
    pub fn decode(&self, tape: &mut Tape, b: &Bound, enc: &Encoded) -> Result<Var> {
        let cfg = &self.config;
        if !cfg.decoder {
            return Err(Error::Config("model was built without a decoder".into()));
        }
        let stages = cfg.enc_channels.len();
        if enc.skips.len() != stages {
            return Err(Error::input(
                "decode",
                format!("expected {stages} skip tensors, got {}", enc.skips.len()),
            ));
        }
        let mut x = enc.dense;
        for i in 0..stages {
            let s = tape.shape(x).to_vec();
            let up = tape.upsample_bilinear(x, s[2] * 2, s[3] * 2)?;
            let input = if cfg.decoder_skip {
                let skip = enc.skips[stages - 1 - i];
                let (us, ss) = (tape.shape(up), tape.shape(skip));
                if us[0] != ss[0] || us[2..] != ss[2..] {
                    return Err(Error::input(
                        "decode",
                        format!("skip {:?} does not match upsampled {:?}", ss, us),
                    ));
                }
                tape.concat(&[up, skip], 1)?
            } else {
                up
            };
            let conv = tape.conv2d(
                input,
                b.var(&format!("dec.{i}.w")),
                Some(b.var(&format!("dec.{i}.b"))),
                1,
                1,
            )?;
            x = tape.relu(conv)?;
        }
        let logits = tape.conv2d(x, b.var("dec.out.w"), Some(b.var("dec.out.b")), 1, 0)?;
        Ok(tape.sigmoid(logits)?)
    }
}

/// Stacks `[H×W]` images into a `[K×1×H×W]` tensor.
pub fn stack_images(images: &[&[f64]], hw: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * hw * hw);
    for img in images {
        if img.len() != hw * hw {
            return Err(Error::input(
                "stack_images",
                format!("image has {} pixels, want {}", img.len(), hw * hw),
            ));
        }
        data.extend_from_slice(img);
    }
    Ok(Tensor::new(&[images.len(), 1, hw, hw], data)?)
}
