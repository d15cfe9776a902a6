//! Pre-training: configuration, schedule, AdamW, the training step and the
//! epoch loop.

use g2d_tensor::{Gradients, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::corpus::Record;
use crate::error::{Error, Result};
use crate::kv;
use crate::losses::{self, str_enum, DiceForm, LossBundle, VlaMode};
use crate::model::{stack_images, Bound, Model, ModelConfig};
use crate::pseudo_mask::{self, AttentionMaps, BinaryMask, MaskOptions, ThresholdScope};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderLoss {
    PseudoSeg,
    Reconstruction,
    None,
}

str_enum!(
    DecoderLoss,
    DecoderLoss::PseudoSeg => "pseudo_seg",
    DecoderLoss::Reconstruction => "reconstruction",
    DecoderLoss::None => "none"
);
str_enum!(
    ThresholdScope,
    ThresholdScope::WithinBody => "within_body",
    ThresholdScope::Global => "global"
);

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup_frac: f64,
    pub sigma: f64,
    pub vla_mode: VlaMode,
    pub dice_form: DiceForm,
    pub dice_eps: f64,
    pub mask: MaskOptions,
    pub decoder_loss: DecoderLoss,
    pub shuffle_masks: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            epochs: 200,
            lr: 2e-4,
            weight_decay: 1e-8,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmup_frac: 0.05,
            sigma: losses::DEFAULT_SIGMA,
            vla_mode: VlaMode::I2t,
            dice_form: DiceForm::ImageSoft,
            dice_eps: 1.0,
            mask: MaskOptions::default(),
            decoder_loss: DecoderLoss::PseudoSeg,
            shuffle_masks: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch < 2 {
            return fail(format!("batch {} must be at least 2", self.batch));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return fail(format!("warmup_frac {} must lie in (0,1)", self.warmup_frac));
        }
        if !(self.mask.pct > 0.0 && self.mask.pct < 1.0) {
            return fail(format!("pct {} must lie in (0,1)", self.mask.pct));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.sigma > 0.0 && self.adam_eps > 0.0) {
            return fail("lr, weight_decay must be ≥ 0 and sigma, adam_eps > 0".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return fail("betas must lie in [0,1)".into());
        }
        if !(self.mask.sigma_s > 0.0 && self.mask.sigma_r > 0.0 && self.dice_eps > 0.0) {
            return fail("sigma_s, sigma_r and dice_eps must be positive".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let p = |k: &str, v: String| (k.to_string(), v);
        let f = kv::render_f64;
        vec![
            p("batch", self.batch.to_string()),
            p("epochs", self.epochs.to_string()),
            p("lr", f(self.lr)),
            p("weight_decay", f(self.weight_decay)),
            p("beta1", f(self.beta1)),
            p("beta2", f(self.beta2)),
            p("adam_eps", f(self.adam_eps)),
            p("warmup_frac", f(self.warmup_frac)),
            p("sigma", f(self.sigma)),
            p("vla_mode", self.vla_mode.to_string()),
            p("dice_form", self.dice_form.to_string()),
            p("dice_eps", f(self.dice_eps)),
            p("pct", f(self.mask.pct)),
            p("aggregation", self.mask.aggregate.to_string()),
            p("body_mask", self.mask.body_mask.to_string()),
            p("smoothing", self.mask.smoothing.to_string()),
            p("sigma_s", f(self.mask.sigma_s)),
            p("sigma_r", f(self.mask.sigma_r)),
            p("threshold_scope", self.mask.scope.to_string()),
            p("decoder_loss", self.decoder_loss.to_string()),
            p("shuffle_masks", self.shuffle_masks.to_string()),
            p("seed", self.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        use kv::{parse_bool as b, parse_value as v};
        match key {
            "batch" => self.batch = v(key, value)?,
            "epochs" => self.epochs = v(key, value)?,
            "lr" => self.lr = v(key, value)?,
            "weight_decay" => self.weight_decay = v(key, value)?,
            "beta1" => self.beta1 = v(key, value)?,
            "beta2" => self.beta2 = v(key, value)?,
            "adam_eps" => self.adam_eps = v(key, value)?,
            "warmup_frac" => self.warmup_frac = v(key, value)?,
            "sigma" => self.sigma = v(key, value)?,
            "vla_mode" => self.vla_mode = value.parse()?,
            "dice_form" => self.dice_form = value.parse()?,
            "dice_eps" => self.dice_eps = v(key, value)?,
            "pct" => self.mask.pct = v(key, value)?,
            "aggregation" => self.mask.aggregate = b(key, value)?,
            "body_mask" => self.mask.body_mask = b(key, value)?,
            "smoothing" => self.mask.smoothing = b(key, value)?,
            "sigma_s" => self.mask.sigma_s = v(key, value)?,
            "sigma_r" => self.mask.sigma_r = v(key, value)?,
            "threshold_scope" => self.mask.scope = value.parse()?,
            "decoder_loss" => self.decoder_loss = value.parse()?,
            "shuffle_masks" => self.shuffle_masks = b(key, value)?,
            "seed" => self.seed = v(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Model plus training configuration; its canonical text is embedded in
/// checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.decoder_loss != DecoderLoss::None && !self.model.decoder {
            return Err(Error::Config(format!(
                "decoder_loss={} needs a model with a decoder",
                self.train.decoder_loss
            )));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? || self.train.set(key, value)? {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown key {key:?}")))
        }
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in kv::parse(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// One `key=value` line per field in a fixed order.
    pub fn to_text(&self) -> String {
        let mut pairs = self.model.to_pairs();
        pairs.extend(self.train.to_pairs());
        kv::render(&pairs)
    }
}

/// Learning rate at `step` of `total_steps`: linear warmup from 0 over
/// `max(1, ⌊warmup_frac·total⌋)` steps, then a half cosine that reaches 0 on
/// the final step.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> f64 {
    let w = ((cfg.warmup_frac * total_steps as f64).floor() as u64).max(1);
    if step < w {
        return cfg.lr * step as f64 / w as f64;
    }
    let span = total_steps.saturating_sub(1).saturating_sub(w).max(1);
    let progress = ((step - w) as f64 / span as f64).min(1.0);
    cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One AdamW step. `t` is the 1-based step count used for bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, t: u64, cfg: &TrainConfig) {
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    for i in 0..param.len() {
        param[i] -= lr * cfg.weight_decay * param[i];
        m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
        v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
    }
}

/// Where the pixel-alignment targets come from.
#[derive(Debug, Clone, Copy)]
pub enum MaskSource<'a> {
    /// Built from this forward pass's attention maps.
    OnTheFly,
    /// Supplied by the caller: per record, one mask per target.
    Provided(&'a [Vec<BinaryMask>]),
}

/// Loss nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub vla: Var,
    pub dice: Option<Var>,
    pub bce: Option<Var>,
    pub pa: Option<Var>,
    pub recon: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn bundle(&self, tape: &Tape) -> LossBundle {
        let get = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        LossBundle {
            vla: tape.value(self.vla).item(),
            dice: get(self.dice),
            bce: get(self.bce),
            pa: get(self.pa),
            recon: get(self.recon),
            total: tape.value(self.total).item(),
        }
    }
}

/// Everything a forward pass produced besides the losses.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    pub losses: LossVars,
    pub attn: Var,
    /// Targets actually used (after any shuffling), per record.
    pub masks: Vec<Vec<BinaryMask>>,
}

/// Pseudo masks for a batch from an `[K×heads×h×w]` attention tensor.
pub fn batch_masks(
    images: &[Vec<f64>],
    img_hw: usize,
    attn: &Tensor,
    opts: &MaskOptions,
) -> Result<Vec<Vec<BinaryMask>>> {
    let maps = AttentionMaps::from_batch(attn)?;
    images
        .iter()
        .zip(&maps)
        .map(|(img, a)| {
            Ok(pseudo_mask::build_pseudo_mask(img, img_hw, a, opts)?
                .into_iter()
                .map(|m| m.mask)
                .collect())
        })
        .collect()
}

fn mask_shuffle_rng(seed: [u64; 4], step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(seed_bytes(seed));
    rng.set_stream((1 << 32) | step);
    rng
}

/// Records the full objective for `batch` on `tape` with parameters `b`.
#[allow(clippy::too_many_arguments)]
pub fn forward(
    tape: &mut Tape,
    model: &Model,
    b: &Bound,
    batch: &[&Record],
    cfg: &TrainConfig,
    source: MaskSource,
    rng_seed: [u64; 4],
    step: u64,
) -> Result<ForwardOutputs> {
    let hw = model.config.img_hw;
    let images: Vec<Vec<f64>> = batch.iter().map(|r| r.image_f64()).collect();
    let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
    let imgs = tape.constant(stack_images(&refs, hw)?);
    let enc = model.encode_images(tape, b, imgs)?;
    let pool = model.attention_pool(tape, b, enc.dense)?;
    let v = model.project_vision(tape, b, pool.pooled)?;
    let caps: Vec<&[u32]> = batch.iter().map(|r| r.tokens.as_slice()).collect();
    let t = model.encode_texts(tape, b, &caps)?;
    let l = model.project_text(tape, b, t)?;
    let vla = losses::vla_loss(tape, v, l, cfg.sigma, cfg.vla_mode)?;

    let mut out = LossVars {
        vla,
        dice: None,
        bce: None,
        pa: None,
        recon: None,
        total: vla,
    };
    let mut used = Vec::new();
    match cfg.decoder_loss {
        DecoderLoss::None => {}
        DecoderLoss::Reconstruction => {
            let pred = model.decode(tape, b, &enc)?;
            let r = losses::reconstruction_loss(tape, pred, imgs)?;
            out.recon = Some(r);
            out.total = losses::total_loss(tape, vla, r)?;
        }
        DecoderLoss::PseudoSeg => {
            let mut masks = match source {
                MaskSource::OnTheFly => batch_masks(&images, hw, tape.value(pool.attn), &cfg.mask)?,
                MaskSource::Provided(m) => {
                    if m.len() != batch.len() {
                        return Err(Error::input("forward", "one mask list per record required"));
                    }
                    m.to_vec()
                }
            };
            if cfg.shuffle_masks {
                if let MaskSource::OnTheFly = source {
                    pseudo_mask::shuffle_masks(&mut masks, &mut mask_shuffle_rng(rng_seed, step));
                }
            }
            let targets = masks[0].len();
            if targets == 0 || masks.iter().any(|m| m.len() != targets) {
                return Err(Error::input("forward", "every record needs the same number of masks"));
            }
            let pred = model.decode(tape, b, &enc)?;
            let mut dice_terms = Vec::with_capacity(targets);
            let mut bce_terms = Vec::with_capacity(targets);
            for j in 0..targets {
                let mut data = Vec::with_capacity(batch.len() * hw * hw);
                for m in &masks {
                    data.extend(m[j].bits.iter().map(|&x| x as f64));
                }
                let target = tape.constant(Tensor::new(&[batch.len(), 1, hw, hw], data)?);
                dice_terms.push(losses::dice_loss(tape, pred, target, cfg.dice_eps, cfg.dice_form)?);
                bce_terms.push(losses::bce_loss(tape, pred, target, losses::BCE_CLAMP)?);
            }
            let dice = mean_of(tape, &dice_terms)?;
            let bce = mean_of(tape, &bce_terms)?;
            let pa = losses::pa_loss(tape, dice, bce)?;
            out.dice = Some(dice);
            out.bce = Some(bce);
            out.pa = Some(pa);
            out.total = losses::total_loss(tape, vla, pa)?;
            used = masks;
        }
    }
    Ok(ForwardOutputs {
        losses: out,
        attn: pool.attn,
        masks: used,
    })
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    if vars.len() == 1 {
        return Ok(vars[0]);
    }
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.mul_scalar(acc, 1.0 / vars.len() as f64)?)
}

/// Parameters, AdamW moments, step counter and RNG seed of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub rng_seed: [u64; 4],
}

pub(crate) fn seed_bytes(words: [u64; 4]) -> [u8; 32] {
    let mut out = [0u8; 32];
    for (i, w) in words.iter().enumerate() {
        out[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
    }
    out
}

fn seed_words(seed: u64) -> [u64; 4] {
    let bytes = ChaCha8Rng::seed_from_u64(seed).get_seed();
    let mut out = [0u64; 4];
    for (i, w) in out.iter_mut().enumerate() {
        *w = u64::from_le_bytes(bytes[i * 8..(i + 1) * 8].try_into().expect("8 bytes"));
    }
    out
}

impl TrainState {
    pub fn new(model: Model, seed: u64) -> Self {
        let m = model.params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        let v = model.params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            model,
            m,
            v,
            step: 0,
            rng_seed: seed_words(seed),
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::new(Model::new(cfg.model.clone())?, cfg.train.seed))
    }

    /// Record indices of `epoch`, in visiting order.
    pub fn epoch_order(&self, n: usize, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::from_seed(seed_bytes(self.rng_seed));
        rng.set_stream(epoch);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx
    }
}

/// Loss values and gradients for a batch without touching the state.
pub fn compute_gradients(
    state: &TrainState,
    batch: &[&Record],
    cfg: &TrainConfig,
    source: MaskSource,
) -> Result<(LossBundle, Gradients, Vec<Var>)> {
    let mut tape = Tape::new();
    let b = state.model.bind(&mut tape);
    let vars = b.vars().to_vec();
    let out = forward(
        &mut tape,
        &state.model,
        &b,
        batch,
        cfg,
        source,
        state.rng_seed,
        state.step,
    )?;
    let bundle = out.losses.bundle(&tape);
    let total = out.losses.total;
    drop(b);
    let grads = tape.backward(total)?;
    Ok((bundle, grads, vars))
}

/// Forward, backward and one AdamW update at the scheduled learning rate.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&Record],
    cfg: &TrainConfig,
    total_steps: u64,
) -> Result<(LossBundle, f64)> {
    if batch.len() < 2 {
        return Err(Error::input(
            "train_step",
            format!("batch of {} is below 2", batch.len()),
        ));
    }
    let lr = lr_at(state.step, total_steps, cfg);
    let (bundle, mut grads, vars) = compute_gradients(state, batch, cfg, MaskSource::OnTheFly)?;
    let grads: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.take(v).expect("every parameter is a differentiable leaf"))
        .collect();
    let max_grad = grads.iter().map(Tensor::max_abs).fold(0.0, f64::max);
    if !bundle.is_finite() || !max_grad.is_finite() {
        let term = [
            ("vla", bundle.vla),
            ("dice", bundle.dice),
            ("bce", bundle.bce),
            ("recon", bundle.recon),
            ("total", bundle.total),
        ]
        .iter()
        .find(|(_, v)| !v.is_finite())
        .map_or("gradient", |(n, _)| n)
        .to_string();
        return Err(Error::NonFiniteLoss {
            step: state.step,
            term,
            max_grad,
        });
    }
    let t = state.step + 1;
    let params = state.model.params.values_mut();
    for (i, g) in grads.iter().enumerate() {
        adamw_update(
            params[i].data_mut(),
            g.data(),
            state.m[i].data_mut(),
            state.v[i].data_mut(),
            lr,
            t,
            cfg,
        );
    }
    state.step = t;
    Ok((bundle, lr))
}

#[derive(Debug, Clone, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossBundle,
}

pub fn steps_per_epoch(n_records: usize, batch: usize) -> u64 {
    (n_records / batch) as u64
}

pub fn total_steps(n_records: usize, cfg: &TrainConfig) -> u64 {
    steps_per_epoch(n_records, cfg.batch) * cfg.epochs as u64
}

/// Runs from `state.step` to the end of the schedule. `on_step` sees every
/// step's log after the update; returning `false` stops early (the state is
/// then resumable).
pub fn pretrain(
    state: &mut TrainState,
    records: &[Record],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrainState, &StepLog) -> bool,
) -> Result<()> {
    cfg.validate()?;
    let spe = steps_per_epoch(records.len(), cfg.batch);
    if spe == 0 {
        return Err(Error::input(
            "pretrain",
            format!("{} records cannot fill a batch of {}", records.len(), cfg.batch),
        ));
    }
    let total = spe * cfg.epochs as u64;
    let mut order_epoch = u64::MAX;
    let mut order = Vec::new();
    while state.step < total {
        let epoch = state.step / spe;
        if epoch != order_epoch {
            order = state.epoch_order(records.len(), epoch);
            order_epoch = epoch;
        }
        let j = (state.step % spe) as usize;
        let batch: Vec<&Record> = order[j * cfg.batch..(j + 1) * cfg.batch]
            .iter()
            .map(|&i| &records[i])
            .collect();
        let (losses, lr) = train_step(state, &batch, cfg, total)?;
        let log = StepLog {
            step: state.step - 1,
            lr,
            losses,
        };
        if !on_step(state, &log) {
            break;
        }
    }
    Ok(())
}
