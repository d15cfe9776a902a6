//! Contrastive alignment, pixel alignment (Dice + BCE) and reconstruction
//! objectives, all recorded on the tape.

use g2d_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SIGMA: f64 = 0.07;
pub const BCE_CLAMP: f64 = 1e-7;
const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VlaMode {
    /// Image-to-text only.
    I2t,
    /// Mean of the image-to-text and text-to-image terms.
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiceForm {
    /// Per-image soft Dice, averaged over the batch.
    ImageSoft,
    /// Per-pixel ε-stabilized Dice, averaged over every pixel.
    LiteralPixel,
}

macro_rules! str_enum {
    ($t:ty, $($variant:path => $s:literal),+) => {
        impl std::str::FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($variant),)+
                    _ => Err(Error::Config(format!("unknown {} {s:?}", stringify!($t)))),
                }
            }
        }
        impl std::fmt::Display for $t {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(match self { $($variant => $s,)+ })
            }
        }
    };
}
pub(crate) use str_enum;

str_enum!(VlaMode, VlaMode::I2t => "i2t", VlaMode::Symmetric => "symmetric");
str_enum!(DiceForm, DiceForm::ImageSoft => "image_soft", DiceForm::LiteralPixel => "literal_pixel");

/// Scalar loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub vla: f64,
    pub dice: f64,
    pub bce: f64,
    pub pa: f64,
    /// Decoder reconstruction error; zero unless that objective is active.
    pub recon: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.vla, self.dice, self.bce, self.pa, self.recon, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_unit_rows(tape: &Tape, x: Var, name: &str) -> Result<(usize, usize)> {
    let t = tape.value(x);
    let [k, d] = *t.shape() else {
        return Err(Error::input(
            "vla_loss",
            format!("{name} must be [K×d], got {:?}", t.shape()),
        ));
    };
    for (i, row) in t.data().chunks(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_TOL {
            return Err(Error::input("vla_loss", format!("{name} row {i} has norm {norm}")));
        }
    }
    Ok((k, d))
}

/// `−(1/K) Σᵢ log softmax(v̂ᵢᵀL̂/σ)ᵢ`, optionally symmetrized.
pub fn vla_loss(tape: &mut Tape, v: Var, l: Var, sigma: f64, mode: VlaMode) -> Result<Var> {
    let (k, d) = check_unit_rows(tape, v, "image embeddings")?;
    if check_unit_rows(tape, l, "text embeddings")? != (k, d) {
        return Err(Error::input("vla_loss", "image and text embeddings differ in shape"));
    }
    if k < 2 {
        return Err(Error::input("vla_loss", format!("batch of {k} has no negatives")));
    }
    if !(sigma > 0.0) {
        return Err(Error::input(
            "vla_loss",
            format!("temperature {sigma} must be positive"),
        ));
    }
    let lt = tape.transpose(l)?;
    let sim = tape.matmul(v, lt)?;
    let logits = tape.mul_scalar(sim, 1.0 / sigma)?;
    let eye = tape.constant(Tensor::eye(k));
    let diag_mean = |tape: &mut Tape, logits: Var| -> Result<Var> {
        let ls = tape.log_softmax(logits, 1)?;
        let picked = tape.mul(ls, eye)?;
        let s = tape.sum(picked)?;
        Ok(tape.mul_scalar(s, -1.0 / k as f64)?)
    };
    let i2t = diag_mean(tape, logits)?;
    match mode {
        VlaMode::I2t => Ok(i2t),
        VlaMode::Symmetric => {
            let lt = tape.transpose(logits)?;
            let t2i = diag_mean(tape, lt)?;
            let s = tape.add(i2t, t2i)?;
            Ok(tape.mul_scalar(s, 0.5)?)
        }
    }
}

fn check_pair(tape: &Tape, pred: Var, target: Var, op: &'static str, binary: bool) -> Result<usize> {
    let (p, t) = (tape.value(pred), tape.value(target));
    if p.shape() != t.shape() || p.rank() < 2 {
        return Err(Error::input(
            op,
            format!("prediction {:?} vs target {:?}", p.shape(), t.shape()),
        ));
    }
    if binary && t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::input(op, "target values must be 0 or 1"));
    }
    Ok(p.shape()[0])
}

/// Soft Dice between predictions in `(0,1)` and a binary target, both
/// `[K×…]`.
pub fn dice_loss(tape: &mut Tape, pred: Var, target: Var, eps: f64, form: DiceForm) -> Result<Var> {
    let k = check_pair(tape, pred, target, "dice_loss", true)?;
    let n = tape.value(pred).numel() / k;
    match form {
        DiceForm::ImageSoft => {
            let p = tape.reshape(pred, &[k, n])?;
            let t = tape.reshape(target, &[k, n])?;
            let pt = tape.mul(p, t)?;
            let inter = tape.sum_axis(pt, 1)?;
            let sp = tape.sum_axis(p, 1)?;
            let st = tape.sum_axis(t, 1)?;
            let num = tape.mul_scalar(inter, 2.0)?;
            let num = tape.add_scalar(num, eps)?;
            let den = tape.add(sp, st)?;
            let den = tape.add_scalar(den, eps)?;
            let ratio = tape.div(num, den)?;
            let m = tape.mean(ratio)?;
            let neg = tape.neg(m)?;
            Ok(tape.add_scalar(neg, 1.0)?)
        }
        DiceForm::LiteralPixel => {
            let pt = tape.mul(pred, target)?;
            let num = tape.mul_scalar(pt, 2.0)?;
            let num = tape.add_scalar(num, eps)?;
            let den = tape.add(pred, target)?;
            let den = tape.add_scalar(den, eps)?;
            let ratio = tape.div(num, den)?;
            let m = tape.mean(ratio)?;
            let neg = tape.neg(m)?;
            Ok(tape.add_scalar(neg, 1.0)?)
        }
    }
}

/// Mean binary cross-entropy with predictions clamped to `[c, 1−c]`.
pub fn bce_loss(tape: &mut Tape, pred: Var, target: Var, clamp: f64) -> Result<Var> {
    check_pair(tape, pred, target, "bce_loss", false)?;
    let p = tape.clamp(pred, clamp, 1.0 - clamp)?;
    let log_p = tape.log(p)?;
    let q = tape.neg(p)?;
    let q = tape.add_scalar(q, 1.0)?;
    let log_q = tape.log(q)?;
    let pos = tape.mul(target, log_p)?;
    let nt = tape.neg(target)?;
    let nt = tape.add_scalar(nt, 1.0)?;
    let neg = tape.mul(nt, log_q)?;
    let s = tape.add(pos, neg)?;
    let m = tape.mean(s)?;
    Ok(tape.neg(m)?)
}

/// `(dice + bce) / 2`
pub fn pa_loss(tape: &mut Tape, dice: Var, bce: Var) -> Result<Var> {
    let s = tape.add(dice, bce)?;
    Ok(tape.mul_scalar(s, 0.5)?)
}

pub fn total_loss(tape: &mut Tape, vla: Var, pa: Var) -> Result<Var> {
    Ok(tape.add(vla, pa)?)
}

/// Mean squared error.
pub fn reconstruction_loss(tape: &mut Tape, pred: Var, img: Var) -> Result<Var> {
    check_pair(tape, pred, img, "reconstruction_loss", false)?;
    let d = tape.sub(pred, img)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq)?)
}
