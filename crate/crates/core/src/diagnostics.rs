//! Finite-difference gradient checks over every differentiable op, every
//! model module, every loss, and the full training objective.

use g2d_tensor::{grad_check_many, BinaryOp, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::Record;
use crate::error::{Error, Result};
use crate::losses::{self, DiceForm, VlaMode};
use crate::model::{stack_images, Model, ModelConfig, PixelFeatures};
use crate::pseudo_mask::BinaryMask;
use crate::train::{self, DecoderLoss, MaskSource, TrainConfig};

pub const GRAD_TOL: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 5;
const WEIGHT_SCALE: f64 = 2.0;

type TResult<T> = std::result::Result<T, TensorError>;
type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> TResult<Var> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Op,
    Module,
    Loss,
    Objective,
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Group::Op => "op",
            Group::Module => "module",
            Group::Loss => "loss",
            Group::Objective => "objective",
        })
    }
}

/// One gradient check at one seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub group: Group,
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    /// Input (tensor or parameter name) and flat index of the worst coordinate.
    pub worst_input: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
    pub one_sided: usize,
    pub pass: bool,
}

struct Case {
    group: Group,
    name: String,
    names: Vec<String>,
    inputs: Vec<Tensor>,
    f: Objective,
}

fn lift<T>(r: Result<T>) -> TResult<T> {
    r.map_err(|e| match e {
        Error::Tensor(t) => t,
        other => TensorError::InvalidArgument {
            op: "objective",
            reason: other.to_string(),
        },
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches data")
}

/// `Σ out ⊙ w` with fixed pseudo-random weights, so that every output
/// coordinate contributes a distinct amount.
fn weigh(tape: &mut Tape, out: Var, seed: u64) -> TResult<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(uniform(&mut rng, &shape, -1.0, 1.0));
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn case(group: Group, name: &str, inputs: Vec<(&str, Tensor)>, f: Objective) -> Case {
    let (names, inputs) = inputs.into_iter().map(|(n, t)| (n.to_string(), t)).unzip();
    Case {
        group,
        name: name.to_string(),
        names,
        inputs,
        f,
    }
}

fn op_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let s = seed;
    let mut cases = Vec::new();
    let mut push = |name: &str, inputs: Vec<(&str, Tensor)>, f: Objective| cases.push(case(Group::Op, name, inputs, f));

    for (name, kind) in [
        ("add", BinaryOp::Add),
        ("sub", BinaryOp::Sub),
        ("mul", BinaryOp::Mul),
        ("div", BinaryOp::Div),
    ] {
        let a = uniform(r, &[3, 4], -2.0, 2.0);
        let b = if kind == BinaryOp::Div {
            uniform(r, &[3, 4], 0.5, 2.0)
        } else {
            uniform(r, &[3, 4], -2.0, 2.0)
        };
        push(
            name,
            vec![("a", a), ("b", b)],
            Box::new(move |t, v| {
                let o = t.binary(kind, v[0], v[1])?;
                weigh(t, o, s)
            }),
        );
    }
    let x = uniform(r, &[3, 4], 0.5, 2.0);
    let y = uniform(r, &[1], 0.5, 2.0);
    push(
        "div_scalar_broadcast",
        vec![("a", x), ("b", y)],
        Box::new(move |t, v| {
            let o = t.div(v[0], v[1])?;
            weigh(t, o, s)
        }),
    );
    push(
        "scalar_ops",
        vec![("x", uniform(r, &[5], -2.0, 2.0))],
        Box::new(move |t, v| {
            let a = t.add_scalar(v[0], 0.3)?;
            let m = t.mul_scalar(a, -1.7)?;
            weigh(t, m, s)
        }),
    );

    let unary: [(&str, fn(&mut Tape, Var) -> TResult<Var>, f64, f64); 6] = [
        ("exp", |t, x| t.exp(x), -2.0, 2.0),
        ("log", |t, x| t.log(x), 0.2, 3.0),
        ("neg", |t, x| t.neg(x), -2.0, 2.0),
        ("sigmoid", |t, x| t.sigmoid(x), -4.0, 4.0),
        ("relu", |t, x| t.relu(x), -2.0, 2.0),
        ("clamp", |t, x| t.clamp(x, -0.5, 0.5), -1.5, 1.5),
    ];
    for (name, f, lo, hi) in unary {
        push(
            name,
            vec![("x", uniform(r, &[4, 3], lo, hi))],
            Box::new(move |t, v| {
                let o = f(t, v[0])?;
                weigh(t, o, s)
            }),
        );
    }

    push(
        "matmul",
        vec![
            ("a", uniform(r, &[3, 4], -1.0, 1.0)),
            ("b", uniform(r, &[4, 2], -1.0, 1.0)),
        ],
        Box::new(move |t, v| {
            let o = t.matmul(v[0], v[1])?;
            weigh(t, o, s)
        }),
    );
    push(
        "matmul_batched",
        vec![
            ("a", uniform(r, &[2, 3, 4], -1.0, 1.0)),
            ("b", uniform(r, &[2, 4, 2], -1.0, 1.0)),
        ],
        Box::new(move |t, v| {
            let o = t.matmul(v[0], v[1])?;
            weigh(t, o, s)
        }),
    );
    push(
        "transpose_reshape",
        vec![("x", uniform(r, &[2, 3, 4], -1.0, 1.0))],
        Box::new(move |t, v| {
            let tr = t.transpose(v[0])?;
            let o = t.reshape(tr, &[8, 3])?;
            weigh(t, o, s)
        }),
    );
    push(
        "sum_mean",
        vec![("x", uniform(r, &[3, 3], -1.0, 1.0))],
        Box::new(move |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let a = t.sum(sq)?;
            let b = t.mean(v[0])?;
            t.add(a, b)
        }),
    );
    push(
        "sum_axis",
        vec![("x", uniform(r, &[2, 3, 4], -1.0, 1.0))],
        Box::new(move |t, v| {
            let o = t.sum_axis(v[0], 1)?;
            weigh(t, o, s)
        }),
    );
    push(
        "softmax",
        vec![("x", uniform(r, &[3, 5], -2.0, 2.0))],
        Box::new(move |t, v| {
            let o = t.softmax(v[0], 1)?;
            weigh(t, o, s)
        }),
    );
    push(
        "softmax_axis0",
        vec![("x", uniform(r, &[4, 3], -2.0, 2.0))],
        Box::new(move |t, v| {
            let o = t.softmax(v[0], 0)?;
            weigh(t, o, s)
        }),
    );
    push(
        "log_softmax",
        vec![("x", uniform(r, &[3, 5], -2.0, 2.0))],
        Box::new(move |t, v| {
            let o = t.log_softmax(v[0], 1)?;
            weigh(t, o, s)
        }),
    );
    push(
        "conv2d",
        vec![
            ("x", uniform(r, &[2, 5, 5], -1.0, 1.0)),
            ("w", uniform(r, &[3, 2, 3, 3], -1.0, 1.0)),
            ("b", uniform(r, &[3], -1.0, 1.0)),
        ],
        Box::new(move |t, v| {
            let o = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
            weigh(t, o, s)
        }),
    );
    push(
        "conv2d_stride2_batched",
        vec![
            ("x", uniform(r, &[2, 2, 6, 6], -1.0, 1.0)),
            ("w", uniform(r, &[2, 2, 3, 3], -1.0, 1.0)),
        ],
        Box::new(move |t, v| {
            let o = t.conv2d(v[0], v[1], None, 2, 1)?;
            weigh(t, o, s)
        }),
    );
    push(
        "upsample_bilinear",
        vec![("x", uniform(r, &[2, 3, 3], -1.0, 1.0))],
        Box::new(move |t, v| {
            let o = t.upsample_bilinear(v[0], 6, 7)?;
            weigh(t, o, s)
        }),
    );
    push(
        "concat",
        vec![
            ("a", uniform(r, &[2, 3], -1.0, 1.0)),
            ("b", uniform(r, &[2, 2], -1.0, 1.0)),
        ],
        Box::new(move |t, v| {
            let o = t.concat(&[v[0], v[1], v[0]], 1)?;
            weigh(t, o, s)
        }),
    );
    push(
        "add_bias",
        vec![
            ("a", uniform(r, &[2, 3, 4], -1.0, 1.0)),
            ("b", uniform(r, &[3, 4], -1.0, 1.0)),
        ],
        Box::new(move |t, v| {
            let o = t.add_bias(v[0], v[1])?;
            weigh(t, o, s)
        }),
    );
    push(
        "embedding",
        vec![("table", uniform(r, &[5, 3], -1.0, 1.0))],
        Box::new(move |t, v| {
            let o = t.embedding(v[0], &[4, 0, 4, 2])?;
            weigh(t, o, s)
        }),
    );
    push(
        "l2_normalize",
        vec![("x", uniform(r, &[3, 4], -1.0, 1.0))],
        Box::new(move |t, v| {
            let o = t.l2_normalize(v[0])?;
            weigh(t, o, s)
        }),
    );
    cases
}

/// Smallest model exercising every module path.
pub fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        img_hw: 8,
        enc_channels: vec![3, 4],
        text_vocab: 6,
        text_maxlen: 3,
        text_dim: 5,
        proj_dim: 4,
        attn_heads: 2,
        attn_head_dim: 2,
        decoder_skip: true,
        dec_channels: vec![3, 2],
        decoder: true,
        seed,
    }
}

fn tiny_batch(rng: &mut ChaCha8Rng, hw: usize) -> Vec<Record> {
    let captions: [&[u32]; 3] = [&[2, 3, 4], &[1], &[5, 2]];
    captions
        .iter()
        .map(|cap| Record {
            image: (0..hw * hw).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
            tokens: cap.to_vec(),
            label: (cap[0] != 1) as u8,
            gt_mask: vec![0; hw * hw],
        })
        .collect()
}

fn random_masks(rng: &mut ChaCha8Rng, n: usize, per: usize, hw: usize) -> Vec<Vec<BinaryMask>> {
    (0..n)
        .map(|_| {
            (0..per)
                .map(|_| {
                    let bits = (0..hw * hw).map(|_| rng.gen_bool(0.3) as u8).collect();
                    BinaryMask::new(hw, hw, bits).expect("sized mask")
                })
                .collect()
        })
        .collect()
}

/// Rows near one common direction: cosines stay within a few multiples of
/// the temperature, so no softmax entry saturates to a vanishing gradient.
fn clustered(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Tensor {
    let data = (0..rows * dim)
        .map(|i| (i % dim == 0) as u8 as f64 + rng.gen_range(-0.15..0.15))
        .collect();
    Tensor::new(&[rows, dim], data).expect("shape matches data")
}

fn model_case<F>(group: Group, name: &str, model: &Model, f: F) -> Case
where
    F: Fn(&Model, &mut Tape, &crate::model::Bound) -> Result<Var> + Send + Sync + 'static,
{
    let names = model.params.names().to_vec();
    let inputs = model.params.values().to_vec();
    let m = model.clone();
    Case {
        group,
        name: name.to_string(),
        names,
        inputs,
        f: Box::new(move |tape, vars| {
            let b = lift(m.bind_vars(vars.to_vec()))?;
            lift(f(&m, tape, &b))
        }),
    }
}

fn module_cases(seed: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x00c0_ffee);
    let cfg = tiny_model_config(seed);
    let hw = cfg.img_hw;
    let mut model = Model::new(cfg)?;
    // Doubled weights and positive biases: at the default init the attention
    // gradients of this tiny model are small enough for central differences
    // to drown in roundoff, and tiny relu layers can die entirely.
    for p in model.params.values_mut() {
        if p.rank() == 1 {
            *p = uniform(&mut rng, p.shape(), 0.1, 0.6);
        } else {
            p.data_mut().iter_mut().for_each(|x| *x *= WEIGHT_SCALE);
        }
    }
    let records = tiny_batch(&mut rng, hw);
    let images: Vec<Vec<f64>> = records.iter().map(Record::image_f64).collect();
    let stacked = {
        let refs: Vec<&[f64]> = images.iter().map(Vec::as_slice).collect();
        stack_images(&refs, hw)?
    };
    let caps: Vec<Vec<u32>> = records.iter().map(|r| r.tokens.clone()).collect();
    let s = seed;
    let mut cases = Vec::new();

    let img = stacked.clone();
    cases.push(model_case(Group::Module, "encode_image", &model, move |m, t, b| {
        let x = t.constant(img.clone());
        let e = m.encode_images(t, b, x)?;
        Ok(weigh(t, e.dense, s)?)
    }));
    let img = stacked.clone();
    cases.push(model_case(Group::Module, "attention_pool", &model, move |m, t, b| {
        let x = t.constant(img.clone());
        let e = m.encode_images(t, b, x)?;
        let p = m.attention_pool(t, b, e.dense)?;
        let a = weigh(t, p.pooled, s)?;
        let w = weigh(t, p.attn, s + 1)?;
        Ok(t.add(a, w)?)
    }));
    let c = caps.clone();
    cases.push(model_case(Group::Module, "encode_text", &model, move |m, t, b| {
        let refs: Vec<&[u32]> = c.iter().map(Vec::as_slice).collect();
        let e = m.encode_texts(t, b, &refs)?;
        Ok(weigh(t, e, s)?)
    }));
    let img = stacked.clone();
    cases.push(model_case(Group::Module, "project_vision", &model, move |m, t, b| {
        let x = t.constant(img.clone());
        let e = m.encode_images(t, b, x)?;
        let p = m.attention_pool(t, b, e.dense)?;
        let v = m.project_vision(t, b, p.pooled)?;
        Ok(weigh(t, v, s)?)
    }));
    let c = caps.clone();
    cases.push(model_case(Group::Module, "project_text", &model, move |m, t, b| {
        let refs: Vec<&[u32]> = c.iter().map(Vec::as_slice).collect();
        let e = m.encode_texts(t, b, &refs)?;
        let l = m.project_text(t, b, e)?;
        Ok(weigh(t, l, s)?)
    }));
    for path in [PixelFeatures::Direct, PixelFeatures::ValuePath] {
        let img = stacked.clone();
        cases.push(model_case(
            Group::Module,
            &format!("project_pixelwise_{path}"),
            &model,
            move |m, t, b| {
                let x = t.constant(img.clone());
                let e = m.encode_images(t, b, x)?;
                let p = m.project_pixelwise(t, b, e.dense, path)?;
                Ok(weigh(t, p, s)?)
            },
        ));
    }
    let img = stacked.clone();
    cases.push(model_case(Group::Module, "decode", &model, move |m, t, b| {
        let x = t.constant(img.clone());
        let e = m.encode_images(t, b, x)?;
        let d = m.decode(t, b, &e)?;
        Ok(weigh(t, d, s)?)
    }));

    let k = 4;
    for mode in [VlaMode::I2t, VlaMode::Symmetric] {
        cases.push(case(
            Group::Loss,
            &format!("vla_{mode}"),
            vec![("v", clustered(&mut rng, k, 3)), ("l", clustered(&mut rng, k, 3))],
            Box::new(move |t, v| {
                let a = t.l2_normalize(v[0])?;
                let b = t.l2_normalize(v[1])?;
                lift(losses::vla_loss(t, a, b, losses::DEFAULT_SIGMA, mode))
            }),
        ));
    }
    let target: Tensor = {
        let bits = (0..2 * 16).map(|_| rng.gen_bool(0.4) as u8 as f64).collect();
        Tensor::new(&[2, 1, 4, 4], bits)?
    };
    for form in [DiceForm::ImageSoft, DiceForm::LiteralPixel] {
        let tg = target.clone();
        cases.push(case(
            Group::Loss,
            &format!("dice_{form}"),
            vec![("logits", uniform(&mut rng, &[2, 1, 4, 4], -3.0, 3.0))],
            Box::new(move |t, v| {
                let p = t.sigmoid(v[0])?;
                let g = t.constant(tg.clone());
                lift(losses::dice_loss(t, p, g, 1.0, form))
            }),
        ));
    }
    let tg = target.clone();
    cases.push(case(
        Group::Loss,
        "bce",
        vec![("pred", uniform(&mut rng, &[2, 1, 4, 4], 0.02, 0.98))],
        Box::new(move |t, v| {
            let g = t.constant(tg.clone());
            lift(losses::bce_loss(t, v[0], g, losses::BCE_CLAMP))
        }),
    ));
    let tg = uniform(&mut rng, &[2, 1, 4, 4], 0.0, 1.0);
    cases.push(case(
        Group::Loss,
        "reconstruction",
        vec![("pred", uniform(&mut rng, &[2, 1, 4, 4], 0.0, 1.0))],
        Box::new(move |t, v| {
            let g = t.constant(tg.clone());
            lift(losses::reconstruction_loss(t, v[0], g))
        }),
    ));

    let per_head = model.config.attn_heads;
    let objectives: [(&str, DecoderLoss, bool, usize); 4] = [
        ("total_pseudo_seg", DecoderLoss::PseudoSeg, true, 1),
        ("total_per_head_masks", DecoderLoss::PseudoSeg, false, per_head),
        ("total_reconstruction", DecoderLoss::Reconstruction, true, 1),
        ("total_vla_only", DecoderLoss::None, true, 1),
    ];
    for (name, loss, aggregate, per) in objectives {
        let masks = random_masks(&mut rng, records.len(), per, hw);
        let recs = records.clone();
        let mut tc = TrainConfig {
            batch: recs.len(),
            decoder_loss: loss,
            vla_mode: VlaMode::Symmetric,
            ..TrainConfig::default()
        };
        tc.mask.aggregate = aggregate;
        cases.push(model_case(Group::Objective, name, &model, move |m, t, b| {
            let batch: Vec<&Record> = recs.iter().collect();
            let out = train::forward(t, m, b, &batch, &tc, MaskSource::Provided(&masks), [0; 4], 0)?;
            Ok(out.losses.total)
        }));
    }
    Ok(cases)
}

/// Runs every case at each of `seeds` with step `eps`.
pub fn run_gradcheck(seeds: &[u64], eps: f64) -> Result<Vec<CheckRow>> {
    let mut cases = Vec::new();
    for &seed in seeds {
        cases.extend(op_cases(seed).into_iter().map(|c| (seed, c)));
        cases.extend(module_cases(seed)?.into_iter().map(|c| (seed, c)));
    }
    cases
        .par_iter()
        .map(|(seed, c)| {
            let report = grad_check_many(&c.f, &c.inputs, eps)?;
            let worst = report.worst.clone();
            Ok(CheckRow {
                group: c.group,
                name: c.name.clone(),
                seed: *seed,
                max_rel_error: report.max_rel_error,
                worst_input: worst.as_ref().map_or_else(String::new, |w| c.names[w.input].clone()),
                worst_index: worst.as_ref().map_or(0, |w| w.index),
                analytic: worst.as_ref().map_or(0.0, |w| w.analytic),
                numeric: worst.as_ref().map_or(0.0, |w| w.numeric),
                coordinates: report.coordinates,
                one_sided: report.one_sided,
                pass: report.passes(GRAD_TOL),
            })
        })
        .collect()
}

/// `count` consecutive seeds starting at `first`.
pub fn seed_range(first: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| first.wrapping_add(i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_at_one_seed() {
        let rows = run_gradcheck(&[11], g2d_tensor::gradcheck::DEFAULT_EPS).unwrap();
        let failed: Vec<_> = rows.iter().filter(|r| !r.pass).collect();
        assert!(failed.is_empty(), "{failed:#?}");
        assert!(rows.iter().any(|r| r.group == Group::Objective));
    }

    #[test]
    fn worst_coordinate_names_an_input() {
        let rows = run_gradcheck(&[3], g2d_tensor::gradcheck::DEFAULT_EPS).unwrap();
        let row = rows.iter().find(|r| r.name == "decode").unwrap();
        assert!(row.worst_input.starts_with("enc.") || row.worst_input.starts_with("dec."));
    }
}
