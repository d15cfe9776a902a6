//! Zero-shot evaluation: retrieval, classification, grounding, and
//! pseudo-mask quality against ground truth.

use g2d_tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{Record, Shape, NO_FINDING};
use crate::error::{Error, Result};
use crate::model::{stack_images, Model, PixelFeatures};
use crate::pseudo_mask::{self, AttentionMaps, BinaryMask, MaskOptions};

const CHUNK: usize = 64;

/// Forward outputs for one image.
#[derive(Debug, Clone)]
pub struct ImageOutputs {
    /// Unit global embedding, length `d`.
    pub embedding: Vec<f64>,
    pub attn: AttentionMaps,
    /// Unit per-pixel embeddings, `h·w` rows of length `d`; empty unless
    /// requested.
    pub pixels: Vec<f64>,
}

/// Runs the image tower over `images` in parallel chunks.
pub fn embed_images(model: &Model, images: &[Vec<f64>], pixels: Option<PixelFeatures>) -> Result<Vec<ImageOutputs>> {
    let hw = model.config.img_hw;
    let chunks: Vec<Result<Vec<ImageOutputs>>> = images
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut tape = Tape::new();
            let b = model.bind_frozen(&mut tape);
            let refs: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
            let imgs = tape.constant(stack_images(&refs, hw)?);
            let enc = model.encode_images(&mut tape, &b, imgs)?;
            let pool = model.attention_pool(&mut tape, &b, enc.dense)?;
            let v = model.project_vision(&mut tape, &b, pool.pooled)?;
            let px = match pixels {
                Some(path) => Some(model.project_pixelwise(&mut tape, &b, enc.dense, path)?),
                None => None,
            };
            let attn = AttentionMaps::from_batch(tape.value(pool.attn))?;
            let d = model.config.proj_dim;
            let per_px = model.config.dense_hw().pow(2) * d;
            Ok(attn
                .into_iter()
                .enumerate()
                .map(|(i, a)| ImageOutputs {
                    embedding: tape.value(v).data()[i * d..(i + 1) * d].to_vec(),
                    attn: a,
                    pixels: px.map_or_else(Vec::new, |p| {
                        tape.value(p).data()[i * per_px..(i + 1) * per_px].to_vec()
                    }),
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(images.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Unit text embeddings, one per caption.
pub fn embed_texts(model: &Model, captions: &[&[u32]]) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<Result<Vec<Vec<f64>>>> = captions
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut tape = Tape::new();
            let b = model.bind_frozen(&mut tape);
            let t = model.encode_texts(&mut tape, &b, chunk)?;
            let l = model.project_text(&mut tape, &b, t)?;
            Ok(tape
                .value(l)
                .data()
                .chunks(model.config.proj_dim)
                .map(<[f64]>::to_vec)
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(captions.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn images_of(records: &[Record]) -> Vec<Vec<f64>> {
    records.iter().map(Record::image_f64).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetrievalReport {
    pub top1: f64,
    pub top5: f64,
    pub galleries: usize,
}

/// Image-to-text retrieval inside random galleries of `k_eval` records. A
/// hit is a retrieved caption whose tokens equal the image's own caption
/// (captions repeat across records, so identity is by content).
pub fn retrieval_eval(model: &Model, records: &[Record], k_eval: usize, seed: u64) -> Result<RetrievalReport> {
    if k_eval == 0 || k_eval > records.len() {
        return Err(Error::input(
            "retrieval_eval",
            format!("gallery size {k_eval} with {} records", records.len()),
        ));
    }
    let imgs = embed_images(model, &images_of(records), None)?;
    let caps: Vec<&[u32]> = records.iter().map(|r| r.tokens.as_slice()).collect();
    let txt = embed_texts(model, &caps)?;
    let embeddings: Vec<Vec<f64>> = imgs.into_iter().map(|o| o.embedding).collect();
    Ok(retrieval_from_embeddings(&embeddings, &txt, &caps, k_eval, seed))
}

/// Retrieval scoring on precomputed unit embeddings.
pub fn retrieval_from_embeddings(
    images: &[Vec<f64>],
    texts: &[Vec<f64>],
    captions: &[&[u32]],
    k_eval: usize,
    seed: u64,
) -> RetrievalReport {
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (mut hit1, mut hit5, mut total) = (0usize, 0usize, 0usize);
    let galleries: Vec<&[usize]> = order.chunks_exact(k_eval).collect();
    for g in &galleries {
        for &i in g.iter() {
            let mut ranked: Vec<(f64, usize)> = g.iter().map(|&j| (dot(&images[i], &texts[j]), j)).collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let hit = |&(_, j): &(f64, usize)| captions[j] == captions[i];
            hit1 += ranked.iter().take(1).any(hit) as usize;
            hit5 += ranked.iter().take(5).any(hit) as usize;
            total += 1;
        }
    }
    let frac = |h: usize| if total == 0 { 0.0 } else { h as f64 / total as f64 };
    RetrievalReport {
        top1: frac(hit1),
        top5: frac(hit5),
        galleries: galleries.len(),
    }
}

/// Positive-class decision and probability from two prompt similarities.
/// Ties go to the negative class.
pub fn classify_from_sims(sim_pos: f64, sim_neg: f64, sigma: f64) -> (u8, f64) {
    let label = (sim_pos > sim_neg) as u8;
    let score = 1.0 / (1.0 + ((sim_neg - sim_pos) / sigma).exp());
    (label, score)
}

pub fn zeroshot_classify(model: &Model, image: &[f64], pos: &[u32], neg: &[u32], sigma: f64) -> Result<(u8, f64)> {
    let out = embed_images(model, &[image.to_vec()], None)?;
    let t = embed_texts(model, &[pos, neg])?;
    let v = &out[0].embedding;
    Ok(classify_from_sims(dot(v, &t[0]), dot(v, &t[1]), sigma))
}

/// Area under the ROC curve; tied scores count one half. Returns 0.5 when
/// either class is absent.
pub fn auc(scores: &[f64], labels: &[u8]) -> f64 {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return 0.5;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            wins += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub auc: f64,
    pub f1: f64,
}

/// One-vs-"no finding" prompt per shape class, macro-averaged over classes.
pub fn zeroshot_eval(model: &Model, records: &[Record], sigma: f64) -> Result<ClassificationReport> {
    if records.is_empty() {
        return Err(Error::input("zeroshot_eval", "no records"));
    }
    let imgs = embed_images(model, &images_of(records), None)?;
    let prompts: Vec<Vec<u32>> = Shape::ALL.iter().map(|s| vec![s.token()]).collect();
    let neg_prompt = [NO_FINDING];
    let mut all: Vec<&[u32]> = prompts.iter().map(Vec::as_slice).collect();
    all.push(&neg_prompt);
    let t = embed_texts(model, &all)?;
    let neg = &t[Shape::ALL.len()];
    let (mut acc, mut area, mut f1) = (0.0, 0.0, 0.0);
    for (c, shape) in Shape::ALL.iter().enumerate() {
        let truth: Vec<u8> = records
            .iter()
            .map(|r| (r.tokens.first() == Some(&shape.token())) as u8)
            .collect();
        let (mut preds, mut scores) = (Vec::new(), Vec::new());
        for o in &imgs {
            let (l, s) = classify_from_sims(dot(&o.embedding, &t[c]), dot(&o.embedding, neg), sigma);
            preds.push(l);
            scores.push(s);
        }
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        let mut correct = 0;
        for (&p, &y) in preds.iter().zip(&truth) {
            correct += (p == y) as usize;
            tp += (p == 1 && y == 1) as usize;
            fp += (p == 1 && y == 0) as usize;
            fn_ += (p == 0 && y == 1) as usize;
        }
        acc += correct as f64 / records.len() as f64;
        area += auc(&scores, &truth);
        f1 += if 2 * tp + fp + fn_ == 0 {
            1.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
    }
    let k = Shape::ALL.len() as f64;
    Ok(ClassificationReport {
        accuracy: acc / k,
        auc: area / k,
        f1: f1 / k,
    })
}

/// `(recall, IoU, Dice)` of a predicted mask against ground truth.
///
/// Empty ground truth with an empty prediction scores `(1,1,1)`; empty
/// ground truth with any positive prediction scores `(1,0,0)`.
pub fn metrics(pred: &[u8], gt: &[u8]) -> Result<(f64, f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::input(
            "metrics",
            format!("{} vs {} pixels", pred.len(), gt.len()),
        ));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        if p > 1 || g > 1 {
            return Err(Error::input("metrics", "masks must be binary"));
        }
        tp += (p & g) as usize;
        fp += (p & !g & 1) as usize;
        fn_ += (!p & g & 1) as usize;
    }
    if tp + fn_ == 0 {
        return Ok(if fp == 0 { (1.0, 1.0, 1.0) } else { (1.0, 0.0, 0.0) });
    }
    let (tp, fp, fn_) = (tp as f64, fp as f64, fn_ as f64);
    Ok((tp / (tp + fn_), tp / (tp + fp + fn_), 2.0 * tp / (2.0 * tp + fp + fn_)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grounding {
    /// Min-max normalized similarity at image resolution.
    pub simmap: Vec<f64>,
    /// Range of the raw cosine map before normalization.
    pub raw_min: f64,
    pub raw_max: f64,
    pub mask: BinaryMask,
    /// The raw map was constant, so the mask is empty.
    pub degenerate: bool,
}

/// Cosine map between per-pixel embeddings (`h·w` unit rows) and a unit
/// text embedding, upsampled, normalized and thresholded at 0.5.
pub fn ground_from_embeddings(pixels: &[f64], text: &[f64], side: usize, img_hw: usize) -> Result<Grounding> {
    let d = text.len();
    let raw: Vec<f64> = pixels.chunks(d).map(|p| dot(p, text)).collect();
    if raw.len() != side * side {
        return Err(Error::input(
            "zeroshot_ground",
            "pixel embeddings do not match the map size",
        ));
    }
    let up = pseudo_mask::upsample(&raw, (side, side), (img_hw, img_hw))?;
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Ok(Grounding {
            simmap: vec![0.0; img_hw * img_hw],
            raw_min: lo,
            raw_max: hi,
            mask: BinaryMask::new(img_hw, img_hw, vec![0; img_hw * img_hw])?,
            degenerate: true,
        });
    }
    let simmap: Vec<f64> = up.iter().map(|&v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0)).collect();
    let bits = simmap.iter().map(|&v| (v >= 0.5) as u8).collect();
    Ok(Grounding {
        simmap,
        raw_min: lo,
        raw_max: hi,
        mask: BinaryMask::new(img_hw, img_hw, bits)?,
        degenerate: false,
    })
}

pub fn zeroshot_ground(model: &Model, image: &[f64], prompt: &[u32], path: PixelFeatures) -> Result<Grounding> {
    let out = embed_images(model, &[image.to_vec()], Some(path))?;
    let t = embed_texts(model, &[prompt])?;
    ground_from_embeddings(&out[0].pixels, &t[0], model.config.dense_hw(), model.config.img_hw)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroundingReport {
    pub recall: f64,
    pub iou: f64,
    pub dice: f64,
    /// Dice of a Bernoulli mask drawn at each prediction's positive rate.
    pub random_dice: f64,
    pub degenerate: usize,
    pub records: usize,
}

/// Grounds every positive record with its own caption.
pub fn grounding_eval(model: &Model, records: &[Record], path: PixelFeatures, seed: u64) -> Result<GroundingReport> {
    let pos: Vec<&Record> = records.iter().filter(|r| r.label == 1).collect();
    if pos.is_empty() {
        return Err(Error::input("grounding_eval", "no positive records"));
    }
    let images: Vec<Vec<f64>> = pos.iter().map(|r| r.image_f64()).collect();
    let outs = embed_images(model, &images, Some(path))?;
    let caps: Vec<&[u32]> = pos.iter().map(|r| r.tokens.as_slice()).collect();
    let txt = embed_texts(model, &caps)?;
    let (side, hw) = (model.config.dense_hw(), model.config.img_hw);
    let mut sum = [0.0; 4];
    let mut degenerate = 0;
    for (i, r) in pos.iter().enumerate() {
        let g = ground_from_embeddings(&outs[i].pixels, &txt[i], side, hw)?;
        degenerate += g.degenerate as usize;
        let (rc, iou, dice) = metrics(&g.mask.bits, &r.gt_mask)?;
        let rate = g.mask.count() as f64 / g.mask.bits.len() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let random: Vec<u8> = (0..g.mask.bits.len()).map(|_| rng.gen_bool(rate) as u8).collect();
        let (_, _, rd) = metrics(&random, &r.gt_mask)?;
        for (s, v) in sum.iter_mut().zip([rc, iou, dice, rd]) {
            *s += v;
        }
    }
    let n = pos.len() as f64;
    Ok(GroundingReport {
        recall: sum[0] / n,
        iou: sum[1] / n,
        dice: sum[2] / n,
        random_dice: sum[3] / n,
        degenerate,
        records: pos.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaskQualityReport {
    pub mean_iou: f64,
    pub median_iou: f64,
    pub min_iou: f64,
    pub max_iou: f64,
    pub records: usize,
}

/// IoU between the pseudo mask the current model would train on and the
/// ground-truth finding, over positive records. With aggregation off each
/// record scores the mean over its per-head masks.
pub fn mask_quality(model: &Model, records: &[Record], opts: &MaskOptions) -> Result<MaskQualityReport> {
    let pos: Vec<&Record> = records.iter().filter(|r| r.label == 1).collect();
    if pos.is_empty() {
        return Err(Error::input("mask_quality", "no positive records"));
    }
    let images: Vec<Vec<f64>> = pos.iter().map(|r| r.image_f64()).collect();
    let outs = embed_images(model, &images, None)?;
    let hw = model.config.img_hw;
    let mut ious: Vec<f64> = pos
        .par_iter()
        .zip(outs.par_iter())
        .zip(images.par_iter())
        .map(|((r, o), img)| {
            let masks = pseudo_mask::build_pseudo_mask(img, hw, &o.attn, opts)?;
            let mut s = 0.0;
            for m in &masks {
                s += metrics(&m.mask.bits, &r.gt_mask)?.1;
            }
            Ok(s / masks.len() as f64)
        })
        .collect::<Result<_>>()?;
    let mean = ious.iter().sum::<f64>() / ious.len() as f64;
    ious.sort_by(f64::total_cmp);
    let n = ious.len();
    let median = if n % 2 == 1 {
        ious[n / 2]
    } else {
        0.5 * (ious[n / 2 - 1] + ious[n / 2])
    };
    Ok(MaskQualityReport {
        mean_iou: mean,
        median_iou: median,
        min_iou: ious[0],
        max_iou: ious[n - 1],
        records: n,
    })
}

/// Combined report; absent sections are omitted from JSON.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeroshot: Option<ClassificationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grounding: Option<GroundingReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask_quality: Option<MaskQualityReport>,
}

/// Stacks records into a `[K×1×H×W]` tensor.
pub fn image_batch(records: &[&Record], hw: usize) -> Result<Tensor> {
    let imgs: Vec<Vec<f64>> = records.iter().map(|r| r.image_f64()).collect();
    let refs: Vec<&[f64]> = imgs.iter().map(Vec::as_slice).collect();
    stack_images(&refs, hw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_examples() {
        assert_eq!(classify_from_sims(0.8, 0.2, 0.07).0, 1);
        let (l, s) = classify_from_sims(0.3, 0.3, 0.07);
        assert_eq!(l, 0);
        assert_eq!(s, 0.5);
    }

    #[test]
    fn auc_perfect_and_tied() {
        assert_eq!(auc(&[1.0, 0.0, 1.0, 0.0], &[1, 0, 1, 0]), 1.0);
        assert_eq!(auc(&[0.5; 4], &[1, 0, 1, 0]), 0.5);
        assert_eq!(auc(&[0.1, 0.2], &[1, 1]), 0.5);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(metrics(&[1, 1, 0], &[1, 1, 0]).unwrap(), (1.0, 1.0, 1.0));
        assert_eq!(metrics(&[1, 0, 0], &[0, 1, 0]).unwrap(), (0.0, 0.0, 0.0));
        assert_eq!(metrics(&[0, 0], &[0, 0]).unwrap(), (1.0, 1.0, 1.0));
        assert_eq!(metrics(&[1, 0], &[0, 0]).unwrap(), (1.0, 0.0, 0.0));
        assert!(metrics(&[2, 0], &[0, 0]).is_err());
    }

    #[test]
    fn constant_map_is_degenerate() {
        let text = vec![1.0, 0.0];
        let pixels = vec![0.6, 0.8].repeat(4);
        let g = ground_from_embeddings(&pixels, &text, 2, 4).unwrap();
        assert!(g.degenerate);
        assert_eq!(g.mask.count(), 0);
    }
}
