//! Acceptance suite. Prints one line per criterion and exits nonzero if any
//! criterion that ran failed.
//!
//! Criteria 5 and 6 train full-size models (about 5 and 65 minutes on one
//! core). They run only when `G2D_ACCEPTANCE_LONG` lists them, e.g.
//! `G2D_ACCEPTANCE_LONG=5,6 cargo test --release --test acceptance`.

use std::collections::BTreeSet;
use std::time::Instant;

use g2d_core::checkpoint::{self, CheckpointError};
use g2d_core::corpus::{self, generate_corpus, CorpusConfig, CorpusError, Record};
use g2d_core::diagnostics::{self, GRAD_TOL};
use g2d_core::eval::{self, metrics};
use g2d_core::losses::{self, DiceForm, VlaMode, BCE_CLAMP};
use g2d_core::model::PixelFeatures;
use g2d_core::pseudo_mask::*;
use g2d_core::train::{self, DecoderLoss, MaskSource, RunConfig, TrainConfig, TrainState};
use g2d_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADCHECK_BUDGET_S: f64 = 120.0;
const RUN_BUDGET_S: f64 = 600.0;
const TOP1_MIN: f64 = 0.50;
const IOU_FLOOR: f64 = 0.30;
const IOU_GAIN: f64 = 1.5;
const GROUNDING_MARGIN: f64 = 0.15;
const ABLATION_GAP: f64 = 0.05;
const TRAIN_SEED: u64 = 1;
const TEST_SEED: u64 = 2;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---- 1. gradient integrity ----

fn gradients() -> Verdict {
    let start = Instant::now();
    let seeds = diagnostics::seed_range(0, diagnostics::DEFAULT_SEEDS);
    let rows = match diagnostics::run_gradcheck(&seeds, g2d_tensor::gradcheck::DEFAULT_EPS) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("gradcheck error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst = rows
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .unwrap();
    let failed = rows.iter().filter(|r| !r.pass).count();
    verdict(
        failed == 0 && worst.max_rel_error < GRAD_TOL && secs < GRADCHECK_BUDGET_S,
        format!(
            "{} checks x {} seeds, {failed} failed, max rel err {:.2e} ({}), {secs:.1}s (budget {GRADCHECK_BUDGET_S}s)",
            rows.len() / seeds.len(),
            seeds.len(),
            worst.max_rel_error,
            worst.name
        ),
    )
}

// ---- 2. loss closed forms ----

fn closed_forms() -> Verdict {
    let mut tape = Tape::new();
    let rows = tape.constant(Tensor::new(&[2, 2], vec![0.6, 0.8, 0.6, 0.8]).unwrap());
    let vla = losses::vla_loss(&mut tape, rows, rows, losses::DEFAULT_SIGMA, VlaMode::I2t).unwrap();
    let vla = tape.value(vla).item();

    let ones = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0; 4]).unwrap());
    let dice = losses::dice_loss(&mut tape, ones, ones, 1.0, DiceForm::ImageSoft).unwrap();
    let dice = tape.value(dice).item();

    let half = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![0.5; 4]).unwrap());
    let target = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let bce = losses::bce_loss(&mut tape, half, target, BCE_CLAMP).unwrap();
    let bce = tape.value(bce).item();

    let ln2 = std::f64::consts::LN_2;
    let ok = (vla - ln2).abs() <= 1e-9 && dice == 0.0 && (bce - ln2).abs() <= 1e-12;
    verdict(
        ok,
        format!(
            "vla(K=2, equal logits) - ln2 = {:.1e}, dice(all-ones) = {dice}, bce(0.5) - ln2 = {:.1e}",
            vla - ln2,
            bce - ln2
        ),
    )
}

// ---- 3. mask pipeline invariants ----

fn random_attn(rng: &mut ChaCha8Rng, heads: usize, side: usize) -> AttentionMaps {
    let mut data = Vec::new();
    for _ in 0..heads {
        let raw: Vec<f64> = (0..side * side).map(|_| rng.gen::<f64>().powi(3)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| v / s));
    }
    AttentionMaps::new(heads, side, side, data).unwrap()
}

/// Pipeline rebuilt from its public stages.
fn staged(img: &[f64], attn: &AttentionMaps, opts: &MaskOptions) -> Vec<u8> {
    let body = body_mask(img, 32, 32).unwrap();
    let up = upsample(&aggregate_heads(attn), (attn.h, attn.w), (32, 32)).unwrap();
    let m = threshold_mask(&up, &body, opts.pct, opts.scope).unwrap();
    let m = if opts.smoothing {
        bilateral_smooth(&m, &body, opts.sigma_s, opts.sigma_r).unwrap()
    } else {
        m
    };
    m.mask.bits
}

fn mask_instance(i: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(i);
    let img = corpus::generate_record(
        &CorpusConfig {
            seed: 1000 + i,
            ..CorpusConfig::default()
        },
        0,
    )
    .image_f64();
    let heads = rng.gen_range(1..5);
    let attn = random_attn(&mut rng, heads, 8);
    let body = body_mask(&img, 32, 32).unwrap();

    for smoothing in [false, true] {
        let opts = MaskOptions {
            smoothing,
            ..MaskOptions::default()
        };
        let m = &build_pseudo_mask(&img, 32, &attn, &opts).unwrap()[0];
        if !m.mask.is_subset_of(&body.mask) {
            return Err(format!("instance {i}: positives outside body"));
        }
        if m.mask.bits != staged(&img, &attn, &opts) {
            return Err(format!("instance {i}: staged composition differs"));
        }
        if build_pseudo_mask(&img, 32, &attn, &opts).unwrap()[0] != *m {
            return Err(format!("instance {i}: not deterministic"));
        }
    }

    let scores: Vec<f64> = (0..1024).map(|_| rng.gen()).collect();
    let m = threshold_mask(&scores, &body, 0.85, ThresholdScope::WithinBody).unwrap();
    let n = body.mask.count() as f64;
    let frac = m.mask.count() as f64 / n;
    if (frac - 0.15).abs() > 1.0 / n {
        return Err(format!("instance {i}: positive fraction {frac} with n={n}"));
    }

    let mut order: Vec<usize> = (0..heads).collect();
    order.rotate_left(1);
    order.reverse();
    let permuted =
        AttentionMaps::new(heads, 8, 8, order.iter().flat_map(|&h| attn.head(h).to_vec()).collect()).unwrap();
    let (a, b) = (aggregate_heads(&attn), aggregate_heads(&permuted));
    if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
        return Err(format!("instance {i}: head order changed the aggregate"));
    }

    let lo: f64 = rng.gen_range(0.05..0.95);
    let hi = (lo + rng.gen_range(0.0..0.5)).min(0.99);
    let count = |pct| {
        let opts = MaskOptions {
            pct,
            smoothing: false,
            ..MaskOptions::default()
        };
        build_pseudo_mask(&img, 32, &attn, &opts).unwrap()[0].mask.count()
    };
    if count(hi) > count(lo) {
        return Err(format!("instance {i}: pct {hi} kept more than pct {lo}"));
    }
    Ok(())
}

fn mask_invariants() -> Verdict {
    let n = 1000;
    match (0..n).try_for_each(mask_instance) {
        Ok(()) => verdict(
            true,
            format!(
                "{n} instances: subset of body, 0.15 +- 1/n, head-order, pct monotone, deterministic, staged match"
            ),
        ),
        Err(e) => verdict(false, e),
    }
}

// ---- 4. stop-gradient ----

fn stop_gradient() -> Verdict {
    let recs = generate_corpus(&CorpusConfig {
        n_records: 8,
        seed: 5,
        ..CorpusConfig::default()
    })
    .unwrap()
    .records;
    let batch: Vec<&Record> = recs.iter().collect();
    let state = TrainState::from_config(&RunConfig::default()).unwrap();
    let cfg = TrainConfig::default();

    let mut tape = Tape::new();
    let b = state.model.bind_frozen(&mut tape);
    let out = train::forward(
        &mut tape,
        &state.model,
        &b,
        &batch,
        &cfg,
        MaskSource::OnTheFly,
        state.rng_seed,
        0,
    )
    .unwrap();
    let masks = out.masks.clone();

    let (la, mut ga, va) = train::compute_gradients(&state, &batch, &cfg, MaskSource::OnTheFly).unwrap();
    let (lb, mut gb, vb) = train::compute_gradients(&state, &batch, &cfg, MaskSource::Provided(&masks)).unwrap();
    let mut coords = 0;
    for (name, (&x, &y)) in state.model.params.names().iter().zip(va.iter().zip(&vb)) {
        let (gx, gy) = (ga.take(x).unwrap(), gb.take(y).unwrap());
        coords += gx.data().len();
        if gx.data().iter().zip(gy.data()).any(|(p, q)| p.to_bits() != q.to_bits()) {
            return verdict(false, format!("gradient of {name} differs"));
        }
    }
    verdict(
        la == lb,
        format!(
            "{} parameters, {coords} coordinates bitwise equal, losses equal: {}",
            va.len(),
            la == lb
        ),
    )
}

// ---- 5. learning signal ----

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn learning_signal() -> Verdict {
    let rc = RunConfig::default();
    let train_set = generate_corpus(&CorpusConfig {
        seed: TRAIN_SEED,
        ..CorpusConfig::default()
    })
    .unwrap();
    let test = generate_corpus(&CorpusConfig {
        seed: TEST_SEED,
        ..CorpusConfig::default()
    })
    .unwrap()
    .records;
    let mut state = TrainState::from_config(&rc).unwrap();
    let iou_init = eval::mask_quality(&state.model, &test, &rc.train.mask)
        .unwrap()
        .mean_iou;

    let start = Instant::now();
    let mut totals = Vec::new();
    if let Err(e) = train::pretrain(&mut state, &train_set.records, &rc.train, |_, log| {
        totals.push(log.losses.total);
        true
    }) {
        return verdict(false, format!("training failed: {e}"));
    }
    let secs = start.elapsed().as_secs_f64();

    let top1 = eval::retrieval_eval(&state.model, &test, 32, 0).unwrap().top1;
    let iou = eval::mask_quality(&state.model, &test, &rc.train.mask)
        .unwrap()
        .mean_iou;
    let g = eval::grounding_eval(&state.model, &test, PixelFeatures::ValuePath, 0).unwrap();
    let tenth = totals.len() / 10;
    let (early, late) = (median(&totals[..tenth]), median(&totals[totals.len() - tenth..]));

    let iou_min = IOU_FLOOR.max(IOU_GAIN * iou_init);
    let a = top1 >= TOP1_MIN;
    let b = iou >= iou_min;
    let c = g.dice - g.random_dice >= GROUNDING_MARGIN;
    let d = late < early;
    let t = secs <= RUN_BUDGET_S;
    let flag = |ok: bool| if ok { "ok" } else { "FAIL" };
    verdict(
        a && b && c && d && t,
        format!(
            "(a) top1 {top1:.3} >= {TOP1_MIN} {}; (b) mask IoU {iou:.3} >= {iou_min:.3} (init {iou_init:.3}) {}; \
             (c) grounding dice {:.3} - random {:.3} = {:.3} >= {GROUNDING_MARGIN} {}; \
             loss median {early:.3} -> {late:.3} {}; {secs:.0}s <= {RUN_BUDGET_S}s {}",
            flag(a),
            flag(b),
            g.dice,
            g.random_dice,
            g.dice - g.random_dice,
            flag(c),
            flag(d),
            flag(t)
        ),
    )
}

// ---- 6. ablation directionality ----

#[derive(Clone, Copy)]
enum Arm {
    PseudoSeg,
    Reconstruction,
    NoDecoderLoss,
    Shuffled,
}

fn ablation_arm(arm: Arm, seed: u64, train_set: &[Record], test: &[Record]) -> (f64, f64) {
    let mut rc = RunConfig::default();
    rc.model.seed = seed;
    rc.train.seed = seed;
    match arm {
        Arm::PseudoSeg => {}
        Arm::Reconstruction => rc.train.decoder_loss = DecoderLoss::Reconstruction,
        Arm::NoDecoderLoss => rc.train.decoder_loss = DecoderLoss::None,
        Arm::Shuffled => rc.train.shuffle_masks = true,
    }
    let mut state = TrainState::from_config(&rc).unwrap();
    train::pretrain(&mut state, train_set, &rc.train, |_, _| true).unwrap();
    let dice = eval::grounding_eval(&state.model, test, PixelFeatures::ValuePath, 0)
        .unwrap()
        .dice;
    let iou = eval::mask_quality(&state.model, test, &rc.train.mask).unwrap().mean_iou;
    (dice, iou)
}

fn ablations() -> Verdict {
    let train_set = generate_corpus(&CorpusConfig {
        seed: TRAIN_SEED,
        ..CorpusConfig::default()
    })
    .unwrap()
    .records;
    let test = generate_corpus(&CorpusConfig {
        seed: TEST_SEED,
        ..CorpusConfig::default()
    })
    .unwrap()
    .records;
    let arms = [Arm::PseudoSeg, Arm::Reconstruction, Arm::NoDecoderLoss, Arm::Shuffled];
    let seeds = [0u64, 1, 2];
    let mut mean = [(0.0, 0.0); 4];
    for &seed in &seeds {
        for (k, &arm) in arms.iter().enumerate() {
            let (d, i) = ablation_arm(arm, seed, &train_set, &test);
            mean[k].0 += d / seeds.len() as f64;
            mean[k].1 += i / seeds.len() as f64;
        }
    }
    let [ps, rec, none, shuf] = mean;
    let mut ok = true;
    let mut parts = Vec::new();
    for (metric, pick) in [("dice", 0usize), ("iou", 1)] {
        let v = |m: (f64, f64)| if pick == 0 { m.0 } else { m.1 };
        let g1 = v(ps) - v(rec);
        let g2 = v(rec) - v(none);
        let g3 = v(ps) - v(shuf);
        ok &= g1 >= ABLATION_GAP && g2 >= 0.0 && g3 >= ABLATION_GAP;
        parts.push(format!(
            "{metric}: ps {:.3} rec {:.3} none {:.3} shuf {:.3}, ps-rec {g1:+.3} rec-none {g2:+.3} ps-shuf {g3:+.3}",
            v(ps),
            v(rec),
            v(none),
            v(shuf)
        ));
    }
    verdict(
        ok,
        format!("{} (gaps >= {ABLATION_GAP}, rec >= none)", parts.join("; ")),
    )
}

// ---- 7. serialization ----

fn serialization() -> Verdict {
    let corpus = generate_corpus(&CorpusConfig {
        n_records: 64,
        seed: 9,
        ..CorpusConfig::default()
    })
    .unwrap();
    let bytes = corpus::encode_corpus(&corpus).unwrap();
    let back = corpus::decode_corpus(&bytes).unwrap();
    let g2ds_ok = back == corpus && corpus::encode_corpus(&back).unwrap() == bytes;

    let mut bad = bytes.clone();
    bad[0] = b'X';
    let mut errs_ok = matches!(corpus::decode_corpus(&bad), Err(CorpusError::BadMagic(_)));
    let mut bad = bytes.clone();
    bad[4..8].copy_from_slice(&2u32.to_le_bytes());
    errs_ok &= matches!(
        corpus::decode_corpus(&bad),
        Err(CorpusError::VersionMismatch { found: 2 })
    );
    errs_ok &= matches!(
        corpus::decode_corpus(&bytes[..bytes.len() - 1]),
        Err(CorpusError::Truncated { .. })
    );

    let mut rc = RunConfig::default();
    rc.model.enc_channels = vec![4, 8];
    rc.model.text_dim = 8;
    rc.model.proj_dim = 16;
    rc.model.attn_heads = 2;
    rc.model.attn_head_dim = 4;
    rc.model.dec_channels = vec![4, 4];
    rc.train.batch = 4;
    rc.train.epochs = 2;
    let recs = &corpus.records[..16];

    let mut full = TrainState::from_config(&rc).unwrap();
    train::pretrain(&mut full, recs, &rc.train, |_, _| true).unwrap();
    let mut half = TrainState::from_config(&rc).unwrap();
    train::pretrain(&mut half, recs, &rc.train, |s, _| s.step < 3).unwrap();

    let ck = checkpoint::encode(&half, &rc);
    let decoded = checkpoint::decode(&ck).unwrap();
    let (rc2, mut resumed) = decoded.into_state().unwrap();
    let g2ck_ok = rc2 == rc && resumed == half && checkpoint::encode(&resumed, &rc2) == ck;
    train::pretrain(&mut resumed, recs, &rc2.train, |_, _| true).unwrap();
    let resume_ok = resumed == full;

    let mut bad = ck.clone();
    bad[0] = b'X';
    errs_ok &= matches!(checkpoint::decode(&bad), Err(CheckpointError::BadMagic(_)));
    let mut bad = ck.clone();
    bad[4..8].copy_from_slice(&9u32.to_le_bytes());
    errs_ok &= matches!(
        checkpoint::decode(&bad),
        Err(CheckpointError::VersionMismatch { found: 9 })
    );
    errs_ok &= matches!(
        checkpoint::decode(&ck[..ck.len() / 2]),
        Err(CheckpointError::Truncated { .. })
    );

    verdict(
        g2ds_ok && g2ck_ok && resume_ok && errs_ok,
        format!(
            "G2DS round trip {g2ds_ok}, G2CK round trip {g2ck_ok}, resume == uninterrupted {resume_ok}, structured errors {errs_ok}"
        ),
    )
}

// ---- 8. metric conventions ----

fn set_metrics(pred: &[u8], gt: &[u8]) -> (f64, f64, f64) {
    let p: BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i] == 1).collect();
    let g: BTreeSet<usize> = (0..gt.len()).filter(|&i| gt[i] == 1).collect();
    if g.is_empty() {
        return if p.is_empty() { (1.0, 1.0, 1.0) } else { (1.0, 0.0, 0.0) };
    }
    let inter = p.intersection(&g).count() as f64;
    let union = p.union(&g).count() as f64;
    (
        inter / g.len() as f64,
        inter / union,
        2.0 * inter / (p.len() + g.len()) as f64,
    )
}

fn metric_conventions() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut empty_gt, mut both_empty) = (0, 0);
    for i in 0..10_000 {
        let n = rng.gen_range(1..=64);
        let (rp, rg) = (rng.gen::<f64>(), rng.gen::<f64>());
        let sparse = |r: f64, rng: &mut ChaCha8Rng| -> Vec<u8> {
            let rate = if r < 0.2 { 0.0 } else { r };
            (0..n).map(|_| rng.gen_bool(rate) as u8).collect()
        };
        let pred = sparse(rp, &mut rng);
        let gt = sparse(rg, &mut rng);
        if !gt.contains(&1) {
            empty_gt += 1;
            both_empty += !pred.contains(&1) as usize;
        }
        if metrics(&pred, &gt).unwrap() != set_metrics(&pred, &gt) {
            return verdict(false, format!("pair {i} differs from the set oracle"));
        }
    }
    let ok = both_empty > 0 && empty_gt > both_empty;
    verdict(
        ok,
        format!("10000 pairs exact; {empty_gt} with empty gt ({both_empty} with empty prediction too)"),
    )
}

fn main() {
    let long: BTreeSet<u32> = std::env::var("G2D_ACCEPTANCE_LONG")
        .unwrap_or_default()
        .split(',')
        .filter_map(|s| s.trim().parse().ok())
        .collect();

    let criteria: [(u32, &str, fn() -> Verdict, bool); 8] = [
        (1, "gradient integrity", gradients, false),
        (2, "loss closed forms", closed_forms, false),
        (3, "mask pipeline invariants", mask_invariants, false),
        (4, "stop-gradient", stop_gradient, false),
        (5, "learning signal", learning_signal, true),
        (6, "ablation directionality", ablations, true),
        (7, "serialization", serialization, false),
        (8, "metric conventions", metric_conventions, false),
    ];
    let mut failed = 0;
    for (id, name, run, is_long) in criteria {
        if is_long && !long.contains(&id) {
            println!("SKIP {id} {name}: long run, set G2D_ACCEPTANCE_LONG={id} to run it");
            continue;
        }
        let v = run();
        failed += !v.pass as usize;
        println!("{} {id} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
