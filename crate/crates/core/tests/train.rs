use g2d_core::corpus::{generate_corpus, CorpusConfig, Record};
use g2d_core::losses::VlaMode;
use g2d_core::model::{Model, ModelConfig};
use g2d_core::train::*;
use g2d_tensor::Tape;
use proptest::prelude::*;

fn small_model(decoder: bool) -> ModelConfig {
    ModelConfig {
        enc_channels: vec![4, 8],
        text_dim: 8,
        proj_dim: 16,
        attn_heads: 2,
        attn_head_dim: 4,
        dec_channels: vec![4, 4],
        decoder,
        seed: 7,
        ..ModelConfig::default()
    }
}

fn records(n: usize) -> Vec<Record> {
    generate_corpus(&CorpusConfig {
        n_records: n,
        seed: 11,
        ..CorpusConfig::default()
    })
    .unwrap()
    .records
}

fn cfg(decoder_loss: DecoderLoss) -> TrainConfig {
    TrainConfig {
        batch: 4,
        epochs: 2,
        lr: 1e-3,
        decoder_loss,
        ..TrainConfig::default()
    }
}

#[test]
fn schedule_examples() {
    let c = TrainConfig::default();
    assert_eq!(lr_at(0, 3200, &c), 0.0);
    assert_eq!(lr_at(160, 3200, &c), 2e-4);
    assert_eq!(lr_at(80, 3200, &c), 1e-4);
    let last = lr_at(3199, 3200, &c);
    assert!(last >= 0.0 && last <= 2e-4 * 0.5 * (1.0 + (std::f64::consts::PI * 3199.0 / 3200.0).cos()));
}

proptest! {
    #[test]
    fn schedule_is_continuous_and_nonnegative(total in 2u64..5000, frac in 0.01f64..0.5) {
        let c = TrainConfig { warmup_frac: frac, ..TrainConfig::default() };
        let w = ((frac * total as f64).floor() as u64).max(1);
        let mut prev = 0.0;
        for s in 0..total {
            let lr = lr_at(s, total, &c);
            prop_assert!(lr >= 0.0 && lr <= c.lr);
            // Neither side of the warmup/cosine junction jumps by more
            // than one warmup increment.
            if s == w {
                prop_assert!((lr - prev).abs() <= c.lr / w as f64 + 1e-18);
            }
            prev = lr;
        }
        prop_assert_eq!(lr_at(w, total, &c), c.lr);
    }
}

#[test]
fn adamw_examples() {
    let base = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let (mut p, mut m, mut v) = (vec![0.3, -1.2], vec![0.0; 2], vec![0.0; 2]);
    adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1e-3, 1, &base);
    assert_eq!(p, vec![0.3, -1.2]);

    let wd = TrainConfig {
        weight_decay: 0.1,
        ..TrainConfig::default()
    };
    let (mut p, mut m, mut v) = (vec![0.3, -1.2], vec![0.0; 2], vec![0.0; 2]);
    adamw_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1e-2, 1, &wd);
    assert_eq!(p, vec![0.3 - 1e-2 * 0.1 * 0.3, -1.2 - 1e-2 * 0.1 * -1.2]);

    let (mut x, mut m, mut v) = (vec![1.0], vec![0.0], vec![0.0]);
    let mut prev = 1.0f64;
    for t in 1..=10 {
        let g = [2.0 * x[0]];
        adamw_update(&mut x, &g, &mut m, &mut v, 0.05, t, &TrainConfig::default());
        assert!(x[0].abs() < prev, "step {t}");
        prev = x[0].abs();
    }
}

#[test]
fn loss_bundle_identities() {
    let recs = records(8);
    let batch: Vec<&Record> = recs.iter().take(4).collect();
    for dl in [DecoderLoss::PseudoSeg, DecoderLoss::Reconstruction, DecoderLoss::None] {
        let mut state = TrainState::new(Model::new(small_model(true)).unwrap(), 0);
        let (b, _) = train_step(&mut state, &batch, &cfg(dl), 10).unwrap();
        match dl {
            DecoderLoss::None => assert_eq!(b.total, b.vla),
            DecoderLoss::PseudoSeg => {
                assert_eq!(b.pa, (b.dice + b.bce) * 0.5);
                assert_eq!(b.total, b.vla + b.pa);
            }
            DecoderLoss::Reconstruction => assert_eq!(b.total, b.vla + b.recon),
        }
    }
}

#[test]
fn injected_masks_give_bitwise_equal_gradients() {
    let recs = records(8);
    let batch: Vec<&Record> = recs.iter().take(4).collect();
    let state = TrainState::new(Model::new(small_model(true)).unwrap(), 3);
    for vla_mode in [VlaMode::I2t, VlaMode::Symmetric] {
        let c = TrainConfig {
            vla_mode,
            ..cfg(DecoderLoss::PseudoSeg)
        };
        let mut tape = Tape::new();
        let b = state.model.bind_frozen(&mut tape);
        let out = forward(
            &mut tape,
            &state.model,
            &b,
            &batch,
            &c,
            MaskSource::OnTheFly,
            state.rng_seed,
            0,
        )
        .unwrap();
        let masks = out.masks.clone();

        let (la, mut ga, va) = compute_gradients(&state, &batch, &c, MaskSource::OnTheFly).unwrap();
        let (lb, mut gb, vb) = compute_gradients(&state, &batch, &c, MaskSource::Provided(&masks)).unwrap();
        assert_eq!(la, lb);
        for (name, (&x, &y)) in state.model.params.names().iter().zip(va.iter().zip(&vb)) {
            let (gx, gy) = (ga.take(x).unwrap(), gb.take(y).unwrap());
            assert!(
                gx.data().iter().zip(gy.data()).all(|(p, q)| p.to_bits() == q.to_bits()),
                "{name}"
            );
        }
    }
}

#[test]
fn decoder_presence_does_not_change_the_trajectory_without_pa() {
    let recs = records(16);
    let c = cfg(DecoderLoss::None);
    let mut with = TrainState::new(Model::new(small_model(true)).unwrap(), 5);
    let mut without = TrainState::new(Model::new(small_model(false)).unwrap(), 5);
    let batches: Vec<Vec<&Record>> = recs.chunks(4).map(|c| c.iter().collect()).collect();
    for b in &batches {
        let (x, _) = train_step(&mut with, b, &c, 4).unwrap();
        let (y, _) = train_step(&mut without, b, &c, 4).unwrap();
        assert_eq!(x, y);
    }
    for (name, t) in without.model.params.iter() {
        let u = with.model.params.get(name).unwrap();
        assert!(
            t.data().iter().zip(u.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "{name}"
        );
    }
}

#[test]
fn one_step_is_bitwise_reproducible() {
    let recs = records(8);
    let batch: Vec<&Record> = recs.iter().take(4).collect();
    let c = cfg(DecoderLoss::PseudoSeg);
    let run = || {
        let mut s = TrainState::new(Model::new(small_model(true)).unwrap(), 9);
        let (b, lr) = train_step(&mut s, &batch, &c, 8).unwrap();
        (s, b, lr)
    };
    let (s1, b1, l1) = run();
    let (s2, b2, l2) = run();
    assert_eq!((b1, l1), (b2, l2));
    assert!(s1.model.params.bitwise_eq(&s2.model.params));
    assert_eq!(s1, s2);
}

#[test]
fn shuffled_targets_are_a_permutation() {
    let recs = records(8);
    let batch: Vec<&Record> = recs.iter().take(6).collect();
    let state = TrainState::new(Model::new(small_model(true)).unwrap(), 1);
    let run = |shuffle| {
        let c = TrainConfig {
            shuffle_masks: shuffle,
            ..cfg(DecoderLoss::PseudoSeg)
        };
        let mut tape = Tape::new();
        let b = state.model.bind_frozen(&mut tape);
        forward(
            &mut tape,
            &state.model,
            &b,
            &batch,
            &c,
            MaskSource::OnTheFly,
            state.rng_seed,
            2,
        )
        .unwrap()
        .masks
    };
    let (plain, shuffled) = (run(false), run(true));
    let mut a = plain.clone();
    let mut b = shuffled.clone();
    a.sort_by(|x, y| x[0].bits.cmp(&y[0].bits));
    b.sort_by(|x, y| x[0].bits.cmp(&y[0].bits));
    assert_eq!(a, b);
    assert_eq!(shuffled, run(true));
}

#[test]
fn batch_of_one_is_rejected() {
    let recs = records(2);
    let mut s = TrainState::new(Model::new(small_model(true)).unwrap(), 0);
    assert!(train_step(&mut s, &[&recs[0]], &cfg(DecoderLoss::PseudoSeg), 4).is_err());
}

#[test]
fn short_run_lowers_the_loss_and_is_deterministic() {
    let recs = records(64);
    let c = TrainConfig {
        batch: 8,
        epochs: 12,
        lr: 2e-3,
        ..TrainConfig::default()
    };
    let run = || {
        let mut s = TrainState::new(Model::new(small_model(true)).unwrap(), 2);
        let mut totals = Vec::new();
        pretrain(&mut s, &recs, &c, |_, log| {
            totals.push(log.losses.total);
            true
        })
        .unwrap();
        (s, totals)
    };
    let (s1, totals) = run();
    assert_eq!(totals.len() as u64, total_steps(64, &c));
    let median = |xs: &[f64]| {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let tenth = totals.len() / 10;
    assert!(median(&totals[totals.len() - tenth..]) < median(&totals[..tenth]));
    let (s2, _) = run();
    assert_eq!(s1, s2);
}

#[test]
fn run_config_text_rejects_bad_values() {
    let mut rc = RunConfig::default();
    assert!(rc.set("pct", "1.5").and_then(|_| rc.validate()).is_err());
    let mut rc = RunConfig::default();
    assert!(rc.set("batch", "1").and_then(|_| rc.validate()).is_err());
    let mut rc = RunConfig::default();
    assert!(rc.set("decoder_loss", "bogus").is_err());
    let mut rc = RunConfig::default();
    rc.set("decoder_loss", "reconstruction").unwrap();
    rc.set("attn_heads", "2").unwrap();
    assert_eq!(RunConfig::from_text(&rc.to_text()).unwrap(), rc);
}
