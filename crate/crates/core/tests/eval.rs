use g2d_core::corpus::{generate_corpus, CorpusConfig};
use g2d_core::eval::*;
use g2d_core::model::{Model, ModelConfig, PixelFeatures};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashSet;

fn set_metrics(pred: &[u8], gt: &[u8]) -> (f64, f64, f64) {
    let p: HashSet<usize> = (0..pred.len()).filter(|&i| pred[i] == 1).collect();
    let g: HashSet<usize> = (0..gt.len()).filter(|&i| gt[i] == 1).collect();
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

#[test]
fn metrics_match_set_oracle_on_random_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..40);
        let (rp, rg) = (rng.gen::<f64>(), rng.gen::<f64>());
        let pred: Vec<u8> = (0..n).map(|_| (rng.gen::<f64>() < rp) as u8).collect();
        let gt: Vec<u8> = (0..n).map(|_| (rng.gen::<f64>() < rg) as u8).collect();
        let got = metrics(&pred, &gt).unwrap();
        let want = set_metrics(&pred, &gt);
        assert!((got.0 - want.0).abs() < 1e-12 && (got.1 - want.1).abs() < 1e-12 && (got.2 - want.2).abs() < 1e-12);
    }
}

#[test]
fn half_of_ground_truth_predicted() {
    let gt = [1, 1, 1, 1, 0, 0, 0, 0];
    let pred = [1, 1, 0, 0, 0, 0, 0, 0];
    let (r, iou, dice) = metrics(&pred, &gt).unwrap();
    assert_eq!((r, iou), (0.5, 0.5));
    assert!((dice - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn metrics_edge_cases() {
    assert_eq!(metrics(&[0, 0], &[0, 0]).unwrap(), (1.0, 1.0, 1.0));
    assert_eq!(metrics(&[1, 0], &[0, 0]).unwrap(), (1.0, 0.0, 0.0));
    assert_eq!(metrics(&[0, 0], &[1, 0]).unwrap(), (0.0, 0.0, 0.0));
    assert!(metrics(&[2, 0], &[1, 0]).is_err());
    assert!(metrics(&[1], &[1, 0]).is_err());
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[test]
fn matching_embeddings_retrieve_perfectly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let emb: Vec<Vec<f64>> = (0..96).map(|_| unit(&mut rng, 16)).collect();
    let caps: Vec<Vec<u32>> = (0..96).map(|i| vec![i as u32]).collect();
    let refs: Vec<&[u32]> = caps.iter().map(|c| c.as_slice()).collect();
    let r = retrieval_from_embeddings(&emb, &emb, &refs, 32, 0);
    assert_eq!((r.top1, r.top5, r.galleries), (1.0, 1.0, 3));
}

#[test]
fn unrelated_embeddings_retrieve_at_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 32 * 200;
    let imgs: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, 64)).collect();
    let txts: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, 64)).collect();
    let caps: Vec<Vec<u32>> = (0..n).map(|i| vec![i as u32]).collect();
    let refs: Vec<&[u32]> = caps.iter().map(|c| c.as_slice()).collect();
    let r = retrieval_from_embeddings(&imgs, &txts, &refs, 32, 5);
    assert!((r.top1 - 1.0 / 32.0).abs() < 0.012, "{}", r.top1);
    assert!((r.top5 - 5.0 / 32.0).abs() < 0.025, "{}", r.top5);
}

#[test]
fn duplicate_captions_count_as_hits() {
    let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let t = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
    let same: Vec<&[u32]> = vec![&[3], &[3]];
    assert_eq!(retrieval_from_embeddings(&e, &t, &same, 2, 0).top1, 1.0);
    let distinct: Vec<&[u32]> = vec![&[3], &[4]];
    assert_eq!(retrieval_from_embeddings(&e, &t, &distinct, 2, 0).top1, 0.0);
}

#[test]
fn auc_examples() {
    assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]), 1.0);
    assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]), 0.0);
    assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &[0, 1, 0, 1]), 0.5);
    assert_eq!(auc(&[0.1, 0.2], &[1, 1]), 0.5);
    assert_eq!(auc(&[0.3, 0.3, 0.4], &[0, 1, 1]), 0.75);
}

proptest! {
    #[test]
    fn auc_matches_pair_counting(data in prop::collection::vec((0u8..6, 0u8..2), 2..60)) {
        let scores: Vec<f64> = data.iter().map(|&(s, _)| s as f64 / 5.0).collect();
        let labels: Vec<u8> = data.iter().map(|&(_, l)| l).collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if scores[i] > scores[j] { 1.0 } else if scores[i] == scores[j] { 0.5 } else { 0.0 };
                }
            }
        }
        let want = if pairs == 0.0 { 0.5 } else { wins / pairs };
        prop_assert!((auc(&scores, &labels) - want).abs() < 1e-12);
    }
}

#[test]
fn ties_go_to_the_negative_prompt() {
    assert_eq!(classify_from_sims(0.3, 0.3, 0.1), (0, 0.5));
    let (l, s) = classify_from_sims(0.5, 0.3, 0.1);
    assert_eq!(l, 1);
    assert!((s - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
}

#[test]
fn constant_similarity_is_degenerate() {
    let pixels = vec![1.0, 0.0].repeat(16);
    let g = ground_from_embeddings(&pixels, &[1.0, 0.0], 4, 8).unwrap();
    assert!(g.degenerate);
    assert_eq!(g.mask.count(), 0);
}

#[test]
fn grounding_picks_the_aligned_pixels() {
    // Left half of a 4x4 map points at the text, right half away from it.
    let mut pixels = Vec::new();
    for _ in 0..4 {
        for x in 0..4 {
            pixels.extend(if x < 2 { [1.0, 0.0] } else { [0.0, 1.0] });
        }
    }
    let g = ground_from_embeddings(&pixels, &[1.0, 0.0], 4, 4).unwrap();
    assert!(!g.degenerate);
    assert_eq!((g.raw_min, g.raw_max), (0.0, 1.0));
    let want: Vec<u8> = (0..16).map(|i| (i % 4 < 2) as u8).collect();
    assert_eq!(g.mask.bits, want);
}

fn small_model() -> Model {
    Model::new(ModelConfig {
        enc_channels: vec![4, 8],
        text_dim: 8,
        proj_dim: 16,
        attn_heads: 2,
        attn_head_dim: 4,
        dec_channels: vec![4, 4],
        ..ModelConfig::default()
    })
    .unwrap()
}

#[test]
fn model_level_evaluation_is_deterministic() {
    let model = small_model();
    let data = generate_corpus(&CorpusConfig {
        n_records: 64,
        seed: 4,
        ..CorpusConfig::default()
    })
    .unwrap();
    let recs = &data.records;
    assert_eq!(
        retrieval_eval(&model, recs, 16, 3).unwrap(),
        retrieval_eval(&model, recs, 16, 3).unwrap()
    );
    assert_eq!(
        zeroshot_eval(&model, recs, 0.1).unwrap(),
        zeroshot_eval(&model, recs, 0.1).unwrap()
    );
    for path in [PixelFeatures::Direct, PixelFeatures::ValuePath] {
        let a = grounding_eval(&model, recs, path, 7).unwrap();
        assert_eq!(a, grounding_eval(&model, recs, path, 7).unwrap());
        assert_eq!(a.records, recs.iter().filter(|r| r.label == 1).count());
        assert!((0.0..=1.0).contains(&a.dice) && (0.0..=1.0).contains(&a.random_dice));
    }
    assert!(retrieval_eval(&model, recs, 65, 0).is_err());
}
