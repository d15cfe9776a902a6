use g2d_core::checkpoint::*;
use g2d_core::corpus::{generate_corpus, CorpusConfig, Record};
use g2d_core::model::{Model, ModelConfig};
use g2d_core::train::*;

fn run_config() -> RunConfig {
    let mut rc = RunConfig::default();
    rc.model = ModelConfig {
        enc_channels: vec![4, 8],
        text_dim: 8,
        proj_dim: 16,
        attn_heads: 2,
        attn_head_dim: 4,
        dec_channels: vec![4, 4],
        seed: 3,
        ..ModelConfig::default()
    };
    rc.train.batch = 4;
    rc.train.epochs = 2;
    rc.train.lr = 1e-3;
    rc.train.seed = 8;
    rc
}

fn records() -> Vec<Record> {
    generate_corpus(&CorpusConfig {
        n_records: 16,
        seed: 2,
        ..CorpusConfig::default()
    })
    .unwrap()
    .records
}

fn trained(steps: u64) -> (RunConfig, TrainState) {
    let rc = run_config();
    let mut s = TrainState::from_config(&rc).unwrap();
    let recs = records();
    pretrain(&mut s, &recs, &rc.train, |st, _| st.step < steps).unwrap();
    (rc, s)
}

#[test]
fn encode_decode_reencode_is_bitwise() {
    let (rc, s) = trained(3);
    let bytes = encode(&s, &rc);
    let ck = decode(&bytes).unwrap();
    let (rc2, s2) = ck.into_state().unwrap();
    assert_eq!(rc2, rc);
    assert_eq!(s2, s);
    assert_eq!(encode(&s2, &rc2), bytes);
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let recs = records();
    let (rc, full) = trained(u64::MAX);

    let (_, half) = trained(4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.g2ck");
    save(&path, &half, &rc).unwrap();
    let (rc2, mut resumed) = load(&path).unwrap().into_state().unwrap();
    assert_eq!(resumed.step, 4);
    pretrain(&mut resumed, &recs, &rc2.train, |_, _| true).unwrap();

    assert_eq!(resumed.step, full.step);
    assert!(resumed.model.params.bitwise_eq(&full.model.params));
    assert_eq!(encode(&resumed, &rc2), encode(&full, &rc));
}

#[test]
fn save_load_then_one_step_each_side_agree() {
    let recs = records();
    let (rc, mut a) = trained(2);
    let mut b = decode(&encode(&a, &rc)).unwrap().into_state().unwrap().1;
    let batch: Vec<&Record> = recs.iter().take(4).collect();
    let la = train_step(&mut a, &batch, &rc.train, 8).unwrap();
    let lb = train_step(&mut b, &batch, &rc.train, 8).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a, b);
}

#[test]
fn corrupted_headers_are_structured_errors() {
    let (rc, s) = trained(1);
    let good = encode(&s, &rc);

    let mut bad = good.clone();
    bad[1] = b'!';
    assert!(matches!(decode(&bad), Err(CheckpointError::BadMagic(_))));

    let mut bad = good.clone();
    bad[4..8].copy_from_slice(&9u32.to_le_bytes());
    assert!(matches!(
        decode(&bad),
        Err(CheckpointError::VersionMismatch { found: 9 })
    ));

    for cut in [0, 3, 7, 20, good.len() / 2, good.len() - 1] {
        assert!(
            matches!(decode(&good[..cut]), Err(CheckpointError::Truncated { .. })),
            "cut {cut}"
        );
    }

    let mut bad = good.clone();
    bad.extend_from_slice(&[0, 0]);
    assert!(matches!(decode(&bad), Err(CheckpointError::Malformed(_))));

    assert!(matches!(
        load(std::path::Path::new("/nonexistent/x.g2ck")),
        Err(CheckpointError::Io(_))
    ));
}

#[test]
fn other_model_config_names_the_mismatched_parameter() {
    let (rc, s) = trained(1);
    let ck = decode(&encode(&s, &rc)).unwrap();
    let wider = Model::new(ModelConfig {
        proj_dim: 20,
        ..rc.model.clone()
    })
    .unwrap();
    match ck.restore(wider) {
        Err(CheckpointError::ShapeMismatch { name, expected, found }) => {
            assert_eq!(name, "proj_v.w1");
            assert_eq!((expected, found), (vec![8, 20], vec![8, 16]));
        }
        other => panic!("unexpected {other:?}"),
    }

    let fewer_heads = Model::new(ModelConfig {
        attn_heads: 1,
        ..rc.model.clone()
    })
    .unwrap();
    assert!(matches!(
        ck.restore(fewer_heads),
        Err(CheckpointError::NameMismatch { .. }) | Err(CheckpointError::CountMismatch { .. })
    ));

    let no_decoder = Model::new(ModelConfig {
        decoder: false,
        ..rc.model.clone()
    })
    .unwrap();
    assert!(ck.restore(no_decoder).is_err());
}

#[test]
fn full_run_is_deterministic() {
    let (rc, a) = trained(u64::MAX);
    let (_, b) = trained(u64::MAX);
    assert_eq!(encode(&a, &rc), encode(&b, &rc));
}
