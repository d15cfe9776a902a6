use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::anyhow;
use g2d_core::checkpoint::{self, CheckpointError};
use g2d_core::corpus::{self, Corpus, CorpusConfig, CorpusError, Record};
use g2d_core::diagnostics::{self, GRAD_TOL};
use g2d_core::eval::{self, EvalReport};
use g2d_core::model::PixelFeatures;
use g2d_core::pseudo_mask;
use g2d_core::train::{self, RunConfig, TrainState};
use g2d_core::Error;
use g2d_tensor::TensorError;
use serde_json::{json, Value};

use crate::{
    DecoderLossArg, DiceFormArg, EvalArgs, EvalMode, GenerateArgs, GradcheckArgs, PixelArg, PretrainArgs, ScopeArg,
    VlaModeArg,
};

pub const USAGE: u8 = 2;
pub const IO: u8 = 3;
pub const NON_FINITE: u8 = 4;
pub const MISMATCH: u8 = 5;
pub const GRADCHECK: u8 = 6;

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self {
            code,
            error: error.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidInput { .. } => USAGE,
            Error::Tensor(TensorError::NonFinite { .. }) | Error::NonFiniteLoss { .. } => NON_FINITE,
            Error::Tensor(_) => 1,
            Error::Corpus(_) | Error::Io(_) => IO,
            Error::Checkpoint(CheckpointError::Io(_)) => IO,
            Error::Checkpoint(_) => MISMATCH,
        };
        Self::new(code, e)
    }
}

impl From<CorpusError> for Failure {
    fn from(e: CorpusError) -> Self {
        Error::from(e).into()
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Error::from(e).into()
    }
}

type Outcome = Result<(), Failure>;

fn io_err(e: std::io::Error, what: impl std::fmt::Display) -> Failure {
    Failure::new(IO, anyhow::Error::new(e).context(what.to_string()))
}

fn read_data(path: &Path) -> Result<Corpus, Failure> {
    corpus::read_corpus(path)
        .map_err(|e| Failure::new(IO, anyhow::Error::new(e).context(format!("reading {}", path.display()))))
}

pub fn generate(a: &GenerateArgs) -> Outcome {
    let cfg = CorpusConfig {
        n_records: a.n,
        img_hw: a.img_hw,
        noise_sigma: a.noise,
        p_finding: a.p_finding,
        seed: a.seed,
        ..CorpusConfig::default()
    };
    let data = corpus::generate_corpus(&cfg).map_err(|e| match e {
        CorpusError::Config(_) => Failure::new(USAGE, e),
        other => other.into(),
    })?;
    corpus::write_corpus(&a.out, &data).map_err(|e| {
        Failure::new(
            IO,
            anyhow::Error::new(e).context(format!("writing {}", a.out.display())),
        )
    })?;
    let positives = data.records.iter().filter(|r| r.label == 1).count();
    println!(
        "{}",
        json!({
            "path": a.out.display().to_string(),
            "records": data.records.len(),
            "positives": positives,
            "negatives": data.records.len() - positives,
        })
    );
    Ok(())
}

fn resolve_config(a: &PretrainArgs) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    let usage = |e: Error| Failure::new(USAGE, e);
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(e, format!("reading {}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| Failure::new(USAGE, anyhow::Error::new(e).context(format!("in {}", path.display()))))?;
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::new(USAGE, anyhow!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim()).map_err(usage)?;
    }
    let mut flags: Vec<(&str, String)> = Vec::new();
    if let Some(v) = a.pct {
        flags.push(("pct", v.to_string()));
    }
    if let Some(v) = a.heads {
        flags.push(("attn_heads", v.to_string()));
    }
    if let Some(v) = a.proj_dim {
        flags.push(("proj_dim", v.to_string()));
    }
    if a.no_aggregation {
        flags.push(("aggregation", "false".into()));
    }
    if a.no_body_mask {
        flags.push(("body_mask", "false".into()));
    }
    if a.no_smoothing {
        flags.push(("smoothing", "false".into()));
    }
    if let Some(v) = a.decoder_loss {
        let s = match v {
            DecoderLossArg::PseudoSeg => "pseudo_seg",
            DecoderLossArg::Reconstruction => "reconstruction",
            DecoderLossArg::None => "none",
        };
        flags.push(("decoder_loss", s.into()));
    }
    if let Some(v) = a.vla_mode {
        let s = match v {
            VlaModeArg::I2t => "i2t",
            VlaModeArg::Symmetric => "symmetric",
        };
        flags.push(("vla_mode", s.into()));
    }
    if let Some(v) = a.dice_form {
        let s = match v {
            DiceFormArg::ImageSoft => "image_soft",
            DiceFormArg::LiteralPixel => "literal_pixel",
        };
        flags.push(("dice_form", s.into()));
    }
    if let Some(v) = a.threshold_scope {
        let s = match v {
            ScopeArg::WithinBody => "within_body",
            ScopeArg::Global => "global",
        };
        flags.push(("threshold_scope", s.into()));
    }
    if a.shuffle_masks {
        flags.push(("shuffle_masks", "true".into()));
    }
    if let Some(v) = a.epochs {
        flags.push(("epochs", v.to_string()));
    }
    if let Some(v) = a.batch {
        flags.push(("batch", v.to_string()));
    }
    if let Some(v) = a.lr {
        flags.push(("lr", v.to_string()));
    }
    if let Some(v) = a.seed {
        flags.push(("seed", v.to_string()));
    }
    for (k, v) in flags {
        cfg.set(k, &v).map_err(usage)?;
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn check_compatible(cfg: &RunConfig, data: &Corpus) -> Result<(), Failure> {
    let m = &cfg.model;
    let mut problems = Vec::new();
    if m.img_hw != data.img_hw {
        problems.push(format!("img_hw {} vs dataset {}", m.img_hw, data.img_hw));
    }
    if m.text_vocab < data.vocab {
        problems.push(format!(
            "text_vocab {} below dataset vocabulary {}",
            m.text_vocab, data.vocab
        ));
    }
    if m.text_maxlen < data.maxlen {
        problems.push(format!(
            "text_maxlen {} below dataset maxlen {}",
            m.text_maxlen, data.maxlen
        ));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Failure::new(
            MISMATCH,
            anyhow!("model and dataset disagree: {}", problems.join("; ")),
        ))
    }
}

fn export_masks(
    state: &TrainState,
    records: &[Record],
    cfg: &RunConfig,
    dir: &Path,
    step: u64,
) -> g2d_core::Result<()> {
    let hw = cfg.model.img_hw;
    let images: Vec<Vec<f64>> = records.iter().map(Record::image_f64).collect();
    let outs = eval::embed_images(&state.model, &images, None)?;
    for (i, (img, o)) in images.iter().zip(&outs).enumerate() {
        let side = o.attn.h;
        let agg = pseudo_mask::aggregate_heads(&o.attn);
        let up = pseudo_mask::upsample(&agg, (side, side), (hw, hw))?;
        pseudo_mask::export_raw(&dir.join(format!("step{step:06}_rec{i}_attn.f64")), &up)?;
        for (j, m) in pseudo_mask::build_pseudo_mask(img, hw, &o.attn, &cfg.train.mask)?
            .iter()
            .enumerate()
        {
            pseudo_mask::export_pgm(&dir.join(format!("step{step:06}_rec{i}_mask{j}.pgm")), &m.mask)?;
        }
    }
    Ok(())
}

fn eval_fields(state: &TrainState, records: &[Record], cfg: &RunConfig) -> g2d_core::Result<Value> {
    let k = records.len().min(32);
    let r = eval::retrieval_eval(&state.model, records, k, 0)?;
    let mut v = json!({ "retrieval_top1": r.top1, "retrieval_top5": r.top5 });
    if records.iter().any(|r| r.label == 1) {
        let m = eval::mask_quality(&state.model, records, &cfg.train.mask)?;
        v["mask_iou"] = json!(m.mean_iou);
    }
    Ok(v)
}

pub fn pretrain(a: &PretrainArgs) -> Outcome {
    let data = read_data(&a.data)?;
    let cfg = resolve_config(a)?;
    check_compatible(&cfg, &data)?;
    eprintln!("# resolved configuration");
    eprint!("{}", cfg.to_text());

    let metrics_path = a.metrics.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".metrics.jsonl");
        PathBuf::from(p)
    });
    let file = File::create(&metrics_path).map_err(|e| io_err(e, format!("creating {}", metrics_path.display())))?;
    let mut metrics = BufWriter::new(file);
    if let Some(dir) = &a.export_masks {
        std::fs::create_dir_all(dir).map_err(|e| io_err(e, format!("creating {}", dir.display())))?;
    }
    let preview: Vec<Record> = data.records.iter().take(4).cloned().collect();

    let mut state = TrainState::from_config(&cfg)?;
    let total = train::total_steps(data.records.len(), &cfg.train);
    let start = Instant::now();
    let mut side_error: Option<Failure> = None;
    let mut last = None;
    let run = train::pretrain(&mut state, &data.records, &cfg.train, |s, log| {
        let mut line = serde_json::to_value(log).expect("step log serializes");
        if a.eval_every > 0 && (log.step + 1) % a.eval_every == 0 {
            match eval_fields(s, &data.records, &cfg) {
                Ok(Value::Object(extra)) => line.as_object_mut().expect("object").extend(extra),
                Ok(_) => {}
                Err(e) => {
                    side_error = Some(e.into());
                    return false;
                }
            }
        }
        if let Err(e) = writeln!(metrics, "{line}") {
            side_error = Some(io_err(e, "writing metrics"));
            return false;
        }
        if let Some(dir) = &a.export_masks {
            if a.export_every > 0 && (log.step + 1) % a.export_every == 0 {
                if let Err(e) = export_masks(s, &preview, &cfg, dir, log.step + 1) {
                    side_error = Some(e.into());
                    return false;
                }
            }
        }
        if (log.step + 1) % 100 == 0 || log.step + 1 == total {
            eprintln!(
                "step {}/{} lr {:.3e} vla {:.4} pa {:.4} total {:.4} ({:.0}s)",
                log.step + 1,
                total,
                log.lr,
                log.losses.vla,
                log.losses.pa,
                log.losses.total,
                start.elapsed().as_secs_f64()
            );
        }
        last = Some(log.losses.clone());
        true
    });
    metrics.flush().map_err(|e| io_err(e, "writing metrics"))?;
    if let Err(e) = run {
        if let Error::NonFiniteLoss { step, term, max_grad } = &e {
            eprintln!("diagnostics: step={step} term={term} max_abs_grad={max_grad:e}");
        }
        return Err(e.into());
    }
    if let Some(f) = side_error {
        return Err(f);
    }
    checkpoint::save(&a.out, &state, &cfg).map_err(|e| {
        Failure::new(
            IO,
            anyhow::Error::new(e).context(format!("writing {}", a.out.display())),
        )
    })?;
    println!(
        "{}",
        json!({
            "checkpoint": a.out.display().to_string(),
            "metrics": metrics_path.display().to_string(),
            "steps": state.step,
            "final": last,
        })
    );
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Outcome {
    let ck = checkpoint::load(&a.ckpt).map_err(|e| {
        let code = if matches!(e, CheckpointError::Io(_)) {
            IO
        } else {
            MISMATCH
        };
        Failure::new(
            code,
            anyhow::Error::new(e).context(format!("reading {}", a.ckpt.display())),
        )
    })?;
    let (cfg, state) = ck.into_state().map_err(|e| match e {
        Error::Checkpoint(CheckpointError::Io(_)) => Failure::from(e),
        other => Failure::new(MISMATCH, other),
    })?;
    let data = read_data(&a.data)?;
    check_compatible(&cfg, &data)?;
    let model = &state.model;
    let records = &data.records;
    let path = match a.pixel_features {
        PixelArg::Direct => PixelFeatures::Direct,
        PixelArg::ValuePath => PixelFeatures::ValuePath,
    };
    let mut report = EvalReport::default();
    match a.mode {
        EvalMode::Retrieval => report.retrieval = Some(eval::retrieval_eval(model, records, a.k_eval, a.seed)?),
        EvalMode::ZeroshotCls => report.zeroshot = Some(eval::zeroshot_eval(model, records, cfg.train.sigma)?),
        EvalMode::Grounding => report.grounding = Some(eval::grounding_eval(model, records, path, a.seed)?),
        EvalMode::MaskQuality => report.mask_quality = Some(eval::mask_quality(model, records, &cfg.train.mask)?),
    }
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Outcome {
    if !(a.eps > 0.0) {
        return Err(Failure::new(USAGE, anyhow!("--eps must be positive")));
    }
    let seeds = diagnostics::seed_range(a.seed, a.seeds);
    let start = Instant::now();
    let rows = diagnostics::run_gradcheck(&seeds, a.eps)?;
    println!(
        "{:<10} {:<30} {:>5} {:>12} {:<24} {:>6}",
        "group", "check", "seed", "max_rel_err", "worst", "result"
    );
    for r in &rows {
        println!(
            "{:<10} {:<30} {:>5} {:>12.3e} {:<24} {:>6}",
            r.group.to_string(),
            r.name,
            r.seed,
            r.max_rel_error,
            format!("{}[{}]", r.worst_input, r.worst_index),
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<_> = rows.iter().filter(|r| !r.pass).collect();
    eprintln!(
        "{} checks over {} seeds, {} failed, tolerance {GRAD_TOL:e}, eps {:e}, {:.1}s",
        rows.len(),
        seeds.len(),
        failed.len(),
        a.eps,
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        return Ok(());
    }
    for r in &failed {
        eprintln!(
            "FAIL {} seed {}: {}[{}] analytic {:e} numeric {:e} (rel err {:e})",
            r.name, r.seed, r.worst_input, r.worst_index, r.analytic, r.numeric, r.max_rel_error
        );
    }
    Err(Failure::new(
        GRADCHECK,
        anyhow!("{} gradient checks exceeded {GRAD_TOL:e}", failed.len()),
    ))
}
