//! Train, convert, eval and sweep commands behind the `translit` binary.

pub mod config;

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;
use translit_core::codec::{CharSeq, TransliterationTable};
use translit_core::corpus::{tokenize_side, Corpus, Direction, SplitSpec};
use translit_core::joint::JointModel;
use translit_core::metrics::{evaluate, sweep_report, EvalReport};
use translit_core::model::{ModelKind, NeuralModel};
use translit_core::training::{
    checkpoint_from_bytes, evaluate_neural, save_checkpoint, train_loop, TrainError, TrainRecord, CHECKPOINT_MAGIC,
};

use crate::config::{KeyValues, RunConfig};

/// Failures mapped onto the stable exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training failed: {0}")]
    Train(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Train(_) | CliError::Checkpoint(_) => 4,
        }
    }
}

/// Command-line overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub corpus: Option<PathBuf>,
    pub table: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, kv: &mut KeyValues) {
        let path = |p: &PathBuf| p.to_string_lossy().into_owned();
        if let Some(p) = &self.corpus {
            kv.set("corpus", &path(p));
        }
        if let Some(p) = &self.table {
            kv.set("table", &path(p));
        }
        if let Some(p) = &self.checkpoint {
            kv.set("checkpoint", &path(p));
        }
        if let Some(p) = &self.out {
            kv.set("report", &path(p));
        }
        if let Some(s) = self.seed {
            kv.set("seed", &s.to_string());
        }
    }
}

pub fn load_table(path: Option<&Path>) -> Result<TransliterationTable, CliError> {
    match path {
        None => Ok(TransliterationTable::builtin()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Data(format!("cannot read table {}: {e}", p.display())))?;
            TransliterationTable::parse(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
        }
    }
}

pub fn load_corpus(path: &Path, direction: Direction, table: &TransliterationTable) -> Result<Corpus, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read corpus {}: {e}", path.display())))?;
    Corpus::parse(&text, direction, table).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// A model restored from either checkpoint format.
#[derive(Debug, Clone)]
pub enum LoadedModel {
    Joint { model: JointModel, direction: Direction },
    Neural(NeuralModel),
}

impl LoadedModel {
    pub fn direction(&self) -> Direction {
        match self {
            LoadedModel::Joint { direction, .. } => *direction,
            LoadedModel::Neural(m) => m.direction,
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            LoadedModel::Joint { .. } => ModelKind::Joint,
            LoadedModel::Neural(m) => m.kind(),
        }
    }

    /// Target tokens for one source word. Neural models reject symbols
    /// outside their source vocabulary.
    pub fn translate(&self, source: &CharSeq, beam_width: usize) -> Result<Vec<String>, String> {
        match self {
            LoadedModel::Joint { model, .. } => model.convert(&source.tokens).map_err(|e| e.to_string()),
            LoadedModel::Neural(m) => {
                if let Some(t) = source.tokens.iter().find(|t| !m.src_vocab.symbols().contains(t)) {
                    return Err(format!("symbol {t:?} is not in the model's source alphabet"));
                }
                Ok(m.translate(source, beam_width))
            }
        }
    }

    /// Scores every group of `corpus`; failed conversions count as empty
    /// predictions.
    pub fn evaluate(&self, corpus: &Corpus, beam_width: usize) -> EvalReport {
        match self {
            LoadedModel::Neural(m) => evaluate_neural(m, corpus, beam_width),
            LoadedModel::Joint { .. } => {
                let preds: Vec<Vec<String>> = corpus
                    .groups
                    .iter()
                    .map(|g| self.translate(&g.source, beam_width).unwrap_or_default())
                    .collect();
                evaluate(&preds, &corpus.groups).expect("one prediction per group")
            }
        }
    }
}

pub fn load_model(path: &Path) -> Result<LoadedModel, CliError> {
    let bytes =
        std::fs::read(path).map_err(|e| CliError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let bad = |e: String| CliError::Checkpoint(format!("{}: {e}", path.display()));
    if bytes.starts_with(CHECKPOINT_MAGIC.as_bytes()) {
        return checkpoint_from_bytes(&bytes).map(LoadedModel::Neural).map_err(|e| bad(e.to_string()));
    }
    let text = String::from_utf8(bytes).map_err(|_| bad("unrecognized checkpoint format".into()))?;
    let model = JointModel::from_text(&text).map_err(|e| bad(e.to_string()))?;
    let direction = model
        .meta
        .get("direction")
        .ok_or_else(|| bad("joint model has no direction".into()))?
        .parse()
        .map_err(bad)?;
    Ok(LoadedModel::Joint { model, direction })
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

/// Training and (optional) held-out corpora named by the config.
fn corpora(cfg: &RunConfig, table: &TransliterationTable) -> Result<(Corpus, Option<Corpus>), CliError> {
    let path = cfg
        .corpus
        .as_deref()
        .ok_or_else(|| CliError::Config("missing key `corpus`".into()))?;
    let corpus = load_corpus(path, cfg.direction, table)?;
    if corpus.is_empty() {
        return Err(CliError::Data(format!("{} has no word pairs", path.display())));
    }
    if let Some(test) = &cfg.test_corpus {
        return Ok((corpus, Some(load_corpus(test, cfg.direction, table)?)));
    }
    if let Some(f) = cfg.test_fraction {
        let test_count = ((corpus.len() as f64) * f).round() as usize;
        let spec = SplitSpec {
            train_count: corpus.len() - test_count,
            test_count,
            seed: cfg.split_seed,
        };
        let (train, test) = corpus.split(spec).map_err(|e| CliError::Data(e.to_string()))?;
        return Ok((train, Some(test)));
    }
    Ok((corpus, None))
}

/// Summary of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: LoadedModel,
    pub records: Vec<TrainRecord>,
    pub test: Option<EvalReport>,
}

/// Trains per `cfg`, writing the checkpoint and the JSON-lines report.
pub fn run_training(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let checkpoint = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| CliError::Config("missing key `checkpoint`".into()))?;
    let table = load_table(cfg.table.as_deref())?;
    let (train, test) = corpora(cfg, &table)?;
    let start = std::time::Instant::now();

    let (model, records) = match &cfg.backbone {
        None => {
            let pairs: Vec<(&[String], &[String])> = train
                .training_pairs()
                .into_iter()
                .map(|(s, t)| (&s.tokens[..], &t.tokens[..]))
                .collect();
            let mut joint = JointModel::train(&pairs, &cfg.joint).map_err(|e| CliError::Train(e.to_string()))?;
            joint.meta.insert("direction".into(), cfg.direction.to_string());
            joint.meta.insert("kind".into(), ModelKind::Joint.to_string());
            write_file(&checkpoint, joint.to_text().as_bytes())?;
            let model = LoadedModel::Joint {
                model: joint,
                direction: cfg.direction,
            };
            let train_eval = model.evaluate(&train, cfg.beam_width);
            let test_eval = test.as_ref().map(|t| model.evaluate(t, cfg.beam_width));
            let record = TrainRecord {
                epoch: cfg.joint.em_iterations as u64,
                step: cfg.joint.em_iterations as u64,
                loss: match &model {
                    LoadedModel::Joint { model, .. } => -model.align.log_likelihoods.last().copied().unwrap_or(0.0),
                    LoadedModel::Neural(_) => unreachable!(),
                },
                lr: 0.0,
                train_wer: Some(train_eval.wer),
                train_cer: Some(train_eval.cer),
                test_wer: test_eval.as_ref().map(|r| r.wer),
                test_cer: test_eval.as_ref().map(|r| r.cer),
                wall_secs: start.elapsed().as_secs_f64(),
            };
            (model, vec![record])
        }
        Some(backbone) => {
            let src_vocab = train.build_vocabulary(cfg.direction.source_side());
            let tgt_vocab = train.build_vocabulary(cfg.direction.target_side());
            let mut model = NeuralModel::new(cfg.direction, src_vocab, tgt_vocab, backbone, cfg.seed)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let mut records = Vec::new();
            let report_path = cfg.report.clone();
            let result = train_loop(&mut model, &train, test.as_ref(), &cfg.train, |m, rec| {
                save_checkpoint(m, &checkpoint)?;
                records.push(rec.clone());
                if let Some(p) = &report_path {
                    let lines: String = records.iter().map(|r| r.to_json_line() + "\n").collect();
                    std::fs::write(p, lines)?;
                }
                Ok(())
            });
            match result {
                Ok(_) => {}
                Err(e @ TrainError::Io(_)) => return Err(CliError::Data(e.to_string())),
                Err(e) => return Err(CliError::Train(e.to_string())),
            }
            (LoadedModel::Neural(model), records)
        }
    };
    if let Some(p) = &cfg.report {
        let lines: String = records.iter().map(|r| r.to_json_line() + "\n").collect();
        write_file(p, lines.as_bytes())?;
    }
    let test_eval = test.as_ref().map(|t| model.evaluate(t, cfg.beam_width));
    Ok(TrainOutcome {
        model,
        records,
        test: test_eval,
    })
}

pub fn cmd_train(config: &Path, overrides: &Overrides) -> Result<(), CliError> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", config.display())))?;
    let mut kv = KeyValues::parse(&text)?;
    overrides.apply(&mut kv);
    let cfg = RunConfig::from_key_values(&kv, config.parent())?;
    let outcome = run_training(&cfg)?;
    if let Some(last) = outcome.records.last() {
        eprintln!("{}", last.to_json_line());
    }
    Ok(())
}

/// Reads one word per line and writes one converted word per line. Lines
/// that cannot be converted are reported on `err` and left empty in `out`.
pub fn cmd_convert(
    checkpoint: &Path,
    table: Option<&Path>,
    beam_width: usize,
    latin: bool,
    input: impl BufRead,
    mut out: impl Write,
    mut err: impl Write,
) -> Result<(), CliError> {
    let model = load_model(checkpoint)?;
    let table = load_table(table)?;
    let direction = model.direction();
    let io = |e: std::io::Error| CliError::Data(format!("i/o error: {e}"));
    for (idx, line) in input.lines().enumerate() {
        let line = line.map_err(io)?;
        let word = line.trim();
        let converted = tokenize_side(word, direction.source_side(), &table)
            .map_err(|e| ("untokenizable", e.to_string()))
            .and_then(|src| model.translate(&src, beam_width).map_err(|e| ("unconvertible", e)))
            .and_then(|tokens| {
                let joined = tokens.concat();
                if direction == Direction::C2T && !latin {
                    table.latin_to_traditional(&joined).map_err(|e| ("unconvertible", e.to_string()))
                } else {
                    Ok(joined)
                }
            });
        match converted {
            Ok(word) => writeln!(out, "{word}").map_err(io)?,
            Err((code, reason)) => {
                writeln!(err, "line {}: [{code}] {line:?}: {reason}", idx + 1).map_err(io)?;
                writeln!(out).map_err(io)?;
            }
        }
    }
    out.flush().map_err(io)
}

/// JSON object with exactly `wer`, `cer`, `n_total` and `n_correct`.
pub fn eval_json(report: &EvalReport) -> String {
    serde_json::json!({
        "wer": report.wer,
        "cer": report.cer,
        "n_total": report.n_total,
        "n_correct": report.n_correct,
    })
    .to_string()
}

pub fn cmd_eval(checkpoint: &Path, corpus: &Path, table: Option<&Path>, beam_width: usize) -> Result<String, CliError> {
    let model = load_model(checkpoint)?;
    let table = load_table(table)?;
    let corpus = load_corpus(corpus, model.direction(), &table)?;
    if corpus.is_empty() {
        return Err(CliError::Data("test corpus has no word pairs".into()));
    }
    Ok(eval_json(&model.evaluate(&corpus, beam_width)))
}

/// A grid point: a label and the keys it overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

/// Splits a sweep file into shared keys, grid points and `out_dir`.
///
/// Grid lines look like `point = LABEL | key=value, key=value`.
pub fn parse_sweep(text: &str) -> Result<(KeyValues, Vec<SweepPoint>, Option<String>), CliError> {
    let all = KeyValues::parse(text)?;
    let mut shared = KeyValues::default();
    let mut points = Vec::new();
    let mut out_dir = None;
    for (k, v, line) in all.entries {
        match k.as_str() {
            "point" => {
                let (label, rest) = v.split_once('|').unwrap_or((v.as_str(), ""));
                let label = label.trim().to_string();
                if label.is_empty() {
                    return Err(CliError::Config(format!("line {line}: grid point without a label")));
                }
                let mut overrides = Vec::new();
                for item in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    let (pk, pv) = item
                        .split_once('=')
                        .ok_or_else(|| CliError::Config(format!("line {line}: expected key=value, got {item:?}")))?;
                    overrides.push((pk.trim().to_string(), pv.trim().to_string()));
                }
                points.push(SweepPoint { label, overrides });
            }
            "out_dir" => out_dir = Some(v),
            _ => shared.entries.push((k, v, line)),
        }
    }
    Ok((shared, points, out_dir))
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Trains and evaluates every grid point in order and returns the
/// `label,wer,cer` CSV. Points whose result file already exists are read
/// back instead of retrained.
pub fn cmd_sweep(config: &Path, overrides: &Overrides) -> Result<String, CliError> {
    let text = std::fs::read_to_string(config)
        .map_err(|e| CliError::Config(format!("cannot read sweep config {}: {e}", config.display())))?;
    let (mut shared, points, out_dir) = parse_sweep(&text)?;
    if points.is_empty() {
        return Err(CliError::Config("sweep grid is empty".into()));
    }
    let mut labels = BTreeMap::new();
    for p in &points {
        if labels.insert(p.label.as_str(), ()).is_some() {
            return Err(CliError::Config(format!("duplicate grid label {:?}", p.label)));
        }
    }
    let base = config.parent().unwrap_or(Path::new("."));
    let out_dir = match out_dir {
        Some(d) if Path::new(&d).is_relative() => base.join(d),
        Some(d) => PathBuf::from(d),
        None => base.join("sweep"),
    };
    let sweep_overrides = Overrides {
        out: None,
        checkpoint: None,
        ..overrides.clone()
    };
    sweep_overrides.apply(&mut shared);

    let mut configs = Vec::with_capacity(points.len());
    for p in &points {
        let mut kv = shared.clone();
        for (k, v) in &p.overrides {
            kv.set(k, v);
        }
        let stem = file_stem(&p.label);
        kv.set("checkpoint", &out_dir.join(format!("{stem}.ckpt")).to_string_lossy());
        kv.set("report", &out_dir.join(format!("{stem}.jsonl")).to_string_lossy());
        let cfg = RunConfig::from_key_values(&kv, Some(base))
            .map_err(|e| CliError::Config(format!("point {:?}: {e}", p.label)))?;
        if cfg.test_corpus.is_none() && cfg.test_fraction.is_none() {
            return Err(CliError::Config(format!(
                "point {:?}: sweeps need `test_corpus` or `test_fraction`",
                p.label
            )));
        }
        configs.push((p.label.clone(), cfg, out_dir.join(format!("{stem}.result.json"))));
    }

    let mut rows = Vec::with_capacity(configs.len());
    for (label, cfg, result_path) in configs {
        let metrics = match std::fs::read_to_string(&result_path) {
            Ok(text) => {
                let v: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::Data(format!("{}: {e}", result_path.display())))?;
                let get = |k: &str| {
                    v[k].as_f64()
                        .ok_or_else(|| CliError::Data(format!("{}: missing {k}", result_path.display())))
                };
                eprintln!("{label}: resumed");
                (get("wer")?, get("cer")?)
            }
            Err(_) => {
                let outcome = run_training(&cfg)?;
                let report = outcome.test.expect("sweep points have a test set");
                write_file(&result_path, eval_json(&report).as_bytes())?;
                eprintln!("{label}: wer {:.4} cer {:.4}", report.wer, report.cer);
                (report.wer, report.cer)
            }
        };
        rows.push((label, metrics.0, metrics.1));
    }
    let report = sweep_report(&rows).map_err(|e| CliError::Config(e.to_string()))?;
    let csv = report.to_csv();
    if let Some(out) = &overrides.out {
        write_file(out, csv.as_bytes())?;
    }
    if let (Some(w), Some(c)) = (report.best_wer(), report.best_cer()) {
        eprintln!("best wer: {w}; best cer: {c}");
    }
    Ok(csv)
}
