//! IO layer over mog-core: config files, corpora on disk, metrics
//! persistence, checkpoints, and the runners behind the `mog` subcommands.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use mog_core::checkpoint;
use mog_core::checks::{reports_to_json, run_suite, CheckSuite};
use mog_core::expr::{eval_expr, parse_expr};
use mog_core::nn::PositionKind;
use mog_core::seq2seq::Seq2SeqModel;
use mog_core::sim::{simulate_rnn, simulate_san, simulate_split, IterationTrace, Regime};
use mog_core::train::{
    self, evaluate, gate_trace, gate_trace_csv, metrics_csv, pe_ablation, train_with_corpora,
    Corpus, ExperimentConfig, MetricsRecord, TaskKind, TrainError, Vocab,
};
use mog_core::Precision;

/// One error type for everything the CLI can hit.
#[derive(Debug)]
pub enum CliError {
    Io(String),
    Train(TrainError),
    Checkpoint(checkpoint::CheckpointError),
    Usage(String),
    Failed(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Train(e) => write!(f, "{e}"),
            CliError::Checkpoint(e) => write!(f, "{e}"),
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Failed(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Train(e)
    }
}

impl From<mog_core::ShapeError> for CliError {
    fn from(e: mog_core::ShapeError) -> Self {
        CliError::Train(TrainError::Shape(e))
    }
}

impl From<checkpoint::CheckpointError> for CliError {
    fn from(e: checkpoint::CheckpointError) -> Self {
        CliError::Checkpoint(e)
    }
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    Ok(read(path)?.lines().map(|l| l.to_string()).collect())
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    let mut f =
        fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(contents)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    Ok(ExperimentConfig::parse(&read(path)?)?)
}

/// Aligned plain-text corpus: `<stem>.src` / `<stem>.tgt`, one sentence per
/// line, whitespace tokenized.
pub fn load_corpus(stem: &str) -> Result<Corpus, CliError> {
    let src = read_lines(&PathBuf::from(format!("{stem}.src")))?;
    let tgt = read_lines(&PathBuf::from(format!("{stem}.tgt")))?;
    Ok(train::corpus_from_lines(&src, &tgt)?)
}

/// Same files, but encoded with an existing vocabulary (unknown tokens map to
/// the unk id) so the corpus matches a trained model.
pub fn load_corpus_with_vocab(stem: &str, vocab: &Vocab) -> Result<Corpus, CliError> {
    let src = read_lines(&PathBuf::from(format!("{stem}.src")))?;
    let tgt = read_lines(&PathBuf::from(format!("{stem}.tgt")))?;
    if src.len() != tgt.len() {
        return Err(CliError::Train(TrainError::Corpus(format!(
            "{} source lines vs {} target lines",
            src.len(),
            tgt.len()
        ))));
    }
    let pairs = src
        .iter()
        .zip(tgt.iter())
        .filter(|(s, t)| !s.trim().is_empty() && !t.trim().is_empty())
        .map(|(s, t)| (vocab.encode_line(s), vocab.encode_line(t)))
        .collect::<Vec<_>>();
    if pairs.is_empty() {
        return Err(CliError::Train(TrainError::Corpus("empty corpus".into())));
    }
    Ok(Corpus {
        vocab: vocab.clone(),
        pairs,
    })
}

/// Corpora for a config: synthetic tasks generate them, the file task reads
/// `<data>.src/.tgt` for training and `<data>.val.src/.val.tgt` when present
/// (falling back to the training files).
pub fn corpora_for(config: &ExperimentConfig) -> Result<(Corpus, Corpus), CliError> {
    if config.task == TaskKind::File {
        let stem = config.data.as_deref().ok_or_else(|| {
            CliError::Train(TrainError::Config(
                "file task requires data = <stem>".into(),
            ))
        })?;
        let train_corpus = load_corpus(stem)?;
        let val_stem = format!("{stem}.val");
        let eval = if Path::new(&format!("{val_stem}.src")).exists() {
            load_corpus_with_vocab(&val_stem, &train_corpus.vocab)?
        } else {
            train_corpus.clone()
        };
        Ok((train_corpus, eval))
    } else {
        Ok(config.make_corpora()?)
    }
}

pub fn save_checkpoint(
    path: &Path,
    config: &ExperimentConfig,
    model: &Seq2SeqModel,
    vocab: &Vocab,
) -> Result<(), CliError> {
    let bytes = checkpoint::encode(&config.to_text(), vocab.tokens(), &model.params);
    write_file(path, &bytes)
}

/// Rebuild a model (config, vocabulary, parameters) from a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<(ExperimentConfig, Vocab, Seq2SeqModel), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let data = checkpoint::decode(&bytes)?;
    let config = ExperimentConfig::parse(&data.config_text)?;
    let vocab = Vocab::from_tokens(data.vocab.clone());
    let mut model = Seq2SeqModel::new(config.model_config(vocab.len()))?;
    checkpoint::apply_tensors(&mut model.params, &data.tensors)?;
    Ok((config, vocab, model))
}

fn manifest_json(config: &ExperimentConfig, out: &train::TrainOutput) -> String {
    fn metrics_obj(r: &MetricsRecord) -> String {
        let mut gates = String::from("[");
        for (i, g) in r.gate_means.iter().enumerate() {
            if i > 0 {
                gates.push(',');
            }
            gates.push_str(&format!("{g}"));
        }
        gates.push(']');
        format!(
            "{{\"step\":{},\"loss\":{},\"lr\":{},\"token_acc\":{},\"seq_acc\":{},\"bleu\":{},\"gate_means\":{}}}",
            r.step, r.loss, r.lr, r.token_acc, r.seq_acc, r.bleu, gates
        )
    }
    let final_metrics = out
        .metrics
        .last()
        .map(metrics_obj)
        .unwrap_or_else(|| "null".to_string());
    let config_escaped = config
        .to_text()
        .replace('\\', "\\\\")
        .replace('"', "\\\"")
        .replace('\n', "\\n");
    format!(
        "{{\"config\":\"{}\",\"final_step\":{},\"param_scalars\":{},\"final_metrics\":{}}}\n",
        config_escaped,
        out.final_step,
        out.model.params.total_len(),
        final_metrics
    )
}

pub struct TrainArtifacts {
    pub out: train::TrainOutput,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub manifest_path: PathBuf,
}

/// Full training run: persists metrics.csv, manifest.json, and final.ckpt
/// under the config's out_dir.
pub fn run_train(
    config: &ExperimentConfig,
    progress: Option<&mut dyn FnMut(&MetricsRecord)>,
) -> Result<TrainArtifacts, CliError> {
    let (train_corpus, eval_corpus) = corpora_for(config)?;
    let out = train_with_corpora(config, &train_corpus, &eval_corpus, progress)?;
    let dir = PathBuf::from(&config.out_dir);
    let metrics_path = dir.join("metrics.csv");
    write_file(
        &metrics_path,
        metrics_csv(&out.metrics, out.gate_layers).as_bytes(),
    )?;
    let manifest_path = dir.join("manifest.json");
    write_file(&manifest_path, manifest_json(config, &out).as_bytes())?;
    let checkpoint_path = dir.join("final.ckpt");
    save_checkpoint(&checkpoint_path, config, &out.model, &train_corpus.vocab)?;
    Ok(TrainArtifacts {
        out,
        metrics_path,
        checkpoint_path,
        manifest_path,
    })
}

/// Evaluate a checkpoint against an on-disk corpus.
pub fn run_eval(
    ckpt: &Path,
    data_stem: &str,
    beam: usize,
    alpha: f64,
) -> Result<String, CliError> {
    let (_config, vocab, model) = load_checkpoint(ckpt)?;
    let corpus = load_corpus_with_vocab(data_stem, &vocab)?;
    let m = evaluate(&model, &corpus, beam, alpha)?;
    Ok(format!(
        "token_acc={} seq_acc={} bleu={}\n",
        m.token_acc, m.seq_acc, m.bleu
    ))
}

pub fn run_simulate(
    regime: Regime,
    layers: u32,
    len: u32,
    format: &str,
) -> Result<String, CliError> {
    let trace: IterationTrace = match regime {
        Regime::San => simulate_san(layers, len),
        Regime::Rnn => simulate_rnn(layers, len),
        Regime::Split => simulate_split(layers, len),
    };
    match format {
        "json" => {
            let mut s = trace.to_json();
            s.push('\n');
            Ok(s)
        }
        "csv" => Ok(trace.to_csv()),
        other => Err(CliError::Usage(format!("unknown format '{other}'"))),
    }
}

/// Returns (rendered output, all passed).
pub fn run_check(
    suite: CheckSuite,
    seeds: u64,
    format: &str,
    precision: Precision,
) -> Result<(String, bool), CliError> {
    let reports = run_suite(suite, seeds, precision);
    let all_pass = reports.iter().all(|r| r.pass);
    let rendered = match format {
        "json" => {
            let mut s = reports_to_json(&reports);
            s.push('\n');
            s
        }
        "text" => {
            let mut s = String::new();
            for r in &reports {
                s.push_str(&format!(
                    "{} [{}] rel_err={:.3e} tol={:.0e} {}\n",
                    if r.pass { "pass" } else { "FAIL" },
                    r.claim,
                    r.max_rel_error,
                    r.tolerance,
                    r.instance
                ));
            }
            s
        }
        other => return Err(CliError::Usage(format!("unknown format '{other}'"))),
    };
    Ok((rendered, all_pass))
}

/// Parse and evaluate an extension expression, returning the multigraph dump.
pub fn run_dump(expr_text: &str) -> Result<String, CliError> {
    let expr = parse_expr(expr_text).map_err(|e| CliError::Failed(e.to_string()))?;
    let result = eval_expr(&expr).map_err(|e| CliError::Failed(e.to_string()))?;
    let mut json = result.graph.to_json();
    json.push('\n');
    Ok(json)
}

pub fn run_gate_trace(ckpt: &Path, data_stem: &str) -> Result<String, CliError> {
    let (_config, vocab, model) = load_checkpoint(ckpt)?;
    let corpus = load_corpus_with_vocab(data_stem, &vocab)?;
    let rows = gate_trace(&model, &corpus)?;
    Ok(gate_trace_csv(&rows))
}

/// Position-encoding ablation: trains the three variants and writes a summary
/// table under out_dir.
pub fn run_ablate_pe(
    config: &ExperimentConfig,
    progress: Option<&mut dyn FnMut(PositionKind, &MetricsRecord)>,
) -> Result<(String, PathBuf), CliError> {
    let rows = pe_ablation(config, progress)?;
    let mut csv = String::from("position_encoding,steps,loss,token_acc,seq_acc,bleu\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.position.name(),
            r.steps,
            r.final_metrics.loss,
            r.final_metrics.token_acc,
            r.final_metrics.seq_acc,
            r.final_metrics.bleu
        ));
    }
    let path = PathBuf::from(&config.out_dir).join("pe_ablation.csv");
    write_file(&path, csv.as_bytes())?;
    Ok((csv, path))
}
