//! Toy seq2seq training harness: synthetic tasks, the inverse-sqrt warmup
//! schedule, Adam, a deterministic training loop, teacher-forced and decoded
//! evaluation, corpus BLEU, gate-weight tracing, and the position-encoding
//! ablation.
//!
//! Everything is driven by a flat key=value configuration and is bit
//! reproducible for a fixed (seed, config, corpus): batching order, dropout
//! masks, and parameter updates all derive from the seed.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::Tape;
use crate::encoder::{EncoderConfig, Fusion};
use crate::fmath;
use crate::nn::{ParamId, Params, PositionKind};
use crate::rng::SplitMix64;
use crate::seq2seq::{Arch, ModelConfig, Seq2SeqModel};
use crate::tensor::{Precision, ShapeError};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

// ---- vocabulary and corpora ----

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Closed vocabulary: the four specials followed by the given tokens.
    pub fn new<S: AsRef<str>>(content: &[S]) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for t in content {
            let t = t.as_ref().to_string();
            if !tokens.contains(&t) {
                tokens.push(t);
            }
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    /// Rebuild from a stored token list (e.g. a checkpoint), which already
    /// starts with the special tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        debug_assert!(tokens.len() >= SPECIALS.len());
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode_line(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode_ids(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub vocab: Vocab,
    /// Parallel (source, target) id sequences, content tokens only.
    pub pairs: Vec<(Vec<usize>, Vec<usize>)>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Copy,
    Reverse,
    Sort,
    File,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::Sort => "sort",
            TaskKind::File => "file",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "copy" => Some(TaskKind::Copy),
            "reverse" => Some(TaskKind::Reverse),
            "sort" => Some(TaskKind::Sort),
            "file" => Some(TaskKind::File),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TaskParams {
    pub seed: u64,
    pub sentences: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Content token count (total vocabulary is this plus the four specials).
    pub vocab_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainError {
    Config(String),
    Corpus(String),
    NonFiniteLoss { step: u64 },
    Shape(ShapeError),
}

impl core::fmt::Display for TrainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TrainError::Config(m) => write!(f, "config error: {m}"),
            TrainError::Corpus(m) => write!(f, "corpus error: {m}"),
            TrainError::NonFiniteLoss { step } => {
                write!(f, "training aborted: non-finite loss at step {step}")
            }
            TrainError::Shape(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for TrainError {}

impl From<ShapeError> for TrainError {
    fn from(e: ShapeError) -> Self {
        TrainError::Shape(e)
    }
}

fn task_vocab(kind: TaskKind, vocab_tokens: usize) -> Result<Vocab, TrainError> {
    match kind {
        TaskKind::Sort => {
            let n = vocab_tokens.min(10).max(2);
            let digits: Vec<String> = (0..n).map(|d| format!("{d}")).collect();
            Ok(Vocab::new(&digits))
        }
        TaskKind::Copy | TaskKind::Reverse => {
            if vocab_tokens == 0 {
                return Err(TrainError::Corpus("vocab_tokens must be positive".into()));
            }
            let words: Vec<String> = (0..vocab_tokens).map(|i| format!("w{i}")).collect();
            Ok(Vocab::new(&words))
        }
        TaskKind::File => Err(TrainError::Corpus(
            "file task needs explicit source/target lines".into(),
        )),
    }
}

/// Deterministic synthetic corpus for the copy / reverse / sort tasks.
pub fn make_task(kind: TaskKind, params: &TaskParams) -> Result<Corpus, TrainError> {
    if params.min_len == 0 || params.min_len > params.max_len {
        return Err(TrainError::Corpus(format!(
            "bad length range {}..{}",
            params.min_len, params.max_len
        )));
    }
    let vocab = task_vocab(kind, params.vocab_tokens)?;
    let content = vocab.len() - SPECIALS.len();
    let mut rng = SplitMix64::new(params.seed);
    let mut pairs = Vec::with_capacity(params.sentences);
    for _ in 0..params.sentences {
        let len = params.min_len as u64 + rng.below((params.max_len - params.min_len + 1) as u64);
        let src: Vec<usize> = (0..len)
            .map(|_| SPECIALS.len() + rng.below(content as u64) as usize)
            .collect();
        let tgt = match kind {
            TaskKind::Copy => src.clone(),
            TaskKind::Reverse => src.iter().rev().copied().collect(),
            TaskKind::Sort => {
                let mut t = src.clone();
                t.sort_unstable();
                t
            }
            TaskKind::File => unreachable!("rejected above"),
        };
        pairs.push((src, tgt));
    }
    Ok(Corpus { vocab, pairs })
}

/// Build a corpus from aligned source/target lines (one sentence per line,
/// whitespace tokenized). The vocabulary is closed over both sides.
pub fn corpus_from_lines(src_lines: &[String], tgt_lines: &[String]) -> Result<Corpus, TrainError> {
    if src_lines.len() != tgt_lines.len() {
        return Err(TrainError::Corpus(format!(
            "{} source lines vs {} target lines",
            src_lines.len(),
            tgt_lines.len()
        )));
    }
    if src_lines.is_empty() {
        return Err(TrainError::Corpus("empty corpus".into()));
    }
    let mut tokens: Vec<String> = Vec::new();
    for line in src_lines.iter().chain(tgt_lines.iter()) {
        for t in line.split_whitespace() {
            if !tokens.iter().any(|x| x == t) {
                tokens.push(t.to_string());
            }
        }
    }
    let vocab = Vocab::new(&tokens);
    let pairs = src_lines
        .iter()
        .zip(tgt_lines.iter())
        .filter(|(s, t)| !s.split_whitespace().next().is_none() && !t.split_whitespace().next().is_none())
        .map(|(s, t)| (vocab.encode_line(s), vocab.encode_line(t)))
        .collect::<Vec<_>>();
    if pairs.is_empty() {
        return Err(TrainError::Corpus("no non-empty sentence pairs".into()));
    }
    Ok(Corpus { vocab, pairs })
}

// ---- schedule and optimizer ----

/// Inverse-sqrt schedule with linear warmup:
/// lr = d^-0.5 * min(step^-0.5, step * warmup^-1.5).
pub fn learning_rate(step: u64, d_model: usize, warmup: u64) -> Result<f64, TrainError> {
    if step == 0 {
        return Err(TrainError::Config("learning rate undefined at step 0".into()));
    }
    if warmup == 0 {
        return Err(TrainError::Config("warmup must be at least 1".into()));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(fmath::powf(d_model as f64, -0.5) * (fmath::powf(s, -0.5)).min(s * fmath::powf(w, -1.5)))
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &Params) -> Self {
        Adam::with_betas(params, 0.9, 0.98, 1e-9)
    }

    pub fn with_betas(params: &Params, beta1: f64, beta2: f64, eps: f64) -> Self {
        let m = params
            .iter()
            .map(|(_, _, t)| vec![0.0; t.numel()])
            .collect();
        let v = params
            .iter()
            .map(|(_, _, t)| vec![0.0; t.numel()])
            .collect();
        Adam {
            beta1,
            beta2,
            eps,
            m,
            v,
            t: 0,
        }
    }

    /// One update. `grads[i]` is the gradient for parameter i, or None when
    /// the parameter did not participate in the loss (left unchanged).
    pub fn step(&mut self, params: &mut Params, grads: &[Option<Vec<f64>>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - fmath::powf(self.beta1, self.t as f64);
        let bc2 = 1.0 - fmath::powf(self.beta2, self.t as f64);
        for i in 0..params.len() {
            let Some(g) = grads[i].as_ref() else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = params.tensor_mut(ParamId(i)).data_mut();
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (fmath::sqrt(v_hat) + self.eps);
            }
        }
    }
}

// ---- experiment configuration ----

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub arch: Arch,
    pub task: TaskKind,
    /// Path stem for the file task (reads <stem>.src / <stem>.tgt).
    pub data: Option<String>,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub fusion: Fusion,
    pub half_dim: bool,
    pub shared_qkv: bool,
    pub position_encoding: PositionKind,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub precision: Precision,
    pub seed: u64,
    pub train_sentences: usize,
    pub eval_sentences: usize,
    pub vocab_tokens: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub batch_tokens: usize,
    pub max_steps: u64,
    pub warmup_steps: u64,
    pub beam_width: usize,
    pub length_penalty: f64,
    pub eval_interval: u64,
    pub out_dir: String,
    /// Early-stop once eval token accuracy reaches this; > 1 disables.
    pub stop_token_acc: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            arch: Arch::Graph,
            task: TaskKind::Reverse,
            data: None,
            layers: 2,
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            fusion: Fusion::WeightGate,
            half_dim: false,
            shared_qkv: false,
            position_encoding: PositionKind::Sinusoidal,
            dropout: 0.0,
            label_smoothing: 0.0,
            precision: Precision::F64,
            seed: 1,
            train_sentences: 3000,
            eval_sentences: 128,
            vocab_tokens: 16,
            min_len: 3,
            max_len: 12,
            batch_tokens: 160,
            max_steps: 5000,
            warmup_steps: 400,
            beam_width: 1,
            length_penalty: 0.0,
            eval_interval: 100,
            out_dir: "runs/default".to_string(),
            stop_token_acc: 2.0,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Some(true),
        "false" | "0" | "no" | "off" => Some(false),
        _ => None,
    }
}

impl ExperimentConfig {
    /// Parse the flat `key = value` format. `#` starts a comment; unknown
    /// keys are errors.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(TrainError::Config(format!(
                    "line {}: expected key = value, got '{line}'",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                TrainError::Config(format!("line {}: bad {what} '{value}'", lineno + 1))
            };
            match key {
                "arch" => cfg.arch = Arch::parse(value).ok_or_else(|| bad("arch"))?,
                "task" => cfg.task = TaskKind::parse(value).ok_or_else(|| bad("task"))?,
                "data" => cfg.data = Some(value.to_string()),
                "layers" => cfg.layers = value.parse().map_err(|_| bad("layers"))?,
                "d_model" => cfg.d_model = value.parse().map_err(|_| bad("d_model"))?,
                "heads" => cfg.heads = value.parse().map_err(|_| bad("heads"))?,
                "ffn_dim" => cfg.ffn_dim = value.parse().map_err(|_| bad("ffn_dim"))?,
                "fusion" => cfg.fusion = Fusion::parse(value).ok_or_else(|| bad("fusion"))?,
                "half_dim" => cfg.half_dim = parse_bool(value).ok_or_else(|| bad("half_dim"))?,
                "shared_qkv" => {
                    cfg.shared_qkv = parse_bool(value).ok_or_else(|| bad("shared_qkv"))?
                }
                "position_encoding" => {
                    cfg.position_encoding =
                        PositionKind::parse(value).ok_or_else(|| bad("position_encoding"))?
                }
                "dropout" => cfg.dropout = value.parse().map_err(|_| bad("dropout"))?,
                "label_smoothing" => {
                    cfg.label_smoothing = value.parse().map_err(|_| bad("label_smoothing"))?
                }
                "precision" => {
                    cfg.precision = match value {
                        "f64" => Precision::F64,
                        "f32" => Precision::F32,
                        _ => return Err(bad("precision")),
                    }
                }
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "train_sentences" => {
                    cfg.train_sentences = value.parse().map_err(|_| bad("train_sentences"))?
                }
                "eval_sentences" => {
                    cfg.eval_sentences = value.parse().map_err(|_| bad("eval_sentences"))?
                }
                "vocab_tokens" => {
                    cfg.vocab_tokens = value.parse().map_err(|_| bad("vocab_tokens"))?
                }
                "min_len" => cfg.min_len = value.parse().map_err(|_| bad("min_len"))?,
                "max_len" => cfg.max_len = value.parse().map_err(|_| bad("max_len"))?,
                "batch_tokens" => {
                    cfg.batch_tokens = value.parse().map_err(|_| bad("batch_tokens"))?
                }
                "max_steps" => cfg.max_steps = value.parse().map_err(|_| bad("max_steps"))?,
                "warmup_steps" => {
                    cfg.warmup_steps = value.parse().map_err(|_| bad("warmup_steps"))?
                }
                "beam_width" => cfg.beam_width = value.parse().map_err(|_| bad("beam_width"))?,
                "length_penalty" => {
                    cfg.length_penalty = value.parse().map_err(|_| bad("length_penalty"))?
                }
                "eval_interval" => {
                    cfg.eval_interval = value.parse().map_err(|_| bad("eval_interval"))?
                }
                "out_dir" => cfg.out_dir = value.to_string(),
                "stop_token_acc" => {
                    cfg.stop_token_acc = value.parse().map_err(|_| bad("stop_token_acc"))?
                }
                other => {
                    return Err(TrainError::Config(format!(
                        "line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.warmup_steps < 1 {
            return Err(TrainError::Config("warmup_steps must be >= 1".into()));
        }
        if self.beam_width < 1 {
            return Err(TrainError::Config("beam_width must be >= 1".into()));
        }
        if self.eval_interval < 1 {
            return Err(TrainError::Config("eval_interval must be >= 1".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(TrainError::Config(format!(
                "bad length range {}..{}",
                self.min_len, self.max_len
            )));
        }
        self.encoder_config()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("arch", self.arch.name().to_string());
        push("task", self.task.name().to_string());
        if let Some(d) = &self.data {
            push("data", d.clone());
        }
        push("layers", format!("{}", self.layers));
        push("d_model", format!("{}", self.d_model));
        push("heads", format!("{}", self.heads));
        push("ffn_dim", format!("{}", self.ffn_dim));
        push("fusion", self.fusion.name().to_string());
        push("half_dim", format!("{}", self.half_dim));
        push("shared_qkv", format!("{}", self.shared_qkv));
        push("position_encoding", self.position_encoding.name().to_string());
        push("dropout", format!("{}", self.dropout));
        push("label_smoothing", format!("{}", self.label_smoothing));
        push(
            "precision",
            match self.precision {
                Precision::F64 => "f64".to_string(),
                Precision::F32 => "f32".to_string(),
            },
        );
        push("seed", format!("{}", self.seed));
        push("train_sentences", format!("{}", self.train_sentences));
        push("eval_sentences", format!("{}", self.eval_sentences));
        push("vocab_tokens", format!("{}", self.vocab_tokens));
        push("min_len", format!("{}", self.min_len));
        push("max_len", format!("{}", self.max_len));
        push("batch_tokens", format!("{}", self.batch_tokens));
        push("max_steps", format!("{}", self.max_steps));
        push("warmup_steps", format!("{}", self.warmup_steps));
        push("beam_width", format!("{}", self.beam_width));
        push("length_penalty", format!("{}", self.length_penalty));
        push("eval_interval", format!("{}", self.eval_interval));
        push("out_dir", self.out_dir.clone());
        push("stop_token_acc", format!("{}", self.stop_token_acc));
        out
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            d_model: self.d_model,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            fusion: self.fusion,
            half_dim: self.half_dim,
            shared_qkv: self.shared_qkv,
            position: self.position_encoding,
            dropout: self.dropout,
            seed: self.seed,
        }
    }

    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            arch: self.arch,
            encoder: self.encoder_config(),
            vocab,
            // bos plus the longest target still has to fit the decoder.
            max_len: self.max_len + 8,
            label_smoothing: self.label_smoothing,
        }
    }

    /// Synthetic train/eval corpora (disjoint sampling streams, one shared
    /// deterministic vocabulary).
    pub fn make_corpora(&self) -> Result<(Corpus, Corpus), TrainError> {
        let train = make_task(
            self.task,
            &TaskParams {
                seed: self.seed,
                sentences: self.train_sentences,
                min_len: self.min_len,
                max_len: self.max_len,
                vocab_tokens: self.vocab_tokens,
            },
        )?;
        let eval = make_task(
            self.task,
            &TaskParams {
                seed: self.seed ^ 0xE7A1_C0FF_EE01,
                sentences: self.eval_sentences,
                min_len: self.min_len,
                max_len: self.max_len,
                vocab_tokens: self.vocab_tokens,
            },
        )?;
        Ok((train, eval))
    }
}

// ---- metrics ----

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub token_acc: f64,
    pub seq_acc: f64,
    pub bleu: f64,
    pub gate_means: Vec<f64>,
}

pub fn metrics_csv_header(gate_layers: usize) -> String {
    let mut s = String::from("step,loss,lr,token_acc,seq_acc,bleu");
    for i in 1..=gate_layers {
        s.push_str(&format!(",gate_l{i}"));
    }
    s.push('\n');
    s
}

pub fn metrics_csv(records: &[MetricsRecord], gate_layers: usize) -> String {
    let mut out = metrics_csv_header(gate_layers);
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}",
            r.step, r.loss, r.lr, r.token_acc, r.seq_acc, r.bleu
        ));
        for i in 0..gate_layers {
            out.push(',');
            if let Some(g) = r.gate_means.get(i) {
                out.push_str(&format!("{g}"));
            }
        }
        out.push('\n');
    }
    out
}

// ---- BLEU ----

#[derive(Debug, Clone, PartialEq)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

/// Corpus-level BLEU-4 with clipped n-gram counts, uniform weights, and the
/// standard brevity penalty. Any zero n-gram precision zeroes the score (no
/// smoothing).
pub fn bleu_detailed(
    hypotheses: &[Vec<usize>],
    references: &[Vec<usize>],
) -> Result<BleuScore, TrainError> {
    if hypotheses.len() != references.len() {
        return Err(TrainError::Corpus(format!(
            "{} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(TrainError::Corpus("empty corpus".into()));
    }
    let mut correct = [0u64; 4];
    let mut total = [0u64; 4];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references.iter()) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=4usize {
            if hyp.len() < n {
                continue;
            }
            let mut hyp_counts: BTreeMap<&[usize], u64> = BTreeMap::new();
            for w in hyp.windows(n) {
                *hyp_counts.entry(w).or_insert(0) += 1;
            }
            let mut ref_counts: BTreeMap<&[usize], u64> = BTreeMap::new();
            for w in reference.windows(n) {
                *ref_counts.entry(w).or_insert(0) += 1;
            }
            for (gram, &c) in &hyp_counts {
                let r = ref_counts.get(gram).copied().unwrap_or(0);
                correct[n - 1] += c.min(r);
            }
            total[n - 1] += (hyp.len() - n + 1) as u64;
        }
    }
    let mut precisions = [0.0f64; 4];
    for n in 0..4 {
        precisions[n] = if total[n] > 0 {
            correct[n] as f64 / total[n] as f64
        } else {
            0.0
        };
    }
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        fmath::exp(1.0 - ref_len as f64 / hyp_len as f64)
    } else {
        1.0
    };
    let score = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_sum: f64 = precisions.iter().map(|&p| fmath::ln(p)).sum();
        100.0 * brevity_penalty * fmath::exp(log_sum / 4.0)
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}

pub fn bleu(hypotheses: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64, TrainError> {
    Ok(bleu_detailed(hypotheses, references)?.score)
}

// ---- evaluation ----

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub token_acc: f64,
    pub seq_acc: f64,
    pub bleu: f64,
    /// Mean weight-gate activation per layer (graph arch with weight-gate
    /// fusion only).
    pub gate_means: Vec<f64>,
}

/// Teacher-forced token accuracy plus decoded sequence accuracy and BLEU.
/// `beam_width` 1 decodes greedily.
pub fn evaluate(
    model: &Seq2SeqModel,
    corpus: &Corpus,
    beam_width: usize,
    length_penalty: f64,
) -> Result<EvalMetrics, TrainError> {
    if corpus.is_empty() {
        return Err(TrainError::Corpus("empty evaluation corpus".into()));
    }
    let mut correct_tokens = 0usize;
    let mut total_tokens = 0usize;
    let mut correct_seqs = 0usize;
    let mut hyps = Vec::with_capacity(corpus.len());
    let mut refs = Vec::with_capacity(corpus.len());
    let mut gate_sums: Vec<f64> = Vec::new();
    let mut gate_count = 0usize;

    for (src, tgt) in &corpus.pairs {
        // Teacher-forced accuracy over the target plus end token.
        let mut tape = Tape::new();
        let pv = model.params.bind(&mut tape);
        let (enc_out, records) = model.encode(&mut tape, &pv, src, false)?;
        let mut prefix = vec![BOS];
        prefix.extend_from_slice(tgt);
        let logits = model.decoder.forward(&mut tape, &pv, &prefix, enc_out, false)?;
        let mut targets = tgt.clone();
        targets.push(EOS);
        let values = tape.value(logits);
        for (row, &want) in targets.iter().enumerate() {
            let r = values.row(row);
            let mut best = 0;
            for (i, &x) in r.iter().enumerate() {
                if x > r[best] {
                    best = i;
                }
            }
            if best == want {
                correct_tokens += 1;
            }
            total_tokens += 1;
        }
        let gates: Vec<f64> = records
            .iter()
            .filter_map(|r| r.gate.map(|g| g.mean_w))
            .collect();
        if !gates.is_empty() {
            if gate_sums.is_empty() {
                gate_sums = vec![0.0; gates.len()];
            }
            for (s, g) in gate_sums.iter_mut().zip(gates.iter()) {
                *s += g;
            }
            gate_count += 1;
        }

        // Decoded metrics.
        let budget = tgt.len() + 8;
        let hyp = if beam_width <= 1 {
            model.greedy_decode(src, BOS, EOS, budget)?
        } else {
            model.beam_decode(src, BOS, EOS, beam_width, length_penalty, budget)?
        };
        if &hyp == tgt {
            correct_seqs += 1;
        }
        hyps.push(hyp);
        refs.push(tgt.clone());
    }

    let gate_means = if gate_count > 0 {
        gate_sums.iter().map(|s| s / gate_count as f64).collect()
    } else {
        Vec::new()
    };
    Ok(EvalMetrics {
        token_acc: correct_tokens as f64 / total_tokens as f64,
        seq_acc: correct_seqs as f64 / corpus.len() as f64,
        bleu: bleu(&hyps, &refs)?,
        gate_means,
    })
}

// ---- training loop ----

#[derive(Debug)]
pub struct TrainOutput {
    pub model: Seq2SeqModel,
    pub metrics: Vec<MetricsRecord>,
    pub final_step: u64,
    /// Gate-mean column count in the metrics CSV.
    pub gate_layers: usize,
}

/// Deterministic batched training over a prepared corpus pair.
pub fn train_with_corpora(
    config: &ExperimentConfig,
    train_corpus: &Corpus,
    eval_corpus: &Corpus,
    mut progress: Option<&mut dyn FnMut(&MetricsRecord)>,
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    if train_corpus.is_empty() {
        return Err(TrainError::Corpus("empty training corpus".into()));
    }
    let mut model = Seq2SeqModel::new(config.model_config(train_corpus.vocab.len()))?;
    let gate_layers = if config.arch == Arch::Graph && config.fusion == Fusion::WeightGate {
        config.layers
    } else {
        0
    };
    let mut adam = Adam::new(&model.params);
    let mut order: Vec<usize> = (0..train_corpus.len()).collect();
    let mut shuffle_rng = SplitMix64::new(config.seed ^ 0x5a5a_0f0f);
    shuffle_rng.shuffle(&mut order);
    let mut cursor = 0usize;
    let mut metrics = Vec::new();
    let mut final_step = 0;

    for step in 1..=config.max_steps {
        // Fill the batch by token budget, at least one sentence.
        let mut batch: Vec<usize> = Vec::new();
        let mut tokens = 0usize;
        loop {
            if cursor >= order.len() {
                shuffle_rng.shuffle(&mut order);
                cursor = 0;
            }
            let idx = order[cursor];
            cursor += 1;
            tokens += train_corpus.pairs[idx].1.len() + 1;
            batch.push(idx);
            if tokens >= config.batch_tokens {
                break;
            }
        }

        let mut tape = Tape::with_precision(config.precision);
        tape.seed(config.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let pv = model.params.bind(&mut tape);
        let mut loss_sum = None;
        let mut token_count = 0usize;
        for &idx in &batch {
            let (src, tgt) = &train_corpus.pairs[idx];
            let (loss, n, _) =
                model.sentence_loss(&mut tape, &pv, src, tgt, BOS, EOS, true)?;
            token_count += n;
            loss_sum = Some(match loss_sum {
                None => loss,
                Some(acc) => tape.add(acc, loss)?,
            });
        }
        let loss_sum = loss_sum.expect("batch is never empty");
        let loss = tape.scale(loss_sum, 1.0 / token_count as f64);
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        let grads = tape.backward(loss)?;
        let lr = learning_rate(step, config.d_model, config.warmup_steps)?;
        let grad_list: Vec<Option<Vec<f64>>> = (0..model.params.len())
            .map(|i| grads.get(pv.var(ParamId(i))).map(|g| g.to_vec()))
            .collect();
        drop(tape);
        adam.step(&mut model.params, &grad_list, lr);
        final_step = step;

        let do_eval = step % config.eval_interval == 0 || step == config.max_steps;
        if do_eval {
            let em = evaluate(&model, eval_corpus, config.beam_width, config.length_penalty)?;
            let record = MetricsRecord {
                step,
                loss: loss_value,
                lr,
                token_acc: em.token_acc,
                seq_acc: em.seq_acc,
                bleu: em.bleu,
                gate_means: em.gate_means,
            };
            if let Some(cb) = progress.as_deref_mut() {
                cb(&record);
            }
            metrics.push(record);
            if em.token_acc >= config.stop_token_acc {
                break;
            }
        }
    }

    Ok(TrainOutput {
        model,
        metrics,
        final_step,
        gate_layers,
    })
}

/// Convenience wrapper for the synthetic tasks.
pub fn train(
    config: &ExperimentConfig,
    progress: Option<&mut dyn FnMut(&MetricsRecord)>,
) -> Result<TrainOutput, TrainError> {
    let (train_corpus, eval_corpus) = config.make_corpora()?;
    train_with_corpora(config, &train_corpus, &eval_corpus, progress)
}

// ---- gate tracing ----

#[derive(Debug, Clone, PartialEq)]
pub struct GateTraceRow {
    pub layer: usize,
    pub bucket: &'static str,
    pub mean_w: f64,
}

const BUCKETS: [&str; 6] = ["0-10", "10-20", "20-30", "30-40", "40-50", "50+"];

fn bucket_of(len: usize) -> usize {
    if len == 0 {
        return 0;
    }
    ((len - 1) / 10).min(5)
}

/// Mean weight-gate activation per (layer, sentence-length bucket) over a
/// corpus. Only defined for graph models with weight-gate fusion.
pub fn gate_trace(model: &Seq2SeqModel, corpus: &Corpus) -> Result<Vec<GateTraceRow>, TrainError> {
    let is_weight_gate = model.config.arch == Arch::Graph
        && model.config.encoder.fusion == Fusion::WeightGate;
    if !is_weight_gate {
        return Err(TrainError::Config(
            "gate trace requires a graph model with weight-gate fusion".into(),
        ));
    }
    if corpus.is_empty() {
        return Err(TrainError::Corpus("empty corpus".into()));
    }
    let layers = model.config.encoder.layers;
    let mut sums = vec![[0.0f64; 6]; layers];
    let mut counts = [0usize; 6];
    for (src, _) in &corpus.pairs {
        let ctx = model.encode_context(src)?;
        let b = bucket_of(src.len());
        counts[b] += 1;
        for g in &ctx.gates {
            sums[g.layer - 1][b] += g.mean_w;
        }
    }
    let mut rows = Vec::new();
    for layer in 0..layers {
        for b in 0..6 {
            if counts[b] > 0 {
                rows.push(GateTraceRow {
                    layer: layer + 1,
                    bucket: BUCKETS[b],
                    mean_w: sums[layer][b] / counts[b] as f64,
                });
            }
        }
    }
    Ok(rows)
}

pub fn gate_trace_csv(rows: &[GateTraceRow]) -> String {
    let mut out = String::from("layer,bucket,mean_w\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.layer, r.bucket, r.mean_w));
    }
    out
}

// ---- position-encoding ablation ----

#[derive(Debug)]
pub struct PeAblationRow {
    pub position: PositionKind,
    pub final_metrics: MetricsRecord,
    pub steps: u64,
}

/// Train three models differing only in the position-encoding kind and report
/// their final metrics.
pub fn pe_ablation(
    config: &ExperimentConfig,
    mut progress: Option<&mut dyn FnMut(PositionKind, &MetricsRecord)>,
) -> Result<Vec<PeAblationRow>, TrainError> {
    let mut rows = Vec::new();
    for kind in [PositionKind::Sinusoidal, PositionKind::None, PositionKind::Random] {
        let mut cfg = config.clone();
        cfg.position_encoding = kind;
        let mut forward = progress.as_deref_mut();
        let mut cb = |r: &MetricsRecord| {
            if let Some(f) = forward.as_deref_mut() {
                f(kind, r);
            }
        };
        let out = train(&cfg, Some(&mut cb))?;
        let final_metrics = out
            .metrics
            .last()
            .cloned()
            .ok_or_else(|| TrainError::Config("no evaluation ran; check eval_interval".into()))?;
        rows.push(PeAblationRow {
            position: kind,
            final_metrics,
            steps: out.final_step,
        });
    }
    Ok(rows)
}
