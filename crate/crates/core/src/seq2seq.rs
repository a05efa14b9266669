//! Sequence-to-sequence model: a Graph-Transformer or baseline encoder in
//! front of a standard Transformer decoder (causal self-attention, encoder
//! attention, feed-forward; post-norm). The graph mechanism is encoder-side
//! only.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, VarId};
use crate::encoder::{
    BaselineEncoder, EncoderConfig, GateRecord, GraphTransformerEncoder, LayerRecord,
};
use crate::fmath;
use crate::nn::{
    positional_encoding, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamId, Params,
    ParamVars,
};
use crate::rng::SplitMix64;
use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Baseline,
    Graph,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Baseline => "baseline",
            Arch::Graph => "graph",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline" => Some(Arch::Baseline),
            "graph" => Some(Arch::Graph),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub arch: Arch,
    pub encoder: EncoderConfig,
    pub vocab: usize,
    pub max_len: usize,
    pub label_smoothing: f64,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ffn: FeedForward,
    norm3: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    embedding: ParamId,
    pe: Tensor,
    layers: Vec<DecoderLayer>,
    out_proj: Linear,
    d_model: usize,
    vocab: usize,
    max_len: usize,
    dropout: f64,
}

impl Decoder {
    fn init(
        params: &mut Params,
        rng: &mut SplitMix64,
        cfg: &EncoderConfig,
        vocab: usize,
        max_len: usize,
    ) -> Result<Self, ShapeError> {
        let d = cfg.d_model;
        let emb_data = (0..vocab * d)
            .map(|_| rng.normal(0.0, 1.0 / fmath::sqrt(d as f64)))
            .collect();
        let embedding = params.add("dec.emb", Tensor::matrix(vocab, d, emb_data)?);
        let layers = (0..cfg.layers)
            .map(|i| {
                let name = format!("dec.l{i}");
                DecoderLayer {
                    self_attn: MultiHeadAttention::init(
                        params,
                        rng,
                        &format!("{name}.self"),
                        d,
                        d,
                        cfg.heads,
                    ),
                    norm1: LayerNorm::init(params, &format!("{name}.norm1"), d),
                    cross_attn: MultiHeadAttention::init(
                        params,
                        rng,
                        &format!("{name}.cross"),
                        d,
                        d,
                        cfg.heads,
                    ),
                    norm2: LayerNorm::init(params, &format!("{name}.norm2"), d),
                    ffn: FeedForward::init(params, rng, &format!("{name}.ffn"), d, cfg.ffn_dim),
                    norm3: LayerNorm::init(params, &format!("{name}.norm3"), d),
                }
            })
            .collect();
        // Zero-initialized output projection: the first update sees a uniform
        // distribution (loss exactly ln(vocab)) and training stays stable.
        let out_proj = Linear::init(params, rng, "dec.out", d, vocab, true);
        params.tensor_mut(out_proj.w).data_mut().fill(0.0);
        let pe = positional_encoding(cfg.position, max_len, d, cfg.seed.wrapping_add(1));
        Ok(Decoder {
            embedding,
            pe,
            layers,
            out_proj,
            d_model: d,
            vocab,
            max_len,
            dropout: cfg.dropout,
        })
    }

    fn causal_mask(len: usize) -> Tensor {
        let mut m = Tensor::zeros(vec![len, len]);
        for i in 0..len {
            for j in (i + 1)..len {
                m.data_mut()[i * len + j] = -1e30;
            }
        }
        m
    }

    /// Logits over the vocabulary for every prefix position.
    pub fn forward(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        prefix: &[usize],
        enc_out: VarId,
        train: bool,
    ) -> Result<VarId, ShapeError> {
        if prefix.is_empty() {
            return Err(ShapeError::new("decoder", "empty prefix".into()));
        }
        if prefix.len() > self.max_len {
            return Err(ShapeError::new(
                "decoder",
                format!("prefix length {} exceeds max {}", prefix.len(), self.max_len),
            ));
        }
        let d = self.d_model;
        let dropout = if train { self.dropout } else { 0.0 };
        let emb = tape.gather_rows(pv.var(self.embedding), prefix)?;
        let scaled = tape.scale(emb, fmath::sqrt(d as f64));
        let pe_rows = Tensor::matrix(prefix.len(), d, self.pe.data()[..prefix.len() * d].to_vec())?;
        let pe_var = tape.input(pe_rows);
        let mut x = tape.add(scaled, pe_var)?;
        x = tape.dropout(x, dropout)?;
        let mask = tape.input(Self::causal_mask(prefix.len()));
        for layer in &self.layers {
            let a = layer.self_attn.forward(tape, pv, x, x, x, Some(mask))?;
            let a = tape.dropout(a, dropout)?;
            let r = tape.add(x, a)?;
            x = layer.norm1.forward(tape, pv, r)?;
            let c = layer
                .cross_attn
                .forward(tape, pv, x, enc_out, enc_out, None)?;
            let c = tape.dropout(c, dropout)?;
            let r2 = tape.add(x, c)?;
            x = layer.norm2.forward(tape, pv, r2)?;
            let f = layer.ffn.forward(tape, pv, x)?;
            let f = tape.dropout(f, dropout)?;
            let r3 = tape.add(x, f)?;
            x = layer.norm3.forward(tape, pv, r3)?;
        }
        self.out_proj.forward(tape, pv, x)
    }

    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        self.vocab * d
            + self.out_proj.param_count()
            + self
                .layers
                .iter()
                .map(|l| {
                    l.self_attn.own_param_count(false)
                        + l.cross_attn.own_param_count(false)
                        + l.norm1.param_count()
                        + l.norm2.param_count()
                        + l.norm3.param_count()
                        + l.ffn.param_count()
                })
                .sum::<usize>()
    }
}

#[derive(Debug, Clone)]
pub enum EncoderKind {
    Baseline(BaselineEncoder),
    Graph(GraphTransformerEncoder),
}

/// A full encoder-decoder model owning its parameters.
#[derive(Debug, Clone)]
pub struct Seq2SeqModel {
    pub params: Params,
    pub encoder: EncoderKind,
    pub decoder: Decoder,
    pub config: ModelConfig,
}

/// Encoder output materialized as a tensor, reusable across decode steps.
#[derive(Debug, Clone)]
pub struct EncodedContext {
    pub states: Tensor,
    pub gates: Vec<GateRecord>,
}

impl Seq2SeqModel {
    pub fn new(config: ModelConfig) -> Result<Self, ShapeError> {
        config.encoder.validate()?;
        if config.vocab == 0 {
            return Err(ShapeError::new("model", "empty vocabulary".into()));
        }
        let mut params = Params::new();
        let mut rng = SplitMix64::new(config.encoder.seed);
        let encoder = match config.arch {
            Arch::Baseline => EncoderKind::Baseline(BaselineEncoder::init(
                &mut params,
                &mut rng,
                config.encoder.clone(),
                config.vocab,
                config.max_len,
            )?),
            Arch::Graph => EncoderKind::Graph(GraphTransformerEncoder::init(
                &mut params,
                &mut rng,
                config.encoder.clone(),
                config.vocab,
                config.max_len,
            )?),
        };
        let decoder = Decoder::init(
            &mut params,
            &mut rng,
            &config.encoder,
            config.vocab,
            config.max_len,
        )?;
        Ok(Seq2SeqModel {
            params,
            encoder,
            decoder,
            config,
        })
    }

    /// Run the encoder on a tape; baseline encoders have no layer records.
    pub fn encode(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        src: &[usize],
        train: bool,
    ) -> Result<(VarId, Vec<LayerRecord>), ShapeError> {
        match &self.encoder {
            EncoderKind::Baseline(enc) => Ok((enc.encode(tape, pv, src, train)?, Vec::new())),
            EncoderKind::Graph(enc) => {
                let out = enc.encode(tape, pv, src, train)?;
                Ok((out.final_full, out.records))
            }
        }
    }

    /// Summed cross-entropy of `tgt ++ [eos]` given `src`, with the decoder
    /// fed `[bos] ++ tgt`. Returns (loss sum, token count, gate records).
    pub fn sentence_loss(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        src: &[usize],
        tgt: &[usize],
        bos: usize,
        eos: usize,
        train: bool,
    ) -> Result<(VarId, usize, Vec<GateRecord>), ShapeError> {
        let (enc_out, records) = self.encode(tape, pv, src, train)?;
        let mut prefix = Vec::with_capacity(tgt.len() + 1);
        prefix.push(bos);
        prefix.extend_from_slice(tgt);
        let logits = self.decoder.forward(tape, pv, &prefix, enc_out, train)?;
        let mut targets = tgt.to_vec();
        targets.push(eos);
        let loss = tape.cross_entropy_sum(logits, &targets, self.config.label_smoothing)?;
        let gates = records.iter().filter_map(|r| r.gate).collect();
        Ok((loss, targets.len(), gates))
    }

    /// Encode once and keep the result as a tensor for repeated decoding.
    pub fn encode_context(&self, src: &[usize]) -> Result<EncodedContext, ShapeError> {
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let (enc_out, records) = self.encode(&mut tape, &pv, src, false)?;
        Ok(EncodedContext {
            states: tape.value(enc_out).clone(),
            gates: records.iter().filter_map(|r| r.gate).collect(),
        })
    }

    /// Log-probabilities of the next token after `prefix` (which must start
    /// with the begin-of-sentence token).
    pub fn decode_step(
        &self,
        ctx: &EncodedContext,
        prefix: &[usize],
    ) -> Result<Vec<f64>, ShapeError> {
        let mut tape = Tape::new();
        let pv = self.params.bind(&mut tape);
        let enc = tape.input(ctx.states.clone());
        let logits = self.decoder.forward(&mut tape, &pv, prefix, enc, false)?;
        let (rows, vocab) = tape.value(logits).dims2();
        let last = tape.value(logits).row(rows - 1);
        let max = last.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let logz = max + fmath::ln(last.iter().map(|&x| fmath::exp(x - max)).sum::<f64>());
        Ok((0..vocab).map(|v| last[v] - logz).collect())
    }

    /// Joint log-probability of producing exactly `tgt` (no end-of-sentence
    /// factor): sum over positions of log p(y_t | y_<t, src).
    pub fn sequence_log_prob(
        &self,
        src: &[usize],
        tgt: &[usize],
        bos: usize,
    ) -> Result<f64, ShapeError> {
        if tgt.is_empty() {
            return Err(ShapeError::new("sequence_probability", "empty target".into()));
        }
        let ctx = self.encode_context(src)?;
        let mut prefix = vec![bos];
        let mut total = 0.0;
        for &y in tgt {
            let lp = self.decode_step(&ctx, &prefix)?;
            total += lp[y];
            prefix.push(y);
        }
        Ok(total)
    }

    pub fn sequence_probability(
        &self,
        src: &[usize],
        tgt: &[usize],
        bos: usize,
    ) -> Result<f64, ShapeError> {
        Ok(fmath::exp(self.sequence_log_prob(src, tgt, bos)?))
    }

    /// Greedy decode; returns generated content tokens (no bos/eos).
    pub fn greedy_decode(
        &self,
        src: &[usize],
        bos: usize,
        eos: usize,
        max_len: usize,
    ) -> Result<Vec<usize>, ShapeError> {
        let ctx = self.encode_context(src)?;
        let mut prefix = vec![bos];
        let mut out = Vec::new();
        for _ in 0..max_len {
            let lp = self.decode_step(&ctx, &prefix)?;
            let next = argmax(&lp);
            if next == eos {
                break;
            }
            out.push(next);
            prefix.push(next);
        }
        Ok(out)
    }

    /// Beam search with a simple length penalty: finished hypotheses are
    /// ranked by log-probability divided by length^alpha, where length counts
    /// generated tokens including the end token.
    pub fn beam_decode(
        &self,
        src: &[usize],
        bos: usize,
        eos: usize,
        beam_width: usize,
        alpha: f64,
        max_len: usize,
    ) -> Result<Vec<usize>, ShapeError> {
        if beam_width == 0 {
            return Err(ShapeError::new("beam", "beam width must be >= 1".into()));
        }
        let ctx = self.encode_context(src)?;
        let penalized = |logp: f64, generated: usize| logp / fmath::powf(generated as f64, alpha);

        struct Hyp {
            tokens: Vec<usize>, // includes bos
            logp: f64,
        }
        let mut live = vec![Hyp {
            tokens: vec![bos],
            logp: 0.0,
        }];
        let mut finished: Vec<(Vec<usize>, f64, f64)> = Vec::new(); // tokens, logp, score

        for _ in 0..max_len {
            let mut candidates: Vec<(usize, usize, f64)> = Vec::new(); // (hyp idx, token, logp)
            for (i, h) in live.iter().enumerate() {
                let lp = self.decode_step(&ctx, &h.tokens)?;
                for (tok, &l) in lp.iter().enumerate() {
                    candidates.push((i, tok, h.logp + l));
                }
            }
            // Deterministic order: by score descending, then hyp/token index.
            candidates.sort_by(|a, b| {
                b.2.partial_cmp(&a.2)
                    .unwrap_or(core::cmp::Ordering::Equal)
                    .then(a.0.cmp(&b.0))
                    .then(a.1.cmp(&b.1))
            });
            let mut next_live = Vec::with_capacity(beam_width);
            for &(i, tok, logp) in &candidates {
                if next_live.len() >= beam_width {
                    break;
                }
                let mut tokens = live[i].tokens.clone();
                tokens.push(tok);
                if tok == eos {
                    let generated = tokens.len() - 1; // content + eos
                    finished.push((tokens, logp, penalized(logp, generated)));
                } else {
                    next_live.push(Hyp { tokens, logp });
                }
            }
            live = next_live;
            if live.is_empty() || finished.len() >= beam_width {
                break;
            }
        }
        for h in &live {
            // Ran out of length budget: score as-is.
            let generated = (h.tokens.len() - 1).max(1);
            finished.push((h.tokens.clone(), h.logp, penalized(h.logp, generated)));
        }
        let best = finished
            .into_iter()
            .max_by(|a, b| a.2.partial_cmp(&b.2).unwrap_or(core::cmp::Ordering::Equal))
            .ok_or_else(|| ShapeError::new("beam", "no hypothesis produced".into()))?;
        let mut tokens = best.0;
        tokens.remove(0); // bos
        if tokens.last().copied() == Some(eos) {
            tokens.pop();
        }
        Ok(tokens)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
