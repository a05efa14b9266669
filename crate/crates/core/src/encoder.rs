//! Graph-Transformer encoder and the baseline Transformer encoder.
//!
//! A Graph-Transformer layer consumes the split of its input representation:
//! `previous` (the full representation from two layers back) and
//! `incremental` (what the last layer generated). Their sum is the input the
//! baseline would attend over, and the pre-softmax score matrix of that
//! attention decomposes into four blocks. The previous-previous block was
//! already computed by the layer before, so the layer runs only three
//! attention groups:
//!
//! - high:   query/key/value all from the incremental representation;
//! - middle: incremental queries over previous keys/values, and the reverse;
//! - low:    a plain linear transform of the previous representation,
//!           no pairing.
//!
//! Each part gets a residual from its query side plus its own layer norm. The
//! parts are fused (sum, weight-gate, or self-gate), passed through one
//! position-wise feed-forward block with residual and norm, and the result is
//! added to the input full representation.
//!
//! The first layer has no previous content (the previous slot is initialized
//! to zero, the incremental slot to embedding + position encoding), so it
//! runs the high path alone with zero middle/low parts; with sum fusion it is
//! exactly a baseline Transformer layer. Its record keeps the layer output as
//! the full representation and defines the incremental part by subtraction,
//! so `full = previous + incremental` holds at every layer and the previous
//! slot entering layer i+1 is bit-identical to layer i's input full.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, VarId};
use crate::fmath;
use crate::nn::{
    attention, positional_encoding, FeedForward, LayerNorm, Linear, MultiHeadAttention, ParamId,
    Params, ParamVars, PositionKind, QkvProjections,
};
use crate::rng::SplitMix64;
use crate::tensor::{ShapeError, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    Sum,
    WeightGate,
    SelfGate,
}

impl Fusion {
    pub fn name(self) -> &'static str {
        match self {
            Fusion::Sum => "sum",
            Fusion::WeightGate => "weight-gate",
            Fusion::SelfGate => "self-gate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sum" => Some(Fusion::Sum),
            "weight-gate" => Some(Fusion::WeightGate),
            "self-gate" => Some(Fusion::SelfGate),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub fusion: Fusion,
    pub half_dim: bool,
    pub shared_qkv: bool,
    pub position: PositionKind,
    pub dropout: f64,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ShapeError> {
        if self.d_model == 0 || self.layers == 0 {
            return Err(ShapeError::new(
                "encoder_config",
                "layers and model dim must be positive".into(),
            ));
        }
        if self.d_model % self.heads != 0 {
            return Err(ShapeError::new(
                "encoder_config",
                format!("d_model {} not divisible by heads {}", self.d_model, self.heads),
            ));
        }
        if self.half_dim && self.d_model % (2 * self.heads) != 0 {
            return Err(ShapeError::new(
                "encoder_config",
                format!(
                    "half-dim requires d_model {} divisible by 2*heads {}",
                    self.d_model,
                    2 * self.heads
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ShapeError::new(
                "encoder_config",
                format!("dropout {} outside [0, 1)", self.dropout),
            ));
        }
        Ok(())
    }

    /// Internal attention width of the split parts.
    pub fn d_attn(&self) -> usize {
        if self.half_dim {
            self.d_model / 2
        } else {
            self.d_model
        }
    }
}

/// Mean weight-gate activation of one layer, in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateRecord {
    pub layer: usize,
    pub mean_w: f64,
}

/// The (previous, incremental, full) split of one layer's output.
#[derive(Debug, Clone)]
pub struct SplitRepresentation {
    pub previous: Tensor,
    pub incremental: Tensor,
    pub full: Tensor,
}

/// Tape-level per-layer output record.
#[derive(Debug, Clone)]
pub struct LayerRecord {
    pub previous: VarId,
    pub incremental: VarId,
    pub full: VarId,
    pub gate: Option<GateRecord>,
}

#[derive(Debug, Clone)]
struct AttnPart {
    mha: MultiHeadAttention,
    norm: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct SelfGate {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
}

impl SelfGate {
    fn init(params: &mut Params, rng: &mut SplitMix64, name: &str, d: usize) -> Self {
        SelfGate {
            wq: Linear::init(params, rng, &format!("{name}.wq"), d, d, false),
            wk: Linear::init(params, rng, &format!("{name}.wk"), d, d, false),
            wv: Linear::init(params, rng, &format!("{name}.wv"), d, d, false),
        }
    }

    fn param_count(&self) -> usize {
        self.wq.param_count() + self.wk.param_count() + self.wv.param_count()
    }
}

#[derive(Debug, Clone)]
pub struct GtLayer {
    shared: Option<QkvProjections>,
    high: AttnPart,
    mid_a: AttnPart,
    mid_b: AttnPart,
    low_lin: Linear,
    low_norm: LayerNorm,
    ffn: FeedForward,
    ffn_norm: LayerNorm,
    self_gate: Option<SelfGate>,
    fusion: Fusion,
    dropout: f64,
}

/// The three split-attention outputs, each post residual and layer norm.
/// The two middle parts are also kept separate for the self-gate fusion.
pub struct SplitParts {
    pub high: VarId,
    pub mid_a: VarId,
    pub mid_b: VarId,
    pub low: VarId,
}

impl GtLayer {
    fn init(
        params: &mut Params,
        rng: &mut SplitMix64,
        name: &str,
        cfg: &EncoderConfig,
    ) -> Self {
        let d = cfg.d_model;
        let da = cfg.d_attn();
        let shared = cfg
            .shared_qkv
            .then(|| QkvProjections::init(params, rng, &format!("{name}.qkv"), d, da));
        let part = |params: &mut Params, rng: &mut SplitMix64, part_name: &str| {
            let mha = match &shared {
                Some(q) => MultiHeadAttention::init_shared(
                    params,
                    rng,
                    &format!("{name}.{part_name}"),
                    q,
                    cfg.heads,
                    d,
                    da,
                ),
                None => MultiHeadAttention::init(
                    params,
                    rng,
                    &format!("{name}.{part_name}"),
                    d,
                    da,
                    cfg.heads,
                ),
            };
            let norm = LayerNorm::init(params, &format!("{name}.{part_name}_norm"), d);
            AttnPart { mha, norm }
        };
        let high = part(params, rng, "high");
        let mid_a = part(params, rng, "mid_a");
        let mid_b = part(params, rng, "mid_b");
        let low_lin = Linear::init(params, rng, &format!("{name}.low"), d, d, true);
        let low_norm = LayerNorm::init(params, &format!("{name}.low_norm"), d);
        let ffn = FeedForward::init(params, rng, &format!("{name}.ffn"), d, cfg.ffn_dim);
        let ffn_norm = LayerNorm::init(params, &format!("{name}.ffn_norm"), d);
        let self_gate = matches!(cfg.fusion, Fusion::SelfGate)
            .then(|| SelfGate::init(params, rng, &format!("{name}.gate"), d));
        GtLayer {
            shared,
            high,
            mid_a,
            mid_b,
            low_lin,
            low_norm,
            ffn,
            ffn_norm,
            self_gate,
            fusion: cfg.fusion,
            dropout: cfg.dropout,
        }
    }

    fn attn_block(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        part: &AttnPart,
        query: VarId,
        kv: VarId,
        dropout: f64,
    ) -> Result<VarId, ShapeError> {
        let a = part.mha.forward(tape, pv, query, kv, kv, None)?;
        let a = tape.dropout(a, dropout)?;
        let res = tape.add(query, a)?;
        part.norm.forward(tape, pv, res)
    }

    /// All four parts over a (previous, incremental) input split.
    pub fn split_parts(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        prev: VarId,
        incr: VarId,
        train: bool,
    ) -> Result<SplitParts, ShapeError> {
        let dropout = if train { self.dropout } else { 0.0 };
        let high = self.attn_block(tape, pv, &self.high, incr, incr, dropout)?;
        let mid_a = self.attn_block(tape, pv, &self.mid_a, incr, prev, dropout)?;
        let mid_b = self.attn_block(tape, pv, &self.mid_b, prev, incr, dropout)?;
        let low_out = self.low_lin.forward(tape, pv, prev)?;
        let low_out = tape.dropout(low_out, dropout)?;
        let low_res = tape.add(prev, low_out)?;
        let low = self.low_norm.forward(tape, pv, low_res)?;
        Ok(SplitParts {
            high,
            mid_a,
            mid_b,
            low,
        })
    }

    /// Spec-level split attention: (i_h, i_m, i_l) with the two middle parts
    /// summed into one tensor.
    pub fn split_attention(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        prev: VarId,
        incr: VarId,
    ) -> Result<(VarId, VarId, VarId), ShapeError> {
        let parts = self.split_parts(tape, pv, prev, incr, false)?;
        let i_m = tape.add(parts.mid_a, parts.mid_b)?;
        Ok((parts.high, i_m, parts.low))
    }

    pub fn own_param_count(&self, cfg: &EncoderConfig) -> usize {
        let shared = self.shared.as_ref().map(|q| q.param_count()).unwrap_or(0);
        shared
            + self.high.mha.own_param_count(cfg.shared_qkv)
            + self.mid_a.mha.own_param_count(cfg.shared_qkv)
            + self.mid_b.mha.own_param_count(cfg.shared_qkv)
            + self.high.norm.param_count()
            + self.mid_a.norm.param_count()
            + self.mid_b.norm.param_count()
            + self.low_lin.param_count()
            + self.low_norm.param_count()
            + self.ffn.param_count()
            + self.ffn_norm.param_count()
            + self.self_gate.as_ref().map(|g| g.param_count()).unwrap_or(0)
    }
}

// ---- fusion strategies ----

/// Incremental part of the sum fusion: i_h + i_m + i_l.
fn sum_incremental(
    tape: &mut Tape,
    i_h: VarId,
    i_m: VarId,
    i_l: VarId,
) -> Result<VarId, ShapeError> {
    let hm = tape.add(i_h, i_m)?;
    tape.add(hm, i_l)
}

/// Sum fusion: full = prev + i_h + i_m + i_l.
pub fn fuse_sum(
    tape: &mut Tape,
    i_h: VarId,
    i_m: VarId,
    i_l: VarId,
    prev: VarId,
) -> Result<VarId, ShapeError> {
    let incr = sum_incremental(tape, i_h, i_m, i_l)?;
    tape.add(prev, incr)
}

/// Incremental part of the weight gate: w = sigmoid(i_h + i_m + i_l),
/// incr = (i_h + i_m) * w + i_l * (1 - w). Returns the mean gate activation.
fn weight_gate_incremental(
    tape: &mut Tape,
    i_h: VarId,
    i_m: VarId,
    i_l: VarId,
) -> Result<(VarId, f64), ShapeError> {
    let pre = sum_incremental(tape, i_h, i_m, i_l)?;
    let w = tape.sigmoid(pre);
    let mean_w = tape.value(w).mean();
    let hm = tape.add(i_h, i_m)?;
    let gated_new = tape.mul(hm, w)?;
    let ones = tape.fill(tape.value(w).shape().to_vec(), 1.0);
    let inv = tape.sub(ones, w)?;
    let gated_low = tape.mul(i_l, inv)?;
    let incr = tape.add(gated_new, gated_low)?;
    Ok((incr, mean_w))
}

/// Weight-gate fusion: full = prev + (i_h + i_m) * w + i_l * (1 - w).
pub fn fuse_weight_gate(
    tape: &mut Tape,
    i_h: VarId,
    i_m: VarId,
    i_l: VarId,
    prev: VarId,
    layer: usize,
) -> Result<(VarId, GateRecord), ShapeError> {
    let (incr, mean_w) = weight_gate_incremental(tape, i_h, i_m, i_l)?;
    let full = tape.add(prev, incr)?;
    Ok((full, GateRecord { layer, mean_w }))
}

/// Incremental part of the self gate: per token, the four part vectors (low,
/// middle-a, middle-b, high) are stacked into a 4-row sequence, run through
/// one single-head attention with learned q/k/v projections, divided by 4,
/// and the output rows are summed.
fn self_gate_incremental(
    tape: &mut Tape,
    pv: &ParamVars,
    gate: &SelfGate,
    low: VarId,
    mid_a: VarId,
    mid_b: VarId,
    high: VarId,
) -> Result<VarId, ShapeError> {
    let (len, _) = tape.value(low).dims2();
    let mut token_rows = Vec::with_capacity(len);
    for t in 0..len {
        let rows = [
            tape.slice_rows(low, t, 1)?,
            tape.slice_rows(mid_a, t, 1)?,
            tape.slice_rows(mid_b, t, 1)?,
            tape.slice_rows(high, t, 1)?,
        ];
        let stacked = tape.concat_rows(&rows)?;
        let q = gate.wq.forward(tape, pv, stacked)?;
        let k = gate.wk.forward(tape, pv, stacked)?;
        let v = gate.wv.forward(tape, pv, stacked)?;
        let att = attention(tape, q, k, v, None)?;
        let scaled = tape.scale(att, 0.25);
        let summed = tape.sum_rows(scaled);
        token_rows.push(summed);
    }
    tape.concat_rows(&token_rows)
}

/// Self-gate fusion: full = prev + the gated combination of the four parts.
pub fn fuse_self_gate(
    tape: &mut Tape,
    pv: &ParamVars,
    gate: &SelfGate,
    low: VarId,
    mid_a: VarId,
    mid_b: VarId,
    high: VarId,
    prev: VarId,
) -> Result<VarId, ShapeError> {
    let incr = self_gate_incremental(tape, pv, gate, low, mid_a, mid_b, high)?;
    tape.add(prev, incr)
}

// ---- encoders ----

#[derive(Debug, Clone)]
pub struct EncodeOutput {
    pub final_full: VarId,
    pub records: Vec<LayerRecord>,
}

impl EncodeOutput {
    pub fn gate_records(&self) -> Vec<GateRecord> {
        self.records.iter().filter_map(|r| r.gate).collect()
    }

    pub fn split_representations(&self, tape: &Tape) -> Vec<SplitRepresentation> {
        self.records
            .iter()
            .map(|r| SplitRepresentation {
                previous: tape.value(r.previous).clone(),
                incremental: tape.value(r.incremental).clone(),
                full: tape.value(r.full).clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct GraphTransformerEncoder {
    pub config: EncoderConfig,
    pub embedding: ParamId,
    pub pe: Tensor,
    pub layers: Vec<GtLayer>,
    pub vocab: usize,
    pub max_len: usize,
}

impl GraphTransformerEncoder {
    pub fn init(
        params: &mut Params,
        rng: &mut SplitMix64,
        cfg: EncoderConfig,
        vocab: usize,
        max_len: usize,
    ) -> Result<Self, ShapeError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let emb_data = (0..vocab * d)
            .map(|_| rng.normal(0.0, 1.0 / fmath::sqrt(d as f64)))
            .collect();
        let embedding = params.add("enc.emb", Tensor::matrix(vocab, d, emb_data)?);
        let layers = (0..cfg.layers)
            .map(|i| GtLayer::init(params, rng, &format!("enc.l{i}"), &cfg))
            .collect();
        let pe = positional_encoding(cfg.position, max_len, d, cfg.seed);
        Ok(GraphTransformerEncoder {
            config: cfg,
            embedding,
            pe,
            layers,
            vocab,
            max_len,
        })
    }

    fn embed(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        tokens: &[usize],
        train: bool,
    ) -> Result<VarId, ShapeError> {
        if tokens.len() > self.max_len {
            return Err(ShapeError::new(
                "encode",
                format!("sentence length {} exceeds max {}", tokens.len(), self.max_len),
            ));
        }
        let emb = tape.gather_rows(pv.var(self.embedding), tokens)?;
        let scaled = tape.scale(emb, fmath::sqrt(self.config.d_model as f64));
        let pe_rows = Tensor::matrix(
            tokens.len(),
            self.config.d_model,
            self.pe.data()[..tokens.len() * self.config.d_model].to_vec(),
        )?;
        let pe_var = tape.input(pe_rows);
        let x = tape.add(scaled, pe_var)?;
        tape.dropout(x, if train { self.config.dropout } else { 0.0 })
    }

    /// Full encoder pass: embeddings + position encoding, then the layer
    /// stack. Returns the final full representation and per-layer records.
    pub fn encode(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        tokens: &[usize],
        train: bool,
    ) -> Result<EncodeOutput, ShapeError> {
        let d = self.config.d_model;
        let len = tokens.len();
        let x0 = self.embed(tape, pv, tokens, train)?;
        let dropout = if train { self.config.dropout } else { 0.0 };

        // State: previous / incremental split consumed by the next layer,
        // plus the current full representation.
        let mut prev = tape.zeros(vec![len, d]);
        let mut incr = x0;
        let mut full = x0;
        let mut records = Vec::with_capacity(self.layers.len());

        for (idx, layer) in self.layers.iter().enumerate() {
            let first = idx == 0;
            let parts = if first {
                // No previous content yet: the high path over the embeddings
                // is the whole layer, middle and low are zero.
                let high = layer.attn_block(tape, pv, &layer.high, incr, incr, dropout)?;
                let zero_a = tape.zeros(vec![len, d]);
                let zero_b = tape.zeros(vec![len, d]);
                let zero_l = tape.zeros(vec![len, d]);
                SplitParts {
                    high,
                    mid_a: zero_a,
                    mid_b: zero_b,
                    low: zero_l,
                }
            } else {
                layer.split_parts(tape, pv, prev, incr, train)?
            };

            let (fused, gate) = match layer.fusion {
                Fusion::Sum => {
                    let i_m = tape.add(parts.mid_a, parts.mid_b)?;
                    (sum_incremental(tape, parts.high, i_m, parts.low)?, None)
                }
                Fusion::WeightGate => {
                    let i_m = tape.add(parts.mid_a, parts.mid_b)?;
                    let (v, mean_w) =
                        weight_gate_incremental(tape, parts.high, i_m, parts.low)?;
                    (
                        v,
                        Some(GateRecord {
                            layer: idx + 1,
                            mean_w,
                        }),
                    )
                }
                Fusion::SelfGate => {
                    let gate = layer.self_gate.as_ref().expect("self-gate params");
                    (
                        self_gate_incremental(
                            tape,
                            pv,
                            gate,
                            parts.low,
                            parts.mid_a,
                            parts.mid_b,
                            parts.high,
                        )?,
                        None,
                    )
                }
            };

            let ffn_out = layer.ffn.forward(tape, pv, fused)?;
            let ffn_out = tape.dropout(ffn_out, dropout)?;
            let ffn_res = tape.add(fused, ffn_out)?;
            let incr_out = layer.ffn_norm.forward(tape, pv, ffn_res)?;

            let (new_full, incremental) = if first {
                // The first layer replaces the embedding representation; its
                // incremental part is the difference from the input full.
                let inc = tape.sub(incr_out, full)?;
                (incr_out, inc)
            } else {
                (tape.add(full, incr_out)?, incr_out)
            };

            records.push(LayerRecord {
                previous: full,
                incremental,
                full: new_full,
                gate,
            });
            prev = full;
            incr = incremental;
            full = new_full;
        }

        Ok(EncodeOutput {
            final_full: full,
            records,
        })
    }

    /// Exact parameter count implied by the configuration.
    pub fn expected_param_count(cfg: &EncoderConfig, vocab: usize) -> usize {
        let d = cfg.d_model;
        let da = cfg.d_attn();
        let proj = d * da; // bias-free q/k/v projection
        let wo = da * d + d;
        let attn_parts = if cfg.shared_qkv {
            3 * proj + 3 * wo
        } else {
            3 * (3 * proj + wo)
        };
        let norms = 4 * 2 * d; // high, mid_a, mid_b, low
        let low = d * d + d;
        let ffn = d * cfg.ffn_dim + cfg.ffn_dim + cfg.ffn_dim * d + d;
        let ffn_norm = 2 * d;
        let gate = if matches!(cfg.fusion, Fusion::SelfGate) {
            3 * d * d
        } else {
            0
        };
        vocab * d + cfg.layers * (attn_parts + norms + low + ffn + ffn_norm + gate)
    }

    pub fn param_count(&self) -> usize {
        let emb = self.vocab * self.config.d_model;
        emb + self
            .layers
            .iter()
            .map(|l| l.own_param_count(&self.config))
            .sum::<usize>()
    }
}

#[derive(Debug, Clone)]
struct BaselineLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ffn: FeedForward,
    norm2: LayerNorm,
}

/// Standard post-norm Transformer encoder.
#[derive(Debug, Clone)]
pub struct BaselineEncoder {
    pub config: EncoderConfig,
    pub embedding: ParamId,
    pub pe: Tensor,
    layers: Vec<BaselineLayer>,
    pub vocab: usize,
    pub max_len: usize,
}

impl BaselineEncoder {
    pub fn init(
        params: &mut Params,
        rng: &mut SplitMix64,
        cfg: EncoderConfig,
        vocab: usize,
        max_len: usize,
    ) -> Result<Self, ShapeError> {
        cfg.validate()?;
        let d = cfg.d_model;
        let emb_data = (0..vocab * d)
            .map(|_| rng.normal(0.0, 1.0 / fmath::sqrt(d as f64)))
            .collect();
        let embedding = params.add("enc.emb", Tensor::matrix(vocab, d, emb_data)?);
        let layers = (0..cfg.layers)
            .map(|i| {
                let name = format!("enc.l{i}");
                BaselineLayer {
                    attn: MultiHeadAttention::init(
                        params,
                        rng,
                        &format!("{name}.attn"),
                        d,
                        d,
                        cfg.heads,
                    ),
                    norm1: LayerNorm::init(params, &format!("{name}.norm1"), d),
                    ffn: FeedForward::init(params, rng, &format!("{name}.ffn"), d, cfg.ffn_dim),
                    norm2: LayerNorm::init(params, &format!("{name}.norm2"), d),
                }
            })
            .collect();
        let pe = positional_encoding(cfg.position, max_len, d, cfg.seed);
        Ok(BaselineEncoder {
            config: cfg,
            embedding,
            pe,
            layers,
            vocab,
            max_len,
        })
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        tokens: &[usize],
        train: bool,
    ) -> Result<VarId, ShapeError> {
        if tokens.len() > self.max_len {
            return Err(ShapeError::new(
                "encode",
                format!("sentence length {} exceeds max {}", tokens.len(), self.max_len),
            ));
        }
        let d = self.config.d_model;
        let dropout = if train { self.config.dropout } else { 0.0 };
        let emb = tape.gather_rows(pv.var(self.embedding), tokens)?;
        let scaled = tape.scale(emb, fmath::sqrt(d as f64));
        let pe_rows = Tensor::matrix(
            tokens.len(),
            d,
            self.pe.data()[..tokens.len() * d].to_vec(),
        )?;
        let pe_var = tape.input(pe_rows);
        let mut x = tape.add(scaled, pe_var)?;
        x = tape.dropout(x, dropout)?;
        for layer in &self.layers {
            let a = layer.attn.forward(tape, pv, x, x, x, None)?;
            let a = tape.dropout(a, dropout)?;
            let res = tape.add(x, a)?;
            x = layer.norm1.forward(tape, pv, res)?;
            let f = layer.ffn.forward(tape, pv, x)?;
            let f = tape.dropout(f, dropout)?;
            let res2 = tape.add(x, f)?;
            x = layer.norm2.forward(tape, pv, res2)?;
        }
        Ok(x)
    }

    pub fn param_count(&self) -> usize {
        let d = self.config.d_model;
        self.vocab * d
            + self
                .layers
                .iter()
                .map(|l| {
                    l.attn.own_param_count(false)
                        + l.norm1.param_count()
                        + l.ffn.param_count()
                        + l.norm2.param_count()
                })
                .sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rel_error;

    fn small_cfg(fusion: Fusion) -> EncoderConfig {
        EncoderConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            ffn_dim: 16,
            fusion,
            half_dim: false,
            shared_qkv: false,
            position: PositionKind::Sinusoidal,
            dropout: 0.0,
            seed: 11,
        }
    }

    fn rand_tensor(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn build_gt(cfg: EncoderConfig, vocab: usize) -> (Params, GraphTransformerEncoder) {
        let mut params = Params::new();
        let mut rng = SplitMix64::new(cfg.seed);
        let enc = GraphTransformerEncoder::init(&mut params, &mut rng, cfg, vocab, 16).unwrap();
        (params, enc)
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_cfg(Fusion::Sum);
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg(Fusion::Sum);
        cfg.half_dim = true;
        cfg.d_model = 12;
        cfg.heads = 4;
        assert!(cfg.validate().is_err());
        assert!(small_cfg(Fusion::Sum).validate().is_ok());
    }

    #[test]
    fn split_parts_with_zero_previous() {
        let (params, enc) = build_gt(small_cfg(Fusion::Sum), 6);
        let layer = &enc.layers[1];
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let mut rng = SplitMix64::new(3);
        let incr_t = rand_tensor(&mut rng, vec![3, 8]);
        let prev = tape.zeros(vec![3, 8]);
        let incr = tape.input(incr_t.clone());
        let parts = layer.split_parts(&mut tape, &pv, prev, incr, false).unwrap();

        // mid_a attends over zero values: its attention output is exactly the
        // output-projection bias, so the part reduces to norm(incr + bias).
        let bias = params.tensor(layer.mid_a.mha.wo.b.unwrap()).data().to_vec();
        let mut tape2 = Tape::new();
        let pv2 = params.bind(&mut tape2);
        let incr2 = tape2.input(incr_t.clone());
        let b = tape2.input(Tensor::vector(bias));
        let shifted = tape2.add_bias(incr2, b).unwrap();
        let expect = layer.mid_a.norm.forward(&mut tape2, &pv2, shifted).unwrap();
        assert!(
            rel_error(
                tape.value(parts.mid_a).data(),
                tape2.value(expect).data()
            ) < 1e-12
        );

        // The low path sees linear(0) = bias broadcast before its residual
        // and norm, so every row of the part is identical.
        let low_rows = tape.value(parts.low);
        for t in 1..3 {
            assert_eq!(low_rows.row(0), low_rows.row(t));
        }

        // The high path is plain self-attention over the incremental input.
        let mut tape3 = Tape::new();
        let pv3 = params.bind(&mut tape3);
        let incr3 = tape3.input(incr_t);
        let h = layer
            .attn_block(&mut tape3, &pv3, &layer.high, incr3, incr3, 0.0)
            .unwrap();
        assert_eq!(tape.value(parts.high).data(), tape3.value(h).data());
    }

    #[test]
    fn split_parts_with_zero_incremental() {
        let (params, enc) = build_gt(small_cfg(Fusion::Sum), 6);
        let layer = &enc.layers[1];
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let mut rng = SplitMix64::new(5);
        let prev = tape.input(rand_tensor(&mut rng, vec![4, 8]));
        let incr = tape.zeros(vec![4, 8]);
        let parts = layer.split_parts(&mut tape, &pv, prev, incr, false).unwrap();
        // Zero queries over zero keys/values: uniform softmax applied to zero
        // values plus the zero residual, so all rows of the high part agree.
        let h = tape.value(parts.high);
        for t in 1..4 {
            assert_eq!(h.row(0), h.row(t));
        }
    }

    #[test]
    fn four_part_score_decomposition() {
        // With shared q/k projections the pre-softmax score matrix over
        // full = prev + incr equals the sum of the four block score matrices.
        let mut rng = SplitMix64::new(9);
        for _ in 0..5 {
            let d = 8;
            let wq = rand_tensor(&mut rng, vec![d, d]);
            let wk = rand_tensor(&mut rng, vec![d, d]);
            let prev = rand_tensor(&mut rng, vec![5, d]);
            let incr = rand_tensor(&mut rng, vec![5, d]);
            let mut tape = Tape::new();
            let (wqv, wkv) = (tape.input(wq), tape.input(wk));
            let (p, i) = (tape.input(prev), tape.input(incr));
            let full = tape.add(p, i).unwrap();
            let score = |t: &mut Tape, a: VarId, b: VarId| {
                let q = t.matmul(a, wqv).unwrap();
                let k = t.matmul(b, wkv).unwrap();
                let kt = t.transpose(k);
                t.matmul(q, kt).unwrap()
            };
            let s_full = score(&mut tape, full, full);
            let s_pp = score(&mut tape, p, p);
            let s_pi = score(&mut tape, p, i);
            let s_ip = score(&mut tape, i, p);
            let s_ii = score(&mut tape, i, i);
            let s1 = tape.add(s_pp, s_pi).unwrap();
            let s2 = tape.add(s1, s_ip).unwrap();
            let sum = tape.add(s2, s_ii).unwrap();
            let err = rel_error(tape.value(s_full).data(), tape.value(sum).data());
            assert!(err < 1e-10, "err {err}");
        }
    }

    #[test]
    fn fuse_sum_zero_parts_keep_previous() {
        let mut tape = Tape::new();
        let mut rng = SplitMix64::new(2);
        let prev_t = rand_tensor(&mut rng, vec![3, 4]);
        let prev = tape.input(prev_t.clone());
        let z1 = tape.zeros(vec![3, 4]);
        let z2 = tape.zeros(vec![3, 4]);
        let z3 = tape.zeros(vec![3, 4]);
        let full = fuse_sum(&mut tape, z1, z2, z3, prev).unwrap();
        assert_eq!(tape.value(full).data(), prev_t.data());
    }

    #[test]
    fn fuse_sum_matches_elementwise_oracle_and_is_linear() {
        let mut rng = SplitMix64::new(4);
        let h = rand_tensor(&mut rng, vec![2, 3]);
        let m = rand_tensor(&mut rng, vec![2, 3]);
        let l = rand_tensor(&mut rng, vec![2, 3]);
        let p = rand_tensor(&mut rng, vec![2, 3]);
        let mut tape = Tape::new();
        let (hv, mv, lv, pv) = (
            tape.input(h.clone()),
            tape.input(m.clone()),
            tape.input(l.clone()),
            tape.input(p.clone()),
        );
        let full = fuse_sum(&mut tape, hv, mv, lv, pv).unwrap();
        for (idx, &got) in tape.value(full).data().iter().enumerate() {
            let want = h.data()[idx] + m.data()[idx] + l.data()[idx] + p.data()[idx];
            assert!((got - want).abs() < 1e-15);
        }
        // Linearity in the high argument: doubling i_h adds exactly i_h.
        let h2 = tape.add(hv, hv).unwrap();
        let full2 = fuse_sum(&mut tape, h2, mv, lv, pv).unwrap();
        for (idx, &got) in tape.value(full2).data().iter().enumerate() {
            let want = tape.value(full).data()[idx] + h.data()[idx];
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn weight_gate_zero_parts() {
        let mut tape = Tape::new();
        let mut rng = SplitMix64::new(6);
        let prev_t = rand_tensor(&mut rng, vec![2, 4]);
        let prev = tape.input(prev_t.clone());
        let z1 = tape.zeros(vec![2, 4]);
        let z2 = tape.zeros(vec![2, 4]);
        let z3 = tape.zeros(vec![2, 4]);
        let (full, rec) = fuse_weight_gate(&mut tape, z1, z2, z3, prev, 1).unwrap();
        assert!((rec.mean_w - 0.5).abs() < 1e-15);
        assert_eq!(tape.value(full).data(), prev_t.data());
    }

    #[test]
    fn weight_gate_saturation() {
        // Pre-activations of +/-30 saturate the gate to 1/0 within 1e-9.
        let mut tape = Tape::new();
        let h = tape.fill(vec![1, 2], 10.0);
        let m = tape.fill(vec![1, 2], 10.0);
        let l = tape.fill(vec![1, 2], 10.0);
        let prev = tape.zeros(vec![1, 2]);
        let (full, rec) = fuse_weight_gate(&mut tape, h, m, l, prev, 1).unwrap();
        // w -> 1, incr -> i_h + i_m = 20.
        assert!(rec.mean_w > 1.0 - 1e-9);
        for &v in tape.value(full).data() {
            assert!((v - 20.0).abs() < 1e-9);
        }

        let mut tape = Tape::new();
        let h = tape.fill(vec![1, 2], -10.0);
        let m = tape.fill(vec![1, 2], -10.0);
        let l = tape.fill(vec![1, 2], -10.0);
        let prev = tape.zeros(vec![1, 2]);
        let (full, rec) = fuse_weight_gate(&mut tape, h, m, l, prev, 1).unwrap();
        // w -> 0, incr -> i_l = -10.
        assert!(rec.mean_w < 1e-9);
        for &v in tape.value(full).data() {
            assert!((v + 10.0).abs() < 1e-9);
        }
    }

    #[test]
    fn weight_gate_random_matches_formula() {
        let mut rng = SplitMix64::new(8);
        let h = rand_tensor(&mut rng, vec![3, 5]);
        let m = rand_tensor(&mut rng, vec![3, 5]);
        let l = rand_tensor(&mut rng, vec![3, 5]);
        let p = rand_tensor(&mut rng, vec![3, 5]);
        let mut tape = Tape::new();
        let (hv, mv, lv, prev) = (
            tape.input(h.clone()),
            tape.input(m.clone()),
            tape.input(l.clone()),
            tape.input(p.clone()),
        );
        let (full, _) = fuse_weight_gate(&mut tape, hv, mv, lv, prev, 1).unwrap();
        for idx in 0..15 {
            let w = crate::tensor::sigmoid_scalar(h.data()[idx] + m.data()[idx] + l.data()[idx]);
            let want =
                p.data()[idx] + (h.data()[idx] + m.data()[idx]) * w + l.data()[idx] * (1.0 - w);
            assert!((tape.value(full).data()[idx] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn self_gate_identical_parts_are_uniform() {
        let mut params = Params::new();
        let mut rng = SplitMix64::new(12);
        let gate = SelfGate::init(&mut params, &mut rng, "gate", 4);
        let part = rand_tensor(&mut rng, vec![2, 4]);
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let p1 = tape.input(part.clone());
        let p2 = tape.input(part.clone());
        let p3 = tape.input(part.clone());
        let p4 = tape.input(part.clone());
        let prev = tape.zeros(vec![2, 4]);
        let full = fuse_self_gate(&mut tape, &pv, &gate, p1, p2, p3, p4, prev).unwrap();
        // Four identical rows: uniform attention weights, each output row is
        // the value projection of the shared row; dividing by 4 and summing
        // the 4 rows recovers exactly that projected row.
        let wv = params.tensor(gate.wv.w);
        let mut expect = vec![0.0; 2 * 4];
        crate::tensor::matmul_nn(part.data(), wv.data(), 2, 4, 4, &mut expect);
        let got = tape.value(full).data();
        for (g, e) in got.iter().zip(expect.iter()) {
            assert!((g - e).abs() < 1e-10, "{got:?} vs {expect:?}");
        }

        // Scale consistency at the symmetric point: doubling all parts
        // doubles the output.
        let d1 = tape.scale(p1, 2.0);
        let d2 = tape.scale(p2, 2.0);
        let d3 = tape.scale(p3, 2.0);
        let d4 = tape.scale(p4, 2.0);
        let full2 = fuse_self_gate(&mut tape, &pv, &gate, d1, d2, d3, d4, prev).unwrap();
        for (g, e) in tape.value(full2).data().iter().zip(expect.iter()) {
            assert!((g - 2.0 * e).abs() < 1e-10);
        }
    }

    #[test]
    fn self_gate_random_matches_step_by_step_oracle() {
        let mut params = Params::new();
        let mut rng = SplitMix64::new(14);
        let d = 3;
        let gate = SelfGate::init(&mut params, &mut rng, "gate", d);
        let parts: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, vec![2, d])).collect();
        let prev = rand_tensor(&mut rng, vec![2, d]);
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let vars: Vec<VarId> = parts.iter().map(|t| tape.input(t.clone())).collect();
        let prev_v = tape.input(prev.clone());
        let full = fuse_self_gate(
            &mut tape, &pv, &gate, vars[0], vars[1], vars[2], vars[3], prev_v,
        )
        .unwrap();

        // Oracle with plain loops per token.
        let wq = params.tensor(gate.wq.w).data();
        let wk = params.tensor(gate.wk.w).data();
        let wv = params.tensor(gate.wv.w).data();
        let proj = |row: &[f64], w: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|j| (0..d).map(|i| row[i] * w[i * d + j]).sum())
                .collect()
        };
        for t in 0..2 {
            let rows: Vec<&[f64]> = parts.iter().map(|p| p.row(t)).collect();
            let q: Vec<Vec<f64>> = rows.iter().map(|r| proj(r, wq)).collect();
            let k: Vec<Vec<f64>> = rows.iter().map(|r| proj(r, wk)).collect();
            let v: Vec<Vec<f64>> = rows.iter().map(|r| proj(r, wv)).collect();
            let mut out = vec![0.0; d];
            for a in 0..4 {
                let scores: Vec<f64> = (0..4)
                    .map(|b| {
                        q[a].iter().zip(&k[b]).map(|(x, y)| x * y).sum::<f64>()
                            / (d as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
                let exps: Vec<f64> = scores.iter().map(|&s| (s - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..d {
                    let mut acc = 0.0;
                    for b in 0..4 {
                        acc += exps[b] / z * v[b][j];
                    }
                    out[j] += acc / 4.0;
                }
            }
            for j in 0..d {
                let want = prev.row(t)[j] + out[j];
                let got = tape.value(full).row(t)[j];
                assert!((got - want).abs() < 1e-10, "token {t} dim {j}");
            }
        }
    }

    #[test]
    fn encode_single_token_is_finite_for_all_fusions() {
        for fusion in [Fusion::Sum, Fusion::WeightGate, Fusion::SelfGate] {
            let (params, enc) = build_gt(small_cfg(fusion), 6);
            let mut tape = Tape::new();
            let pv = params.bind(&mut tape);
            let out = enc.encode(&mut tape, &pv, &[3], false).unwrap();
            assert_eq!(tape.value(out.final_full).shape(), &[1, 8]);
            assert!(tape.value(out.final_full).all_finite());
        }
    }

    #[test]
    fn encode_rejects_out_of_vocab() {
        let (params, enc) = build_gt(small_cfg(Fusion::Sum), 6);
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        assert!(enc.encode(&mut tape, &pv, &[6], false).is_err());
    }

    #[test]
    fn gate_records_exist_for_every_layer() {
        let (params, enc) = build_gt(small_cfg(Fusion::WeightGate), 6);
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let out = enc.encode(&mut tape, &pv, &[1, 2, 3, 4], false).unwrap();
        let gates = out.gate_records();
        assert_eq!(gates.len(), 2);
        assert_eq!(gates[0].layer, 1);
        assert_eq!(gates[1].layer, 2);
        for g in gates {
            assert!(g.mean_w > 0.0 && g.mean_w < 1.0);
        }
        // Sum fusion produces none.
        let (params, enc) = build_gt(small_cfg(Fusion::Sum), 6);
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let out = enc.encode(&mut tape, &pv, &[1, 2], false).unwrap();
        assert!(out.gate_records().is_empty());
    }

    #[test]
    fn previous_slot_is_bit_identical_to_prior_full() {
        let mut cfg = small_cfg(Fusion::WeightGate);
        cfg.layers = 4;
        let (params, enc) = build_gt(cfg, 6);
        let mut tape = Tape::new();
        let pv = params.bind(&mut tape);
        let out = enc.encode(&mut tape, &pv, &[0, 1, 2, 3, 4], false).unwrap();
        let reps = out.split_representations(&tape);
        for i in 1..reps.len() {
            assert_eq!(
                reps[i].previous.data(),
                reps[i - 1].full.data(),
                "layer {i}"
            );
        }
        // full = previous + incremental within rounding at every layer.
        for (i, r) in reps.iter().enumerate() {
            for j in 0..r.full.numel() {
                let want = r.previous.data()[j] + r.incremental.data()[j];
                assert!((r.full.data()[j] - want).abs() < 1e-6, "layer {i}");
            }
        }
    }

    #[test]
    fn param_counts_match_formula_and_variants_shrink() {
        let vocab = 10;
        let base_cfg = small_cfg(Fusion::Sum);
        let (params, enc) = build_gt(base_cfg.clone(), vocab);
        assert_eq!(params.total_len(), enc.param_count());
        assert_eq!(
            params.total_len(),
            GraphTransformerEncoder::expected_param_count(&base_cfg, vocab)
        );

        let mut half = base_cfg.clone();
        half.half_dim = true;
        let (p_half, _) = build_gt(half.clone(), vocab);
        assert_eq!(
            p_half.total_len(),
            GraphTransformerEncoder::expected_param_count(&half, vocab)
        );
        assert!(p_half.total_len() < params.total_len());

        let mut shared = base_cfg.clone();
        shared.shared_qkv = true;
        let (p_shared, _) = build_gt(shared.clone(), vocab);
        assert_eq!(
            p_shared.total_len(),
            GraphTransformerEncoder::expected_param_count(&shared, vocab)
        );
        assert!(p_shared.total_len() < params.total_len());

        let mut gated = base_cfg;
        gated.fusion = Fusion::SelfGate;
        let (p_gate, _) = build_gt(gated.clone(), vocab);
        assert_eq!(
            p_gate.total_len(),
            GraphTransformerEncoder::expected_param_count(&gated, vocab)
        );
        assert!(p_gate.total_len() > params.total_len());
    }

    #[test]
    fn one_layer_sum_fusion_reduces_to_baseline() {
        let mut cfg = small_cfg(Fusion::Sum);
        cfg.layers = 1;
        let vocab = 9;
        let (mut gt_params, gt) = build_gt(cfg.clone(), vocab);
        let mut base_params = Params::new();
        let mut rng = SplitMix64::new(99);
        let baseline =
            BaselineEncoder::init(&mut base_params, &mut rng, cfg, vocab, 16).unwrap();

        // Tie the graph encoder's first-layer high path and feed-forward to
        // the baseline layer's parameters.
        let tie = [
            ("enc.emb", "enc.emb"),
            ("enc.l0.attn.wq.w", "enc.l0.high.wq.w"),
            ("enc.l0.attn.wk.w", "enc.l0.high.wk.w"),
            ("enc.l0.attn.wv.w", "enc.l0.high.wv.w"),
            ("enc.l0.attn.wo.w", "enc.l0.high.wo.w"),
            ("enc.l0.attn.wo.b", "enc.l0.high.wo.b"),
            ("enc.l0.norm1.gain", "enc.l0.high_norm.gain"),
            ("enc.l0.norm1.bias", "enc.l0.high_norm.bias"),
            ("enc.l0.ffn.w1.w", "enc.l0.ffn.w1.w"),
            ("enc.l0.ffn.w1.b", "enc.l0.ffn.w1.b"),
            ("enc.l0.ffn.w2.w", "enc.l0.ffn.w2.w"),
            ("enc.l0.ffn.w2.b", "enc.l0.ffn.w2.b"),
            ("enc.l0.norm2.gain", "enc.l0.ffn_norm.gain"),
            ("enc.l0.norm2.bias", "enc.l0.ffn_norm.bias"),
        ];
        for (src, dst) in tie {
            let t = base_params
                .tensor(base_params.find(src).unwrap())
                .clone();
            let id = gt_params.find(dst).unwrap();
            *gt_params.tensor_mut(id) = t;
        }

        let mut rng = SplitMix64::new(500);
        for trial in 0..20 {
            let len = 1 + (rng.next_u64() % 7) as usize;
            let tokens: Vec<usize> = (0..len).map(|_| (rng.next_u64() % vocab as u64) as usize).collect();
            let mut t1 = Tape::new();
            let pv1 = gt_params.bind(&mut t1);
            let got = gt.encode(&mut t1, &pv1, &tokens, false).unwrap();
            let mut t2 = Tape::new();
            let pv2 = base_params.bind(&mut t2);
            let want = baseline.encode(&mut t2, &pv2, &tokens, false).unwrap();
            let err = rel_error(
                t1.value(got.final_full).data(),
                t2.value(want).data(),
            );
            assert!(err < 1e-6, "trial {trial}: err {err}");
        }
    }
}
