//! Neural building blocks on top of the tape: a named parameter store,
//! linear and layer-norm layers, scaled dot-product and multi-head attention,
//! the position-wise feed-forward block, positional encodings, and GRU/LSTM
//! cells.
//!
//! Conventions: activations are row vectors, so a linear layer computes
//! `x W + b` with `W: [d_in, d_out]`. Attention query/key/value projections
//! carry no bias (the pre-softmax score decomposition into previous and
//! incremental blocks is only additive for bias-free projections); output
//! projections and the low-order linear path do carry one.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Tape, VarId};
use crate::fmath;
use crate::rng::SplitMix64;
use crate::tensor::{ShapeError, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

/// Named parameter tensors, iterated in registration order everywhere
/// (updates, checkpoints) so runs are reproducible.
#[derive(Debug, Clone, Default)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Xavier-uniform weight matrix.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        rng: &mut SplitMix64,
        d_in: usize,
        d_out: usize,
    ) -> ParamId {
        let limit = fmath::sqrt(6.0 / (d_in + d_out) as f64);
        let data = (0..d_in * d_out)
            .map(|_| rng.uniform(-limit, limit))
            .collect();
        self.add(name, Tensor::matrix(d_in, d_out, data).unwrap())
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.add(name, Tensor::filled(vec![len], 1.0))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn total_len(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(self.tensors.iter())
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Insert every parameter into a tape, optionally overriding some ids
    /// with existing tape vars (used by the gradient checker).
    pub fn bind_with(&self, tape: &mut Tape, overrides: &[(ParamId, VarId)]) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| {
                overrides
                    .iter()
                    .find(|(p, _)| p.0 == i)
                    .map(|&(_, v)| v)
                    .unwrap_or_else(|| tape.input(t.clone()))
            })
            .collect();
        ParamVars { vars }
    }

    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        self.bind_with(tape, &[])
    }
}

/// Tape bindings of every parameter for one forward pass.
pub struct ParamVars {
    vars: Vec<VarId>,
}

impl ParamVars {
    pub fn var(&self, id: ParamId) -> VarId {
        self.vars[id.0]
    }
}

// ---- layers ----

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn init(
        params: &mut Params,
        rng: &mut SplitMix64,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = params.add_xavier(format!("{name}.w"), rng, d_in, d_out);
        let b = bias.then(|| params.add_zeros(format!("{name}.b"), vec![d_out]));
        Linear { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: VarId) -> Result<VarId, ShapeError> {
        let y = tape.matmul(x, pv.var(self.w))?;
        match self.b {
            Some(b) => tape.add_bias(y, pv.var(b)),
            None => Ok(y),
        }
    }

    pub fn param_count(&self) -> usize {
        self.d_in * self.d_out + if self.b.is_some() { self.d_out } else { 0 }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn init(params: &mut Params, name: &str, dim: usize) -> Self {
        let gain = params.add_ones(format!("{name}.gain"), dim);
        let bias = params.add_zeros(format!("{name}.bias"), vec![dim]);
        LayerNorm { gain, bias, dim }
    }

    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: VarId) -> Result<VarId, ShapeError> {
        tape.layer_norm(x, pv.var(self.gain), pv.var(self.bias), LAYER_NORM_EPS)
    }

    pub fn param_count(&self) -> usize {
        2 * self.dim
    }
}

/// Scaled dot-product attention: softmax(Q K^T / sqrt(d_k) + mask) V.
/// The mask, when present, is added to the score matrix pre-softmax
/// (0 to keep, about -1e30 to block).
pub fn attention(
    tape: &mut Tape,
    q: VarId,
    k: VarId,
    v: VarId,
    mask: Option<VarId>,
) -> Result<VarId, ShapeError> {
    let (_, d_k) = tape.value(q).dims2();
    let (lk, d_k2) = tape.value(k).dims2();
    if d_k != d_k2 {
        return Err(ShapeError::new(
            "attention",
            format!("query width {d_k} vs key width {d_k2}"),
        ));
    }
    let (lv, _) = tape.value(v).dims2();
    if lk != lv {
        return Err(ShapeError::new(
            "attention",
            format!("{lk} keys vs {lv} values"),
        ));
    }
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let mut scaled = tape.scale(scores, 1.0 / fmath::sqrt(d_k as f64));
    if let Some(m) = mask {
        scaled = tape.add(scaled, m)?;
    }
    let weights = tape.softmax_rows(scaled);
    tape.matmul(weights, v)
}

/// One q/k/v projection triple; shared across the three split-attention parts
/// in the shared-qkv variant.
#[derive(Debug, Clone)]
pub struct QkvProjections {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
}

impl QkvProjections {
    pub fn init(
        params: &mut Params,
        rng: &mut SplitMix64,
        name: &str,
        d_model: usize,
        d_attn: usize,
    ) -> Self {
        QkvProjections {
            wq: Linear::init(params, rng, &format!("{name}.wq"), d_model, d_attn, false),
            wk: Linear::init(params, rng, &format!("{name}.wk"), d_model, d_attn, false),
            wv: Linear::init(params, rng, &format!("{name}.wv"), d_model, d_attn, false),
        }
    }

    pub fn param_count(&self) -> usize {
        self.wq.param_count() + self.wk.param_count() + self.wv.param_count()
    }
}

/// Multi-head attention with bias-free q/k/v projections and a biased output
/// projection. `d_attn` is the internal attention width (the half-dim variant
/// sets it to d_model / 2).
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    pub d_model: usize,
    pub d_attn: usize,
}

impl MultiHeadAttention {
    pub fn init(
        params: &mut Params,
        rng: &mut SplitMix64,
        name: &str,
        d_model: usize,
        d_attn: usize,
        heads: usize,
    ) -> Self {
        assert!(d_attn % heads == 0, "attention width divisible by heads");
        let qkv = QkvProjections::init(params, rng, name, d_model, d_attn);
        let wo = Linear::init(params, rng, &format!("{name}.wo"), d_attn, d_model, true);
        MultiHeadAttention {
            wq: qkv.wq,
            wk: qkv.wk,
            wv: qkv.wv,
            wo,
            heads,
            d_model,
            d_attn,
        }
    }

    /// Same layer but reading q/k/v through a shared projection triple.
    pub fn init_shared(
        params: &mut Params,
        rng: &mut SplitMix64,
        name: &str,
        shared: &QkvProjections,
        heads: usize,
        d_model: usize,
        d_attn: usize,
    ) -> Self {
        assert!(d_attn % heads == 0);
        let wo = Linear::init(params, rng, &format!("{name}.wo"), d_attn, d_model, true);
        MultiHeadAttention {
            wq: shared.wq.clone(),
            wk: shared.wk.clone(),
            wv: shared.wv.clone(),
            wo,
            heads,
            d_model,
            d_attn,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        q_in: VarId,
        k_in: VarId,
        v_in: VarId,
        mask: Option<VarId>,
    ) -> Result<VarId, ShapeError> {
        let q = self.wq.forward(tape, pv, q_in)?;
        let k = self.wk.forward(tape, pv, k_in)?;
        let v = self.wv.forward(tape, pv, v_in)?;
        let head_dim = self.d_attn / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
            let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
            let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
            outs.push(attention(tape, qh, kh, vh, mask)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        self.wo.forward(tape, pv, cat)
    }

    /// Parameters owned by this layer alone (a shared q/k/v triple is counted
    /// by its owner, not here).
    pub fn own_param_count(&self, shared_qkv: bool) -> usize {
        let proj = if shared_qkv {
            0
        } else {
            self.wq.param_count() + self.wk.param_count() + self.wv.param_count()
        };
        proj + self.wo.param_count()
    }
}

/// Position-wise feed-forward block: w2(silu(w1 x + b1)) + b2.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn init(
        params: &mut Params,
        rng: &mut SplitMix64,
        name: &str,
        d_model: usize,
        d_ff: usize,
    ) -> Self {
        FeedForward {
            w1: Linear::init(params, rng, &format!("{name}.w1"), d_model, d_ff, true),
            w2: Linear::init(params, rng, &format!("{name}.w2"), d_ff, d_model, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, pv: &ParamVars, x: VarId) -> Result<VarId, ShapeError> {
        let h = self.w1.forward(tape, pv, x)?;
        let s = tape.sigmoid(h);
        let act = tape.mul(h, s)?;
        self.w2.forward(tape, pv, act)
    }

    pub fn param_count(&self) -> usize {
        self.w1.param_count() + self.w2.param_count()
    }
}

// ---- positional encodings ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionKind {
    Sinusoidal,
    None,
    Random,
}

impl PositionKind {
    pub fn name(self) -> &'static str {
        match self {
            PositionKind::Sinusoidal => "sinusoidal",
            PositionKind::None => "none",
            PositionKind::Random => "random",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sinusoidal" => Some(PositionKind::Sinusoidal),
            "none" => Some(PositionKind::None),
            "random" => Some(PositionKind::Random),
            _ => None,
        }
    }
}

/// Build the additive position table. `random` draws one uniform [0,1) table
/// from the seed and freezes it: the same (seed, len, dim) always yields the
/// same matrix.
pub fn positional_encoding(kind: PositionKind, max_len: usize, dim: usize, seed: u64) -> Tensor {
    let mut data = vec![0.0; max_len * dim];
    match kind {
        PositionKind::None => {}
        PositionKind::Sinusoidal => {
            for pos in 0..max_len {
                for j in 0..dim {
                    let i = (j / 2) as f64;
                    let angle = pos as f64 / fmath::powf(10000.0, 2.0 * i / dim as f64);
                    data[pos * dim + j] = if j % 2 == 0 {
                        fmath::sin(angle)
                    } else {
                        fmath::cos(angle)
                    };
                }
            }
        }
        PositionKind::Random => {
            let mut rng = SplitMix64::new(seed ^ 0x5052_4e44_5f50_45u64);
            for x in data.iter_mut() {
                *x = rng.next_f64();
            }
        }
    }
    Tensor::matrix(max_len, dim, data).unwrap()
}

// ---- recurrent cells ----

/// Gate parameter triple: W (input), U (state), b.
#[derive(Debug, Clone)]
pub struct GateParams {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

impl GateParams {
    fn init(params: &mut Params, rng: &mut SplitMix64, name: &str, dim: usize) -> Self {
        GateParams {
            w: params.add_xavier(format!("{name}.w"), rng, dim, dim),
            u: params.add_xavier(format!("{name}.u"), rng, dim, dim),
            b: params.add_zeros(format!("{name}.b"), vec![dim]),
        }
    }

    /// x W + h U + b for row vectors x, h.
    fn gate(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        x: VarId,
        h: VarId,
    ) -> Result<VarId, ShapeError> {
        let xw = tape.matmul(x, pv.var(self.w))?;
        let hu = tape.matmul(h, pv.var(self.u))?;
        let s = tape.add(xw, hu)?;
        tape.add_bias(s, pv.var(self.b))
    }
}

#[derive(Debug, Clone)]
pub struct GruCell {
    pub update: GateParams,
    pub reset: GateParams,
    pub candidate: GateParams,
    pub dim: usize,
}

impl GruCell {
    pub fn init(params: &mut Params, rng: &mut SplitMix64, name: &str, dim: usize) -> Self {
        GruCell {
            update: GateParams::init(params, rng, &format!("{name}.update"), dim),
            reset: GateParams::init(params, rng, &format!("{name}.reset"), dim),
            candidate: GateParams::init(params, rng, &format!("{name}.candidate"), dim),
            dim,
        }
    }

    /// One GRU step over row vectors [1, d]. The standard transition blends
    /// the previous state with the candidate tanh state; `mix_with_input`
    /// blends it with the lower-layer input instead.
    pub fn forward(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        h_below: VarId,
        h_prev: VarId,
        mix_with_input: bool,
    ) -> Result<VarId, ShapeError> {
        let z_pre = self.update.gate(tape, pv, h_below, h_prev)?;
        let z = tape.sigmoid(z_pre);
        let r_pre = self.reset.gate(tape, pv, h_below, h_prev)?;
        let r = tape.sigmoid(r_pre);
        let gated_state = tape.mul(r, h_prev)?;
        let cand_pre = self.candidate.gate(tape, pv, h_below, gated_state)?;
        let cand = tape.tanh(cand_pre);
        let ones = tape.fill(tape.value(z).shape().to_vec(), 1.0);
        let one_minus_z = tape.sub(ones, z)?;
        let keep = tape.mul(one_minus_z, h_prev)?;
        let new = if mix_with_input {
            tape.mul(z, h_below)?
        } else {
            tape.mul(z, cand)?
        };
        tape.add(keep, new)
    }
}

#[derive(Debug, Clone)]
pub struct LstmCell {
    pub input_gate: GateParams,
    pub forget_gate: GateParams,
    pub output_gate: GateParams,
    pub cell_update: GateParams,
    pub dim: usize,
}

impl LstmCell {
    pub fn init(params: &mut Params, rng: &mut SplitMix64, name: &str, dim: usize) -> Self {
        LstmCell {
            input_gate: GateParams::init(params, rng, &format!("{name}.input"), dim),
            forget_gate: GateParams::init(params, rng, &format!("{name}.forget"), dim),
            output_gate: GateParams::init(params, rng, &format!("{name}.output"), dim),
            cell_update: GateParams::init(params, rng, &format!("{name}.cell"), dim),
            dim,
        }
    }

    /// One LSTM step over row vectors [1, d]; returns (h, c).
    pub fn forward(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        h_below: VarId,
        h_prev: VarId,
        c_prev: VarId,
    ) -> Result<(VarId, VarId), ShapeError> {
        let i_pre = self.input_gate.gate(tape, pv, h_below, h_prev)?;
        let i = tape.sigmoid(i_pre);
        let f_pre = self.forget_gate.gate(tape, pv, h_below, h_prev)?;
        let f = tape.sigmoid(f_pre);
        let o_pre = self.output_gate.gate(tape, pv, h_below, h_prev)?;
        let o = tape.sigmoid(o_pre);
        let u_pre = self.cell_update.gate(tape, pv, h_below, h_prev)?;
        let u = tape.tanh(u_pre);
        let iu = tape.mul(i, u)?;
        let fc = tape.mul(f, c_prev)?;
        let c = tape.add(iu, fc)?;
        let tc = tape.tanh(c);
        let h = tape.mul(o, tc)?;
        Ok((h, c))
    }
}

/// Run one GRU step over plain vectors on a scratch tape.
pub fn gru_step(
    params: &Params,
    cell: &GruCell,
    h_below: &Tensor,
    h_prev: &Tensor,
    mix_with_input: bool,
) -> Result<Tensor, ShapeError> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape);
    let x = tape.input(as_row(h_below));
    let h = tape.input(as_row(h_prev));
    let out = cell.forward(&mut tape, &pv, x, h, mix_with_input)?;
    Ok(Tensor::vector(tape.value(out).data().to_vec()))
}

/// Run one LSTM step over plain vectors on a scratch tape.
pub fn lstm_step(
    params: &Params,
    cell: &LstmCell,
    h_below: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
) -> Result<(Tensor, Tensor), ShapeError> {
    let mut tape = Tape::new();
    let pv = params.bind(&mut tape);
    let x = tape.input(as_row(h_below));
    let h = tape.input(as_row(h_prev));
    let c = tape.input(as_row(c_prev));
    let (hv, cv) = cell.forward(&mut tape, &pv, x, h, c)?;
    Ok((
        Tensor::vector(tape.value(hv).data().to_vec()),
        Tensor::vector(tape.value(cv).data().to_vec()),
    ))
}

fn as_row(t: &Tensor) -> Tensor {
    let (m, n) = t.dims2();
    assert_eq!(m, 1, "expected a single row vector");
    Tensor::matrix(1, n, t.data().to_vec()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, DEFAULT_GRAD_STEP};
    use crate::tensor::sigmoid_scalar;

    fn rand_tensor(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn attention_single_position_passes_value_through() {
        let mut tape = Tape::new();
        let q = tape.input(Tensor::matrix(1, 3, vec![0.3, -0.4, 2.0]).unwrap());
        let k = tape.input(Tensor::matrix(1, 3, vec![1.0, 0.0, -1.0]).unwrap());
        let v = tape.input(Tensor::matrix(1, 3, vec![5.0, 6.0, 7.0]).unwrap());
        let out = attention(&mut tape, q, k, v, None).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 7.0]);
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut tape = Tape::new();
        let q = tape.input(Tensor::matrix(1, 2, vec![0.9, -1.3]).unwrap());
        let k = tape.input(Tensor::matrix(2, 2, vec![0.5, 0.25, 0.5, 0.25]).unwrap());
        let v = tape.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 5.0, 8.0]).unwrap());
        let out = attention(&mut tape, q, k, v, None).unwrap();
        let got = tape.value(out).data();
        assert!((got[0] - 3.0).abs() < 1e-12);
        assert!((got[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn attention_two_by_two_matches_hand_computation() {
        let mut tape = Tape::new();
        let q = tape.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let k = tape.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = tape.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let out = attention(&mut tape, q, k, v, None).unwrap();
        // Scores are I / sqrt(2); each softmax row is [e^s, 1] normalized.
        let s = 1.0 / 2.0f64.sqrt();
        let w = s.exp() / (s.exp() + 1.0);
        let expect = [
            w * 1.0 + (1.0 - w) * 3.0,
            w * 2.0 + (1.0 - w) * 4.0,
            (1.0 - w) * 1.0 + w * 3.0,
            (1.0 - w) * 2.0 + w * 4.0,
        ];
        let got = tape.value(out).data();
        for (g, e) in got.iter().zip(expect.iter()) {
            assert!((g - e).abs() < 1e-10, "{got:?} vs {expect:?}");
        }
    }

    #[test]
    fn causal_mask_blocks_later_positions() {
        let mut tape = Tape::new();
        let mut rng = SplitMix64::new(3);
        let q = tape.input(rand_tensor(&mut rng, vec![3, 2]));
        let k = tape.input(rand_tensor(&mut rng, vec![3, 2]));
        let v = tape.input(rand_tensor(&mut rng, vec![3, 2]));
        let mut mask = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            for j in (i + 1)..3 {
                mask.data_mut()[i * 3 + j] = -1e30;
            }
        }
        let m = tape.input(mask);
        let out = attention(&mut tape, q, k, v, Some(m)).unwrap();
        // Row 0 attends only to position 0.
        let got = tape.value(out).row(0).to_vec();
        let v0 = tape.value(v).row(0).to_vec();
        for (g, e) in got.iter().zip(v0.iter()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn mha_shapes_and_grad() {
        let mut params = Params::new();
        let mut rng = SplitMix64::new(5);
        let mha = MultiHeadAttention::init(&mut params, &mut rng, "attn", 8, 8, 2);
        let x = rand_tensor(&mut rng, vec![4, 8]);
        {
            let mut tape = Tape::new();
            let pv = params.bind(&mut tape);
            let xv = tape.input(x.clone());
            let out = mha.forward(&mut tape, &pv, xv, xv, xv, None).unwrap();
            assert_eq!(tape.value(out).shape(), &[4, 8]);
        }
        let params_ref = &params;
        let mha_ref = &mha;
        let f = move |t: &mut Tape, v: VarId| {
            let pv = params_ref.bind(t);
            let o = mha_ref.forward(t, &pv, v, v, v, None)?;
            let sq = t.mul(o, o)?;
            Ok(t.sum(sq))
        };
        let rep = grad_check(&f, &x, DEFAULT_GRAD_STEP).unwrap();
        assert!(rep.max_rel_error < 1e-4, "rel {}", rep.max_rel_error);
    }

    #[test]
    fn positional_encoding_none_is_zero() {
        let pe = positional_encoding(PositionKind::None, 4, 6, 0);
        assert!(pe.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn positional_encoding_sinusoidal_position_zero() {
        let pe = positional_encoding(PositionKind::Sinusoidal, 3, 8, 0);
        let row0 = pe.row(0);
        for (j, &x) in row0.iter().enumerate() {
            let expect = if j % 2 == 0 { 0.0 } else { 1.0 };
            assert!((x - expect).abs() < 1e-15);
        }
        // Later positions are not degenerate.
        assert!(pe.row(1).iter().any(|&x| x != 0.0 && x != 1.0));
    }

    #[test]
    fn positional_encoding_random_is_seed_deterministic() {
        let a = positional_encoding(PositionKind::Random, 5, 4, 9);
        let b = positional_encoding(PositionKind::Random, 5, 4, 9);
        let c = positional_encoding(PositionKind::Random, 5, 4, 10);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
        assert!(a.data().iter().all(|&x| (0.0..1.0).contains(&x)));
    }

    fn zeroed_gru(dim: usize) -> (Params, GruCell) {
        let mut params = Params::new();
        let mut rng = SplitMix64::new(1);
        let cell = GruCell::init(&mut params, &mut rng, "gru", dim);
        for i in 0..params.len() {
            let id = ParamId(i);
            params.tensor_mut(id).data_mut().fill(0.0);
        }
        (params, cell)
    }

    #[test]
    fn gru_zero_params_input_mix() {
        let (params, cell) = zeroed_gru(1);
        let h = gru_step(
            &params,
            &cell,
            &Tensor::vector(vec![0.0]),
            &Tensor::vector(vec![1.0]),
            true,
        )
        .unwrap();
        // z = sigmoid(0) = 0.5; h = 0.5*1 + 0.5*0 = 0.5
        assert!((h.data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gru_zero_params_standard_form() {
        let (params, cell) = zeroed_gru(2);
        let h = gru_step(
            &params,
            &cell,
            &Tensor::vector(vec![0.3, -0.7]),
            &Tensor::vector(vec![0.8, 0.4]),
            false,
        )
        .unwrap();
        // candidate = tanh(0) = 0, so h = 0.5 * h_prev
        assert!((h.data()[0] - 0.4).abs() < 1e-15);
        assert!((h.data()[1] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn gru_random_case_matches_elementwise_oracle() {
        let mut params = Params::new();
        let mut rng = SplitMix64::new(17);
        let d = 4;
        let cell = GruCell::init(&mut params, &mut rng, "gru", d);
        let x = rand_tensor(&mut rng, vec![d]);
        let hp = rand_tensor(&mut rng, vec![d]);
        for mix_with_input in [false, true] {
            let got = gru_step(&params, &cell, &x, &hp, mix_with_input).unwrap();

            // Oracle: plain loops over the same row-vector convention.
            let gate = |g: &GateParams| -> Vec<f64> {
                let w = params.tensor(g.w).data();
                let u = params.tensor(g.u).data();
                let b = params.tensor(g.b).data();
                (0..d)
                    .map(|j| {
                        let mut s = b[j];
                        for i in 0..d {
                            s += x.data()[i] * w[i * d + j] + hp.data()[i] * u[i * d + j];
                        }
                        s
                    })
                    .collect()
            };
            let z: Vec<f64> = gate(&cell.update).iter().map(|&s| sigmoid_scalar(s)).collect();
            let r: Vec<f64> = gate(&cell.reset).iter().map(|&s| sigmoid_scalar(s)).collect();
            let cand: Vec<f64> = {
                let w = params.tensor(cell.candidate.w).data();
                let u = params.tensor(cell.candidate.u).data();
                let b = params.tensor(cell.candidate.b).data();
                (0..d)
                    .map(|j| {
                        let mut s = b[j];
                        for i in 0..d {
                            s += x.data()[i] * w[i * d + j] + r[i] * hp.data()[i] * u[i * d + j];
                        }
                        s.tanh()
                    })
                    .collect()
            };
            for j in 0..d {
                let mixed = if mix_with_input { x.data()[j] } else { cand[j] };
                let expect = (1.0 - z[j]) * hp.data()[j] + z[j] * mixed;
                assert!(
                    (got.data()[j] - expect).abs() < 1e-12,
                    "mix_with_input {mix_with_input} j {j}"
                );
            }
        }
    }

    #[test]
    fn lstm_zero_params_zero_cell() {
        let mut params = Params::new();
        let mut rng = SplitMix64::new(1);
        let cell = LstmCell::init(&mut params, &mut rng, "lstm", 2);
        for i in 0..params.len() {
            params.tensor_mut(ParamId(i)).data_mut().fill(0.0);
        }
        let (h, c) = lstm_step(
            &params,
            &cell,
            &Tensor::vector(vec![0.5, -0.5]),
            &Tensor::vector(vec![0.1, 0.2]),
            &Tensor::vector(vec![0.0, 0.0]),
        )
        .unwrap();
        assert!(c.data().iter().all(|&v| v.abs() < 1e-15));
        assert!(h.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn lstm_saturated_forget_carries_cell() {
        let mut params = Params::new();
        let mut rng = SplitMix64::new(2);
        let cell = LstmCell::init(&mut params, &mut rng, "lstm", 2);
        for i in 0..params.len() {
            params.tensor_mut(ParamId(i)).data_mut().fill(0.0);
        }
        // Saturate the forget gate open and the input gate shut.
        params.tensor_mut(cell.forget_gate.b).data_mut().fill(40.0);
        params.tensor_mut(cell.input_gate.b).data_mut().fill(-40.0);
        let c_prev = Tensor::vector(vec![0.7, -1.1]);
        let (_, c) = lstm_step(
            &params,
            &cell,
            &Tensor::vector(vec![0.5, -0.5]),
            &Tensor::vector(vec![0.1, 0.2]),
            &c_prev,
        )
        .unwrap();
        for (got, want) in c.data().iter().zip(c_prev.data()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_random_case_matches_oracle() {
        let mut params = Params::new();
        let mut rng = SplitMix64::new(23);
        let d = 3;
        let cell = LstmCell::init(&mut params, &mut rng, "lstm", d);
        let x = rand_tensor(&mut rng, vec![d]);
        let hp = rand_tensor(&mut rng, vec![d]);
        let cp = rand_tensor(&mut rng, vec![d]);
        let (h, c) = lstm_step(&params, &cell, &x, &hp, &cp).unwrap();
        let gate = |g: &GateParams| -> Vec<f64> {
            let w = params.tensor(g.w).data();
            let u = params.tensor(g.u).data();
            let b = params.tensor(g.b).data();
            (0..d)
                .map(|j| {
                    let mut s = b[j];
                    for i in 0..d {
                        s += x.data()[i] * w[i * d + j] + hp.data()[i] * u[i * d + j];
                    }
                    s
                })
                .collect()
        };
        let i: Vec<f64> = gate(&cell.input_gate).iter().map(|&s| sigmoid_scalar(s)).collect();
        let f: Vec<f64> = gate(&cell.forget_gate).iter().map(|&s| sigmoid_scalar(s)).collect();
        let o: Vec<f64> = gate(&cell.output_gate).iter().map(|&s| sigmoid_scalar(s)).collect();
        let u: Vec<f64> = gate(&cell.cell_update).iter().map(|&s| s.tanh()).collect();
        for j in 0..d {
            let ce = i[j] * u[j] + f[j] * cp.data()[j];
            let he = o[j] * ce.tanh();
            assert!((c.data()[j] - ce).abs() < 1e-12);
            assert!((h.data()[j] - he).abs() < 1e-12);
        }
    }

    #[test]
    fn recurrent_cells_pass_grad_check() {
        for seed in 0..5u64 {
            let mut params = Params::new();
            let mut rng = SplitMix64::new(40 + seed);
            let d = 3;
            let gru = GruCell::init(&mut params, &mut rng, "gru", d);
            let lstm = LstmCell::init(&mut params, &mut rng, "lstm", d);
            let x = rand_tensor(&mut rng, vec![1, d]);
            let params_ref = &params;
            let gru_ref = &gru;
            let lstm_ref = &lstm;
            let f = move |t: &mut Tape, v: VarId| {
                let pv = params_ref.bind(t);
                let h0 = t.fill(vec![1, d], 0.2);
                let c0 = t.fill(vec![1, d], -0.1);
                let h1 = gru_ref.forward(t, &pv, v, h0, false)?;
                let (h2, _c) = lstm_ref.forward(t, &pv, v, h1, c0)?;
                let sq = t.mul(h2, h2)?;
                Ok(t.sum(sq))
            };
            let rep = grad_check(&f, &x, DEFAULT_GRAD_STEP).unwrap();
            assert!(rep.max_rel_error < 1e-4, "seed {seed}: {}", rep.max_rel_error);
        }
    }
}
