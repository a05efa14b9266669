//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Forward ops append their result tensor plus a backward closure; replaying
//! the closures in reverse accumulates gradients by the chain rule. A tape is
//! built per forward pass (define-by-run) and dropped after `backward`.
//!
//! Execution is single-threaded and deterministic: the dropout masks come
//! from the tape's own seeded generator, and gradient accumulation order is
//! fixed by tape order.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::fmath;
use crate::rng::SplitMix64;
use crate::tensor::{
    matmul_nn, matmul_nt, matmul_tn, same_shape, softmax_rows_raw, Precision, ShapeError, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

/// Per-variable gradient store produced by [`Tape::backward`].
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    fn new(n: usize) -> Self {
        Grads {
            slots: (0..n).map(|_| None).collect(),
        }
    }

    pub fn get(&self, v: VarId) -> Option<&[f64]> {
        self.slots[v.0].as_deref()
    }

    fn take(&mut self, v: VarId) -> Option<Vec<f64>> {
        self.slots[v.0].take()
    }

    fn acc(&mut self, v: VarId, contrib: &[f64]) {
        match &mut self.slots[v.0] {
            Some(g) => {
                for (gi, &c) in g.iter_mut().zip(contrib.iter()) {
                    *gi += c;
                }
            }
            None => self.slots[v.0] = Some(contrib.to_vec()),
        }
    }

    fn acc_owned(&mut self, v: VarId, contrib: Vec<f64>) {
        match &mut self.slots[v.0] {
            Some(g) => {
                for (gi, c) in g.iter_mut().zip(contrib.into_iter()) {
                    *gi += c;
                }
            }
            None => self.slots[v.0] = Some(contrib),
        }
    }
}

type BackFn = Box<dyn Fn(&[Tensor], &mut Grads)>;

/// Records primitive ops during a forward pass and replays them backward.
pub struct Tape {
    values: Vec<Tensor>,
    backward_ops: Vec<Option<BackFn>>,
    precision: Precision,
    rng: SplitMix64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            backward_ops: Vec::new(),
            precision: Precision::F64,
            rng: SplitMix64::new(0),
        }
    }

    pub fn with_precision(precision: Precision) -> Self {
        let mut t = Tape::new();
        t.precision = precision;
        t
    }

    /// Seed for dropout mask draws.
    pub fn seed(&mut self, seed: u64) {
        self.rng = SplitMix64::new(seed);
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.values[v.0]
    }

    fn push(&mut self, mut t: Tensor, back: Option<BackFn>) -> VarId {
        self.precision.quantize(t.data_mut());
        self.values.push(t);
        self.backward_ops.push(back);
        VarId(self.values.len() - 1)
    }

    /// Insert a leaf (input, parameter, or constant).
    pub fn input(&mut self, t: Tensor) -> VarId {
        self.push(t, None)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> VarId {
        self.input(Tensor::zeros(shape))
    }

    pub fn fill(&mut self, shape: Vec<usize>, v: f64) -> VarId {
        self.input(Tensor::filled(shape, v))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, ShapeError> {
        same_shape("add", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let v = self.push(t, None);
        self.backward_ops[v.0] = Some(Box::new(move |_vals, grads| {
            if let Some(g) = grads.take(v) {
                grads.acc(a, &g);
                grads.acc_owned(b, g);
            }
        }));
        Ok(v)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, ShapeError> {
        same_shape("sub", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let v = self.push(t, None);
        self.backward_ops[v.0] = Some(Box::new(move |_vals, grads| {
            if let Some(g) = grads.take(v) {
                grads.acc(a, &g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                grads.acc_owned(b, neg);
            }
        }));
        Ok(v)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, ShapeError> {
        same_shape("mul", self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let v = self.push(t, None);
        self.backward_ops[v.0] = Some(Box::new(move |vals, grads| {
            if let Some(g) = grads.take(v) {
                let bd = vals[b.0].data();
                let ad = vals[a.0].data();
                let ga: Vec<f64> = g.iter().zip(bd).map(|(gi, bv)| gi * bv).collect();
                let gb: Vec<f64> = g.iter().zip(ad).map(|(gi, av)| gi * av).collect();
                grads.acc_owned(a, ga);
                grads.acc_owned(b, gb);
            }
        }));
        Ok(v)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let v = self.push(t, None);
        self.backward_ops[v.0] = Some(Box::new(move |_vals, grads| {
            if let Some(g) = grads.take(v) {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                grads.acc_owned(a, ga);
            }
        }));
        v
    }

    /// Broadcast-add a rank-1 bias over every row of `x`.
    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId, ShapeError> {
        let (m, n) = self.value(x).dims2();
        if self.value(bias).shape() != [n] {
            return Err(ShapeError::new(
                "add_bias",
                format!(
                    "bias shape {:?} does not match row width {n}",
                    self.value(bias).shape()
                ),
            ));
        }
        let bd = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            for (d, &bv) in data[i * n..(i + 1) * n].iter_mut().zip(bd.iter()) {
                *d += bv;
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        let v = self.push(t, None);
        self.backward_ops[v.0] = Some(Box::new(move |_vals, grads| {
            if let Some(g) = grads.take(v) {
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    for (b, &gi) in gb.iter_mut().zip(g[i * n..(i + 1) * n].iter()) {
                        *b += gi;
                    }
                }
                grads.acc_owned(bias, gb);
                grads.acc_owned(x, g);
            }
        }));
        Ok(v)
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, ShapeError> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(ShapeError::new(
                "matmul",
                format!(
                    "inner dimensions disagree: {:?} x {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out).unwrap();
        let v = self.push(t, None);
        self.backward_ops[v.0] = Some(Box::new(move |vals, grads| {
            if let Some(g) = grads.take(v) {
                let mut ga = vec![0.0; m * k];
                matmul_nt(&g, vals[b.0].data(), m, n, k, &mut ga);
                let mut gb = vec![0.0; k * n];
                matmul_tn(vals[a.0].data(), &g, m, k, n, &mut gb);
                grads.acc_owned(a, ga);
                grads.acc_owned(b, gb);
            }
        }));
        Ok(v)
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let (m, n) = self.value(a).dims2();
        let ad = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = ad[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], out).unwrap();
        let v = self.push(t, None);
        self.backward_ops[v.0] = Some(Box::new(move |_vals, grads| {
            if let Some(g) = grads.take(v) {
                let mut ga = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                grads.acc_owned(a, ga);
            }
        }));
        v
    }

    // ---- activations ----

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| crate::tensor::sigmoid_scalar(x))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let v = self.push(t, None);
        self.backward_ops[v.0] = Some(Box::new(move |vals, grads| {
            if let Some(g) = grads.take(v) {
                let s = vals[v.0].data();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(s.iter())
                    .map(|(gi, &sv)| gi * sv * (1.0 - sv))
                    .collect();
                grads.acc_owned(a, ga);
            }
        }));
        v
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| fmath::tanh(x)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let v = self.push(t, None);
        self.backward_ops[v.0] = Some(Box::new(move |vals, grads| {
            if let Some(g) = grads.take(v) {
                let tv = vals[v.0].data();
                let ga: Vec<f64> = g
                    .iter()
                    .zip(tv.iter())
                    .map(|(gi, &t)| gi * (1.0 - t * t))
                    .collect();
                grads.acc_owned(a, ga);
            }
        }));
        v
    }

    /// Softmax along `axis` (0 = down columns, 1 = along rows). Rank-1 input
    /// is treated as a single row; only axis 1 applies there.
    pub fn softmax(&mut self, a: VarId, axis: usize) -> Result<VarId, ShapeError> {
        match (self.value(a).rank(), axis) {
            (1, 1) | (2, 1) => Ok(self.softmax_rows(a)),
            (2, 0) => {
                let t = self.transpose(a);
                let s = self.softmax_rows(t);
                Ok(self.transpose(s))
            }
            (r, ax) => Err(ShapeError::new(
                "softmax",
                format!("axis {ax} invalid for rank-{r} tensor"),
            )),
        }
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let (m, n) = self.value(a).dims2();
        let mut data = self.value(a).data().to_vec();
        softmax_rows_raw(&mut data, m, n);
        let t = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        let v = self.push(t, None);
        self.backward_ops[v.0] = Some(Box::new(move |vals, grads| {
            if let Some(g) = grads.take(v) {
                let w = vals[v.0].data();
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    let wr = &w[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let dot: f64 = wr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                    for ((o, &wv), &gv) in ga[i * n..(i + 1) * n].iter_mut().zip(wr).zip(gr) {
                        *o = wv * (gv - dot);
                    }
                }
                grads.acc_owned(a, ga);
            }
        }));
        v
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(
        &mut self,
        x: VarId,
        gain: VarId,
        bias: VarId,
        eps: f64,
    ) -> Result<VarId, ShapeError> {
        let (m, n) = self.value(x).dims2();
        if self.value(gain).shape() != [n] || self.value(bias).shape() != [n] {
            return Err(ShapeError::new(
                "layer_norm",
                format!("gain/bias must have shape [{n}]"),
            ));
        }
        let xd = self.value(x).data();
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let mut out = vec![0.0; m * n];
        let mut inv_sigma = vec![0.0; m];
        let mut xhat = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / fmath::sqrt(var + eps);
            inv_sigma[i] = inv;
            for j in 0..n {
                let h = (row[j] - mu) * inv;
                xhat[i * n + j] = h;
                out[i * n + j] = gd[j] * h + bd[j];
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out).unwrap();
        let v = self.push(t, None);
        self.backward_ops[v.0] = Some(Box::new(move |vals, grads| {
            if let Some(g) = grads.take(v) {
                let gd = vals[gain.0].data();
                let mut gx = vec![0.0; m * n];
                let mut ggain = vec![0.0; n];
                let mut gbias = vec![0.0; n];
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    let hr = &xhat[i * n..(i + 1) * n];
                    let mut dh = vec![0.0; n];
                    for j in 0..n {
                        ggain[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                        dh[j] = gr[j] * gd[j];
                    }
                    let mean_dh = dh.iter().sum::<f64>() / n as f64;
                    let mean_dh_h =
                        dh.iter().zip(hr.iter()).map(|(&a, &b)| a * b).sum::<f64>() / n as f64;
                    let inv = inv_sigma[i];
                    for j in 0..n {
                        gx[i * n + j] = inv * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                    }
                }
                grads.acc_owned(x, gx);
                grads.acc_owned(gain, ggain);
                grads.acc_owned(bias, gbias);
            }
        }));
        Ok(v)
    }

    // ---- shape ops ----

    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId, ShapeError> {
        if parts.is_empty() {
            return Err(ShapeError::new("concat_rows", "no inputs".into()));
        }
        let (_, n) = self.value(parts[0]).dims2();
        let mut data = Vec::new();
        let mut row_counts = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2();
            if pn != n {
                return Err(ShapeError::new(
                    "concat_rows",
                    format!("column mismatch: {pn} vs {n}"),
                ));
            }
            row_counts.push(pm);
            data.extend_from_slice(self.value(p).data());
        }
        let total: usize = row_counts.iter().sum();
        let t = Tensor::new(vec![total, n], data).unwrap();
        let ids: Vec<VarId> = parts.to_vec();
        let v = self.push(t, None);
        self.backward_ops[v.0] = Some(Box::new(move |_vals, grads| {
            if let Some(g) = grads.take(v) {
                let mut off = 0;
                for (&p, &rc) in ids.iter().zip(row_counts.iter()) {
                    grads.acc(p, &g[off..off + rc * n]);
                    off += rc * n;
                }
            }
        }));
        Ok(v)
    }

    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId, ShapeError> {
        let (m, n) = self.value(a).dims2();
        if start + len > m {
            return Err(ShapeError::new(
                "slice_rows",
                format!("rows {start}..{} out of 0..{m}", start + len),
            ));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::new(vec![len, n], data).unwrap();
        let v = self.push(t, None);
        self.backward_ops[v.0] = Some(Box::new(move |_vals, grads| {
            if let Some(g) = grads.take(v) {
                let mut ga = vec![0.0; m * n];
                ga[start * n..(start + len) * n].copy_from_slice(&g);
                grads.acc_owned(a, ga);
            }
        }));
        Ok(v)
    }

    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId, ShapeError> {
        if parts.is_empty() {
            return Err(ShapeError::new("concat_cols", "no inputs".into()));
        }
        let (m, _) = self.value(parts[0]).dims2();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.value(p).dims2();
            if pm != m {
                return Err(ShapeError::new(
                    "concat_cols",
                    format!("row mismatch: {pm} vs {m}"),
                ));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(widths.iter()) {
            let pd = self.value(p).data();
            for i in 0..m {
                data[i * total + off..i * total + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(vec![m, total], data).unwrap();
        let ids: Vec<VarId> = parts.to_vec();
        let v = self.push(t, None);
        self.backward_ops[v.0] = Some(Box::new(move |_vals, grads| {
            if let Some(g) = grads.take(v) {
                let mut off = 0;
                for (&p, &w) in ids.iter().zip(widths.iter()) {
                    let mut gp = vec![0.0; m * w];
                    for i in 0..m {
                        gp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    grads.acc_owned(p, gp);
                    off += w;
                }
            }
        }));
        Ok(v)
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId, ShapeError> {
        let (m, n) = self.value(a).dims2();
        if start + len > n {
            return Err(ShapeError::new(
                "slice_cols",
                format!("cols {start}..{} out of 0..{n}", start + len),
            ));
        }
        let ad = self.value(a).data();
        let mut data = vec![0.0; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len].copy_from_slice(&ad[i * n + start..i * n + start + len]);
        }
        let t = Tensor::new(vec![m, len], data).unwrap();
        let v = self.push(t, None);
        self.backward_ops[v.0] = Some(Box::new(move |_vals, grads| {
            if let Some(g) = grads.take(v) {
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    ga[i * n + start..i * n + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                grads.acc_owned(a, ga);
            }
        }));
        Ok(v)
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: VarId) -> VarId {
        let s: f64 = self.value(a).data().iter().sum();
        let numel = self.value(a).numel();
        let v = self.push(Tensor::scalar(s), None);
        self.backward_ops[v.0] = Some(Box::new(move |_vals, grads| {
            if let Some(g) = grads.take(v) {
                grads.acc_owned(a, vec![g[0]; numel]);
            }
        }));
        v
    }

    pub fn mean(&mut self, a: VarId) -> VarId {
        let numel = self.value(a).numel();
        let s: f64 = self.value(a).data().iter().sum::<f64>() / numel as f64;
        let v = self.push(Tensor::scalar(s), None);
        self.backward_ops[v.0] = Some(Box::new(move |_vals, grads| {
            if let Some(g) = grads.take(v) {
                grads.acc_owned(a, vec![g[0] / numel as f64; numel]);
            }
        }));
        v
    }

    /// Column sums: [m, n] -> [n].
    pub fn sum_rows(&mut self, a: VarId) -> VarId {
        let (m, n) = self.value(a).dims2();
        let ad = self.value(a).data();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &x) in out.iter_mut().zip(ad[i * n..(i + 1) * n].iter()) {
                *o += x;
            }
        }
        let v = self.push(Tensor::vector(out), None);
        self.backward_ops[v.0] = Some(Box::new(move |_vals, grads| {
            if let Some(g) = grads.take(v) {
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    ga[i * n..(i + 1) * n].copy_from_slice(&g);
                }
                grads.acc_owned(a, ga);
            }
        }));
        v
    }

    // ---- lookups and losses ----

    /// Gather rows of an embedding table: table[v, d] + ids -> [len(ids), d].
    pub fn gather_rows(&mut self, table: VarId, ids: &[usize]) -> Result<VarId, ShapeError> {
        let (v_rows, d) = self.value(table).dims2();
        if ids.is_empty() {
            return Err(ShapeError::new("gather_rows", "empty id list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v_rows) {
            return Err(ShapeError::new(
                "gather_rows",
                format!("id {bad} out of vocabulary 0..{v_rows}"),
            ));
        }
        let td = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data).unwrap();
        let ids_owned = ids.to_vec();
        let v = self.push(t, None);
        self.backward_ops[v.0] = Some(Box::new(move |_vals, grads| {
            if let Some(g) = grads.take(v) {
                let mut gt = vec![0.0; v_rows * d];
                for (r, &i) in ids_owned.iter().enumerate() {
                    for (o, &gv) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d])
                    {
                        *o += gv;
                    }
                }
                grads.acc_owned(table, gt);
            }
        }));
        Ok(v)
    }

    /// Summed cross-entropy of logits [t, v] against target ids, with optional
    /// label smoothing. Returns a scalar; divide by the token count separately.
    pub fn cross_entropy_sum(
        &mut self,
        logits: VarId,
        targets: &[usize],
        label_smoothing: f64,
    ) -> Result<VarId, ShapeError> {
        let (t_len, vocab) = self.value(logits).dims2();
        if targets.len() != t_len {
            return Err(ShapeError::new(
                "cross_entropy",
                format!("{} targets for {t_len} logit rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&i| i >= vocab) {
            return Err(ShapeError::new(
                "cross_entropy",
                format!("target {bad} out of vocabulary 0..{vocab}"),
            ));
        }
        let eps = label_smoothing;
        let off_weight = if vocab > 1 { eps / (vocab - 1) as f64 } else { 0.0 };
        let ld = self.value(logits).data();
        let mut loss = 0.0;
        for (row, &tgt) in targets.iter().enumerate() {
            let r = &ld[row * vocab..(row + 1) * vocab];
            let max = r.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let logz = max + fmath::ln(r.iter().map(|&x| fmath::exp(x - max)).sum::<f64>());
            for (j, &x) in r.iter().enumerate() {
                let q = if j == tgt { 1.0 - eps } else { off_weight };
                if q != 0.0 {
                    loss -= q * (x - logz);
                }
            }
        }
        let targets_owned = targets.to_vec();
        let v = self.push(Tensor::scalar(loss), None);
        self.backward_ops[v.0] = Some(Box::new(move |vals, grads| {
            if let Some(g) = grads.take(v) {
                let ld = vals[logits.0].data();
                let mut gl = vec![0.0; t_len * vocab];
                for (row, &tgt) in targets_owned.iter().enumerate() {
                    let r = &ld[row * vocab..(row + 1) * vocab];
                    let max = r.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                    let z: f64 = r.iter().map(|&x| fmath::exp(x - max)).sum();
                    for (j, &x) in r.iter().enumerate() {
                        let p = fmath::exp(x - max) / z;
                        let q = if j == tgt { 1.0 - eps } else { off_weight };
                        gl[row * vocab + j] = g[0] * (p - q);
                    }
                }
                grads.acc_owned(logits, gl);
            }
        }));
        Ok(v)
    }

    /// Inverted dropout. `rate == 0` is an identity pass-through, so the op
    /// can be switched off without changing the graph shape.
    pub fn dropout(&mut self, x: VarId, rate: f64) -> Result<VarId, ShapeError> {
        if rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(ShapeError::new(
                "dropout",
                format!("rate {rate} outside [0, 1)"),
            ));
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| {
                if self.rng.next_f64() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let m = self.input(Tensor::new(self.value(x).shape().to_vec(), mask).unwrap());
        self.mul(x, m)
    }

    // ---- backward ----

    /// Replay the tape backward from a scalar loss.
    pub fn backward(&self, loss: VarId) -> Result<Grads, ShapeError> {
        if self.value(loss).numel() != 1 {
            return Err(ShapeError::new(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads = Grads::new(self.values.len());
        grads.acc_owned(loss, vec![1.0]);
        for i in (0..=loss.0).rev() {
            if let Some(op) = &self.backward_ops[i] {
                op(&self.values, &mut grads);
            }
        }
        // Gradient shapes mirror their tensors' shapes by construction; make
        // that checkable in debug builds.
        #[cfg(debug_assertions)]
        for (i, slot) in grads.slots.iter().enumerate() {
            if let Some(g) = slot {
                debug_assert_eq!(g.len(), self.values[i].numel(), "grad shape at var {i}");
            }
        }
        Ok(grads)
    }
}

/// Default finite-difference step for 64-bit gradient checks.
pub const DEFAULT_GRAD_STEP: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub autodiff: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compare the tape gradient of a scalar function against central finite
/// differences. Returns the max over components of
/// `|autodiff - central| / (|central| + 1e-8)`.
pub fn grad_check<F>(f: &F, x: &Tensor, h: f64) -> Result<GradCheckReport, ShapeError>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId, ShapeError>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = f(&mut tape, xv)?;
    if tape.value(y).numel() != 1 {
        return Err(ShapeError::new(
            "grad_check",
            format!("f must be scalar-valued, got {:?}", tape.value(y).shape()),
        ));
    }
    let grads = tape.backward(y)?;
    let autodiff = grads
        .get(xv)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |t: &Tensor| -> Result<f64, ShapeError> {
        let mut tape = Tape::new();
        let xv = tape.input(t.clone());
        let y = f(&mut tape, xv)?;
        Ok(tape.value(y).data()[0])
    };

    let mut numeric = vec![0.0; x.numel()];
    let mut max_rel: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let central = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
        numeric[i] = central;
        let rel = fmath::abs(autodiff[i] - central) / (fmath::abs(central) + 1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        autodiff,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use alloc::vec;

    fn rand_tensor(rng: &mut SplitMix64, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_of_squares_gradient() {
        // f(x) = sum(x^2) at [1, 2] has gradient [2, 4].
        let x = Tensor::vector(vec![1.0, 2.0]);
        let f = |t: &mut Tape, v: VarId| {
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        };
        let rep = grad_check(&f, &x, DEFAULT_GRAD_STEP).unwrap();
        assert!((rep.autodiff[0] - 2.0).abs() < 1e-12);
        assert!((rep.autodiff[1] - 4.0).abs() < 1e-12);
        assert!(rep.max_rel_error < 1e-7, "rel {}", rep.max_rel_error);
    }

    #[test]
    fn softmax_sum_is_constant() {
        // f(x) = sum(softmax(x)) == 1, so the gradient vanishes.
        let x = Tensor::vector(vec![0.3, -1.2, 0.7]);
        let f = |t: &mut Tape, v: VarId| {
            let s = t.softmax(v, 1)?;
            Ok(t.sum(s))
        };
        let rep = grad_check(&f, &x, DEFAULT_GRAD_STEP).unwrap();
        for g in &rep.autodiff {
            assert!(g.abs() < 1e-12);
        }
        assert!(rep.max_rel_error < 1e-7);
    }

    #[test]
    fn grad_check_rejects_non_scalar() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let f = |_t: &mut Tape, v: VarId| Ok(v);
        assert!(grad_check(&f, &x, 1e-5).is_err());
    }

    #[test]
    fn every_op_passes_grad_check_on_random_seeds() {
        // Composite touching every differentiable primitive.
        for seed in 0..10u64 {
            let mut rng = SplitMix64::new(seed);
            let x = rand_tensor(&mut rng, vec![3, 4]);
            let w = rand_tensor(&mut rng, vec![4, 3]);
            let gain = rand_tensor(&mut rng, vec![4]);
            let bias = rand_tensor(&mut rng, vec![4]);
            let f = move |t: &mut Tape, v: VarId| {
                let wv = t.input(w.clone());
                let gv = t.input(gain.clone());
                let bv = t.input(bias.clone());
                let h = t.matmul(v, wv)?; // 3x3
                let ht = t.transpose(h); // 3x3
                let s = t.softmax_rows(ht);
                let sg = t.sigmoid(s);
                let th = t.tanh(sg);
                let top = t.slice_rows(th, 0, 2)?;
                let bot = t.slice_rows(th, 2, 1)?;
                let cat = t.concat_rows(&[top, bot])?;
                let left = t.slice_cols(cat, 0, 2)?;
                let right = t.slice_cols(cat, 2, 1)?;
                let cat2 = t.concat_cols(&[left, right])?;
                let prod = t.matmul(cat2, v)?; // 3x4
                let ln = t.layer_norm(prod, gv, bv, 1e-5)?;
                let plus = t.add(ln, v)?;
                let minus = t.sub(plus, v)?;
                let scaled = t.scale(minus, 0.7);
                let biased = t.add_bias(scaled, bv)?;
                let sq = t.mul(biased, biased)?;
                let colsum = t.sum_rows(sq);
                let m = t.mean(colsum);
                let s2 = t.sum(sq);
                let half = t.scale(s2, 0.25);
                t.add(m, half)
            };
            let rep = grad_check(&f, &x, DEFAULT_GRAD_STEP).unwrap();
            assert!(
                rep.max_rel_error < 1e-4,
                "seed {seed}: rel {}",
                rep.max_rel_error
            );
        }
    }

    #[test]
    fn gather_and_cross_entropy_gradients() {
        for seed in 0..10u64 {
            let mut rng = SplitMix64::new(100 + seed);
            let table = rand_tensor(&mut rng, vec![5, 4]);
            let proj = rand_tensor(&mut rng, vec![4, 6]);
            let ids = vec![1usize, 3, 0];
            let targets = vec![2usize, 5, 0];
            let proj2 = proj.clone();
            let ids2 = ids.clone();
            let targets2 = targets.clone();
            let f = move |t: &mut Tape, v: VarId| {
                let p = t.input(proj2.clone());
                let e = t.gather_rows(v, &ids2)?;
                let logits = t.matmul(e, p)?;
                t.cross_entropy_sum(logits, &targets2, 0.1)
            };
            let rep = grad_check(&f, &table, DEFAULT_GRAD_STEP).unwrap();
            assert!(
                rep.max_rel_error < 1e-4,
                "seed {seed}: rel {}",
                rep.max_rel_error
            );
        }
    }

    #[test]
    fn cross_entropy_matches_log_vocab_at_zero_logits() {
        let mut t = Tape::new();
        let logits = t.zeros(vec![3, 7]);
        let loss = t.cross_entropy_sum(logits, &[0, 1, 2], 0.0).unwrap();
        let expected = 3.0 * (7.0f64).ln();
        assert!((t.value(loss).data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut t = Tape::new();
        let x = t.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = t.dropout(x, 0.0).unwrap();
        assert_eq!(x.0, y.0);
    }

    #[test]
    fn dropout_scales_kept_values() {
        let mut t = Tape::new();
        t.seed(42);
        let x = t.input(Tensor::vector(vec![1.0; 1000]));
        let y = t.dropout(x, 0.5).unwrap();
        let data = t.value(y).data();
        let kept = data.iter().filter(|&&v| v != 0.0).count();
        assert!(data.iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-12));
        assert!((350..650).contains(&kept), "kept {kept}");
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut t = Tape::new();
        let a = t.zeros(vec![2, 3]);
        let b = t.zeros(vec![2, 3]);
        assert!(t.matmul(a, b).is_err());
        assert!(t.add_bias(a, b).is_err());
    }

    #[test]
    fn bilinear_score_expansion() {
        // (A + B) C^T == A C^T + B C^T on random 3x3 inputs.
        let mut rng = SplitMix64::new(7);
        for _ in 0..20 {
            let a = rand_tensor(&mut rng, vec![3, 3]);
            let b = rand_tensor(&mut rng, vec![3, 3]);
            let c = rand_tensor(&mut rng, vec![3, 3]);
            let mut t = Tape::new();
            let (av, bv, cv) = (t.input(a), t.input(b), t.input(c));
            let ct = t.transpose(cv);
            let ab = t.add(av, bv).unwrap();
            let lhs = t.matmul(ab, ct).unwrap();
            let act = t.matmul(av, ct).unwrap();
            let bct = t.matmul(bv, ct).unwrap();
            let rhs = t.add(act, bct).unwrap();
            let err = crate::tensor::rel_error(t.value(lhs).data(), t.value(rhs).data());
            assert!(err < 1e-10, "err {err}");
        }
    }

    #[test]
    fn f32_precision_quantizes_results() {
        let mut t = Tape::with_precision(Precision::F32);
        let a = t.input(Tensor::vector(vec![0.1, 0.2]));
        let b = t.input(Tensor::vector(vec![0.3, 0.4]));
        let c = t.add(a, b).unwrap();
        for &v in t.value(c).data() {
            assert_eq!(v, v as f32 as f64);
        }
    }
}
