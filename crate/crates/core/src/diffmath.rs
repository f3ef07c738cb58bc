//! Minimal reverse-mode differentiable array engine.
//!
//! Double-precision, row-major tensors recorded on a [`Tape`]. The op set is
//! exactly what the toy transformer and the RL losses need; there is no
//! broadcasting beyond row-wise bias adds and no implicit shape coercion.
//! Masked attention represents -inf as the [`NEG_INF`] sentinel so that
//! softmax never has to evaluate `(-inf) - (-inf)`.

use crate::error::{Error, Result};

/// Large negative sentinel standing in for -inf inside attention biases.
pub const NEG_INF: f64 = -1e30;

/// Row-major dense array of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!("expected rank-2 tensor, got {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(pub usize);

type BackRule = Box<dyn Fn(&[Tensor], &mut [Vec<f64>])>;

/// Wengert tape: values plus backward rules in topological order.
///
/// A non-recording tape evaluates forward only and rejects `backward`.
pub struct Tape {
    vals: Vec<Tensor>,
    rules: Vec<BackRule>,
    recording: bool,
    backward_done: bool,
    grads: Option<Vec<Vec<f64>>>,
    matmul_flops: u64,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            vals: Vec::new(),
            rules: Vec::new(),
            recording: true,
            backward_done: false,
            grads: None,
            matmul_flops: 0,
        }
    }

    /// Forward-only tape: no backward rules are recorded.
    pub fn eval() -> Self {
        let mut t = Tape::new();
        t.recording = false;
        t
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.vals[id.0]
    }

    /// Gradient of the most recent `backward` loss w.r.t. `id`.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.grads.as_ref().map(|g| g[id.0].as_slice())
    }

    /// Cumulative matmul FLOPs (2*m*n*k per product) recorded on this tape.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    fn push(&mut self, t: Tensor, rule: Option<BackRule>) -> Result<ValueId> {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tape op produced a non-finite value".into()));
        }
        self.vals.push(t);
        if self.recording {
            self.rules.push(rule.unwrap_or_else(|| Box::new(|_, _| {})));
        }
        Ok(ValueId(self.vals.len() - 1))
    }

    pub fn leaf(&mut self, t: Tensor) -> Result<ValueId> {
        self.push(t, None)
    }

    /// Constant: identical to a leaf, but documents that no gradient is wanted.
    pub fn constant(&mut self, t: Tensor) -> Result<ValueId> {
        self.push(t, None)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, ka) = self.vals[a.0].dims2()?;
        let (kb, n) = self.vals[b.0].dims2()?;
        if ka != kb {
            return Err(Error::Shape(format!("matmul {}x{} by {}x{}", m, ka, kb, n)));
        }
        let k = ka;
        let mut out = vec![0.0; m * n];
        {
            let av = &self.vals[a.0].data;
            let bv = &self.vals[b.0].data;
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        out[i * n + j] += aip * bv[p * n + j];
                    }
                }
            }
        }
        self.matmul_flops += 2 * (m as u64) * (n as u64) * (k as u64);
        let oid = self.vals.len();
        self.push(
            Tensor { shape: vec![m, n], data: out },
            Some(Box::new(move |vals, grads| {
                let av = vals[a.0].data.clone();
                let bv = vals[b.0].data.clone();
                let go = grads[oid].clone();
                // dA = dC * B^T
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += go[i * n + j] * bv[p * n + j];
                        }
                        grads[a.0][i * k + p] += acc;
                    }
                }
                // dB = A^T * dC
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += av[i * k + p] * go[i * n + j];
                        }
                        grads[b.0][p * n + j] += acc;
                    }
                }
            })),
        )
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.vals[a.0].shape != self.vals[b.0].shape {
            return Err(Error::Shape("add: shape mismatch".into()));
        }
        let data: Vec<f64> = self.vals[a.0]
            .data
            .iter()
            .zip(&self.vals[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.vals[a.0].shape.clone();
        let oid = self.vals.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |_vals, grads| {
                let go = grads[oid].clone();
                for (i, g) in go.iter().enumerate() {
                    grads[a.0][i] += g;
                    grads[b.0][i] += g;
                }
            })),
        )
    }

    /// Row-broadcast bias add: `a` is [m,n], `b` is [n].
    pub fn add_bias(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, n) = self.vals[a.0].dims2()?;
        if self.vals[b.0].shape != vec![n] {
            return Err(Error::Shape("add_bias: bias must match row width".into()));
        }
        let mut data = self.vals[a.0].data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += self.vals[b.0].data[j];
            }
        }
        let oid = self.vals.len();
        self.push(
            Tensor { shape: vec![m, n], data },
            Some(Box::new(move |_vals, grads| {
                let go = grads[oid].clone();
                for i in 0..m {
                    for j in 0..n {
                        grads[a.0][i * n + j] += go[i * n + j];
                        grads[b.0][j] += go[i * n + j];
                    }
                }
            })),
        )
    }

    pub fn scale(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        let data: Vec<f64> = self.vals[a.0].data.iter().map(|x| x * c).collect();
        let shape = self.vals[a.0].shape.clone();
        let oid = self.vals.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |_vals, grads| {
                let go = grads[oid].clone();
                for (i, g) in go.iter().enumerate() {
                    grads[a.0][i] += c * g;
                }
            })),
        )
    }

    pub fn add_scalar(&mut self, a: ValueId, c: f64) -> Result<ValueId> {
        let data: Vec<f64> = self.vals[a.0].data.iter().map(|x| x + c).collect();
        let shape = self.vals[a.0].shape.clone();
        let oid = self.vals.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |_vals, grads| {
                let go = grads[oid].clone();
                for (i, g) in go.iter().enumerate() {
                    grads[a.0][i] += g;
                }
            })),
        )
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.vals[a.0].shape != self.vals[b.0].shape {
            return Err(Error::Shape("mul: shape mismatch".into()));
        }
        let data: Vec<f64> = self.vals[a.0]
            .data
            .iter()
            .zip(&self.vals[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.vals[a.0].shape.clone();
        let oid = self.vals.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |vals, grads| {
                let go = grads[oid].clone();
                for i in 0..go.len() {
                    grads[a.0][i] += vals[b.0].data[i] * go[i];
                    grads[b.0][i] += vals[a.0].data[i] * go[i];
                }
            })),
        )
    }

    /// Elementwise product with a constant tensor (no gradient to the constant).
    pub fn mul_const(&mut self, a: ValueId, c: &Tensor) -> Result<ValueId> {
        if self.vals[a.0].shape != c.shape {
            return Err(Error::Shape("mul_const: shape mismatch".into()));
        }
        let cdata = c.data.clone();
        let data: Vec<f64> = self.vals[a.0].data.iter().zip(&cdata).map(|(x, y)| x * y).collect();
        let shape = self.vals[a.0].shape.clone();
        let oid = self.vals.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |_vals, grads| {
                let go = grads[oid].clone();
                for i in 0..go.len() {
                    grads[a.0][i] += cdata[i] * go[i];
                }
            })),
        )
    }

    /// Elementwise add of a constant tensor (no gradient to the constant).
    pub fn offset_by(&mut self, a: ValueId, c: &Tensor) -> Result<ValueId> {
        if self.vals[a.0].shape != c.shape {
            return Err(Error::Shape("offset_by: shape mismatch".into()));
        }
        let data: Vec<f64> = self.vals[a.0].data.iter().zip(&c.data).map(|(x, y)| x + y).collect();
        let shape = self.vals[a.0].shape.clone();
        let oid = self.vals.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |_vals, grads| {
                let go = grads[oid].clone();
                for (i, g) in go.iter().enumerate() {
                    grads[a.0][i] += g;
                }
            })),
        )
    }

    /// Attention score bias add. The bias must be {0, NEG_INF}-valued and no
    /// row may be entirely NEG_INF (every query must attend to >=1 key).
    pub fn attn_bias_add(&mut self, scores: ValueId, bias: &Tensor) -> Result<ValueId> {
        let (m, n) = self.vals[scores.0].dims2()?;
        if bias.shape != vec![m, n] {
            return Err(Error::Shape("attn_bias_add: bias shape mismatch".into()));
        }
        for v in &bias.data {
            if *v != 0.0 && *v != NEG_INF {
                return Err(Error::Config("attention bias must be {0, -inf}-valued".into()));
            }
        }
        for i in 0..m {
            if (0..n).all(|j| bias.data[i * n + j] == NEG_INF) {
                return Err(Error::EmptyAttentionRow(i));
            }
        }
        self.offset_by(scores, bias)
    }

    pub fn tanh(&mut self, a: ValueId) -> Result<ValueId> {
        let data: Vec<f64> = self.vals[a.0].data.iter().map(|x| x.tanh()).collect();
        let shape = self.vals[a.0].shape.clone();
        let oid = self.vals.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |vals, grads| {
                let go = grads[oid].clone();
                for i in 0..go.len() {
                    let y = vals[oid].data[i];
                    grads[a.0][i] += (1.0 - y * y) * go[i];
                }
            })),
        )
    }

    /// GELU via the tanh approximation; the backward rule differentiates the
    /// approximation itself, so gradient checks are exact.
    pub fn gelu(&mut self, a: ValueId) -> Result<ValueId> {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const A3: f64 = 0.044715;
        let data: Vec<f64> = self.vals[a.0]
            .data
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (C * (x + A3 * x * x * x)).tanh()))
            .collect();
        let shape = self.vals[a.0].shape.clone();
        let oid = self.vals.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |vals, grads| {
                let go = grads[oid].clone();
                for i in 0..go.len() {
                    let x = vals[a.0].data[i];
                    let u = C * (x + A3 * x * x * x);
                    let t = u.tanh();
                    let du = C * (1.0 + 3.0 * A3 * x * x);
                    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    grads[a.0][i] += d * go[i];
                }
            })),
        )
    }

    pub fn exp(&mut self, a: ValueId) -> Result<ValueId> {
        let data: Vec<f64> = self.vals[a.0].data.iter().map(|x| x.exp()).collect();
        let shape = self.vals[a.0].shape.clone();
        let oid = self.vals.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |vals, grads| {
                let go = grads[oid].clone();
                for i in 0..go.len() {
                    grads[a.0][i] += vals[oid].data[i] * go[i];
                }
            })),
        )
    }

    /// Clamp with pass-through gradient inside [lo, hi] and zero outside.
    pub fn clamp(&mut self, a: ValueId, lo: f64, hi: f64) -> Result<ValueId> {
        let data: Vec<f64> = self.vals[a.0].data.iter().map(|x| x.clamp(lo, hi)).collect();
        let shape = self.vals[a.0].shape.clone();
        let oid = self.vals.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |vals, grads| {
                let go = grads[oid].clone();
                for i in 0..go.len() {
                    let x = vals[a.0].data[i];
                    if x >= lo && x <= hi {
                        grads[a.0][i] += go[i];
                    }
                }
            })),
        )
    }

    /// Elementwise minimum; the gradient routes to the selected input
    /// (ties go to `a`).
    pub fn min_elem(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.vals[a.0].shape != self.vals[b.0].shape {
            return Err(Error::Shape("min_elem: shape mismatch".into()));
        }
        let data: Vec<f64> = self.vals[a.0]
            .data
            .iter()
            .zip(&self.vals[b.0].data)
            .map(|(x, y)| x.min(*y))
            .collect();
        let shape = self.vals[a.0].shape.clone();
        let oid = self.vals.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |vals, grads| {
                let go = grads[oid].clone();
                for i in 0..go.len() {
                    if vals[a.0].data[i] <= vals[b.0].data[i] {
                        grads[a.0][i] += go[i];
                    } else {
                        grads[b.0][i] += go[i];
                    }
                }
            })),
        )
    }

    pub fn transpose(&mut self, a: ValueId) -> Result<ValueId> {
        let (m, n) = self.vals[a.0].dims2()?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.vals[a.0].data[i * n + j];
            }
        }
        let oid = self.vals.len();
        self.push(
            Tensor { shape: vec![n, m], data },
            Some(Box::new(move |_vals, grads| {
                let go = grads[oid].clone();
                for i in 0..m {
                    for j in 0..n {
                        grads[a.0][i * n + j] += go[j * m + i];
                    }
                }
            })),
        )
    }

    pub fn softmax_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let (m, n) = self.vals[a.0].dims2()?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.vals[a.0].data[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                data[i * n + j] = e;
                z += e;
            }
            for j in 0..n {
                data[i * n + j] /= z;
            }
        }
        let oid = self.vals.len();
        self.push(
            Tensor { shape: vec![m, n], data },
            Some(Box::new(move |vals, grads| {
                let go = grads[oid].clone();
                for i in 0..m {
                    let y = &vals[oid].data[i * n..(i + 1) * n];
                    let g = &go[i * n..(i + 1) * n];
                    let dot: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum();
                    for j in 0..n {
                        grads[a.0][i * n + j] += y[j] * (g[j] - dot);
                    }
                }
            })),
        )
    }

    pub fn log_softmax_rows(&mut self, a: ValueId) -> Result<ValueId> {
        let (m, n) = self.vals[a.0].dims2()?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.vals[a.0].data[i * n..(i + 1) * n];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
            let lz = mx + z.ln();
            for j in 0..n {
                data[i * n + j] = row[j] - lz;
            }
        }
        let oid = self.vals.len();
        self.push(
            Tensor { shape: vec![m, n], data },
            Some(Box::new(move |vals, grads| {
                let go = grads[oid].clone();
                for i in 0..m {
                    let lp = &vals[oid].data[i * n..(i + 1) * n];
                    let g = &go[i * n..(i + 1) * n];
                    let gsum: f64 = g.iter().sum();
                    for j in 0..n {
                        grads[a.0][i * n + j] += g[j] - lp[j].exp() * gsum;
                    }
                }
            })),
        )
    }

    pub fn layer_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId) -> Result<ValueId> {
        const EPS: f64 = 1e-5;
        let (m, n) = self.vals[x.0].dims2()?;
        if self.vals[gamma.0].shape != vec![n] || self.vals[beta.0].shape != vec![n] {
            return Err(Error::Shape("layer_norm: gamma/beta must match row width".into()));
        }
        let mut data = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        for i in 0..m {
            let row = &self.vals[x.0].data[i * n..(i + 1) * n];
            let mu: f64 = row.iter().sum::<f64>() / n as f64;
            let var: f64 = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[i] = istd;
            for j in 0..n {
                let xh = (row[j] - mu) * istd;
                xhat[i * n + j] = xh;
                data[i * n + j] = self.vals[gamma.0].data[j] * xh + self.vals[beta.0].data[j];
            }
        }
        let oid = self.vals.len();
        self.push(
            Tensor { shape: vec![m, n], data },
            Some(Box::new(move |vals, grads| {
                let go = grads[oid].clone();
                let gm = &vals[gamma.0].data;
                for i in 0..m {
                    let g = &go[i * n..(i + 1) * n];
                    let xh = &xhat[i * n..(i + 1) * n];
                    let mut sum_dg = 0.0;
                    let mut sum_dgx = 0.0;
                    for j in 0..n {
                        let dg = g[j] * gm[j];
                        sum_dg += dg;
                        sum_dgx += dg * xh[j];
                        grads[gamma.0][j] += g[j] * xh[j];
                        grads[beta.0][j] += g[j];
                    }
                    let nn = n as f64;
                    for j in 0..n {
                        let dg = g[j] * gm[j];
                        grads[x.0][i * n + j] +=
                            inv_std[i] * (dg - sum_dg / nn - xh[j] * sum_dgx / nn);
                    }
                }
            })),
        )
    }

    /// Row lookup: `table` is [V, d], result is [ids.len(), d].
    pub fn embedding(&mut self, table: ValueId, ids: &[usize]) -> Result<ValueId> {
        let (v, d) = self.vals[table.0].dims2()?;
        for &i in ids {
            if i >= v {
                return Err(Error::Config(format!("embedding index {} out of range {}", i, v)));
            }
        }
        let ids_owned = ids.to_vec();
        let mut data = vec![0.0; ids.len() * d];
        for (r, &i) in ids.iter().enumerate() {
            data[r * d..(r + 1) * d].copy_from_slice(&self.vals[table.0].data[i * d..(i + 1) * d]);
        }
        let shape = vec![ids.len(), d];
        let oid = self.vals.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |_vals, grads| {
                let go = grads[oid].clone();
                for (r, &i) in ids_owned.iter().enumerate() {
                    for j in 0..d {
                        grads[table.0][i * d + j] += go[r * d + j];
                    }
                }
            })),
        )
    }

    /// Gather entries of a [S, V] matrix at (row, col) picks, yielding a vector.
    pub fn gather(&mut self, a: ValueId, picks: &[(usize, usize)]) -> Result<ValueId> {
        let (s, v) = self.vals[a.0].dims2()?;
        for &(r, c) in picks {
            if r >= s || c >= v {
                return Err(Error::Config(format!("gather index ({}, {}) out of range", r, c)));
            }
        }
        let picks_owned = picks.to_vec();
        let data: Vec<f64> = picks.iter().map(|&(r, c)| self.vals[a.0].data[r * v + c]).collect();
        let shape = vec![picks.len()];
        let oid = self.vals.len();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |_vals, grads| {
                let go = grads[oid].clone();
                for (k, &(r, c)) in picks_owned.iter().enumerate() {
                    grads[a.0][r * v + c] += go[k];
                }
            })),
        )
    }

    pub fn sum(&mut self, a: ValueId) -> Result<ValueId> {
        let s: f64 = self.vals[a.0].data.iter().sum();
        let n = self.vals[a.0].numel();
        let oid = self.vals.len();
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |_vals, grads| {
                let g = grads[oid][0];
                for i in 0..n {
                    grads[a.0][i] += g;
                }
            })),
        )
    }

    pub fn mean(&mut self, a: ValueId) -> Result<ValueId> {
        let n = self.vals[a.0].numel();
        let s: f64 = self.vals[a.0].data.iter().sum::<f64>() / n as f64;
        let oid = self.vals.len();
        self.push(
            Tensor::scalar(s),
            Some(Box::new(move |_vals, grads| {
                let g = grads[oid][0] / n as f64;
                for i in 0..n {
                    grads[a.0][i] += g;
                }
            })),
        )
    }

    /// Reverse sweep from a scalar loss. Gradients become readable via
    /// [`Tape::grad`]. A second call without a fresh tape is an error.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if !self.recording {
            return Err(Error::Config("backward on a non-recording tape".into()));
        }
        if self.backward_done {
            return Err(Error::Config("backward called twice on the same tape".into()));
        }
        if !self.vals[loss.0].is_scalar() {
            return Err(Error::Config("backward requires a scalar loss".into()));
        }
        let mut grads: Vec<Vec<f64>> = self.vals.iter().map(|t| vec![0.0; t.numel()]).collect();
        grads[loss.0][0] = 1.0;
        for rule in self.rules.iter().rev() {
            rule(&self.vals, &mut grads);
        }
        for g in &grads {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("backward produced a non-finite gradient".into()));
            }
        }
        self.grads = Some(grads);
        self.backward_done = true;
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Compare tape gradients of `f` against central finite differences.
///
/// Returns the max over all parameter entries of
/// `|analytic - fd| / (|analytic| + 1e-12)`.
pub fn grad_check<F>(params: &[Tensor], h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[ValueId]) -> Result<ValueId>,
{
    if !(h > 0.0 && h <= 1e-3) {
        return Err(Error::Config(format!("grad_check step size {} outside (0, 1e-3]", h)));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::eval();
        let ids: Vec<ValueId> =
            ps.iter().map(|p| tape.leaf(p.clone())).collect::<Result<Vec<_>>>()?;
        let loss = f(&mut tape, &ids)?;
        Ok(tape.value(loss).data[0])
    };

    let mut tape = Tape::new();
    let ids: Vec<ValueId> =
        params.iter().map(|p| tape.leaf(p.clone())).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut tape, &ids)?;
    tape.backward(loss)?;

    let mut max_err: f64 = 0.0;
    let mut perturbed: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = tape.grad(ids[pi]).expect("grads populated").to_vec();
        for ei in 0..p.numel() {
            perturbed[pi].data[ei] = p.data[ei] + h;
            let up = eval(&perturbed)?;
            perturbed[pi].data[ei] = p.data[ei] - h;
            let down = eval(&perturbed)?;
            perturbed[pi].data[ei] = p.data[ei];
            let fd = (up - down) / (2.0 * h);
            let err = (analytic[ei] - fd).abs() / (analytic[ei].abs() + 1e-12);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
