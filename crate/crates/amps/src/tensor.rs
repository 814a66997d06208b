//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! The tape records every primitive applied during a forward pass and replays
//! it in reverse to accumulate gradients of a scalar loss with respect to any
//! leaf, including intermediate values registered as leaves (KV cache entries).
//! Gradients accumulate across repeated `backward` calls until `reset_grads`.

use crate::error::{AmpsError, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

const RMSNORM_EPS: f64 = 1e-8;

/// Plain dense tensor value (row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let dist = rand::distributions::Standard;
        // Box-Muller from uniform draws keeps us independent of rand_distr.
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.sample::<f64, _>(dist).max(1e-300);
            let u2: f64 = rng.sample(dist);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(std * r * theta.cos());
            if data.len() < n {
                data.push(std * r * theta.sin());
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numerically stabilized softmax of a rank-1 tensor.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if !logits.is_finite() {
        return Err(AmpsError::NonFinite("softmax input".into()));
    }
    let max = logits
        .data()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(Tensor::new(
        vec![logits.len()],
        exps.iter().map(|e| e / sum).collect(),
    ))
}

/// Cross-entropy −Σ target·log(prediction), with prediction floored at
/// [`PROB_FLOOR`]. Equals the Shannon entropy of `target` when the two match.
pub fn cross_entropy(target: &Tensor, prediction: &Tensor) -> Result<f64> {
    if target.len() != prediction.len() {
        return Err(AmpsError::Shape(format!(
            "cross_entropy lengths {} vs {}",
            target.len(),
            prediction.len()
        )));
    }
    let mut acc = 0.0;
    for (t, p) in target.data().iter().zip(prediction.data()) {
        acc -= t * p.max(PROB_FLOOR).ln();
    }
    Ok(acc)
}

/// Index of a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

enum Op {
    Leaf,
    /// a + c*b (same shape)
    AddScaled(TensorId, TensorId, f64),
    /// matrix + row-broadcast bias
    AddRow(TensorId, TensorId),
    /// copy of x with `v` added to one row
    AddToRow { x: TensorId, row: usize, v: TensorId },
    Scale(TensorId, f64),
    Relu(TensorId),
    /// a [n,k] · b [k,m]
    Matmul(TensorId, TensorId),
    /// a [n,k] · b [m,k]^T
    MatmulBt(TensorId, TensorId),
    /// row-wise softmax; causal masks column j > row i
    SoftmaxRows { x: TensorId, causal: bool },
    Embed { table: TensorId, ids: Vec<usize> },
    RmsNormRows { x: TensorId, gain: TensorId },
    ConcatCols(Vec<TensorId>),
    ConcatRows(Vec<TensorId>),
    SelectRow { x: TensorId, row: usize },
    /// −Σ target·log(max(pred, floor)); target is a constant
    CrossEntropy { pred: TensorId, target: Vec<f64> },
    SumSquares(TensorId),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation: ordered list of primitives, inputs before outputs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn req(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated for `id`, zeros if backward never reached it.
    pub fn grad(&self, id: TensorId) -> Vec<f64> {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[id.0].value.len()],
        }
    }

    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf — excluded from gradient propagation.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.add_scaled(a, b, 1.0)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.add_scaled(a, b, -1.0)
    }

    pub fn add_scaled(&mut self, a: TensorId, b: TensorId, c: f64) -> TensorId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add_scaled shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + c * y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        let rg = self.req(a) || self.req(b);
        self.push(value, Op::AddScaled(a, b, c), rg)
    }

    pub fn add_row(&mut self, a: TensorId, bias: TensorId) -> TensorId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let (n, d) = (va.rows(), va.cols());
        assert_eq!(vb.len(), d, "bias width mismatch");
        let mut data = va.data().to_vec();
        for r in 0..n {
            for j in 0..d {
                data[r * d + j] += vb.data()[j];
            }
        }
        let rg = self.req(a) || self.req(bias);
        self.push(Tensor::new(vec![n, d], data), Op::AddRow(a, bias), rg)
    }

    pub fn add_to_row(&mut self, x: TensorId, row: usize, v: TensorId) -> TensorId {
        let (vx, vv) = (&self.nodes[x.0].value, &self.nodes[v.0].value);
        let d = vx.cols();
        assert_eq!(vv.len(), d, "add_to_row width mismatch");
        let mut data = vx.data().to_vec();
        for j in 0..d {
            data[row * d + j] += vv.data()[j];
        }
        let rg = self.req(x) || self.req(v);
        self.push(
            Tensor::new(vx.shape().to_vec(), data),
            Op::AddToRow { x, row, v },
            rg,
        )
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let va = &self.nodes[a.0].value;
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|x| x * c).collect());
        let rg = self.req(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let va = &self.nodes[a.0].value;
        let value = Tensor::new(
            va.shape().to_vec(),
            va.data().iter().map(|x| x.max(0.0)).collect(),
        );
        let rg = self.req(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, k) = (va.rows(), va.cols());
        let (k2, m) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul inner dims");
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for p in 0..k {
                let aip = va.data()[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..m {
                    data[i * m + j] += aip * vb.data()[p * m + j];
                }
            }
        }
        let rg = self.req(a) || self.req(b);
        self.push(Tensor::new(vec![n, m], data), Op::Matmul(a, b), rg)
    }

    /// a · bᵀ, with b stored row-major [m, k].
    pub fn matmul_bt(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, k) = (va.rows(), va.cols());
        let (m, k2) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul_bt inner dims");
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += va.data()[i * k + p] * vb.data()[j * k + p];
                }
                data[i * m + j] = acc;
            }
        }
        let rg = self.req(a) || self.req(b);
        self.push(Tensor::new(vec![n, m], data), Op::MatmulBt(a, b), rg)
    }

    pub fn softmax_rows(&mut self, x: TensorId, causal: bool) -> TensorId {
        let vx = &self.nodes[x.0].value;
        let (n, m) = (vx.rows(), vx.cols());
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let limit = if causal { (i + 1).min(m) } else { m };
            let row = &vx.data()[i * m..i * m + limit];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..limit {
                let e = (row[j] - max).exp();
                data[i * m + j] = e;
                sum += e;
            }
            for j in 0..limit {
                data[i * m + j] /= sum;
            }
        }
        let rg = self.req(x);
        self.push(Tensor::new(vec![n, m], data), Op::SoftmaxRows { x, causal }, rg)
    }

    pub fn embed(&mut self, table: TensorId, ids: &[usize]) -> TensorId {
        let vt = &self.nodes[table.0].value;
        let d = vt.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(vt.row(id));
        }
        let rg = self.req(table);
        self.push(
            Tensor::new(vec![ids.len(), d], data),
            Op::Embed { table, ids: ids.to_vec() },
            rg,
        )
    }

    pub fn rmsnorm_rows(&mut self, x: TensorId, gain: TensorId) -> TensorId {
        let (vx, vg) = (&self.nodes[x.0].value, &self.nodes[gain.0].value);
        let (n, d) = (vx.rows(), vx.cols());
        assert_eq!(vg.len(), d, "rmsnorm gain width");
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = vx.row(i);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = (ms + RMSNORM_EPS).sqrt();
            for j in 0..d {
                data[i * d + j] = vg.data()[j] * row[j] / r;
            }
        }
        let rg = self.req(x) || self.req(gain);
        self.push(Tensor::new(vec![n, d], data), Op::RmsNormRows { x, gain }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> TensorId {
        let n = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (pi, &p) in parts.iter().enumerate() {
            let v = &self.nodes[p.0].value;
            for i in 0..n {
                data[i * total + off..i * total + off + widths[pi]].copy_from_slice(v.row(i));
            }
            off += widths[pi];
        }
        let rg = parts.iter().any(|&p| self.req(p));
        self.push(Tensor::new(vec![n, total], data), Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> TensorId {
        let nonempty: Vec<TensorId> = parts
            .iter()
            .copied()
            .filter(|p| !self.nodes[p.0].value.is_empty())
            .collect();
        let d = self.nodes[nonempty[0].0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &nonempty {
            let v = &self.nodes[p.0].value;
            assert_eq!(v.cols(), d, "concat_rows width mismatch");
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let rg = nonempty.iter().any(|&p| self.req(p));
        self.push(Tensor::new(vec![rows, d], data), Op::ConcatRows(nonempty), rg)
    }

    pub fn select_row(&mut self, x: TensorId, row: usize) -> TensorId {
        let vx = &self.nodes[x.0].value;
        let d = vx.cols();
        let value = Tensor::new(vec![1, d], vx.row(row).to_vec());
        let rg = self.req(x);
        self.push(value, Op::SelectRow { x, row }, rg)
    }

    /// −Σ target·log(max(pred, floor)) against a constant target distribution.
    pub fn cross_entropy_vs(&mut self, target: &[f64], pred: TensorId) -> TensorId {
        let vp = &self.nodes[pred.0].value;
        assert_eq!(vp.len(), target.len(), "cross_entropy_vs lengths");
        let mut acc = 0.0;
        for (t, p) in target.iter().zip(vp.data()) {
            acc -= t * p.max(PROB_FLOOR).ln();
        }
        let rg = self.req(pred);
        self.push(
            Tensor::scalar(acc),
            Op::CrossEntropy { pred, target: target.to_vec() },
            rg,
        )
    }

    pub fn sum_squares(&mut self, a: TensorId) -> TensorId {
        let va = &self.nodes[a.0].value;
        let acc = va.data().iter().map(|v| v * v).sum();
        let rg = self.req(a);
        self.push(Tensor::scalar(acc), Op::SumSquares(a), rg)
    }

    fn add_grad(&mut self, id: TensorId, delta: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let len = self.nodes[id.0].value.len();
        let g = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; len]);
        for (gi, d) in g.iter_mut().zip(delta) {
            *gi += d;
        }
    }

    /// Reverse pass from a scalar loss. Gradients accumulate across calls.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(AmpsError::InvalidArgument("loss not on tape".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AmpsError::InvalidArgument("loss must be scalar".into()));
        }
        // Leaf grads accumulate across backward calls; interior grads are
        // scratch for propagation and start from zero every call.
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                if let Some(g) = &mut node.grad {
                    g.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        self.add_grad(loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match &self.nodes[i].grad {
                Some(g) if g.iter().any(|v| *v != 0.0) => g.clone(),
                _ => continue,
            };
            // Dispatch on the op, propagating g to inputs.
            match std::mem::replace(&mut self.nodes[i].op, Op::Leaf) {
                Op::Leaf => {
                    self.nodes[i].op = Op::Leaf;
                }
                op => {
                    self.backprop_op(&op, i, &g);
                    self.nodes[i].op = op;
                }
            }
        }
        Ok(())
    }

    fn backprop_op(&mut self, op: &Op, out: usize, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::AddScaled(a, b, c) => {
                self.add_grad(*a, g);
                let gb: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.add_grad(*b, &gb);
            }
            Op::AddRow(a, bias) => {
                self.add_grad(*a, g);
                let d = self.nodes[bias.0].value.len();
                let n = g.len() / d;
                let mut gb = vec![0.0; d];
                for r in 0..n {
                    for j in 0..d {
                        gb[j] += g[r * d + j];
                    }
                }
                self.add_grad(*bias, &gb);
            }
            Op::AddToRow { x, row, v } => {
                self.add_grad(*x, g);
                let d = self.nodes[v.0].value.len();
                self.add_grad(*v, &g[row * d..(row + 1) * d].to_vec());
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.add_grad(*a, &ga);
            }
            Op::Relu(a) => {
                let va = self.nodes[a.0].value.data().to_vec();
                let ga: Vec<f64> = va
                    .iter()
                    .zip(g)
                    .map(|(x, gv)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.add_grad(*a, &ga);
            }
            Op::Matmul(a, b) => {
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let (n, k, m) = (va.rows(), va.cols(), vb.cols());
                let mut ga = vec![0.0; n * k];
                let mut gb = vec![0.0; k * m];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            ga[i * k + p] += gij * vb.data()[p * m + j];
                            gb[p * m + j] += gij * va.data()[i * k + p];
                        }
                    }
                }
                self.add_grad(*a, &ga);
                self.add_grad(*b, &gb);
            }
            Op::MatmulBt(a, b) => {
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let (n, k, m) = (va.rows(), va.cols(), vb.rows());
                let mut ga = vec![0.0; n * k];
                let mut gb = vec![0.0; m * k];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            ga[i * k + p] += gij * vb.data()[j * k + p];
                            gb[j * k + p] += gij * va.data()[i * k + p];
                        }
                    }
                }
                self.add_grad(*a, &ga);
                self.add_grad(*b, &gb);
            }
            Op::SoftmaxRows { x, causal } => {
                let p = self.nodes[out].value.clone();
                let (n, m) = (p.rows(), p.cols());
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    let limit = if *causal { (i + 1).min(m) } else { m };
                    let mut dot = 0.0;
                    for j in 0..limit {
                        dot += p.data()[i * m + j] * g[i * m + j];
                    }
                    for j in 0..limit {
                        gx[i * m + j] = p.data()[i * m + j] * (g[i * m + j] - dot);
                    }
                }
                self.add_grad(*x, &gx);
            }
            Op::Embed { table, ids } => {
                let d = self.nodes[table.0].value.cols();
                let rows = self.nodes[table.0].value.rows();
                let mut gt = vec![0.0; rows * d];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[r * d + j];
                    }
                }
                self.add_grad(*table, &gt);
            }
            Op::RmsNormRows { x, gain } => {
                let vx = self.nodes[x.0].value.clone();
                let vg = self.nodes[gain.0].value.clone();
                let (n, d) = (vx.rows(), vx.cols());
                let mut gx = vec![0.0; n * d];
                let mut gg = vec![0.0; d];
                for i in 0..n {
                    let row = vx.row(i);
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
                    let r = (ms + RMSNORM_EPS).sqrt();
                    let mut dot = 0.0;
                    for j in 0..d {
                        dot += g[i * d + j] * vg.data()[j] * row[j];
                    }
                    for j in 0..d {
                        gx[i * d + j] =
                            g[i * d + j] * vg.data()[j] / r - row[j] * dot / (d as f64 * r * r * r);
                        gg[j] += g[i * d + j] * row[j] / r;
                    }
                }
                self.add_grad(*x, &gx);
                self.add_grad(*gain, &gg);
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[out].value.cols();
                let n = self.nodes[out].value.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    let mut gp = vec![0.0; n * w];
                    for i in 0..n {
                        gp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + off..i * total + off + w]);
                    }
                    self.add_grad(p, &gp);
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let d = self.nodes[out].value.cols();
                let mut off = 0;
                for &p in parts {
                    let r = self.nodes[p.0].value.rows();
                    self.add_grad(p, &g[off * d..(off + r) * d].to_vec());
                    off += r;
                }
            }
            Op::SelectRow { x, row } => {
                let d = self.nodes[out].value.len();
                let n = self.nodes[x.0].value.rows();
                let mut gx = vec![0.0; n * d];
                gx[row * d..(row + 1) * d].copy_from_slice(g);
                self.add_grad(*x, &gx);
            }
            Op::CrossEntropy { pred, target } => {
                let vp = self.nodes[pred.0].value.clone();
                let gs = g[0];
                let gp: Vec<f64> = vp
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(p, t)| if *p > PROB_FLOOR { -gs * t / p } else { 0.0 })
                    .collect();
                self.add_grad(*pred, &gp);
            }
            Op::SumSquares(a) => {
                let va = self.nodes[a.0].value.clone();
                let gs = g[0];
                let ga: Vec<f64> = va.data().iter().map(|v| 2.0 * v * gs).collect();
                self.add_grad(*a, &ga);
            }
        }
    }
}

/// Max relative error between reverse-mode and central finite-difference
/// gradients of a scalar function at `point`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, TensorId) -> TensorId,
{
    assert!(step > 0.0, "step must be positive");
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let loss = f(&mut tape, x);
    let loss_val = tape.value(loss).data()[0];
    if !loss_val.is_finite() {
        return Err(AmpsError::NonFinite("grad_check loss".into()));
    }
    tape.backward(loss)?;
    let ad = tape.grad(x);

    let eval = |p: &Tensor| -> f64 {
        let mut t = Tape::new();
        let x = t.constant(p.clone());
        let l = f(&mut t, x);
        t.value(l).data()[0]
    };

    let mut max_err: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
        let err = (ad[i] - fd).abs() / fd.abs().max(1e-12);
        // Matched near-zero gradients are a pass, not a 0/0 blowup.
        if (ad[i] - fd).abs() > 1e-10 {
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&Tensor::new(vec![2], vec![1.0, 1.0])).unwrap();
        assert_close(p.data()[0], 0.5, 1e-15);
        assert_close(p.data()[1], 0.5, 1e-15);
    }

    #[test]
    fn softmax_direct_evaluation() {
        let p = softmax(&Tensor::new(vec![2], vec![0.0, 3.0_f64.ln()])).unwrap();
        assert_close(p.data()[0], 0.25, 1e-12);
        assert_close(p.data()[1], 0.75, 1e-12);
    }

    #[test]
    fn softmax_single_class() {
        let p = softmax(&Tensor::new(vec![1], vec![5.0])).unwrap();
        assert_close(p.data()[0], 1.0, 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(softmax(&Tensor::new(vec![2], vec![f64::NAN, 0.0])).is_err());
    }

    #[test]
    fn cross_entropy_uniform_is_ln4() {
        let u = Tensor::new(vec![4], vec![0.25; 4]);
        assert_close(cross_entropy(&u, &u).unwrap(), 4.0_f64.ln(), 1e-12);
    }

    #[test]
    fn cross_entropy_one_hot() {
        let t = Tensor::new(vec![3], vec![0.0, 1.0, 0.0]);
        let p = Tensor::new(vec![3], vec![0.2, 0.5, 0.3]);
        assert_close(cross_entropy(&t, &p).unwrap(), -(0.5_f64.ln()), 1e-12);
    }

    #[test]
    fn cross_entropy_degenerate_distribution() {
        let t = Tensor::new(vec![2], vec![1.0, 0.0]);
        assert_close(cross_entropy(&t, &t).unwrap(), 0.0, 1e-10);
    }

    #[test]
    fn cross_entropy_length_mismatch() {
        let a = Tensor::new(vec![2], vec![0.5, 0.5]);
        let b = Tensor::new(vec![3], vec![0.4, 0.3, 0.3]);
        assert!(cross_entropy(&a, &b).is_err());
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1], vec![3.0]));
        let loss = tape.sum_squares(x);
        tape.backward(loss).unwrap();
        assert_close(tape.grad(x)[0], 6.0, 1e-14);
    }

    #[test]
    fn backward_softmax_ce_closed_form() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::new(vec![1, 3], vec![0.3, -1.2, 0.7]));
        let p = tape.softmax_rows(z, false);
        let loss = tape.cross_entropy_vs(&[0.0, 1.0, 0.0], p);
        tape.backward(loss).unwrap();
        let g = tape.grad(z);
        let pv = tape.value(p).data().to_vec();
        for (i, t) in [0.0, 1.0, 0.0].iter().enumerate() {
            assert_close(g[i], pv[i] - t, 1e-12);
        }
    }

    #[test]
    fn backward_constant_loss_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]));
        let c = tape.leaf(Tensor::scalar(5.0));
        let loss = tape.scale(c, 2.0);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn grads_accumulate_until_reset() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1], vec![2.0]));
        let loss = tape.sum_squares(x);
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_close(tape.grad(x)[0], 8.0, 1e-14);
        tape.reset_grads();
        tape.backward(loss).unwrap();
        assert_close(tape.grad(x)[0], 4.0, 1e-14);
    }

    #[test]
    fn grad_check_quadratic() {
        let mut rng = rng_from(11);
        let point = Tensor::randn(vec![6], 1.0, &mut rng);
        let err = grad_check(|t, x| t.sum_squares(x), &point, 1e-4).unwrap();
        assert!(err <= 1e-8, "err = {err}");
    }

    #[test]
    fn grad_check_softmax_ce() {
        let mut rng = rng_from(12);
        let point = Tensor::randn(vec![1, 5], 1.0, &mut rng);
        let err = grad_check(
            |t, x| {
                let p = t.softmax_rows(x, false);
                t.cross_entropy_vs(&[0.1, 0.3, 0.2, 0.25, 0.15], p)
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-4, "err = {err}");
    }

    #[test]
    fn grad_check_constant() {
        let point = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]);
        let err = grad_check(
            |t, _x| {
                let c = t.constant(Tensor::scalar(4.0));
                t.scale(c, 1.0)
            },
            &point,
            1e-4,
        )
        .unwrap();
        assert_close(err, 0.0, 0.0);
    }

    // Every primitive against central finite differences at random points.
    #[test]
    fn grad_check_all_primitives() {
        let mut rng = rng_from(99);
        for trial in 0..100 {
            let point = Tensor::randn(vec![3, 4], 1.0, &mut rng);
            let which = trial % 8;
            let err = grad_check(
                move |t, x| {
                    let out = match which {
                        0 => {
                            let w = t.constant(Tensor::new(
                                vec![4, 2],
                                (0..8).map(|i| (i as f64) * 0.3 - 1.0).collect(),
                            ));
                            t.matmul(x, w)
                        }
                        1 => {
                            let b = t.constant(Tensor::new(
                                vec![3, 4],
                                (0..12).map(|i| (i as f64) * 0.1).collect(),
                            ));
                            t.matmul_bt(x, b)
                        }
                        2 => t.relu(x),
                        3 => t.softmax_rows(x, false),
                        4 => t.softmax_rows(x, true),
                        5 => {
                            let g = t.constant(Tensor::new(vec![4], vec![1.1, 0.9, 1.3, 0.7]));
                            t.rmsnorm_rows(x, g)
                        }
                        6 => {
                            let b = t.constant(Tensor::new(vec![4], vec![0.5, -0.5, 0.2, 0.1]));
                            t.add_row(x, b)
                        }
                        _ => {
                            let r = t.select_row(x, 1);
                            t.relu(r)
                        }
                    };
                    t.sum_squares(out)
                },
                &point,
                1e-4,
            )
            .unwrap();
            assert!(err <= 1e-4, "primitive {which}: err = {err}");
        }
    }
}
