use super::{Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `[m×n] + [1×n]` broadcast over rows.
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    SoftmaxRows(usize),
    ConcatCols(usize, usize),
    SliceCols { input: usize, start: usize },
    SliceRows { input: usize, start: usize },
    RepeatRows(usize),
    MeanRows(usize),
    Sum(usize),
    LayerNorm {
        input: usize,
        gain: usize,
        bias: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Mse(usize, usize),
    BceWithLogits { logits: usize, targets: Vec<f64> },
    Dropout { input: usize, mask: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, which is
/// also the topological order used by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros when `v` did not
    /// contribute to the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    /// Registers a tensor; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    /// Registers a trainable tensor.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone().with_grad())
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(out, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        let t = Tensor::new(&[c, r], out).expect("transpose");
        let rg = self.rg(a.0);
        self.push(t, Op::Transpose(a.0), rg)
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(name, x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip(a, b, "add", |p, q| p + q)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip(a, b, "sub", |p, q| p - q)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::Sub(a.0, b.0), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.zip(a, b, "mul", |p, q| p * q)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::Mul(a.0, b.0), rg))
    }

    /// Adds a `[1×n]` row vector to every row of an `[m×n]` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.rows() != 1 || b.cols() != x.cols() || x.shape().len() != 2 {
            return Err(shape_err("add_row", x, b));
        }
        let n = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b.data()[i % n])
            .collect();
        let t = Tensor::new(x.shape(), data)?;
        let rg = self.rg(a.0) || self.rg(bias.0);
        Ok(self.push(t, Op::AddRow(a.0, bias.0), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        let rg = self.rg(a.0);
        self.push(t, Op::Scale(a.0, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v + s);
        let rg = self.rg(a.0);
        self.push(t, Op::AddScalar(a.0), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a.0);
        self.push(t, Op::Relu(a.0), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        let rg = self.rg(a.0);
        self.push(t, Op::Sigmoid(a.0), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::tanh);
        let rg = self.rg(a.0);
        self.push(t, Op::Tanh(a.0), rg)
    }

    /// Row-wise softmax. Disallowed entries of `mask` (row-major,
    /// `false` = blocked) receive a score of `-1e30` before the row max is
    /// subtracted, so they come out as exact zeros.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, TensorError> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(TensorError::Shape {
                    op: "softmax_rows mask",
                    left: x.shape().to_vec(),
                    right: vec![m.len()],
                });
            }
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x.data()[i * c..(i + 1) * c];
            let scores: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, &v)| match mask {
                    Some(m) if !m[i * c + j] => -1e30,
                    _ => v,
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let o = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (oj, s) in o.iter_mut().zip(&scores) {
                *oj = (s - max).exp();
                z += *oj;
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let t = Tensor::new(x.shape(), out)?;
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::SoftmaxRows(a.0), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let t = self.value(a).hcat(self.value(b)).map_err(|_| {
            shape_err("concat_features", self.value(a), self.value(b))
        })?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, Op::ConcatCols(a.0, b.0), rg))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        if start > end || end > c {
            return Err(TensorError::Invalid(format!(
                "column slice {start}..{end} of width {c}"
            )));
        }
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&x.row(i)[start..end]);
        }
        let t = Tensor::new(&[r, end - start], data)?;
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::SliceCols { input: a.0, start }, rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let x = self.value(a);
        if start > end || end > x.rows() {
            return Err(TensorError::Invalid(format!(
                "row slice {start}..{end} of {} rows",
                x.rows()
            )));
        }
        let t = x.slice_rows(start, end);
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::SliceRows { input: a.0, start }, rg))
    }

    /// Stacks a `[1×n]` row `count` times.
    pub fn repeat_rows(&mut self, a: Var, count: usize) -> Result<Var, TensorError> {
        let x = self.value(a);
        if x.rows() != 1 {
            return Err(TensorError::Invalid(format!(
                "repeat_rows expects a single row, got {:?}",
                x.shape()
            )));
        }
        let data = x.data().repeat(count);
        let t = Tensor::new(&[count, x.cols()], data)?;
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::RepeatRows(a.0), rg))
    }

    /// Column means, `[m×n] -> [1×n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a).mean_rows();
        let rg = self.rg(a.0);
        self.push(t, Op::MeanRows(a.0), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).data().iter().sum());
        let rg = self.rg(a.0);
        self.push(t, Op::Sum(a.0), rg)
    }

    /// Per-row layer normalization followed by `gain ⊙ x̂ + bias`, where
    /// `gain` and `bias` are `[1×n]`.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let x = self.value(a);
        let (g, b) = (self.value(gain), self.value(bias));
        let (r, c) = (x.rows(), x.cols());
        if g.numel() != c || b.numel() != c {
            return Err(shape_err("layer_norm", x, g));
        }
        let mut normalized = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = x.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let n = (row[j] - mean) * is;
                normalized[i * c + j] = n;
                out[i * c + j] = g.data()[j] * n + b.data()[j];
            }
        }
        let t = Tensor::new(x.shape(), out)?;
        let rg = self.rg(a.0) || self.rg(gain.0) || self.rg(bias.0);
        Ok(self.push(
            t,
            Op::LayerNorm {
                input: a.0,
                gain: gain.0,
                bias: bias.0,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        let (p, q) = (self.value(pred), self.value(target));
        if p.shape() != q.shape() {
            return Err(shape_err("mse_loss", p, q));
        }
        let n = p.numel().max(1) as f64;
        let loss = p
            .data()
            .iter()
            .zip(q.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let rg = self.rg(pred.0) || self.rg(target.0);
        Ok(self.push(Tensor::scalar(loss), Op::Mse(pred.0, target.0), rg))
    }

    /// Mean binary cross-entropy of sigmoid(`logits`) against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var, TensorError> {
        let z = self.value(logits);
        if z.numel() != targets.len() {
            return Err(TensorError::Shape {
                op: "bce_with_logits",
                left: z.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let n = targets.len().max(1) as f64;
        // log(1 + e^z) - y z, written to avoid overflow
        let loss = z
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let rg = self.rg(logits.0);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits: logits.0,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Multiplies by a fixed mask (already scaled for inverted dropout).
    pub fn dropout_with_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var, TensorError> {
        let x = self.value(a);
        if mask.len() != x.numel() {
            return Err(TensorError::Invalid("dropout mask length".into()));
        }
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let t = Tensor::new(x.shape(), data)?;
        let rg = self.rg(a.0);
        Ok(self.push(t, Op::Dropout { input: a.0, mask }, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        // only leaves keep gradients that callers can ask for
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let nodes = &self.nodes;
        let mut acc = |target: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[target].requires_grad {
                return;
            }
            let slot = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA = dC · Bᵀ
                acc(*a, &mut |da| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv.data()[p * n + j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                });
                // dB = Aᵀ · dC
                acc(*b, &mut |db| {
                    for i in 0..m {
                        for p in 0..k {
                            let a_ip = av.data()[i * k + p];
                            let row = &mut db[p * n..(p + 1) * n];
                            for (d, gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *d += a_ip * gv;
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                acc(*a, &mut |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, bias) => {
                let n = out.cols();
                acc(*a, &mut |d| add_into(d, g));
                acc(*bias, &mut |d| {
                    for (i, gv) in g.iter().enumerate() {
                        d[i % n] += gv;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::AddScalar(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Relu(a) => {
                let x = nodes[*a].value.data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = out.data();
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = (out.rows(), out.cols());
                let y = out.data();
                acc(*a, &mut |d| {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            d[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::ConcatCols(a, b) => {
                let r = out.rows();
                let p = nodes[*a].value.cols();
                let q = nodes[*b].value.cols();
                acc(*a, &mut |d| {
                    for i in 0..r {
                        add_into(&mut d[i * p..(i + 1) * p], &g[i * (p + q)..i * (p + q) + p]);
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..r {
                        add_into(
                            &mut d[i * q..(i + 1) * q],
                            &g[i * (p + q) + p..(i + 1) * (p + q)],
                        );
                    }
                });
            }
            Op::SliceCols { input, start } => {
                let (r, w) = (out.rows(), out.cols());
                let c = nodes[*input].value.cols();
                acc(*input, &mut |d| {
                    for i in 0..r {
                        add_into(&mut d[i * c + start..i * c + start + w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::SliceRows { input, start } => {
                let c = out.cols();
                acc(*input, &mut |d| add_into(&mut d[start * c..start * c + g.len()], g));
            }
            Op::RepeatRows(a) => {
                let c = out.cols();
                acc(*a, &mut |d| {
                    for chunk in g.chunks(c) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::MeanRows(a) => {
                let r = nodes[*a].value.rows();
                let c = out.cols();
                let inv = 1.0 / r as f64;
                acc(*a, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
            Op::LayerNorm {
                input,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (r, c) = (out.rows(), out.cols());
                let gv = nodes[*gain].value.data();
                acc(*bias, &mut |d| {
                    for (i, x) in g.iter().enumerate() {
                        d[i % c] += x;
                    }
                });
                acc(*gain, &mut |d| {
                    for (i, x) in g.iter().enumerate() {
                        d[i % c] += x * normalized[i];
                    }
                });
                acc(*input, &mut |d| {
                    let cf = c as f64;
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let dxhat: Vec<f64> = g[row.clone()]
                            .iter()
                            .zip(gv)
                            .map(|(a, b)| a * b)
                            .collect();
                        let xh = &normalized[row.clone()];
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[i * c + j] +=
                                inv_std[i] / cf * (cf * dxhat[j] - sum_d - xh[j] * sum_dx);
                        }
                    }
                });
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (nodes[*p].value.data(), nodes[*t].value.data());
                let k = 2.0 * g[0] / pv.len().max(1) as f64;
                acc(*p, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += k * (pv[i] - tv[i]);
                    }
                });
                acc(*t, &mut |d| {
                    for i in 0..d.len() {
                        d[i] -= k * (pv[i] - tv[i]);
                    }
                });
            }
            Op::BceWithLogits { logits, targets } => {
                let z = nodes[*logits].value.data();
                let k = g[0] / targets.len().max(1) as f64;
                acc(*logits, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += k * (sigmoid(z[i]) - targets[i]);
                    }
                });
            }
            Op::Dropout { input, mask } => acc(*input, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * mask[i];
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
