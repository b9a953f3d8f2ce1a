use super::{matmul_raw, transpose_raw, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    MeanRows(Var),
    Sum(Var),
    Mean(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so every node's inputs precede it and
/// a single reverse sweep is a valid topological traversal.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| Tensor {
            shape: node.value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn check_finite(&self, op: &'static str, v: Var) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(TensorError::NonFinite { op })
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).expect_matrix("matmul")?;
        let (k2, n) = self.value(b).expect_matrix("matmul")?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            rg,
            Op::MatMul(a, b),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).expect_matrix("transpose")?;
        let data = transpose_raw(self.value(a).data(), m, n);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data,
            },
            rg,
            Op::Transpose(a),
        ))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        self.check_finite(op, a)?;
        self.check_finite(op, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor {
            shape: va.shape.clone(),
            data,
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    fn row_broadcast(&self, op: &'static str, a: Var, row: Var) -> Result<usize> {
        let cols = self.value(a).cols();
        if self.value(row).numel() != cols {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        Ok(cols)
    }

    /// Adds a row vector to every row of `a` (broadcast over the leading dimension).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.row_broadcast("add_row", a, row)?;
        self.check_finite("add_row", a)?;
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + r[i % cols])
            .collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.rg(&[a, row]);
        Ok(self.push(t, rg, Op::AddRow(a, row)))
    }

    /// Multiplies every row of `a` elementwise by a row vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.row_broadcast("mul_row", a, row)?;
        self.check_finite("mul_row", a)?;
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * r[i % cols])
            .collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.rg(&[a, row]);
        Ok(self.push(t, rg, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let va = self.value(a);
        let t = Tensor {
            shape: va.shape.clone(),
            data: va.data().iter().map(|x| x * c).collect(),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(t, rg, Op::Scale(a, c)))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.check_finite("gelu", a)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let t = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(t, rg, Op::Gelu(a)))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layernorm(&mut self, a: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(TensorError::Contract(format!("layernorm eps must be > 0, got {eps}")));
        }
        self.check_finite("layernorm", a)?;
        let va = self.value(a);
        let cols = va.cols();
        let mut data = Vec::with_capacity(va.numel());
        let mut inv_std = Vec::with_capacity(va.rows());
        for row in va.data().chunks(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            data.extend(row.iter().map(|x| (x - mean) * inv));
        }
        let t = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(t, rg, Op::LayerNorm { x: a, inv_std }))
    }

    /// Softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_finite("softmax", a)?;
        let va = self.value(a);
        if axis >= va.rank() {
            return Err(TensorError::Contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                va.shape
            )));
        }
        let (outer, n, inner) = split_axis(&va.shape, axis);
        let src = va.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    data[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    data[at(j)] /= total;
                }
            }
        }
        let t = Tensor {
            shape: va.shape.clone(),
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(t, rg, Op::Softmax { x: a, axis }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
        let (_, cols) = self.value(first).expect_matrix("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.value(p).expect_matrix("concat_rows")?;
            if c != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor {
                shape: vec![rows, cols],
                data,
            },
            rg,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let (rows, _) = self.value(first).expect_matrix("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).expect_matrix("concat_cols")?;
            if r != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor {
                shape: vec![rows, cols],
                data,
            },
            rg,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).expect_matrix("slice_rows")?;
        if start >= end || end > rows {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: end,
                len: rows,
            });
        }
        let data = self.value(a).data()[start * cols..end * cols].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![end - start, cols],
                data,
            },
            rg,
            Op::SliceRows { x: a, start },
        ))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).expect_matrix("slice_cols")?;
        if start >= end || end > cols {
            return Err(TensorError::Index {
                op: "slice_cols",
                index: end,
                len: cols,
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + end]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![rows, end - start],
                data,
            },
            rg,
            Op::SliceCols { x: a, start },
        ))
    }

    /// Output row `i` is input row `index[i]`. Indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(a).expect_matrix("gather_rows")?;
        if index.is_empty() {
            return Err(TensorError::Contract("gather_rows with empty index".into()));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            if i >= rows {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            data.extend_from_slice(&src[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![index.len(), cols],
                data,
            },
            rg,
            Op::GatherRows {
                x: a,
                index: index.to_vec(),
            },
        ))
    }

    /// Column-wise mean, producing a `1 × cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.value(a).expect_matrix("mean_rows")?;
        let mut data = vec![0.0; cols];
        for row in self.value(a).data().chunks(cols) {
            for (d, x) in data.iter_mut().zip(row) {
                *d += x;
            }
        }
        data.iter_mut().for_each(|d| *d /= rows as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![1, cols],
                data,
            },
            rg,
            Op::MeanRows(a),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Sum(a)))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Mean(a)))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (_, cols) = self.value(a).expect_matrix("l2_normalize_rows")?;
        self.check_finite("l2_normalize_rows", a)?;
        let mut norms = Vec::new();
        let mut data = Vec::with_capacity(self.value(a).numel());
        for row in self.value(a).data().chunks(cols) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(TensorError::NonFinite {
                    op: "l2_normalize_rows (zero-norm row)",
                });
            }
            norms.push(norm);
            data.extend(row.iter().map(|x| x / norm));
        }
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(t, rg, Op::L2NormalizeRows { x: a, norms }))
    }

    /// Mean over rows of `-log softmax(logits_i)[targets_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(logits).expect_matrix("cross_entropy")?;
        self.check_finite("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![rows, cols],
                rhs: vec![targets.len()],
            });
        }
        let mut probs = Vec::with_capacity(rows * cols);
        let mut loss = 0.0;
        for (row, &t) in self.value(logits).data().chunks(cols).zip(targets) {
            if t >= cols {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: t,
                    len: cols,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|x| (x - lse).exp()));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / rows as f64),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every node that
    /// requires a gradient. Previous gradients are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.zero_grad();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g);
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let n = node.value.numel();
        f(node.grad.get_or_insert_with(|| vec![0.0; n]));
    }

    fn add_into(&mut self, v: Var, g: &[f64]) {
        self.accumulate(v, |acc| acc.iter_mut().zip(g).for_each(|(a, b)| *a += b));
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // Temporarily detach the op so input nodes can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let bt = transpose_raw(self.value(*b).data(), k, n);
                    let ga = matmul_raw(g, &bt, m, n, k);
                    self.add_into(*a, &ga);
                }
                if self.requires_grad(*b) {
                    let at = transpose_raw(self.value(*a).data(), m, k);
                    let gb = matmul_raw(&at, g, k, m, n);
                    self.add_into(*b, &gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let ga = transpose_raw(g, n, m);
                self.add_into(*a, &ga);
            }
            Op::Add(a, b) => {
                self.add_into(*a, g);
                self.add_into(*b, g);
            }
            Op::Sub(a, b) => {
                self.add_into(*a, g);
                self.accumulate(*b, |acc| acc.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let gb: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(g, x)| g * x).collect();
                let ga: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(g, y)| g * y).collect();
                self.add_into(*a, &ga);
                self.add_into(*b, &gb);
            }
            Op::AddRow(a, r) => {
                self.add_into(*a, g);
                let cols = self.value(*r).numel();
                self.accumulate(*r, |acc| {
                    for row in g.chunks(cols) {
                        acc.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                });
            }
            Op::MulRow(a, r) => {
                let cols = self.value(*r).numel();
                let rv = self.value(*r).data().to_vec();
                let ga: Vec<f64> = g.iter().enumerate().map(|(j, g)| g * rv[j % cols]).collect();
                let av = self.value(*a).data().to_vec();
                self.add_into(*a, &ga);
                self.accumulate(*r, |acc| {
                    for (j, (g, x)) in g.iter().zip(&av).enumerate() {
                        acc[j % cols] += g * x;
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(*a, |acc| acc.iter_mut().zip(g).for_each(|(x, y)| *x += c * y));
            }
            Op::Gelu(a) => {
                let ga: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, g)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.add_into(*a, &ga);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &self.nodes[i].value;
                let cols = y.cols();
                let n = cols as f64;
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, yr), inv) in g.chunks(cols).zip(y.data().chunks(cols)).zip(inv_std) {
                    let sum_g: f64 = gr.iter().sum();
                    let sum_gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(
                        gr.iter()
                            .zip(yr)
                            .map(|(gi, yi)| inv / n * (n * gi - sum_g - yi * sum_gy)),
                    );
                }
                self.add_into(*x, &gx);
            }
            Op::Softmax { x, axis } => {
                let y = &self.nodes[i].value;
                let (outer, n, inner) = split_axis(y.shape(), *axis);
                let yd = y.data();
                let mut gx = vec![0.0; yd.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + k;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * yd[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = yd[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                self.add_into(*x, &gx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.add_into(p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = self.nodes[i].value.rows();
                let total = self.nodes[i].value.cols();
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.accumulate(p, |acc| {
                        for r in 0..rows {
                            for c in 0..w {
                                acc[r * w + c] += g[r * total + start + c];
                            }
                        }
                    });
                    start += w;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = self.value(*x).cols();
                let off = start * cols;
                self.accumulate(*x, |acc| {
                    acc[off..off + g.len()].iter_mut().zip(g).for_each(|(a, b)| *a += b)
                });
            }
            Op::SliceCols { x, start } => {
                let cols = self.value(*x).cols();
                let w = self.nodes[i].value.cols();
                let start = *start;
                self.accumulate(*x, |acc| {
                    for (r, row) in g.chunks(w).enumerate() {
                        for (c, v) in row.iter().enumerate() {
                            acc[r * cols + start + c] += v;
                        }
                    }
                });
            }
            Op::GatherRows { x, index } => {
                let cols = self.value(*x).cols();
                self.accumulate(*x, |acc| {
                    for (row, &src) in g.chunks(cols).zip(index) {
                        acc[src * cols..(src + 1) * cols]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows() as f64;
                let cols = g.len();
                self.accumulate(*a, |acc| {
                    for (j, v) in acc.iter_mut().enumerate() {
                        *v += g[j % cols] / rows;
                    }
                });
            }
            Op::Sum(a) => {
                let g0 = g[0];
                self.accumulate(*a, |acc| acc.iter_mut().for_each(|v| *v += g0));
            }
            Op::Mean(a) => {
                let g0 = g[0] / self.value(*a).numel() as f64;
                self.accumulate(*a, |acc| acc.iter_mut().for_each(|v| *v += g0));
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &self.nodes[i].value;
                let cols = y.cols();
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, yr), norm) in g.chunks(cols).zip(y.data().chunks(cols)).zip(norms) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(gi, yi)| (gi - yi * dot) / norm));
                }
                self.add_into(*x, &gx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let rows = targets.len();
                let cols = probs.len() / rows;
                let scale = g[0] / rows as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * cols + t] -= scale;
                }
                self.add_into(*logits, &gl);
            }
        }
        self.nodes[i].op = op;
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
