//! Forward implementations and backward rules for every tape operation.

use rand::Rng;

use super::kernels::{mm_nn, mm_nt, mm_tn};
use super::{accumulate, numel, Node, Op, Tape, TensorError, Value};

/// Floor applied to probabilities inside the log of cross-entropy.
pub const PROB_CLAMP: f64 = 1e-12;

fn dims2(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [m, n] => Some((*m, *n)),
        _ => None,
    }
}

/// Rows and width of a value treated as a stack of rows: `[m, n]` or `[n]`.
fn as_rows(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [m, n] => Some((*m, *n)),
        [n] => Some((1, *n)),
        _ => None,
    }
}

impl Tape {
    fn node_shape(&self, v: Value) -> Vec<usize> {
        self.nodes.borrow()[v.id].shape.clone()
    }

    fn require_2d(&self, op: &'static str, v: Value) -> Result<(usize, usize), TensorError> {
        let shape = self.node_shape(v);
        dims2(&shape).ok_or(TensorError::BadShape {
            op,
            expected: "a 2-d matrix",
            got: shape,
        })
    }

    fn require_same_shape(&self, op: &'static str, a: Value, b: Value) -> Result<Vec<usize>, TensorError> {
        let sa = self.node_shape(a);
        let sb = self.node_shape(b);
        if sa != sb {
            return Err(TensorError::ShapeMismatch { op, lhs: sa, rhs: sb });
        }
        Ok(sa)
    }

    /// `a[m×k] · b[k×n] -> [m×n]`
    pub fn matmul(&self, a: Value, b: Value) -> Result<Value, TensorError> {
        let (m, k) = self.require_2d("matmul", a)?;
        let (k2, n) = self.require_2d("matmul", b)?;
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let rg = self.any_requires_grad(&[a, b]);
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.nodes.borrow();
            mm_nn(&nodes[a.id].data, m, k, &nodes[b.id].data, n, &mut out);
        }
        Ok(self.push(out, vec![m, n], rg, Op::Matmul(a, b)))
    }

    pub fn add(&self, a: Value, b: Value) -> Result<Value, TensorError> {
        let shape = self.require_same_shape("add", a, b)?;
        let rg = self.any_requires_grad(&[a, b]);
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.id]
                .data
                .iter()
                .zip(&nodes[b.id].data)
                .map(|(x, y)| x + y)
                .collect()
        };
        Ok(self.push(out, shape, rg, Op::Add(a, b)))
    }

    pub fn sub(&self, a: Value, b: Value) -> Result<Value, TensorError> {
        let shape = self.require_same_shape("sub", a, b)?;
        let rg = self.any_requires_grad(&[a, b]);
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.id]
                .data
                .iter()
                .zip(&nodes[b.id].data)
                .map(|(x, y)| x - y)
                .collect()
        };
        Ok(self.push(out, shape, rg, Op::Sub(a, b)))
    }

    /// Elementwise product (the ∘ of bilinear scoring).
    pub fn hadamard(&self, a: Value, b: Value) -> Result<Value, TensorError> {
        let shape = self.require_same_shape("hadamard", a, b)?;
        let rg = self.any_requires_grad(&[a, b]);
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.id]
                .data
                .iter()
                .zip(&nodes[b.id].data)
                .map(|(x, y)| x * y)
                .collect()
        };
        Ok(self.push(out, shape, rg, Op::Hadamard(a, b)))
    }

    /// `a[m×n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&self, a: Value, bias: Value) -> Result<Value, TensorError> {
        let (m, n) = self.require_2d("add_row_bias", a)?;
        let bshape = self.node_shape(bias);
        if bshape != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_bias",
                lhs: vec![m, n],
                rhs: bshape,
            });
        }
        let rg = self.any_requires_grad(&[a, bias]);
        let out = {
            let nodes = self.nodes.borrow();
            let bd = &nodes[bias.id].data;
            nodes[a.id]
                .data
                .chunks(n)
                .flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y).collect::<Vec<_>>())
                .collect()
        };
        Ok(self.push(out, vec![m, n], rg, Op::AddRowBias(a, bias)))
    }

    pub fn scale(&self, a: Value, c: f64) -> Value {
        let shape = self.node_shape(a);
        let rg = self.any_requires_grad(&[a]);
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.id].data.iter().map(|x| x * c).collect()
        };
        self.push(out, shape, rg, Op::Scale(a, c))
    }

    /// Multiply a tensor by a learnable scalar (single-element value).
    pub fn scale_by_scalar(&self, a: Value, s: Value) -> Result<Value, TensorError> {
        let sshape = self.node_shape(s);
        if numel(&sshape) != 1 {
            return Err(TensorError::BadShape {
                op: "scale_by_scalar",
                expected: "a single-element scalar",
                got: sshape,
            });
        }
        let shape = self.node_shape(a);
        let rg = self.any_requires_grad(&[a, s]);
        let out = {
            let nodes = self.nodes.borrow();
            let sv = nodes[s.id].data[0];
            nodes[a.id].data.iter().map(|x| x * sv).collect()
        };
        Ok(self.push(out, shape, rg, Op::ScaleByScalar(a, s)))
    }

    pub fn relu(&self, a: Value) -> Value {
        let shape = self.node_shape(a);
        let rg = self.any_requires_grad(&[a]);
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.id].data.iter().map(|x| x.max(0.0)).collect()
        };
        self.push(out, shape, rg, Op::Relu(a))
    }

    /// Elementwise `x^(-1/2)`; callers guarantee strictly positive input.
    pub fn rsqrt(&self, a: Value) -> Value {
        let shape = self.node_shape(a);
        let rg = self.any_requires_grad(&[a]);
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.id].data.iter().map(|x| 1.0 / x.sqrt()).collect()
        };
        self.push(out, shape, rg, Op::Rsqrt(a))
    }

    /// Softmax per row with max-subtraction; rows sum to 1 within 1e-12.
    pub fn row_softmax(&self, a: Value) -> Result<Value, TensorError> {
        let (m, n) = self.require_2d("row_softmax", a)?;
        let rg = self.any_requires_grad(&[a]);
        let out = {
            let nodes = self.nodes.borrow();
            let mut out = Vec::with_capacity(m * n);
            for row in nodes[a.id].data.chunks(n) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|x| (x - mx).exp()).collect();
                let sum: f64 = exps.iter().sum();
                out.extend(exps.iter().map(|e| e / sum));
            }
            out
        };
        Ok(self.push(out, vec![m, n], rg, Op::RowSoftmax(a)))
    }

    pub fn sum_all(&self, a: Value) -> Value {
        let rg = self.any_requires_grad(&[a]);
        let s: f64 = self.nodes.borrow()[a.id].data.iter().sum();
        self.push(vec![s], vec![], rg, Op::SumAll(a))
    }

    pub fn mean_all(&self, a: Value) -> Value {
        let rg = self.any_requires_grad(&[a]);
        let (s, len) = {
            let nodes = self.nodes.borrow();
            let d = &nodes[a.id].data;
            (d.iter().sum::<f64>(), d.len())
        };
        self.push(vec![s / len as f64], vec![], rg, Op::MeanAll(a))
    }

    /// `axis = 0`: column sums `[m×n] -> [n]`; `axis = 1`: row sums `-> [m]`.
    pub fn sum_axis(&self, a: Value, axis: usize) -> Result<Value, TensorError> {
        let (m, n) = self.require_2d("sum_axis", a)?;
        assert!(axis < 2, "sum_axis: axis must be 0 or 1");
        let rg = self.any_requires_grad(&[a]);
        let out = {
            let nodes = self.nodes.borrow();
            let d = &nodes[a.id].data;
            if axis == 0 {
                let mut out = vec![0.0; n];
                for row in d.chunks(n) {
                    for (o, x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                out
            } else {
                d.chunks(n).map(|row| row.iter().sum()).collect()
            }
        };
        let shape = if axis == 0 { vec![n] } else { vec![m] };
        Ok(self.push(out, shape, rg, Op::SumAxis(a, axis)))
    }

    pub fn mean_axis(&self, a: Value, axis: usize) -> Result<Value, TensorError> {
        let (m, n) = self.require_2d("mean_axis", a)?;
        assert!(axis < 2, "mean_axis: axis must be 0 or 1");
        let rg = self.any_requires_grad(&[a]);
        let div = if axis == 0 { m } else { n } as f64;
        let out = {
            let nodes = self.nodes.borrow();
            let d = &nodes[a.id].data;
            if axis == 0 {
                let mut out = vec![0.0; n];
                for row in d.chunks(n) {
                    for (o, x) in out.iter_mut().zip(row) {
                        *o += x;
                    }
                }
                out.iter().map(|x| x / div).collect()
            } else {
                d.chunks(n).map(|row| row.iter().sum::<f64>() / div).collect()
            }
        };
        let shape = if axis == 0 { vec![n] } else { vec![m] };
        Ok(self.push(out, shape, rg, Op::MeanAxis(a, axis)))
    }

    /// Stacks values vertically. Accepts `[r, n]` blocks and `[n]` single rows.
    pub fn concat_rows(&self, parts: &[Value]) -> Result<Value, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Contract {
                op: "concat_rows",
                msg: "no values to concatenate".into(),
            });
        }
        let mut width = None;
        let mut rows = 0;
        for &p in parts {
            let shape = self.node_shape(p);
            let (r, n) = as_rows(&shape).ok_or(TensorError::BadShape {
                op: "concat_rows",
                expected: "1-d or 2-d values",
                got: shape.clone(),
            })?;
            match width {
                None => width = Some(n),
                Some(w) if w != n => {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat_rows",
                        lhs: vec![rows, w],
                        rhs: shape,
                    })
                }
                _ => {}
            }
            rows += r;
        }
        let n = width.unwrap();
        let rg = self.any_requires_grad(parts);
        let out = {
            let nodes = self.nodes.borrow();
            let mut out = Vec::with_capacity(rows * n);
            for &p in parts {
                out.extend_from_slice(&nodes[p.id].data);
            }
            out
        };
        Ok(self.push(out, vec![rows, n], rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn transpose(&self, a: Value) -> Result<Value, TensorError> {
        let (m, n) = self.require_2d("transpose", a)?;
        let rg = self.any_requires_grad(&[a]);
        let out = {
            let nodes = self.nodes.borrow();
            let d = &nodes[a.id].data;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = d[i * n + j];
                }
            }
            out
        };
        Ok(self.push(out, vec![n, m], rg, Op::Transpose(a)))
    }

    /// Row gather: `a[m×n]` at `idx -> [len(idx)×n]`. Duplicate indices allowed.
    pub fn gather_rows(&self, a: Value, idx: &[usize]) -> Result<Value, TensorError> {
        let (m, n) = self.require_2d("gather_rows", a)?;
        for &i in idx {
            if i >= m {
                return Err(TensorError::IndexOutOfBounds {
                    op: "gather_rows",
                    index: i,
                    bound: m,
                });
            }
        }
        let rg = self.any_requires_grad(&[a]);
        let out = {
            let nodes = self.nodes.borrow();
            let d = &nodes[a.id].data;
            let mut out = Vec::with_capacity(idx.len() * n);
            for &i in idx {
                out.extend_from_slice(&d[i * n..(i + 1) * n]);
            }
            out
        };
        Ok(self.push(out, vec![idx.len(), n], rg, Op::GatherRows(a, idx.to_vec())))
    }

    /// Repeats a row vector `v[n]` into `[m×n]`.
    pub fn broadcast_row(&self, v: Value, m: usize) -> Result<Value, TensorError> {
        let shape = self.node_shape(v);
        let [n] = shape[..] else {
            return Err(TensorError::BadShape {
                op: "broadcast_row",
                expected: "a 1-d vector",
                got: shape,
            });
        };
        let rg = self.any_requires_grad(&[v]);
        let out = {
            let nodes = self.nodes.borrow();
            let d = &nodes[v.id].data;
            let mut out = Vec::with_capacity(m * n);
            for _ in 0..m {
                out.extend_from_slice(d);
            }
            out
        };
        Ok(self.push(out, vec![m, n], rg, Op::BroadcastRow(v, m)))
    }

    /// `out[i,j] = a[i,j] * v[i]`
    pub fn scale_rows(&self, a: Value, v: Value) -> Result<Value, TensorError> {
        let (m, n) = self.require_2d("scale_rows", a)?;
        let vshape = self.node_shape(v);
        if vshape != [m] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                lhs: vec![m, n],
                rhs: vshape,
            });
        }
        let rg = self.any_requires_grad(&[a, v]);
        let out = {
            let nodes = self.nodes.borrow();
            let vd = &nodes[v.id].data;
            nodes[a.id]
                .data
                .chunks(n)
                .zip(vd)
                .flat_map(|(row, &s)| row.iter().map(move |x| x * s).collect::<Vec<_>>())
                .collect()
        };
        Ok(self.push(out, vec![m, n], rg, Op::ScaleRows(a, v)))
    }

    /// `out[i,j] = a[i,j] * v[j]`
    pub fn scale_cols(&self, a: Value, v: Value) -> Result<Value, TensorError> {
        let (m, n) = self.require_2d("scale_cols", a)?;
        let vshape = self.node_shape(v);
        if vshape != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_cols",
                lhs: vec![m, n],
                rhs: vshape,
            });
        }
        let rg = self.any_requires_grad(&[a, v]);
        let out = {
            let nodes = self.nodes.borrow();
            let vd = &nodes[v.id].data;
            nodes[a.id]
                .data
                .chunks(n)
                .flat_map(|row| row.iter().zip(vd).map(|(x, s)| x * s).collect::<Vec<_>>())
                .collect()
        };
        Ok(self.push(out, vec![m, n], rg, Op::ScaleCols(a, v)))
    }

    pub fn reshape(&self, a: Value, shape: Vec<usize>) -> Result<Value, TensorError> {
        let old = self.node_shape(a);
        if numel(&old) != numel(&shape) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: old,
                rhs: shape,
            });
        }
        let rg = self.any_requires_grad(&[a]);
        let out = self.nodes.borrow()[a.id].data.clone();
        Ok(self.push(out, shape, rg, Op::Reshape(a)))
    }

    /// Inverted dropout: at train time entries are dropped with probability
    /// `p` and survivors scaled by `1/(1-p)`; with `train` off this is the
    /// identity map (`a` is returned unchanged, no node added).
    pub fn dropout<R: Rng>(&self, a: Value, p: f64, train: bool, rng: &mut R) -> Value {
        assert!((0.0..1.0).contains(&p), "dropout rate must be in [0, 1)");
        if !train || p == 0.0 {
            return a;
        }
        let shape = self.node_shape(a);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..numel(&shape))
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let rg = self.any_requires_grad(&[a]);
        let out = {
            let nodes = self.nodes.borrow();
            nodes[a.id].data.iter().zip(&mask).map(|(x, m)| x * m).collect()
        };
        self.push(out, shape, rg, Op::Dropout(a, mask))
    }

    /// Mean negative log-likelihood `-(1/m)·Σ log probs[i, labels[i]]`.
    ///
    /// Probabilities at a true label below [`PROB_CLAMP`] are clamped (and
    /// counted); the clamped entries contribute zero gradient.
    pub fn cross_entropy(&self, probs: Value, labels: &[usize]) -> Result<Value, TensorError> {
        let (m, c) = self.require_2d("cross_entropy", probs)?;
        if labels.len() != m {
            return Err(TensorError::Contract {
                op: "cross_entropy",
                msg: format!("{} labels for {} rows", labels.len(), m),
            });
        }
        for &l in labels {
            if l >= c {
                return Err(TensorError::IndexOutOfBounds {
                    op: "cross_entropy",
                    index: l,
                    bound: c,
                });
            }
        }
        let rg = self.any_requires_grad(&[probs]);
        let (loss, clamped) = {
            let nodes = self.nodes.borrow();
            let d = &nodes[probs.id].data;
            for (i, row) in d.chunks(c).enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(TensorError::Contract {
                        op: "cross_entropy",
                        msg: format!("row {i} sums to {s}, expected 1 within 1e-9"),
                    });
                }
            }
            let mut acc = 0.0;
            let mut clamped = 0u64;
            for (row, &l) in d.chunks(c).zip(labels) {
                let p = row[l];
                if p <= PROB_CLAMP {
                    clamped += 1;
                }
                acc -= p.max(PROB_CLAMP).ln();
            }
            (acc / m as f64, clamped)
        };
        if clamped > 0 {
            self.bump_clamp_warnings(clamped);
            log::warn!("cross_entropy clamped {clamped} probabilities at {PROB_CLAMP}");
        }
        Ok(self.push(vec![loss], vec![], rg, Op::CrossEntropy(probs, labels.to_vec())))
    }

    /// Pairwise cosine similarity of rows: `out[i,j] = aᵢ·bⱼ/(‖aᵢ‖‖bⱼ‖)`.
    /// Zero-norm rows produce 0 for all their entries (and zero gradient).
    pub fn cosine_rows(&self, a: Value, b: Value) -> Result<Value, TensorError> {
        let (m, d) = self.require_2d("cosine_rows", a)?;
        let (n, d2) = self.require_2d("cosine_rows", b)?;
        if d != d2 {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_rows",
                lhs: vec![m, d],
                rhs: vec![n, d2],
            });
        }
        let rg = self.any_requires_grad(&[a, b]);
        let out = {
            let nodes = self.nodes.borrow();
            let ad = &nodes[a.id].data;
            let bd = &nodes[b.id].data;
            let na: Vec<f64> = row_norms(ad, d);
            let nb: Vec<f64> = row_norms(bd, d);
            let mut out = vec![0.0; m * n];
            mm_nt(ad, m, d, bd, n, &mut out);
            for i in 0..m {
                for j in 0..n {
                    let denom = na[i] * nb[j];
                    out[i * n + j] = if denom == 0.0 { 0.0 } else { out[i * n + j] / denom };
                }
            }
            out
        };
        Ok(self.push(out, vec![m, n], rg, Op::CosineRows(a, b)))
    }
}

fn row_norms(data: &[f64], width: usize) -> Vec<f64> {
    data.chunks(width)
        .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

/// Routes the upstream gradient `gout` of node `id` into its parents.
pub(crate) fn backward_step(
    tape: &Tape,
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    id: usize,
    gout: &[f64],
) {
    match &nodes[id].op {
        Op::Leaf => unreachable!("leaves are handled by the sweep"),
        Op::Matmul(a, b) => {
            let (m, k) = dims2(&nodes[a.id].shape).unwrap();
            let n = nodes[b.id].shape[1];
            let corrupt = tape.corrupt_matmul_backward.get();
            accumulate(nodes, grads, *a, |ga| {
                let mut tmp = vec![0.0; m * k];
                mm_nt(gout, m, n, &nodes[b.id].data, k, &mut tmp);
                for (g, t) in ga.iter_mut().zip(&tmp) {
                    *g += corrupt * t;
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                mm_tn(&nodes[a.id].data, m, k, gout, n, gb);
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, |ga| axpy(ga, gout, 1.0));
            accumulate(nodes, grads, *b, |gb| axpy(gb, gout, 1.0));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, |ga| axpy(ga, gout, 1.0));
            accumulate(nodes, grads, *b, |gb| axpy(gb, gout, -1.0));
        }
        Op::Hadamard(a, b) => {
            accumulate(nodes, grads, *a, |ga| {
                for ((g, go), x) in ga.iter_mut().zip(gout).zip(&nodes[b.id].data) {
                    *g += go * x;
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for ((g, go), x) in gb.iter_mut().zip(gout).zip(&nodes[a.id].data) {
                    *g += go * x;
                }
            });
        }
        Op::AddRowBias(a, bias) => {
            let n = nodes[bias.id].data.len();
            accumulate(nodes, grads, *a, |ga| axpy(ga, gout, 1.0));
            accumulate(nodes, grads, *bias, |gb| {
                for row in gout.chunks(n) {
                    for (g, x) in gb.iter_mut().zip(row) {
                        *g += x;
                    }
                }
            });
        }
        Op::Scale(a, c) => {
            accumulate(nodes, grads, *a, |ga| axpy(ga, gout, *c));
        }
        Op::ScaleByScalar(a, s) => {
            let sv = nodes[s.id].data[0];
            accumulate(nodes, grads, *a, |ga| axpy(ga, gout, sv));
            accumulate(nodes, grads, *s, |gs| {
                gs[0] += gout
                    .iter()
                    .zip(&nodes[a.id].data)
                    .map(|(g, x)| g * x)
                    .sum::<f64>();
            });
        }
        Op::Relu(a) => {
            accumulate(nodes, grads, *a, |ga| {
                for ((g, go), x) in ga.iter_mut().zip(gout).zip(&nodes[a.id].data) {
                    if *x > 0.0 {
                        *g += go;
                    }
                }
            });
        }
        Op::Rsqrt(a) => {
            // y = x^(-1/2) => dy/dx = -y³/2; y is this node's output.
            let y = &nodes[id].data;
            accumulate(nodes, grads, *a, |ga| {
                for ((g, go), yv) in ga.iter_mut().zip(gout).zip(y) {
                    *g += go * (-0.5 * yv * yv * yv);
                }
            });
        }
        Op::RowSoftmax(a) => {
            let n = nodes[id].shape[1];
            let y = &nodes[id].data;
            accumulate(nodes, grads, *a, |ga| {
                for ((grow, gorow), yrow) in ga.chunks_mut(n).zip(gout.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = gorow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((g, go), yv) in grow.iter_mut().zip(gorow).zip(yrow) {
                        *g += yv * (go - dot);
                    }
                }
            });
        }
        Op::SumAll(a) => {
            accumulate(nodes, grads, *a, |ga| {
                for g in ga.iter_mut() {
                    *g += gout[0];
                }
            });
        }
        Op::MeanAll(a) => {
            let inv = 1.0 / nodes[a.id].data.len() as f64;
            accumulate(nodes, grads, *a, |ga| {
                for g in ga.iter_mut() {
                    *g += gout[0] * inv;
                }
            });
        }
        Op::SumAxis(a, axis) => {
            let (m, n) = dims2(&nodes[a.id].shape).unwrap();
            accumulate(nodes, grads, *a, |ga| {
                if *axis == 0 {
                    for row in ga.chunks_mut(n) {
                        for (g, go) in row.iter_mut().zip(gout) {
                            *g += go;
                        }
                    }
                } else {
                    for (row, go) in ga.chunks_mut(n).zip(gout.iter().take(m)) {
                        for g in row.iter_mut() {
                            *g += go;
                        }
                    }
                }
            });
        }
        Op::MeanAxis(a, axis) => {
            let (m, n) = dims2(&nodes[a.id].shape).unwrap();
            let inv = 1.0 / if *axis == 0 { m } else { n } as f64;
            accumulate(nodes, grads, *a, |ga| {
                if *axis == 0 {
                    for row in ga.chunks_mut(n) {
                        for (g, go) in row.iter_mut().zip(gout) {
                            *g += go * inv;
                        }
                    }
                } else {
                    for (row, go) in ga.chunks_mut(n).zip(gout.iter().take(m)) {
                        for g in row.iter_mut() {
                            *g += go * inv;
                        }
                    }
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = nodes[p.id].data.len();
                let chunk = &gout[offset..offset + len];
                accumulate(nodes, grads, *p, |gp| axpy(gp, chunk, 1.0));
                offset += len;
            }
        }
        Op::Transpose(a) => {
            let (m, n) = dims2(&nodes[a.id].shape).unwrap();
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += gout[j * m + i];
                    }
                }
            });
        }
        Op::GatherRows(a, idx) => {
            let n = nodes[a.id].shape[1];
            accumulate(nodes, grads, *a, |ga| {
                for (&i, grow) in idx.iter().zip(gout.chunks(n)) {
                    for (g, go) in ga[i * n..(i + 1) * n].iter_mut().zip(grow) {
                        *g += go;
                    }
                }
            });
        }
        Op::BroadcastRow(v, _) => {
            let n = nodes[v.id].data.len();
            accumulate(nodes, grads, *v, |gv| {
                for row in gout.chunks(n) {
                    for (g, go) in gv.iter_mut().zip(row) {
                        *g += go;
                    }
                }
            });
        }
        Op::ScaleRows(a, v) => {
            let (m, n) = dims2(&nodes[a.id].shape).unwrap();
            accumulate(nodes, grads, *a, |ga| {
                for ((grow, gorow), s) in ga
                    .chunks_mut(n)
                    .zip(gout.chunks(n))
                    .zip(&nodes[v.id].data)
                {
                    for (g, go) in grow.iter_mut().zip(gorow) {
                        *g += go * s;
                    }
                }
            });
            accumulate(nodes, grads, *v, |gv| {
                for i in 0..m {
                    gv[i] += gout[i * n..(i + 1) * n]
                        .iter()
                        .zip(&nodes[a.id].data[i * n..(i + 1) * n])
                        .map(|(go, x)| go * x)
                        .sum::<f64>();
                }
            });
        }
        Op::ScaleCols(a, v) => {
            let n = nodes[v.id].data.len();
            accumulate(nodes, grads, *a, |ga| {
                for (grow, gorow) in ga.chunks_mut(n).zip(gout.chunks(n)) {
                    for ((g, go), s) in grow.iter_mut().zip(gorow).zip(&nodes[v.id].data) {
                        *g += go * s;
                    }
                }
            });
            accumulate(nodes, grads, *v, |gv| {
                for (gorow, arow) in gout.chunks(n).zip(nodes[a.id].data.chunks(n)) {
                    for ((g, go), x) in gv.iter_mut().zip(gorow).zip(arow) {
                        *g += go * x;
                    }
                }
            });
        }
        Op::Reshape(a) => {
            accumulate(nodes, grads, *a, |ga| axpy(ga, gout, 1.0));
        }
        Op::Dropout(a, mask) => {
            accumulate(nodes, grads, *a, |ga| {
                for ((g, go), m) in ga.iter_mut().zip(gout).zip(mask) {
                    *g += go * m;
                }
            });
        }
        Op::CrossEntropy(probs, labels) => {
            let c = nodes[probs.id].shape[1];
            let m = labels.len() as f64;
            accumulate(nodes, grads, *probs, |gp| {
                for (i, &l) in labels.iter().enumerate() {
                    let p = nodes[probs.id].data[i * c + l];
                    if p > PROB_CLAMP {
                        gp[i * c + l] -= gout[0] / (m * p);
                    }
                }
            });
        }
        Op::CosineRows(a, b) => {
            let (m, d) = dims2(&nodes[a.id].shape).unwrap();
            let n = nodes[b.id].shape[0];
            let ad = &nodes[a.id].data;
            let bd = &nodes[b.id].data;
            let na = row_norms(ad, d);
            let nb = row_norms(bd, d);
            let y = &nodes[id].data;
            // dc_ij/da_i = (b_j/‖b_j‖ − c_ij · a_i/‖a_i‖) / ‖a_i‖
            accumulate(nodes, grads, *a, |ga| {
                for i in 0..m {
                    if na[i] == 0.0 {
                        continue;
                    }
                    let arow = &ad[i * d..(i + 1) * d];
                    let garow = &mut ga[i * d..(i + 1) * d];
                    for j in 0..n {
                        if nb[j] == 0.0 {
                            continue;
                        }
                        let g = gout[i * n + j];
                        if g == 0.0 {
                            continue;
                        }
                        let c = y[i * n + j];
                        let brow = &bd[j * d..(j + 1) * d];
                        for ((gv, &bv), &av) in garow.iter_mut().zip(brow).zip(arow) {
                            *gv += g * (bv / nb[j] - c * av / na[i]) / na[i];
                        }
                    }
                }
            });
            accumulate(nodes, grads, *b, |gb| {
                for j in 0..n {
                    if nb[j] == 0.0 {
                        continue;
                    }
                    let brow = &bd[j * d..(j + 1) * d];
                    let gbrow = &mut gb[j * d..(j + 1) * d];
                    for i in 0..m {
                        if na[i] == 0.0 {
                            continue;
                        }
                        let g = gout[i * n + j];
                        if g == 0.0 {
                            continue;
                        }
                        let c = y[i * n + j];
                        let arow = &ad[i * d..(i + 1) * d];
                        for ((gv, &av), &bv) in gbrow.iter_mut().zip(arow).zip(brow) {
                            *gv += g * (av / na[i] - c * bv / nb[j]) / nb[j];
                        }
                    }
                }
            });
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
