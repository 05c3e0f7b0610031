//! Define-by-run reverse-mode differentiation over a closed set of primitives.
//!
//! Every method on [`Tape`] evaluates one primitive immediately and appends a
//! node holding its value and whatever the backward rule needs. Node ids are
//! assigned in execution order, so the node list is already topologically
//! sorted and [`Tape::backward`] simply walks it in reverse.
//!
//! Layout operations (permute, window partition, cyclic shift, row gather)
//! all lower to a single gather-by-index node whose backward is a
//! scatter-add through the same index map.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::kernels::{matmul_nn_acc, matmul_nt_acc, matmul_tn_acc};
use super::tensor::{strides, DType, Tensor};
use crate::error::{Result, TallError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `x + y` where `y` repeats every `y.len()` elements of `x`.
    AddTiled(Var, Var),
    /// `[b?, m, k] x [b?, k, n]` (or `[b?, n, k]` when `trans_b`).
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Reshape(Var),
    Gather {
        x: Var,
        index: Arc<[usize]>,
    },
    MeanRows {
        x: Var,
        rows: Arc<[usize]>,
    },
    Sum(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
        active: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation graph plus the values of every intermediate.
#[derive(Debug)]
pub struct Tape {
    dtype: DType,
    nodes: Vec<Node>,
    names: BTreeMap<String, Var>,
}

impl Tape {
    pub fn new(dtype: DType) -> Self {
        Tape {
            dtype,
            nodes: Vec::new(),
            names: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::with_dtype(&node.shape, node.value.clone(), self.dtype).expect("node tensor")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn named(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    fn push(&mut self, mut value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.dtype.round_slice(&mut value);
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_dtype(&self, t: &Tensor) -> Result<()> {
        if t.dtype() != self.dtype {
            return Err(TallError::config(format!(
                "tensor dtype {:?} does not match tape dtype {:?}",
                t.dtype(),
                self.dtype
            )));
        }
        Ok(())
    }

    /// Adds an input. Gradients flow to it when the tensor requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.check_dtype(t)?;
        Ok(self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.needs_grad()))
    }

    /// Adds a named input that always participates in differentiation.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Result<Var> {
        self.check_dtype(t)?;
        let v = self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, true);
        self.names.insert(name.to_string(), v);
        Ok(v)
    }

    /// Adds a non-differentiable input from raw values.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TallError::shape("constant", shape, &[data.len()]));
        }
        Ok(self.push(data, shape.to_vec(), Op::Leaf, false))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TallError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, self.shape(a).to_vec(), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, self.shape(a).to_vec(), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, self.shape(a).to_vec(), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        Ok(self.push(value, self.shape(a).to_vec(), Op::Scale(a, s), rg))
    }

    /// Broadcast add: `y` is repeated along the leading elements of `x`.
    /// Covers bias rows (`[n,d] + [d]`) and per-window tables
    /// (`[w,h,i,j] + [h,i,j]`).
    pub fn add_tiled(&mut self, x: Var, y: Var) -> Result<Var> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != ys[..] {
            return Err(TallError::shape("add_tiled", xs, ys));
        }
        let yv = self.value(y);
        let mut value = self.value(x).to_vec();
        for chunk in value.chunks_exact_mut(yv.len()) {
            add_into(chunk, yv);
        }
        let rg = self.rg(x) || self.rg(y);
        Ok(self.push(value, xs.to_vec(), Op::AddTiled(x, y), rg))
    }

    /// 2-D or batched matrix product. With `trans_b`, `b` is read as its
    /// transpose over the last two axes.
    pub fn matmul_ex(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || TallError::shape("matmul", &sa, &sb);
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) => {
                let (bk, bn) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                if sa[1] != bk {
                    return Err(bad());
                }
                (1, sa[0], sa[1], bn)
            }
            (3, 3) => {
                let (bk, bn) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                if sa[0] != sb[0] || sa[2] != bk {
                    return Err(bad());
                }
                (sa[0], sa[1], sa[2], bn)
            }
            _ => return Err(bad()),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for bi in 0..batch {
                let ab = &av[bi * m * k..(bi + 1) * m * k];
                let bb = &bv[bi * k * n..(bi + 1) * k * n];
                let ob = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    matmul_nt_acc(ab, bb, ob, m, k, n);
                } else {
                    matmul_nn_acc(ab, bb, ob, m, k, n);
                }
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            out,
            shape,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| TallError::shape("softmax", &shape, &[]))?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(d) {
            softmax_row(row);
        }
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last axis followed by `* gamma + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| TallError::shape("layer_norm", &shape, &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TallError::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| gelu(v)).collect();
        let rg = self.rg(x);
        Ok(self.push(out, self.shape(x).to_vec(), Op::Gelu(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(x);
        Ok(self.push(out, self.shape(x).to_vec(), Op::Relu(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(TallError::shape("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(value, shape.to_vec(), Op::Reshape(x), rg))
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Arc<[usize]>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if shape.iter().product::<usize>() != index.len() {
            return Err(TallError::shape("gather", shape, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(TallError::shape("gather", self.shape(x), &[bad]));
        }
        let xv = self.value(x);
        let value = index.iter().map(|&i| xv[i]).collect();
        let rg = self.rg(x);
        Ok(self.push(value, shape.to_vec(), Op::Gather { x, index }, rg))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (index, out_shape) =
            permute_index(&shape, axes).ok_or_else(|| TallError::shape("permute", &shape, axes))?;
        self.gather(x, index.into(), &out_shape)
    }

    /// Selects rows of a `[n, d]` tensor, producing `[rows.len(), d]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TallError::shape("gather_rows", &shape, &[2]));
        }
        let d = shape[1];
        let index: Vec<usize> = rows
            .iter()
            .flat_map(|&r| (r * d..r * d + d).collect::<Vec<_>>())
            .collect();
        self.gather(x, index.into(), &[rows.len(), d])
    }

    /// Splits a `[h, w, c]` map into `[windows, win*win, c]` windows, row-major
    /// over windows and over positions within a window.
    pub fn window_partition(&mut self, x: Var, window: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let index = window_partition_index(&shape, window)
            .ok_or_else(|| TallError::shape("window_partition", &shape, &[window]))?;
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let nw = (h / window) * (w / window);
        self.gather(x, index.into(), &[nw, window * window, c])
    }

    /// Inverse of [`Tape::window_partition`].
    pub fn window_unpartition(&mut self, x: Var, window: usize, h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        let fwd = window_partition_index(&[h, w, c], window)
            .ok_or_else(|| TallError::shape("window_unpartition", &shape, &[h, w, window]))?;
        if fwd.len() != self.value(x).len() {
            return Err(TallError::shape("window_unpartition", &shape, &[h, w, c]));
        }
        let index = invert_permutation(&fwd);
        self.gather(x, index.into(), &[h, w, c])
    }

    /// Cyclic roll of a `[h, w, c]` map: `out[i, j] = x[(i - dy) mod h, (j - dx) mod w]`.
    pub fn cyclic_shift(&mut self, x: Var, dy: isize, dx: isize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(TallError::shape("cyclic_shift", &shape, &[3]));
        }
        let index = cyclic_shift_index(&shape, dy, dx);
        self.gather(x, index.into(), &shape)
    }

    /// Mean over a subset of rows of a `[n, d]` tensor, giving `[d]`.
    pub fn mean_rows(&mut self, x: Var, rows: Arc<[usize]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(TallError::shape("mean_rows", &shape, &[rows.len()]));
        }
        let d = shape[1];
        let xv = self.value(x);
        let mut out = vec![0.0; d];
        for &r in rows.iter() {
            for (o, v) in out.iter_mut().zip(&xv[r * d..(r + 1) * d]) {
                *o += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(x);
        Ok(self.push(out, vec![d], Op::MeanRows { x, rows }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        Ok(self.push(vec![s], vec![1], Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean softmax cross-entropy of `[n, k]` logits against class labels.
    /// The target probability is clamped to `[clamp, 1 - clamp]`; clamped
    /// rows contribute zero gradient.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], clamp: f64) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TallError::shape("softmax_cross_entropy", &shape, &[labels.len()]));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TallError::config(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        let mut active = Vec::with_capacity(labels.len());
        for (row, &y) in probs.chunks_exact_mut(k).zip(labels) {
            softmax_row(row);
            let p = row[y];
            let pc = p.clamp(clamp, 1.0 - clamp);
            active.push(pc == p);
            loss -= pc.ln();
        }
        loss /= labels.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            vec![loss],
            vec![1],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                active,
            },
            rg,
        ))
    }

    /// Reverse pass from `output` seeded with `seed`.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if self.nodes.is_empty() || output.0 >= self.nodes.len() {
            return Err(TallError::Usage(
                "backward called before any forward op was recorded".into(),
            ));
        }
        if seed.shape() != self.shape(output) {
            return Err(TallError::shape("backward seed", seed.shape(), self.shape(output)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.data().to_vec());

        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(Gradients {
            grads,
            names: self.names.clone(),
            shapes: self.nodes.iter().map(|n| n.shape.clone()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| s.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, k) => acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(o, v)| *o += k * v)),
            Op::AddTiled(x, y) => {
                acc(*x, &mut |s| add_into(s, g));
                acc(*y, &mut |s| {
                    for chunk in g.chunks_exact(s.len()) {
                        add_into(s, chunk);
                    }
                });
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |s| {
                    for bi in 0..*batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let bb = &bv[bi * k * n..(bi + 1) * k * n];
                        let sb = &mut s[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            // dA = dC * B  (B stored [n, k])
                            matmul_nn_acc(gb, bb, sb, m, n, k);
                        } else {
                            // dA = dC * B^T (B stored [k, n])
                            matmul_nt_acc(gb, bb, sb, m, n, k);
                        }
                    }
                });
                acc(*b, &mut |s| {
                    for bi in 0..*batch {
                        let gb = &g[bi * m * n..(bi + 1) * m * n];
                        let ab = &av[bi * m * k..(bi + 1) * m * k];
                        let sb = &mut s[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            // dB[n,k] = dC^T * A
                            matmul_tn_acc(gb, ab, sb, m, n, k);
                        } else {
                            // dB[k,n] = A^T * dC
                            matmul_tn_acc(ab, gb, sb, m, k, n);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let d = *node.shape.last().unwrap();
                let y = &node.value;
                acc(*x, &mut |s| {
                    for ((srow, grow), yrow) in s
                        .chunks_exact_mut(d)
                        .zip(g.chunks_exact(d))
                        .zip(y.chunks_exact(d))
                    {
                        let dotp: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            srow[j] += yrow[j] * (grow[j] - dotp);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.shape.last().unwrap();
                let gv = self.value(*gamma);
                acc(*x, &mut |s| {
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[j];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            s[r * d + j] += rs * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                });
                acc(*gamma, &mut |s| {
                    for (grow, hrow) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            s[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*beta, &mut |s| {
                    for grow in g.chunks_exact(d) {
                        add_into(s, grow);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * gelu_grad(xv[i]);
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        if xv[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::Gather { x, index } => acc(*x, &mut |s| {
                for (gi, &src) in g.iter().zip(index.iter()) {
                    s[src] += gi;
                }
            }),
            Op::MeanRows { x, rows } => {
                let d = node.shape[0];
                let inv = 1.0 / rows.len() as f64;
                acc(*x, &mut |s| {
                    for &r in rows.iter() {
                        for (o, v) in s[r * d..(r + 1) * d].iter_mut().zip(g) {
                            *o += v * inv;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|o| *o += g[0])),
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
                active,
            } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |s| {
                    for (r, (&y, &on)) in labels.iter().zip(active).enumerate() {
                        if !on {
                            continue;
                        }
                        for j in 0..k {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            s[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    names: BTreeMap<String, Var>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of any node reached by the reverse pass.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for every named parameter; zeros where the output does not
    /// depend on the parameter.
    pub fn named(&self) -> BTreeMap<String, Tensor> {
        self.names
            .iter()
            .map(|(name, &v)| {
                let shape = &self.shapes[v.0];
                let data = match self.get(v) {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; shape.iter().product()],
                };
                // Gradients stay in f64 regardless of the forward precision.
                let t = Tensor::with_dtype(shape, data, DType::F64).expect("grad tensor");
                (name.clone(), t)
            })
            .collect()
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// `tanh` through a single `exp`, noticeably cheaper than libm's `tanh`.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = fast_tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Gather index and output shape for an axis permutation.
pub fn permute_index(shape: &[usize], axes: &[usize]) -> Option<(Vec<usize>, Vec<usize>)> {
    let rank = shape.len();
    if axes.len() != rank {
        return None;
    }
    let mut seen = vec![false; rank];
    for &a in axes {
        if a >= rank || seen[a] {
            return None;
        }
        seen[a] = true;
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let total: usize = shape.iter().product();
    let mut index = Vec::with_capacity(total);
    let mut coord = vec![0usize; rank];
    for _ in 0..total {
        let src: usize = (0..rank).map(|i| coord[i] * in_strides[axes[i]]).sum();
        index.push(src);
        for i in (0..rank).rev() {
            coord[i] += 1;
            if coord[i] < out_shape[i] {
                break;
            }
            coord[i] = 0;
        }
    }
    Some((index, out_shape))
}

/// Gather index for window partition of `[h, w, c]` into `[nw, win*win, c]`.
pub fn window_partition_index(shape: &[usize], window: usize) -> Option<Vec<usize>> {
    if shape.len() != 3 || window == 0 || !shape[0].is_multiple_of(window) || !shape[1].is_multiple_of(window) {
        return None;
    }
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut index = Vec::with_capacity(h * w * c);
    for wy in 0..h / window {
        for wx in 0..w / window {
            for iy in 0..window {
                for ix in 0..window {
                    let (y, x) = (wy * window + iy, wx * window + ix);
                    let base = (y * w + x) * c;
                    index.extend(base..base + c);
                }
            }
        }
    }
    Some(index)
}

/// Gather index for a cyclic roll of `[h, w, c]` by `(dy, dx)`.
pub fn cyclic_shift_index(shape: &[usize], dy: isize, dx: isize) -> Vec<usize> {
    let (h, w, c) = (shape[0], shape[1], shape[2]);
    let mut index = Vec::with_capacity(h * w * c);
    for y in 0..h {
        let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
        for x in 0..w {
            let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
            let base = (sy * w + sx) * c;
            index.extend(base..base + c);
        }
    }
    index
}

pub fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}
