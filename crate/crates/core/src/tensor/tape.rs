use std::borrow::Cow;
use std::fmt;

use super::kernels::gemm;
use super::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "var#{}", self.0)
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulBt {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BlockMatMul {
        a: Var,
        b: Var,
        blocks: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    BlockMatMulBt {
        a: Var,
        b: Var,
        blocks: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        bias: Var,
        n: usize,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Affine {
        a: Var,
        alpha: f64,
    },
    Relu {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Softmax {
        a: Var,
        n: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        d: usize,
        normed: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
        v: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
        d: usize,
    },
    SliceCols {
        a: Var,
        cols: usize,
        start: usize,
        len: usize,
    },
    ConcatCols {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    Sum {
        a: Var,
    },
    GatedScan {
        gate: Var,
        input: Var,
        seq_len: usize,
        d: usize,
    },
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation for one backward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it and the reverse of the recording order is a valid backward schedule.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of the leaves that required them, keyed by [`Var`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of allocated gradient buffers.
    pub fn allocated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a borrowed tensor. It participates in backward exactly when
    /// the tensor requires gradients.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t.data()),
            shape: t.shape().to_vec(),
            requires_grad: t.requires_grad(),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// An owned leaf that never receives a gradient.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        self.owned_leaf(shape, data, false)
    }

    /// An owned leaf that receives a gradient.
    pub fn variable(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        self.owned_leaf(shape, data, true)
    }

    fn owned_leaf(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::DataLength {
                shape,
                len: data.len(),
            });
        }
        self.nodes.push(Node {
            value: Cow::Owned(data),
            shape,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> Result<&Node<'a>> {
        self.nodes.get(v.0).ok_or(TensorError::ForeignVar(v))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Result<Tensor> {
        let n = self.node(v)?;
        Tensor::new(n.shape.clone(), n.value.to_vec())
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            shape,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.node(v)?.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            s => Err(TensorError::BadShape {
                op,
                shape: s.to_vec(),
                reason: "expected a matrix",
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<Vec<usize>> {
        let (sa, sb) = (&self.node(a)?.shape, &self.node(b)?.shape);
        if sa != sb {
            return Err(TensorError::DimensionMismatch {
                op,
                left: sa.clone(),
                right: sb.clone(),
            });
        }
        Ok(sa.clone())
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(TensorError::DimensionMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            false,
            0.0,
            &mut out,
        );
        Ok(self.push(out, vec![m, n], &[a, b], Op::MatMul { a, b, m, k, n }))
    }

    /// `a[m,k] · b[n,k]ᵀ`, the shape used for `[out, in]` weight matrices.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix(a, "matmul_bt")?;
        let (n, k2) = self.matrix(b, "matmul_bt")?;
        if k != k2 {
            return Err(TensorError::DimensionMismatch {
                op: "matmul_bt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            true,
            0.0,
            &mut out,
        );
        Ok(self.push(out, vec![m, n], &[a, b], Op::MatMulBt { a, b, m, k, n }))
    }

    fn block_dims(
        &self,
        a: Var,
        b: Var,
        blocks: usize,
        bt: bool,
        op: &'static str,
    ) -> Result<(usize, usize, usize)> {
        let (ra, k) = self.matrix(a, op)?;
        let (rb, cb) = self.matrix(b, op)?;
        let mismatch = || TensorError::DimensionMismatch {
            op,
            left: vec![ra, k],
            right: vec![rb, cb],
        };
        if blocks == 0 || ra % blocks != 0 || rb % blocks != 0 {
            return Err(mismatch());
        }
        let m = ra / blocks;
        let n = if bt {
            if cb != k {
                return Err(mismatch());
            }
            rb / blocks
        } else {
            if rb / blocks != k {
                return Err(mismatch());
            }
            cb
        };
        Ok((m, k, n))
    }

    /// Independent products over `blocks` row-groups:
    /// `a[blocks·m, k]` by `b[blocks·k, n]` gives `[blocks·m, n]`.
    pub fn block_matmul(&mut self, a: Var, b: Var, blocks: usize) -> Result<Var> {
        let (m, k, n) = self.block_dims(a, b, blocks, false, "block_matmul")?;
        let mut out = vec![0.0; blocks * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..blocks {
            gemm(
                m,
                k,
                n,
                &va[i * m * k..(i + 1) * m * k],
                false,
                &vb[i * k * n..(i + 1) * k * n],
                false,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(
            out,
            vec![blocks * m, n],
            &[a, b],
            Op::BlockMatMul {
                a,
                b,
                blocks,
                m,
                k,
                n,
            },
        ))
    }

    /// Per-block `a_i · b_iᵀ`: `a[blocks·m, k]` by `b[blocks·n, k]` gives
    /// `[blocks·m, n]`.
    pub fn block_matmul_bt(&mut self, a: Var, b: Var, blocks: usize) -> Result<Var> {
        let (m, k, n) = self.block_dims(a, b, blocks, true, "block_matmul_bt")?;
        let mut out = vec![0.0; blocks * m * n];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..blocks {
            gemm(
                m,
                k,
                n,
                &va[i * m * k..(i + 1) * m * k],
                false,
                &vb[i * n * k..(i + 1) * n * k],
                true,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push(
            out,
            vec![blocks * m, n],
            &[a, b],
            Op::BlockMatMulBt {
                a,
                b,
                blocks,
                m,
                k,
                n,
            },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(out, shape, &[a, b], Op::Add { a, b }))
    }

    /// Adds a length-`n` vector to every row of `a[m,n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.matrix(a, "add_row")?;
        let bshape = &self.node(bias)?.shape;
        if bshape.iter().product::<usize>() != n || bshape.len() != 1 {
            return Err(TensorError::DimensionMismatch {
                op: "add_row",
                left: vec![m, n],
                right: bshape.clone(),
            });
        }
        let vb = self.value(bias);
        let out = self
            .value(a)
            .chunks_exact(n.max(1))
            .flat_map(|row| row.iter().zip(vb).map(|(x, b)| x + b))
            .collect();
        Ok(self.push(out, vec![m, n], &[a, bias], Op::AddRow { a, bias, n }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(out, shape, &[a, b], Op::Mul { a, b }))
    }

    /// `alpha · a + beta` elementwise.
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Result<Var> {
        let shape = self.node(a)?.shape.clone();
        let out = self.value(a).iter().map(|x| alpha * x + beta).collect();
        Ok(self.push(out, shape, &[a], Op::Affine { a, alpha }))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.affine(a, factor, 0.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let shape = self.node(a)?.shape.clone();
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        Ok(self.push(out, shape, &[a], Op::Relu { a }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let shape = self.node(a)?.shape.clone();
        let out = self
            .value(a)
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        Ok(self.push(out, shape, &[a], Op::Sigmoid { a }))
    }

    /// Row-wise softmax of `a[m,n]`. Where `keep` is given (row-major,
    /// `true` = attend), dropped entries get exactly zero probability.
    pub fn softmax_rows(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.matrix(a, "softmax_rows")?;
        if let Some(mask) = keep {
            if mask.len() != m * n {
                return Err(TensorError::DimensionMismatch {
                    op: "softmax_rows",
                    left: vec![m, n],
                    right: vec![mask.len()],
                });
            }
        }
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let kept = |j: usize| keep.is_none_or(|k| k[i * n + j]);
            if !(0..n).any(kept) {
                return Err(TensorError::DegenerateRow { row: i });
            }
            // Non-finite inputs propagate as NaN rows.
            let max = (0..n)
                .filter(|&j| kept(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * n..(i + 1) * n];
            let mut total = 0.0;
            for j in (0..n).filter(|&j| kept(j)) {
                dst[j] = (row[j] - max).exp();
                total += dst[j];
            }
            dst.iter_mut().for_each(|p| *p /= total);
        }
        Ok(self.push(out, vec![m, n], &[a], Op::Softmax { a, n }))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.node(x)?.shape.clone();
        let d = shape.last().copied().unwrap_or(0);
        if d == 0 {
            return Err(TensorError::BadShape {
                op: "layer_norm",
                shape,
                reason: "last axis must be non-empty",
            });
        }
        for p in [gain, bias] {
            if self.node(p)?.shape != [d] {
                return Err(TensorError::DimensionMismatch {
                    op: "layer_norm",
                    left: shape,
                    right: self.node(p)?.shape.clone(),
                });
            }
        }
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let rows = vx.len() / d;
        let mut normed = vec![0.0; vx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; vx.len()];
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                normed[r * d + j] = h;
                out[r * d + j] = h * vg[j] + vb[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            d,
            normed,
            rstd,
        };
        Ok(self.push(out, shape, &[x, gain, bias], op))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[t,v]`, skipping positions equal to `ignore_index`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: usize,
    ) -> Result<Var> {
        let (t, v) = self.matrix(logits, "cross_entropy")?;
        if targets.len() != t {
            return Err(TensorError::DimensionMismatch {
                op: "cross_entropy",
                left: vec![t, v],
                right: vec![targets.len()],
            });
        }
        let targets: Vec<Option<usize>> = targets
            .iter()
            .map(|&y| (y != ignore_index).then_some(y))
            .collect();
        if let Some(&bad) = targets.iter().flatten().find(|&&y| y >= v) {
            return Err(TensorError::IndexOutOfRange {
                op: "cross_entropy",
                index: bad,
                bound: v,
            });
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; t * v];
        let mut nll = 0.0;
        let mut count = 0;
        for (i, y) in targets.iter().enumerate() {
            let row = &x[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
            if let Some(y) = *y {
                nll += lse - row[y];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { nll / count as f64 };
        let op = Op::CrossEntropy {
            logits,
            targets,
            probs,
            count,
            v,
        };
        Ok(self.push(vec![loss], vec![], &[logits], op))
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix(table, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                bound: rows,
            });
        }
        let vt = self.value(table);
        let out = ids
            .iter()
            .flat_map(|&i| vt[i * d..(i + 1) * d].iter().copied())
            .collect();
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
            d,
        };
        Ok(self.push(out, vec![ids.len(), d], &[table], op))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, cols) = self.matrix(a, "slice_cols")?;
        if start + len > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: cols,
            });
        }
        let va = self.value(a);
        let out = (0..m)
            .flat_map(|i| va[i * cols + start..i * cols + start + len].iter().copied())
            .collect();
        Ok(self.push(
            out,
            vec![m, len],
            &[a],
            Op::SliceCols {
                a,
                cols,
                start,
                len,
            },
        ))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            dims.push((p, self.matrix(p, "concat_cols")?));
        }
        let rows = dims.first().map_or(0, |(_, (m, _))| *m);
        if let Some((_, (m, n))) = dims.iter().find(|(_, (m, _))| *m != rows) {
            return Err(TensorError::DimensionMismatch {
                op: "concat_cols",
                left: vec![rows],
                right: vec![*m, *n],
            });
        }
        let total: usize = dims.iter().map(|(_, (_, n))| n).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &(p, (_, n)) in &dims {
                out.extend_from_slice(&self.value(p)[i * n..(i + 1) * n]);
            }
        }
        let parts: Vec<(Var, usize)> = dims.iter().map(|&(p, (_, n))| (p, n)).collect();
        let inputs: Vec<Var> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(
            out,
            vec![rows, total],
            &inputs,
            Op::ConcatCols { parts, rows },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.iter().sum();
        Ok(self.push(vec![s], vec![], &[a], Op::Sum { a }))
    }

    /// Gated linear recurrence over consecutive row-blocks of length
    /// `seq_len`: `c_t = g_t ⊙ c_{t-1} + (1 - g_t) ⊙ x_t` with `c_{-1} = 0`.
    pub fn gated_scan(&mut self, gate: Var, input: Var, seq_len: usize) -> Result<Var> {
        let shape = self.same_shape(gate, input, "gated_scan")?;
        let (rows, d) = self.matrix(gate, "gated_scan")?;
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(TensorError::BadShape {
                op: "gated_scan",
                shape,
                reason: "rows must be a multiple of seq_len",
            });
        }
        let (g, x) = (self.value(gate), self.value(input));
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let first = r % seq_len == 0;
            for j in 0..d {
                let i = r * d + j;
                let prev = if first { 0.0 } else { out[i - d] };
                out[i] = g[i] * prev + (1.0 - g[i]) * x[i];
            }
        }
        Ok(self.push(
            out,
            shape,
            &[gate, input],
            Op::GatedScan {
                gate,
                input,
                seq_len,
                d,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`. Nodes are visited once each, in
    /// reverse recording order; only leaves that require gradients keep a
    /// buffer in the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: root.shape.clone(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !root.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(da) = slot(grads, nodes, a) {
                    gemm(m, n, k, g, false, self.value(b), true, 1.0, da);
                }
                if let Some(db) = slot(grads, nodes, b) {
                    gemm(k, m, n, self.value(a), true, g, false, 1.0, db);
                }
            }
            &Op::MatMulBt { a, b, m, k, n } => {
                if let Some(da) = slot(grads, nodes, a) {
                    gemm(m, n, k, g, false, self.value(b), false, 1.0, da);
                }
                if let Some(db) = slot(grads, nodes, b) {
                    gemm(n, m, k, g, true, self.value(a), false, 1.0, db);
                }
            }
            &Op::BlockMatMul {
                a,
                b,
                blocks,
                m,
                k,
                n,
            } => {
                let (va, vb) = (self.value(a), self.value(b));
                if let Some(da) = slot(grads, nodes, a) {
                    for i in 0..blocks {
                        let (go, ao, bo) = (i * m * n, i * m * k, i * k * n);
                        gemm(
                            m,
                            n,
                            k,
                            &g[go..go + m * n],
                            false,
                            &vb[bo..bo + k * n],
                            true,
                            1.0,
                            &mut da[ao..ao + m * k],
                        );
                    }
                }
                if let Some(db) = slot(grads, nodes, b) {
                    for i in 0..blocks {
                        let (go, ao, bo) = (i * m * n, i * m * k, i * k * n);
                        gemm(
                            k,
                            m,
                            n,
                            &va[ao..ao + m * k],
                            true,
                            &g[go..go + m * n],
                            false,
                            1.0,
                            &mut db[bo..bo + k * n],
                        );
                    }
                }
            }
            &Op::BlockMatMulBt {
                a,
                b,
                blocks,
                m,
                k,
                n,
            } => {
                let (va, vb) = (self.value(a), self.value(b));
                if let Some(da) = slot(grads, nodes, a) {
                    for i in 0..blocks {
                        let (go, ao, bo) = (i * m * n, i * m * k, i * n * k);
                        gemm(
                            m,
                            n,
                            k,
                            &g[go..go + m * n],
                            false,
                            &vb[bo..bo + n * k],
                            false,
                            1.0,
                            &mut da[ao..ao + m * k],
                        );
                    }
                }
                if let Some(db) = slot(grads, nodes, b) {
                    for i in 0..blocks {
                        let (go, ao, bo) = (i * m * n, i * m * k, i * n * k);
                        gemm(
                            n,
                            m,
                            k,
                            &g[go..go + m * n],
                            true,
                            &va[ao..ao + m * k],
                            false,
                            1.0,
                            &mut db[bo..bo + n * k],
                        );
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(d) = slot(grads, nodes, v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::AddRow { a, bias, n } => {
                if let Some(da) = slot(grads, nodes, a) {
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = slot(grads, nodes, bias) {
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            &Op::Mul { a, b } => {
                if let Some(da) = slot(grads, nodes, a) {
                    for ((d, g), y) in da.iter_mut().zip(g).zip(self.value(b)) {
                        *d += g * y;
                    }
                }
                if let Some(db) = slot(grads, nodes, b) {
                    for ((d, g), x) in db.iter_mut().zip(g).zip(self.value(a)) {
                        *d += g * x;
                    }
                }
            }
            &Op::Affine { a, alpha } => {
                if let Some(da) = slot(grads, nodes, a) {
                    da.iter_mut().zip(g).for_each(|(d, g)| *d += alpha * g);
                }
            }
            &Op::Relu { a } => {
                if let Some(da) = slot(grads, nodes, a) {
                    for ((d, g), y) in da.iter_mut().zip(g).zip(node.value.iter()) {
                        if *y > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            &Op::Sigmoid { a } => {
                if let Some(da) = slot(grads, nodes, a) {
                    for ((d, g), y) in da.iter_mut().zip(g).zip(node.value.iter()) {
                        *d += g * y * (1.0 - y);
                    }
                }
            }
            &Op::Softmax { a, n } => {
                if let Some(da) = slot(grads, nodes, a) {
                    let y = &node.value;
                    for ((drow, grow), yrow) in da
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(y.chunks_exact(n))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (g - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                d,
                normed,
                rstd,
            } => {
                let d = *d;
                if let Some(dg) = slot(grads, nodes, *gain) {
                    for (grow, hrow) in g.chunks_exact(d).zip(normed.chunks_exact(d)) {
                        for ((acc, g), h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *acc += g * h;
                        }
                    }
                }
                if let Some(db) = slot(grads, nodes, *bias) {
                    for grow in g.chunks_exact(d) {
                        db.iter_mut().zip(grow).for_each(|(acc, g)| *acc += g);
                    }
                }
                let vg = self.value(*gain);
                if let Some(dx) = slot(grads, nodes, *x) {
                    let mut dh = vec![0.0; d];
                    for (r, s) in rstd.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &normed[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = grow[j] * vg[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[r * d + j] += s * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
                v,
            } => {
                if *count == 0 {
                    return;
                }
                if let Some(dl) = slot(grads, nodes, *logits) {
                    let scale = g[0] / *count as f64;
                    for (i, y) in targets.iter().enumerate() {
                        let Some(y) = *y else { continue };
                        for j in 0..*v {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            dl[i * v + j] += scale * (probs[i * v + j] - onehot);
                        }
                    }
                }
            }
            Op::Gather { table, ids, d } => {
                if let Some(dt) = slot(grads, nodes, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        dt[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(acc, g)| *acc += g);
                    }
                }
            }
            &Op::SliceCols {
                a,
                cols,
                start,
                len,
            } => {
                if let Some(da) = slot(grads, nodes, a) {
                    for (i, grow) in g.chunks_exact(len.max(1)).enumerate() {
                        let dst = &mut da[i * cols + start..i * cols + start + len];
                        dst.iter_mut().zip(grow).for_each(|(acc, g)| *acc += g);
                    }
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, n) in parts {
                    if let Some(dp) = slot(grads, nodes, p) {
                        for i in 0..*rows {
                            let src = &g[i * total + offset..i * total + offset + n];
                            dp[i * n..(i + 1) * n]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(acc, g)| *acc += g);
                        }
                    }
                    offset += n;
                }
            }
            &Op::Sum { a } => {
                if let Some(da) = slot(grads, nodes, a) {
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::GatedScan {
                gate,
                input,
                seq_len,
                d,
            } => {
                let (vg, vx, c) = (self.value(gate), self.value(input), &node.value);
                let rows = vg.len() / d;
                // Total derivative w.r.t. each c_t, flowing back through time.
                let mut carry = vec![0.0; rows * d];
                for r in (0..rows).rev() {
                    let last = r % seq_len == seq_len - 1;
                    for j in 0..d {
                        let i = r * d + j;
                        let next = if last { 0.0 } else { carry[i + d] * vg[i + d] };
                        carry[i] = g[i] + next;
                    }
                }
                if let Some(dg) = slot(grads, nodes, gate) {
                    for r in 0..rows {
                        let first = r % seq_len == 0;
                        for j in 0..d {
                            let i = r * d + j;
                            let prev = if first { 0.0 } else { c[i - d] };
                            dg[i] += carry[i] * (prev - vx[i]);
                        }
                    }
                }
                if let Some(dx) = slot(grads, nodes, input) {
                    for i in 0..rows * d {
                        dx[i] += carry[i] * (1.0 - vg[i]);
                    }
                }
            }
        }
    }
}

fn slot<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node<'_>],
    v: Var,
) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}
