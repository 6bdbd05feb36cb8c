use super::kernels::{self, KbView};
use super::{Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Instrumentation counters accumulated while the graph is built.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GraphStats {
    /// Knowledge-part attention scores computed, summed over heads and layers.
    pub kb_score_entries: u64,
    /// Prompt-part (causal) attention scores computed.
    pub prompt_score_entries: u64,
}

/// Knowledge-token inputs of an attention node.
#[derive(Debug, Clone, Copy)]
pub struct KbArgs {
    pub queries: Var,
    pub keys: Var,
    pub values: Var,
    pub shift: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionArgs {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub heads: usize,
    pub kb: Option<KbArgs>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Rope {
        x: Var,
        heads: usize,
        base: f64,
    },
    SoftmaxRows(Var),
    Attention {
        args: AttentionArgs,
        kb_probs: Vec<f64>,
        prompt_probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
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

/// Define-by-run computation graph. Nodes are appended in evaluation order,
/// so index order is a topological order and `backward` walks it in reverse.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    stats: GraphStats,
    checked: bool,
    retain_attention: bool,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            stats: GraphStats::default(),
            checked: true,
            retain_attention: false,
            backward_done: false,
        }
    }

    /// Disable the per-op finiteness scan.
    pub fn unchecked(mut self) -> Self {
        self.checked = false;
        self
    }

    /// Keep attention probabilities even when nothing upstream needs a gradient.
    pub fn retain_attention(mut self) -> Self {
        self.retain_attention = true;
        self
    }

    pub fn stats(&self) -> GraphStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after `backward`. `None` for constants.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Post-softmax probabilities retained by an attention node:
    /// `(kb [heads × n × m], prompt [heads × n × n])`.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention {
                kb_probs, prompt_probs, ..
            } if !prompt_probs.is_empty() => Some((kb_probs, prompt_probs)),
            _ => None,
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

    fn push_checked(&mut self, name: &'static str, value: Tensor, requires_grad: bool, op: Op) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        Ok(self.push(value, requires_grad, op))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.shape(a),
            rhs: self.shape(b),
        }
    }

    /// `a · b` for `[m × k] · [k × n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `[m × k] · [n × k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = if trans_b {
            (bv.cols(), bv.rows())
        } else {
            (bv.rows(), bv.cols())
        };
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, av.data(), false, bv.data(), trans_b, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(vec![m, n], out)?;
        self.push_checked("matmul", t, rg, Op::MatMul { a, b, trans_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("add", t, rg, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push_checked("mul", t, rg, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(a);
        self.push_checked("scale", t, rg, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push_checked("sum", Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| kernels::silu(x)).collect();
        let t = Tensor::new(self.shape(a), data)?;
        let rg = self.rg(a);
        self.push_checked("silu", t, rg, Op::Silu(a))
    }

    /// Row-wise RMS normalization of `x [n × d]` scaled by `gain [d]`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        if xv.shape().len() != 2 || gv.numel() != xv.cols() {
            return Err(self.mismatch("rmsnorm", x, gain));
        }
        let (out, inv_rms) = kernels::rmsnorm_forward(xv.data(), gv.data(), eps);
        let t = Tensor::new(self.shape(x), out)?;
        let rg = self.rg(x) || self.rg(gain);
        self.push_checked("rmsnorm", t, rg, Op::RmsNorm { x, gain, inv_rms })
    }

    /// Gathers rows of `table [v × d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (vocab, d) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    extent: vocab,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(table);
        self.push_checked(
            "embedding",
            t,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Rotary position embedding over rows `0..n` with `heads` heads.
    pub fn rope(&mut self, x: Var, heads: usize, base: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || !xv.cols().is_multiple_of(heads) || !(xv.cols() / heads).is_multiple_of(2) {
            return Err(TensorError::ShapeMismatch {
                op: "rope",
                lhs: self.shape(x),
                rhs: vec![heads],
            });
        }
        let cols = xv.cols();
        let mut data = xv.data().to_vec();
        kernels::rope_inplace(&mut data, cols, heads, 0, base, false);
        let t = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(x);
        self.push_checked("rope", t, rg, Op::Rope { x, heads, base })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        let mut data = xv.data().to_vec();
        if cols > 0 {
            for row in data.chunks_mut(cols) {
                kernels::softmax_inplace(row);
            }
        }
        let t = Tensor::new(self.shape(x), data)?;
        let rg = self.rg(x);
        self.push_checked("softmax_rows", t, rg, Op::SoftmaxRows(x))
    }

    /// Rectangular causal attention. With `kb == None` (or zero knowledge
    /// rows) this is plain causal multi-head self-attention.
    pub fn attention(&mut self, args: AttentionArgs) -> Result<Var> {
        let qv = self.value(args.q);
        let (n, dim) = (qv.rows(), qv.cols());
        let heads = args.heads;
        if heads == 0 || dim % heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: self.shape(args.q),
                rhs: vec![heads],
            });
        }
        for other in [args.k, args.v] {
            if self.shape(other) != self.shape(args.q) {
                return Err(self.mismatch("attention", args.q, other));
            }
        }
        if let Some(kb) = args.kb {
            if self.shape(kb.queries) != self.shape(args.q) {
                return Err(self.mismatch("attention", args.q, kb.queries));
            }
            let ks = self.shape(kb.keys);
            if ks.len() != 2 || ks[1] != dim || self.shape(kb.values) != ks {
                return Err(self.mismatch("attention", kb.keys, kb.values));
            }
        }
        let rg = self.rg(args.q)
            || self.rg(args.k)
            || self.rg(args.v)
            || args
                .kb
                .is_some_and(|kb| self.rg(kb.queries) || self.rg(kb.keys) || self.rg(kb.values));
        let keep = rg || self.retain_attention;
        let kb_view = args.kb.map(|kb| KbView {
            queries: self.value(kb.queries).data(),
            keys: self.value(kb.keys).data(),
            values: self.value(kb.values).data(),
            count: self.value(kb.keys).rows(),
            shift: kb.shift,
        });
        let res = kernels::attention_forward(
            self.value(args.q).data(),
            self.value(args.k).data(),
            self.value(args.v).data(),
            n,
            n,
            0,
            dim,
            heads,
            kb_view.as_ref(),
            keep,
        );
        self.stats.kb_score_entries += res.kb_entries;
        self.stats.prompt_score_entries += res.prompt_entries;
        let t = Tensor::new(vec![n, dim], res.out)?;
        self.push_checked(
            "attention",
            t,
            rg,
            Op::Attention {
                args,
                kb_probs: res.kb_probs.unwrap_or_default(),
                prompt_probs: res.prompt_probs.unwrap_or_default(),
            },
        )
    }

    /// Mean token cross entropy of `logits [n × v]` over positions whose
    /// target is `Some`. Positions with `None` contribute neither loss nor
    /// gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, vocab) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                lhs: self.shape(logits),
                rhs: vec![targets.len()],
            });
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(TensorError::EmptyTargets);
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let row = &mut probs[i * vocab..(i + 1) * vocab];
            kernels::softmax_inplace(row);
            if let Some(t) = *t {
                if t >= vocab {
                    return Err(TensorError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: t,
                        extent: vocab,
                    });
                }
                loss -= row[t].ln();
            }
        }
        loss /= count as f64;
        let rg = self.rg(logits);
        self.push_checked(
            "cross_entropy",
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Afterwards every parameter
    /// leaf reachable from `loss` holds its gradient; intermediate gradients
    /// are released.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss)));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop_op(idx, &op, &grad);
            self.nodes[idx].op = op;
        }
        Ok(())
    }

    fn backprop_op(&mut self, idx: usize, op: &Op, grad: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (a, b, trans_b) = (*a, *b, *trans_b);
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = self.nodes[idx].value.cols();
                if self.rg(a) {
                    // dA = dC · op(B)ᵀ
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, grad, false, self.value(b).data(), !trans_b, &mut da, false);
                    self.accumulate(a, &da);
                }
                if self.rg(b) {
                    if trans_b {
                        // B is [n × k]: dB = dCᵀ · A
                        let mut db = vec![0.0; n * k];
                        kernels::gemm(n, m, k, grad, true, self.value(a).data(), false, &mut db, false);
                        self.accumulate(b, &db);
                    } else {
                        // dB = Aᵀ · dC
                        let mut db = vec![0.0; k * n];
                        kernels::gemm(k, m, n, self.value(a).data(), true, grad, false, &mut db, false);
                        self.accumulate(b, &db);
                    }
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, grad);
                self.accumulate(b, grad);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let g: Vec<f64> = grad.iter().zip(self.value(b).data()).map(|(g, y)| g * y).collect();
                    self.accumulate(a, &g);
                }
                if self.rg(b) {
                    let g: Vec<f64> = grad.iter().zip(self.value(a).data()).map(|(g, x)| g * x).collect();
                    self.accumulate(b, &g);
                }
            }
            Op::Scale(a, f) => {
                let g: Vec<f64> = grad.iter().map(|g| g * f).collect();
                self.accumulate(*a, &g);
            }
            Op::Sum(a) => {
                let g = vec![grad[0]; self.value(*a).numel()];
                self.accumulate(*a, &g);
            }
            Op::Silu(a) => {
                let g: Vec<f64> = grad
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| g * kernels::silu_grad(x))
                    .collect();
                self.accumulate(*a, &g);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let xv = self.value(x).data();
                let gv = self.value(gain).data();
                let d = gv.len();
                let rows = xv.len() / d;
                let dx = self.rg(x).then(|| {
                    let mut dx = vec![0.0; xv.len()];
                    for r in 0..rows {
                        let ir = inv_rms[r];
                        let xr = &xv[r * d..(r + 1) * d];
                        let gr = &grad[r * d..(r + 1) * d];
                        let proj: f64 = (0..d).map(|j| gr[j] * gv[j] * xr[j]).sum();
                        let coef = ir * ir * ir * proj / d as f64;
                        for j in 0..d {
                            dx[r * d + j] = ir * gr[j] * gv[j] - coef * xr[j];
                        }
                    }
                    dx
                });
                let dg = self.rg(gain).then(|| {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += grad[r * d + j] * xv[r * d + j] * inv_rms[r];
                        }
                    }
                    dg
                });
                if let Some(dx) = dx {
                    self.accumulate(x, &dx);
                }
                if let Some(dg) = dg {
                    self.accumulate(gain, &dg);
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                if self.rg(table) {
                    let tv = self.value(table);
                    let d = tv.cols();
                    let mut dt = vec![0.0; tv.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += grad[r * d + j];
                        }
                    }
                    self.accumulate(table, &dt);
                }
            }
            Op::Rope { x, heads, base } => {
                let cols = self.value(*x).cols();
                let mut g = grad.to_vec();
                kernels::rope_inplace(&mut g, cols, *heads, 0, *base, true);
                self.accumulate(*x, &g);
            }
            Op::SoftmaxRows(x) => {
                let y = self.nodes[idx].value.data();
                let cols = self.nodes[idx].value.cols();
                let mut g = vec![0.0; y.len()];
                for r in 0..y.len() / cols.max(1) {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &grad[r * cols..(r + 1) * cols];
                    let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        g[r * cols + j] = yr[j] * (gr[j] - dotp);
                    }
                }
                self.accumulate(*x, &g);
            }
            Op::Attention {
                args,
                kb_probs,
                prompt_probs,
            } => {
                let args = *args;
                let n = self.value(args.q).rows();
                let dim = self.value(args.q).cols();
                let grads = {
                    let kb_view = args.kb.map(|kb| KbView {
                        queries: self.value(kb.queries).data(),
                        keys: self.value(kb.keys).data(),
                        values: self.value(kb.values).data(),
                        count: self.value(kb.keys).rows(),
                        shift: kb.shift,
                    });
                    kernels::attention_backward(
                        grad,
                        self.value(args.q).data(),
                        self.value(args.k).data(),
                        self.value(args.v).data(),
                        n,
                        dim,
                        args.heads,
                        kb_view.as_ref(),
                        kb_probs,
                        prompt_probs,
                    )
                };
                self.accumulate(args.q, &grads.dq);
                self.accumulate(args.k, &grads.dk);
                self.accumulate(args.v, &grads.dv);
                if let Some(kb) = args.kb {
                    self.accumulate(kb.queries, &grads.dkb_q);
                    self.accumulate(kb.keys, &grads.dkb_k);
                    self.accumulate(kb.values, &grads.dkb_v);
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let vocab = self.value(*logits).cols();
                let count = targets.iter().filter(|t| t.is_some()).count() as f64;
                let mut g = vec![0.0; probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..vocab {
                            g[i * vocab + j] = grad[0] * probs[i * vocab + j] / count;
                        }
                        g[i * vocab + t] -= grad[0] / count;
                    }
                }
                self.accumulate(*logits, &g);
            }
        }
    }
}
