//! Slice-level numeric kernels shared by the autograd graph and the
//! KV-cached inference path. Keeping a single implementation of each
//! kernel is what makes the two paths agree to rounding noise.

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), row-major storage.
///
/// `a` is logically `[m × k]` and `b` is `[k × n]`; the `trans_*` flags say
/// the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the debug assertions above document the extents; strides are
    // derived from those extents so every access stays inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise RMS normalization with a learned gain. Returns the output and
/// the per-row reciprocal RMS (needed for the backward pass).
pub fn rmsnorm_forward(x: &[f64], gain: &[f64], eps: f64) -> (Vec<f64>, Vec<f64>) {
    let cols = gain.len();
    let rows = x.len() / cols;
    let mut out = vec![0.0; x.len()];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let ir = 1.0 / (ms + eps).sqrt();
        inv[r] = ir;
        for ((o, &v), &g) in out[r * cols..(r + 1) * cols].iter_mut().zip(row).zip(gain) {
            *o = v * ir * g;
        }
    }
    (out, inv)
}

/// Rotates consecutive coordinate pairs within each head by the rotary
/// angle of the row's absolute position. `inverse` applies the transpose
/// rotation (used to backpropagate).
pub fn rope_inplace(x: &mut [f64], cols: usize, heads: usize, start_pos: usize, base: f64, inverse: bool) {
    let head_dim = cols / heads;
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| base.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    let rows = x.len() / cols;
    for r in 0..rows {
        let pos = (start_pos + r) as f64;
        let row = &mut x[r * cols..(r + 1) * cols];
        for (i, f) in freqs.iter().enumerate() {
            let (s, c) = (pos * f).sin_cos();
            let s = if inverse { -s } else { s };
            for h in 0..heads {
                let a = h * head_dim + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * c - x1 * s;
                row[a + 1] = x0 * s + x1 * c;
            }
        }
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
pub fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Knowledge-token side of a rectangular attention call.
#[derive(Debug, Clone, Copy)]
pub struct KbView<'a> {
    /// Adapter queries for the prompt rows, `[n_q × dim]`.
    pub queries: &'a [f64],
    /// Knowledge keys, `[count × dim]`.
    pub keys: &'a [f64],
    /// Knowledge values, `[count × dim]`.
    pub values: &'a [f64],
    pub count: usize,
    /// Additive shift applied to every knowledge score before the softmax.
    pub shift: f64,
}

#[derive(Debug, Clone)]
pub struct AttentionResult {
    pub out: Vec<f64>,
    /// `[heads × n_q × count]` post-softmax knowledge scores, when kept.
    pub kb_probs: Option<Vec<f64>>,
    /// `[heads × n_q × n_kv]` post-softmax prompt scores (zero above the
    /// causal frontier), when kept.
    pub prompt_probs: Option<Vec<f64>>,
    pub kb_entries: u64,
    pub prompt_entries: u64,
}

/// Rectangular attention for `n_q` query rows at absolute positions
/// `q_offset..q_offset + n_q` against `n_kv` cached prompt keys/values and an
/// optional block of knowledge tokens. Each head takes one softmax over the
/// concatenation of its knowledge scores and its causal prompt scores.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n_q: usize,
    n_kv: usize,
    q_offset: usize,
    dim: usize,
    heads: usize,
    kb: Option<&KbView<'_>>,
    keep_probs: bool,
) -> AttentionResult {
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let m = kb.map_or(0, |kb| kb.count);
    let mut out = vec![0.0; n_q * dim];
    let mut kb_probs = keep_probs.then(|| vec![0.0; heads * n_q * m]);
    let mut prompt_probs = keep_probs.then(|| vec![0.0; heads * n_q * n_kv]);
    let mut scores = vec![0.0; m + n_kv];
    let mut kb_entries = 0u64;
    let mut prompt_entries = 0u64;

    for h in 0..heads {
        let hs = h * head_dim;
        let he = hs + head_dim;
        for i in 0..n_q {
            let visible = (q_offset + i + 1).min(n_kv);
            let row = &mut scores[..m + visible];
            if let Some(kb) = kb {
                let qt = &kb.queries[i * dim + hs..i * dim + he];
                for j in 0..m {
                    row[j] = dot(qt, &kb.keys[j * dim + hs..j * dim + he]) * scale + kb.shift;
                }
                kb_entries += m as u64;
            }
            let qi = &q[i * dim + hs..i * dim + he];
            for j in 0..visible {
                row[m + j] = dot(qi, &k[j * dim + hs..j * dim + he]) * scale;
            }
            prompt_entries += visible as u64;
            softmax_inplace(row);

            let o = &mut out[i * dim + hs..i * dim + he];
            if let Some(kb) = kb {
                for j in 0..m {
                    let p = row[j];
                    for (od, vd) in o.iter_mut().zip(&kb.values[j * dim + hs..j * dim + he]) {
                        *od += p * vd;
                    }
                }
            }
            for j in 0..visible {
                let p = row[m + j];
                for (od, vd) in o.iter_mut().zip(&v[j * dim + hs..j * dim + he]) {
                    *od += p * vd;
                }
            }
            if let Some(kp) = kb_probs.as_mut() {
                kp[(h * n_q + i) * m..(h * n_q + i + 1) * m].copy_from_slice(&row[..m]);
            }
            if let Some(pp) = prompt_probs.as_mut() {
                let base = (h * n_q + i) * n_kv;
                pp[base..base + visible].copy_from_slice(&row[m..]);
            }
        }
    }
    AttentionResult {
        out,
        kb_probs,
        prompt_probs,
        kb_entries,
        prompt_entries,
    }
}

/// Gradients of [`attention_forward`] for the square (training) layout,
/// `n_q == n_kv == n`, `q_offset == 0`.
pub struct AttentionGrads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
    pub dkb_q: Vec<f64>,
    pub dkb_k: Vec<f64>,
    pub dkb_v: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    dout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    n: usize,
    dim: usize,
    heads: usize,
    kb: Option<&KbView<'_>>,
    kb_probs: &[f64],
    prompt_probs: &[f64],
) -> AttentionGrads {
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let m = kb.map_or(0, |kb| kb.count);
    let mut g = AttentionGrads {
        dq: vec![0.0; n * dim],
        dk: vec![0.0; n * dim],
        dv: vec![0.0; n * dim],
        dkb_q: vec![0.0; n * dim],
        dkb_k: vec![0.0; m * dim],
        dkb_v: vec![0.0; m * dim],
    };
    let mut dp = vec![0.0; m + n];
    for h in 0..heads {
        let hs = h * head_dim;
        let he = hs + head_dim;
        for i in 0..n {
            let visible = i + 1;
            let go = &dout[i * dim + hs..i * dim + he];
            let pk = &kb_probs[(h * n + i) * m..(h * n + i + 1) * m];
            let pp = &prompt_probs[(h * n + i) * n..(h * n + i) * n + visible];
            let mut mix = 0.0;
            if let Some(kb) = kb {
                for j in 0..m {
                    dp[j] = dot(go, &kb.values[j * dim + hs..j * dim + he]);
                    mix += pk[j] * dp[j];
                }
            }
            for j in 0..visible {
                dp[m + j] = dot(go, &v[j * dim + hs..j * dim + he]);
                mix += pp[j] * dp[m + j];
            }
            if let Some(kb) = kb {
                for j in 0..m {
                    let p = pk[j];
                    let ds = p * (dp[j] - mix) * scale;
                    for d in hs..he {
                        g.dkb_q[i * dim + d] += ds * kb.keys[j * dim + d];
                        g.dkb_k[j * dim + d] += ds * kb.queries[i * dim + d];
                        g.dkb_v[j * dim + d] += p * dout[i * dim + d];
                    }
                }
            }
            for j in 0..visible {
                let p = pp[j];
                let ds = p * (dp[m + j] - mix) * scale;
                for d in hs..he {
                    g.dq[i * dim + d] += ds * k[j * dim + d];
                    g.dk[j * dim + d] += ds * q[i * dim + d];
                    g.dv[j * dim + d] += p * dout[i * dim + d];
                }
            }
        }
    }
    g
}
