use super::tensor::Tensor;
use crate::dist::{log1mexp, log_sigmoid, sigmoid, CLAMP};
use crate::graph::DirectedGraph;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    Slice {
        a: Var,
        start: usize,
    },
    Permute {
        a: Var,
        view: Vec<usize>,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Tile(Var),
    PairSum(Var, Var),
    Sum(Var),
    Mean(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu {
        a: Var,
        cdf: Vec<f64>,
    },
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    LogSumExp(Var),
    CompositeNll {
        logits: Var,
        scores: Var,
        target: DirectedGraph,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Record of primitive applications. Single owner; build one per
/// forward/backward pair.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when `v` did not
    /// influence the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

// C (m×n) (+)= A (m×k) · B (k×n) with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: callers pass slices whose extents cover the strided views.
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

#[inline]
fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
fn normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn permuted_strides(shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let nd = shape.len();
    let mut strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&i| shape[i]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&i| strides[i]).collect();
    (out_shape, src_strides)
}

// out[flat index over out_shape] = src[Σ idx_i * src_strides_i]
fn permute_copy(src: &[f64], out_shape: &[usize], src_strides: &[usize], out: &mut [f64]) {
    let nd = out_shape.len();
    if nd == 0 {
        out[0] = src[0];
        return;
    }
    let inner = out_shape[nd - 1];
    let inner_stride = src_strides[nd - 1];
    let outer: usize = out_shape[..nd - 1].iter().product();
    let mut idx = vec![0usize; nd - 1];
    let mut base = 0usize;
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for (t, d) in dst.iter_mut().enumerate() {
            *d = src[base + t * inner_stride];
        }
        for ax in (0..nd - 1).rev() {
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input (parameter).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input (data).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `[.., K] × [K, N] → [.., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.shape().len() != 2 || av.shape().is_empty() || av.last_dim() != bv.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("cannot multiply {:?} by {:?}", av.shape(), bv.shape()),
            ));
        }
        let k = av.last_dim();
        let n = bv.shape()[1];
        let m = av.len() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            av.data(),
            k as isize,
            1,
            bv.data(),
            n as isize,
            1,
            &mut out,
            false,
        );
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), ng))
    }

    /// Batched `[B, M, K] × [B, K, N] → [B, M, N]`; with `trans_b` the second
    /// operand is `[B, N, K]` and used transposed.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let bad = || {
            Error::shape(
                "bmm",
                format!("cannot batch-multiply {sa:?} by {sb:?} (trans_b={trans_b})"),
            )
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a_s = &av.data()[bi * m * k..(bi + 1) * m * k];
            let b_s = &bv.data()[bi * k * n..(bi + 1) * k * n];
            let c_s = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                gemm(m, k, n, a_s, k as isize, 1, b_s, 1, k as isize, c_s, false);
            } else {
                gemm(m, k, n, a_s, k as isize, 1, b_s, n as isize, 1, c_s, false);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::new(&[batch, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            ng,
        ))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                name,
                format!(
                    "operand shapes differ: {:?} vs {:?}",
                    av.shape(),
                    bv.shape()
                ),
            ));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "subtract", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "multiply", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "divide", |x, y| x / y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Div(a, b), ng))
    }

    /// Adds a length-N vector to every row of `[.., N]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        let n = av.last_dim();
        if bv.len() != n {
            return Err(Error::shape(
                "add_bias",
                format!("bias of {} entries for rows of {n}", bv.len()),
            ));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(av.shape(), data)?;
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(t, Op::AddBias(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape(), av.data().iter().map(|x| x * c).collect()).unwrap();
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// Concatenation along the first dimension.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let tail = self.value(*first).shape().get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &v in parts {
            let s = self.value(v).shape();
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("operand shape {s:?} incompatible with trailing dims {tail:?}"),
                ));
            }
            rows += s[0];
            data.extend_from_slice(self.value(v).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let ng = parts.iter().any(|&v| self.ng(v));
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec()), ng))
    }

    /// Rows `start..start + len` of the first dimension.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if s.is_empty() || start + len > s[0] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} out of bounds for {s:?}", start + len),
            ));
        }
        let row: usize = s[1..].iter().product();
        let data = av.data()[start * row..(start + len) * row].to_vec();
        let mut shape = s.to_vec();
        shape[0] = len;
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Slice { a, start }, ng))
    }

    /// Axis permutation; output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let view = self.shape(a).to_vec();
        let out: Vec<usize> = perm
            .iter()
            .map(|&i| view.get(i).copied().unwrap_or(0))
            .collect();
        self.rearrange(a, &view, perm, &out)
    }

    /// Reads `a` as shape `view`, permutes its axes by `perm`, and returns
    /// the result with shape `out`, in a single copy.
    pub fn rearrange(
        &mut self,
        a: Var,
        view: &[usize],
        perm: &[usize],
        out: &[usize],
    ) -> Result<Var> {
        let av = self.value(a);
        let nd = view.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd
            || perm
                .iter()
                .any(|&i| i >= nd || std::mem::replace(&mut seen[i], true))
        {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of {nd} axes"),
            ));
        }
        let len: usize = view.iter().product();
        if len != av.len() || out.iter().product::<usize>() != len {
            return Err(Error::shape(
                "permute",
                format!("cannot view {:?} as {view:?} and emit {out:?}", av.shape()),
            ));
        }
        let (pshape, strides) = permuted_strides(view, perm);
        let mut data = vec![0.0; len];
        permute_copy(av.data(), &pshape, &strides, &mut data);
        let t = Tensor::new(out, data)?;
        let ng = self.ng(a);
        Ok(self.push(
            t,
            Op::Permute {
                a,
                view: view.to_vec(),
                perm: perm.to_vec(),
            },
            ng,
        ))
    }

    /// Swaps the two axes of a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("expected a matrix, got {:?}", self.shape(a)),
            ));
        }
        self.permute(a, &[1, 0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if shape.iter().product::<usize>() != av.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} cannot become {shape:?}", av.shape()),
            ));
        }
        let t = av.clone().with_shape(shape.to_vec());
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Stacks `times` copies along a new leading axis.
    pub fn tile(&mut self, a: Var, times: usize) -> Var {
        let av = self.value(a);
        let mut shape = vec![times];
        shape.extend_from_slice(av.shape());
        let data = av.data().repeat(times);
        let ng = self.ng(a);
        self.push(Tensor::new(&shape, data).unwrap(), Op::Tile(a), ng)
    }

    /// `[P, H] ⊕ [P, H] → [P·P, H]` with row `j·P + k` equal to `a_j + b_k`.
    pub fn pair_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || av.shape() != bv.shape() {
            return Err(Error::shape(
                "pair_sum",
                format!("operands {:?} and {:?}", av.shape(), bv.shape()),
            ));
        }
        let (p, h) = (av.shape()[0], av.shape()[1]);
        let mut data = vec![0.0; p * p * h];
        for j in 0..p {
            let aj = &av.data()[j * h..(j + 1) * h];
            for k in 0..p {
                let bk = &bv.data()[k * h..(k + 1) * h];
                let out = &mut data[(j * p + k) * h..(j * p + k + 1) * h];
                for t in 0..h {
                    out[t] = aj[t] + bk[t];
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(&[p * p, h], data)?, Op::PairSum(a, b), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.last_dim();
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let t = Tensor::new(av.shape(), data).unwrap();
        let ng = self.ng(a);
        self.push(t, Op::Softmax(a), ng)
    }

    /// Layer normalization over the last dimension with gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape(
                "layer_norm",
                format!("gain/bias must have {n} entries"),
            ));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = xv.len() / n;
        let mut xhat = xv.data().to_vec();
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &mut xhat[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs;
            let o = &mut out[r * n..(r + 1) * n];
            for t in 0..n {
                row[t] = (row[t] - mean) * rs;
                o[t] = row[t] * g[t] + b[t];
            }
        }
        let t = Tensor::new(xv.shape(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let av = self.value(a);
        let t = Tensor::new(av.shape(), av.data().iter().map(|&x| f(x)).collect()).unwrap();
        let ng = self.ng(a);
        self.push(t, op, ng)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cdf: Vec<f64> = av.data().iter().map(|&x| normal_cdf(x)).collect();
        let out = av.data().iter().zip(&cdf).map(|(x, c)| x * c).collect();
        let t = Tensor::new(av.shape(), out).unwrap();
        let ng = self.ng(a);
        self.push(t, Op::Gelu { a, cdf }, ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Log-sum-exp over the last dimension, dropping it.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.last_dim();
        let data: Vec<f64> = av.data().chunks(n).map(crate::dist::logsumexp).collect();
        let shape = av.shape()[..av.shape().len().saturating_sub(1)].to_vec();
        let t = Tensor::new(&shape, data).unwrap();
        let ng = self.ng(a);
        self.push(t, Op::LogSumExp(a), ng)
    }

    /// Composite negative log-likelihood of `target` under symmetric edge
    /// logits `logits` (p×p) and order scores `scores` (p entries), summed
    /// over ordered pairs with probabilities clamped to `[CLAMP, 1 - CLAMP]`.
    pub fn composite_nll(
        &mut self,
        logits: Var,
        scores: Var,
        target: &DirectedGraph,
    ) -> Result<Var> {
        let p = target.p();
        let (lv, sv) = (self.value(logits), self.value(scores));
        if lv.len() != p * p || sv.len() != p {
            return Err(Error::shape(
                "composite_nll",
                format!(
                    "logits {:?} and scores {:?} do not match p={p}",
                    lv.shape(),
                    sv.shape()
                ),
            ));
        }
        let (lo, hi) = (CLAMP.ln(), (-CLAMP).ln_1p());
        let (e, s) = (lv.data(), sv.data());
        let mut total = 0.0;
        for j in 0..p {
            for k in 0..p {
                if j == k {
                    continue;
                }
                let lr = (log_sigmoid(e[j * p + k]) + log_sigmoid(s[j] - s[k])).clamp(lo, hi);
                total -= if target.has_edge(j, k) {
                    lr
                } else {
                    log1mexp(lr)
                };
            }
        }
        let ng = self.ng(logits) || self.ng(scores);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CompositeNll {
                logits,
                scores,
                target: target.clone(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape(), vec![1.0]).unwrap());
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            // Pass-through rules hand the incoming gradient on without copying.
            match node.op {
                Op::Leaf => grads[i] = Some(g),
                Op::Reshape(a) => self.acc(&mut grads, a, g),
                Op::Add(a, b) => {
                    if self.ng(b) {
                        self.acc(&mut grads, b, g.clone());
                    }
                    self.acc(&mut grads, a, g);
                }
                Op::AddBias(a, bias) => {
                    if self.ng(bias) {
                        let n = self.value(bias).len();
                        let mut db = vec![0.0; n];
                        for row in g.data().chunks(n) {
                            for (d, x) in db.iter_mut().zip(row) {
                                *d += x;
                            }
                        }
                        self.acc(&mut grads, bias, Tensor::vector(db));
                    }
                    self.acc(&mut grads, a, g);
                }
                _ => self.backprop(i, &g, &mut grads),
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g.with_shape(self.value(v).shape().to_vec())),
        }
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::Reshape(_) | Op::Add(..) | Op::AddBias(..) => {
                unreachable!("handled in backward")
            }
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let k = av.last_dim();
                let n = bv.shape()[1];
                let m = av.len() / k.max(1);
                if self.ng(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(
                        m,
                        n,
                        k,
                        gd,
                        n as isize,
                        1,
                        bv.data(),
                        1,
                        n as isize,
                        &mut da,
                        false,
                    );
                    self.acc(grads, a, Tensor::vector(da));
                }
                if self.ng(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(
                        k,
                        m,
                        n,
                        av.data(),
                        1,
                        k as isize,
                        gd,
                        n as isize,
                        1,
                        &mut db,
                        false,
                    );
                    self.acc(grads, b, Tensor::vector(db));
                }
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = out.shape()[2];
                let mut da = self.ng(a).then(|| vec![0.0; batch * m * k]);
                let mut db = self.ng(b).then(|| vec![0.0; batch * k * n]);
                for bi in 0..batch {
                    let a_s = &av.data()[bi * m * k..(bi + 1) * m * k];
                    let b_s = &bv.data()[bi * k * n..(bi + 1) * k * n];
                    let g_s = &gd[bi * m * n..(bi + 1) * m * n];
                    if let Some(da) = da.as_mut() {
                        let d = &mut da[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            // B is n×k: dA = G · B
                            gemm(m, n, k, g_s, n as isize, 1, b_s, k as isize, 1, d, false);
                        } else {
                            // B is k×n: dA = G · Bᵀ
                            gemm(m, n, k, g_s, n as isize, 1, b_s, 1, n as isize, d, false);
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        let d = &mut db[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            // dB (n×k) = Gᵀ · A
                            gemm(n, m, k, g_s, 1, n as isize, a_s, k as isize, 1, d, false);
                        } else {
                            // dB (k×n) = Aᵀ · G
                            gemm(k, m, n, a_s, 1, k as isize, g_s, n as isize, 1, d, false);
                        }
                    }
                }
                if let Some(da) = da {
                    self.acc(grads, a, Tensor::vector(da));
                }
                if let Some(db) = db {
                    self.acc(grads, b, Tensor::vector(db));
                }
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, g.clone());
                if self.ng(b) {
                    self.acc(grads, b, Tensor::vector(gd.iter().map(|x| -x).collect()));
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.ng(a) {
                    self.acc(
                        grads,
                        a,
                        Tensor::vector(gd.iter().zip(bv).map(|(g, y)| g * y).collect()),
                    );
                }
                if self.ng(b) {
                    self.acc(
                        grads,
                        b,
                        Tensor::vector(gd.iter().zip(av).map(|(g, x)| g * x).collect()),
                    );
                }
            }
            &Op::Div(a, b) => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.ng(a) {
                    self.acc(
                        grads,
                        a,
                        Tensor::vector(gd.iter().zip(bv).map(|(g, y)| g / y).collect()),
                    );
                }
                if self.ng(b) {
                    let d = gd
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    self.acc(grads, b, Tensor::vector(d));
                }
            }
            &Op::Scale(a, c) => {
                self.acc(grads, a, Tensor::vector(gd.iter().map(|x| x * c).collect()));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &v in parts {
                    let len = self.value(v).len();
                    if self.ng(v) {
                        self.acc(grads, v, Tensor::vector(gd[off..off + len].to_vec()));
                    }
                    off += len;
                }
            }
            &Op::Slice { a, start } => {
                if self.ng(a) {
                    let av = self.value(a);
                    let row: usize = av.shape()[1..].iter().product();
                    let mut d = vec![0.0; av.len()];
                    d[start * row..start * row + gd.len()].copy_from_slice(gd);
                    self.acc(grads, a, Tensor::vector(d));
                }
            }
            Op::Permute { a, view, perm } => {
                let pshape: Vec<usize> = perm.iter().map(|&i| view[i]).collect();
                let (ishape, strides) = permuted_strides(&pshape, &inverse_perm(perm));
                let mut d = vec![0.0; gd.len()];
                permute_copy(gd, &ishape, &strides, &mut d);
                self.acc(grads, *a, Tensor::vector(d));
            }
            &Op::Tile(a) => {
                let n = self.value(a).len();
                let mut d = vec![0.0; n];
                for chunk in gd.chunks(n) {
                    for (x, y) in d.iter_mut().zip(chunk) {
                        *x += y;
                    }
                }
                self.acc(grads, a, Tensor::vector(d));
            }
            &Op::PairSum(a, b) => {
                let (p, h) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let mut da = vec![0.0; p * h];
                let mut db = vec![0.0; p * h];
                for j in 0..p {
                    for k in 0..p {
                        let row = &gd[(j * p + k) * h..(j * p + k + 1) * h];
                        for t in 0..h {
                            da[j * h + t] += row[t];
                            db[k * h + t] += row[t];
                        }
                    }
                }
                self.acc(grads, a, Tensor::vector(da));
                self.acc(grads, b, Tensor::vector(db));
            }
            &Op::Sum(a) => {
                let n = self.value(a).len();
                self.acc(grads, a, Tensor::vector(vec![gd[0]; n]));
            }
            &Op::Mean(a) => {
                let n = self.value(a).len();
                self.acc(grads, a, Tensor::vector(vec![gd[0] / n as f64; n]));
            }
            &Op::Softmax(a) => {
                let n = out.last_dim();
                let mut d = vec![0.0; out.len()];
                for ((dr, yr), gr) in d.chunks_mut(n).zip(out.data().chunks(n)).zip(gd.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for t in 0..n {
                        dr[t] = yr[t] * (gr[t] - dot);
                    }
                }
                self.acc(grads, a, Tensor::vector(d));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = out.last_dim();
                let gv = self.value(*gain).data();
                if self.ng(*x) {
                    let mut dx = vec![0.0; out.len()];
                    for (r, ((dr, xr), gr)) in dx
                        .chunks_mut(n)
                        .zip(xhat.chunks(n))
                        .zip(gd.chunks(n))
                        .enumerate()
                    {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for t in 0..n {
                            let dxh = gr[t] * gv[t];
                            m1 += dxh;
                            m2 += dxh * xr[t];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        for t in 0..n {
                            dr[t] = rstd[r] * (gr[t] * gv[t] - m1 - xr[t] * m2);
                        }
                    }
                    self.acc(grads, *x, Tensor::vector(dx));
                }
                if self.ng(*gain) || self.ng(*bias) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (xr, gr) in xhat.chunks(n).zip(gd.chunks(n)) {
                        for t in 0..n {
                            dg[t] += gr[t] * xr[t];
                            db[t] += gr[t];
                        }
                    }
                    self.acc(grads, *gain, Tensor::vector(dg));
                    self.acc(grads, *bias, Tensor::vector(db));
                }
            }
            Op::Gelu { a, cdf } => {
                let av = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(av.iter().zip(cdf))
                    .map(|(g, (&x, c))| g * (c + x * normal_pdf(x)))
                    .collect();
                self.acc(grads, *a, Tensor::vector(d));
            }
            &Op::Sigmoid(a) => {
                let d = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                self.acc(grads, a, Tensor::vector(d));
            }
            &Op::Log(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, x)| g / x)
                    .collect();
                self.acc(grads, a, Tensor::vector(d));
            }
            &Op::Exp(a) => {
                let d = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                self.acc(grads, a, Tensor::vector(d));
            }
            &Op::LogSumExp(a) => {
                let av = self.value(a);
                let n = av.last_dim();
                let mut d = vec![0.0; av.len()];
                for (r, (dr, xr)) in d.chunks_mut(n).zip(av.data().chunks(n)).enumerate() {
                    let l = out.data()[r];
                    for t in 0..n {
                        dr[t] = gd[r] * (xr[t] - l).exp();
                    }
                }
                self.acc(grads, a, Tensor::vector(d));
            }
            Op::CompositeNll {
                logits,
                scores,
                target,
            } => {
                let p = target.p();
                let (lo, hi) = (CLAMP.ln(), (-CLAMP).ln_1p());
                let e = self.value(*logits).data();
                let s = self.value(*scores).data();
                let mut de = vec![0.0; p * p];
                let mut ds = vec![0.0; p];
                for j in 0..p {
                    for k in 0..p {
                        if j == k {
                            continue;
                        }
                        let (ejk, t) = (e[j * p + k], s[j] - s[k]);
                        let lr = log_sigmoid(ejk) + log_sigmoid(t);
                        if lr <= lo || lr >= hi {
                            continue;
                        }
                        // d loss / d log r
                        let dl = if target.has_edge(j, k) {
                            -1.0
                        } else {
                            let r = lr.exp();
                            r / (1.0 - r)
                        };
                        let dl = dl * gd[0];
                        de[j * p + k] += dl * sigmoid(-ejk);
                        let dt = dl * sigmoid(-t);
                        ds[j] += dt;
                        ds[k] -= dt;
                    }
                }
                self.acc(grads, *logits, Tensor::vector(de));
                self.acc(grads, *scores, Tensor::vector(ds));
            }
        }
    }
}
