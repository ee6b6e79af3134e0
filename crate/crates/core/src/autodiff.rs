//! Reverse-mode differentiation over a linear tape.
//!
//! Every op takes batch-leading tensors: axis 0 is the batch, axis 1 the
//! channel. Token tensors are `(N, C, T, S, U)`. Values are recorded in
//! execution order, so a reverse sweep over the node list is a valid
//! topological order.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::{numel, Parameter, Real, ShapeError, Tensor};

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Token tensor axis a 1-D convolution can run along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    T,
    S,
    U,
}

impl Axis {
    fn dim(self) -> usize {
        match self {
            Axis::T => 2,
            Axis::S => 3,
            Axis::U => 4,
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Axis::T => "T",
            Axis::S => "S",
            Axis::U => "U",
        };
        f.write_str(s)
    }
}

impl FromStr for Axis {
    type Err = AutodiffError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "T" | "t" => Ok(Axis::T),
            "S" | "s" => Ok(Axis::S),
            "U" | "u" => Ok(Axis::U),
            other => Err(AutodiffError::Config(format!(
                "convolution axis must be one of T, S, U, got {other:?}"
            ))),
        }
    }
}

/// Batch normalization statistics source.
#[derive(Debug, Clone)]
pub enum NormMode<'a, R> {
    /// Normalize with the current batch statistics.
    Train,
    /// Normalize with stored running statistics.
    Infer { mean: &'a [R], var: &'a [R] },
}

/// Test hook that deliberately breaks one backward rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Uses `1 - y` instead of `1 - y^2` for the tanh derivative.
    TanhDerivative,
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    Add(Var, Var),
    AddBroadcast(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    ScaleBy(Var, Var),
    Tanh(Var),
    LeakyRelu(Var, R),
    Pointwise {
        x: Var,
        w: Var,
        b: Var,
    },
    AxisConv {
        x: Var,
        w: Var,
        b: Var,
        dim: usize,
        k: usize,
    },
    BatchNorm {
        x: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<R>,
        inv_std: Vec<R>,
        train: bool,
        batch_mean: Vec<R>,
        batch_var: Vec<R>,
    },
    Contract(Var, Var),
    ApplyScores(Var, Var),
    SliceChannels {
        x: Var,
        start: usize,
    },
    ConcatChannels(Vec<Var>),
    MeanTrailing(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        probs: Vec<R>,
        targets: Vec<R>,
        tau: R,
    },
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

/// Records a forward computation and replays it backwards.
#[derive(Debug)]
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
    params: HashMap<String, Var>,
    fault: Option<Fault>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Splits a batch-leading shape into `(N, C, inner)`.
fn nci(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(ShapeError::Rank {
            op,
            expected: 2,
            found: shape.len(),
        }
        .into());
    }
    Ok((shape[0], shape[1], numel(&shape[2..])))
}

/// Gradient buffer for `v`, or None if `v` is constant.
fn slot<'a, R: Real>(
    nodes: &[Node<R>],
    grads: &'a mut [Option<Vec<R>>],
    v: Var,
) -> Option<&'a mut Vec<R>> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![R::zero(); len]))
}

fn add_into<R: Real>(dst: &mut [R], src: &[R]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            fault: None,
        }
    }

    pub fn set_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter; binding the same name twice returns the same leaf.
    pub fn param(&mut self, p: &Parameter<R>) -> Var {
        if let Some(&v) = self.params.get(&p.name) {
            return v;
        }
        let mut t = p.tensor.clone();
        t.grad = None;
        let v = self.leaf(t);
        self.params.insert(p.name.clone(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[R]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grad(&self, name: &str) -> Option<&[R]> {
        self.params.get(name).and_then(|&v| self.grad(v))
    }

    /// Batch mean and biased variance of a train-mode batch norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[R], &[R])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                train: true,
                batch_mean,
                batch_var,
                ..
            } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(ShapeError::Invalid(format!("shape {sa:?} vs {sb:?}")).into());
        }
        for (i, (&x, &y)) in sa.iter().zip(sb).enumerate() {
            if x != y {
                return Err(ShapeError::mismatch(format!("axis {i}"), x, y).into());
            }
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| *x + *y)
            .collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// `x + y` where `y`'s shape is a trailing suffix of `x`'s shape.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sy = self.shape(y).to_vec();
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != sy[..] {
            return Err(ShapeError::Invalid(format!(
                "cannot broadcast {sy:?} onto {sx:?}: only leading axes may be broadcast"
            ))
            .into());
        }
        let inner = numel(&sy);
        let yv = self.value(y).data();
        let data = self
            .value(x)
            .data()
            .chunks(inner.max(1))
            .flat_map(|c| c.iter().zip(yv).map(|(a, b)| *a + *b))
            .collect();
        let out = Tensor::from_vec(&sx, data)?;
        let ng = self.needs(&[x, y]);
        Ok(self.push(out, Op::AddBroadcast(x, y), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: R) -> Var {
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(&[x]);
        self.push(out, Op::Scale(x, c), ng)
    }

    /// Multiplies by a single-element variable.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(ShapeError::mismatch("scale factor", 1, self.value(s).len()).into());
        }
        let c = self.value(s).data()[0];
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(&[x, s]);
        Ok(self.push(out, Op::ScaleBy(x, s), ng))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let ng = self.needs(&[x]);
        self.push(out, Op::Tanh(x), ng)
    }

    /// `x` where `x >= 0`, else `gamma * x`. The derivative at 0 is taken as 1.
    pub fn leaky_relu(&mut self, x: Var, gamma: R) -> Var {
        let out = self
            .value(x)
            .map(|v| if v >= R::zero() { v } else { gamma * v });
        let ng = self.needs(&[x]);
        self.push(out, Op::LeakyRelu(x, gamma), ng)
    }

    /// Channel mixing with a `1x1x1` kernel: `(N, Cin, ...)` to `(N, Cout, ...)`.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, cin, inner) = nci(&xs, "pointwise_conv")?;
        let ws = self.shape(w);
        if ws.len() != 2 {
            return Err(ShapeError::Rank {
                op: "pointwise_conv weight",
                expected: 2,
                found: ws.len(),
            }
            .into());
        }
        let cout = ws[0];
        if ws[1] != cin {
            return Err(ShapeError::mismatch("input channels (C_in)", ws[1], cin).into());
        }
        if self.shape(b) != [cout] {
            return Err(
                ShapeError::mismatch("bias channels (C_out)", cout, self.value(b).len()).into(),
            );
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![R::zero(); n * cout * inner];
        for bn in 0..n {
            for o in 0..cout {
                let dst = &mut out[(bn * cout + o) * inner..(bn * cout + o + 1) * inner];
                dst.fill(bv[o]);
                for i in 0..cin {
                    let wt = wv[o * cin + i];
                    let src = &xv[(bn * cin + i) * inner..(bn * cin + i + 1) * inner];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wt * *s;
                    }
                }
            }
        }
        let mut shape = xs;
        shape[1] = cout;
        let out = Tensor::from_vec(&shape, out)?;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::Pointwise { x, w, b }, ng))
    }

    /// Stride-1 cross-correlation along one token axis with zero same-padding.
    /// `w` is `(Cout, Cin, k)` with odd `k`.
    pub fn conv_axis(&mut self, x: Var, w: Var, b: Var, axis: Axis) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(ShapeError::Rank {
                op: "conv_axis",
                expected: 5,
                found: xs.len(),
            }
            .into());
        }
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 {
            return Err(ShapeError::Rank {
                op: "conv_axis weight",
                expected: 3,
                found: ws.len(),
            }
            .into());
        }
        let (cout, cin, k) = (ws[0], ws[1], ws[2]);
        if k % 2 == 0 {
            return Err(AutodiffError::Config(format!(
                "kernel length along {axis} must be odd, got {k}"
            )));
        }
        if cin != xs[1] {
            return Err(ShapeError::mismatch("input channels (C_in)", cin, xs[1]).into());
        }
        if self.shape(b) != [cout] {
            return Err(
                ShapeError::mismatch("bias channels (C_out)", cout, self.value(b).len()).into(),
            );
        }
        let dim = axis.dim();
        let n = xs[0];
        let a = numel(&xs[2..dim]);
        let l = xs[dim];
        let bb = numel(&xs[dim + 1..]);
        let pad = k / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let plane = a * l * bb;
        let mut out = vec![R::zero(); n * cout * plane];
        for bn in 0..n {
            for o in 0..cout {
                let dst = &mut out[(bn * cout + o) * plane..(bn * cout + o + 1) * plane];
                dst.fill(bv[o]);
                for i in 0..cin {
                    let src = &xv[(bn * cin + i) * plane..(bn * cin + i + 1) * plane];
                    for j in 0..k {
                        let wt = wv[(o * cin + i) * k + j];
                        // out[l] += w * x[l + j - pad]
                        let lo = pad.saturating_sub(j);
                        let hi = (l + pad).saturating_sub(j).min(l);
                        for ai in 0..a {
                            for li in lo..hi {
                                let sl = li + j - pad;
                                let d0 = (ai * l + li) * bb;
                                let s0 = (ai * l + sl) * bb;
                                for (d, s) in dst[d0..d0 + bb].iter_mut().zip(&src[s0..s0 + bb]) {
                                    *d += wt * *s;
                                }
                            }
                        }
                    }
                }
            }
        }
        let mut shape = xs;
        shape[1] = cout;
        let out = Tensor::from_vec(&shape, out)?;
        let ng = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::AxisConv { x, w, b, dim, k }, ng))
    }

    /// Per-channel normalization over every non-channel axis of `(N, C, ...)`.
    pub fn batchnorm(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        mode: NormMode<'_, R>,
        eps: R,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c, inner) = nci(&xs, "batchnorm")?;
        if self.value(scale).len() != c {
            return Err(ShapeError::mismatch(
                "batchnorm scale channels",
                c,
                self.value(scale).len(),
            )
            .into());
        }
        if self.value(shift).len() != c {
            return Err(ShapeError::mismatch(
                "batchnorm shift channels",
                c,
                self.value(shift).len(),
            )
            .into());
        }
        if eps <= R::zero() {
            return Err(AutodiffError::Config(
                "batchnorm eps must be positive".into(),
            ));
        }
        let xv = self.value(x).data();
        let count = R::lit((n * inner) as f64);
        let train = matches!(mode, NormMode::Train);
        let (mean, var) = match mode {
            NormMode::Train => {
                let mut mean = vec![R::zero(); c];
                let mut var = vec![R::zero(); c];
                for ch in 0..c {
                    let mut s = R::zero();
                    for bn in 0..n {
                        for v in &xv[(bn * c + ch) * inner..(bn * c + ch + 1) * inner] {
                            s += *v;
                        }
                    }
                    let m = s / count;
                    let mut q = R::zero();
                    for bn in 0..n {
                        for v in &xv[(bn * c + ch) * inner..(bn * c + ch + 1) * inner] {
                            let d = *v - m;
                            q += d * d;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q / count;
                }
                (mean, var)
            }
            NormMode::Infer { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(
                        ShapeError::mismatch("running statistics channels", c, mean.len()).into(),
                    );
                }
                (mean.to_vec(), var.to_vec())
            }
        };
        let inv_std: Vec<R> = var.iter().map(|v| R::one() / (*v + eps).sqrt()).collect();
        let sv = self.value(scale).data();
        let hv = self.value(shift).data();
        let mut xhat = vec![R::zero(); xv.len()];
        let mut out = vec![R::zero(); xv.len()];
        for bn in 0..n {
            for ch in 0..c {
                let r = (bn * c + ch) * inner..(bn * c + ch + 1) * inner;
                for idx in r {
                    let h = (xv[idx] - mean[ch]) * inv_std[ch];
                    xhat[idx] = h;
                    out[idx] = sv[ch] * h + hv[ch];
                }
            }
        }
        let out = Tensor::from_vec(&xs, out)?;
        let ng = self.needs(&[x, scale, shift]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
                batch_mean: if train { mean } else { Vec::new() },
                batch_var: if train { var } else { Vec::new() },
            },
            ng,
        ))
    }

    /// Token Gram matrix: `out[n,u,v] = sum_f q[n,f,u] * k[n,f,v]` where `f`
    /// runs over every axis between the batch and the trailing token axis.
    pub fn attention_contract(&mut self, q: Var, k: Var) -> Result<Var> {
        self.same_shape(q, k)?;
        let qs = self.shape(q).to_vec();
        if qs.len() < 3 {
            return Err(ShapeError::Rank {
                op: "attention_contract",
                expected: 3,
                found: qs.len(),
            }
            .into());
        }
        let n = qs[0];
        let u = *qs.last().unwrap();
        let f = numel(&qs[1..qs.len() - 1]);
        let qv = self.value(q).data();
        let kv = self.value(k).data();
        let mut out = vec![R::zero(); n * u * u];
        for bn in 0..n {
            let o = &mut out[bn * u * u..(bn + 1) * u * u];
            for fi in 0..f {
                let base = (bn * f + fi) * u;
                let qr = &qv[base..base + u];
                let kr = &kv[base..base + u];
                for (ui, &qu) in qr.iter().enumerate() {
                    let row = &mut o[ui * u..(ui + 1) * u];
                    for (r, &kvv) in row.iter_mut().zip(kr) {
                        *r += qu * kvv;
                    }
                }
            }
        }
        let out = Tensor::from_vec(&[n, u, u], out)?;
        let ng = self.needs(&[q, k]);
        Ok(self.push(out, Op::Contract(q, k), ng))
    }

    /// Token mixing: `out[n,f,u] = sum_w scores[n,u,w] * v[n,f,w]`.
    pub fn apply_scores(&mut self, scores: Var, v: Var) -> Result<Var> {
        let vs = self.shape(v).to_vec();
        let ss = self.shape(scores).to_vec();
        if vs.len() < 2 {
            return Err(ShapeError::Rank {
                op: "apply_scores",
                expected: 2,
                found: vs.len(),
            }
            .into());
        }
        let n = vs[0];
        let u = *vs.last().unwrap();
        if ss.len() != 3 {
            return Err(ShapeError::Rank {
                op: "apply_scores scores",
                expected: 3,
                found: ss.len(),
            }
            .into());
        }
        if ss[0] != n {
            return Err(ShapeError::mismatch("scores batch", n, ss[0]).into());
        }
        if ss[1] != u || ss[2] != u {
            return Err(ShapeError::mismatch(
                "scores token axis (U)",
                u,
                if ss[1] != u { ss[1] } else { ss[2] },
            )
            .into());
        }
        let f = numel(&vs[1..vs.len() - 1]);
        let sv = self.value(scores).data();
        let vv = self.value(v).data();
        let mut out = vec![R::zero(); vv.len()];
        for bn in 0..n {
            let s = &sv[bn * u * u..(bn + 1) * u * u];
            for fi in 0..f {
                let base = (bn * f + fi) * u;
                let vr = &vv[base..base + u];
                for ui in 0..u {
                    let srow = &s[ui * u..(ui + 1) * u];
                    out[base + ui] = srow.iter().zip(vr).map(|(a, b)| *a * *b).sum();
                }
            }
        }
        let out = Tensor::from_vec(&vs, out)?;
        let ng = self.needs(&[scores, v]);
        Ok(self.push(out, Op::ApplyScores(scores, v), ng))
    }

    /// Channels `start..start+len` of `(N, C, ...)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c, inner) = nci(&xs, "slice_channels")?;
        if start + len > c {
            return Err(ShapeError::Invalid(format!(
                "channel slice {start}..{} out of range for {c} channels",
                start + len
            ))
            .into());
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * inner);
        for bn in 0..n {
            out.extend_from_slice(&xv[(bn * c + start) * inner..(bn * c + start + len) * inner]);
        }
        let mut shape = xs;
        shape[1] = len;
        let out = Tensor::from_vec(&shape, out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::SliceChannels { x, start }, ng))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| ShapeError::Invalid("concat of zero tensors".into()))?;
        let fs = self.shape(first).to_vec();
        let (n, _, inner) = nci(&fs, "concat_channels")?;
        let mut total = 0;
        for &p in parts {
            let ps = self.shape(p);
            if ps.len() != fs.len() || ps[0] != n || ps[2..] != fs[2..] {
                return Err(ShapeError::Invalid(format!(
                    "concat part shape {ps:?} incompatible with {fs:?}"
                ))
                .into());
            }
            total += ps[1];
        }
        let mut out = Vec::with_capacity(n * total * inner);
        for bn in 0..n {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[bn * c * inner..(bn + 1) * c * inner]);
            }
        }
        let mut shape = fs;
        shape[1] = total;
        let out = Tensor::from_vec(&shape, out)?;
        let ng = self.needs(parts);
        Ok(self.push(out, Op::ConcatChannels(parts.to_vec()), ng))
    }

    /// Global average over all axes after the channel axis: `(N, C, ...)` to `(N, C)`.
    pub fn mean_trailing(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let (n, c, inner) = nci(&xs, "mean_trailing")?;
        let denom = R::lit(inner as f64);
        let out: Vec<R> = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|ch| ch.iter().copied().sum::<R>() / denom)
            .collect();
        let out = Tensor::from_vec(&[n, c], out)?;
        let ng = self.needs(&[x]);
        Ok(self.push(out, Op::MeanTrailing(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(&[x]);
        self.push(out, Op::Sum(x), ng)
    }

    /// Batch-mean cross entropy of `softmax(logits / tau)` against
    /// label-smoothed targets `(1 - eps) * onehot + eps / K`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], eps: R, tau: R) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 {
            return Err(ShapeError::Rank {
                op: "cross_entropy",
                expected: 2,
                found: ls.len(),
            }
            .into());
        }
        let (n, k) = (ls[0], ls[1]);
        if labels.len() != n {
            return Err(ShapeError::mismatch("label count", n, labels.len()).into());
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(
                ShapeError::Invalid(format!("label {bad} out of range for {k} classes")).into(),
            );
        }
        let lv = self.value(logits).data();
        let mut probs = vec![R::zero(); n * k];
        let mut targets = vec![eps / R::lit(k as f64); n * k];
        let mut loss = R::zero();
        for bn in 0..n {
            let row = &lv[bn * k..(bn + 1) * k];
            let mx = row.iter().fold(R::neg_infinity(), |a, &b| a.max(b / tau));
            let lse = row.iter().map(|&z| (z / tau - mx).exp()).sum::<R>().ln() + mx;
            targets[bn * k + labels[bn]] += R::one() - eps;
            for j in 0..k {
                let logp = row[j] / tau - lse;
                probs[bn * k + j] = logp.exp();
                loss -= targets[bn * k + j] * logp;
            }
        }
        let out = Tensor::scalar(loss / R::lit(n as f64));
        let ng = self.needs(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                tau,
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Gradients from earlier sweeps are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if numel(ls) != 1 {
            return Err(AutodiffError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<R>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, node: &Node<R>, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = slot(nodes, grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::AddBroadcast(x, y) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    add_into(gx, g);
                }
                let inner = nodes[y.0].value.len();
                if let Some(gy) = slot(nodes, grads, *y) {
                    for c in g.chunks(inner.max(1)) {
                        add_into(gy, c);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if let Some(ga) = slot(nodes, grads, *a) {
                    for ((d, gi), bi) in ga.iter_mut().zip(g).zip(vb) {
                        *d += *gi * *bi;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for ((d, gi), ai) in gb.iter_mut().zip(g).zip(va) {
                        *d += *gi * *ai;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (d, gi) in gx.iter_mut().zip(g) {
                        *d += *gi * *c;
                    }
                }
            }
            Op::ScaleBy(x, s) => {
                let c = val(*s)[0];
                let xv = val(*x);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (d, gi) in gx.iter_mut().zip(g) {
                        *d += *gi * c;
                    }
                }
                if let Some(gs) = slot(nodes, grads, *s) {
                    gs[0] += g.iter().zip(xv).map(|(a, b)| *a * *b).sum::<R>();
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let fault = self.fault == Some(Fault::TanhDerivative);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        let dy = if fault {
                            R::one() - *yi
                        } else {
                            R::one() - *yi * *yi
                        };
                        *d += *gi * dy;
                    }
                }
            }
            Op::LeakyRelu(x, gamma) => {
                let xv = val(*x);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        *d += if *xi >= R::zero() { *gi } else { *gi * *gamma };
                    }
                }
            }
            Op::Pointwise { x, w, b } => {
                let xs = nodes[x.0].value.shape();
                let (n, cin, inner) = (xs[0], xs[1], numel(&xs[2..]));
                let cout = nodes[w.0].value.shape()[0];
                let (xv, wv) = (val(*x), val(*w));
                if let Some(gx) = slot(nodes, grads, *x) {
                    for bn in 0..n {
                        for o in 0..cout {
                            let go = &g[(bn * cout + o) * inner..(bn * cout + o + 1) * inner];
                            for i in 0..cin {
                                let wt = wv[o * cin + i];
                                let dst =
                                    &mut gx[(bn * cin + i) * inner..(bn * cin + i + 1) * inner];
                                for (d, gi) in dst.iter_mut().zip(go) {
                                    *d += wt * *gi;
                                }
                            }
                        }
                    }
                }
                if let Some(gw) = slot(nodes, grads, *w) {
                    for bn in 0..n {
                        for o in 0..cout {
                            let go = &g[(bn * cout + o) * inner..(bn * cout + o + 1) * inner];
                            for i in 0..cin {
                                let src = &xv[(bn * cin + i) * inner..(bn * cin + i + 1) * inner];
                                gw[o * cin + i] +=
                                    go.iter().zip(src).map(|(a, b)| *a * *b).sum::<R>();
                            }
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for bn in 0..n {
                        for o in 0..cout {
                            gb[o] += g[(bn * cout + o) * inner..(bn * cout + o + 1) * inner]
                                .iter()
                                .copied()
                                .sum::<R>();
                        }
                    }
                }
            }
            Op::AxisConv { x, w, b, dim, k } => {
                let xs = nodes[x.0].value.shape();
                let (dim, k) = (*dim, *k);
                let (n, cin) = (xs[0], xs[1]);
                let cout = nodes[w.0].value.shape()[0];
                let a = numel(&xs[2..dim]);
                let l = xs[dim];
                let bb = numel(&xs[dim + 1..]);
                let plane = a * l * bb;
                let pad = k / 2;
                let (xv, wv) = (val(*x), val(*w));
                let ranges: Vec<(usize, usize)> = (0..k)
                    .map(|j| (pad.saturating_sub(j), (l + pad).saturating_sub(j).min(l)))
                    .collect();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for bn in 0..n {
                        for o in 0..cout {
                            let go = &g[(bn * cout + o) * plane..(bn * cout + o + 1) * plane];
                            for i in 0..cin {
                                let dst =
                                    &mut gx[(bn * cin + i) * plane..(bn * cin + i + 1) * plane];
                                for (j, &(lo, hi)) in ranges.iter().enumerate() {
                                    let wt = wv[(o * cin + i) * k + j];
                                    for ai in 0..a {
                                        for li in lo..hi {
                                            let sl = li + j - pad;
                                            let d0 = (ai * l + sl) * bb;
                                            let g0 = (ai * l + li) * bb;
                                            for (d, gi) in
                                                dst[d0..d0 + bb].iter_mut().zip(&go[g0..g0 + bb])
                                            {
                                                *d += wt * *gi;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gw) = slot(nodes, grads, *w) {
                    for bn in 0..n {
                        for o in 0..cout {
                            let go = &g[(bn * cout + o) * plane..(bn * cout + o + 1) * plane];
                            for i in 0..cin {
                                let src = &xv[(bn * cin + i) * plane..(bn * cin + i + 1) * plane];
                                for (j, &(lo, hi)) in ranges.iter().enumerate() {
                                    let mut acc = R::zero();
                                    for ai in 0..a {
                                        for li in lo..hi {
                                            let sl = li + j - pad;
                                            let s0 = (ai * l + sl) * bb;
                                            let g0 = (ai * l + li) * bb;
                                            acc += go[g0..g0 + bb]
                                                .iter()
                                                .zip(&src[s0..s0 + bb])
                                                .map(|(p, q)| *p * *q)
                                                .sum::<R>();
                                        }
                                    }
                                    gw[(o * cin + i) * k + j] += acc;
                                }
                            }
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for bn in 0..n {
                        for o in 0..cout {
                            gb[o] += g[(bn * cout + o) * plane..(bn * cout + o + 1) * plane]
                                .iter()
                                .copied()
                                .sum::<R>();
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                scale,
                shift,
                xhat,
                inv_std,
                train,
                ..
            } => {
                let xs = nodes[x.0].value.shape();
                let (n, c, inner) = (xs[0], xs[1], numel(&xs[2..]));
                let sv = val(*scale);
                let mut sum_g = vec![R::zero(); c];
                let mut sum_gh = vec![R::zero(); c];
                for bn in 0..n {
                    for ch in 0..c {
                        for idx in (bn * c + ch) * inner..(bn * c + ch + 1) * inner {
                            sum_g[ch] += g[idx];
                            sum_gh[ch] += g[idx] * xhat[idx];
                        }
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let m = R::lit((n * inner) as f64);
                    for bn in 0..n {
                        for ch in 0..c {
                            let k = sv[ch] * inv_std[ch];
                            for idx in (bn * c + ch) * inner..(bn * c + ch + 1) * inner {
                                gx[idx] += if *train {
                                    k * (g[idx] - sum_g[ch] / m - xhat[idx] * sum_gh[ch] / m)
                                } else {
                                    k * g[idx]
                                };
                            }
                        }
                    }
                }
                if let Some(gs) = slot(nodes, grads, *scale) {
                    add_into(gs, &sum_gh);
                }
                if let Some(gh) = slot(nodes, grads, *shift) {
                    add_into(gh, &sum_g);
                }
            }
            Op::Contract(q, k) => {
                let qs = nodes[q.0].value.shape();
                let n = qs[0];
                let u = *qs.last().unwrap();
                let f = numel(&qs[1..qs.len() - 1]);
                let (qv, kv) = (val(*q), val(*k));
                if let Some(gq) = slot(nodes, grads, *q) {
                    for bn in 0..n {
                        let go = &g[bn * u * u..(bn + 1) * u * u];
                        for fi in 0..f {
                            let base = (bn * f + fi) * u;
                            let kr = &kv[base..base + u];
                            for ui in 0..u {
                                gq[base + ui] += go[ui * u..(ui + 1) * u]
                                    .iter()
                                    .zip(kr)
                                    .map(|(a, b)| *a * *b)
                                    .sum::<R>();
                            }
                        }
                    }
                }
                if let Some(gk) = slot(nodes, grads, *k) {
                    for bn in 0..n {
                        let go = &g[bn * u * u..(bn + 1) * u * u];
                        for fi in 0..f {
                            let base = (bn * f + fi) * u;
                            let qr = &qv[base..base + u];
                            for (ui, &qu) in qr.iter().enumerate() {
                                let row = &go[ui * u..(ui + 1) * u];
                                for (d, gi) in gk[base..base + u].iter_mut().zip(row) {
                                    *d += qu * *gi;
                                }
                            }
                        }
                    }
                }
            }
            Op::ApplyScores(s, v) => {
                let vs = nodes[v.0].value.shape();
                let n = vs[0];
                let u = *vs.last().unwrap();
                let f = numel(&vs[1..vs.len() - 1]);
                let (sv, vv) = (val(*s), val(*v));
                if let Some(gs) = slot(nodes, grads, *s) {
                    for bn in 0..n {
                        for fi in 0..f {
                            let base = (bn * f + fi) * u;
                            let vr = &vv[base..base + u];
                            for ui in 0..u {
                                let gu = g[base + ui];
                                let row = &mut gs[bn * u * u + ui * u..bn * u * u + (ui + 1) * u];
                                for (d, vw) in row.iter_mut().zip(vr) {
                                    *d += gu * *vw;
                                }
                            }
                        }
                    }
                }
                if let Some(gv) = slot(nodes, grads, *v) {
                    for bn in 0..n {
                        let smat = &sv[bn * u * u..(bn + 1) * u * u];
                        for fi in 0..f {
                            let base = (bn * f + fi) * u;
                            for ui in 0..u {
                                let gu = g[base + ui];
                                let srow = &smat[ui * u..(ui + 1) * u];
                                for (d, sw) in gv[base..base + u].iter_mut().zip(srow) {
                                    *d += gu * *sw;
                                }
                            }
                        }
                    }
                }
            }
            Op::SliceChannels { x, start } => {
                let xs = nodes[x.0].value.shape();
                let (n, c, inner) = (xs[0], xs[1], numel(&xs[2..]));
                let len = node.value.shape()[1];
                if let Some(gx) = slot(nodes, grads, *x) {
                    for bn in 0..n {
                        let dst = &mut gx[(bn * c + start) * inner..(bn * c + start + len) * inner];
                        add_into(dst, &g[bn * len * inner..(bn + 1) * len * inner]);
                    }
                }
            }
            Op::ConcatChannels(parts) => {
                let os = node.value.shape();
                let (n, total, inner) = (os[0], os[1], numel(&os[2..]));
                let mut off = 0;
                for &p in parts {
                    let c = nodes[p.0].value.shape()[1];
                    if let Some(gp) = slot(nodes, grads, p) {
                        for bn in 0..n {
                            let src =
                                &g[(bn * total + off) * inner..(bn * total + off + c) * inner];
                            add_into(&mut gp[bn * c * inner..(bn + 1) * c * inner], src);
                        }
                    }
                    off += c;
                }
            }
            Op::MeanTrailing(x) => {
                let xs = nodes[x.0].value.shape();
                let inner = numel(&xs[2..]);
                let denom = R::lit(inner as f64);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (chunk, gi) in gx.chunks_mut(inner).zip(g) {
                        let v = *gi / denom;
                        for d in chunk {
                            *d += v;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                tau,
            } => {
                let n = nodes[logits.0].value.shape()[0];
                let c = g[0] / (*tau * R::lit(n as f64));
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for ((d, p), t) in gl.iter_mut().zip(probs).zip(targets) {
                        *d += c * (*p - *t);
                    }
                }
            }
        }
    }
}
