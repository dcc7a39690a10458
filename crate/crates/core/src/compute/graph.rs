//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward rule. Nodes are appended after their inputs, so
//! walking the tape from the end visits them in reverse topological order.

use rand::Rng;

use super::{ComputeError, Real, Tensor};

/// Additive mask value applied to padded attention keys.
pub const ATTENTION_MASK_FILL: f64 = -1e9;

/// Layer-norm variance epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Gelu {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedMeanPool {
        x: Var,
        mask: Vec<bool>,
        counts: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    GradReverse {
        x: Var,
        lambda: T,
    },
    Nll {
        x: Var,
        targets: Vec<Option<usize>>,
        count: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// A recording of differentiable operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`; nodes the loss does not depend on get zeros.
    pub fn get(&self, var: Var) -> Tensor<T> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor<T> {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }

    /// Whether any gradient reached `var`.
    pub fn touched(&self, var: Var) -> bool {
        self.grads[var.0].is_some()
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let d = shape.last().copied().unwrap_or(1);
    let rows = if d == 0 { 0 } else { shape.iter().product::<usize>() / d };
    (rows, d)
}

fn shape_err(msg: String) -> ComputeError {
    ComputeError::ShapeMismatch(msg)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var, ComputeError> {
        if !value.is_finite() {
            return Err(ComputeError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// `[.., K] × [K, N] -> [.., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || sa.is_empty() || *sa.last().unwrap() != sb[0] {
            return Err(shape_err(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (m, k) = split_last(sa);
        let n = sb[1];
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            false,
        );
        self.push(Tensor::new(out_shape, out)?, Op::MatMul { a, b }, "matmul")
    }

    /// Elementwise sum; `b` may broadcast over the leading dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ComputeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(format!("add {:?} + {:?}", sa, sb)));
        }
        let bv = self.value(b).data();
        let nb = bv.len().max(1);
        let data: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % nb])
            .collect();
        let shape = sa.to_vec();
        self.push(Tensor::new(shape, data)?, Op::Add { a, b }, "add")
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var, ComputeError> {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor }, "scale")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var, ComputeError> {
        let out = self.value(x).map(|v| gelu_tanh(v).0);
        self.push(out, Op::Gelu { x }, "gelu")
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var, ComputeError> {
        let xv = self.value(x);
        let (rows, d) = split_last(xv.shape());
        let mut out = xv.data().to_vec();
        for r in 0..rows {
            softmax_in_place(&mut out[r * d..(r + 1) * d]);
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Softmax { x }, "softmax")
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var, ComputeError> {
        let xv = self.value(x);
        let (rows, d) = split_last(xv.shape());
        let mut out = xv.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * d..(r + 1) * d];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + T::sum_of(row.iter().map(|&v| (v - max).exp())).ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::LogSoftmax { x }, "log_softmax")
    }

    /// Normalizes over the last dim, then applies learnable `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, ComputeError> {
        let xv = self.value(x);
        let (rows, d) = split_last(xv.shape());
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err(format!(
                "layer_norm over {} with gamma {:?} beta {:?}",
                d,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let eps = T::lit(LAYER_NORM_EPS);
        let dn = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = T::sum_of(row.iter().copied()) / dn;
            let var = T::sum_of(row.iter().map(|&v| (v - mean) * (v - mean))) / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            "layer_norm",
        )
    }

    /// Inverted dropout. A rate of zero returns `x` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var, ComputeError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(ComputeError::InvalidArgument(format!("dropout rate {rate}")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Dropout { x, mask }, "dropout")
    }

    /// Row lookup: output shape is `ids_shape ++ [D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var, ComputeError> {
        let st = self.shape(table);
        if st.len() != 2 || ids_shape.iter().product::<usize>() != ids.len() {
            return Err(shape_err(format!(
                "embedding table {:?} with ids shape {:?}",
                st, ids_shape
            )));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(ComputeError::InvalidArgument(format!(
                "embedding id {bad} outside table of {v} rows"
            )));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        self.push(
            Tensor::new(shape, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            "embedding",
        )
    }

    /// Mean over positions where `mask` is true: `[B, T, D] -> [B, D]`.
    pub fn masked_mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var, ComputeError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || mask.len() != sx[0] * sx[1] {
            return Err(shape_err(format!(
                "masked_mean_pool {:?} with mask of {}",
                sx,
                mask.len()
            )));
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let counts: Vec<usize> = (0..b).map(|i| mask[i * t..(i + 1) * t].iter().filter(|&&m| m).count()).collect();
        if counts.contains(&0) {
            return Err(ComputeError::InvalidArgument(
                "masked_mean_pool row without real positions".into(),
            ));
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); b * d];
        for i in 0..b {
            let inv = T::one() / T::from_usize(counts[i]).unwrap();
            let dst = &mut out[i * d..(i + 1) * d];
            for j in 0..t {
                if mask[i * t + j] {
                    let src = &xv[(i * t + j) * d..(i * t + j + 1) * d];
                    dst.iter_mut().zip(src).for_each(|(o, &s)| *o = *o + s);
                }
            }
            dst.iter_mut().for_each(|o| *o = *o * inv);
        }
        self.push(
            Tensor::new(vec![b, d], out)?,
            Op::MaskedMeanPool {
                x,
                mask: mask.to_vec(),
                counts,
            },
            "masked_mean_pool",
        )
    }

    /// Concatenation along the last dim.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, ComputeError> {
        let first = parts
            .first()
            .ok_or_else(|| ComputeError::InvalidArgument("concat of nothing".into()))?;
        let lead = self.shape(*first)[..self.shape(*first).len().saturating_sub(1)].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(shape_err(format!("concat part {:?} vs leading {:?}", s, lead)));
            }
            widths.push(*s.last().unwrap());
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
            },
            "concat",
        )
    }

    /// Multi-head scaled dot-product attention over `[B, T, D]` projections.
    ///
    /// Keys where `key_mask` is false receive an additive
    /// [`ATTENTION_MASK_FILL`] before the softmax.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        key_mask: &[bool],
        heads: usize,
    ) -> Result<Var, ComputeError> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 3 || self.shape(k) != sq || self.shape(v) != sq {
            return Err(shape_err(format!(
                "attention q {:?} k {:?} v {:?}",
                sq,
                self.shape(k),
                self.shape(v)
            )));
        }
        let (b, t, d) = (sq[0], sq[1], sq[2]);
        if heads == 0 || d % heads != 0 || key_mask.len() != b * t {
            return Err(shape_err(format!(
                "attention with {heads} heads over width {d}, mask {}",
                key_mask.len()
            )));
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let fill = T::lit(ATTENTION_MASK_FILL);
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::zero(); b * heads * t * t];
        let mut out = vec![T::zero(); b * t * d];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let qrow = &qv[(bi * t + i) * d + off..(bi * t + i) * d + off + dh];
                    let prow = &mut probs[((bi * heads + h) * t + i) * t..((bi * heads + h) * t + i + 1) * t];
                    for j in 0..t {
                        let krow = &kv[(bi * t + j) * d + off..(bi * t + j) * d + off + dh];
                        let mut s = dot(qrow, krow) * scale;
                        if !key_mask[bi * t + j] {
                            s = s + fill;
                        }
                        prow[j] = s;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(bi * t + i) * d + off..(bi * t + i) * d + off + dh];
                    for j in 0..t {
                        let p = prow[j];
                        let vrow = &vv[(bi * t + j) * d + off..(bi * t + j) * d + off + dh];
                        orow.iter_mut().zip(vrow).for_each(|(o, &x)| *o = *o + p * x);
                    }
                }
            }
        }
        self.push(
            Tensor::new(sq, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            "attention",
        )
    }

    /// Identity forward; backward maps the upstream gradient `g` to `-lambda * g`.
    pub fn gradient_reversal(&mut self, x: Var, lambda: T) -> Result<Var, ComputeError> {
        if !(lambda > T::zero()) {
            return Err(ComputeError::InvalidArgument(format!(
                "gradient reversal lambda must be positive, got {lambda}"
            )));
        }
        let out = self.value(x).clone();
        self.push(out, Op::GradReverse { x, lambda }, "gradient_reversal")
    }

    /// Mean negative log-likelihood over rows of `[.., C]` log-probabilities.
    ///
    /// Rows whose target equals `ignore` are skipped. Returns the scalar loss
    /// and whether every row was ignored (in which case the loss is 0).
    pub fn nll_loss(&mut self, log_probs: Var, targets: &[i64], ignore: i64) -> Result<(Var, bool), ComputeError> {
        let (rows, c) = split_last(self.shape(log_probs));
        if targets.len() != rows {
            return Err(shape_err(format!(
                "nll_loss over {rows} rows with {} targets",
                targets.len()
            )));
        }
        let mut parsed = Vec::with_capacity(rows);
        for (index, &tgt) in targets.iter().enumerate() {
            if tgt == ignore {
                parsed.push(None);
            } else if tgt < 0 || tgt as usize >= c {
                return Err(ComputeError::TargetOutOfRange {
                    index,
                    target: tgt,
                    classes: c,
                });
            } else {
                parsed.push(Some(tgt as usize));
            }
        }
        let lp = self.value(log_probs).data();
        let mut sum = T::zero();
        let mut count = 0usize;
        for (r, t) in parsed.iter().enumerate() {
            if let Some(t) = t {
                sum = sum - lp[r * c + t];
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            sum / T::from_usize(count).unwrap()
        };
        let var = self.push(
            Tensor::scalar(loss),
            Op::Nll {
                x: log_probs,
                targets: parsed,
                count,
            },
            "nll_loss",
        )?;
        Ok((var, count == 0))
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, ComputeError> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(ComputeError::NonFinite { op: "backward" });
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Tensor<T>>], var: Var) -> &'a mut [T] {
        grads[var.0]
            .get_or_insert_with(|| Tensor::zeros(self.nodes[var.0].value.shape()))
            .data_mut()
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = split_last(self.shape(*a));
                let nn = self.shape(*b)[1];
                let bv = self.value(*b).data();
                T::gemm(m, nn, k, gd, (nn as isize, 1), bv, (1, nn as isize), self.grad_buf(grads, *a), true);
                let av = self.value(*a).data();
                T::gemm(k, m, nn, av, (1, k as isize), gd, (nn as isize, 1), self.grad_buf(grads, *b), true);
            }
            Op::Add { a, b } => {
                self.grad_buf(grads, *a)
                    .iter_mut()
                    .zip(gd)
                    .for_each(|(d, &x)| *d = *d + x);
                let gb = self.grad_buf(grads, *b);
                let nb = gb.len().max(1);
                for (idx, &x) in gd.iter().enumerate() {
                    gb[idx % nb] = gb[idx % nb] + x;
                }
            }
            Op::Scale { x, factor } => {
                self.grad_buf(grads, *x)
                    .iter_mut()
                    .zip(gd)
                    .for_each(|(d, &u)| *d = *d + u * *factor);
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                let gx = self.grad_buf(grads, *x);
                for j in 0..gd.len() {
                    gx[j] = gx[j] + gd[j] * gelu_tanh(xv[j]).1;
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let (rows, d) = split_last(node.value.shape());
                let gx = self.grad_buf(grads, *x);
                for r in 0..rows {
                    let s = r * d..(r + 1) * d;
                    let dotp: T = dot(&gd[s.clone()], &y[s.clone()]);
                    for j in s {
                        gx[j] = gx[j] + y[j] * (gd[j] - dotp);
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let y = node.value.data();
                let (rows, d) = split_last(node.value.shape());
                let gx = self.grad_buf(grads, *x);
                for r in 0..rows {
                    let s = r * d..(r + 1) * d;
                    let total = T::sum_of(gd[s.clone()].iter().copied());
                    for j in s {
                        gx[j] = gx[j] + gd[j] - y[j].exp() * total;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, d) = split_last(node.value.shape());
                let gv = self.value(*gamma).data();
                {
                    let gg = self.grad_buf(grads, *gamma);
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] = gg[j] + gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                {
                    let gb = self.grad_buf(grads, *beta);
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] = gb[j] + gd[r * d + j];
                        }
                    }
                }
                let dn = T::from_usize(d).unwrap();
                let gx = self.grad_buf(grads, *x);
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for j in 0..d {
                        dxhat[j] = gd[r * d + j] * gv[j];
                        sum_dxhat = sum_dxhat + dxhat[j];
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat[j] * xhat[r * d + j];
                    }
                    let c = inv_std[r] / dn;
                    for j in 0..d {
                        gx[r * d + j] = gx[r * d + j]
                            + c * (dn * dxhat[j] - sum_dxhat - xhat[r * d + j] * sum_dxhat_xhat);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                self.grad_buf(grads, *x)
                    .iter_mut()
                    .zip(gd.iter().zip(mask))
                    .for_each(|(d, (&u, &m))| *d = *d + u * m);
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let gt = self.grad_buf(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * d..(id + 1) * d];
                    dst.iter_mut().zip(&gd[r * d..(r + 1) * d]).for_each(|(o, &u)| *o = *o + u);
                }
            }
            Op::MaskedMeanPool { x, mask, counts } => {
                let sx = self.shape(*x);
                let (b, t, d) = (sx[0], sx[1], sx[2]);
                let gx = self.grad_buf(grads, *x);
                for bi in 0..b {
                    let inv = T::one() / T::from_usize(counts[bi]).unwrap();
                    for j in 0..t {
                        if mask[bi * t + j] {
                            let dst = &mut gx[(bi * t + j) * d..(bi * t + j + 1) * d];
                            dst.iter_mut()
                                .zip(&gd[bi * d..(bi + 1) * d])
                                .for_each(|(o, &u)| *o = *o + u * inv);
                        }
                    }
                }
            }
            Op::Concat { parts } => {
                let total = node.value.last_dim();
                let rows = if total == 0 { 0 } else { gd.len() / total };
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    let gp = self.grad_buf(grads, p);
                    for r in 0..rows {
                        let dst = &mut gp[r * w..(r + 1) * w];
                        dst.iter_mut()
                            .zip(&gd[r * total + offset..r * total + offset + w])
                            .for_each(|(o, &u)| *o = *o + u);
                    }
                    offset += w;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, probs, gd, grads),
            Op::GradReverse { x, lambda } => {
                let factor = -*lambda;
                self.grad_buf(grads, *x)
                    .iter_mut()
                    .zip(gd)
                    .for_each(|(d, &u)| *d = *d + factor * u);
            }
            Op::Nll { x, targets, count } => {
                if *count == 0 {
                    return;
                }
                let c = self.value(*x).last_dim();
                let w = gd[0] / T::from_usize(*count).unwrap();
                let gx = self.grad_buf(grads, *x);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        gx[r * c + t] = gx[r * c + t] - w;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        gd: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let sq = self.shape(q);
        let (b, t, d) = (sq[0], sq[1], sq[2]);
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![T::zero(); b * t * d];
        let mut gk = vec![T::zero(); b * t * d];
        let mut gv = vec![T::zero(); b * t * d];
        let mut dp = vec![T::zero(); t];
        for bi in 0..b {
            for h in 0..heads {
                let off = h * dh;
                let row = |pos: usize| (bi * t + pos) * d + off..(bi * t + pos) * d + off + dh;
                for i in 0..t {
                    let p = &probs[((bi * heads + h) * t + i) * t..((bi * heads + h) * t + i + 1) * t];
                    let go = &gd[row(i)];
                    for j in 0..t {
                        dp[j] = dot(go, &vv[row(j)]);
                        let pj = p[j];
                        gv[row(j)].iter_mut().zip(go).for_each(|(o, &u)| *o = *o + pj * u);
                    }
                    let pd = T::sum_of(p.iter().zip(&dp).map(|(&a, &c)| a * c));
                    for j in 0..t {
                        let ds = p[j] * (dp[j] - pd) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let (qr, kr) = (row(i), row(j));
                        for c in 0..dh {
                            gq[qr.start + c] = gq[qr.start + c] + ds * kv[kr.start + c];
                            gk[kr.start + c] = gk[kr.start + c] + ds * qv[qr.start + c];
                        }
                    }
                }
            }
        }
        for (var, src) in [(q, gq), (k, gk), (v, gv)] {
            self.grad_buf(grads, var)
                .iter_mut()
                .zip(src)
                .for_each(|(o, u)| *o = *o + u);
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}

/// Returns `(gelu(x), d gelu / dx)`.
fn gelu_tanh<T: Real>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * du;
    (y, dy)
}
