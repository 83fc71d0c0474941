//! Differentiable operations on tape variables.
//!
//! Every operation validates shapes up front (errors name both shapes),
//! computes its forward value eagerly, and records a backward closure that
//! adds each parent's contribution given the upstream gradient. Backward
//! rules capture the values they need by clone at record time, which keeps
//! them auditable and independent of later tape state.

use super::tape::{BackOp, Var};
use super::{numel, Real};
use crate::error::{Error, Result};

// ── Raw matrix kernels ──────────────────────────────────────────────

/// C[p×s] = A[p×q] · B[q×s]
pub(crate) fn mm(a: &[Real], b: &[Real], p: usize, q: usize, s: usize) -> Vec<Real> {
    let mut out = vec![0.0; p * s];
    for i in 0..p {
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * s..(k + 1) * s];
            let orow = &mut out[i * s..(i + 1) * s];
            for j in 0..s {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// C[p×q] = A[p×s] · B[q×s]ᵀ
fn mm_nt(a: &[Real], b: &[Real], p: usize, s: usize, q: usize) -> Vec<Real> {
    let mut out = vec![0.0; p * q];
    for i in 0..p {
        let arow = &a[i * s..(i + 1) * s];
        for k in 0..q {
            let brow = &b[k * s..(k + 1) * s];
            let mut acc = 0.0;
            for j in 0..s {
                acc += arow[j] * brow[j];
            }
            out[i * q + k] = acc;
        }
    }
    out
}

/// C[q×s] = A[p×q]ᵀ · B[p×s]
fn mm_tn(a: &[Real], b: &[Real], p: usize, q: usize, s: usize) -> Vec<Real> {
    let mut out = vec![0.0; q * s];
    for i in 0..p {
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[i * s..(i + 1) * s];
            let orow = &mut out[k * s..(k + 1) * s];
            for j in 0..s {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// Row-major strides for a shape.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn transpose_raw(a: &[Real], r: usize, c: usize) -> Vec<Real> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

impl<'t> Var<'t> {
    fn node(&self) -> (Vec<usize>, Vec<Real>, bool) {
        self.tape
            .with_node(self.id, |n| (n.shape.clone(), n.data.clone(), n.requires_grad))
    }

    fn record(
        &self,
        shape: Vec<usize>,
        data: Vec<Real>,
        requires_grad: bool,
        back: Option<BackOp>,
    ) -> Var<'t> {
        let back = if requires_grad { back } else { None };
        let id = self.tape.push(shape, data, requires_grad, back);
        Var {
            tape: self.tape,
            id,
        }
    }

    fn binary_elementwise(
        self,
        rhs: Var<'t>,
        op: &'static str,
        f: impl Fn(Real, Real) -> Real,
        back: impl Fn(&[Real], &[Real], &[Real], &mut Vec<Real>, &mut Vec<Real>) + 'static,
    ) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let (ls, ld, lrg) = self.node();
        let (rs, rd, rrg) = rhs.node();
        if ls != rs {
            return Err(Error::Shape {
                op,
                lhs: ls,
                rhs: rs,
            });
        }
        let out: Vec<Real> = ld.iter().zip(&rd).map(|(&a, &b)| f(a, b)).collect();
        let rg = lrg || rrg;
        let back_op = BackOp {
            parents: vec![self.id, rhs.id],
            run: Box::new(move |g, bufs| {
                let (ga, rest) = bufs.split_first_mut().unwrap();
                let gb = &mut rest[0];
                back(g, &ld, &rd, ga, gb);
            }),
        };
        Ok(self.record(rs, out, rg, Some(back_op)))
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary_elementwise(rhs, "add", |a, b| a + b, |g, _, _, ga, gb| {
            for i in 0..g.len() {
                ga[i] += g[i];
                gb[i] += g[i];
            }
        })
    }

    /// Elementwise difference.
    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary_elementwise(rhs, "sub", |a, b| a - b, |g, _, _, ga, gb| {
            for i in 0..g.len() {
                ga[i] += g[i];
                gb[i] -= g[i];
            }
        })
    }

    /// Hadamard (elementwise) product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary_elementwise(rhs, "mul", |a, b| a * b, |g, ld, rd, ga, gb| {
            for i in 0..g.len() {
                ga[i] += g[i] * rd[i];
                gb[i] += g[i] * ld[i];
            }
        })
    }

    /// Matrix product. Backward: `a.grad += g·bᵀ`, `b.grad += aᵀ·g`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let (ls, ld, lrg) = self.node();
        let (rs, rd, rrg) = rhs.node();
        let (&[p, q], &[q2, s]) = (&ls[..], &rs[..]) else {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ls,
                rhs: rs,
            });
        };
        if q != q2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ls,
                rhs: rs,
            });
        }
        let out = mm(&ld, &rd, p, q, s);
        let rg = lrg || rrg;
        let back = BackOp {
            parents: vec![self.id, rhs.id],
            run: Box::new(move |g, bufs| {
                let (ga, rest) = bufs.split_first_mut().unwrap();
                let gb = &mut rest[0];
                // ga = g[p×s] · bᵀ  → p×q
                let da = mm_nt(g, &rd, p, s, q);
                for (x, d) in ga.iter_mut().zip(da) {
                    *x += d;
                }
                // gb = aᵀ · g[p×s]  → q×s
                let db = mm_tn(&ld, g, p, q, s);
                for (x, d) in gb.iter_mut().zip(db) {
                    *x += d;
                }
            }),
        };
        Ok(self.record(vec![p, s], out, rg, Some(back)))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(self, c: Real) -> Var<'t> {
        let (shape, data, rg) = self.node();
        let out: Vec<Real> = data.iter().map(|&x| c * x).collect();
        let back = BackOp {
            parents: vec![self.id],
            run: Box::new(move |g, bufs| {
                for (x, &gi) in bufs[0].iter_mut().zip(g) {
                    *x += c * gi;
                }
            }),
        };
        self.record(shape, out, rg, Some(back))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Multiply by a scalar variable (the one sanctioned broadcast).
    /// Backward: `d_tensor = s·g`, `d_s = ⟨g, tensor⟩`.
    pub fn scale_var(self, s: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&s)?;
        let (shape, data, lrg) = self.node();
        let (ss, sd, srg) = s.node();
        if sd.len() != 1 {
            return Err(Error::Shape {
                op: "scale_var",
                lhs: shape,
                rhs: ss,
            });
        }
        let sv = sd[0];
        let out: Vec<Real> = data.iter().map(|&x| sv * x).collect();
        let rg = lrg || srg;
        let back = BackOp {
            parents: vec![self.id, s.id],
            run: Box::new(move |g, bufs| {
                let (gt, rest) = bufs.split_first_mut().unwrap();
                let gs = &mut rest[0];
                let mut acc = 0.0;
                for i in 0..g.len() {
                    gt[i] += sv * g[i];
                    acc += g[i] * data[i];
                }
                gs[0] += acc;
            }),
        };
        Ok(self.record(shape, out, rg, Some(back)))
    }

    /// 2-D transpose.
    pub fn transpose(self) -> Result<Var<'t>> {
        let (shape, data, rg) = self.node();
        let [r, c] = shape[..] else {
            return Err(Error::Shape {
                op: "transpose",
                lhs: shape,
                rhs: vec![],
            });
        };
        let out = transpose_raw(&data, r, c);
        let back = BackOp {
            parents: vec![self.id],
            run: Box::new(move |g, bufs| {
                let gt = transpose_raw(g, c, r);
                for (x, d) in bufs[0].iter_mut().zip(gt) {
                    *x += d;
                }
            }),
        };
        Ok(self.record(vec![c, r], out, rg, Some(back)))
    }

    /// View the same elements under a new shape (element count preserved).
    pub fn reshape(self, new_shape: &[usize]) -> Result<Var<'t>> {
        let (shape, data, rg) = self.node();
        if numel(new_shape) != data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: shape,
                rhs: new_shape.to_vec(),
            });
        }
        let back = BackOp {
            parents: vec![self.id],
            run: Box::new(move |g, bufs| {
                for (x, &gi) in bufs[0].iter_mut().zip(g) {
                    *x += gi;
                }
            }),
        };
        Ok(self.record(new_shape.to_vec(), data, rg, Some(back)))
    }

    /// Reorder dimensions; `axes` must be a permutation of `0..ndim`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let (shape, data, rg) = self.node();
        let nd = shape.len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::Shape {
                op: "permute",
                lhs: shape,
                rhs: axes.to_vec(),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = strides(&shape);
        let out_strides = strides(&out_shape);
        let mut out = vec![0.0; data.len()];
        // Map each output offset back to its input offset.
        let mut fwd_index = vec![0usize; data.len()];
        for (o, slot) in fwd_index.iter_mut().enumerate() {
            let mut rem = o;
            let mut src = 0;
            for (k, &ax) in axes.iter().enumerate() {
                let coord = rem / out_strides[k];
                rem %= out_strides[k];
                src += coord * in_strides[ax];
            }
            *slot = src;
        }
        for (o, &src) in fwd_index.iter().enumerate() {
            out[o] = data[src];
        }
        let back = BackOp {
            parents: vec![self.id],
            run: Box::new(move |g, bufs| {
                for (o, &src) in fwd_index.iter().enumerate() {
                    bufs[0][src] += g[o];
                }
            }),
        };
        Ok(self.record(out_shape, out, rg, Some(back)))
    }

    /// Row-wise softmax of a 2-D tensor, stabilized by row-max subtraction.
    /// Each output row sums to 1 and every entry lies in (0, 1).
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let (shape, data, rg) = self.node();
        let [r, c] = shape[..] else {
            return Err(Error::Shape {
                op: "softmax_rows",
                lhs: shape,
                rhs: vec![],
            });
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &data[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let orow = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                orow[j] = e;
                z += e;
            }
            for v in orow.iter_mut() {
                *v /= z;
            }
        }
        let y = out.clone();
        let back = BackOp {
            parents: vec![self.id],
            run: Box::new(move |g, bufs| {
                // Per row: gx = y ⊙ (g − ⟨g, y⟩)
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: Real = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let br = &mut bufs[0][i * c..(i + 1) * c];
                    for j in 0..c {
                        br[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }),
        };
        Ok(self.record(vec![r, c], out, rg, Some(back)))
    }

    /// Row-wise log-softmax, stabilized.
    pub fn log_softmax_rows(self) -> Result<Var<'t>> {
        let (shape, data, rg) = self.node();
        let [r, c] = shape[..] else {
            return Err(Error::Shape {
                op: "log_softmax_rows",
                lhs: shape,
                rhs: vec![],
            });
        };
        let mut out = vec![0.0; r * c];
        let mut probs = vec![0.0; r * c];
        for i in 0..r {
            let row = &data[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let z: Real = row.iter().map(|&x| (x - m).exp()).sum();
            let lz = z.ln() + m;
            for j in 0..c {
                out[i * c + j] = row[j] - lz;
                probs[i * c + j] = (row[j] - lz).exp();
            }
        }
        let back = BackOp {
            parents: vec![self.id],
            run: Box::new(move |g, bufs| {
                // Per row: gx = g − p · Σ g
                for i in 0..r {
                    let pr = &probs[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let gsum: Real = gr.iter().sum();
                    let br = &mut bufs[0][i * c..(i + 1) * c];
                    for j in 0..c {
                        br[j] += gr[j] - pr[j] * gsum;
                    }
                }
            }),
        };
        Ok(self.record(vec![r, c], out, rg, Some(back)))
    }

    pub fn relu(self) -> Var<'t> {
        let (shape, data, rg) = self.node();
        let out: Vec<Real> = data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let mask: Vec<bool> = data.iter().map(|&x| x > 0.0).collect();
        let back = BackOp {
            parents: vec![self.id],
            run: Box::new(move |g, bufs| {
                for i in 0..g.len() {
                    if mask[i] {
                        bufs[0][i] += g[i];
                    }
                }
            }),
        };
        self.record(shape, out, rg, Some(back))
    }

    /// Elementwise map with a caller-supplied derivative. The derivative
    /// receives the input value. Useful for one-off activations; also the
    /// hook the gradient-check suite uses for its wrong-backward control.
    pub fn map_unary(
        self,
        f: impl Fn(Real) -> Real,
        dfdx: impl Fn(Real) -> Real + 'static,
    ) -> Var<'t> {
        let (shape, data, rg) = self.node();
        let out: Vec<Real> = data.iter().map(|&x| f(x)).collect();
        let xs = data;
        let back = BackOp {
            parents: vec![self.id],
            run: Box::new(move |g, bufs| {
                for i in 0..g.len() {
                    bufs[0][i] += g[i] * dfdx(xs[i]);
                }
            }),
        };
        self.record(shape, out, rg, Some(back))
    }

    /// Add a length-q bias vector to every row of a p×q matrix.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias)?;
        let (shape, data, lrg) = self.node();
        let (bs, bd, brg) = bias.node();
        let [p, q] = shape[..] else {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: shape,
                rhs: bs,
            });
        };
        if bs != vec![q] {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: shape,
                rhs: bs,
            });
        }
        let mut out = data;
        for i in 0..p {
            for j in 0..q {
                out[i * q + j] += bd[j];
            }
        }
        let rg = lrg || brg;
        let back = BackOp {
            parents: vec![self.id, bias.id],
            run: Box::new(move |g, bufs| {
                let (gx, rest) = bufs.split_first_mut().unwrap();
                let gb = &mut rest[0];
                for i in 0..p {
                    for j in 0..q {
                        gx[i * q + j] += g[i * q + j];
                        gb[j] += g[i * q + j];
                    }
                }
            }),
        };
        Ok(self.record(vec![p, q], out, rg, Some(back)))
    }

    /// Add a per-channel bias to a [b, c, h, w] tensor.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&bias)?;
        let (shape, data, lrg) = self.node();
        let (bs, bd, brg) = bias.node();
        let [b, c, h, w] = shape[..] else {
            return Err(Error::Shape {
                op: "add_channel_bias",
                lhs: shape,
                rhs: bs,
            });
        };
        if bs != vec![c] {
            return Err(Error::Shape {
                op: "add_channel_bias",
                lhs: shape,
                rhs: bs,
            });
        }
        let hw = h * w;
        let mut out = data;
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                for k in 0..hw {
                    out[base + k] += bd[ci];
                }
            }
        }
        let rg = lrg || brg;
        let back = BackOp {
            parents: vec![self.id, bias.id],
            run: Box::new(move |g, bufs| {
                let (gx, rest) = bufs.split_first_mut().unwrap();
                let gb = &mut rest[0];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for k in 0..hw {
                            gx[base + k] += g[base + k];
                            gb[ci] += g[base + k];
                        }
                    }
                }
            }),
        };
        Ok(self.record(shape, out, rg, Some(back)))
    }

    /// Sum of all elements (scalar).
    pub fn sum(self) -> Var<'t> {
        let (_, data, rg) = self.node();
        let s: Real = data.iter().sum();
        let n = data.len();
        let back = BackOp {
            parents: vec![self.id],
            run: Box::new(move |g, bufs| {
                for x in bufs[0].iter_mut().take(n) {
                    *x += g[0];
                }
            }),
        };
        self.record(vec![1], vec![s], rg, Some(back))
    }

    /// Mean of all elements (scalar).
    pub fn mean(self) -> Var<'t> {
        let n = self.len() as Real;
        self.sum().scale(1.0 / n)
    }

    /// Pick a single element (by flat index) out as a scalar variable.
    /// Backward scatters the upstream gradient into that position.
    pub fn element(self, i: usize) -> Result<Var<'t>> {
        let (shape, data, rg) = self.node();
        if i >= data.len() {
            return Err(Error::contract(format!(
                "element index {i} out of range for shape {shape:?}"
            )));
        }
        let back = BackOp {
            parents: vec![self.id],
            run: Box::new(move |g, bufs| {
                bufs[0][i] += g[0];
            }),
        };
        Ok(self.record(vec![1], vec![data[i]], rg, Some(back)))
    }

    /// Frobenius inner product ⟨a, b⟩ (scalar).
    pub fn dot(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs)?;
        let (ls, ld, lrg) = self.node();
        let (rs, rd, rrg) = rhs.node();
        if ls != rs {
            return Err(Error::Shape {
                op: "dot",
                lhs: ls,
                rhs: rs,
            });
        }
        let s: Real = ld.iter().zip(&rd).map(|(a, b)| a * b).sum();
        let rg = lrg || rrg;
        let back = BackOp {
            parents: vec![self.id, rhs.id],
            run: Box::new(move |g, bufs| {
                let (ga, rest) = bufs.split_first_mut().unwrap();
                let gb = &mut rest[0];
                for i in 0..ld.len() {
                    ga[i] += g[0] * rd[i];
                    gb[i] += g[0] * ld[i];
                }
            }),
        };
        Ok(self.record(vec![1], vec![s], rg, Some(back)))
    }

    /// Mean cross-entropy of logits [b×k] against integer labels, fused with
    /// log-softmax for stability. Backward: `(softmax − onehot) / b`.
    pub fn cross_entropy_mean(self, labels: &[usize]) -> Result<Var<'t>> {
        let (shape, data, rg) = self.node();
        let [b, k] = shape[..] else {
            return Err(Error::Shape {
                op: "cross_entropy_mean",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        };
        if labels.len() != b {
            return Err(Error::Shape {
                op: "cross_entropy_mean",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut loss = 0.0;
        let mut probs = vec![0.0; b * k];
        for i in 0..b {
            let row = &data[i * k..(i + 1) * k];
            let m = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
            let z: Real = row.iter().map(|&x| (x - m).exp()).sum();
            let lz = z.ln() + m;
            loss += lz - row[labels[i]];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lz).exp();
            }
        }
        loss /= b as Real;
        let labels = labels.to_vec();
        let back = BackOp {
            parents: vec![self.id],
            run: Box::new(move |g, bufs| {
                let scale = g[0] / b as Real;
                for i in 0..b {
                    for j in 0..k {
                        let onehot = if labels[i] == j { 1.0 } else { 0.0 };
                        bufs[0][i * k + j] += scale * (probs[i * k + j] - onehot);
                    }
                }
            }),
        };
        Ok(self.record(vec![1], vec![loss], rg, Some(back)))
    }

    /// im2col for stride-1 convolution with symmetric zero padding:
    /// [b, c, h, w] → [b·oh·ow, c·kh·kw] where oh = h + 2·pad − kh + 1.
    pub fn unfold(self, kh: usize, kw: usize, pad: usize) -> Result<Var<'t>> {
        let (shape, data, rg) = self.node();
        let [b, c, h, w] = shape[..] else {
            return Err(Error::Shape {
                op: "unfold",
                lhs: shape,
                rhs: vec![kh, kw],
            });
        };
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::Shape {
                op: "unfold",
                lhs: shape,
                rhs: vec![kh, kw],
            });
        }
        let oh = h + 2 * pad - kh + 1;
        let ow = w + 2 * pad - kw + 1;
        let cols = c * kh * kw;
        let rows = b * oh * ow;
        let mut out = vec![0.0; rows * cols];
        // source index per output cell; usize::MAX marks padding
        let mut index = vec![usize::MAX; rows * cols];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (bi * oh + oy) * ow + ox;
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = oy + ky;
                                let ix = ox + kx;
                                if iy < pad || ix < pad {
                                    continue;
                                }
                                let (iy, ix) = (iy - pad, ix - pad);
                                if iy >= h || ix >= w {
                                    continue;
                                }
                                let col = (ci * kh + ky) * kw + kx;
                                let src = ((bi * c + ci) * h + iy) * w + ix;
                                out[row * cols + col] = data[src];
                                index[row * cols + col] = src;
                            }
                        }
                    }
                }
            }
        }
        let back = BackOp {
            parents: vec![self.id],
            run: Box::new(move |g, bufs| {
                for (o, &src) in index.iter().enumerate() {
                    if src != usize::MAX {
                        bufs[0][src] += g[o];
                    }
                }
            }),
        };
        Ok(self.record(vec![rows, cols], out, rg, Some(back)))
    }

    /// 2×2 average pooling with stride 2 on [b, c, h, w]; h and w must be even.
    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let (shape, data, rg) = self.node();
        let [b, c, h, w] = shape[..] else {
            return Err(Error::Shape {
                op: "avg_pool2",
                lhs: shape,
                rhs: vec![],
            });
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape {
                op: "avg_pool2",
                lhs: shape,
                rhs: vec![2, 2],
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; b * c * oh * ow];
        for bi in 0..b {
            for ci in 0..c {
                let ibase = (bi * c + ci) * h * w;
                let obase = (bi * c + ci) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                acc += data[ibase + (2 * oy + dy) * w + 2 * ox + dx];
                            }
                        }
                        out[obase + oy * ow + ox] = acc * 0.25;
                    }
                }
            }
        }
        let back = BackOp {
            parents: vec![self.id],
            run: Box::new(move |g, bufs| {
                for bi in 0..b {
                    for ci in 0..c {
                        let ibase = (bi * c + ci) * h * w;
                        let obase = (bi * c + ci) * oh * ow;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gi = g[obase + oy * ow + ox] * 0.25;
                                for dy in 0..2 {
                                    for dx in 0..2 {
                                        bufs[0][ibase + (2 * oy + dy) * w + 2 * ox + dx] += gi;
                                    }
                                }
                            }
                        }
                    }
                }
            }),
        };
        Ok(self.record(vec![b, c, oh, ow], out, rg, Some(back)))
    }
}

/// Flatten a 2-D factor by rows: the token sequence of an r×m matrix is the
/// matrix itself, read as r tokens of length m. A pure view (and a no-op on
/// the tape); fails on non-2-D input.
pub fn flatten_rows(v: Var<'_>) -> Result<Var<'_>> {
    let shape = v.shape();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "flatten_rows",
            lhs: shape,
            rhs: vec![],
        });
    }
    Ok(v)
}

/// Flatten a 2-D factor by columns: m tokens of length r, i.e. the
/// transpose. `flatten_cols(flatten_cols(a))` reconstructs `a` exactly.
pub fn flatten_cols(v: Var<'_>) -> Result<Var<'_>> {
    let shape = v.shape();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "flatten_cols",
            lhs: shape,
            rhs: vec![],
        });
    }
    v.transpose()
}

/// Stride-1 2-D convolution with symmetric zero padding, composed from
/// `unfold` + `matmul` so its backward comes from the primitive rules.
/// x: [b, c, h, w], kernel: [o, c, kh, kw] → [b, o, oh, ow].
pub fn conv2d<'t>(x: Var<'t>, kernel: Var<'t>, pad: usize) -> Result<Var<'t>> {
    let xs = x.shape();
    let ks = kernel.shape();
    let ([b, c, h, w], [o, kc, kh, kw]) = (
        <[usize; 4]>::try_from(&xs[..]).map_err(|_| Error::Shape {
            op: "conv2d",
            lhs: xs.clone(),
            rhs: ks.clone(),
        })?,
        <[usize; 4]>::try_from(&ks[..]).map_err(|_| Error::Shape {
            op: "conv2d",
            lhs: xs.clone(),
            rhs: ks.clone(),
        })?,
    );
    if c != kc {
        return Err(Error::Shape {
            op: "conv2d",
            lhs: xs,
            rhs: ks,
        });
    }
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    let cols = x.unfold(kh, kw, pad)?; // [b·oh·ow, c·kh·kw]
    let kmat = kernel.reshape(&[o, c * kh * kw])?;
    let prod = cols.matmul(kmat.transpose()?)?; // [b·oh·ow, o]
    prod.reshape(&[b, oh * ow, o])?
        .permute(&[0, 2, 1])?
        .reshape(&[b, o, oh, ow])
}
