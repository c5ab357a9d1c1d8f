//! Reverse-mode differentiation over a recorded graph of dense matrix ops.
//!
//! Every value on the tape is a row-major `f64` matrix; scalars are `1×1`.
//! Sequences from several batch items are packed along the row axis and
//! described by [`Segments`], which lets attention and pooling stay local to
//! each item while the projections run as one large matrix product.

use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

use super::{normal_cdf, normal_pdf};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A contiguous block of rows belonging to one batch item.
///
/// Only the first `valid` rows take part in pooling and act as keys/values
/// in attention; the remainder are padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub valid: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments(Vec<Segment>);

impl Segments {
    /// Fully valid segments laid out back to back.
    pub fn from_lengths(lengths: &[usize]) -> Self {
        Self::from_padded(&lengths.iter().map(|&l| (l, l)).collect::<Vec<_>>())
    }

    /// `(len, valid)` pairs laid out back to back.
    pub fn from_padded(items: &[(usize, usize)]) -> Self {
        let mut start = 0;
        let segs = items
            .iter()
            .map(|&(len, valid)| {
                assert!(valid <= len, "segment valid length exceeds its length");
                let seg = Segment { start, len, valid };
                start += len;
                seg
            })
            .collect();
        Segments(segs)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total_rows(&self) -> usize {
        self.0.last().map_or(0, |s| s.start + s.len)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Segment> {
        self.0.iter()
    }

    pub fn get(&self, i: usize) -> Segment {
        self.0[i]
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Silu(Var),
    NormalizeRows {
        x: Var,
        inv_std: Vec<f64>,
    },
    ExpandRows {
        x: Var,
        segs: Rc<Segments>,
    },
    SegmentMean {
        x: Var,
        segs: Rc<Segments>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    EfficientAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_segs: Rc<Segments>,
        kv_segs: Rc<Segments>,
        cache: Box<AttentionCache>,
    },
    SoftmaxAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segs: Rc<Segments>,
        probs: Vec<Matrix>,
    },
    MeanSquaredError(Var, Var),
    Norm {
        x: Var,
        floor: f64,
    },
    Sum(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    PadRows {
        x: Var,
        start: usize,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::Silu(..) => "silu",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::ExpandRows { .. } => "expand_rows",
            Op::SegmentMean { .. } => "segment_mean",
            Op::Gather { .. } => "gather",
            Op::EfficientAttention { .. } => "efficient_attention",
            Op::SoftmaxAttention { .. } => "softmax_attention",
            Op::MeanSquaredError(..) => "mse",
            Op::Norm { .. } => "norm",
            Op::Sum(..) => "sum",
            Op::SliceRows { .. } => "slice_rows",
            Op::PadRows { .. } => "pad_rows",
        }
    }
}

/// Softmaxed keys/queries and per-(segment, head) global maps kept for the
/// reverse pass.
#[derive(Clone, Debug)]
struct AttentionCache {
    soft_q: Matrix,
    soft_k: Matrix,
    global: Vec<Matrix>,
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    scope: usize,
}

#[derive(Clone, Debug)]
struct Fault {
    node: usize,
    op: &'static str,
    scope: usize,
}

/// Recorded computation. Values are computed eagerly as ops are appended.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    scopes: Vec<String>,
    current_scope: usize,
    fault: Option<Fault>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            scopes: vec![String::from("root")],
            current_scope: 0,
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Labels subsequently recorded nodes; shows up in non-finite diagnostics.
    pub fn set_scope(&mut self, label: impl Into<String>) {
        let label = label.into();
        self.current_scope = match self.scopes.iter().position(|s| *s == label) {
            Some(i) => i,
            None => {
                self.scopes.push(label);
                self.scopes.len() - 1
            }
        };
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on a non-scalar node");
        m[[0, 0]]
    }

    /// Fails with a diagnostic naming the first node that produced a
    /// non-finite value.
    pub fn check(&self) -> Result<()> {
        match &self.fault {
            None => Ok(()),
            Some(f) => Err(Error::non_finite(format!(
                "node {} ({}) in {}",
                f.node, f.op, self.scopes[f.scope]
            ))),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let idx = self.nodes.len();
        if self.fault.is_none() && !value.iter().all(|x| x.is_finite()) {
            self.fault = Some(Fault {
                node: idx,
                op: op.name(),
                scope: self.current_scope,
            });
        }
        self.nodes.push(Node {
            value,
            op,
            scope: self.current_scope,
        });
        Var(idx)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// `a + row`, with `row` of shape `1×m` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    /// `a ⊙ row`, with `row` of shape `1×m` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * normal_cdf(x));
        self.push(v, Op::Gelu(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    /// Zero-mean, unit-variance normalization of every row.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let width = xv.ncols() as f64;
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / width;
            row.mapv_inplace(|a| a - mean);
            let var = row.iter().map(|a| a * a).sum::<f64>() / width;
            let r = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|a| a * r);
            inv_std.push(r);
        }
        self.push(out, Op::NormalizeRows { x, inv_std })
    }

    /// Repeats row `b` of `x` over every row of segment `b`.
    pub fn expand_rows(&mut self, x: Var, segs: &Rc<Segments>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), segs.len());
        let mut out = Matrix::zeros((segs.total_rows(), xv.ncols()));
        for (b, seg) in segs.iter().enumerate() {
            out.slice_mut(s![seg.start..seg.start + seg.len, ..])
                .assign(&xv.row(b).broadcast((seg.len, xv.ncols())).unwrap());
        }
        self.push(
            out,
            Op::ExpandRows {
                x,
                segs: segs.clone(),
            },
        )
    }

    /// Mean over the valid rows of each segment; one output row per segment.
    pub fn segment_mean(&mut self, x: Var, segs: &Rc<Segments>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), segs.total_rows());
        let mut out = Matrix::zeros((segs.len(), xv.ncols()));
        for (b, seg) in segs.iter().enumerate() {
            assert!(seg.valid > 0, "segment_mean over an empty segment");
            let block = xv.slice(s![seg.start..seg.start + seg.valid, ..]);
            out.row_mut(b)
                .assign(&(block.sum_axis(Axis(0)) / seg.valid as f64));
        }
        self.push(
            out,
            Op::SegmentMean {
                x,
                segs: segs.clone(),
            },
        )
    }

    /// Row lookup into an embedding table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Matrix::zeros((ids.len(), tv.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&tv.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Efficient attention: per segment and head, `F = σ_seq(K)ᵀ V` followed
    /// by `Y = σ_feat(Q) F`. `σ_seq` normalizes each key channel over the
    /// valid rows of the key segment, `σ_feat` normalizes each query row over
    /// the head's channels.
    pub fn efficient_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        q_segs: &Rc<Segments>,
        kv_segs: &Rc<Segments>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(d % heads, 0);
        assert_eq!(kv.ncols(), d);
        assert_eq!(vv.ncols(), d);
        assert_eq!(kv.nrows(), vv.nrows());
        assert_eq!(q_segs.len(), kv_segs.len());
        let dk = d / heads;
        let soft_q = softmax_row_blocks(qv.view(), dk);
        let soft_k = softmax_col_segments(kv, kv_segs);
        let mut out = Matrix::zeros(qv.dim());
        let mut global = Vec::with_capacity(q_segs.len() * heads);
        for (qs, ks) in q_segs.iter().zip(kv_segs.iter()) {
            assert!(ks.valid > 0, "attention over an empty key segment");
            let qr = qs.start..qs.start + qs.len;
            let kr = ks.start..ks.start + ks.valid;
            for h in 0..heads {
                let cols = h * dk..(h + 1) * dk;
                let sk = soft_k.slice(s![kr.clone(), cols.clone()]);
                let fg = sk.t().dot(&vv.slice(s![kr.clone(), cols.clone()]));
                let sq = soft_q.slice(s![qr.clone(), cols.clone()]);
                out.slice_mut(s![qr.clone(), cols]).assign(&sq.dot(&fg));
                global.push(fg);
            }
        }
        self.push(
            out,
            Op::EfficientAttention {
                q,
                k,
                v,
                heads,
                q_segs: q_segs.clone(),
                kv_segs: kv_segs.clone(),
                cache: Box::new(AttentionCache {
                    soft_q,
                    soft_k,
                    global,
                }),
            },
        )
    }

    /// Classical scaled dot-product attention within each segment; padded
    /// rows are excluded as keys but still produce (ignored) outputs.
    pub fn softmax_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segs: &Rc<Segments>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(d % heads, 0);
        assert_eq!(qv.dim(), kv.dim());
        assert_eq!(qv.dim(), vv.dim());
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = Matrix::zeros(qv.dim());
        let mut probs = Vec::with_capacity(segs.len() * heads);
        for seg in segs.iter() {
            assert!(seg.valid > 0, "attention over an empty key segment");
            let qr = seg.start..seg.start + seg.len;
            let kr = seg.start..seg.start + seg.valid;
            for h in 0..heads {
                let cols = h * dk..(h + 1) * dk;
                let scores = qv
                    .slice(s![qr.clone(), cols.clone()])
                    .dot(&kv.slice(s![kr.clone(), cols.clone()]).t())
                    * scale;
                let p = softmax_rows(scores.view());
                out.slice_mut(s![qr.clone(), cols.clone()])
                    .assign(&p.dot(&vv.slice(s![kr.clone(), cols])));
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::SoftmaxAttention {
                q,
                k,
                v,
                heads,
                segs: segs.clone(),
                probs,
            },
        )
    }

    /// Mean of `(a − b)²` over every element, as a `1×1` node.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.dim(), bv.dim());
        let n = av.len() as f64;
        let total = Zip::from(av)
            .and(bv)
            .fold(0.0, |acc, &x, &y| acc + (x - y) * (x - y));
        self.push(
            Matrix::from_elem((1, 1), total / n),
            Op::MeanSquaredError(a, b),
        )
    }

    /// Frobenius norm as a `1×1` node; the reverse pass divides by
    /// `max(norm, floor)`.
    pub fn norm(&mut self, x: Var, floor: f64) -> Var {
        let n = self.value(x).iter().map(|a| a * a).sum::<f64>().sqrt();
        self.push(Matrix::from_elem((1, 1), n), Op::Norm { x, floor })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Matrix::from_elem((1, 1), total), Op::Sum(x))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows { x, start })
    }

    /// Places `x` at row offset `start` inside a zero matrix of `total` rows.
    pub fn pad_rows(&mut self, x: Var, start: usize, total: usize) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros((total, xv.ncols()));
        out.slice_mut(s![start..start + xv.nrows(), ..]).assign(xv);
        self.push(out, Op::PadRows { x, start })
    }

    /// Reverse pass from a scalar root. Gradients are retained for leaves
    /// only; leaves the root does not depend on get no entry.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.check()?;
        assert_eq!(self.value(root).dim(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::ones((1, 1)));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            self.backprop_node(node, g, &mut grads);
        }
        for (idx, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.iter().all(|x| x.is_finite()) {
                    return Err(Error::non_finite(format!(
                        "gradient of node {} in {}",
                        idx, self.scopes[self.nodes[idx].scope]
                    )));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.dot(&val(*b).t()));
                accumulate(grads, *b, val(*a).t().dot(&g));
            }
            Op::Add(a, b) => {
                accumulate(grads, *b, g.clone());
                accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *b, -&g);
                accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, &g * val(*b));
                accumulate(grads, *b, &g * val(*a));
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                accumulate(grads, *a, g);
            }
            Op::MulRow(a, row) => {
                let drow = (&g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(grads, *row, drow);
                accumulate(grads, *a, &g * val(*row));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g * *c),
            Op::Gelu(a) => {
                let mut d = val(*a).mapv(|x| normal_cdf(x) + x * normal_pdf(x));
                d *= &g;
                accumulate(grads, *a, d);
            }
            Op::Silu(a) => {
                let mut d = val(*a).mapv(|x| {
                    let sg = sigmoid(x);
                    sg * (1.0 + x * (1.0 - sg))
                });
                d *= &g;
                accumulate(grads, *a, d);
            }
            Op::NormalizeRows { x, inv_std } => {
                let y = &node.value;
                let width = y.ncols() as f64;
                let mut dx = g;
                for ((mut drow, yrow), &r) in dx.rows_mut().into_iter().zip(y.rows()).zip(inv_std) {
                    let mean_g = drow.sum() / width;
                    let mean_gy = drow.dot(&yrow) / width;
                    Zip::from(&mut drow)
                        .and(&yrow)
                        .for_each(|d, &yv| *d = r * (*d - mean_g - yv * mean_gy));
                }
                accumulate(grads, *x, dx);
            }
            Op::ExpandRows { x, segs } => {
                let mut dx = Matrix::zeros((segs.len(), g.ncols()));
                for (b, seg) in segs.iter().enumerate() {
                    dx.row_mut(b).assign(
                        &g.slice(s![seg.start..seg.start + seg.len, ..])
                            .sum_axis(Axis(0)),
                    );
                }
                accumulate(grads, *x, dx);
            }
            Op::SegmentMean { x, segs } => {
                let mut dx = Matrix::zeros((segs.total_rows(), g.ncols()));
                for (b, seg) in segs.iter().enumerate() {
                    let row = g.row(b).mapv(|a| a / seg.valid as f64);
                    dx.slice_mut(s![seg.start..seg.start + seg.valid, ..])
                        .assign(&row.broadcast((seg.valid, g.ncols())).unwrap());
                }
                accumulate(grads, *x, dx);
            }
            Op::Gather { table, ids } => {
                let mut dt = Matrix::zeros(val(*table).dim());
                for (r, &id) in ids.iter().enumerate() {
                    let mut dst = dt.row_mut(id);
                    dst += &g.row(r);
                }
                accumulate(grads, *table, dt);
            }
            Op::EfficientAttention {
                q,
                k,
                v,
                heads,
                q_segs,
                kv_segs,
                cache,
            } => {
                let vv = val(*v);
                let d = vv.ncols();
                let dk = d / heads;
                let mut d_sq = Matrix::zeros(val(*q).dim());
                let mut d_sk = Matrix::zeros(val(*k).dim());
                let mut dv = Matrix::zeros(vv.dim());
                let mut gi = 0;
                for (qs, ks) in q_segs.iter().zip(kv_segs.iter()) {
                    let qr = qs.start..qs.start + qs.len;
                    let kr = ks.start..ks.start + ks.valid;
                    for h in 0..*heads {
                        let cols = h * dk..(h + 1) * dk;
                        let fg = &cache.global[gi];
                        gi += 1;
                        let gy = g.slice(s![qr.clone(), cols.clone()]);
                        let sq = cache.soft_q.slice(s![qr.clone(), cols.clone()]);
                        let sk = cache.soft_k.slice(s![kr.clone(), cols.clone()]);
                        let d_fg = sq.t().dot(&gy);
                        d_sq.slice_mut(s![qr.clone(), cols.clone()])
                            .assign(&gy.dot(&fg.t()));
                        d_sk.slice_mut(s![kr.clone(), cols.clone()])
                            .assign(&vv.slice(s![kr.clone(), cols.clone()]).dot(&d_fg.t()));
                        dv.slice_mut(s![kr.clone(), cols]).assign(&sk.dot(&d_fg));
                    }
                }
                let dq = softmax_row_blocks_backward(cache.soft_q.view(), d_sq.view(), dk);
                let dkm = softmax_col_segments_backward(&cache.soft_k, &d_sk, kv_segs);
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dkm);
                accumulate(grads, *v, dv);
            }
            Op::SoftmaxAttention {
                q,
                k,
                v,
                heads,
                segs,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let d = qv.ncols();
                let dk = d / heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let mut dq = Matrix::zeros(qv.dim());
                let mut dkm = Matrix::zeros(kv.dim());
                let mut dv = Matrix::zeros(vv.dim());
                let mut pi = 0;
                for seg in segs.iter() {
                    let qr = seg.start..seg.start + seg.len;
                    let kr = seg.start..seg.start + seg.valid;
                    for h in 0..*heads {
                        let cols = h * dk..(h + 1) * dk;
                        let p = &probs[pi];
                        pi += 1;
                        let gy = g.slice(s![qr.clone(), cols.clone()]);
                        let d_p = gy.dot(&vv.slice(s![kr.clone(), cols.clone()]).t());
                        dv.slice_mut(s![kr.clone(), cols.clone()])
                            .assign(&p.t().dot(&gy));
                        let d_s = softmax_rows_backward(p.view(), d_p.view()) * scale;
                        dq.slice_mut(s![qr.clone(), cols.clone()])
                            .assign(&d_s.dot(&kv.slice(s![kr.clone(), cols.clone()])));
                        dkm.slice_mut(s![kr.clone(), cols.clone()])
                            .assign(&d_s.t().dot(&qv.slice(s![qr.clone(), cols])));
                    }
                }
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dkm);
                accumulate(grads, *v, dv);
            }
            Op::MeanSquaredError(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let c = 2.0 * g[[0, 0]] / av.len() as f64;
                let da = (av - bv) * c;
                accumulate(grads, *b, -&da);
                accumulate(grads, *a, da);
            }
            Op::Norm { x, floor } => {
                let n = node.value[[0, 0]].max(*floor);
                accumulate(grads, *x, val(*x) * (g[[0, 0]] / n));
            }
            Op::Sum(x) => {
                accumulate(grads, *x, Matrix::from_elem(val(*x).dim(), g[[0, 0]]));
            }
            Op::SliceRows { x, start } => {
                let mut dx = Matrix::zeros(val(*x).dim());
                dx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                accumulate(grads, *x, dx);
            }
            Op::PadRows { x, start } => {
                let rows = val(*x).nrows();
                accumulate(grads, *x, g.slice(s![*start..*start + rows, ..]).to_owned());
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Leaf gradients from a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when the root does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax of each row, with max subtraction.
pub fn softmax_rows(x: ArrayView2<f64>) -> Matrix {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &a| m.max(a));
        row.mapv_inplace(|a| (a - max).exp());
        let total = row.sum();
        row.mapv_inplace(|a| a / total);
    }
    out
}

/// Softmax of each column, with max subtraction.
pub fn softmax_cols(x: ArrayView2<f64>) -> Matrix {
    let mut out = x.to_owned();
    for mut col in out.columns_mut() {
        let max = col.fold(f64::NEG_INFINITY, |m, &a| m.max(a));
        col.mapv_inplace(|a| (a - max).exp());
        let total = col.sum();
        col.mapv_inplace(|a| a / total);
    }
    out
}

fn softmax_rows_backward(y: ArrayView2<f64>, dy: ArrayView2<f64>) -> Matrix {
    let mut out = Matrix::zeros(y.dim());
    for ((mut o, yr), dr) in out.rows_mut().into_iter().zip(y.rows()).zip(dy.rows()) {
        let inner = yr.dot(&dr);
        Zip::from(&mut o)
            .and(&yr)
            .and(&dr)
            .for_each(|o, &yv, &dv| *o = yv * (dv - inner));
    }
    out
}

/// Softmax over each consecutive block of `block` columns in every row.
fn softmax_row_blocks(x: ArrayView2<f64>, block: usize) -> Matrix {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let row = row.as_slice_mut().expect("contiguous rows");
        for chunk in row.chunks_mut(block) {
            let max = chunk.iter().fold(f64::NEG_INFINITY, |m, &a| m.max(a));
            let mut total = 0.0;
            for a in chunk.iter_mut() {
                *a = (*a - max).exp();
                total += *a;
            }
            for a in chunk.iter_mut() {
                *a /= total;
            }
        }
    }
    out
}

fn softmax_row_blocks_backward(y: ArrayView2<f64>, dy: ArrayView2<f64>, block: usize) -> Matrix {
    let mut out = Matrix::zeros(y.dim());
    for ((mut o, yr), dr) in out.rows_mut().into_iter().zip(y.rows()).zip(dy.rows()) {
        let o = o.as_slice_mut().expect("contiguous rows");
        let yr = yr.to_slice().expect("contiguous rows");
        let dr = dr.to_slice().expect("contiguous rows");
        for ((oc, yc), dc) in o
            .chunks_mut(block)
            .zip(yr.chunks(block))
            .zip(dr.chunks(block))
        {
            let inner: f64 = yc.iter().zip(dc).map(|(a, b)| a * b).sum();
            for ((ov, &yv), &dv) in oc.iter_mut().zip(yc).zip(dc) {
                *ov = yv * (dv - inner);
            }
        }
    }
    out
}

/// Softmax of each column over the valid rows of every segment. Padded
/// rows are zero.
fn softmax_col_segments(x: &Matrix, segs: &Segments) -> Matrix {
    let d = x.ncols();
    let mut out = Matrix::zeros(x.dim());
    for seg in segs.iter() {
        let rows = seg.start..seg.start + seg.valid;
        let mut max = vec![f64::NEG_INFINITY; d];
        for r in rows.clone() {
            for (m, &a) in max.iter_mut().zip(x.row(r)) {
                *m = m.max(a);
            }
        }
        let mut total = vec![0.0; d];
        for r in rows.clone() {
            let src = x.row(r);
            let mut dst = out.row_mut(r);
            for (((o, &a), m), t) in dst.iter_mut().zip(src).zip(&max).zip(total.iter_mut()) {
                *o = (a - m).exp();
                *t += *o;
            }
        }
        for r in rows {
            for (o, t) in out.row_mut(r).iter_mut().zip(&total) {
                *o /= t;
            }
        }
    }
    out
}

fn softmax_col_segments_backward(y: &Matrix, dy: &Matrix, segs: &Segments) -> Matrix {
    let d = y.ncols();
    let mut out = Matrix::zeros(y.dim());
    for seg in segs.iter() {
        let rows = seg.start..seg.start + seg.valid;
        let mut inner = vec![0.0; d];
        for r in rows.clone() {
            for ((acc, &a), &b) in inner.iter_mut().zip(y.row(r)).zip(dy.row(r)) {
                *acc += a * b;
            }
        }
        for r in rows {
            let mut o = out.row_mut(r);
            for (((ov, &yv), &dv), &i) in o.iter_mut().zip(y.row(r)).zip(dy.row(r)).zip(&inner) {
                *ov = yv * (dv - i);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[3.0]]);
        let y = tape.mul(x, x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 6.0);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0, 2.0]]);
        let sq = tape.mul(x, x);
        let y = tape.sum(sq);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &array![[2.0, 4.0]]);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(array![[1.0]]);
        let unused = tape.leaf(array![[5.0]]);
        let y = tape.sum(x);
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn non_finite_names_node_and_scope() {
        let mut tape = Tape::new();
        tape.set_scope("block 3");
        let x = tape.leaf(array![[1e300]]);
        let y = tape.mul(x, x);
        let _ = tape.sum(y);
        let err = tape.check().unwrap_err().to_string();
        assert!(err.contains("mul"), "{err}");
        assert!(err.contains("block 3"), "{err}");
    }

    #[test]
    fn singleton_sequence_returns_value_row() {
        let mut tape = Tape::new();
        let q = tape.leaf(array![[0.3, -1.2, 2.0, 0.5]]);
        let k = tape.leaf(array![[1.5, 0.1, -0.4, 0.9]]);
        let v = tape.leaf(array![[2.0, -3.0, 0.25, 7.0]]);
        let segs = Rc::new(Segments::from_lengths(&[1]));
        let y = tape.efficient_attention(q, k, v, 2, &segs, &segs);
        for (a, b) in tape.value(y).iter().zip(tape.value(v).iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn hand_computed_two_frame_attention() {
        let mut tape = Tape::new();
        let q = tape.leaf(array![[0.7], [-2.0]]);
        let k = tape.leaf(array![[0.0], [0.0]]);
        let v = tape.leaf(array![[1.0], [3.0]]);
        let segs = Rc::new(Segments::from_lengths(&[2]));
        let y = tape.efficient_attention(q, k, v, 1, &segs, &segs);
        for &a in tape.value(y).iter() {
            assert!((a - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn padded_keys_do_not_leak() {
        let segs = Rc::new(Segments::from_padded(&[(3, 2)]));
        let q_segs = Rc::new(Segments::from_lengths(&[2]));
        let run = |pad: f64| {
            let mut tape = Tape::new();
            let q = tape.leaf(array![[0.1, 0.4], [1.0, -1.0]]);
            let k = tape.leaf(array![[0.5, 0.2], [-0.3, 0.8], [pad, pad]]);
            let v = tape.leaf(array![[1.0, 2.0], [3.0, 4.0], [pad, -pad]]);
            let y = tape.efficient_attention(q, k, v, 1, &q_segs, &segs);
            tape.value(y).clone()
        };
        assert_eq!(run(0.0), run(123.0));
    }
}
