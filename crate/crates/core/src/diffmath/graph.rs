//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order. `backward` walks it in reverse, accumulating each
//! node's contribution into its inputs in insertion order, which makes a
//! single-threaded backward pass bit-reproducible.

use std::sync::Arc;

use crate::diffmath::kernels::{self, gelu, gelu_grad, gemm, ConvGeometry};
use crate::diffmath::tensor::checked_mode;
use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for an operation defined outside this module.
///
/// The forward value is computed by the caller and handed to
/// [`Graph::custom`]; the tape only needs the backward rule.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient contribution for each input, in the order the inputs were
    /// registered. `None` means "no contribution".
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Scale(Var, f64),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Conv1d { x: Var, kernel: Var, bias: Var, geom: ConvGeometry },
    MeanAxis1 { x: Var, len: usize },
    Gather { table: Var, index: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Mask { x: Var, mask: Arc<Vec<f64>> },
    Sum(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddRow { .. } => "add_row",
            Op::Scale(..) => "scale",
            Op::Softmax(_) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(_) => "gelu",
            Op::Conv1d { .. } => "conv1d_valid",
            Op::MeanAxis1 { .. } => "mean_axis1",
            Op::Gather { .. } => "gather_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::Mask { .. } => "mask",
            Op::Sum(_) => "sum",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// New tape; finiteness checking follows the global checked mode.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: checked_mode(),
        }
    }

    pub fn with_checking(checked: bool) -> Self {
        Self {
            nodes: Vec::new(),
            checked,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} produced a non-finite value at node {}",
                op.name(),
                self.nodes.len()
            )));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, false)
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, false, b, true)
    }

    pub fn matmul_ex(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let out = kernels::matmul_ex(self.value(a), ta, self.value(b), tb)?;
        self.push(out, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "add: shapes {:?} and {:?} differ",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Adds a `[C]` vector to every length-`C` row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = *tx.shape().last().expect("rank >= 1");
        if tb.shape() != [c] {
            return Err(Error::shape(format!(
                "add_row: bias {:?} does not match trailing dim {c}",
                tb.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(out, Op::AddRow { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = kernels::softmax_rows(self.value(x))?;
        self.push(out, Op::Softmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (out, xhat, inv_std) =
            kernels::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Valid-padding conv over `[T, C]` or `[B, T, C]`; see
    /// [`kernels::conv1d_valid`].
    pub fn conv1d_valid(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let geom = ConvGeometry::of(self.value(x), self.value(kernel), self.value(bias))?;
        let out = kernels::conv1d_valid(self.value(x), self.value(kernel), self.value(bias))?;
        self.push(out, Op::Conv1d { x, kernel, bias, geom }, &[x, kernel, bias])
    }

    /// Mean over axis 1 of a `[B, L, E]` tensor, giving `[B, E]`.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &[b, l, e] = t.shape() else {
            return Err(Error::shape(format!(
                "mean_axis1 needs a rank-3 tensor, got {:?}",
                t.shape()
            )));
        };
        let mut out = vec![0.0; b * e];
        for bi in 0..b {
            let acc = &mut out[bi * e..(bi + 1) * e];
            for li in 0..l {
                let row = &t.data()[(bi * l + li) * e..(bi * l + li + 1) * e];
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= l as f64;
            }
        }
        let out = Tensor::from_parts(vec![b, e], out);
        self.push(out, Op::MeanAxis1 { x, len: l }, &[x])
    }

    /// Rows `table[index[i]]` stacked into `[index.len(), E]`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, e) = t.dims2()?;
        if index.is_empty() {
            return Err(Error::shape("gather_rows: empty index list"));
        }
        let mut out = Vec::with_capacity(index.len() * e);
        for &i in index {
            if i >= rows {
                return Err(Error::Index(format!(
                    "gather_rows: index {i} out of range for table with {rows} rows"
                )));
            }
            out.extend_from_slice(&t.data()[i * e..(i + 1) * e]);
        }
        let out = Tensor::from_parts(vec![index.len(), e], out);
        self.push(
            out,
            Op::Gather {
                table,
                index: index.to_vec(),
            },
            &[table],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::shape(format!(
                "slice_cols: [{start}, {}) outside {c} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in t.data().chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::from_parts(vec![r, len], out);
        self.push(out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols: no inputs"))?;
        let (r, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::shape(format!(
                    "concat_cols: row counts {r} and {pr} differ"
                )));
            }
            widths.push(pc);
        }
        let c: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * c);
        for row in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[row * w..(row + 1) * w]);
            }
        }
        let out = Tensor::from_parts(vec![r, c], out);
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Elementwise product with a fixed mask (dropout with a pre-scaled
    /// keep mask).
    pub fn mask(&mut self, x: Var, mask: Arc<Vec<f64>>) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(Error::shape(format!(
                "mask of length {} for tensor of {} values",
                mask.len(),
                t.len()
            )));
        }
        let data = t.data().iter().zip(mask.iter()).map(|(a, m)| a * m).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(out, Op::Mask { x, mask }, &[x])
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Gradients of the single-element node `loss` with respect to every
    /// node that requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::NonFinite(format!("loss is {}", lv.item())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(dy) = upper[0].as_deref() else {
                continue;
            };
            self.backprop_node(node, dy, lower);
        }

        let tensors = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_parts(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads: tensors })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn backprop_node(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = kernels::matmul_dims(av, *ta, bv, *tb).expect("checked in forward");
                if let Some(ga) = self.slot(grads, *a) {
                    if *ta {
                        // a stored [k, m]: dA = op(b) * dC^T
                        gemm(k, n, m, 1.0, bv.data(), *tb, dy, true, 1.0, ga);
                    } else {
                        // dA = dC * op(b)^T
                        gemm(m, n, k, 1.0, dy, false, bv.data(), !*tb, 1.0, ga);
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *tb {
                        // b stored [n, k]: dB = dC^T * op(a)
                        gemm(n, m, k, 1.0, dy, true, av.data(), *ta, 1.0, gb);
                    } else {
                        // dB = op(a)^T * dC
                        gemm(k, m, n, 1.0, av.data(), !*ta, dy, false, 1.0, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.slot(grads, v) {
                        add_into(g, dy);
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if let Some(g) = self.slot(grads, *x) {
                    add_into(g, dy);
                }
                if let Some(g) = self.slot(grads, *bias) {
                    let c = g.len();
                    for row in dy.chunks_exact(c) {
                        add_into(g, row);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(g) = self.slot(grads, *x) {
                    for (gi, d) in g.iter_mut().zip(dy) {
                        *gi += s * d;
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    let y = node.value.data();
                    let c = node.value.shape()[1];
                    for ((gr, yr), dr) in g.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(dy.chunks_exact(c)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
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
                let e = self.value(*gamma).len();
                let gv = self.value(*gamma).data();
                if let Some(g) = self.slot(grads, *gamma) {
                    for (dr, xr) in dy.chunks_exact(e).zip(xhat.chunks_exact(e)) {
                        for j in 0..e {
                            g[j] += dr[j] * xr[j];
                        }
                    }
                }
                if let Some(g) = self.slot(grads, *beta) {
                    for dr in dy.chunks_exact(e) {
                        add_into(g, dr);
                    }
                }
                if let Some(g) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; e];
                    for (r, ((gr, dr), xr)) in g
                        .chunks_exact_mut(e)
                        .zip(dy.chunks_exact(e))
                        .zip(xhat.chunks_exact(e))
                        .enumerate()
                    {
                        let is = inv_std[r];
                        if !is.is_finite() {
                            continue;
                        }
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..e {
                            dxhat[j] = dr[j] * gv[j];
                            sum_d += dxhat[j];
                            sum_dx += dxhat[j] * xr[j];
                        }
                        let inv_e = 1.0 / e as f64;
                        for j in 0..e {
                            gr[j] += is * (dxhat[j] - inv_e * sum_d - xr[j] * inv_e * sum_dx);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    for ((gi, d), xv) in g.iter_mut().zip(dy).zip(self.value(*x).data()) {
                        *gi += d * gelu_grad(*xv);
                    }
                }
            }
            Op::Conv1d { x, kernel, bias, geom } => self.backprop_conv(*x, *kernel, *bias, geom, dy, grads),
            Op::MeanAxis1 { x, len } => {
                if let Some(g) = self.slot(grads, *x) {
                    let e = node.value.shape()[1];
                    let inv = 1.0 / *len as f64;
                    for (bi, dr) in dy.chunks_exact(e).enumerate() {
                        for li in 0..*len {
                            let gr = &mut g[(bi * len + li) * e..(bi * len + li + 1) * e];
                            for (gv, d) in gr.iter_mut().zip(dr) {
                                *gv += d * inv;
                            }
                        }
                    }
                }
            }
            Op::Gather { table, index } => {
                if let Some(g) = self.slot(grads, *table) {
                    let e = node.value.shape()[1];
                    for (&i, dr) in index.iter().zip(dy.chunks_exact(e)) {
                        add_into(&mut g[i * e..(i + 1) * e], dr);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if let Some(g) = self.slot(grads, *x) {
                    let len = node.value.shape()[1];
                    let c = self.value(*x).shape()[1];
                    for (gr, dr) in g.chunks_exact_mut(c).zip(dy.chunks_exact(len)) {
                        add_into(&mut gr[*start..start + len], dr);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let c = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if let Some(g) = self.slot(grads, p) {
                        for (gr, dr) in g.chunks_exact_mut(w).zip(dy.chunks_exact(c)) {
                            add_into(gr, &dr[offset..offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::Mask { x, mask } => {
                if let Some(g) = self.slot(grads, *x) {
                    for ((gi, d), m) in g.iter_mut().zip(dy).zip(mask.iter()) {
                        *gi += d * m;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.slot(grads, *x) {
                    for gi in g.iter_mut() {
                        *gi += dy[0];
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let contributions = op.backward(&values, &node.value, dy);
                for (&v, contrib) in inputs.iter().zip(contributions) {
                    if let (Some(c), Some(g)) = (contrib, self.slot(grads, v)) {
                        add_into(g, &c);
                    }
                }
            }
        }
    }

    fn backprop_conv(
        &self,
        x: Var,
        kernel: Var,
        bias: Var,
        geom: &ConvGeometry,
        dy: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let ConvGeometry {
            batch,
            t,
            c_in,
            k,
            c_out,
            out_len,
        } = *geom;
        let window = k * c_in;
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();

        if let Some(g) = self.slot(grads, bias) {
            for row in dy.chunks_exact(c_out) {
                add_into(g, row);
            }
        }
        if let Some(gk) = self.slot(grads, kernel) {
            for b in 0..batch {
                let xb = &xv[b * t * c_in..(b + 1) * t * c_in];
                let db = &dy[b * out_len * c_out..(b + 1) * out_len * c_out];
                // dK[p, o] += sum_t Xwin[t, p] * dY[t, o] with Xwin[t, p] = xb[t*C + p]
                unsafe {
                    matrixmultiply::dgemm(
                        window,
                        out_len,
                        c_out,
                        1.0,
                        xb.as_ptr(),
                        1,
                        c_in as isize,
                        db.as_ptr(),
                        c_out as isize,
                        1,
                        1.0,
                        gk.as_mut_ptr(),
                        c_out as isize,
                        1,
                    );
                }
            }
        }
        if let Some(gx) = self.slot(grads, x) {
            let mut dwin = vec![0.0; out_len * window];
            for b in 0..batch {
                let db = &dy[b * out_len * c_out..(b + 1) * out_len * c_out];
                gemm(out_len, c_out, window, 1.0, db, false, kv, true, 0.0, &mut dwin);
                let gb = &mut gx[b * t * c_in..(b + 1) * t * c_in];
                for (ti, wr) in dwin.chunks_exact(window).enumerate() {
                    add_into(&mut gb[ti * c_in..ti * c_in + window], wr);
                }
            }
        }
    }
}

fn add_into(acc: &mut [f64], src: &[f64]) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

/// Output of [`Graph::backward`]: one optional gradient per tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` received none.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
