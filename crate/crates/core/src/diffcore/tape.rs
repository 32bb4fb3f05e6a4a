use std::collections::BTreeMap;

use super::ops::{self, ConvDims};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Gradients keyed by parameter identifier, as produced by [`Tape::backward`].
#[derive(Debug, Clone, Default)]
pub struct GradientMap {
    entries: BTreeMap<String, Vec<f64>>,
}

impl GradientMap {
    pub fn get(&self, id: &str) -> Option<&Vec<f64>> {
        self.entries.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.entries.iter()
    }

    pub fn insert(&mut self, id: String, grad: Vec<f64>) {
        self.entries.insert(id, grad);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale every gradient in place (used for global-norm clipping).
    pub fn scale(&mut self, factor: f64) {
        for g in self.entries.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Hadamard,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Const,
    Binary(Elementwise),
    Scale(f64),
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Softplus,
    Outer,
    Linear { n: usize, din: usize, dout: usize },
    Conv2d(ConvSpec),
    Upsample2x,
    Reshape,
    /// dst row r comes from row `map[r].1` of parent slot `map[r].0`.
    ConcatRows { map: Vec<(usize, usize)>, width: usize },
    RepeatInner { times: usize },
    MeanPoolSpatial { hw: usize },
    Sum,
    Mean,
    BceWithLogits { targets: Vec<f64> },
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    stride: usize,
    padding: usize,
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    op: Op,
    param: Option<String>,
}

/// Dynamically recorded computation graph for a single forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, op: Op, param: Option<String>) -> Result<Var> {
        if !value.values.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("non-finite value produced by operation".into()));
        }
        self.nodes.push(Node { value, parents, op, param });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf; its gradient appears in the [`GradientMap`].
    pub fn leaf(&mut self, id: impl Into<String>, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: vec![],
            op: Op::Leaf,
            param: Some(id.into()),
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, parents: vec![], op: Op::Const, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn binary(&mut self, kind: Elementwise, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape != tb.shape {
            return Err(Error::InvalidShape(format!(
                "elementwise operand shapes differ: {:?} vs {:?}",
                ta.shape, tb.shape
            )));
        }
        let values: Vec<f64> = match kind {
            Elementwise::Add => ta.values.iter().zip(&tb.values).map(|(x, y)| x + y).collect(),
            Elementwise::Sub => ta.values.iter().zip(&tb.values).map(|(x, y)| x - y).collect(),
            Elementwise::Hadamard => ta.values.iter().zip(&tb.values).map(|(x, y)| x * y).collect(),
        };
        let shape = ta.shape.clone();
        self.push(Tensor { shape, values }, vec![a.0, b.0], Op::Binary(kind), None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, a, b)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Hadamard, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let values = t.values.iter().map(|v| v * factor).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, values }, vec![a.0], Op::Scale(factor), None)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let values = t.values.iter().map(|&v| if v < 0.0 { slope * v } else { v }).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, values }, vec![a.0], Op::LeakyRelu(slope), None)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let values = t.values.iter().map(|v| v.tanh()).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, values }, vec![a.0], Op::Tanh, None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let values = t.values.iter().map(|&v| ops::sigmoid(v)).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, values }, vec![a.0], Op::Sigmoid, None)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let values = t.values.iter().map(|&v| ops::softplus(v)).collect();
        let shape = t.shape.clone();
        self.push(Tensor { shape, values }, vec![a.0], Op::Softplus, None)
    }

    /// result[i, j] = a[i] * b[j] for rank-1 a, b.
    pub fn outer(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 1 || tb.rank() != 1 {
            return Err(Error::InvalidShape(format!(
                "outer product needs two vectors, got ranks {} and {}",
                ta.rank(),
                tb.rank()
            )));
        }
        let (p, q) = (ta.len(), tb.len());
        let mut values = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                values[i * q + j] = ta.values[i] * tb.values[j];
            }
        }
        self.push(Tensor { shape: vec![p, q], values }, vec![a.0, b.0], Op::Outer, None)
    }

    /// x: [n, in], w: [out, in], b: [out] -> [n, out].
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        if tx.rank() != 2 || tw.rank() != 2 {
            return Err(Error::InvalidShape("linear expects 2-D input and weight".into()));
        }
        let (n, din) = (tx.shape[0], tx.shape[1]);
        let (dout, win) = (tw.shape[0], tw.shape[1]);
        if din != win || tb.len() != dout {
            return Err(Error::InvalidShape(format!(
                "linear dims mismatch: x {:?}, w {:?}, b {:?}",
                tx.shape, tw.shape, tb.shape
            )));
        }
        let values = ops::linear_forward(&tx.values, &tw.values, &tb.values, n, din, dout);
        self.push(
            Tensor { shape: vec![n, dout], values },
            vec![x.0, w.0, b.0],
            Op::Linear { n, din, dout },
            None,
        )
    }

    /// input: [n, c_in, h, w], kernel: [c_out, c_in, k, k], bias: [c_out].
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride < 1 {
            return Err(Error::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (ti, tk, tb) = (
            &self.nodes[input.0].value,
            &self.nodes[kernel.0].value,
            &self.nodes[bias.0].value,
        );
        if ti.rank() != 4 || tk.rank() != 4 {
            return Err(Error::InvalidShape("conv2d expects 4-D input and kernel".into()));
        }
        let (n, c_in, h, w) = (ti.shape[0], ti.shape[1], ti.shape[2], ti.shape[3]);
        let (c_out, kc_in, k, k2) = (tk.shape[0], tk.shape[1], tk.shape[2], tk.shape[3]);
        if kc_in != c_in {
            return Err(Error::InvalidShape(format!(
                "conv2d channel mismatch: input c_in {} vs kernel c_in {}",
                c_in, kc_in
            )));
        }
        if k != k2 {
            return Err(Error::InvalidShape("conv2d kernel must be square".into()));
        }
        if tb.len() != c_out {
            return Err(Error::InvalidShape("conv2d bias length must equal c_out".into()));
        }
        if k > h + 2 * padding || k > w + 2 * padding {
            return Err(Error::InvalidShape(format!(
                "conv2d kernel {} exceeds padded input {}x{}",
                k,
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = ops::conv_out_dim(h, k, stride, padding);
        let ow = ops::conv_out_dim(w, k, stride, padding);
        let dims = ConvDims { n, c_in, h, w, c_out, k, stride, padding, oh, ow };
        let values = ops::conv2d_forward(&ti.values, &tk.values, &tb.values, &dims);
        self.push(
            Tensor { shape: vec![n, c_out, oh, ow], values },
            vec![input.0, kernel.0, bias.0],
            Op::Conv2d(ConvSpec { stride, padding }),
            None,
        )
    }

    /// Nearest-neighbour 2x spatial upsampling of [n, c, h, w].
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 4 {
            return Err(Error::InvalidShape("upsample2x expects 4-D input".into()));
        }
        let (n, c, h, w) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
        let mut values = vec![0.0; n * c * 4 * h * w];
        for nc in 0..n * c {
            for y in 0..h {
                for x in 0..w {
                    let v = t.values[(nc * h + y) * w + x];
                    for dy in 0..2 {
                        for dx in 0..2 {
                            values[(nc * 2 * h + 2 * y + dy) * 2 * w + 2 * x + dx] = v;
                        }
                    }
                }
            }
        }
        self.push(
            Tensor { shape: vec![n, c, 2 * h, 2 * w], values },
            vec![a.0],
            Op::Upsample2x,
            None,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let n: usize = shape.iter().product();
        if n != t.len() {
            return Err(Error::InvalidShape(format!(
                "reshape of {} values to {:?}",
                t.len(),
                shape
            )));
        }
        let values = t.values.clone();
        self.push(Tensor { shape, values }, vec![a.0], Op::Reshape, None)
    }

    /// Assemble a 2-D tensor row by row from rows of other 2-D nodes.
    /// `rows[r] = (source var, row index within that var)` defines output row r.
    pub fn concat_rows(&mut self, rows: &[(Var, usize)]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("concat_rows needs at least one row".into()));
        }
        let mut parents: Vec<usize> = Vec::new();
        let mut map = Vec::with_capacity(rows.len());
        let width = {
            let t = &self.nodes[rows[0].0 .0].value;
            if t.rank() != 2 {
                return Err(Error::InvalidShape("concat_rows sources must be 2-D".into()));
            }
            t.shape[1]
        };
        for &(v, src_row) in rows {
            let t = &self.nodes[v.0].value;
            if t.rank() != 2 || t.shape[1] != width {
                return Err(Error::InvalidShape("concat_rows sources must share row width".into()));
            }
            if src_row >= t.shape[0] {
                return Err(Error::InvalidArgument("concat_rows source row out of range".into()));
            }
            let slot = match parents.iter().position(|&p| p == v.0) {
                Some(s) => s,
                None => {
                    parents.push(v.0);
                    parents.len() - 1
                }
            };
            map.push((slot, src_row));
        }
        let mut values = vec![0.0; rows.len() * width];
        for (r, &(slot, src_row)) in map.iter().enumerate() {
            let src = &self.nodes[parents[slot]].value.values;
            values[r * width..(r + 1) * width]
                .copy_from_slice(&src[src_row * width..(src_row + 1) * width]);
        }
        self.push(
            Tensor { shape: vec![rows.len(), width], values },
            parents,
            Op::ConcatRows { map, width },
            None,
        )
    }

    /// Repeat every element `times` times consecutively; output takes `shape`.
    /// Used to broadcast per-channel scalars over k x k kernel slices.
    pub fn repeat_inner(&mut self, a: Var, times: usize, shape: Vec<usize>) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let n: usize = shape.iter().product();
        if n != t.len() * times {
            return Err(Error::InvalidShape("repeat_inner output shape mismatch".into()));
        }
        let mut values = Vec::with_capacity(n);
        for &v in &t.values {
            values.extend(std::iter::repeat(v).take(times));
        }
        self.push(Tensor { shape, values }, vec![a.0], Op::RepeatInner { times }, None)
    }

    /// Mean over the spatial dims of [n, c, h, w] -> [n, c].
    pub fn mean_pool_spatial(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.rank() != 4 {
            return Err(Error::InvalidShape("mean_pool_spatial expects 4-D input".into()));
        }
        let (n, c, h, w) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3]);
        let hw = h * w;
        let mut values = vec![0.0; n * c];
        for nc in 0..n * c {
            values[nc] = t.values[nc * hw..(nc + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        self.push(
            Tensor { shape: vec![n, c], values },
            vec![a.0],
            Op::MeanPoolSpatial { hw },
            None,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.nodes[a.0].value.values.iter().sum();
        self.push(Tensor::scalar(s), vec![a.0], Op::Sum, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.is_empty() {
            return Err(Error::InvalidArgument("mean of empty tensor".into()));
        }
        let s: f64 = t.values.iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), vec![a.0], Op::Mean, None)
    }

    /// Mean over the batch of softplus(logit) - target * logit.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        if t.is_empty() {
            return Err(Error::InvalidArgument("bce_with_logits on empty batch".into()));
        }
        if t.len() != targets.len() {
            return Err(Error::InvalidShape(format!(
                "bce_with_logits: {} logits vs {} targets",
                t.len(),
                targets.len()
            )));
        }
        if !targets.iter().all(|&t| t == 0.0 || t == 1.0) {
            return Err(Error::InvalidArgument("bce targets must be 0 or 1".into()));
        }
        let loss = t
            .values
            .iter()
            .zip(targets)
            .map(|(&l, &t)| ops::softplus(l) - t * l)
            .sum::<f64>()
            / t.len() as f64;
        self.push(
            Tensor::scalar(loss),
            vec![logits.0],
            Op::BceWithLogits { targets: targets.to_vec() },
            None,
        )
    }

    /// Reverse pass from a scalar `loss`. Returns gradients for every trainable
    /// leaf recorded on the tape; leaves not reachable from the loss get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<GradientMap> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward target must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            // Const subtrees do not propagate.
            if matches!(self.nodes[idx].op, Op::Leaf | Op::Const) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = GradientMap::default();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Leaf, Some(id)) = (&node.op, &node.param) {
                let g = grads[i].take().unwrap_or_else(|| vec![0.0; node.value.len()]);
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite gradient for {id}")));
                }
                out.insert(id.clone(), g);
            }
        }
        Ok(out)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let parent_grad = |grads: &mut [Option<Vec<f64>>], p: usize| -> *mut Vec<f64> {
            if grads[p].is_none() {
                grads[p] = Some(vec![0.0; self.nodes[p].value.len()]);
            }
            grads[p].as_mut().unwrap() as *mut Vec<f64>
        };
        // Helper to get a mutable parent grad without aliasing issues: parents
        // may repeat (e.g. hadamard(x, x)), so accumulate through the slice
        // one parent at a time.
        macro_rules! pg {
            ($p:expr) => {
                unsafe { &mut *parent_grad(grads, node.parents[$p]) }
            };
        }
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::Binary(kind) => {
                let (a, b) = (node.parents[0], node.parents[1]);
                match kind {
                    Elementwise::Add => {
                        let ga = pg!(0);
                        for i in 0..g.len() {
                            ga[i] += g[i];
                        }
                        let gb = pg!(1);
                        for i in 0..g.len() {
                            gb[i] += g[i];
                        }
                    }
                    Elementwise::Sub => {
                        let ga = pg!(0);
                        for i in 0..g.len() {
                            ga[i] += g[i];
                        }
                        let gb = pg!(1);
                        for i in 0..g.len() {
                            gb[i] -= g[i];
                        }
                    }
                    Elementwise::Hadamard => {
                        // Clone operand values first: a parent may alias the
                        // grad buffer target when a == b.
                        let av = self.nodes[a].value.values.clone();
                        let bv = self.nodes[b].value.values.clone();
                        let ga = pg!(0);
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                        let gb = pg!(1);
                        for i in 0..g.len() {
                            gb[i] += g[i] * av[i];
                        }
                    }
                }
            }
            Op::Scale(c) => {
                let ga = pg!(0);
                for i in 0..g.len() {
                    ga[i] += g[i] * c;
                }
            }
            Op::LeakyRelu(slope) => {
                let xv = &self.nodes[node.parents[0]].value.values;
                let factors: Vec<f64> = xv.iter().map(|&x| if x < 0.0 { *slope } else { 1.0 }).collect();
                let ga = pg!(0);
                for i in 0..g.len() {
                    ga[i] += g[i] * factors[i];
                }
            }
            Op::Tanh => {
                let yv = node.value.values.clone();
                let ga = pg!(0);
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - yv[i] * yv[i]);
                }
            }
            Op::Sigmoid => {
                let yv = node.value.values.clone();
                let ga = pg!(0);
                for i in 0..g.len() {
                    ga[i] += g[i] * yv[i] * (1.0 - yv[i]);
                }
            }
            Op::Softplus => {
                let xv = self.nodes[node.parents[0]].value.values.clone();
                let ga = pg!(0);
                for i in 0..g.len() {
                    ga[i] += g[i] * ops::sigmoid(xv[i]);
                }
            }
            Op::Outer => {
                let av = self.nodes[node.parents[0]].value.values.clone();
                let bv = self.nodes[node.parents[1]].value.values.clone();
                let (p, q) = (av.len(), bv.len());
                let ga = pg!(0);
                for i in 0..p {
                    for j in 0..q {
                        ga[i] += g[i * q + j] * bv[j];
                    }
                }
                let gb = pg!(1);
                for i in 0..p {
                    for j in 0..q {
                        gb[j] += g[i * q + j] * av[i];
                    }
                }
            }
            Op::Linear { n, din, dout } => {
                let xv = self.nodes[node.parents[0]].value.values.clone();
                let wv = self.nodes[node.parents[1]].value.values.clone();
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; *dout];
                ops::linear_backward(&xv, &wv, g, *n, *din, *dout, &mut gx, &mut gw, &mut gb);
                let pa = pg!(0);
                for i in 0..gx.len() {
                    pa[i] += gx[i];
                }
                let pw = pg!(1);
                for i in 0..gw.len() {
                    pw[i] += gw[i];
                }
                let pb = pg!(2);
                for i in 0..gb.len() {
                    pb[i] += gb[i];
                }
            }
            Op::Conv2d(spec) => {
                let ti = &self.nodes[node.parents[0]].value;
                let tk = &self.nodes[node.parents[1]].value;
                let dims = ConvDims {
                    n: ti.shape[0],
                    c_in: ti.shape[1],
                    h: ti.shape[2],
                    w: ti.shape[3],
                    c_out: tk.shape[0],
                    k: tk.shape[2],
                    stride: spec.stride,
                    padding: spec.padding,
                    oh: node.value.shape[2],
                    ow: node.value.shape[3],
                };
                let iv = ti.values.clone();
                let kv = tk.values.clone();
                let mut gi = vec![0.0; iv.len()];
                let mut gk = vec![0.0; kv.len()];
                let mut gb = vec![0.0; dims.c_out];
                ops::conv2d_backward(&iv, &kv, g, &dims, &mut gi, &mut gk, &mut gb);
                let pi = pg!(0);
                for i in 0..gi.len() {
                    pi[i] += gi[i];
                }
                let pk = pg!(1);
                for i in 0..gk.len() {
                    pk[i] += gk[i];
                }
                let pb = pg!(2);
                for i in 0..gb.len() {
                    pb[i] += gb[i];
                }
            }
            Op::Upsample2x => {
                let ishape = &self.nodes[node.parents[0]].value.shape;
                let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                let ga = pg!(0);
                for nc in 0..n * c {
                    for y in 0..h {
                        for x in 0..w {
                            let mut acc = 0.0;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    acc += g[(nc * 2 * h + 2 * y + dy) * 2 * w + 2 * x + dx];
                                }
                            }
                            ga[(nc * h + y) * w + x] += acc;
                        }
                    }
                }
            }
            Op::Reshape => {
                let ga = pg!(0);
                for i in 0..g.len() {
                    ga[i] += g[i];
                }
            }
            Op::ConcatRows { map, width } => {
                for (r, &(slot, src_row)) in map.iter().enumerate() {
                    let gp = pg!(slot);
                    for c in 0..*width {
                        gp[src_row * width + c] += g[r * width + c];
                    }
                }
            }
            Op::RepeatInner { times } => {
                let ga = pg!(0);
                for (i, gv) in ga.iter_mut().enumerate() {
                    *gv += g[i * times..(i + 1) * times].iter().sum::<f64>();
                }
            }
            Op::MeanPoolSpatial { hw } => {
                let ga = pg!(0);
                let inv = 1.0 / *hw as f64;
                for nc in 0..g.len() {
                    for i in 0..*hw {
                        ga[nc * hw + i] += g[nc] * inv;
                    }
                }
            }
            Op::Sum => {
                let ga = pg!(0);
                for v in ga.iter_mut() {
                    *v += g[0];
                }
            }
            Op::Mean => {
                let ga = pg!(0);
                let inv = 1.0 / ga.len() as f64;
                for v in ga.iter_mut() {
                    *v += g[0] * inv;
                }
            }
            Op::BceWithLogits { targets } => {
                let lv = self.nodes[node.parents[0]].value.values.clone();
                let ga = pg!(0);
                let inv = 1.0 / lv.len() as f64;
                for i in 0..lv.len() {
                    ga[i] += g[0] * (ops::sigmoid(lv[i]) - targets[i]) * inv;
                }
            }
        }
    }
}
