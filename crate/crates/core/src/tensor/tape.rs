use super::ops::{self, adaptive_bins, window_bins};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        input: Var,
        weights: Var,
        bias: Var,
        dilation: usize,
    },
    Linear {
        input: Var,
        weights: Var,
        bias: Var,
    },
    Relu(Var),
    Pool {
        input: Var,
        bins: Vec<(usize, usize)>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    L2Normalize(Var),
    Patch {
        input: Var,
        patch_len: usize,
    },
    MatmulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        /// Softmax probabilities saved from the forward pass.
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Linear record of a forward computation. Backward replays it in exact
/// reverse order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Record a leaf. Its `requires_grad` flag decides whether backward
    /// produces a gradient for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copy of the recorded value carrying its gradient.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.nodes[v.0].value.clone();
        if let Some(g) = self.grad(v) {
            t.set_grad(g.to_vec()).expect("gradient matches value");
        }
        t
    }

    pub fn conv1d_causal(&mut self, input: Var, weights: Var, bias: Var, dilation: usize) -> Result<Var> {
        let out = ops::conv1d_causal(self.value(input), self.value(weights), self.value(bias), dilation)?;
        let rg = self.rg(&[input, weights, bias]);
        Ok(self.push(
            out,
            Op::Conv1d {
                input,
                weights,
                bias,
                dilation,
            },
            rg,
        ))
    }

    pub fn linear(&mut self, input: Var, weights: Var, bias: Var) -> Result<Var> {
        let out = ops::linear(self.value(input), self.value(weights), self.value(bias))?;
        let rg = self.rg(&[input, weights, bias]);
        Ok(self.push(out, Op::Linear { input, weights, bias }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = ops::relu(self.value(input));
        let rg = self.rg(&[input]);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn mean_pool(&mut self, input: Var, window: usize) -> Result<Var> {
        let out = ops::mean_pool(self.value(input), window)?;
        let bins = window_bins(self.value(input).rows_and_last().1, window);
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::Pool { input, bins }, rg))
    }

    pub fn adaptive_mean_pool(&mut self, input: Var, out_len: usize) -> Result<Var> {
        let out = ops::adaptive_mean_pool(self.value(input), out_len)?;
        let bins = adaptive_bins(self.value(input).rows_and_last().1, out_len);
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::Pool { input, bins }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = ops::concat(&values, axis)?;
        let rg = self.rg(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        let out = ops::l2_normalize(self.value(input))?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::L2Normalize(input), rg))
    }

    pub fn patch(&mut self, input: Var, patch_len: usize) -> Result<Var> {
        let out = ops::patch(self.value(input), patch_len)?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::Patch { input, patch_len }, rg))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatmulNt(a, b), rg))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::new(x.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_values(a, b, |p, q| p + q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_values(a, b, |p, q| p - q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_values(a, b, |p, q| p * q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[input]);
        self.push(out, Op::Scale(input, factor), rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).data().iter().sum());
        let rg = self.rg(&[input]);
        self.push(out, Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let out = Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64);
        let rg = self.rg(&[input]);
        self.push(out, Op::Mean(input), rg)
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let out = Tensor::new(shape, self.value(input).data().to_vec())?;
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::Reshape(input), rg))
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`. Entries with
    /// `exclude[r * cols + c] == true` are removed from the softmax.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], exclude: Option<&[bool]>) -> Result<Var> {
        let x = self.value(logits);
        if x.ndim() != 2 {
            return Err(Error::dim("cross_entropy expects [rows x classes] logits"));
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        if targets.len() != rows || rows == 0 {
            return Err(Error::dim(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        if let Some(mask) = exclude {
            if mask.len() != rows * cols {
                return Err(Error::dim("cross_entropy exclusion mask has wrong size"));
            }
        }
        let excluded = |r: usize, c: usize| exclude.is_some_and(|m| m[r * cols + c]);
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        for (r, &target) in targets.iter().enumerate() {
            if target >= cols || excluded(r, target) {
                return Err(Error::contract(format!(
                    "cross_entropy target {target} invalid for row {r}"
                )));
            }
            let row = &x.data()[r * cols..(r + 1) * cols];
            let max = (0..cols)
                .filter(|&c| !excluded(r, c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in (0..cols).filter(|&c| !excluded(r, c)) {
                let e = (row[c] - max).exp();
                probs[r * cols + c] = e;
                z += e;
            }
            for p in &mut probs[r * cols..(r + 1) * cols] {
                *p /= z;
            }
            total += max + z.ln() - row[target];
        }
        let out = Tensor::scalar(total / rows as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Clear gradients so that [`Tape::backward`] may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Populate gradients of `loss` with respect to every recorded value that
    /// requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this tape; call reset_grads first",
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.grads.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            backprop(&self.nodes, node, g, before);
        }
        Ok(())
    }
}

fn accumulate<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::Conv1d {
            input,
            weights,
            bias,
            dilation,
        } => {
            let (x, w) = (val(*input), val(*weights));
            let (c_in, len) = (x.shape()[0], x.shape()[1]);
            let (c_out, k) = (w.shape()[0], w.shape()[2]);
            if let Some(gb) = accumulate(nodes, grads, *bias) {
                for co in 0..c_out {
                    gb[co] += g[co * len..(co + 1) * len].iter().sum::<f64>();
                }
            }
            if let Some(gw) = accumulate(nodes, grads, *weights) {
                for co in 0..c_out {
                    let gy = &g[co * len..(co + 1) * len];
                    for ci in 0..c_in {
                        let xr = &x.data()[ci * len..(ci + 1) * len];
                        for tap in 0..k {
                            let off = (k - 1 - tap) * dilation;
                            if off >= len {
                                continue;
                            }
                            gw[(co * c_in + ci) * k + tap] +=
                                gy[off..].iter().zip(&xr[..len - off]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
            if let Some(gx) = accumulate(nodes, grads, *input) {
                for co in 0..c_out {
                    let gy = &g[co * len..(co + 1) * len];
                    for ci in 0..c_in {
                        let gxr = &mut gx[ci * len..(ci + 1) * len];
                        for tap in 0..k {
                            let wv = w.data()[(co * c_in + ci) * k + tap];
                            let off = (k - 1 - tap) * dilation;
                            if off >= len || wv == 0.0 {
                                continue;
                            }
                            for (d, gv) in gxr[..len - off].iter_mut().zip(&gy[off..]) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
        }
        Op::Linear { input, weights, bias } => {
            let (x, w) = (val(*input), val(*weights));
            let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
            let rows = x.numel() / d_in;
            if let Some(gb) = accumulate(nodes, grads, *bias) {
                for r in 0..rows {
                    for o in 0..d_out {
                        gb[o] += g[r * d_out + o];
                    }
                }
            }
            if let Some(gw) = accumulate(nodes, grads, *weights) {
                for r in 0..rows {
                    let xr = &x.data()[r * d_in..(r + 1) * d_in];
                    for o in 0..d_out {
                        let gv = g[r * d_out + o];
                        for (d, xv) in gw[o * d_in..(o + 1) * d_in].iter_mut().zip(xr) {
                            *d += gv * xv;
                        }
                    }
                }
            }
            if let Some(gx) = accumulate(nodes, grads, *input) {
                for r in 0..rows {
                    for o in 0..d_out {
                        let gv = g[r * d_out + o];
                        let wr = &w.data()[o * d_in..(o + 1) * d_in];
                        for (d, wv) in gx[r * d_in..(r + 1) * d_in].iter_mut().zip(wr) {
                            *d += gv * wv;
                        }
                    }
                }
            }
        }
        Op::Relu(input) => {
            let x = val(*input);
            if let Some(gx) = accumulate(nodes, grads, *input) {
                for ((d, xv), gv) in gx.iter_mut().zip(x.data()).zip(g) {
                    if *xv > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        Op::Pool { input, bins } => {
            let (rows, len) = val(*input).rows_and_last();
            let out_len = bins.len();
            if let Some(gx) = accumulate(nodes, grads, *input) {
                for r in 0..rows {
                    for (b, &(s, e)) in bins.iter().enumerate() {
                        let share = g[r * out_len + b] / (e - s) as f64;
                        for d in &mut gx[r * len + s..r * len + e] {
                            *d += share;
                        }
                    }
                }
            }
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let total: usize = shape[*axis..].iter().product();
            let mut offset = 0;
            for v in inputs {
                let chunk: usize = val(*v).shape()[*axis..].iter().product();
                if let Some(gx) = accumulate(nodes, grads, *v) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + chunk];
                        for (d, s) in gx[o * chunk..(o + 1) * chunk].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                offset += chunk;
            }
        }
        Op::L2Normalize(input) => {
            let x = val(*input);
            let y = node.value.data();
            let (rows, d) = x.rows_and_last();
            if let Some(gx) = accumulate(nodes, grads, *input) {
                for r in 0..rows {
                    let xr = &x.data()[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] += (gr[j] - yr[j] * proj) / norm;
                    }
                }
            }
        }
        Op::Patch { input, patch_len } => {
            let x = val(*input);
            let (c, len) = (x.shape()[0], x.shape()[1]);
            let tokens = len / patch_len;
            if let Some(gx) = accumulate(nodes, grads, *input) {
                for ch in 0..c {
                    for p in 0..*patch_len {
                        let row = (ch * patch_len + p) * tokens;
                        for t in 0..tokens {
                            gx[ch * len + t * patch_len + p] += g[row + t];
                        }
                    }
                }
            }
        }
        Op::MatmulNt(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (n, d) = (av.shape()[0], av.shape()[1]);
            let m = bv.shape()[0];
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for i in 0..n {
                    for j in 0..m {
                        let gv = g[i * m + j];
                        let br = &bv.data()[j * d..(j + 1) * d];
                        for (x, y) in ga[i * d..(i + 1) * d].iter_mut().zip(br) {
                            *x += gv * y;
                        }
                    }
                }
            }
            if let Some(gb) = accumulate(nodes, grads, *b) {
                for i in 0..n {
                    let ar = &av.data()[i * d..(i + 1) * d];
                    for j in 0..m {
                        let gv = g[i * m + j];
                        for (x, y) in gb[j * d..(j + 1) * d].iter_mut().zip(ar) {
                            *x += gv * y;
                        }
                    }
                }
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if let Some(ga) = accumulate(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            if let Some(gb) = accumulate(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(d, s)| *d += sign * s);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if let Some(ga) = accumulate(nodes, grads, *a) {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(bv) {
                    *d += s * y;
                }
            }
            if let Some(gb) = accumulate(nodes, grads, *b) {
                for ((d, s), x) in gb.iter_mut().zip(g).zip(av) {
                    *d += s * x;
                }
            }
        }
        Op::Scale(input, factor) => {
            if let Some(gx) = accumulate(nodes, grads, *input) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += factor * s);
            }
        }
        Op::Sum(input) => {
            if let Some(gx) = accumulate(nodes, grads, *input) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(input) => {
            let n = val(*input).numel() as f64;
            if let Some(gx) = accumulate(nodes, grads, *input) {
                gx.iter_mut().for_each(|d| *d += g[0] / n);
            }
        }
        Op::Reshape(input) => {
            if let Some(gx) = accumulate(nodes, grads, *input) {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let rows = targets.len();
            let cols = probs.len() / rows;
            let scale = g[0] / rows as f64;
            if let Some(gx) = accumulate(nodes, grads, *logits) {
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..cols {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        gx[r * cols + c] += scale * (probs[r * cols + c] - onehot);
                    }
                }
            }
        }
    }
}
