use super::kernels::{self, axis_split};
use super::{broadcast_index_map, broadcast_shape, Mask, Tensor, LAYER_NORM_EPS};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
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
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    SwapAxes(Var, usize, usize),
    Reshape(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaskedFill {
        x: Var,
        blocked: Vec<bool>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    Unlikelihood {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        ceiling: f64,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-forward-pass tape. Nodes are appended in evaluation order, which is a
/// topological order of the computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the loss with respect to `v`, once [`Graph::backward`] has
    /// run. Nodes that require grad but did not influence the loss get zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.as_ref()?;
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let shape = node.value.shape().to_vec();
        Some(match &grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        })
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

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- ops

    /// Elementwise sum with numpy broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), self.rg(&[a, b])))
    }

    /// Elementwise (Hadamard) product with numpy broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.broadcast_binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), self.rg(&[a, b])))
    }

    fn broadcast_binary(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let shape = broadcast_shape(sa, sb).ok_or_else(|| Error::dim(op, sa, sb))?;
        let (da, db) = (self.data(a), self.data(b));
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ia = broadcast_index_map(sa, &shape);
            let ib = broadcast_index_map(sb, &shape);
            ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Tensor::new(shape, data)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|x| x * factor).collect(),
        )
        .expect("same shape");
        self.push(out, Op::Scale(a, factor), self.rg(&[a]))
    }

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        kernels::matmul_acc(self.data(a), self.data(b), &mut c, m, k, n);
        let out = Tensor::new(vec![m, n], c)?;
        Ok(self.push(out, Op::MatMul { a, b, m, k, n }, self.rg(&[a, b])))
    }

    /// Batched matmul over identical leading dimensions:
    /// `[..., m, k] × [..., k, n] → [..., m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(Error::dim("bmm", sa, sb));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut shape = sa[..r - 2].to_vec();
        shape.extend([m, n]);
        let (da, db) = (self.data(a), self.data(b));
        let mut c = vec![0.0; batch * m * n];
        for i in 0..batch {
            kernels::matmul_acc(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                &mut c[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out = Tensor::new(shape, c)?;
        Ok(self.push(
            out,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
            self.rg(&[a, b]),
        ))
    }

    /// Swap two axes.
    pub fn transpose(&mut self, a: Var, axis0: usize, axis1: usize) -> Result<Var> {
        let shape = self.shape(a);
        if axis0 >= shape.len() || axis1 >= shape.len() {
            return Err(Error::dim("transpose", shape, &[axis0, axis1]));
        }
        let (data, out_shape) = kernels::swap_axes(self.data(a), shape, axis0, axis1);
        let out = Tensor::new(out_shape, data)?;
        Ok(self.push(out, Op::SwapAxes(a, axis0, axis1), self.rg(&[a])))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a), self.rg(&[a])))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a), self.rg(&[a]))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), self.rg(&[a]))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        let out = Tensor::new(shape.clone(), kernels::softmax(self.data(a), &shape, axis))?;
        Ok(self.push(out, Op::Softmax(a, axis), self.rg(&[a])))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("log_softmax", &shape, &[axis]));
        }
        let out = Tensor::new(
            shape.clone(),
            kernels::log_softmax(self.data(a), &shape, axis),
        )?;
        Ok(self.push(out, Op::LogSoftmax(a, axis), self.rg(&[a])))
    }

    /// Layer normalization over the last dimension with the default epsilon.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.layer_norm_eps(x, gain, bias, LAYER_NORM_EPS)
    }

    pub fn layer_norm_eps(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("layer_norm", &shape, &[]))?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(Error::dim("layer_norm", &shape, self.shape(p)));
            }
        }
        let xs = self.data(x);
        let (g, b) = (self.data(gain), self.data(bias));
        let rows = xs.len() / d.max(1);
        let mut xhat = vec![0.0; xs.len()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * g[j] + b[j];
            }
        }
        let out = Tensor::new(shape, y)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Replace positions where `mask` is true with `value`. The mask
    /// broadcasts against `x`; masked entries pass no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &Mask, value: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        match broadcast_shape(&shape, mask.shape()) {
            Some(s) if s == shape => {}
            _ => return Err(Error::dim("masked_fill", &shape, mask.shape())),
        }
        let map = broadcast_index_map(mask.shape(), &shape);
        let blocked: Vec<bool> = map.iter().map(|&i| mask.data()[i]).collect();
        let data = self
            .data(x)
            .iter()
            .zip(&blocked)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::MaskedFill { x, blocked }, self.rg(&[x])))
    }

    /// Row gather: `table[ids[i]]` for each id, output shape
    /// `out_shape ++ [table_cols]`. The backward pass scatter-adds.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 || out_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::dim("gather_rows", &ts, out_shape));
        }
        let (rows, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("gather_rows index", &ts, &[bad]));
        }
        let td = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            self.rg(&[table]),
        ))
    }

    /// Embedding lookup; alias of [`Graph::gather_rows`].
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids, out_shape)
    }

    /// Fused softmax + negative log-likelihood over the last axis. Returns
    /// one loss per row; rows whose target is `None` contribute 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (shape, v, probs) = self.row_probs("cross_entropy", logits, targets)?;
        // log-softmax rather than ln(p): keeps precision when p underflows
        let lsm = kernels::log_softmax(self.data(logits), &[targets.len(), v], 1);
        let losses: Vec<f64> = targets
            .iter()
            .enumerate()
            .map(|(r, t)| t.map_or(0.0, |t| -lsm[r * v + t]))
            .collect();
        let out = Tensor::new(shape[..shape.len() - 1].to_vec(), losses)?;
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            self.rg(&[logits]),
        ))
    }

    /// Per-row unlikelihood `-ln(1 - min(p_target, ceiling))`. Rows whose
    /// target is `None` contribute 0. Clamped rows pass no gradient.
    pub fn unlikelihood(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        ceiling: f64,
    ) -> Result<Var> {
        let (shape, v, probs) = self.row_probs("unlikelihood", logits, targets)?;
        let losses = targets
            .iter()
            .enumerate()
            .map(|(r, t)| match t {
                Some(t) => -(1.0 - probs[r * v + t].min(ceiling)).ln(),
                None => 0.0,
            })
            .collect();
        let out = Tensor::new(shape[..shape.len() - 1].to_vec(), losses)?;
        Ok(self.push(
            out,
            Op::Unlikelihood {
                logits,
                targets: targets.to_vec(),
                probs,
                ceiling,
            },
            self.rg(&[logits]),
        ))
    }

    fn row_probs(
        &self,
        op: &'static str,
        logits: Var,
        targets: &[Option<usize>],
    ) -> Result<(Vec<usize>, usize, Vec<f64>)> {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().ok_or_else(|| Error::dim(op, &shape, &[]))?;
        let rows = self.value(logits).numel() / v.max(1);
        if rows != targets.len() {
            return Err(Error::dim(op, &shape, &[targets.len()]));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::dim(op, &shape, &[*bad]));
        }
        let probs = kernels::softmax_rows(self.data(logits), v);
        Ok((shape, v, probs))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), self.rg(&[a]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    // ----------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar `loss`. Gradients accumulate into
    /// every node that requires grad. Errors if the loss is not scalar or if
    /// this graph has already been differentiated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::TapeReused);
        }
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &p in [a, b] {
                    if let Some(acc) = self.slot(p, grads) {
                        reduce_broadcast(acc, self.shape(p), out_shape, g, |_, gv| gv);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if let Some(acc) = self.slot(*a, grads) {
                    let other = self.data(*b);
                    let ib = broadcast_index_map(sb, out_shape);
                    reduce_broadcast(acc, sa, out_shape, g, |o, gv| gv * other[ib[o]]);
                }
                if let Some(acc) = self.slot(*b, grads) {
                    let other = self.data(*a);
                    let ia = broadcast_index_map(sa, out_shape);
                    reduce_broadcast(acc, sb, out_shape, g, |o, gv| gv * other[ia[o]]);
                }
            }
            Op::Scale(a, c) => {
                if let Some(acc) = self.slot(*a, grads) {
                    for (x, gv) in acc.iter_mut().zip(g) {
                        *x += c * gv;
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(acc) = self.slot(*a, grads) {
                    kernels::matmul_bt_acc(g, db, acc, *m, *n, *k);
                }
                if let Some(acc) = self.slot(*b, grads) {
                    kernels::matmul_at_acc(da, g, acc, *m, *k, *n);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (da, db) = (self.data(*a), self.data(*b));
                if let Some(acc) = self.slot(*a, grads) {
                    for t in 0..*batch {
                        kernels::matmul_bt_acc(
                            &g[t * m * n..(t + 1) * m * n],
                            &db[t * k * n..(t + 1) * k * n],
                            &mut acc[t * m * k..(t + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(acc) = self.slot(*b, grads) {
                    for t in 0..*batch {
                        kernels::matmul_at_acc(
                            &da[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut acc[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::SwapAxes(a, x0, x1) => {
                if let Some(acc) = self.slot(*a, grads) {
                    let (back, _) = kernels::swap_axes(g, out_shape, *x0, *x1);
                    add_into(acc, &back);
                }
            }
            Op::Reshape(a) => {
                if let Some(acc) = self.slot(*a, grads) {
                    add_into(acc, g);
                }
            }
            Op::Relu(a) => {
                let x = self.data(*a);
                if let Some(acc) = self.slot(*a, grads) {
                    for ((s, &xv), gv) in acc.iter_mut().zip(x).zip(g) {
                        if xv > 0.0 {
                            *s += gv;
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.data(*a);
                if let Some(acc) = self.slot(*a, grads) {
                    for ((s, &xv), gv) in acc.iter_mut().zip(x).zip(g) {
                        *s += gv * gelu_grad(xv);
                    }
                }
            }
            Op::Softmax(a, axis) => {
                if let Some(acc) = self.slot(*a, grads) {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_split(out_shape, *axis);
                    for o in 0..outer {
                        for j in 0..inner {
                            let base = o * len * inner + j;
                            let dot: f64 = (0..len)
                                .map(|t| g[base + t * inner] * y[base + t * inner])
                                .sum();
                            for t in 0..len {
                                let idx = base + t * inner;
                                acc[idx] += y[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(a, axis) => {
                if let Some(acc) = self.slot(*a, grads) {
                    let y = node.value.data();
                    let (outer, len, inner) = axis_split(out_shape, *axis);
                    for o in 0..outer {
                        for j in 0..inner {
                            let base = o * len * inner + j;
                            let gsum: f64 = (0..len).map(|t| g[base + t * inner]).sum();
                            for t in 0..len {
                                let idx = base + t * inner;
                                acc[idx] += g[idx] - y[idx].exp() * gsum;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *out_shape.last().unwrap();
                let rows = rstd.len();
                let gv = self.data(*gain).to_vec();
                if let Some(acc) = self.slot(*gain, grads) {
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(acc) = self.slot(*bias, grads) {
                    for r in 0..rows {
                        for j in 0..d {
                            acc[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(acc) = self.slot(*x, grads) {
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mut mean_dx = 0.0;
                        let mut mean_dx_xh = 0.0;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            mean_dx += dxh;
                            mean_dx_xh += dxh * xh[j];
                        }
                        mean_dx /= d as f64;
                        mean_dx_xh /= d as f64;
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            acc[r * d + j] += rstd[r] * (dxh - mean_dx - xh[j] * mean_dx_xh);
                        }
                    }
                }
            }
            Op::MaskedFill { x, blocked } => {
                if let Some(acc) = self.slot(*x, grads) {
                    for ((s, &m), gv) in acc.iter_mut().zip(blocked).zip(g) {
                        if !m {
                            *s += gv;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(acc) = self.slot(*table, grads) {
                    let d = *out_shape.last().unwrap();
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            acc[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                if let Some(acc) = self.slot(*logits, grads) {
                    let v = probs.len() / targets.len().max(1);
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let gr = g[r];
                        for j in 0..v {
                            acc[r * v + j] += gr * probs[r * v + j];
                        }
                        acc[r * v + t] -= gr;
                    }
                }
            }
            Op::Unlikelihood {
                logits,
                targets,
                probs,
                ceiling,
            } => {
                if let Some(acc) = self.slot(*logits, grads) {
                    let v = probs.len() / targets.len().max(1);
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let p = probs[r * v + t];
                        if p >= *ceiling {
                            continue;
                        }
                        // d/dx_j [-ln(1-p)] = p (δ_tj - s_j) / (1 - p)
                        let scale = g[r] * p / (1.0 - p);
                        for j in 0..v {
                            acc[r * v + j] -= scale * probs[r * v + j];
                        }
                        acc[r * v + t] += scale;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(acc) = self.slot(*a, grads) {
                    for s in acc.iter_mut() {
                        *s += g[0];
                    }
                }
            }
        }
    }

    /// Mutable gradient accumulator for `v`, allocated on first use.
    /// `None` when `v` does not require grad.
    #[allow(clippy::mut_from_ref)]
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Accumulate `f(out_index, g[out_index])` into the broadcast source.
fn reduce_broadcast(
    acc: &mut [f64],
    in_shape: &[usize],
    out_shape: &[usize],
    g: &[f64],
    f: impl Fn(usize, f64) -> f64,
) {
    if in_shape == out_shape {
        for (o, (a, &gv)) in acc.iter_mut().zip(g).enumerate() {
            *a += f(o, gv);
        }
        return;
    }
    let map = broadcast_index_map(in_shape, out_shape);
    for (o, (&src, &gv)) in map.iter().zip(g).enumerate() {
        acc[src] += f(o, gv);
    }
}
