use std::collections::HashMap;

use super::{NumError, ParamId, ParamStore, Tensor};

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
    Param(ParamId),
    /// `x[.., in] · wᵀ + b`, `w: [out, in]`, `b: [out]`.
    Affine { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    /// Concatenation along the last axis.
    Concat(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Softmax { x: Var, temperature: f64 },
    LogSoftmax { x: Var, temperature: f64 },
    /// Row-wise `-logp[r, target_r]`, zero for masked rows.
    Nll { logp: Var, targets: Vec<Option<usize>> },
    /// Row `r` comes from `a` where `mask[r]`, else from `b`.
    SelectRows { mask: Vec<bool>, a: Var, b: Var },
    /// `N` tensors of shape `[B, D]` into `[B, N, D]`.
    Stack(Vec<Var>),
    Attention(Box<AttentionSaved>),
    /// Scalar `Σ w_i x_i`.
    WeightedSum { x: Var, weights: Vec<f64> },
    /// Elementwise sum of equally-shaped tensors.
    SumN(Vec<Var>),
}

#[derive(Debug)]
struct AttentionSaved {
    keys: Var,
    values: Var,
    query: Var,
    v: Var,
    lengths: Vec<usize>,
    /// `tanh(keys + query)`, shape `[B, N, A]`.
    hidden: Vec<f64>,
    /// Attention weights `[B, N]`, zero past each row's length.
    weights: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Record of executed differentiable operations.
///
/// Operations run eagerly; each appends one node. [`Tape::backward`] replays the
/// nodes in reverse execution order and accumulates parameter gradients into a
/// [`ParamStore`]. A tape can be backpropagated once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    consumed: bool,
}

fn check_finite(op: &str, data: &[f64]) -> Result<(), NumError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumError::NonFinite(op.to_string()))
    }
}

fn shape_err<T>(msg: String) -> Result<T, NumError> {
    Err(NumError::Shape(msg))
}

/// Writes `softmax(x / t)` of `row` into `out`.
fn softmax_row(row: &[f64], t: f64, out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = ((v - max) / t).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &str, value: Tensor, op: Op) -> Result<Var, NumError> {
        check_finite(name, value.data())?;
        Ok(self.push(value, op))
    }

    /// Records a constant input.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var, NumError> {
        self.push_checked("leaf", value, Op::Leaf)
    }

    /// Records a parameter; repeated calls with the same id return the same var.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).value.clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumError> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || xv.cols() != wv.shape()[1] {
            return shape_err(format!("affine: x {:?} vs w {:?}", xv.shape(), wv.shape()));
        }
        let (rows, inp, out) = (xv.rows(), wv.shape()[1], wv.shape()[0]);
        let mut y = vec![0.0; rows * out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != out {
                return shape_err(format!("affine: bias {:?} for {out} outputs", bv.shape()));
            }
            for r in 0..rows {
                y[r * out..(r + 1) * out].copy_from_slice(bv.data());
            }
        }
        // y[rows,out] += x[rows,in] · wᵀ[in,out]
        unsafe {
            matrixmultiply::dgemm(
                rows,
                inp,
                out,
                1.0,
                xv.data().as_ptr(),
                inp as isize,
                1,
                wv.data().as_ptr(),
                1,
                inp as isize,
                1.0,
                y.as_mut_ptr(),
                out as isize,
                1,
            );
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        self.push_checked("affine", Tensor::from_parts(shape, y), Op::Affine { x, w, b })
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<(), NumError> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(format!(
                "{name}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var, NumError> {
        self.same_shape(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        self.push_checked(name, t, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, name: &str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, NumError> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push_checked(name, t, op)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumError> {
        if !c.is_finite() {
            return Err(NumError::NonFinite("scale factor".into()));
        }
        self.map("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NumError> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumError> {
        self.map("sigmoid", x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    /// Concatenates along the last axis; all parts must share leading dimensions.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let Some(&first) = parts.first() else {
            return shape_err("concat: no inputs".into());
        };
        let rows = self.value(first).rows();
        let lead = self.value(first).shape()[..self.value(first).shape().len() - 1].to_vec();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.shape()[..pv.shape().len() - 1] != lead[..] {
                return shape_err(format!("concat: {:?} vs leading {lead:?}", pv.shape()));
            }
            total += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec())))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let xv = self.value(x);
        let cols = xv.cols();
        if len == 0 || start + len > cols {
            return shape_err(format!("slice_cols: {start}+{len} of {cols}"));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor::from_parts(shape, data), Op::SliceCols { x, start }))
    }

    /// Gathers rows of `table: [V, D]` into `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return shape_err(format!("embedding: table {:?}", tv.shape()));
        }
        if ids.is_empty() {
            return shape_err("embedding: no ids".into());
        }
        let (vocab, dim) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return shape_err(format!("embedding: id {id} out of range {vocab}"));
            }
            data.extend_from_slice(tv.row(id));
        }
        let t = Tensor::from_parts(vec![ids.len(), dim], data);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }))
    }

    fn check_temperature(temperature: f64) -> Result<(), NumError> {
        if temperature > 0.0 && temperature.is_finite() {
            Ok(())
        } else {
            Err(NumError::Domain(format!("temperature must be positive, got {temperature}")))
        }
    }

    /// Row-wise `softmax(x / temperature)`.
    pub fn softmax(&mut self, x: Var, temperature: f64) -> Result<Var, NumError> {
        Self::check_temperature(temperature)?;
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = vec![0.0; xv.len()];
        for r in 0..xv.rows() {
            softmax_row(xv.row(r), temperature, &mut data[r * c..(r + 1) * c]);
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push_checked("softmax", t, Op::Softmax { x, temperature })
    }

    /// Row-wise `log softmax(x / temperature)`.
    pub fn log_softmax(&mut self, x: Var, temperature: f64) -> Result<Var, NumError> {
        Self::check_temperature(temperature)?;
        let xv = self.value(x);
        let c = xv.cols();
        let mut data = vec![0.0; xv.len()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&v| ((v - max) / temperature).exp()).sum();
            let lz = z.ln();
            for (o, &v) in data[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v - max) / temperature - lz;
            }
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push_checked("log_softmax", t, Op::LogSoftmax { x, temperature })
    }

    /// Negative log-likelihood per row of `logp: [B, V]`; `None` targets contribute 0.
    pub fn nll(&mut self, logp: Var, targets: &[Option<usize>]) -> Result<Var, NumError> {
        let lv = self.value(logp);
        if lv.shape().len() != 2 || lv.rows() != targets.len() {
            return shape_err(format!("nll: logp {:?} with {} targets", lv.shape(), targets.len()));
        }
        let c = lv.cols();
        let mut data = Vec::with_capacity(targets.len());
        for (r, t) in targets.iter().enumerate() {
            match *t {
                Some(t) if t >= c => return shape_err(format!("nll: target {t} of {c} classes")),
                Some(t) => data.push(-lv.row(r)[t]),
                None => data.push(0.0),
            }
        }
        let t = Tensor::from_parts(vec![targets.len()], data);
        self.push_checked("nll", t, Op::Nll { logp, targets: targets.to_vec() })
    }

    pub fn select_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("select_rows", a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != mask.len() {
            return shape_err(format!("select_rows: {} rows, mask {}", av.rows(), mask.len()));
        }
        let mut data = Vec::with_capacity(av.len());
        for (r, &m) in mask.iter().enumerate() {
            data.extend_from_slice(if m { av.row(r) } else { bv.row(r) });
        }
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        Ok(self.push(t, Op::SelectRows { mask: mask.to_vec(), a, b }))
    }

    /// Stacks `N` tensors `[B, D]` into `[B, N, D]`.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let Some(&first) = parts.first() else {
            return shape_err("stack: no inputs".into());
        };
        let shape = self.value(first).shape().to_vec();
        if shape.len() != 2 {
            return shape_err(format!("stack: parts must be 2-d, got {shape:?}"));
        }
        for &p in parts {
            if self.value(p).shape() != shape.as_slice() {
                return shape_err(format!("stack: {:?} vs {shape:?}", self.value(p).shape()));
            }
        }
        let (b, d, n) = (shape[0], shape[1], parts.len());
        let mut data = Vec::with_capacity(b * n * d);
        for r in 0..b {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(Tensor::from_parts(vec![b, n, d], data), Op::Stack(parts.to_vec())))
    }

    /// Additive attention.
    ///
    /// `keys: [B, N, A]` (projected encoder states), `values: [B, N, H]`,
    /// `query: [B, A]` (projected decoder state), `v: [A]`. Scores are
    /// `vᵀ tanh(key + query)` over the first `lengths[b]` positions of each row;
    /// returns the weighted sum of values `[B, H]` and the weights `[B, N]`.
    pub fn attention(
        &mut self,
        keys: Var,
        values: Var,
        query: Var,
        v: Var,
        lengths: &[usize],
    ) -> Result<(Var, Vec<f64>), NumError> {
        let (kv, vv, qv, wv) = (self.value(keys), self.value(values), self.value(query), self.value(v));
        if kv.shape().len() != 3 || vv.shape().len() != 3 {
            return shape_err(format!("attention: keys {:?} values {:?}", kv.shape(), vv.shape()));
        }
        let (b, n, a) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
        let h = vv.shape()[2];
        if vv.shape()[..2] != [b, n] || qv.shape() != [b, a] || wv.len() != a || lengths.len() != b {
            return shape_err(format!(
                "attention: keys {:?} values {:?} query {:?} v {:?} lengths {}",
                kv.shape(),
                vv.shape(),
                qv.shape(),
                wv.shape(),
                lengths.len()
            ));
        }
        if lengths.iter().any(|&l| l == 0 || l > n) {
            return shape_err(format!("attention: lengths {lengths:?} outside 1..={n}"));
        }
        let mut hidden = vec![0.0; b * n * a];
        let mut weights = vec![0.0; b * n];
        let mut ctx = vec![0.0; b * h];
        for r in 0..b {
            let q = qv.row(r);
            let len = lengths[r];
            let mut scores = vec![0.0; len];
            for j in 0..len {
                let base = (r * n + j) * a;
                let k = &kv.data()[base..base + a];
                let hd = &mut hidden[base..base + a];
                let mut s = 0.0;
                for i in 0..a {
                    hd[i] = (k[i] + q[i]).tanh();
                    s += wv.data()[i] * hd[i];
                }
                scores[j] = s;
            }
            softmax_row(&scores, 1.0, &mut weights[r * n..r * n + len]);
            let c = &mut ctx[r * h..(r + 1) * h];
            for j in 0..len {
                let wj = weights[r * n + j];
                let base = (r * n + j) * h;
                for (ci, &x) in c.iter_mut().zip(&vv.data()[base..base + h]) {
                    *ci += wj * x;
                }
            }
        }
        let out = weights.clone();
        let saved = AttentionSaved { keys, values, query, v, lengths: lengths.to_vec(), hidden, weights };
        let var = self.push_checked("attention", Tensor::from_parts(vec![b, h], ctx), Op::Attention(Box::new(saved)))?;
        Ok((var, out))
    }

    /// Scalar `Σ weights[i] · x[i]` over all elements of `x`.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var, NumError> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return shape_err(format!("weighted_sum: {} values, {} weights", xv.len(), weights.len()));
        }
        check_finite("weighted_sum weights", weights)?;
        let s = xv.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        self.push_checked("weighted_sum", Tensor::scalar(s), Op::WeightedSum { x, weights: weights.to_vec() })
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: Var) -> Result<Var, NumError> {
        let w = vec![1.0; self.value(x).len()];
        self.weighted_sum(x, &w)
    }

    /// Elementwise sum of equally-shaped tensors.
    pub fn sum_n(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let Some(&first) = parts.first() else {
            return shape_err("sum_n: no inputs".into());
        };
        let mut acc = self.value(first).clone();
        for &p in &parts[1..] {
            self.same_shape("sum_n", first, p)?;
            add_into(acc.data_mut(), self.value(p).data());
        }
        self.push_checked("sum_n", acc, Op::SumN(parts.to_vec()))
    }

    /// Indices of the nodes reachable backward from `loss`, in replay order.
    pub fn replay_order(&self, loss: Var) -> Vec<usize> {
        let mut needed = vec![false; self.nodes.len()];
        needed[loss.0] = true;
        let mut order = Vec::new();
        for i in (0..=loss.0).rev() {
            if !needed[i] {
                continue;
            }
            order.push(i);
            for input in self.inputs(i) {
                needed[input.0] = true;
            }
        }
        order
    }

    /// Direct inputs of node `i`.
    pub fn inputs(&self, i: usize) -> Vec<Var> {
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Affine { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Tanh(x) | Op::Sigmoid(x) => vec![*x],
            Op::Concat(p) | Op::Stack(p) | Op::SumN(p) => p.clone(),
            Op::SliceCols { x, .. } => vec![*x],
            Op::Embedding { table, .. } => vec![*table],
            Op::Softmax { x, .. } | Op::LogSoftmax { x, .. } => vec![*x],
            Op::Nll { logp, .. } => vec![*logp],
            Op::SelectRows { a, b, .. } => vec![*a, *b],
            Op::Attention(s) => vec![s.keys, s.values, s.query, s.v],
            Op::WeightedSum { x, .. } => vec![*x],
        }
    }

    /// Backpropagates from the scalar `loss`, adding `loss_scale · ∂loss/∂p` to every
    /// reachable parameter's gradient in `store`.
    pub fn backward(&mut self, loss: Var, loss_scale: f64, store: &mut ParamStore) -> Result<(), NumError> {
        if self.consumed {
            return Err(NumError::TapeConsumed);
        }
        self.consumed = true;
        if !loss_scale.is_finite() {
            return Err(NumError::NonFinite("loss scale".into()));
        }
        if self.value(loss).len() != 1 {
            return shape_err(format!("backward: loss has shape {:?}", self.value(loss).shape()));
        }
        if loss_scale == 0.0 {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in self.replay_order(loss) {
            let Some(g) = grads[i].take() else { continue };
            if let Op::Param(id) = self.nodes[i].op {
                let p = store.get_mut(id);
                if p.grad.len() != g.len() {
                    return shape_err(format!("backward: param {} changed shape", p.name));
                }
                check_finite("backward", &g)?;
                for (d, s) in p.grad.data_mut().iter_mut().zip(&g) {
                    *d += loss_scale * s;
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.nodes[v.0].value.len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (rows, inp, outd) = (xv.rows(), wv.shape()[1], wv.shape()[0]);
                {
                    let dx = self.grad_buf(grads, *x);
                    // dx[rows,in] += g[rows,out] · w[out,in]
                    unsafe {
                        matrixmultiply::dgemm(
                            rows, outd, inp, 1.0,
                            g.as_ptr(), outd as isize, 1,
                            wv.data().as_ptr(), inp as isize, 1,
                            1.0, dx.as_mut_ptr(), inp as isize, 1,
                        );
                    }
                }
                {
                    let dw = self.grad_buf(grads, *w);
                    // dw[out,in] += gᵀ[out,rows] · x[rows,in]
                    unsafe {
                        matrixmultiply::dgemm(
                            outd, rows, inp, 1.0,
                            g.as_ptr(), 1, outd as isize,
                            xv.data().as_ptr(), inp as isize, 1,
                            1.0, dw.as_mut_ptr(), inp as isize, 1,
                        );
                    }
                }
                if let Some(b) = b {
                    let db = self.grad_buf(grads, *b);
                    for r in 0..rows {
                        add_into(db, &g[r * outd..(r + 1) * outd]);
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(self.grad_buf(grads, *a), g);
                add_into(self.grad_buf(grads, *b), g);
            }
            Op::Sub(a, b) => {
                add_into(self.grad_buf(grads, *a), g);
                for (d, s) in self.grad_buf(grads, *b).iter_mut().zip(g) {
                    *d -= s;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                for ((d, s), y) in self.grad_buf(grads, *a).iter_mut().zip(g).zip(bv) {
                    *d += s * y;
                }
                for ((d, s), x) in self.grad_buf(grads, *b).iter_mut().zip(g).zip(av) {
                    *d += s * x;
                }
            }
            Op::Scale(x, c) => {
                for (d, s) in self.grad_buf(grads, *x).iter_mut().zip(g) {
                    *d += s * c;
                }
            }
            Op::Tanh(x) => {
                for ((d, s), y) in self.grad_buf(grads, *x).iter_mut().zip(g).zip(out.data()) {
                    *d += s * (1.0 - y * y);
                }
            }
            Op::Sigmoid(x) => {
                for ((d, s), y) in self.grad_buf(grads, *x).iter_mut().zip(g).zip(out.data()) {
                    *d += s * y * (1.0 - y);
                }
            }
            Op::Concat(parts) => {
                let rows = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    let dp = self.grad_buf(grads, p);
                    for r in 0..rows {
                        add_into(&mut dp[r * c..(r + 1) * c], &g[r * total + offset..r * total + offset + c]);
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.value(*x).cols();
                let len = out.cols();
                let dx = self.grad_buf(grads, *x);
                for r in 0..out.rows() {
                    add_into(&mut dx[r * cols + start..r * cols + start + len], &g[r * len..(r + 1) * len]);
                }
            }
            Op::Embedding { table, ids } => {
                let dim = out.cols();
                let dt = self.grad_buf(grads, *table);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                }
            }
            Op::Softmax { x, temperature } => {
                let c = out.cols();
                let dx = self.grad_buf(grads, *x);
                for r in 0..out.rows() {
                    let p = out.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        dx[r * c + k] += p[k] * (gr[k] - dot) / temperature;
                    }
                }
            }
            Op::LogSoftmax { x, temperature } => {
                let c = out.cols();
                let dx = self.grad_buf(grads, *x);
                for r in 0..out.rows() {
                    let lp = out.row(r);
                    let gr = &g[r * c..(r + 1) * c];
                    let total: f64 = gr.iter().sum();
                    for k in 0..c {
                        dx[r * c + k] += (gr[k] - lp[k].exp() * total) / temperature;
                    }
                }
            }
            Op::Nll { logp, targets } => {
                let c = self.value(*logp).cols();
                let dl = self.grad_buf(grads, *logp);
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        dl[r * c + t] -= g[r];
                    }
                }
            }
            Op::SelectRows { mask, a, b } => {
                let c = out.cols();
                for (r, &m) in mask.iter().enumerate() {
                    let target = if m { *a } else { *b };
                    add_into(&mut self.grad_buf(grads, target)[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
            Op::Stack(parts) => {
                let (b, n, d) = (out.shape()[0], out.shape()[1], out.shape()[2]);
                for (j, &p) in parts.iter().enumerate() {
                    let dp = self.grad_buf(grads, p);
                    for r in 0..b {
                        let src = (r * n + j) * d;
                        add_into(&mut dp[r * d..(r + 1) * d], &g[src..src + d]);
                    }
                }
            }
            Op::Attention(s) => self.attention_backward(s, g, grads),
            Op::WeightedSum { x, weights } => {
                for (d, w) in self.grad_buf(grads, *x).iter_mut().zip(weights) {
                    *d += g[0] * w;
                }
            }
            Op::SumN(parts) => {
                for &p in parts {
                    add_into(self.grad_buf(grads, p), g);
                }
            }
        }
    }

    fn attention_backward(&self, s: &AttentionSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let kv = self.value(s.keys);
        let (b, n, a) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
        let vals = self.value(s.values).data();
        let h = self.value(s.values).shape()[2];
        let vvec = self.value(s.v).data();
        let mut dvals = vec![0.0; b * n * h];
        let mut dkeys = vec![0.0; b * n * a];
        let mut dq = vec![0.0; b * a];
        let mut dv = vec![0.0; a];
        for r in 0..b {
            let len = s.lengths[r];
            let gc = &g[r * h..(r + 1) * h];
            let w = &s.weights[r * n..r * n + len];
            let mut dw = vec![0.0; len];
            for j in 0..len {
                let base = (r * n + j) * h;
                dw[j] = gc.iter().zip(&vals[base..base + h]).map(|(x, y)| x * y).sum();
                for (d, x) in dvals[base..base + h].iter_mut().zip(gc) {
                    *d += w[j] * x;
                }
            }
            let dot: f64 = w.iter().zip(&dw).map(|(x, y)| x * y).sum();
            for j in 0..len {
                let de = w[j] * (dw[j] - dot);
                let base = (r * n + j) * a;
                let hd = &s.hidden[base..base + a];
                for i in 0..a {
                    dv[i] += de * hd[i];
                    let pre = de * vvec[i] * (1.0 - hd[i] * hd[i]);
                    dkeys[base + i] += pre;
                    dq[r * a + i] += pre;
                }
            }
        }
        add_into(self.grad_buf(grads, s.values), &dvals);
        add_into(self.grad_buf(grads, s.keys), &dkeys);
        add_into(self.grad_buf(grads, s.query), &dq);
        add_into(self.grad_buf(grads, s.v), &dv);
    }
}
