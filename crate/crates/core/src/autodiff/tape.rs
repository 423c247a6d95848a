use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operations the tape knows how to differentiate.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// `[m, k] x [k, n]`.
    MatMul,
    /// `a x b^T` for `a: [m, k]`, `b: [n, k]`.
    MatMulTransposed,
    /// Same-shape sum, or a rank-1 bias broadcast over the rows of a matrix.
    Add,
    ElementwiseMul,
    /// Ties route the gradient to the first operand.
    ElementwiseMin,
    Sigmoid,
    Tanh,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    SumOverAxis { axis: usize },
    /// Sum of every element, producing a scalar.
    Sum,
    /// `factor * x + shift`.
    Scale { factor: f64, shift: f64 },
    /// Row-wise natural-log negative log-likelihood of `targets`.
    SoftmaxCrossEntropy { targets: Vec<usize> },
    /// Row lookup into a `[rows, cols]` table.
    GatherRows { ids: Vec<usize> },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::MatMulTransposed => "matmul_transposed",
            OpKind::Add => "add",
            OpKind::ElementwiseMul => "elementwise_mul",
            OpKind::ElementwiseMin => "elementwise_min",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Concat { .. } => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::SumOverAxis { .. } => "sum_over_axis",
            OpKind::Sum => "sum",
            OpKind::Scale { .. } => "scale",
            OpKind::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            OpKind::GatherRows { .. } => "gather_rows",
        }
    }
}

struct Node {
    value: Tensor,
    kind: Option<OpKind>,
    inputs: Vec<Var>,
    /// Softmax probabilities kept for the cross-entropy backward rule.
    saved: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Define-by-run reverse-mode tape.
///
/// Every recorded value is appended, so inputs always precede their consumers
/// and a single reverse sweep visits each operation once. After
/// [`Tape::backward`], gradients are retained for leaves only.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Node {
            value,
            kind: None,
            inputs: Vec::new(),
            saved: None,
            requires_grad,
        })
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of a leaf after [`Tape::backward`]; `None` if it was not reached.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn push(&mut self, node: Node) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Validate shapes, evaluate `kind` on `inputs`, and append the result.
    pub fn record(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let name = kind.name();
        let arity_ok = match &kind {
            OpKind::Concat { .. } => !inputs.is_empty(),
            OpKind::MatMul
            | OpKind::MatMulTransposed
            | OpKind::Add
            | OpKind::ElementwiseMul
            | OpKind::ElementwiseMin => inputs.len() == 2,
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(Error::dim(name, format!("wrong operand count {}", inputs.len())));
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::Contract(format!("{name}: unknown variable {bad:?}")));
        }
        let (value, saved) = self.forward(&kind, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Node {
            value,
            kind: Some(kind),
            inputs: inputs.to_vec(),
            saved,
            requires_grad,
        }))
    }

    fn forward(&self, kind: &OpKind, inputs: &[Var]) -> Result<(Tensor, Option<Vec<f64>>)> {
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let name = kind.name();
        let out = match kind {
            OpKind::MatMul | OpKind::MatMulTransposed => {
                let (a, b) = (val(0), val(1));
                if a.rank() != 2 || b.rank() != 2 {
                    return Err(Error::dim(
                        name,
                        format!("operands must be matrices, got {:?} and {:?}", a.shape(), b.shape()),
                    ));
                }
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let transposed = matches!(kind, OpKind::MatMulTransposed);
                let (kb, n) = if transposed {
                    (b.shape()[1], b.shape()[0])
                } else {
                    (b.shape()[0], b.shape()[1])
                };
                if k != kb {
                    return Err(Error::dim(
                        name,
                        format!("inner dimensions differ: {:?} and {:?}", a.shape(), b.shape()),
                    ));
                }
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, a.data(), false, b.data(), transposed, 0.0, &mut c);
                Tensor::from_parts(vec![m, n], c)
            }
            OpKind::Add => {
                let (a, b) = (val(0), val(1));
                if a.shape() == b.shape() {
                    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                    Tensor::from_parts(a.shape().to_vec(), data)
                } else if a.rank() == 2 && b.rank() == 1 && a.cols() == b.len() {
                    let bias = b.data();
                    let mut data = a.data().to_vec();
                    for row in data.chunks_exact_mut(bias.len()) {
                        for (x, y) in row.iter_mut().zip(bias) {
                            *x += y;
                        }
                    }
                    Tensor::from_parts(a.shape().to_vec(), data)
                } else {
                    return Err(mismatch(name, a, b));
                }
            }
            OpKind::ElementwiseMul | OpKind::ElementwiseMin => {
                let (a, b) = (val(0), val(1));
                if a.shape() != b.shape() {
                    return Err(mismatch(name, a, b));
                }
                let data = if matches!(kind, OpKind::ElementwiseMul) {
                    a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect()
                } else {
                    a.data()
                        .iter()
                        .zip(b.data())
                        .map(|(&x, &y)| if x <= y { x } else { y })
                        .collect()
                };
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            OpKind::Sigmoid => val(0).map(sigmoid),
            OpKind::Tanh => val(0).map(f64::tanh),
            OpKind::Concat { axis } => self.concat_forward(inputs, *axis)?,
            OpKind::Slice { axis, start, len } => slice_forward(val(0), *axis, *start, *len)?,
            OpKind::SumOverAxis { axis } => {
                let x = val(0);
                match (x.rank(), axis) {
                    (1, 0) => Tensor::scalar(x.data().iter().sum()),
                    (2, 0) => {
                        let mut out = vec![0.0; x.cols()];
                        for row in x.data().chunks_exact(x.cols()) {
                            for (o, v) in out.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                        Tensor::vector(out)
                    }
                    (2, 1) => Tensor::vector(
                        x.data().chunks_exact(x.cols()).map(|r| r.iter().sum()).collect(),
                    ),
                    _ => {
                        return Err(Error::dim(
                            name,
                            format!("axis {axis} invalid for shape {:?}", x.shape()),
                        ))
                    }
                }
            }
            OpKind::Sum => Tensor::scalar(val(0).data().iter().sum()),
            OpKind::Scale { factor, shift } => val(0).map(|v| factor * v + shift),
            OpKind::SoftmaxCrossEntropy { targets } => {
                let logits = val(0);
                if logits.rank() != 2 || logits.rows() != targets.len() {
                    return Err(Error::dim(
                        name,
                        format!(
                            "logits {:?} do not match {} targets",
                            logits.shape(),
                            targets.len()
                        ),
                    ));
                }
                let v = logits.cols();
                if let Some(&t) = targets.iter().find(|&&t| t >= v) {
                    return Err(Error::dim(name, format!("target {t} outside {v} classes")));
                }
                let mut probs = vec![0.0; logits.len()];
                let mut nll = Vec::with_capacity(targets.len());
                for ((row, p), &t) in logits
                    .data()
                    .chunks_exact(v)
                    .zip(probs.chunks_exact_mut(v))
                    .zip(targets)
                {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for (pi, &x) in p.iter_mut().zip(row) {
                        *pi = (x - max).exp();
                        z += *pi;
                    }
                    for pi in p.iter_mut() {
                        *pi /= z;
                    }
                    nll.push(z.ln() + max - row[t]);
                }
                return Ok((Tensor::vector(nll), Some(probs)));
            }
            OpKind::GatherRows { ids } => {
                let table = val(0);
                if table.rank() != 2 || ids.is_empty() {
                    return Err(Error::dim(
                        name,
                        format!("table {:?} with {} ids", table.shape(), ids.len()),
                    ));
                }
                let cols = table.cols();
                let mut data = Vec::with_capacity(ids.len() * cols);
                for &id in ids {
                    if id >= table.rows() {
                        return Err(Error::dim(
                            name,
                            format!("row {id} outside table of {} rows", table.rows()),
                        ));
                    }
                    data.extend_from_slice(table.row(id));
                }
                Tensor::from_parts(vec![ids.len(), cols], data)
            }
        };
        Ok((out, None))
    }

    fn concat_forward(&self, inputs: &[Var], axis: usize) -> Result<Tensor> {
        let parts: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let first = parts[0];
        match (first.rank(), axis) {
            (1, 0) => {
                if parts.iter().any(|p| p.rank() != 1) {
                    return Err(Error::dim("concat", "mixed ranks"));
                }
                Ok(Tensor::vector(parts.iter().flat_map(|p| p.data().iter().copied()).collect()))
            }
            (2, 0) => {
                let cols = first.cols();
                if parts.iter().any(|p| p.rank() != 2 || p.cols() != cols) {
                    return Err(Error::dim("concat", "row-concatenated parts need equal columns"));
                }
                let rows = parts.iter().map(|p| p.rows()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for p in &parts {
                    data.extend_from_slice(p.data());
                }
                Ok(Tensor::from_parts(vec![rows, cols], data))
            }
            (2, 1) => {
                let rows = first.rows();
                if parts.iter().any(|p| p.rank() != 2 || p.rows() != rows) {
                    return Err(Error::dim("concat", "column-concatenated parts need equal rows"));
                }
                let cols: usize = parts.iter().map(|p| p.cols()).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for p in &parts {
                        data.extend_from_slice(p.row(r));
                    }
                }
                Ok(Tensor::from_parts(vec![rows, cols], data))
            }
            _ => Err(Error::dim(
                "concat",
                format!("axis {axis} invalid for shape {:?}", first.shape()),
            )),
        }
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every reachable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract("backward: unknown loss variable".into()));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(kind) = &node.kind else { continue };
            let Some(g) = self.grads[i].take() else { continue };
            backprop(&self.nodes, &mut self.grads, kind, node, &g);
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::MatMul, &[a, b])
    }

    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::MatMulTransposed, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::ElementwiseMul, &[a, b])
    }

    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(OpKind::ElementwiseMin, &[a, b])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.record(OpKind::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.record(OpKind::Tanh, &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.record(OpKind::Concat { axis }, parts)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.record(OpKind::Slice { axis, start, len }, &[x])
    }

    pub fn sum_over_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.record(OpKind::SumOverAxis { axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.record(OpKind::Sum, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.record(OpKind::Scale { factor, shift: 0.0 }, &[x])
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.record(
            OpKind::Scale {
                factor: -1.0,
                shift: 1.0,
            },
            &[x],
        )
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        self.record(OpKind::SoftmaxCrossEntropy { targets }, &[logits])
    }

    pub fn gather_rows(&mut self, table: Var, ids: Vec<usize>) -> Result<Var> {
        self.record(OpKind::GatherRows { ids }, &[table])
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::dim(op, format!("shapes {:?} and {:?} do not conform", a.shape(), b.shape()))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn slice_forward(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    let bad = || {
        Error::dim(
            "slice",
            format!("[{start}, {}) on axis {axis} of {:?}", start + len, x.shape()),
        )
    };
    if len == 0 {
        return Err(bad());
    }
    match (x.rank(), axis) {
        (1, 0) => {
            if start + len > x.len() {
                return Err(bad());
            }
            Ok(Tensor::vector(x.data()[start..start + len].to_vec()))
        }
        (2, 0) => {
            if start + len > x.rows() {
                return Err(bad());
            }
            let c = x.cols();
            Ok(Tensor::from_parts(
                vec![len, c],
                x.data()[start * c..(start + len) * c].to_vec(),
            ))
        }
        (2, 1) => {
            if start + len > x.cols() {
                return Err(bad());
            }
            let mut data = Vec::with_capacity(x.rows() * len);
            for r in 0..x.rows() {
                data.extend_from_slice(&x.row(r)[start..start + len]);
            }
            Ok(Tensor::from_parts(vec![x.rows(), len], data))
        }
        _ => Err(bad()),
    }
}

/// Zero-initialised gradient buffer of `v`, or `None` when `v` needs no gradient.
fn grad_slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn backprop(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    kind: &OpKind,
    node: &Node,
    g: &[f64],
) {
    let ins = &node.inputs;
    let val = |i: usize| &nodes[ins[i].0].value;
    match kind {
        OpKind::MatMul => {
            let (a, b) = (val(0), val(1));
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if let Some(da) = grad_slot(nodes, grads, ins[0]) {
                gemm(m, n, k, g, false, b.data(), true, 1.0, da);
            }
            if let Some(db) = grad_slot(nodes, grads, ins[1]) {
                gemm(k, m, n, a.data(), true, g, false, 1.0, db);
            }
        }
        OpKind::MatMulTransposed => {
            let (a, b) = (val(0), val(1));
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
            if let Some(da) = grad_slot(nodes, grads, ins[0]) {
                gemm(m, n, k, g, false, b.data(), false, 1.0, da);
            }
            if let Some(db) = grad_slot(nodes, grads, ins[1]) {
                gemm(n, m, k, g, true, a.data(), false, 1.0, db);
            }
        }
        OpKind::Add => {
            if let Some(da) = grad_slot(nodes, grads, ins[0]) {
                add_into(da, g);
            }
            let broadcast = val(0).shape() != val(1).shape();
            if let Some(db) = grad_slot(nodes, grads, ins[1]) {
                if broadcast {
                    for row in g.chunks_exact(db.len()) {
                        add_into(db, row);
                    }
                } else {
                    add_into(db, g);
                }
            }
        }
        OpKind::ElementwiseMul => {
            let (a, b) = (val(0).data(), val(1).data());
            if let Some(da) = grad_slot(nodes, grads, ins[0]) {
                for ((d, gi), bi) in da.iter_mut().zip(g).zip(b) {
                    *d += gi * bi;
                }
            }
            if let Some(db) = grad_slot(nodes, grads, ins[1]) {
                for ((d, gi), ai) in db.iter_mut().zip(g).zip(a) {
                    *d += gi * ai;
                }
            }
        }
        OpKind::ElementwiseMin => {
            let (a, b) = (val(0).data(), val(1).data());
            if let Some(da) = grad_slot(nodes, grads, ins[0]) {
                for (((d, gi), ai), bi) in da.iter_mut().zip(g).zip(a).zip(b) {
                    if ai <= bi {
                        *d += gi;
                    }
                }
            }
            if let Some(db) = grad_slot(nodes, grads, ins[1]) {
                for (((d, gi), ai), bi) in db.iter_mut().zip(g).zip(a).zip(b) {
                    if ai > bi {
                        *d += gi;
                    }
                }
            }
        }
        OpKind::Sigmoid => {
            let y = node.value.data();
            if let Some(dx) = grad_slot(nodes, grads, ins[0]) {
                for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                    *d += gi * yi * (1.0 - yi);
                }
            }
        }
        OpKind::Tanh => {
            let y = node.value.data();
            if let Some(dx) = grad_slot(nodes, grads, ins[0]) {
                for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                    *d += gi * (1.0 - yi * yi);
                }
            }
        }
        OpKind::Concat { axis } => {
            let out_cols = node.value.cols();
            let mut offset = 0;
            for &part in ins {
                let p = &nodes[part.0].value;
                let extent = if *axis == 0 { p.len() } else { p.cols() };
                if let Some(dp) = grad_slot(nodes, grads, part) {
                    if *axis == 0 {
                        add_into(dp, &g[offset..offset + extent]);
                    } else {
                        for (r, drow) in dp.chunks_exact_mut(extent).enumerate() {
                            let src = &g[r * out_cols + offset..r * out_cols + offset + extent];
                            add_into(drow, src);
                        }
                    }
                }
                offset += extent;
            }
        }
        OpKind::Slice { axis, start, len } => {
            let x = val(0);
            let cols = x.cols();
            if let Some(dx) = grad_slot(nodes, grads, ins[0]) {
                match (x.rank(), axis) {
                    (1, _) => add_into(&mut dx[*start..start + len], g),
                    (_, 0) => add_into(&mut dx[start * cols..(start + len) * cols], g),
                    _ => {
                        for (drow, grow) in dx.chunks_exact_mut(cols).zip(g.chunks_exact(*len)) {
                            add_into(&mut drow[*start..start + len], grow);
                        }
                    }
                }
            }
        }
        OpKind::SumOverAxis { axis } => {
            let x = val(0);
            let cols = x.cols();
            if let Some(dx) = grad_slot(nodes, grads, ins[0]) {
                match (x.rank(), axis) {
                    (1, _) => dx.iter_mut().for_each(|d| *d += g[0]),
                    (_, 0) => {
                        for drow in dx.chunks_exact_mut(cols) {
                            add_into(drow, g);
                        }
                    }
                    _ => {
                        for (drow, gi) in dx.chunks_exact_mut(cols).zip(g) {
                            drow.iter_mut().for_each(|d| *d += gi);
                        }
                    }
                }
            }
        }
        OpKind::Sum => {
            if let Some(dx) = grad_slot(nodes, grads, ins[0]) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        OpKind::Scale { factor, .. } => {
            if let Some(dx) = grad_slot(nodes, grads, ins[0]) {
                for (d, gi) in dx.iter_mut().zip(g) {
                    *d += factor * gi;
                }
            }
        }
        OpKind::SoftmaxCrossEntropy { targets } => {
            let probs = node.saved.as_deref().expect("softmax probabilities are saved");
            let v = val(0).cols();
            if let Some(dx) = grad_slot(nodes, grads, ins[0]) {
                for (((drow, prow), &t), gi) in dx
                    .chunks_exact_mut(v)
                    .zip(probs.chunks_exact(v))
                    .zip(targets)
                    .zip(g)
                {
                    for (d, p) in drow.iter_mut().zip(prow) {
                        *d += gi * p;
                    }
                    drow[t] -= gi;
                }
            }
        }
        OpKind::GatherRows { ids } => {
            let cols = val(0).cols();
            if let Some(dt) = grad_slot(nodes, grads, ins[0]) {
                for (&id, grow) in ids.iter().zip(g.chunks_exact(cols)) {
                    add_into(&mut dt[id * cols..(id + 1) * cols], grow);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
