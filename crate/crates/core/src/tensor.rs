//! Dense tensors and a small reverse-mode autodiff graph.
//!
//! Everything downstream (adapters, split training, Fisher estimation)
//! runs on this engine. The op set is deliberately tiny: matmul, add with
//! bias broadcast, relu, tanh, constant scale, feature concat, batch mean,
//! and a fused softmax cross-entropy that averages over the batch. All
//! values are `f64` and row-major; forward execution is deterministic, so
//! repeated runs on the same inputs are bit-identical.
//!
//! A graph is immutable once built. `forward` returns an [`Execution`]
//! holding every node's value; `backward` consumes that execution without
//! mutating either, so one graph can serve concurrent executions as long
//! as each execution is used single-flight.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Row-major dense tensor of `f64`. A scalar has the empty shape `[]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dims must be positive, got {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} implies {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Single-element tensors (shape `[]`, `[1]`, `[1,1]`) act as scalars.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn as_scalar(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::InvalidArgument(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    fn rows(&self) -> usize {
        self.shape[0]
    }

    fn cols(&self) -> usize {
        self.shape[1]
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }
}

/// Largest absolute elementwise difference between two slices.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_abs_diff on unequal lengths");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum OpKind {
    /// Placeholder bound by name at forward time.
    Input { requires_grad: bool },
    /// Weight tensor owned by the graph. Only trainable params receive
    /// gradient slots.
    Param { value: Tensor, trainable: bool },
    MatMul(NodeId, NodeId),
    /// Elementwise add; the right operand may be `[1, C]` against a
    /// `[B, C]` left operand (bias broadcast over the batch dim).
    Add(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    /// Multiply by a compile-time constant.
    Scale(NodeId, f64),
    /// Concatenate two `[B, _]` tensors along the feature dim.
    Concat(NodeId, NodeId),
    /// Mean over the batch dim: `[B, C] -> [1, C]`.
    MeanBatch(NodeId),
    /// Fused softmax + cross-entropy, averaged over the batch; the class
    /// labels are bound by name at forward time. Output is scalar.
    SoftmaxCrossEntropy { logits: NodeId, targets: String },
}

#[derive(Debug, Clone)]
struct Node {
    name: String,
    op: OpKind,
    requires_grad: bool,
}

/// Named forward-time inputs: dense tensors plus integer class labels for
/// the fused cross-entropy op.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    tensors: HashMap<String, Tensor>,
    labels: HashMap<String, Vec<usize>>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensor(mut self, name: &str, t: Tensor) -> Self {
        self.tensors.insert(name.to_string(), t);
        self
    }

    pub fn labels(mut self, name: &str, labels: Vec<usize>) -> Self {
        self.labels.insert(name.to_string(), labels);
        self
    }
}

/// Values produced by one forward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Execution {
    values: Vec<Tensor>,
    /// Per cross-entropy node: softmax probabilities and resolved labels,
    /// kept for the backward rule.
    ce_aux: HashMap<usize, (Tensor, Vec<usize>)>,
}

impl Execution {
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        self.values[id.0].as_scalar()
    }
}

/// Gradients from one backward pass, indexed by node. Only trainable
/// params and nodes on a path from them to the seed hold a value.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
}

/// A retained computation graph. Nodes are appended in topological order
/// by construction, which forward and backward both rely on.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_name(&self, id: NodeId) -> &str {
        &self.nodes[id.0].name
    }

    fn push(&mut self, name: String, op: OpKind, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            name,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn auto_name(&self, kind: &str) -> String {
        format!("{kind}#{}", self.nodes.len())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Named input bound at forward time.
    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(
            name.to_string(),
            OpKind::Input {
                requires_grad: false,
            },
            false,
        )
    }

    /// Input that also receives a gradient slot (the split boundary needs
    /// the gradient of the loss w.r.t. an activation input).
    pub fn input_with_grad(&mut self, name: &str) -> NodeId {
        self.push(
            name.to_string(),
            OpKind::Input {
                requires_grad: true,
            },
            true,
        )
    }

    pub fn param(&mut self, name: &str, value: Tensor, trainable: bool) -> NodeId {
        self.push(
            name.to_string(),
            OpKind::Param { value, trainable },
            trainable,
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let rg = self.needs(a) || self.needs(b);
        let name = self.auto_name("matmul");
        self.push(name, OpKind::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let rg = self.needs(a) || self.needs(b);
        let name = self.auto_name("add");
        self.push(name, OpKind::Add(a, b), rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let rg = self.needs(x);
        let name = self.auto_name("relu");
        self.push(name, OpKind::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let rg = self.needs(x);
        let name = self.auto_name("tanh");
        self.push(name, OpKind::Tanh(x), rg)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let rg = self.needs(x);
        let name = self.auto_name("scale");
        self.push(name, OpKind::Scale(x, c), rg)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let rg = self.needs(a) || self.needs(b);
        let name = self.auto_name("concat");
        self.push(name, OpKind::Concat(a, b), rg)
    }

    pub fn mean_batch(&mut self, x: NodeId) -> NodeId {
        let rg = self.needs(x);
        let name = self.auto_name("mean_batch");
        self.push(name, OpKind::MeanBatch(x), rg)
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &str) -> NodeId {
        let rg = self.needs(logits);
        let name = self.auto_name("softmax_xent");
        self.push(
            name,
            OpKind::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_string(),
            },
            rg,
        )
    }

    /// Replace a trainable or frozen param's value in place. Shapes must
    /// match; used by the finite-difference oracle and by training loops
    /// that rebuild executions against updated weights.
    pub fn set_param(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        match &mut self.nodes[id.0].op {
            OpKind::Param { value: slot, .. } => {
                if slot.shape() != value.shape() {
                    return Err(Error::ShapeMismatch {
                        node: self.nodes[id.0].name.clone(),
                        detail: format!(
                            "param update shape {:?} != {:?}",
                            value.shape(),
                            slot.shape()
                        ),
                    });
                }
                *slot = value;
                Ok(())
            }
            _ => Err(Error::InvalidArgument(format!(
                "node `{}` is not a param",
                self.nodes[id.0].name
            ))),
        }
    }

    pub fn param_value(&self, id: NodeId) -> Result<&Tensor> {
        match &self.nodes[id.0].op {
            OpKind::Param { value, .. } => Ok(value),
            _ => Err(Error::InvalidArgument(format!(
                "node `{}` is not a param",
                self.nodes[id.0].name
            ))),
        }
    }

    /// Trainable params in insertion order.
    pub fn trainable_params(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                OpKind::Param { trainable: true, .. } => Some(NodeId(i)),
                _ => None,
            })
            .collect()
    }

    /// Run the graph on the given bindings. Deterministic: the same graph
    /// and bindings produce bit-identical values.
    pub fn forward(&self, bindings: &Bindings) -> Result<Execution> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut ce_aux = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                OpKind::Input { .. } => bindings
                    .tensors
                    .get(&node.name)
                    .cloned()
                    .ok_or_else(|| Error::UnboundInput(node.name.clone()))?,
                OpKind::Param { value, .. } => value.clone(),
                OpKind::MatMul(a, b) => self.fw_matmul(node, &values[a.0], &values[b.0])?,
                OpKind::Add(a, b) => self.fw_add(node, &values[a.0], &values[b.0])?,
                OpKind::Relu(x) => {
                    let x = &values[x.0];
                    Tensor {
                        shape: x.shape.clone(),
                        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
                    }
                }
                OpKind::Tanh(x) => {
                    let x = &values[x.0];
                    Tensor {
                        shape: x.shape.clone(),
                        data: x.data.iter().map(|&v| v.tanh()).collect(),
                    }
                }
                OpKind::Scale(x, c) => {
                    let x = &values[x.0];
                    Tensor {
                        shape: x.shape.clone(),
                        data: x.data.iter().map(|&v| c * v).collect(),
                    }
                }
                OpKind::Concat(a, b) => self.fw_concat(node, &values[a.0], &values[b.0])?,
                OpKind::MeanBatch(x) => self.fw_mean_batch(node, &values[x.0])?,
                OpKind::SoftmaxCrossEntropy { logits, targets } => {
                    let labels = bindings
                        .labels
                        .get(targets)
                        .ok_or_else(|| Error::UnboundInput(targets.clone()))?;
                    let (loss, probs) = self.fw_softmax_xent(node, &values[logits.0], labels)?;
                    ce_aux.insert(i, (probs, labels.clone()));
                    loss
                }
            };
            values.push(value);
        }
        Ok(Execution { values, ce_aux })
    }

    fn fw_matmul(&self, node: &Node, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if !a.is_matrix() || !b.is_matrix() || a.cols() != b.rows() {
            return Err(Error::ShapeMismatch {
                node: node.name.clone(),
                detail: format!("matmul {:?} x {:?}", a.shape, b.shape),
            });
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a.data[i * k + p];
                let brow = &b.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    fn fw_add(&self, node: &Node, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape == b.shape {
            let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
            return Ok(Tensor {
                shape: a.shape.clone(),
                data,
            });
        }
        // Bias broadcast: [B, C] + [1, C].
        if a.is_matrix() && b.is_matrix() && b.rows() == 1 && a.cols() == b.cols() {
            let mut data = a.data.clone();
            for r in 0..a.rows() {
                for c in 0..a.cols() {
                    data[r * a.cols() + c] += b.data[c];
                }
            }
            return Ok(Tensor {
                shape: a.shape.clone(),
                data,
            });
        }
        Err(Error::ShapeMismatch {
            node: node.name.clone(),
            detail: format!("add {:?} + {:?}", a.shape, b.shape),
        })
    }

    fn fw_concat(&self, node: &Node, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if !a.is_matrix() || !b.is_matrix() || a.rows() != b.rows() {
            return Err(Error::ShapeMismatch {
                node: node.name.clone(),
                detail: format!("concat {:?} | {:?}", a.shape, b.shape),
            });
        }
        let (r, ca, cb) = (a.rows(), a.cols(), b.cols());
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(&a.data[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&b.data[i * cb..(i + 1) * cb]);
        }
        Tensor::matrix(r, ca + cb, data)
    }

    fn fw_mean_batch(&self, node: &Node, x: &Tensor) -> Result<Tensor> {
        if !x.is_matrix() {
            return Err(Error::ShapeMismatch {
                node: node.name.clone(),
                detail: format!("mean_batch on {:?}", x.shape),
            });
        }
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += x.at(i, j);
            }
        }
        for v in &mut out {
            *v /= r as f64;
        }
        Tensor::matrix(1, c, out)
    }

    /// Stable log-sum-exp form; returns (mean loss, per-row softmax probs).
    fn fw_softmax_xent(
        &self,
        node: &Node,
        logits: &Tensor,
        labels: &[usize],
    ) -> Result<(Tensor, Tensor)> {
        if !logits.is_matrix() {
            return Err(Error::ShapeMismatch {
                node: node.name.clone(),
                detail: format!("softmax_xent on {:?}", logits.shape),
            });
        }
        let (b, c) = (logits.rows(), logits.cols());
        if labels.len() != b {
            return Err(Error::ShapeMismatch {
                node: node.name.clone(),
                detail: format!("{b} logit rows vs {} labels", labels.len()),
            });
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let t = labels[i];
            if t >= c {
                return Err(Error::LabelOutOfRange {
                    label: t,
                    n_answers: c,
                });
            }
            let row = &logits.data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &v in row {
                denom += (v - m).exp();
            }
            let lse = m + denom.ln();
            loss += lse - row[t];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        loss /= b as f64;
        Ok((Tensor::scalar(loss), Tensor::matrix(b, c, probs)?))
    }

    /// Backward from a scalar loss node with seed gradient 1.
    pub fn backward(&self, exec: &Execution, loss: NodeId) -> Result<Gradients> {
        let value = &exec.values[loss.0];
        if !value.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, node `{}` has shape {:?}",
                self.nodes[loss.0].name,
                value.shape()
            )));
        }
        let mut seed = Tensor::zeros(value.shape());
        seed.data[0] = 1.0;
        self.backward_from(exec, loss, &seed)
    }

    /// Backward from any node with an explicit upstream gradient. This is
    /// the client half of split execution: the server's boundary gradient
    /// seeds the client graph at its activation node.
    pub fn backward_from(&self, exec: &Execution, start: NodeId, seed: &Tensor) -> Result<Gradients> {
        if exec.values.len() != self.nodes.len() {
            return Err(Error::StaleCache(format!(
                "execution has {} values for a graph of {} nodes",
                exec.values.len(),
                self.nodes.len()
            )));
        }
        if exec.values[start.0].shape() != seed.shape() {
            return Err(Error::ShapeMismatch {
                node: self.nodes[start.0].name.clone(),
                detail: format!(
                    "seed gradient {:?} vs node value {:?}",
                    seed.shape(),
                    exec.values[start.0].shape()
                ),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[start.0].requires_grad {
            grads[start.0] = Some(seed.clone());
        }
        for i in (0..=start.0).rev() {
            let Some(g) = grads[i].clone() else { continue };
            match &self.nodes[i].op {
                OpKind::Input { .. } | OpKind::Param { .. } => {}
                OpKind::MatMul(a, b) => {
                    let (av, bv) = (&exec.values[a.0], &exec.values[b.0]);
                    if self.needs(*a) {
                        // dA = g . B^T
                        let (m, n, k) = (g.rows(), g.cols(), bv.rows());
                        let mut d = vec![0.0; m * k];
                        for r in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for c in 0..n {
                                    acc += g.data[r * n + c] * bv.data[p * n + c];
                                }
                                d[r * k + p] = acc;
                            }
                        }
                        accumulate(&mut grads[a.0], av.shape(), &d);
                    }
                    if self.needs(*b) {
                        // dB = A^T . g
                        let (m, n, k) = (g.rows(), g.cols(), av.cols());
                        let mut d = vec![0.0; k * n];
                        for p in 0..k {
                            for r in 0..m {
                                let a_rp = av.data[r * k + p];
                                for c in 0..n {
                                    d[p * n + c] += a_rp * g.data[r * n + c];
                                }
                            }
                        }
                        accumulate(&mut grads[b.0], bv.shape(), &d);
                    }
                }
                OpKind::Add(a, b) => {
                    let (av, bv) = (&exec.values[a.0], &exec.values[b.0]);
                    if self.needs(*a) {
                        accumulate(&mut grads[a.0], av.shape(), &g.data);
                    }
                    if self.needs(*b) {
                        if bv.shape() == g.shape() {
                            accumulate(&mut grads[b.0], bv.shape(), &g.data);
                        } else {
                            // Bias broadcast: sum the gradient over the batch.
                            let (r, c) = (g.rows(), g.cols());
                            let mut d = vec![0.0; c];
                            for i in 0..r {
                                for j in 0..c {
                                    d[j] += g.data[i * c + j];
                                }
                            }
                            accumulate(&mut grads[b.0], bv.shape(), &d);
                        }
                    }
                }
                OpKind::Relu(x) => {
                    if self.needs(*x) {
                        let xv = &exec.values[x.0];
                        // Subgradient at 0 is taken as 0.
                        let d: Vec<f64> = xv
                            .data
                            .iter()
                            .zip(&g.data)
                            .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                            .collect();
                        accumulate(&mut grads[x.0], xv.shape(), &d);
                    }
                }
                OpKind::Tanh(x) => {
                    if self.needs(*x) {
                        let yv = &exec.values[i];
                        let xv = &exec.values[x.0];
                        let d: Vec<f64> = yv
                            .data
                            .iter()
                            .zip(&g.data)
                            .map(|(&y, &gv)| gv * (1.0 - y * y))
                            .collect();
                        accumulate(&mut grads[x.0], xv.shape(), &d);
                    }
                }
                OpKind::Scale(x, c) => {
                    if self.needs(*x) {
                        let xv = &exec.values[x.0];
                        let d: Vec<f64> = g.data.iter().map(|&gv| c * gv).collect();
                        accumulate(&mut grads[x.0], xv.shape(), &d);
                    }
                }
                OpKind::Concat(a, b) => {
                    let (av, bv) = (&exec.values[a.0], &exec.values[b.0]);
                    let (r, ca, cb) = (av.rows(), av.cols(), bv.cols());
                    if self.needs(*a) {
                        let mut d = vec![0.0; r * ca];
                        for i in 0..r {
                            d[i * ca..(i + 1) * ca]
                                .copy_from_slice(&g.data[i * (ca + cb)..i * (ca + cb) + ca]);
                        }
                        accumulate(&mut grads[a.0], av.shape(), &d);
                    }
                    if self.needs(*b) {
                        let mut d = vec![0.0; r * cb];
                        for i in 0..r {
                            d[i * cb..(i + 1) * cb].copy_from_slice(
                                &g.data[i * (ca + cb) + ca..(i + 1) * (ca + cb)],
                            );
                        }
                        accumulate(&mut grads[b.0], bv.shape(), &d);
                    }
                }
                OpKind::MeanBatch(x) => {
                    if self.needs(*x) {
                        let xv = &exec.values[x.0];
                        let (r, c) = (xv.rows(), xv.cols());
                        let mut d = vec![0.0; r * c];
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] = g.data[j] / r as f64;
                            }
                        }
                        accumulate(&mut grads[x.0], xv.shape(), &d);
                    }
                }
                OpKind::SoftmaxCrossEntropy { logits, .. } => {
                    if self.needs(*logits) {
                        let (probs, labels) = exec
                            .ce_aux
                            .get(&i)
                            .ok_or_else(|| Error::StaleCache("missing softmax cache".into()))?;
                        let gv = g.data[0];
                        let (b, c) = (probs.rows(), probs.cols());
                        let mut d = probs.data.clone();
                        for (row, &t) in labels.iter().enumerate() {
                            d[row * c + t] -= 1.0;
                        }
                        for v in &mut d {
                            *v *= gv / b as f64;
                        }
                        accumulate(&mut grads[logits.0], exec.values[logits.0].shape(), &d);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], delta: &[f64]) {
    match slot {
        Some(t) => {
            for (a, b) in t.data.iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => {
            *slot = Some(Tensor {
                shape: shape.to_vec(),
                data: delta.to_vec(),
            });
        }
    }
}

/// Central-difference gradient oracle: `(L(p+h) - L(p-h)) / 2h` per
/// coordinate of every trainable param. Independent of the backward pass;
/// used to check it.
pub fn finite_difference_gradient(
    graph: &Graph,
    bindings: &Bindings,
    loss: NodeId,
    h: f64,
) -> Result<Vec<(String, Tensor)>> {
    if h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step h must be > 0, got {h}")));
    }
    let mut scratch = graph.clone();
    let mut out = Vec::new();
    for pid in graph.trainable_params() {
        let base = graph.param_value(pid)?.clone();
        let mut grad = Tensor::zeros(base.shape());
        for i in 0..base.numel() {
            let mut plus = base.clone();
            plus.data[i] += h;
            scratch.set_param(pid, plus)?;
            let lp = scratch.forward(bindings)?.scalar(loss)?;

            let mut minus = base.clone();
            minus.data[i] -= h;
            scratch.set_param(pid, minus)?;
            let lm = scratch.forward(bindings)?.scalar(loss)?;

            grad.data[i] = (lp - lm) / (2.0 * h);
        }
        scratch.set_param(pid, base)?;
        out.push((graph.node_name(pid).to_string(), grad));
    }
    Ok(out)
}
