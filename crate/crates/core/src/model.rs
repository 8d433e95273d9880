//! The split model: a frozen multimodal pipeline and trainable low-rank
//! adapters on the client side, a frozen classifier core on the server
//! side, and the boundary activation/gradient contract between them.
//!
//! The client half computes, per modality, `adapter(connector(encoder(x)))`
//! and ships the concatenated activations. The server half runs the frozen
//! core to a scalar loss and ships back the gradient at the boundary. No
//! raw inputs cross the boundary, and no frozen weight is ever updated.
//!
//! Text encoding is an embedding lookup with mean pooling, expressed as a
//! single matmul: each question becomes a bag-of-words vector (token
//! counts divided by sequence length), so `bow . E` is exactly the pooled
//! embedding. That keeps the whole pipeline inside the graph op set and
//! makes the stitched single-graph model identical to split execution.

use rand::Rng as _;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::rng::{checksum_f64s, stream, Rng};
use crate::tensor::{Bindings, Graph, NodeId, Tensor};

/// Sizes of every stage of the stitched model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    /// Image feature dimensionality (input to the image encoder).
    pub d_img: usize,
    /// Shared embedding width produced by both encoders.
    pub d_emb: usize,
    /// Connector output width; adapters live at this width.
    pub d_model: usize,
    /// Hidden width of the frozen core.
    pub d_hidden: usize,
    /// Number of answer classes.
    pub n_answers: usize,
    /// Token vocabulary size for the text encoder.
    pub vocab: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            d_img: 16,
            d_emb: 16,
            d_model: 32,
            d_hidden: 64,
            n_answers: 10,
            vocab: 32,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.d_img,
            self.d_emb,
            self.d_model,
            self.d_hidden,
            self.n_answers,
            self.vocab,
        ];
        if all.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "all model dims must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Client-resident frozen stages: modality encoders plus the shared
/// connector. Bit-identical across all clients for a given seed and never
/// touched by any optimizer.
#[derive(Debug, Clone)]
pub struct FrozenPipeline {
    pub(crate) dims: ModelDims,
    img_w: Tensor,
    img_b: Tensor,
    embed: Tensor,
    conn_w: Tensor,
    conn_b: Tensor,
}

/// Server-resident frozen classifier: two dense layers over the
/// concatenated boundary activation.
#[derive(Debug, Clone)]
pub struct FrozenCore {
    pub(crate) dims: ModelDims,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

/// Deterministic frozen weights from a seed.
///
/// Every weight matrix `W[in, out]` used as `x . W` draws uniform from
/// `[-1/sqrt(in), +1/sqrt(in)]`; a layer's bias uses its matrix's bound.
/// The embedding table is a lookup, not a matmul weight, so it uses
/// bound 1. Each tensor has its own derived stream, so dims changes never
/// shift sibling tensors.
pub fn init_frozen(seed: u64, dims: &ModelDims) -> Result<(FrozenPipeline, FrozenCore)> {
    dims.validate()?;
    let pipeline = FrozenPipeline {
        dims: *dims,
        img_w: uniform_fan_in(seed, "frozen-img-w", dims.d_img, dims.d_emb, dims.d_img),
        img_b: uniform_fan_in(seed, "frozen-img-b", 1, dims.d_emb, dims.d_img),
        embed: uniform_fan_in(seed, "frozen-embed", dims.vocab, dims.d_emb, 1),
        conn_w: uniform_fan_in(seed, "frozen-conn-w", dims.d_emb, dims.d_model, dims.d_emb),
        conn_b: uniform_fan_in(seed, "frozen-conn-b", 1, dims.d_model, dims.d_emb),
    };
    let core = FrozenCore {
        dims: *dims,
        w1: uniform_fan_in(seed, "frozen-core-w1", 2 * dims.d_model, dims.d_hidden, 2 * dims.d_model),
        b1: uniform_fan_in(seed, "frozen-core-b1", 1, dims.d_hidden, 2 * dims.d_model),
        w2: uniform_fan_in(seed, "frozen-core-w2", dims.d_hidden, dims.n_answers, dims.d_hidden),
        b2: uniform_fan_in(seed, "frozen-core-b2", 1, dims.n_answers, dims.d_hidden),
    };
    Ok((pipeline, core))
}

fn uniform_fan_in(seed: u64, purpose: &str, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let mut rng = stream(seed, purpose, &[]);
    let bound = 1.0 / (fan_in as f64).sqrt();
    uniform_tensor(&mut rng, rows, cols, bound)
}

fn uniform_tensor(rng: &mut Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("consistent dims")
}

impl FrozenPipeline {
    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    /// Total frozen parameter count, by walking the actual tensors.
    pub fn param_count(&self) -> usize {
        [&self.img_w, &self.img_b, &self.embed, &self.conn_w, &self.conn_b]
            .iter()
            .map(|t| t.numel())
            .sum()
    }

    /// Checksum over the exact weight bits, for frozen-integrity checks.
    pub fn checksum(&self) -> u64 {
        checksum_f64s(
            [&self.img_w, &self.img_b, &self.embed, &self.conn_w, &self.conn_b]
                .into_iter()
                .flat_map(|t| t.data().iter()),
        )
    }
}

impl FrozenCore {
    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn param_count(&self) -> usize {
        [&self.w1, &self.b1, &self.w2, &self.b2]
            .iter()
            .map(|t| t.numel())
            .sum()
    }

    pub fn checksum(&self) -> u64 {
        checksum_f64s(
            [&self.w1, &self.b1, &self.w2, &self.b2]
                .into_iter()
                .flat_map(|t| t.data().iter()),
        )
    }
}

/// One low-rank residual adapter: `x + scale . (x . down) . up`.
#[derive(Debug, Clone, PartialEq)]
pub struct NanoAdapter {
    /// `d_model x r` down-projection.
    pub down: Tensor,
    /// `r x d_model` up-projection; all-zero at init so the adapter starts
    /// as an exact identity.
    pub up: Tensor,
    /// Residual branch multiplier; fixed to 1 in this artifact.
    pub scale: f64,
}

impl NanoAdapter {
    pub fn rank(&self) -> usize {
        self.down.shape()[1]
    }

    pub fn d_model(&self) -> usize {
        self.down.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.down.numel() + self.up.numel()
    }
}

/// Both modality adapters plus their enable flags. This is the unit of
/// training and of upload.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    /// Image-path adapter.
    pub a_i: NanoAdapter,
    /// Text-path adapter.
    pub a_t: NanoAdapter,
    pub enable_i: bool,
    pub enable_t: bool,
}

/// Shape of the flattened adapter vector: which adapters are enabled and
/// their sizes. Fixes the wire layout independently of any values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterLayout {
    pub rank: usize,
    pub d_model: usize,
    pub enable_i: bool,
    pub enable_t: bool,
}

impl AdapterLayout {
    /// Flat length: `2 * r * d_model` per enabled adapter.
    pub fn len(&self) -> usize {
        let per = 2 * self.rank * self.d_model;
        per * (usize::from(self.enable_i) + usize::from(self.enable_t))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Random down-projections, zero up-projections, unit scale. Fresh
/// adapters are exact identities, so round 0 starts from the frozen model.
pub fn init_adapters(rank: usize, d_model: usize, seed: u64) -> Result<AdapterParams> {
    if rank < 1 || rank > d_model {
        return Err(Error::InvalidArgument(format!(
            "adapter rank must be in [1, d_model={d_model}], got {rank}"
        )));
    }
    let bound = 1.0 / (d_model as f64).sqrt();
    let mut rng_i = stream(seed, "adapter-down", &[0]);
    let mut rng_t = stream(seed, "adapter-down", &[1]);
    Ok(AdapterParams {
        a_i: NanoAdapter {
            down: uniform_tensor(&mut rng_i, d_model, rank, bound),
            up: Tensor::zeros(&[rank, d_model]),
            scale: 1.0,
        },
        a_t: NanoAdapter {
            down: uniform_tensor(&mut rng_t, d_model, rank, bound),
            up: Tensor::zeros(&[rank, d_model]),
            scale: 1.0,
        },
        enable_i: true,
        enable_t: true,
    })
}

impl AdapterParams {
    pub fn with_flags(mut self, enable_i: bool, enable_t: bool) -> Self {
        self.enable_i = enable_i;
        self.enable_t = enable_t;
        self
    }

    pub fn layout(&self) -> AdapterLayout {
        AdapterLayout {
            rank: self.a_i.rank(),
            d_model: self.a_i.d_model(),
            enable_i: self.enable_i,
            enable_t: self.enable_t,
        }
    }

    /// Trainable parameter count: enabled adapters only.
    pub fn trainable_count(&self) -> usize {
        self.layout().len()
    }

    /// Flatten enabled adapters in the fixed order
    /// `a_i.down, a_i.up, a_t.down, a_t.up`, each row-major. Disabled
    /// adapters are skipped entirely.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_count());
        if self.enable_i {
            out.extend_from_slice(self.a_i.down.data());
            out.extend_from_slice(self.a_i.up.data());
        }
        if self.enable_t {
            out.extend_from_slice(self.a_t.down.data());
            out.extend_from_slice(self.a_t.up.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) for a given layout. Disabled
    /// adapters come back as identities (zero up-projection).
    pub fn unflatten(layout: &AdapterLayout, flat: &[f64]) -> Result<Self> {
        if flat.len() != layout.len() {
            return Err(Error::LengthMismatch {
                what: "flattened adapter vector".into(),
                expected: layout.len(),
                got: flat.len(),
            });
        }
        let (r, d) = (layout.rank, layout.d_model);
        let block = r * d;
        let mut off = 0;
        let mut take = |enabled: bool| -> Result<NanoAdapter> {
            if enabled {
                let down = Tensor::matrix(d, r, flat[off..off + block].to_vec())?;
                let up = Tensor::matrix(r, d, flat[off + block..off + 2 * block].to_vec())?;
                off += 2 * block;
                Ok(NanoAdapter { down, up, scale: 1.0 })
            } else {
                Ok(NanoAdapter {
                    down: Tensor::zeros(&[d, r]),
                    up: Tensor::zeros(&[r, d]),
                    scale: 1.0,
                })
            }
        };
        let a_i = take(layout.enable_i)?;
        let a_t = take(layout.enable_t)?;
        Ok(Self {
            a_i,
            a_t,
            enable_i: layout.enable_i,
            enable_t: layout.enable_t,
        })
    }
}

/// Per-sample concatenated adapter outputs crossing the boundary. Carries
/// only post-connector, post-adapter values, never raw inputs.
#[derive(Debug, Clone)]
pub struct BoundaryActivation {
    pub values: Tensor,
}

impl BoundaryActivation {
    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Loss gradient at the boundary, same shape as the activation.
#[derive(Debug, Clone)]
pub struct BoundaryGradient {
    pub values: Tensor,
}

/// Dense batch encoding of samples for the model: image features, pooled
/// bag-of-words text vectors, and answer labels.
pub fn encode_batch(samples: &[&Sample], dims: &ModelDims) -> Result<(Tensor, Tensor, Vec<usize>)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("encode_batch on empty batch".into()));
    }
    let b = samples.len();
    let mut img = Vec::with_capacity(b * dims.d_img);
    let mut bow = vec![0.0; b * dims.vocab];
    let mut labels = Vec::with_capacity(b);
    for (row, s) in samples.iter().enumerate() {
        if s.image_features.len() != dims.d_img {
            return Err(Error::LengthMismatch {
                what: format!("image features of sample {}", s.id),
                expected: dims.d_img,
                got: s.image_features.len(),
            });
        }
        img.extend_from_slice(&s.image_features);
        let seq = s.question_tokens.len();
        if seq == 0 {
            return Err(Error::EmptyInput(format!("sample {} has no tokens", s.id)));
        }
        for &tok in &s.question_tokens {
            let tok = tok as usize;
            if tok >= dims.vocab {
                return Err(Error::InvalidArgument(format!(
                    "token {tok} outside vocab {}",
                    dims.vocab
                )));
            }
            bow[row * dims.vocab + tok] += 1.0 / seq as f64;
        }
        labels.push(s.answer);
    }
    Ok((
        Tensor::matrix(b, dims.d_img, img)?,
        Tensor::matrix(b, dims.vocab, bow)?,
        labels,
    ))
}

/// Graph node handles for the client half.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ClientNodes {
    pub act: NodeId,
    pub a_i: Option<(NodeId, NodeId)>,
    pub a_t: Option<(NodeId, NodeId)>,
}

/// Append the client half (encoders, connector, adapters, concat) to a
/// graph. Shared by split client execution and the stitched model so the
/// two compositions are the same ops in the same order.
pub(crate) fn append_client(
    g: &mut Graph,
    pipeline: &FrozenPipeline,
    adapters: &AdapterParams,
) -> ClientNodes {
    let img = g.input("img");
    let bow = g.input("bow");
    let img_w = g.param("img_w", pipeline.img_w.clone(), false);
    let img_b = g.param("img_b", pipeline.img_b.clone(), false);
    let embed = g.param("embed", pipeline.embed.clone(), false);
    let conn_w = g.param("conn_w", pipeline.conn_w.clone(), false);
    let conn_b = g.param("conn_b", pipeline.conn_b.clone(), false);

    let img_emb = {
        let m = g.matmul(img, img_w);
        g.add(m, img_b)
    };
    // Embedding lookup + mean pooling, folded into bow . E.
    let txt_emb = g.matmul(bow, embed);
    let img_conn = {
        let m = g.matmul(img_emb, conn_w);
        g.add(m, conn_b)
    };
    let txt_conn = {
        let m = g.matmul(txt_emb, conn_w);
        g.add(m, conn_b)
    };
    let (img_act, a_i) = append_adapter(g, img_conn, &adapters.a_i, adapters.enable_i, "a_i");
    let (txt_act, a_t) = append_adapter(g, txt_conn, &adapters.a_t, adapters.enable_t, "a_t");
    let act = g.concat(img_act, txt_act);
    ClientNodes { act, a_i, a_t }
}

fn append_adapter(
    g: &mut Graph,
    x: NodeId,
    adapter: &NanoAdapter,
    enabled: bool,
    tag: &str,
) -> (NodeId, Option<(NodeId, NodeId)>) {
    if !enabled {
        // Disabled adapter: identity on its path, no trainable nodes.
        return (x, None);
    }
    let down = g.param(&format!("{tag}.down"), adapter.down.clone(), true);
    let up = g.param(&format!("{tag}.up"), adapter.up.clone(), true);
    let mid = g.matmul(x, down);
    let delta = g.matmul(mid, up);
    let scaled = g.scale(delta, adapter.scale);
    (g.add(x, scaled), Some((down, up)))
}

/// Append the server half (frozen core to loss) to a graph.
pub(crate) fn append_core(g: &mut Graph, core: &FrozenCore, act: NodeId) -> (NodeId, NodeId) {
    let w1 = g.param("core_w1", core.w1.clone(), false);
    let b1 = g.param("core_b1", core.b1.clone(), false);
    let w2 = g.param("core_w2", core.w2.clone(), false);
    let b2 = g.param("core_b2", core.b2.clone(), false);
    let h = {
        let m = g.matmul(act, w1);
        let a = g.add(m, b1);
        g.tanh(a)
    };
    let logits = {
        let m = g.matmul(h, w2);
        g.add(m, b2)
    };
    let loss = g.softmax_cross_entropy(logits, "answers");
    (logits, loss)
}

/// The client side of one training step: graph plus its cached forward
/// execution, consumed by [`client_backward`].
pub struct ClientPass {
    graph: Graph,
    exec: crate::tensor::Execution,
    nodes: ClientNodes,
    layout: AdapterLayout,
}

impl ClientPass {
    pub fn activation(&self) -> BoundaryActivation {
        BoundaryActivation {
            values: self.exec.value(self.nodes.act).clone(),
        }
    }
}

/// Run the client half on a batch. Fresh adapters leave the activation
/// exactly equal to the frozen pipeline's output.
pub fn client_forward(
    img: &Tensor,
    bow: &Tensor,
    pipeline: &FrozenPipeline,
    adapters: &AdapterParams,
) -> Result<ClientPass> {
    if img.shape().first() != bow.shape().first() || img.shape().is_empty() {
        return Err(Error::ShapeMismatch {
            node: "client batch".into(),
            detail: format!("img {:?} vs bow {:?}", img.shape(), bow.shape()),
        });
    }
    if img.shape()[0] == 0 {
        return Err(Error::EmptyInput("client_forward on empty batch".into()));
    }
    if adapters.a_i.d_model() != pipeline.dims.d_model
        || adapters.a_t.d_model() != pipeline.dims.d_model
    {
        return Err(Error::ShapeMismatch {
            node: "adapters".into(),
            detail: format!(
                "adapter d_model {} vs pipeline d_model {}",
                adapters.a_i.d_model(),
                pipeline.dims.d_model
            ),
        });
    }
    let mut graph = Graph::new();
    let nodes = append_client(&mut graph, pipeline, adapters);
    let bindings = Bindings::new()
        .tensor("img", img.clone())
        .tensor("bow", bow.clone());
    let exec = graph.forward(&bindings)?;
    Ok(ClientPass {
        graph,
        exec,
        nodes,
        layout: adapters.layout(),
    })
}

/// Adapter output without any adapters applied; the identity-at-init
/// reference and the frozen half of the disabled-adapter contract.
pub fn frozen_activation(
    img: &Tensor,
    bow: &Tensor,
    pipeline: &FrozenPipeline,
) -> Result<Tensor> {
    let disabled = init_adapters(1, pipeline.dims.d_model, 0)?.with_flags(false, false);
    Ok(client_forward(img, bow, pipeline, &disabled)?
        .activation()
        .values)
}

/// Server half of one step: loss, logits, and the boundary gradient.
pub struct ServerPass {
    pub loss: f64,
    pub logits: Tensor,
    pub boundary_grad: BoundaryGradient,
}

/// Run the frozen core on a boundary activation, producing the mean
/// cross-entropy loss and the gradient to send back. Core weights are
/// untouched.
pub fn server_forward_loss(
    activation: &BoundaryActivation,
    answers: &[usize],
    core: &FrozenCore,
) -> Result<ServerPass> {
    if activation.batch() != answers.len() {
        return Err(Error::LengthMismatch {
            what: "answers for activation batch".into(),
            expected: activation.batch(),
            got: answers.len(),
        });
    }
    let mut g = Graph::new();
    let act = g.input_with_grad("act");
    let (logits, loss) = append_core(&mut g, core, act);
    let bindings = Bindings::new()
        .tensor("act", activation.values.clone())
        .labels("answers", answers.to_vec());
    let exec = g.forward(&bindings)?;
    let grads = g.backward(&exec, loss)?;
    let boundary = grads
        .get(act)
        .cloned()
        .ok_or_else(|| Error::StaleCache("no boundary gradient produced".into()))?;
    Ok(ServerPass {
        loss: exec.scalar(loss)?,
        logits: exec.value(logits).clone(),
        boundary_grad: BoundaryGradient { values: boundary },
    })
}

/// Frozen-core logits only (evaluation path, no loss or gradient).
pub fn server_logits(activation: &BoundaryActivation, core: &FrozenCore) -> Result<Tensor> {
    let mut g = Graph::new();
    let act = g.input("act");
    let w1 = g.param("core_w1", core.w1.clone(), false);
    let b1 = g.param("core_b1", core.b1.clone(), false);
    let w2 = g.param("core_w2", core.w2.clone(), false);
    let b2 = g.param("core_b2", core.b2.clone(), false);
    let h = {
        let m = g.matmul(act, w1);
        let a = g.add(m, b1);
        g.tanh(a)
    };
    let logits = {
        let m = g.matmul(h, w2);
        g.add(m, b2)
    };
    let exec = g
        .forward(&Bindings::new().tensor("act", activation.values.clone()))?;
    Ok(exec.value(logits).clone())
}

/// Continue backprop from the boundary into the client graph and return
/// the flat adapter gradient (enabled adapters only, flatten order).
pub fn client_backward(pass: &ClientPass, boundary_grad: &BoundaryGradient) -> Result<Vec<f64>> {
    let grads = pass
        .graph
        .backward_from(&pass.exec, pass.nodes.act, &boundary_grad.values)?;
    let mut flat = Vec::with_capacity(pass.layout.len());
    for slot in [pass.nodes.a_i, pass.nodes.a_t].into_iter().flatten() {
        for id in [slot.0, slot.1] {
            let g = grads.get(id).ok_or_else(|| {
                Error::StaleCache(format!("no gradient for `{}`", pass.graph.node_name(id)))
            })?;
            flat.extend_from_slice(g.data());
        }
    }
    Ok(flat)
}

/// One stitched (single-graph) forward/backward: the reference that split
/// execution must match coordinate-for-coordinate.
pub fn stitched_loss_and_grads(
    img: &Tensor,
    bow: &Tensor,
    answers: &[usize],
    pipeline: &FrozenPipeline,
    adapters: &AdapterParams,
    core: &FrozenCore,
) -> Result<(f64, Tensor, Vec<f64>)> {
    let mut g = Graph::new();
    let nodes = append_client(&mut g, pipeline, adapters);
    let (logits, loss) = append_core(&mut g, core, nodes.act);
    let bindings = Bindings::new()
        .tensor("img", img.clone())
        .tensor("bow", bow.clone())
        .labels("answers", answers.to_vec());
    let exec = g.forward(&bindings)?;
    let grads = g.backward(&exec, loss)?;
    let mut flat = Vec::new();
    for slot in [nodes.a_i, nodes.a_t].into_iter().flatten() {
        for id in [slot.0, slot.1] {
            let gt = grads
                .get(id)
                .ok_or_else(|| Error::StaleCache(format!("no gradient for `{}`", g.node_name(id))))?;
            flat.extend_from_slice(gt.data());
        }
    }
    Ok((exec.scalar(loss)?, exec.value(logits).clone(), flat))
}

/// Exact-match classification accuracy of the split model on a sample set.
pub fn evaluate(
    pipeline: &FrozenPipeline,
    adapters: &AdapterParams,
    core: &FrozenCore,
    samples: &[Sample],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("evaluate on empty sample set".into()));
    }
    let refs: Vec<&Sample> = samples.iter().collect();
    let (img, bow, labels) = encode_batch(&refs, &pipeline.dims)?;
    let pass = client_forward(&img, &bow, pipeline, adapters)?;
    let logits = server_logits(&pass.activation(), core)?;
    let cols = logits.shape()[1];
    let mut correct = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        let r = &logits.data()[row * cols..(row + 1) * cols];
        // Ties resolve to the lowest class index.
        let mut best = 0usize;
        for (j, &v) in r.iter().enumerate() {
            if v > r[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}
