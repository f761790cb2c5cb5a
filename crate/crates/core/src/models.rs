//! Toy classifier families and the canonical flat parameter layout.
//!
//! Every model is a shared backbone followed by one linear classification
//! head per task. All parameters live in a single [`FlatParams`] vector whose
//! [`Layout`] depends only on the [`ModelConfig`].

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, NodeId, Tensor};
use crate::format::{self, CHECKPOINT_MAGIC};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    LinearWeight,
    LinearBias,
    AttentionQ,
    AttentionK,
    AttentionV,
    AttentionOut,
    LayernormScale,
    LayernormBias,
    Embedding,
    Head,
}

impl LayerKind {
    /// Linear, attention and layer-norm segments take part in sparse
    /// fine-tuning; embeddings and classification heads stay frozen.
    pub fn is_maskable(self) -> bool {
        !matches!(self, LayerKind::Embedding | LayerKind::Head)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::LinearWeight => "linear_weight",
            LayerKind::LinearBias => "linear_bias",
            LayerKind::AttentionQ => "attention_q",
            LayerKind::AttentionK => "attention_k",
            LayerKind::AttentionV => "attention_v",
            LayerKind::AttentionOut => "attention_out",
            LayerKind::LayernormScale => "layernorm_scale",
            LayerKind::LayernormBias => "layernorm_bias",
            LayerKind::Embedding => "embedding",
            LayerKind::Head => "head",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub kind: LayerKind,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    segments: Vec<Segment>,
    m: usize,
}

impl Layout {
    fn builder() -> LayoutBuilder {
        LayoutBuilder {
            segments: Vec::new(),
            offset: 0,
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    /// Per-coordinate eligibility for masking.
    pub fn maskable(&self) -> Vec<bool> {
        let mut out = vec![false; self.m];
        for s in &self.segments {
            if s.kind.is_maskable() {
                out[s.range()].iter_mut().for_each(|b| *b = true);
            }
        }
        out
    }

    pub fn maskable_count(&self) -> usize {
        self.segments
            .iter()
            .filter(|s| s.kind.is_maskable())
            .map(|s| s.len)
            .sum()
    }

    /// Segment containing coordinate `j`.
    pub fn segment_of(&self, j: usize) -> Option<&Segment> {
        let idx = self.segments.partition_point(|s| s.offset + s.len <= j);
        self.segments.get(idx).filter(|s| s.range().contains(&j))
    }

    /// Segments must tile `[0, m)` in order.
    pub fn validate(&self) -> Result<()> {
        let mut cursor = 0;
        for s in &self.segments {
            if s.offset != cursor || s.len != s.shape.iter().product::<usize>() {
                return Err(Error::Layout(format!(
                    "segment {} is not contiguous",
                    s.name
                )));
            }
            cursor += s.len;
        }
        if cursor != self.m {
            return Err(Error::Layout(format!(
                "segments cover {cursor} of {} coordinates",
                self.m
            )));
        }
        Ok(())
    }
}

struct LayoutBuilder {
    segments: Vec<Segment>,
    offset: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: impl Into<String>, kind: LayerKind, shape: Vec<usize>) {
        let len = shape.iter().product();
        self.segments.push(Segment {
            name: name.into(),
            kind,
            offset: self.offset,
            len,
            shape,
        });
        self.offset += len;
    }

    fn linear(&mut self, prefix: &str, inp: usize, out: usize, wkind: LayerKind, bkind: LayerKind) {
        self.push(format!("{prefix}.weight"), wkind, vec![inp, out]);
        self.push(format!("{prefix}.bias"), bkind, vec![out]);
    }

    fn finish(self) -> Layout {
        Layout {
            segments: self.segments,
            m: self.offset,
        }
    }
}

/// The model's full parameter vector together with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatParams {
    pub values: Vec<f64>,
    layout: Arc<Layout>,
}

impl FlatParams {
    pub fn new(values: Vec<f64>, layout: Arc<Layout>) -> Result<Self> {
        if values.len() != layout.m() {
            return Err(Error::Layout(format!(
                "{} values for a layout of {} parameters",
                values.len(),
                layout.m()
            )));
        }
        Ok(FlatParams { values, layout })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, self.layout.clone())
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.layout.segment(name).map(|s| &self.values[s.range()])
    }

    /// Splits into one named tensor per segment.
    pub fn unflatten(&self) -> Vec<(String, Tensor)> {
        self.layout
            .segments()
            .iter()
            .map(|s| {
                let t = Tensor::new(s.shape.clone(), self.values[s.range()].to_vec())
                    .expect("segment shape matches its length");
                (s.name.clone(), t)
            })
            .collect()
    }

    pub fn flatten(layout: Arc<Layout>, named: &[(String, Tensor)]) -> Result<Self> {
        let mut values = vec![0.0; layout.m()];
        for s in layout.segments() {
            let (_, t) = named
                .iter()
                .find(|(n, _)| n == &s.name)
                .ok_or_else(|| Error::Layout(format!("missing segment {}", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Layout(format!(
                    "segment {} has shape {:?}",
                    s.name,
                    t.shape()
                )));
            }
            values[s.range()].copy_from_slice(t.data());
        }
        Self::new(values, layout)
    }

    /// SHA-256 over the little-endian value payload.
    pub fn content_hash(&self) -> String {
        format::sha256_hex(&format::f64s_to_le(&self.values))
    }

    pub fn ensure_same_layout(&self, other: &FlatParams) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::Layout(
                "parameter vectors use different layouts".into(),
            ));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    /// Multilayer perceptron.
    Mlp,
    /// Single-token transformer block.
    TxBlock,
    /// One affine layer, `logits = x·W + b`. Useful where exact linearity in
    /// the parameters is needed.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: ModelFamily,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Attention heads (tx_block only).
    #[serde(default = "one")]
    pub num_heads: usize,
    pub num_classes: usize,
    /// Hidden layers of the MLP backbone.
    #[serde(default = "one")]
    pub hidden_layers: usize,
    /// Number of per-task classification heads.
    #[serde(default = "one")]
    pub task_heads: usize,
    /// Hidden nonlinearity of the MLP backbone.
    #[serde(default)]
    pub activation: Activation,
    /// Initial value of the MLP hidden-layer biases. Negative values leave
    /// a share of units dormant at initialization.
    #[serde(default)]
    pub hidden_bias: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    #[default]
    Gelu,
}

impl ModelConfig {
    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            family: ModelFamily::Mlp,
            input_dim,
            hidden_dim,
            num_heads: 1,
            num_classes,
            hidden_layers: 1,
            task_heads: 1,
            activation: Activation::Gelu,
            hidden_bias: 0.0,
            seed: 0,
        }
    }

    pub fn tx_block(
        input_dim: usize,
        hidden_dim: usize,
        num_heads: usize,
        num_classes: usize,
    ) -> Self {
        ModelConfig {
            family: ModelFamily::TxBlock,
            num_heads,
            ..Self::mlp(input_dim, hidden_dim, num_classes)
        }
    }

    pub fn linear(input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            family: ModelFamily::Linear,
            ..Self::mlp(input_dim, 0, num_classes)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_task_heads(mut self, n: usize) -> Self {
        self.task_heads = n;
        self
    }

    pub fn with_hidden_layers(mut self, n: usize) -> Self {
        self.hidden_layers = n;
        self
    }

    pub fn with_activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.input_dim == 0 || self.num_classes == 0 || self.task_heads == 0 {
            return bad("input_dim, num_classes and task_heads must be positive");
        }
        match self.family {
            ModelFamily::Mlp if self.hidden_dim == 0 || self.hidden_layers == 0 => {
                bad("mlp needs hidden_dim > 0 and hidden_layers > 0")
            }
            ModelFamily::TxBlock if self.hidden_dim == 0 || self.num_heads == 0 => {
                bad("tx_block needs hidden_dim > 0 and num_heads > 0")
            }
            ModelFamily::TxBlock if !self.hidden_dim.is_multiple_of(self.num_heads) => {
                bad("tx_block hidden_dim must be divisible by num_heads")
            }
            _ => Ok(()),
        }
    }

    fn layout(&self) -> Layout {
        use LayerKind::*;
        let mut b = Layout::builder();
        let feat = match self.family {
            ModelFamily::Linear => {
                b.linear(
                    "linear",
                    self.input_dim,
                    self.num_classes,
                    LinearWeight,
                    LinearBias,
                );
                return b.finish();
            }
            ModelFamily::Mlp => {
                let mut inp = self.input_dim;
                for l in 0..self.hidden_layers {
                    b.linear(
                        &format!("fc{l}"),
                        inp,
                        self.hidden_dim,
                        LinearWeight,
                        LinearBias,
                    );
                    inp = self.hidden_dim;
                }
                self.hidden_dim
            }
            ModelFamily::TxBlock => {
                let h = self.hidden_dim;
                b.linear("embed", self.input_dim, h, Embedding, Embedding);
                b.push("ln1.scale", LayernormScale, vec![h]);
                b.push("ln1.bias", LayernormBias, vec![h]);
                b.linear("attn.q", h, h, AttentionQ, AttentionQ);
                b.linear("attn.k", h, h, AttentionK, AttentionK);
                b.linear("attn.v", h, h, AttentionV, AttentionV);
                b.linear("attn.out", h, h, AttentionOut, AttentionOut);
                b.push("ln2.scale", LayernormScale, vec![h]);
                b.push("ln2.bias", LayernormBias, vec![h]);
                b.linear("ffn.fc1", h, 2 * h, LinearWeight, LinearBias);
                b.linear("ffn.fc2", 2 * h, h, LinearWeight, LinearBias);
                h
            }
        };
        for t in 0..self.task_heads {
            b.linear(&format!("head{t}"), feat, self.num_classes, Head, Head);
        }
        b.finish()
    }
}

/// Graph nodes for every parameter segment, in layout order.
pub struct ParamBinding {
    nodes: Vec<NodeId>,
}

impl ParamBinding {
    /// Creates one leaf per segment. `tangent`, when given, seeds forward-mode
    /// derivatives along that direction in parameter space.
    pub fn bind(
        g: &mut Graph,
        params: &FlatParams,
        tangent: Option<&[f64]>,
        with_grad: bool,
    ) -> Result<Self> {
        if let Some(t) = tangent {
            if t.len() != params.len() {
                return Err(Error::Shape(format!(
                    "tangent of length {} for {} parameters",
                    t.len(),
                    params.len()
                )));
            }
        }
        let mut nodes = Vec::with_capacity(params.layout.segments().len());
        for s in params.layout.segments() {
            let value = Tensor::new(s.shape.clone(), params.values[s.range()].to_vec())?;
            let tan = tangent
                .map(|t| Tensor::new(s.shape.clone(), t[s.range()].to_vec()))
                .transpose()?;
            let id = if with_grad {
                g.param(value, tan)?
            } else {
                g.leaf(value, tan)?
            };
            nodes.push(id);
        }
        Ok(ParamBinding { nodes })
    }

    pub fn node(&self, segment_index: usize) -> NodeId {
        self.nodes[segment_index]
    }

    /// Collects segment adjoints into a flat gradient (zeros where none flowed).
    pub fn flat_grad(&self, grads: &Gradients, layout: &Layout) -> Vec<f64> {
        let mut out = vec![0.0; layout.m()];
        for (s, id) in layout.segments().iter().zip(&self.nodes) {
            if let Some(t) = grads.get(*id) {
                out[s.range()].copy_from_slice(t.data());
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layout: Arc<Layout>,
    head_segment: usize,
}

impl Model {
    /// Constructs the model and its deterministic seeded initialisation.
    pub fn build(config: ModelConfig) -> Result<(Model, FlatParams)> {
        let model = Model::from_config(config)?;
        let params = model.init_params();
        Ok((model, params))
    }

    /// Architecture only, no parameters.
    pub fn from_config(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let layout = config.layout();
        layout.validate()?;
        let head_segment = layout
            .segments()
            .iter()
            .position(|s| s.kind == LayerKind::Head)
            .unwrap_or(layout.segments().len());
        Ok(Model {
            config,
            layout: Arc::new(layout),
            head_segment,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn init_params(&self) -> FlatParams {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut values = vec![0.0; self.layout.m()];
        for s in self.layout.segments() {
            let is_weight = s.shape.len() == 2;
            let slot = &mut values[s.range()];
            if s.kind == LayerKind::LayernormScale {
                slot.iter_mut().for_each(|v| *v = 1.0);
            } else if self.config.family == ModelFamily::Mlp
                && s.kind == LayerKind::LinearBias
                && s.name.starts_with("fc")
            {
                slot.iter_mut().for_each(|v| *v = self.config.hidden_bias);
            } else if is_weight {
                let fan_in = s.shape[0] as f64;
                let gain = match (self.config.family, s.kind) {
                    (ModelFamily::Mlp, LayerKind::LinearWeight) => 2.0,
                    (ModelFamily::TxBlock, LayerKind::LinearWeight) => 2.0,
                    _ => 1.0,
                };
                let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
                slot.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
        }
        FlatParams::new(values, self.layout.clone()).expect("layout length")
    }

    fn check_head(&self, head: usize) -> Result<()> {
        if head >= self.config.task_heads {
            return Err(Error::Config(format!(
                "head {head} requested but model has {} task heads",
                self.config.task_heads
            )));
        }
        Ok(())
    }

    fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let h = g.matmul(x, w)?;
        g.add(h, b)
    }

    /// Records the forward pass on `g` and returns the logits node
    /// (`rows × num_classes`).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &ParamBinding,
        x: NodeId,
        head: usize,
    ) -> Result<NodeId> {
        self.check_head(head)?;
        let cols = g.value(x).cols();
        if g.value(x).shape().len() != 2 || cols != self.config.input_dim {
            return Err(Error::Shape(format!(
                "input of shape {:?} for input_dim {}",
                g.value(x).shape(),
                self.config.input_dim
            )));
        }
        let features = match self.config.family {
            ModelFamily::Linear => return Self::linear(g, x, p.node(0), p.node(1)),
            ModelFamily::Mlp => {
                let mut h = x;
                for l in 0..self.config.hidden_layers {
                    let z = Self::linear(g, h, p.node(2 * l), p.node(2 * l + 1))?;
                    h = match self.config.activation {
                        Activation::Relu => g.relu(z)?,
                        Activation::Gelu => g.gelu(z)?,
                    };
                }
                h
            }
            ModelFamily::TxBlock => self.tx_features(g, p, x)?,
        };
        let hs = self.head_segment + 2 * head;
        Self::linear(g, features, p.node(hs), p.node(hs + 1))
    }

    fn tx_features(&self, g: &mut Graph, p: &ParamBinding, x: NodeId) -> Result<NodeId> {
        let h = self.config.hidden_dim;
        let heads = self.config.num_heads;
        let dh = h / heads;
        // segment indices follow the layout order in `ModelConfig::layout`
        let h0 = Self::linear(g, x, p.node(0), p.node(1))?;
        let n1 = g.layer_norm(h0)?;
        let n1 = g.mul(n1, p.node(2))?;
        let n1 = g.add(n1, p.node(3))?;
        let q = Self::linear(g, n1, p.node(4), p.node(5))?;
        let k = Self::linear(g, n1, p.node(6), p.node(7))?;
        let v = Self::linear(g, n1, p.node(8), p.node(9))?;

        let ones_col = g.constant(Tensor::matrix(dh, 1, vec![1.0; dh])?)?;
        let ones_row = g.constant(Tensor::matrix(1, dh, vec![1.0; dh])?)?;
        let scale = g.constant(Tensor::scalar(1.0 / (dh as f64).sqrt()))?;
        let mut ctx: Option<NodeId> = None;
        for hd in 0..heads {
            // column selectors for this head
            let mut sel = vec![0.0; h * dh];
            let mut sel_t = vec![0.0; dh * h];
            for c in 0..dh {
                sel[(hd * dh + c) * dh + c] = 1.0;
                sel_t[c * h + hd * dh + c] = 1.0;
            }
            let sel = g.constant(Tensor::matrix(h, dh, sel)?)?;
            let sel_t = g.constant(Tensor::matrix(dh, h, sel_t)?)?;
            let qh = g.matmul(q, sel)?;
            let kh = g.matmul(k, sel)?;
            let vh = g.matmul(v, sel)?;
            let qk = g.mul(qh, kh)?;
            let score = g.matmul(qk, ones_col)?;
            let score = g.mul(score, scale)?;
            // one key per query: softmax over a single column
            let attn = g.softmax(score)?;
            let attn = g.matmul(attn, ones_row)?;
            let out = g.mul(attn, vh)?;
            let out = g.matmul(out, sel_t)?;
            ctx = Some(match ctx {
                None => out,
                Some(c) => g.add(c, out)?,
            });
        }
        let ctx = ctx.expect("at least one head");
        let o = Self::linear(g, ctx, p.node(10), p.node(11))?;
        let h1 = g.add(h0, o)?;
        let n2 = g.layer_norm(h1)?;
        let n2 = g.mul(n2, p.node(12))?;
        let n2 = g.add(n2, p.node(13))?;
        let f = Self::linear(g, n2, p.node(14), p.node(15))?;
        let f = g.gelu(f)?;
        let f = Self::linear(g, f, p.node(16), p.node(17))?;
        g.add(h1, f)
    }

    fn input_node(&self, g: &mut Graph, inputs: &[f64]) -> Result<NodeId> {
        let d = self.config.input_dim;
        if !inputs.len().is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "{} input values are not a multiple of input_dim {d}",
                inputs.len()
            )));
        }
        g.constant(Tensor::matrix(inputs.len() / d, d, inputs.to_vec())?)
    }

    /// Logits for a row-major batch of inputs.
    pub fn forward(&self, params: &FlatParams, inputs: &[f64], head: usize) -> Result<Tensor> {
        self.ensure_layout(params)?;
        let mut g = Graph::new();
        let p = ParamBinding::bind(&mut g, params, None, false)?;
        let x = self.input_node(&mut g, inputs)?;
        let out = self.forward_graph(&mut g, &p, x, head)?;
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, params: &FlatParams, inputs: &[f64], head: usize) -> Result<Vec<usize>> {
        let logits = self.forward(params, inputs, head)?;
        Ok(argmax_rows(&logits))
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_grad(
        &self,
        params: &FlatParams,
        inputs: &[f64],
        labels: &[usize],
        head: usize,
    ) -> Result<(f64, Vec<f64>)> {
        self.ensure_layout(params)?;
        let mut g = Graph::new();
        let p = ParamBinding::bind(&mut g, params, None, true)?;
        let x = self.input_node(&mut g, inputs)?;
        let logits = self.forward_graph(&mut g, &p, x, head)?;
        let loss = g.cross_entropy(logits, labels)?;
        let grads = g.backward_scalar(loss)?;
        Ok((
            g.value(loss).item().unwrap(),
            p.flat_grad(&grads, &self.layout),
        ))
    }

    /// Directional derivative of the logits along `tangent` in parameter
    /// space, evaluated at `params`. Shape `rows × num_classes`.
    pub fn jvp(
        &self,
        params: &FlatParams,
        tangent: &[f64],
        inputs: &[f64],
        head: usize,
    ) -> Result<Tensor> {
        Ok(self.forward_with_tangent(params, tangent, inputs, head)?.1)
    }

    /// Logits and their tangent in one dual pass.
    pub fn forward_with_tangent(
        &self,
        params: &FlatParams,
        tangent: &[f64],
        inputs: &[f64],
        head: usize,
    ) -> Result<(Tensor, Tensor)> {
        self.ensure_layout(params)?;
        let mut g = Graph::new();
        let p = ParamBinding::bind(&mut g, params, Some(tangent), false)?;
        let x = self.input_node(&mut g, inputs)?;
        let out = self.forward_graph(&mut g, &p, x, head)?;
        let value = g.value(out).clone();
        let tan = g
            .tangent(out)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(value.shape()));
        Ok((value, tan))
    }

    /// Gradient of every logit of a single example: `num_classes` rows of
    /// length `m`.
    pub fn logit_jacobian(
        &self,
        params: &FlatParams,
        input: &[f64],
        head: usize,
    ) -> Result<Vec<Vec<f64>>> {
        if input.len() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "expected one input of dim {}",
                self.config.input_dim
            )));
        }
        self.ensure_layout(params)?;
        let mut g = Graph::new();
        let p = ParamBinding::bind(&mut g, params, None, true)?;
        let x = self.input_node(&mut g, input)?;
        let out = self.forward_graph(&mut g, &p, x, head)?;
        let c = self.config.num_classes;
        (0..c)
            .map(|k| {
                let mut seed = vec![0.0; c];
                seed[k] = 1.0;
                let grads = g.backward(out, &Tensor::matrix(1, c, seed)?)?;
                Ok(p.flat_grad(&grads, &self.layout))
            })
            .collect()
    }

    pub fn ensure_layout(&self, params: &FlatParams) -> Result<()> {
        if **params.layout() != *self.layout {
            return Err(Error::Layout(
                "parameters do not match the model layout".into(),
            ));
        }
        Ok(())
    }
}

/// Row-wise argmax; ties resolve to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.cols();
    if c == 0 {
        return Vec::new();
    }
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    layout: Layout,
    content_hash: String,
}

pub fn save_checkpoint(path: &Path, model: &Model, params: &FlatParams) -> Result<()> {
    model.ensure_layout(params)?;
    let header = CheckpointHeader {
        config: model.config.clone(),
        layout: (*model.layout).clone(),
        content_hash: params.content_hash(),
    };
    format::write_file(
        path,
        CHECKPOINT_MAGIC,
        &header,
        &format::f64s_to_le(&params.values),
    )
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, FlatParams)> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, FlatParams)> {
    let (header, payload): (CheckpointHeader, _) = format::decode(CHECKPOINT_MAGIC, bytes)?;
    let model = Model::from_config(header.config)?;
    if *model.layout != header.layout {
        return Err(Error::Format(
            "stored layout disagrees with the stored config".into(),
        ));
    }
    let values = format::le_to_f64s(payload)?;
    let params =
        FlatParams::new(values, model.layout.clone()).map_err(|e| Error::Format(e.to_string()))?;
    if params.content_hash() != header.content_hash {
        return Err(Error::Format("checkpoint content hash mismatch".into()));
    }
    Ok((model, params))
}
