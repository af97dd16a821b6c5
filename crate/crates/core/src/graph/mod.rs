//! The MedNet topology: stem, eight parallel-branch blocks, twelve additive
//! skip connections and a GAP/FC classification head, executed as a DAG.

mod config;
mod summary;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

pub use config::{
    canonical_connections, BlockSpec, Connection, Endpoint, MedNetConfig, Projection, StemConv, Variant,
    BRANCH_KERNELS, MEDNET_BLOCKS, MEDNET_CONNECTIONS, MEDNET_CONV_LAYERS,
};
pub use summary::{Summary, SummaryRow};

use crate::error::{Error, Result};
use crate::layers::{ConvSpec, Layer, LayerKind, Mode, Param, ParamRole};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// Coarse position of a node, used for freezing prefixes of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Input,
    Stem,
    Block(usize),
    Head,
}

impl Stage {
    /// Monotone position along the network: input 0, stem 1, block k is
    /// k + 1, head last.
    pub fn depth(self) -> usize {
        match self {
            Stage::Input => 0,
            Stage::Stem => 1,
            Stage::Block(k) => k + 1,
            Stage::Head => usize::MAX,
        }
    }
}

#[derive(Debug, Clone)]
pub enum NodeOp<T> {
    Input,
    Layer(Layer<T>),
}

#[derive(Debug, Clone)]
pub struct Node<T> {
    pub name: String,
    pub stage: Stage,
    pub op: NodeOp<T>,
    pub inputs: Vec<usize>,
    /// Output shape at batch size 1.
    pub shape: Vec<usize>,
    frozen: bool,
}

impl<T: Element> Node<T> {
    pub fn layer(&self) -> Option<&Layer<T>> {
        match &self.op {
            NodeOp::Layer(l) => Some(l),
            NodeOp::Input => None,
        }
    }

    pub fn layer_mut(&mut self) -> Option<&mut Layer<T>> {
        match &mut self.op {
            NodeOp::Layer(l) => Some(l),
            NodeOp::Input => None,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn param_count(&self) -> usize {
        self.layer().map_or(0, Layer::param_count)
    }

    fn has_learnable(&self) -> bool {
        self.layer()
            .is_some_and(|l| l.params().iter().any(|(_, p)| p.role == ParamRole::Learnable))
    }
}

/// A skip edge as realised in the graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkipEdge {
    pub from: Endpoint,
    pub to: usize,
    pub short: bool,
    /// Name of the 1×1 projection conv, if any.
    pub projection: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct ModelGraph<T> {
    config: MedNetConfig,
    nodes: Vec<Node<T>>,
    index: HashMap<String, usize>,
    topo: Vec<usize>,
    mode: Mode,
    skips: Vec<SkipEdge>,
    detached: HashSet<usize>,
}

/// Validates the configuration and assembles the canonical graph.
pub fn build_mednet<T: Element>(config: &MedNetConfig, rng: &mut Rng) -> Result<ModelGraph<T>> {
    config.validate()?;
    ModelGraph::assemble(config, rng)
}

pub fn count_conv_layers<T: Element>(graph: &ModelGraph<T>) -> usize {
    graph.count_conv_layers()
}

struct Builder<'a, T> {
    graph: ModelGraph<T>,
    rng: &'a mut Rng,
}

impl<T: Element> Builder<'_, T> {
    fn add(&mut self, name: String, stage: Stage, kind: LayerKind, inputs: Vec<usize>) -> Result<usize> {
        let layer = Layer::from_kind(&kind, self.rng)?;
        let shapes: Vec<&[usize]> = inputs.iter().map(|&i| self.graph.nodes[i].shape.as_slice()).collect();
        let shape = layer
            .output_shape(&shapes)
            .map_err(|e| Error::InvalidConfig(format!("node {name}: {e}")))?;
        self.push(Node { name, stage, op: NodeOp::Layer(layer), inputs, shape, frozen: false })
    }

    fn push(&mut self, node: Node<T>) -> Result<usize> {
        let id = self.graph.nodes.len();
        if self.graph.index.insert(node.name.clone(), id).is_some() {
            return Err(Error::InvalidConfig(format!("duplicate node name {}", node.name)));
        }
        self.graph.nodes.push(node);
        self.graph.topo.push(id);
        Ok(id)
    }

    fn channels(&self, id: usize) -> usize {
        *self.graph.nodes[id].shape.last().unwrap()
    }

    /// conv (no bias) → BN, optionally → ReLU. Returns the last node.
    fn conv_bn(&mut self, prefix: &str, stage: Stage, spec: ConvSpec, input: usize, relu: bool) -> Result<usize> {
        let cfg = &self.graph.config;
        let bn = LayerKind::BatchNorm2d { channels: spec.out_channels, epsilon: cfg.bn_epsilon, momentum: cfg.bn_momentum };
        let c = self.add(format!("{prefix}.conv"), stage, LayerKind::Conv2d(spec.with_bias(false)), vec![input])?;
        let b = self.add(format!("{prefix}.bn"), stage, bn, vec![c])?;
        if relu {
            self.add(format!("{prefix}.relu"), stage, LayerKind::Relu, vec![b])
        } else {
            Ok(b)
        }
    }
}

impl<T: Element> ModelGraph<T> {
    /// Wires the graph described by `config` without enforcing the canonical
    /// layer counts (only structural soundness). Useful for reduced or
    /// deliberately non-canonical variants; [`build_mednet`] is the checked
    /// entry point.
    pub fn assemble(config: &MedNetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate_wiring()?;
        let mut b = Self::start(config, rng)?;
        let stem_out = Self::add_stem(&mut b)?;

        let mut endpoints = vec![stem_out];
        for k in 1..=config.blocks.len() {
            let block = &config.blocks[k - 1];
            let input = endpoints[k - 1];
            let in_c = b.channels(input);
            let stage = Stage::Block(k);
            let mut branches = Vec::with_capacity(block.branch_kernels.len());
            for &kernel in &block.branch_kernels {
                let spec = ConvSpec::square(kernel, block.stride, in_c, block.per_branch_channels);
                branches.push(b.conv_bn(&format!("block{k}.branch{kernel}x{kernel}"), stage, spec, input, true)?);
            }
            let concat = b.add(format!("block{k}.concat"), stage, LayerKind::Concat, branches)?;

            let incoming: Vec<&Connection> = config.connections.iter().filter(|c| c.to == k).collect();
            if incoming.is_empty() {
                endpoints.push(concat);
                continue;
            }
            let mut terms = vec![concat];
            for c in incoming {
                let src = endpoints[c.from.index()];
                let kind = if c.is_short() { "short" } else { "long" };
                let label = format!("skip.{kind}.{}_to_block{k}", c.from.label());
                let projection = match c.projection {
                    Projection::Identity => {
                        terms.push(src);
                        None
                    }
                    Projection::Conv1x1 => {
                        let spec = ConvSpec::square(1, config.connection_stride(c), b.channels(src), b.channels(concat));
                        terms.push(b.conv_bn(&label, stage, spec, src, false)?);
                        Some(format!("{label}.conv"))
                    }
                };
                b.graph.skips.push(SkipEdge { from: c.from, to: k, short: c.is_short(), projection });
            }
            endpoints.push(b.add(format!("block{k}.add"), stage, LayerKind::Add, terms)?);
        }

        let features = *endpoints.last().unwrap();
        let width = b.channels(features);
        let h = Stage::Head;
        let gap = b.add("head.gap".into(), h, LayerKind::GlobalAvgPool, vec![features])?;
        let fc1 = b.add(
            "head.fc1".into(),
            h,
            LayerKind::FullyConnected { in_features: width, out_features: config.fc1_width },
            vec![gap],
        )?;
        let relu = b.add("head.relu".into(), h, LayerKind::Relu, vec![fc1])?;
        let drop = b.add("head.dropout".into(), h, LayerKind::Dropout { rate: config.dropout_rate }, vec![relu])?;
        let fc2 = b.add(
            "head.fc2".into(),
            h,
            LayerKind::FullyConnected { in_features: config.fc1_width, out_features: config.num_classes },
            vec![drop],
        )?;
        b.add("head.softmax".into(), h, LayerKind::SoftmaxOutput, vec![fc2])?;
        Ok(b.graph)
    }

    /// Input plus the two stem convolutions only; a debugging aid with no head.
    pub fn stem_only(config: &MedNetConfig, rng: &mut Rng) -> Result<Self> {
        let mut b = Self::start(config, rng)?;
        Self::add_stem(&mut b)?;
        Ok(b.graph)
    }

    fn start<'a>(config: &MedNetConfig, rng: &'a mut Rng) -> Result<Builder<'a, T>> {
        let graph = ModelGraph {
            config: config.clone(),
            nodes: Vec::new(),
            index: HashMap::new(),
            topo: Vec::new(),
            mode: Mode::Train,
            skips: Vec::new(),
            detached: HashSet::new(),
        };
        let mut b = Builder { graph, rng };
        b.push(Node {
            name: "input".into(),
            stage: Stage::Input,
            op: NodeOp::Input,
            inputs: Vec::new(),
            shape: vec![1, config.input_h, config.input_w, config.input_channels],
            frozen: false,
        })?;
        Ok(b)
    }

    fn add_stem(b: &mut Builder<'_, T>) -> Result<usize> {
        let mut cur = 0;
        let stem = b.graph.config.stem.clone();
        for (i, s) in stem.iter().enumerate() {
            let spec = ConvSpec::square(s.kernel, s.stride, b.channels(cur), s.out_channels);
            cur = b.conv_bn(&format!("stem.conv{}", i + 1), Stage::Stem, spec, cur, true)?;
        }
        Ok(cur)
    }

    pub fn config(&self) -> &MedNetConfig {
        &self.config
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    pub fn node(&self, name: &str) -> Option<&Node<T>> {
        self.index.get(name).map(|&i| &self.nodes[i])
    }

    pub fn node_mut(&mut self, name: &str) -> Option<&mut Node<T>> {
        self.index.get(name).map(|&i| &mut self.nodes[i])
    }

    pub fn skip_edges(&self) -> &[SkipEdge] {
        &self.skips
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn count_conv_layers(&self) -> usize {
        self.nodes.iter().filter(|n| n.layer().is_some_and(Layer::is_conv)).count()
    }

    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(Node::param_count).sum()
    }

    /// All parameters as `(node.param, value)` in node order.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let Some(l) = n.layer() {
                for (pname, p) in l.params() {
                    out.push((format!("{}.{pname}", n.name), p));
                }
            }
        }
        out
    }

    pub fn param(&self, full_name: &str) -> Option<&Param<T>> {
        let (node, pname) = full_name.rsplit_once('.')?;
        let layer = self.node(node)?.layer()?;
        layer.params().into_iter().find(|(n, _)| *n == pname).map(|(_, p)| p)
    }

    pub fn param_mut(&mut self, full_name: &str) -> Option<&mut Param<T>> {
        let (node, pname) = full_name.rsplit_once('.')?;
        let layer = self.node_mut(node)?.layer_mut()?;
        layer.params_mut().into_iter().find(|(n, _)| *n == pname).map(|(_, p)| p)
    }

    /// Visits every parameter the optimizer may update: learnable and not in
    /// a frozen node.
    pub fn for_each_trainable(&mut self, mut f: impl FnMut(&str, &mut Param<T>)) {
        for n in &mut self.nodes {
            if n.frozen {
                continue;
            }
            let name = n.name.clone();
            if let NodeOp::Layer(l) = &mut n.op {
                for (pname, p) in l.params_mut() {
                    if p.role == ParamRole::Learnable {
                        f(&format!("{name}.{pname}"), p);
                    }
                }
            }
        }
    }

    /// Freezes (or unfreezes) a node's parameters. Frozen batch-norm layers
    /// also stop updating and using batch statistics.
    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let node = self
            .node_mut(name)
            .ok_or_else(|| Error::InvalidConfig(format!("no node named {name}")))?;
        node.frozen = frozen;
        if let NodeOp::Layer(Layer::BatchNorm2d(bn)) = &mut node.op {
            bn.set_frozen(frozen);
        }
        Ok(())
    }

    /// Names of parameters that the optimizer will not touch.
    pub fn frozen_params(&self) -> Vec<String> {
        let mut out = Vec::new();
        for n in self.nodes.iter().filter(|n| n.frozen) {
            for (pname, _) in n.layer().map(Layer::params).unwrap_or_default() {
                out.push(format!("{}.{pname}", n.name));
            }
        }
        out
    }

    /// Stops gradient flow through a node: backward treats its incoming
    /// gradient as zero.
    pub fn set_detached(&mut self, name: &str, detached: bool) -> Result<()> {
        let id = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("no node named {name}")))?;
        if detached {
            self.detached.insert(id);
        } else {
            self.detached.remove(&id);
        }
        Ok(())
    }

    /// Replaces the layer held by a node, checking that its output shape is
    /// unchanged downstream. Used for head surgery.
    pub fn replace_layer(&mut self, name: &str, layer: Layer<T>) -> Result<()> {
        let id = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidConfig(format!("no node named {name}")))?;
        let shapes: Vec<Vec<usize>> = self.nodes[id].inputs.iter().map(|&i| self.nodes[i].shape.clone()).collect();
        let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
        let shape = layer.output_shape(&refs)?;
        self.nodes[id].op = NodeOp::Layer(layer);
        self.nodes[id].shape = shape;
        self.nodes[id].frozen = false;
        // Re-propagate shapes of everything after it.
        for &j in &self.topo.clone() {
            if j <= id {
                continue;
            }
            let shapes: Vec<Vec<usize>> = self.nodes[j].inputs.iter().map(|&i| self.nodes[i].shape.clone()).collect();
            let refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
            if let Some(l) = self.nodes[j].layer() {
                self.nodes[j].shape = l.output_shape(&refs)?;
            }
        }
        Ok(())
    }

    pub(crate) fn config_mut(&mut self) -> &mut MedNetConfig {
        &mut self.config
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let expect = &self.nodes[0].shape[1..];
        if x.rank() != 4 || &x.shape()[1..] != expect {
            let mut want = vec![x.shape().first().copied().unwrap_or(0)];
            want.extend_from_slice(expect);
            return Err(Error::ShapeMismatch { op: "model input", left: x.shape().to_vec(), right: want });
        }
        Ok(())
    }

    fn head_ids(&self) -> Result<(usize, usize)> {
        let out = *self.topo.last().unwrap();
        match self.nodes[out].layer() {
            Some(Layer::SoftmaxOutput(_)) => Ok((self.nodes[out].inputs[0], out)),
            _ => Err(Error::InvalidConfig("graph has no softmax output head".into())),
        }
    }

    /// For each node, the topo position after which its output is no longer
    /// needed during forward.
    fn last_use(&self) -> Vec<usize> {
        let mut last = vec![0; self.nodes.len()];
        for (pos, &id) in self.topo.iter().enumerate() {
            last[id] = last[id].max(pos);
            for &p in &self.nodes[id].inputs {
                last[p] = last[p].max(pos);
            }
        }
        last
    }

    fn wiring(&self) -> Wiring {
        Wiring {
            topo: self.topo.clone(),
            inputs: self.nodes.iter().map(|n| n.inputs.clone()).collect(),
            last_use: self.last_use(),
        }
    }

    fn outputs(&self, mut acts: Vec<Option<Tensor<T>>>) -> Result<ForwardOutput<T>> {
        let (logits, probs) = self.head_ids()?;
        Ok(ForwardOutput { logits: acts[logits].take().unwrap(), probs: acts[probs].take().unwrap() })
    }

    fn non_finite(&self, id: usize) -> Error {
        Error::NonFinite(format!("node {}", self.nodes[id].name))
    }

    /// Eval-mode forward through `&self`; a pure function of weights and input.
    pub fn infer(&self, x: &Tensor<T>) -> Result<ForwardOutput<T>> {
        self.check_input(x)?;
        let (logits, _) = self.head_ids()?;
        let acts = self
            .wiring()
            .run(x, logits, |id, inputs| match &self.nodes[id].op {
                NodeOp::Layer(l) => l.infer(inputs),
                NodeOp::Input => Ok(x.clone()),
            })
            .map_err(|e| e.into_error(|id| self.non_finite(id)))?;
        self.outputs(acts)
    }

    /// Forward in the graph's current mode. Train mode populates the caches
    /// used by [`ModelGraph::backward`] and updates batch-norm running stats.
    pub fn forward(&mut self, x: &Tensor<T>, rng: &mut Rng) -> Result<ForwardOutput<T>> {
        if self.mode == Mode::Eval {
            return self.infer(x);
        }
        self.check_input(x)?;
        let (logits, _) = self.head_ids()?;
        let wiring = self.wiring();
        let nodes = &mut self.nodes;
        let acts = wiring.run(x, logits, |id, inputs| match &mut nodes[id].op {
            NodeOp::Layer(l) => l.forward(inputs, Mode::Train, rng),
            NodeOp::Input => Ok(x.clone()),
        });
        let acts = acts.map_err(|e| e.into_error(|id| self.non_finite(id)))?;
        self.outputs(acts)
    }

    /// Whether each node needs a backward pass: it (or something upstream of
    /// it) holds trainable parameters.
    fn requires_grad(&self) -> Vec<bool> {
        let mut req = vec![false; self.nodes.len()];
        for &id in &self.topo {
            let n = &self.nodes[id];
            req[id] = (!n.frozen && n.has_learnable()) || n.inputs.iter().any(|&p| req[p]);
        }
        req
    }

    /// Backpropagates the gradient of the loss w.r.t. the logits, filling
    /// every trainable parameter's gradient. Gradients reaching a node along
    /// several paths are summed. Frozen prefixes are skipped entirely.
    pub fn backward(&mut self, grad_logits: &Tensor<T>) -> Result<()> {
        let (_, out) = self.head_ids()?;
        let req = self.requires_grad();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[out] = Some(grad_logits.clone());
        for &id in self.topo.iter().rev() {
            let Some(mut g) = grads[id].take() else { continue };
            if !req[id] {
                continue;
            }
            if self.detached.contains(&id) {
                g = Tensor::zeros(g.shape());
            }
            let inputs = self.nodes[id].inputs.clone();
            let need_input = inputs.iter().any(|&p| req[p]);
            let NodeOp::Layer(layer) = &mut self.nodes[id].op else { continue };
            let input_grads = layer.backward(&g, need_input)?;
            if !need_input {
                continue;
            }
            for (&p, ig) in inputs.iter().zip(input_grads) {
                if !req[p] {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&ig)?,
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }

    /// Drops every forward cache and parameter gradient.
    pub fn clear(&mut self) {
        for n in &mut self.nodes {
            if let NodeOp::Layer(l) = &mut n.op {
                l.clear_cache();
                for (_, p) in l.params_mut() {
                    p.grad = None;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            if let NodeOp::Layer(l) = &mut n.op {
                for (_, p) in l.params_mut() {
                    p.grad = None;
                }
            }
        }
    }

    /// Symbolic shape table at the given batch size.
    pub fn summary(&self, batch: usize) -> Summary {
        Summary::of(self, batch)
    }
}

enum RunError {
    Layer(Error),
    NonFinite(usize),
}

impl RunError {
    fn into_error(self, non_finite: impl FnOnce(usize) -> Error) -> Error {
        match self {
            RunError::Layer(e) => e,
            RunError::NonFinite(id) => non_finite(id),
        }
    }
}

/// Graph connectivity detached from the layers, so execution can borrow
/// layers mutably while walking the wiring.
struct Wiring {
    topo: Vec<usize>,
    inputs: Vec<Vec<usize>>,
    last_use: Vec<usize>,
}

impl Wiring {
    /// Runs `step` over nodes in topological order, freeing activations once
    /// their last consumer has run (except `keep`).
    fn run<T: Element>(
        &self,
        x: &Tensor<T>,
        keep: usize,
        mut step: impl FnMut(usize, &[&Tensor<T>]) -> Result<Tensor<T>>,
    ) -> std::result::Result<Vec<Option<Tensor<T>>>, RunError> {
        let mut acts: Vec<Option<Tensor<T>>> = vec![None; self.inputs.len()];
        for (pos, &id) in self.topo.iter().enumerate() {
            let y = if self.inputs[id].is_empty() {
                x.clone()
            } else {
                let inputs: Vec<&Tensor<T>> = self.inputs[id].iter().map(|&i| acts[i].as_ref().unwrap()).collect();
                step(id, &inputs).map_err(RunError::Layer)?
            };
            if !y.is_finite() {
                return Err(RunError::NonFinite(id));
            }
            acts[id] = Some(y);
            for &p in &self.inputs[id] {
                if self.last_use[p] == pos && p != keep {
                    acts[p] = None;
                }
            }
        }
        Ok(acts)
    }
}
