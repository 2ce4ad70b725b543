use std::collections::BTreeMap;

use rand::RngCore;

use crate::error::{Error, Result};
use crate::models::arch::Architecture;
use crate::nn::{init_params, Activation, LayerSpec, ParamSet, ShapedLayer};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::{Real, Tensor};

/// Variance epsilon of every batch-normalization layer.
pub const BN_EPS: f64 = 1e-3;
/// Weight of the old running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub spec: LayerSpec,
    pub inputs: Vec<usize>,
}

/// How the output layer is read and scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// One sigmoid unit scored with binary cross-entropy.
    Sigmoid,
    /// `k` softmax units scored with categorical cross-entropy.
    Softmax(usize),
    /// Feature extractor without a classifier.
    Features,
}

pub enum Mode<'a> {
    Train(&'a mut dyn RngCore),
    Infer,
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub struct BnUpdate<T> {
    pub layer: String,
    pub stats: BatchStats<T>,
}

pub struct ForwardPass<T> {
    pub output: Var,
    pub taps: Vec<Var>,
    /// One var per graph node, in node order.
    pub nodes: Vec<Var>,
    pub params: BTreeMap<String, Var>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

/// Accumulates layer nodes before shapes are resolved.
pub struct GraphBuilder {
    input_shape: [usize; 3],
    nodes: Vec<LayerNode>,
}

impl GraphBuilder {
    pub fn new(input_shape: [usize; 3]) -> Self {
        GraphBuilder {
            input_shape,
            nodes: vec![LayerNode {
                name: "input".into(),
                spec: LayerSpec::Input,
                inputs: Vec::new(),
            }],
        }
    }

    pub fn input(&self) -> usize {
        0
    }

    pub fn add(&mut self, name: impl Into<String>, spec: LayerSpec, inputs: &[usize]) -> usize {
        self.nodes.push(LayerNode {
            name: name.into(),
            spec,
            inputs: inputs.to_vec(),
        });
        self.nodes.len() - 1
    }

    /// Appends a single-input layer after `from`.
    pub fn then(&mut self, from: usize, name: impl Into<String>, spec: LayerSpec) -> usize {
        self.add(name, spec, &[from])
    }

    pub fn finish<T: Real>(
        self,
        arch: Architecture,
        output: usize,
        taps: Vec<usize>,
        head: Head,
        l2_lambda: f64,
        seed: u64,
    ) -> Result<ModelGraph<T>> {
        let shapes = infer_shapes(&self.nodes, self.input_shape)?;
        if output >= self.nodes.len() {
            return Err(Error::config(format!("output node {output} does not exist")));
        }
        if let Some(&t) = taps.iter().find(|&&t| t >= self.nodes.len()) {
            return Err(Error::config(format!("tap point {t} does not exist")));
        }
        let width = shapes[output].iter().product::<usize>();
        match head {
            Head::Sigmoid if width != 1 => {
                return Err(Error::config(format!("sigmoid head needs width 1, got {width}")))
            }
            Head::Softmax(k) if width != k => {
                return Err(Error::config(format!("softmax head needs width {k}, got {width}")))
            }
            _ => {}
        }
        let mut names = std::collections::BTreeSet::new();
        for n in &self.nodes {
            if !names.insert(n.name.as_str()) {
                return Err(Error::config(format!("duplicate layer name `{}`", n.name)));
            }
        }
        let layers: Vec<ShapedLayer<'_>> = self
            .nodes
            .iter()
            .skip(1)
            .map(|n| ShapedLayer {
                name: &n.name,
                spec: &n.spec,
                input_shape: &shapes[n.inputs[0]],
            })
            .collect();
        let params = init_params(&layers, seed)?;
        Ok(ModelGraph {
            arch,
            input_shape: self.input_shape,
            nodes: self.nodes,
            shapes,
            params,
            taps,
            output,
            head,
            l2_lambda,
        })
    }
}

fn infer_shapes(nodes: &[LayerNode], input: [usize; 3]) -> Result<Vec<Vec<usize>>> {
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(nodes.len());
    for (i, node) in nodes.iter().enumerate() {
        if i == 0 {
            shapes.push(input.to_vec());
            continue;
        }
        if node.inputs.is_empty() {
            return Err(Error::config(format!("layer `{}` has no inputs", node.name)));
        }
        if let Some(&j) = node.inputs.iter().find(|&&j| j >= i) {
            return Err(Error::config(format!(
                "layer `{}` reads node {j}, which does not precede it",
                node.name
            )));
        }
        let ins: Vec<&[usize]> = node.inputs.iter().map(|&j| shapes[j].as_slice()).collect();
        let shape = node.spec.output_shape(&ins).map_err(|e| match e {
            Error::Shape(m) => Error::Shape(format!("layer `{}`: {m}", node.name)),
            other => other,
        })?;
        shapes.push(shape);
    }
    Ok(shapes)
}

/// An executable layer DAG with its parameters.
#[derive(Clone, Debug)]
pub struct ModelGraph<T: Real = f32> {
    arch: Architecture,
    input_shape: [usize; 3],
    nodes: Vec<LayerNode>,
    shapes: Vec<Vec<usize>>,
    params: ParamSet<T>,
    taps: Vec<usize>,
    output: usize,
    head: Head,
    l2_lambda: f64,
}

impl<T: Real> ModelGraph<T> {
    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn nodes(&self) -> &[LayerNode] {
        &self.nodes
    }

    /// Declared per-sample output shape of node `i`.
    pub fn node_shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamSet<T>) {
        self.params = params;
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn output_node(&self) -> usize {
        self.output
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn l2_lambda(&self) -> f64 {
        self.l2_lambda
    }

    /// Number of classes scored by the head (2 for a sigmoid head).
    pub fn num_classes(&self) -> usize {
        match self.head {
            Head::Sigmoid => 2,
            Head::Softmax(k) => k,
            Head::Features => 0,
        }
    }

    pub fn has_batchnorm(&self) -> bool {
        self.nodes.iter().any(|n| n.spec == LayerSpec::BatchNorm)
    }

    /// Filter counts of every conv layer in node order.
    pub fn conv_filters(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .filter_map(|n| match n.spec {
                LayerSpec::Conv { filters, .. } => Some(filters),
                _ => None,
            })
            .collect()
    }

    /// Puts every parameter on the tape. Optimizer-updated tensors get
    /// `requires_grad = trainable`; running statistics never do.
    pub fn register_params(&self, tape: &mut Tape<T>, trainable: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(name, p)| {
                let grad = trainable && p.role.trainable();
                (name.clone(), tape.leaf(p.value.clone(), grad))
            })
            .collect()
    }

    /// Runs the graph over an `[N, H, W, C]` batch already on the tape.
    pub fn forward(&self, tape: &mut Tape<T>, input: Var, mode: &mut Mode<'_>) -> Result<ForwardPass<T>> {
        let shape = tape.value(input).shape();
        if shape.len() != 4 || shape[1..] != self.input_shape {
            return Err(Error::shape(format!(
                "model expects [N, {}, {}, {}] input, got {shape:?}",
                self.input_shape[0], self.input_shape[1], self.input_shape[2]
            )));
        }
        let params = self.register_params(tape, mode.is_train());
        let param = |layer: &str, slot: &str| -> Result<Var> {
            params
                .get(&format!("{layer}.{slot}"))
                .copied()
                .ok_or_else(|| Error::config(format!("missing parameter `{layer}.{slot}`")))
        };
        let mut vals: Vec<Var> = Vec::with_capacity(self.nodes.len());
        let mut bn_updates = Vec::new();
        for node in &self.nodes {
            let ins: Vec<Var> = node.inputs.iter().map(|&j| vals[j]).collect();
            let name = node.name.as_str();
            let v = match node.spec {
                LayerSpec::Input => input,
                LayerSpec::Conv {
                    stride, padding, ..
                } => tape.conv2d(
                    ins[0],
                    param(name, "kernel")?,
                    param(name, "bias")?,
                    stride,
                    padding,
                )?,
                LayerSpec::MaxPool { window, stride } => tape.maxpool2d(ins[0], window, stride)?,
                LayerSpec::AvgPool { window, stride } => tape.avgpool2d(ins[0], window, stride)?,
                LayerSpec::Dense { .. } => {
                    tape.dense(ins[0], param(name, "kernel")?, param(name, "bias")?)?
                }
                LayerSpec::BatchNorm => {
                    let (g, b) = (param(name, "gamma")?, param(name, "beta")?);
                    match mode {
                        Mode::Train(_) => {
                            let (v, stats) = tape
                                .batchnorm_train(ins[0], g, b, BN_EPS)
                                .map_err(|e| locate(e, name))?;
                            bn_updates.push(BnUpdate {
                                layer: node.name.clone(),
                                stats,
                            });
                            v
                        }
                        Mode::Infer => {
                            let mean = self.params.tensor(&format!("{name}.moving_mean"))?;
                            let var = self.params.tensor(&format!("{name}.moving_var"))?;
                            tape.batchnorm_infer(ins[0], g, b, mean.data(), var.data(), BN_EPS)?
                        }
                    }
                }
                LayerSpec::Dropout { rate } => match mode {
                    Mode::Train(rng) => tape.dropout(ins[0], rate, &mut **rng)?,
                    Mode::Infer => ins[0],
                },
                LayerSpec::Gap => tape.global_avg_pool(ins[0])?,
                LayerSpec::L2Norm => tape.l2_normalize(ins[0])?,
                LayerSpec::Concat => tape.concat(&ins)?,
                LayerSpec::Flatten => tape.flatten(ins[0])?,
                LayerSpec::Activation(Activation::Relu) => tape.relu(ins[0])?,
                LayerSpec::Activation(Activation::Sigmoid) => tape.sigmoid(ins[0])?,
                LayerSpec::Activation(Activation::Softmax) => tape.softmax(ins[0])?,
            };
            vals.push(v);
        }
        Ok(ForwardPass {
            output: vals[self.output],
            taps: self.taps.iter().map(|&t| vals[t]).collect(),
            nodes: vals,
            params,
            bn_updates,
        })
    }

    /// Batch-averaged data loss of the head against class indices.
    pub fn data_loss(&self, tape: &mut Tape<T>, output: Var, labels: &[usize]) -> Result<Var> {
        match self.head {
            Head::Sigmoid => {
                if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
                    return Err(Error::Input(format!("binary label {bad} is not 0 or 1")));
                }
                let targets: Vec<T> = labels.iter().map(|&l| T::lit(l as f64)).collect();
                tape.binary_crossentropy(output, &targets)
            }
            Head::Softmax(_) => tape.categorical_crossentropy(output, labels),
            Head::Features => Err(Error::config("feature extractor has no loss")),
        }
    }

    /// `lambda * sum(w^2)` over regularized kernels, recorded on the tape.
    pub fn penalty(&self, tape: &mut Tape<T>, params: &BTreeMap<String, Var>) -> Result<Option<Var>> {
        if self.l2_lambda == 0.0 {
            return Ok(None);
        }
        let mut total: Option<Var> = None;
        for (name, p) in self.params.iter() {
            if !p.role.regularized() {
                continue;
            }
            let sq = tape.sum_squares(params[name])?;
            total = Some(match total {
                None => sq,
                Some(t) => tape.add(t, sq)?,
            });
        }
        total
            .map(|t| tape.scale(t, T::lit(self.l2_lambda)))
            .transpose()
    }

    /// Data loss plus L2 penalty.
    pub fn total_loss(&self, tape: &mut Tape<T>, pass: &ForwardPass<T>, labels: &[usize]) -> Result<Var> {
        let data = self.data_loss(tape, pass.output, labels)?;
        match self.penalty(tape, &pass.params)? {
            Some(p) => tape.add(data, p),
            None => Ok(data),
        }
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) -> Result<()> {
        let keep = T::lit(BN_MOMENTUM);
        let blend = T::one() - keep;
        for u in updates {
            for (slot, batch) in [("moving_mean", &u.stats.mean), ("moving_var", &u.stats.variance)] {
                let key = format!("{}.{slot}", u.layer);
                let p = self
                    .params
                    .get_mut(&key)
                    .ok_or_else(|| Error::config(format!("missing parameter `{key}`")))?;
                for (r, &b) in p.value.data_mut().iter_mut().zip(batch.iter()) {
                    *r = keep * *r + blend * b;
                }
            }
        }
        Ok(())
    }

    /// Inference-mode output for an `[N, H, W, C]` batch.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone(), false);
        let pass = self.forward(&mut tape, x, &mut Mode::Infer)?;
        Ok(tape.value(pass.output).clone())
    }

    /// Inference-mode tap activations for an `[N, H, W, C]` batch.
    pub fn tap_activations(&self, batch: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let x = tape.leaf(batch.clone(), false);
        let pass = self.forward(&mut tape, x, &mut Mode::Infer)?;
        Ok(pass.taps.iter().map(|&t| tape.value(t).clone()).collect())
    }

    /// Class probabilities per sample; a sigmoid output `p` becomes `[1 - p, p]`.
    pub fn predict_proba(&self, batch: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        let out = self.infer(batch)?;
        output_probabilities(self.head, &out)
    }

    /// Forward-propagates a zero probe and compares every node's shape with
    /// the declared one.
    pub fn audit_shapes(&self) -> Result<()> {
        let mut probe = vec![1];
        probe.extend_from_slice(&self.input_shape);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&probe), false);
        let pass = self.forward(&mut tape, x, &mut Mode::Infer)?;
        for (i, (&v, declared)) in pass.nodes.iter().zip(&self.shapes).enumerate() {
            let got = tape.value(v).shape();
            if got[0] != 1 || got[1..] != declared[..] {
                return Err(Error::shape(format!(
                    "layer `{}` declared {declared:?} but produced {:?}",
                    self.nodes[i].name,
                    &got[1..]
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ModelGraph<U> {
        ModelGraph {
            arch: self.arch.clone(),
            input_shape: self.input_shape,
            nodes: self.nodes.clone(),
            shapes: self.shapes.clone(),
            params: self.params.cast(),
            taps: self.taps.clone(),
            output: self.output,
            head: self.head,
            l2_lambda: self.l2_lambda,
        }
    }
}

fn locate(e: Error, layer: &str) -> Error {
    match e {
        Error::Input(m) => Error::Input(format!("layer `{layer}`: {m}")),
        other => other,
    }
}

/// Reads an output tensor as per-sample class-probability rows.
pub fn output_probabilities<T: Real>(head: Head, out: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
    let n = out.shape().first().copied().unwrap_or(0);
    let width = if n == 0 { 0 } else { out.len() / n };
    let rows = out.data().chunks(width.max(1));
    match head {
        Head::Sigmoid => Ok(rows
            .map(|r| {
                let p = r[0].as_f64();
                vec![1.0 - p, p]
            })
            .collect()),
        Head::Softmax(_) => Ok(rows.map(|r| r.iter().map(|v| v.as_f64()).collect()).collect()),
        Head::Features => Err(Error::config("feature extractor has no class probabilities")),
    }
}
