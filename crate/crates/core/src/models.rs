//! The small networks used in both training stages.
//!
//! A flattening MLP encoder feeds four heads: a two-layer projector (the space
//! where local and global representations are compared), the class output
//! layer, the source-center classification branch and the linear restoration
//! head. All of them are graph builders over one [`ParamSet`] whose entry names
//! carry the segment as a prefix.

use std::collections::HashMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, NodeId, ParamSet, Tensor};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `[channels, height, width]`.
    pub input_dims: [usize; 3],
    pub encoder_widths: Vec<usize>,
    pub repr_dim: usize,
    pub proj_dim: usize,
    pub n_classes: usize,
    pub n_centers: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_dims: [3, 16, 16],
            encoder_widths: vec![64, 32],
            repr_dim: 32,
            proj_dim: 16,
            n_classes: 4,
            n_centers: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    Encoder,
    Projector,
    Head,
    CenterHead,
    Restore,
}

impl Segment {
    pub const ALL: [Segment; 5] = [
        Segment::Encoder,
        Segment::Projector,
        Segment::Head,
        Segment::CenterHead,
        Segment::Restore,
    ];
    /// Segments of a federated classifier.
    pub const FL: [Segment; 3] = [Segment::Encoder, Segment::Projector, Segment::Head];
    /// Segments trained by self-supervised pretraining.
    pub const SSL: [Segment; 3] = [Segment::Encoder, Segment::CenterHead, Segment::Restore];

    pub fn prefix(self) -> &'static str {
        match self {
            Segment::Encoder => "encoder.",
            Segment::Projector => "projector.",
            Segment::Head => "head.",
            Segment::CenterHead => "center_head.",
            Segment::Restore => "restore.",
        }
    }
}

/// One dense layer `x·W + b` with `W: fan_in × fan_out`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub segment: Segment,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl LayerShape {
    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }
}

impl ModelSpec {
    pub fn input_len(&self) -> usize {
        self.input_dims.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self
            .input_dims
            .iter()
            .chain(&self.encoder_widths)
            .chain([&self.repr_dim, &self.proj_dim, &self.n_classes, &self.n_centers]);
        if dims.clone().any(|&d| d == 0) {
            return Err(Error::contract(format!("model dimensions must be ≥ 1: {self:?}")));
        }
        Ok(())
    }

    /// Every dense layer in initialisation order.
    pub fn layers(&self) -> Vec<LayerShape> {
        let layer = |name: String, segment, fan_in, fan_out| LayerShape {
            name,
            segment,
            fan_in,
            fan_out,
        };
        let mut out = Vec::new();
        let mut width = self.input_len();
        for (i, &w) in self.encoder_widths.iter().chain([&self.repr_dim]).enumerate() {
            out.push(layer(format!("encoder.{i}"), Segment::Encoder, width, w));
            width = w;
        }
        out.push(layer("projector.0".into(), Segment::Projector, self.repr_dim, self.repr_dim));
        out.push(layer("projector.1".into(), Segment::Projector, self.repr_dim, self.proj_dim));
        out.push(layer("head".into(), Segment::Head, self.repr_dim, self.n_classes));
        out.push(layer("center_head".into(), Segment::CenterHead, self.repr_dim, self.n_centers));
        out.push(layer("restore".into(), Segment::Restore, self.repr_dim, self.input_len()));
        out
    }

    fn segment_layers(&self, segment: Segment) -> Vec<LayerShape> {
        self.layers().into_iter().filter(|l| l.segment == segment).collect()
    }
}

/// Parameters of every segment, keyed `<layer>.weight` / `<layer>.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights(ParamSet);

impl ModelWeights {
    pub fn from_params(params: ParamSet) -> Self {
        ModelWeights(params)
    }

    pub fn params(&self) -> &ParamSet {
        &self.0
    }

    pub fn into_params(self) -> ParamSet {
        self.0
    }

    pub fn segment(&self, segment: Segment) -> ParamSet {
        self.0.select(&[segment.prefix()])
    }

    pub fn has_segment(&self, segment: Segment) -> bool {
        self.0.names().any(|n| n.starts_with(segment.prefix()))
    }

    /// Keeps only the given segments.
    pub fn select(&self, segments: &[Segment]) -> ModelWeights {
        let prefixes: Vec<&str> = segments.iter().map(|s| s.prefix()).collect();
        ModelWeights(self.0.select(&prefixes))
    }

    /// Copies the encoder segment of `donor` over this model's encoder.
    pub fn transplant_encoder(&mut self, donor: &ModelWeights) -> Result<()> {
        let encoder = donor.segment(Segment::Encoder);
        let mine = self.segment(Segment::Encoder);
        mine.ensure_compatible(&encoder)?;
        self.0.overwrite_from(&encoder)?;
        Ok(())
    }

    /// Checks that every layer of `segments` is present with the right shape.
    pub fn check_against(&self, spec: &ModelSpec, segments: &[Segment]) -> Result<()> {
        for layer in spec.layers().iter().filter(|l| segments.contains(&l.segment)) {
            let expect = [
                (layer.weight(), vec![layer.fan_in, layer.fan_out]),
                (layer.bias(), vec![layer.fan_out]),
            ];
            for (name, shape) in expect {
                match self.0.get(&name) {
                    Some(t) if t.shape() == shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::Incompatible(format!(
                            "{name}: expected {shape:?}, found {:?}",
                            t.shape()
                        )))
                    }
                    None => return Err(Error::Incompatible(format!("missing {name}"))),
                }
            }
        }
        Ok(())
    }
}

/// Glorot-uniform weights (`a = √(6/(fan_in+fan_out))`) and zero biases for all
/// five segments, drawn in layer order from a stream derived from `seed`. The
/// restoration weights start at zero (their draws are still consumed).
pub fn init_weights(spec: &ModelSpec, seed: u64) -> Result<ModelWeights> {
    spec.validate()?;
    let mut rng = rng::stream(seed, &[rng::tag::INIT]);
    let mut params = ParamSet::new();
    for layer in spec.layers() {
        let bound = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
        let mut data: Vec<f64> = (0..layer.fan_in * layer.fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        if layer.segment == Segment::Restore {
            // A random restoration head floods the shared encoder with the
            // summed pixel error before the center branch can learn anything.
            data.iter_mut().for_each(|v| *v = 0.0);
        }
        params.insert(
            layer.weight(),
            Tensor::from_parts(vec![layer.fan_in, layer.fan_out], data),
        );
        params.insert(layer.bias(), Tensor::zeros(vec![layer.fan_out]));
    }
    Ok(ModelWeights(params))
}

/// Graph handles for a model's parameters.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    ids: HashMap<String, NodeId>,
}

impl Bound {
    /// Binds every entry of `weights` into `g`, as trainable leaves or as
    /// constants. Constants never receive gradients.
    pub fn new(g: &mut Graph, weights: &ModelWeights, trainable: bool) -> Result<Self> {
        let mut ids = HashMap::with_capacity(weights.0.len());
        for (name, t) in weights.0.iter() {
            let id = if trainable {
                g.param(name, t.clone())?
            } else {
                g.constant(t.clone())
            };
            ids.insert(name.to_owned(), id);
        }
        Ok(Bound { ids })
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Incompatible(format!("model has no parameter `{name}`")))
    }

    fn dense(&self, g: &mut Graph, x: NodeId, layer: &LayerShape) -> Result<NodeId> {
        let w = self.get(&layer.weight())?;
        let b = self.get(&layer.bias())?;
        let xw = g.matmul(x, w)?;
        g.add_bias(xw, b)
    }
}

/// Flattens a `(batch, C, H, W)` input into a `(batch, C·H·W)` node.
pub fn input_node(g: &mut Graph, spec: &ModelSpec, x: &Tensor) -> Result<NodeId> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1..] != spec.input_dims {
        return Err(Error::Shape {
            node: g.len(),
            op: "input",
            detail: format!("expected (batch, {:?}), got {shape:?}", spec.input_dims),
        });
    }
    let flat = Tensor::from_parts(vec![shape[0], spec.input_len()], x.data().to_vec());
    Ok(g.constant(flat))
}

pub fn encode_node(g: &mut Graph, spec: &ModelSpec, w: &Bound, x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for layer in spec.segment_layers(Segment::Encoder) {
        let z = w.dense(g, h, &layer)?;
        h = g.relu(z)?;
    }
    Ok(h)
}

pub fn project_node(g: &mut Graph, spec: &ModelSpec, w: &Bound, rep: NodeId) -> Result<NodeId> {
    let layers = spec.segment_layers(Segment::Projector);
    let hidden = w.dense(g, rep, &layers[0])?;
    let hidden = g.relu(hidden)?;
    w.dense(g, hidden, &layers[1])
}

pub fn classify_node(g: &mut Graph, spec: &ModelSpec, w: &Bound, rep: NodeId) -> Result<NodeId> {
    w.dense(g, rep, &spec.segment_layers(Segment::Head)[0])
}

pub fn center_classify_node(
    g: &mut Graph,
    spec: &ModelSpec,
    w: &Bound,
    rep: NodeId,
) -> Result<NodeId> {
    w.dense(g, rep, &spec.segment_layers(Segment::CenterHead)[0])
}

/// Restored images, flattened to `(batch, C·H·W)`.
pub fn restore_node(g: &mut Graph, spec: &ModelSpec, w: &Bound, rep: NodeId) -> Result<NodeId> {
    w.dense(g, rep, &spec.segment_layers(Segment::Restore)[0])
}

fn with_constants<F>(weights: &ModelWeights, input: Tensor, build: F) -> Result<Tensor>
where
    F: FnOnce(&mut Graph, &Bound, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, weights, false)?;
    let x = g.constant(input);
    let out = build(&mut g, &bound, x)?;
    Ok(g.value(out).clone())
}

fn check_rep(spec: &ModelSpec, rep: &Tensor) -> Result<()> {
    match rep.dims2() {
        Some((_, d)) if d == spec.repr_dim => Ok(()),
        _ => Err(Error::Shape {
            node: 0,
            op: "input",
            detail: format!("expected (batch, {}), got {:?}", spec.repr_dim, rep.shape()),
        }),
    }
}

/// `(batch, C, H, W)` images to `(batch, repr_dim)` representations.
pub fn encode(spec: &ModelSpec, x: &Tensor, w: &ModelWeights) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, w, false)?;
    let input = input_node(&mut g, spec, x)?;
    let out = encode_node(&mut g, spec, &bound, input)?;
    Ok(g.value(out).clone())
}

pub fn project(spec: &ModelSpec, rep: &Tensor, w: &ModelWeights) -> Result<Tensor> {
    check_rep(spec, rep)?;
    with_constants(w, rep.clone(), |g, b, x| project_node(g, spec, b, x))
}

pub fn classify(spec: &ModelSpec, rep: &Tensor, w: &ModelWeights) -> Result<Tensor> {
    check_rep(spec, rep)?;
    with_constants(w, rep.clone(), |g, b, x| classify_node(g, spec, b, x))
}

pub fn center_classify(spec: &ModelSpec, rep: &Tensor, w: &ModelWeights) -> Result<Tensor> {
    check_rep(spec, rep)?;
    with_constants(w, rep.clone(), |g, b, x| center_classify_node(g, spec, b, x))
}

/// Restored images with the input's `(batch, C, H, W)` shape.
pub fn restore(spec: &ModelSpec, rep: &Tensor, w: &ModelWeights) -> Result<Tensor> {
    check_rep(spec, rep)?;
    let flat = with_constants(w, rep.clone(), |g, b, x| restore_node(g, spec, b, x))?;
    let [c, h, wd] = spec.input_dims;
    flat.reshape(vec![rep.shape()[0], c, h, wd])
}

/// Class logits `(n, n_classes)` for a list of `[C, H, W]` images, evaluated in
/// chunks so memory stays flat for large evaluation sets.
pub fn class_logits(spec: &ModelSpec, w: &ModelWeights, images: &[&Tensor]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::contract("no images to classify"));
    }
    let mut data = Vec::with_capacity(images.len() * spec.n_classes);
    for chunk in images.chunks(64) {
        let x = Tensor::stack(chunk)?;
        let rep = encode(spec, &x, w)?;
        data.extend_from_slice(classify(spec, &rep, w)?.data());
    }
    Tensor::new(vec![images.len(), spec.n_classes], data)
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let (_, m) = logits.dims2().expect("argmax_rows needs a matrix");
    logits
        .data()
        .chunks_exact(m)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}
