//! Classifier architectures producing `K` logits.
//!
//! Two architectures are provided for real use:
//!
//! * `mlp2d`: `2 -> 64 -> 64 -> K` with softplus activations.
//! * `convtiny`: input `3 x S x S` (`S` a multiple of 4, 8 by default),
//!   two `3x3` conv blocks (8 and 16 channels) each followed by softplus and
//!   `2x2` mean pooling, then a dense layer to `K`.
//!
//! A third, `linear` (`f(x) = Wx + b`), exists because its attacks and
//! energies have closed forms that tests rely on.
//!
//! Softplus is used instead of ReLU so that input gradients are informative
//! everywhere.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Evaluation, Graph, GraphBuilder, NodeId, Tensor};
use crate::error::{Error, Result};

pub const MLP_HIDDEN: usize = 64;
pub const CONV_CHANNELS: usize = 3;
pub const CONV_SIDE: usize = 8;
const CONV1_OUT: usize = 8;
const CONV2_OUT: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchTag {
    Mlp2d,
    ConvTiny,
    Linear,
}

impl ArchTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ArchTag::Mlp2d => "mlp2d",
            ArchTag::ConvTiny => "convtiny",
            ArchTag::Linear => "linear",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            ArchTag::Mlp2d => 0,
            ArchTag::ConvTiny => 1,
            ArchTag::Linear => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(ArchTag::Mlp2d),
            1 => Some(ArchTag::ConvTiny),
            2 => Some(ArchTag::Linear),
            _ => None,
        }
    }
}

impl fmt::Display for ArchTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp2d" => Ok(ArchTag::Mlp2d),
            "convtiny" => Ok(ArchTag::ConvTiny),
            "linear" => Ok(ArchTag::Linear),
            other => Err(Error::UnknownArch(other.to_string())),
        }
    }
}

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params(BTreeMap<String, Tensor>);

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.0.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.0.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.0.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        )
    }

    /// `self += scale * other`, matched by name.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (k, v) in self.0.iter_mut() {
            if let Some(o) = other.0.get(k) {
                v.add_scaled(o, scale);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.values_mut().for_each(|t| t.scale_in_place(s));
    }

    pub fn norm_l2(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(Tensor::all_finite)
    }

    pub fn param_count(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }
}

impl crate::autodiff::Feed for Params {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.0.get(name)
    }
}

/// A parameterized map `f: R^D -> R^K`.
#[derive(Debug, Clone)]
pub struct Classifier {
    arch: ArchTag,
    input_dim: usize,
    num_classes: usize,
    graph: Graph,
    params: Params,
    logits_node: NodeId,
    features_node: NodeId,
    param_nodes: Vec<(String, NodeId)>,
    input_node: NodeId,
}

/// Forward-pass state for one input, reusable for several pullbacks.
pub struct ForwardPass {
    eval: Evaluation,
    logits: Tensor,
}

impl ForwardPass {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

const INPUT: &str = "x";

/// Side length `S` for a convtiny input of dimension `3 * S * S`.
pub fn conv_side(input_dim: usize) -> Option<usize> {
    if !input_dim.is_multiple_of(CONV_CHANNELS) {
        return None;
    }
    let area = input_dim / CONV_CHANNELS;
    let side = (area as f64).sqrt().round() as usize;
    (side * side == area && side >= 4 && side.is_multiple_of(4)).then_some(side)
}

struct Layout {
    graph: Graph,
    shapes: Vec<(String, Vec<usize>, usize)>,
}

fn dense(
    b: &mut GraphBuilder,
    shapes: &mut Vec<(String, Vec<usize>, usize)>,
    name: &str,
    x: NodeId,
    fan_in: usize,
    out: usize,
) -> Result<NodeId> {
    let w_name = format!("{name}.w");
    let b_name = format!("{name}.b");
    let w = b.param(&w_name, &[out, fan_in])?;
    let bias = b.param(&b_name, &[out])?;
    shapes.push((w_name, vec![out, fan_in], fan_in));
    shapes.push((b_name, vec![out], fan_in));
    let h = b.matmul(w, x)?;
    let h = b.add(h, bias)?;
    b.set_label(h, name);
    Ok(h)
}

fn layout(arch: ArchTag, input_dim: usize, num_classes: usize) -> Result<Layout> {
    let mut b = GraphBuilder::new();
    let mut shapes = Vec::new();
    let x = b.input(INPUT, &[input_dim])?;
    let (features, logits) = match arch {
        ArchTag::Linear => {
            let l = dense(&mut b, &mut shapes, "fc", x, input_dim, num_classes)?;
            (x, l)
        }
        ArchTag::Mlp2d => {
            let h1 = dense(&mut b, &mut shapes, "fc1", x, input_dim, MLP_HIDDEN)?;
            let a1 = b.softplus(h1);
            b.set_label(a1, "fc1.act");
            let h2 = dense(&mut b, &mut shapes, "fc2", a1, MLP_HIDDEN, MLP_HIDDEN)?;
            let a2 = b.softplus(h2);
            b.set_label(a2, "fc2.act");
            let l = dense(&mut b, &mut shapes, "fc3", a2, MLP_HIDDEN, num_classes)?;
            (a2, l)
        }
        ArchTag::ConvTiny => {
            let side = conv_side(input_dim).expect("validated by caller");
            let img = b.reshape(x, &[CONV_CHANNELS, side, side])?;
            let mut h = img;
            let mut c_in = CONV_CHANNELS;
            for (name, c_out) in [("conv1", CONV1_OUT), ("conv2", CONV2_OUT)] {
                let k_name = format!("{name}.w");
                let b_name = format!("{name}.b");
                let fan_in = c_in * 9;
                let k = b.param(&k_name, &[c_out, c_in, 3, 3])?;
                let bias = b.param(&b_name, &[c_out])?;
                shapes.push((k_name, vec![c_out, c_in, 3, 3], fan_in));
                shapes.push((b_name, vec![c_out], fan_in));
                let c = b.conv2d(h, k, 1)?;
                let c = b.add_bias(c, bias)?;
                b.set_label(c, name);
                let a = b.softplus(c);
                b.set_label(a, &format!("{name}.act"));
                h = b.avg_pool2d(a, 2)?;
                b.set_label(h, &format!("{name}.pool"));
                c_in = c_out;
            }
            let flat_len = CONV2_OUT * (side / 4) * (side / 4);
            let flat = b.reshape(h, &[flat_len])?;
            let l = dense(&mut b, &mut shapes, "fc", flat, flat_len, num_classes)?;
            (flat, l)
        }
    };
    b.output("logits", logits)?;
    b.output("features", features)?;
    Ok(Layout {
        graph: b.build(),
        shapes,
    })
}

fn check_dims(arch: ArchTag, input_dim: usize, num_classes: usize) -> Result<()> {
    if num_classes < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {num_classes}")));
    }
    match arch {
        ArchTag::Mlp2d if input_dim != 2 => Err(Error::DimensionMismatch {
            expected: 2,
            got: input_dim,
        }),
        ArchTag::ConvTiny if conv_side(input_dim).is_none() => Err(Error::DimensionMismatch {
            expected: CONV_CHANNELS * CONV_SIDE * CONV_SIDE,
            got: input_dim,
        }),
        ArchTag::Linear if input_dim == 0 => Err(Error::invalid("linear input_dim must be positive")),
        _ => Ok(()),
    }
}

impl Classifier {
    /// Builds `arch` with parameters drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn build(arch: ArchTag, input_dim: usize, num_classes: usize, init_seed: u64) -> Result<Self> {
        check_dims(arch, input_dim, num_classes)?;
        let lay = layout(arch, input_dim, num_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut params = Params::new();
        for (name, shape, fan_in) in &lay.shapes {
            let bound = 1.0 / (*fan_in as f64).sqrt();
            let t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
            params.insert(name, t);
        }
        Self::assemble(arch, input_dim, num_classes, lay.graph, params)
    }

    /// Builds `arch` around caller-supplied parameters. Names and shapes must
    /// match the architecture exactly.
    pub fn from_params(arch: ArchTag, input_dim: usize, num_classes: usize, params: Params) -> Result<Self> {
        check_dims(arch, input_dim, num_classes)?;
        let lay = layout(arch, input_dim, num_classes)?;
        if params.len() != lay.shapes.len() {
            return Err(Error::invalid(format!(
                "{arch} expects {} parameter tensors, got {}",
                lay.shapes.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &lay.shapes {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape {
                        node: name.clone(),
                        detail: format!("expected {shape:?}, got {:?}", t.shape()),
                    })
                }
                None => return Err(Error::invalid(format!("missing parameter `{name}`"))),
            }
        }
        Self::assemble(arch, input_dim, num_classes, lay.graph, params)
    }

    fn assemble(arch: ArchTag, input_dim: usize, num_classes: usize, graph: Graph, params: Params) -> Result<Self> {
        let logits_node = graph.output_id("logits")?;
        let features_node = graph.output_id("features")?;
        let input_node = graph.leaf_id(INPUT).expect("input leaf");
        let param_nodes = graph
            .leaves()
            .filter(|(_, _, is_param)| *is_param)
            .map(|(n, id, _)| (n.to_string(), id))
            .collect();
        Ok(Self {
            arch,
            input_dim,
            num_classes,
            graph,
            params,
            logits_node,
            features_node,
            param_nodes,
            input_node,
        })
    }

    pub fn arch(&self) -> ArchTag {
        self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Overwrites one parameter tensor; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape {
                node: name.to_string(),
                detail: format!("expected {:?}, got {:?}", slot.shape(), value.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    /// Applies `params += scale * delta`.
    pub fn apply_update(&mut self, delta: &Params, scale: f64) {
        self.params.add_scaled(delta, scale);
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward_pass(&self, x: &Tensor) -> Result<ForwardPass> {
        self.check_input(x)?;
        let flat;
        let x = if x.shape() == [self.input_dim] {
            x
        } else {
            flat = x.clone().reshape(&[self.input_dim])?;
            &flat
        };
        let feed = ([(INPUT, x)], &self.params);
        let eval = self.graph.evaluate(&feed)?;
        let logits = eval.value(self.logits_node).clone();
        Ok(ForwardPass { eval, logits })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_pass(x)?.logits)
    }

    /// Penultimate representation (the input itself for `linear`).
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let pass = self.forward_pass(x)?;
        Ok(pass.eval.value(self.features_node).clone())
    }

    /// Pulls a cotangent on the logits back to the input.
    pub fn input_grad(&self, pass: &ForwardPass, dlogits: &Tensor) -> Result<Tensor> {
        let mut g = self
            .graph
            .vjp(&pass.eval, self.logits_node, dlogits, &[self.input_node])?;
        Ok(g.pop().expect("one gradient"))
    }

    /// Pulls a cotangent on the logits back to every parameter.
    pub fn param_grads(&self, pass: &ForwardPass, dlogits: &Tensor) -> Result<Params> {
        let ids: Vec<NodeId> = self.param_nodes.iter().map(|(_, id)| *id).collect();
        let grads = self.graph.vjp(&pass.eval, self.logits_node, dlogits, &ids)?;
        let mut out = Params::new();
        for ((name, _), g) in self.param_nodes.iter().zip(grads) {
            out.insert(name, g);
        }
        Ok(out)
    }
}
