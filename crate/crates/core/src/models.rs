//! Small classifiers whose dense layers are split into column groups.
//!
//! Weights are stored `in × out` and applied as `x·W + b`, so a group is
//! a slice of output neurons. Only layers marked searchable take part in
//! bit-width search; input projections, classifier heads, biases and
//! layer norms always stay at full precision.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::quant::{self, GroupSpec, FULL_PRECISION_BITS};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub searchable: bool,
}

impl Linear {
    fn new(name: &str, fan_in: usize, fan_out: usize, searchable: bool, rng: &mut ChaCha8Rng) -> Self {
        // He-style uniform bound for ReLU networks.
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Linear {
            name: name.to_string(),
            weight: Tensor::new(vec![fan_in, fan_out], data).expect("shape matches data"),
            bias: Some(Tensor::zeros(&[fan_out])),
            searchable,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Architecture {
    Mlp,
    Transformer {
        seq_len: usize,
        token_dim: usize,
        heads: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupedModel {
    pub arch: Architecture,
    pub layers: Vec<Linear>,
    pub groups_per_layer: usize,
    pub input_dim: usize,
    pub classes: usize,
    groups: Vec<Vec<GroupSpec>>,
    searchable: Vec<usize>,
}

/// Parameters of a model placed into a graph.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub weights: Vec<Var>,
    pub biases: Vec<Option<Var>>,
}

impl GroupedModel {
    fn assemble(arch: Architecture, layers: Vec<Linear>, groups_per_layer: usize, input_dim: usize, classes: usize) -> Result<Self> {
        let searchable: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.searchable)
            .map(|(i, _)| i)
            .collect();
        let groups = searchable
            .iter()
            .enumerate()
            .map(|(sid, &li)| {
                let (rows, cols) = layers[li].weight.dims2()?;
                quant::partition_columns(sid, rows, cols, groups_per_layer).map_err(|_| {
                    Error::Config(format!(
                        "layer {} ({}) has {cols} output columns, not divisible by {groups_per_layer} groups",
                        li, layers[li].name
                    ))
                })
            })
            .collect::<Result<_>>()?;
        Ok(GroupedModel {
            arch,
            layers,
            groups_per_layer,
            input_dim,
            classes,
            groups,
            searchable,
        })
    }

    pub fn from_config(cfg: &ModelConfig, input_dim: usize, classes: usize, seed: u64) -> Result<Self> {
        match cfg {
            ModelConfig::Mlp { hidden, groups } => build_mlp(input_dim, hidden, classes, *groups, seed),
            ModelConfig::Transformer {
                seq_len,
                d_model,
                heads,
                ff_dim,
                groups,
            } => {
                if *seq_len == 0 || !input_dim.is_multiple_of(*seq_len) {
                    return Err(Error::Config(format!(
                        "input dimension {input_dim} does not split into {seq_len} tokens"
                    )));
                }
                build_tiny_transformer_block(
                    TransformerDims {
                        seq_len: *seq_len,
                        token_dim: input_dim / seq_len,
                        d_model: *d_model,
                        heads: *heads,
                        ff_dim: *ff_dim,
                    },
                    classes,
                    *groups,
                    seed,
                )
            }
        }
    }

    /// Layer indices that take part in the search, in search order.
    pub fn searchable_layers(&self) -> &[usize] {
        &self.searchable
    }

    /// Group partitions, one list per searchable layer.
    pub fn groups(&self) -> &[Vec<GroupSpec>] {
        &self.groups
    }

    pub fn all_groups(&self) -> impl Iterator<Item = &GroupSpec> {
        self.groups.iter().flatten()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.as_ref().map_or(0, Tensor::numel))
            .sum()
    }

    pub fn searchable_param_count(&self) -> usize {
        self.searchable.iter().map(|&i| self.layers[i].weight.numel()).sum()
    }

    /// Size of the searchable weights stored as 32-bit floats.
    pub fn full_precision_bits(&self) -> u64 {
        self.searchable_param_count() as u64 * FULL_PRECISION_BITS as u64
    }

    pub fn searchable_weights(&self) -> Vec<&Tensor> {
        self.searchable.iter().map(|&i| &self.layers[i].weight).collect()
    }

    /// All trainable tensors, weight then bias per layer.
    pub fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| std::iter::once(&l.weight).chain(l.bias.as_ref()))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| std::iter::once(&mut l.weight).chain(l.bias.as_mut()))
            .collect()
    }

    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> BoundParams {
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut biases = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            weights.push(g.leaf(l.weight.clone(), requires_grad));
            biases.push(l.bias.as_ref().map(|b| g.leaf(b.clone(), requires_grad)));
        }
        BoundParams { weights, biases }
    }

    /// Gradients of every bound parameter, in [`GroupedModel::params`]
    /// order, with zeros where nothing flowed.
    pub fn collect_grads(&self, g: &Graph, bound: &BoundParams) -> Vec<Tensor> {
        let grad_or_zero = |v: Var| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(v).shape()))
        };
        bound
            .weights
            .iter()
            .zip(&bound.biases)
            .flat_map(|(&w, b)| std::iter::once(grad_or_zero(w)).chain(b.map(grad_or_zero)))
            .collect()
    }

    /// Logits for a batch. `weights` holds the effective weight of every
    /// layer (already fake-quantized where applicable). With
    /// `activation_bits`, hidden activations are fake-quantized too.
    pub fn forward(
        &self,
        g: &mut Graph,
        weights: &[Var],
        biases: &[Option<Var>],
        x: &Tensor,
        activation_bits: Option<u32>,
    ) -> Result<Var> {
        Ok(self.forward_detailed(g, weights, biases, x, activation_bits)?.logits)
    }

    pub fn forward_detailed(
        &self,
        g: &mut Graph,
        weights: &[Var],
        biases: &[Option<Var>],
        x: &Tensor,
        activation_bits: Option<u32>,
    ) -> Result<ForwardOutput> {
        if weights.len() != self.layers.len() || biases.len() != self.layers.len() {
            return Err(Error::Internal(format!(
                "{} weights for {} layers",
                weights.len(),
                self.layers.len()
            )));
        }
        let (_, cols) = x.dims2()?;
        if cols != self.input_dim {
            return Err(Error::dims("model input", x.shape(), &[self.input_dim]));
        }
        let ctx = Ctx {
            weights,
            biases,
            activation_bits,
        };
        match &self.arch {
            Architecture::Mlp => {
                let mut h = g.constant(x.clone());
                let last = self.layers.len() - 1;
                for i in 0..=last {
                    h = ctx.dense(g, i, h)?;
                    if i < last {
                        h = g.relu(h)?;
                        h = ctx.maybe_quantize(g, h)?;
                    }
                }
                Ok(ForwardOutput {
                    logits: h,
                    attention: Vec::new(),
                })
            }
            Architecture::Transformer {
                seq_len,
                token_dim,
                heads,
            } => self.transformer_forward(g, &ctx, x, *seq_len, *token_dim, *heads),
        }
    }

    fn transformer_forward(
        &self,
        g: &mut Graph,
        ctx: &Ctx<'_>,
        x: &Tensor,
        seq_len: usize,
        token_dim: usize,
        heads: usize,
    ) -> Result<ForwardOutput> {
        let (batch, _) = x.dims2()?;
        // Each sample row becomes `seq_len` token rows, stacked for the batch.
        let tokens = g.constant(x.clone().reshape(vec![batch * seq_len, token_dim])?);
        let h0 = ctx.dense(g, layer::EMBED, tokens)?;
        let q = ctx.dense(g, layer::QUERY, h0)?;
        let k = ctx.dense(g, layer::KEY, h0)?;
        let v = ctx.dense(g, layer::VALUE, h0)?;
        let (_, d_model) = g.value(h0).dims2()?;
        let dh = d_model / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();

        let mut attention = Vec::with_capacity(batch * heads);
        let mut contexts = Vec::with_capacity(batch);
        for s in 0..batch {
            let (r0, r1) = (s * seq_len, (s + 1) * seq_len);
            let (qs, ks, vs) = (g.slice_rows(q, r0, r1)?, g.slice_rows(k, r0, r1)?, g.slice_rows(v, r0, r1)?);
            let mut per_head = Vec::with_capacity(heads);
            for h in 0..heads {
                let (c0, c1) = (h * dh, (h + 1) * dh);
                let qh = g.slice_cols(qs, c0, c1)?;
                let kh = g.slice_cols(ks, c0, c1)?;
                let vh = g.slice_cols(vs, c0, c1)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, inv_sqrt);
                let probs = g.softmax_rows(scores)?;
                attention.push(probs);
                per_head.push(g.matmul(probs, vh)?);
            }
            contexts.push(g.concat_cols(&per_head)?);
        }
        let ctx_all = g.concat_rows(&contexts)?;
        let attn_out = ctx.dense(g, layer::OUTPUT, ctx_all)?;
        let res1 = g.add(h0, attn_out)?;
        let h1 = g.layer_norm_rows(res1, LAYER_NORM_EPS)?;
        let h1 = ctx.maybe_quantize(g, h1)?;

        let f = ctx.dense(g, layer::FF1, h1)?;
        let f = g.relu(f)?;
        let f = ctx.maybe_quantize(g, f)?;
        let f = ctx.dense(g, layer::FF2, f)?;
        let res2 = g.add(h1, f)?;
        let h2 = g.layer_norm_rows(res2, LAYER_NORM_EPS)?;

        let mut pooled = Vec::with_capacity(batch);
        for s in 0..batch {
            let rows = g.slice_rows(h2, s * seq_len, (s + 1) * seq_len)?;
            pooled.push(g.mean_rows(rows)?);
        }
        let pooled = g.concat_rows(&pooled)?;
        let logits = ctx.dense(g, layer::HEAD, pooled)?;
        Ok(ForwardOutput { logits, attention })
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Attention probability matrices, sample-major then head.
    pub attention: Vec<Var>,
}

struct Ctx<'a> {
    weights: &'a [Var],
    biases: &'a [Option<Var>],
    activation_bits: Option<u32>,
}

impl Ctx<'_> {
    fn dense(&self, g: &mut Graph, i: usize, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weights[i])?;
        match self.biases[i] {
            Some(b) => g.add_row(y, b),
            None => Ok(y),
        }
    }

    fn maybe_quantize(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.activation_bits {
            Some(bits) if bits < FULL_PRECISION_BITS => quant::fake_quantize_activations(g, x, bits),
            _ => Ok(x),
        }
    }
}

/// Layer order of the transformer block.
pub mod layer {
    pub const EMBED: usize = 0;
    pub const QUERY: usize = 1;
    pub const KEY: usize = 2;
    pub const VALUE: usize = 3;
    pub const OUTPUT: usize = 4;
    pub const FF1: usize = 5;
    pub const FF2: usize = 6;
    pub const HEAD: usize = 7;
}

/// Builds `input → hidden… → classes` with ReLU between layers. The hidden
/// layers are searchable; the classifier head is not.
pub fn build_mlp(input_dim: usize, hidden: &[usize], classes: usize, groups: usize, seed: u64) -> Result<GroupedModel> {
    if input_dim == 0 || classes == 0 || hidden.is_empty() || hidden.contains(&0) {
        return Err(Error::Config("MLP dimensions must be positive with at least one hidden layer".into()));
    }
    if groups == 0 {
        return Err(Error::Config("group count must be positive".into()));
    }
    for (i, &h) in hidden.iter().enumerate() {
        if h % groups != 0 {
            return Err(Error::Config(format!(
                "hidden layer {i} width {h} is not divisible by {groups} groups"
            )));
        }
    }
    let mut rng = rng::stream(seed, Stream::Init);
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut fan_in = input_dim;
    for (i, &h) in hidden.iter().enumerate() {
        layers.push(Linear::new(&format!("hidden{i}"), fan_in, h, true, &mut rng));
        fan_in = h;
    }
    layers.push(Linear::new("head", fan_in, classes, false, &mut rng));
    GroupedModel::assemble(Architecture::Mlp, layers, groups, input_dim, classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformerDims {
    pub seq_len: usize,
    pub token_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
}

/// One self-attention block with a two-layer feed-forward and a mean-pool
/// classifier. Q, K, V, output and both feed-forward projections are
/// searchable.
pub fn build_tiny_transformer_block(dims: TransformerDims, classes: usize, groups: usize, seed: u64) -> Result<GroupedModel> {
    let TransformerDims {
        seq_len,
        token_dim,
        d_model,
        heads,
        ff_dim,
    } = dims;
    if [seq_len, token_dim, d_model, heads, ff_dim, classes, groups].contains(&0) {
        return Err(Error::Config("transformer dimensions must be positive".into()));
    }
    if d_model % heads != 0 {
        return Err(Error::Config(format!("d_model {d_model} not divisible by {heads} heads")));
    }
    if d_model % groups != 0 || ff_dim % groups != 0 {
        return Err(Error::Config(format!(
            "d_model {d_model} and ff_dim {ff_dim} must both be divisible by {groups} groups"
        )));
    }
    let mut rng = rng::stream(seed, Stream::Init);
    let layers = vec![
        Linear::new("embed", token_dim, d_model, false, &mut rng),
        Linear::new("query", d_model, d_model, true, &mut rng),
        Linear::new("key", d_model, d_model, true, &mut rng),
        Linear::new("value", d_model, d_model, true, &mut rng),
        Linear::new("output", d_model, d_model, true, &mut rng),
        Linear::new("ff1", d_model, ff_dim, true, &mut rng),
        Linear::new("ff2", ff_dim, d_model, true, &mut rng),
        Linear::new("head", d_model, classes, false, &mut rng),
    ];
    GroupedModel::assemble(
        Architecture::Transformer {
            seq_len,
            token_dim,
            heads,
        },
        layers,
        groups,
        seq_len * token_dim,
        classes,
    )
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(logits.row(r)) == y)
        .count();
    correct as f64 / labels.len().max(1) as f64
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
