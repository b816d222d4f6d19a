//! Relaxed bit-width selection over every weight group.
//!
//! Each group `r` carries logits `β[r, ·]` over the candidate widths. A
//! training step draws Gumbel noise and forms the relaxed one-hot
//! `O[r, k] = softmax((β[r, k] + g[r, k]) / t)`; the group's effective
//! weight is then `Σ_k O[r, k] · fakequant(W_r, b_k)`. Logits are used
//! directly (not `log β`), so β may take any real value.

use rand::distributions::Open01;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, Graph, Var};
use crate::config::SearchSchedule;
use crate::error::{Error, Result};
use crate::models::{BoundParams, GroupedModel};
use crate::quant::{self, GroupSpec, QuantCache, FULL_PRECISION_BITS};
use crate::rng::{self, Stream};
use crate::tensor::Tensor;

/// Standard deviation of freshly initialized logits.
pub const BETA_INIT_SCALE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct BitAssignmentState {
    candidate_bits: Vec<u32>,
    beta: Tensor,
    frozen: Vec<bool>,
    layer_offsets: Vec<usize>,
}

impl BitAssignmentState {
    /// Logits for `layers × groups` sub-groups drawn from `N(0, 0.01²)`,
    /// all frozen.
    pub fn init(layers: usize, groups: usize, candidate_bits: &[u32], seed: u64) -> Result<Self> {
        Self::init_ragged(&vec![groups; layers], candidate_bits, seed)
    }

    /// Like [`BitAssignmentState::init`] with a group count per layer.
    pub fn init_ragged(groups_per_layer: &[usize], candidate_bits: &[u32], seed: u64) -> Result<Self> {
        if groups_per_layer.is_empty() || groups_per_layer.contains(&0) {
            return Err(Error::Config("need at least one layer and one group per layer".into()));
        }
        if candidate_bits.len() < 2 {
            return Err(Error::Config(format!(
                "need at least two candidate widths, got {candidate_bits:?}"
            )));
        }
        let mut layer_offsets = Vec::with_capacity(groups_per_layer.len() + 1);
        let mut rows = 0;
        for &g in groups_per_layer {
            layer_offsets.push(rows);
            rows += g;
        }
        layer_offsets.push(rows);
        let k = candidate_bits.len();
        let mut rng = rng::stream(seed, Stream::Arch);
        let beta = (0..rows * k)
            .map(|_| BETA_INIT_SCALE * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(BitAssignmentState {
            candidate_bits: candidate_bits.to_vec(),
            beta: Tensor::new(vec![rows, k], beta)?,
            frozen: vec![true; rows],
            layer_offsets,
        })
    }

    pub fn for_model(model: &GroupedModel, candidate_bits: &[u32], seed: u64) -> Result<Self> {
        let counts: Vec<usize> = model.groups().iter().map(Vec::len).collect();
        Self::init_ragged(&counts, candidate_bits, seed)
    }

    pub fn candidate_bits(&self) -> &[u32] {
        &self.candidate_bits
    }

    pub fn k(&self) -> usize {
        self.candidate_bits.len()
    }

    pub fn rows(&self) -> usize {
        self.frozen.len()
    }

    pub fn layers(&self) -> usize {
        self.layer_offsets.len() - 1
    }

    pub fn row_index(&self, layer: usize, group: usize) -> usize {
        self.layer_offsets[layer] + group
    }

    pub fn layer_rows(&self, layer: usize) -> std::ops::Range<usize> {
        self.layer_offsets[layer]..self.layer_offsets[layer + 1]
    }

    pub fn beta(&self) -> &Tensor {
        &self.beta
    }

    pub fn set_beta(&mut self, beta: Tensor) -> Result<()> {
        if beta.shape() != self.beta.shape() {
            return Err(Error::dims("set_beta", self.beta.shape(), beta.shape()));
        }
        if !beta.is_finite() {
            return Err(Error::Contract("architecture logits must be finite".into()));
        }
        self.beta = beta;
        Ok(())
    }

    pub fn is_frozen(&self, row: usize) -> bool {
        self.frozen[row]
    }

    pub fn frozen_mask(&self) -> &[bool] {
        &self.frozen
    }

    pub fn set_frozen_mask(&mut self, mask: Vec<bool>) -> Result<()> {
        if mask.len() != self.frozen.len() {
            return Err(Error::dims("frozen mask", &[self.frozen.len()], &[mask.len()]));
        }
        self.frozen = mask;
        Ok(())
    }

    pub fn any_unfrozen(&self) -> bool {
        self.frozen.iter().any(|f| !f)
    }

    /// Releases a layer for search, drawing fresh logits for its groups.
    pub fn unfreeze_layer(&mut self, layer: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        if layer >= self.layers() {
            return Err(Error::Index {
                what: "searchable layer",
                index: layer,
                limit: self.layers(),
            });
        }
        let k = self.k();
        for r in self.layer_rows(layer) {
            for x in &mut self.beta.data_mut()[r * k..(r + 1) * k] {
                *x = BETA_INIT_SCALE * rng.sample::<f64, _>(StandardNormal);
            }
            self.frozen[r] = false;
        }
        Ok(())
    }

    /// `softmax(β)` per group.
    pub fn probabilities(&self) -> Tensor {
        let k = self.k();
        let data = (0..self.rows())
            .flat_map(|r| autodiff::softmax(self.beta.row(r)))
            .collect();
        Tensor::new(vec![self.rows(), k], data).expect("same shape as beta")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedSelection {
    pub o: Tensor,
    pub temperature: f64,
    pub gumbel: Tensor,
}

/// Gumbel noise `-log(-log u)` with `u` uniform on the open interval.
pub fn sample_gumbel(rows: usize, k: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * k)
        .map(|_| {
            let u: f64 = rng.sample(Open01);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(vec![rows, k], data).expect("shape matches data")
}

/// Relaxed one-hot for one group.
pub fn gumbel_softmax(beta_row: &[f64], temperature: f64, gumbel_row: &[f64]) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if beta_row.len() != gumbel_row.len() {
        return Err(Error::dims("gumbel_softmax", &[beta_row.len()], &[gumbel_row.len()]));
    }
    if beta_row.iter().any(|b| !b.is_finite()) {
        return Err(Error::Contract("architecture logits must be finite".into()));
    }
    // Multiplying by the reciprocal keeps this bit-identical to the graph form.
    let inv_t = 1.0 / temperature;
    let z: Vec<f64> = beta_row
        .iter()
        .zip(gumbel_row)
        .map(|(b, g)| (b + g) * inv_t)
        .collect();
    Ok(autodiff::softmax(&z))
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::Contract(format!("temperature must be positive, got {t}")))
    }
}

/// Samples a selection for every group from the current logits.
pub fn sample_selection(state: &BitAssignmentState, temperature: f64, rng: &mut impl Rng) -> Result<RelaxedSelection> {
    let gumbel = sample_gumbel(state.rows(), state.k(), rng);
    selection_with_noise(state, temperature, gumbel)
}

pub fn selection_with_noise(state: &BitAssignmentState, temperature: f64, gumbel: Tensor) -> Result<RelaxedSelection> {
    if gumbel.shape() != state.beta().shape() {
        return Err(Error::dims("gumbel noise", state.beta().shape(), gumbel.shape()));
    }
    let mut o = Vec::with_capacity(gumbel.numel());
    for r in 0..state.rows() {
        o.extend(gumbel_softmax(state.beta().row(r), temperature, gumbel.row(r))?);
    }
    Ok(RelaxedSelection {
        o: Tensor::new(gumbel.shape().to_vec(), o)?,
        temperature,
        gumbel,
    })
}

/// The same relaxation built in a graph so gradients reach `beta`.
pub fn gumbel_softmax_var(g: &mut Graph, beta: Var, gumbel: &Tensor, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    let noise = g.constant(gumbel.clone());
    let z = g.add(beta, noise)?;
    let z = g.scale(z, 1.0 / temperature);
    g.softmax_rows(z)
}

/// Annealed temperature: `t0` up to epoch `n0`, then decaying by `e^-eta`
/// per epoch.
pub fn temperature(epoch: usize, schedule: &SearchSchedule) -> f64 {
    if epoch <= schedule.n0 {
        schedule.t0
    } else {
        schedule.t0 * (-schedule.eta * (epoch - schedule.n0) as f64).exp()
    }
}

/// Effective weight of one searchable layer.
///
/// Unfrozen groups mix every candidate width by their selection weights;
/// frozen groups use `warmup_bits` alone. 0-bit branches are omitted since
/// they contribute exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn mixed_forward(
    g: &mut Graph,
    layer_weight: Var,
    layer: usize,
    groups: &[GroupSpec],
    state: &BitAssignmentState,
    selection: Var,
    cache: &QuantCache,
    warmup_bits: u32,
) -> Result<Var> {
    let k = state.k();
    let allowed = allowed_bits(state.candidate_bits(), warmup_bits);
    let mut parts = Vec::with_capacity(groups.len());
    for spec in groups {
        let w = g.slice_cols(layer_weight, spec.col_start, spec.col_end)?;
        let row = state.row_index(layer, spec.group_id);
        if state.is_frozen(row) {
            parts.push(quantize_at(g, w, layer, spec, warmup_bits, cache, &allowed)?);
            continue;
        }
        let mut acc: Option<Var> = None;
        for (ki, &bits) in state.candidate_bits().iter().enumerate() {
            if bits == 0 {
                continue;
            }
            let fq = quantize_at(g, w, layer, spec, bits, cache, &allowed)?;
            let weight = g.element(selection, row * k + ki)?;
            let term = g.mul(weight, fq)?;
            acc = Some(match acc {
                Some(a) => g.add(a, term)?,
                None => term,
            });
        }
        let part = match acc {
            Some(a) => a,
            None => g.constant(Tensor::zeros(g.value(w).shape())),
        };
        parts.push(part);
    }
    g.concat_cols(&parts)
}

fn quantize_at(
    g: &mut Graph,
    w: Var,
    layer: usize,
    spec: &GroupSpec,
    bits: u32,
    cache: &QuantCache,
    allowed: &[u32],
) -> Result<Var> {
    let params = if bits == 0 || bits == FULL_PRECISION_BITS {
        None
    } else {
        Some(cache.params(layer, spec.group_id, bits)?)
    };
    quant::fake_quantize_group(g, w, bits, params.as_ref(), allowed)
}

/// Widths a supernet may evaluate: candidates, the warmup width and the
/// full-precision passthrough.
pub fn allowed_bits(candidates: &[u32], warmup_bits: u32) -> Vec<u32> {
    let mut v = candidates.to_vec();
    v.push(warmup_bits);
    v.push(FULL_PRECISION_BITS);
    v.sort_unstable();
    v.dedup();
    v
}

/// Effective weights for every layer of `model` with fixed per-group
/// widths. Non-searchable layers pass through unchanged.
pub fn discrete_weights(
    g: &mut Graph,
    model: &GroupedModel,
    bound: &BoundParams,
    assignment: &Assignment,
    cache: &QuantCache,
) -> Result<Vec<Var>> {
    assignment.check_covers(model)?;
    let mut out = bound.weights.clone();
    for (sid, &li) in model.searchable_layers().iter().enumerate() {
        let mut parts = Vec::new();
        for spec in &model.groups()[sid] {
            let bits = assignment.bits(sid, spec.group_id)?;
            let w = g.slice_cols(bound.weights[li], spec.col_start, spec.col_end)?;
            parts.push(quantize_at(g, w, sid, spec, bits, cache, &[bits])?);
        }
        out[li] = g.concat_cols(&parts)?;
    }
    Ok(out)
}

/// A model with its relaxed architecture and quantization ranges.
#[derive(Clone, Debug)]
pub struct Supernet {
    pub model: GroupedModel,
    pub state: BitAssignmentState,
    pub cache: QuantCache,
    pub warmup_bits: u32,
    pub activation_bits: Option<u32>,
}

impl Supernet {
    pub fn new(model: GroupedModel, candidate_bits: &[u32], warmup_bits: u32, activation_bits: Option<u32>, seed: u64) -> Result<Self> {
        let state = BitAssignmentState::for_model(&model, candidate_bits, seed)?;
        let cache = QuantCache::from_weights(&model.searchable_weights(), model.groups())?;
        Ok(Supernet {
            model,
            state,
            cache,
            warmup_bits,
            activation_bits,
        })
    }

    pub fn refresh_scales(&mut self) -> Result<()> {
        self.cache.refresh(&self.model.searchable_weights(), self.model.groups())
    }

    /// Logits under the relaxed selection `selection` (an `R×K` node).
    pub fn forward(&self, g: &mut Graph, bound: &BoundParams, x: &Tensor, selection: Var) -> Result<Var> {
        let mut weights = bound.weights.clone();
        for (sid, &li) in self.model.searchable_layers().iter().enumerate() {
            weights[li] = mixed_forward(
                g,
                bound.weights[li],
                sid,
                &self.model.groups()[sid],
                &self.state,
                selection,
                &self.cache,
                self.warmup_bits,
            )?;
        }
        self.model.forward(g, &weights, &bound.biases, x, self.activation_bits)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AssignmentEntry {
    pub layer_id: usize,
    pub group_id: usize,
    pub bits: u32,
}

/// Discrete width per group, as exported to JSON.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub groups: Vec<AssignmentEntry>,
    pub total_size_bits: u64,
}

impl Assignment {
    pub fn from_entries(entries: Vec<AssignmentEntry>, model: &GroupedModel) -> Result<Self> {
        let mut a = Assignment {
            groups: entries,
            total_size_bits: 0,
        };
        a.check_covers(model)?;
        a.total_size_bits = model
            .all_groups()
            .map(|s| Ok(quant::group_size_bits(s, a.bits(s.layer_id, s.group_id)?)))
            .sum::<Result<u64>>()?;
        Ok(a)
    }

    /// Every group of `model` at the same width.
    pub fn uniform(model: &GroupedModel, bits: u32) -> Result<Self> {
        let entries = model
            .all_groups()
            .map(|s| AssignmentEntry {
                layer_id: s.layer_id,
                group_id: s.group_id,
                bits,
            })
            .collect();
        Self::from_entries(entries, model)
    }

    pub fn bits(&self, layer: usize, group: usize) -> Result<u32> {
        self.groups
            .iter()
            .find(|e| e.layer_id == layer && e.group_id == group)
            .map(|e| e.bits)
            .ok_or_else(|| Error::Config(format!("assignment has no entry for layer {layer} group {group}")))
    }

    /// Errors unless the entries match the model's groups one to one.
    pub fn check_covers(&self, model: &GroupedModel) -> Result<()> {
        let expected = model.all_groups().count();
        if self.groups.len() != expected {
            return Err(Error::Config(format!(
                "assignment has {} entries, model has {expected} groups",
                self.groups.len()
            )));
        }
        for s in model.all_groups() {
            self.bits(s.layer_id, s.group_id)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn count_bits(&self, bits: u32) -> usize {
        self.groups.iter().filter(|e| e.bits == bits).count()
    }
}

/// Most probable width per group; exact ties go to the smaller width.
pub fn derive_assignment(state: &BitAssignmentState, model: &GroupedModel) -> Result<Assignment> {
    let probs = state.probabilities();
    let bits = state.candidate_bits();
    let mut entries = Vec::with_capacity(state.rows());
    for (sid, specs) in model.groups().iter().enumerate() {
        for spec in specs {
            let row = probs.row(state.row_index(sid, spec.group_id));
            let mut best = 0;
            for k in 1..row.len() {
                if row[k] > row[best] || (row[k] == row[best] && bits[k] < bits[best]) {
                    best = k;
                }
            }
            entries.push(AssignmentEntry {
                layer_id: sid,
                group_id: spec.group_id,
                bits: bits[best],
            });
        }
    }
    Assignment::from_entries(entries, model)
}
