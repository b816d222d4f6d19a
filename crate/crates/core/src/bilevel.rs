//! Alternating optimization of weights (training split) and architecture
//! logits (validation split).
//!
//! Weight steps run AdamW on cross-entropy through the relaxed supernet
//! with β held fixed. Architecture steps run SGD on `CE + λ·L_size` with
//! the weights held fixed, either at the current weights (first order) or
//! after one virtual training step `ω' = ω − ξ∇ω L_train` (unrolled; the
//! Hessian cross term is not included).

use crate::autodiff::Graph;
use crate::config::{ArchMode, OptimizerConfig, SearchSchedule};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::objectives::{self, SizeObjectiveConfig};
use crate::optim::{clip_global_norm, AdamW, Sgd};
use crate::supernet::{self, RelaxedSelection, Supernet};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub weights: AdamW,
    pub arch: Sgd,
    pub unroll_rate: f64,
    pub clip_norm: f64,
}

impl OptimizerState {
    pub fn new(net: &Supernet, cfg: &OptimizerConfig, weight_lr: f64, unroll_rate: f64) -> Result<Self> {
        if !(unroll_rate >= 0.0) {
            return Err(Error::Config("unroll rate must be non-negative".into()));
        }
        Ok(OptimizerState {
            weights: AdamW::new(&net.model.params(), weight_lr, cfg.adam_eps, cfg.weight_decay),
            arch: Sgd { lr: cfg.arch_lr },
            unroll_rate,
            clip_norm: cfg.clip_norm,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Weight,
    Arch,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Weight => "weight",
            Phase::Arch => "arch",
        }
    }
}

/// What one optimizer step measured.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub loss_train: Option<f64>,
    pub loss_val: Option<f64>,
    pub ce: f64,
    /// `λ · L_size` at this step's selection.
    pub size_term: f64,
    pub c_actual_bits: f64,
    pub c_expected_bits: f64,
    pub temperature: f64,
}

/// Value of `λ · L_size` without building a graph.
pub fn size_term_value(actual: f64, expected: f64, cfg: &SizeObjectiveConfig) -> f64 {
    let penalty = match cfg.band(actual) {
        objectives::Band::Inside => 0.0,
        _ if expected <= 0.0 => 0.0,
        objectives::Band::Above => expected.ln(),
        objectives::Band::Below => -expected.ln(),
    };
    cfg.lambda * penalty
}

fn diagnostics(net: &Supernet) -> String {
    net.model
        .layers
        .iter()
        .map(|l| format!("{}={:.4e}", l.name, l.weight.l2_norm()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Cross-entropy and its weight gradients (unclipped) under `selection`.
fn train_gradients(net: &Supernet, batch: &Dataset, selection: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let bound = net.model.bind(&mut g, true);
    let sel = g.constant(selection.clone());
    let logits = net.forward(&mut g, &bound, &batch.features, sel)?;
    let ce = objectives::training_loss(&mut g, logits, &batch.labels)?;
    let loss = g.value(ce).item()?;
    if !loss.is_finite() {
        return Ok((loss, Vec::new()));
    }
    g.backward(ce)?;
    Ok((loss, net.model.collect_grads(&g, &bound)))
}

/// One AdamW update of every weight on a training batch. β is untouched.
pub fn weight_step(
    net: &mut Supernet,
    opt: &mut OptimizerState,
    batch: &Dataset,
    selection: &RelaxedSelection,
    objective: &SizeObjectiveConfig,
    cost: &Tensor,
    step: usize,
) -> Result<StepRecord> {
    let (loss, mut grads) = train_gradients(net, batch, &selection.o)?;
    if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            step,
            diagnostics: format!("train loss {loss}; weight norms: {}", diagnostics(net)),
        });
    }
    clip_global_norm(&mut grads, opt.clip_norm);
    opt.weights.step(&mut net.model.params_mut(), &grads)?;

    let actual = objectives::actual_size(&selection.o, cost)?;
    let expected = objectives::expected_size(&net.state, cost)?;
    Ok(StepRecord {
        loss_train: Some(loss),
        loss_val: None,
        ce: loss,
        size_term: size_term_value(actual, expected, objective),
        c_actual_bits: actual,
        c_expected_bits: expected,
        temperature: selection.temperature,
    })
}

/// Gradient of the validation objective with respect to β for the given
/// Gumbel draws. Rows of frozen groups are zero. The weights are restored
/// bit for bit before returning.
#[allow(clippy::too_many_arguments)]
pub fn arch_gradient(
    net: &mut Supernet,
    val_batch: &Dataset,
    train_batch: Option<&Dataset>,
    gumbel: &Tensor,
    temperature: f64,
    mode: ArchMode,
    unroll_rate: f64,
    objective: &SizeObjectiveConfig,
    cost: &Tensor,
) -> Result<(Tensor, StepRecord)> {
    let saved = match mode {
        ArchMode::FirstOrder => None,
        ArchMode::Unrolled => {
            let train = train_batch
                .ok_or_else(|| Error::Contract("unrolled mode needs a training batch".into()))?;
            let selection = supernet::selection_with_noise(&net.state, temperature, gumbel.clone())?;
            let (loss, grads) = train_gradients(net, train, &selection.o)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step: 0,
                    diagnostics: format!("unrolled train loss {loss}"),
                });
            }
            let saved: Vec<Tensor> = net.model.params().into_iter().cloned().collect();
            for (p, gr) in net.model.params_mut().into_iter().zip(&grads) {
                for (x, d) in p.data_mut().iter_mut().zip(gr.data()) {
                    *x -= unroll_rate * d;
                }
            }
            Some(saved)
        }
    };

    let result = val_gradient(net, val_batch, gumbel, temperature, objective, cost);

    if let Some(saved) = saved {
        for (p, s) in net.model.params_mut().into_iter().zip(saved) {
            *p = s;
        }
    }
    result
}

fn val_gradient(
    net: &Supernet,
    batch: &Dataset,
    gumbel: &Tensor,
    temperature: f64,
    objective: &SizeObjectiveConfig,
    cost: &Tensor,
) -> Result<(Tensor, StepRecord)> {
    let mut g = Graph::new();
    let bound = net.model.bind(&mut g, false);
    let beta = g.leaf(net.state.beta().clone(), true);
    let sel = supernet::gumbel_softmax_var(&mut g, beta, gumbel, temperature)?;
    let logits = net.forward(&mut g, &bound, &batch.features, sel)?;
    let val = objectives::validation_loss(&mut g, logits, &batch.labels, beta, sel, cost, objective)?;
    let total = g.value(val.total).item()?;
    let record = StepRecord {
        loss_train: None,
        loss_val: Some(total),
        ce: g.value(val.ce).item()?,
        size_term: g.value(val.size_term).item()?,
        c_actual_bits: val.report.actual_bits,
        c_expected_bits: val.report.expected_bits,
        temperature,
    };
    if !total.is_finite() {
        return Ok((Tensor::full(net.state.beta().shape(), f64::NAN), record));
    }
    g.backward(val.total)?;
    let mut grad = g
        .grad(beta)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(net.state.beta().shape()));
    let k = net.state.k();
    for r in 0..net.state.rows() {
        if net.state.is_frozen(r) {
            grad.data_mut()[r * k..(r + 1) * k].fill(0.0);
        }
    }
    Ok((grad, record))
}

/// One SGD update of β on a validation batch. Returns `None` (and logs a
/// warning) when every group is still frozen.
#[allow(clippy::too_many_arguments)]
pub fn arch_step(
    net: &mut Supernet,
    opt: &OptimizerState,
    val_batch: &Dataset,
    train_batch: Option<&Dataset>,
    gumbel: &Tensor,
    temperature: f64,
    mode: ArchMode,
    objective: &SizeObjectiveConfig,
    cost: &Tensor,
    step: usize,
) -> Result<Option<StepRecord>> {
    if !net.state.any_unfrozen() {
        log::warn!("step {step}: architecture step skipped, every group is frozen");
        return Ok(None);
    }
    let (grad, record) = arch_gradient(
        net,
        val_batch,
        train_batch,
        gumbel,
        temperature,
        mode,
        opt.unroll_rate,
        objective,
        cost,
    )?;
    if !record.loss_val.is_some_and(f64::is_finite) || !grad.is_finite() {
        return Err(Error::NonFinite {
            step,
            diagnostics: format!(
                "validation loss {:?}; weight norms: {}",
                record.loss_val,
                diagnostics(net)
            ),
        });
    }
    let mut grads = [grad];
    clip_global_norm(&mut grads, opt.clip_norm);
    let mut beta = net.state.beta().clone();
    opt.arch.step(&mut beta, &grads[0])?;
    net.state.set_beta(beta)?;
    Ok(Some(record))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Weight,
    Arch,
    Unfreeze(usize),
}

/// Action for global step `step`.
///
/// Steps before `warmup_steps` train weights only. After that, time is cut
/// into blocks of `block_steps`; block `i < layers` opens by unfreezing
/// searchable layer `i` (that step performs no update), and within every
/// block positions cycle through `weight_steps` weight updates followed by
/// `arch_steps` architecture updates. Architecture steps before epoch `n1`
/// are replaced by weight steps.
pub fn alternation_schedule(step: usize, schedule: &SearchSchedule, layers: usize, steps_per_epoch: usize) -> Action {
    if step < schedule.warmup_steps {
        return Action::Weight;
    }
    let offset = step - schedule.warmup_steps;
    let block = offset / schedule.block_steps;
    let within = offset % schedule.block_steps;
    if within == 0 && block < layers {
        return Action::Unfreeze(block);
    }
    let cycle = schedule.weight_steps + schedule.arch_steps;
    let action = if within % cycle < schedule.weight_steps {
        Action::Weight
    } else {
        Action::Arch
    };
    if action == Action::Arch && step / steps_per_epoch.max(1) < schedule.n1 {
        Action::Weight
    } else {
        action
    }
}
