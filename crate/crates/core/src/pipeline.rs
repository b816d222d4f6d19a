//! End-to-end search: warmup, alternating search, derivation, retraining
//! from scratch at the derived widths, and evaluation on the test split.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{self, Checkpoint, TraceRow};
use crate::autodiff::Graph;
use crate::bilevel::{self, Action, OptimizerState, Phase};
use crate::config::{ArchMode, RunConfig, BITS_PER_MB};
use crate::data::{self, Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::models::{self, GroupedModel};
use crate::objectives::{self, SizeObjectiveConfig};
use crate::optim::{clip_global_norm, AdamW};
use crate::quant::QuantCache;
use crate::rng::{self, Stream};
use crate::supernet::{self, Assignment, Supernet};
use crate::tensor::Tensor;

/// Consecutive non-finite steps tolerated before a run is aborted.
pub const DIVERGENCE_LIMIT: usize = 3;

pub const TRACE_FILE: &str = "trace.csv";
pub const ASSIGNMENT_FILE: &str = "assignment.json";
pub const REPORT_FILE: &str = "report.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const FINAL_CHECKPOINT_FILE: &str = "final.bin";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub seed: u64,
    pub test_accuracy: f64,
    pub size_bits: u64,
    pub size_mb: f64,
    pub full_precision_bits: u64,
    pub target_bits: f64,
    pub band_lower_bits: f64,
    pub band_upper_bits: f64,
    pub within_band: bool,
    pub groups: usize,
    pub pruned_groups: usize,
    pub retrain_steps: usize,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub trace: Vec<TraceRow>,
    pub assignment: Assignment,
    /// Supernet state at the end of the search.
    pub checkpoint: Checkpoint,
    /// Retrained weights at the derived widths.
    pub final_checkpoint: Checkpoint,
    pub report: FinalReport,
}

/// Cycles through a dataset in reshuffled passes.
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, rng: ChaCha8Rng) -> Self {
        let mut s = BatchSampler {
            order: (0..len).collect(),
            pos: len,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_indices(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }

    pub fn next_batch(&mut self, data: &Dataset, batch: usize) -> Result<Dataset> {
        let idx = self.next_indices(batch);
        data.batch(&idx)
    }
}

fn sub_rng(parent: &mut ChaCha8Rng) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(parent.gen())
}

pub fn load_data(cfg: &RunConfig) -> Result<DatasetSplit> {
    match &cfg.data.cache {
        Some(path) => Ok(data::load_or_generate(path, &cfg.data, cfg.seed)?.0),
        None => data::generate(&cfg.data, cfg.seed),
    }
}

pub fn build_model(cfg: &RunConfig, data: &DatasetSplit, seed: u64) -> Result<GroupedModel> {
    GroupedModel::from_config(&cfg.model, data.train.input_dim(), data.classes, seed)
}

pub fn resolve_objective(cfg: &RunConfig, model: &GroupedModel) -> Result<SizeObjectiveConfig> {
    cfg.objective.resolve(model.full_precision_bits())
}

/// State of a search in progress, exposed so callers can drive it step by
/// step.
pub struct Search {
    pub cfg: RunConfig,
    pub data: DatasetSplit,
    pub net: Supernet,
    pub opt: OptimizerState,
    pub objective: SizeObjectiveConfig,
    pub cost: Tensor,
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub trace: Vec<TraceRow>,
    pub last_selection: Option<Tensor>,
    step: usize,
    nonfinite_streak: usize,
    gumbel_rng: ChaCha8Rng,
    arch_rng: ChaCha8Rng,
    train_batches: BatchSampler,
    val_batches: BatchSampler,
    unroll_batches: BatchSampler,
}

impl Search {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = load_data(cfg)?;
        Self::with_data(cfg, data)
    }

    pub fn with_data(cfg: &RunConfig, data: DatasetSplit) -> Result<Self> {
        cfg.validate()?;
        let model = build_model(cfg, &data, cfg.seed)?;
        let net = Supernet::new(
            model,
            &cfg.search.bits,
            cfg.search.warmup_bits,
            cfg.search.activation_bits,
            cfg.seed,
        )?;
        let objective = resolve_objective(cfg, &net.model)?;
        let opt = OptimizerState::new(&net, &cfg.optimizer, cfg.optimizer.weight_lr, cfg.search.unroll_rate)?;
        let cost = objectives::cost_matrix(&net.state, &net.model);
        let steps_per_epoch = cfg.steps_per_epoch(data.train.len());
        let mut batch_rng = rng::stream(cfg.seed, Stream::Batches);
        let train_batches = BatchSampler::new(data.train.len(), sub_rng(&mut batch_rng));
        let val_batches = BatchSampler::new(data.val.len(), sub_rng(&mut batch_rng));
        let unroll_batches = BatchSampler::new(data.train.len(), sub_rng(&mut batch_rng));
        Ok(Search {
            cfg: cfg.clone(),
            data,
            net,
            opt,
            objective,
            cost,
            steps_per_epoch,
            total_steps: cfg.schedule.epochs * steps_per_epoch,
            trace: Vec::new(),
            last_selection: None,
            step: 0,
            nonfinite_streak: 0,
            gumbel_rng: rng::stream(cfg.seed, Stream::Gumbel),
            // Separate from the init stream used by `BitAssignmentState::init`.
            arch_rng: rng::stream(cfg.seed.wrapping_add(1), Stream::Arch),
            train_batches,
            val_batches,
            unroll_batches,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn temperature(&self) -> f64 {
        supernet::temperature(self.step / self.steps_per_epoch, &self.cfg.schedule)
    }

    /// Executes the scheduled action for the current step.
    pub fn advance(&mut self) -> Result<()> {
        let step = self.step;
        self.step += 1;
        let sched = &self.cfg.schedule;
        if step.is_multiple_of(sched.scale_refresh_steps) {
            self.net.refresh_scales()?;
        }
        let t = self.temperature_at(step);
        let layers = self.net.state.layers();
        let outcome = match bilevel::alternation_schedule(step, sched, layers, self.steps_per_epoch) {
            Action::Unfreeze(layer) => {
                self.net.state.unfreeze_layer(layer, &mut self.arch_rng)?;
                log::debug!("step {step}: unfroze searchable layer {layer}");
                return Ok(());
            }
            Action::Weight => self.weight(step, t),
            Action::Arch => self.arch(step, t),
        };
        match outcome {
            Ok(()) => {
                self.nonfinite_streak = 0;
                Ok(())
            }
            Err(Error::NonFinite { step, diagnostics }) => {
                self.nonfinite_streak += 1;
                log::warn!("step {step} skipped: {diagnostics}");
                if self.nonfinite_streak >= DIVERGENCE_LIMIT {
                    Err(Error::Diverged(format!(
                        "{DIVERGENCE_LIMIT} consecutive non-finite steps ending at step {step}: {diagnostics}"
                    )))
                } else {
                    Ok(())
                }
            }
            Err(e) => Err(e),
        }
    }

    fn temperature_at(&self, step: usize) -> f64 {
        supernet::temperature(step / self.steps_per_epoch, &self.cfg.schedule)
    }

    fn weight(&mut self, step: usize, t: f64) -> Result<()> {
        let selection = supernet::sample_selection(&self.net.state, t, &mut self.gumbel_rng)?;
        let batch = self.train_batches.next_batch(&self.data.train, self.cfg.schedule.batch_size)?;
        let record = bilevel::weight_step(
            &mut self.net,
            &mut self.opt,
            &batch,
            &selection,
            &self.objective,
            &self.cost,
            step,
        )?;
        let phase = if step < self.cfg.schedule.warmup_steps {
            Phase::Warmup
        } else {
            Phase::Weight
        };
        self.trace.push(TraceRow::new(step, phase, &record));
        self.last_selection = Some(selection.o);
        Ok(())
    }

    fn arch(&mut self, step: usize, t: f64) -> Result<()> {
        let noise = supernet::sample_gumbel(self.net.state.rows(), self.net.state.k(), &mut self.gumbel_rng);
        let batch_size = self.cfg.schedule.batch_size;
        let val = self.val_batches.next_batch(&self.data.val, batch_size)?;
        let train = match self.cfg.search.mode {
            ArchMode::Unrolled => Some(self.unroll_batches.next_batch(&self.data.train, batch_size)?),
            ArchMode::FirstOrder => None,
        };
        let selection = supernet::selection_with_noise(&self.net.state, t, noise.clone())?;
        let record = bilevel::arch_step(
            &mut self.net,
            &self.opt,
            &val,
            train.as_ref(),
            &noise,
            t,
            self.cfg.search.mode,
            &self.objective,
            &self.cost,
            step,
        )?;
        if let Some(record) = record {
            self.trace.push(TraceRow::new(step, Phase::Arch, &record));
            self.last_selection = Some(selection.o);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.net, self.last_selection.as_ref(), self.step as u64)
    }

    pub fn derive(&self) -> Result<Assignment> {
        supernet::derive_assignment(&self.net.state, &self.net.model)
    }
}

/// Runs the full procedure. With `out_dir`, writes the trace, assignment,
/// report, checkpoints and resolved config there; on divergence the
/// partial trace and checkpoint are written before the error is returned.
pub fn run_search(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<RunArtifacts> {
    let mut search = Search::new(cfg)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml_string()?)?;
    }
    while !search.is_done() {
        if let Err(e) = search.advance() {
            if let Some(dir) = out_dir {
                artifacts::write_trace(&dir.join(TRACE_FILE), &search.trace)?;
                search.checkpoint().save(&dir.join(CHECKPOINT_FILE))?;
            }
            return Err(e);
        }
    }
    let assignment = search.derive()?;
    let checkpoint = search.checkpoint();
    let outcome = retrain(&assignment, cfg, &search.data)?;
    let report = outcome.report(cfg, &assignment, &search.objective, search.net.model.full_precision_bits());
    let mut final_net = search.net.clone();
    final_net.model = outcome.model;
    let final_checkpoint = Checkpoint::capture(&final_net, None, outcome.steps as u64);

    if let Some(dir) = out_dir {
        artifacts::write_trace(&dir.join(TRACE_FILE), &search.trace)?;
        std::fs::write(dir.join(ASSIGNMENT_FILE), assignment.to_json()?)?;
        std::fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(&report)?)?;
        checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
        final_checkpoint.save(&dir.join(FINAL_CHECKPOINT_FILE))?;
    }
    Ok(RunArtifacts {
        trace: search.trace,
        assignment,
        checkpoint,
        final_checkpoint,
        report,
    })
}

/// A model trained at fixed widths.
#[derive(Clone, Debug)]
pub struct RetrainOutcome {
    pub model: GroupedModel,
    pub test_accuracy: f64,
    pub size_bits: u64,
    pub steps: usize,
}

impl RetrainOutcome {
    pub fn report(&self, cfg: &RunConfig, assignment: &Assignment, objective: &SizeObjectiveConfig, full_precision_bits: u64) -> FinalReport {
        FinalReport {
            seed: cfg.seed,
            test_accuracy: self.test_accuracy,
            size_bits: self.size_bits,
            size_mb: self.size_bits as f64 / BITS_PER_MB,
            full_precision_bits,
            target_bits: objective.target_bits,
            band_lower_bits: objective.lower(),
            band_upper_bits: objective.upper(),
            within_band: objective.band(self.size_bits as f64) == objectives::Band::Inside,
            groups: assignment.groups.len(),
            pruned_groups: assignment.count_bits(0),
            retrain_steps: self.steps,
        }
    }
}

/// Re-initializes the weights from a seed derived from the run seed and
/// trains them on the whole training pool (train + val) at the fixed
/// widths of `assignment`, then evaluates on the test split.
pub fn retrain(assignment: &Assignment, cfg: &RunConfig, data: &DatasetSplit) -> Result<RetrainOutcome> {
    let fresh_seed: u64 = rng::stream(cfg.seed, Stream::Retrain).gen();
    let mut model = build_model(cfg, data, fresh_seed)?;
    assignment.check_covers(&model)?;
    let size_bits = objectives::assignment_size(assignment, &model)?;
    let pool = data.training_pool()?;
    let lr = cfg.retrain.lr.unwrap_or(cfg.optimizer.weight_lr);
    let mut opt = AdamW::new(&model.params(), lr, cfg.optimizer.adam_eps, cfg.optimizer.weight_decay);
    let mut sampler = BatchSampler::new(pool.len(), rng::stream(fresh_seed, Stream::Batches));
    let mut cache = QuantCache::from_weights(&model.searchable_weights(), model.groups())?;
    let act = cfg.search.activation_bits;
    let mut streak = 0;
    for step in 0..cfg.retrain.steps {
        if step % cfg.schedule.scale_refresh_steps == 0 {
            cache.refresh(&model.searchable_weights(), model.groups())?;
        }
        let batch = sampler.next_batch(&pool, cfg.schedule.batch_size)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let weights = supernet::discrete_weights(&mut g, &model, &bound, assignment, &cache)?;
        let logits = model.forward(&mut g, &weights, &bound.biases, &batch.features, act)?;
        let ce = objectives::training_loss(&mut g, logits, &batch.labels)?;
        if !g.value(ce).item()?.is_finite() {
            streak += 1;
            if streak >= DIVERGENCE_LIMIT {
                return Err(Error::Diverged(format!("retraining diverged at step {step}")));
            }
            continue;
        }
        streak = 0;
        g.backward(ce)?;
        let mut grads = model.collect_grads(&g, &bound);
        clip_global_norm(&mut grads, cfg.optimizer.clip_norm);
        opt.step(&mut model.params_mut(), &grads)?;
    }
    cache.refresh(&model.searchable_weights(), model.groups())?;
    let test_accuracy = evaluate(&model, assignment, &cache, &data.test, act)?;
    Ok(RetrainOutcome {
        model,
        test_accuracy,
        size_bits,
        steps: cfg.retrain.steps,
    })
}

/// Test accuracy of `model` at the widths of `assignment`.
pub fn evaluate(model: &GroupedModel, assignment: &Assignment, cache: &QuantCache, data: &Dataset, activation_bits: Option<u32>) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let weights = supernet::discrete_weights(&mut g, model, &bound, assignment, cache)?;
    let logits = model.forward(&mut g, &weights, &bound.biases, &data.features, activation_bits)?;
    Ok(models::accuracy(g.value(logits), &data.labels))
}

/// Restores a checkpoint into a freshly built supernet for `cfg` and
/// evaluates it on the test split. Without `assignment`, widths are derived
/// from the checkpoint's logits.
pub fn evaluate_checkpoint(cfg: &RunConfig, checkpoint: &Checkpoint, assignment: Option<&Assignment>) -> Result<(f64, Assignment)> {
    let data = load_data(cfg)?;
    let model = build_model(cfg, &data, cfg.seed)?;
    let mut net = Supernet::new(model, &cfg.search.bits, cfg.search.warmup_bits, cfg.search.activation_bits, cfg.seed)?;
    checkpoint.restore_into(&mut net)?;
    let assignment = match assignment {
        Some(a) => a.clone(),
        None => supernet::derive_assignment(&net.state, &net.model)?,
    };
    let acc = evaluate(&net.model, &assignment, &net.cache, &data.test, cfg.search.activation_bits)?;
    Ok((acc, assignment))
}
