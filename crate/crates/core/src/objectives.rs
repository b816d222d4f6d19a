//! Losses for the two levels of the search.
//!
//! The weight level minimizes plain cross-entropy. The architecture level
//! adds `λ · L_size`, a piecewise penalty that is zero while the sampled
//! size `C` sits inside `[(1-ε)V, (1+ε)V]` and otherwise equals
//! `±log E[C]`, signed so that descent moves the expected size toward the
//! band. Sizes are counted in bits: a group of `n` weights at `b` bits
//! costs `n·b`.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::models::GroupedModel;
use crate::supernet::{Assignment, BitAssignmentState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SizeObjectiveConfig {
    pub target_bits: f64,
    pub epsilon: f64,
    pub lambda: f64,
}

impl SizeObjectiveConfig {
    pub fn new(target_bits: f64, epsilon: f64, lambda: f64) -> Result<Self> {
        if !(target_bits > 0.0) || !(0.0..=1.0).contains(&epsilon) || !(lambda >= 0.0) {
            return Err(Error::Config(format!(
                "need target > 0, epsilon in [0, 1], lambda ≥ 0; got {target_bits}, {epsilon}, {lambda}"
            )));
        }
        Ok(SizeObjectiveConfig {
            target_bits,
            epsilon,
            lambda,
        })
    }

    pub fn lower(&self) -> f64 {
        (1.0 - self.epsilon) * self.target_bits
    }

    pub fn upper(&self) -> f64 {
        (1.0 + self.epsilon) * self.target_bits
    }

    pub fn band(&self, size_bits: f64) -> Band {
        if size_bits > self.upper() {
            Band::Above
        } else if size_bits < self.lower() {
            Band::Below
        } else {
            Band::Inside
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Band {
    Below,
    Inside,
    Above,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SizeReport {
    pub actual_bits: f64,
    pub expected_bits: f64,
    pub band: Band,
    pub loss_value: f64,
}

/// `cost[r, k] = param_count(r) · bits[k]`, the size of group `r` if it
/// took candidate `k`.
pub fn cost_matrix(state: &BitAssignmentState, model: &GroupedModel) -> Tensor {
    let bits = state.candidate_bits();
    let mut cost = Tensor::zeros(&[state.rows(), bits.len()]);
    let k = bits.len();
    for spec in model.all_groups() {
        let r = state.row_index(spec.layer_id, spec.group_id);
        for (ki, &b) in bits.iter().enumerate() {
            cost.data_mut()[r * k + ki] = spec.param_count as f64 * b as f64;
        }
    }
    cost
}

/// Size under a relaxed (or one-hot) selection: `Σ_r Σ_k cost[r,k]·O[r,k]`.
pub fn actual_size(selection: &Tensor, cost: &Tensor) -> Result<f64> {
    if selection.shape() != cost.shape() {
        return Err(Error::dims("actual_size", selection.shape(), cost.shape()));
    }
    Ok(selection.data().iter().zip(cost.data()).map(|(o, c)| o * c).sum())
}

/// Exact size of a discrete assignment.
pub fn assignment_size(assignment: &Assignment, model: &GroupedModel) -> Result<u64> {
    model
        .all_groups()
        .map(|s| Ok(crate::quant::group_size_bits(s, assignment.bits(s.layer_id, s.group_id)?)))
        .sum()
}

/// `Σ_r Σ_k cost[r,k]·softmax(β)[r,k]`.
pub fn expected_size(state: &BitAssignmentState, cost: &Tensor) -> Result<f64> {
    actual_size(&state.probabilities(), cost)
}

/// Graph form of [`actual_size`].
pub fn actual_size_var(g: &mut Graph, selection: Var, cost: &Tensor) -> Result<Var> {
    let c = g.constant(cost.clone());
    let weighted = g.mul(selection, c)?;
    Ok(g.sum(weighted))
}

/// Graph form of [`expected_size`], differentiable in `beta`.
pub fn expected_size_var(g: &mut Graph, beta: Var, cost: &Tensor) -> Result<Var> {
    let p = g.softmax_rows(beta)?;
    actual_size_var(g, p, cost)
}

/// The piecewise size penalty. The band test reads `actual_bits`; the
/// penalty magnitude is `log E[C]` from the `expected` node. Inside the band
/// the result is a constant zero with no gradient. When `E[C] ≤ 0` outside
/// the band the penalty is floored at `log(0 + 1) = 0`.
pub fn size_loss(g: &mut Graph, actual_bits: f64, expected: Var, cfg: &SizeObjectiveConfig) -> Result<(Var, Band)> {
    let band = cfg.band(actual_bits);
    let e = g.value(expected).item()?;
    let loss = match band {
        Band::Inside => g.constant(Tensor::scalar(0.0)),
        _ if e <= 0.0 => g.constant(Tensor::scalar(0.0)),
        Band::Above => g.log(expected)?,
        Band::Below => {
            let l = g.log(expected)?;
            g.scale(l, -1.0)
        }
    };
    Ok((loss, band))
}

/// Nodes of the architecture-level loss.
#[derive(Clone, Copy, Debug)]
pub struct ValidationLoss {
    pub total: Var,
    pub ce: Var,
    /// `λ · L_size`.
    pub size_term: Var,
    pub report: SizeReport,
}

/// `CE(logits, labels) + λ · L_size`.
pub fn validation_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    beta: Var,
    selection: Var,
    cost: &Tensor,
    cfg: &SizeObjectiveConfig,
) -> Result<ValidationLoss> {
    let ce = training_loss(g, logits, labels)?;
    let actual = actual_size(g.value(selection), cost)?;
    let expected = expected_size_var(g, beta, cost)?;
    let expected_bits = g.value(expected).item()?;
    let (penalty, band) = size_loss(g, actual, expected, cfg)?;
    let loss_value = g.value(penalty).item()?;
    let size_term = g.scale(penalty, cfg.lambda);
    let total = g.add(ce, size_term)?;
    Ok(ValidationLoss {
        total,
        ce,
        size_term,
        report: SizeReport {
            actual_bits: actual,
            expected_bits,
            band,
            loss_value,
        },
    })
}

/// Plain cross-entropy used at the weight level.
pub fn training_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.softmax_cross_entropy(logits, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(target: f64) -> SizeObjectiveConfig {
        SizeObjectiveConfig::new(target, 0.1, 1.0).unwrap()
    }

    #[test]
    fn band_edges_are_inside() {
        let c = cfg(100.0);
        assert_eq!(c.band(90.0), Band::Inside);
        assert_eq!(c.band(110.0), Band::Inside);
        assert_eq!(c.band(89.9), Band::Below);
        assert_eq!(c.band(110.1), Band::Above);
    }

    #[test]
    fn penalty_values_per_branch() {
        let mut g = Graph::new();
        let e = g.leaf(Tensor::scalar(std::f64::consts::E), true);
        let (above, band) = size_loss(&mut g, 1000.0, e, &cfg(100.0)).unwrap();
        assert_eq!(band, Band::Above);
        assert!((g.value(above).item().unwrap() - 1.0).abs() < 1e-15);
        let (below, _) = size_loss(&mut g, 1.0, e, &cfg(100.0)).unwrap();
        assert!((g.value(below).item().unwrap() + 1.0).abs() < 1e-15);
        let (inside, _) = size_loss(&mut g, 100.0, e, &cfg(100.0)).unwrap();
        assert_eq!(g.value(inside).item().unwrap(), 0.0);
        g.backward(inside).unwrap();
        assert!(g.grad(e).is_none());
    }

    #[test]
    fn zero_expectation_outside_band_is_floored() {
        let mut g = Graph::new();
        let e = g.leaf(Tensor::scalar(0.0), true);
        let (l, _) = size_loss(&mut g, 0.0, e, &cfg(100.0)).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(SizeObjectiveConfig::new(0.0, 0.1, 1.0).is_err());
        assert!(SizeObjectiveConfig::new(10.0, 1.1, 1.0).is_err());
        assert!(SizeObjectiveConfig::new(10.0, 0.1, -1.0).is_err());
    }
}
