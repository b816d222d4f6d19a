//! Uniform min/max fake quantization of weight sub-groups.
//!
//! A sub-group `A` quantized at `b ≥ 1` bits uses the scale
//! `q = (2^b - 1) / (max(A) - min(A))`, codes `round(q·(a - min))` and
//! dequantizes back with `code / q + min`. Zero bits prunes the group and
//! [`FULL_PRECISION_BITS`] leaves it untouched.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Width that stands for an unquantized 32-bit float.
pub const FULL_PRECISION_BITS: u32 = 32;

/// Ranges narrower than this carry no usable scale.
pub const DEGENERATE_RANGE: f64 = 1e-12;

/// One column slice `[col_start, col_end)` of a searchable weight matrix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub layer_id: usize,
    pub group_id: usize,
    pub col_start: usize,
    pub col_end: usize,
    pub param_count: usize,
}

impl GroupSpec {
    pub fn width(&self) -> usize {
        self.col_end - self.col_start
    }
}

/// Splits the columns of a `rows×cols` matrix into `groups` equal slices.
pub fn partition_columns(layer_id: usize, rows: usize, cols: usize, groups: usize) -> Result<Vec<GroupSpec>> {
    if groups == 0 || !cols.is_multiple_of(groups) {
        return Err(Error::Config(format!(
            "layer {layer_id}: {cols} columns are not divisible into {groups} groups"
        )));
    }
    let width = cols / groups;
    Ok((0..groups)
        .map(|j| GroupSpec {
            layer_id,
            group_id: j,
            col_start: j * width,
            col_end: (j + 1) * width,
            param_count: rows * width,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Scale {
    Factor(f64),
    Degenerate,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantParams {
    pub bits: u32,
    pub min: f64,
    pub max: f64,
    pub scale: Scale,
}

impl QuantParams {
    pub fn from_range(min: f64, max: f64, bits: u32) -> Result<Self> {
        if bits == 0 {
            return Err(Error::Contract("0-bit groups have no scale".into()));
        }
        if bits >= 53 {
            return Err(Error::Contract(format!("{bits}-bit codes exceed f64 precision")));
        }
        let range = max - min;
        let scale = if range < DEGENERATE_RANGE {
            Scale::Degenerate
        } else {
            Scale::Factor(levels(bits) / range)
        };
        Ok(QuantParams { bits, min, max, scale })
    }

    pub fn max_code(&self) -> u64 {
        (1u64 << self.bits) - 1
    }

    pub fn is_degenerate(&self) -> bool {
        self.scale == Scale::Degenerate
    }

    /// Quantize-dequantize of one value; out-of-range inputs are clamped.
    pub fn round_trip(&self, a: f64) -> f64 {
        match self.scale {
            Scale::Degenerate => self.min,
            Scale::Factor(q) => {
                let code = (q * (a.clamp(self.min, self.max) - self.min)).round();
                code / q + self.min
            }
        }
    }
}

fn levels(bits: u32) -> f64 {
    ((1u64 << bits) - 1) as f64
}

/// Scale for a sub-group at `bits ≥ 1`.
pub fn compute_scale(values: &[f64], bits: u32) -> Result<QuantParams> {
    if values.is_empty() {
        return Err(Error::Contract("cannot scale an empty group".into()));
    }
    let (min, max) = min_max(values);
    QuantParams::from_range(min, max, bits)
}

pub fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Integer code of `a`, rounding half away from zero. Values outside the
/// recorded range (stale scales) are clamped first.
pub fn quantize_code(a: f64, params: &QuantParams) -> Result<u64> {
    match params.scale {
        Scale::Degenerate => Err(Error::Contract(
            "quantize_code on degenerate params; caller must branch".into(),
        )),
        Scale::Factor(q) => {
            let code = (q * (a.clamp(params.min, params.max) - params.min)).round();
            Ok((code.max(0.0) as u64).min(params.max_code()))
        }
    }
}

pub fn dequantize(code: u64, params: &QuantParams) -> Result<f64> {
    if code > params.max_code() {
        return Err(Error::Contract(format!(
            "code {code} outside [0, {}]",
            params.max_code()
        )));
    }
    Ok(match params.scale {
        Scale::Degenerate => params.min,
        Scale::Factor(q) => code as f64 / q + params.min,
    })
}

/// Fake-quantizes a weight slice already in the graph.
///
/// * `0` bits: a constant zero tensor, so no gradient reaches `w`.
/// * [`FULL_PRECISION_BITS`]: `w` itself.
/// * otherwise: dequantized codes behind a straight-through node whose
///   backward is the identity onto `w`.
///
/// `allowed` lists the widths the caller's configuration permits.
pub fn fake_quantize_group(
    g: &mut Graph,
    w: Var,
    bits: u32,
    params: Option<&QuantParams>,
    allowed: &[u32],
) -> Result<Var> {
    if !allowed.contains(&bits) {
        return Err(Error::Config(format!(
            "{bits} bits is not an allowed precision (allowed {allowed:?})"
        )));
    }
    match bits {
        0 => Ok(g.constant(Tensor::zeros(g.value(w).shape()))),
        FULL_PRECISION_BITS => Ok(w),
        _ => {
            let p = params.ok_or_else(|| {
                Error::Internal(format!("no quantization params for {bits}-bit group"))
            })?;
            if p.bits != bits {
                return Err(Error::Internal(format!(
                    "params computed for {} bits used at {bits}",
                    p.bits
                )));
            }
            let quantized = g.value(w).map(|a| p.round_trip(a));
            g.straight_through(quantized, w)
        }
    }
}

/// Fake-quantizes an activation tensor with a range taken from its own
/// values (per-layer, per-batch).
pub fn fake_quantize_activations(g: &mut Graph, x: Var, bits: u32) -> Result<Var> {
    let p = compute_scale(g.value(x).data(), bits)?;
    let quantized = g.value(x).map(|a| p.round_trip(a));
    g.straight_through(quantized, x)
}

/// Storage cost of a group in bits. Zero bits means the group is pruned.
pub fn group_size_bits(spec: &GroupSpec, bits: u32) -> u64 {
    spec.param_count as u64 * bits as u64
}

/// Per-group `(min, max)` ranges, refreshed on a fixed cadence and reused
/// for every bit width in between.
#[derive(Clone, Debug, Default)]
pub struct QuantCache {
    ranges: Vec<Vec<(f64, f64)>>,
}

impl QuantCache {
    pub fn from_weights(weights: &[&Tensor], groups: &[Vec<GroupSpec>]) -> Result<Self> {
        let mut cache = QuantCache::default();
        cache.refresh(weights, groups)?;
        Ok(cache)
    }

    pub fn refresh(&mut self, weights: &[&Tensor], groups: &[Vec<GroupSpec>]) -> Result<()> {
        if weights.len() != groups.len() {
            return Err(Error::Internal(format!(
                "{} weight matrices for {} group lists",
                weights.len(),
                groups.len()
            )));
        }
        self.ranges = weights
            .iter()
            .zip(groups)
            .map(|(w, specs)| {
                specs
                    .iter()
                    .map(|s| Ok(min_max(w.slice_cols(s.col_start, s.col_end)?.data())))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        Ok(())
    }

    pub fn range(&self, layer: usize, group: usize) -> Result<(f64, f64)> {
        self.ranges
            .get(layer)
            .and_then(|l| l.get(group))
            .copied()
            .ok_or_else(|| Error::Internal(format!("no cached range for layer {layer} group {group}")))
    }

    pub fn params(&self, layer: usize, group: usize, bits: u32) -> Result<QuantParams> {
        let (min, max) = self.range(layer, group)?;
        QuantParams::from_range(min, max, bits)
    }
}
