//! Importance criteria for ranking prunable units.
//!
//! Five criteria are provided, all pure scoring functions from the current
//! network, a fixed batch, and a layer index to one non-negative score per
//! unit:
//!
//! - magnitude: `‖W_l^n‖_p`
//! - gradient: `‖∇_{W_l^n} loss‖_p` from one backward pass
//! - magnitude × gradient: the elementwise product of the two
//! - summed gradient: `Σ_s ‖∇_{μ^s W_l^n} loss‖_p` along a geometric decay
//!   path toward removal
//! - integrated gradient: `Σ_s ‖μ^s W_l^n‖_p · ‖∇_{μ^s W_l^n} loss‖_p`
//!
//! Path criteria temporarily scale one unit at a time while every other unit
//! stays at its current value; a fresh backward pass evaluates the gradient
//! at each point. The caller's network is never mutated: scoring works on an
//! internal copy, which also makes the copy-per-worker parallel mode safe.
//! Scores use one fixed batch for all units and all path steps of a pass so
//! the resulting ranking is free of sampling noise.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Batch, Network};
use crate::pruner::LayerMask;
use crate::tensor::{norm_p, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    /// `L^p` norm of the unit's weights.
    Magnitude,
    /// `p`-norm of the loss gradient with respect to the unit's weights.
    Gradient,
    /// Magnitude times gradient norm.
    MagnitudeGradient,
    /// Sum of gradient norms along the decay path (no magnitude factor).
    SummedGradient,
    /// Sum of magnitude × gradient norm along the decay path.
    IntegratedGradient,
}

impl CriterionKind {
    pub fn is_path_based(&self) -> bool {
        matches!(
            self,
            CriterionKind::SummedGradient | CriterionKind::IntegratedGradient
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Whole neurons / conv output channels.
    Neuron,
    /// Single scalar weights; norms degenerate to absolute values.
    Weight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriterionSpec {
    pub kind: CriterionKind,
    /// Norm order, 1 or 2.
    pub p: u8,
    /// Per-step decay factor of the integration path, in (0, 1).
    pub mu: f64,
    /// Path ends once the scaled magnitude falls to this fraction of the
    /// original, in (0, 1).
    pub stop_epsilon: f64,
    pub granularity: Granularity,
}

impl CriterionSpec {
    pub fn new(
        kind: CriterionKind,
        p: u8,
        mu: f64,
        stop_epsilon: f64,
        granularity: Granularity,
    ) -> Result<Self> {
        let spec = Self {
            kind,
            p,
            mu,
            stop_epsilon,
            granularity,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.p, 1 | 2) {
            return Err(Error::InvalidArgument(format!(
                "norm order must be 1 or 2, got {}",
                self.p
            )));
        }
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "update rate must lie in (0, 1), got {}",
                self.mu
            )));
        }
        if !(self.stop_epsilon > 0.0 && self.stop_epsilon < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "stop fraction must lie in (0, 1), got {}",
                self.stop_epsilon
            )));
        }
        Ok(())
    }

    /// Final path step `S`: the smallest integer with `mu^S <= stop_epsilon`,
    /// i.e. `ceil(ln(stop_epsilon) / ln(mu))`. The path visits `S + 1`
    /// points, `s = 0..=S`.
    pub fn path_steps(&self) -> usize {
        (self.stop_epsilon.ln() / self.mu.ln()).ceil() as usize
    }
}

/// Scores for every unit of one layer, indexable by unit. Units masked out at
/// scoring time hold a placeholder 0.0 and are skipped by selection.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub layer_index: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    /// `‖μ^s W_l^n‖_p`; successive points shrink by exactly `mu`.
    pub magnitude: f64,
    /// `‖∇_{μ^s W_l^n} loss‖_p`.
    pub grad_norm: f64,
}

/// The (magnitude, gradient norm) pairs visited by the integrated criterion
/// for one unit, in path order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub layer_index: usize,
    pub unit_index: usize,
    pub points: Vec<TrajectoryPoint>,
}

impl TrajectoryRecord {
    pub const CSV_HEADER: &'static str = "layer,neuron,s,magnitude,grad_norm";

    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        for (s, pt) in self.points.iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{}",
                self.layer_index, self.unit_index, s, pt.magnitude, pt.grad_norm
            )?;
        }
        Ok(())
    }
}

/// Options for the scoring dispatcher.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScoreOptions<'a> {
    /// Units already masked are skipped and score 0.0.
    pub mask: Option<&'a LayerMask>,
    /// Copy-per-worker parallel evaluation of path criteria; results are
    /// bit-identical to sequential mode.
    pub parallel: bool,
}

/// `p`-norms of each unit's weights (the last tensor axis indexes units).
pub fn unit_norms(weights: &Tensor, p: u8) -> Vec<f64> {
    let units = *weights.shape().last().unwrap();
    let rows = weights.len() / units;
    (0..units)
        .map(|n| norm_p((0..rows).map(|r| weights.data()[r * units + n]), p))
        .collect()
}

fn check_p(p: u8) -> Result<()> {
    if matches!(p, 1 | 2) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "norm order must be 1 or 2, got {p}"
        )))
    }
}

fn check_layer(net: &Network, layer: usize) -> Result<()> {
    if layer >= net.num_layers() {
        return Err(Error::IndexOutOfRange {
            what: "layer",
            index: layer,
            len: net.num_layers(),
        });
    }
    Ok(())
}

/// Magnitude criterion: independent of the data and the rest of the network.
pub fn criterion_lp(net: &Network, layer: usize, p: u8) -> Result<ScoreVector> {
    check_p(p)?;
    check_layer(net, layer)?;
    Ok(ScoreVector {
        layer_index: layer,
        scores: unit_norms(net.layer(layer).weights(), p),
    })
}

/// Gradient criterion from a single backward pass at the current weights.
pub fn criterion_grad(net: &Network, batch: &Batch, layer: usize, p: u8) -> Result<ScoreVector> {
    check_p(p)?;
    check_layer(net, layer)?;
    let trace = net.trace_from(0, batch.inputs.clone())?;
    net_check_labels(net, batch)?;
    let prefix = trace.input_of(layer).clone();
    let suffix = net.trace_from(layer, prefix.clone())?;
    let delta = net.delta_at(&suffix, &batch.labels)?;
    let units = net.layer(layer).unit_count();
    let scores = (0..units)
        .map(|n| {
            let g = net.unit_grad(layer, n, &prefix, &delta);
            norm_p(g.into_iter(), p)
        })
        .collect();
    Ok(ScoreVector {
        layer_index: layer,
        scores,
    })
}

fn net_check_labels(net: &Network, batch: &Batch) -> Result<()> {
    let classes = net.output_dim();
    for &l in &batch.labels {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
    }
    Ok(())
}

/// Magnitude × gradient: the exact elementwise product of `criterion_lp` and
/// `criterion_grad`.
pub fn criterion_mag_grad(
    net: &Network,
    batch: &Batch,
    layer: usize,
    p: u8,
) -> Result<ScoreVector> {
    let mags = criterion_lp(net, layer, p)?;
    let grads = criterion_grad(net, batch, layer, p)?;
    Ok(ScoreVector {
        layer_index: layer,
        scores: mags
            .scores
            .iter()
            .zip(&grads.scores)
            .map(|(m, g)| m * g)
            .collect(),
    })
}

/// Integrated criterion: `Σ_s ‖μ^s W_l^n‖_p · ‖∇_{μ^s W_l^n} loss‖_p`.
pub fn criterion_ig(
    net: &Network,
    batch: &Batch,
    layer: usize,
    spec: &CriterionSpec,
) -> Result<ScoreVector> {
    expect_kind(spec, CriterionKind::IntegratedGradient)?;
    score_with(net, batch, layer, spec, &ScoreOptions::default())
}

/// Summed-gradient variant: drops the magnitude factor from each path term.
pub fn criterion_sg(
    net: &Network,
    batch: &Batch,
    layer: usize,
    spec: &CriterionSpec,
) -> Result<ScoreVector> {
    expect_kind(spec, CriterionKind::SummedGradient)?;
    score_with(net, batch, layer, spec, &ScoreOptions::default())
}

fn expect_kind(spec: &CriterionSpec, kind: CriterionKind) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::InvalidArgument(format!(
            "criterion kind {:?} does not match requested {:?}",
            spec.kind, kind
        )));
    }
    Ok(())
}

/// Dispatcher over criterion kinds and both granularities.
pub fn score(
    net: &Network,
    batch: &Batch,
    layer: usize,
    spec: &CriterionSpec,
) -> Result<ScoreVector> {
    score_with(net, batch, layer, spec, &ScoreOptions::default())
}

pub fn score_with(
    net: &Network,
    batch: &Batch,
    layer: usize,
    spec: &CriterionSpec,
    opts: &ScoreOptions,
) -> Result<ScoreVector> {
    spec.validate()?;
    check_layer(net, layer)?;
    if let Some(mask) = opts.mask {
        let expect = match spec.granularity {
            Granularity::Neuron => net.layer(layer).unit_count(),
            Granularity::Weight => net.layer(layer).weight_count(),
        };
        if mask.len() != expect {
            return Err(Error::MaskMismatch(format!(
                "mask length {} vs {} scoreable units in layer {layer}",
                mask.len(),
                expect
            )));
        }
    }
    let scores = match spec.granularity {
        Granularity::Neuron => score_neurons(net, batch, layer, spec, opts)?,
        Granularity::Weight => score_weights(net, batch, layer, spec, opts)?,
    };
    let mut scores = ScoreVector {
        layer_index: layer,
        scores,
    };
    if let Some(mask) = opts.mask {
        for (i, s) in scores.scores.iter_mut().enumerate() {
            if mask.is_masked(i) {
                *s = 0.0;
            }
        }
    }
    Ok(scores)
}

fn score_neurons(
    net: &Network,
    batch: &Batch,
    layer: usize,
    spec: &CriterionSpec,
    opts: &ScoreOptions,
) -> Result<Vec<f64>> {
    match spec.kind {
        CriterionKind::Magnitude => Ok(criterion_lp(net, layer, spec.p)?.scores),
        CriterionKind::Gradient => Ok(criterion_grad(net, batch, layer, spec.p)?.scores),
        CriterionKind::MagnitudeGradient => {
            Ok(criterion_mag_grad(net, batch, layer, spec.p)?.scores)
        }
        CriterionKind::SummedGradient | CriterionKind::IntegratedGradient => {
            net_check_labels(net, batch)?;
            let prefix = net.input_activation_of(layer, batch)?;
            let units = net.layer(layer).unit_count();
            let weighted = spec.kind == CriterionKind::IntegratedGradient;
            let active: Vec<usize> = (0..units)
                .filter(|&n| opts.mask.map_or(true, |m| !m.is_masked(n)))
                .collect();
            let eval = |&n: &usize| -> Result<(usize, f64)> {
                // A zero-magnitude unit contributes zero to every weighted
                // term; skip the backward passes.
                if weighted {
                    let mag = norm_p(net.layer(layer).unit_weights(n), spec.p);
                    if mag == 0.0 {
                        return Ok((n, 0.0));
                    }
                }
                let points = unit_path(net, &prefix, &batch.labels, layer, n, spec)?;
                Ok((n, path_sum(&points, weighted)))
            };
            let computed: Vec<(usize, f64)> = if opts.parallel {
                active.par_iter().map(eval).collect::<Result<_>>()?
            } else {
                active.iter().map(eval).collect::<Result<_>>()?
            };
            let mut scores = vec![0.0; units];
            for (n, s) in computed {
                scores[n] = s;
            }
            Ok(scores)
        }
    }
}

fn score_weights(
    net: &Network,
    batch: &Batch,
    layer: usize,
    spec: &CriterionSpec,
    opts: &ScoreOptions,
) -> Result<Vec<f64>> {
    let w = net.layer(layer).weights();
    match spec.kind {
        CriterionKind::Magnitude => Ok(w.data().iter().map(|v| v.abs()).collect()),
        CriterionKind::Gradient | CriterionKind::MagnitudeGradient => {
            net_check_labels(net, batch)?;
            let prefix = net.input_activation_of(layer, batch)?;
            let suffix = net.trace_from(layer, prefix.clone())?;
            let delta = net.delta_at(&suffix, &batch.labels)?;
            let grad = net.layer_gradient(layer, &prefix, &delta);
            let gabs = grad.weights.data().iter().map(|g| g.abs());
            Ok(match spec.kind {
                CriterionKind::Gradient => gabs.collect(),
                _ => w.data().iter().zip(gabs).map(|(v, g)| v.abs() * g).collect(),
            })
        }
        CriterionKind::SummedGradient | CriterionKind::IntegratedGradient => {
            net_check_labels(net, batch)?;
            let prefix = net.input_activation_of(layer, batch)?;
            let weighted = spec.kind == CriterionKind::IntegratedGradient;
            let count = w.len();
            let active: Vec<usize> = (0..count)
                .filter(|&i| opts.mask.map_or(true, |m| !m.is_masked(i)))
                .collect();
            let eval = |&i: &usize| -> Result<(usize, f64)> {
                if weighted && net.layer(layer).weights().data()[i] == 0.0 {
                    return Ok((i, 0.0));
                }
                let points = weight_path(net, &prefix, &batch.labels, layer, i, spec)?;
                Ok((i, path_sum(&points, weighted)))
            };
            let computed: Vec<(usize, f64)> = if opts.parallel {
                active.par_iter().map(eval).collect::<Result<_>>()?
            } else {
                active.iter().map(eval).collect::<Result<_>>()?
            };
            let mut scores = vec![0.0; count];
            for (i, s) in computed {
                scores[i] = s;
            }
            Ok(scores)
        }
    }
}

fn path_sum(points: &[TrajectoryPoint], weighted: bool) -> f64 {
    points
        .iter()
        .map(|pt| {
            if weighted {
                pt.magnitude * pt.grad_norm
            } else {
                pt.grad_norm
            }
        })
        .sum()
}

/// Walk one unit's decay path on a private copy of the network, recording the
/// (magnitude, gradient norm) pair at each step. Activations before the
/// scored layer are fixed, so the forward pass restarts there.
fn unit_path(
    net: &Network,
    prefix: &Tensor,
    labels: &[usize],
    layer: usize,
    unit: usize,
    spec: &CriterionSpec,
) -> Result<Vec<TrajectoryPoint>> {
    let mut work = net.clone();
    let original: Vec<f64> = work.layer(layer).unit_weights(unit).collect();
    let original_bias = work.layer(layer).bias().data()[unit];
    let mut magnitude = norm_p(original.iter().copied(), spec.p);
    let mut factor = 1.0;
    let steps = spec.path_steps();
    let mut points = Vec::with_capacity(steps + 1);
    for _ in 0..=steps {
        work.set_unit_scaled(layer, unit, &original, original_bias, factor);
        let trace = work.trace_from(layer, prefix.clone())?;
        let delta = work.delta_at(&trace, labels)?;
        let grad = work.unit_grad(layer, unit, prefix, &delta);
        points.push(TrajectoryPoint {
            magnitude,
            grad_norm: norm_p(grad.into_iter(), spec.p),
        });
        factor *= spec.mu;
        magnitude *= spec.mu;
    }
    Ok(points)
}

fn weight_path(
    net: &Network,
    prefix: &Tensor,
    labels: &[usize],
    layer: usize,
    index: usize,
    spec: &CriterionSpec,
) -> Result<Vec<TrajectoryPoint>> {
    let mut work = net.clone();
    let original = work.layer(layer).weights().data()[index];
    let mut magnitude = original.abs();
    let mut factor = 1.0;
    let steps = spec.path_steps();
    let mut points = Vec::with_capacity(steps + 1);
    for _ in 0..=steps {
        work.layer_mut(layer).weights_mut().data_mut()[index] = original * factor;
        let trace = work.trace_from(layer, prefix.clone())?;
        let delta = work.delta_at(&trace, labels)?;
        let grad = work.weight_grad(layer, index, prefix, &delta);
        points.push(TrajectoryPoint {
            magnitude,
            grad_norm: grad.abs(),
        });
        factor *= spec.mu;
        magnitude *= spec.mu;
    }
    Ok(points)
}

/// The (magnitude, gradient norm) pairs visited by the integrated criterion
/// for one unit, in path order `s = 0..=S`.
pub fn trajectory_log(
    net: &Network,
    batch: &Batch,
    layer: usize,
    unit: usize,
    spec: &CriterionSpec,
) -> Result<TrajectoryRecord> {
    spec.validate()?;
    check_layer(net, layer)?;
    net_check_labels(net, batch)?;
    let prefix = net.input_activation_of(layer, batch)?;
    let points = match spec.granularity {
        Granularity::Neuron => {
            let units = net.layer(layer).unit_count();
            if unit >= units {
                return Err(Error::IndexOutOfRange {
                    what: "unit",
                    index: unit,
                    len: units,
                });
            }
            unit_path(net, &prefix, &batch.labels, layer, unit, spec)?
        }
        Granularity::Weight => {
            let count = net.layer(layer).weight_count();
            if unit >= count {
                return Err(Error::IndexOutOfRange {
                    what: "weight",
                    index: unit,
                    len: count,
                });
            }
            weight_path(net, &prefix, &batch.labels, layer, unit, spec)?
        }
    };
    Ok(TrajectoryRecord {
        layer_index: layer,
        unit_index: unit,
        points,
    })
}

/// Reference trapezoid quadrature of the decay-path integral for one unit,
/// on a uniform grid of `n_points` intervals over the scale in [0, 1].
///
/// Unweighted: `∫ ‖∇_{μ W^n} loss‖_p dμ`. Weighted: the integrand carries the
/// scaled magnitude factor `‖μ W^n‖_p` as well.
pub fn integral_oracle(
    net: &Network,
    batch: &Batch,
    layer: usize,
    unit: usize,
    p: u8,
    n_points: usize,
    weighted: bool,
) -> Result<f64> {
    check_p(p)?;
    check_layer(net, layer)?;
    net_check_labels(net, batch)?;
    if n_points < 100 {
        return Err(Error::InvalidArgument(format!(
            "quadrature needs at least 100 points, got {n_points}"
        )));
    }
    let units = net.layer(layer).unit_count();
    if unit >= units {
        return Err(Error::IndexOutOfRange {
            what: "unit",
            index: unit,
            len: units,
        });
    }
    let prefix = net.input_activation_of(layer, batch)?;
    let mut work = net.clone();
    let original: Vec<f64> = work.layer(layer).unit_weights(unit).collect();
    let original_bias = work.layer(layer).bias().data()[unit];
    let base_mag = norm_p(original.iter().copied(), p);
    let h = 1.0 / n_points as f64;
    let mut sum = 0.0;
    for i in 0..=n_points {
        let factor = i as f64 * h;
        work.set_unit_scaled(layer, unit, &original, original_bias, factor);
        let trace = work.trace_from(layer, prefix.clone())?;
        let delta = work.delta_at(&trace, &batch.labels)?;
        let grad = work.unit_grad(layer, unit, &prefix, &delta);
        let mut f = norm_p(grad.into_iter(), p);
        if weighted {
            f *= factor * base_mag;
        }
        let w = if i == 0 || i == n_points { 0.5 } else { 1.0 };
        sum += w * f;
    }
    Ok(sum * h)
}

/// Rescale per-step path terms by the geometric grid's local measure
/// `μ^s (1 - μ)`, turning a path sum into a quadrature estimate of the
/// corresponding integral over [0, 1].
pub fn geometric_quadrature(points: &[TrajectoryPoint], mu: f64, weighted: bool) -> f64 {
    let mut width = 1.0 - mu;
    let mut sum = 0.0;
    for pt in points {
        let f = if weighted {
            pt.magnitude * pt.grad_norm
        } else {
            pt.grad_norm
        };
        sum += width * f;
        width *= mu;
    }
    sum
}
