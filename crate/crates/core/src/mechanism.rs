//! Invariance of a model to counterfactual interventions, invariance sets and
//! mechanistic similarity.

use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config, Error, Result};
use crate::grid::{CounterfactualKind, GridDataset};
use crate::nn::{evaluate, LossKind, ModelParams};
use crate::rng;
use crate::slab::{InterventionSpec, SlabDataset};

/// A dataset that can produce counterfactual copies of itself.
pub trait Counterfactuals {
    /// One intervention. A list of unit edits applied in order, so
    /// compositions are plain concatenation.
    type Unit: Clone + Debug;

    fn base(&self) -> &Dataset;

    /// Counterfactual dataset after applying `units` in order.
    fn apply(&self, units: &[Self::Unit], seed: u64) -> Result<Dataset>;
}

impl Counterfactuals for SlabDataset {
    type Unit = InterventionSpec;

    fn base(&self) -> &Dataset {
        &self.data
    }

    fn apply(&self, units: &[InterventionSpec], seed: u64) -> Result<Dataset> {
        Ok(self.intervene_all(units, seed)?.data)
    }
}

impl Counterfactuals for GridDataset {
    type Unit = CounterfactualKind;

    fn base(&self) -> &Dataset {
        &self.data
    }

    fn apply(&self, units: &[CounterfactualKind], seed: u64) -> Result<Dataset> {
        let mut cur = self.clone();
        for (j, &k) in units.iter().enumerate() {
            cur = cur.counterfactual(k, rng::derive_seed(seed, &[j as u64]))?;
        }
        Ok(cur.data)
    }
}

/// Monte Carlo estimate of the loss change caused by an intervention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapEstimate {
    pub base_loss: f64,
    pub counterfactual_loss: f64,
    /// `counterfactual_loss - base_loss`.
    pub gap: f64,
    /// Standard error of the gap over repeats (0 for a single repeat).
    pub std_error: f64,
    pub base_accuracy: f64,
    pub counterfactual_accuracy: f64,
    /// `counterfactual_accuracy - base_accuracy`.
    pub accuracy_gap: f64,
}

/// Mean over `repeats` counterfactual draws of the loss minus the base loss.
pub fn invariance_gap<S: Counterfactuals>(
    model: &ModelParams,
    source: &S,
    intervention: &[S::Unit],
    loss: LossKind,
    repeats: usize,
    seed: u64,
) -> Result<GapEstimate> {
    if repeats == 0 {
        return config("at least one counterfactual draw is needed");
    }
    if intervention.is_empty() {
        return config("empty intervention");
    }
    let base = evaluate(model, source.base(), loss)?;
    let mut losses = Vec::with_capacity(repeats);
    let mut acc = 0.0;
    for r in 0..repeats {
        let cf = source.apply(intervention, rng::derive_seed(seed, &[r as u64]))?;
        let e = evaluate(model, &cf, loss)?;
        losses.push(e.loss);
        acc += e.accuracy;
    }
    let n = repeats as f64;
    let mean = losses.iter().sum::<f64>() / n;
    let std_error = if repeats > 1 {
        let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    let acc = acc / n;
    Ok(GapEstimate {
        base_loss: base.loss,
        counterfactual_loss: mean,
        gap: mean - base.loss,
        std_error,
        base_accuracy: base.accuracy,
        counterfactual_accuracy: acc,
        accuracy_gap: acc - base.accuracy,
    })
}

/// Tolerance on the loss gap below which a model counts as invariant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Threshold {
    /// Fraction of the base loss.
    Relative(f64),
    Absolute(f64),
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Relative(0.05)
    }
}

impl Threshold {
    pub fn resolve(self, base_loss: f64) -> f64 {
        match self {
            Threshold::Relative(f) => f * base_loss,
            Threshold::Absolute(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceRecord {
    pub intervention: String,
    pub base_loss: f64,
    pub counterfactual_loss: f64,
    pub gap: f64,
    pub std_error: f64,
    pub accuracy_gap: f64,
    /// Absolute tolerance the gap was compared against.
    pub tolerance: f64,
    pub invariant: bool,
}

/// Invariance of one model to a fixed list of interventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceProfile {
    pub threshold: Threshold,
    pub records: Vec<InvarianceRecord>,
}

impl InvarianceProfile {
    /// Names of the interventions the model is invariant to.
    pub fn invariant_set(&self) -> Vec<&str> {
        self.records.iter().filter(|r| r.invariant).map(|r| r.intervention.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&InvarianceRecord> {
        self.records.iter().find(|r| r.intervention == name)
    }
}

/// Gap for every named intervention, flagged against `threshold`.
pub fn invariance_set<S: Counterfactuals>(
    model: &ModelParams,
    source: &S,
    interventions: &[(String, Vec<S::Unit>)],
    threshold: Threshold,
    loss: LossKind,
    repeats: usize,
    seed: u64,
) -> Result<InvarianceProfile> {
    if interventions.is_empty() {
        return config("intervention list is empty");
    }
    let mut records = Vec::with_capacity(interventions.len());
    for (j, (name, units)) in interventions.iter().enumerate() {
        let g = invariance_gap(model, source, units, loss, repeats, rng::derive_seed(seed, &[j as u64]))?;
        let tolerance = threshold.resolve(g.base_loss);
        records.push(InvarianceRecord {
            intervention: name.clone(),
            base_loss: g.base_loss,
            counterfactual_loss: g.counterfactual_loss,
            gap: g.gap,
            std_error: g.std_error,
            accuracy_gap: g.accuracy_gap,
            tolerance,
            invariant: g.gap <= tolerance,
        });
    }
    Ok(InvarianceProfile { threshold, records })
}

/// Whether two models are invariant to exactly the same interventions.
pub fn mechanistically_similar(a: &InvarianceProfile, b: &InvarianceProfile) -> Result<bool> {
    if a.threshold != b.threshold {
        return Err(Error::Incompatible("profiles use different thresholds".into()));
    }
    let names = |p: &InvarianceProfile| p.records.iter().map(|r| r.intervention.clone()).collect::<Vec<_>>();
    if names(a) != names(b) {
        return Err(Error::Incompatible("profiles cover different interventions".into()));
    }
    Ok(a.records.iter().zip(&b.records).all(|(x, y)| x.invariant == y.invariant))
}

/// Standard errors allowed on top of the tolerance in [`composition_check`].
pub const COMPOSITION_SIGMAS: f64 = 3.0;

/// Gaps of two interventions and of their composition (`a` then `b`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositionCheck {
    pub gap_a: f64,
    pub gap_b: f64,
    pub gap_composed: f64,
    /// Tolerance resolved against the base loss.
    pub tolerance: f64,
    /// Monte Carlo allowance added to the bounds.
    pub noise: f64,
    pub invariant_a: bool,
    pub invariant_b: bool,
    /// Invariant to both: the composition gap is at most `2 tol + noise`.
    /// Invariant to exactly one: it is at least `g - 2 tol - noise`, `g` the
    /// other gap. Vacuously true when invariant to neither.
    pub consistent: bool,
}

/// Checks that invariance to two interventions carries over to their
/// composition, and that lacking invariance to one of them rules it out.
#[allow(clippy::too_many_arguments)]
pub fn composition_check<S: Counterfactuals>(
    model: &ModelParams,
    source: &S,
    a: &[S::Unit],
    b: &[S::Unit],
    threshold: Threshold,
    loss: LossKind,
    repeats: usize,
    seed: u64,
) -> Result<CompositionCheck> {
    let ga = invariance_gap(model, source, a, loss, repeats, rng::derive_seed(seed, &[0]))?;
    let gb = invariance_gap(model, source, b, loss, repeats, rng::derive_seed(seed, &[1]))?;
    let both: Vec<S::Unit> = a.iter().chain(b).cloned().collect();
    let gc = invariance_gap(model, source, &both, loss, repeats, rng::derive_seed(seed, &[2]))?;
    let tolerance = threshold.resolve(ga.base_loss);
    let noise = COMPOSITION_SIGMAS * (gc.std_error + ga.std_error.max(gb.std_error));
    let (ia, ib) = (ga.gap <= tolerance, gb.gap <= tolerance);
    let consistent = match (ia, ib) {
        (true, true) => gc.gap <= 2.0 * tolerance + noise,
        (false, true) => gc.gap >= ga.gap - 2.0 * tolerance - noise,
        (true, false) => gc.gap >= gb.gap - 2.0 * tolerance - noise,
        (false, false) => true,
    };
    Ok(CompositionCheck {
        gap_a: ga.gap,
        gap_b: gb.gap,
        gap_composed: gc.gap,
        tolerance,
        noise,
        invariant_a: ia,
        invariant_b: ib,
        consistent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, Architecture};
    use crate::slab::{NoiseFamily, SlabAttribute, SlabConfig};

    fn slab() -> SlabDataset {
        SlabDataset::generate(&SlabConfig {
            dim: 8,
            attributes: vec![
                SlabAttribute { k: 0, predictive: true },
                SlabAttribute { k: 4, predictive: true },
            ],
            delta: 0.1,
            noise: NoiseFamily::Uniform,
            num_samples: 400,
            seed: 2,
            boundary: Default::default(),
        })
        .unwrap()
    }

    fn list() -> Vec<(String, Vec<InterventionSpec>)> {
        vec![
            ("rand_0".into(), vec![InterventionSpec::randomize(0)]),
            ("rand_1".into(), vec![InterventionSpec::randomize(1)]),
        ]
    }

    #[test]
    fn blind_column_gives_exactly_zero_gap() {
        let mut m = init_model(&Architecture::mlp(&[8, 6, 2]), 1).unwrap();
        m.layers_mut()[0].weights.row_mut(1).fill(0.0);
        let ds = slab();
        let g = invariance_gap(&m, &ds, &[InterventionSpec::randomize(1)], LossKind::CrossEntropy, 3, 0)
            .unwrap();
        assert_eq!(g.gap, 0.0);
        assert_eq!(g.accuracy_gap, 0.0);
    }

    #[test]
    fn profiles_are_deterministic_and_well_formed() {
        let m = init_model(&Architecture::mlp(&[8, 6, 2]), 1).unwrap();
        let ds = slab();
        let p = invariance_set(&m, &ds, &list(), Threshold::default(), LossKind::CrossEntropy, 2, 5).unwrap();
        let q = invariance_set(&m, &ds, &list(), Threshold::default(), LossKind::CrossEntropy, 2, 5).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.records.len(), 2);
        for r in &p.records {
            assert_eq!(r.invariant, r.gap <= r.tolerance);
            assert!(r.base_loss.is_finite() && r.counterfactual_loss.is_finite());
        }
        assert!(mechanistically_similar(&p, &p).unwrap());
    }

    #[test]
    fn mismatched_profiles_cannot_be_compared() {
        let m = init_model(&Architecture::mlp(&[8, 6, 2]), 1).unwrap();
        let ds = slab();
        let p = invariance_set(&m, &ds, &list(), Threshold::default(), LossKind::CrossEntropy, 1, 5).unwrap();
        let q = invariance_set(&m, &ds, &list()[..1], Threshold::default(), LossKind::CrossEntropy, 1, 5)
            .unwrap();
        assert!(mechanistically_similar(&p, &q).is_err());
        let r = invariance_set(&m, &ds, &list(), Threshold::Absolute(0.1), LossKind::CrossEntropy, 1, 5)
            .unwrap();
        assert!(mechanistically_similar(&p, &r).is_err());
    }

    #[test]
    fn zero_repeats_is_rejected() {
        let m = init_model(&Architecture::mlp(&[8, 6, 2]), 1).unwrap();
        assert!(invariance_gap(&m, &slab(), &[InterventionSpec::randomize(0)], LossKind::CrossEntropy, 0, 0)
            .is_err());
    }
}
