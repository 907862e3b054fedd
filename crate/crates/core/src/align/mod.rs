//! Hidden-unit activation patterns, distances between them, and permutation
//! alignment of one network's hidden units to another's.

mod assignment;

use std::io::Write;

use ndarray::{s, Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

pub use assignment::{solve_assignment, Assignment};

use crate::data::Dataset;
use crate::error::{config, shape, Error, Result};
use crate::nn::{Dense, ModelParams};
use crate::report::fmt_f64;

/// Samples processed at once when streaming activations.
pub const MATCH_BATCH: usize = 512;

/// Which hidden units fire on which samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationPatterns {
    /// Per hidden layer, `samples x units`, 1 where the pre-activation is positive.
    pub layers: Vec<Array2<u8>>,
}

impl ActivationPatterns {
    /// Fraction of samples on which each unit fires, per layer.
    pub fn unit_rates(&self) -> Vec<Array1<f64>> {
        self.layers
            .iter()
            .map(|p| p.map(|&b| f64::from(b)).mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(p.ncols())))
            .collect()
    }

    /// Mean firing rate of each layer.
    pub fn layer_rates(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|p| p.iter().map(|&b| f64::from(b)).sum::<f64>() / p.len().max(1) as f64)
            .collect()
    }

    /// CSV histogram of per-unit firing rates: `layer,bin_lo,bin_hi,count`.
    pub fn write_rate_histogram<W: Write>(&self, mut w: W, bins: usize) -> Result<()> {
        if bins == 0 {
            return config("histogram needs at least one bin");
        }
        writeln!(w, "layer,bin_lo,bin_hi,count")?;
        for (l, rates) in self.unit_rates().iter().enumerate() {
            let mut counts = vec![0usize; bins];
            for &r in rates {
                counts[((r * bins as f64) as usize).min(bins - 1)] += 1;
            }
            for (b, c) in counts.iter().enumerate() {
                let lo = b as f64 / bins as f64;
                let hi = (b + 1) as f64 / bins as f64;
                writeln!(w, "{l},{},{},{c}", fmt_f64(lo), fmt_f64(hi))?;
            }
        }
        Ok(())
    }
}

pub fn activation_patterns(model: &ModelParams, data: &Dataset) -> Result<ActivationPatterns> {
    let widths = model.hidden_widths();
    let mut layers: Vec<Array2<u8>> = widths.iter().map(|&w| Array2::zeros((data.len(), w))).collect();
    for start in (0..data.len()).step_by(MATCH_BATCH) {
        let end = (start + MATCH_BATCH).min(data.len());
        let trace = model.forward_trace(data.inputs().slice(s![start..end, ..]))?;
        for (dst, pre) in layers.iter_mut().zip(&trace.pre) {
            dst.slice_mut(s![start..end, ..]).zip_mut_with(pre, |d, &z| *d = u8::from(z > 0.0));
        }
    }
    Ok(ActivationPatterns { layers })
}

/// Distance between the firing-count distributions of two models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct W1Distance {
    pub per_layer: Vec<f64>,
    pub overall: f64,
}

/// Per sample `|sum(a) - sum(b)| / N`, averaged over samples, then over layers.
pub fn w1_distance(a: &ActivationPatterns, b: &ActivationPatterns) -> Result<W1Distance> {
    if a.layers.len() != b.layers.len() || a.layers.iter().zip(&b.layers).any(|(x, y)| x.dim() != y.dim()) {
        return shape("activation patterns have different shapes");
    }
    let per_layer: Vec<f64> = a
        .layers
        .iter()
        .zip(&b.layers)
        .map(|(pa, pb)| {
            let n = pa.ncols() as f64;
            let total: f64 = pa
                .rows()
                .into_iter()
                .zip(pb.rows())
                .map(|(ra, rb)| {
                    let ca: u64 = ra.iter().map(|&v| u64::from(v)).sum();
                    let cb: u64 = rb.iter().map(|&v| u64::from(v)).sum();
                    ca.abs_diff(cb) as f64 / n
                })
                .sum();
            total / pa.nrows().max(1) as f64
        })
        .collect();
    let overall = per_layer.iter().sum::<f64>() / per_layer.len().max(1) as f64;
    Ok(W1Distance { per_layer, overall })
}

/// Fraction of (sample, unit) entries on which two pattern sets disagree.
pub fn pattern_mismatch(a: &ActivationPatterns, b: &ActivationPatterns) -> Result<f64> {
    if a.layers.len() != b.layers.len() || a.layers.iter().zip(&b.layers).any(|(x, y)| x.dim() != y.dim()) {
        return shape("activation patterns have different shapes");
    }
    let (mut diff, mut total) = (0usize, 0usize);
    for (pa, pb) in a.layers.iter().zip(&b.layers) {
        diff += pa.iter().zip(pb.iter()).filter(|(x, y)| x != y).count();
        total += pa.len();
    }
    Ok(diff as f64 / total.max(1) as f64)
}

/// One permutation per hidden layer. Applying it makes new unit `k` of layer
/// `l` the old unit `layers[l][k]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationMap {
    pub layers: Vec<Vec<usize>>,
}

fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&i| i < p.len() && !std::mem::replace(&mut seen[i], true))
}

impl PermutationMap {
    pub fn identity(model: &ModelParams) -> Self {
        Self { layers: model.hidden_widths().into_iter().map(|w| (0..w).collect()).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        match self.layers.iter().position(|p| !is_permutation(p)) {
            Some(l) => config(format!("layer {l} of the map is not a permutation")),
            None => Ok(()),
        }
    }

    pub fn inverse(&self) -> PermutationMap {
        PermutationMap {
            layers: self
                .layers
                .iter()
                .map(|p| {
                    let mut inv = vec![0; p.len()];
                    p.iter().enumerate().for_each(|(k, &old)| inv[old] = k);
                    inv
                })
                .collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.layers.iter().all(|p| p.iter().enumerate().all(|(k, &v)| k == v))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: PermutationMap = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }
}

/// Reorder hidden units: output columns and bias of layer `l`, and input rows
/// of layer `l + 1`. The output layer is never permuted, so the computed
/// function is unchanged.
pub fn apply_permutation(model: &ModelParams, map: &PermutationMap) -> Result<ModelParams> {
    map.validate()?;
    let widths = model.hidden_widths();
    if map.layers.len() != widths.len() || map.layers.iter().zip(&widths).any(|(p, &w)| p.len() != w) {
        return shape(format!("map does not fit hidden widths {widths:?}"));
    }
    let mut out = model.clone();
    for (l, perm) in map.layers.iter().enumerate() {
        permute_layer(out.layers_mut(), l, perm);
    }
    Ok(out)
}

fn permute_layer(layers: &mut [Dense], l: usize, perm: &[usize]) {
    let d = &mut layers[l];
    // `select` along columns may return a column-major array.
    d.weights = d.weights.select(Axis(1), perm).as_standard_layout().into_owned();
    if let Some(b) = &mut d.bias {
        *b = b.select(Axis(0), perm);
    }
    if let Some(next) = layers.get_mut(l + 1) {
        next.weights = next.weights.select(Axis(0), perm).as_standard_layout().into_owned();
    }
}

/// Similarity used to pair units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchCost {
    /// Squared distance between post-activation vectors over the dataset.
    #[default]
    SquaredDistance,
    /// Negative Pearson correlation of post-activations.
    Correlation,
}

/// How layers are processed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Every layer matched on the raw activations of both models.
    #[default]
    Independent,
    /// Each layer's permutation is applied to the second model before the
    /// next layer is matched.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchOptions {
    pub cost: MatchCost,
    pub mode: MatchMode,
}

/// Streaming sums over samples needed for either cost.
struct Moments {
    n: f64,
    sum_a: Array1<f64>,
    sum_b: Array1<f64>,
    sq_a: Array1<f64>,
    sq_b: Array1<f64>,
    cross: Array2<f64>,
}

impl Moments {
    fn new(w: usize) -> Self {
        Self {
            n: 0.0,
            sum_a: Array1::zeros(w),
            sum_b: Array1::zeros(w),
            sq_a: Array1::zeros(w),
            sq_b: Array1::zeros(w),
            cross: Array2::zeros((w, w)),
        }
    }

    fn add(&mut self, a: &Array2<f64>, b: &Array2<f64>) {
        self.n += a.nrows() as f64;
        self.sum_a += &a.sum_axis(Axis(0));
        self.sum_b += &b.sum_axis(Axis(0));
        self.sq_a += &a.mapv(|v| v * v).sum_axis(Axis(0));
        self.sq_b += &b.mapv(|v| v * v).sum_axis(Axis(0));
        self.cross += &a.t().dot(b);
    }

    fn cost(&self, kind: MatchCost) -> Array2<f64> {
        let w = self.cross.nrows();
        match kind {
            MatchCost::SquaredDistance => Array2::from_shape_fn((w, w), |(i, j)| {
                (self.sq_a[i] + self.sq_b[j] - 2.0 * self.cross[[i, j]]).max(0.0)
            }),
            MatchCost::Correlation => {
                let n = self.n;
                let sd = |sq: f64, s: f64| ((sq - s * s / n).max(0.0)).sqrt();
                Array2::from_shape_fn((w, w), |(i, j)| {
                    let (da, db) = (sd(self.sq_a[i], self.sum_a[i]), sd(self.sq_b[j], self.sum_b[j]));
                    if da == 0.0 || db == 0.0 {
                        return 0.0;
                    }
                    -(self.cross[[i, j]] - self.sum_a[i] * self.sum_b[j] / n) / (da * db)
                })
            }
        }
    }
}

/// Permutation-invariant fingerprint distance between units: sorted incoming
/// weights, bias and sorted outgoing weights. Separates units that fire
/// identically on the data (for instance units that never fire).
fn weight_fingerprint_cost(a: &ModelParams, b: &ModelParams, l: usize) -> Array2<f64> {
    let fingerprint = |m: &ModelParams| -> Vec<Vec<f64>> {
        let d = &m.layers()[l];
        (0..d.fan_out())
            .map(|k| {
                let mut inc: Vec<f64> = d.weights.column(k).to_vec();
                inc.sort_by(f64::total_cmp);
                if let Some(bias) = &d.bias {
                    inc.push(bias[k]);
                }
                if let Some(next) = m.layers().get(l + 1) {
                    let mut out: Vec<f64> = next.weights.row(k).to_vec();
                    out.sort_by(f64::total_cmp);
                    inc.extend(out);
                }
                inc
            })
            .collect()
    };
    let (fa, fb) = (fingerprint(a), fingerprint(b));
    Array2::from_shape_fn((fa.len(), fb.len()), |(i, j)| {
        fa[i].iter().zip(&fb[j]).map(|(x, y)| (x - y) * (x - y)).sum()
    })
}

/// Relative weight of the fingerprint term; small enough never to overturn a
/// genuine activation difference.
const TIE_BREAK_WEIGHT: f64 = 1e-9;

fn hidden_batches(
    a: &ModelParams,
    b: &ModelParams,
    data: &Dataset,
    layer: usize,
    mut f: impl FnMut(&Array2<f64>, &Array2<f64>),
) -> Result<()> {
    let all = data.inputs();
    for start in (0..data.len()).step_by(MATCH_BATCH) {
        let end = (start + MATCH_BATCH).min(data.len());
        let x = all.slice(s![start..end, ..]);
        let (ta, tb) = (a.forward_trace(x)?, b.forward_trace(x)?);
        f(&ta.post[layer], &tb.post[layer]);
    }
    Ok(())
}

/// Permutation of `b`'s hidden units that best matches `a`'s activations on
/// `data`, solved exactly per layer. `apply_permutation(b, map)` is the
/// aligned model.
pub fn match_by_activations(
    a: &ModelParams,
    b: &ModelParams,
    data: &Dataset,
    opts: MatchOptions,
) -> Result<PermutationMap> {
    a.require_same_architecture(b)?;
    if data.is_empty() {
        return config("cannot match on an empty dataset");
    }
    if data.dim() != a.input_dim() {
        return Err(Error::Shape(format!("dataset has {} columns, model takes {}", data.dim(), a.input_dim())));
    }
    let widths = a.hidden_widths();
    let mut current = b.clone();
    let mut layers = Vec::with_capacity(widths.len());
    for (l, &w) in widths.iter().enumerate() {
        let source = match opts.mode {
            MatchMode::Independent => b,
            MatchMode::Sequential => &current,
        };
        let mut m = Moments::new(w);
        hidden_batches(a, source, data, l, |ha, hb| m.add(ha, hb))?;
        let mut cost = m.cost(opts.cost);
        let tie = weight_fingerprint_cost(a, source, l);
        let scale = cost.iter().map(|v| v.abs()).sum::<f64>() / cost.len() as f64;
        let tie_scale = tie.iter().sum::<f64>() / tie.len() as f64;
        if tie_scale > 0.0 {
            let k = TIE_BREAK_WEIGHT * scale.max(f64::MIN_POSITIVE) / tie_scale;
            cost.zip_mut_with(&tie, |c, &t| *c += k * t);
        }
        let perm = solve_assignment(cost.view())?.cols;
        if opts.mode == MatchMode::Sequential {
            permute_layer(current.layers_mut(), l, &perm);
        }
        layers.push(perm);
    }
    Ok(PermutationMap { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_model, Architecture};
    use ndarray::array;
    use rand::seq::SliceRandom;

    fn data(n: usize, d: usize, seed: u64) -> Dataset {
        use rand::Rng;
        let mut r = crate::rng::stream(seed, &[]);
        let x = Array2::from_shape_simple_fn((n, d), || r.random_range(-1.0..1.0));
        Dataset::new(x, vec![0; n]).unwrap()
    }

    fn random_map(m: &ModelParams, seed: u64) -> PermutationMap {
        let mut r = crate::rng::stream(seed, &[]);
        PermutationMap {
            layers: m
                .hidden_widths()
                .into_iter()
                .map(|w| {
                    let mut p: Vec<usize> = (0..w).collect();
                    p.shuffle(&mut r);
                    p
                })
                .collect(),
        }
    }

    #[test]
    fn w1_hand_cases() {
        let p = |rows: Vec<Vec<u8>>| ActivationPatterns {
            layers: vec![Array2::from_shape_vec((rows.len(), rows[0].len()), rows.concat()).unwrap()],
        };
        let a = p(vec![vec![1, 1, 0, 0]]);
        let b = p(vec![vec![1, 0, 0, 0]]);
        assert_eq!(w1_distance(&a, &b).unwrap().overall, 0.25);
        assert_eq!(w1_distance(&a, &a).unwrap().overall, 0.0);
        assert_eq!(w1_distance(&p(vec![vec![1, 1]]), &p(vec![vec![0, 0]])).unwrap().overall, 1.0);
        assert!(w1_distance(&a, &p(vec![vec![1, 1]])).is_err());
    }

    #[test]
    fn positive_weights_and_inputs_fire_everywhere() {
        let mut m = init_model(&Architecture::mlp(&[3, 4, 2]), 0).unwrap();
        m.layers_mut()[0].weights.mapv_inplace(|w| w.abs() + 0.1);
        let d = Dataset::new(array![[0.1, 0.2, 0.3], [1.0, 2.0, 3.0]], vec![0, 1]).unwrap();
        let p = activation_patterns(&m, &d).unwrap();
        assert!(p.layers[0].iter().all(|&b| b == 1));
        let mut neg = m.clone();
        neg.layers_mut()[0].weights.mapv_inplace(|w| -w);
        assert!(activation_patterns(&neg, &d).unwrap().layers[0].iter().all(|&b| b == 0));
    }

    #[test]
    fn identity_and_inverse_maps() {
        let m = init_model(&Architecture::mlp(&[3, 6, 5, 2]), 4).unwrap();
        assert_eq!(apply_permutation(&m, &PermutationMap::identity(&m)).unwrap(), m);
        let map = random_map(&m, 1);
        let there = apply_permutation(&m, &map).unwrap();
        assert_eq!(apply_permutation(&there, &map.inverse()).unwrap(), m);
    }

    #[test]
    fn non_bijective_maps_are_rejected() {
        let m = init_model(&Architecture::mlp(&[3, 3, 2]), 4).unwrap();
        let bad = PermutationMap { layers: vec![vec![0, 0, 1]] };
        assert!(apply_permutation(&m, &bad).is_err());
        assert!(PermutationMap::from_json("{\"layers\":[[1,1]]}").is_err());
    }

    #[test]
    fn permuted_copy_is_recovered() {
        for (i, sizes) in [[5, 8, 8, 3], [4, 16, 12, 2]].iter().enumerate() {
            let a = init_model(&Architecture::mlp(sizes), i as u64).unwrap();
            let sigma = random_map(&a, 10 + i as u64);
            let b = apply_permutation(&a, &sigma).unwrap();
            let d = data(600, sizes[0], 3);
            for opts in [
                MatchOptions::default(),
                MatchOptions { mode: MatchMode::Sequential, ..Default::default() },
                MatchOptions { cost: MatchCost::Correlation, ..Default::default() },
            ] {
                let found = match_by_activations(&a, &b, &d, opts).unwrap();
                assert_eq!(found, sigma.inverse(), "{opts:?}");
                assert_eq!(apply_permutation(&b, &found).unwrap(), a);
            }
        }
    }

    #[test]
    fn self_match_is_identity() {
        let a = init_model(&Architecture::mlp(&[4, 10, 2]), 8).unwrap();
        let found = match_by_activations(&a, &a, &data(100, 4, 1), MatchOptions::default()).unwrap();
        assert!(found.is_identity());
    }

    #[test]
    fn map_json_round_trip_and_histogram() {
        let m = init_model(&Architecture::mlp(&[3, 6, 5, 2]), 4).unwrap();
        let map = random_map(&m, 2);
        assert_eq!(PermutationMap::from_json(&map.to_json().unwrap()).unwrap(), map);
        let p = activation_patterns(&m, &data(50, 3, 0)).unwrap();
        let mut out = Vec::new();
        p.write_rate_histogram(&mut out, 10).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 10);
        let counts: usize = text.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
        assert_eq!(counts, 11);
    }
}
