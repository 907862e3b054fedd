//! Binary-label data built from "slab" attributes of controllable complexity.
//!
//! An attribute with complexity `K` maps a binary latent `z` to a scalar in
//! `[-sqrt(3/D), sqrt(3/D)]` split into `K + 1` slabs; the slab parity encodes
//! `z`, so recovering `z` needs `K` decision boundaries. `K = 0` encodes `z`
//! as the value being zero or positive. Remaining input columns are noise.

use std::io::{Read, Write};

use ndarray::Array2;
use rand::{Rng, RngCore, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    read_f64, read_i64, read_u64, write_binary, write_text, Dataset, DatasetHeader,
    LatentRecord,
};
use crate::error::{config, Error, Result};
use crate::rng::{self, tag, StreamRng};

/// Tolerance used when decoding and range-checking attribute values.
pub const DECODE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    /// Uniform on `[-sqrt(3/D), sqrt(3/D)]`.
    Uniform,
    /// Normal with standard deviation `1/sqrt(D)`.
    Gaussian,
}

/// How the outermost slabs are shrunk away from the range boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryRule {
    /// Pull towards the centre using `sign(s)`.
    #[default]
    Inward,
    /// Offset by `sign(z)`, which is 0 for `z = 0` and can leave the range.
    LiteralSignZ,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlabAttribute {
    pub k: u32,
    /// Whether `z` equals the label (otherwise it is drawn independently).
    pub predictive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlabConfig {
    pub dim: usize,
    pub attributes: Vec<SlabAttribute>,
    pub delta: f64,
    pub noise: NoiseFamily,
    pub num_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub boundary: BoundaryRule,
}

impl SlabConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return config("input dimension must be positive");
        }
        if self.attributes.len() > self.dim {
            return config(format!(
                "{} attributes do not fit in {} input columns",
                self.attributes.len(),
                self.dim
            ));
        }
        if let Some(a) = self.attributes.iter().find(|a| a.k % 2 != 0) {
            return config(format!("slab complexity must be even, got {}", a.k));
        }
        check_delta(self.delta)
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if (0.0..0.5).contains(&delta) {
        Ok(())
    } else {
        config(format!("margin {delta} must lie in [0, 0.5)"))
    }
}

/// Half-width of the attribute range, `sqrt(3/D)`.
pub fn attribute_bound(dim: usize) -> f64 {
    3f64.sqrt() / (dim as f64).sqrt()
}

/// Latent values behind one attribute of one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeLatent {
    pub z: u8,
    /// Slab index (always 0 for `K = 0`).
    pub s: i64,
    pub eps: f64,
}

/// Everything needed to rebuild one input row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlabLatent {
    pub attributes: Vec<AttributeLatent>,
    pub noise_seed: u64,
}

impl LatentRecord for SlabLatent {
    const FAMILY: &'static str = "slab";

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.attributes.len() as u64).to_le_bytes());
        for a in &self.attributes {
            out.extend_from_slice(&u64::from(a.z).to_le_bytes());
            out.extend_from_slice(&a.s.to_le_bytes());
            out.extend_from_slice(&a.eps.to_le_bytes());
        }
        out.extend_from_slice(&self.noise_seed.to_le_bytes());
    }

    fn decode(buf: &mut &[u8]) -> Result<Self> {
        let n = read_u64(buf)? as usize;
        if n > buf.len() / 24 {
            return Err(Error::Format("attribute count exceeds record size".into()));
        }
        let mut attributes = Vec::with_capacity(n);
        for _ in 0..n {
            let z = read_u64(buf)?;
            if z > 1 {
                return Err(Error::Format(format!("latent z = {z} is not binary")));
            }
            attributes.push(AttributeLatent { z: z as u8, s: read_i64(buf)?, eps: read_f64(buf)? });
        }
        Ok(Self { attributes, noise_seed: read_u64(buf)? })
    }

    fn to_text(&self) -> String {
        let parts: Vec<String> = self
            .attributes
            .iter()
            .map(|a| format!("z={} s={} eps={:?}", a.z, a.s, a.eps))
            .collect();
        format!("{} noise_seed={}", parts.join(";"), self.noise_seed)
    }
}

/// Attribute value for stored latents.
pub fn slab_value(k: u32, a: AttributeLatent, dim: usize, rule: BoundaryRule) -> f64 {
    let bound = attribute_bound(dim);
    if k == 0 {
        // sign(z) with z in {0, 1} is z itself.
        let z = f64::from(a.z);
        return bound * (z - a.eps * z);
    }
    let half = i64::from(k / 2);
    let scale = 2.0 * bound / f64::from(k);
    if a.s.abs() == half {
        let sign = match rule {
            BoundaryRule::Inward => a.s.signum() as f64,
            BoundaryRule::LiteralSignZ => f64::from(a.z),
        };
        scale * (a.s as f64 - a.eps * sign)
    } else {
        scale * (a.s as f64 + a.eps)
    }
}

/// Draw the slab index and jitter for latent `z`.
fn draw_latent(k: u32, z: u8, delta: f64, rng: &mut impl RngCore) -> AttributeLatent {
    if k == 0 {
        let eps = if delta > 0.0 { rng.random_range(0.0..=2.0 * delta) } else { 0.0 };
        return AttributeLatent { z, s: 0, eps };
    }
    let half = i64::from(k / 2);
    // Integers in [-half, half] with parity matching z (even for z = 1).
    let first = if (half % 2 == 0) == (z == 1) { -half } else { -half + 1 };
    let count = (half - first) / 2 + 1;
    let s = first + 2 * rng.random_range(0..count);
    let eps = match (s.abs() == half, delta > 0.0) {
        (_, false) => 0.0,
        (true, true) => rng.random_range(0.0..=delta),
        (false, true) => rng.random_range(-delta..=delta),
    };
    AttributeLatent { z, s, eps }
}

/// One draw of an attribute value with its latents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlabDraw {
    pub value: f64,
    pub s: i64,
    pub eps: f64,
}

pub fn sample_tk(
    k: u32,
    z: u8,
    delta: f64,
    dim: usize,
    rng: &mut impl RngCore,
) -> Result<SlabDraw> {
    sample_tk_with(k, z, delta, dim, BoundaryRule::Inward, rng)
}

pub fn sample_tk_with(
    k: u32,
    z: u8,
    delta: f64,
    dim: usize,
    rule: BoundaryRule,
    rng: &mut impl RngCore,
) -> Result<SlabDraw> {
    if k % 2 != 0 {
        return config(format!("slab complexity must be even, got {k}"));
    }
    if z > 1 {
        return config(format!("latent must be 0 or 1, got {z}"));
    }
    check_delta(delta)?;
    let a = draw_latent(k, z, delta, rng);
    Ok(SlabDraw { value: slab_value(k, a, dim, rule), s: a.s, eps: a.eps })
}

/// Recover `z` from an attribute value.
pub fn decode_attribute(value: f64, k: u32, dim: usize) -> Result<u8> {
    let bound = attribute_bound(dim);
    if !(value.abs() <= bound + DECODE_TOL) {
        return Err(Error::Domain { value, lo: -bound, hi: bound });
    }
    if k == 0 {
        return Ok(u8::from(value.abs() >= DECODE_TOL));
    }
    let s = (value * f64::from(k) / (2.0 * bound)).round() as i64;
    Ok(u8::from(s % 2 == 0))
}

/// Which latent value an intervention assigns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    SetTo(u8),
    /// Fresh `z` uniform over `{0, 1}`, independent of the label.
    Randomize,
}

/// Unit intervention on one attribute's latent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub target: usize,
    pub mode: InterventionMode,
    /// Re-draw the slab and jitter even when `z` is unchanged. When `z`
    /// changes a re-draw always happens.
    pub redraw: bool,
}

impl InterventionSpec {
    pub fn randomize(target: usize) -> Self {
        Self { target, mode: InterventionMode::Randomize, redraw: true }
    }

    pub fn set_to(target: usize, z: u8) -> Self {
        Self { target, mode: InterventionMode::SetTo(z), redraw: true }
    }
}

/// Generated samples with their latents.
#[derive(Debug, Clone, PartialEq)]
pub struct SlabDataset {
    pub config: SlabConfig,
    pub data: Dataset,
    pub latents: Vec<SlabLatent>,
}

fn attribute_rng(seed: u64, sample: usize, attr: usize) -> StreamRng {
    rng::stream(seed, &[tag::SAMPLE, sample as u64, attr as u64])
}

fn fill_noise(row: &mut [f64], noise: NoiseFamily, dim: usize, noise_seed: u64) {
    let mut r = StreamRng::seed_from_u64(noise_seed);
    match noise {
        NoiseFamily::Uniform => {
            let b = attribute_bound(dim);
            row.iter_mut().for_each(|v| *v = r.random_range(-b..=b));
        }
        NoiseFamily::Gaussian => {
            let n = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
            row.iter_mut().for_each(|v| *v = n.sample(&mut r));
        }
    }
}

impl SlabDataset {
    pub fn generate(cfg: &SlabConfig) -> Result<Self> {
        cfg.validate()?;
        let (m, d, n) = (cfg.num_samples, cfg.dim, cfg.attributes.len());
        let mut inputs = Array2::zeros((m, d));
        let mut labels = Vec::with_capacity(m);
        let mut latents = Vec::with_capacity(m);
        for i in 0..m {
            let y: u8 = rng::stream(cfg.seed, &[tag::LABEL, i as u64]).random_range(0..2);
            let mut attrs = Vec::with_capacity(n);
            for (a, attr) in cfg.attributes.iter().enumerate() {
                let mut r = attribute_rng(cfg.seed, i, a);
                let z = if attr.predictive { y } else { r.random_range(0..2) };
                attrs.push(draw_latent(attr.k, z, cfg.delta, &mut r));
            }
            let latent = SlabLatent {
                attributes: attrs,
                noise_seed: rng::derive_seed(cfg.seed, &[tag::NOISE, i as u64]),
            };
            let mut row = inputs.row_mut(i);
            let row = row.as_slice_mut().expect("standard layout");
            write_row(cfg, &latent, row);
            labels.push(usize::from(y));
            latents.push(latent);
        }
        Ok(Self { config: cfg.clone(), data: Dataset::new(inputs, labels)?, latents })
    }

    /// Samples `idx` with their latents.
    pub fn subset(&self, idx: &[usize]) -> SlabDataset {
        SlabDataset {
            config: SlabConfig { num_samples: idx.len(), ..self.config.clone() },
            data: self.data.select(idx),
            latents: idx.iter().map(|&i| self.latents[i].clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Input row rebuilt from its latent record alone.
    pub fn reconstruct(&self, i: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.config.dim];
        write_row(&self.config, &self.latents[i], &mut row);
        row
    }

    /// Apply one unit intervention; per-sample draws come from streams keyed
    /// by `(seed, sample, target)`.
    pub fn intervene(&self, spec: &InterventionSpec, seed: u64) -> Result<SlabDataset> {
        let n = self.config.attributes.len();
        if spec.target >= n {
            return config(format!("intervention target {} but only {n} attributes", spec.target));
        }
        if let InterventionMode::SetTo(z) = spec.mode {
            if z > 1 {
                return config(format!("latent must be 0 or 1, got {z}"));
            }
        }
        let k = self.config.attributes[spec.target].k;
        let mut out = self.clone();
        let col = spec.target;
        let dim = self.config.dim;
        let rule = self.config.boundary;
        for (i, latent) in out.latents.iter_mut().enumerate() {
            let mut r = rng::stream(seed, &[tag::INTERVENE, i as u64, col as u64]);
            let old = latent.attributes[col];
            let z = match spec.mode {
                InterventionMode::SetTo(z) => z,
                InterventionMode::Randomize => r.random_range(0..2),
            };
            if z != old.z || spec.redraw {
                latent.attributes[col] = draw_latent(k, z, self.config.delta, &mut r);
            }
            out.data.inputs_mut()[[i, col]] = slab_value(k, latent.attributes[col], dim, rule);
        }
        Ok(out)
    }

    /// Apply interventions left to right, each with its own derived seed.
    pub fn intervene_all(&self, specs: &[InterventionSpec], seed: u64) -> Result<SlabDataset> {
        let mut cur = self.clone();
        for (j, spec) in specs.iter().enumerate() {
            cur = cur.intervene(spec, rng::derive_seed(seed, &[spec.target as u64, j as u64]))?;
        }
        Ok(cur)
    }

    fn header(&self) -> Result<DatasetHeader> {
        Ok(DatasetHeader {
            family: SlabLatent::FAMILY.into(),
            format_version: crate::data::DATASET_FORMAT_VERSION,
            num_samples: self.len(),
            dim: self.config.dim,
            seed: self.config.seed,
            config: serde_json::to_value(&self.config)?,
        })
    }

    pub fn write_binary<W: Write>(&self, w: W) -> Result<()> {
        write_binary(w, &self.header()?, &self.data, &self.latents)
    }

    pub fn read_binary<R: Read>(r: R) -> Result<Self> {
        let (header, data, latents) = crate::data::read_binary::<_, SlabLatent>(r)?;
        let config: SlabConfig = serde_json::from_value(header.config)?;
        Ok(Self { config, data, latents })
    }

    pub fn write_text<W: Write>(&self, w: W) -> Result<()> {
        write_text(w, &self.header()?, &self.data, &self.latents)
    }
}

fn write_row(cfg: &SlabConfig, latent: &SlabLatent, row: &mut [f64]) {
    let n = cfg.attributes.len();
    for (a, attr) in cfg.attributes.iter().enumerate() {
        row[a] = slab_value(attr.k, latent.attributes[a], cfg.dim, cfg.boundary);
    }
    fill_noise(&mut row[n..], cfg.noise, cfg.dim, latent.noise_seed);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> StreamRng {
        crate::rng::stream(seed, &[])
    }

    #[test]
    fn k0_hand_values() {
        for delta in [0.0, 0.2, 0.45] {
            assert_eq!(sample_tk(0, 0, delta, 3, &mut rng(1)).unwrap().value, 0.0);
        }
        assert_eq!(sample_tk(0, 1, 0.0, 3, &mut rng(1)).unwrap().value, 1.0);
    }

    #[test]
    fn k4_zero_margin_hits_two_values() {
        // Odd slabs of K = 4 are s = -1, 1 with scale 2 sqrt(3) / (4 sqrt(3)) = 0.5.
        let mut r = rng(2);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            let v = sample_tk(4, 0, 0.0, 3, &mut r).unwrap().value;
            seen.insert((v * 1e9).round() as i64);
        }
        assert_eq!(seen.into_iter().collect::<Vec<_>>(), vec![-500_000_000, 500_000_000]);
    }

    #[test]
    fn odd_k_and_wide_margin_are_rejected() {
        assert!(sample_tk(3, 0, 0.1, 3, &mut rng(0)).is_err());
        assert!(sample_tk(2, 0, 0.5, 3, &mut rng(0)).is_err());
    }

    #[test]
    fn decode_hand_cases() {
        assert_eq!(decode_attribute(0.5, 4, 3).unwrap(), 0);
        assert_eq!(decode_attribute(0.0, 0, 3).unwrap(), 0);
        assert_eq!(decode_attribute(0.9, 0, 3).unwrap(), 1);
        assert!(matches!(decode_attribute(1.5, 4, 3), Err(Error::Domain { .. })));
    }

    #[test]
    fn literal_boundary_rule_breaks_the_margin() {
        // K = 2, z = 0 lands on s = +-1, both boundary slabs. With sign(z) = 0
        // the jitter is ignored and the value sits exactly on the boundary.
        let a = AttributeLatent { z: 0, s: 1, eps: 0.3 };
        let literal = slab_value(2, a, 3, BoundaryRule::LiteralSignZ);
        let inward = slab_value(2, a, 3, BoundaryRule::Inward);
        assert_eq!(literal, 1.0);
        assert!((inward - 0.7).abs() < 1e-15);
    }

    fn small_config(m: usize) -> SlabConfig {
        SlabConfig {
            dim: 6,
            attributes: vec![
                SlabAttribute { k: 0, predictive: true },
                SlabAttribute { k: 4, predictive: true },
            ],
            delta: 0.1,
            noise: NoiseFamily::Uniform,
            num_samples: m,
            seed: 5,
            boundary: BoundaryRule::Inward,
        }
    }

    #[test]
    fn generation_is_reconstructible() {
        let ds = SlabDataset::generate(&small_config(200)).unwrap();
        for i in 0..ds.len() {
            assert_eq!(ds.reconstruct(i), ds.data.inputs().row(i).to_vec());
            let y = ds.data.labels()[i] as u8;
            assert_eq!(decode_attribute(ds.data.inputs()[[i, 0]], 0, 6).unwrap(), y);
            assert_eq!(decode_attribute(ds.data.inputs()[[i, 1]], 4, 6).unwrap(), y);
        }
    }

    #[test]
    fn too_many_attributes_is_a_config_error() {
        let mut c = small_config(1);
        c.dim = 1;
        assert!(matches!(SlabDataset::generate(&c), Err(Error::Config(_))));
    }

    #[test]
    fn attributes_fill_the_whole_input_without_noise() {
        let mut c = small_config(50);
        c.dim = 2;
        let ds = SlabDataset::generate(&c).unwrap();
        assert_eq!(ds.data.dim(), 2);
        assert!(ds.data.inputs().iter().all(|v| v.abs() <= attribute_bound(2) + 1e-15));
    }

    #[test]
    fn identity_intervention_without_redraw_is_a_no_op() {
        let ds = SlabDataset::generate(&small_config(100)).unwrap();
        for target in 0..2 {
            for z in 0..2u8 {
                let idx: Vec<usize> =
                    (0..ds.len()).filter(|&i| ds.latents[i].attributes[target].z == z).collect();
                let sub = ds.subset(&idx);
                let spec = InterventionSpec { target, mode: InterventionMode::SetTo(z), redraw: false };
                assert_eq!(sub.intervene(&spec, 9).unwrap(), sub);
            }
        }
    }

    #[test]
    fn out_of_range_target_is_rejected() {
        let ds = SlabDataset::generate(&small_config(3)).unwrap();
        assert!(ds.intervene(&InterventionSpec::randomize(2), 0).is_err());
    }

    #[test]
    fn binary_and_text_round_trip() {
        let ds = SlabDataset::generate(&small_config(20)).unwrap();
        let mut buf = Vec::new();
        ds.write_binary(&mut buf).unwrap();
        assert_eq!(SlabDataset::read_binary(&buf[..]).unwrap(), ds);
        let mut text = Vec::new();
        ds.write_text(&mut text).unwrap();
        let text = String::from_utf8(text).unwrap();
        assert_eq!(text.lines().count(), 22);
        assert!(text.starts_with("# {\"family\":\"slab\""));
    }
}
