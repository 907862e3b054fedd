//! Small grayscale images whose class is carried by an oriented stripe
//! pattern, optionally overlaid with a bright square "cue" whose position
//! encodes the label.
//!
//! Every image is rendered from a latent record (pattern class, phase, noise
//! seed, cue location), so counterfactual versions are produced by editing a
//! single latent and re-rendering.

use std::f64::consts::PI;
use std::io::{Read, Write};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{read_f64, read_u64, write_binary, write_text, Dataset, DatasetHeader, LatentRecord};
use crate::error::{config, Error, Result};
use crate::rng::{self, tag, StreamRng};

fn default_contrast() -> f64 {
    0.5
}

fn default_frequency() -> f64 {
    3.0
}

fn default_phase_max() -> f64 {
    2.0 * PI
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub classes: usize,
    /// Image side; inputs have `side * side` columns.
    pub side: usize,
    pub cue_size: usize,
    /// Fraction of each class (taken in order of appearance) that carries the cue.
    pub cue_proportion: f64,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise_amplitude: f64,
    pub num_samples: usize,
    pub seed: u64,
    /// Stripe amplitude around the mid-grey level.
    #[serde(default = "default_contrast")]
    pub contrast: f64,
    /// Stripe cycles across the image.
    #[serde(default = "default_frequency")]
    pub frequency: f64,
    /// Per-sample stripe orientation jitter, uniform in `[-jitter, jitter]` radians.
    #[serde(default)]
    pub jitter: f64,
    /// Stripe phase is drawn uniformly from `[0, phase_max)`.
    #[serde(default = "default_phase_max")]
    pub phase_max: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            side: 16,
            cue_size: 3,
            cue_proportion: 0.9,
            noise_amplitude: 0.1,
            num_samples: 1000,
            seed: 0,
            contrast: default_contrast(),
            frequency: default_frequency(),
            jitter: 0.0,
            phase_max: default_phase_max(),
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return config("need at least two classes");
        }
        if self.cue_size == 0 || self.cue_size > self.side {
            return config(format!("cue size {} does not fit a {}-pixel side", self.cue_size, self.side));
        }
        if !(0.0..=1.0).contains(&self.cue_proportion) {
            return config("cue proportion must lie in [0, 1]");
        }
        if !(self.noise_amplitude >= 0.0) || !(self.jitter >= 0.0) || !(self.phase_max >= 0.0) {
            return config("noise amplitude, jitter and phase range must be non-negative");
        }
        let locs = cue_locations(self.side, self.cue_size, self.classes)?;
        for (a, la) in locs.iter().enumerate() {
            for lb in &locs[a + 1..] {
                let apart = |x: usize, y: usize| x + self.cue_size <= y || y + self.cue_size <= x;
                if !(apart(la.0, lb.0) || apart(la.1, lb.1)) {
                    return config("cue locations overlap");
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.side * self.side
    }
}

/// Top-left corners of the cue squares, one per class: slots along the top
/// edge, then the bottom edge, then the left and right edges.
pub fn cue_locations(side: usize, cue: usize, classes: usize) -> Result<Vec<(usize, usize)>> {
    let mut locs = Vec::with_capacity(classes);
    let along = |start: usize, stop: usize| (start..).step_by(cue).take_while(move |&p| p + cue <= stop);
    if side > cue {
        locs.extend(along(1, side).map(|c| (0, c)));
        if side >= 2 * cue {
            locs.extend(along(1, side).map(|c| (side - cue, c)));
            if side >= 2 * cue + cue {
                locs.extend(along(cue, side - cue).map(|r| (r, 0)));
                locs.extend(along(cue, side - cue).map(|r| (r, side - cue)));
            }
        }
    }
    if locs.len() < classes {
        return config(format!(
            "only {} non-overlapping cue slots fit a {side}x{side} image with {cue}x{cue} cues",
            locs.len()
        ));
    }
    locs.truncate(classes);
    Ok(locs)
}

/// Latent values behind one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridLatent {
    /// Class whose stripe pattern is drawn (equals the label unless the image
    /// was randomized).
    pub image_class: usize,
    pub phase: f64,
    pub noise_seed: u64,
    /// Class index of the cue slot, if a cue is drawn.
    pub cue: Option<usize>,
}

impl LatentRecord for GridLatent {
    const FAMILY: &'static str = "grid";

    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.image_class as u64).to_le_bytes());
        out.extend_from_slice(&self.phase.to_le_bytes());
        out.extend_from_slice(&self.noise_seed.to_le_bytes());
        let cue = self.cue.map_or(u64::MAX, |c| c as u64);
        out.extend_from_slice(&cue.to_le_bytes());
    }

    fn decode(buf: &mut &[u8]) -> Result<Self> {
        let image_class = read_u64(buf)? as usize;
        let phase = read_f64(buf)?;
        let noise_seed = read_u64(buf)?;
        let cue = match read_u64(buf)? {
            u64::MAX => None,
            c => Some(c as usize),
        };
        Ok(Self { image_class, phase, noise_seed, cue })
    }

    fn to_text(&self) -> String {
        let cue = self.cue.map_or("none".to_string(), |c| c.to_string());
        format!(
            "image_class={} phase={:?} noise_seed={} cue={cue}",
            self.image_class, self.phase, self.noise_seed
        )
    }
}

/// Edits applied to the latent record of every sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CounterfactualKind {
    /// Every sample carries the cue of its own label.
    WithCue,
    /// No sample carries a cue.
    WithoutCue,
    /// The cue moves to the slot of a class drawn uniformly at random.
    RandCue,
    /// The stripe pattern is redrawn from a different class with fresh noise;
    /// the cue stays where it was.
    RandImage,
}

impl CounterfactualKind {
    pub const ALL: [CounterfactualKind; 4] =
        [Self::WithCue, Self::WithoutCue, Self::RandCue, Self::RandImage];

    pub fn name(self) -> &'static str {
        match self {
            Self::WithCue => "with_cue",
            Self::WithoutCue => "without_cue",
            Self::RandCue => "rand_cue",
            Self::RandImage => "rand_image",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown counterfactual kind {s}")))
    }

    fn code(self) -> u64 {
        self as u64
    }
}

/// Generated images with their latents.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDataset {
    pub config: GridConfig,
    pub data: Dataset,
    pub latents: Vec<GridLatent>,
}

/// The four evaluation sets: no cue, cue, randomized cue, randomized image.
#[derive(Debug, Clone)]
pub struct TestFamily {
    pub nc: Dataset,
    pub c: Dataset,
    pub rc: Dataset,
    pub ri: Dataset,
}

struct Renderer {
    cfg: GridConfig,
    locs: Vec<(usize, usize)>,
}

impl Renderer {
    fn new(cfg: &GridConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg: cfg.clone(), locs: cue_locations(cfg.side, cfg.cue_size, cfg.classes)? })
    }

    fn render(&self, l: &GridLatent, out: &mut [f64]) {
        let c = &self.cfg;
        let s = c.side as f64;
        let mut r = StreamRng::seed_from_u64(l.noise_seed);
        let jit = if c.jitter > 0.0 { r.random_range(-c.jitter..=c.jitter) } else { 0.0 };
        let theta = l.image_class as f64 * PI / c.classes as f64 + jit;
        let (sin, cos) = theta.sin_cos();
        for u in 0..c.side {
            for v in 0..c.side {
                let arg = 2.0 * PI * c.frequency * (u as f64 * cos + v as f64 * sin) / s + l.phase;
                let noise: f64 = StandardNormal.sample(&mut r);
                let px = 0.5 + c.contrast * arg.sin() + c.noise_amplitude * noise;
                out[u * c.side + v] = px.clamp(0.0, 1.0);
            }
        }
        if let Some(k) = l.cue {
            let (r0, c0) = self.locs[k];
            for u in r0..r0 + c.cue_size {
                out[u * c.side + c0..u * c.side + c0 + c.cue_size].fill(1.0);
            }
        }
    }

    fn render_all(&self, latents: &[GridLatent]) -> Array2<f64> {
        let d = self.cfg.dim();
        let mut x = Array2::zeros((latents.len(), d));
        for (mut row, l) in x.rows_mut().into_iter().zip(latents) {
            self.render(l, row.as_slice_mut().expect("standard layout"));
        }
        x
    }
}

impl GridDataset {
    pub fn generate(cfg: &GridConfig) -> Result<Self> {
        let renderer = Renderer::new(cfg)?;
        let (m, classes) = (cfg.num_samples, cfg.classes);
        let mut labels: Vec<usize> = (0..m).map(|i| i % classes).collect();
        labels.shuffle(&mut rng::stream(cfg.seed, &[tag::LABEL]));
        let mut per_class = vec![0usize; classes];
        labels.iter().for_each(|&y| per_class[y] += 1);
        // Small slack keeps e.g. 0.9 * 2000 from rounding up to 1801.
        let quota: Vec<usize> =
            per_class.iter().map(|&n| (cfg.cue_proportion * n as f64 - 1e-9).ceil().max(0.0) as usize).collect();
        let mut seen = vec![0usize; classes];
        let latents: Vec<GridLatent> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let mut r = rng::stream(cfg.seed, &[tag::SAMPLE, i as u64]);
                let cue = (seen[y] < quota[y]).then_some(y);
                seen[y] += 1;
                GridLatent {
                    image_class: y,
                    phase: r.random_range(0.0..1.0) * cfg.phase_max,
                    noise_seed: rng::derive_seed(cfg.seed, &[tag::NOISE, i as u64]),
                    cue,
                }
            })
            .collect();
        let inputs = renderer.render_all(&latents);
        Ok(Self { config: cfg.clone(), data: Dataset::new(inputs, labels)?, latents })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cue_locations(&self) -> Vec<(usize, usize)> {
        cue_locations(self.config.side, self.config.cue_size, self.config.classes)
            .expect("validated at generation")
    }

    /// Re-render sample `i` from its latent record.
    pub fn reconstruct(&self, i: usize) -> Vec<f64> {
        let renderer = Renderer::new(&self.config).expect("validated at generation");
        let mut row = vec![0.0; self.config.dim()];
        renderer.render(&self.latents[i], &mut row);
        row
    }

    /// Counterfactual copy; random choices come from streams keyed by
    /// `(seed, kind, sample)`. Labels never change.
    pub fn counterfactual(&self, kind: CounterfactualKind, seed: u64) -> Result<GridDataset> {
        let renderer = Renderer::new(&self.config)?;
        let classes = self.config.classes;
        let mut out = self.clone();
        for (i, (l, &y)) in out.latents.iter_mut().zip(self.data.labels()).enumerate() {
            let mut r = rng::stream(seed, &[tag::COUNTERFACTUAL, kind.code(), i as u64]);
            match kind {
                CounterfactualKind::WithCue => l.cue = Some(y),
                CounterfactualKind::WithoutCue => l.cue = None,
                CounterfactualKind::RandCue => l.cue = Some(r.random_range(0..classes)),
                CounterfactualKind::RandImage => {
                    let other = r.random_range(0..classes - 1);
                    l.image_class = if other >= y { other + 1 } else { other };
                    l.phase = r.random_range(0.0..1.0) * self.config.phase_max;
                    l.noise_seed = r.random();
                }
            }
        }
        let changed: Vec<usize> =
            (0..self.len()).filter(|&i| out.latents[i] != self.latents[i]).collect();
        let mut row = vec![0.0; self.config.dim()];
        for i in changed {
            renderer.render(&out.latents[i], &mut row);
            out.data.inputs_mut().row_mut(i).as_slice_mut().expect("standard layout").copy_from_slice(&row);
        }
        Ok(out)
    }

    /// The four evaluation sets built from this dataset: WithoutCue, WithCue,
    /// and RandCue / RandImage applied on top of WithCue.
    pub fn test_family(&self, seed: u64) -> Result<TestFamily> {
        let with = self.counterfactual(CounterfactualKind::WithCue, seed)?;
        Ok(TestFamily {
            nc: self.counterfactual(CounterfactualKind::WithoutCue, seed)?.data,
            rc: with.counterfactual(CounterfactualKind::RandCue, seed)?.data,
            ri: with.counterfactual(CounterfactualKind::RandImage, seed)?.data,
            c: with.data,
        })
    }

    fn header(&self) -> Result<DatasetHeader> {
        Ok(DatasetHeader {
            family: GridLatent::FAMILY.into(),
            format_version: crate::data::DATASET_FORMAT_VERSION,
            num_samples: self.len(),
            dim: self.config.dim(),
            seed: self.config.seed,
            config: serde_json::to_value(&self.config)?,
        })
    }

    pub fn write_binary<W: Write>(&self, w: W) -> Result<()> {
        write_binary(w, &self.header()?, &self.data, &self.latents)
    }

    pub fn read_binary<R: Read>(r: R) -> Result<Self> {
        let (header, data, latents) = crate::data::read_binary::<_, GridLatent>(r)?;
        let config: GridConfig = serde_json::from_value(header.config)?;
        Ok(Self { config, data, latents })
    }

    pub fn write_text<W: Write>(&self, w: W) -> Result<()> {
        write_text(w, &self.header()?, &self.data, &self.latents)
    }

    /// Sample `i` as a plain-text (P2) grayscale image.
    pub fn write_pgm<W: Write>(&self, i: usize, mut w: W) -> Result<()> {
        let s = self.config.side;
        writeln!(w, "P2\n{s} {s}\n255")?;
        for row in self.data.inputs().row(i).as_slice().expect("standard layout").chunks(s) {
            let px: Vec<String> = row.iter().map(|v| ((v * 255.0).round() as u8).to_string()).collect();
            writeln!(w, "{}", px.join(" "))?;
        }
        Ok(())
    }
}
