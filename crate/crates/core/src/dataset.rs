//! Sample matrices, standardization and measurement modifications.
//!
//! A sample is an `n x 12` matrix over all buses of the feeder, channels
//! ordered `(V1, thV1, V2, thV2, V3, thV3, I1, thI1, I2, thI2, I3, thI3)`.
//! Entries of unmeasured buses and phases without load are structurally zero;
//! each sample carries the mask of its measured entries so that transforms
//! never write into structural zeros.

pub mod io;

use std::sync::Arc;

use ndarray::Array2;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::feeder::FeederModel;
use crate::seed::Rng as SeedRng;

pub const CHANNELS: usize = 12;

/// Channel index of the voltage magnitude of `phase` (1-based).
pub fn voltage_channel(phase: u8) -> usize {
    2 * (phase as usize - 1)
}

/// Channel index of the load current magnitude of `phase` (1-based).
pub fn current_channel(phase: u8) -> usize {
    6 + 2 * (phase as usize - 1)
}

/// Which `(bus, channel)` entries carry measurements.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct MeasurementMask {
    n: usize,
    entries: Vec<bool>,
}

impl MeasurementMask {
    pub fn from_model(model: &FeederModel) -> Self {
        let n = model.n_buses();
        let mut entries = vec![false; n * CHANNELS];
        for (b, bus) in model.buses().iter().enumerate() {
            if !bus.measured {
                continue;
            }
            for p in bus.load_phases.iter() {
                for c in [voltage_channel(p), current_channel(p)] {
                    entries[b * CHANNELS + c] = true;
                    entries[b * CHANNELS + c + 1] = true;
                }
            }
        }
        MeasurementMask { n, entries }
    }

    pub fn from_entries(n: usize, entries: Vec<bool>) -> Result<Self> {
        if entries.len() != n * CHANNELS {
            return Err(Error::Shape(format!(
                "mask has {} entries, expected {}",
                entries.len(),
                n * CHANNELS
            )));
        }
        Ok(MeasurementMask { n, entries })
    }

    pub fn n_buses(&self) -> usize {
        self.n
    }

    pub fn is_measured(&self, bus: usize, channel: usize) -> bool {
        self.entries[bus * CHANNELS + channel]
    }

    pub fn entries(&self) -> &[bool] {
        &self.entries
    }

    pub fn bus_measured(&self, bus: usize) -> bool {
        self.entries[bus * CHANNELS..(bus + 1) * CHANNELS].iter().any(|&e| e)
    }

    pub fn measured_buses(&self) -> Vec<usize> {
        (0..self.n).filter(|&b| self.bus_measured(b)).collect()
    }

    pub fn count(&self) -> usize {
        self.entries.iter().filter(|&&e| e).count()
    }

    /// Mask restricted to the channels flagged in `keep`.
    pub fn restrict_channels(&self, keep: &[bool; CHANNELS]) -> Self {
        let entries = self
            .entries
            .iter()
            .enumerate()
            .map(|(k, &e)| e && keep[k % CHANNELS])
            .collect();
        MeasurementMask { n: self.n, entries }
    }
}

/// One labeled sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMatrix {
    pub x: Array2<f64>,
    pub label: usize,
    pub mask: Arc<MeasurementMask>,
}

impl SampleMatrix {
    pub fn new(x: Array2<f64>, label: usize, mask: Arc<MeasurementMask>) -> Result<Self> {
        if x.dim() != (mask.n_buses(), CHANNELS) {
            return Err(Error::Shape(format!(
                "sample is {:?}, mask covers {} buses",
                x.dim(),
                mask.n_buses()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample matrix".into()));
        }
        let s = SampleMatrix { x, label, mask };
        if let Some((b, c)) = s.structural_violation() {
            return Err(Error::Dataset(format!(
                "unmeasured entry ({b}, {c}) is nonzero"
            )));
        }
        Ok(s)
    }

    /// First unmeasured entry that is not zero, if any.
    pub fn structural_violation(&self) -> Option<(usize, usize)> {
        self.x
            .indexed_iter()
            .find(|&((b, c), &v)| !self.mask.is_measured(b, c) && v != 0.0)
            .map(|(idx, _)| idx)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub bus_ids: Vec<String>,
    pub classes: usize,
    pub samples: Vec<SampleMatrix>,
}

impl Dataset {
    pub fn new(bus_ids: Vec<String>, classes: usize) -> Self {
        Dataset {
            bus_ids,
            classes,
            samples: Vec::new(),
        }
    }

    pub fn n_buses(&self) -> usize {
        self.bus_ids.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            bus_ids: self.bus_ids.clone(),
            classes: self.classes,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn extend(&mut self, other: Dataset) -> Result<()> {
        if other.bus_ids != self.bus_ids || other.classes != self.classes {
            return Err(Error::Dataset("datasets describe different feeders".into()));
        }
        self.samples.extend(other.samples);
        Ok(())
    }
}

/// Per-channel mean and standard deviation over measured entries.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
    /// Number of measured entries each statistic was computed from.
    pub count: [usize; CHANNELS],
}

impl ChannelStats {
    pub fn compute(dataset: &Dataset) -> Self {
        let mut sum = [0.0; CHANNELS];
        let mut count = [0usize; CHANNELS];
        for s in &dataset.samples {
            for ((b, c), &v) in s.x.indexed_iter() {
                if s.mask.is_measured(b, c) {
                    sum[c] += v;
                    count[c] += 1;
                }
            }
        }
        let mut mean = [0.0; CHANNELS];
        for c in 0..CHANNELS {
            if count[c] > 0 {
                mean[c] = sum[c] / count[c] as f64;
            }
        }
        let mut sq = [0.0; CHANNELS];
        for s in &dataset.samples {
            for ((b, c), &v) in s.x.indexed_iter() {
                if s.mask.is_measured(b, c) {
                    sq[c] += (v - mean[c]) * (v - mean[c]);
                }
            }
        }
        let mut std = [1.0; CHANNELS];
        for c in 0..CHANNELS {
            if count[c] > 0 {
                std[c] = (sq[c] / count[c] as f64).sqrt();
            }
        }
        ChannelStats { mean, std, count }
    }

    fn check(&self) -> Result<()> {
        for c in 0..CHANNELS {
            if self.count[c] > 0 && !(self.std[c] > 0.0) {
                return Err(Error::ZeroStd { channel: c });
            }
        }
        Ok(())
    }
}

/// Standardizes measured entries in place with `stats`, or with statistics
/// computed from `dataset` itself when `stats` is `None`. Returns the
/// statistics used.
pub fn standardize(dataset: &mut Dataset, stats: Option<&ChannelStats>) -> Result<ChannelStats> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => ChannelStats::compute(dataset),
    };
    stats.check()?;
    for s in &mut dataset.samples {
        let mask = s.mask.clone();
        for ((b, c), v) in s.x.indexed_iter_mut() {
            if mask.is_measured(b, c) {
                *v = (*v - stats.mean[c]) / stats.std[c];
            }
        }
    }
    Ok(stats)
}

/// Inverse of [`standardize`].
pub fn destandardize(dataset: &mut Dataset, stats: &ChannelStats) {
    for s in &mut dataset.samples {
        let mask = s.mask.clone();
        for ((b, c), v) in s.x.indexed_iter_mut() {
            if mask.is_measured(b, c) {
                *v = *v * stats.std[c] + stats.mean[c];
            }
        }
    }
}

/// Noise standard deviation for a signal-to-noise ratio in dB: `10^(-snr/20)`.
pub fn snr_sigma(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 20.0)
}

/// Noise level, number of dropped buses and per-entry loss probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModificationSpec {
    pub sigma_noise: f64,
    pub n_drop: usize,
    pub p_loss: f64,
}

impl ModificationSpec {
    pub const NONE: ModificationSpec = ModificationSpec {
        sigma_noise: 0.0,
        n_drop: 0,
        p_loss: 0.0,
    };

    pub fn new(sigma_noise: f64, n_drop: usize, p_loss: f64) -> Result<Self> {
        let spec = ModificationSpec {
            sigma_noise,
            n_drop,
            p_loss,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 45 dB noise, one dropped bus, 1% random loss.
    pub fn default_condition() -> Self {
        ModificationSpec {
            sigma_noise: snr_sigma(45.0),
            n_drop: 1,
            p_loss: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_noise >= 0.0 && self.sigma_noise.is_finite()) {
            return Err(Error::Config(format!("noise sigma {} must be >= 0", self.sigma_noise)));
        }
        if !(0.0..=1.0).contains(&self.p_loss) {
            return Err(Error::Config(format!("loss probability {} not in [0, 1]", self.p_loss)));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        self.sigma_noise == 0.0 && self.n_drop == 0 && self.p_loss == 0.0
    }
}

/// Applies noise, then bus drop, then random entry loss to the measured
/// entries of `sample`, in place.
pub fn apply_modifications_in_place(
    sample: &mut SampleMatrix,
    spec: &ModificationSpec,
    rng: &mut SeedRng,
) -> Result<()> {
    spec.validate()?;
    let mask = sample.mask.clone();
    let measured = mask.measured_buses();
    if spec.n_drop > measured.len() {
        return Err(Error::Config(format!(
            "cannot drop {} buses, only {} are measured",
            spec.n_drop,
            measured.len()
        )));
    }
    if spec.sigma_noise > 0.0 {
        for ((b, c), v) in sample.x.indexed_iter_mut() {
            if mask.is_measured(b, c) {
                let z: f64 = StandardNormal.sample(rng);
                *v += spec.sigma_noise * z;
            }
        }
    }
    let mut dropped = vec![false; mask.n_buses()];
    if spec.n_drop > 0 {
        for k in sample_indices(rng, measured.len(), spec.n_drop).into_iter() {
            let b = measured[k];
            dropped[b] = true;
            sample.x.row_mut(b).fill(0.0);
        }
    }
    if spec.p_loss > 0.0 {
        for ((b, c), v) in sample.x.indexed_iter_mut() {
            if mask.is_measured(b, c) && !dropped[b] && rng.random::<f64>() < spec.p_loss {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

pub fn apply_modifications(
    sample: &SampleMatrix,
    spec: &ModificationSpec,
    rng: &mut SeedRng,
) -> Result<SampleMatrix> {
    let mut out = sample.clone();
    apply_modifications_in_place(&mut out, spec, rng)?;
    Ok(out)
}

/// Applies `spec` to every sample, each with its own stream derived from
/// `(seed, sample index)`.
pub fn modify_dataset(dataset: &mut Dataset, spec: &ModificationSpec, seed: u64) -> Result<()> {
    if spec.is_identity() {
        return Ok(());
    }
    for (i, s) in dataset.samples.iter_mut().enumerate() {
        let mut rng = crate::seed::stream(seed, "modify", &[i as u64]);
        apply_modifications_in_place(s, spec, &mut rng)?;
    }
    Ok(())
}

/// Lists of noise levels, drop counts and loss probabilities drawn uniformly
/// and independently per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationGrid {
    pub sigmas: Vec<f64>,
    pub n_drops: Vec<usize>,
    pub p_losses: Vec<f64>,
}

impl Default for AugmentationGrid {
    fn default() -> Self {
        AugmentationGrid {
            sigmas: vec![
                0.0,
                snr_sigma(45.0),
                snr_sigma(40.0),
                snr_sigma(35.0),
                snr_sigma(30.0),
                snr_sigma(25.0),
            ],
            n_drops: vec![0, 1, 2, 3, 4, 5],
            p_losses: vec![0.0, 0.01, 0.02, 0.03, 0.04, 0.05],
        }
    }
}

impl AugmentationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.sigmas.is_empty() || self.n_drops.is_empty() || self.p_losses.is_empty() {
            return Err(Error::Config("augmentation grid lists must be nonempty".into()));
        }
        for &s in &self.sigmas {
            for &p in &self.p_losses {
                ModificationSpec {
                    sigma_noise: s,
                    n_drop: 0,
                    p_loss: p,
                }
                .validate()?;
            }
        }
        Ok(())
    }

    pub fn draw(&self, rng: &mut SeedRng) -> ModificationSpec {
        ModificationSpec {
            sigma_noise: self.sigmas[rng.random_range(0..self.sigmas.len())],
            n_drop: self.n_drops[rng.random_range(0..self.n_drops.len())],
            p_loss: self.p_losses[rng.random_range(0..self.p_losses.len())],
        }
    }
}

/// Per-sample random modification drawn from `grid`. Drop counts larger than
/// a sample's measured-bus count are clipped to that count.
pub fn augment_minibatch(
    batch: &mut [SampleMatrix],
    grid: &AugmentationGrid,
    rng: &mut SeedRng,
) -> Result<()> {
    grid.validate()?;
    for s in batch.iter_mut() {
        let mut spec = grid.draw(rng);
        if spec.is_identity() {
            continue;
        }
        spec.n_drop = spec.n_drop.min(s.mask.measured_buses().len());
        apply_modifications_in_place(s, &spec, rng)?;
    }
    Ok(())
}

/// Measurement scenario for channel ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChannelScenario {
    VoltageAmplitudes,
    VoltagePhasors,
    CurrentPhasors,
    All,
}

impl ChannelScenario {
    pub fn keep(self) -> [bool; CHANNELS] {
        let mut keep = [false; CHANNELS];
        for c in 0..CHANNELS {
            let voltage = c < 6;
            let magnitude = c % 2 == 0;
            keep[c] = match self {
                ChannelScenario::VoltageAmplitudes => voltage && magnitude,
                ChannelScenario::VoltagePhasors => voltage,
                ChannelScenario::CurrentPhasors => !voltage,
                ChannelScenario::All => true,
            };
        }
        keep
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "voltage-amplitudes" => Ok(ChannelScenario::VoltageAmplitudes),
            "voltage-phasors" => Ok(ChannelScenario::VoltagePhasors),
            "current-phasors" => Ok(ChannelScenario::CurrentPhasors),
            "all" => Ok(ChannelScenario::All),
            other => Err(Error::Config(format!("unknown channel scenario `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ChannelScenario::VoltageAmplitudes => "voltage-amplitudes",
            ChannelScenario::VoltagePhasors => "voltage-phasors",
            ChannelScenario::CurrentPhasors => "current-phasors",
            ChannelScenario::All => "all",
        }
    }
}

/// Zeroes the channels outside `scenario` and removes them from the sample
/// masks, so later modifications leave them at zero.
pub fn mask_channels(dataset: &mut Dataset, scenario: ChannelScenario) {
    if scenario == ChannelScenario::All {
        return;
    }
    let keep = scenario.keep();
    let mut cache: Vec<(Arc<MeasurementMask>, Arc<MeasurementMask>)> = Vec::new();
    for s in &mut dataset.samples {
        for (c, k) in keep.iter().enumerate() {
            if !k {
                s.x.column_mut(c).fill(0.0);
            }
        }
        let restricted = match cache.iter().find(|(from, _)| Arc::ptr_eq(from, &s.mask)) {
            Some((_, to)) => to.clone(),
            None => {
                let to = Arc::new(s.mask.restrict_channels(&keep));
                cache.push((s.mask.clone(), to.clone()));
                to
            }
        };
        s.mask = restricted;
    }
}

/// Marks the listed buses unmeasured; samples simulated from the returned
/// model zero-fill them.
pub fn reduce_measured_buses<S: AsRef<str>>(model: &FeederModel, remove: &[S]) -> Result<FeederModel> {
    model.with_unmeasured(remove)
}
