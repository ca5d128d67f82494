//! TOML experiment and plan configuration.
//!
//! ```toml
//! feeder = "builtin:feeder25"
//! seed = 1
//!
//! [plan]
//! samples_per_type = 20
//! base_ohms = 10.0
//!
//! [train]
//! epochs = 100
//! learning_rate = 1e-3
//! train_noise_db = 45
//!
//! [[model]]
//! name = "gcn"
//! profile = "gcn-desk"
//!
//! [[condition]]
//! name = "I"
//! snr_db = 45
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::dataset::{snr_sigma, AugmentationGrid, ChannelScenario, ModificationSpec};
use crate::error::{Error, Result};
use crate::feeder::{parse_feeder, FeederModel, SwitchState};
use crate::fixtures;
use crate::nn::{FcnnProfile, GcnProfile, ModelProfile, TrainConfig};
use crate::sim::{DatasetPlan, FaultKind, LoadHistogram, PhaseMode, ResistanceSpec, SimSettings, TopologyVariant};

fn parse_toml<T: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Config(format!("{what}: {e}")))
}

/// Resolves `path` against `root` unless it is absolute.
pub fn resolve(root: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Loads a feeder from a file, or a bundled one named `builtin:feeder25` /
/// `builtin:feeder2`.
pub fn load_feeder(root: &Path, spec: &str) -> Result<FeederModel> {
    match spec {
        "builtin:feeder25" => Ok(fixtures::feeder25()),
        "builtin:feeder2" => Ok(fixtures::feeder2()),
        path => {
            let p = resolve(root, path);
            let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            parse_feeder(&text)
        }
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ResistanceConfig {
    Named(String),
    Range { lo: f64, hi: f64 },
    Intervals { intervals: Vec<(f64, f64)> },
}

impl ResistanceConfig {
    /// `standard`, `high-impedance-train` or `high-impedance-test`, or an
    /// explicit range or interval list.
    pub fn to_spec(&self) -> Result<ResistanceSpec> {
        let spec = match self {
            ResistanceConfig::Named(n) => match n.as_str() {
                "standard" => ResistanceSpec::standard(),
                "high-impedance-train" => ResistanceSpec::high_impedance_train(),
                "high-impedance-test" => ResistanceSpec::high_impedance_test(),
                other => return Err(Error::Config(format!("unknown resistance set `{other}`"))),
            },
            ResistanceConfig::Range { lo, hi } => ResistanceSpec::Uniform { lo: *lo, hi: *hi },
            ResistanceConfig::Intervals { intervals } => ResistanceSpec::Intervals(intervals.clone()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LoadConfig {
    pub lo: f64,
    pub hi: f64,
    #[serde(default = "one_bin")]
    pub weights: Vec<f64>,
}

fn one_bin() -> Vec<f64> {
    vec![1.0]
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PhaseChangeConfig {
    pub path: Vec<String>,
    pub phase: u8,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VariantConfig {
    pub id: String,
    /// `(switch id, "open" | "closed")` pairs.
    #[serde(default)]
    pub switches: Vec<(String, String)>,
    #[serde(default)]
    pub phase_changes: Vec<PhaseChangeConfig>,
}

impl VariantConfig {
    pub fn to_variant(&self) -> Result<TopologyVariant> {
        let switches = self
            .switches
            .iter()
            .map(|(id, st)| {
                let state = match st.as_str() {
                    "open" => SwitchState::Open,
                    "closed" => SwitchState::Closed,
                    other => return Err(Error::Config(format!("switch state `{other}` is not open/closed"))),
                };
                Ok((id.clone(), state))
            })
            .collect::<Result<_>>()?;
        Ok(TopologyVariant {
            id: self.id.clone(),
            switches,
            phase_changes: self
                .phase_changes
                .iter()
                .map(|c| (c.path.clone(), c.phase))
                .collect(),
        })
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PlanConfig {
    pub samples_per_type: usize,
    /// Test-set samples per cell; defaults to `samples_per_type`.
    pub test_samples_per_type: Option<usize>,
    pub kinds: Vec<String>,
    /// `random` or `enumerate`.
    pub phase_mode: String,
    pub resistance: ResistanceConfig,
    pub base_ohms: f64,
    pub load: Option<LoadConfig>,
    pub buses: Option<Vec<String>>,
    pub variants: Vec<VariantConfig>,
    /// Topology variants for test data; defaults to `variants`.
    pub test_variants: Option<Vec<VariantConfig>>,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            samples_per_type: 20,
            test_samples_per_type: None,
            kinds: vec!["SLG".into(), "LLG".into(), "LL".into()],
            phase_mode: "random".into(),
            resistance: ResistanceConfig::Named("standard".into()),
            base_ohms: 1.0,
            load: None,
            buses: None,
            variants: Vec::new(),
            test_variants: None,
        }
    }
}

impl PlanConfig {
    pub fn parse(text: &str) -> Result<Self> {
        parse_toml(text, "plan")
    }

    fn build(&self, samples: usize, variants: &[VariantConfig]) -> Result<DatasetPlan> {
        let kinds = self.kinds.iter().map(|k| FaultKind::parse(k)).collect::<Result<Vec<_>>>()?;
        let phase_mode = match self.phase_mode.as_str() {
            "random" => PhaseMode::Random,
            "enumerate" => PhaseMode::Enumerate,
            other => return Err(Error::Config(format!("unknown phase mode `{other}`"))),
        };
        let load = match &self.load {
            Some(l) => LoadHistogram::new(l.lo, l.hi, l.weights.clone())?,
            None => LoadHistogram::default(),
        };
        let settings = SimSettings {
            base_ohms: self.base_ohms,
            ..SimSettings::default()
        };
        let variants = if variants.is_empty() {
            vec![TopologyVariant::base()]
        } else {
            variants.iter().map(VariantConfig::to_variant).collect::<Result<_>>()?
        };
        let plan = DatasetPlan {
            samples_per_type: samples,
            kinds,
            phase_mode,
            resistance: self.resistance.to_spec()?,
            load,
            variants,
            buses: self.buses.clone(),
            settings,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn train_plan(&self) -> Result<DatasetPlan> {
        self.build(self.samples_per_type, &self.variants)
    }

    pub fn test_plan(&self) -> Result<DatasetPlan> {
        self.build(
            self.test_samples_per_type.unwrap_or(self.samples_per_type),
            self.test_variants.as_deref().unwrap_or(&self.variants),
        )
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Noise levels as SNR in dB; `inf` or a missing entry means no noise.
    pub snr_db: Vec<f64>,
    pub include_clean: bool,
    pub n_drops: Vec<usize>,
    pub p_losses: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            snr_db: vec![45.0, 40.0, 35.0, 30.0, 25.0],
            include_clean: true,
            n_drops: vec![0, 1, 2, 3, 4, 5],
            p_losses: vec![0.0, 0.01, 0.02, 0.03, 0.04, 0.05],
        }
    }
}

impl GridConfig {
    pub fn parse(text: &str) -> Result<Self> {
        parse_toml(text, "augmentation grid")
    }

    pub fn to_grid(&self) -> Result<AugmentationGrid> {
        let mut sigmas = Vec::new();
        if self.include_clean {
            sigmas.push(0.0);
        }
        sigmas.extend(self.snr_db.iter().map(|&db| snr_sigma(db)));
        let grid = AugmentationGrid {
            sigmas,
            n_drops: self.n_drops.clone(),
            p_losses: self.p_losses.clone(),
        };
        grid.validate()?;
        Ok(grid)
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    /// Noise added once to the standardized training set.
    pub train_noise_db: Option<f64>,
    /// Evaluate the `final` or the `best` (validation) checkpoint.
    pub checkpoint: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: 400,
            batch_size: 32,
            learning_rate: crate::nn::Adam::DEFAULT_LR,
            validation_fraction: 0.1,
            train_noise_db: Some(45.0),
            checkpoint: "final".into(),
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, seed: u64, augmentation: Option<AugmentationGrid>) -> Result<TrainConfig> {
        if !matches!(self.checkpoint.as_str(), "final" | "best") {
            return Err(Error::Config(format!("checkpoint must be final or best, not `{}`", self.checkpoint)));
        }
        let c = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            learning_rate: self.learning_rate,
            augmentation,
            validation_fraction: self.validation_fraction,
        };
        c.validate()?;
        Ok(c)
    }
}

/// A named profile, or custom GCN fields layered over `gcn-desk`.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_profile")]
    pub profile: String,
    #[serde(default)]
    pub augment: bool,
    pub ks: Option<Vec<usize>>,
    pub filters: Option<usize>,
    pub dense: Option<Vec<usize>>,
    pub dropout: Option<f64>,
    pub kn: Option<usize>,
    pub hidden: Option<Vec<usize>>,
}

fn default_name() -> String {
    "model".into()
}

fn default_profile() -> String {
    "gcn-desk".into()
}

impl ModelConfig {
    pub fn named(name: &str, profile: &str, augment: bool) -> Self {
        ModelConfig {
            name: name.into(),
            profile: profile.into(),
            augment,
            ks: None,
            filters: None,
            dense: None,
            dropout: None,
            kn: None,
            hidden: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        parse_toml(text, "model profile")
    }

    pub fn to_profile(&self) -> Result<ModelProfile> {
        let base = if self.profile == "custom" {
            ModelProfile::Gcn(GcnProfile::desk())
        } else {
            ModelProfile::named(&self.profile)?
        };
        Ok(match base {
            ModelProfile::Gcn(mut p) => {
                if self.hidden.is_some() {
                    return Err(Error::Config("`hidden` applies to fcnn profiles".into()));
                }
                if let Some(v) = &self.ks {
                    p.ks = v.clone();
                }
                if let Some(v) = self.filters {
                    p.filters = v;
                }
                if let Some(v) = &self.dense {
                    p.dense = v.clone();
                }
                if let Some(v) = self.dropout {
                    p.dropout = v;
                }
                if let Some(v) = self.kn {
                    p.kn = v;
                }
                ModelProfile::Gcn(p)
            }
            ModelProfile::Fcnn(mut p) => {
                if self.ks.is_some() || self.filters.is_some() || self.kn.is_some() || self.dense.is_some() {
                    return Err(Error::Config("GCN fields given for an fcnn profile".into()));
                }
                if let Some(v) = &self.hidden {
                    p.hidden = v.clone();
                }
                if let Some(v) = self.dropout {
                    p.dropout = v;
                }
                ModelProfile::Fcnn(FcnnProfile { ..p })
            }
        })
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConditionConfig {
    pub name: String,
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub n_drop: usize,
    #[serde(default)]
    pub p_loss: f64,
}

impl ConditionConfig {
    pub fn to_spec(&self) -> Result<ModificationSpec> {
        ModificationSpec::new(self.snr_db.map_or(0.0, snr_sigma), self.n_drop, self.p_loss)
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ConditionsFile {
    pub condition: Vec<ConditionConfig>,
}

impl ConditionsFile {
    pub fn parse(text: &str) -> Result<Vec<ConditionConfig>> {
        let f: ConditionsFile = parse_toml(text, "conditions")?;
        if f.condition.is_empty() {
            return Err(Error::Config("condition list is empty".into()));
        }
        Ok(f.condition)
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub feeder: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub augmentation: GridConfig,
    #[serde(default, rename = "model")]
    pub models: Vec<ModelConfig>,
    #[serde(default, rename = "condition")]
    pub conditions: Vec<ConditionConfig>,
    /// `all`, `voltage-amplitudes`, `voltage-phasors` or `current-phasors`.
    #[serde(default = "all_channels")]
    pub channels: String,
    #[serde(default)]
    pub remove_buses: Vec<String>,
    /// Dataset-size sweep fractions.
    #[serde(default)]
    pub fractions: Vec<f64>,
}

fn all_channels() -> String {
    "all".into()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: ExperimentConfig = parse_toml(text, "experiment")?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.plan.train_plan()?;
        self.plan.test_plan()?;
        self.augmentation.to_grid()?;
        self.train.to_config(self.seed, None)?;
        ChannelScenario::parse(&self.channels)?;
        for m in &self.models {
            m.to_profile()?;
        }
        for c in &self.conditions {
            c.to_spec()?;
        }
        let mut names: Vec<&str> = self.models.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("model names must be unique".into()));
        }
        for &f in &self.fractions {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("size fraction {f} not in (0, 1]")));
            }
        }
        Ok(())
    }

    pub fn channel_scenario(&self) -> ChannelScenario {
        ChannelScenario::parse(&self.channels).expect("validated")
    }

    /// Reduced-profile experiment on the bundled 25-bus feeder.
    pub fn desk() -> Self {
        ExperimentConfig {
            feeder: "builtin:feeder25".into(),
            seed: 1,
            plan: PlanConfig {
                base_ohms: 10.0,
                ..PlanConfig::default()
            },
            train: TrainSection {
                epochs: 100,
                learning_rate: 1e-3,
                ..TrainSection::default()
            },
            augmentation: GridConfig::default(),
            models: vec![
                ModelConfig::named("gcn", "gcn-desk", false),
                ModelConfig::named("fcnn", "fcnn", false),
            ],
            conditions: Vec::new(),
            channels: all_channels(),
            remove_buses: Vec::new(),
            fractions: Vec::new(),
        }
    }
}
