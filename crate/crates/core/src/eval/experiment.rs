//! End-to-end studies: simulate, standardize, train and score.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;

use super::{augmentation_cases, evaluate_conditions, Condition, MetricsReport, ReportTable, IMPEDANCE_BUCKETS};
use crate::config::{load_feeder, ExperimentConfig, ModelConfig};
use crate::dataset::{
    mask_channels, modify_dataset, reduce_measured_buses, snr_sigma, standardize, ChannelStats, Dataset,
    ModificationSpec,
};
use crate::error::{Error, Result};
use crate::feeder::FeederModel;
use crate::graph::{class_hop_distances, GraphOperator};
use crate::nn::{train, Model, ModelProfile, TrainOutcome};
use crate::seed;
use crate::sim::{generate_dataset, DatasetPlan, FaultKind, PhaseMode, ResistanceSpec, TopologyVariant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Study {
    Conditions,
    Augmentation,
    HighImpedance,
    Size,
}

impl Study {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "conditions" => Ok(Study::Conditions),
            "augmentation" => Ok(Study::Augmentation),
            "high-impedance" => Ok(Study::HighImpedance),
            "size" => Ok(Study::Size),
            other => Err(Error::Config(format!("unknown study `{other}`"))),
        }
    }

    /// Whether the text report shows zero- to three-hop accuracy.
    pub fn all_hops(self) -> bool {
        matches!(self, Study::HighImpedance | Study::Size)
    }
}

/// Standardized training set and test sets sharing its statistics.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub tests: Vec<Dataset>,
    pub stats: ChannelStats,
}

/// A validated configuration bound to its feeder.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    /// Feeder after measured-bus removals.
    pub feeder: FeederModel,
    pub hops: Array2<usize>,
    pub class_names: Vec<String>,
}

impl Experiment {
    pub fn new(root: &Path, config: ExperimentConfig) -> Result<Self> {
        let feeder = load_feeder(root, &config.feeder)?;
        Self::with_feeder(feeder, config)
    }

    pub fn with_feeder(feeder: FeederModel, config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let feeder = if config.remove_buses.is_empty() {
            feeder
        } else {
            reduce_measured_buses(&feeder, &config.remove_buses)?
        };
        let labels = feeder.merged_label_map();
        let class_names = (0..labels.num_classes()).map(|c| labels.class_name(c)).collect();
        Ok(Experiment {
            hops: class_hop_distances(&feeder),
            class_names,
            feeder,
            config,
        })
    }

    pub fn generate(&self, plan: &DatasetPlan, seed_: u64, stream: &str) -> Result<Dataset> {
        generate_dataset(&self.feeder, plan, seed::derive_named(seed_, stream, &[]))
    }

    /// Channel masking, standardization with training statistics, then
    /// training-set noise.
    pub fn prepare(&self, mut train: Dataset, mut tests: Vec<Dataset>, seed_: u64) -> Result<PreparedData> {
        let scenario = self.config.channel_scenario();
        mask_channels(&mut train, scenario);
        for t in &mut tests {
            mask_channels(t, scenario);
        }
        let stats = standardize(&mut train, None)?;
        for t in &mut tests {
            standardize(t, Some(&stats))?;
        }
        if let Some(db) = self.config.train.train_noise_db {
            let spec = ModificationSpec::new(snr_sigma(db), 0, 0.0)?;
            modify_dataset(&mut train, &spec, seed::derive_named(seed_, "train-noise", &[]))?;
        }
        Ok(PreparedData { train, tests, stats })
    }

    /// Builds and trains one configured model. Models sharing a profile share
    /// initialization and batch order, so they differ only in augmentation.
    pub fn train_model(&self, mc: &ModelConfig, train_set: &Dataset, seed_: u64) -> Result<TrainOutcome> {
        let profile = mc.to_profile()?;
        let key = [seed::hash_str(&format!("{profile:?}"))];
        let grid = if mc.augment {
            Some(self.config.augmentation.to_grid()?)
        } else {
            None
        };
        let cfg = self.config.train.to_config(seed::derive_named(seed_, "train", &key), grid)?;
        let model = build_model(&profile, &self.feeder, train_set.classes, seed::derive_named(seed_, "init", &key))?;
        train(model, train_set, &cfg)
    }

    fn train_all(&self, models: &[ModelConfig], train_set: &Dataset, seed_: u64) -> Result<Vec<(String, Model)>> {
        if models.is_empty() {
            return Err(Error::Config("experiment lists no models".into()));
        }
        let best = self.config.train.checkpoint == "best";
        models
            .iter()
            .map(|mc| {
                let out = self.train_model(mc, train_set, seed_)?;
                Ok((mc.name.clone(), if best { out.best } else { out.model }))
            })
            .collect()
    }

    fn score(&self, models: &[(String, Model)], test: &Dataset, conditions: &[Condition], seed_: u64) -> Result<ReportTable> {
        let refs: Vec<(&str, &Model)> = models.iter().map(|(n, m)| (n.as_str(), m)).collect();
        evaluate_conditions(&refs, test, conditions, &self.hops, seed::derive_named(seed_, "conditions", &[]))
    }

    fn conditions(&self) -> Result<Vec<Condition>> {
        if self.config.conditions.is_empty() {
            return Err(Error::Config("experiment lists no conditions".into()));
        }
        self.config
            .conditions
            .iter()
            .map(|c| Ok(Condition::new(c.name.clone(), c.to_spec()?)))
            .collect()
    }
}

/// Initializes a model for `profile`; GCN profiles build their graph from
/// `feeder`.
pub fn build_model(profile: &ModelProfile, feeder: &FeederModel, classes: usize, init_seed: u64) -> Result<Model> {
    let graph = match profile.kn() {
        Some(kn) => Some(Arc::new(GraphOperator::from_feeder(feeder, kn)?)),
        None => None,
    };
    profile.build(graph, feeder.n_buses(), classes, init_seed)
}

/// Every configured model under every configured condition.
pub fn run_condition_matrix(exp: &Experiment, seed_: u64) -> Result<ReportTable> {
    let conditions = exp.conditions()?;
    let plan = exp.config.plan.train_plan()?;
    let test_plan = exp.config.plan.test_plan()?;
    let data = exp.prepare(
        exp.generate(&plan, seed_, "train-data")?,
        vec![exp.generate(&test_plan, seed_, "test-data")?],
        seed_,
    )?;
    let models = exp.train_all(&exp.config.models, &data.train, seed_)?;
    exp.score(&models, &data.tests[0], &conditions, seed_)
}

/// The first configured model trained with and without augmentation, scored
/// on the five escalating cases.
pub fn run_augmentation_study(exp: &Experiment, seed_: u64) -> Result<ReportTable> {
    let base = exp
        .config
        .models
        .first()
        .ok_or_else(|| Error::Config("experiment lists no models".into()))?;
    let plain = ModelConfig {
        augment: false,
        ..base.clone()
    };
    let aug = ModelConfig {
        name: format!("{}+aug", base.name),
        augment: true,
        ..base.clone()
    };
    let plan = exp.config.plan.train_plan()?;
    let test_plan = exp.config.plan.test_plan()?;
    let data = exp.prepare(
        exp.generate(&plan, seed_, "train-data")?,
        vec![exp.generate(&test_plan, seed_, "test-data")?],
        seed_,
    )?;
    let models = exp.train_all(&[plain, aug], &data.train, seed_)?;
    exp.score(&models, &data.tests[0], &augmentation_cases(), seed_)
}

/// Samples per phase combination at each bus in the high-impedance
/// training plan.
pub const HIGH_IMPEDANCE_TRAIN_SAMPLES: usize = 40;

/// Trains on the configured low-resistance plan plus enumerated SLG faults
/// drawn from the training resistance intervals, and tests on SLG faults from
/// the disjoint test intervals in each resistance bucket.
pub fn run_high_impedance_study(exp: &Experiment, seed_: u64) -> Result<ReportTable> {
    let plan = exp.config.plan.train_plan()?;
    let test_plan = exp.config.plan.test_plan()?;
    let hi_plan = DatasetPlan {
        samples_per_type: HIGH_IMPEDANCE_TRAIN_SAMPLES,
        kinds: vec![FaultKind::Slg],
        phase_mode: PhaseMode::Enumerate,
        resistance: ResistanceSpec::high_impedance_train(),
        variants: vec![TopologyVariant::base()],
        ..plan.clone()
    };
    let mut train_set = exp.generate(&plan, seed_, "train-data")?;
    train_set.extend(exp.generate(&hi_plan, seed_, "high-impedance-train")?)?;
    let mut tests = Vec::new();
    let mut rows = Vec::new();
    for (i, &(lo, hi)) in IMPEDANCE_BUCKETS.iter().enumerate() {
        let bucket = DatasetPlan {
            kinds: vec![FaultKind::Slg],
            resistance: ResistanceSpec::high_impedance_test().restrict(lo, hi)?,
            ..test_plan.clone()
        };
        tests.push(exp.generate(&bucket, seed::derive(seed_, &[i as u64]), "high-impedance-test")?);
        rows.push(format!("{lo}-{hi}"));
    }
    let data = exp.prepare(train_set, tests, seed_)?;
    let models = exp.train_all(&exp.config.models, &data.train, seed_)?;
    let mut table = ReportTable::new(models.iter().map(|(n, _)| n.clone()).collect(), rows);
    for (r, test) in data.tests.iter().enumerate() {
        let labels = test.labels();
        for (m, (_, model)) in models.iter().enumerate() {
            let pred = model.predict(&test.samples)?;
            table.cells[m][r] = Some(MetricsReport::compute(&pred, &labels, &exp.hops)?);
        }
    }
    Ok(table)
}

/// Trains on per-cell subsamples of the plan (each smaller plan is a prefix
/// of every cell) and scores on the full clean test set.
pub fn run_size_sweep(exp: &Experiment, fractions: &[f64], seed_: u64) -> Result<ReportTable> {
    if fractions.is_empty() {
        return Err(Error::Config("size sweep needs at least one fraction".into()));
    }
    let plan = exp.config.plan.train_plan()?;
    let test_raw = exp.generate(&exp.config.plan.test_plan()?, seed_, "test-data")?;
    let mut rows = Vec::new();
    let mut columns: Vec<Vec<MetricsReport>> = Vec::new();
    let mut names = Vec::new();
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::Config(format!("size fraction {f} not in (0, 1]")));
        }
        let sub = DatasetPlan {
            samples_per_type: ((f * plan.samples_per_type as f64).round() as usize).max(1),
            ..plan.clone()
        };
        let data = exp.prepare(exp.generate(&sub, seed_, "train-data")?, vec![test_raw.clone()], seed_)?;
        let models = exp.train_all(&exp.config.models, &data.train, seed_)?;
        let labels = data.tests[0].labels();
        let mut reports = Vec::new();
        for (_, model) in &models {
            let pred = model.predict(&data.tests[0].samples)?;
            reports.push(MetricsReport::compute(&pred, &labels, &exp.hops)?);
        }
        names = models.into_iter().map(|(n, _)| n).collect();
        columns.push(reports);
        rows.push(format!("{f}"));
    }
    let mut table = ReportTable::new(names, rows);
    for (r, reports) in columns.into_iter().enumerate() {
        for (m, rep) in reports.into_iter().enumerate() {
            table.cells[m][r] = Some(rep);
        }
    }
    Ok(table)
}

/// Runs `study` once per replicate. Replicate 0 uses the configured seed.
pub fn run_replicates(exp: &Experiment, study: Study, replicates: usize) -> Result<Vec<ReportTable>> {
    if replicates == 0 {
        return Err(Error::Config("need at least one replicate".into()));
    }
    (0..replicates)
        .map(|r| {
            let s = if r == 0 {
                exp.config.seed
            } else {
                seed::derive_named(exp.config.seed, "replicate", &[r as u64])
            };
            match study {
                Study::Conditions => run_condition_matrix(exp, s),
                Study::Augmentation => run_augmentation_study(exp, s),
                Study::HighImpedance => run_high_impedance_study(exp, s),
                Study::Size => {
                    let fractions = if exp.config.fractions.is_empty() {
                        super::SIZE_FRACTIONS.to_vec()
                    } else {
                        exp.config.fractions.clone()
                    };
                    run_size_sweep(exp, &fractions, s)
                }
            }
        })
        .collect()
}

/// CSV of the penultimate-layer activations: the class label followed by
/// one column per hidden unit.
pub fn export_hidden_features(model: &Model, dataset: &Dataset) -> Result<String> {
    let h = model.hidden_features(&dataset.samples)?;
    let mut out = String::from("label");
    for j in 0..h.ncols() {
        let _ = write!(out, ",h{j}");
    }
    out.push('\n');
    for (row, s) in h.rows().into_iter().zip(&dataset.samples) {
        let _ = write!(out, "{}", s.label);
        for v in row {
            let _ = write!(out, ",{v:e}");
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ConditionConfig, PlanConfig, TrainSection};
    use crate::fixtures;

    fn tiny() -> Experiment {
        let mut c = ExperimentConfig::desk();
        c.plan = PlanConfig {
            samples_per_type: 2,
            base_ohms: 10.0,
            ..PlanConfig::default()
        };
        c.train = TrainSection {
            epochs: 2,
            learning_rate: 1e-3,
            ..TrainSection::default()
        };
        c.models = vec![
            ModelConfig {
                filters: Some(4),
                dense: Some(vec![8]),
                ..ModelConfig::named("gcn", "gcn-desk", false)
            },
            ModelConfig {
                hidden: Some(vec![8]),
                ..ModelConfig::named("fcnn", "fcnn", false)
            },
        ];
        c.conditions = vec![
            ConditionConfig {
                name: "clean".into(),
                snr_db: None,
                n_drop: 0,
                p_loss: 0.0,
            },
            ConditionConfig {
                name: "I+II+III".into(),
                snr_db: Some(45.0),
                n_drop: 1,
                p_loss: 0.01,
            },
        ];
        Experiment::with_feeder(fixtures::feeder25(), c).unwrap()
    }

    #[test]
    fn condition_matrix_is_deterministic() {
        let exp = tiny();
        let a = run_condition_matrix(&exp, 3).unwrap();
        let b = run_condition_matrix(&exp, 3).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.models, ["gcn", "fcnn"]);
        assert_eq!(a.rows, ["clean", "I+II+III"]);
        let cell = a.cell("gcn", "clean").unwrap();
        let single = (0..25).filter(|&b| exp.feeder.bus_phases(b).len() == 1).count();
        assert_eq!(cell.samples, 2 * (75 - 2 * single));
    }

    #[test]
    fn no_conditions_is_an_error() {
        let mut exp = tiny();
        exp.config.conditions.clear();
        assert!(run_condition_matrix(&exp, 1).is_err());
    }

    #[test]
    fn size_sweep_rows() {
        let mut exp = tiny();
        exp.config.models.truncate(1);
        let t = run_size_sweep(&exp, &[1.0, 0.5], 2).unwrap();
        assert_eq!(t.rows, ["1", "0.5"]);
        assert!(t.cells[0].iter().all(Option::is_some));
        assert!(run_size_sweep(&exp, &[], 2).is_err());
    }

    #[test]
    fn hidden_feature_export() {
        let exp = tiny();
        let ds = exp.generate(&exp.config.plan.test_plan().unwrap(), 1, "x").unwrap();
        let data = exp.prepare(ds, Vec::new(), 1).unwrap();
        let mc = &exp.config.models[1];
        let model = build_model(&mc.to_profile().unwrap(), &exp.feeder, data.train.classes, 1).unwrap();
        let csv = export_hidden_features(&model, &data.train).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), data.train.len() + 1);
        assert_eq!(lines[0].split(',').count(), 9);
    }
}
