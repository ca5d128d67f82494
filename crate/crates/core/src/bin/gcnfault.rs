use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gcnfault::config::{load_feeder, resolve, ConditionsFile, ExperimentConfig, GridConfig, ModelConfig, PlanConfig};
use gcnfault::dataset::io::{manifest_path, read_dataset, read_stats, write_dataset, write_stats, DatasetMeta};
use gcnfault::dataset::{modify_dataset, snr_sigma, standardize, Dataset, ModificationSpec};
use gcnfault::eval::checks::selfcheck;
use gcnfault::eval::experiment::build_model;
use gcnfault::eval::{
    evaluate_conditions, export_hidden_features, replicates_csv, run_replicates, table_conditions, Condition,
    Experiment, Study,
};
use gcnfault::feeder::FeederModel;
use gcnfault::graph::{class_hop_distances, GraphOperator};
use gcnfault::nn::checkpoint::{read_checkpoint, write_checkpoint};
use gcnfault::nn::{train, Adam, Model, ModelProfile, TrainConfig};
use gcnfault::{seed, Error, Result};

#[derive(Parser)]
#[command(name = "gcnfault", version, about = "Fault location on distribution feeders with graph convolutions")]
struct Cli {
    /// Workspace root for relative paths.
    #[arg(long, global = true, default_value = ".")]
    root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a labeled fault dataset.
    Simulate {
        /// Feeder file, or builtin:feeder25.
        #[arg(long)]
        feeder: String,
        /// Plan TOML; the built-in default plan when omitted.
        #[arg(long)]
        plan: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use the plan's test sample count and test variants.
        #[arg(long)]
        test: bool,
        #[arg(long)]
        out: String,
    },
    /// Standardize a dataset and train a model on it.
    Train {
        #[arg(long)]
        dataset: String,
        /// gcn-default, gcn-desk, gcn-k1, gcn-desk-k1, fcnn, or a TOML file.
        #[arg(long, default_value = "gcn-default")]
        profile: String,
        /// Augmentation grid TOML; `default` for the standard grid.
        #[arg(long)]
        augment: Option<String>,
        /// Feeder for the graph; defaults to the copy stored next to the dataset.
        #[arg(long)]
        feeder: Option<String>,
        #[arg(long, default_value_t = 400)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = Adam::DEFAULT_LR)]
        lr: f64,
        #[arg(long, default_value_t = 0.1)]
        validation_fraction: f64,
        /// SNR of noise added to the standardized training set; negative disables it.
        #[arg(long, default_value_t = 45.0)]
        noise_db: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Final checkpoint; `.best` and `.stats` files are written beside it.
        #[arg(long)]
        out: String,
    },
    /// Score a checkpoint under measurement conditions.
    Eval {
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        dataset: String,
        /// Conditions TOML; clean plus every combination of I, II, III when omitted.
        #[arg(long)]
        conditions: Option<String>,
        #[arg(long)]
        feeder: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV report; the text table goes to `<report>.txt`.
        #[arg(long)]
        report: String,
    },
    /// Build the graph operator of a feeder.
    Graph {
        #[arg(long)]
        feeder: String,
        #[arg(long, default_value_t = 20)]
        kn: usize,
        /// Write the scaled Laplacian as `row,col,value` triples.
        #[arg(long, num_args = 0..=1, default_missing_value = "-")]
        export_laplacian: Option<String>,
    },
    /// Write penultimate-layer activations as CSV.
    ExportFeatures {
        #[arg(long)]
        checkpoint: String,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        out: String,
    },
    /// Run an experiment configuration end to end.
    Experiment {
        #[arg(long)]
        config: String,
        /// conditions, augmentation, high-impedance or size.
        #[arg(long, default_value = "conditions")]
        study: String,
        #[arg(long, default_value_t = 1)]
        replicates: usize,
        #[arg(long)]
        report: String,
    },
    /// Run the numerical oracle suites.
    Selfcheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn sibling(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn dataset_feeder(root: &Path, explicit: Option<&str>, dataset: &Path) -> Result<FeederModel> {
    match explicit {
        Some(f) => load_feeder(root, f),
        None => {
            let p = sibling(dataset, ".feeder");
            load_feeder(root, p.to_str().ok_or_else(|| Error::Config("non-UTF-8 path".into()))?)
        }
    }
}

fn standardized(path: &Path, stats_path: &Path) -> Result<Dataset> {
    let (mut ds, _) = read_dataset(path)?;
    standardize(&mut ds, Some(&read_stats(stats_path)?))?;
    Ok(ds)
}

fn run(cli: Cli) -> Result<bool> {
    let root = cli.root.as_path();
    match cli.command {
        Command::Simulate { feeder, plan, seed, test, out } => {
            let model = load_feeder(root, &feeder)?;
            let (cfg, text) = match plan {
                Some(p) => {
                    let text = read(&resolve(root, &p))?;
                    (PlanConfig::parse(&text)?, text)
                }
                None => (PlanConfig::default(), String::new()),
            };
            let plan = if test { cfg.test_plan()? } else { cfg.train_plan()? };
            let ds = gcnfault::sim::generate_dataset(&model, &plan, seed)?;
            let out = resolve(root, &out);
            let meta = DatasetMeta {
                seed: Some(seed),
                variants: plan.variants.iter().map(|v| v.id.clone()).collect(),
                plan: text,
            };
            write_dataset(&out, &ds, &meta)?;
            write(&sibling(&out, ".feeder"), &model.to_text())?;
            println!(
                "{} samples, {} classes -> {} ({})",
                ds.len(),
                ds.classes,
                out.display(),
                manifest_path(&out).display()
            );
        }
        Command::Train {
            dataset,
            profile,
            augment,
            feeder,
            epochs,
            batch_size,
            lr,
            validation_fraction,
            noise_db,
            seed: s,
            out,
        } => {
            let path = resolve(root, &dataset);
            let (mut ds, _) = read_dataset(&path)?;
            let stats = standardize(&mut ds, None)?;
            if noise_db >= 0.0 {
                let spec = ModificationSpec::new(snr_sigma(noise_db), 0, 0.0)?;
                modify_dataset(&mut ds, &spec, seed::derive_named(s, "train-noise", &[]))?;
            }
            let profile = match ModelProfile::named(&profile) {
                Ok(p) => p,
                Err(_) => ModelConfig::parse(&read(&resolve(root, &profile))?)?.to_profile()?,
            };
            let grid = match augment.as_deref() {
                None => None,
                Some("default") => Some(GridConfig::default().to_grid()?),
                Some(p) => Some(GridConfig::parse(&read(&resolve(root, p))?)?.to_grid()?),
            };
            let feeder = dataset_feeder(root, feeder.as_deref(), &path)?;
            if feeder.n_buses() != ds.n_buses() {
                return Err(Error::Config(format!(
                    "feeder has {} buses, dataset {}",
                    feeder.n_buses(),
                    ds.n_buses()
                )));
            }
            let model = build_model(&profile, &feeder, ds.classes, seed::derive_named(s, "init", &[]))?;
            let cfg = TrainConfig {
                epochs,
                batch_size,
                seed: seed::derive_named(s, "train", &[]),
                learning_rate: lr,
                augmentation: grid,
                validation_fraction,
            };
            let outcome = train(model, &ds, &cfg)?;
            let out = resolve(root, &out);
            write_checkpoint(&out, &outcome.model, Some(&outcome.optimizer))?;
            write_checkpoint(&sibling(&out, ".best"), &outcome.best, None)?;
            write_stats(&sibling(&out, ".stats"), &stats)?;
            if let Some(last) = outcome.history.last() {
                println!("epoch {} loss {:.6}", last.epoch + 1, last.train_loss);
            }
            if let Some(e) = outcome.best_epoch {
                println!("best validation epoch {}", e + 1);
            }
            println!("wrote {}", out.display());
        }
        Command::Eval {
            checkpoint,
            dataset,
            conditions,
            feeder,
            seed: s,
            report,
        } => {
            let ckpt = resolve(root, &checkpoint);
            let (model, _) = read_checkpoint(&ckpt)?;
            let path = resolve(root, &dataset);
            let ds = standardized(&path, &stats_for(&ckpt))?;
            let feeder = dataset_feeder(root, feeder.as_deref(), &path)?;
            let conditions = match conditions {
                Some(c) => ConditionsFile::parse(&read(&resolve(root, &c))?)?
                    .iter()
                    .map(|c| Ok(Condition::new(c.name.clone(), c.to_spec()?)))
                    .collect::<Result<Vec<_>>>()?,
                None => table_conditions(),
            };
            let hops = class_hop_distances(&feeder);
            let table = evaluate_conditions(&[("model", &model)], &ds, &conditions, &hops, s)?;
            let labels = feeder.merged_label_map();
            let names: Vec<String> = (0..labels.num_classes()).map(|c| labels.class_name(c)).collect();
            let text = table.to_text(&names, false);
            let report = resolve(root, &report);
            write(&report, &table.to_csv())?;
            write(&sibling(&report, ".txt"), &text)?;
            print!("{text}");
        }
        Command::Graph { feeder, kn, export_laplacian } => {
            let model = load_feeder(root, &feeder)?;
            let g = GraphOperator::from_feeder(&model, kn)?;
            eprintln!(
                "{} nodes, kn {}, sigma {:.6}, lambda_max {:.9}, {} nonzeros",
                g.n(),
                g.kn,
                g.sigma,
                g.lambda_max,
                g.scaled_sparse.nnz()
            );
            if let Some(dest) = export_laplacian {
                let mut csv = String::from("row,col,value\n");
                for (r, c, v) in g.scaled_sparse.triplets() {
                    csv.push_str(&format!("{r},{c},{v:e}\n"));
                }
                if dest == "-" {
                    print!("{csv}");
                } else {
                    write(&resolve(root, &dest), &csv)?;
                }
            }
        }
        Command::ExportFeatures { checkpoint, dataset, out } => {
            let ckpt = resolve(root, &checkpoint);
            let (model, _): (Model, _) = read_checkpoint(&ckpt)?;
            let ds = standardized(&resolve(root, &dataset), &stats_for(&ckpt))?;
            write(&resolve(root, &out), &export_hidden_features(&model, &ds)?)?;
        }
        Command::Experiment {
            config,
            study,
            replicates,
            report,
        } => {
            let study = Study::parse(&study)?;
            let cfg = ExperimentConfig::load(&resolve(root, &config))?;
            let exp = Experiment::new(root, cfg)?;
            let tables = run_replicates(&exp, study, replicates)?;
            let report = resolve(root, &report);
            let mut text = String::new();
            for (i, t) in tables.iter().enumerate() {
                if tables.len() > 1 {
                    text.push_str(&format!("replicate {i}\n"));
                }
                text.push_str(&t.to_text(&exp.class_names, study.all_hops()));
                text.push('\n');
            }
            let csv = if tables.len() == 1 {
                tables[0].to_csv()
            } else {
                replicates_csv(&tables)?
            };
            write(&report, &csv)?;
            write(&sibling(&report, ".txt"), &text)?;
            print!("{text}");
        }
        Command::Selfcheck { seed: s } => {
            let mut ok = true;
            for c in selfcheck(s)? {
                let status = if c.passed() { "pass" } else { "FAIL" };
                ok &= c.passed();
                println!("{status}  {:<42} {:.3e} (bound {:.0e})", c.name, c.value, c.bound);
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

/// Standardization statistics written next to a checkpoint; `.best`
/// checkpoints share the final checkpoint's file.
fn stats_for(ckpt: &Path) -> PathBuf {
    let own = sibling(ckpt, ".stats");
    if own.exists() {
        return own;
    }
    let s = ckpt.to_string_lossy();
    match s.strip_suffix(".best") {
        Some(base) => sibling(Path::new(base), ".stats"),
        None => own,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
