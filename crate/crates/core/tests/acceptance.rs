//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::collections::VecDeque;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::Rng;

use gcnfault::config::{ConditionConfig, ExperimentConfig, ModelConfig};
use gcnfault::dataset::snr_sigma;
use gcnfault::eval::checks::{
    gradient_error, laplacian_invariants, locality_violation, small_gcn, spectral_equivalence,
};
use gcnfault::eval::{khop_accuracy, run_condition_matrix, Experiment, ReportTable};
use gcnfault::feeder::{BranchKind, Complex, FeederModel, SwitchState};
use gcnfault::fixtures;
use gcnfault::graph::{class_hop_distances, GraphOperator};
use gcnfault::nn::{build_default_gcn, build_fcnn};
use gcnfault::sim::{
    build_nodal_system, draw_scenario, solve_fault, DatasetPlan, FaultResistance, FaultScenario, FaultType,
    SimSettings, TopologyVariant,
};
use gcnfault::{seed, Result};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn spectral() -> Result<Verdict> {
    let t = Instant::now();
    let err = spectral_equivalence(50, 20260101)?;
    let el = t.elapsed();
    verdict(
        err <= 1e-10 && el <= Duration::from_secs(10),
        format!("max relative error {err:.2e} over 50 graphs in {}", secs(el)),
    )
}

fn gradients() -> Result<Verdict> {
    let t = Instant::now();
    let gcn = gradient_error(&small_gcn(7)?, 4, 7)?;
    let fcnn = gradient_error(&build_fcnn(2, 3, 7)?, 2, 8)?;
    let el = t.elapsed();
    verdict(
        gcn <= 1e-4 && fcnn <= 1e-4 && el <= Duration::from_secs(60),
        format!("gcn {gcn:.2e}, fcnn {fcnn:.2e} in {}", secs(el)),
    )
}

fn laplacian() -> Result<Verdict> {
    let c = laplacian_invariants(100, 99)?;
    let pass = c.min_eigenvalue >= -1e-9
        && c.max_eigenvalue <= 2.0 + 1e-9
        && c.smallest_magnitude <= 1e-9
        && c.min_cosine >= 1.0 - 1e-9;
    verdict(
        pass,
        format!(
            "spectrum [{:.2e}, {:.12}], |lambda_0| <= {:.2e}, cosine >= 1 - {:.2e}",
            c.min_eigenvalue,
            c.max_eigenvalue,
            c.smallest_magnitude,
            1.0 - c.min_cosine
        ),
    )
}

fn locality() -> Result<Verdict> {
    let d: Vec<f64> = (1..=3).map(|k| locality_violation(k, 40 + k as u64)).collect::<Result<_>>()?;
    verdict(
        d.iter().all(|&x| x <= 1e-12),
        format!("max delta beyond K hops: K=1 {:.1e}, K=2 {:.1e}, K=3 {:.1e}", d[0], d[1], d[2]),
    )
}

fn desk_plan() -> DatasetPlan {
    let mut plan = DatasetPlan::default();
    plan.settings.base_ohms = 10.0;
    plan
}

fn simulator() -> Result<Verdict> {
    let m = fixtures::feeder25();
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut plans = vec![(desk_plan(), seed::derive_named(1, "train-data", &[]))];
    plans.push((desk_plan(), seed::derive_named(1, "test-data", &[])));
    let mut tie = desk_plan();
    tie.samples_per_type = 5;
    tie.variants = vec![TopologyVariant {
        id: "tie".into(),
        switches: vec![("s1".into(), SwitchState::Open), ("s2".into(), SwitchState::Closed)],
        phase_changes: vec![(vec!["l13-14".into(), "l14-15".into()], 2)],
    }];
    plans.push((tie, 77));
    for (plan, s) in &plans {
        let variants = plan.variant_models(&m)?;
        for slot in plan.slots(&m, &variants)? {
            for i in 0..plan.samples_per_type {
                let sc = draw_scenario(plan, &m, &slot, i, *s);
                let sys = build_nodal_system(&variants[slot.variant], &sc, &plan.settings)?;
                let v = solve_fault(&sys)?;
                worst = worst.max(sys.residual(&v));
                count += 1;
            }
        }
    }
    let mut bolted = 0.0f64;
    for b in 0..m.n_buses() {
        for p in m.bus_phases(b).iter() {
            let sc = FaultScenario {
                faulted_bus: m.buses()[b].id.clone(),
                fault_type: FaultType::Slg(p),
                resistance: FaultResistance::Bolted,
                load_level: 1.0,
                topology_variant: "base".into(),
            };
            let sys = build_nodal_system(&m, &sc, &SimSettings::default())?;
            let v = solve_fault(&sys)?;
            bolted = bolted.max(v[sys.node(b, p).unwrap()].norm());
        }
    }
    let thevenin = thevenin_gap()?;
    verdict(
        worst <= 1e-9 && bolted <= 1e-3 && thevenin <= 1e-9,
        format!(
            "KCL residual {worst:.2e} over {count} scenarios, bolted SLG |V| <= {bolted:.2e}, Thevenin gap {thevenin:.2e}"
        ),
    )
}

/// Single-phase SLG at the load bus of the two-bus fixture against the
/// closed-form Thevenin equivalent.
fn thevenin_gap() -> Result<f64> {
    let m = fixtures::feeder2();
    let zs = m.source_impedance()[0];
    let zline = Complex::new(0.05, 0.1);
    let mut worst = 0.0f64;
    for &(rf, load) in &[(0.05, 0.316), (0.5, 1.0), (3.0, 0.6), (20.0, 0.9)] {
        let sc = FaultScenario {
            faulted_bus: "a".into(),
            fault_type: FaultType::Slg(1),
            resistance: FaultResistance::Ohms(rf),
            load_level: load,
            topology_variant: "base".into(),
        };
        let sys = build_nodal_system(&m, &sc, &SimSettings::default())?;
        let v = solve_fault(&sys)?;
        let zl = Complex::new(1.0, 0.0) / (Complex::new(0.5, 0.2) * load).conj();
        let zup = zs + zline;
        let vth = zl / (zup + zl);
        let zth = zup * zl / (zup + zl);
        let r = Complex::new(rf, 0.0);
        let expect = vth * r / (zth + r);
        let got = v[sys.node(m.bus_index("a").unwrap(), 1).unwrap()];
        worst = worst.max((got - expect).norm());
    }
    Ok(worst)
}

fn desk_experiment() -> Result<Experiment> {
    let mut cfg = ExperimentConfig::desk();
    cfg.models = vec![
        ModelConfig::named("gcn", "gcn-desk", false),
        ModelConfig::named("fcnn", "fcnn", false),
        ModelConfig::named("gcn+aug", "gcn-desk", true),
    ];
    cfg.conditions = vec![
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
        ConditionConfig {
            name: "case 4".into(),
            snr_db: Some(30.0),
            n_drop: 4,
            p_loss: 0.04,
        },
    ];
    Experiment::with_feeder(fixtures::feeder25(), cfg)
}

fn zero(t: &ReportTable, model: &str, row: &str) -> f64 {
    t.cell(model, row).unwrap().zero_hop()
}

/// Criteria 6 to 8 share five replicate runs of the desk experiment.
fn end_to_end() -> Result<[Verdict; 3]> {
    let exp = desk_experiment()?;
    let mut tables = Vec::new();
    let mut first = Duration::ZERO;
    for r in 0..5u64 {
        let s = if r == 0 {
            exp.config.seed
        } else {
            seed::derive_named(exp.config.seed, "replicate", &[r])
        };
        let t = Instant::now();
        tables.push(run_condition_matrix(&exp, s)?);
        if r == 0 {
            first = t.elapsed();
        }
        let tb = tables.last().unwrap();
        println!(
            "  replicate {r}: gcn clean {:.4}/{:.4}, I+II+III gcn {:.4} fcnn {:.4}, case 4 plain {:.4} aug {:.4} ({})",
            zero(tb, "gcn", "clean"),
            tb.cell("gcn", "clean").unwrap().one_hop(),
            zero(tb, "gcn", "I+II+III"),
            zero(tb, "fcnn", "I+II+III"),
            zero(tb, "gcn", "case 4"),
            zero(tb, "gcn+aug", "case 4"),
            secs(t.elapsed())
        );
    }
    let base = tables[0].cell("gcn", "clean").unwrap();
    let fcnn_ok = tables[0].cell("fcnn", "clean").is_some();
    let c6 = Verdict {
        pass: base.zero_hop() >= 0.85 && base.one_hop() >= 0.95 && first <= Duration::from_secs(600) && fcnn_ok,
        detail: format!(
            "clean zero-hop {:.4}, one-hop {:.4} on {} samples after {} epochs; replicate run {}",
            base.zero_hop(),
            base.one_hop(),
            base.samples,
            exp.config.train.epochs,
            secs(first)
        ),
    };
    let wins7 = tables
        .iter()
        .filter(|t| zero(t, "gcn", "I+II+III") > zero(t, "fcnn", "I+II+III"))
        .count();
    let c7 = Verdict {
        pass: wins7 >= 4,
        detail: format!("gcn beats fcnn under (sigma45, 1, 0.01) in {wins7}/5 replicates"),
    };
    let gains: Vec<f64> = tables
        .iter()
        .map(|t| zero(t, "gcn+aug", "case 4") - zero(t, "gcn", "case 4"))
        .collect();
    let wins8 = gains.iter().filter(|&&g| g >= 0.05).count();
    let c8 = Verdict {
        pass: wins8 >= 4,
        detail: format!(
            "augmentation gain on case 4 >= 5 points in {wins8}/5 replicates (gains {})",
            gains.iter().map(|g| format!("{:+.1}", 100.0 * g)).collect::<Vec<_>>().join(", ")
        ),
    };
    Ok([c6, c7, c8])
}

/// Class hop distances by 0-1 BFS over buses: merging branches cost 0,
/// other closed branches cost 1.
fn brute_force_class_hops(m: &FeederModel) -> Array2<usize> {
    let n = m.n_buses();
    let mut adj = vec![Vec::new(); n];
    for br in m.branches() {
        let closed = match br.kind {
            BranchKind::Switch { state, .. } => state == SwitchState::Closed,
            _ => true,
        };
        if !closed {
            continue;
        }
        let merge = matches!(br.kind, BranchKind::Regulator)
            || matches!(br.kind, BranchKind::Switch { normal: SwitchState::Closed, .. });
        let (a, b) = (m.bus_index(&br.from).unwrap(), m.bus_index(&br.to).unwrap());
        let w = usize::from(!merge);
        adj[a].push((b, w));
        adj[b].push((a, w));
    }
    let labels = m.merged_label_map();
    let c = labels.num_classes();
    let mut out = Array2::from_elem((c, c), usize::MAX);
    for s in 0..n {
        let mut dist = vec![usize::MAX; n];
        dist[s] = 0;
        let mut dq = VecDeque::from([s]);
        while let Some(u) = dq.pop_front() {
            for &(v, w) in &adj[u] {
                if dist[u] + w < dist[v] {
                    dist[v] = dist[u] + w;
                    if w == 0 {
                        dq.push_front(v);
                    } else {
                        dq.push_back(v);
                    }
                }
            }
        }
        for t in 0..n {
            let (a, b) = (labels.class_of(s), labels.class_of(t));
            out[[a, b]] = out[[a, b]].min(dist[t]);
        }
    }
    out
}

fn formulas() -> Result<Verdict> {
    let sigma_err = (snr_sigma(45.0) - 10f64.powf(-2.25)).abs();
    let m = fixtures::feeder25();
    let (n, c) = (25, 23);
    let g = std::sync::Arc::new(GraphOperator::from_feeder(&m, 20)?);
    let gcn = build_default_gcn(g, c, 1)?.param_count();
    let gcn_expect = 12 * 256 * 4 + 256 * 256 * 5 + 256 * 256 * 6 + (n * 256) * 512 + 512 + 512 * 256 + 256 + 256 * c + c;
    let fcnn = build_fcnn(n, c, 1)?.param_count();
    let fcnn_expect = (n * 12) * 256 + 256 + 256 * 128 + 128 + 128 * 64 + 64 + 64 * c + c;
    let hops = class_hop_distances(&m);
    let oracle = brute_force_class_hops(&m);
    let mut rng = seed::rng(2024);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let len = rng.random_range(1..200);
        let labels: Vec<usize> = (0..len).map(|_| rng.random_range(0..c)).collect();
        let pred: Vec<usize> = (0..len).map(|_| rng.random_range(0..c)).collect();
        for k in 0..4 {
            let hits = pred.iter().zip(&labels).filter(|(p, l)| oracle[[**l, **p]] <= k).count();
            if khop_accuracy(&pred, &labels, &hops, k)? != hits as f64 / len as f64 {
                mismatches += 1;
            }
        }
    }
    verdict(
        sigma_err <= 1e-15 && gcn == gcn_expect && fcnn == fcnn_expect && mismatches == 0,
        format!(
            "snr_sigma error {sigma_err:.1e}; params gcn {gcn}/{gcn_expect}, fcnn {fcnn}/{fcnn_expect}; k-hop mismatches {mismatches}/4000"
        ),
    )
}

fn cli(dir: &Path, args: &[&str]) -> Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_gcnfault"))
        .arg("--root")
        .arg(dir)
        .args(args)
        .output()
        .map_err(|e| gcnfault::Error::io(dir, e))?;
    if !out.status.success() {
        return Err(gcnfault::Error::Config(format!(
            "gcnfault {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        )));
    }
    Ok(())
}

fn determinism() -> Result<Verdict> {
    let files = [
        "train.glds",
        "train.glds.manifest",
        "test.glds",
        "m.ck",
        "m.ck.best",
        "m.ck.stats",
        "report.csv",
        "report.csv.txt",
    ];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| gcnfault::Error::io(Path::new("tmp"), e))?;
        let d = dir.path();
        std::fs::write(d.join("plan.toml"), "samples_per_type = 2\nbase_ohms = 10.0\n")
            .map_err(|e| gcnfault::Error::io(d, e))?;
        cli(d, &["simulate", "--feeder", "builtin:feeder25", "--plan", "plan.toml", "--seed", "11", "--out", "train.glds"])?;
        cli(d, &["simulate", "--feeder", "builtin:feeder25", "--plan", "plan.toml", "--seed", "12", "--out", "test.glds"])?;
        cli(
            d,
            &[
                "train", "--dataset", "train.glds", "--profile", "gcn-desk", "--augment", "default", "--epochs", "2",
                "--lr", "1e-3", "--seed", "5", "--out", "m.ck",
            ],
        )?;
        cli(d, &["eval", "--checkpoint", "m.ck", "--dataset", "test.glds", "--seed", "3", "--report", "report.csv"])?;
        let contents: Vec<Vec<u8>> = files
            .iter()
            .map(|f| std::fs::read(d.join(f)).map_err(|e| gcnfault::Error::io(&d.join(f), e)))
            .collect::<Result<_>>()?;
        runs.push(contents);
    }
    let differing: Vec<&str> = files
        .iter()
        .zip(runs[0].iter().zip(&runs[1]))
        .filter(|(_, (a, b))| a != b)
        .map(|(f, _)| *f)
        .collect();
    verdict(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} artifacts bitwise identical across reruns", files.len())
        } else {
            format!("differing artifacts: {differing:?}")
        },
    )
}

fn report(id: usize, name: &str, v: Result<Verdict>) -> bool {
    match v {
        Ok(v) => {
            println!("criterion {id:>2} {name:<28} {}  {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
            v.pass
        }
        Err(e) => {
            println!("criterion {id:>2} {name:<28} FAIL  error: {e}");
            false
        }
    }
}

fn main() -> ExitCode {
    let mut ok = true;
    ok &= report(1, "spectral equivalence", spectral());
    ok &= report(2, "gradient correctness", gradients());
    ok &= report(3, "laplacian invariants", laplacian());
    ok &= report(4, "k-hop locality", locality());
    ok &= report(5, "simulator soundness", simulator());
    match end_to_end() {
        Ok([c6, c7, c8]) => {
            ok &= report(6, "desk-scale end-to-end", Ok(c6));
            ok &= report(7, "robustness ordering", Ok(c7));
            ok &= report(8, "augmentation benefit", Ok(c8));
        }
        Err(e) => {
            let msg = e.to_string();
            for (id, name) in [(6, "desk-scale end-to-end"), (7, "robustness ordering"), (8, "augmentation benefit")] {
                ok &= report(id, name, Err(gcnfault::Error::Config(msg.clone())));
            }
        }
    }
    ok &= report(9, "formula checks", formulas());
    ok &= report(10, "determinism", determinism());
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
