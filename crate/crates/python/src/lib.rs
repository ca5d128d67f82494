use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use gcnfault::config::{GridConfig, PlanConfig};
use gcnfault::dataset::{self, ChannelStats};
use gcnfault::eval::experiment::build_model;
use gcnfault::feeder::{self, FeederModel, SwitchState};
use gcnfault::graph::{self, GraphOperator};
use gcnfault::nn::{self, checkpoint, ModelProfile, TrainConfig};
use gcnfault::sim::{self, FaultResistance, FaultScenario, FaultType, SimSettings};

fn err(e: gcnfault::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows(a: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[pyclass(name = "Feeder", module = "gcnfault")]
struct PyFeeder {
    inner: FeederModel,
}

#[pymethods]
impl PyFeeder {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyFeeder { inner: feeder::parse_feeder(text).map_err(err)? })
    }

    /// The bundled 25-bus (`feeder25`) or 2-bus (`feeder2`) feeder.
    #[staticmethod]
    fn builtin(name: &str) -> PyResult<Self> {
        let inner = match name {
            "feeder25" => gcnfault::fixtures::feeder25(),
            "feeder2" => gcnfault::fixtures::feeder2(),
            other => return Err(PyValueError::new_err(format!("no builtin feeder `{other}`"))),
        };
        Ok(PyFeeder { inner })
    }

    #[getter]
    fn n_buses(&self) -> usize {
        self.inner.n_buses()
    }

    #[getter]
    fn bus_ids(&self) -> Vec<String> {
        self.inner.buses().iter().map(|b| b.id.clone()).collect()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.merged_label_map().num_classes()
    }

    fn class_names(&self) -> Vec<String> {
        let l = self.inner.merged_label_map();
        (0..l.num_classes()).map(|c| l.class_name(c)).collect()
    }

    fn measured_buses(&self) -> Vec<String> {
        self.inner
            .measured_buses()
            .into_iter()
            .map(|b| self.inner.buses()[b].id.clone())
            .collect()
    }

    /// Hop distances between classes.
    fn class_hops(&self) -> Vec<Vec<usize>> {
        graph::class_hop_distances(&self.inner)
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect()
    }

    /// Copy with one switch set to `open` or `closed`.
    fn with_switch(&self, switch: &str, state: &str) -> PyResult<Self> {
        let state = match state {
            "open" => SwitchState::Open,
            "closed" => SwitchState::Closed,
            other => return Err(PyValueError::new_err(format!("switch state `{other}`"))),
        };
        Ok(PyFeeder {
            inner: self.inner.apply_switch_state(&[(switch, state)]).map_err(err)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("Feeder({} buses, source {})", self.inner.n_buses(), self.inner.source_bus())
    }
}

#[pyclass(name = "Graph", module = "gcnfault")]
struct PyGraph {
    inner: GraphOperator,
}

#[pymethods]
impl PyGraph {
    #[new]
    #[pyo3(signature = (feeder, kn = 20))]
    fn new(feeder: &PyFeeder, kn: usize) -> PyResult<Self> {
        Ok(PyGraph {
            inner: GraphOperator::from_feeder(&feeder.inner, kn).map_err(err)?,
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn lambda_max(&self) -> f64 {
        self.inner.lambda_max
    }

    fn weights(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.weights)
    }

    fn laplacian(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.laplacian)
    }

    fn scaled_laplacian(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.scaled)
    }

    /// Chebyshev filter `sum_k alpha_k T_k(L~) f`.
    fn cheb_apply(&self, alpha: Vec<f64>, f: Vec<f64>) -> PyResult<Vec<f64>> {
        nn::cheb_apply(&self.inner.scaled_sparse, &alpha, &f).map_err(err)
    }
}

#[pyclass(name = "Dataset", module = "gcnfault")]
struct PyDataset {
    inner: dataset::Dataset,
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes
    }

    fn labels(&self) -> Vec<usize> {
        self.inner.labels()
    }

    /// Sample `i` as an `n x 12` nested list.
    fn sample(&self, i: usize) -> PyResult<Vec<Vec<f64>>> {
        self.inner
            .samples
            .get(i)
            .map(|s| rows(&s.x))
            .ok_or_else(|| PyValueError::new_err(format!("sample {i} out of range")))
    }

    /// Standardizes in place, with training statistics when given.
    /// Returns the statistics as `(mean, std)`.
    #[pyo3(signature = (stats = None))]
    fn standardize(&mut self, stats: Option<(Vec<f64>, Vec<f64>)>) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let given = match stats {
            None => None,
            Some((mean, std)) => {
                let to12 = |v: Vec<f64>| -> PyResult<[f64; 12]> {
                    v.try_into().map_err(|_| PyValueError::new_err("statistics need 12 entries"))
                };
                Some(ChannelStats {
                    mean: to12(mean)?,
                    std: to12(std)?,
                    count: [0; 12],
                })
            }
        };
        let s = dataset::standardize(&mut self.inner, given.as_ref()).map_err(err)?;
        Ok((s.mean.to_vec(), s.std.to_vec()))
    }

    /// Noise at `snr_db`, `n_drop` dropped buses and entry loss `p_loss`.
    #[pyo3(signature = (snr_db = None, n_drop = 0, p_loss = 0.0, seed = 0))]
    fn modify(&mut self, snr_db: Option<f64>, n_drop: usize, p_loss: f64, seed: u64) -> PyResult<()> {
        let spec = dataset::ModificationSpec::new(snr_db.map_or(0.0, dataset::snr_sigma), n_drop, p_loss)
            .map_err(err)?;
        dataset::modify_dataset(&mut self.inner, &spec, seed).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        dataset::io::write_dataset(&path, &self.inner, &Default::default()).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: dataset::io::read_dataset(&path).map_err(err)?.0,
        })
    }
}

#[pyclass(name = "Model", module = "gcnfault")]
struct PyModel {
    inner: nn::Model,
}

#[pymethods]
impl PyModel {
    /// Initializes a named profile (`gcn-default`, `gcn-desk`, `fcnn`, ...).
    #[new]
    #[pyo3(signature = (feeder, profile = "gcn-desk", classes = None, seed = 0))]
    fn new(feeder: &PyFeeder, profile: &str, classes: Option<usize>, seed: u64) -> PyResult<Self> {
        let p = ModelProfile::named(profile).map_err(err)?;
        let classes = classes.unwrap_or_else(|| feeder.inner.merged_label_map().num_classes());
        Ok(PyModel {
            inner: build_model(&p, &feeder.inner, classes, seed).map_err(err)?,
        })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Trains in place and returns the per-epoch training loss.
    #[pyo3(signature = (dataset, epochs = 10, learning_rate = 1e-3, batch_size = 32, seed = 0, augment = false))]
    fn train(
        &mut self,
        py: Python<'_>,
        dataset: &PyDataset,
        epochs: usize,
        learning_rate: f64,
        batch_size: usize,
        seed: u64,
        augment: bool,
    ) -> PyResult<Vec<f64>> {
        let augmentation = if augment {
            Some(GridConfig::default().to_grid().map_err(err)?)
        } else {
            None
        };
        let cfg = TrainConfig {
            epochs,
            batch_size,
            seed,
            learning_rate,
            augmentation,
            validation_fraction: 0.0,
        };
        let model = self.inner.clone();
        let ds = &dataset.inner;
        let out = py.detach(|| nn::train(model, ds, &cfg)).map_err(err)?;
        self.inner = out.model;
        Ok(out.history.iter().map(|r| r.train_loss).collect())
    }

    fn predict(&self, dataset: &PyDataset) -> PyResult<Vec<usize>> {
        self.inner.predict(&dataset.inner.samples).map_err(err)
    }

    fn hidden_features(&self, dataset: &PyDataset) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.hidden_features(&dataset.inner.samples).map_err(err)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::write_checkpoint(&path, &self.inner, None).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: checkpoint::read_checkpoint(&path).map_err(err)?.0,
        })
    }
}

fn fault_type(kind: &str, phases: &[u8]) -> PyResult<FaultType> {
    let bad = || PyValueError::new_err(format!("{kind} fault on phases {phases:?}"));
    Ok(match (kind.to_ascii_uppercase().as_str(), phases) {
        ("SLG", [a]) => FaultType::Slg(*a),
        ("LLG", [a, b]) => FaultType::Llg(*a, *b),
        ("LL", [a, b]) => FaultType::Ll(*a, *b),
        _ => return Err(bad()),
    })
}

/// Phasor reading (`n x 12`) of one fault; `resistance_ohms = None` is bolted.
#[pyfunction]
#[pyo3(signature = (feeder, bus, kind, phases, resistance_ohms = None, load_level = 1.0, base_ohms = 1.0))]
fn simulate(
    feeder: &PyFeeder,
    bus: &str,
    kind: &str,
    phases: Vec<u8>,
    resistance_ohms: Option<f64>,
    load_level: f64,
    base_ohms: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let scenario = FaultScenario {
        faulted_bus: bus.into(),
        fault_type: fault_type(kind, &phases)?,
        resistance: resistance_ohms.map_or(FaultResistance::Bolted, FaultResistance::Ohms),
        load_level,
        topology_variant: "base".into(),
    };
    let settings = SimSettings {
        base_ohms,
        ..SimSettings::default()
    };
    Ok(rows(&sim::simulate(&feeder.inner, &scenario, &settings).map_err(err)?))
}

/// Simulates a plan given as TOML text (defaults when empty).
#[pyfunction]
#[pyo3(signature = (feeder, plan = "", seed = 0, test = false))]
fn generate_dataset(py: Python<'_>, feeder: &PyFeeder, plan: &str, seed: u64, test: bool) -> PyResult<PyDataset> {
    let cfg = PlanConfig::parse(plan).map_err(err)?;
    let plan = if test { cfg.test_plan() } else { cfg.train_plan() }.map_err(err)?;
    let model = &feeder.inner;
    let inner = py.detach(|| sim::generate_dataset(model, &plan, seed)).map_err(err)?;
    Ok(PyDataset { inner })
}

#[pyfunction]
fn khop_accuracy(predictions: Vec<usize>, labels: Vec<usize>, hops: Vec<Vec<usize>>, k: usize) -> PyResult<f64> {
    let c = hops.len();
    let flat: Vec<usize> = hops.into_iter().flatten().collect();
    let hops = ndarray::Array2::from_shape_vec((c, c), flat)
        .map_err(|_| PyValueError::new_err("hop matrix must be square"))?;
    gcnfault::eval::khop_accuracy(&predictions, &labels, &hops, k).map_err(err)
}

#[pyfunction]
fn snr_sigma(snr_db: f64) -> f64 {
    dataset::snr_sigma(snr_db)
}

#[pymodule]
#[pyo3(name = "gcnfault")]
fn gcnfault_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFeeder>()?;
    m.add_class::<PyGraph>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(khop_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(snr_sigma, m)?)?;
    Ok(())
}
