//! Three-phase phasor fault simulation.
//!
//! Each scenario is one linear solve `Y V = I` over the phase nodes of the
//! feeder. Buses joined by closed switches or regulators share nodes. Loads
//! are constant impedances scaled by a common load level, the source is a
//! Norton equivalent of a balanced unit EMF behind the source impedance, and
//! faults are resistive shunts.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use crate::dataset::{current_channel, voltage_channel, Dataset, MeasurementMask, SampleMatrix, CHANNELS};
use crate::error::{Error, Result};
use crate::feeder::{Complex, DisjointSets, FeederModel, PhaseSet, SwitchState};
use crate::seed::{self, Rng as SeedRng};

/// Fault resistance used for bolted faults, per-unit.
pub const BOLTED_RESISTANCE_PU: f64 = 1e-6;
pub const PIVOT_TOL: f64 = 1e-12;
pub const RESIDUAL_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FaultKind {
    Slg,
    Llg,
    Ll,
}

impl FaultKind {
    pub const ALL: [FaultKind; 3] = [FaultKind::Slg, FaultKind::Llg, FaultKind::Ll];

    pub fn name(self) -> &'static str {
        match self {
            FaultKind::Slg => "SLG",
            FaultKind::Llg => "LLG",
            FaultKind::Ll => "LL",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SLG" => Ok(FaultKind::Slg),
            "LLG" => Ok(FaultKind::Llg),
            "LL" => Ok(FaultKind::Ll),
            _ => Err(Error::Config(format!("unknown fault kind `{s}`"))),
        }
    }

    /// Concrete fault types of this kind that fit within `phases`.
    pub fn options(self, phases: PhaseSet) -> Vec<FaultType> {
        let ph: Vec<u8> = phases.iter().collect();
        match self {
            FaultKind::Slg => ph.iter().map(|&p| FaultType::Slg(p)).collect(),
            FaultKind::Llg | FaultKind::Ll => {
                let mut out = Vec::new();
                for i in 0..ph.len() {
                    for j in (i + 1)..ph.len() {
                        out.push(if self == FaultKind::Llg {
                            FaultType::Llg(ph[i], ph[j])
                        } else {
                            FaultType::Ll(ph[i], ph[j])
                        });
                    }
                }
                out
            }
        }
    }
}

/// Fault kind with its phases. Phase pairs are stored in ascending order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FaultType {
    Slg(u8),
    Llg(u8, u8),
    Ll(u8, u8),
}

impl FaultType {
    pub fn kind(self) -> FaultKind {
        match self {
            FaultType::Slg(_) => FaultKind::Slg,
            FaultType::Llg(..) => FaultKind::Llg,
            FaultType::Ll(..) => FaultKind::Ll,
        }
    }

    pub fn phases(self) -> PhaseSet {
        match self {
            FaultType::Slg(p) => PhaseSet::single(p),
            FaultType::Llg(a, b) | FaultType::Ll(a, b) => PhaseSet::from_phases(&[a, b]),
        }
    }

    fn validate(self) -> Result<()> {
        let ok = match self {
            FaultType::Slg(p) => (1..=3).contains(&p),
            FaultType::Llg(a, b) | FaultType::Ll(a, b) => {
                (1..=3).contains(&a) && (1..=3).contains(&b) && a < b
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Scenario(format!("malformed fault type {self}")))
        }
    }

    /// Small integer code, unique per fault type.
    fn code(self) -> u64 {
        match self {
            FaultType::Slg(p) => p as u64,
            FaultType::Llg(a, b) => 10 + 3 * a as u64 + b as u64,
            FaultType::Ll(a, b) => 30 + 3 * a as u64 + b as u64,
        }
    }
}

impl fmt::Display for FaultType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FaultType::Slg(p) => write!(f, "SLG({p})"),
            FaultType::Llg(a, b) => write!(f, "LLG({a},{b})"),
            FaultType::Ll(a, b) => write!(f, "LL({a},{b})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FaultResistance {
    Ohms(f64),
    Bolted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaultScenario {
    pub faulted_bus: String,
    pub fault_type: FaultType,
    pub resistance: FaultResistance,
    pub load_level: f64,
    pub topology_variant: String,
}

impl fmt::Display for FaultScenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let r = match self.resistance {
            FaultResistance::Ohms(r) => format!("{r} ohm"),
            FaultResistance::Bolted => "bolted".to_string(),
        };
        write!(
            f,
            "{} at bus {} ({r}, load {}, topology {})",
            self.fault_type, self.faulted_bus, self.load_level, self.topology_variant
        )
    }
}

/// Per-unit base for fault resistances and the admissible load-level range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimSettings {
    pub base_ohms: f64,
    pub load_min: f64,
    pub load_max: f64,
}

impl Default for SimSettings {
    fn default() -> Self {
        SimSettings {
            base_ohms: 1.0,
            load_min: 0.316,
            load_max: 1.0,
        }
    }
}

impl SimSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_ohms > 0.0 && self.base_ohms.is_finite()) {
            return Err(Error::Config(format!("base impedance {} must be positive", self.base_ohms)));
        }
        if !(self.load_min > 0.0 && self.load_min <= self.load_max && self.load_max.is_finite()) {
            return Err(Error::Config(format!(
                "load range [{}, {}] must be positive and ordered",
                self.load_min, self.load_max
            )));
        }
        Ok(())
    }
}

/// Assembled nodal equations of one scenario.
#[derive(Clone, Debug)]
pub struct SolverSystem {
    n: usize,
    y: Vec<Complex>,
    injection: Vec<Complex>,
    node_of: Vec<[Option<usize>; 3]>,
    load_admittance: Vec<[Complex; 3]>,
    label: String,
}

impl SolverSystem {
    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn y(&self, row: usize, col: usize) -> Complex {
        self.y[row * self.n + col]
    }

    pub fn injection(&self) -> &[Complex] {
        &self.injection
    }

    /// Row of `(bus, phase)`, if that phase exists at the bus.
    pub fn node(&self, bus: usize, phase: u8) -> Option<usize> {
        self.node_of[bus][(phase - 1) as usize]
    }

    pub fn load_admittance(&self, bus: usize, phase: u8) -> Complex {
        self.load_admittance[bus][(phase - 1) as usize]
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// `max |Y V - I|`.
    pub fn residual(&self, v: &[Complex]) -> f64 {
        (0..self.n)
            .map(|r| {
                let row = &self.y[r * self.n..(r + 1) * self.n];
                let yv: Complex = row.iter().zip(v).map(|(a, b)| a * b).sum();
                (yv - self.injection[r]).norm()
            })
            .fold(0.0, f64::max)
    }

    fn add(&mut self, r: usize, c: usize, v: Complex) {
        self.y[r * self.n + c] += v;
    }

    fn add_shunt_between(&mut self, a: usize, b: usize, y: Complex) {
        self.add(a, a, y);
        self.add(b, b, y);
        self.add(a, b, -y);
        self.add(b, a, -y);
    }
}

/// Balanced unit source EMF `1∠0, 1∠-120°, 1∠120°`.
pub fn source_emf() -> [Complex; 3] {
    [
        Complex::from_polar(1.0, 0.0),
        Complex::from_polar(1.0, -2.0 * PI / 3.0),
        Complex::from_polar(1.0, 2.0 * PI / 3.0),
    ]
}

/// A resolved fault: bus index, type and per-unit resistance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AppliedFault {
    pub bus: usize,
    pub fault_type: FaultType,
    pub resistance_pu: f64,
}

/// Assembles `Y` and the source injection for `model` at `load_level`, with
/// an optional fault. No range checks on the load level; see
/// [`build_nodal_system`] for the validated entry point.
pub fn assemble(
    model: &FeederModel,
    load_level: f64,
    fault: Option<AppliedFault>,
    label: impl Into<String>,
) -> Result<SolverSystem> {
    let nb = model.n_buses();
    let mut sets = DisjointSets::new(nb);
    for br in model.branches() {
        if br.is_closed() && br.is_zero_impedance() {
            sets.union(model.bus_index(&br.from).unwrap(), model.bus_index(&br.to).unwrap());
        }
    }
    let (group, groups) = sets.dense_labels();
    let mut group_phases = vec![PhaseSet::EMPTY; groups];
    for b in 0..nb {
        group_phases[group[b]] = group_phases[group[b]].union(model.bus_phases(b));
    }
    let mut group_node = vec![[None; 3]; groups];
    let mut n = 0;
    for (g, phases) in group_phases.iter().enumerate() {
        for p in phases.iter() {
            group_node[g][(p - 1) as usize] = Some(n);
            n += 1;
        }
    }
    let node_of: Vec<[Option<usize>; 3]> = (0..nb)
        .map(|b| {
            let mut nodes = [None; 3];
            for p in model.bus_phases(b).iter() {
                nodes[(p - 1) as usize] = group_node[group[b]][(p - 1) as usize];
            }
            nodes
        })
        .collect();

    let mut sys = SolverSystem {
        n,
        y: vec![Complex::new(0.0, 0.0); n * n],
        injection: vec![Complex::new(0.0, 0.0); n],
        node_of,
        load_admittance: vec![[Complex::new(0.0, 0.0); 3]; nb],
        label: label.into(),
    };

    for br in model.branches() {
        if br.is_zero_impedance() || !br.is_closed() {
            continue;
        }
        let phases: Vec<u8> = br.phases.iter().collect();
        let p = phases.len();
        let yb = invert(&br.impedance, p).map_err(|_| {
            Error::Feeder(format!("branch {} has a singular impedance matrix", br.id))
        })?;
        let (f, t) = (model.bus_index(&br.from).unwrap(), model.bus_index(&br.to).unwrap());
        for i in 0..p {
            for j in 0..p {
                let fi = sys.node(f, phases[i]).unwrap();
                let fj = sys.node(f, phases[j]).unwrap();
                let ti = sys.node(t, phases[i]).unwrap();
                let tj = sys.node(t, phases[j]).unwrap();
                let v = yb[i * p + j];
                sys.add(fi, fj, v);
                sys.add(ti, tj, v);
                sys.add(fi, tj, -v);
                sys.add(ti, fj, -v);
            }
        }
    }

    let v_nom2 = model.base_voltage() * model.base_voltage();
    for (b, bus) in model.buses().iter().enumerate() {
        for p in bus.load_phases.iter() {
            let s = bus.nominal_load[(p - 1) as usize];
            let y = (s * load_level).conj() / v_nom2;
            sys.load_admittance[b][(p - 1) as usize] = y;
            let k = sys.node(b, p).unwrap();
            sys.add(k, k, y);
        }
    }

    let ys = invert(model.source_impedance(), 3)
        .map_err(|_| Error::Feeder("source impedance is singular".into()))?;
    let src = model.source_index();
    let e = source_emf();
    let src_nodes: Vec<usize> = (1..=3).map(|p| sys.node(src, p).unwrap()).collect();
    for i in 0..3 {
        for j in 0..3 {
            sys.add(src_nodes[i], src_nodes[j], ys[i * 3 + j]);
            sys.injection[src_nodes[i]] += ys[i * 3 + j] * e[j];
        }
    }

    if let Some(fault) = fault {
        fault.fault_type.validate()?;
        if !fault.fault_type.phases().is_subset(model.bus_phases(fault.bus)) {
            return Err(Error::Scenario(format!(
                "{} needs phases absent at bus {}",
                fault.fault_type,
                model.buses()[fault.bus].id
            )));
        }
        if !(fault.resistance_pu > 0.0 && fault.resistance_pu.is_finite()) {
            return Err(Error::Scenario(format!(
                "fault resistance {} must be positive",
                fault.resistance_pu
            )));
        }
        let yf = Complex::new(1.0 / fault.resistance_pu, 0.0);
        let node = |p: u8| sys.node(fault.bus, p).unwrap();
        match fault.fault_type {
            FaultType::Slg(p) => {
                let k = node(p);
                sys.add(k, k, yf);
            }
            FaultType::Llg(a, b) => {
                let (ka, kb) = (node(a), node(b));
                sys.add(ka, ka, yf);
                sys.add(kb, kb, yf);
            }
            FaultType::Ll(a, b) => {
                let (ka, kb) = (node(a), node(b));
                sys.add_shunt_between(ka, kb, yf);
            }
        }
    }
    Ok(sys)
}

/// Checks `scenario` against `model` and assembles its nodal system.
pub fn build_nodal_system(
    model: &FeederModel,
    scenario: &FaultScenario,
    settings: &SimSettings,
) -> Result<SolverSystem> {
    settings.validate()?;
    let bus = model
        .bus_index(&scenario.faulted_bus)
        .ok_or_else(|| Error::Scenario(format!("unknown bus {}", scenario.faulted_bus)))?;
    let l = scenario.load_level;
    if !(l >= settings.load_min && l <= settings.load_max) {
        return Err(Error::Scenario(format!(
            "load level {l} outside [{}, {}]",
            settings.load_min, settings.load_max
        )));
    }
    let resistance_pu = match scenario.resistance {
        FaultResistance::Bolted => BOLTED_RESISTANCE_PU,
        FaultResistance::Ohms(r) => {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Scenario(format!("fault resistance {r} must be positive")));
            }
            r / settings.base_ohms
        }
    };
    let fault = AppliedFault {
        bus,
        fault_type: scenario.fault_type,
        resistance_pu,
    };
    assemble(model, l, Some(fault), scenario.to_string())
}

/// Dense LU factors with row permutation.
struct Lu {
    n: usize,
    a: Vec<Complex>,
    perm: Vec<usize>,
}

impl Lu {
    /// Factors `a` (row-major `n x n`). On a small pivot returns the row and
    /// pivot magnitude.
    fn factor(mut a: Vec<Complex>, n: usize) -> std::result::Result<Lu, (usize, f64)> {
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, mag) = (k..n)
                .map(|r| (r, a[r * n + k].norm()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if mag < PIVOT_TOL {
                return Err((k, mag));
            }
            if p != k {
                for c in 0..n {
                    a.swap(k * n + c, p * n + c);
                }
                perm.swap(k, p);
            }
            let pivot = a[k * n + k];
            for r in (k + 1)..n {
                let f = a[r * n + k] / pivot;
                if f == Complex::new(0.0, 0.0) {
                    continue;
                }
                a[r * n + k] = f;
                for c in (k + 1)..n {
                    let u = a[k * n + c];
                    a[r * n + c] -= f * u;
                }
            }
        }
        Ok(Lu { n, a, perm })
    }

    fn solve(&self, b: &[Complex]) -> Vec<Complex> {
        let n = self.n;
        let mut x: Vec<Complex> = self.perm.iter().map(|&i| b[i]).collect();
        for r in 0..n {
            for c in 0..r {
                let l = self.a[r * n + c];
                let xc = x[c];
                x[r] -= l * xc;
            }
        }
        for r in (0..n).rev() {
            for c in (r + 1)..n {
                let u = self.a[r * n + c];
                let xc = x[c];
                x[r] -= u * xc;
            }
            x[r] /= self.a[r * n + r];
        }
        x
    }
}

/// Inverse of a small row-major complex matrix.
fn invert(m: &[Complex], n: usize) -> std::result::Result<Vec<Complex>, (usize, f64)> {
    let lu = Lu::factor(m.to_vec(), n)?;
    let mut inv = vec![Complex::new(0.0, 0.0); n * n];
    for c in 0..n {
        let mut e = vec![Complex::new(0.0, 0.0); n];
        e[c] = Complex::new(1.0, 0.0);
        let col = lu.solve(&e);
        for r in 0..n {
            inv[r * n + c] = col[r];
        }
    }
    Ok(inv)
}

/// Node voltages `V = Y^{-1} I` by LU with partial pivoting, refined until
/// the residual meets [`RESIDUAL_TOL`].
pub fn solve_fault(system: &SolverSystem) -> Result<Vec<Complex>> {
    let lu = Lu::factor(system.y.clone(), system.n).map_err(|(row, pivot)| Error::Singular {
        scenario: system.label.clone(),
        row,
        pivot,
    })?;
    let mut v = lu.solve(&system.injection);
    for _ in 0..3 {
        if system.residual(&v) <= RESIDUAL_TOL {
            break;
        }
        let r: Vec<Complex> = (0..system.n)
            .map(|i| {
                let row = &system.y[i * system.n..(i + 1) * system.n];
                system.injection[i] - row.iter().zip(&v).map(|(a, b)| a * b).sum::<Complex>()
            })
            .collect();
        let dv = lu.solve(&r);
        for (x, d) in v.iter_mut().zip(dv) {
            *x += d;
        }
    }
    let res = system.residual(&v);
    if !(res <= RESIDUAL_TOL) {
        return Err(Error::Scenario(format!(
            "{}: residual {res:e} exceeds {RESIDUAL_TOL:e}",
            system.label
        )));
    }
    Ok(v)
}

/// `n x 12` reading over all buses; zero outside measured load phases.
pub type PhasorReading = Array2<f64>;

/// Angle in `(-pi, pi]`; zero for a zero phasor.
pub fn phasor_angle(z: Complex) -> f64 {
    if z.norm() == 0.0 {
        return 0.0;
    }
    let a = z.arg();
    if a <= -PI {
        PI
    } else {
        a
    }
}

/// Voltage and load-current phasors at the measured load phases.
pub fn measure(model: &FeederModel, system: &SolverSystem, v: &[Complex]) -> PhasorReading {
    let mut x = Array2::zeros((model.n_buses(), CHANNELS));
    for (b, bus) in model.buses().iter().enumerate() {
        if !bus.measured {
            continue;
        }
        for p in bus.load_phases.iter() {
            let vp = v[system.node(b, p).unwrap()];
            let ip = vp * system.load_admittance(b, p);
            let (cv, ci) = (voltage_channel(p), current_channel(p));
            x[[b, cv]] = vp.norm();
            x[[b, cv + 1]] = phasor_angle(vp);
            x[[b, ci]] = ip.norm();
            x[[b, ci + 1]] = phasor_angle(ip);
        }
    }
    x
}

/// Builds, solves and measures one scenario.
pub fn simulate(model: &FeederModel, scenario: &FaultScenario, settings: &SimSettings) -> Result<PhasorReading> {
    let sys = build_nodal_system(model, scenario, settings)?;
    let v = solve_fault(&sys)?;
    Ok(measure(model, &sys, &v))
}

/// Piecewise-uniform density over `[lo, hi]` with equal-width bins.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadHistogram {
    lo: f64,
    hi: f64,
    weights: Vec<f64>,
}

impl LoadHistogram {
    pub fn new(lo: f64, hi: f64, weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Config("load histogram has no bins".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("load histogram weights must be finite and >= 0".into()));
        }
        if !(weights.iter().sum::<f64>() > 0.0) {
            return Err(Error::Config("load histogram weights sum to zero".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("load histogram range [{lo}, {hi}] is invalid")));
        }
        Ok(LoadHistogram { lo, hi, weights })
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        LoadHistogram::new(lo, hi, vec![1.0])
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bin_edges(&self, k: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.weights.len() as f64;
        (self.lo + w * k as f64, self.lo + w * (k + 1) as f64)
    }

    /// Inverse-CDF draw of a bin, then a uniform position inside it.
    pub fn sample(&self, rng: &mut SeedRng) -> f64 {
        let total: f64 = self.weights.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut bin = self.weights.len() - 1;
        for (k, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc && *w > 0.0 {
                bin = k;
                break;
            }
        }
        while self.weights[bin] == 0.0 {
            bin -= 1;
        }
        let (a, b) = self.bin_edges(bin);
        if a == b {
            a
        } else {
            (a + (b - a) * rng.random::<f64>()).min(b)
        }
    }
}

impl Default for LoadHistogram {
    fn default() -> Self {
        LoadHistogram::uniform(0.316, 1.0).unwrap()
    }
}

/// Fault resistance distribution in ohms.
#[derive(Clone, Debug, PartialEq)]
pub enum ResistanceSpec {
    Uniform { lo: f64, hi: f64 },
    /// Union of open intervals; a draw picks an interval with probability
    /// proportional to its width.
    Intervals(Vec<(f64, f64)>),
}

impl ResistanceSpec {
    /// 0.05 to 20 ohms.
    pub fn standard() -> Self {
        ResistanceSpec::Uniform { lo: 0.05, hi: 20.0 }
    }

    /// `(20k, 20k+10)` for k = 5..=249.
    pub fn high_impedance_train() -> Self {
        ResistanceSpec::Intervals((5..=249).map(|k| (20.0 * k as f64, 20.0 * k as f64 + 10.0)).collect())
    }

    /// `(20k+10, 20k+20)` for k = 5..=249.
    pub fn high_impedance_test() -> Self {
        ResistanceSpec::Intervals(
            (5..=249)
                .map(|k| (20.0 * k as f64 + 10.0, 20.0 * (k + 1) as f64))
                .collect(),
        )
    }

    /// Intersection with `[lo, hi]`.
    pub fn restrict(&self, lo: f64, hi: f64) -> Result<Self> {
        let out = match self {
            ResistanceSpec::Uniform { lo: a, hi: b } => ResistanceSpec::Uniform {
                lo: a.max(lo),
                hi: b.min(hi),
            },
            ResistanceSpec::Intervals(v) => ResistanceSpec::Intervals(
                v.iter()
                    .map(|&(a, b)| (a.max(lo), b.min(hi)))
                    .filter(|(a, b)| a < b)
                    .collect(),
            ),
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ResistanceSpec::Uniform { lo, hi } => {
                if !(*lo > 0.0 && lo < hi && hi.is_finite()) {
                    return Err(Error::Config(format!("resistance range [{lo}, {hi}] is invalid")));
                }
            }
            ResistanceSpec::Intervals(v) => {
                if v.is_empty() {
                    return Err(Error::Config("resistance interval set is empty".into()));
                }
                for &(a, b) in v {
                    if !(a >= 0.0 && a < b && b.is_finite()) {
                        return Err(Error::Config(format!("resistance interval ({a}, {b}) is invalid")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, r: f64) -> bool {
        match self {
            ResistanceSpec::Uniform { lo, hi } => r >= *lo && r <= *hi,
            ResistanceSpec::Intervals(v) => v.iter().any(|&(a, b)| r > a && r < b),
        }
    }

    pub fn sample(&self, rng: &mut SeedRng) -> f64 {
        match self {
            ResistanceSpec::Uniform { lo, hi } => rng.random_range(*lo..=*hi),
            ResistanceSpec::Intervals(v) => {
                let total: f64 = v.iter().map(|(a, b)| b - a).sum();
                let mut u = rng.random::<f64>() * total;
                let mut pick = v[v.len() - 1];
                for &(a, b) in v {
                    if u < b - a {
                        pick = (a, b);
                        break;
                    }
                    u -= b - a;
                }
                loop {
                    let r = rng.random_range(pick.0..pick.1);
                    if r > pick.0 {
                        return r;
                    }
                }
            }
        }
    }
}

/// Switch-state and phase-change edits applied to the base feeder.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TopologyVariant {
    pub id: String,
    pub switches: Vec<(String, SwitchState)>,
    /// Single-phase lateral paths and the phase each is moved to.
    pub phase_changes: Vec<(Vec<String>, u8)>,
}

impl TopologyVariant {
    pub fn base() -> Self {
        TopologyVariant {
            id: "base".into(),
            ..Default::default()
        }
    }

    pub fn apply(&self, model: &FeederModel) -> Result<FeederModel> {
        let mut m = model.apply_switch_state(&self.switches)?;
        for (path, phase) in &self.phase_changes {
            m = m.change_branch_phase(path, *phase)?;
        }
        Ok(m)
    }
}

/// Whether each fault kind gets one slot with random phases, or one slot per
/// concrete phase combination.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseMode {
    Random,
    Enumerate,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPlan {
    pub samples_per_type: usize,
    pub kinds: Vec<FaultKind>,
    pub phase_mode: PhaseMode,
    pub resistance: ResistanceSpec,
    pub load: LoadHistogram,
    pub variants: Vec<TopologyVariant>,
    /// Faulted buses; all buses when `None`.
    pub buses: Option<Vec<String>>,
    pub settings: SimSettings,
}

impl Default for DatasetPlan {
    fn default() -> Self {
        DatasetPlan {
            samples_per_type: 20,
            kinds: FaultKind::ALL.to_vec(),
            phase_mode: PhaseMode::Random,
            resistance: ResistanceSpec::standard(),
            load: LoadHistogram::default(),
            variants: vec![TopologyVariant::base()],
            buses: None,
            settings: SimSettings::default(),
        }
    }
}

/// One (variant, bus, fault type) cell of a plan.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlanSlot {
    pub variant: usize,
    pub bus: usize,
    pub kind: FaultKind,
    /// Fixed phases in enumerate mode; drawn per sample otherwise.
    pub fault_type: Option<FaultType>,
    /// Phases available at the bus in this variant.
    pub phases: PhaseSet,
}

impl DatasetPlan {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_type == 0 {
            return Err(Error::Config("samples per fault type must be positive".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::Config("plan lists no fault kinds".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("plan lists no topology variants".into()));
        }
        self.resistance.validate()?;
        self.settings.validate()?;
        if self.load.lo() < self.settings.load_min || self.load.hi() > self.settings.load_max {
            return Err(Error::Config(format!(
                "load histogram [{}, {}] exceeds the admissible range [{}, {}]",
                self.load.lo(),
                self.load.hi(),
                self.settings.load_min,
                self.settings.load_max
            )));
        }
        Ok(())
    }

    pub fn variant_models(&self, model: &FeederModel) -> Result<Vec<FeederModel>> {
        self.variants.iter().map(|v| v.apply(model)).collect()
    }

    /// Every plan cell, in generation order: variant, then bus, then fault
    /// kind, then phase combination.
    pub fn slots(&self, model: &FeederModel, variants: &[FeederModel]) -> Result<Vec<PlanSlot>> {
        self.validate()?;
        let buses: Vec<usize> = match &self.buses {
            None => (0..model.n_buses()).collect(),
            Some(ids) => ids
                .iter()
                .map(|id| {
                    model
                        .bus_index(id)
                        .ok_or_else(|| Error::Config(format!("plan names unknown bus {id}")))
                })
                .collect::<Result<_>>()?,
        };
        let mut slots = Vec::new();
        for (vi, vm) in variants.iter().enumerate() {
            for &b in &buses {
                let phases = vm.bus_phases(b);
                for &kind in &self.kinds {
                    let options = kind.options(phases);
                    if options.is_empty() {
                        continue;
                    }
                    match self.phase_mode {
                        PhaseMode::Random => slots.push(PlanSlot {
                            variant: vi,
                            bus: b,
                            kind,
                            fault_type: None,
                            phases,
                        }),
                        PhaseMode::Enumerate => slots.extend(options.into_iter().map(|t| PlanSlot {
                            variant: vi,
                            bus: b,
                            kind,
                            fault_type: Some(t),
                            phases,
                        })),
                    }
                }
            }
        }
        Ok(slots)
    }

    /// Number of samples the plan produces, without solving anything.
    pub fn size(&self, model: &FeederModel) -> Result<usize> {
        let variants = self.variant_models(model)?;
        Ok(self.slots(model, &variants)?.len() * self.samples_per_type)
    }
}

/// Draws the scenario for sample `s` of `slot`. The stream depends only on
/// `(seed, variant, bus, slot type, s)`, so shrinking `samples_per_type`
/// keeps a prefix of every cell.
pub fn draw_scenario(
    plan: &DatasetPlan,
    model: &FeederModel,
    slot: &PlanSlot,
    s: usize,
    seed: u64,
) -> FaultScenario {
    let code = slot.kind as u64 * 100 + slot.fault_type.map_or(0, FaultType::code);
    let mut rng = seed::stream(seed, "scenario", &[slot.variant as u64, slot.bus as u64, code, s as u64]);
    let fault_type = match slot.fault_type {
        Some(t) => t,
        None => {
            let options = slot.kind.options(slot.phases);
            options[rng.random_range(0..options.len())]
        }
    };
    let r = plan.resistance.sample(&mut rng);
    let load_level = plan.load.sample(&mut rng);
    FaultScenario {
        faulted_bus: model.buses()[slot.bus].id.clone(),
        fault_type,
        resistance: FaultResistance::Ohms(r),
        load_level,
        topology_variant: plan.variants[slot.variant].id.clone(),
    }
}

/// Simulates every planned scenario. Labels come from the merged label map
/// of the base model, so all variants share one label space.
pub fn generate_dataset(model: &FeederModel, plan: &DatasetPlan, seed: u64) -> Result<Dataset> {
    let variants = plan.variant_models(model)?;
    let slots = plan.slots(model, &variants)?;
    let labels = model.merged_label_map();
    let masks: Vec<Arc<MeasurementMask>> = variants
        .iter()
        .map(|m| Arc::new(MeasurementMask::from_model(m)))
        .collect();
    let mut ds = Dataset::new(
        model.buses().iter().map(|b| b.id.clone()).collect(),
        labels.num_classes(),
    );
    ds.samples.reserve(slots.len() * plan.samples_per_type);
    for slot in &slots {
        let vm = &variants[slot.variant];
        for s in 0..plan.samples_per_type {
            let scenario = draw_scenario(plan, model, slot, s, seed);
            let x = simulate(vm, &scenario, &plan.settings).map_err(|e| match e {
                Error::Singular { .. } | Error::Scenario(_) => e,
                other => Error::Scenario(format!("{scenario}: {other}")),
            })?;
            ds.samples.push(SampleMatrix::new(
                x,
                labels.class_of(slot.bus),
                masks[slot.variant].clone(),
            )?);
        }
    }
    Ok(ds)
}
