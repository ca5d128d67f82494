//! Distribution feeder model and its line-record text format.
//!
//! ```text
//! # comment
//! source <bus> z=<9 complex entries, row-major>
//! bus <id> [load p<k> <P> <Q>]... [measured]
//! branch <id> <from> <to> phases=<set> len=<real> z=<p*p complex entries>
//! switch <id> <from> <to> state=<nc|no> [status=<open|closed>] [phases=<set>]
//! regulator <id> <from> <to> [phases=<set>]
//! ```
//!
//! Complex entries are written `a+bj`. Phase sets are written `1,2,3` (digits
//! without separators are accepted too). Loads are per-phase complex power in
//! per-unit at nominal voltage.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt::{self, Write as _};

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Complex = Complex64;

/// Subset of the three phases {1, 2, 3}, stored as a bitmask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct PhaseSet(u8);

impl PhaseSet {
    pub const EMPTY: PhaseSet = PhaseSet(0);
    pub const ABC: PhaseSet = PhaseSet(0b111);

    pub fn single(phase: u8) -> Self {
        assert!((1..=3).contains(&phase), "phase must be 1, 2 or 3");
        PhaseSet(1 << (phase - 1))
    }

    pub fn from_phases(phases: &[u8]) -> Self {
        phases
            .iter()
            .fold(PhaseSet::EMPTY, |acc, &p| acc.union(PhaseSet::single(p)))
    }

    pub fn contains(self, phase: u8) -> bool {
        (1..=3).contains(&phase) && self.0 & (1 << (phase - 1)) != 0
    }

    pub fn union(self, other: PhaseSet) -> PhaseSet {
        PhaseSet(self.0 | other.0)
    }

    pub fn is_subset(self, other: PhaseSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Phases in ascending order.
    pub fn iter(self) -> impl Iterator<Item = u8> {
        (1..=3u8).filter(move |&p| self.contains(p))
    }

    /// Position of `phase` within this set, in ascending phase order.
    pub fn position(self, phase: u8) -> Option<usize> {
        self.iter().position(|p| p == phase)
    }

    pub fn parse(s: &str) -> Option<PhaseSet> {
        let mut set = PhaseSet::EMPTY;
        for c in s.chars() {
            match c {
                '1' | '2' | '3' => {
                    let p = PhaseSet::single(c as u8 - b'0');
                    if set.0 & p.0 != 0 {
                        return None;
                    }
                    set = set.union(p);
                }
                ',' => {}
                _ => return None,
            }
        }
        (!set.is_empty()).then_some(set)
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|p| p.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SwitchState {
    Closed,
    Open,
}

impl SwitchState {
    pub fn toggled(self) -> SwitchState {
        match self {
            SwitchState::Closed => SwitchState::Open,
            SwitchState::Open => SwitchState::Closed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchKind {
    Line,
    /// `normal` is the nameplate state (normally closed / normally open),
    /// `state` the current one.
    Switch {
        normal: SwitchState,
        state: SwitchState,
    },
    /// Zero-impedance closed branch. No voltage control is modeled.
    Regulator,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bus {
    pub id: String,
    /// Class shared by buses merged through normally closed switches or regulators.
    pub merged_group: Option<usize>,
    pub measured: bool,
    pub load_phases: PhaseSet,
    /// Per-phase complex power at nominal voltage, indexed by phase - 1.
    pub nominal_load: [Complex; 3],
}

impl Bus {
    pub fn new(id: impl Into<String>) -> Self {
        Bus {
            id: id.into(),
            merged_group: None,
            measured: false,
            load_phases: PhaseSet::EMPTY,
            nominal_load: [Complex::new(0.0, 0.0); 3],
        }
    }

    pub fn with_load(mut self, phase: u8, p: f64, q: f64) -> Self {
        self.nominal_load[(phase - 1) as usize] = Complex::new(p, q);
        self.load_phases = self.load_phases.union(PhaseSet::single(phase));
        self
    }

    pub fn measured(mut self) -> Self {
        self.measured = true;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub id: String,
    pub from: String,
    pub to: String,
    pub phases: PhaseSet,
    /// p x p row-major series impedance (per-unit) for lines; empty for
    /// switches and regulators.
    pub impedance: Vec<Complex>,
    pub length: f64,
    pub kind: BranchKind,
}

impl Branch {
    pub fn line(
        id: impl Into<String>,
        from: impl Into<String>,
        to: impl Into<String>,
        phases: PhaseSet,
        length: f64,
        impedance: Vec<Complex>,
    ) -> Self {
        Branch {
            id: id.into(),
            from: from.into(),
            to: to.into(),
            phases,
            impedance,
            length,
            kind: BranchKind::Line,
        }
    }

    pub fn switch(
        id: impl Into<String>,
        from: impl Into<String>,
        to: impl Into<String>,
        normal: SwitchState,
    ) -> Self {
        Branch {
            id: id.into(),
            from: from.into(),
            to: to.into(),
            phases: PhaseSet::ABC,
            impedance: Vec::new(),
            length: 0.0,
            kind: BranchKind::Switch {
                normal,
                state: normal,
            },
        }
    }

    pub fn regulator(id: impl Into<String>, from: impl Into<String>, to: impl Into<String>) -> Self {
        Branch {
            id: id.into(),
            from: from.into(),
            to: to.into(),
            phases: PhaseSet::ABC,
            impedance: Vec::new(),
            length: 0.0,
            kind: BranchKind::Regulator,
        }
    }

    pub fn is_closed(&self) -> bool {
        !matches!(
            self.kind,
            BranchKind::Switch {
                state: SwitchState::Open,
                ..
            }
        )
    }

    /// Switches and regulators carry no impedance; their endpoints share nodes.
    pub fn is_zero_impedance(&self) -> bool {
        !matches!(self.kind, BranchKind::Line)
    }

    /// Normally closed switches and regulators merge their endpoints into one class.
    pub fn merges_label(&self) -> bool {
        matches!(
            self.kind,
            BranchKind::Regulator
                | BranchKind::Switch {
                    normal: SwitchState::Closed,
                    ..
                }
        )
    }

    /// Length used by the distance graph: zero for switches and regulators.
    pub fn distance_length(&self) -> f64 {
        if self.is_zero_impedance() {
            0.0
        } else {
            self.length
        }
    }

    pub fn z(&self, row: usize, col: usize) -> Complex {
        self.impedance[row * self.phases.len() + col]
    }
}

/// Simple union-find over bus indices.
#[derive(Clone, Debug)]
pub(crate) struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    pub(crate) fn new(n: usize) -> Self {
        DisjointSets {
            parent: (0..n).collect(),
        }
    }

    pub(crate) fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub(crate) fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // keep the smaller index as root so group order follows bus order
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }

    /// Dense group index per element, numbered by first appearance.
    pub(crate) fn dense_labels(&mut self) -> (Vec<usize>, usize) {
        let n = self.parent.len();
        let mut root_label = HashMap::new();
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let r = self.find(i);
            let next = root_label.len();
            labels.push(*root_label.entry(r).or_insert(next));
        }
        (labels, root_label.len())
    }
}

/// Dense class labeling of buses, with merged buses sharing a class.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    class_of: Vec<usize>,
    members: Vec<Vec<usize>>,
    bus_ids: Vec<String>,
}

impl LabelMap {
    pub fn num_classes(&self) -> usize {
        self.members.len()
    }

    pub fn class_of(&self, bus: usize) -> usize {
        self.class_of[bus]
    }

    pub fn class_of_id(&self, id: &str) -> Option<usize> {
        self.bus_ids
            .iter()
            .position(|b| b == id)
            .map(|i| self.class_of[i])
    }

    pub fn members(&self, class: usize) -> &[usize] {
        &self.members[class]
    }

    pub fn representative(&self, class: usize) -> usize {
        self.members[class][0]
    }

    /// Member bus ids joined with `/`, e.g. `4/9`.
    pub fn class_name(&self, class: usize) -> String {
        self.members[class]
            .iter()
            .map(|&b| self.bus_ids[b].as_str())
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn as_map(&self) -> HashMap<String, usize> {
        self.bus_ids
            .iter()
            .cloned()
            .zip(self.class_of.iter().copied())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeederModel {
    buses: Vec<Bus>,
    branches: Vec<Branch>,
    source_bus: String,
    source_impedance: [Complex; 9],
    base_voltage: f64,
    index: HashMap<String, usize>,
    bus_phases: Vec<PhaseSet>,
}

impl FeederModel {
    /// Validates and assembles a feeder. Merged groups are recomputed from
    /// the branch kinds, so the `merged_group` of the input buses is ignored.
    pub fn new(
        buses: Vec<Bus>,
        branches: Vec<Branch>,
        source_bus: impl Into<String>,
        source_impedance: [Complex; 9],
    ) -> Result<Self> {
        let source_bus = source_bus.into();
        let mut index = HashMap::with_capacity(buses.len());
        for (i, b) in buses.iter().enumerate() {
            if b.id.is_empty() {
                return Err(Error::Feeder("empty bus id".into()));
            }
            if index.insert(b.id.clone(), i).is_some() {
                return Err(Error::Feeder(format!("duplicate bus id {}", b.id)));
            }
        }
        if source_bus.is_empty() {
            return Err(Error::Feeder("missing source".into()));
        }
        if !index.contains_key(&source_bus) {
            return Err(Error::Feeder(format!(
                "missing source: source bus {source_bus} is not declared"
            )));
        }
        let mut model = FeederModel {
            buses,
            branches,
            source_bus,
            source_impedance,
            base_voltage: 1.0,
            index,
            bus_phases: Vec::new(),
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&mut self) -> Result<()> {
        let mut ids = HashSet::new();
        for br in &self.branches {
            if !ids.insert(br.id.as_str()) {
                return Err(Error::Feeder(format!("duplicate branch id {}", br.id)));
            }
            for end in [&br.from, &br.to] {
                if !self.index.contains_key(end) {
                    return Err(Error::Feeder(format!(
                        "branch {} references unknown bus {end}",
                        br.id
                    )));
                }
            }
            if br.from == br.to {
                return Err(Error::Feeder(format!("branch {} is a self loop", br.id)));
            }
            if br.phases.is_empty() {
                return Err(Error::Feeder(format!("branch {} has no phases", br.id)));
            }
            if let BranchKind::Line = br.kind {
                let p = br.phases.len();
                if br.impedance.len() != p * p {
                    return Err(Error::Feeder(format!(
                        "branch {} needs {} impedance entries, found {}",
                        br.id,
                        p * p,
                        br.impedance.len()
                    )));
                }
                check_impedance(&br.impedance, p)
                    .map_err(|m| Error::Feeder(format!("branch {}: {m}", br.id)))?;
                if !(br.length.is_finite() && br.length >= 0.0) {
                    return Err(Error::Feeder(format!(
                        "branch {} has invalid length {}",
                        br.id, br.length
                    )));
                }
            }
        }
        check_impedance(&self.source_impedance, 3)
            .map_err(|m| Error::Feeder(format!("source impedance: {m}")))?;

        let n = self.buses.len();
        let src = self.index[&self.source_bus];

        // connectivity over closed branches
        let reach = self.reachable_from(src, |_| true);
        if let Some(i) = reach.iter().position(|r| !r) {
            return Err(Error::Disconnected(format!(
                "bus {} is not connected to source {}",
                self.buses[i].id, self.source_bus
            )));
        }

        let mut phases = vec![PhaseSet::EMPTY; n];
        phases[src] = PhaseSet::ABC;
        for br in self.branches.iter().filter(|b| b.is_closed()) {
            let (f, t) = (self.index[&br.from], self.index[&br.to]);
            phases[f] = phases[f].union(br.phases);
            phases[t] = phases[t].union(br.phases);
        }

        // each phase present at a bus must be fed from the source on that phase
        for p in 1..=3u8 {
            let reach = self.reachable_from(src, |br| br.phases.contains(p));
            for i in 0..n {
                if phases[i].contains(p) && !reach[i] {
                    return Err(Error::Disconnected(format!(
                        "phase {p} at bus {} is not fed from the source",
                        self.buses[i].id
                    )));
                }
            }
        }

        for (i, bus) in self.buses.iter().enumerate() {
            for p in 1..=3u8 {
                let nonzero = bus.nominal_load[(p - 1) as usize] != Complex::new(0.0, 0.0);
                if nonzero != bus.load_phases.contains(p) {
                    return Err(Error::Feeder(format!(
                        "bus {}: load on phase {p} must be nonzero exactly when declared",
                        bus.id
                    )));
                }
            }
            if !bus.load_phases.is_subset(phases[i]) {
                return Err(Error::Feeder(format!(
                    "bus {} has a load on a phase it does not carry (bus phases {})",
                    bus.id, phases[i]
                )));
            }
            if bus.measured && bus.load_phases.is_empty() {
                return Err(Error::Feeder(format!(
                    "bus {} is measured but has no load",
                    bus.id
                )));
            }
            if bus
                .nominal_load
                .iter()
                .any(|s| !(s.re.is_finite() && s.im.is_finite()))
            {
                return Err(Error::Feeder(format!("bus {} has a non-finite load", bus.id)));
            }
        }
        self.bus_phases = phases;

        let mut sets = DisjointSets::new(n);
        for br in self.branches.iter().filter(|b| b.merges_label()) {
            sets.union(self.index[&br.from], self.index[&br.to]);
        }
        let (labels, _) = sets.dense_labels();
        let mut sizes = HashMap::new();
        for &l in &labels {
            *sizes.entry(l).or_insert(0usize) += 1;
        }
        for (bus, &l) in self.buses.iter_mut().zip(&labels) {
            bus.merged_group = (sizes[&l] > 1).then_some(l);
        }
        Ok(())
    }

    fn reachable_from(&self, start: usize, carries: impl Fn(&Branch) -> bool) -> Vec<bool> {
        let adj = self.adjacency(|b| b.is_closed() && carries(b));
        let mut seen = vec![false; self.buses.len()];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen
    }

    /// Adjacency lists (neighbor, branch index) over branches passing `keep`.
    pub fn adjacency(&self, keep: impl Fn(&Branch) -> bool) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.buses.len()];
        for (k, br) in self.branches.iter().enumerate().filter(|(_, b)| keep(b)) {
            let (f, t) = (self.index[&br.from], self.index[&br.to]);
            adj[f].push((t, k));
            adj[t].push((f, k));
        }
        adj
    }

    pub fn buses(&self) -> &[Bus] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn branch(&self, id: &str) -> Option<&Branch> {
        self.branches.iter().find(|b| b.id == id)
    }

    pub fn source_bus(&self) -> &str {
        &self.source_bus
    }

    pub fn source_index(&self) -> usize {
        self.index[&self.source_bus]
    }

    pub fn source_impedance(&self) -> &[Complex; 9] {
        &self.source_impedance
    }

    pub fn base_voltage(&self) -> f64 {
        self.base_voltage
    }

    /// Phases energized at each bus through closed branches.
    pub fn bus_phases(&self, bus: usize) -> PhaseSet {
        self.bus_phases[bus]
    }

    pub fn measured_buses(&self) -> Vec<usize> {
        (0..self.buses.len())
            .filter(|&i| self.buses[i].measured)
            .collect()
    }

    /// Class labeling where buses joined by normally closed switches or
    /// regulators share a class. Classes are numbered by first appearance
    /// in bus order.
    pub fn merged_label_map(&self) -> LabelMap {
        let n = self.buses.len();
        let mut sets = DisjointSets::new(n);
        for br in self.branches.iter().filter(|b| b.merges_label()) {
            sets.union(self.index[&br.from], self.index[&br.to]);
        }
        let (class_of, classes) = sets.dense_labels();
        let mut members = vec![Vec::new(); classes];
        for (i, &c) in class_of.iter().enumerate() {
            members[c].push(i);
        }
        LabelMap {
            class_of,
            members,
            bus_ids: self.buses.iter().map(|b| b.id.clone()).collect(),
        }
    }

    /// Sets switch states. Every edit must name a switch; the result is
    /// re-validated for connectivity.
    pub fn apply_switch_state<S: AsRef<str>>(&self, edits: &[(S, SwitchState)]) -> Result<Self> {
        let mut branches = self.branches.clone();
        for (id, new_state) in edits {
            let id = id.as_ref();
            let br = branches
                .iter_mut()
                .find(|b| b.id == id)
                .ok_or_else(|| Error::Edit(format!("unknown branch {id}")))?;
            match &mut br.kind {
                BranchKind::Switch { state, .. } => *state = *new_state,
                _ => return Err(Error::Edit(format!("branch {id} is not a switch"))),
            }
        }
        FeederModel::new(
            self.buses.clone(),
            branches,
            self.source_bus.clone(),
            self.source_impedance,
        )
    }

    /// Moves a single-phase lateral (a path of single-phase lines listed from
    /// the attachment bus outward) and the loads on its buses to `new_phase`.
    pub fn change_branch_phase<S: AsRef<str>>(&self, path: &[S], new_phase: u8) -> Result<Self> {
        if !(1..=3).contains(&new_phase) {
            return Err(Error::Edit(format!("phase {new_phase} is not 1, 2 or 3")));
        }
        if path.is_empty() {
            return Ok(self.clone());
        }
        let mut positions = Vec::with_capacity(path.len());
        for id in path {
            let id = id.as_ref();
            let k = self
                .branches
                .iter()
                .position(|b| b.id == id)
                .ok_or_else(|| Error::Edit(format!("unknown branch {id}")))?;
            let br = &self.branches[k];
            if br.kind != BranchKind::Line || br.phases.len() != 1 {
                return Err(Error::Edit(format!("branch {id} is not a single-phase line")));
            }
            positions.push(k);
        }
        let old_phase = self.branches[positions[0]].phases.iter().next().unwrap();
        if positions
            .iter()
            .any(|&k| !self.branches[k].phases.contains(old_phase))
        {
            return Err(Error::Edit("lateral branches are on different phases".into()));
        }
        if old_phase == new_phase {
            return Ok(self.clone());
        }

        let on_path: HashSet<usize> = positions.iter().copied().collect();
        let attach = self.index[&self.branches[positions[0]].from];
        let mut attach_phases = if attach == self.source_index() {
            PhaseSet::ABC
        } else {
            PhaseSet::EMPTY
        };
        for (k, br) in self.branches.iter().enumerate() {
            if on_path.contains(&k) || !br.is_closed() {
                continue;
            }
            if self.index[&br.from] == attach || self.index[&br.to] == attach {
                attach_phases = attach_phases.union(br.phases);
            }
        }
        if !attach_phases.contains(new_phase) {
            return Err(Error::Edit(format!(
                "phase {new_phase} is not available at attachment bus {} (phases {attach_phases})",
                self.buses[attach].id
            )));
        }

        let mut branches = self.branches.clone();
        let mut buses = self.buses.clone();
        for &k in &positions {
            branches[k].phases = PhaseSet::single(new_phase);
            let to = self.index[&branches[k].to];
            let bus = &mut buses[to];
            if bus.load_phases.contains(old_phase) {
                let (o, n) = ((old_phase - 1) as usize, (new_phase - 1) as usize);
                bus.nominal_load[n] += bus.nominal_load[o];
                bus.nominal_load[o] = Complex::new(0.0, 0.0);
                bus.load_phases = PhaseSet::from_phases(
                    &(1..=3u8)
                        .filter(|&p| bus.nominal_load[(p - 1) as usize] != Complex::new(0.0, 0.0))
                        .collect::<Vec<_>>(),
                );
            }
        }
        FeederModel::new(buses, branches, self.source_bus.clone(), self.source_impedance)
    }

    /// Marks the listed buses unmeasured.
    pub fn with_unmeasured<S: AsRef<str>>(&self, remove: &[S]) -> Result<Self> {
        let mut buses = self.buses.clone();
        for id in remove {
            let id = id.as_ref();
            let i = self
                .bus_index(id)
                .ok_or_else(|| Error::Edit(format!("unknown bus {id}")))?;
            buses[i].measured = false;
        }
        if !buses.iter().any(|b| b.measured) {
            return Err(Error::Edit("removal leaves no measured bus".into()));
        }
        FeederModel::new(buses, self.branches.clone(), self.source_bus.clone(), self.source_impedance)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("source ");
        out.push_str(&self.source_bus);
        out.push_str(" z=");
        out.push_str(&join_complex(&self.source_impedance));
        out.push('\n');
        for bus in &self.buses {
            out.push_str("bus ");
            out.push_str(&bus.id);
            for p in bus.load_phases.iter() {
                let s = bus.nominal_load[(p - 1) as usize];
                let _ = write!(out, " load p{p} {} {}", s.re, s.im);
            }
            if bus.measured {
                out.push_str(" measured");
            }
            out.push('\n');
        }
        for br in &self.branches {
            match br.kind {
                BranchKind::Line => {
                    let _ = writeln!(
                        out,
                        "branch {} {} {} phases={} len={} z={}",
                        br.id,
                        br.from,
                        br.to,
                        br.phases,
                        br.length,
                        join_complex(&br.impedance)
                    );
                }
                BranchKind::Switch { normal, state } => {
                    let _ = write!(
                        out,
                        "switch {} {} {} state={}",
                        br.id,
                        br.from,
                        br.to,
                        if normal == SwitchState::Closed { "nc" } else { "no" }
                    );
                    if state != normal {
                        out.push_str(if state == SwitchState::Closed {
                            " status=closed"
                        } else {
                            " status=open"
                        });
                    }
                    if br.phases != PhaseSet::ABC {
                        let _ = write!(out, " phases={}", br.phases);
                    }
                    out.push('\n');
                }
                BranchKind::Regulator => {
                    let _ = write!(out, "regulator {} {} {}", br.id, br.from, br.to);
                    if br.phases != PhaseSet::ABC {
                        let _ = write!(out, " phases={}", br.phases);
                    }
                    out.push('\n');
                }
            }
        }
        out
    }
}

impl std::str::FromStr for FeederModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_feeder(s)
    }
}

fn check_impedance(z: &[Complex], p: usize) -> std::result::Result<(), String> {
    if z.iter().any(|c| !(c.re.is_finite() && c.im.is_finite())) {
        return Err("non-finite impedance entry".into());
    }
    let scale = z.iter().map(|c| c.norm()).fold(0.0, f64::max).max(1e-300);
    for r in 0..p {
        for c in 0..r {
            if (z[r * p + c] - z[c * p + r]).norm() > 1e-12 * scale {
                return Err("non-symmetric impedance".into());
            }
        }
    }
    // Cholesky on the real part
    let mut l = vec![0.0; p * p];
    for i in 0..p {
        for j in 0..=i {
            let mut s = z[i * p + j].re;
            for k in 0..j {
                s -= l[i * p + k] * l[j * p + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err("real part of impedance is not positive definite".into());
                }
                l[i * p + i] = s.sqrt();
            } else {
                l[i * p + j] = s / l[j * p + j];
            }
        }
    }
    Ok(())
}

pub fn format_complex(c: Complex) -> String {
    let sign = if c.im.is_sign_negative() { '-' } else { '+' };
    format!("{}{}{}j", c.re, sign, c.im.abs())
}

fn join_complex(z: &[Complex]) -> String {
    z.iter().map(|&c| format_complex(c)).collect::<Vec<_>>().join(" ")
}

pub fn parse_complex(s: &str) -> Option<Complex> {
    let body = s.strip_suffix('j')?;
    let bytes = body.as_bytes();
    let split = (1..bytes.len()).rev().find(|&i| {
        (bytes[i] == b'+' || bytes[i] == b'-') && !matches!(bytes[i - 1], b'e' | b'E')
    })?;
    let re: f64 = body[..split].parse().ok()?;
    let im: f64 = body[split..].parse().ok()?;
    Some(Complex::new(re, im))
}

fn syntax(line: usize, message: impl Into<String>) -> Error {
    Error::Syntax {
        line,
        message: message.into(),
    }
}

fn parse_complex_list(line: usize, first: &str, rest: &[&str]) -> Result<Vec<Complex>> {
    std::iter::once(first)
        .chain(rest.iter().copied())
        .map(|t| parse_complex(t).ok_or_else(|| syntax(line, format!("bad complex entry `{t}`"))))
        .collect()
}

/// Parses and validates a feeder description.
pub fn parse_feeder(text: &str) -> Result<FeederModel> {
    let mut buses = Vec::new();
    let mut branches = Vec::new();
    let mut source: Option<(String, [Complex; 9])> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "source" => {
                if source.is_some() {
                    return Err(syntax(lineno, "duplicate source record"));
                }
                let bus = tokens.get(1).ok_or_else(|| syntax(lineno, "source needs a bus id"))?;
                let first = tokens
                    .get(2)
                    .and_then(|t| t.strip_prefix("z="))
                    .ok_or_else(|| syntax(lineno, "source needs z=<9 complex entries>"))?;
                let z = parse_complex_list(lineno, first, &tokens[3..])?;
                let z: [Complex; 9] = z
                    .try_into()
                    .map_err(|_| syntax(lineno, "source impedance needs 9 entries"))?;
                source = Some((bus.to_string(), z));
            }
            "bus" => {
                let id = tokens.get(1).ok_or_else(|| syntax(lineno, "bus needs an id"))?;
                let mut bus = Bus::new(*id);
                let mut i = 2;
                while i < tokens.len() {
                    match tokens[i] {
                        "measured" => {
                            bus.measured = true;
                            i += 1;
                        }
                        "load" => {
                            let (ph, p, q) = match (tokens.get(i + 1), tokens.get(i + 2), tokens.get(i + 3)) {
                                (Some(a), Some(b), Some(c)) => (a, b, c),
                                _ => return Err(syntax(lineno, "load needs p<phase> <P> <Q>")),
                            };
                            let phase = ph
                                .strip_prefix('p')
                                .and_then(|d| d.parse::<u8>().ok())
                                .filter(|d| (1..=3).contains(d))
                                .ok_or_else(|| syntax(lineno, format!("bad load phase `{ph}`")))?;
                            let p: f64 = p.parse().map_err(|_| syntax(lineno, format!("bad P `{p}`")))?;
                            let q: f64 = q.parse().map_err(|_| syntax(lineno, format!("bad Q `{q}`")))?;
                            if bus.load_phases.contains(phase) {
                                return Err(syntax(lineno, format!("duplicate load on phase {phase}")));
                            }
                            bus = bus.with_load(phase, p, q);
                            i += 4;
                        }
                        other => return Err(syntax(lineno, format!("unexpected token `{other}`"))),
                    }
                }
                buses.push(bus);
            }
            "branch" => {
                if tokens.len() < 7 {
                    return Err(syntax(lineno, "branch needs <id> <from> <to> phases= len= z="));
                }
                let phases = tokens[4]
                    .strip_prefix("phases=")
                    .and_then(PhaseSet::parse)
                    .ok_or_else(|| syntax(lineno, format!("bad phases `{}`", tokens[4])))?;
                let length: f64 = tokens[5]
                    .strip_prefix("len=")
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| syntax(lineno, format!("bad length `{}`", tokens[5])))?;
                let first = tokens[6]
                    .strip_prefix("z=")
                    .ok_or_else(|| syntax(lineno, "branch needs z="))?;
                let z = parse_complex_list(lineno, first, &tokens[7..])?;
                let p = phases.len();
                if z.len() != p * p {
                    return Err(syntax(
                        lineno,
                        format!("branch with {p} phases needs {} impedance entries", p * p),
                    ));
                }
                branches.push(Branch::line(tokens[1], tokens[2], tokens[3], phases, length, z));
            }
            kind @ ("switch" | "regulator") => {
                if tokens.len() < 4 {
                    return Err(syntax(lineno, format!("{kind} needs <id> <from> <to>")));
                }
                let mut br = if kind == "switch" {
                    Branch::switch(tokens[1], tokens[2], tokens[3], SwitchState::Closed)
                } else {
                    Branch::regulator(tokens[1], tokens[2], tokens[3])
                };
                let mut normal = None;
                let mut status = None;
                for tok in &tokens[4..] {
                    let (key, value) = tok
                        .split_once('=')
                        .ok_or_else(|| syntax(lineno, format!("unexpected token `{tok}`")))?;
                    match (kind, key, value) {
                        ("switch", "state", "nc") => normal = Some(SwitchState::Closed),
                        ("switch", "state", "no") => normal = Some(SwitchState::Open),
                        ("switch", "status", "open") => status = Some(SwitchState::Open),
                        ("switch", "status", "closed") => status = Some(SwitchState::Closed),
                        (_, "phases", v) => {
                            br.phases = PhaseSet::parse(v)
                                .ok_or_else(|| syntax(lineno, format!("bad phases `{v}`")))?;
                        }
                        _ => return Err(syntax(lineno, format!("unexpected token `{tok}`"))),
                    }
                }
                if kind == "switch" {
                    let normal = normal.ok_or_else(|| syntax(lineno, "switch needs state=nc|no"))?;
                    br.kind = BranchKind::Switch {
                        normal,
                        state: status.unwrap_or(normal),
                    };
                }
                branches.push(br);
            }
            other => return Err(syntax(lineno, format!("unknown record `{other}`"))),
        }
    }
    let (source_bus, zs) = source.ok_or_else(|| Error::Feeder("missing source".into()))?;
    FeederModel::new(buses, branches, source_bus, zs)
}
