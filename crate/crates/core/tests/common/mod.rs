#![allow(dead_code)]

use gcnfault::feeder::{Branch, Bus, FeederModel, PhaseSet, SwitchState};
use gcnfault::seed;
use num_complex::Complex64 as Complex;
use rand::Rng;

pub fn source_z() -> [Complex; 9] {
    let mut z = [Complex::new(0.0005, 0.006); 9];
    for d in [0, 4, 8] {
        z[d] = Complex::new(0.002, 0.02);
    }
    z
}

/// Self terms on the diagonal, smaller mutual terms elsewhere.
pub fn line_z(phases: PhaseSet, len: f64) -> Vec<Complex> {
    let p = phases.len();
    (0..p * p)
        .map(|k| {
            if k / p == k % p {
                Complex::new(0.06 * len, 0.12 * len)
            } else {
                Complex::new(0.02 * len, 0.05 * len)
            }
        })
        .collect()
}

fn subset_of(parent: PhaseSet, rng: &mut seed::Rng) -> PhaseSet {
    let ph: Vec<u8> = parent.iter().collect();
    loop {
        let pick: Vec<u8> = ph.iter().copied().filter(|_| rng.random_bool(0.6)).collect();
        if !pick.is_empty() {
            return PhaseSet::from_phases(&pick);
        }
    }
}

/// Random radial feeder with `n` buses: lines with phase subsets of their
/// parent, some normally closed switches and regulators between three-phase
/// buses, loads and measurements on random buses, plus one normally open tie.
pub fn random_feeder(n: usize, seed_: u64) -> FeederModel {
    let mut rng = seed::rng(seed_);
    let mut phases = vec![PhaseSet::ABC];
    let mut buses = vec![Bus::new("b0")];
    let mut branches = Vec::new();
    for i in 1..n {
        let parent = rng.random_range(0..i);
        let pp = phases[parent];
        let roll: f64 = rng.random();
        let (br, ph) = if pp == PhaseSet::ABC && roll < 0.1 {
            (Branch::switch(format!("s{i}"), format!("b{parent}"), format!("b{i}"), SwitchState::Closed), pp)
        } else if pp == PhaseSet::ABC && roll < 0.15 {
            (Branch::regulator(format!("r{i}"), format!("b{parent}"), format!("b{i}")), pp)
        } else {
            let ph = subset_of(pp, &mut rng);
            let len = rng.random_range(0.1..1.0);
            (Branch::line(format!("l{i}"), format!("b{parent}"), format!("b{i}"), ph, len, line_z(ph, len)), ph)
        };
        branches.push(br);
        phases.push(ph);
        let mut bus = Bus::new(format!("b{i}"));
        for p in ph.iter() {
            if rng.random_bool(0.5) {
                bus = bus.with_load(p, rng.random_range(0.01..0.05), rng.random_range(0.0..0.02));
            }
        }
        if !bus.load_phases.is_empty() && rng.random_bool(0.7) {
            bus = bus.measured();
        }
        buses.push(bus);
    }
    let abc: Vec<usize> = (1..n).filter(|&i| phases[i] == PhaseSet::ABC).collect();
    if abc.len() >= 2 {
        let a = abc[rng.random_range(0..abc.len())];
        let b = abc[rng.random_range(0..abc.len())];
        if a != b {
            branches.push(Branch::switch("tie", format!("b{a}"), format!("b{b}"), SwitchState::Open));
        }
    }
    FeederModel::new(buses, branches, "b0", source_z()).expect("random feeder is valid")
}

/// 128 buses, 119 classes: a 64-bus three-phase trunk whose links include 6
/// normally closed switches and 3 regulators, 12 two-phase laterals and 52
/// single-phase taps.
pub fn feeder128() -> FeederModel {
    let mut buses = Vec::new();
    let mut branches = Vec::new();
    let abc = PhaseSet::ABC;
    for i in 0..64 {
        buses.push(Bus::new(format!("t{i}")).with_load(1, 0.01, 0.005).measured());
        if i == 0 {
            continue;
        }
        let (from, to) = (format!("t{}", i - 1), format!("t{i}"));
        branches.push(match i {
            5 | 15 | 25 | 35 | 45 | 55 => Branch::switch(format!("s{i}"), from, to, SwitchState::Closed),
            10 | 30 | 50 => Branch::regulator(format!("r{i}"), from, to),
            _ => Branch::line(format!("l{i}"), from, to, abc, 0.3, line_z(abc, 0.3)),
        });
    }
    let ab = PhaseSet::from_phases(&[1, 2]);
    for j in 0..12 {
        buses.push(Bus::new(format!("d{j}")).with_load(2, 0.01, 0.005));
        let from = format!("t{}", 4 * j + 2);
        branches.push(Branch::line(format!("ld{j}"), from, format!("d{j}"), ab, 0.2, line_z(ab, 0.2)));
    }
    let a = PhaseSet::single(1);
    for j in 0..52 {
        buses.push(Bus::new(format!("u{j}")).with_load(1, 0.01, 0.005));
        let from = if j < 12 { format!("d{j}") } else { format!("t{}", j) };
        branches.push(Branch::line(format!("lu{j}"), from, format!("u{j}"), a, 0.1, line_z(a, 0.1)));
    }
    FeederModel::new(buses, branches, "t0", source_z()).expect("synthetic feeder is valid")
}
