mod common;

use gcnfault::feeder::PhaseSet;
use gcnfault::graph::class_hop_distances;
use gcnfault::sim::{DatasetPlan, PhaseMode};

#[test]
fn synthetic_feeder_shape() {
    let f = common::feeder128();
    assert_eq!(f.n_buses(), 128);
    assert_eq!(f.merged_label_map().num_classes(), 119);
    let count = |p: usize| (0..128).filter(|&b| f.bus_phases(b).len() == p).count();
    assert_eq!((count(3), count(2), count(1)), (64, 12, 52));
    assert_eq!(f.bus_phases(f.bus_index("d0").unwrap()), PhaseSet::from_phases(&[1, 2]));
    let hops = class_hop_distances(&f);
    assert_eq!(hops.dim(), (119, 119));
}

#[test]
fn enumerate_plan_sizes() {
    let f = common::feeder128();
    let plan = DatasetPlan {
        samples_per_type: 20,
        phase_mode: PhaseMode::Enumerate,
        ..DatasetPlan::default()
    };
    // 9 phase combinations per three-phase bus, 4 per two-phase bus, 1 per single-phase bus.
    assert_eq!(plan.size(&f).unwrap(), 13520);
    let random = DatasetPlan {
        samples_per_type: 20,
        ..DatasetPlan::default()
    };
    assert_eq!(random.size(&f).unwrap(), (64 * 3 + 12 * 3 + 52) * 20);
}
