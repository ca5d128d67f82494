mod common;

use std::sync::OnceLock;

use gcnfault::dataset::{apply_modifications, modify_dataset, standardize, Dataset, ModificationSpec};
use gcnfault::feeder::{parse_feeder, BranchKind, SwitchState};
use gcnfault::fixtures;
use gcnfault::graph::{class_hop_distances, shortest_path_distances, GraphOperator, POWER_ITERATION_TOL};
use gcnfault::oracle::eigendecompose;
use gcnfault::seed;
use gcnfault::sim::{generate_dataset, DatasetPlan};
use proptest::prelude::*;

fn standardized_samples() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        let plan = DatasetPlan {
            samples_per_type: 1,
            ..DatasetPlan::default()
        };
        let mut ds = generate_dataset(&fixtures::feeder25(), &plan, 11).unwrap();
        standardize(&mut ds, None).unwrap();
        ds
    })
}

proptest! {
    #![proptest_config(ProptestConfig {
        cases: 64,
        failure_persistence: None,
        ..ProptestConfig::default()
    })]

    #[test]
    fn feeder_text_round_trips(n in 2usize..40, s in any::<u64>()) {
        let f = common::random_feeder(n, s);
        let back = parse_feeder(&f.to_text()).unwrap();
        prop_assert_eq!(&back, &f);
        prop_assert_eq!(back.to_text(), f.to_text());
    }

    #[test]
    fn switch_edits_are_invertible(n in 2usize..40, s in any::<u64>()) {
        let f = common::random_feeder(n, s);
        for br in f.branches() {
            if let BranchKind::Switch { state, .. } = br.kind {
                // Opening a radial switch islands buses and must be refused.
                if let Ok(g) = f.apply_switch_state(&[(br.id.as_str(), state.toggled())]) {
                    prop_assert_ne!(&g, &f);
                    let h = g.apply_switch_state(&[(br.id.as_str(), state)]).unwrap();
                    prop_assert_eq!(&h, &f);
                } else {
                    prop_assert_eq!(state, SwitchState::Closed);
                }
            }
        }
    }

    #[test]
    fn labels_cover_every_class(n in 2usize..60, s in any::<u64>()) {
        let f = common::random_feeder(n, s);
        let map = f.merged_label_map();
        let merging = f.branches().iter().filter(|b| b.merges_label()).count();
        prop_assert_eq!(map.num_classes(), n - merging);
        let mut seen = vec![0usize; map.num_classes()];
        for b in 0..n {
            let c = map.class_of(b);
            prop_assert!(map.members(c).contains(&b));
            seen[c] += 1;
        }
        for c in 0..map.num_classes() {
            prop_assert!(seen[c] > 0);
            prop_assert_eq!(seen[c], map.members(c).len());
        }
        for br in f.branches().iter().filter(|b| b.merges_label()) {
            let (i, j) = (f.bus_index(&br.from).unwrap(), f.bus_index(&br.to).unwrap());
            prop_assert_eq!(map.class_of(i), map.class_of(j));
        }
    }

    #[test]
    fn class_hops_form_a_metric(n in 2usize..50, s in any::<u64>()) {
        let f = common::random_feeder(n, s);
        let h = class_hop_distances(&f);
        let c = f.merged_label_map().num_classes();
        prop_assert_eq!(h.dim(), (c, c));
        for i in 0..c {
            prop_assert_eq!(h[[i, i]], 0);
            for j in 0..c {
                prop_assert_eq!(h[[i, j]], h[[j, i]]);
                prop_assert!(i == j || h[[i, j]] > 0);
                for k in 0..c {
                    prop_assert!(h[[i, k]] <= h[[i, j]] + h[[j, k]]);
                }
            }
        }
    }

    #[test]
    fn feeder_laplacian_spectrum(n in 3usize..30, s in any::<u64>(), kn_frac in 0.1f64..1.0) {
        let f = common::random_feeder(n, s);
        let kn = ((n as f64 * kn_frac) as usize).clamp(2, n);
        let g = match GraphOperator::from_feeder(&f, kn) {
            Ok(g) => g,
            Err(e) => {
                // Switches and regulators have zero length; the kernel width
                // vanishes when every Kn-th nearest distance is zero.
                let s = shortest_path_distances(&f).unwrap();
                for row in s.values().rows() {
                    let mut d: Vec<f64> = row.to_vec();
                    d.sort_by(f64::total_cmp);
                    prop_assert_eq!(d[kn - 1], 0.0, "{}", e);
                }
                return Ok(());
            }
        };
        for i in 0..n {
            prop_assert!(g.weights[[i, i]] == 0.0);
            for j in 0..n {
                prop_assert_eq!(g.weights[[i, j]], g.weights[[j, i]]);
                prop_assert!((g.laplacian[[i, j]] - g.laplacian[[j, i]]).abs() < 1e-15);
            }
        }
        let lap = eigendecompose(&g.laplacian).unwrap();
        prop_assert!(lap.values[0] > -1e-9);
        prop_assert!(lap.values[n - 1] < 2.0 + 1e-9);
        let top = lap.values[n - 1];
        // 2 is the fallback when power iteration does not settle.
        if g.lambda_max != 2.0 {
            prop_assert!(g.lambda_max <= top + 1e-12, "{} vs {}", g.lambda_max, top);
            prop_assert!(top - g.lambda_max <= POWER_ITERATION_TOL * top, "{} vs {}", g.lambda_max, top);
        }
        // lambda_max may undershoot by the iteration tolerance, which
        // stretches the scaled spectrum past 1 by up to twice that.
        let scaled = eigendecompose(&g.scaled).unwrap();
        prop_assert!(scaled.values[0] >= -1.0 - 1e-9);
        prop_assert!(scaled.values[n - 1] <= 1.0 + 2.0 * POWER_ITERATION_TOL + 1e-9);
    }

    #[test]
    fn modifications_leave_unmeasured_entries_zero(
        idx in 0usize..1000,
        snr in prop::option::of(10.0f64..60.0),
        n_drop in 0usize..4,
        p_loss in 0.0f64..0.5,
        s in any::<u64>(),
    ) {
        let ds = standardized_samples();
        let sample = &ds.samples[idx % ds.len()];
        prop_assert!(sample.structural_violation().is_none());
        let sigma = snr.map(gcnfault::dataset::snr_sigma).unwrap_or(0.0);
        let spec = ModificationSpec::new(sigma, n_drop, p_loss).unwrap();
        let out = apply_modifications(sample, &spec, &mut seed::rng(s)).unwrap();
        prop_assert!(out.structural_violation().is_none());
        for ((b, c), v) in out.x.indexed_iter() {
            if !sample.mask.is_measured(b, c) {
                prop_assert_eq!(*v, 0.0);
            }
        }
        let zeroed = (0..sample.mask.n_buses())
            .filter(|&b| sample.mask.bus_measured(b) && out.x.row(b).iter().all(|&v| v == 0.0))
            .count();
        prop_assert!(zeroed >= n_drop);
    }

    #[test]
    fn modify_dataset_is_reproducible(n_drop in 0usize..3, p_loss in 0.0f64..0.3, s in any::<u64>()) {
        let spec = ModificationSpec::new(0.01, n_drop, p_loss).unwrap();
        let mut a = standardized_samples().subset(&[0, 1, 2, 3]);
        let mut b = a.clone();
        modify_dataset(&mut a, &spec, s).unwrap();
        modify_dataset(&mut b, &spec, s).unwrap();
        prop_assert_eq!(&a, &b);
        let mut c = standardized_samples().subset(&[0, 1, 2, 3]);
        modify_dataset(&mut c, &spec, s.wrapping_add(1)).unwrap();
        prop_assert_ne!(&a, &c);
    }
}
