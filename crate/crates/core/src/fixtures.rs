//! Bundled test feeders.

use crate::feeder::{parse_feeder, FeederModel};

/// Synthetic 25-bus radial feeder: 22 lines, a regulator, a normally closed
/// switch and a normally open tie switch; 17 measured load buses, 23 classes.
pub const FEEDER_25: &str = include_str!("../data/feeder25.txt");

/// Source bus and one single-phase load bus.
pub const FEEDER_2: &str = "\
source s z=0.01+0.1j 0.002+0.03j 0.002+0.03j 0.002+0.03j 0.01+0.1j 0.002+0.03j 0.002+0.03j 0.002+0.03j 0.01+0.1j
bus s
bus a load p1 0.5 0.2 measured
branch l1 s a phases=1 len=1 z=0.05+0.1j
";

pub fn feeder25() -> FeederModel {
    parse_feeder(FEEDER_25).expect("bundled feeder is valid")
}

pub fn feeder2() -> FeederModel {
    parse_feeder(FEEDER_2).expect("bundled feeder is valid")
}
