//! Named architectures.

use std::sync::Arc;

use super::{Activation, ChebConvLayer, DenseLayer, Model};
use crate::dataset::CHANNELS;
use crate::error::{Error, Result};
use crate::graph::GraphOperator;
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct GcnProfile {
    /// Polynomial order per convolution layer.
    pub ks: Vec<usize>,
    pub filters: usize,
    pub dense: Vec<usize>,
    pub dropout: f64,
    /// Neighbors kept when building the graph.
    pub kn: usize,
}

impl GcnProfile {
    /// Three layers of 256 filters with orders 3, 4, 5; dense 512 and 256
    /// with dropout 0.5.
    pub fn default_profile() -> Self {
        GcnProfile {
            ks: vec![3, 4, 5],
            filters: 256,
            dense: vec![512, 256],
            dropout: 0.5,
            kn: 20,
        }
    }

    /// Reduced profile for small feeders.
    pub fn desk() -> Self {
        GcnProfile {
            ks: vec![3, 4, 5],
            filters: 32,
            dense: vec![64, 32],
            dropout: 0.5,
            kn: 8,
        }
    }

    /// First-order filters, for locality ablations.
    pub fn first_order(base: &GcnProfile) -> Self {
        GcnProfile {
            ks: vec![1; base.ks.len()],
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FcnnProfile {
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for FcnnProfile {
    /// 256, 128 and 64 SELU units.
    fn default() -> Self {
        FcnnProfile {
            hidden: vec![256, 128, 64],
            dropout: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ModelProfile {
    Gcn(GcnProfile),
    Fcnn(FcnnProfile),
}

impl ModelProfile {
    /// `gcn-default`, `gcn-desk`, `gcn-k1`, `gcn-desk-k1` or `fcnn`.
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "gcn-default" => Ok(ModelProfile::Gcn(GcnProfile::default_profile())),
            "gcn-desk" => Ok(ModelProfile::Gcn(GcnProfile::desk())),
            "gcn-k1" => Ok(ModelProfile::Gcn(GcnProfile::first_order(&GcnProfile::default_profile()))),
            "gcn-desk-k1" => Ok(ModelProfile::Gcn(GcnProfile::first_order(&GcnProfile::desk()))),
            "fcnn" => Ok(ModelProfile::Fcnn(FcnnProfile::default())),
            other => Err(Error::Config(format!("unknown model profile `{other}`"))),
        }
    }

    pub fn kn(&self) -> Option<usize> {
        match self {
            ModelProfile::Gcn(p) => Some(p.kn),
            ModelProfile::Fcnn(_) => None,
        }
    }

    /// Builds a freshly initialized model; `graph` is required for GCN
    /// profiles and must have been built with the profile's `kn`.
    pub fn build(
        &self,
        graph: Option<Arc<GraphOperator>>,
        n_buses: usize,
        classes: usize,
        seed: u64,
    ) -> Result<Model> {
        match self {
            ModelProfile::Gcn(p) => {
                let g = graph.ok_or_else(|| Error::Config("GCN profile needs a graph".into()))?;
                build_gcn(g, p, classes, seed)
            }
            ModelProfile::Fcnn(p) => build_fcnn_with(n_buses, classes, p, seed),
        }
    }
}

pub fn build_gcn(graph: Arc<GraphOperator>, profile: &GcnProfile, classes: usize, seed: u64) -> Result<Model> {
    if profile.ks.is_empty() || profile.filters == 0 {
        return Err(Error::Config("GCN profile needs at least one layer of filters".into()));
    }
    let n = graph.n();
    let mut rng = seed::stream(seed, "init", &[]);
    let mut conv = Vec::new();
    let mut channels = CHANNELS;
    for &k in &profile.ks {
        conv.push(ChebConvLayer::glorot(k, channels, profile.filters, Activation::Relu, &mut rng));
        channels = profile.filters;
    }
    let mut dense = Vec::new();
    let mut width = n * channels;
    for &h in &profile.dense {
        dense.push(DenseLayer::glorot(width, h, Activation::Relu, profile.dropout, &mut rng));
        width = h;
    }
    dense.push(DenseLayer::glorot(width, classes, Activation::Identity, 0.0, &mut rng));
    Model::new(Some(graph), n, CHANNELS, conv, dense, classes)
}

pub fn build_default_gcn(graph: Arc<GraphOperator>, classes: usize, seed: u64) -> Result<Model> {
    build_gcn(graph, &GcnProfile::default_profile(), classes, seed)
}

pub fn build_fcnn_with(n_buses: usize, classes: usize, profile: &FcnnProfile, seed: u64) -> Result<Model> {
    let mut rng = seed::stream(seed, "init", &[]);
    let mut dense = Vec::new();
    let mut width = n_buses * CHANNELS;
    for &h in &profile.hidden {
        dense.push(DenseLayer::glorot(width, h, Activation::Selu, profile.dropout, &mut rng));
        width = h;
    }
    dense.push(DenseLayer::glorot(width, classes, Activation::Identity, 0.0, &mut rng));
    Model::new(None, n_buses, CHANNELS, Vec::new(), dense, classes)
}

pub fn build_fcnn(n_buses: usize, classes: usize, seed: u64) -> Result<Model> {
    build_fcnn_with(n_buses, classes, &FcnnProfile::default(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn default_gcn_shape_and_count() {
        let m = fixtures::feeder25();
        let g = Arc::new(GraphOperator::from_feeder(&m, 20).unwrap());
        let c = 23;
        let model = build_default_gcn(g, c, 1).unwrap();
        let ks: Vec<usize> = model.conv_layers().iter().map(|l| l.k).collect();
        assert_eq!(ks, vec![3, 4, 5]);
        let n = 25;
        let expect = 12 * 256 * 4 + 256 * 256 * 5 + 256 * 256 * 6
            + (n * 256) * 512 + 512
            + 512 * 256 + 256
            + 256 * c + c;
        assert_eq!(model.param_count(), expect);
        assert!(model.dense_layers()[..2].iter().all(|d| d.dropout == 0.5));
    }

    #[test]
    fn fcnn_count() {
        let (n, c) = (25, 23);
        let model = build_fcnn(n, c, 1).unwrap();
        let expect = (n * 12) * 256 + 256 + 256 * 128 + 128 + 128 * 64 + 64 + 64 * c + c;
        assert_eq!(model.param_count(), expect);
        assert!(model.dense_layers()[..3].iter().all(|d| d.activation == Activation::Selu));
    }

    #[test]
    fn named_profiles() {
        match ModelProfile::named("gcn-desk").unwrap() {
            ModelProfile::Gcn(p) => {
                assert_eq!((p.filters, p.dense.clone(), p.kn), (32, vec![64, 32], 8));
            }
            _ => panic!(),
        }
        match ModelProfile::named("gcn-k1").unwrap() {
            ModelProfile::Gcn(p) => assert_eq!(p.ks, vec![1, 1, 1]),
            _ => panic!(),
        }
        assert!(ModelProfile::named("resnet").is_err());
    }
}
