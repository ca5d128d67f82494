//! Binary model checkpoints.
//!
//! Little-endian layout: magic `GLCK`, `u32` version, then the architecture
//! (bus count, input channels, classes, graph `kn`, conv layers as
//! `k, n_in, n_out, activation`, dense layers as
//! `fan_in, fan_out, activation, dropout`), a flag and the dense scaled
//! Laplacian when the model has a graph, every parameter tensor in
//! declaration order as `f64`, and finally a flag plus the Adam state
//! (`lr, beta1, beta2, eps, t`, first moments, second moments).

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};

use super::{Activation, Adam, ChebConvLayer, DenseLayer, Model};
use crate::error::{Error, Result};
use crate::graph::GraphOperator;

pub const MAGIC: &[u8; 4] = b"GLCK";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, k: usize) -> Result<&[u8]> {
        if self.pos + k > self.bytes.len() {
            return Err(Error::Format(format!("truncated checkpoint at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn encode(model: &Model, optimizer: Option<&Adam>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.u32(model.n_buses());
    w.u32(model.in_channels());
    w.u32(model.classes());
    w.u32(model.graph().map_or(0, |g| g.kn));
    w.u32(model.conv_layers().len());
    for c in model.conv_layers() {
        w.u32(c.k);
        w.u32(c.n_in);
        w.u32(c.n_out);
        w.u8(c.activation.code());
    }
    w.u32(model.dense_layers().len());
    for d in model.dense_layers() {
        w.u32(d.fan_in());
        w.u32(d.fan_out());
        w.u8(d.activation.code());
        w.f64(d.dropout);
    }
    match model.graph() {
        Some(g) => {
            w.u8(1);
            w.f64s(g.scaled.iter());
        }
        None => w.u8(0),
    }
    for p in model.params() {
        w.f64s(p.iter());
    }
    match optimizer {
        Some(a) => {
            w.u8(1);
            for v in [a.lr, a.beta1, a.beta2, a.eps] {
                w.f64(v);
            }
            w.u64(a.t);
            for m in a.m.iter().chain(&a.v) {
                w.f64s(m.iter());
            }
        }
        None => w.u8(0),
    }
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<(Model, Option<Adam>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("missing GLCK magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = r.u32()?;
    let in_channels = r.u32()?;
    let classes = r.u32()?;
    let kn = r.u32()?;
    let mut conv = Vec::new();
    for _ in 0..r.u32()? {
        let (k, n_in, n_out) = (r.u32()?, r.u32()?, r.u32()?);
        conv.push(ChebConvLayer::zeros(k, n_in, n_out, Activation::from_code(r.u8()?)?));
    }
    let mut dense = Vec::new();
    for _ in 0..r.u32()? {
        let (fan_in, fan_out) = (r.u32()?, r.u32()?);
        let activation = Activation::from_code(r.u8()?)?;
        dense.push(DenseLayer {
            weights: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
            activation,
            dropout: r.f64()?,
        });
    }
    let graph = match r.u8()? {
        0 => None,
        1 => {
            let scaled = Array2::from_shape_vec((n, n), r.f64s(n * n)?).unwrap();
            Some(Arc::new(GraphOperator::from_scaled(scaled, kn)))
        }
        f => return Err(Error::Format(format!("bad graph flag {f}"))),
    };
    let mut model = Model::new(graph, n, in_channels, conv, dense, classes)
        .map_err(|e| Error::Format(format!("inconsistent architecture: {e}")))?;
    for p in model.params_mut() {
        let vals = r.f64s(p.len())?;
        p.copy_from_slice(&vals);
    }
    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let shapes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
            let mut a = Adam::new(r.f64()?, &shapes);
            a.beta1 = r.f64()?;
            a.beta2 = r.f64()?;
            a.eps = r.f64()?;
            a.t = r.u64()?;
            for m in a.m.iter_mut().chain(a.v.iter_mut()) {
                let vals = r.f64s(m.len())?;
                m.copy_from_slice(&vals);
            }
            Some(a)
        }
        f => return Err(Error::Format(format!("bad optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - r.pos)));
    }
    Ok((model, optimizer))
}

pub fn write_checkpoint(path: &Path, model: &Model, optimizer: Option<&Adam>) -> Result<()> {
    fs::write(path, encode(model, optimizer)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(Model, Option<Adam>)> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
