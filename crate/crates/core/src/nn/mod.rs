//! Chebyshev graph convolution network and the fully connected baseline.
//!
//! A batch of `B` samples is laid out as a `(B*n) x C` matrix, sample blocks
//! stacked on top of each other. Convolution outputs are flattened per sample
//! bus-major, channel-minor, which is a plain reshape of that layout to
//! `B x (n*C)`. Gradients are derived by hand per layer kind.

pub mod adam;
pub mod checkpoint;
pub mod profile;
pub mod train;

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::dataset::SampleMatrix;
use crate::error::{Error, Result};
use crate::graph::{GraphOperator, SparseMatrix};
use crate::seed::Rng as SeedRng;

pub use adam::Adam;
pub use profile::{build_default_gcn, build_fcnn, build_gcn, FcnnProfile, GcnProfile, ModelProfile};
pub use train::{train, EpochRecord, TrainConfig, TrainOutcome};

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Selu,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA * z
                } else {
                    SELU_LAMBDA * SELU_ALPHA * (z.exp() - 1.0)
                }
            }
        }
    }

    /// Derivative at pre-activation `z`.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * z.exp()
                }
            }
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Selu => 2,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Selu),
            _ => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Chebyshev bases `d_0 .. d_K` of the columns of `x`.
pub fn cheb_basis(op: &SparseMatrix, x: ArrayView2<f64>, k: usize) -> Vec<Array2<f64>> {
    let mut d = Vec::with_capacity(k + 1);
    d.push(x.to_owned());
    if k >= 1 {
        let mut d1 = Array2::zeros(x.dim());
        op.apply_block(x, d1.view_mut());
        d.push(d1);
    }
    for j in 2..=k {
        let mut next = Array2::zeros(x.dim());
        op.apply_block(d[j - 1].view(), next.view_mut());
        next.mapv_inplace(|v| 2.0 * v);
        next -= &d[j - 2];
        d.push(next);
    }
    d
}

/// `sum_k alpha_k d_k` for a single graph signal `f`.
pub fn cheb_apply(op: &SparseMatrix, alpha: &[f64], f: &[f64]) -> Result<Vec<f64>> {
    if f.len() != op.n_rows() {
        return Err(Error::Shape(format!(
            "signal has {} entries, operator is {}x{}",
            f.len(),
            op.n_rows(),
            op.n_rows()
        )));
    }
    if alpha.is_empty() {
        return Err(Error::Shape("no Chebyshev coefficients".into()));
    }
    let x = ArrayView2::from_shape((f.len(), 1), f).unwrap();
    let d = cheb_basis(op, x, alpha.len() - 1);
    let mut out = vec![0.0; f.len()];
    for (a, dk) in alpha.iter().zip(&d) {
        for (o, v) in out.iter_mut().zip(dk.iter()) {
            *o += a * v;
        }
    }
    Ok(out)
}

fn glorot(rows: usize, cols: usize, fan_in: usize, fan_out: usize, rng: &mut SeedRng) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..=limit))
}

/// Graph convolution with `(K+1) * N_in * N_out` coefficients. Row
/// `k * N_in + i`, column `j` of `alpha` is the order-`k` coefficient of the
/// filter from input channel `i` to output channel `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChebConvLayer {
    pub k: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub alpha: Array2<f64>,
    pub activation: Activation,
}

impl ChebConvLayer {
    pub fn zeros(k: usize, n_in: usize, n_out: usize, activation: Activation) -> Self {
        ChebConvLayer {
            k,
            n_in,
            n_out,
            alpha: Array2::zeros(((k + 1) * n_in, n_out)),
            activation,
        }
    }

    /// Glorot-uniform coefficients with fan-in `N_in * (K+1)`.
    pub fn glorot(k: usize, n_in: usize, n_out: usize, activation: Activation, rng: &mut SeedRng) -> Self {
        ChebConvLayer {
            k,
            n_in,
            n_out,
            alpha: glorot((k + 1) * n_in, n_out, (k + 1) * n_in, n_out, rng),
            activation,
        }
    }

    pub fn coefficient(&self, i: usize, j: usize, k: usize) -> f64 {
        self.alpha[[k * self.n_in + i, j]]
    }

    pub fn coefficient_mut(&mut self, i: usize, j: usize, k: usize) -> &mut f64 {
        &mut self.alpha[[k * self.n_in + i, j]]
    }

    pub fn param_count(&self) -> usize {
        self.alpha.len()
    }

    /// Chebyshev stack `[d_0 | d_1 | .. | d_K]` per sample block, and the
    /// pre-activation output `stack * alpha`.
    pub fn forward_batch(&self, op: &SparseMatrix, x: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let n = op.n_rows();
        if x.ncols() != self.n_in || x.nrows() % n != 0 {
            return Err(Error::Shape(format!(
                "conv input is {:?}, expected blocks of {n} rows and {} channels",
                x.dim(),
                self.n_in
            )));
        }
        let mut stack = Array2::zeros((x.nrows(), (self.k + 1) * self.n_in));
        for b in 0..x.nrows() / n {
            let rows = s![b * n..(b + 1) * n, ..];
            let d = cheb_basis(op, x.slice(rows), self.k);
            for (k, dk) in d.iter().enumerate() {
                stack
                    .slice_mut(s![b * n..(b + 1) * n, k * self.n_in..(k + 1) * self.n_in])
                    .assign(dk);
            }
        }
        let pre = stack.dot(&self.alpha);
        Ok((stack, pre))
    }

    /// Gradients of `alpha` and of the input given the pre-activation
    /// gradient, by a reverse sweep of the recursion.
    pub fn backward_batch(&self, op: &SparseMatrix, stack: &Array2<f64>, dpre: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let n = op.n_rows();
        let dalpha = stack.t().dot(dpre);
        let dstack = dpre.dot(&self.alpha.t());
        let rows = dpre.nrows();
        let mut dx = Array2::zeros((rows, self.n_in));
        let mut tmp = Array2::zeros((n, self.n_in));
        for b in 0..rows / n {
            let mut g: Vec<Array2<f64>> = (0..=self.k)
                .map(|k| {
                    dstack
                        .slice(s![b * n..(b + 1) * n, k * self.n_in..(k + 1) * self.n_in])
                        .to_owned()
                })
                .collect();
            for k in (2..=self.k).rev() {
                op.apply_block(g[k].view(), tmp.view_mut());
                g[k - 1].scaled_add(2.0, &tmp);
                let gk = g[k].clone();
                g[k - 2] -= &gk;
            }
            if self.k >= 1 {
                op.apply_block(g[1].view(), tmp.view_mut());
                g[0] += &tmp;
            }
            dx.slice_mut(s![b * n..(b + 1) * n, ..]).assign(&g[0]);
        }
        (dalpha, dx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `fan_in x fan_out`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
    /// Inverted dropout on this layer's output during training.
    pub dropout: f64,
}

impl DenseLayer {
    pub fn glorot(fan_in: usize, fan_out: usize, activation: Activation, dropout: f64, rng: &mut SeedRng) -> Self {
        DenseLayer {
            weights: glorot(fan_in, fan_out, fan_in, fan_out, rng),
            bias: Array1::zeros(fan_out),
            activation,
            dropout,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Clone, Debug)]
struct ConvCache {
    stack: Array2<f64>,
    pre: Array2<f64>,
}

#[derive(Clone, Debug)]
struct DenseCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    /// Entries are 0 or `1 / keep`.
    mask: Option<Array2<f64>>,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    batch: usize,
    conv: Vec<ConvCache>,
    dense: Vec<DenseCache>,
    pub logits: Array2<f64>,
}

/// Gradients in parameter order: conv coefficients, then each dense
/// layer's weights and bias.
pub type Gradients = Vec<Vec<f64>>;

#[derive(Clone, Debug)]
pub struct Model {
    graph: Option<Arc<GraphOperator>>,
    n_buses: usize,
    in_channels: usize,
    conv: Vec<ChebConvLayer>,
    dense: Vec<DenseLayer>,
    classes: usize,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        let same_graph = match (&self.graph, &other.graph) {
            (None, None) => true,
            (Some(a), Some(b)) => a.scaled == b.scaled,
            _ => false,
        };
        same_graph
            && self.n_buses == other.n_buses
            && self.in_channels == other.in_channels
            && self.conv == other.conv
            && self.dense == other.dense
            && self.classes == other.classes
    }
}

impl Model {
    pub fn new(
        graph: Option<Arc<GraphOperator>>,
        n_buses: usize,
        in_channels: usize,
        conv: Vec<ChebConvLayer>,
        dense: Vec<DenseLayer>,
        classes: usize,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::Shape(m));
        match &graph {
            Some(g) if g.n() != n_buses => {
                return bad(format!("graph has {} nodes, model {} buses", g.n(), n_buses))
            }
            None if !conv.is_empty() => return bad("convolution layers need a graph".into()),
            _ => {}
        }
        let mut channels = in_channels;
        for (i, layer) in conv.iter().enumerate() {
            if layer.n_in != channels || layer.alpha.dim() != ((layer.k + 1) * layer.n_in, layer.n_out) {
                return bad(format!("conv layer {i} does not chain"));
            }
            channels = layer.n_out;
        }
        let mut width = n_buses * channels;
        for (i, layer) in dense.iter().enumerate() {
            if layer.fan_in() != width || layer.bias.len() != layer.fan_out() {
                return bad(format!("dense layer {i} does not chain"));
            }
            if !(0.0..1.0).contains(&layer.dropout) {
                return bad(format!("dense layer {i} dropout {} not in [0, 1)", layer.dropout));
            }
            width = layer.fan_out();
        }
        if dense.is_empty() || width != classes {
            return bad(format!("final layer width {width} differs from {classes} classes"));
        }
        Ok(Model {
            graph,
            n_buses,
            in_channels,
            conv,
            dense,
            classes,
        })
    }

    pub fn graph(&self) -> Option<&Arc<GraphOperator>> {
        self.graph.as_ref()
    }

    pub fn n_buses(&self) -> usize {
        self.n_buses
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn conv_layers(&self) -> &[ChebConvLayer] {
        &self.conv
    }

    pub fn conv_layers_mut(&mut self) -> &mut [ChebConvLayer] {
        &mut self.conv
    }

    pub fn dense_layers(&self) -> &[DenseLayer] {
        &self.dense
    }

    pub fn dense_layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.dense
    }

    pub fn param_count(&self) -> usize {
        self.conv.iter().map(ChebConvLayer::param_count).sum::<usize>()
            + self.dense.iter().map(DenseLayer::param_count).sum::<usize>()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for c in &self.conv {
            out.push(c.alpha.as_slice().unwrap());
        }
        for d in &self.dense {
            out.push(d.weights.as_slice().unwrap());
            out.push(d.bias.as_slice().unwrap());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.conv {
            out.push(c.alpha.as_slice_mut().unwrap());
        }
        for d in &mut self.dense {
            out.push(d.weights.as_slice_mut().unwrap());
            out.push(d.bias.as_slice_mut().unwrap());
        }
        out
    }

    /// Stacks sample matrices into the `(B*n) x C` batch layout.
    pub fn batch_input<'a, I>(&self, samples: I) -> Result<(Array2<f64>, usize)>
    where
        I: IntoIterator<Item = &'a SampleMatrix>,
    {
        let mut rows = Vec::new();
        let mut count = 0;
        for s in samples {
            if s.x.dim() != (self.n_buses, self.in_channels) {
                return Err(Error::Shape(format!(
                    "sample is {:?}, model expects {}x{}",
                    s.x.dim(),
                    self.n_buses,
                    self.in_channels
                )));
            }
            rows.extend(s.x.iter().copied());
            count += 1;
        }
        Ok((
            Array2::from_shape_vec((count * self.n_buses, self.in_channels), rows).unwrap(),
            count,
        ))
    }

    /// Forward pass over a `(B*n) x C` batch. `rng` drives dropout masks in
    /// training mode and is ignored in evaluation mode.
    pub fn forward(&self, x: ArrayView2<f64>, mode: Mode, rng: Option<&mut SeedRng>) -> Result<ForwardCache> {
        let n = self.n_buses;
        if x.ncols() != self.in_channels || x.nrows() % n != 0 {
            return Err(Error::Shape(format!(
                "batch is {:?}, expected blocks of {n}x{}",
                x.dim(),
                self.in_channels
            )));
        }
        let batch = x.nrows() / n;
        let mut conv_cache = Vec::with_capacity(self.conv.len());
        let mut h = x.to_owned();
        for (i, layer) in self.conv.iter().enumerate() {
            let op = &self.graph.as_ref().unwrap().scaled_sparse;
            let (stack, pre) = layer.forward_batch(op, h.view())?;
            h = pre.mapv(|z| layer.activation.apply(z));
            check_finite(&h, i)?;
            conv_cache.push(ConvCache { stack, pre });
        }
        let width = h.len() / batch.max(1);
        let mut a = h.into_shape_with_order((batch, width)).unwrap();
        let mut dense_cache = Vec::with_capacity(self.dense.len());
        let mut rng = rng;
        for (i, layer) in self.dense.iter().enumerate() {
            let pre = a.dot(&layer.weights) + &layer.bias;
            let mut out = pre.mapv(|z| layer.activation.apply(z));
            let mask = if mode == Mode::Train && layer.dropout > 0.0 {
                let keep = 1.0 - layer.dropout;
                let r = rng
                    .as_deref_mut()
                    .ok_or_else(|| Error::Config("training-mode forward needs an rng for dropout".into()))?;
                let m = Array2::from_shape_fn(out.dim(), |_| if r.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
                out *= &m;
                Some(m)
            } else {
                None
            };
            check_finite(&out, self.conv.len() + i)?;
            dense_cache.push(DenseCache { input: a, pre, mask });
            a = out;
        }
        Ok(ForwardCache {
            batch,
            conv: conv_cache,
            dense: dense_cache,
            logits: a,
        })
    }

    /// Parameter gradients given the gradient of the logits.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f64>) -> Gradients {
        let mut dense_grads = Vec::with_capacity(2 * self.dense.len());
        let mut g = dlogits.clone();
        for (layer, c) in self.dense.iter().zip(&cache.dense).rev() {
            if let Some(m) = &c.mask {
                g *= m;
            }
            g.zip_mut_with(&c.pre, |gv, &z| *gv *= layer.activation.derivative(z));
            let dw = c.input.t().dot(&g);
            let db = g.sum_axis(Axis(0));
            dense_grads.push(db.to_vec());
            dense_grads.push(dw.into_raw_vec_and_offset().0);
            g = g.dot(&layer.weights.t());
        }
        dense_grads.reverse();
        let mut conv_grads = Vec::with_capacity(self.conv.len());
        if !self.conv.is_empty() {
            let op = &self.graph.as_ref().unwrap().scaled_sparse;
            let channels = self.conv.last().unwrap().n_out;
            let mut g = g
                .into_shape_with_order((cache.batch * self.n_buses, channels))
                .unwrap();
            for (layer, c) in self.conv.iter().zip(&cache.conv).rev() {
                g.zip_mut_with(&c.pre, |gv, &z| *gv *= layer.activation.derivative(z));
                let (dalpha, dx) = layer.backward_batch(op, &c.stack, &g);
                conv_grads.push(dalpha.as_standard_layout().iter().copied().collect::<Vec<f64>>());
                g = dx;
            }
            conv_grads.reverse();
        }
        conv_grads.extend(dense_grads);
        conv_grads
    }

    /// Mean softmax cross-entropy over the cached batch and its gradients.
    pub fn loss_and_backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<(f64, Gradients)> {
        let (loss, dlogits) = softmax_cross_entropy(&cache.logits, labels)?;
        Ok((loss, self.backward(cache, &dlogits)))
    }

    /// Evaluation-mode logits for a batch of samples.
    pub fn logits<'a, I>(&self, samples: I) -> Result<Array2<f64>>
    where
        I: IntoIterator<Item = &'a SampleMatrix>,
    {
        let (x, _) = self.batch_input(samples)?;
        Ok(self.forward(x.view(), Mode::Eval, None)?.logits)
    }

    /// Arg-max class per sample, evaluated in chunks.
    pub fn predict(&self, samples: &[SampleMatrix]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(256) {
            let logits = self.logits(chunk)?;
            out.extend(logits.rows().into_iter().map(|r| argmax(r.as_slice().unwrap())));
        }
        Ok(out)
    }

    /// Output of the last hidden dense layer in evaluation mode.
    pub fn hidden_features(&self, samples: &[SampleMatrix]) -> Result<Array2<f64>> {
        if self.dense.len() < 2 {
            return Err(Error::Config("model has no hidden dense layer".into()));
        }
        let width = self.dense[self.dense.len() - 2].fan_out();
        let mut out = Array2::zeros((samples.len(), width));
        for (c, chunk) in samples.chunks(256).enumerate() {
            let (x, _) = self.batch_input(chunk)?;
            let cache = self.forward(x.view(), Mode::Eval, None)?;
            let last = cache.dense.last().unwrap();
            out.slice_mut(s![c * 256..c * 256 + chunk.len(), ..]).assign(&last.input);
        }
        Ok(out)
    }
}

fn check_finite(a: &Array2<f64>, layer: usize) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("activation of layer {layer}")))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|z| (z - m).exp());
        let s = row.sum();
        row.mapv_inplace(|z| z / s);
    }
    p
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, c) = logits.dim();
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {b} samples", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Label { label, classes: c });
    }
    let mut loss = 0.0;
    for (row, &y) in logits.rows().into_iter().zip(labels) {
        let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        let lse = m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        loss += lse - row[y];
    }
    let mut grad = softmax(logits);
    for (mut row, &y) in grad.rows_mut().into_iter().zip(labels) {
        row[y] -= 1.0;
    }
    grad.mapv_inplace(|g| g / b as f64);
    Ok((loss / b as f64, grad))
}
