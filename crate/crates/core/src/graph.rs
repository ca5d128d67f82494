//! Distance-based graph construction and Laplacian operators.
//!
//! The weighted adjacency follows the Kn-nearest recipe: sort each row of the
//! shortest-path distance matrix, keep the Kn smallest entries (the zero
//! self-distance included), set the kernel width to the mean of the Kn-th kept
//! values, apply a Gaussian kernel, restore the kept entries to their n x n
//! positions, clear the diagonal and symmetrize by elementwise maximum.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::feeder::FeederModel;
use crate::seed;

/// Shortest-path length between every pair of buses.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix(Array2<f64>);

impl DistanceMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let n = values.nrows();
        if values.ncols() != n {
            return Err(Error::Shape(format!("distance matrix is {}x{}", n, values.ncols())));
        }
        for i in 0..n {
            if values[[i, i]] != 0.0 {
                return Err(Error::Graph(format!("nonzero self distance at {i}")));
            }
            for j in 0..n {
                let d = values[[i, j]];
                if !(d >= 0.0) || d != values[[j, i]] {
                    return Err(Error::Graph(format!(
                        "distance ({i}, {j}) must be nonnegative and symmetric"
                    )));
                }
            }
        }
        Ok(DistanceMatrix(values))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }
}

/// All-pairs shortest path lengths over closed branches. Switches and
/// regulators count as zero length.
pub fn shortest_path_distances(model: &FeederModel) -> Result<DistanceMatrix> {
    let n = model.n_buses();
    let adj = model.adjacency(|b| b.is_closed());
    let mut s = Array2::from_elem((n, n), f64::INFINITY);
    let mut done = vec![false; n];
    for src in 0..n {
        done.iter_mut().for_each(|d| *d = false);
        let mut dist = vec![f64::INFINITY; n];
        dist[src] = 0.0;
        // dense Dijkstra, n is at most a few hundred
        for _ in 0..n {
            let Some(u) = (0..n)
                .filter(|&i| !done[i] && dist[i].is_finite())
                .min_by(|&a, &b| dist[a].total_cmp(&dist[b]))
            else {
                break;
            };
            done[u] = true;
            for &(v, k) in &adj[u] {
                let cand = dist[u] + model.branches()[k].distance_length();
                if cand < dist[v] {
                    dist[v] = cand;
                }
            }
        }
        if let Some(i) = dist.iter().position(|d| !d.is_finite()) {
            return Err(Error::Disconnected(format!(
                "no path between buses {} and {}",
                model.buses()[src].id,
                model.buses()[i].id
            )));
        }
        for (j, d) in dist.into_iter().enumerate() {
            s[[src, j]] = d;
        }
    }
    // exact symmetry regardless of summation order
    for i in 0..n {
        for j in 0..i {
            let d = s[[i, j]].min(s[[j, i]]);
            s[[i, j]] = d;
            s[[j, i]] = d;
        }
    }
    DistanceMatrix::new(s)
}

/// Kn-nearest Gaussian adjacency. Returns `(W, sigma_s)`.
pub fn build_weighted_adjacency(s: &DistanceMatrix, kn: usize) -> Result<(Array2<f64>, f64)> {
    let n = s.n();
    if kn == 0 || kn >= n {
        return Err(Error::Graph(format!("Kn = {kn} must be in 1..{n}")));
    }
    let d = s.values();
    let kept: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            let mut order: Vec<usize> = (0..n).collect();
            // ties broken by index; self sorts first among zero distances
            order.sort_by(|&a, &b| {
                d[[i, a]]
                    .total_cmp(&d[[i, b]])
                    .then_with(|| (a != i).cmp(&(b != i)))
                    .then(a.cmp(&b))
            });
            order.truncate(kn);
            order
        })
        .collect();
    let sigma = kept.iter().enumerate().map(|(i, row)| d[[i, row[kn - 1]]]).sum::<f64>() / n as f64;
    if !(sigma > 0.0) {
        return Err(Error::Graph(format!(
            "kernel width is zero for Kn = {kn}; increase Kn"
        )));
    }
    let mut w = Array2::zeros((n, n));
    for (i, row) in kept.iter().enumerate() {
        for &j in row {
            if j != i {
                let x = d[[i, j]];
                w[[i, j]] = (-(x * x) / (sigma * sigma)).exp();
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            let m = w[[i, j]].max(w[[j, i]]);
            w[[i, j]] = m;
            w[[j, i]] = m;
        }
    }
    Ok((w, sigma))
}

/// Degrees and the normalized Laplacian `I - D^-1/2 W D^-1/2`.
pub fn normalized_laplacian(w: &Array2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
    let n = w.nrows();
    if w.ncols() != n {
        return Err(Error::Shape(format!("adjacency is {}x{}", n, w.ncols())));
    }
    let degrees: Vec<f64> = w.rows().into_iter().map(|r| r.sum()).collect();
    if let Some(i) = degrees.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::Graph(format!("vertex {i} is isolated")));
    }
    let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut lap = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let off = w[[i, j]] * inv_sqrt[i] * inv_sqrt[j];
            lap[[i, j]] = if i == j { 1.0 - off } else { -off };
        }
    }
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (lap[[i, j]] + lap[[j, i]]);
            lap[[i, j]] = m;
            lap[[j, i]] = m;
        }
    }
    Ok((degrees, lap))
}

pub const POWER_ITERATION_TOL: f64 = 1e-6;
pub const POWER_ITERATION_MAX: usize = 1000;

/// Largest eigenvalue of a symmetric PSD matrix by power iteration, or
/// `None` if the estimate does not settle within the iteration budget.
///
/// Stops once the residual `|Av - rho v|` of the unit iterate is within
/// `POWER_ITERATION_TOL * rho`, which puts `rho` that close to an eigenvalue.
pub fn power_iteration_lambda_max(a: &Array2<f64>) -> Option<f64> {
    let n = a.nrows();
    let mut rng = seed::rng(0x5eed_1a4b);
    // Mixed signs: the top eigenvector of a Laplacian alternates in sign and
    // is nearly orthogonal to a positive start.
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut v);
    let mut av = vec![0.0; n];
    for _ in 0..POWER_ITERATION_MAX {
        for i in 0..n {
            av[i] = (0..n).map(|j| a[[i, j]] * v[j]).sum();
        }
        let rho: f64 = av.iter().zip(&v).map(|(x, y)| x * y).sum();
        let norm = av.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return None;
        }
        let residual = av.iter().zip(&v).map(|(x, y)| (x - rho * y).powi(2)).sum::<f64>().sqrt();
        if residual <= POWER_ITERATION_TOL * rho.abs() {
            return Some(rho);
        }
        v.iter_mut().zip(&av).for_each(|(x, y)| *x = y / norm);
    }
    None
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
}

/// `(lambda_max, 2 L / lambda_max - I)`, falling back to `lambda_max = 2`
/// (the normalized-Laplacian bound) when power iteration does not converge.
pub fn scale_laplacian(lap: &Array2<f64>) -> (f64, Array2<f64>) {
    let lambda_max = power_iteration_lambda_max(lap)
        .filter(|l| l.is_finite() && *l > 0.0)
        .unwrap_or(2.0);
    let n = lap.nrows();
    let mut scaled = lap * (2.0 / lambda_max);
    for i in 0..n {
        scaled[[i, i]] -= 1.0;
    }
    (lambda_max, scaled)
}

/// Unweighted BFS hop counts between classes (merged-bus groups) over closed
/// branches. Entry `[a, b]` is the hop distance between classes `a` and `b`.
pub fn class_hop_distances(model: &FeederModel) -> Array2<usize> {
    let labels = model.merged_label_map();
    let c = labels.num_classes();
    let mut adj = vec![Vec::new(); c];
    for br in model.branches().iter().filter(|b| b.is_closed()) {
        let a = labels.class_of(model.bus_index(&br.from).unwrap());
        let b = labels.class_of(model.bus_index(&br.to).unwrap());
        if a != b {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    let mut hops = Array2::from_elem((c, c), usize::MAX);
    for s in 0..c {
        hops[[s, s]] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if hops[[s, v]] == usize::MAX {
                    hops[[s, v]] = hops[[s, u]] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    hops
}

/// Bus-level hop distances; merged buses are hop 0 from each other.
pub fn hop_distances(model: &FeederModel) -> Array2<usize> {
    let labels = model.merged_label_map();
    let class_hops = class_hop_distances(model);
    let n = model.n_buses();
    Array2::from_shape_fn((n, n), |(i, j)| {
        class_hops[[labels.class_of(i), labels.class_of(j)]]
    })
}

/// Hop distances in the connectivity of a weighted adjacency (nonzero entries).
pub fn adjacency_hops(w: &Array2<f64>) -> Array2<usize> {
    let n = w.nrows();
    let mut hops = Array2::from_elem((n, n), usize::MAX);
    for s in 0..n {
        hops[[s, s]] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                if v != u && w[[u, v]] != 0.0 && hops[[s, v]] == usize::MAX {
                    hops[[s, v]] = hops[[s, u]] + 1;
                    queue.push_back(v);
                }
            }
        }
    }
    hops
}

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Keeps entries that are not exactly zero.
    pub fn from_dense(a: &Array2<f64>) -> Self {
        let (n_rows, n_cols) = a.dim();
        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for i in 0..n_rows {
            for j in 0..n_cols {
                let v = a[[i, j]];
                if v != 0.0 {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        SparseMatrix {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.n_rows, self.n_cols));
        for (i, j, v) in self.triplets() {
            a[[i, j]] = v;
        }
        a
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (i, self.col_idx[k], self.values[k]))
        })
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        assert_eq!(x.len(), self.n_cols);
        assert_eq!(out.len(), self.n_rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o = (self.row_ptr[i]..self.row_ptr[i + 1])
                .map(|k| self.values[k] * x[self.col_idx[k]])
                .sum();
        }
    }

    /// `out = A x` for a dense `n_cols x m` block `x`.
    pub fn apply_block(&self, x: ArrayView2<f64>, mut out: ArrayViewMut2<f64>) {
        assert_eq!(x.nrows(), self.n_cols);
        assert_eq!(out.nrows(), self.n_rows);
        assert_eq!(x.ncols(), out.ncols());
        out.fill(0.0);
        for i in 0..self.n_rows {
            let mut row = out.row_mut(i);
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                row.scaled_add(self.values[k], &x.row(self.col_idx[k]));
            }
        }
    }
}

/// Everything the graph convolution needs from a feeder.
#[derive(Clone, Debug)]
pub struct GraphOperator {
    pub weights: Array2<f64>,
    pub degrees: Vec<f64>,
    pub laplacian: Array2<f64>,
    pub lambda_max: f64,
    pub scaled: Array2<f64>,
    pub scaled_sparse: SparseMatrix,
    pub kn: usize,
    pub sigma: f64,
}

impl GraphOperator {
    pub fn from_feeder(model: &FeederModel, kn: usize) -> Result<Self> {
        let s = shortest_path_distances(model)?;
        Self::from_distances(&s, kn)
    }

    pub fn from_distances(s: &DistanceMatrix, kn: usize) -> Result<Self> {
        let (w, sigma) = build_weighted_adjacency(s, kn)?;
        Self::from_adjacency(w, kn, sigma)
    }

    pub fn from_adjacency(weights: Array2<f64>, kn: usize, sigma: f64) -> Result<Self> {
        let (degrees, laplacian) = normalized_laplacian(&weights)?;
        let (lambda_max, scaled) = scale_laplacian(&laplacian);
        Ok(Self::assemble(weights, degrees, laplacian, lambda_max, scaled, kn, sigma))
    }

    /// Rebuilds an operator from a stored scaled Laplacian (checkpoints only
    /// carry the scaled operator).
    pub fn from_scaled(scaled: Array2<f64>, kn: usize) -> Self {
        let n = scaled.nrows();
        let mut lap = scaled.clone();
        for i in 0..n {
            lap[[i, i]] += 1.0;
        }
        Self::assemble(Array2::zeros((n, n)), vec![0.0; n], lap, 2.0, scaled, kn, 0.0)
    }

    fn assemble(
        weights: Array2<f64>,
        degrees: Vec<f64>,
        laplacian: Array2<f64>,
        lambda_max: f64,
        scaled: Array2<f64>,
        kn: usize,
        sigma: f64,
    ) -> Self {
        let scaled_sparse = SparseMatrix::from_dense(&scaled);
        GraphOperator {
            weights,
            degrees,
            laplacian,
            lambda_max,
            scaled,
            scaled_sparse,
            kn,
            sigma,
        }
    }

    pub fn n(&self) -> usize {
        self.scaled.nrows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use ndarray::array;

    fn path_abc() -> FeederModel {
        crate::feeder::parse_feeder(
            "source a z=0.01+0.1j 0+0j 0+0j 0+0j 0.01+0.1j 0+0j 0+0j 0+0j 0.01+0.1j
bus a
bus b
bus c
branch ab a b phases=1 len=1 z=0.1+0.1j
branch bc b c phases=1 len=2 z=0.1+0.1j
",
        )
        .unwrap()
    }

    #[test]
    fn path_distances() {
        let s = shortest_path_distances(&path_abc()).unwrap();
        assert_eq!(s.values()[[0, 2]], 3.0);
        assert_eq!(s.values()[[2, 0]], 3.0);
        assert_eq!(s.values()[[1, 1]], 0.0);
    }

    #[test]
    fn single_bus_distance() {
        let m = crate::feeder::parse_feeder(
            "source a z=0.01+0.1j 0+0j 0+0j 0+0j 0.01+0.1j 0+0j 0+0j 0+0j 0.01+0.1j\nbus a\n",
        )
        .unwrap();
        let s = shortest_path_distances(&m).unwrap();
        assert_eq!(s.values(), &array![[0.0]]);
    }

    #[test]
    fn adjacency_hand_evaluation() {
        // row 0 is [0, 1, 2, 9]; Kn = 2 keeps {0, 1} in row 0
        let s = DistanceMatrix::new(array![
            [0.0, 1.0, 2.0, 9.0],
            [1.0, 0.0, 1.5, 8.0],
            [2.0, 1.5, 0.0, 7.0],
            [9.0, 8.0, 7.0, 0.0],
        ])
        .unwrap();
        let (w, sigma) = build_weighted_adjacency(&s, 2).unwrap();
        // second-smallest per row: 1, 1, 1.5, 7
        let expected_sigma = (1.0 + 1.0 + 1.5 + 7.0) / 4.0;
        assert!((sigma - expected_sigma).abs() < 1e-15);
        let e = |x: f64| (-(x * x) / (expected_sigma * expected_sigma)).exp();
        assert_eq!(w[[0, 0]], 0.0);
        assert!((w[[0, 1]] - e(1.0)).abs() < 1e-15);
        assert_eq!(w[[0, 2]], 0.0);
        assert_eq!(w[[0, 3]], 0.0);
        // row 3 keeps 2 (distance 7); symmetrized into row 2
        assert!((w[[2, 3]] - e(7.0)).abs() < 1e-15);
        assert_eq!(w[[2, 3]], w[[3, 2]]);
        // row 2 keeps 1 (distance 1.5)
        assert!((w[[1, 2]] - e(1.5)).abs() < 1e-15);
    }

    #[test]
    fn equal_distances_give_equal_weights() {
        let n = 5;
        let s = DistanceMatrix::new(Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { 2.0 }))
            .unwrap();
        let (w, _) = build_weighted_adjacency(&s, n - 1).unwrap();
        let kept: Vec<f64> = w.iter().copied().filter(|&x| x != 0.0).collect();
        assert!(kept.iter().all(|&x| x == kept[0]));
        // Kn = n - 1 with the self-distance kept: each row retains n - 2 neighbors
        // before symmetrization, so every row ends up with at least n - 2 nonzeros.
        for i in 0..n {
            assert_eq!(w[[i, i]], 0.0);
            assert!(w.row(i).iter().filter(|&&x| x != 0.0).count() >= n - 2);
        }
    }

    #[test]
    fn kn_validation() {
        let s = shortest_path_distances(&path_abc()).unwrap();
        assert!(build_weighted_adjacency(&s, 3).is_err());
        assert!(build_weighted_adjacency(&s, 0).is_err());
        assert!(build_weighted_adjacency(&s, 1).is_err());
    }

    #[test]
    fn two_node_laplacian() {
        let (d, lap) = normalized_laplacian(&array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        assert_eq!(d, vec![1.0, 1.0]);
        assert_eq!(lap, array![[1.0, -1.0], [-1.0, 1.0]]);
        let (lmax, scaled) = scale_laplacian(&lap);
        assert!((lmax - 2.0).abs() < 1e-6);
        assert!((&scaled - &array![[0.0, -1.0], [-1.0, 0.0]]).iter().all(|x| x.abs() < 1e-6));
    }

    #[test]
    fn regular_graph_laplacian() {
        // 4-cycle, 2-regular
        let a = array![
            [0.0, 1.0, 0.0, 1.0],
            [1.0, 0.0, 1.0, 0.0],
            [0.0, 1.0, 0.0, 1.0],
            [1.0, 0.0, 1.0, 0.0],
        ];
        let (_, lap) = normalized_laplacian(&a).unwrap();
        let expected = Array2::<f64>::eye(4) - &a / 2.0;
        assert!((&lap - &expected).iter().all(|x| x.abs() < 1e-15));
    }

    #[test]
    fn isolated_vertex_rejected() {
        assert!(normalized_laplacian(&array![[0.0, 0.0], [0.0, 0.0]]).is_err());
    }

    #[test]
    fn identity_laplacian_scales_to_identity() {
        let (lmax, scaled) = scale_laplacian(&Array2::eye(3));
        assert!((lmax - 1.0).abs() < 1e-12);
        assert!((&scaled - &Array2::<f64>::eye(3)).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn power_iteration_finds_top_of_split_spectrum() {
        // two disjoint edges: eigenvalues 0, 0, 2, 2
        let a = array![
            [0.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 1.0, 0.0],
        ];
        let (_, lap) = normalized_laplacian(&a).unwrap();
        let l = power_iteration_lambda_max(&lap).unwrap();
        assert!((l - 2.0).abs() <= 2.0 * POWER_ITERATION_TOL);
    }

    #[test]
    fn power_iteration_against_dense_eigensolve() {
        let mut rng = seed::rng(17);
        for _ in 0..200 {
            let n = rng.random_range(3..25);
            let w = crate::eval::checks::random_connected_adjacency(n, &mut rng);
            let (_, lap) = normalized_laplacian(&w).unwrap();
            let top = *crate::oracle::eigendecompose(&lap).unwrap().values.last().unwrap();
            let (l, _) = scale_laplacian(&lap);
            assert!(l == 2.0 || (top - l).abs() <= POWER_ITERATION_TOL * top, "{l} vs {top}");
        }
    }

    #[test]
    fn hops_on_fixture() {
        let m = fixtures::feeder25();
        let hops = hop_distances(&m);
        let i = |id: &str| m.bus_index(id).unwrap();
        assert_eq!(hops[[i("2"), i("3")]], 1);
        // regulator and NC switch merge
        assert_eq!(hops[[i("1"), i("2")]], 0);
        assert_eq!(hops[[i("4"), i("9")]], 0);
        assert_eq!(hops[[i("3"), i("10")]], 2);
        let c = class_hop_distances(&m);
        assert_eq!(c.nrows(), 23);
    }

    #[test]
    fn sparse_matches_dense() {
        let a = array![[1.0, 0.0, 2.0], [0.0, 0.0, 0.0], [3.0, 4.0, 0.0]];
        let sp = SparseMatrix::from_dense(&a);
        assert_eq!(sp.nnz(), 4);
        assert_eq!(sp.to_dense(), a);
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        let mut out = Array2::zeros((3, 2));
        sp.apply_block(x.view(), out.view_mut());
        assert_eq!(out, a.dot(&x));
        let mut y = vec![0.0; 3];
        sp.matvec(&[1.0, 1.0, 1.0], &mut y);
        assert_eq!(y, vec![3.0, 0.0, 7.0]);
    }
}
