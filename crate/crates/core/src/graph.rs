//! Shared geometry graph over ROI coordinates and its spectral operators.
//!
//! All acquisitions share one graph: vertices are atlas ROIs, edges come
//! from a K-NN rule over ROI center coordinates with Gaussian weights.
//! The normalized Laplacian of that graph, rescaled to put its spectrum
//! in [-1, 1], drives every Chebyshev filter application. Because the
//! graph and each acquisition's input matrix are fixed during training,
//! the polynomial basis `T_p(L~) X` is computed once per acquisition per
//! view and cached; the convolution layer is then a plain linear map in
//! the coefficients.

use crate::error::{Error, Result};
use crate::numerics::{sym_eig, DenseMatrix};

/// Named ROIs with 3D center coordinates (mm). The vertex set shared by
/// every graph in a dataset.
#[derive(Debug, Clone)]
pub struct RoiAtlas {
    names: Vec<String>,
    coords: DenseMatrix,
}

impl RoiAtlas {
    pub fn new(names: Vec<String>, coords: DenseMatrix) -> Result<Self> {
        let n = names.len();
        if n < 2 {
            return Err(Error::invalid("atlas needs at least 2 ROIs"));
        }
        if coords.rows() != n || coords.cols() != 3 {
            return Err(Error::invalid(format!(
                "atlas coordinates must be {n}x3, got {}x{}",
                coords.rows(),
                coords.cols()
            )));
        }
        if !coords.is_finite() {
            return Err(Error::invalid("atlas coordinates must be finite"));
        }
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != n {
            return Err(Error::invalid("atlas ROI names must be unique"));
        }
        Ok(RoiAtlas { names, coords })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn coord(&self, i: usize) -> [f64; 3] {
        [
            self.coords.get(i, 0),
            self.coords.get(i, 1),
            self.coords.get(i, 2),
        ]
    }

    pub fn coords(&self) -> &DenseMatrix {
        &self.coords
    }

    /// Mean Euclidean distance over all ROI pairs.
    pub fn mean_pairwise_distance(&self) -> f64 {
        let n = self.len();
        let mut total = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                total += euclidean(self.coord(i), self.coord(j));
            }
        }
        total / (n * (n - 1) / 2) as f64
    }
}

/// How the Gaussian bandwidth is chosen when building the geometry graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaPolicy {
    Fixed(f64),
    /// Bandwidth set to the mean pairwise ROI distance (self-tuning default).
    MeanDistance,
}

/// The population-shared K-NN graph: symmetric Gaussian-weighted adjacency
/// with zero diagonal.
#[derive(Debug, Clone)]
pub struct BrainGeometryGraph {
    adjacency: DenseMatrix,
    knn_k: usize,
    sigma: f64,
}

impl BrainGeometryGraph {
    pub fn adjacency(&self) -> &DenseMatrix {
        &self.adjacency
    }

    pub fn knn_k(&self) -> usize {
        self.knn_k
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn n(&self) -> usize {
        self.adjacency.rows()
    }

    /// Number of undirected edges (nonzero entries above the diagonal).
    pub fn edge_count(&self) -> usize {
        let n = self.n();
        let mut count = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                if self.adjacency.get(i, j) != 0.0 {
                    count += 1;
                }
            }
        }
        count
    }
}

fn euclidean(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Gaussian similarity `exp(-||vi - vj||^2 / (2 sigma^2))` of two points.
pub fn gaussian_similarity(vi: [f64; 3], vj: [f64; 3], sigma: f64) -> Result<f64> {
    if sigma <= 0.0 {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let d = euclidean(vi, vj);
    Ok((-d * d / (2.0 * sigma * sigma)).exp())
}

/// Builds the shared geometry graph: connect i and j when i is among j's
/// k nearest neighbors or vice versa, weighting edges by the Gaussian
/// similarity of their coordinates.
///
/// Neighbor ties at rank k break toward the smaller vertex index, so the
/// graph is deterministic and stable under atlas order. Duplicate
/// coordinates are allowed (distance 0 gives weight 1).
pub fn build_bgg(atlas: &RoiAtlas, k: usize, sigma_policy: SigmaPolicy) -> Result<BrainGeometryGraph> {
    let n = atlas.len();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!(
            "knn k must satisfy 1 <= k < n, got k={k} with n={n}"
        )));
    }
    let sigma = match sigma_policy {
        SigmaPolicy::Fixed(s) => s,
        SigmaPolicy::MeanDistance => atlas.mean_pairwise_distance(),
    };
    if sigma <= 0.0 {
        return Err(Error::invalid(format!(
            "resolved sigma must be positive, got {sigma} (all ROI coordinates coincide?)"
        )));
    }

    // neighbor[i] = the k nearest other vertices, ties by smaller index.
    let mut neighbor_sets: Vec<Vec<usize>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut cand: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (euclidean(atlas.coord(i), atlas.coord(j)), j))
            .collect();
        cand.sort_by(|a, b| a.partial_cmp(b).unwrap());
        neighbor_sets.push(cand[..k].iter().map(|&(_, j)| j).collect());
    }

    let mut adjacency = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let connected = neighbor_sets[i].contains(&j) || neighbor_sets[j].contains(&i);
            if connected {
                let w = gaussian_similarity(atlas.coord(i), atlas.coord(j), sigma)?;
                adjacency.set(i, j, w);
                adjacency.set(j, i, w);
            }
        }
    }

    Ok(BrainGeometryGraph {
        adjacency,
        knn_k: k,
        sigma,
    })
}

/// Normalized graph Laplacian `L = I - D^{-1/2} A D^{-1/2}`.
///
/// Isolated vertices (zero degree) use the pseudo-inverse convention
/// `D^{-1/2} = 0`, which leaves `L_ii = 1` on the diagonal.
pub fn normalized_laplacian(adjacency: &DenseMatrix) -> Result<DenseMatrix> {
    if !adjacency.is_square() {
        return Err(Error::invalid("adjacency must be square"));
    }
    let n = adjacency.rows();
    let scale = adjacency.max_abs().max(1.0);
    if adjacency.symmetry_error() > 1e-10 * scale {
        return Err(Error::invalid("adjacency must be symmetric"));
    }
    for i in 0..n {
        if adjacency.get(i, i) != 0.0 {
            return Err(Error::invalid("adjacency diagonal must be zero"));
        }
        for j in 0..n {
            if adjacency.get(i, j) < 0.0 {
                return Err(Error::invalid("adjacency entries must be nonnegative"));
            }
        }
    }

    let inv_sqrt_degree: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = adjacency.row(i).iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();

    let mut lap = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let off = -inv_sqrt_degree[i] * adjacency.get(i, j) * inv_sqrt_degree[j];
            lap.set(i, j, if i == j { 1.0 + off } else { off });
        }
    }
    // Exact symmetry despite rounding in the products.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (lap.get(i, j) + lap.get(j, i));
            lap.set(i, j, v);
            lap.set(j, i, v);
        }
    }
    Ok(lap)
}

/// The Laplacian pair used by every filter application: `L` and its
/// rescaling `L~ = (2/lambda_max) L - I` whose spectrum lies in [-1, 1].
#[derive(Debug, Clone)]
pub struct SpectralOperator {
    laplacian: DenseMatrix,
    scaled_laplacian: DenseMatrix,
    lambda_max: f64,
}

impl SpectralOperator {
    pub fn laplacian(&self) -> &DenseMatrix {
        &self.laplacian
    }

    pub fn scaled_laplacian(&self) -> &DenseMatrix {
        &self.scaled_laplacian
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn n(&self) -> usize {
        self.laplacian.rows()
    }
}

/// Builds the spectral operator for a geometry graph. `lambda_max` comes
/// from the full eigendecomposition (n is small), not the common
/// `lambda_max ~ 2` shortcut.
pub fn build_spectral_operator(bgg: &BrainGeometryGraph) -> Result<SpectralOperator> {
    spectral_operator_from_adjacency(bgg.adjacency())
}

/// Same as [`build_spectral_operator`] but starting from a raw adjacency.
pub fn spectral_operator_from_adjacency(adjacency: &DenseMatrix) -> Result<SpectralOperator> {
    let laplacian = normalized_laplacian(adjacency)?;
    let (values, _) = sym_eig(&laplacian)?;
    let lambda_max = *values.last().expect("laplacian has at least one eigenvalue");
    if lambda_max < 1e-12 {
        return Err(Error::DegenerateGraph(
            "graph has no edges: largest Laplacian eigenvalue is zero".to_string(),
        ));
    }
    let mut scaled = laplacian.clone();
    scaled.scale(2.0 / lambda_max);
    for i in 0..scaled.rows() {
        let v = scaled.get(i, i) - 1.0;
        scaled.set(i, i, v);
    }
    Ok(SpectralOperator {
        laplacian,
        scaled_laplacian: scaled,
        lambda_max,
    })
}

/// The cached Chebyshev polynomial basis for one input signal matrix:
/// `basis[p] = T_p(L~) X`, plus the same data flattened to an
/// `n x (f_in * order)` design matrix so the convolution is one matmul.
///
/// Column `i * order + p` of the design matrix is `basis[p][:, i]`.
#[derive(Debug, Clone)]
pub struct ChebyshevStack {
    order: usize,
    f_in: usize,
    basis: Vec<DenseMatrix>,
    design: DenseMatrix,
}

impl ChebyshevStack {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn f_in(&self) -> usize {
        self.f_in
    }

    pub fn n(&self) -> usize {
        self.design.rows()
    }

    pub fn basis(&self) -> &[DenseMatrix] {
        &self.basis
    }

    /// `n x (f_in * order)` flattened basis.
    pub fn design(&self) -> &DenseMatrix {
        &self.design
    }
}

/// Evaluates the Chebyshev basis by the three-term recurrence
/// `basis[p] = 2 L~ basis[p-1] - basis[p-2]`, seeded with `basis[0] = X`
/// and `basis[1] = L~ X`.
pub fn chebyshev_apply(op: &SpectralOperator, x: &DenseMatrix, s: usize) -> Result<ChebyshevStack> {
    if s < 1 {
        return Err(Error::invalid("chebyshev order must be at least 1"));
    }
    if x.rows() != op.n() {
        return Err(Error::invalid(format!(
            "signal has {} rows but the graph has {} vertices",
            x.rows(),
            op.n()
        )));
    }
    let n = x.rows();
    let f_in = x.cols();
    let mut basis: Vec<DenseMatrix> = Vec::with_capacity(s);
    basis.push(x.clone());
    if s >= 2 {
        basis.push(op.scaled_laplacian().matmul(x));
    }
    for p in 2..s {
        let mut next = op.scaled_laplacian().matmul(&basis[p - 1]);
        next.scale(2.0);
        next.add_scaled(&basis[p - 2], -1.0);
        basis.push(next);
    }

    let mut design = DenseMatrix::zeros(n, f_in * s);
    for (p, b) in basis.iter().enumerate() {
        for r in 0..n {
            for i in 0..f_in {
                design.set(r, i * s + p, b.get(r, i));
            }
        }
    }

    Ok(ChebyshevStack {
        order: s,
        f_in,
        basis,
        design,
    })
}
