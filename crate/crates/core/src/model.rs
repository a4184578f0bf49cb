//! Forward computation: spectral graph convolution, view pooling, pairwise
//! matching, and the softmax head, plus the PCA / FCN / raw-edge baseline
//! architectures that reuse the same matching head.
//!
//! Everything here is a pure function of immutable parameters and cached
//! Chebyshev stacks, so pair evaluations can run concurrently. The two
//! siamese branches go through the same code path with shared parameters,
//! which makes pair symmetry bit-exact.

use crate::error::{Error, Result};
use crate::graph::ChebyshevStack;
use crate::numerics::{dot, sym_eig, DenseMatrix, SeededRng};

/// Relationship classes: match vs non-match.
pub const NUM_CLASSES: usize = 2;

/// Nonlinearity applied after the graph convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative evaluated at the pre-activation value.
    pub fn grad(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::invalid(format!(
                "unknown activation {other:?} (expected relu or identity)"
            ))),
        }
    }
}

/// How per-view feature matrices are fused into one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Mean,
}

impl PoolMode {
    pub fn name(self) -> &'static str {
        match self {
            PoolMode::Max => "max",
            PoolMode::Mean => "mean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(PoolMode::Max),
            "mean" => Ok(PoolMode::Mean),
            other => Err(Error::invalid(format!(
                "unknown pool mode {other:?} (expected max or mean)"
            ))),
        }
    }
}

/// Chebyshev filter coefficients theta[i, j, p] for input feature i,
/// output feature j, polynomial degree p. Stored as an
/// `(f_in * order) x f_out` matrix whose row `i * order + p` holds the
/// coefficients feeding output column j, matching the design-matrix
/// layout in [`ChebyshevStack`] so the convolution is a single matmul.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffTensor {
    f_in: usize,
    f_out: usize,
    order: usize,
    weights: DenseMatrix,
}

impl CoeffTensor {
    pub fn zeros(f_in: usize, f_out: usize, order: usize) -> Self {
        CoeffTensor {
            f_in,
            f_out,
            order,
            weights: DenseMatrix::zeros(f_in * order, f_out),
        }
    }

    /// Glorot-style uniform init over [-b, b] with
    /// b = sqrt(6 / (f_in * order + f_out)), drawn row-major.
    pub fn glorot(f_in: usize, f_out: usize, order: usize, rng: &mut SeededRng) -> Self {
        let bound = (6.0 / (f_in * order + f_out) as f64).sqrt();
        let mut t = CoeffTensor::zeros(f_in, f_out, order);
        for v in t.weights.data_mut() {
            *v = rng.uniform(-bound, bound);
        }
        t
    }

    pub fn f_in(&self) -> usize {
        self.f_in
    }

    pub fn f_out(&self) -> usize {
        self.f_out
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn get(&self, i: usize, j: usize, p: usize) -> f64 {
        self.weights.get(i * self.order + p, j)
    }

    pub fn set(&mut self, i: usize, j: usize, p: usize, v: f64) {
        self.weights.set(i * self.order + p, j, v);
    }

    /// The `(f_in * order) x f_out` backing matrix.
    pub fn weights(&self) -> &DenseMatrix {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut DenseMatrix {
        &mut self.weights
    }

    pub fn from_weights(f_in: usize, f_out: usize, order: usize, weights: DenseMatrix) -> Result<Self> {
        if weights.rows() != f_in * order || weights.cols() != f_out {
            return Err(Error::invalid(format!(
                "coefficient matrix must be {}x{}, got {}x{}",
                f_in * order,
                f_out,
                weights.rows(),
                weights.cols()
            )));
        }
        Ok(CoeffTensor {
            f_in,
            f_out,
            order,
            weights,
        })
    }
}

/// All trainable parameters of the matching model, shared across views
/// and both siamese branches.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub theta: CoeffTensor,
    /// `NUM_CLASSES x d_r` weights of the softmax head; d_r = n for the
    /// graph model.
    pub softmax_w: DenseMatrix,
    pub activation: Activation,
    pub pool_mode: PoolMode,
}

impl ModelParams {
    /// Glorot theta, zero softmax weights.
    pub fn init(
        f_in: usize,
        f_out: usize,
        order: usize,
        d_r: usize,
        activation: Activation,
        pool_mode: PoolMode,
        rng: &mut SeededRng,
    ) -> Self {
        ModelParams {
            theta: CoeffTensor::glorot(f_in, f_out, order, rng),
            softmax_w: DenseMatrix::zeros(NUM_CLASSES, d_r),
            activation,
            pool_mode,
        }
    }

    pub fn d_r(&self) -> usize {
        self.softmax_w.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.theta.weights().is_finite() && self.softmax_w.is_finite()
    }
}

/// Per-view convolution outputs and their fusion for one acquisition.
#[derive(Debug, Clone)]
pub struct ViewFeatures {
    /// Post-activation Y per view, each n x f_out.
    pub per_view: Vec<DenseMatrix>,
    /// Pre-activation values, kept for the backward mask.
    pub pre_activation: Vec<DenseMatrix>,
    pub pooled: DenseMatrix,
    /// Winning view per pooled element (row-major n x f_out), max mode only.
    pub argmax_view: Option<Vec<usize>>,
}

/// One branch's cached forward state for a pair evaluation.
#[derive(Debug, Clone)]
pub struct BranchCache {
    pub features: ViewFeatures,
    /// Row-normalized pooled matrix (zero rows pass through).
    pub pooled_hat: DenseMatrix,
    /// Row L2 norms before normalization; 0.0 marks a zero row.
    pub row_norms: Vec<f64>,
}

/// Full forward output for one acquisition pair, with every intermediate
/// the backward pass needs.
#[derive(Debug, Clone)]
pub struct PairOutput {
    pub r: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub branch_p: BranchCache,
    pub branch_q: BranchCache,
}

/// Applies the Chebyshev filter bank to one cached stack:
/// `Y[:, j] = sum_i sum_p theta[i, j, p] * basis[p][:, i]`, evaluated as
/// `design * weights`. Returns (post-activation, pre-activation).
pub fn graph_conv_forward(
    stack: &ChebyshevStack,
    theta: &CoeffTensor,
    activation: Activation,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if stack.f_in() != theta.f_in() || stack.order() != theta.order() {
        return Err(Error::invalid(format!(
            "stack is f_in={} order={} but coefficients are f_in={} order={}",
            stack.f_in(),
            stack.order(),
            theta.f_in(),
            theta.order()
        )));
    }
    let pre = stack.design().matmul(theta.weights());
    let mut post = pre.clone();
    if activation == Activation::Relu {
        for v in post.data_mut() {
            *v = v.max(0.0);
        }
    }
    Ok((post, pre))
}

/// Fuses per-view matrices element-wise. Max mode records the winning
/// view index per element, ties breaking toward the lowest index.
pub fn view_pool(views: &[DenseMatrix], mode: PoolMode) -> Result<(DenseMatrix, Option<Vec<usize>>)> {
    let m = views.len();
    if m == 0 {
        return Err(Error::invalid("view pooling needs at least one view"));
    }
    let (rows, cols) = (views[0].rows(), views[0].cols());
    for v in views {
        if v.rows() != rows || v.cols() != cols {
            return Err(Error::invalid("all views must have the same shape"));
        }
    }
    match mode {
        PoolMode::Max => {
            let mut pooled = views[0].clone();
            let mut argmax = vec![0usize; rows * cols];
            for (k, v) in views.iter().enumerate().skip(1) {
                for (idx, (dst, &src)) in pooled.data_mut().iter_mut().zip(v.data()).enumerate() {
                    if src > *dst {
                        *dst = src;
                        argmax[idx] = k;
                    }
                }
            }
            Ok((pooled, Some(argmax)))
        }
        PoolMode::Mean => {
            let mut pooled = views[0].clone();
            for v in views.iter().skip(1) {
                pooled.add_scaled(v, 1.0);
            }
            pooled.scale(1.0 / m as f64);
            Ok((pooled, None))
        }
    }
}

fn branch_forward(
    stacks: &[ChebyshevStack],
    params: &ModelParams,
) -> Result<BranchCache> {
    let mut per_view = Vec::with_capacity(stacks.len());
    let mut pre_activation = Vec::with_capacity(stacks.len());
    for stack in stacks {
        let (post, pre) = graph_conv_forward(stack, &params.theta, params.activation)?;
        per_view.push(post);
        pre_activation.push(pre);
    }
    let (pooled, argmax_view) = view_pool(&per_view, params.pool_mode)?;
    let mut pooled_hat = pooled.clone();
    let mut row_norms = vec![0.0; pooled.rows()];
    for i in 0..pooled.rows() {
        let norm = crate::numerics::l2_norm(pooled.row(i));
        if norm > 0.0 {
            row_norms[i] = norm;
            for v in pooled_hat.row_mut(i) {
                *v /= norm;
            }
        }
    }
    Ok(BranchCache {
        features: ViewFeatures {
            per_view,
            pre_activation,
            pooled,
            argmax_view,
        },
        pooled_hat,
        row_norms,
    })
}

/// Row-wise matching: both inputs row-L2-normalized (zero rows pass
/// through), then `r[i] = <zp_hat row i, zq_hat row i>`.
pub fn pairwise_match(zp: &DenseMatrix, zq: &DenseMatrix) -> Result<Vec<f64>> {
    if zp.rows() != zq.rows() || zp.cols() != zq.cols() {
        return Err(Error::invalid("matching inputs must have equal shapes"));
    }
    let zp_hat = crate::numerics::row_l2_normalize(zp);
    let zq_hat = crate::numerics::row_l2_normalize(zq);
    Ok((0..zp.rows())
        .map(|i| dot(zp_hat.row(i), zq_hat.row(i)))
        .collect())
}

/// Softmax with max-logit subtraction. Returns (probs, logits).
pub fn softmax_head(w: &DenseMatrix, r: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if w.cols() != r.len() {
        return Err(Error::invalid(format!(
            "softmax weights expect input length {}, got {}",
            w.cols(),
            r.len()
        )));
    }
    let logits: Vec<f64> = (0..w.rows()).map(|c| dot(w.row(c), r)).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&u| (u - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok((exps.iter().map(|&e| e / total).collect(), logits))
}

/// Full pair forward: per-view convolution, pooling, matching, softmax.
/// Swapping the branches permutes only the r factors, so probs are
/// bit-identical under argument swap.
pub fn mvgcn_forward(
    stacks_p: &[ChebyshevStack],
    stacks_q: &[ChebyshevStack],
    params: &ModelParams,
) -> Result<PairOutput> {
    if stacks_p.len() != stacks_q.len() {
        return Err(Error::invalid(format!(
            "branch view counts differ: {} vs {}",
            stacks_p.len(),
            stacks_q.len()
        )));
    }
    if stacks_p.is_empty() {
        return Err(Error::invalid("pair forward needs at least one view"));
    }
    let n = stacks_p[0].n();
    if stacks_q[0].n() != n {
        return Err(Error::invalid("branch vertex counts differ"));
    }
    if params.softmax_w.rows() != NUM_CLASSES || params.softmax_w.cols() != n {
        return Err(Error::invalid(format!(
            "softmax weights must be {NUM_CLASSES}x{n}, got {}x{}",
            params.softmax_w.rows(),
            params.softmax_w.cols()
        )));
    }
    let branch_p = branch_forward(stacks_p, params)?;
    let branch_q = branch_forward(stacks_q, params)?;
    let r: Vec<f64> = (0..n)
        .map(|i| dot(branch_p.pooled_hat.row(i), branch_q.pooled_hat.row(i)))
        .collect();
    let (probs, logits) = softmax_head(&params.softmax_w, &r)?;
    Ok(PairOutput {
        r,
        logits,
        probs,
        branch_p,
        branch_q,
    })
}

/// Mean-centered projection onto leading principal components.
#[derive(Debug, Clone)]
pub struct PcaTransform {
    mean: Vec<f64>,
    /// d x out_dim, one component per column, unit norm.
    components: DenseMatrix,
    /// Sample-covariance eigenvalue per component, descending.
    eigenvalues: Vec<f64>,
}

impl PcaTransform {
    pub fn out_dim(&self) -> usize {
        self.components.cols()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::invalid(format!(
                "pca expects input length {}, got {}",
                self.mean.len(),
                x.len()
            )));
        }
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(&v, &m)| v - m).collect();
        Ok((0..self.out_dim())
            .map(|j| (0..centered.len()).map(|i| centered[i] * self.components.get(i, j)).sum())
            .collect())
    }
}

/// Fits PCA on row-vectors of `data` (N x d). Uses the d x d sample
/// covariance when d <= N, otherwise the N x N Gram matrix (same nonzero
/// spectrum; components recovered as X_c^T u / sqrt((N-1) lambda)).
/// Null directions beyond the data rank project to constant zero.
pub fn pca_fit(data: &DenseMatrix, out_dim: usize) -> Result<PcaTransform> {
    let n = data.rows();
    let d = data.cols();
    if n < 2 {
        return Err(Error::invalid("pca needs at least 2 samples"));
    }
    if out_dim < 1 || out_dim > d.min(n) {
        return Err(Error::invalid(format!(
            "pca out_dim must be in [1, min(d={d}, N={n})], got {out_dim}"
        )));
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| (0..n).map(|i| data.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    let mut centered = data.clone();
    for i in 0..n {
        for j in 0..d {
            let v = centered.get(i, j) - mean[j];
            centered.set(i, j, v);
        }
    }
    let denom = (n - 1) as f64;
    let mut components = DenseMatrix::zeros(d, out_dim);
    let mut eigenvalues = Vec::with_capacity(out_dim);
    if d <= n {
        let mut cov = centered.matmul_at_b(&centered);
        cov.scale(1.0 / denom);
        let (vals, vecs) = sym_eig(&cov)?;
        // Ascending order; take the top out_dim from the back.
        for idx in 0..out_dim {
            let col = d - 1 - idx;
            eigenvalues.push(vals[col].max(0.0));
            for i in 0..d {
                components.set(i, idx, vecs.get(i, col));
            }
        }
    } else {
        let mut gram = centered.matmul(&centered.transpose());
        gram.scale(1.0 / denom);
        let (vals, vecs) = sym_eig(&gram)?;
        let val_max = vals.last().cloned().unwrap_or(0.0).max(0.0);
        for idx in 0..out_dim {
            let col = n - 1 - idx;
            let lambda = vals[col].max(0.0);
            if lambda <= 1e-12 * val_max.max(1.0) {
                // Rank exhausted: the remaining components span directions
                // with no data variance; leave them as zero vectors.
                eigenvalues.push(0.0);
                continue;
            }
            eigenvalues.push(lambda);
            // v = X_c^T u / sqrt((n-1) lambda) has unit norm.
            let scale = 1.0 / (denom * lambda).sqrt();
            for i in 0..d {
                let mut acc = 0.0;
                for row in 0..n {
                    acc += centered.get(row, i) * vecs.get(row, col);
                }
                components.set(i, idx, acc * scale);
            }
        }
    }
    Ok(PcaTransform {
        mean,
        components,
        eigenvalues,
    })
}

/// One dense layer: `out x in` weights plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        DenseLayer {
            weights: DenseMatrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn glorot(out_dim: usize, in_dim: usize, rng: &mut SeededRng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut layer = DenseLayer::zeros(out_dim, in_dim);
        for v in layer.weights.data_mut() {
            *v = rng.uniform(-bound, bound);
        }
        layer
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Stacked dense layers, ReLU after every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FcnParams {
    pub layers: Vec<DenseLayer>,
}

impl FcnParams {
    /// dims = [in, h1, ..., out]; needs at least one layer.
    pub fn glorot(dims: &[usize], rng: &mut SeededRng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("fcn needs at least input and output dims"));
        }
        Ok(FcnParams {
            layers: dims
                .windows(2)
                .map(|w| DenseLayer::glorot(w[1], w[0], rng))
                .collect(),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }
}

/// Per-layer forward state of one FCN application.
#[derive(Debug, Clone)]
pub struct FcnCache {
    /// Pre-activation vector per layer.
    pub pres: Vec<Vec<f64>>,
    /// Post-ReLU vector per layer; the last is the embedding.
    pub posts: Vec<Vec<f64>>,
}

impl FcnCache {
    pub fn output(&self) -> &[f64] {
        self.posts.last().unwrap()
    }
}

/// Dense affine + ReLU per layer.
pub fn fcn_forward(params: &FcnParams, x: &[f64]) -> Result<FcnCache> {
    if x.len() != params.in_dim() {
        return Err(Error::invalid(format!(
            "fcn expects input length {}, got {}",
            params.in_dim(),
            x.len()
        )));
    }
    let mut pres = Vec::with_capacity(params.layers.len());
    let mut posts: Vec<Vec<f64>> = Vec::with_capacity(params.layers.len());
    let mut current = x.to_vec();
    for layer in &params.layers {
        let mut pre = layer.weights.matvec(&current);
        for (v, b) in pre.iter_mut().zip(&layer.bias) {
            *v += b;
        }
        let post: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
        current = post.clone();
        pres.push(pre);
        posts.push(post);
    }
    Ok(FcnCache { pres, posts })
}

/// Parameters of a vector-feature baseline: an optional trainable FCN
/// feature extractor, an optional post-match dense layer, and the softmax
/// head. Raw-edge and PCA baselines leave `fcn` empty.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineParams {
    pub fcn: Option<FcnParams>,
    pub post_match: Option<DenseLayer>,
    pub softmax_w: DenseMatrix,
}

impl BaselineParams {
    pub fn is_finite(&self) -> bool {
        let fcn_ok = self.fcn.as_ref().map_or(true, |f| {
            f.layers
                .iter()
                .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
        });
        let post_ok = self.post_match.as_ref().map_or(true, |l| {
            l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite())
        });
        fcn_ok && post_ok && self.softmax_w.is_finite()
    }
}

/// One branch's cached state in a baseline pair forward.
#[derive(Debug, Clone)]
pub struct BaselineBranch {
    pub fcn: Option<FcnCache>,
    /// Feature embedding before normalization.
    pub embed: Vec<f64>,
    pub embed_hat: Vec<f64>,
    /// L2 norm of the embedding; 0.0 marks a zero vector.
    pub norm: f64,
}

/// Baseline pair forward output with backward caches.
#[derive(Debug, Clone)]
pub struct BaselineOutput {
    /// Element-wise product of the normalized embeddings.
    pub match_r: Vec<f64>,
    /// Post-match layer pre-activation, when that layer exists.
    pub post_pre: Option<Vec<f64>>,
    /// Input to the softmax head (match_r, or the post-match output).
    pub head_input: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub branch_p: BaselineBranch,
    pub branch_q: BaselineBranch,
}

fn baseline_branch(params: &BaselineParams, x: &[f64]) -> Result<BaselineBranch> {
    let (fcn, embed) = match &params.fcn {
        Some(f) => {
            let cache = fcn_forward(f, x)?;
            let embed = cache.output().to_vec();
            (Some(cache), embed)
        }
        None => (None, x.to_vec()),
    };
    let norm = crate::numerics::l2_norm(&embed);
    let embed_hat = if norm > 0.0 {
        embed.iter().map(|&v| v / norm).collect()
    } else {
        embed.clone()
    };
    Ok(BaselineBranch {
        fcn,
        embed,
        embed_hat,
        norm,
    })
}

/// Vector-feature pair forward: L2-normalize each embedding, element-wise
/// product, optional dense+ReLU layer, softmax.
pub fn baseline_forward(params: &BaselineParams, xp: &[f64], xq: &[f64]) -> Result<BaselineOutput> {
    if xp.len() != xq.len() {
        return Err(Error::invalid(format!(
            "baseline feature lengths differ: {} vs {}",
            xp.len(),
            xq.len()
        )));
    }
    let branch_p = baseline_branch(params, xp)?;
    let branch_q = baseline_branch(params, xq)?;
    let match_r: Vec<f64> = branch_p
        .embed_hat
        .iter()
        .zip(&branch_q.embed_hat)
        .map(|(&a, &b)| a * b)
        .collect();
    let (head_input, post_pre) = match &params.post_match {
        Some(layer) => {
            if layer.in_dim() != match_r.len() {
                return Err(Error::invalid(format!(
                    "post-match layer expects input length {}, got {}",
                    layer.in_dim(),
                    match_r.len()
                )));
            }
            let mut pre = layer.weights.matvec(&match_r);
            for (v, b) in pre.iter_mut().zip(&layer.bias) {
                *v += b;
            }
            let post: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
            (post, Some(pre))
        }
        None => (match_r.clone(), None),
    };
    let (probs, logits) = softmax_head(&params.softmax_w, &head_input)?;
    Ok(BaselineOutput {
        match_r,
        post_pre,
        head_input,
        logits,
        probs,
        branch_p,
        branch_q,
    })
}

/// Strict upper triangle (i < j) of a square matrix, row-major: the raw
/// edge-weight feature vector of one connectivity view.
pub fn upper_triangle_features(m: &DenseMatrix) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::invalid("edge features need a square matrix"));
    }
    let n = m.rows();
    let mut out = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(m.get(i, j));
        }
    }
    Ok(out)
}
