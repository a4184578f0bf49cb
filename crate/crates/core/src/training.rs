//! Pair construction, stratified folds, Adam, and cross-validated training.
//!
//! Every source of randomness is an explicit seed: fold assignment, parameter
//! init, and epoch shuffling each get their own derived stream, so reruns of
//! the same configuration are bit-identical regardless of worker count.

use crate::autodiff::{
    baseline_backward, cross_entropy, mvgcn_backward, BaselineGradients, Gradients,
};
use crate::dataio::{Dataset, SavedModel};
use crate::error::{Error, Result};
use crate::eval::{auc, cluster_acquisitions, similarity_matrix, ScoredPair, KMEANS_RESTARTS};
use crate::graph::{build_bgg, build_spectral_operator, chebyshev_apply, ChebyshevStack, SigmaPolicy};
use crate::model::{
    baseline_forward, mvgcn_forward, pca_fit, upper_triangle_features, Activation, BaselineParams,
    DenseLayer, FcnParams, ModelParams, PoolMode, NUM_CLASSES,
};
use crate::numerics::{DenseMatrix, SeededRng};
use rayon::prelude::*;

/// One training example: two acquisition indices and whether they share a class.
/// `idx_p < idx_q` always holds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSample {
    pub idx_p: usize,
    pub idx_q: usize,
    /// 1 when both acquisitions have the same class, else 0.
    pub label: usize,
}

impl PairSample {
    pub fn new(a: usize, b: usize, matching: bool) -> Result<Self> {
        if a == b {
            return Err(Error::invalid(format!("pair needs two distinct acquisitions, got {a} twice")));
        }
        Ok(PairSample {
            idx_p: a.min(b),
            idx_q: a.max(b),
            label: usize::from(matching),
        })
    }
}

/// All unordered pairs within `subset`, labeled by class agreement.
/// For a subset of size n with class counts k_c this yields n(n-1)/2 pairs,
/// of which sum over c of k_c(k_c-1)/2 are matching.
pub fn generate_pairs(labels: &[usize], subset: &[usize]) -> Result<Vec<PairSample>> {
    let mut idx: Vec<usize> = subset.to_vec();
    idx.sort_unstable();
    for w in idx.windows(2) {
        if w[0] == w[1] {
            return Err(Error::invalid(format!("acquisition {} listed twice", w[0])));
        }
    }
    if let Some(&last) = idx.last() {
        if last >= labels.len() {
            return Err(Error::invalid(format!(
                "acquisition index {last} out of range for {} labels",
                labels.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(idx.len().saturating_sub(1) * idx.len() / 2);
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            let (i, j) = (idx[a], idx[b]);
            out.push(PairSample {
                idx_p: i,
                idx_q: j,
                label: usize::from(labels[i] == labels[j]),
            });
        }
    }
    Ok(out)
}

/// Stratified k-fold assignment: each class is shuffled once, then dealt
/// round-robin starting at fold 0. Every class must have at least k members.
/// Folds come back with their indices sorted ascending.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::invalid("fold count must be at least 1"));
    }
    if labels.is_empty() {
        return Err(Error::invalid("no acquisitions to fold"));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let mut rng = SeededRng::new(seed);
    let mut folds = vec![Vec::new(); k];
    for &class in &classes {
        let mut members: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if members.len() < k {
            return Err(Error::invalid(format!(
                "class {class} has {} acquisitions, fewer than {k} folds",
                members.len()
            )));
        }
        rng.shuffle(&mut members);
        for (pos, idx) in members.into_iter().enumerate() {
            folds[pos % k].push(idx);
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
/// Smallest epsilon the optimizer accepts; zero would divide by zero.
pub const ADAM_EPSILON_FLOOR: f64 = 1e-15;

/// Adam hyperparameters. Construction clamps epsilon to the floor.
#[derive(Debug, Clone)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamHyper {
    pub fn new(lr: f64) -> Result<Self> {
        Self::with(lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON)
    }

    pub fn with(lr: f64, beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::invalid(format!("learning rate {lr} must be finite and >= 0")));
        }
        for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name}={b} outside [0, 1)")));
            }
        }
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(Error::invalid(format!("epsilon {epsilon} must be finite and >= 0")));
        }
        Ok(AdamHyper {
            lr,
            beta1,
            beta2,
            epsilon: epsilon.max(ADAM_EPSILON_FLOOR),
        })
    }
}

/// First and second moment buffers for one flat parameter slice.
#[derive(Debug, Clone)]
struct SliceAdam {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl SliceAdam {
    fn new(len: usize) -> Self {
        SliceAdam {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// Bias-corrected Adam update, in place. `t` counts completed steps
    /// including this one.
    fn step(&mut self, params: &mut [f64], grads: &[f64], t: u64, h: &AdamHyper) {
        let bc1 = 1.0 - h.beta1.powi(t as i32);
        let bc2 = 1.0 - h.beta2.powi(t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * g;
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= h.lr * m_hat / (v_hat.sqrt() + h.epsilon);
        }
    }
}

/// Adam state for the spectral model's two parameter blocks.
#[derive(Debug, Clone)]
pub struct AdamState {
    theta: SliceAdam,
    softmax: SliceAdam,
    t: u64,
    hyper: AdamHyper,
}

impl AdamState {
    pub fn new(params: &ModelParams, hyper: AdamHyper) -> Self {
        AdamState {
            theta: SliceAdam::new(params.theta.weights().data().len()),
            softmax: SliceAdam::new(params.softmax_w.data().len()),
            t: 0,
            hyper,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn hyper(&self) -> &AdamHyper {
        &self.hyper
    }
}

pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState) -> Result<()> {
    let theta = params.theta.weights_mut();
    if grads.d_theta.rows() != theta.rows()
        || grads.d_theta.cols() != theta.cols()
        || grads.d_softmax_w.rows() != params.softmax_w.rows()
        || grads.d_softmax_w.cols() != params.softmax_w.cols()
    {
        return Err(Error::invalid("gradient shapes do not match parameters"));
    }
    if !grads.is_finite() {
        return Err(Error::invalid("non-finite gradient"));
    }
    state.t += 1;
    state
        .theta
        .step(theta.data_mut(), grads.d_theta.data(), state.t, &state.hyper);
    state.softmax.step(
        params.softmax_w.data_mut(),
        grads.d_softmax_w.data(),
        state.t,
        &state.hyper,
    );
    Ok(())
}

/// Adam state for a baseline: one buffer per parameter slice, in the fixed
/// order extractor layers (weights then bias), post-match layer, softmax.
#[derive(Debug, Clone)]
pub struct BaselineAdamState {
    parts: Vec<SliceAdam>,
    t: u64,
    hyper: AdamHyper,
}

impl BaselineAdamState {
    pub fn new(params: &BaselineParams, hyper: AdamHyper) -> Self {
        let mut parts = Vec::new();
        if let Some(fcn) = &params.fcn {
            for layer in &fcn.layers {
                parts.push(SliceAdam::new(layer.weights.data().len()));
                parts.push(SliceAdam::new(layer.bias.len()));
            }
        }
        if let Some(post) = &params.post_match {
            parts.push(SliceAdam::new(post.weights.data().len()));
            parts.push(SliceAdam::new(post.bias.len()));
        }
        parts.push(SliceAdam::new(params.softmax_w.data().len()));
        BaselineAdamState { parts, t: 0, hyper }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

fn finite_slice(xs: &[f64]) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid("non-finite gradient"))
    }
}

pub fn baseline_adam_step(
    params: &mut BaselineParams,
    grads: &BaselineGradients,
    state: &mut BaselineAdamState,
) -> Result<()> {
    state.t += 1;
    let t = state.t;
    let hyper = state.hyper.clone();
    let mut part = state.parts.iter_mut();
    let mut next = || -> Result<&mut SliceAdam> {
        part.next()
            .ok_or_else(|| Error::invalid("optimizer state does not match baseline shape"))
    };
    match (&mut params.fcn, grads.d_fcn.is_empty()) {
        (Some(fcn), false) => {
            if fcn.layers.len() != grads.d_fcn.len() {
                return Err(Error::invalid("extractor gradient layer count mismatch"));
            }
            for (layer, (dw, db)) in fcn.layers.iter_mut().zip(&grads.d_fcn) {
                if dw.rows() != layer.weights.rows()
                    || dw.cols() != layer.weights.cols()
                    || db.len() != layer.bias.len()
                {
                    return Err(Error::invalid("extractor gradient shape mismatch"));
                }
                finite_slice(dw.data())?;
                finite_slice(db)?;
                next()?.step(layer.weights.data_mut(), dw.data(), t, &hyper);
                next()?.step(&mut layer.bias, db, t, &hyper);
            }
        }
        (None, true) => {}
        _ => return Err(Error::invalid("extractor gradients do not match parameters")),
    }
    match (&mut params.post_match, &grads.d_post) {
        (Some(post), Some((dw, db))) => {
            if dw.rows() != post.weights.rows()
                || dw.cols() != post.weights.cols()
                || db.len() != post.bias.len()
            {
                return Err(Error::invalid("post-match gradient shape mismatch"));
            }
            finite_slice(dw.data())?;
            finite_slice(db)?;
            next()?.step(post.weights.data_mut(), dw.data(), t, &hyper);
            next()?.step(&mut post.bias, db, t, &hyper);
        }
        (None, None) => {}
        _ => return Err(Error::invalid("post-match gradients do not match parameters")),
    }
    if grads.d_softmax_w.rows() != params.softmax_w.rows()
        || grads.d_softmax_w.cols() != params.softmax_w.cols()
    {
        return Err(Error::invalid("softmax gradient shape mismatch"));
    }
    finite_slice(grads.d_softmax_w.data())?;
    next()?.step(
        params.softmax_w.data_mut(),
        grads.d_softmax_w.data(),
        t,
        &hyper,
    );
    Ok(())
}

/// Training configuration shared by every model kind.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Chebyshev filter order (number of basis terms).
    pub s: usize,
    /// Output features per convolution.
    pub f_out: usize,
    /// Neighbors per vertex in the geometry graph.
    pub knn_k: usize,
    /// Gaussian kernel width; None uses the mean pairwise distance.
    pub sigma: Option<f64>,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub pool_mode: PoolMode,
    pub activation: Activation,
    pub folds: usize,
    pub seed: u64,
    /// Optional cap on shuffled pairs consumed per epoch.
    pub pairs_per_epoch: Option<usize>,
    /// Worker threads for within-batch gradient evaluation.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            s: 30,
            f_out: 128,
            knn_k: 10,
            sigma: None,
            lr: 0.005,
            epochs: 20,
            batch_size: 256,
            pool_mode: PoolMode::Max,
            activation: Activation::Relu,
            folds: 5,
            seed: 0,
            pairs_per_epoch: None,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s == 0 {
            return Err(Error::invalid("filter order must be at least 1"));
        }
        if self.f_out == 0 {
            return Err(Error::invalid("output feature count must be at least 1"));
        }
        if self.knn_k == 0 {
            return Err(Error::invalid("neighbor count must be at least 1"));
        }
        if let Some(sigma) = self.sigma {
            if !sigma.is_finite() || sigma <= 0.0 {
                return Err(Error::invalid(format!("sigma {sigma} must be finite and positive")));
            }
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::invalid(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("epoch count must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.folds == 0 {
            return Err(Error::invalid("fold count must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("worker count must be at least 1"));
        }
        if self.pairs_per_epoch == Some(0) {
            return Err(Error::invalid("pairs per epoch must be at least 1 when set"));
        }
        Ok(())
    }
}

/// Which model trains: the spectral pipeline or one of the baselines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ModelKind {
    /// Full multi-view model over the listed views; empty means every view.
    Mvgcn { views: Vec<usize> },
    /// Spectral model restricted to one view.
    SingleViewGcn { view: usize },
    /// Softmax head on raw upper-triangle edge features of one view.
    RawEdges { view: usize },
    /// Softmax head on a PCA projection of one view, fit per training fold.
    Pca { view: usize, dim: usize },
    /// Trainable fully connected extractor on one view. `dims` are layer
    /// output sizes; `post_dim` adds a dense layer after matching.
    Fcn {
        view: usize,
        dims: Vec<usize>,
        post_dim: Option<usize>,
    },
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Mvgcn { .. } => "mvgcn",
            ModelKind::SingleViewGcn { .. } => "gcn",
            ModelKind::RawEdges { .. } => "raw",
            ModelKind::Pca { .. } => "pca",
            ModelKind::Fcn { .. } => "fcn",
        }
    }

    pub fn is_graph(&self) -> bool {
        matches!(self, ModelKind::Mvgcn { .. } | ModelKind::SingleViewGcn { .. })
    }

    fn graph_views(&self, m: usize) -> Option<Vec<usize>> {
        match self {
            ModelKind::Mvgcn { views } => Some(if views.is_empty() {
                (0..m).collect()
            } else {
                views.clone()
            }),
            ModelKind::SingleViewGcn { view } => Some(vec![*view]),
            _ => None,
        }
    }

    fn vector_view(&self) -> Option<usize> {
        match self {
            ModelKind::RawEdges { view } | ModelKind::Pca { view, .. } => Some(*view),
            ModelKind::Fcn { view, .. } => Some(*view),
            _ => None,
        }
    }

    fn validate(&self, m: usize) -> Result<()> {
        let check_view = |v: usize| -> Result<()> {
            if v >= m {
                Err(Error::invalid(format!("view {v} out of range for {m} views")))
            } else {
                Ok(())
            }
        };
        match self {
            ModelKind::Mvgcn { views } => {
                let mut seen = views.clone();
                seen.sort_unstable();
                for w in seen.windows(2) {
                    if w[0] == w[1] {
                        return Err(Error::invalid(format!("view {} listed twice", w[0])));
                    }
                }
                views.iter().try_for_each(|&v| check_view(v))
            }
            ModelKind::SingleViewGcn { view } | ModelKind::RawEdges { view } => check_view(*view),
            ModelKind::Pca { view, dim } => {
                check_view(*view)?;
                if *dim == 0 {
                    return Err(Error::invalid("pca dimension must be at least 1"));
                }
                Ok(())
            }
            ModelKind::Fcn { view, dims, post_dim } => {
                check_view(*view)?;
                if dims.is_empty() {
                    return Err(Error::invalid("extractor needs at least one layer size"));
                }
                if dims.iter().any(|&d| d == 0) || *post_dim == Some(0) {
                    return Err(Error::invalid("layer sizes must be at least 1"));
                }
                Ok(())
            }
        }
    }
}

/// One fold's trained model and held-out scores.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub auc: f64,
    /// Mean training loss per epoch.
    pub train_losses: Vec<f64>,
    /// Held-out pairs with their match probabilities.
    pub scored: Vec<ScoredPair>,
    /// Trained spectral model; None for vector baselines.
    pub model: Option<SavedModel>,
}

/// Cross-validation aggregate over all folds.
#[derive(Debug, Clone)]
pub struct CvOutcome {
    pub folds: Vec<FoldOutcome>,
    pub auc_mean: f64,
    pub auc_std: f64,
    /// Agreement between similarity-based clustering and the class labels.
    pub nmi: f64,
    pub cluster_assignments: Vec<usize>,
    /// Acquisition-level similarity, -1.0 where no fold scored the pair.
    pub similarity: DenseMatrix,
}

/// Filter stacks for the selected views of every acquisition, plus the
/// resolved kernel width. The geometry graph is built once and shared.
pub fn build_stacks(
    dataset: &Dataset,
    views: &[usize],
    knn_k: usize,
    sigma: Option<f64>,
    s: usize,
) -> Result<(Vec<Vec<ChebyshevStack>>, f64)> {
    if views.is_empty() {
        return Err(Error::invalid("at least one view must be selected"));
    }
    for &v in views {
        if v >= dataset.m() {
            return Err(Error::invalid(format!(
                "view {v} out of range for {} views",
                dataset.m()
            )));
        }
    }
    let policy = match sigma {
        Some(v) => SigmaPolicy::Fixed(v),
        None => SigmaPolicy::MeanDistance,
    };
    let graph = build_bgg(&dataset.atlas, knn_k, policy)?;
    let op = build_spectral_operator(&graph)?;
    let stacks = dataset
        .acquisitions
        .iter()
        .map(|acq| {
            views
                .iter()
                .map(|&v| chebyshev_apply(&op, &acq.views[v], s))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((stacks, graph.sigma()))
}

/// Spread fold indices across the seed space; odd constant keeps the map
/// injective in the low bits.
const FOLD_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

fn fold_seed(seed: u64, fold: usize) -> u64 {
    seed ^ FOLD_SEED_STRIDE.wrapping_mul(fold as u64 + 1)
}

/// Both pair labels must occur or AUC is undefined for the fold.
fn check_pair_mix(pairs: &[PairSample], what: &str) -> Result<()> {
    let has_match = pairs.iter().any(|p| p.label == 1);
    let has_non = pairs.iter().any(|p| p.label == 0);
    if !has_match || !has_non {
        return Err(Error::invalid(format!(
            "degenerate {what} fold: pairs cover a single relationship class"
        )));
    }
    Ok(())
}

fn make_pool(workers: usize) -> Result<Option<rayon::ThreadPool>> {
    if workers <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map(Some)
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))
}

/// Evaluate `work` over the batch, in parallel when a pool is given. Results
/// keep slot order, so the later sequential reduction is bit-identical for
/// any worker count.
fn batch_map<'a, T, F>(pool: Option<&rayon::ThreadPool>, batch: &'a [usize], work: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(&'a usize) -> Result<T> + Sync + Send,
{
    match pool {
        Some(tp) => tp.install(|| batch.par_iter().map(&work).collect()),
        None => batch.iter().map(&work).collect(),
    }
}

struct GraphRun<'a> {
    stacks: &'a [Vec<ChebyshevStack>],
    views: &'a [usize],
    knn_k: usize,
    sigma: f64,
}

fn train_fold_graph(
    run: &GraphRun<'_>,
    labels: &[usize],
    train_idx: &[usize],
    test_idx: &[usize],
    config: &TrainConfig,
    fold: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Result<FoldOutcome> {
    let train_pairs = generate_pairs(labels, train_idx)?;
    let test_pairs = generate_pairs(labels, test_idx)?;
    check_pair_mix(&train_pairs, "training")?;
    check_pair_mix(&test_pairs, "held-out")?;
    let n = run.stacks[0][0].n();
    let seed = fold_seed(config.seed, fold);
    let mut params = ModelParams::init(
        n,
        config.f_out,
        config.s,
        n,
        config.activation,
        config.pool_mode,
        &mut SeededRng::new(seed),
    );
    let mut adam = AdamState::new(&params, AdamHyper::new(config.lr)?);
    let mut train_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    for epoch in 0..config.epochs {
        let mut rng = SeededRng::new(seed ^ epoch as u64);
        rng.shuffle(&mut order);
        let limit = config.pairs_per_epoch.unwrap_or(order.len()).min(order.len());
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order[..limit].chunks(config.batch_size) {
            let stacks = run.stacks;
            let params_ref = &params;
            let results = batch_map(pool, chunk, |&i| {
                let p = &train_pairs[i];
                let out = mvgcn_forward(&stacks[p.idx_p], &stacks[p.idx_q], params_ref)?;
                let loss = cross_entropy(&out.probs, p.label)?;
                let grads = mvgcn_backward(&stacks[p.idx_p], &stacks[p.idx_q], &out, p.label, params_ref)?;
                Ok((loss.value, grads))
            });
            let mut acc = Gradients::zeros_like(&params);
            for r in results {
                let (loss, g) = r?;
                loss_sum += loss;
                acc.add_assign(&g);
            }
            seen += chunk.len();
            acc.scale(1.0 / chunk.len() as f64);
            adam_step(&mut params, &acc, &mut adam)?;
        }
        train_losses.push(if seen == 0 { 0.0 } else { loss_sum / seen as f64 });
    }
    let scored = test_pairs
        .iter()
        .map(|p| {
            let out = mvgcn_forward(&run.stacks[p.idx_p], &run.stacks[p.idx_q], &params)?;
            Ok(ScoredPair {
                pair: p.clone(),
                score: out.probs[1],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fold_auc = auc(&scored)?;
    let model = SavedModel {
        params,
        knn_k: run.knn_k,
        sigma: run.sigma,
        views: run.views.to_vec(),
    };
    Ok(FoldOutcome {
        fold,
        auc: fold_auc,
        train_losses,
        scored,
        model: Some(model),
    })
}

fn init_baseline(kind: &ModelKind, d: usize, rng: &mut SeededRng) -> Result<BaselineParams> {
    match kind {
        ModelKind::RawEdges { .. } | ModelKind::Pca { .. } => Ok(BaselineParams {
            fcn: None,
            post_match: None,
            softmax_w: DenseMatrix::zeros(NUM_CLASSES, d),
        }),
        ModelKind::Fcn { dims, post_dim, .. } => {
            let mut chain = vec![d];
            chain.extend_from_slice(dims);
            let fcn = FcnParams::glorot(&chain, rng)?;
            let embed = *chain.last().expect("chain is non-empty");
            let (post_match, d_r) = match post_dim {
                Some(pd) => (Some(DenseLayer::glorot(*pd, embed, rng)), *pd),
                None => (None, embed),
            };
            Ok(BaselineParams {
                fcn: Some(fcn),
                post_match,
                softmax_w: DenseMatrix::zeros(NUM_CLASSES, d_r),
            })
        }
        _ => Err(Error::Internal("graph model kind in baseline init".to_string())),
    }
}

fn train_fold_vector(
    features: &[Vec<f64>],
    labels: &[usize],
    train_idx: &[usize],
    test_idx: &[usize],
    config: &TrainConfig,
    fold: usize,
    kind: &ModelKind,
    pool: Option<&rayon::ThreadPool>,
) -> Result<FoldOutcome> {
    let train_pairs = generate_pairs(labels, train_idx)?;
    let test_pairs = generate_pairs(labels, test_idx)?;
    check_pair_mix(&train_pairs, "training")?;
    check_pair_mix(&test_pairs, "held-out")?;
    let d = features[0].len();
    let seed = fold_seed(config.seed, fold);
    let mut rng = SeededRng::new(seed);
    let mut params = init_baseline(kind, d, &mut rng)?;
    let mut adam = BaselineAdamState::new(&params, AdamHyper::new(config.lr)?);
    let mut train_losses = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    for epoch in 0..config.epochs {
        let mut erng = SeededRng::new(seed ^ epoch as u64);
        erng.shuffle(&mut order);
        let limit = config.pairs_per_epoch.unwrap_or(order.len()).min(order.len());
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order[..limit].chunks(config.batch_size) {
            let params_ref = &params;
            let results = batch_map(pool, chunk, |&i| {
                let p = &train_pairs[i];
                let out = baseline_forward(params_ref, &features[p.idx_p], &features[p.idx_q])?;
                let loss = cross_entropy(&out.probs, p.label)?;
                let grads =
                    baseline_backward(params_ref, &out, &features[p.idx_p], &features[p.idx_q], p.label)?;
                Ok((loss.value, grads))
            });
            let mut acc = BaselineGradients::zeros_like(&params);
            for r in results {
                let (loss, g) = r?;
                loss_sum += loss;
                acc.add_assign(&g);
            }
            seen += chunk.len();
            acc.scale(1.0 / chunk.len() as f64);
            baseline_adam_step(&mut params, &acc, &mut adam)?;
        }
        train_losses.push(if seen == 0 { 0.0 } else { loss_sum / seen as f64 });
    }
    let scored = test_pairs
        .iter()
        .map(|p| {
            let out = baseline_forward(&params, &features[p.idx_p], &features[p.idx_q])?;
            Ok(ScoredPair {
                pair: p.clone(),
                score: out.probs[1],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let fold_auc = auc(&scored)?;
    Ok(FoldOutcome {
        fold,
        auc: fold_auc,
        train_losses,
        scored,
        model: None,
    })
}

fn split_folds(folds: &[Vec<usize>], held_out: usize) -> (Vec<usize>, Vec<usize>) {
    let test = folds[held_out].clone();
    let mut train = Vec::new();
    for (f, members) in folds.iter().enumerate() {
        if f != held_out {
            train.extend_from_slice(members);
        }
    }
    train.sort_unstable();
    (train, test)
}

/// PCA features are fit on the training fold only, then applied everywhere.
fn pca_features(raw: &[Vec<f64>], train_idx: &[usize], dim: usize) -> Result<Vec<Vec<f64>>> {
    let train_rows: Vec<Vec<f64>> = train_idx.iter().map(|&i| raw[i].clone()).collect();
    let fit_input = DenseMatrix::from_rows(&train_rows);
    let transform = pca_fit(&fit_input, dim)?;
    raw.iter().map(|r| transform.project(r)).collect()
}

/// Train one fold with a fresh context. `fold` selects the seed stream, so
/// calling this for each fold of a fixed split reproduces run_cross_validation.
pub fn train_fold(
    dataset: &Dataset,
    train_idx: &[usize],
    test_idx: &[usize],
    config: &TrainConfig,
    kind: &ModelKind,
    fold: usize,
) -> Result<FoldOutcome> {
    config.validate()?;
    dataset.validate()?;
    kind.validate(dataset.m())?;
    let labels = dataset.labels();
    let pool = make_pool(config.workers)?;
    if let Some(views) = kind.graph_views(dataset.m()) {
        let (stacks, sigma) = build_stacks(dataset, &views, config.knn_k, config.sigma, config.s)?;
        let run = GraphRun {
            stacks: &stacks,
            views: &views,
            knn_k: config.knn_k,
            sigma,
        };
        train_fold_graph(&run, &labels, train_idx, test_idx, config, fold, pool.as_ref())
    } else {
        let view = kind.vector_view().expect("non-graph kinds have a view");
        let raw = dataset
            .acquisitions
            .iter()
            .map(|a| upper_triangle_features(&a.views[view]))
            .collect::<Result<Vec<_>>>()?;
        let features = match kind {
            ModelKind::Pca { dim, .. } => pca_features(&raw, train_idx, *dim)?,
            _ => raw,
        };
        train_fold_vector(
            &features,
            &labels,
            train_idx,
            test_idx,
            config,
            fold,
            kind,
            pool.as_ref(),
        )
    }
}

/// Full stratified cross-validation: train every fold, score every held-out
/// pair, and cluster the assembled similarity matrix against the labels.
pub fn run_cross_validation(
    dataset: &Dataset,
    config: &TrainConfig,
    kind: &ModelKind,
) -> Result<CvOutcome> {
    config.validate()?;
    dataset.validate()?;
    kind.validate(dataset.m())?;
    let labels = dataset.labels();
    let folds = stratified_kfold(&labels, config.folds, config.seed)?;
    let pool = make_pool(config.workers)?;
    let mut outcomes = Vec::with_capacity(folds.len());
    if let Some(views) = kind.graph_views(dataset.m()) {
        let (stacks, sigma) = build_stacks(dataset, &views, config.knn_k, config.sigma, config.s)?;
        let run = GraphRun {
            stacks: &stacks,
            views: &views,
            knn_k: config.knn_k,
            sigma,
        };
        for f in 0..folds.len() {
            let (train_idx, test_idx) = split_folds(&folds, f);
            outcomes.push(train_fold_graph(
                &run,
                &labels,
                &train_idx,
                &test_idx,
                config,
                f,
                pool.as_ref(),
            )?);
        }
    } else {
        let view = kind.vector_view().expect("non-graph kinds have a view");
        let raw = dataset
            .acquisitions
            .iter()
            .map(|a| upper_triangle_features(&a.views[view]))
            .collect::<Result<Vec<_>>>()?;
        for f in 0..folds.len() {
            let (train_idx, test_idx) = split_folds(&folds, f);
            let projected;
            let features: &[Vec<f64>] = match kind {
                ModelKind::Pca { dim, .. } => {
                    projected = pca_features(&raw, &train_idx, *dim)?;
                    &projected
                }
                _ => &raw,
            };
            outcomes.push(train_fold_vector(
                features,
                &labels,
                &train_idx,
                &test_idx,
                config,
                f,
                kind,
                pool.as_ref(),
            )?);
        }
    }
    let aucs: Vec<f64> = outcomes.iter().map(|o| o.auc).collect();
    let auc_mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
    let auc_std = if aucs.len() > 1 {
        (aucs.iter().map(|a| (a - auc_mean) * (a - auc_mean)).sum::<f64>()
            / (aucs.len() - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    let all_scored: Vec<ScoredPair> = outcomes.iter().flat_map(|o| o.scored.clone()).collect();
    let similarity = similarity_matrix(&all_scored, dataset.len())?;
    let cluster = cluster_acquisitions(&similarity, &labels, NUM_CLASSES, config.seed, KMEANS_RESTARTS)?;
    Ok(CvOutcome {
        folds: outcomes,
        auc_mean,
        auc_std,
        nmi: cluster.nmi,
        cluster_assignments: cluster.assignments,
        similarity,
    })
}
