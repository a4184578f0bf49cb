//! Hand-derived backward pass through the full pair-matching pipeline and
//! through the vector-feature baselines, plus an independent central
//! finite-difference verifier.
//!
//! The backward pass reuses every forward cache: Chebyshev design matrices
//! (so no Laplacian products occur here), pre-activation signs for the
//! ReLU mask, argmax indices for max-pool routing, and row norms for the
//! normalization derivative `d(z/|z|) = (dz_hat - <z_hat, dz_hat> z_hat) / |z|`.
//! Contributions are accumulated in a fixed order (branch p then q, views
//! ascending), making batch training bit-reproducible.

use crate::error::{Error, Result};
use crate::graph::ChebyshevStack;
use crate::model::{
    baseline_forward, mvgcn_forward, Activation, BaselineOutput, BaselineParams, ModelParams,
    PairOutput, PoolMode, NUM_CLASSES,
};
use crate::numerics::{dot, DenseMatrix, SeededRng};

/// Probabilities below this floor are clamped before the log.
pub const PROB_FLOOR: f64 = 1e-15;

/// Gradient of the loss w.r.t. every trainable model parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Same `(f_in * order) x f_out` layout as the coefficient tensor.
    pub d_theta: DenseMatrix,
    pub d_softmax_w: DenseMatrix,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            d_theta: DenseMatrix::zeros(
                params.theta.weights().rows(),
                params.theta.weights().cols(),
            ),
            d_softmax_w: DenseMatrix::zeros(params.softmax_w.rows(), params.softmax_w.cols()),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        self.d_theta.add_scaled(&other.d_theta, 1.0);
        self.d_softmax_w.add_scaled(&other.d_softmax_w, 1.0);
    }

    pub fn scale(&mut self, factor: f64) {
        self.d_theta.scale(factor);
        self.d_softmax_w.scale(factor);
    }

    pub fn is_finite(&self) -> bool {
        self.d_theta.is_finite() && self.d_softmax_w.is_finite()
    }
}

/// Cross-entropy of one prediction.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub probs: Vec<f64>,
}

/// `-ln(probs[label])` with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<LossValue> {
    if label >= probs.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    Ok(LossValue {
        value: -probs[label].max(PROB_FLOOR).ln(),
        probs: probs.to_vec(),
    })
}

/// d loss / d logits for softmax + cross-entropy.
fn logit_gradient(probs: &[f64], label: usize) -> Vec<f64> {
    probs
        .iter()
        .enumerate()
        .map(|(c, &p)| p - if c == label { 1.0 } else { 0.0 })
        .collect()
}

/// Backward of the row normalization for one row: given dz_hat, returns
/// dz. A zero row (norm 0.0) passed through the forward gets gradient 0.
fn normalize_row_backward(z_hat: &[f64], dz_hat: &[f64], norm: f64, out: &mut [f64]) {
    if norm == 0.0 {
        for v in out.iter_mut() {
            *v = 0.0;
        }
        return;
    }
    let proj = dot(z_hat, dz_hat);
    for (o, (&dh, &h)) in out.iter_mut().zip(dz_hat.iter().zip(z_hat)) {
        *o = (dh - proj * h) / norm;
    }
}

/// Accumulates `design^T * d_pre` over views: the coefficient gradient of
/// one branch. Exposed separately because it is linear in the upstream
/// gradient.
pub fn conv_backward_theta(stacks: &[ChebyshevStack], d_pre: &[DenseMatrix]) -> Result<DenseMatrix> {
    if stacks.is_empty() || stacks.len() != d_pre.len() {
        return Err(Error::invalid("view counts of stacks and gradients differ"));
    }
    let mut total = stacks[0].design().matmul_at_b(&d_pre[0]);
    for (stack, d) in stacks.iter().zip(d_pre).skip(1) {
        total.add_scaled(&stack.design().matmul_at_b(d), 1.0);
    }
    Ok(total)
}

fn branch_backward(
    stacks: &[ChebyshevStack],
    branch: &crate::model::BranchCache,
    other: &crate::model::BranchCache,
    dr: &[f64],
    params: &ModelParams,
    d_theta: &mut DenseMatrix,
) -> Result<()> {
    let n = branch.features.pooled.rows();
    let f_out = branch.features.pooled.cols();
    let m = branch.features.per_view.len();
    if stacks.len() != m {
        return Err(Error::Internal(
            "forward cache view count does not match stacks".to_string(),
        ));
    }

    // Matching + normalization backward into the pooled matrix.
    let mut d_pooled = DenseMatrix::zeros(n, f_out);
    let mut dz_hat = vec![0.0; f_out];
    for i in 0..n {
        for (d, &o) in dz_hat.iter_mut().zip(other.pooled_hat.row(i)) {
            *d = dr[i] * o;
        }
        normalize_row_backward(
            branch.pooled_hat.row(i),
            &dz_hat,
            branch.row_norms[i],
            d_pooled.row_mut(i),
        );
    }

    // Pool + activation backward into per-view pre-activation gradients.
    let mut d_pre: Vec<DenseMatrix> = Vec::with_capacity(m);
    for k in 0..m {
        let mut dk = DenseMatrix::zeros(n, f_out);
        let pre = &branch.features.pre_activation[k];
        match params.pool_mode {
            PoolMode::Max => {
                let argmax = branch
                    .features
                    .argmax_view
                    .as_ref()
                    .ok_or_else(|| Error::Internal("max pool cache missing argmax".to_string()))?;
                for i in 0..n {
                    for j in 0..f_out {
                        if argmax[i * f_out + j] == k {
                            let g = params.activation.grad(pre.get(i, j));
                            dk.set(i, j, d_pooled.get(i, j) * g);
                        }
                    }
                }
            }
            PoolMode::Mean => {
                let inv_m = 1.0 / m as f64;
                for i in 0..n {
                    for j in 0..f_out {
                        let g = params.activation.grad(pre.get(i, j));
                        dk.set(i, j, d_pooled.get(i, j) * inv_m * g);
                    }
                }
            }
        }
        d_pre.push(dk);
    }

    d_theta.add_scaled(&conv_backward_theta(stacks, &d_pre)?, 1.0);
    Ok(())
}

/// Exact analytic gradient of the pair cross-entropy w.r.t. theta and the
/// softmax weights, accumulated through both siamese branches.
pub fn mvgcn_backward(
    stacks_p: &[ChebyshevStack],
    stacks_q: &[ChebyshevStack],
    out: &PairOutput,
    label: usize,
    params: &ModelParams,
) -> Result<Gradients> {
    if label >= NUM_CLASSES {
        return Err(Error::invalid(format!("label {label} out of range")));
    }
    let n = out.r.len();
    let dlogits = logit_gradient(&out.probs, label);

    let mut grads = Gradients::zeros_like(params);
    for c in 0..NUM_CLASSES {
        for i in 0..n {
            grads.d_softmax_w.set(c, i, dlogits[c] * out.r[i]);
        }
    }
    let dr: Vec<f64> = (0..n)
        .map(|i| (0..NUM_CLASSES).map(|c| dlogits[c] * params.softmax_w.get(c, i)).sum())
        .collect();

    branch_backward(stacks_p, &out.branch_p, &out.branch_q, &dr, params, &mut grads.d_theta)?;
    branch_backward(stacks_q, &out.branch_q, &out.branch_p, &dr, params, &mut grads.d_theta)?;
    Ok(grads)
}

/// Gradients for a vector-feature baseline; layer lists parallel the
/// parameter structure.
#[derive(Debug, Clone)]
pub struct BaselineGradients {
    /// (dW, db) per FCN layer; empty when the baseline has no FCN.
    pub d_fcn: Vec<(DenseMatrix, Vec<f64>)>,
    pub d_post: Option<(DenseMatrix, Vec<f64>)>,
    pub d_softmax_w: DenseMatrix,
}

impl BaselineGradients {
    pub fn zeros_like(params: &BaselineParams) -> Self {
        BaselineGradients {
            d_fcn: params
                .fcn
                .as_ref()
                .map(|f| {
                    f.layers
                        .iter()
                        .map(|l| {
                            (
                                DenseMatrix::zeros(l.weights.rows(), l.weights.cols()),
                                vec![0.0; l.bias.len()],
                            )
                        })
                        .collect()
                })
                .unwrap_or_default(),
            d_post: params.post_match.as_ref().map(|l| {
                (
                    DenseMatrix::zeros(l.weights.rows(), l.weights.cols()),
                    vec![0.0; l.bias.len()],
                )
            }),
            d_softmax_w: DenseMatrix::zeros(params.softmax_w.rows(), params.softmax_w.cols()),
        }
    }

    pub fn add_assign(&mut self, other: &BaselineGradients) {
        for ((w, b), (ow, ob)) in self.d_fcn.iter_mut().zip(&other.d_fcn) {
            w.add_scaled(ow, 1.0);
            for (x, y) in b.iter_mut().zip(ob) {
                *x += y;
            }
        }
        if let (Some((w, b)), Some((ow, ob))) = (self.d_post.as_mut(), other.d_post.as_ref()) {
            w.add_scaled(ow, 1.0);
            for (x, y) in b.iter_mut().zip(ob) {
                *x += y;
            }
        }
        self.d_softmax_w.add_scaled(&other.d_softmax_w, 1.0);
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.d_fcn {
            w.scale(factor);
            for v in b.iter_mut() {
                *v *= factor;
            }
        }
        if let Some((w, b)) = self.d_post.as_mut() {
            w.scale(factor);
            for v in b.iter_mut() {
                *v *= factor;
            }
        }
        self.d_softmax_w.scale(factor);
    }
}

fn fcn_branch_backward(
    params: &BaselineParams,
    cache: &crate::model::FcnCache,
    x: &[f64],
    d_out: &[f64],
    grads: &mut BaselineGradients,
) {
    let fcn = params.fcn.as_ref().expect("fcn cache implies fcn params");
    let mut d = d_out.to_vec();
    for l in (0..fcn.layers.len()).rev() {
        let layer = &fcn.layers[l];
        let pre = &cache.pres[l];
        let d_pre: Vec<f64> = d
            .iter()
            .zip(pre)
            .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
            .collect();
        let input: &[f64] = if l == 0 { x } else { &cache.posts[l - 1] };
        let (dw, db) = &mut grads.d_fcn[l];
        for (o, &g) in d_pre.iter().enumerate() {
            db[o] += g;
            for (i, &v) in input.iter().enumerate() {
                let cur = dw.get(o, i);
                dw.set(o, i, cur + g * v);
            }
        }
        if l > 0 {
            d = (0..layer.in_dim())
                .map(|i| (0..layer.out_dim()).map(|o| layer.weights.get(o, i) * d_pre[o]).sum())
                .collect();
        }
    }
}

/// Analytic gradient for a baseline pair. `xp`/`xq` are the raw feature
/// vectors that produced `out`.
pub fn baseline_backward(
    params: &BaselineParams,
    out: &BaselineOutput,
    xp: &[f64],
    xq: &[f64],
    label: usize,
) -> Result<BaselineGradients> {
    if label >= NUM_CLASSES {
        return Err(Error::invalid(format!("label {label} out of range")));
    }
    let dlogits = logit_gradient(&out.probs, label);
    let mut grads = BaselineGradients::zeros_like(params);

    for c in 0..NUM_CLASSES {
        for (i, &h) in out.head_input.iter().enumerate() {
            grads.d_softmax_w.set(c, i, dlogits[c] * h);
        }
    }
    let d_head: Vec<f64> = (0..out.head_input.len())
        .map(|i| (0..NUM_CLASSES).map(|c| dlogits[c] * params.softmax_w.get(c, i)).sum())
        .collect();

    let d_match: Vec<f64> = match (&params.post_match, &out.post_pre) {
        (Some(layer), Some(pre)) => {
            let d_pre: Vec<f64> = d_head
                .iter()
                .zip(pre)
                .map(|(&g, &p)| if p > 0.0 { g } else { 0.0 })
                .collect();
            let (dw, db) = grads.d_post.as_mut().expect("post grads allocated");
            for (o, &g) in d_pre.iter().enumerate() {
                db[o] += g;
                for (i, &v) in out.match_r.iter().enumerate() {
                    let cur = dw.get(o, i);
                    dw.set(o, i, cur + g * v);
                }
            }
            (0..layer.in_dim())
                .map(|i| (0..layer.out_dim()).map(|o| layer.weights.get(o, i) * d_pre[o]).sum())
                .collect()
        }
        (None, None) => d_head,
        _ => return Err(Error::Internal("post-match cache mismatch".to_string())),
    };

    // match_r = zp_hat .* zq_hat.
    let dz_p_hat: Vec<f64> = d_match
        .iter()
        .zip(&out.branch_q.embed_hat)
        .map(|(&g, &o)| g * o)
        .collect();
    let dz_q_hat: Vec<f64> = d_match
        .iter()
        .zip(&out.branch_p.embed_hat)
        .map(|(&g, &o)| g * o)
        .collect();

    for (branch, dz_hat, x) in [
        (&out.branch_p, dz_p_hat, xp),
        (&out.branch_q, dz_q_hat, xq),
    ] {
        let mut d_embed = vec![0.0; dz_hat.len()];
        normalize_row_backward(&branch.embed_hat, &dz_hat, branch.norm, &mut d_embed);
        if params.fcn.is_some() {
            let cache = branch
                .fcn
                .as_ref()
                .ok_or_else(|| Error::Internal("fcn cache missing".to_string()))?;
            fcn_branch_backward(params, cache, x, &d_embed, &mut grads);
        }
        // Without an FCN the embeddings are fixed inputs; nothing upstream.
    }
    Ok(grads)
}

/// One trainable coordinate of [`ModelParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamCoord {
    /// Flat index into the theta weight matrix.
    Theta(usize),
    /// Flat index into the softmax weight matrix.
    SoftmaxW(usize),
}

fn coord_value(params: &ModelParams, c: ParamCoord) -> f64 {
    match c {
        ParamCoord::Theta(i) => params.theta.weights().data()[i],
        ParamCoord::SoftmaxW(i) => params.softmax_w.data()[i],
    }
}

fn set_coord(params: &mut ModelParams, c: ParamCoord, v: f64) {
    match c {
        ParamCoord::Theta(i) => params.theta.weights_mut().data_mut()[i] = v,
        ParamCoord::SoftmaxW(i) => params.softmax_w.data_mut()[i] = v,
    }
}

fn analytic_value(grads: &Gradients, c: ParamCoord) -> f64 {
    match c {
        ParamCoord::Theta(i) => grads.d_theta.data()[i],
        ParamCoord::SoftmaxW(i) => grads.d_softmax_w.data()[i],
    }
}

/// All softmax coordinates plus a seeded sample of at least
/// `theta_samples` distinct theta coordinates (all of them when theta is
/// small enough).
pub fn select_fd_coords(
    params: &ModelParams,
    theta_samples: usize,
    rng: &mut SeededRng,
) -> Vec<ParamCoord> {
    let mut coords: Vec<ParamCoord> = (0..params.softmax_w.data().len())
        .map(ParamCoord::SoftmaxW)
        .collect();
    let theta_len = params.theta.weights().data().len();
    if theta_len <= theta_samples {
        coords.extend((0..theta_len).map(ParamCoord::Theta));
    } else {
        let mut idx: Vec<usize> = (0..theta_len).collect();
        rng.shuffle(&mut idx);
        idx.truncate(theta_samples);
        idx.sort_unstable();
        coords.extend(idx.into_iter().map(ParamCoord::Theta));
    }
    coords
}

/// Result of a finite-difference scan.
#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped because the two evaluation points fell on
    /// different sides of a ReLU / max-pool / zero-row boundary.
    pub skipped: usize,
}

/// Branch-state fingerprint. Two perturbed evaluations with equal
/// signatures lie in the same smooth region, so their central difference
/// is a valid derivative estimate; a signature change marks a kink.
fn forward_signature(out: &PairOutput, params: &ModelParams, label: usize) -> Vec<u8> {
    let mut sig = Vec::new();
    for branch in [&out.branch_p, &out.branch_q] {
        if params.activation == Activation::Relu {
            for pre in &branch.features.pre_activation {
                for &v in pre.data() {
                    sig.push(u8::from(v > 0.0));
                }
            }
        }
        if let Some(argmax) = &branch.features.argmax_view {
            for &k in argmax {
                sig.push(k as u8);
            }
        }
        for &norm in &branch.row_norms {
            sig.push(u8::from(norm == 0.0));
        }
    }
    sig.push(u8::from(out.probs[label] < PROB_FLOOR));
    sig
}

fn validate_epsilon(epsilon: f64) -> Result<()> {
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(Error::invalid(format!(
            "epsilon must lie in [1e-7, 1e-4], got {epsilon}"
        )));
    }
    Ok(())
}

/// Compares a supplied analytic gradient against central differences on
/// the given coordinates. Exposed separately so a deliberately corrupted
/// gradient can be shown to fail.
pub fn fd_compare(
    stacks_p: &[ChebyshevStack],
    stacks_q: &[ChebyshevStack],
    label: usize,
    params: &ModelParams,
    epsilon: f64,
    coords: &[ParamCoord],
    analytic: &Gradients,
) -> Result<FdReport> {
    validate_epsilon(epsilon)?;
    let mut work = params.clone();
    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for &c in coords {
        let orig = coord_value(&work, c);
        set_coord(&mut work, c, orig + epsilon);
        let out_plus = mvgcn_forward(stacks_p, stacks_q, &work)?;
        let f_plus = cross_entropy(&out_plus.probs, label)?.value;
        let sig_plus = forward_signature(&out_plus, &work, label);
        set_coord(&mut work, c, orig - epsilon);
        let out_minus = mvgcn_forward(stacks_p, stacks_q, &work)?;
        let f_minus = cross_entropy(&out_minus.probs, label)?.value;
        let sig_minus = forward_signature(&out_minus, &work, label);
        set_coord(&mut work, c, orig);
        if sig_plus != sig_minus {
            skipped += 1;
            continue;
        }
        let numeric = (f_plus - f_minus) / (2.0 * epsilon);
        let a = analytic_value(analytic, c);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel_error = max_rel_error.max(rel);
        checked += 1;
    }
    Ok(FdReport {
        max_rel_error,
        checked,
        skipped,
    })
}

/// Verifies the analytic gradient of one pair against central finite
/// differences over all softmax coordinates plus a random theta subset.
pub fn finite_difference_check(
    stacks_p: &[ChebyshevStack],
    stacks_q: &[ChebyshevStack],
    label: usize,
    params: &ModelParams,
    epsilon: f64,
    theta_samples: usize,
    rng: &mut SeededRng,
) -> Result<FdReport> {
    let out = mvgcn_forward(stacks_p, stacks_q, params)?;
    let analytic = mvgcn_backward(stacks_p, stacks_q, &out, label, params)?;
    let coords = select_fd_coords(params, theta_samples, rng);
    fd_compare(stacks_p, stacks_q, label, params, epsilon, &coords, &analytic)
}

/// One trainable coordinate of [`BaselineParams`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineCoord {
    SoftmaxW(usize),
    PostWeight(usize),
    PostBias(usize),
    FcnWeight(usize, usize),
    FcnBias(usize, usize),
}

fn baseline_coord_value(params: &BaselineParams, c: BaselineCoord) -> f64 {
    match c {
        BaselineCoord::SoftmaxW(i) => params.softmax_w.data()[i],
        BaselineCoord::PostWeight(i) => params.post_match.as_ref().unwrap().weights.data()[i],
        BaselineCoord::PostBias(i) => params.post_match.as_ref().unwrap().bias[i],
        BaselineCoord::FcnWeight(l, i) => params.fcn.as_ref().unwrap().layers[l].weights.data()[i],
        BaselineCoord::FcnBias(l, i) => params.fcn.as_ref().unwrap().layers[l].bias[i],
    }
}

fn baseline_set_coord(params: &mut BaselineParams, c: BaselineCoord, v: f64) {
    match c {
        BaselineCoord::SoftmaxW(i) => params.softmax_w.data_mut()[i] = v,
        BaselineCoord::PostWeight(i) => {
            params.post_match.as_mut().unwrap().weights.data_mut()[i] = v
        }
        BaselineCoord::PostBias(i) => params.post_match.as_mut().unwrap().bias[i] = v,
        BaselineCoord::FcnWeight(l, i) => {
            params.fcn.as_mut().unwrap().layers[l].weights.data_mut()[i] = v
        }
        BaselineCoord::FcnBias(l, i) => params.fcn.as_mut().unwrap().layers[l].bias[i] = v,
    }
}

fn baseline_analytic_value(grads: &BaselineGradients, c: BaselineCoord) -> f64 {
    match c {
        BaselineCoord::SoftmaxW(i) => grads.d_softmax_w.data()[i],
        BaselineCoord::PostWeight(i) => grads.d_post.as_ref().unwrap().0.data()[i],
        BaselineCoord::PostBias(i) => grads.d_post.as_ref().unwrap().1[i],
        BaselineCoord::FcnWeight(l, i) => grads.d_fcn[l].0.data()[i],
        BaselineCoord::FcnBias(l, i) => grads.d_fcn[l].1[i],
    }
}

fn baseline_all_coords(params: &BaselineParams) -> Vec<BaselineCoord> {
    let mut coords: Vec<BaselineCoord> = (0..params.softmax_w.data().len())
        .map(BaselineCoord::SoftmaxW)
        .collect();
    if let Some(post) = &params.post_match {
        coords.extend((0..post.weights.data().len()).map(BaselineCoord::PostWeight));
        coords.extend((0..post.bias.len()).map(BaselineCoord::PostBias));
    }
    if let Some(fcn) = &params.fcn {
        for (l, layer) in fcn.layers.iter().enumerate() {
            coords.extend((0..layer.weights.data().len()).map(|i| BaselineCoord::FcnWeight(l, i)));
            coords.extend((0..layer.bias.len()).map(|i| BaselineCoord::FcnBias(l, i)));
        }
    }
    coords
}

fn baseline_signature(out: &BaselineOutput, label: usize) -> Vec<u8> {
    let mut sig = Vec::new();
    for branch in [&out.branch_p, &out.branch_q] {
        if let Some(cache) = &branch.fcn {
            for pre in &cache.pres {
                for &v in pre {
                    sig.push(u8::from(v > 0.0));
                }
            }
        }
        sig.push(u8::from(branch.norm == 0.0));
    }
    if let Some(pre) = &out.post_pre {
        for &v in pre {
            sig.push(u8::from(v > 0.0));
        }
    }
    sig.push(u8::from(out.probs[label] < PROB_FLOOR));
    sig
}

/// Central finite-difference check over every baseline coordinate.
pub fn baseline_finite_difference_check(
    params: &BaselineParams,
    xp: &[f64],
    xq: &[f64],
    label: usize,
    epsilon: f64,
) -> Result<FdReport> {
    validate_epsilon(epsilon)?;
    let out = baseline_forward(params, xp, xq)?;
    let analytic = baseline_backward(params, &out, xp, xq, label)?;
    let mut work = params.clone();
    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    let mut skipped = 0;
    for c in baseline_all_coords(params) {
        let orig = baseline_coord_value(&work, c);
        baseline_set_coord(&mut work, c, orig + epsilon);
        let out_plus = baseline_forward(&work, xp, xq)?;
        let f_plus = cross_entropy(&out_plus.probs, label)?.value;
        let sig_plus = baseline_signature(&out_plus, label);
        baseline_set_coord(&mut work, c, orig - epsilon);
        let out_minus = baseline_forward(&work, xp, xq)?;
        let f_minus = cross_entropy(&out_minus.probs, label)?.value;
        let sig_minus = baseline_signature(&out_minus, label);
        baseline_set_coord(&mut work, c, orig);
        if sig_plus != sig_minus {
            skipped += 1;
            continue;
        }
        let numeric = (f_plus - f_minus) / (2.0 * epsilon);
        let a = baseline_analytic_value(&analytic, c);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel_error = max_rel_error.max(rel);
        checked += 1;
    }
    Ok(FdReport {
        max_rel_error,
        checked,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_bgg, build_spectral_operator, chebyshev_apply, RoiAtlas, SigmaPolicy};
    use crate::model::{DenseLayer, FcnParams};

    fn fixture(
        n: usize,
        m: usize,
        s: usize,
        f_out: usize,
        activation: Activation,
        pool: PoolMode,
        seed: u64,
    ) -> (Vec<ChebyshevStack>, Vec<ChebyshevStack>, ModelParams) {
        let mut rng = SeededRng::new(seed);
        let names: Vec<String> = (0..n).map(|i| format!("roi{i:03}")).collect();
        let mut coords = DenseMatrix::zeros(n, 3);
        for v in coords.data_mut() {
            *v = rng.uniform(0.0, 10.0);
        }
        let atlas = RoiAtlas::new(names, coords).unwrap();
        let bgg = build_bgg(&atlas, 2.min(n - 1), SigmaPolicy::MeanDistance).unwrap();
        let op = build_spectral_operator(&bgg).unwrap();
        let signal = |rng: &mut SeededRng| {
            let mut x = DenseMatrix::zeros(n, n);
            for v in x.data_mut() {
                *v = rng.uniform(0.0, 1.0);
            }
            x
        };
        let stacks_p: Vec<ChebyshevStack> = (0..m)
            .map(|_| chebyshev_apply(&op, &signal(&mut rng), s).unwrap())
            .collect();
        let stacks_q: Vec<ChebyshevStack> = (0..m)
            .map(|_| chebyshev_apply(&op, &signal(&mut rng), s).unwrap())
            .collect();
        let mut params = ModelParams::init(n, f_out, s, n, activation, pool, &mut rng);
        for v in params.softmax_w.data_mut() {
            *v = rng.uniform(-0.8, 0.8);
        }
        (stacks_p, stacks_q, params)
    }

    #[test]
    fn cross_entropy_hand_values() {
        let l = cross_entropy(&[1.0, 0.0], 0).unwrap();
        assert!(l.value.abs() <= 1e-15);
        let l = cross_entropy(&[0.5, 0.5], 0).unwrap();
        assert!((l.value - 2.0f64.ln()).abs() < 1e-12);
        let l = cross_entropy(&[0.25, 0.75], 1).unwrap();
        assert!((l.value - (4.0f64 / 3.0).ln()).abs() < 1e-12);
        // Floor keeps the zero-probability branch finite.
        let l = cross_entropy(&[1.0, 0.0], 1).unwrap();
        assert!(l.value.is_finite());
        assert!(cross_entropy(&[0.5, 0.5], 2).is_err());
    }

    #[test]
    fn softmax_gradient_closed_form() {
        let (sp, sq, params) = fixture(5, 2, 3, 4, Activation::Relu, PoolMode::Max, 101);
        let out = mvgcn_forward(&sp, &sq, &params).unwrap();
        let grads = mvgcn_backward(&sp, &sq, &out, 1, &params).unwrap();
        for c in 0..NUM_CLASSES {
            let expect = out.probs[c] - if c == 1 { 1.0 } else { 0.0 };
            for i in 0..out.r.len() {
                assert!((grads.d_softmax_w.get(c, i) - expect * out.r[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_softmax_weights_give_uniform_pattern() {
        let (sp, sq, mut params) = fixture(5, 2, 3, 4, Activation::Relu, PoolMode::Max, 102);
        for v in params.softmax_w.data_mut() {
            *v = 0.0;
        }
        let out = mvgcn_forward(&sp, &sq, &params).unwrap();
        assert!((out.probs[0] - 0.5).abs() < 1e-15);
        let grads = mvgcn_backward(&sp, &sq, &out, 0, &params).unwrap();
        for i in 0..out.r.len() {
            assert!((grads.d_softmax_w.get(0, i) - (-0.5 * out.r[i])).abs() < 1e-15);
            assert!((grads.d_softmax_w.get(1, i) - 0.5 * out.r[i]).abs() < 1e-15);
        }
        // Zero head weights kill the upstream signal into theta.
        assert_eq!(grads.d_theta.max_abs(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (sp, sq, params) = fixture(6, 2, 3, 4, Activation::Relu, PoolMode::Max, 103);
        let mut rng = SeededRng::new(104);
        let report =
            finite_difference_check(&sp, &sq, 1, &params, 1e-5, 200, &mut rng).unwrap();
        assert!(report.checked > 0);
        assert!(
            report.max_rel_error < 1e-5,
            "max rel error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn gradient_matches_fd_all_modes() {
        let mut seed = 200;
        for activation in [Activation::Relu, Activation::Identity] {
            for pool in [PoolMode::Max, PoolMode::Mean] {
                let (sp, sq, params) = fixture(5, 2, 3, 3, activation, pool, seed);
                let mut rng = SeededRng::new(seed + 1);
                let report =
                    finite_difference_check(&sp, &sq, 0, &params, 1e-5, 200, &mut rng).unwrap();
                assert!(
                    report.max_rel_error < 1e-5,
                    "{activation:?}/{pool:?}: {}",
                    report.max_rel_error
                );
                seed += 2;
            }
        }
    }

    #[test]
    fn smooth_configuration_is_tighter() {
        // Identity activation + mean pooling: no kinks anywhere near the
        // evaluation point, so central differences are accurate to O(eps^2).
        let (sp, sq, params) = fixture(5, 2, 3, 4, Activation::Identity, PoolMode::Mean, 300);
        let mut rng = SeededRng::new(301);
        let report = finite_difference_check(&sp, &sq, 0, &params, 1e-5, 200, &mut rng).unwrap();
        assert!(report.skipped == 0);
        assert!(
            report.max_rel_error < 1e-7,
            "max rel error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let (sp, sq, params) = fixture(5, 2, 3, 4, Activation::Relu, PoolMode::Max, 105);
        let out = mvgcn_forward(&sp, &sq, &params).unwrap();
        let mut grads = mvgcn_backward(&sp, &sq, &out, 0, &params).unwrap();
        // Double the largest softmax-gradient entry.
        let (mut worst, mut worst_abs) = (0, 0.0);
        for (i, &v) in grads.d_softmax_w.data().iter().enumerate() {
            if v.abs() > worst_abs {
                worst = i;
                worst_abs = v.abs();
            }
        }
        assert!(worst_abs > 1e-6, "fixture produced a degenerate gradient");
        grads.d_softmax_w.data_mut()[worst] *= 2.0;
        let coords = vec![ParamCoord::SoftmaxW(worst)];
        let report = fd_compare(&sp, &sq, 0, &params, 1e-5, &coords, &grads).unwrap();
        assert!(
            report.max_rel_error > 1e-2,
            "corruption slipped through: {}",
            report.max_rel_error
        );
    }

    #[test]
    fn branch_swap_gives_same_gradients() {
        let (sp, sq, params) = fixture(6, 3, 3, 4, Activation::Relu, PoolMode::Max, 106);
        let out_pq = mvgcn_forward(&sp, &sq, &params).unwrap();
        let out_qp = mvgcn_forward(&sq, &sp, &params).unwrap();
        let g_pq = mvgcn_backward(&sp, &sq, &out_pq, 1, &params).unwrap();
        let g_qp = mvgcn_backward(&sq, &sp, &out_qp, 1, &params).unwrap();
        let mut diff = g_pq.d_theta.clone();
        diff.add_scaled(&g_qp.d_theta, -1.0);
        assert!(diff.max_abs() < 1e-12);
        let mut diff = g_pq.d_softmax_w.clone();
        diff.add_scaled(&g_qp.d_softmax_w, -1.0);
        assert!(diff.max_abs() < 1e-12);
    }

    #[test]
    fn conv_backward_linear_in_upstream() {
        let (sp, _, _) = fixture(5, 2, 3, 4, Activation::Identity, PoolMode::Mean, 107);
        let mut rng = SeededRng::new(108);
        let d_pre: Vec<DenseMatrix> = (0..2)
            .map(|_| {
                let mut d = DenseMatrix::zeros(5, 4);
                for v in d.data_mut() {
                    *v = rng.uniform(-1.0, 1.0);
                }
                d
            })
            .collect();
        let base = conv_backward_theta(&sp, &d_pre).unwrap();
        let doubled: Vec<DenseMatrix> = d_pre
            .iter()
            .map(|d| {
                let mut x = d.clone();
                x.scale(2.0);
                x
            })
            .collect();
        let twice = conv_backward_theta(&sp, &doubled).unwrap();
        for (a, b) in base.data().iter().zip(twice.data()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn loss_decreases_under_gradient_descent() {
        let (sp, sq, mut params) = fixture(6, 2, 3, 4, Activation::Relu, PoolMode::Max, 109);
        let eval_loss = |params: &ModelParams| -> f64 {
            let out = mvgcn_forward(&sp, &sq, params).unwrap();
            cross_entropy(&out.probs, 1).unwrap().value
        };
        let mut last = eval_loss(&params);
        let initial = last;
        for _ in 0..10 {
            let out = mvgcn_forward(&sp, &sq, &params).unwrap();
            let grads = mvgcn_backward(&sp, &sq, &out, 1, &params).unwrap();
            params
                .theta
                .weights_mut()
                .add_scaled(&grads.d_theta, -1e-3);
            params.softmax_w.add_scaled(&grads.d_softmax_w, -1e-3);
            let loss = eval_loss(&params);
            assert!(loss <= last + 1e-9, "loss rose from {last} to {loss}");
            last = loss;
        }
        assert!(last < initial);
    }

    #[test]
    fn baseline_gradient_matches_fd() {
        let mut rng = SeededRng::new(120);
        let fcn = FcnParams::glorot(&[6, 5, 4], &mut rng).unwrap();
        let mut post = DenseLayer::glorot(3, 4, &mut rng);
        for b in post.bias.iter_mut() {
            *b = rng.uniform(-0.1, 0.1);
        }
        let mut softmax_w = DenseMatrix::zeros(2, 3);
        for v in softmax_w.data_mut() {
            *v = rng.uniform(-0.8, 0.8);
        }
        let params = BaselineParams {
            fcn: Some(fcn),
            post_match: Some(post),
            softmax_w,
        };
        let xp: Vec<f64> = (0..6).map(|_| rng.uniform(0.0, 1.0)).collect();
        let xq: Vec<f64> = (0..6).map(|_| rng.uniform(0.0, 1.0)).collect();
        let report = baseline_finite_difference_check(&params, &xp, &xq, 1, 1e-5).unwrap();
        assert!(report.checked > 0);
        assert!(
            report.max_rel_error < 1e-5,
            "max rel error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn baseline_without_extractor_matches_fd() {
        let mut rng = SeededRng::new(121);
        let mut softmax_w = DenseMatrix::zeros(2, 6);
        for v in softmax_w.data_mut() {
            *v = rng.uniform(-0.8, 0.8);
        }
        let params = BaselineParams {
            fcn: None,
            post_match: None,
            softmax_w,
        };
        let xp: Vec<f64> = (0..6).map(|_| rng.uniform(0.0, 1.0)).collect();
        let xq: Vec<f64> = (0..6).map(|_| rng.uniform(0.0, 1.0)).collect();
        let report = baseline_finite_difference_check(&params, &xp, &xq, 0, 1e-5).unwrap();
        assert!(report.max_rel_error < 1e-7);
    }

    #[test]
    fn fd_rejects_epsilon_out_of_range() {
        let (sp, sq, params) = fixture(4, 1, 2, 2, Activation::Relu, PoolMode::Max, 130);
        let mut rng = SeededRng::new(131);
        assert!(finite_difference_check(&sp, &sq, 0, &params, 1e-8, 10, &mut rng).is_err());
        assert!(finite_difference_check(&sp, &sq, 0, &params, 1e-3, 10, &mut rng).is_err());
    }
}
