//! Pair-score metrics, seeded clustering, and ROI-level similarity reports.
//!
//! AUC uses the rank form of the Mann-Whitney statistic with average ranks
//! for ties. K-means is k-means++ with a fixed restart schedule; every
//! restart derives its seed from the caller's seed, so runs of the same
//! build are bit-identical.

use crate::error::{Error, Result};
use crate::graph::ChebyshevStack;
use crate::model::{mvgcn_forward, ModelParams};
use crate::numerics::DenseMatrix;
use crate::training::PairSample;

/// Lloyd iteration cap per k-means restart.
pub const KMEANS_MAX_ITERS: usize = 300;

/// Restart count used by the clustering entry points unless overridden.
pub const KMEANS_RESTARTS: usize = 10;

/// Sentinel for acquisition pairs no fold ever scored.
pub const UNSCORED: f64 = -1.0;

/// One evaluated pair: the acquisitions compared and the match probability.
#[derive(Debug, Clone)]
pub struct ScoredPair {
    pub pair: PairSample,
    pub score: f64,
}

/// Area under the ROC curve via average ranks. Ties contribute half credit,
/// so the result equals the pairwise comparison count exactly.
pub fn auc(scored: &[ScoredPair]) -> Result<f64> {
    if scored.is_empty() {
        return Err(Error::invalid("auc needs at least one scored pair"));
    }
    let mut pos = 0usize;
    let mut neg = 0usize;
    for sp in scored {
        if !sp.score.is_finite() {
            return Err(Error::invalid("auc scores must be finite"));
        }
        match sp.pair.label {
            1 => pos += 1,
            0 => neg += 1,
            other => return Err(Error::invalid(format!("pair label {other} out of range"))),
        }
    }
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(
            "auc needs both matching and non-matching pairs",
        ));
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[a]
            .score
            .partial_cmp(&scored[b].score)
            .expect("scores are finite")
    });
    // 1-based ranks, averaged over each run of equal scores.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].score == scored[order[i]].score {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if scored[idx].pair.label == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let np = pos as f64;
    let u = rank_sum_pos - np * (np + 1.0) / 2.0;
    Ok(u / (np * neg as f64))
}

/// Result of the winning k-means restart.
#[derive(Debug, Clone)]
pub struct KmeansOutcome {
    pub assignments: Vec<usize>,
    pub centroids: DenseMatrix,
    pub wcss: f64,
    pub iterations: usize,
    /// Objective after each assignment step of the winning restart.
    pub wcss_trace: Vec<f64>,
    /// Restart index that won the (wcss, restart) tie-break.
    pub restart: usize,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid; ties keep the lowest centroid index.
fn nearest_centroid(point: &[f64], centroids: &DenseMatrix) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = squared_distance(point, centroids.row(0));
    for c in 1..centroids.rows() {
        let d = squared_distance(point, centroids.row(c));
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    (best, best_d)
}

fn kmeans_once(points: &DenseMatrix, k: usize, seed: u64) -> KmeansOutcome {
    let n = points.rows();
    let d = points.cols();
    let mut rng = crate::numerics::SeededRng::new(seed);
    let mut centroids = DenseMatrix::zeros(k, d);
    // k-means++: first centroid uniform, the rest weighted by squared
    // distance to the nearest centroid chosen so far.
    let first = rng.below(n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let pick = rng.weighted_index(&min_d2);
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, slot) in min_d2.iter_mut().enumerate() {
            let d2 = squared_distance(points.row(i), centroids.row(c));
            if d2 < *slot {
                *slot = d2;
            }
        }
    }
    let mut assignments = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        iterations += 1;
        let mut changed = false;
        let mut objective = 0.0;
        for i in 0..n {
            let (c, d2) = nearest_centroid(points.row(i), &centroids);
            objective += d2;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        trace.push(objective);
        if !changed || iterations == KMEANS_MAX_ITERS {
            break;
        }
        let mut sums = DenseMatrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let row = sums.row_mut(assignments[i]);
            for (s, v) in row.iter_mut().zip(points.row(i)) {
                *s += v;
            }
            counts[assignments[i]] += 1;
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Empty cluster: reseed at the point farthest from its
                // current centroid, then claim that point so a later empty
                // cluster picks a different one.
                let mut far = 0;
                let mut far_d = -1.0;
                for i in 0..n {
                    let d2 = squared_distance(points.row(i), centroids.row(assignments[i]));
                    if d2 > far_d {
                        far = i;
                        far_d = d2;
                    }
                }
                let src = points.row(far).to_vec();
                centroids.row_mut(c).copy_from_slice(&src);
                assignments[far] = c;
            } else {
                for j in 0..d {
                    centroids.set(c, j, sums.get(c, j) / counts[c] as f64);
                }
            }
        }
    }
    let wcss = *trace.last().expect("at least one iteration ran");
    KmeansOutcome {
        assignments,
        centroids,
        wcss,
        iterations,
        wcss_trace: trace,
        restart: 0,
    }
}

/// Seeded k-means++ with Lloyd refinement. Restart `r` runs with seed
/// `seed + r`; the winner is the lowest WCSS with ties going to the
/// earlier restart.
pub fn kmeans(points: &DenseMatrix, k: usize, seed: u64, restarts: usize) -> Result<KmeansOutcome> {
    let n = points.rows();
    if n == 0 {
        return Err(Error::invalid("k-means needs at least one point"));
    }
    if k == 0 {
        return Err(Error::invalid("k-means needs k >= 1"));
    }
    if k > n {
        return Err(Error::invalid(format!("k={k} exceeds {n} points")));
    }
    if restarts == 0 {
        return Err(Error::invalid("k-means needs at least one restart"));
    }
    if !points.is_finite() {
        return Err(Error::invalid("k-means points must be finite"));
    }
    let mut best: Option<KmeansOutcome> = None;
    for r in 0..restarts {
        let mut out = kmeans_once(points, k, seed.wrapping_add(r as u64));
        out.restart = r;
        let better = match &best {
            None => true,
            Some(b) => out.wcss < b.wcss,
        };
        if better {
            best = Some(out);
        }
    }
    Ok(best.expect("restarts >= 1"))
}

/// True when the two labelings induce the same partition (bijective label map).
fn partitions_identical(a: &[usize], b: &[usize]) -> bool {
    use std::collections::HashMap;
    let mut fwd: HashMap<usize, usize> = HashMap::new();
    let mut rev: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        if *fwd.entry(x).or_insert(y) != y {
            return false;
        }
        if *rev.entry(y).or_insert(x) != x {
            return false;
        }
    }
    true
}

/// Remap arbitrary labels to 0..k, returning the compacted labels and k.
fn compact_labels(xs: &[usize]) -> (Vec<usize>, usize) {
    let mut uniq: Vec<usize> = xs.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    let compact = xs
        .iter()
        .map(|v| uniq.binary_search(v).expect("value came from xs"))
        .collect();
    (compact, uniq.len())
}

/// Normalized mutual information with sqrt normalization,
/// MI / sqrt(H(A) H(B)), in nats. Identical partitions (any relabeling)
/// return exactly 1.0; if either side has zero entropy and the partitions
/// differ, the score is 0.0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "label vectors differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("nmi needs at least one label"));
    }
    if partitions_identical(a, b) {
        return Ok(1.0);
    }
    let (ca, ka) = compact_labels(a);
    let (cb, kb) = compact_labels(b);
    let n = a.len() as f64;
    let mut joint = vec![0usize; ka * kb];
    let mut row = vec![0usize; ka];
    let mut col = vec![0usize; kb];
    for (&x, &y) in ca.iter().zip(&cb) {
        joint[x * kb + y] += 1;
        row[x] += 1;
        col[y] += 1;
    }
    let entropy = |counts: &[usize]| -> f64 {
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    };
    let ha = entropy(&row);
    let hb = entropy(&col);
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for x in 0..ka {
        for y in 0..kb {
            let c = joint[x * kb + y];
            if c > 0 {
                let p = c as f64 / n;
                mi += p * ((c as f64 * n) / (row[x] as f64 * col[y] as f64)).ln();
            }
        }
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

/// Assemble all scored pairs into an acquisition-level similarity matrix.
/// Diagonal is 1.0; pairs never scored stay at the -1.0 sentinel.
pub fn similarity_matrix(scored: &[ScoredPair], n: usize) -> Result<DenseMatrix> {
    if n == 0 {
        return Err(Error::invalid("similarity matrix needs n >= 1"));
    }
    let mut m = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m.set(i, j, if i == j { 1.0 } else { UNSCORED });
        }
    }
    for sp in scored {
        let (p, q) = (sp.pair.idx_p, sp.pair.idx_q);
        if p >= q {
            return Err(Error::invalid(format!("pair indices not ordered: ({p},{q})")));
        }
        if q >= n {
            return Err(Error::invalid(format!(
                "pair index {q} out of range for {n} acquisitions"
            )));
        }
        if !sp.score.is_finite() || !(0.0..=1.0).contains(&sp.score) {
            return Err(Error::invalid(format!(
                "similarity score {} outside [0, 1]",
                sp.score
            )));
        }
        if m.get(p, q) != UNSCORED {
            return Err(Error::invalid(format!("pair ({p},{q}) scored twice")));
        }
        m.set(p, q, sp.score);
        m.set(q, p, sp.score);
    }
    Ok(m)
}

/// K-means assignment over similarity rows plus agreement with the labels.
#[derive(Debug, Clone)]
pub struct ClusterOutcome {
    pub assignments: Vec<usize>,
    pub nmi: f64,
    pub wcss: f64,
}

/// Cluster acquisitions by their similarity rows. Unscored entries are
/// filled with the row mean of the scored entries (the 1.0 diagonal counts
/// as scored), then k-means runs on the filled rows.
pub fn cluster_acquisitions(
    similarity: &DenseMatrix,
    labels: &[usize],
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<ClusterOutcome> {
    if !similarity.is_square() {
        return Err(Error::invalid("similarity matrix must be square"));
    }
    let n = similarity.rows();
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{} labels for {n} similarity rows",
            labels.len()
        )));
    }
    let mut feats = DenseMatrix::zeros(n, n);
    for i in 0..n {
        let row = similarity.row(i);
        let mut sum = 0.0;
        let mut cnt = 0usize;
        for &v in row {
            if v == UNSCORED {
                continue;
            }
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "similarity entry {v} is neither a score in [0, 1] nor the sentinel"
                )));
            }
            sum += v;
            cnt += 1;
        }
        if cnt == 0 {
            return Err(Error::invalid(format!("similarity row {i} has no scored entries")));
        }
        let mean = sum / cnt as f64;
        for j in 0..n {
            feats.set(i, j, if row[j] == UNSCORED { mean } else { row[j] });
        }
    }
    let km = kmeans(&feats, k, seed, restarts)?;
    let score = nmi(&km.assignments, labels)?;
    Ok(ClusterOutcome {
        assignments: km.assignments,
        nmi: score,
        wcss: km.wcss,
    })
}

/// Which acquisition pairs a ROI report aggregates over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairGroup {
    /// All pairs inside one class.
    Within(usize),
    /// All pairs whose members belong to different classes.
    Between,
}

impl PairGroup {
    pub fn name(&self) -> String {
        match self {
            PairGroup::Within(c) => format!("within{c}"),
            PairGroup::Between => "between".to_string(),
        }
    }
}

/// Per-ROI mean matching scores over one pair group, with ranked extremes.
#[derive(Debug, Clone)]
pub struct RoiGroupReport {
    pub group: PairGroup,
    pub pair_count: usize,
    /// Mean matching score per ROI over every pair in the group.
    pub mean_r: Vec<f64>,
    /// ROI indices by descending mean score, truncated to top_k.
    pub top_similar: Vec<usize>,
    /// ROI indices by ascending mean score, truncated to top_k.
    pub top_dissimilar: Vec<usize>,
}

/// Average the per-ROI matching vector over every pair in a group.
/// `stacks[i]` holds acquisition i's filter stacks, one per view.
pub fn roi_group_report(
    labels: &[usize],
    stacks: &[Vec<ChebyshevStack>],
    params: &ModelParams,
    group: PairGroup,
    top_k: usize,
) -> Result<RoiGroupReport> {
    if stacks.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} stacks for {} labels",
            stacks.len(),
            labels.len()
        )));
    }
    if stacks.is_empty() || stacks[0].is_empty() {
        return Err(Error::invalid("roi report needs at least one acquisition and view"));
    }
    let n = stacks[0][0].n();
    if top_k == 0 || top_k > n {
        return Err(Error::invalid(format!("top_k={top_k} outside 1..={n}")));
    }
    let mut pairs = Vec::new();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            let keep = match group {
                PairGroup::Within(c) => labels[i] == c && labels[j] == c,
                PairGroup::Between => labels[i] != labels[j],
            };
            if keep {
                pairs.push((i, j));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::invalid(format!("group {} has no pairs", group.name())));
    }
    let mut mean_r = vec![0.0; n];
    for &(i, j) in &pairs {
        let out = mvgcn_forward(&stacks[i], &stacks[j], params)?;
        for (acc, v) in mean_r.iter_mut().zip(&out.r) {
            *acc += v;
        }
    }
    for v in &mut mean_r {
        *v /= pairs.len() as f64;
    }
    let mut by_desc: Vec<usize> = (0..n).collect();
    by_desc.sort_by(|&x, &y| {
        mean_r[y]
            .partial_cmp(&mean_r[x])
            .expect("mean scores are finite")
            .then(x.cmp(&y))
    });
    let mut by_asc: Vec<usize> = (0..n).collect();
    by_asc.sort_by(|&x, &y| {
        mean_r[x]
            .partial_cmp(&mean_r[y])
            .expect("mean scores are finite")
            .then(x.cmp(&y))
    });
    Ok(RoiGroupReport {
        group,
        pair_count: pairs.len(),
        mean_r,
        top_similar: by_desc[..top_k].to_vec(),
        top_dissimilar: by_asc[..top_k].to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::spectral_operator_from_adjacency;
    use crate::model::{Activation, PoolMode};
    use crate::numerics::SeededRng;

    fn sp(i: usize, score: f64, label: usize) -> ScoredPair {
        ScoredPair {
            pair: PairSample {
                idx_p: 2 * i,
                idx_q: 2 * i + 1,
                label,
            },
            score,
        }
    }

    fn auc_brute(scored: &[ScoredPair]) -> f64 {
        let pos: Vec<f64> = scored
            .iter()
            .filter(|s| s.pair.label == 1)
            .map(|s| s.score)
            .collect();
        let neg: Vec<f64> = scored
            .iter()
            .filter(|s| s.pair.label == 0)
            .map(|s| s.score)
            .collect();
        let mut total = 0.0;
        for &p in &pos {
            for &q in &neg {
                total += if p > q {
                    1.0
                } else if p == q {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auc_hand_values() {
        let perfect = vec![sp(0, 0.9, 1), sp(1, 0.8, 1), sp(2, 0.2, 0), sp(3, 0.1, 0)];
        assert_eq!(auc(&perfect).unwrap(), 1.0);

        let mixed = vec![sp(0, 0.9, 1), sp(1, 0.3, 1), sp(2, 0.6, 0), sp(3, 0.2, 0)];
        assert!((auc(&mixed).unwrap() - 0.75).abs() < 1e-15);

        let all_tied = vec![sp(0, 0.5, 1), sp(1, 0.5, 0), sp(2, 0.5, 1), sp(3, 0.5, 0)];
        assert!((auc(&all_tied).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn auc_matches_brute_force_with_ties() {
        let mut rng = SeededRng::new(401);
        for _ in 0..40 {
            let len = 3 + rng.below(30);
            let mut scored = vec![sp(0, rng.below(9) as f64 / 8.0, 1), sp(1, rng.below(9) as f64 / 8.0, 0)];
            for i in 2..len {
                scored.push(sp(i, rng.below(9) as f64 / 8.0, rng.below(2)));
            }
            let fast = auc(&scored).unwrap();
            let brute = auc_brute(&scored);
            assert!(
                (fast - brute).abs() < 1e-12,
                "rank auc {fast} vs brute {brute}"
            );
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let mut rng = SeededRng::new(77);
        let scored: Vec<ScoredPair> = (0..50)
            .map(|i| sp(i, rng.uniform(0.01, 0.99), rng.below(2)))
            .collect();
        let cubed: Vec<ScoredPair> = scored
            .iter()
            .map(|s| ScoredPair {
                pair: s.pair.clone(),
                score: s.score.powi(3),
            })
            .collect();
        assert!((auc(&scored).unwrap() - auc(&cubed).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn auc_label_flip_complements_without_ties() {
        let mut rng = SeededRng::new(91);
        // Distinct scores by construction: index-offset grid.
        let scored: Vec<ScoredPair> = (0..30)
            .map(|i| sp(i, i as f64 / 30.0 + rng.uniform(0.0, 0.01), rng.below(2)))
            .collect();
        let flipped: Vec<ScoredPair> = scored
            .iter()
            .map(|s| {
                let mut pair = s.pair.clone();
                pair.label = 1 - pair.label;
                ScoredPair { pair, score: s.score }
            })
            .collect();
        let a = auc(&scored).unwrap();
        let b = auc(&flipped).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12, "{a} + {b} != 1");
    }

    #[test]
    fn auc_rejects_single_class_and_empty() {
        assert!(auc(&[]).is_err());
        assert!(auc(&[sp(0, 0.5, 1), sp(1, 0.6, 1)]).is_err());
        assert!(auc(&[sp(0, 0.5, 0)]).is_err());
    }

    #[test]
    fn kmeans_two_points_two_clusters() {
        let points = DenseMatrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]);
        let out = kmeans(&points, 2, 9, 3).unwrap();
        assert_eq!(out.wcss, 0.0);
        assert_ne!(out.assignments[0], out.assignments[1]);
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut rng = SeededRng::new(5);
        let mut rows = Vec::new();
        for _ in 0..20 {
            rows.push(vec![rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)]);
        }
        for _ in 0..20 {
            rows.push(vec![100.0 + rng.uniform(-1.0, 1.0), 100.0 + rng.uniform(-1.0, 1.0)]);
        }
        let points = DenseMatrix::from_rows(&rows);
        let out = kmeans(&points, 2, 17, 10).unwrap();
        let first = out.assignments[0];
        assert!(out.assignments[..20].iter().all(|&a| a == first));
        assert!(out.assignments[20..].iter().all(|&a| a != first));
        assert!(out.wcss < 200.0);
    }

    #[test]
    fn kmeans_k1_centroid_is_the_mean() {
        let mut rng = SeededRng::new(23);
        let rows: Vec<Vec<f64>> = (0..15)
            .map(|_| (0..3).map(|_| rng.uniform(-5.0, 5.0)).collect())
            .collect();
        let points = DenseMatrix::from_rows(&rows);
        let out = kmeans(&points, 1, 3, 2).unwrap();
        for j in 0..3 {
            let mean: f64 = rows.iter().map(|r| r[j]).sum::<f64>() / 15.0;
            assert!((out.centroids.get(0, j) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn kmeans_trace_never_increases() {
        let mut rng = SeededRng::new(31);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..3).map(|_| rng.uniform(0.0, 10.0)).collect())
            .collect();
        let points = DenseMatrix::from_rows(&rows);
        let out = kmeans(&points, 4, 7, 5).unwrap();
        for w in out.wcss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "trace rose: {} -> {}", w[0], w[1]);
        }
        assert_eq!(out.wcss, *out.wcss_trace.last().unwrap());
        assert!(out.iterations <= KMEANS_MAX_ITERS);
    }

    #[test]
    fn kmeans_rejects_bad_arguments() {
        let points = DenseMatrix::from_rows(&[vec![0.0], vec![1.0]]);
        assert!(kmeans(&points, 3, 1, 1).is_err());
        assert!(kmeans(&points, 0, 1, 1).is_err());
        assert!(kmeans(&points, 1, 1, 0).is_err());
        assert!(kmeans(&DenseMatrix::zeros(0, 2), 1, 1, 1).is_err());
    }

    #[test]
    fn kmeans_same_seed_same_result() {
        let mut rng = SeededRng::new(47);
        let rows: Vec<Vec<f64>> = (0..30)
            .map(|_| (0..4).map(|_| rng.uniform(0.0, 1.0)).collect())
            .collect();
        let points = DenseMatrix::from_rows(&rows);
        let a = kmeans(&points, 3, 99, 10).unwrap();
        let b = kmeans(&points, 3, 99, 10).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.wcss.to_bits(), b.wcss.to_bits());
        assert_eq!(a.restart, b.restart);
    }

    #[test]
    fn nmi_identical_up_to_relabeling_is_exactly_one() {
        let a = vec![0, 1, 0, 2, 1, 2];
        let b = vec![5, 9, 5, 7, 9, 7];
        assert_eq!(nmi(&a, &b).unwrap(), 1.0);
        assert_eq!(nmi(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn nmi_frozen_two_by_two_case() {
        // Contingency (2,1;0,1): MI = 0.21576155433883565 nats,
        // H(A) = 0.5623351446188083, H(B) = ln 2.
        let a = vec![0, 0, 0, 1];
        let b = vec![0, 0, 1, 1];
        let got = nmi(&a, &b).unwrap();
        assert!(
            (got - 0.3455920299442113).abs() < 1e-9,
            "sqrt-normalized nmi was {got}"
        );
    }

    #[test]
    fn nmi_independent_partitions_score_zero() {
        let a = vec![0, 0, 1, 1];
        let b = vec![0, 1, 0, 1];
        assert_eq!(nmi(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn nmi_zero_entropy_cases() {
        // Both single-cluster: identical partitions.
        assert_eq!(nmi(&[3, 3, 3], &[8, 8, 8]).unwrap(), 1.0);
        // One side constant, the other split: defined as zero.
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn nmi_is_symmetric_and_bounded() {
        let mut rng = SeededRng::new(13);
        for _ in 0..10 {
            let a: Vec<usize> = (0..40).map(|_| rng.below(3)).collect();
            let b: Vec<usize> = (0..40).map(|_| rng.below(4)).collect();
            let ab = nmi(&a, &b).unwrap();
            let ba = nmi(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn nmi_rejects_mismatched_or_empty() {
        assert!(nmi(&[0, 1], &[0]).is_err());
        assert!(nmi(&[], &[]).is_err());
    }

    #[test]
    fn similarity_matrix_layout_and_sentinels() {
        let scored = vec![
            ScoredPair {
                pair: PairSample { idx_p: 0, idx_q: 1, label: 1 },
                score: 0.8,
            },
            ScoredPair {
                pair: PairSample { idx_p: 2, idx_q: 3, label: 0 },
                score: 0.3,
            },
        ];
        let m = similarity_matrix(&scored, 4).unwrap();
        for i in 0..4 {
            assert_eq!(m.get(i, i), 1.0);
            for j in 0..4 {
                assert_eq!(m.get(i, j), m.get(j, i));
            }
        }
        assert_eq!(m.get(0, 1), 0.8);
        assert_eq!(m.get(2, 3), 0.3);
        assert_eq!(m.get(0, 2), UNSCORED);
        assert_eq!(m.get(1, 3), UNSCORED);
    }

    #[test]
    fn similarity_matrix_rejects_bad_pairs() {
        let dup = vec![
            ScoredPair {
                pair: PairSample { idx_p: 0, idx_q: 1, label: 1 },
                score: 0.8,
            },
            ScoredPair {
                pair: PairSample { idx_p: 0, idx_q: 1, label: 1 },
                score: 0.7,
            },
        ];
        assert!(similarity_matrix(&dup, 3).is_err());

        let out_of_range = vec![ScoredPair {
            pair: PairSample { idx_p: 0, idx_q: 5, label: 1 },
            score: 0.8,
        }];
        assert!(similarity_matrix(&out_of_range, 3).is_err());

        let bad_score = vec![ScoredPair {
            pair: PairSample { idx_p: 0, idx_q: 1, label: 1 },
            score: 1.5,
        }];
        assert!(similarity_matrix(&bad_score, 3).is_err());
    }

    #[test]
    fn clustering_block_similarity_recovers_classes() {
        let labels = vec![0, 0, 0, 1, 1, 1];
        let mut scored = Vec::new();
        for i in 0..6 {
            for j in i + 1..6 {
                let same = labels[i] == labels[j];
                scored.push(ScoredPair {
                    pair: PairSample {
                        idx_p: i,
                        idx_q: j,
                        label: usize::from(same),
                    },
                    score: if same { 0.9 } else { 0.1 },
                });
            }
        }
        let sim = similarity_matrix(&scored, 6).unwrap();
        let out = cluster_acquisitions(&sim, &labels, 2, 5, 4).unwrap();
        assert_eq!(out.nmi, 1.0);
    }

    #[test]
    fn clustering_random_similarity_stays_near_chance() {
        let labels: Vec<usize> = (0..60).map(|i| usize::from(i >= 30)).collect();
        for seed in 0..5u64 {
            let mut rng = SeededRng::new(1000 + seed);
            let mut scored = Vec::new();
            for i in 0..60 {
                for j in i + 1..60 {
                    scored.push(ScoredPair {
                        pair: PairSample {
                            idx_p: i,
                            idx_q: j,
                            label: usize::from(labels[i] == labels[j]),
                        },
                        score: rng.uniform(0.0, 1.0),
                    });
                }
            }
            let sim = similarity_matrix(&scored, 60).unwrap();
            let out = cluster_acquisitions(&sim, &labels, 2, seed, 10).unwrap();
            assert!(out.nmi < 0.3, "seed {seed} gave nmi {}", out.nmi);
        }
    }

    #[test]
    fn clustering_fills_unscored_rows_with_row_means() {
        let labels = vec![0, 0, 1, 1];
        let scored = vec![
            ScoredPair {
                pair: PairSample { idx_p: 0, idx_q: 1, label: 1 },
                score: 0.9,
            },
            ScoredPair {
                pair: PairSample { idx_p: 2, idx_q: 3, label: 1 },
                score: 0.8,
            },
        ];
        let sim = similarity_matrix(&scored, 4).unwrap();
        let out = cluster_acquisitions(&sim, &labels, 2, 11, 5).unwrap();
        assert_eq!(out.assignments.len(), 4);
        assert!((0.0..=1.0).contains(&out.nmi));
    }

    /// Path graph on four vertices; weights 1 keep the spectrum simple.
    fn path_operator() -> crate::graph::SpectralOperator {
        let mut adj = DenseMatrix::zeros(4, 4);
        for (i, j) in [(0usize, 1usize), (1, 2), (2, 3)] {
            adj.set(i, j, 1.0);
            adj.set(j, i, 1.0);
        }
        spectral_operator_from_adjacency(&adj).unwrap()
    }

    fn stack_for(x: &DenseMatrix, s: usize) -> ChebyshevStack {
        crate::graph::chebyshev_apply(&path_operator(), x, s).unwrap()
    }

    #[test]
    fn roi_report_identical_acquisitions_score_one() {
        let mut rng = SeededRng::new(3);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..4).map(|_| rng.uniform(0.1, 1.0)).collect())
            .collect();
        let x = DenseMatrix::from_rows(&rows);
        let stacks: Vec<Vec<ChebyshevStack>> =
            (0..3).map(|_| vec![stack_for(&x, 3)]).collect();
        let labels = vec![0, 0, 1];
        let params = ModelParams::init(
            4,
            5,
            3,
            4,
            Activation::Identity,
            PoolMode::Mean,
            &mut SeededRng::new(8),
        );
        let report =
            roi_group_report(&labels, &stacks, &params, PairGroup::Within(0), 2).unwrap();
        assert_eq!(report.pair_count, 1);
        for &v in &report.mean_r {
            assert!((v - 1.0).abs() < 1e-9, "identical branches gave r={v}");
        }
        assert_eq!(report.top_similar.len(), 2);
        assert_eq!(report.top_dissimilar.len(), 2);
    }

    #[test]
    fn roi_report_full_rankings_are_reverses() {
        let mut rng = SeededRng::new(21);
        let stacks: Vec<Vec<ChebyshevStack>> = (0..4)
            .map(|_| {
                let rows: Vec<Vec<f64>> = (0..4)
                    .map(|_| (0..4).map(|_| rng.uniform(0.1, 1.0)).collect())
                    .collect();
                vec![stack_for(&DenseMatrix::from_rows(&rows), 3)]
            })
            .collect();
        let labels = vec![0, 0, 1, 1];
        let params = ModelParams::init(
            4,
            6,
            3,
            4,
            Activation::Relu,
            PoolMode::Max,
            &mut SeededRng::new(14),
        );
        let report =
            roi_group_report(&labels, &stacks, &params, PairGroup::Between, 4).unwrap();
        assert_eq!(report.pair_count, 4);
        let mut reversed = report.top_dissimilar.clone();
        reversed.reverse();
        assert_eq!(report.top_similar, reversed);
        for &v in &report.mean_r {
            assert!((-1.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn roi_report_rejects_bad_requests() {
        let mut rng = SeededRng::new(2);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..4).map(|_| rng.uniform(0.1, 1.0)).collect())
            .collect();
        let x = DenseMatrix::from_rows(&rows);
        let stacks: Vec<Vec<ChebyshevStack>> =
            (0..2).map(|_| vec![stack_for(&x, 2)]).collect();
        let labels = vec![0, 0];
        let params = ModelParams::init(
            4,
            3,
            2,
            4,
            Activation::Relu,
            PoolMode::Max,
            &mut SeededRng::new(1),
        );
        assert!(roi_group_report(&labels, &stacks, &params, PairGroup::Within(0), 0).is_err());
        assert!(roi_group_report(&labels, &stacks, &params, PairGroup::Within(0), 9).is_err());
        assert!(roi_group_report(&labels, &stacks, &params, PairGroup::Between, 2).is_err());
        assert!(roi_group_report(&labels[..1], &stacks, &params, PairGroup::Within(0), 2).is_err());
    }
}
