//! End-to-end acceptance checks, one test per release criterion. Each
//! test prints a single `criterion N PASS` line with the measured
//! numbers; an assertion failure marks the criterion failed.

use mvgcn_core::autodiff::finite_difference_check;
use mvgcn_core::dataio::{generate_synthetic, SynthConfig};
use mvgcn_core::eval::{auc, ScoredPair};
use mvgcn_core::graph::{
    build_bgg, build_spectral_operator, chebyshev_apply, spectral_operator_from_adjacency,
    RoiAtlas, SigmaPolicy,
};
use mvgcn_core::model::{Activation, ModelParams, PoolMode};
use mvgcn_core::numerics::{sym_eig, DenseMatrix, SeededRng};
use mvgcn_core::training::{generate_pairs, run_cross_validation, ModelKind, PairSample, TrainConfig};
use std::path::Path;
use std::process::Command;

/// Connected weighted graph on n vertices: a ring for connectivity plus
/// random extra edges, weights uniform in (0.1, 1).
fn random_adjacency(n: usize, rng: &mut SeededRng) -> DenseMatrix {
    let mut a = DenseMatrix::zeros(n, n);
    let link = |a: &mut DenseMatrix, i: usize, j: usize, w: f64| {
        a.set(i, j, w);
        a.set(j, i, w);
    };
    for i in 0..n {
        let j = (i + 1) % n;
        if i != j {
            link(&mut a, i, j, rng.uniform(0.1, 1.0));
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.next_f64() < 0.3 {
                link(&mut a, i, j, rng.uniform(0.1, 1.0));
            }
        }
    }
    a
}

#[test]
fn criterion_01_pair_counts() {
    let mut labels = vec![0usize; 596];
    labels.extend(std::iter::repeat(1).take(158));
    let subset: Vec<usize> = (0..labels.len()).collect();
    let pairs = generate_pairs(&labels, &subset).unwrap();
    let total = pairs.len();
    let matching = pairs.iter().filter(|p| p.label == 1).count();
    let non_matching = total - matching;
    assert_eq!(total, 283_881);
    assert_eq!(matching, 189_713);
    assert_eq!(non_matching, 94_168);
    println!("criterion 1 PASS: pairs {total} = {matching} matching + {non_matching} non-matching");
}

#[test]
fn criterion_02_spectral_oracle() {
    let mut rng = SeededRng::new(202);
    let mut worst = 0.0f64;
    for case in 0..50u64 {
        let n = 4 + (rng.below(13));
        let s = 1 + rng.below(10);
        let a = random_adjacency(n, &mut rng);
        let op = spectral_operator_from_adjacency(&a).unwrap();
        let (values, u) = sym_eig(op.scaled_laplacian()).unwrap();
        let mut x = DenseMatrix::zeros(n, 1);
        for v in x.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
        let stack = chebyshev_apply(&op, &x, s).unwrap();
        // Spectral-domain oracle: scalar recurrence on each eigenvalue.
        let xs = x.column(0);
        let x_hat = u.matmul_at_b(&DenseMatrix::from_vec(n, 1, xs.clone()));
        let mut t_prev: Vec<f64> = vec![1.0; n];
        let mut t_curr: Vec<f64> = values.clone();
        for p in 0..s {
            let t: &[f64] = match p {
                0 => &t_prev,
                1 => &t_curr,
                _ => {
                    let next: Vec<f64> = (0..n)
                        .map(|i| 2.0 * values[i] * t_curr[i] - t_prev[i])
                        .collect();
                    t_prev = std::mem::replace(&mut t_curr, next);
                    &t_curr
                }
            };
            let filtered: Vec<f64> = (0..n).map(|i| t[i] * x_hat.get(i, 0)).collect();
            let expected = u.matvec(&filtered);
            for i in 0..n {
                let diff = (stack.basis()[p].get(i, 0) - expected[i]).abs();
                worst = worst.max(diff);
                assert!(
                    diff < 1e-10,
                    "case {case}: basis {p} vertex {i} off by {diff:e}"
                );
            }
        }
    }
    println!("criterion 2 PASS: 50 graphs, max abs deviation {worst:e} < 1e-10");
}

#[test]
fn criterion_03_laplacian_bounds() {
    let mut rng = SeededRng::new(303);
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for _ in 0..100 {
        let n = 4 + rng.below(13);
        let a = random_adjacency(n, &mut rng);
        let op = spectral_operator_from_adjacency(&a).unwrap();
        let (values, _) = sym_eig(op.laplacian()).unwrap();
        for v in values {
            assert!(v >= -1e-12 && v <= 2.0 + 1e-12, "laplacian eigenvalue {v}");
        }
        let (scaled, _) = sym_eig(op.scaled_laplacian()).unwrap();
        for v in scaled {
            lo = lo.min(v);
            hi = hi.max(v);
            assert!(
                v >= -1.0 - 1e-10 && v <= 1.0 + 1e-10,
                "scaled eigenvalue {v}"
            );
        }
    }
    println!("criterion 3 PASS: 100 graphs, scaled spectrum within [{lo:.12}, {hi:.12}]");
}

/// Random geometry, signals, and parameters for one gradient-check
/// instance; mirrors the `gradcheck` subcommand fixture.
fn fd_instance(
    n: usize,
    m: usize,
    s: usize,
    f_out: usize,
    activation: Activation,
    pool: PoolMode,
    seed: u64,
) -> (
    Vec<mvgcn_core::graph::ChebyshevStack>,
    Vec<mvgcn_core::graph::ChebyshevStack>,
    ModelParams,
) {
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
    let stacks_p: Vec<_> = (0..m)
        .map(|_| chebyshev_apply(&op, &signal(&mut rng), s).unwrap())
        .collect();
    let stacks_q: Vec<_> = (0..m)
        .map(|_| chebyshev_apply(&op, &signal(&mut rng), s).unwrap())
        .collect();
    let mut params = ModelParams::init(n, f_out, s, n, activation, pool, &mut rng);
    for v in params.softmax_w.data_mut() {
        *v = rng.uniform(-0.8, 0.8);
    }
    (stacks_p, stacks_q, params)
}

#[test]
fn criterion_04_gradient_verification() {
    let shapes = [(4usize, 1usize, 2usize, 2usize), (6, 2, 3, 4), (8, 3, 5, 8)];
    let pools = [PoolMode::Max, PoolMode::Mean];
    let activations = [Activation::Relu, Activation::Identity];
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for i in 0..20usize {
        let (n, m, s, f_out) = shapes[i % shapes.len()];
        let pool = pools[(i / shapes.len()) % pools.len()];
        let activation = activations[(i / (shapes.len() * pools.len())) % activations.len()];
        let seed = 40_000 + i as u64;
        let (sp, sq, params) = fd_instance(n, m, s, f_out, activation, pool, seed);
        let mut rng = SeededRng::new(seed ^ 0xFD);
        let report =
            finite_difference_check(&sp, &sq, i % 2, &params, 1e-5, 40, &mut rng).unwrap();
        worst = worst.max(report.max_rel_error);
        checked += report.checked;
        assert!(
            report.max_rel_error < 1e-5,
            "instance {i}: max relative error {:e}",
            report.max_rel_error
        );
    }
    println!("criterion 4 PASS: 20 instances, {checked} coordinates, max rel error {worst:e} < 1e-5");
}

#[test]
fn criterion_05_auc_oracle() {
    let mut rng = SeededRng::new(505);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n_pos = 1 + rng.below(30);
        let n_neg = 1 + rng.below(30);
        let mut scored = Vec::new();
        let mut idx = 0usize;
        for label in [1usize, 0] {
            let count = if label == 1 { n_pos } else { n_neg };
            for _ in 0..count {
                // Coarse quantization forces tied scores across classes.
                let score = (rng.below(10) as f64) / 10.0;
                scored.push(ScoredPair {
                    pair: PairSample::new(idx, idx + 1, label == 1).unwrap(),
                    score,
                });
                idx += 2;
            }
        }
        let fast = auc(&scored).unwrap();
        let mut wins = 0.0f64;
        for p in scored.iter().filter(|s| s.pair.label == 1) {
            for q in scored.iter().filter(|s| s.pair.label == 0) {
                if p.score > q.score {
                    wins += 1.0;
                } else if p.score == q.score {
                    wins += 0.5;
                }
            }
        }
        let brute = wins / (n_pos as f64 * n_neg as f64);
        let diff = (fast - brute).abs();
        worst = worst.max(diff);
        assert!(diff <= 1e-12, "case {case}: fast {fast} vs brute {brute}");
    }
    println!("criterion 5 PASS: 100 score sets, max deviation {worst:e} <= 1e-12");
}

fn separation_dataset() -> mvgcn_core::dataio::Dataset {
    generate_synthetic(&SynthConfig {
        n: 20,
        m: 3,
        per_class: [36, 24],
        class_separation: 0.8,
        noise: 0.1,
        seed: 7,
    })
    .unwrap()
}

fn separation_config(pool: PoolMode) -> TrainConfig {
    TrainConfig {
        s: 8,
        f_out: 16,
        lr: 0.005,
        epochs: 20,
        folds: 5,
        seed: 7,
        pool_mode: pool,
        ..TrainConfig::default()
    }
}

#[test]
fn criterion_06_synthetic_separation() {
    let dataset = separation_dataset();
    let outcome = run_cross_validation(
        &dataset,
        &separation_config(PoolMode::Max),
        &ModelKind::Mvgcn { views: vec![] },
    )
    .unwrap();
    assert!(
        outcome.auc_mean >= 0.95,
        "mean AUC {} below 0.95",
        outcome.auc_mean
    );
    assert!(outcome.nmi >= 0.9, "NMI {} below 0.9", outcome.nmi);
    println!(
        "criterion 6 PASS: mean AUC {:.4} >= 0.95, NMI {:.4} >= 0.9",
        outcome.auc_mean, outcome.nmi
    );
}

#[test]
fn criterion_07_multi_view_benefit() {
    let seeds = [11u64, 12, 13];
    let mut fused = 0.0f64;
    let mut single = [0.0f64; 3];
    for &seed in &seeds {
        let dataset = generate_synthetic(&SynthConfig {
            n: 16,
            m: 3,
            per_class: [24, 18],
            class_separation: 0.85,
            noise: 0.12,
            seed,
        })
        .unwrap();
        let config = TrainConfig {
            s: 6,
            f_out: 32,
            epochs: 20,
            batch_size: 64,
            folds: 5,
            seed,
            ..TrainConfig::default()
        };
        fused += run_cross_validation(&dataset, &config, &ModelKind::Mvgcn { views: vec![] })
            .unwrap()
            .auc_mean;
        for (v, slot) in single.iter_mut().enumerate() {
            *slot += run_cross_validation(&dataset, &config, &ModelKind::SingleViewGcn { view: v })
                .unwrap()
                .auc_mean;
        }
    }
    let k = seeds.len() as f64;
    fused /= k;
    for slot in &mut single {
        *slot /= k;
    }
    let best = single.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(
        fused >= best - 0.02,
        "fused mean AUC {fused:.4} below best single view {best:.4} - 0.02"
    );
    println!(
        "criterion 7 PASS: fused mean AUC {fused:.4} >= best single view {best:.4} - 0.02 \
         (views {:.4} {:.4} {:.4})",
        single[0], single[1], single[2]
    );
}

#[test]
fn criterion_08_both_pool_modes() {
    let dataset = separation_dataset();
    let mut aucs = Vec::new();
    for pool in [PoolMode::Max, PoolMode::Mean] {
        let outcome = run_cross_validation(
            &dataset,
            &separation_config(pool),
            &ModelKind::Mvgcn { views: vec![] },
        )
        .unwrap();
        assert!(
            outcome.auc_mean >= 0.90,
            "{} pooling mean AUC {} below 0.90",
            pool.name(),
            outcome.auc_mean
        );
        aucs.push(outcome.auc_mean);
    }
    println!(
        "criterion 8 PASS: max pooling AUC {:.4}, mean pooling AUC {:.4}, both >= 0.90",
        aucs[0], aucs[1]
    );
}

#[test]
fn criterion_09_null_control() {
    let seeds = [101u64, 102, 103, 104, 105];
    let mut total = 0.0f64;
    for &seed in &seeds {
        let dataset = generate_synthetic(&SynthConfig {
            n: 16,
            m: 2,
            per_class: [20, 20],
            class_separation: 0.0,
            noise: 0.1,
            seed,
        })
        .unwrap();
        let config = TrainConfig {
            s: 4,
            f_out: 8,
            epochs: 10,
            folds: 5,
            seed,
            ..TrainConfig::default()
        };
        total += run_cross_validation(&dataset, &config, &ModelKind::Mvgcn { views: vec![] })
            .unwrap()
            .auc_mean;
    }
    let mean = total / seeds.len() as f64;
    assert!(
        (0.4..=0.6).contains(&mean),
        "null-control mean AUC {mean} outside [0.4, 0.6]"
    );
    println!("criterion 9 PASS: zero-separation mean AUC {mean:.4} within [0.4, 0.6]");
}

fn run_cli(args: &[&str]) {
    let output = Command::new(env!("CARGO_BIN_EXE_mvgcn"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "mvgcn {args:?} exited with {}: {}",
        output.status,
        String::from_utf8_lossy(&output.stderr)
    );
}

#[test]
fn criterion_10_determinism() {
    let dir = tempfile::TempDir::new().unwrap();
    let data = dir.path().join("data");
    run_cli(&[
        "generate",
        "--out",
        data.to_str().unwrap(),
        "--n",
        "20",
        "--views",
        "3",
        "--per-class",
        "36",
        "24",
        "--separation",
        "0.8",
        "--noise",
        "0.1",
        "--seed",
        "7",
    ]);
    let out = dir.path().join("run");
    let manifest = data.join("manifest.tsv");
    let atlas = data.join("atlas.tsv");
    let train = |out_dir: &Path| {
        run_cli(&[
            "train",
            "--manifest",
            manifest.to_str().unwrap(),
            "--atlas",
            atlas.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--s",
            "8",
            "--f-out",
            "16",
            "--lr",
            "0.005",
            "--epochs",
            "20",
            "--folds",
            "5",
            "--seed",
            "7",
        ]);
    };
    train(&out);
    let first = dir.path().join("first");
    std::fs::rename(&out, &first).unwrap();
    // Same output path again, so the echoed config is identical too.
    train(&out);
    let mut files = vec!["report.txt".to_string(), "similarity.txt".to_string()];
    for fold in 0..5 {
        files.push(format!("model_fold{fold}.txt"));
    }
    for name in &files {
        let a = std::fs::read(first.join(name)).unwrap();
        let b = std::fs::read(out.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
    println!(
        "criterion 10 PASS: {} output files bit-identical across identical-seed runs",
        files.len()
    );
}

#[test]
fn criterion_11_baseline_sanity() {
    let dataset = separation_dataset();
    let gcn = run_cross_validation(
        &dataset,
        &separation_config(PoolMode::Max),
        &ModelKind::SingleViewGcn { view: 0 },
    )
    .unwrap()
    .auc_mean;
    let pca = run_cross_validation(
        &dataset,
        &separation_config(PoolMode::Max),
        &ModelKind::Pca { view: 0, dim: 16 },
    )
    .unwrap()
    .auc_mean;
    assert!(gcn >= pca, "GCN mean AUC {gcn} below PCA baseline {pca}");
    println!("criterion 11 PASS: GCN mean AUC {gcn:.4} >= PCA baseline {pca:.4}");
}
