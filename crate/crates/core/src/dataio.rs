//! Dataset model, on-disk text formats, and the seeded synthetic
//! generator used for desk-scale verification.
//!
//! Formats (all plain text, `#` starts a comment line):
//! - atlas: one ROI per line, `name<TAB>x<TAB>y<TAB>z`;
//! - manifest: header `# mvgcn-manifest v1`, then
//!   `subject_id<TAB>label<TAB>view1_path<TAB>...<TAB>viewM_path`, paths
//!   relative to the manifest's directory;
//! - matrix: n rows of n whitespace-separated decimals, written with 17
//!   significant digits so values round-trip exactly;
//! - metrics report: `# config` and `# metrics` sections of `key: value`
//!   lines;
//! - model file: one `mvgcn-model v1 key=value ...` header line, then the
//!   coefficient and softmax weight matrices.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::RoiAtlas;
use crate::model::{Activation, CoeffTensor, ModelParams, PoolMode};
use crate::numerics::{DenseMatrix, SeededRng};

pub const MANIFEST_HEADER: &str = "# mvgcn-manifest v1";
pub const MODEL_HEADER_TAG: &str = "mvgcn-model v1";
pub const REPORT_HEADER: &str = "# mvgcn-report v1";

/// One subject's imaging session: a class label and M view matrices.
#[derive(Debug, Clone)]
pub struct Acquisition {
    pub subject_id: String,
    pub label: usize,
    pub views: Vec<DenseMatrix>,
}

/// A population of acquisitions over a shared atlas.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub atlas: RoiAtlas,
    pub acquisitions: Vec<Acquisition>,
    pub view_names: Vec<String>,
    /// Class label strings; an acquisition's `label` indexes this list.
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.atlas.len()
    }

    pub fn m(&self) -> usize {
        self.view_names.len()
    }

    pub fn len(&self) -> usize {
        self.acquisitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acquisitions.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.acquisitions.iter().map(|a| a.label).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let m = self.m();
        if m == 0 {
            return Err(Error::invalid("dataset has no views"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for acq in &self.acquisitions {
            if !seen.insert(acq.subject_id.as_str()) {
                return Err(Error::invalid(format!(
                    "duplicate subject id {:?}",
                    acq.subject_id
                )));
            }
            if acq.label >= self.class_names.len() {
                return Err(Error::invalid(format!(
                    "subject {:?} has label index {} but only {} classes exist",
                    acq.subject_id,
                    acq.label,
                    self.class_names.len()
                )));
            }
            if acq.views.len() != m {
                return Err(Error::invalid(format!(
                    "subject {:?} has {} views, expected {m}",
                    acq.subject_id,
                    acq.views.len()
                )));
            }
            for v in &acq.views {
                if v.rows() != n || v.cols() != n {
                    return Err(Error::invalid(format!(
                        "subject {:?} has a {}x{} view, expected {n}x{n}",
                        acq.subject_id,
                        v.rows(),
                        v.cols()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Acquisition count per class, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_names.len()];
        for a in &self.acquisitions {
            counts[a.label] += 1;
        }
        counts
    }
}

/// A loaded dataset plus non-fatal findings (symmetrized matrices,
/// all-zero views).
#[derive(Debug)]
pub struct LoadedDataset {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

/// Divides every entry by the matrix maximum so the largest entry becomes
/// exactly 1.0. An all-zero matrix is returned unchanged with the flag set.
pub fn max_normalize(view: &DenseMatrix) -> Result<(DenseMatrix, bool)> {
    let mut max = 0.0f64;
    for &v in view.data() {
        if v < 0.0 {
            return Err(Error::invalid(format!(
                "matrix entries must be nonnegative, found {v}"
            )));
        }
        if v > max {
            max = v;
        }
    }
    if max == 0.0 {
        return Ok((view.clone(), true));
    }
    // Divide (not multiply by the reciprocal) so the max becomes exactly 1.
    let mut out = view.clone();
    for v in out.data_mut() {
        *v /= max;
    }
    Ok((out, false))
}

fn parse_error(file: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.display().to_string(),
        line,
        message: message.into(),
    }
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(BufReader::new(file).lines())
}

/// Writes a matrix as rows of `%.16e` decimals, preceded by the given
/// comment lines (written as `# ...`).
pub fn save_matrix(path: &Path, m: &DenseMatrix, comments: &[&str]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        for c in comments {
            writeln!(w, "# {c}")?;
        }
        for i in 0..m.rows() {
            let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parses a whitespace-delimited decimal matrix, skipping blank and `#`
/// lines. All rows must have the same length.
pub fn load_matrix(path: &Path) -> Result<DenseMatrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in open_lines(path)?.enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut row = Vec::new();
        for tok in trimmed.split_whitespace() {
            let v: f64 = tok.parse().map_err(|_| {
                parse_error(path, idx + 1, format!("invalid number {tok:?}"))
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(parse_error(
                    path,
                    idx + 1,
                    format!("row has {} entries, expected {}", row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_error(path, 1, "matrix file has no data rows"));
    }
    Ok(DenseMatrix::from_rows(&rows))
}

pub fn save_atlas(path: &Path, atlas: &RoiAtlas) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        for (i, name) in atlas.names().iter().enumerate() {
            let [x, y, z] = atlas.coord(i);
            writeln!(w, "{name}\t{x}\t{y}\t{z}")?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_atlas(path: &Path) -> Result<RoiAtlas> {
    let mut names = Vec::new();
    let mut coords: Vec<Vec<f64>> = Vec::new();
    for (idx, line) in open_lines(path)?.enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_error(
                path,
                idx + 1,
                format!("expected name<TAB>x<TAB>y<TAB>z, got {} fields", fields.len()),
            ));
        }
        let mut c = Vec::with_capacity(3);
        for tok in &fields[1..] {
            let v: f64 = tok.trim().parse().map_err(|_| {
                parse_error(path, idx + 1, format!("invalid coordinate {tok:?}"))
            })?;
            c.push(v);
        }
        names.push(fields[0].to_string());
        coords.push(c);
    }
    if names.is_empty() {
        return Err(parse_error(path, 1, "atlas file has no ROI lines"));
    }
    RoiAtlas::new(names, DenseMatrix::from_rows(&coords))
}

/// Writes atlas, per-view matrix files, manifest, and a ground-truth
/// labels file under `dir`. Returns the manifest path.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<PathBuf> {
    dataset.validate()?;
    let matrices = dir.join("matrices");
    fs::create_dir_all(&matrices).map_err(|e| Error::io(matrices.display().to_string(), e))?;
    save_atlas(&dir.join("atlas.tsv"), &dataset.atlas)?;

    let manifest_path = dir.join("manifest.tsv");
    let file = fs::File::create(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let mut write_manifest = || -> Result<()> {
        writeln!(w, "{MANIFEST_HEADER}")
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        for acq in &dataset.acquisitions {
            let mut fields = vec![
                acq.subject_id.clone(),
                dataset.class_names[acq.label].clone(),
            ];
            for (k, view) in acq.views.iter().enumerate() {
                let rel = format!("matrices/{}_{}.txt", acq.subject_id, dataset.view_names[k]);
                save_matrix(
                    &dir.join(&rel),
                    view,
                    &[&format!(
                        "subject {} view {}",
                        acq.subject_id, dataset.view_names[k]
                    )],
                )?;
                fields.push(rel);
            }
            writeln!(w, "{}", fields.join("\t"))
                .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        }
        w.flush()
            .map_err(|e| Error::io(manifest_path.display().to_string(), e))
    };
    write_manifest()?;

    let labels_path = dir.join("labels.tsv");
    let file =
        fs::File::create(&labels_path).map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let mut write_labels = || -> std::io::Result<()> {
        for acq in &dataset.acquisitions {
            writeln!(w, "{}\t{}", acq.subject_id, dataset.class_names[acq.label])?;
        }
        w.flush()
    };
    write_labels().map_err(|e| Error::io(labels_path.display().to_string(), e))?;
    Ok(manifest_path)
}

/// Loads and validates a dataset. Every view matrix must be square of the
/// atlas size and nonnegative; asymmetry is repaired as `(X + X^T) / 2`
/// (with a warning above 1e-9); matrices are max-normalized.
pub fn load_dataset(manifest_path: &Path, atlas_path: &Path) -> Result<LoadedDataset> {
    let atlas = load_atlas(atlas_path)?;
    let n = atlas.len();
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut lines = open_lines(manifest_path)?;
    let header = lines
        .next()
        .ok_or_else(|| parse_error(manifest_path, 1, "empty manifest"))?
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    if header.trim() != MANIFEST_HEADER {
        return Err(parse_error(
            manifest_path,
            1,
            format!("expected header {MANIFEST_HEADER:?}, got {:?}", header.trim()),
        ));
    }

    let mut warnings = Vec::new();
    let mut raw: Vec<(String, String, Vec<PathBuf>)> = Vec::new();
    let mut m: Option<usize> = None;
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line.map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() < 3 {
            return Err(parse_error(
                manifest_path,
                line_no,
                "expected subject_id<TAB>label<TAB>at least one view path",
            ));
        }
        let views = fields.len() - 2;
        match m {
            None => m = Some(views),
            Some(expect) if expect != views => {
                return Err(parse_error(
                    manifest_path,
                    line_no,
                    format!("line lists {views} views, expected {expect}"),
                ));
            }
            _ => {}
        }
        raw.push((
            fields[0].to_string(),
            fields[1].to_string(),
            fields[2..].iter().map(|p| base.join(p)).collect(),
        ));
    }
    if raw.is_empty() {
        return Err(parse_error(manifest_path, 2, "manifest lists no acquisitions"));
    }
    let m = m.unwrap();

    let mut class_names: Vec<String> = raw.iter().map(|(_, label, _)| label.clone()).collect();
    class_names.sort();
    class_names.dedup();

    let mut acquisitions = Vec::with_capacity(raw.len());
    for (subject_id, label, paths) in raw {
        let label_idx = class_names.binary_search(&label).expect("label collected above");
        let mut views = Vec::with_capacity(m);
        for path in paths {
            let mut x = load_matrix(&path)?;
            if x.rows() != n || x.cols() != x.rows() {
                return Err(Error::invalid(format!(
                    "{}: matrix is {}x{}, expected {n}x{n} (atlas size)",
                    path.display(),
                    x.rows(),
                    x.cols()
                )));
            }
            let asym = x.symmetry_error();
            if asym > 0.0 {
                if asym > 1e-9 {
                    warnings.push(format!(
                        "{}: symmetrized (max asymmetry {asym:.3e})",
                        path.display()
                    ));
                }
                for i in 0..n {
                    for j in (i + 1)..n {
                        let v = 0.5 * (x.get(i, j) + x.get(j, i));
                        x.set(i, j, v);
                        x.set(j, i, v);
                    }
                }
            }
            let (normalized, was_zero) =
                max_normalize(&x).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
            if was_zero {
                warnings.push(format!("{}: all-zero matrix", path.display()));
            }
            views.push(normalized);
        }
        acquisitions.push(Acquisition {
            subject_id,
            label: label_idx,
            views,
        });
    }

    let view_names = (0..m).map(|k| format!("view{k}")).collect();
    let dataset = Dataset {
        atlas,
        acquisitions,
        view_names,
        class_names,
    };
    dataset.validate()?;
    Ok(LoadedDataset { dataset, warnings })
}

/// Synthetic dataset shape and difficulty.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n: usize,
    pub m: usize,
    pub per_class: [usize; 2],
    /// 0 = classes share one prototype (no signal), 1 = fully distinct.
    pub class_separation: f64,
    /// Amplitude of per-entry uniform noise.
    pub noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(Error::invalid("synthetic n must be at least 4"));
        }
        if self.m < 1 {
            return Err(Error::invalid("synthetic view count must be at least 1"));
        }
        if self.per_class[0] < 2 || self.per_class[1] < 2 {
            return Err(Error::invalid("each class needs at least 2 acquisitions"));
        }
        if !(0.0..=1.0).contains(&self.class_separation) {
            return Err(Error::invalid("class_separation must lie in [0, 1]"));
        }
        if self.noise < 0.0 {
            return Err(Error::invalid("noise must be nonnegative"));
        }
        Ok(())
    }
}

fn block_of(i: usize, n: usize, blocks: usize) -> usize {
    i * blocks / n
}

/// Draws a symmetric zero-diagonal block-structured matrix: one strength
/// per block pair (higher inside blocks), plus small per-entry jitter.
fn draw_prototype(
    n: usize,
    blocks: usize,
    intra: (f64, f64),
    inter: (f64, f64),
    rng: &mut SeededRng,
) -> DenseMatrix {
    let mut strength = DenseMatrix::zeros(blocks, blocks);
    for a in 0..blocks {
        for b in a..blocks {
            let v = if a == b {
                rng.uniform(intra.0, intra.1)
            } else {
                rng.uniform(inter.0, inter.1)
            };
            strength.set(a, b, v);
            strength.set(b, a, v);
        }
    }
    let mut proto = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let base = strength.get(block_of(i, n, blocks), block_of(j, n, blocks));
            let v = (base + rng.uniform(-0.05, 0.05)).clamp(0.0, 1.0);
            proto.set(i, j, v);
            proto.set(j, i, v);
        }
    }
    proto
}

/// Generates a seeded multi-view dataset with planted block structure.
///
/// Both class prototypes blend a shared prototype with a class-specific
/// one by `class_separation`, so separation 0 removes all class signal.
/// Each view overwrites the intra-block entries of one block (view k
/// corrupts block k mod B) with class-independent values, so no single
/// view sees every discriminative block and fusing views is informative.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.n;
    let mut rng = SeededRng::new(cfg.seed);

    let names: Vec<String> = (0..n).map(|i| format!("roi{i:03}")).collect();
    let mut coords = DenseMatrix::zeros(n, 3);
    for v in coords.data_mut() {
        *v = rng.next_f64();
    }
    let atlas = RoiAtlas::new(names, coords)?;

    let blocks = 2.max(cfg.m.min(n / 2));
    let shared = draw_prototype(n, blocks, (0.4, 0.95), (0.05, 0.15), &mut rng);

    // Signed per-block-pair contrasts with guaranteed magnitude, so the
    // two class prototypes differ on every block pair for every seed.
    // The classes get opposite halves of each contrast.
    let mut contrast = DenseMatrix::zeros(blocks, blocks);
    for a in 0..blocks {
        for b in a..blocks {
            let magnitude = rng.uniform(0.35, 0.6);
            let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
            contrast.set(a, b, sign * magnitude);
            contrast.set(b, a, sign * magnitude);
        }
    }
    let class_protos: Vec<DenseMatrix> = (0..2)
        .map(|class| {
            let dir = if class == 0 { 0.5 } else { -0.5 };
            let mut p = shared.clone();
            for i in 0..n {
                for j in (i + 1)..n {
                    let c = contrast.get(block_of(i, n, blocks), block_of(j, n, blocks));
                    let v = (p.get(i, j) + dir * c + rng.uniform(-0.05, 0.05)).clamp(0.0, 1.0);
                    p.set(i, j, v);
                    p.set(j, i, v);
                }
            }
            p
        })
        .collect();
    let blended: Vec<DenseMatrix> = class_protos
        .iter()
        .map(|cp| {
            let mut b = shared.clone();
            b.scale(1.0 - cfg.class_separation);
            b.add_scaled(cp, cfg.class_separation);
            b
        })
        .collect();

    // View k overwrites the intra entries of block (k mod B); the same
    // overwrite applies to every acquisition, so it carries no signal.
    let mut corruptions: Vec<Vec<(usize, usize, f64)>> = Vec::with_capacity(cfg.m);
    for k in 0..cfg.m {
        let target = k % blocks;
        let mut entries = Vec::new();
        for i in 0..n {
            if block_of(i, n, blocks) != target {
                continue;
            }
            for j in (i + 1)..n {
                if block_of(j, n, blocks) == target {
                    entries.push((i, j, rng.uniform(0.2, 0.8)));
                }
            }
        }
        corruptions.push(entries);
    }

    let mut acquisitions = Vec::with_capacity(cfg.per_class[0] + cfg.per_class[1]);
    let mut subject = 0;
    for class in 0..2 {
        for _ in 0..cfg.per_class[class] {
            let mut views = Vec::with_capacity(cfg.m);
            for corruption in corruptions.iter() {
                let mut x = blended[class].clone();
                for &(i, j, v) in corruption {
                    x.set(i, j, v);
                    x.set(j, i, v);
                }
                for i in 0..n {
                    for j in (i + 1)..n {
                        let noisy =
                            (x.get(i, j) + cfg.noise * rng.uniform(-1.0, 1.0)).clamp(0.0, 1.0);
                        x.set(i, j, noisy);
                        x.set(j, i, noisy);
                    }
                }
                let (normalized, _) = max_normalize(&x)?;
                views.push(normalized);
            }
            acquisitions.push(Acquisition {
                subject_id: format!("subj{subject:04}"),
                label: class,
                views,
            });
            subject += 1;
        }
    }

    let dataset = Dataset {
        atlas,
        acquisitions,
        view_names: (0..cfg.m).map(|k| format!("view{k}")).collect(),
        class_names: vec!["groupA".to_string(), "groupB".to_string()],
    };
    dataset.validate()?;
    Ok(dataset)
}

/// A trained graph model plus everything needed to rebuild its pipeline:
/// the geometry-graph settings and the view subset it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub params: ModelParams,
    pub knn_k: usize,
    pub sigma: f64,
    /// Dataset view indices the model consumes, ascending.
    pub views: Vec<usize>,
}

pub fn save_model(path: &Path, model: &SavedModel) -> Result<()> {
    let theta = model.params.theta.weights();
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let views: Vec<String> = model.views.iter().map(|v| v.to_string()).collect();
    let mut write = || -> std::io::Result<()> {
        writeln!(
            w,
            "{MODEL_HEADER_TAG} f_in={} f_out={} s={} d_r={} pool={} activation={} knn_k={} sigma={} views={}",
            model.params.theta.f_in(),
            model.params.theta.f_out(),
            model.params.theta.order(),
            model.params.d_r(),
            model.params.pool_mode.name(),
            model.params.activation.name(),
            model.knn_k,
            model.sigma,
            views.join(","),
        )?;
        writeln!(w, "# theta ({}x{})", theta.rows(), theta.cols())?;
        for i in 0..theta.rows() {
            let row: Vec<String> = theta.row(i).iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        writeln!(
            w,
            "# softmax_w ({}x{})",
            model.params.softmax_w.rows(),
            model.params.softmax_w.cols()
        )?;
        for i in 0..model.params.softmax_w.rows() {
            let row: Vec<String> = model
                .params
                .softmax_w
                .row(i)
                .iter()
                .map(|v| format!("{v:.16e}"))
                .collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    let mut lines = open_lines(path)?;
    let header = lines
        .next()
        .ok_or_else(|| parse_error(path, 1, "empty model file"))?
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let header = header.trim();
    if !header.starts_with(MODEL_HEADER_TAG) {
        return Err(parse_error(
            path,
            1,
            format!("expected header starting with {MODEL_HEADER_TAG:?}"),
        ));
    }
    let mut fields = std::collections::BTreeMap::new();
    for tok in header[MODEL_HEADER_TAG.len()..].split_whitespace() {
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| parse_error(path, 1, format!("malformed header token {tok:?}")))?;
        fields.insert(key.to_string(), value.to_string());
    }
    let get = |key: &str| -> Result<&String> {
        fields
            .get(key)
            .ok_or_else(|| parse_error(path, 1, format!("header missing {key}=")))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| parse_error(path, 1, format!("invalid {key}= value")))
    };
    let f_in = parse_usize("f_in")?;
    let f_out = parse_usize("f_out")?;
    let s = parse_usize("s")?;
    let d_r = parse_usize("d_r")?;
    let knn_k = parse_usize("knn_k")?;
    let sigma: f64 = get("sigma")?
        .parse()
        .map_err(|_| parse_error(path, 1, "invalid sigma= value"))?;
    let pool = PoolMode::parse(get("pool")?)?;
    let activation = Activation::parse(get("activation")?)?;
    let views: Vec<usize> = get("views")?
        .split(',')
        .map(|t| {
            t.parse()
                .map_err(|_| parse_error(path, 1, "invalid views= value"))
        })
        .collect::<Result<_>>()?;

    let mut values = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        for tok in trimmed.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| parse_error(path, idx + 2, format!("invalid number {tok:?}")))?;
            values.push(v);
        }
    }
    let theta_len = f_in * s * f_out;
    let w_len = crate::model::NUM_CLASSES * d_r;
    if values.len() != theta_len + w_len {
        return Err(parse_error(
            path,
            1,
            format!(
                "expected {} parameter values, found {}",
                theta_len + w_len,
                values.len()
            ),
        ));
    }
    let theta_m = DenseMatrix::from_vec(f_in * s, f_out, values[..theta_len].to_vec());
    let softmax_w =
        DenseMatrix::from_vec(crate::model::NUM_CLASSES, d_r, values[theta_len..].to_vec());
    Ok(SavedModel {
        params: ModelParams {
            theta: CoeffTensor::from_weights(f_in, f_out, s, theta_m)?,
            softmax_w,
            activation,
            pool_mode: pool,
        },
        knn_k,
        sigma,
        views,
    })
}

/// Writes a metrics report: a `# config` echo block then a `# metrics`
/// block, both as `key: value` lines.
pub fn write_metrics_report(
    path: &Path,
    config: &[(String, String)],
    metrics: &[(String, String)],
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        writeln!(w, "{REPORT_HEADER}")?;
        writeln!(w, "# config")?;
        for (k, v) in config {
            writeln!(w, "{k}: {v}")?;
        }
        writeln!(w, "# metrics")?;
        for (k, v) in metrics {
            writeln!(w, "{k}: {v}")?;
        }
        w.flush()
    };
    write().map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads back every `key: value` line of a report, both sections, in
/// file order.
pub fn read_report(path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (idx, line) in open_lines(path)?.enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (k, v) = trimmed
            .split_once(':')
            .ok_or_else(|| parse_error(path, idx + 1, "expected key: value"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
