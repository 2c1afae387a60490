//! Evaluation and test-data utilities.
//!
//! * [`precision_at_k`] scores external prediction dumps: for an image with
//!   `p` positive labels the top `min(p, k)` classes are its predictions, and
//!   true/false positives are pooled over the whole test set.
//! * [`synth_activations`] builds activation dumps whose class-mean
//!   correlation matrices equal chosen targets, for exercising the pipeline
//!   end to end without a trained network.

use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::featio::{self, ActivationSet, FeatError, MultiHot, Tensor};
use crate::matrix::Matrix;
use crate::netir::{ConvBlock, IrError, NetworkIR};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores are {scores_rows}x{scores_cols} but truth is {truth_rows}x{truth_cols}")]
    ShapeMismatch { scores_rows: usize, scores_cols: usize, truth_rows: usize, truth_cols: usize },
    #[error("k must be in 1..={classes}, got {k}")]
    InvalidK { k: usize, classes: usize },
    #[error("no test image has a positive label")]
    NothingToEvaluate,
    #[error("layer `{layer}`: infeasible correlation target: {reason}")]
    Infeasible { layer: String, reason: String },
    #[error("profile line {line}: {message}")]
    ProfileSyntax { line: usize, message: String },
    #[error(transparent)]
    Feature(#[from] FeatError),
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

// ---------------------------------------------------------------------------
// precision@k
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionDump {
    /// `N x M` class scores.
    pub scores: Matrix,
    /// `N x M` ground-truth indicators.
    pub truth: MultiHot,
}

impl PredictionDump {
    pub fn new(scores: Matrix, truth: MultiHot) -> Result<Self, EvalError> {
        if scores.rows() != truth.rows() || scores.cols() != truth.cols() {
            return Err(EvalError::ShapeMismatch {
                scores_rows: scores.rows(),
                scores_cols: scores.cols(),
                truth_rows: truth.rows(),
                truth_cols: truth.cols(),
            });
        }
        Ok(Self { scores, truth })
    }

    /// Rank-2 ATNS scores plus an ATMH truth file.
    pub fn read(scores: impl AsRef<Path>, truth: impl AsRef<Path>) -> Result<Self, EvalError> {
        let t = featio::read_tensor_file(scores)?;
        if t.rank() != 2 {
            return Err(FeatError::Shape(format!("scores must be rank 2, got dims {:?}", t.dims())).into());
        }
        let scores = Matrix::new(t.dims()[0], t.dims()[1], t.data().iter().map(|&v| f64::from(v)).collect());
        Self::new(scores, featio::read_multihot_file(truth)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionReport {
    pub precision: f64,
    pub true_positives: u64,
    pub false_positives: u64,
    pub evaluated: usize,
    /// Images without any positive label.
    pub skipped: usize,
}

/// Class indices by descending score; equal scores keep ascending index.
pub fn ranked_classes(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

pub fn precision_at_k(dump: &PredictionDump, k: usize) -> Result<PrecisionReport, EvalError> {
    let classes = dump.scores.cols();
    if k == 0 || k > classes {
        return Err(EvalError::InvalidK { k, classes });
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    let (mut evaluated, mut skipped) = (0, 0);
    for i in 0..dump.scores.rows() {
        let truth = dump.truth.row(i);
        let positives = truth.iter().filter(|&&t| t == 1).count();
        if positives == 0 {
            warn!("test image {i} has no positive labels; skipped");
            skipped += 1;
            continue;
        }
        let scores = dump.scores.row(i);
        let ranked = ranked_classes(scores);
        let take = positives.min(k);
        if take < classes && scores[ranked[take - 1]] == scores[ranked[take]] {
            debug!("test image {i}: tied scores at rank {take}; lower class index ranked first");
        }
        for &c in &ranked[..take] {
            if truth[c] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(EvalError::NothingToEvaluate);
    }
    Ok(PrecisionReport {
        precision: tp as f64 / (tp + fp) as f64,
        true_positives: tp,
        false_positives: fp,
        evaluated,
        skipped,
    })
}

// ---------------------------------------------------------------------------
// Synthetic activations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LayerProfile {
    pub name: String,
    /// Feature width; must exceed the class count.
    pub width: usize,
    /// Target `M x M` correlation between class means.
    pub target: Matrix,
}

/// Synthetic dataset description.
///
/// Text form:
///
/// ```text
/// classes 4
/// images_per_class 6
/// noise 0.5
/// layer conv1 16 uniform 0.2
/// layer conv2 16 matrix 1,0.3,0.3,1
/// ```
///
/// `uniform r` sets every off-diagonal target to `r`; `matrix` lists all
/// `M*M` entries row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthProfile {
    pub num_classes: usize,
    pub images_per_class: usize,
    /// Standard deviation of per-image noise around the class mean.
    pub noise: f64,
    pub layers: Vec<LayerProfile>,
}

/// `M x M` matrix with unit diagonal and `rho` elsewhere.
pub fn uniform_target(num_classes: usize, rho: f64) -> Matrix {
    let mut m = Matrix::zeros(num_classes, num_classes);
    for i in 0..num_classes {
        for j in 0..num_classes {
            m[(i, j)] = if i == j { 1.0 } else { rho };
        }
    }
    m
}

impl SynthProfile {
    pub fn uniform(num_classes: usize, images_per_class: usize, width: usize, rhos: &[f64]) -> Self {
        let layers = rhos
            .iter()
            .enumerate()
            .map(|(i, &rho)| LayerProfile { name: format!("conv{}", i + 1), width, target: uniform_target(num_classes, rho) })
            .collect();
        Self { num_classes, images_per_class, noise: 0.5, layers }
    }

    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let mut classes = None;
        let mut images = None;
        let mut noise = 0.5;
        let mut raw_layers = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| EvalError::ProfileSyntax { line, message };
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let tokens: Vec<&str> = trimmed.split_whitespace().collect();
            match tokens.as_slice() {
                ["classes", m] => classes = Some(m.parse::<usize>().map_err(|_| err(format!("bad class count `{m}`")))?),
                ["images_per_class", n] => images = Some(n.parse::<usize>().map_err(|_| err(format!("bad image count `{n}`")))?),
                ["noise", s] => noise = s.parse::<f64>().ok().filter(|s| *s >= 0.0 && s.is_finite()).ok_or_else(|| err(format!("bad noise `{s}`")))?,
                ["layer", name, width, kind, values] => {
                    let width = width.parse::<usize>().map_err(|_| err(format!("bad width `{width}`")))?;
                    let values = values
                        .split(',')
                        .map(|v| v.parse::<f64>().map_err(|_| err(format!("bad value `{v}`"))))
                        .collect::<Result<Vec<_>, _>>()?;
                    match *kind {
                        "uniform" | "matrix" => raw_layers.push((line, name.to_string(), width, kind.to_string(), values)),
                        _ => return Err(err(format!("unknown target kind `{kind}`"))),
                    }
                }
                _ => return Err(err(format!("unrecognised line `{trimmed}`"))),
            }
        }
        let num_classes = classes.filter(|m| *m >= 2).ok_or(EvalError::ProfileSyntax { line: 0, message: "need `classes <M>` with M >= 2".into() })?;
        let images_per_class = images.filter(|n| *n >= 1).ok_or(EvalError::ProfileSyntax { line: 0, message: "need `images_per_class <n>` with n >= 1".into() })?;
        let mut layers = Vec::new();
        for (line, name, width, kind, values) in raw_layers {
            let target = match (kind.as_str(), values.as_slice()) {
                ("uniform", [rho]) => uniform_target(num_classes, *rho),
                ("matrix", v) if v.len() == num_classes * num_classes => Matrix::new(num_classes, num_classes, v.to_vec()),
                _ => return Err(EvalError::ProfileSyntax { line, message: format!("layer `{name}`: wrong number of target values") }),
            };
            layers.push(LayerProfile { name, width, target });
        }
        Ok(Self { num_classes, images_per_class, noise, layers })
    }

    /// Linear chain network matching the profile's layers (3x3 kernels,
    /// 3 input channels).
    pub fn chain_ir(&self) -> Result<NetworkIR, EvalError> {
        let mut blocks = Vec::with_capacity(self.layers.len());
        let mut in_channels = 3u32;
        for (stage, layer) in self.layers.iter().enumerate() {
            let width = layer.width as u32;
            let mut b = ConvBlock::new(layer.name.clone(), in_channels, width, (3, 3), stage as u32).with_bias(true);
            if stage > 0 {
                b.prev = vec![self.layers[stage - 1].name.clone()];
            }
            blocks.push(b);
            in_channels = width;
        }
        let mut ir = NetworkIR { blocks, metadata: Default::default() };
        for i in 0..ir.blocks.len() {
            ir.blocks[i].excluded = ir.auto_excluded(ir.blocks[i].stage);
        }
        ir.validate()?;
        Ok(ir)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub labels: Vec<u32>,
    pub sets: Vec<ActivationSet>,
}

impl SynthOutput {
    /// Writes `<layer>.atns`, `labels.atlb` and `manifest.txt` into `dir`;
    /// returns the manifest path.
    pub fn write_to(&self, dir: impl AsRef<Path>) -> Result<PathBuf, EvalError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| EvalError::Io { path: dir.to_path_buf(), source })?;
        let mut manifest = String::new();
        for set in &self.sets {
            let file = format!("{}.atns", set.layer_name);
            featio::write_tensor_file(dir.join(&file), &Tensor::from_matrix(&set.features))?;
            manifest += &format!("layer {} {file}\n", set.layer_name);
        }
        featio::write_labels_file(dir.join("labels.atlb"), &self.labels)?;
        let classes = self.sets.first().map_or(0, |s| s.num_classes);
        manifest += &format!("labels labels.atlb\nclasses {classes}\n");
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|source| EvalError::Io { path: path.clone(), source })?;
        Ok(path)
    }
}

fn infeasible(layer: &str, reason: impl Into<String>) -> EvalError {
    EvalError::Infeasible { layer: layer.to_string(), reason: reason.into() }
}

/// Lower Cholesky factor of a positive semi-definite matrix.
fn cholesky_psd(layer: &str, a: &Matrix) -> Result<Matrix, EvalError> {
    const PIVOT_TOL: f64 = 1e-10;
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let d = a[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if d < -PIVOT_TOL {
            return Err(infeasible(layer, "target is not positive semi-definite"));
        }
        let pivot = d.max(0.0).sqrt();
        l[(j, j)] = pivot;
        for i in j + 1..n {
            let s = a[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            if pivot > PIVOT_TOL {
                l[(i, j)] = s / pivot;
            } else if s.abs() > 1e-8 {
                return Err(infeasible(layer, "target is not positive semi-definite"));
            }
        }
    }
    Ok(l)
}

fn check_target(layer: &LayerProfile, num_classes: usize) -> Result<(), EvalError> {
    let t = &layer.target;
    if t.rows() != num_classes || t.cols() != num_classes {
        return Err(infeasible(&layer.name, format!("target is {}x{}, expected {num_classes}x{num_classes}", t.rows(), t.cols())));
    }
    if layer.width <= num_classes {
        return Err(infeasible(&layer.name, format!("width {} must exceed the class count {num_classes}", layer.width)));
    }
    for i in 0..num_classes {
        if t[(i, i)] != 1.0 {
            return Err(infeasible(&layer.name, format!("diagonal entry {i} is {}, expected 1", t[(i, i)])));
        }
        for j in 0..num_classes {
            let v = t[(i, j)];
            if !(-1.0..=1.0).contains(&v) {
                return Err(infeasible(&layer.name, format!("entry ({i},{j}) = {v} outside [-1, 1]")));
            }
            if (v - t[(j, i)]).abs() > 1e-12 {
                return Err(infeasible(&layer.name, "target is not symmetric"));
            }
        }
    }
    Ok(())
}

/// `count` orthonormal vectors of length `width`, each orthogonal to the
/// all-ones vector (so each has zero mean).
fn zero_mean_orthonormal(rng: &mut ChaCha8Rng, count: usize, width: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..width).map(|_| rng.sample(StandardNormal)).collect();
        let mean = v.iter().sum::<f64>() / width as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        // two Gram-Schmidt passes for numerical orthogonality
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

/// Generates per-layer activations whose class means correlate exactly as
/// the targets prescribe (up to `f32` storage). Deterministic in `seed`.
pub fn synth_activations(profile: &SynthProfile, seed: u64) -> Result<SynthOutput, EvalError> {
    let m = profile.num_classes;
    let n_images = m * profile.images_per_class;
    let labels: Vec<u32> = (0..n_images).map(|i| (i % m) as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sets = Vec::with_capacity(profile.layers.len());

    for layer in &profile.layers {
        check_target(layer, m)?;
        let chol = cholesky_psd(&layer.name, &layer.target)?;
        let basis = zero_mean_orthonormal(&mut rng, m, layer.width);
        let offset = 1.0;
        let mut means = Matrix::zeros(m, layer.width);
        for c in 0..m {
            let row = means.row_mut(c);
            for (k, b) in basis.iter().enumerate() {
                let w = chol[(c, k)];
                row.iter_mut().zip(b).for_each(|(x, y)| *x += w * y);
            }
            row.iter_mut().for_each(|x| *x = *x * (layer.width as f64).sqrt() + offset);
        }

        let mut features = Matrix::zeros(n_images, layer.width);
        for c in 0..m {
            let members: Vec<usize> = (c..n_images).step_by(m).collect();
            let mut noise = Matrix::zeros(members.len(), layer.width);
            for r in 0..members.len() {
                for x in noise.row_mut(r) {
                    *x = profile.noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            // zero the per-class noise mean so class means hit the target
            for j in 0..layer.width {
                let mean = (0..members.len()).map(|r| noise[(r, j)]).sum::<f64>() / members.len() as f64;
                for r in 0..members.len() {
                    noise[(r, j)] -= mean;
                }
            }
            for (r, &img) in members.iter().enumerate() {
                for j in 0..layer.width {
                    features[(img, j)] = means[(c, j)] + noise[(r, j)];
                }
            }
        }
        sets.push(ActivationSet::new(layer.name.clone(), features, labels.clone(), m)?);
    }
    Ok(SynthOutput { labels, sets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featio::class_means;
    use crate::sepstats::{correlation_matrix, separation_tally};

    fn dump(scores: &[&[f64]], truth: &[&[u8]]) -> PredictionDump {
        let scores = Matrix::from_rows(scores).unwrap();
        let truth = MultiHot::from_rows(&truth.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        PredictionDump::new(scores, truth).unwrap()
    }

    #[test]
    fn precision_examples() {
        let d = dump(&[&[0.9, 0.8, 0.1]], &[&[1, 1, 0]]);
        assert_eq!(precision_at_k(&d, 2).unwrap().precision, 1.0);

        let d = dump(&[&[0.1, 0.2, 0.9]], &[&[1, 0, 0]]);
        assert_eq!(precision_at_k(&d, 1).unwrap().precision, 0.0);

        // image 0: positives {0,1}, top-2 {0,1} -> 2 TP
        // image 1: positives {1,2}, top-2 {1,3} -> 1 TP, 1 FP
        let d = dump(&[&[0.9, 0.7, 0.1, 0.2], &[0.1, 0.8, 0.3, 0.5]], &[&[1, 1, 0, 0], &[0, 1, 1, 0]]);
        let r = precision_at_k(&d, 4).unwrap();
        assert_eq!((r.true_positives, r.false_positives), (3, 1));
        assert_eq!(r.precision, 0.75);
    }

    #[test]
    fn images_without_positives_are_skipped() {
        let d = dump(&[&[0.9, 0.1], &[0.2, 0.8]], &[&[0, 0], &[0, 1]]);
        let r = precision_at_k(&d, 1).unwrap();
        assert_eq!((r.evaluated, r.skipped, r.precision), (1, 1, 1.0));
        let d = dump(&[&[0.9, 0.1]], &[&[0, 0]]);
        assert!(matches!(precision_at_k(&d, 1), Err(EvalError::NothingToEvaluate)));
        assert!(matches!(precision_at_k(&d, 3), Err(EvalError::InvalidK { .. })));
    }

    #[test]
    fn ties_rank_lower_index_first() {
        assert_eq!(ranked_classes(&[0.5, 0.9, 0.5, 0.9]), vec![1, 3, 0, 2]);
    }

    #[test]
    fn synthetic_means_hit_targets() {
        let profile = SynthProfile::uniform(4, 5, 12, &[0.1, 0.6, -0.2]);
        let out = synth_activations(&profile, 7).unwrap();
        for (set, layer) in out.sets.iter().zip(&profile.layers) {
            let c = correlation_matrix(&class_means(set).unwrap(), true).unwrap();
            for (a, b) in c.values.as_slice().iter().zip(layer.target.as_slice()) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
        let c1 = correlation_matrix(&class_means(&out.sets[0]).unwrap(), true).unwrap();
        let c2 = correlation_matrix(&class_means(&out.sets[1]).unwrap(), true).unwrap();
        let t = separation_tally(&c1.values, &c2.values, 1e-6);
        assert!(t.n_minus > t.n_plus);
    }

    #[test]
    fn synthetic_output_is_deterministic() {
        let profile = SynthProfile::uniform(3, 4, 8, &[0.2, 0.4]);
        assert_eq!(synth_activations(&profile, 42).unwrap(), synth_activations(&profile, 42).unwrap());
        assert_ne!(synth_activations(&profile, 42).unwrap(), synth_activations(&profile, 43).unwrap());
    }

    #[test]
    fn infeasible_targets() {
        // off-diagonal -0.9 with 3 classes is not PSD (needs >= -1/2)
        let profile = SynthProfile::uniform(3, 2, 8, &[-0.9]);
        assert!(matches!(synth_activations(&profile, 1), Err(EvalError::Infeasible { .. })));
        let profile = SynthProfile::uniform(4, 2, 4, &[0.1]);
        assert!(matches!(synth_activations(&profile, 1), Err(EvalError::Infeasible { .. })));
        // rank-one all-ones target is feasible
        assert!(synth_activations(&SynthProfile::uniform(3, 2, 8, &[1.0]), 1).is_ok());
    }

    #[test]
    fn profile_text() {
        let p = SynthProfile::parse("classes 2\nimages_per_class 3\nnoise 0.1\nlayer a 4 uniform 0.5\nlayer b 4 matrix 1,0.2,0.2,1\n").unwrap();
        assert_eq!(p.layers.len(), 2);
        assert_eq!(p.layers[1].target[(0, 1)], 0.2);
        assert!(SynthProfile::parse("classes 2\nimages_per_class 3\nlayer a 4 matrix 1,0\n").is_err());
        let ir = p.chain_ir().unwrap();
        assert_eq!(ir.blocks[1].prev, vec!["a".to_string()]);
    }
}
