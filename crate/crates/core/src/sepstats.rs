//! Inter-class correlation matrices and separation tallies.
//!
//! For every block the class-mean feature vectors are correlated pairwise
//! (Pearson, across feature dimensions). Comparing a block's matrix with its
//! predecessor's tells, for each class pair, whether separation improved
//! (correlation fell) or deteriorated (correlation rose).

use std::collections::HashMap;
use std::fmt::Write as _;

use log::warn;
use thiserror::Error;

use crate::featio::{class_means, ActivationSet, ClassMeans, FeatError};
use crate::matrix::Matrix;
use crate::netir::{analysis_sequence, IrError, NetworkIR};

pub const DEFAULT_TIE_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("layer `{layer}`: Pearson correlation needs at least 2 features, got {width}")]
    TooFewFeatures { layer: String, width: usize },
    #[error("layer `{layer}`: class {class} has a constant mean feature vector")]
    Degenerate { layer: String, class: usize },
    #[error("layer `{layer}`: {found} classes, expected {expected}")]
    ClassCount { layer: String, expected: usize, found: usize },
    #[error("block `{block}` has no activations (needs its own and its predecessors' dumps; missing `{missing}`)")]
    MissingActivations { block: String, missing: String },
    #[error("layer `{layer}`: {source}")]
    Feature { layer: String, source: FeatError },
    #[error(transparent)]
    Ir(#[from] IrError),
}

/// `M x M` correlation matrix of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    pub layer_name: String,
    pub values: Matrix,
    /// Classes whose mean vector had zero variance; their row and column
    /// are 0, diagonal included.
    pub degenerate: Vec<bool>,
}

impl CorrelationMatrix {
    pub fn num_classes(&self) -> usize {
        self.values.rows()
    }

    pub fn has_degenerate(&self) -> bool {
        self.degenerate.iter().any(|&d| d)
    }
}

/// Mean-centred row and its sum of squares; `None` for a constant row.
fn centred(row: &[f64]) -> Option<(Vec<f64>, f64)> {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let centred: Vec<f64> = row.iter().map(|v| v - mean).collect();
    let ss = centred.iter().map(|v| v * v).sum::<f64>();
    let raw = row.iter().map(|v| v * v).sum::<f64>();
    // constant up to rounding of the mean
    if ss == 0.0 || ss.sqrt() <= 1e-12 * raw.sqrt() {
        return None;
    }
    Some((centred, ss))
}

/// Pearson correlation between every pair of rows of `means`.
///
/// Zero-variance rows get correlation 0 against everything and are flagged;
/// with `strict` they are an error instead.
pub fn correlation_matrix(means: &ClassMeans, strict: bool) -> Result<CorrelationMatrix, StatsError> {
    let m = means.means.rows();
    let width = means.means.cols();
    if width < 2 {
        return Err(StatsError::TooFewFeatures { layer: means.layer_name.clone(), width });
    }
    let rows: Vec<Option<(Vec<f64>, f64)>> = (0..m).map(|i| centred(means.means.row(i))).collect();
    let degenerate: Vec<bool> = rows.iter().map(Option::is_none).collect();
    if let Some(class) = degenerate.iter().position(|&d| d) {
        if strict {
            return Err(StatsError::Degenerate { layer: means.layer_name.clone(), class });
        }
        warn!("layer `{}`: class {class} has a constant mean feature vector; its correlations are set to 0", means.layer_name);
    }
    let mut values = Matrix::zeros(m, m);
    for i in 0..m {
        let Some((ui, ssi)) = &rows[i] else { continue };
        values[(i, i)] = 1.0;
        for j in i + 1..m {
            let Some((uj, ssj)) = &rows[j] else { continue };
            let dot = ui.iter().zip(uj).map(|(a, b)| a * b).sum::<f64>();
            let r = (dot / (ssi * ssj).sqrt()).clamp(-1.0, 1.0);
            values[(i, j)] = r;
            values[(j, i)] = r;
        }
    }
    Ok(CorrelationMatrix { layer_name: means.layer_name.clone(), values, degenerate })
}

/// Correlation matrices of several layers, in analysis order.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationStack {
    pub per_layer: Vec<CorrelationMatrix>,
    pub num_classes: usize,
}

impl CorrelationStack {
    pub fn get(&self, layer: &str) -> Option<&CorrelationMatrix> {
        self.per_layer.iter().find(|c| c.layer_name == layer)
    }

    pub fn len(&self) -> usize {
        self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }
}

pub fn correlation_stack(means: &[ClassMeans], strict: bool) -> Result<CorrelationStack, StatsError> {
    let num_classes = means.first().map_or(0, |m| m.means.rows());
    let mut per_layer = Vec::with_capacity(means.len());
    for cm in means {
        if cm.means.rows() != num_classes {
            return Err(StatsError::ClassCount { layer: cm.layer_name.clone(), expected: num_classes, found: cm.means.rows() });
        }
        per_layer.push(correlation_matrix(cm, strict)?);
    }
    Ok(CorrelationStack { per_layer, num_classes })
}

// ---------------------------------------------------------------------------
// Tallies
// ---------------------------------------------------------------------------

/// Which class pairs are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairMode {
    /// All `M^2` ordered pairs, diagonal included.
    #[default]
    Ordered,
    /// The `M(M-1)/2` pairs with `i < j`.
    Unordered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SeparationTally {
    /// Pairs whose correlation decreased (separation improved).
    pub n_plus: u64,
    /// Pairs whose correlation increased (separation deteriorated).
    pub n_minus: u64,
    pub n_ties: u64,
    pub n_total: u64,
}

impl SeparationTally {
    pub fn new(n_plus: u64, n_minus: u64, n_ties: u64) -> Self {
        Self { n_plus, n_minus, n_ties, n_total: n_plus + n_minus + n_ties }
    }
}

/// Counts ordered pairs `(i, j)` with `cur < prev - tol` (plus),
/// `cur > prev + tol` (minus), otherwise tie.
pub fn separation_tally(prev: &Matrix, cur: &Matrix, tie_tol: f64) -> SeparationTally {
    separation_tally_with(prev, cur, tie_tol, PairMode::Ordered)
}

pub fn separation_tally_with(prev: &Matrix, cur: &Matrix, tie_tol: f64, mode: PairMode) -> SeparationTally {
    assert!(prev.is_square() && prev.rows() == cur.rows() && prev.cols() == cur.cols(), "tally needs two MxM matrices of equal size");
    let m = prev.rows();
    let mut t = SeparationTally::default();
    for i in 0..m {
        let start = match mode {
            PairMode::Ordered => 0,
            PairMode::Unordered => i + 1,
        };
        for j in start..m {
            let (p, c) = (prev[(i, j)], cur[(i, j)]);
            if c < p - tie_tol {
                t.n_plus += 1;
            } else if c > p + tie_tol {
                t.n_minus += 1;
            } else {
                t.n_ties += 1;
            }
        }
    }
    t.n_total = t.n_plus + t.n_minus + t.n_ties;
    t
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockTally {
    pub block: String,
    pub stage: u32,
    pub tally: SeparationTally,
}

/// Tallies keyed by block, in analysis order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TallyTable {
    pub entries: Vec<BlockTally>,
}

impl TallyTable {
    pub fn get(&self, block: &str) -> Option<&SeparationTally> {
        self.entries.iter().find(|e| e.block == block).map(|e| &e.tally)
    }

    pub fn insert(&mut self, block: impl Into<String>, stage: u32, tally: SeparationTally) {
        let block = block.into();
        match self.entries.iter_mut().find(|e| e.block == block) {
            Some(e) => {
                e.stage = stage;
                e.tally = tally;
            }
            None => self.entries.push(BlockTally { block, stage, tally }),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Whole-network analysis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisConfig {
    pub tie_tol: f64,
    pub strict_degenerate: bool,
    pub pair_mode: PairMode,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self { tie_tol: DEFAULT_TIE_TOL, strict_degenerate: false, pair_mode: PairMode::Ordered }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkAnalysis {
    /// One matrix per block with activations, in analysis order.
    pub stack: CorrelationStack,
    /// One tally per block past the first stage whose predecessors have
    /// activations.
    pub tallies: TallyTable,
}

/// Correlates every block with activations and tallies each block against
/// its direct predecessors. A block fed by several producers is compared
/// with the correlation of their concatenated class means, which is what
/// the block actually receives.
pub fn analyze_network(ir: &NetworkIR, sets: &[ActivationSet], cfg: &AnalysisConfig) -> Result<NetworkAnalysis, StatsError> {
    let seq = analysis_sequence(ir)?;
    let by_name: HashMap<&str, &ActivationSet> = sets.iter().map(|s| (s.layer_name.as_str(), s)).collect();

    let mut means: HashMap<&str, ClassMeans> = HashMap::new();
    let mut ordered = Vec::new();
    for stage in &seq.stages {
        for name in &stage.blocks {
            if let Some(set) = by_name.get(name.as_str()) {
                let cm = class_means(set).map_err(|source| StatsError::Feature { layer: name.clone(), source })?;
                ordered.push(cm.clone());
                means.insert(name.as_str(), cm);
            }
        }
    }
    let stack = correlation_stack(&ordered, cfg.strict_degenerate)?;

    let mut tallies = TallyTable::default();
    for stage in seq.stages.iter().skip(1) {
        for name in &stage.blocks {
            let block = ir.block(name).expect("sequence names come from the IR");
            let missing = std::iter::once(name).chain(&block.prev).find(|n| !means.contains_key(n.as_str()));
            if let Some(missing) = missing {
                if block.excluded {
                    continue;
                }
                return Err(StatsError::MissingActivations { block: name.clone(), missing: missing.clone() });
            }
            let cur = &stack.get(name).expect("block has means").values;
            let prev = if let [only] = block.prev.as_slice() {
                stack.get(only).expect("predecessor has means").values.clone()
            } else {
                let parts: Vec<&Matrix> = block.prev.iter().map(|p| &means[p.as_str()].means).collect();
                let joined = ClassMeans {
                    layer_name: format!("{}<-[{}]", name, block.prev.join(",")),
                    means: Matrix::hconcat(&parts).expect("class counts agree"),
                };
                correlation_matrix(&joined, cfg.strict_degenerate)?.values
            };
            tallies.insert(name.clone(), stage.index, separation_tally_with(&prev, cur, cfg.tie_tol, cfg.pair_mode));
        }
    }
    Ok(NetworkAnalysis { stack, tallies })
}

// ---------------------------------------------------------------------------
// Heatmap export
// ---------------------------------------------------------------------------

/// Matrix as CSV, one row per line, no header.
pub fn heatmap_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// Binary PGM (P5) with -1 mapped to 0 and +1 to 255.
pub fn heatmap_pgm(m: &Matrix) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", m.cols(), m.rows()).into_bytes();
    out.extend(m.as_slice().iter().map(|&v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8));
    out
}
