//! Stretch and split factors from separation tallies.
//!
//! For a block at stage `l` with tally `(n_plus, n_minus, n_total)`:
//!
//! ```text
//! xi(l)    = mean of n_plus/n_total over stages l+1 ..= L-2   (0 if empty)
//! psi(x)   = floor(x / lambda)
//! phi(x)   = lambda * psi(x)
//! split    = 2 ^ psi(n_minus/n_total * xi(l))
//! stretch  = 1 + phi(n_plus/n_total * xi(l))
//! ```
//!
//! where `L` is the number of stages. Blocks with `n_plus < n_minus` (case
//! a) are split only; the others (case b) are stretched and split. Blocks in
//! the first stage and excluded blocks are left alone.
//!
//! Stages with several blocks contribute the mean of their blocks'
//! `n_plus/n_total` ratios to `xi`.

use std::fmt;
use std::fmt::Write as _;

use thiserror::Error;

use crate::netir::{analysis_sequence, IrError, NetworkIR};
use crate::sepstats::{SeparationTally, TallyTable, DEFAULT_TIE_TOL};

pub const DEFAULT_LAMBDA: f64 = 0.25;

/// Quotients within this distance of an integer are snapped to it before
/// flooring, so exact boundaries like `0.25 / 0.25` survive rounding noise.
pub const FLOOR_SNAP: f64 = 1e-12;

/// Recorded in plan files: how multi-block stages enter `xi`.
pub const XI_AGGREGATION: &str = "stage-mean";

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("lambda must be positive and finite, got {0}")]
    InvalidLambda(f64),
    #[error("block `{0}` needs a tally but none was supplied")]
    MissingTally(String),
    #[error("tally names `{0}`, which is not a block of the network")]
    UnknownBlock(String),
    #[error("no analyzable (non-excluded, tallied) blocks")]
    NoAnalyzableLayers,
    #[error("block `{block}`: split exponent {exponent} does not fit a u32 group")]
    SplitOverflow { block: String, exponent: u32 },
    #[error("plan line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error(transparent)]
    Ir(#[from] IrError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerConfig {
    pub lambda: f64,
    pub tie_tol: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { lambda: DEFAULT_LAMBDA, tie_tol: DEFAULT_TIE_TOL }
    }
}

impl PlannerConfig {
    pub fn with_lambda(lambda: f64) -> Result<Self, PlanError> {
        let cfg = Self { lambda, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.lambda > 0.0 && self.lambda.is_finite() {
            Ok(())
        } else {
            Err(PlanError::InvalidLambda(self.lambda))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Case {
    Excluded,
    /// More pairs deteriorated than improved: split only.
    A,
    /// At least as many pairs improved: stretch and split.
    B,
}

impl Case {
    pub fn code(self) -> char {
        match self {
            Case::Excluded => 'x',
            Case::A => 'a',
            Case::B => 'b',
        }
    }

    pub fn from_code(s: &str) -> Option<Self> {
        match s {
            "x" => Some(Case::Excluded),
            "a" => Some(Case::A),
            "b" => Some(Case::B),
            _ => None,
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockFactors {
    pub stretch: f64,
    /// `(stretch - 1) / lambda`, always an integer.
    pub stretch_steps: u32,
    pub split: u32,
    pub case: Case,
}

impl BlockFactors {
    pub fn identity(case: Case) -> Self {
        Self { stretch: 1.0, stretch_steps: 0, split: 1, case }
    }

    pub fn is_identity(&self) -> bool {
        self.stretch_steps == 0 && self.split == 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementPlan {
    /// Factors per block, in IR order.
    pub per_block: Vec<(String, BlockFactors)>,
    pub lambda_used: f64,
    pub lambda_o: f64,
}

impl RefinementPlan {
    pub fn get(&self, block: &str) -> Option<&BlockFactors> {
        self.per_block.iter().find(|(n, _)| n == block).map(|(_, f)| f)
    }

    /// Plan leaving every block unchanged.
    pub fn identity(ir: &NetworkIR, lambda: f64) -> Self {
        let per_block = ir
            .blocks
            .iter()
            .map(|b| {
                let case = if b.excluded || b.stage == 0 { Case::Excluded } else { Case::B };
                (b.name.clone(), BlockFactors::identity(case))
            })
            .collect();
        Self { per_block, lambda_used: lambda, lambda_o: 0.0 }
    }

    pub fn is_identity(&self) -> bool {
        self.per_block.iter().all(|(_, f)| f.is_identity())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# xi-aggregation={XI_AGGREGATION}");
        let _ = writeln!(out, "lambda={:?}", self.lambda_used);
        let _ = writeln!(out, "lambda_o={:?}", self.lambda_o);
        for (name, f) in &self.per_block {
            let _ = writeln!(out, "plan {name} stretch={:?} split={} case={}", f.stretch, f.split, f.case);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, PlanError> {
        let mut lambda = None;
        let mut lambda_o = None;
        let mut rows = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |message: String| PlanError::Syntax { line, message };
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            if let Some(v) = trimmed.strip_prefix("lambda_o=") {
                lambda_o = Some(v.parse::<f64>().map_err(|_| err(format!("bad lambda_o `{v}`")))?);
            } else if let Some(v) = trimmed.strip_prefix("lambda=") {
                lambda = Some(v.parse::<f64>().map_err(|_| err(format!("bad lambda `{v}`")))?);
            } else if let Some(rest) = trimmed.strip_prefix("plan ") {
                let tokens: Vec<&str> = rest.split_whitespace().collect();
                let [name, stretch, split, case] = tokens.as_slice() else {
                    return Err(err("expected `plan <block> stretch=<real> split=<u32> case=<a|b|x>`".into()));
                };
                let field = |tok: &str, key: &str| {
                    tok.strip_prefix(key).and_then(|t| t.strip_prefix('=')).map(str::to_string).ok_or_else(|| err(format!("expected `{key}=`, got `{tok}`")))
                };
                let stretch: f64 = field(stretch, "stretch")?.parse().map_err(|_| err("bad stretch".into()))?;
                let split: u32 = field(split, "split")?.parse().map_err(|_| err("bad split".into()))?;
                let case = Case::from_code(&field(case, "case")?).ok_or_else(|| err("case must be a, b or x".into()))?;
                if !(stretch >= 1.0 && stretch.is_finite()) || split == 0 {
                    return Err(err(format!("block `{name}`: need stretch >= 1 and split >= 1")));
                }
                if rows.iter().any(|(n, _, _, _)| n == name) {
                    return Err(err(format!("duplicate block `{name}`")));
                }
                rows.push((name.to_string(), stretch, split, case));
            } else {
                return Err(err(format!("unrecognised line `{trimmed}`")));
            }
        }
        let lambda = lambda.ok_or(PlanError::Syntax { line: 0, message: "missing `lambda=` header".into() })?;
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(PlanError::InvalidLambda(lambda));
        }
        let per_block = rows
            .into_iter()
            .map(|(name, stretch, split, case)| {
                let stretch_steps = ((stretch - 1.0) / lambda).round() as u32;
                (name, BlockFactors { stretch, stretch_steps, split, case })
            })
            .collect();
        Ok(Self { per_block, lambda_used: lambda, lambda_o: lambda_o.unwrap_or(0.0) })
    }
}

// ---------------------------------------------------------------------------
// Scalar functions
// ---------------------------------------------------------------------------

/// `floor(x / lambda)` with near-integer snapping.
pub fn psi(x: f64, lambda: f64) -> u32 {
    debug_assert!(lambda > 0.0);
    let q = (x / lambda).max(0.0);
    let nearest = q.round();
    let steps = if (q - nearest).abs() <= FLOOR_SNAP { nearest } else { q.floor() };
    steps.min(f64::from(u32::MAX)) as u32
}

/// `lambda * psi(x)`.
pub fn phi(x: f64, lambda: f64) -> f64 {
    lambda * f64::from(psi(x, lambda))
}

/// Average separation-improvement ratio of the stages after `stage`,
/// leaving out the final stage. `stage_ratios[s]` is the `n_plus/n_total`
/// of stage `s`; its length is the number of stages.
pub fn xi(stage_ratios: &[f64], stage: usize) -> f64 {
    let last = stage_ratios.len().saturating_sub(1);
    let first = stage + 1;
    if first >= last {
        return 0.0;
    }
    stage_ratios[first..last].iter().sum::<f64>() / (last - first) as f64
}

fn ratio(count: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}

pub fn split_exponent(n_minus: u64, n_total: u64, xi_l: f64, lambda: f64) -> u32 {
    psi(ratio(n_minus, n_total) * xi_l, lambda)
}

/// `2^psi(n_minus/n_total * xi)`; `None` if it overflows `u32`.
pub fn split_factor(n_minus: u64, n_total: u64, xi_l: f64, lambda: f64) -> Option<u32> {
    1u32.checked_shl(split_exponent(n_minus, n_total, xi_l, lambda))
}

/// `1 + phi(n_plus/n_total * xi)`.
pub fn stretch_factor(n_plus: u64, n_total: u64, xi_l: f64, lambda: f64) -> f64 {
    1.0 + phi(ratio(n_plus, n_total) * xi_l, lambda)
}

// ---------------------------------------------------------------------------
// Network-level planning
// ---------------------------------------------------------------------------

/// Per-stage `n_plus/n_total`, averaged over the stage's tallied blocks.
/// Stage 0 (and any stage without tallies) gets 0.
pub fn stage_plus_ratios(ir: &NetworkIR, tallies: &TallyTable) -> Result<Vec<f64>, PlanError> {
    let seq = analysis_sequence(ir)?;
    Ok(seq
        .stages
        .iter()
        .map(|stage| {
            let ratios: Vec<f64> = stage
                .blocks
                .iter()
                .filter_map(|b| tallies.get(b))
                .map(|t| ratio(t.n_plus, t.n_total))
                .collect();
            if stage.index == 0 || ratios.is_empty() {
                0.0
            } else {
                ratios.iter().sum::<f64>() / ratios.len() as f64
            }
        })
        .collect())
}

/// Everything the factor formulas need for one analyzable block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTerms {
    pub block: String,
    pub stage: u32,
    pub tally: SeparationTally,
    pub xi: f64,
    /// `n_plus/n_total * xi`
    pub plus_term: f64,
    /// `n_minus/n_total * xi`
    pub minus_term: f64,
    pub case: Case,
}

fn is_analyzable(ir: &NetworkIR, name: &str) -> bool {
    ir.block(name).is_some_and(|b| !b.excluded && b.stage > 0)
}

/// Terms for every non-excluded block past the first stage, in IR order.
pub fn layer_terms(ir: &NetworkIR, tallies: &TallyTable) -> Result<Vec<LayerTerms>, PlanError> {
    for e in &tallies.entries {
        if ir.block(&e.block).is_none() {
            return Err(PlanError::UnknownBlock(e.block.clone()));
        }
    }
    let ratios = stage_plus_ratios(ir, tallies)?;
    let mut out = Vec::new();
    for b in ir.blocks.iter().filter(|b| is_analyzable(ir, &b.name)) {
        let tally = *tallies.get(&b.name).ok_or_else(|| PlanError::MissingTally(b.name.clone()))?;
        let xi_l = xi(&ratios, b.stage as usize);
        let case = if tally.n_plus < tally.n_minus { Case::A } else { Case::B };
        out.push(LayerTerms {
            block: b.name.clone(),
            stage: b.stage,
            tally,
            xi: xi_l,
            plus_term: ratio(tally.n_plus, tally.n_total) * xi_l,
            minus_term: ratio(tally.n_minus, tally.n_total) * xi_l,
            case,
        });
    }
    Ok(out)
}

/// Smallest `lambda` above which every factor is the identity: the largest
/// plus/minus term over case-b blocks and minus term over case-a blocks.
pub fn lambda_upper_bound(ir: &NetworkIR, tallies: &TallyTable) -> Result<f64, PlanError> {
    let terms = layer_terms(ir, tallies)?;
    if terms.is_empty() {
        return Err(PlanError::NoAnalyzableLayers);
    }
    Ok(bound_from_terms(&terms))
}

fn bound_from_terms(terms: &[LayerTerms]) -> f64 {
    terms
        .iter()
        .map(|t| match t.case {
            Case::B => t.plus_term.max(t.minus_term),
            _ => t.minus_term,
        })
        .fold(0.0, f64::max)
}

pub fn build_plan(ir: &NetworkIR, tallies: &TallyTable, cfg: &PlannerConfig) -> Result<RefinementPlan, PlanError> {
    cfg.validate()?;
    let lambda = cfg.lambda;
    let terms = layer_terms(ir, tallies)?;
    let lambda_o = bound_from_terms(&terms);

    let mut per_block = Vec::with_capacity(ir.blocks.len());
    for b in &ir.blocks {
        let Some(t) = terms.iter().find(|t| t.block == b.name) else {
            per_block.push((b.name.clone(), BlockFactors::identity(Case::Excluded)));
            continue;
        };
        let exponent = psi(t.minus_term, lambda);
        let split = 1u32.checked_shl(exponent).ok_or_else(|| PlanError::SplitOverflow { block: b.name.clone(), exponent })?;
        let stretch_steps = if t.case == Case::B { psi(t.plus_term, lambda) } else { 0 };
        let factors = BlockFactors { stretch: 1.0 + lambda * f64::from(stretch_steps), stretch_steps, split, case: t.case };
        per_block.push((b.name.clone(), factors));
    }
    Ok(RefinementPlan { per_block, lambda_used: lambda, lambda_o })
}

/// `steps` evenly spaced values from `min` to `max` inclusive; a single
/// step yields `[min]`.
pub fn lambda_grid(min: f64, max: f64, steps: usize) -> Vec<f64> {
    match steps {
        0 => Vec::new(),
        1 => vec![min],
        n => (0..n).map(|i| min + (max - min) * i as f64 / (n - 1) as f64).collect(),
    }
}
