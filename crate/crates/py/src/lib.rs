//! Python bindings for `archrefine`.

use std::collections::BTreeMap;
use std::fmt::Display;

use archrefine::evalkit::{self, PredictionDump, SynthProfile};
use archrefine::featio::{self, MultiHot, Tensor};
use archrefine::matrix::Matrix;
use archrefine::netir::{self, NetworkIR};
use archrefine::planner::{self, PlannerConfig, RefinementPlan};
use archrefine::rewriter;
use archrefine::sepstats::{self, AnalysisConfig, SeparationTally, TallyTable};
use archrefine::ClassMeans;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: impl Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).ok_or_else(|| PyValueError::new_err("rows must be non-empty and of equal length"))
}

#[pyclass(name = "Block", frozen, skip_from_py_object, get_all)]
#[derive(Clone)]
struct PyBlock {
    name: String,
    in_channels: u32,
    out_channels: u32,
    kernel: (u32, u32),
    group: u32,
    has_bias: bool,
    stage: u32,
    excluded: bool,
    prev: Vec<String>,
}

#[pyclass(name = "Network", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyNetwork(NetworkIR);

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        netir::parse_network(text).map(Self).map_err(err)
    }

    fn to_text(&self) -> String {
        netir::serialize_network(&self.0)
    }

    fn blocks(&self) -> Vec<PyBlock> {
        self.0
            .blocks
            .iter()
            .map(|b| PyBlock {
                name: b.name.clone(),
                in_channels: b.in_channels,
                out_channels: b.out_channels,
                kernel: (b.kernel_h, b.kernel_w),
                group: b.group,
                has_bias: b.has_bias,
                stage: b.stage,
                excluded: b.excluded,
                prev: b.prev.clone(),
            })
            .collect()
    }

    fn num_stages(&self) -> u32 {
        self.0.num_stages()
    }

    /// Weights (and biases) per block.
    fn param_count(&self) -> PyResult<BTreeMap<String, u64>> {
        netir::param_count(&self.0).map(|p| p.per_block).map_err(err)
    }

    fn conv_params(&self) -> PyResult<u64> {
        netir::param_count(&self.0).map(|p| p.conv_total).map_err(err)
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("Network({} blocks, {} stages)", self.0.blocks.len(), self.0.num_stages())
    }
}

#[pyclass(name = "Tally", frozen, skip_from_py_object, get_all)]
#[derive(Clone)]
struct PyTally {
    n_plus: u64,
    n_minus: u64,
    n_ties: u64,
    n_total: u64,
}

impl From<SeparationTally> for PyTally {
    fn from(t: SeparationTally) -> Self {
        Self { n_plus: t.n_plus, n_minus: t.n_minus, n_ties: t.n_ties, n_total: t.n_total }
    }
}

#[pymethods]
impl PyTally {
    fn __repr__(&self) -> String {
        format!("Tally(n_plus={}, n_minus={}, n_ties={}, n_total={})", self.n_plus, self.n_minus, self.n_ties, self.n_total)
    }
}

#[pyclass(name = "TallyTable", skip_from_py_object)]
#[derive(Clone, Default)]
struct PyTallyTable(TallyTable);

#[pymethods]
impl PyTallyTable {
    #[new]
    fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, block: String, stage: u32, n_plus: u64, n_minus: u64, n_ties: u64) {
        self.0.insert(block, stage, SeparationTally::new(n_plus, n_minus, n_ties));
    }

    fn get(&self, block: &str) -> Option<PyTally> {
        self.0.get(block).copied().map(Into::into)
    }

    fn blocks(&self) -> Vec<String> {
        self.0.entries.iter().map(|e| e.block.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(name = "Plan", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyPlan(RefinementPlan);

#[pymethods]
impl PyPlan {
    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        RefinementPlan::parse(text).map(Self).map_err(err)
    }

    #[staticmethod]
    fn identity(network: &PyNetwork, lambda_: f64) -> Self {
        Self(RefinementPlan::identity(&network.0, lambda_))
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    #[getter]
    fn lambda_used(&self) -> f64 {
        self.0.lambda_used
    }

    #[getter]
    fn lambda_o(&self) -> f64 {
        self.0.lambda_o
    }

    /// `{block: (stretch, split, case)}` with case one of `a`, `b`, `x`.
    fn factors(&self) -> BTreeMap<String, (f64, u32, char)> {
        self.0.per_block.iter().map(|(n, f)| (n.clone(), (f.stretch, f.split, f.case.code()))).collect()
    }

    fn is_identity(&self) -> bool {
        self.0.is_identity()
    }
}

#[pyclass(name = "SizeReport", frozen)]
struct PySizeReport(rewriter::SizeReport);

#[pymethods]
impl PySizeReport {
    #[getter]
    fn original_conv_params(&self) -> u64 {
        self.0.original_conv_params
    }

    #[getter]
    fn refined_conv_params(&self) -> u64 {
        self.0.refined_conv_params
    }

    #[getter]
    fn reduction_pct(&self) -> f64 {
        self.0.reduction_pct
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    fn to_csv(&self) -> String {
        self.0.to_csv()
    }
}

#[pyfunction]
#[pyo3(signature = (means, strict=false))]
fn correlation_matrix(means: Vec<Vec<f64>>, strict: bool) -> PyResult<Vec<Vec<f64>>> {
    let means = ClassMeans { layer_name: "layer".into(), means: matrix(means)? };
    sepstats::correlation_matrix(&means, strict).map(|c| c.values.to_rows()).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (prev, cur, tie_tol=sepstats::DEFAULT_TIE_TOL))]
fn separation_tally(prev: Vec<Vec<f64>>, cur: Vec<Vec<f64>>, tie_tol: f64) -> PyResult<PyTally> {
    let (prev, cur) = (matrix(prev)?, matrix(cur)?);
    if (prev.rows(), prev.cols()) != (cur.rows(), cur.cols()) {
        return Err(PyValueError::new_err("matrices differ in shape"));
    }
    Ok(sepstats::separation_tally(&prev, &cur, tie_tol).into())
}

/// Tallies and per-layer correlation matrices for the dumps in a manifest.
#[pyfunction]
#[pyo3(signature = (network, manifest, tie_tol=sepstats::DEFAULT_TIE_TOL, strict=false))]
fn analyze(network: &PyNetwork, manifest: &str, tie_tol: f64, strict: bool) -> PyResult<(PyTallyTable, BTreeMap<String, Vec<Vec<f64>>>)> {
    let sets = featio::load_manifest(manifest).map_err(err)?;
    featio::cross_validate(&sets, &network.0).map_err(err)?;
    let cfg = AnalysisConfig { tie_tol, strict_degenerate: strict, ..Default::default() };
    let analysis = sepstats::analyze_network(&network.0, &sets, &cfg).map_err(err)?;
    let matrices = analysis.stack.per_layer.iter().map(|c| (c.layer_name.clone(), c.values.to_rows())).collect();
    Ok((PyTallyTable(analysis.tallies), matrices))
}

#[pyfunction]
#[pyo3(name = "psi")]
fn py_psi(x: f64, lambda_: f64) -> u32 {
    planner::psi(x, lambda_)
}

#[pyfunction]
#[pyo3(name = "phi")]
fn py_phi(x: f64, lambda_: f64) -> f64 {
    planner::phi(x, lambda_)
}

#[pyfunction]
#[pyo3(name = "xi")]
fn py_xi(stage_ratios: Vec<f64>, stage: usize) -> f64 {
    planner::xi(&stage_ratios, stage)
}

#[pyfunction]
fn split_factor(n_minus: u64, n_total: u64, xi: f64, lambda_: f64) -> PyResult<u32> {
    planner::split_factor(n_minus, n_total, xi, lambda_).ok_or_else(|| PyValueError::new_err("split factor overflows u32"))
}

#[pyfunction]
fn stretch_factor(n_plus: u64, n_total: u64, xi: f64, lambda_: f64) -> f64 {
    planner::stretch_factor(n_plus, n_total, xi, lambda_)
}

#[pyfunction]
fn lambda_upper_bound(network: &PyNetwork, tallies: &PyTallyTable) -> PyResult<f64> {
    planner::lambda_upper_bound(&network.0, &tallies.0).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (network, tallies, lambda_=planner::DEFAULT_LAMBDA))]
fn build_plan(network: &PyNetwork, tallies: &PyTallyTable, lambda_: f64) -> PyResult<PyPlan> {
    let cfg = PlannerConfig::with_lambda(lambda_).map_err(err)?;
    planner::build_plan(&network.0, &tallies.0, &cfg).map(PyPlan).map_err(err)
}

#[pyfunction]
fn apply_plan(network: &PyNetwork, plan: &PyPlan) -> PyResult<PyNetwork> {
    rewriter::apply_plan(&network.0, &plan.0).map(PyNetwork).map_err(err)
}

#[pyfunction]
fn size_report(before: &PyNetwork, after: &PyNetwork) -> PyResult<PySizeReport> {
    rewriter::size_report(&before.0, &after.0).map(PySizeReport).map_err(err)
}

/// `(precision, true_positives, false_positives)`.
#[pyfunction]
fn precision_at_k(scores: Vec<Vec<f64>>, truth: Vec<Vec<u8>>, k: usize) -> PyResult<(f64, u64, u64)> {
    let truth = MultiHot::from_rows(&truth).map_err(err)?;
    let dump = PredictionDump::new(matrix(scores)?, truth).map_err(err)?;
    let r = evalkit::precision_at_k(&dump, k).map_err(err)?;
    Ok((r.precision, r.true_positives, r.false_positives))
}

/// Writes synthetic dumps for a profile into `out_dir`; returns the manifest
/// path and the matching chain network.
#[pyfunction]
fn synth(profile: &str, seed: u64, out_dir: &str) -> PyResult<(String, PyNetwork)> {
    let profile = SynthProfile::parse(profile).map_err(err)?;
    let output = evalkit::synth_activations(&profile, seed).map_err(err)?;
    let manifest = output.write_to(out_dir).map_err(err)?;
    let ir = profile.chain_ir().map_err(err)?;
    Ok((manifest.to_string_lossy().into_owned(), PyNetwork(ir)))
}

/// `(dims, values)` of an ATNS file.
#[pyfunction]
fn read_tensor(path: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
    let t = featio::read_tensor_file(path).map_err(err)?;
    Ok((t.dims().to_vec(), t.data().to_vec()))
}

#[pyfunction]
fn write_tensor(path: &str, dims: Vec<usize>, values: Vec<f32>) -> PyResult<()> {
    let t = Tensor::new(dims, values).map_err(err)?;
    featio::write_tensor_file(path, &t).map_err(err)
}

#[pyfunction]
fn read_labels(path: &str) -> PyResult<Vec<u32>> {
    featio::read_labels_file(path).map_err(err)
}

#[pyfunction]
fn write_labels(path: &str, labels: Vec<u32>) -> PyResult<()> {
    featio::write_labels_file(path, &labels).map_err(err)
}

#[pymodule]
fn archrefine_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBlock>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyTally>()?;
    m.add_class::<PyTallyTable>()?;
    m.add_class::<PyPlan>()?;
    m.add_class::<PySizeReport>()?;
    m.add("DEFAULT_LAMBDA", planner::DEFAULT_LAMBDA)?;
    m.add_function(wrap_pyfunction!(correlation_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(separation_tally, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(py_psi, m)?)?;
    m.add_function(wrap_pyfunction!(py_phi, m)?)?;
    m.add_function(wrap_pyfunction!(py_xi, m)?)?;
    m.add_function(wrap_pyfunction!(split_factor, m)?)?;
    m.add_function(wrap_pyfunction!(stretch_factor, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_upper_bound, m)?)?;
    m.add_function(wrap_pyfunction!(build_plan, m)?)?;
    m.add_function(wrap_pyfunction!(apply_plan, m)?)?;
    m.add_function(wrap_pyfunction!(size_report, m)?)?;
    m.add_function(wrap_pyfunction!(precision_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(write_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(read_labels, m)?)?;
    m.add_function(wrap_pyfunction!(write_labels, m)?)?;
    Ok(())
}
