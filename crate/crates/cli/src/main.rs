//! `archrefine`: correlation analysis and width/group refinement of
//! convolutional networks from externally dumped activations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use archrefine::evalkit::{precision_at_k, synth_activations, PredictionDump, SynthProfile};
use archrefine::featio::{cross_validate, load_manifest};
use archrefine::netir::{parse_network, serialize_network, NetworkIR};
use archrefine::planner::{build_plan, lambda_grid, lambda_upper_bound, PlannerConfig, RefinementPlan, DEFAULT_LAMBDA};
use archrefine::rewriter::{apply_plan_logged, size_report, sweep};
use archrefine::sepstats::{analyze_network, heatmap_csv, heatmap_pgm, AnalysisConfig, NetworkAnalysis, SeparationTally, TallyTable, DEFAULT_TIE_TOL};
use clap::{Args, Parser, Subcommand};
use log::warn;

#[derive(Parser)]
#[command(name = "archrefine", version, about = "Refine CNN widths and groups from inter-class correlation statistics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Correlation heatmaps and separation tallies for every layer.
    Analyze(AnalyzeArgs),
    /// Stretch and split factors for one lambda.
    Plan(PlanArgs),
    /// Rewrite a network with a plan and report its size.
    Apply(ApplyArgs),
    /// Plans and sizes over a grid of lambdas.
    Sweep(SweepArgs),
    /// Repeated analyze, plan and apply, one activation manifest per round.
    Iterate(IterateArgs),
    /// Synthetic activation dumps with prescribed class correlations.
    Synth(SynthArgs),
    /// precision@k of a prediction dump.
    Precision(PrecisionArgs),
}

#[derive(Args)]
struct AnalysisOpts {
    /// Pairs whose correlation moves by at most this much are ties.
    #[arg(long, default_value_t = DEFAULT_TIE_TOL)]
    tie_tol: f64,
    /// Fail instead of warning when a class has constant features.
    #[arg(long)]
    strict_degenerate: bool,
}

impl AnalysisOpts {
    fn config(&self) -> AnalysisConfig {
        AnalysisConfig { tie_tol: self.tie_tol, strict_degenerate: self.strict_degenerate, ..Default::default() }
    }
}

#[derive(Args)]
struct TallySource {
    /// Activation manifest to analyze.
    #[arg(long, conflicts_with = "tallies")]
    manifest: Option<PathBuf>,
    /// Tally table written by `analyze`.
    #[arg(long)]
    tallies: Option<PathBuf>,
    #[command(flatten)]
    analysis: AnalysisOpts,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    ir: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    analysis: AnalysisOpts,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    ir: PathBuf,
    #[command(flatten)]
    source: TallySource,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long)]
    ir: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    ir: PathBuf,
    #[command(flatten)]
    source: TallySource,
    #[arg(long, default_value_t = 0.05)]
    sweep_min: f64,
    /// Defaults to lambda_o.
    #[arg(long)]
    sweep_max: Option<f64>,
    #[arg(long, default_value_t = 20)]
    sweep_steps: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IterateArgs {
    #[arg(long)]
    ir: PathBuf,
    /// One manifest per round, dumped from the previous round's network.
    #[arg(long, required = true)]
    manifest: Vec<PathBuf>,
    /// Defaults to the number of manifests.
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    analysis: AnalysisOpts,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    profile: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving the dumps, `manifest.txt` and `network.ir`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PrecisionArgs {
    /// ATNS rank-2 score matrix, images x classes.
    #[arg(long)]
    scores: PathBuf,
    /// ATMH multi-hot ground truth.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    k: usize,
    /// Also write `reports/precision.txt` here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Plan(a) => plan(a),
        Command::Apply(a) => apply(a),
        Command::Sweep(a) => run_sweep(a),
        Command::Iterate(a) => iterate(a),
        Command::Synth(a) => synth(a),
        Command::Precision(a) => precision(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn read_ir(path: &Path) -> Result<NetworkIR> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_network(&text).with_context(|| format!("parsing {}", path.display()))
}

fn subdir(out: &Path, name: &str) -> Result<PathBuf> {
    let dir = out.join(name);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: PathBuf, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Layer names become file stems.
fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

fn lambda_tag(lambda: f64) -> String {
    format!("lambda{lambda:?}")
}

fn run_analysis(ir: &NetworkIR, manifest: &Path, opts: &AnalysisOpts) -> Result<NetworkAnalysis> {
    let sets = load_manifest(manifest).with_context(|| format!("loading {}", manifest.display()))?;
    if sets.is_empty() {
        bail!("manifest {} lists no layers", manifest.display());
    }
    cross_validate(&sets, ir)?;
    Ok(analyze_network(ir, &sets, &opts.config())?)
}

fn write_analysis(analysis: &NetworkAnalysis, out: &Path) -> Result<()> {
    let dir = subdir(out, "analysis")?;
    for c in &analysis.stack.per_layer {
        let stem = file_stem(&c.layer_name);
        write(dir.join(format!("{stem}.csv")), heatmap_csv(&c.values))?;
        write(dir.join(format!("{stem}.pgm")), heatmap_pgm(&c.values))?;
    }
    write_tallies(&analysis.tallies, &dir.join("tallies.csv"))
}

fn write_tallies(tallies: &TallyTable, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["block", "stage", "n_plus", "n_minus", "n_ties", "n_total"])?;
    for e in &tallies.entries {
        let t = &e.tally;
        w.write_record([e.block.clone(), e.stage.to_string(), t.n_plus.to_string(), t.n_minus.to_string(), t.n_ties.to_string(), t.n_total.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn read_tallies(path: &Path) -> Result<TallyTable> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut table = TallyTable::default();
    for (i, record) in r.records().enumerate() {
        let record = record?;
        let field = |j: usize| -> Result<u64> {
            let raw = record.get(j).with_context(|| format!("{} row {}: missing column {j}", path.display(), i + 1))?;
            raw.trim().parse().with_context(|| format!("{} row {}: bad count {raw:?}", path.display(), i + 1))
        };
        let tally = SeparationTally::new(field(2)?, field(3)?, field(4)?);
        if tally.n_total != field(5)? {
            bail!("{} row {}: counts do not sum to n_total", path.display(), i + 1);
        }
        let stage = u32::try_from(field(1)?)?;
        table.insert(record.get(0).unwrap_or_default(), stage, tally);
    }
    Ok(table)
}

fn tallies_for(ir: &NetworkIR, source: &TallySource) -> Result<TallyTable> {
    match (&source.manifest, &source.tallies) {
        (Some(m), _) => Ok(run_analysis(ir, m, &source.analysis)?.tallies),
        (None, Some(t)) => read_tallies(t),
        (None, None) => bail!("one of --manifest or --tallies is required"),
    }
}

fn warn_above(lambda: f64, lambda_o: f64) {
    if lambda > lambda_o {
        warn!("lambda {lambda} is above lambda_o {lambda_o}; no block will change");
    }
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let ir = read_ir(&a.ir)?;
    let analysis = run_analysis(&ir, &a.manifest, &a.analysis)?;
    write_analysis(&analysis, &a.out)
}

fn plan(a: PlanArgs) -> Result<()> {
    let ir = read_ir(&a.ir)?;
    let tallies = tallies_for(&ir, &a.source)?;
    let plan = build_plan(&ir, &tallies, &PlannerConfig::with_lambda(a.lambda)?)?;
    warn_above(a.lambda, plan.lambda_o);
    write(subdir(&a.out, "plans")?.join(format!("plan_{}.txt", lambda_tag(a.lambda))), plan.to_text())?;
    println!("lambda_o={:?}", plan.lambda_o);
    Ok(())
}

/// Writes `refined/<stem>.ir` and `reports/size_<stem>.{txt,csv}`.
fn apply_and_report(ir: &NetworkIR, plan: &RefinementPlan, out: &Path, stem: &str) -> Result<NetworkIR> {
    let (refined, _) = apply_plan_logged(ir, plan)?;
    let report = size_report(ir, &refined)?;
    write(subdir(out, "refined")?.join(format!("{stem}.ir")), serialize_network(&refined))?;
    let reports = subdir(out, "reports")?;
    write(reports.join(format!("size_{stem}.txt")), report.to_text())?;
    write(reports.join(format!("size_{stem}.csv")), report.to_csv())?;
    println!("{stem}: conv params {} -> {} ({:.2}% reduction)", report.original_conv_params, report.refined_conv_params, report.reduction_pct);
    Ok(refined)
}

fn apply(a: ApplyArgs) -> Result<()> {
    let ir = read_ir(&a.ir)?;
    let text = fs::read_to_string(&a.plan).with_context(|| format!("reading {}", a.plan.display()))?;
    let plan = RefinementPlan::parse(&text).with_context(|| format!("parsing {}", a.plan.display()))?;
    apply_and_report(&ir, &plan, &a.out, &format!("refined_{}", lambda_tag(plan.lambda_used)))?;
    Ok(())
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let ir = read_ir(&a.ir)?;
    let tallies = tallies_for(&ir, &a.source)?;
    let lambda_o = lambda_upper_bound(&ir, &tallies)?;
    let max = a.sweep_max.unwrap_or(lambda_o);
    if a.sweep_steps == 0 {
        bail!("--sweep-steps must be positive");
    }
    if a.sweep_steps > 1 && a.sweep_min >= max {
        bail!("sweep range is empty: min {} is not below max {max}", a.sweep_min);
    }
    let rows = sweep(&ir, &tallies, &lambda_grid(a.sweep_min, max, a.sweep_steps))?;

    let path = subdir(&a.out, "reports")?.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    let mut header = vec!["lambda".to_string(), "above_lambda_o".into(), "refined_conv_params".into()];
    for b in &ir.blocks {
        header.push(format!("{}_stretch", b.name));
        header.push(format!("{}_split", b.name));
    }
    w.write_record(&header)?;
    for row in &rows {
        let mut record = vec![format!("{:?}", row.lambda), row.above_lambda_o.to_string(), row.refined_conv_params.to_string()];
        for (_, f) in &row.plan.per_block {
            record.push(format!("{:?}", f.stretch));
            record.push(f.split.to_string());
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    println!("lambda_o={lambda_o:?}");
    Ok(())
}

fn iterate(a: IterateArgs) -> Result<()> {
    let rounds = a.rounds.unwrap_or(a.manifest.len());
    if rounds > a.manifest.len() {
        bail!("{rounds} rounds requested but only {} manifests given", a.manifest.len());
    }
    let cfg = PlannerConfig::with_lambda(a.lambda)?;
    let mut ir = read_ir(&a.ir)?;
    for (round, manifest) in a.manifest.iter().take(rounds).enumerate() {
        let round = round + 1;
        let analysis = run_analysis(&ir, manifest, &a.analysis).with_context(|| format!("round {round}"))?;
        let plan = build_plan(&ir, &analysis.tallies, &cfg)?;
        warn_above(a.lambda, plan.lambda_o);
        write(subdir(&a.out, "plans")?.join(format!("plan_round{round}.txt")), plan.to_text())?;
        ir = apply_and_report(&ir, &plan, &a.out, &format!("round{round}"))?;
    }
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let text = fs::read_to_string(&a.profile).with_context(|| format!("reading {}", a.profile.display()))?;
    let profile = SynthProfile::parse(&text)?;
    let output = synth_activations(&profile, a.seed)?;
    output.write_to(&a.out)?;
    write(a.out.join("network.ir"), serialize_network(&profile.chain_ir()?))
}

fn precision(a: PrecisionArgs) -> Result<()> {
    let dump = PredictionDump::read(&a.scores, &a.truth)?;
    let r = precision_at_k(&dump, a.k)?;
    let line = format!(
        "precision@{}={:.6} tp={} fp={} evaluated={} skipped={}\n",
        a.k, r.precision, r.true_positives, r.false_positives, r.evaluated, r.skipped
    );
    print!("{line}");
    if let Some(out) = &a.out {
        write(subdir(out, "reports")?.join("precision.txt"), line)?;
    }
    Ok(())
}
