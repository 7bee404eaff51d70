mod manifest;
mod report;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use distgeo::geometry::pairwise_distances;
use distgeo::io::{read_coords, read_json, read_labeled_matrix, write_coords, write_csv, write_json};
use distgeo::metrics::{default_distortion_params, distortion_map, evaluate, MetricsReport};
use distgeo::pipeline::{align_ids, apply_override, reconstruct, PipelineConfig, Stage, StageTiming};
use distgeo::synthetic::{generate_slide, pseudo_spot_aggregate, Slide};
use distgeo::Error;

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "distgeo", version, about = "Distance-first patchwise geometry reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic slide (and optionally a pseudo-spot slide).
    Synth(CommonArgs),
    /// Reconstruct coordinates from a slide directory.
    Reconstruct(ReconstructArgs),
    /// Score predicted coordinates or distances against ground truth.
    Evaluate(EvaluateArgs),
    /// Compare several metrics.json files in one table.
    Report(ReportArgs),
    /// Check the digests recorded in a run manifest.
    Verify(VerifyArgs),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON config; absent keys take the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Override one dotted config key, e.g. `--set solver.iterations=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Weighted,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum PredictorArg {
    Oracle,
    Analytic,
}

#[derive(Args)]
struct ReconstructArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Slide directory with coords.csv and expression.csv.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long, value_enum)]
    weighting: Option<WeightingArg>,
    #[arg(long, value_enum)]
    predictor: Option<PredictorArg>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Predicted coordinates (`id,x,y`).
    #[arg(long, conflicts_with = "pred_distances", required_unless_present = "pred_distances")]
    pred: Option<PathBuf>,
    /// Predicted distance matrix (`id,<ids...>`).
    #[arg(long)]
    pred_distances: Option<PathBuf>,
    /// Ground-truth coordinates (`id,x,y`).
    #[arg(long)]
    gt: PathBuf,
    /// Also write distortion.csv (requires --pred).
    #[arg(long)]
    distortion: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Write report.csv and report.md here instead of printing markdown.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Run directory containing manifest.json.
    dir: PathBuf,
}

struct CliError {
    code: u8,
    err: anyhow::Error,
}

type CliResult<T> = Result<T, CliError>;

fn usage(err: impl Into<anyhow::Error>) -> CliError {
    CliError { code: 2, err: err.into() }
}

fn runtime(err: impl Into<anyhow::Error>) -> CliError {
    CliError { code: 1, err: err.into() }
}

/// Bad arguments, configs and malformed inputs are usage errors; anything
/// failing inside a pipeline stage or on write is a runtime error.
fn classify(e: Error) -> CliError {
    match e {
        Error::InvalidArgument(_) | Error::InvalidInput(_) | Error::Parse { .. } | Error::Json(_) => usage(e),
        _ => runtime(e),
    }
}

fn read_input<T>(what: &Path, r: distgeo::Result<T>) -> CliResult<T> {
    r.map_err(|e| match e {
        Error::Io(io) => usage(anyhow::anyhow!("cannot read {}: {io}", what.display())),
        other => classify(other),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DISTGEO_LOG", "warn")).init();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
        Command::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.err);
            ExitCode::from(e.code)
        }
    }
}

fn set_threads(threads: Option<usize>) -> CliResult<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(usage(anyhow::anyhow!("--threads must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(runtime)?;
    }
    Ok(())
}

/// Defaults ← config file ← dotted overrides, then validated.
fn load_config(common: &CommonArgs, extra: &[(&str, String)]) -> CliResult<PipelineConfig> {
    let mut doc = PipelineConfig::default().to_value().map_err(runtime)?;
    if let Some(path) = &common.config {
        let file: Value = read_input(path, read_json(path))?;
        merge(&mut doc, file);
    }
    if let Some(seed) = common.seed {
        apply_override(&mut doc, "seed", &seed.to_string()).map_err(classify)?;
    }
    for (k, v) in extra {
        apply_override(&mut doc, k, v).map_err(classify)?;
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| usage(anyhow::anyhow!("--set expects KEY=VALUE, got `{kv}`")))?;
        apply_override(&mut doc, k.trim(), v.trim()).map_err(classify)?;
    }
    let cfg = PipelineConfig::from_value(doc).map_err(classify)?;
    cfg.validate().map_err(classify)?;
    Ok(cfg)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn out_dir(common: &CommonArgs, cfg: &PipelineConfig) -> CliResult<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.paths.output.as_ref().map(PathBuf::from))
        .ok_or_else(|| usage(anyhow::anyhow!("no output directory: pass --out or set paths.output")))?;
    fs::create_dir_all(&dir).map_err(|e| runtime(anyhow::anyhow!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

fn seeds(cfg: &PipelineConfig) -> BTreeMap<String, u64> {
    BTreeMap::from([
        ("seed".to_string(), cfg.seed),
        ("synthetic".to_string(), cfg.synthetic.seed),
        ("patch".to_string(), cfg.patch.seed),
        ("oracle".to_string(), cfg.oracle.seed),
        ("solver".to_string(), cfg.solver.seed),
        ("metrics".to_string(), cfg.metrics.seed),
    ])
}

fn write_manifest(dir: &Path, m: &RunManifest) -> CliResult<()> {
    write_json(&dir.join("manifest.json"), m).map_err(runtime)
}

fn cmd_synth(a: CommonArgs) -> CliResult<()> {
    set_threads(a.threads)?;
    let cfg = load_config(&a, &[])?;
    let dir = out_dir(&a, &cfg)?;
    let t = Instant::now();
    let mut rng = cfg.stage_rng(Stage::Synth, cfg.synthetic.seed);
    let slide = generate_slide(&cfg.synthetic, &mut rng).map_err(classify)?;
    slide.write(&dir).map_err(runtime)?;
    let mut m = RunManifest::new("synth", cfg.to_value().map_err(runtime)?, seeds(&cfg));
    for f in ["coords.csv", "expression.csv", "domains.csv"] {
        m.record(&dir, f).map_err(runtime)?;
    }
    if cfg.spots.enabled {
        let spots = pseudo_spot_aggregate(&slide.coords, &slide.expression, &slide.gene_names, cfg.spots.pitch, cfg.spots.min_cells)
            .map_err(classify)?;
        if spots.members.is_empty() {
            log::warn!("pseudo-spot slide is empty at min_cells = {}", cfg.spots.min_cells);
        }
        spots.write(&dir.join("spots"), &slide.coords.ids, &slide.domains).map_err(runtime)?;
        for f in ["coords.csv", "expression.csv", "domains.csv", "members.json"] {
            m.record(&dir, &format!("spots/{f}")).map_err(runtime)?;
        }
    }
    m.timings.push(StageTiming { stage: "synth".into(), millis: t.elapsed().as_secs_f64() * 1e3 });
    write_manifest(&dir, &m)
}

fn cmd_reconstruct(a: ReconstructArgs) -> CliResult<()> {
    set_threads(a.common.threads)?;
    let mut extra: Vec<(&str, String)> = Vec::new();
    if let Some(p) = a.patch_size {
        extra.push(("patch.n_patch", p.to_string()));
    }
    if let Some(w) = a.weighting {
        extra.push(("stitch.weighting", match w { WeightingArg::Weighted => "weighted", WeightingArg::Uniform => "uniform" }.into()));
    }
    if let Some(p) = a.predictor {
        extra.push(("predictor", match p { PredictorArg::Oracle => "oracle", PredictorArg::Analytic => "analytic" }.into()));
    }
    let cfg = load_config(&a.common, &extra)?;
    let input = a
        .input
        .clone()
        .or_else(|| cfg.paths.input.as_ref().map(PathBuf::from))
        .ok_or_else(|| usage(anyhow::anyhow!("no input slide: pass --input or set paths.input")))?;
    let slide = read_input(&input, Slide::read(&input))?;
    let dir = out_dir(&a.common, &cfg)?;
    let rec = reconstruct(&slide, &cfg).map_err(classify)?;

    write_coords(&dir.join("X.csv"), &rec.coords).map_err(runtime)?;
    rec.stitched.write_csv(&dir.join("stitched.csv")).map_err(runtime)?;
    write_json(&dir.join("patches.json"), &rec.cover.patches).map_err(runtime)?;
    write_json(&dir.join("diagnostics.json"), &rec.diagnostics).map_err(runtime)?;

    let mut m = RunManifest::new("reconstruct", cfg.to_value().map_err(runtime)?, seeds(&cfg));
    for f in ["X.csv", "stitched.csv", "patches.json", "diagnostics.json"] {
        m.record(&dir, f).map_err(runtime)?;
    }
    m.timings = rec.timings;
    m.patch_count = Some(rec.diagnostics.n_patches);
    m.stitched_edges = Some(rec.diagnostics.stitched_edges);
    let s = &rec.diagnostics.solver;
    m.solver = Some(serde_json::json!({
        "initial_stress1": s.initial_stress1,
        "final_stress1": s.final_stress1,
        "components": s.components,
        "aborted": s.aborted,
    }));
    write_manifest(&dir, &m)
}

fn read_distance_matrix(path: &Path, gt_ids: &[String]) -> CliResult<distgeo::Mat> {
    let m = read_input(path, read_labeled_matrix(path))?;
    if m.ids != m.columns {
        return Err(usage(anyhow::anyhow!("{}: row ids and column ids differ", path.display())));
    }
    let pos: HashMap<&str, usize> = m.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let missing: Vec<&str> = gt_ids.iter().filter(|id| !pos.contains_key(id.as_str())).map(|s| s.as_str()).collect();
    if !missing.is_empty() || m.ids.len() != gt_ids.len() {
        return Err(usage(anyhow::anyhow!(
            "id sets differ: missing from prediction [{}]",
            missing.iter().take(10).copied().collect::<Vec<_>>().join(", ")
        )));
    }
    let order: Vec<usize> = gt_ids.iter().map(|id| pos[id.as_str()]).collect();
    Ok(distgeo::Mat::from_fn(order.len(), order.len(), |i, j| m.values[(order[i], order[j])]))
}

fn cmd_evaluate(a: EvaluateArgs) -> CliResult<()> {
    set_threads(a.common.threads)?;
    let cfg = load_config(&a.common, &[])?;
    let gt = read_input(&a.gt, read_coords(&a.gt))?;
    let (x, d) = match (&a.pred, &a.pred_distances) {
        (Some(p), _) => {
            let pred = read_input(p, read_coords(p))?;
            let x = align_ids(&pred, &gt).map_err(classify)?;
            let d = pairwise_distances(&x);
            (Some(x), d)
        }
        (None, Some(p)) => (None, read_distance_matrix(p, &gt.ids)?),
        (None, None) => return Err(usage(anyhow::anyhow!("pass --pred or --pred-distances"))),
    };
    if a.distortion && x.is_none() {
        return Err(usage(anyhow::anyhow!("--distortion needs predicted coordinates (--pred)")));
    }
    let dir = out_dir(&a.common, &cfg)?;
    let t = Instant::now();
    let rep: MetricsReport = evaluate(x.as_ref(), &d, &gt.coords, &cfg.metrics).map_err(classify)?;
    write_json(&dir.join("metrics.json"), &rep).map_err(runtime)?;
    let mut m = RunManifest::new("evaluate", cfg.to_value().map_err(runtime)?, seeds(&cfg));
    m.record(&dir, "metrics.json").map_err(runtime)?;
    if let (true, Some(x)) = (a.distortion, &x) {
        let (block, eps) = default_distortion_params(&pairwise_distances(&gt.coords));
        let map = distortion_map(x, &gt.coords, block, eps).map_err(classify)?;
        map.write(&dir.join("distortion.csv")).map_err(runtime)?;
        m.record(&dir, "distortion.csv").map_err(runtime)?;
        m.record(&dir, "distortion.csv.json").map_err(runtime)?;
    }
    m.timings.push(StageTiming { stage: "evaluate".into(), millis: t.elapsed().as_secs_f64() * 1e3 });
    write_manifest(&dir, &m)
}

fn report_label(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_report(a: ReportArgs) -> CliResult<()> {
    let mut reports = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    for p in &a.reports {
        reports.push(read_input(p, read_json::<MetricsReport>(p))?);
        let mut label = report_label(p);
        if labels.contains(&label) {
            label = p.display().to_string();
        }
        labels.push(label);
    }
    let table = report::build(labels, &reports).map_err(|e| usage(anyhow::anyhow!(e)))?;
    match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| runtime(anyhow::anyhow!("cannot create {}: {e}", dir.display())))?;
            let (header, rows) = table.to_csv_rows();
            let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
            write_csv(&dir.join("report.csv"), &header, rows.into_iter()).map_err(runtime)?;
            distgeo::io::atomic_write(&dir.join("report.md"), table.to_markdown().as_bytes()).map_err(runtime)?;
        }
        None => print!("{}", table.to_markdown()),
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> CliResult<()> {
    let path = a.dir.join("manifest.json");
    let m: RunManifest = read_input(&path, read_json(&path))?;
    let bad = m.mismatches(&a.dir);
    if bad.is_empty() {
        println!("ok: {} files match {}", m.outputs.len(), path.display());
        Ok(())
    } else {
        for (f, why) in &bad {
            eprintln!("mismatch: {f}: {why}");
        }
        Err(runtime(anyhow::anyhow!("{} of {} files do not match the manifest", bad.len(), m.outputs.len())))
    }
}
