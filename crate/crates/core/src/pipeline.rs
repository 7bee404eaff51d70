//! End-to-end reconstruction: expression → embedding → locality graph →
//! patch cover → per-patch geometry → stitched distances → global solve.

use std::time::Instant;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::edm::DiffusionConfig;
use crate::error::{invalid_arg, invalid_input, Error, Result};
use crate::geometry::{select_rows, CoordinateTable, Mat};
use crate::metrics::{evaluate, MetricsConfig, MetricsReport};
use crate::patch_graph::{connect_graph, mutual_knn_graph, pca, ConnectReport, EmbeddingMatrix, GraphConfig, PatchConfig, PatchCover};
use crate::solver::{solve, SolveDiagnostics, SolverConfig};
use crate::stitching::{stitch, quantile_sorted, StitchConfig, StitchedGraph};
use crate::synthetic::{AnalyticConfig, AnalyticPredictor, LocalGeometryPredictor, OraclePredictor, OraclePredictorConfig, PseudoSpotConfig, Slide, SyntheticConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    #[default]
    Oracle,
    #[serde(alias = "analytic-gaussian")]
    Analytic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    /// Number of principal components of log1p expression.
    pub dim: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self { dim: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PathsConfig {
    /// Slide directory read by `reconstruct`.
    pub input: Option<String>,
    pub output: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub predictor: PredictorKind,
    pub synthetic: SyntheticConfig,
    pub spots: PseudoSpotConfig,
    pub embedding: EmbeddingConfig,
    pub graph: GraphConfig,
    pub patch: PatchConfig,
    pub oracle: OraclePredictorConfig,
    pub analytic: AnalyticConfig,
    pub diffusion: DiffusionConfig,
    pub stitch: StitchConfig,
    pub solver: SolverConfig,
    pub metrics: MetricsConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            predictor: PredictorKind::Oracle,
            synthetic: SyntheticConfig::default(),
            spots: PseudoSpotConfig::default(),
            embedding: EmbeddingConfig::default(),
            graph: GraphConfig::default(),
            patch: PatchConfig::default(),
            oracle: OraclePredictorConfig::default(),
            analytic: AnalyticConfig::default(),
            diffusion: DiffusionConfig::default(),
            stitch: StitchConfig::default(),
            solver: SolverConfig::default(),
            metrics: MetricsConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

/// Pipeline stages, also used as RNG stream ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth = 1,
    Embed = 2,
    Graph = 3,
    Patches = 4,
    Predict = 5,
    Stitch = 6,
    Solve = 7,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Embed => "embed",
            Stage::Graph => "graph",
            Stage::Patches => "patches",
            Stage::Predict => "predict",
            Stage::Stitch => "stitch",
            Stage::Solve => "solve",
        }
    }
}

fn mix(seed: u64, module_seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ module_seed
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.graph.validate()?;
        self.patch.validate()?;
        self.oracle.validate()?;
        self.diffusion.validate()?;
        self.stitch.validate()?;
        self.solver.validate()?;
        self.metrics.validate()?;
        if self.embedding.dim < 1 {
            return Err(invalid_arg("embedding.dim must be at least 1"));
        }
        if self.spots.enabled && !(self.spots.pitch > 0.0) {
            return Err(invalid_arg("spots.pitch must be positive"));
        }
        Ok(())
    }

    /// Deterministic generator for one stage given that module's own seed.
    pub fn stage_rng(&self, stage: Stage, module_seed: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(self.seed, module_seed));
        rng.set_stream(stage as u64);
        rng
    }

    pub fn oracle_config(&self) -> OraclePredictorConfig {
        OraclePredictorConfig { seed: mix(self.seed, self.oracle.seed), ..self.oracle.clone() }
    }

    pub fn to_value(&self) -> Result<Value> {
        Ok(serde_json::to_value(self)?)
    }

    /// Parses a config document; absent keys take their defaults and
    /// unknown keys are rejected.
    pub fn from_value(v: Value) -> Result<Self> {
        let defaults = Self::default().to_value()?;
        check_known_keys(&defaults, &v, "")?;
        let cfg: Self = serde_json::from_value(v).map_err(|e| invalid_arg(format!("config: {e}")))?;
        Ok(cfg)
    }
}

fn check_known_keys(reference: &Value, v: &Value, prefix: &str) -> Result<()> {
    if let (Value::Object(r), Value::Object(o)) = (reference, v) {
        for (k, val) in o {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match r.get(k) {
                None => return Err(invalid_arg(format!("unknown config key `{path}`"))),
                Some(rv) => check_known_keys(rv, val, &path)?,
            }
        }
    }
    Ok(())
}

/// Sets one dotted key; `raw` is parsed as JSON and falls back to a string.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(invalid_arg(format!("malformed config key `{key}`")));
    }
    let mut cur = doc;
    for p in &parts[..parts.len() - 1] {
        if !cur.is_object() {
            return Err(invalid_arg(format!("config key `{key}` does not name a section")));
        }
        cur = cur.as_object_mut().expect("object").entry(p.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    match cur.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), parsed);
            Ok(())
        }
        None => Err(invalid_arg(format!("config key `{key}` does not name a section"))),
    }
}

fn staged<T>(stage: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage { stage: stage.name().to_string(), cause: Box::new(e) })
}

/// `log1p` followed by PCA to `dim` components.
pub fn embed_expression(ids: Vec<String>, expression: &Mat, dim: usize) -> Result<(EmbeddingMatrix, f64)> {
    if expression.iter().any(|&v| v < 0.0) {
        return Err(invalid_input("expression must be nonnegative"));
    }
    let logged = expression.map(f64::ln_1p);
    let h = dim.min(logged.ncols()).min(logged.nrows());
    let p = pca(&logged, h)?;
    let ratio = p.explained_ratio();
    Ok((EmbeddingMatrix::new(ids, p.scores)?, ratio))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self { min: v[0], median: quantile_sorted(&v, 0.5), max: v[v.len() - 1] })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructDiagnostics {
    pub n_cells: usize,
    pub predictor: PredictorKind,
    pub embedding_dim: usize,
    pub explained_variance_ratio: f64,
    pub graph_edges: usize,
    pub connect: ConnectReport,
    pub n_patches: usize,
    pub patch_size: Option<Summary>,
    pub patch_overlaps: usize,
    pub min_coverage: usize,
    pub median_overlap_disagreement: Option<f64>,
    pub reliability: Option<Summary>,
    pub measurements: usize,
    pub dropped_zero: usize,
    pub stitched_edges: usize,
    pub solver: SolveDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: f64,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub coords: CoordinateTable,
    pub stitched: StitchedGraph,
    pub cover: PatchCover,
    pub reliability: Vec<f64>,
    pub diagnostics: ReconstructDiagnostics,
    pub timings: Vec<StageTiming>,
}

/// Builds the predictor named in the config from ground-truth coordinates.
pub fn make_predictor(cfg: &PipelineConfig, gt: &Mat) -> Result<Box<dyn LocalGeometryPredictor>> {
    Ok(match cfg.predictor {
        PredictorKind::Oracle => Box::new(OraclePredictor::new(gt, cfg.oracle_config())?),
        PredictorKind::Analytic => Box::new(AnalyticPredictor::new(gt, cfg.oracle_config(), cfg.analytic.clone(), cfg.diffusion.steps)?),
    })
}

/// Full chain with the predictor selected by `cfg`; the slide's coordinates
/// feed the oracle only.
pub fn reconstruct(slide: &Slide, cfg: &PipelineConfig) -> Result<Reconstruction> {
    let predictor = staged(Stage::Predict, make_predictor(cfg, &slide.coords.coords))?;
    reconstruct_with(slide, cfg, predictor.as_ref())
}

pub fn reconstruct_with(slide: &Slide, cfg: &PipelineConfig, predictor: &dyn LocalGeometryPredictor) -> Result<Reconstruction> {
    cfg.validate()?;
    let n = slide.len();
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let mut tick = |stage: Stage, timings: &mut Vec<StageTiming>| {
        let ms = clock.elapsed().as_secs_f64() * 1e3;
        info!("stage {} done in {:.1} ms", stage.name(), ms);
        timings.push(StageTiming { stage: stage.name().to_string(), millis: ms });
        clock = Instant::now();
    };

    let (z, ratio) = staged(Stage::Embed, embed_expression(slide.coords.ids.clone(), &slide.expression, cfg.embedding.dim))?;
    tick(Stage::Embed, &mut timings);

    let (graph, connect) = staged(Stage::Graph, {
        (|| {
            let mut g = mutual_knn_graph(&z, &cfg.graph)?;
            let rep = connect_graph(&mut g, &z)?;
            Ok((g, rep))
        })()
    })?;
    info!("locality graph: {} edges, {} reattached, {} bridges", graph.edge_count(), connect.reattached, connect.bridges);
    tick(Stage::Graph, &mut timings);

    let mut rng = cfg.stage_rng(Stage::Patches, cfg.patch.seed);
    let cover = staged(Stage::Patches, crate::patch_graph::sample_patches(&graph, &cfg.patch, &mut rng))?;
    info!("patch cover: {} patches", cover.patches.len());
    tick(Stage::Patches, &mut timings);

    let preds: Vec<Mat> = staged(
        Stage::Predict,
        cover
            .patches
            .par_iter()
            .enumerate()
            .map(|(p, idx)| predictor.predict(p, idx))
            .collect::<Result<Vec<_>>>(),
    )?;
    tick(Stage::Predict, &mut timings);

    let outcome = staged(Stage::Stitch, stitch(n, &preds, &cover, &cfg.stitch))?;
    if outcome.graph.edges.is_empty() {
        return Err(Error::Stage { stage: Stage::Stitch.name().into(), cause: Box::new(invalid_input("stitched graph is empty")) });
    }
    info!("stitched graph: {} edges from {} measurements", outcome.graph.edges.len(), outcome.measurements);
    tick(Stage::Stitch, &mut timings);

    let mut rng = cfg.stage_rng(Stage::Solve, cfg.solver.seed);
    let solved = staged(Stage::Solve, solve(&outcome.graph, &cfg.solver, &mut rng))?;
    tick(Stage::Solve, &mut timings);

    let sizes: Vec<f64> = cover.patches.iter().map(|p| p.len() as f64).collect();
    let diagnostics = ReconstructDiagnostics {
        n_cells: n,
        predictor: cfg.predictor,
        embedding_dim: z.values.ncols(),
        explained_variance_ratio: ratio,
        graph_edges: graph.edge_count(),
        connect,
        n_patches: cover.patches.len(),
        patch_size: Summary::of(&sizes),
        patch_overlaps: cover.neighbors.len(),
        min_coverage: cover.coverage(n).into_iter().min().unwrap_or(0),
        median_overlap_disagreement: outcome.overlap.median_pair_disagreement(),
        reliability: Summary::of(&outcome.reliability),
        measurements: outcome.measurements,
        dropped_zero: outcome.dropped_zero,
        stitched_edges: outcome.graph.edges.len(),
        solver: solved.diagnostics,
    };
    Ok(Reconstruction {
        coords: CoordinateTable::new(slide.coords.ids.clone(), solved.coords)?,
        stitched: outcome.graph,
        cover,
        reliability: outcome.reliability,
        diagnostics,
        timings,
    })
}

/// Reorders `pred` to the id order of `gt`; errors list missing ids.
pub fn align_ids(pred: &CoordinateTable, gt: &CoordinateTable) -> Result<Mat> {
    let pos: std::collections::HashMap<&str, usize> = pred.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let missing: Vec<&str> = gt.ids.iter().filter(|id| !pos.contains_key(id.as_str())).map(|s| s.as_str()).collect();
    let gt_set: std::collections::HashSet<&str> = gt.ids.iter().map(|s| s.as_str()).collect();
    let extra: Vec<&str> = pred.ids.iter().filter(|id| !gt_set.contains(id.as_str())).map(|s| s.as_str()).collect();
    if !missing.is_empty() || !extra.is_empty() || pred.len() != gt.len() {
        let show = |v: &[&str]| v.iter().take(10).copied().collect::<Vec<_>>().join(", ");
        return Err(invalid_input(format!(
            "id sets differ: {} missing from prediction [{}], {} unknown [{}]",
            missing.len(),
            show(&missing),
            extra.len(),
            show(&extra)
        )));
    }
    let order: Vec<usize> = gt.ids.iter().map(|id| pos[id.as_str()]).collect();
    Ok(select_rows(&pred.coords, &order))
}

/// Metrics of predicted coordinates against ground truth, matched by id.
pub fn evaluate_coords(pred: &CoordinateTable, gt: &CoordinateTable, cfg: &MetricsConfig) -> Result<MetricsReport> {
    let x = align_ids(pred, gt)?;
    let d = crate::geometry::pairwise_distances(&x);
    evaluate(Some(&x), &d, &gt.coords, cfg)
}
