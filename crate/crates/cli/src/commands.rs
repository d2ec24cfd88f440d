use std::path::{Path, PathBuf};

use iemf_core::analysis::{
    computational_cost, hessian_eigens, landscape_slice, sharpness, verify_contraction, CostCurve, HessianSpectrum,
    ModelObjective, SharpnessReport,
};
use iemf_core::container::{load_dataset, load_model, save_dataset, save_model, write_atomic};
use iemf_core::continual::{aa_aia, afr, build_task_stream, train_incremental, AccuracyMatrix};
use iemf_core::data::{generate, Dataset};
use iemf_core::training::{train_with, XiRecord};
use iemf_core::{Batch, EpochMetrics, Error, MultimodalModel, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const DATASET_FILE: &str = "dataset.iemf";
pub const CHECKPOINT_FILE: &str = "checkpoint.iemf";

/// Resolved configuration plus the directory every output goes to.
pub struct Context {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub threads: usize,
}

impl Context {
    pub fn new(config: ExperimentConfig, out: Option<PathBuf>, threads: usize) -> Result<Self> {
        let out = out.unwrap_or_else(|| config.output_dir.clone());
        std::fs::create_dir_all(&out).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("output directory {}: {e}", out.display())))
        })?;
        Ok(Self { config, out, threads: threads.max(1) })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, contents: &str) -> Result<()> {
        write_atomic(&self.path(name), contents.as_bytes())
    }

    fn echo_config(&self) -> Result<()> {
        self.write(RESOLVED_CONFIG, &self.config.to_json()?)
    }

    /// Reads `--data`, or generates the configured dataset in memory.
    fn dataset(&mut self, data: Option<&Path>) -> Result<Dataset> {
        let ds = match data {
            Some(p) => load_dataset(p).map_err(|e| name_artifact(e, "dataset", p))?,
            None => generate(&self.config.data)?,
        };
        self.config.adopt_data_spec(&ds.spec)?;
        Ok(ds)
    }
}

fn name_artifact(e: Error, what: &str, path: &Path) -> Error {
    match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{what} {}: {io}", path.display()))),
        Error::Format(m) => Error::Format(format!("{what} {}: {m}", path.display())),
        other => other,
    }
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(|e| Error::Format(e.to_string()))
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn generate_cmd(mut ctx: Context) -> Result<PathBuf> {
    let ds = ctx.dataset(None)?;
    let path = ctx.path(DATASET_FILE);
    save_dataset(&ds, &path)?;
    ctx.echo_config()?;
    log::info!("wrote {} ({} train / {} test rows)", path.display(), ds.train.len(), ds.test.len());
    Ok(path)
}

pub fn train_cmd(mut ctx: Context, data: Option<&Path>) -> Result<Vec<EpochMetrics>> {
    let ds = ctx.dataset(data)?;
    ctx.echo_config()?;
    let cfg = &ctx.config;
    let model = MultimodalModel::new(cfg.model.clone(), cfg.seed)?;
    let mut metrics: Vec<EpochMetrics> = Vec::new();
    let mut trace: Vec<XiRecord> = Vec::new();
    // rewritten after every epoch so an interrupted run keeps its logs
    let result = train_with(model, &ds, &cfg.optim, |m, xi| {
        metrics.push(m.clone());
        trace.extend_from_slice(xi);
        ctx.write("metrics.csv", &to_csv(&metrics)?)?;
        ctx.write("xi_trace.csv", &to_csv(&trace)?)?;
        log::info!(
            "epoch {:>3}  loss {:.4}  train {:.3}  test {:.3}  xi {:.4}",
            m.epoch,
            m.train_loss,
            m.train_acc,
            m.test_acc,
            m.mean_xi
        );
        Ok(())
    })?;
    save_model(&result.model, &ctx.path(CHECKPOINT_FILE))?;
    Ok(result.epochs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualMetrics {
    pub aa: Vec<f64>,
    pub aia: f64,
    /// Absent for a single task.
    pub afr: Option<f64>,
}

pub fn continual_metrics(matrix: &AccuracyMatrix) -> Result<ContinualMetrics> {
    let (aa, aia) = aa_aia(matrix)?;
    let afr = if matrix.tasks() >= 2 { Some(afr(matrix)?) } else { None };
    Ok(ContinualMetrics { aa, aia, afr })
}

fn matrix_csv(matrix: &AccuracyMatrix) -> Result<String> {
    let k = matrix.tasks();
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = std::iter::once("task".to_string()).chain((1..=k).map(|j| format!("a_{j}"))).collect();
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for (i, row) in matrix.complete_rows()?.iter().enumerate() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(row.iter().map(|a| a.to_string()));
        rec.resize(k + 1, String::new());
        w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn continual_cmd(mut ctx: Context, data: Option<&Path>) -> Result<ContinualMetrics> {
    let ds = ctx.dataset(data)?;
    ctx.echo_config()?;
    let cfg = &ctx.config;
    let stream = build_task_stream(&ds, cfg.continual.tasks, cfg.continual.classes_per_task, cfg.seed)?;
    let model = MultimodalModel::new(cfg.model.clone(), cfg.seed)?;
    let (matrix, _) = train_incremental(&stream, model, &cfg.optim, &cfg.continual)?;
    let metrics = continual_metrics(&matrix)?;
    ctx.write("accuracy_matrix.csv", &matrix_csv(&matrix)?)?;
    ctx.write("continual_metrics.json", &to_json(&metrics)?)?;
    Ok(metrics)
}

fn analysis_inputs(
    ctx: &mut Context,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
) -> Result<(MultimodalModel, Batch)> {
    let ckpt = checkpoint.ok_or_else(|| Error::Config("missing --checkpoint (a trained checkpoint file)".into()))?;
    let model = load_model(ckpt).map_err(|e| name_artifact(e, "checkpoint", ckpt))?;
    let ds = ctx.dataset(data)?;
    if model.config.d_in_a != ds.spec.d_in_a
        || model.config.d_in_v != ds.spec.d_in_v
        || model.config.n_classes != ds.spec.n_classes
    {
        return Err(Error::Config("checkpoint widths do not match the dataset".into()));
    }
    ctx.config.model = model.config.clone();
    let rows: Vec<usize> = (0..ctx.config.analysis.batch_rows.min(ds.train.len())).collect();
    Ok((model, ds.train.select(&rows)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharpnessOutput {
    #[serde(flatten)]
    pub report: SharpnessReport,
    pub hessian: Option<HessianSpectrum>,
}

pub fn sharpness_cmd(mut ctx: Context, checkpoint: Option<&Path>, data: Option<&Path>) -> Result<SharpnessOutput> {
    let (model, batch) = analysis_inputs(&mut ctx, checkpoint, data)?;
    ctx.echo_config()?;
    let a = &ctx.config.analysis;
    let obj = ModelObjective::new(&model, &batch, a.scope);
    let report = sharpness(&obj, a.radius, a.probes, a.ascent_steps, a.seed, ctx.threads)?;
    let hessian = if a.hessian { Some(hessian_eigens(&obj, ctx.threads)?) } else { None };
    let out = SharpnessOutput { report, hessian };
    ctx.write("sharpness.json", &to_json(&out)?)?;
    Ok(out)
}

pub fn landscape_cmd(mut ctx: Context, checkpoint: Option<&Path>, data: Option<&Path>) -> Result<()> {
    let (model, batch) = analysis_inputs(&mut ctx, checkpoint, data)?;
    ctx.echo_config()?;
    let a = &ctx.config.analysis;
    let obj = ModelObjective::new(&model, &batch, a.scope);
    let grid = landscape_slice(&obj, a.grid_n, a.extent, a.seed, ctx.threads)?;
    #[derive(Serialize)]
    struct Cell {
        x: f64,
        y: f64,
        loss: f64,
    }
    let cells: Vec<Cell> = grid.cells().map(|(x, y, loss)| Cell { x, y, loss }).collect();
    ctx.write("landscape.csv", &to_csv(&cells)?)
}

pub fn contraction_cmd(ctx: Context) -> Result<bool> {
    ctx.echo_config()?;
    let a = &ctx.config.analysis;
    let report = verify_contraction(&a.contraction, a.contraction_steps)?;
    ctx.write("contraction_report.json", &to_json(&report)?)?;
    if report.diverged {
        log::warn!("problem violates the step-size bound; the recursion check is informational");
        return Ok(report.passed);
    }
    if !report.passed {
        return Err(Error::Numeric(format!(
            "recursion residual {:e} exceeds {:e}",
            report.max_residual, report.tolerance
        )));
    }
    Ok(true)
}

/// `name=path` pairs; a bare path is named after its parent directory.
pub fn parse_metrics_arg(arg: &str) -> (String, PathBuf) {
    match arg.split_once('=') {
        Some((n, p)) if !n.is_empty() => (n.to_string(), PathBuf::from(p)),
        _ => {
            let p = PathBuf::from(arg);
            let name = p
                .parent()
                .and_then(Path::file_name)
                .or_else(|| p.file_stem())
                .map_or_else(|| arg.to_string(), |n| n.to_string_lossy().into_owned());
            (name, p)
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| name_artifact(Error::Io(e), "metrics file", path))?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let rows = r
        .deserialize()
        .collect::<std::result::Result<Vec<EpochMetrics>, _>>()
        .map_err(|e| Error::Format(format!("metrics file {}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(Error::Format(format!("metrics file {} has no epochs", path.display())));
    }
    Ok(rows)
}

/// Test error per epoch and per-epoch FLOPs recovered from a metrics file.
pub fn cost_curve(name: &str, rows: &[EpochMetrics]) -> CostCurve {
    let first = &rows[0];
    CostCurve {
        name: name.to_string(),
        errors: rows.iter().map(|m| 1.0 - m.test_acc).collect(),
        flops_per_epoch: first.flops_cumulative as f64 / first.epoch.max(1) as f64,
    }
}

pub fn cost_cmd(ctx: Context, metrics: &[String]) -> Result<iemf_core::analysis::CostReport> {
    if metrics.len() < 2 {
        return Err(Error::Config("cost needs at least two --metrics files".into()));
    }
    ctx.echo_config()?;
    let curves = metrics
        .iter()
        .map(|arg| {
            let (name, path) = parse_metrics_arg(arg);
            Ok(cost_curve(&name, &read_metrics(&path)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = computational_cost(&curves, ctx.config.analysis.cost_levels)?;
    ctx.write("cost_report.json", &to_json(&report)?)?;
    Ok(report)
}
