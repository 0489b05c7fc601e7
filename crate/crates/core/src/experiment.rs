//! Experiment configuration, single runs, the configuration matrix and the
//! results table.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Depth;
use crate::checkpoint::Checkpoint;
use crate::config::{FusionConfig, FusionType};
use crate::data::{
    generate_synthetic, load_manifest, split_by_column, stratified_split, Dataset, IpsilateralCase,
    LoadOptions, Standardizer, SynthSpec, ViewRoles,
};
use crate::error::{Error, Result};
use crate::fusion::{AggregationKind, SkipFlags};
use crate::metrics::MetricsReport;
use crate::model::FusionNet;
use crate::nn::Parameterized;
use crate::train::{evaluate, train_model, TrainConfig, TrainOutcome};

pub const CONFIG_LOCK: &str = "config.lock.json";
pub const RESULTS_CSV: &str = "results.csv";
pub const HISTORY: &str = "history.jsonl";
pub const TIMING: &str = "timing.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const METRICS: &str = "metrics.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// CSV manifest; relative image paths resolve against its directory.
    Manifest(PathBuf),
    Synthetic(SynthSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SynthSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub roles: ViewRoles,
    /// Used when the manifest has no split column, and for synthetic data.
    pub train_fraction: f64,
    pub split_seed: u64,
    pub output_dir: PathBuf,
    /// Replicates; each seed drives weight initialization and batch order.
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            fusion: FusionConfig::default(),
            train: TrainConfig::desk(),
            data: DataSource::default(),
            roles: ViewRoles::default(),
            train_fraction: 0.85,
            split_seed: 0,
            output_dir: PathBuf::from("runs/default"),
            seeds: vec![0],
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        self.train.validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config(
                "train_fraction",
                "must lie strictly between 0 and 1",
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::config(
                "seeds",
                "at least one replicate seed is required",
            ));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            if spec.image_size != self.train.image_size {
                return Err(Error::config(
                    "data.synthetic.image_size",
                    format!(
                        "{} differs from train.image_size {}",
                        spec.image_size, self.train.image_size
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Training and test splits with the training-split standardization.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

pub fn load_cases(config: &ExperimentConfig) -> Result<Vec<IpsilateralCase>> {
    match &config.data {
        DataSource::Manifest(path) => load_manifest(
            path,
            &LoadOptions {
                image_size: config.train.image_size,
                roles: config.roles,
            },
        ),
        DataSource::Synthetic(spec) => {
            let mut cases = generate_synthetic(spec)?;
            if config.roles == ViewRoles::MloExamined {
                cases.iter_mut().for_each(IpsilateralCase::swap_roles);
            }
            Ok(cases)
        }
    }
}

pub fn prepare_splits(config: &ExperimentConfig) -> Result<Splits> {
    let cases = load_cases(config)?;
    let (train, test) = if !cases.is_empty() && cases.iter().all(|c| c.split.is_some()) {
        split_by_column(cases)?
    } else if cases.iter().any(|c| c.split.is_some()) {
        return Err(Error::Manifest(
            "split column is filled for some cases but not all".into(),
        ));
    } else {
        stratified_split(cases, config.train_fraction, config.split_seed)?
    };
    let standardizer = Standardizer::fit(&train);
    Ok(Splits {
        train: Dataset::new(train, standardizer)?,
        test: Dataset::new(test, standardizer)?,
    })
}

/// Everything needed to rebuild a model from a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub fusion: FusionConfig,
    pub standardizer: Standardizer,
    pub image_size: usize,
    pub seed: u64,
    pub epoch: usize,
}

pub fn load_model(path: &Path) -> Result<(FusionNet, CheckpointMeta)> {
    let ckpt = Checkpoint::load(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&ckpt.meta)
        .map_err(|e| Error::Checkpoint(format!("{}: unreadable metadata: {e}", path.display())))?;
    let mut model = FusionNet::new(&meta.fusion, meta.seed)?;
    ckpt.restore(&mut model)?;
    Ok((model, meta))
}

/// One results-table row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub fusion_type: FusionType,
    pub aggregation: AggregationKind,
    pub skip_examined: bool,
    pub skip_auxiliary: bool,
    pub depth: Depth,
    pub seed: u64,
    /// Metrics of the selected (best macro-F1) epoch.
    pub macro_f1: Option<f64>,
    pub auc_roc: Option<f64>,
    pub params: usize,
    pub wall_time: f64,
    pub best_epoch: Option<usize>,
    pub final_macro_f1: Option<f64>,
    pub final_auc_roc: Option<f64>,
    pub width_divisor: usize,
    pub zero_auxiliary: bool,
    pub status: String,
}

impl ResultRow {
    fn base(fusion: &FusionConfig, seed: u64) -> Self {
        Self {
            fusion_type: fusion.fusion_type,
            aggregation: fusion.aggregation,
            skip_examined: fusion.skip.examined,
            skip_auxiliary: fusion.skip.auxiliary,
            depth: fusion.depth,
            seed,
            macro_f1: None,
            auc_roc: None,
            params: 0,
            wall_time: 0.0,
            best_epoch: None,
            final_macro_f1: None,
            final_auc_roc: None,
            width_divisor: fusion.width_divisor,
            zero_auxiliary: fusion.zero_auxiliary,
            status: String::new(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    pub fn skip(&self) -> SkipFlags {
        SkipFlags {
            examined: self.skip_examined,
            auxiliary: self.skip_auxiliary,
        }
    }
}

/// Append-only table of completed runs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultsTable {
    rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn push(&mut self, row: ResultRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Usage(format!("csv buffer: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r
            .deserialize()
            .collect::<std::result::Result<Vec<ResultRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    /// Mean metrics per configuration over successful replicates, in first
    /// appearance order.
    pub fn summary(&self) -> Vec<CellSummary> {
        let mut groups: Vec<Vec<&ResultRow>> = Vec::new();
        for row in &self.rows {
            let key = (row.fusion_type, row.aggregation, row.skip(), row.depth);
            match groups
                .iter_mut()
                .find(|g| (g[0].fusion_type, g[0].aggregation, g[0].skip(), g[0].depth) == key)
            {
                Some(g) => g.push(row),
                None => groups.push(vec![row]),
            }
        }
        let mean = |values: Vec<Option<f64>>| -> Option<f64> {
            let values: Option<Vec<f64>> = values.into_iter().collect();
            values
                .filter(|v| !v.is_empty())
                .map(|v| v.iter().sum::<f64>() / v.len() as f64)
        };
        groups
            .into_iter()
            .map(|g| {
                let ok: Vec<&ResultRow> = g.iter().copied().filter(|r| r.is_ok()).collect();
                CellSummary {
                    fusion_type: g[0].fusion_type,
                    aggregation: g[0].aggregation,
                    skip: g[0].skip(),
                    depth: g[0].depth,
                    runs: ok.len(),
                    failed: g.len() - ok.len(),
                    mean_macro_f1: mean(ok.iter().map(|r| r.macro_f1).collect()),
                    mean_auc_roc: mean(ok.iter().map(|r| r.auc_roc).collect()),
                }
            })
            .collect()
    }

    /// Human-readable table with metrics in percent.
    pub fn render(&self) -> String {
        let pct =
            |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<6} {:<12} {:<10} {:>5} {:>5} {:>10} {:>9}",
            "fusion", "aggregation", "skip", "depth", "runs", "macro-F1%", "AUC-ROC%"
        );
        for c in self.summary() {
            let _ = writeln!(
                out,
                "{:<6} {:<12} {:<10} {:>5} {:>5} {:>10} {:>9}",
                c.fusion_type.code(),
                c.aggregation.to_string(),
                c.skip.label(),
                c.depth.to_string(),
                if c.failed > 0 {
                    format!("{}+{}F", c.runs, c.failed)
                } else {
                    c.runs.to_string()
                },
                pct(c.mean_macro_f1),
                pct(c.mean_auc_roc),
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub fusion_type: FusionType,
    pub aggregation: AggregationKind,
    pub skip: SkipFlags,
    pub depth: Depth,
    pub runs: usize,
    pub failed: usize,
    pub mean_macro_f1: Option<f64>,
    pub mean_auc_roc: Option<f64>,
}

/// Creates `dir`, refusing to reuse a non-empty directory unless `force`.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(Error::Usage(format!(
                "output directory {} already exists and is not empty (use --force to reuse it)",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Result of one training run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub row: ResultRow,
    pub outcome: TrainOutcome,
}

/// Trains one configuration on prepared splits. With `run_dir`, writes the
/// history, timings, checkpoints and metrics there.
pub fn run_single(
    fusion: &FusionConfig,
    train: &TrainConfig,
    seed: u64,
    splits: &Splits,
    run_dir: Option<&Path>,
) -> Result<RunOutput> {
    let start = Instant::now();
    let train = TrainConfig {
        seed,
        ..train.clone()
    };
    let mut model = FusionNet::new(fusion, seed)?;
    let params = model.learnable_count();
    let mut outcome = train_model(&mut model, &splits.train, &splits.test, &train, |_| {})?;

    let meta = |epoch| CheckpointMeta {
        fusion: fusion.clone(),
        standardizer: splits.train.standardizer,
        image_size: train.image_size,
        seed,
        epoch,
    };
    outcome.best.meta = serde_json::to_string(&meta(outcome.best_epoch))?;
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write(HISTORY, outcome.history.to_jsonl()?)?;
        let timing: String = outcome
            .history
            .records
            .iter()
            .map(|r| format!("{{\"epoch\":{},\"wall_time\":{}}}\n", r.epoch, r.wall_time))
            .collect();
        write(TIMING, timing)?;
        outcome.best.save(&dir.join(BEST_CHECKPOINT))?;
        Checkpoint::capture(&model, serde_json::to_string(&meta(train.epochs))?)
            .save(&dir.join(FINAL_CHECKPOINT))?;
        write(
            METRICS,
            serde_json::to_string_pretty(&serde_json::json!({
                "best_epoch": outcome.best_epoch,
                "best": outcome.best_report,
                "final": outcome.final_report,
            }))?,
        )?;
    }

    let mut row = ResultRow::base(fusion, seed);
    row.macro_f1 = Some(outcome.best_report.macro_f1);
    row.auc_roc = outcome.best_report.auc_roc;
    row.params = params;
    row.best_epoch = Some(outcome.best_epoch);
    row.final_macro_f1 = Some(outcome.final_report.macro_f1);
    row.final_auc_roc = outcome.final_report.auc_roc;
    row.wall_time = start.elapsed().as_secs_f64();
    row.status = "ok".into();
    Ok(RunOutput { row, outcome })
}

/// Evaluates a saved model on a dataset with its own standardization.
pub fn evaluate_checkpoint(
    path: &Path,
    cases: Vec<IpsilateralCase>,
    batch_cases: usize,
) -> Result<MetricsReport> {
    let (mut model, meta) = load_model(path)?;
    if let Some(c) = cases.first() {
        if c.image_size != meta.image_size {
            return Err(Error::dimension(
                "evaluation images",
                meta.image_size,
                c.image_size,
            ));
        }
    }
    let data = Dataset::new(cases, meta.standardizer)?;
    evaluate(&mut model, &data, batch_cases)
}

/// Axes of a configuration matrix. An empty axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatrixAxes {
    pub fusion_types: Vec<FusionType>,
    pub aggregations: Vec<AggregationKind>,
    pub skips: Vec<SkipFlags>,
    pub depths: Vec<Depth>,
}

impl MatrixAxes {
    /// Every fusion type with both aggregations.
    pub fn table1() -> Self {
        Self {
            fusion_types: FusionType::ALL.to_vec(),
            aggregations: AggregationKind::ALL.to_vec(),
            ..Self::default()
        }
    }

    /// Skip settings none, examined and both, at both depths.
    pub fn table2() -> Self {
        Self {
            skips: vec![SkipFlags::NONE, SkipFlags::EXAMINED, SkipFlags::BOTH],
            depths: vec![Depth::R18, Depth::R34],
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "table1" => Ok(Self::table1()),
            "table2" => Ok(Self::table2()),
            "none" => Ok(Self::default()),
            _ => Err(Error::config(
                "axes",
                format!("unknown matrix preset `{name}` (table1, table2, none)"),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.skips.iter().any(|s| !s.examined && s.auxiliary) {
            return Err(Error::config(
                "axes.skips",
                "matrix skip settings are none, examined and both",
            ));
        }
        Ok(())
    }

    /// Cartesian product in fusion-type, aggregation, skip, depth order.
    pub fn cells(&self, base: &FusionConfig) -> Vec<FusionConfig> {
        fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
            if values.is_empty() {
                vec![base]
            } else {
                values.to_vec()
            }
        }
        let mut out = Vec::new();
        for t in axis(&self.fusion_types, base.fusion_type) {
            for k in axis(&self.aggregations, base.aggregation) {
                for s in axis(&self.skips, base.skip) {
                    for d in axis(&self.depths, base.depth) {
                        out.push(FusionConfig {
                            fusion_type: t,
                            aggregation: k,
                            skip: s,
                            depth: d,
                            ..base.clone()
                        });
                    }
                }
            }
        }
        out
    }
}

pub fn run_dir_name(fusion: &FusionConfig, seed: u64) -> String {
    format!(
        "{}_{}_skip-{}_r{}_seed{seed}",
        fusion.fusion_type.code(),
        fusion.aggregation,
        fusion.skip.label(),
        fusion.depth
    )
}

/// Runs every cell × seed with `workers` threads. Failed runs are recorded
/// in their row's status and do not stop the matrix. Row order is the
/// cell-major run order whatever the worker count.
pub fn run_matrix(
    config: &ExperimentConfig,
    axes: &MatrixAxes,
    workers: usize,
    out_dir: Option<&Path>,
    on_done: impl Fn(&ResultRow) + Sync,
) -> Result<ResultsTable> {
    config.validate()?;
    axes.validate()?;
    let splits = prepare_splits(config)?;
    let runs: Vec<(FusionConfig, u64)> = axes
        .cells(&config.fusion)
        .into_iter()
        .flat_map(|cell| config.seeds.iter().map(move |&s| (cell.clone(), s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))?;
    let rows: Vec<ResultRow> = pool.install(|| {
        runs.par_iter()
            .map(|(fusion, seed)| {
                let dir = out_dir.map(|d| d.join("runs").join(run_dir_name(fusion, *seed)));
                let row = match run_single(fusion, &config.train, *seed, &splits, dir.as_deref()) {
                    Ok(out) => out.row,
                    Err(e) => {
                        let mut row = ResultRow::base(fusion, *seed);
                        row.status = format!("failed: {e}");
                        row
                    }
                };
                on_done(&row);
                row
            })
            .collect()
    });
    let mut table = ResultsTable::default();
    rows.into_iter().for_each(|r| table.push(r));
    Ok(table)
}
