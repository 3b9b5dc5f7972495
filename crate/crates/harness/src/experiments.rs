//! The three experiments. Each one plans its runs, executes them, and builds
//! its report purely from the resulting run records.

use kan_core::stats::WilcoxonResult;
use kan_core::{wilcoxon_signed_rank, Aggregator, Head, RankTable};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode, Variant};
use crate::error::{HarnessError, Result};
use crate::runner::{execute, load_datasets, DatasetInfo, LoadedDataset, RunRecord, RunSpec};
use crate::seeds::config_hash;

/// Settings every report carries so its numbers can be interpreted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub mode: Mode,
    pub config_hash: String,
    pub global_seed: u64,
    pub runs_per_config: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden_width: usize,
    pub head: Head,
    pub scale_features: bool,
    pub notes: Vec<String>,
}

impl ReportMeta {
    fn new(cfg: &ExperimentConfig) -> Self {
        let t = cfg.train_config(0);
        let mut notes = vec![
            match cfg.head() {
                Head::Softmax => "head: one logit per class, softmax cross-entropy".to_string(),
                Head::Regression => "head: single output regressed on the class index (strict replication)".to_string(),
            },
            if cfg.scale_features {
                "features scaled to [-1, 1] with training-split min/max".to_string()
            } else {
                "features left unscaled".to_string()
            },
            "spline grid is static for the whole run".to_string(),
            "one split per dataset, shared by all runs and variants".to_string(),
        ];
        match cfg.mode {
            Mode::Sweep => notes.push("failed runs are excluded; a combination with no completed run scores 0".into()),
            Mode::Adherence => notes.push("adherence pooled over every training batch of every run".into()),
            Mode::Compare => notes.push("wilcoxon pairs run i of one variant with run i of the other".into()),
        }
        ReportMeta {
            mode: cfg.mode,
            config_hash: config_hash(cfg),
            global_seed: cfg.seed,
            runs_per_config: cfg.runs(),
            iterations: t.iterations,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            hidden_width: cfg.hidden_width,
            head: cfg.head(),
            scale_features: cfg.scale_features,
            notes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub run_id: String,
    pub error: String,
}

fn failures(records: &[RunRecord]) -> Vec<Failure> {
    records
        .iter()
        .filter_map(|r| match &r.outcome {
            crate::runner::RunOutcome::Failed { error } => Some(Failure {
                run_id: r.run_id.clone(),
                error: error.clone(),
            }),
            _ => None,
        })
        .collect()
}

fn mean_std(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// Finished experiment: its report plus the raw records it was built from.
#[derive(Debug, Clone)]
pub struct Outcome<R> {
    pub report: R,
    pub records: Vec<RunRecord>,
}

impl<R> Outcome<R> {
    pub fn all_completed(&self) -> bool {
        self.records.iter().all(|r| r.metrics().is_some())
    }
}

fn checked(cfg: &ExperimentConfig, mode: Mode) -> Result<Vec<LoadedDataset>> {
    if cfg.mode != mode {
        return Err(HarnessError::Config(format!("config is for `{}`, not `{mode}`", cfg.mode)));
    }
    cfg.validate()?;
    load_datasets(cfg)
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub hidden: Aggregator,
    pub output: Aggregator,
    /// Mean test accuracy over completed seeds, per dataset.
    pub accuracies: Vec<Option<f64>>,
    pub completed: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalEntry {
    pub aggregator: Aggregator,
    pub mean_rank: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub meta: ReportMeta,
    pub datasets: Vec<DatasetInfo>,
    /// Every (hidden, output) combination in enumeration order.
    pub rows: Vec<SweepRow>,
    pub ranks: RankTable,
    /// Same function in both layers, best mean rank first.
    pub diagonal: Vec<DiagonalEntry>,
    pub failures: Vec<Failure>,
}

pub fn combo_label(hidden: Aggregator, output: Aggregator) -> String {
    format!("{hidden}-{output}")
}

pub fn sweep_specs(cfg: &ExperimentConfig, n_datasets: usize) -> Vec<RunSpec> {
    let mut specs = Vec::new();
    for dataset in 0..n_datasets {
        for &h in &cfg.aggregators {
            for &o in &cfg.aggregators {
                for run in 0..cfg.runs() {
                    specs.push(RunSpec {
                        dataset,
                        label: combo_label(h, o),
                        variant: None,
                        aggregators: vec![h, o],
                        layer_norm: false,
                        run,
                    });
                }
            }
        }
    }
    specs
}

pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Outcome<SweepReport>> {
    let datasets = checked(cfg, Mode::Sweep)?;
    let records = execute(cfg, &datasets, &sweep_specs(cfg, datasets.len()))?;
    let infos: Vec<DatasetInfo> = datasets.iter().map(LoadedDataset::info).collect();
    let report = assemble_sweep(cfg, &infos, &records)?;
    Ok(Outcome { report, records })
}

pub fn assemble_sweep(cfg: &ExperimentConfig, datasets: &[DatasetInfo], records: &[RunRecord]) -> Result<SweepReport> {
    let mut rows = Vec::new();
    for &h in &cfg.aggregators {
        for &o in &cfg.aggregators {
            let label = combo_label(h, o);
            let mine: Vec<&RunRecord> = records.iter().filter(|r| r.label == label).collect();
            let accuracies = datasets
                .iter()
                .map(|d| {
                    let accs: Vec<f64> = mine
                        .iter()
                        .filter(|r| r.dataset == d.name)
                        .filter_map(|r| r.test_accuracy())
                        .collect();
                    mean_std(&accs).map(|(m, _)| m)
                })
                .collect();
            let completed = mine.iter().filter(|r| r.metrics().is_some()).count();
            rows.push(SweepRow {
                label,
                hidden: h,
                output: o,
                accuracies,
                completed,
                failed: mine.len() - completed,
            });
        }
    }
    let labels: Vec<String> = rows.iter().map(|r| r.label.clone()).collect();
    let names: Vec<String> = datasets.iter().map(|d| d.name.clone()).collect();
    let scores: Vec<Vec<f64>> = (0..datasets.len())
        .map(|d| rows.iter().map(|r| r.accuracies[d].unwrap_or(0.0)).collect())
        .collect();
    let ranks = RankTable::from_scores(&labels, &names, &scores)?;
    let mut diagonal: Vec<DiagonalEntry> = cfg
        .aggregators
        .iter()
        .filter_map(|&a| {
            let label = combo_label(a, a);
            ranks.rows.iter().find(|r| r.label == label).map(|r| DiagonalEntry {
                aggregator: a,
                mean_rank: r.mean,
                std: r.std,
            })
        })
        .collect();
    diagonal.sort_by(|a, b| a.mean_rank.total_cmp(&b.mean_rank));
    Ok(SweepReport {
        meta: ReportMeta::new(cfg),
        datasets: datasets.to_vec(),
        rows,
        ranks,
        diagonal,
        failures: failures(records),
    })
}

// ---------------------------------------------------------------- compare

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    /// Test accuracy of each run; `None` where the run failed.
    pub accuracies: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub completed: usize,
    /// Highest mean on this dataset.
    pub best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub a: Variant,
    pub b: Variant,
    /// Runs where both variants completed.
    pub pairs: usize,
    pub wilcoxon: Option<WilcoxonResult>,
    pub significant: bool,
    /// `*` when p < 0.05.
    pub marker: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetComparison {
    pub dataset: String,
    pub variants: Vec<VariantSummary>,
    pub tests: Vec<PairTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub meta: ReportMeta,
    pub datasets: Vec<DatasetInfo>,
    pub results: Vec<DatasetComparison>,
    pub failures: Vec<Failure>,
}

/// Tested pairs in reporting order; only pairs with both variants configured run.
pub const PAIRS: [(Variant, Variant); 3] = [
    (Variant::KanAvg, Variant::Kan),
    (Variant::KanAvg, Variant::KanLayernorm),
    (Variant::KanLayernorm, Variant::Kan),
];

pub fn variant_specs(cfg: &ExperimentConfig, n_datasets: usize) -> Vec<RunSpec> {
    let mut specs = Vec::new();
    for dataset in 0..n_datasets {
        for &v in &cfg.variants {
            for run in 0..cfg.runs() {
                specs.push(RunSpec {
                    dataset,
                    label: v.name().to_string(),
                    variant: Some(v),
                    aggregators: vec![v.aggregator(); 2],
                    layer_norm: v.layer_norm(),
                    run,
                });
            }
        }
    }
    specs
}

pub fn run_comparison(cfg: &ExperimentConfig) -> Result<Outcome<ComparisonReport>> {
    let datasets = checked(cfg, Mode::Compare)?;
    let records = execute(cfg, &datasets, &variant_specs(cfg, datasets.len()))?;
    let infos: Vec<DatasetInfo> = datasets.iter().map(LoadedDataset::info).collect();
    let report = assemble_comparison(cfg, &infos, &records)?;
    Ok(Outcome { report, records })
}

/// Paired test on per-run accuracies, skipping runs where either side failed.
pub fn paired_test(a: Variant, b: Variant, a_accs: &[Option<f64>], b_accs: &[Option<f64>]) -> Result<PairTest> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = a_accs
        .iter()
        .zip(b_accs)
        .filter_map(|(x, y)| Some(((*x)?, (*y)?)))
        .unzip();
    let wilcoxon = if xs.is_empty() {
        None
    } else {
        Some(wilcoxon_signed_rank(&xs, &ys)?)
    };
    let significant = wilcoxon.as_ref().is_some_and(|w| w.significant());
    Ok(PairTest {
        a,
        b,
        pairs: xs.len(),
        wilcoxon,
        significant,
        marker: if significant { "*".into() } else { String::new() },
    })
}

pub fn assemble_comparison(
    cfg: &ExperimentConfig,
    datasets: &[DatasetInfo],
    records: &[RunRecord],
) -> Result<ComparisonReport> {
    let runs = cfg.runs();
    let mut results = Vec::new();
    for d in datasets {
        let mut variants: Vec<VariantSummary> = cfg
            .variants
            .iter()
            .map(|&v| {
                let mut accuracies = vec![None; runs];
                for r in records.iter().filter(|r| r.dataset == d.name && r.variant == Some(v)) {
                    if r.run < runs {
                        accuracies[r.run] = r.test_accuracy();
                    }
                }
                let done: Vec<f64> = accuracies.iter().flatten().copied().collect();
                let stats = mean_std(&done);
                VariantSummary {
                    variant: v,
                    completed: done.len(),
                    mean: stats.map(|s| s.0),
                    std: stats.map(|s| s.1),
                    accuracies,
                    best: false,
                }
            })
            .collect();
        let top = variants.iter().filter_map(|v| v.mean).fold(f64::NEG_INFINITY, f64::max);
        for v in &mut variants {
            v.best = v.mean == Some(top);
        }
        let mut tests = Vec::new();
        for (a, b) in PAIRS {
            let find = |x: Variant| variants.iter().find(|v| v.variant == x);
            if let (Some(va), Some(vb)) = (find(a), find(b)) {
                tests.push(paired_test(a, b, &va.accuracies, &vb.accuracies)?);
            }
        }
        results.push(DatasetComparison {
            dataset: d.name.clone(),
            variants,
            tests,
        });
    }
    Ok(ComparisonReport {
        meta: ReportMeta::new(cfg),
        datasets: datasets.to_vec(),
        results,
        failures: failures(records),
    })
}

// ---------------------------------------------------------------- adherence

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdherenceEntry {
    pub dataset: String,
    pub n_features: usize,
    pub variant: Variant,
    /// Hidden layer index, from 0.
    pub layer: usize,
    pub fraction: Option<f64>,
    pub inside: u64,
    pub total: u64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdherenceSummary {
    pub meta: ReportMeta,
    pub range: (f64, f64),
    /// Ascending feature count.
    pub datasets: Vec<DatasetInfo>,
    pub entries: Vec<AdherenceEntry>,
    pub failures: Vec<Failure>,
}

impl AdherenceSummary {
    pub fn fraction(&self, dataset: &str, variant: Variant, layer: usize) -> Option<f64> {
        self.entries
            .iter()
            .find(|e| e.dataset == dataset && e.variant == variant && e.layer == layer)
            .and_then(|e| e.fraction)
    }

    /// Plot data: one line per dataset, variant and hidden layer.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,n_features,variant,layer,fraction\n");
        for e in &self.entries {
            let f = e.fraction.map(|f| f.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{},{}\n", e.dataset, e.n_features, e.variant, e.layer, f));
        }
        out
    }
}

pub fn run_adherence(cfg: &ExperimentConfig) -> Result<Outcome<AdherenceSummary>> {
    let datasets = checked(cfg, Mode::Adherence)?;
    let records = execute(cfg, &datasets, &variant_specs(cfg, datasets.len()))?;
    let infos: Vec<DatasetInfo> = datasets.iter().map(LoadedDataset::info).collect();
    let report = assemble_adherence(cfg, &infos, &records)?;
    Ok(Outcome { report, records })
}

pub fn assemble_adherence(
    cfg: &ExperimentConfig,
    datasets: &[DatasetInfo],
    records: &[RunRecord],
) -> Result<AdherenceSummary> {
    let mut ordered = datasets.to_vec();
    ordered.sort_by(|a, b| a.features.cmp(&b.features).then_with(|| a.name.cmp(&b.name)));
    let mut range = None;
    let mut entries = Vec::new();
    for d in &ordered {
        for &v in &cfg.variants {
            let mut inside: Vec<u64> = Vec::new();
            let mut total: Vec<u64> = Vec::new();
            let mut runs = 0;
            for r in records.iter().filter(|r| r.dataset == d.name && r.variant == Some(v)) {
                let Some(adh) = r.metrics().and_then(|m| m.adherence.as_ref()) else {
                    continue;
                };
                range.get_or_insert((adh.lo, adh.hi));
                if inside.is_empty() {
                    inside = vec![0; adh.inside.len()];
                    total = vec![0; adh.total.len()];
                }
                for l in 0..inside.len() {
                    inside[l] += adh.inside[l];
                    total[l] += adh.total[l];
                }
                runs += 1;
            }
            for l in 0..inside.len() {
                entries.push(AdherenceEntry {
                    dataset: d.name.clone(),
                    n_features: d.features,
                    variant: v,
                    layer: l,
                    fraction: (total[l] > 0).then(|| inside[l] as f64 / total[l] as f64),
                    inside: inside[l],
                    total: total[l],
                    runs,
                });
            }
        }
    }
    Ok(AdherenceSummary {
        meta: ReportMeta::new(cfg),
        range: range.unwrap_or((-1.0, 1.0)),
        datasets: ordered,
        entries,
        failures: failures(records),
    })
}
