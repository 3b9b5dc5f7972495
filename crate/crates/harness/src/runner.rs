//! Dataset loading and the parallel pool that executes training runs.

use kan_core::training::AdherenceReport;
use kan_core::{
    load_table, preprocess, synthetic_dataset, train, Aggregator, Dataset, DatasetManifest, Head, Network,
    NetworkConfig, PreprocessOptions,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Variant};
use crate::error::{HarnessError, Result};
use crate::seeds::derive_seed;

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub name: String,
    /// Manifest path or synthetic spec the data came from.
    pub source: String,
    pub data: Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub source: String,
    pub instances: usize,
    pub features: usize,
    pub classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub split_seed: u64,
}

impl LoadedDataset {
    pub fn info(&self) -> DatasetInfo {
        DatasetInfo {
            name: self.name.clone(),
            source: self.source.clone(),
            instances: self.data.n_instances(),
            features: self.data.n_features(),
            classes: self.data.n_classes,
            train: self.data.train.len(),
            val: self.data.val.len(),
            test: self.data.test.len(),
            split_seed: self.data.seed,
        }
    }
}

/// The split depends only on the global seed and the dataset, so every run
/// and every variant of an experiment sees the same partition.
pub fn split_seed(global: u64, dataset: &str) -> u64 {
    derive_seed(global, &[dataset, "split"])
}

pub fn load_manifest_dataset(path: &std::path::Path, global_seed: u64, scale: bool) -> Result<LoadedDataset> {
    let manifest = DatasetManifest::load(path).map_err(|source| HarnessError::Dataset {
        name: path.display().to_string(),
        source,
    })?;
    let wrap = |source| HarnessError::Dataset {
        name: manifest.name.clone(),
        source,
    };
    let raw = load_table(&manifest.path, &manifest).map_err(wrap)?;
    let data = preprocess(&raw, &manifest, split_seed(global_seed, &manifest.name), PreprocessOptions { scale })
        .map_err(wrap)?;
    Ok(LoadedDataset {
        name: manifest.name.clone(),
        source: path.display().to_string(),
        data,
    })
}

pub fn load_datasets(cfg: &ExperimentConfig) -> Result<Vec<LoadedDataset>> {
    let mut out = Vec::new();
    for path in &cfg.datasets {
        out.push(load_manifest_dataset(path, cfg.seed, cfg.scale_features)?);
    }
    for spec in &cfg.synthetic {
        let name = spec.name();
        let data = synthetic_dataset(spec.kind()?, spec.features, spec.instances, split_seed(cfg.seed, &name))
            .map_err(|source| HarnessError::Dataset {
                name: name.clone(),
                source,
            })?;
        out.push(LoadedDataset {
            name,
            source: format!("synthetic {}:{}:{}", spec.kind, spec.features, spec.instances),
            data,
        });
    }
    for (i, d) in out.iter().enumerate() {
        if out[..i].iter().any(|o| o.name == d.name) {
            return Err(HarnessError::Config(format!("dataset name `{}` appears twice", d.name)));
        }
    }
    Ok(out)
}

/// One training run to execute.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub dataset: usize,
    /// Combination label, e.g. `sum-mean` or a variant name.
    pub label: String,
    pub variant: Option<Variant>,
    /// Hidden then output layer.
    pub aggregators: Vec<Aggregator>,
    pub layer_norm: bool,
    pub run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub loss_curve: Vec<f64>,
    pub adherence: Option<AdherenceReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum RunOutcome {
    Completed(RunMetrics),
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub dataset: String,
    pub label: String,
    pub variant: Option<Variant>,
    pub aggregators: Vec<Aggregator>,
    pub layer_norm: bool,
    pub widths: Vec<usize>,
    pub head: Head,
    pub run: usize,
    pub seed: u64,
    pub network_seed: u64,
    pub train_seed: u64,
    pub outcome: RunOutcome,
}

impl RunRecord {
    pub fn metrics(&self) -> Option<&RunMetrics> {
        match &self.outcome {
            RunOutcome::Completed(m) => Some(m),
            RunOutcome::Failed { .. } => None,
        }
    }

    pub fn test_accuracy(&self) -> Option<f64> {
        self.metrics().map(|m| m.test_accuracy)
    }
}

pub fn widths_for(cfg: &ExperimentConfig, data: &Dataset) -> Vec<usize> {
    let outputs = match cfg.head() {
        Head::Softmax => data.n_classes,
        Head::Regression => 1,
    };
    vec![data.n_features(), cfg.hidden_width, outputs]
}

fn execute_one(cfg: &ExperimentConfig, datasets: &[LoadedDataset], spec: &RunSpec) -> RunRecord {
    let ds = &datasets[spec.dataset];
    let run_str = spec.run.to_string();
    let seed = derive_seed(cfg.seed, &[&ds.name, &spec.label, &run_str]);
    let network_seed = derive_seed(seed, &["network"]);
    let train_seed = derive_seed(seed, &["batches"]);
    let widths = widths_for(cfg, &ds.data);

    let outcome = (|| {
        let net_cfg = NetworkConfig::new(widths.clone(), spec.aggregators[0])
            .with_aggregators(spec.aggregators.clone())
            .with_layer_norm(spec.layer_norm)
            .with_seed(network_seed);
        let mut net = Network::build(net_cfg)?;
        let report = train(&mut net, &ds.data, &cfg.train_config(train_seed))?;
        Ok::<_, kan_core::KanError>(RunMetrics {
            train_accuracy: report.train_accuracy,
            val_accuracy: report.val_accuracy,
            test_accuracy: report.test_accuracy,
            loss_curve: report.loss_curve,
            adherence: report.adherence,
        })
    })();

    RunRecord {
        run_id: format!("{}/{}/{}", ds.name, spec.label, spec.run),
        dataset: ds.name.clone(),
        label: spec.label.clone(),
        variant: spec.variant,
        aggregators: spec.aggregators.clone(),
        layer_norm: spec.layer_norm,
        widths,
        head: cfg.head(),
        run: spec.run,
        seed,
        network_seed,
        train_seed,
        outcome: match outcome {
            Ok(m) => RunOutcome::Completed(m),
            Err(e) => RunOutcome::Failed { error: e.to_string() },
        },
    }
}

/// Runs every spec on a worker pool; records come back in spec order.
pub fn execute(cfg: &ExperimentConfig, datasets: &[LoadedDataset], specs: &[RunSpec]) -> Result<Vec<RunRecord>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.parallelism.unwrap_or(0))
        .build()
        .map_err(|e| HarnessError::Config(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| specs.par_iter().map(|s| execute_one(cfg, datasets, s)).collect()))
}
