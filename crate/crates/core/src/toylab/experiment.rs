//! End-to-end runs on toy data: train, build the PDF bank and index, and
//! score the resulting uncertainty estimates against known errors.

use serde::{Deserialize, Serialize};

use super::task::{generate_task, TaskSpec, ToyTask};
use super::train::{absolute_errors, descriptors, train, TrainConfig, TrainOutcome};
use crate::calib::spearman;
use crate::error::Result;
use crate::knn::{FlatIndex, HnswIndex, HnswParams, VectorIndex};
use crate::reweight::{difficulty, weights, MaeReference, WeightScheme};
use crate::trajlog::DEFAULT_NUM_BINS;
use crate::trajlog::{
    build_pdf_bank, make_bin_grid, DescriptorSet, EpsMaxPolicy, PdfBank, Spacing,
};
use crate::uq::{
    estimate_batch, fit_ood_threshold, OodPolicy, OodThreshold, UqEstimate, DEFAULT_K,
    DEFAULT_OOD_QUANTILE,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum IndexChoice {
    Flat,
    Hnsw { params: HnswParams, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LtauConfig {
    pub num_bins: usize,
    pub spacing: Spacing,
    pub burn_in: usize,
    pub k: usize,
    pub index: IndexChoice,
    pub ood_quantile: f64,
}

impl Default for LtauConfig {
    fn default() -> Self {
        LtauConfig {
            num_bins: DEFAULT_NUM_BINS,
            spacing: Spacing::Logarithmic,
            burn_in: 0,
            k: DEFAULT_K,
            index: IndexChoice::Hnsw {
                params: HnswParams::default(),
                seed: 0,
            },
            ood_quantile: DEFAULT_OOD_QUANTILE,
        }
    }
}

pub fn build_index(descriptors: DescriptorSet, choice: IndexChoice) -> Result<VectorIndex> {
    Ok(match choice {
        IndexChoice::Flat => VectorIndex::Flat(FlatIndex::build(descriptors)?),
        IndexChoice::Hnsw { params, seed } => {
            VectorIndex::Hnsw(HnswIndex::build(descriptors, params, seed)?)
        }
    })
}

/// Estimates and true errors for one test split.
#[derive(Clone, Debug)]
pub struct SplitResult {
    pub estimates: Vec<UqEstimate>,
    pub true_errors: Vec<f64>,
    /// Noise scale each point was generated with.
    pub sigma: Vec<f64>,
}

impl SplitResult {
    pub fn expected_errors(&self) -> Vec<f64> {
        self.estimates.iter().map(|e| e.expected_error).collect()
    }

    pub fn spearman_true_error(&self) -> Result<f64> {
        spearman(&self.expected_errors(), &self.true_errors)
    }

    pub fn spearman_sigma(&self) -> Result<f64> {
        spearman(&self.expected_errors(), &self.sigma)
    }

    pub fn flagged_fraction(&self) -> f64 {
        let n = self
            .estimates
            .iter()
            .filter(|e| e.ood_flag == Some(true))
            .count();
        n as f64 / self.estimates.len().max(1) as f64
    }
}

pub struct LtauRun {
    pub bank: PdfBank,
    pub index: VectorIndex,
    pub threshold: OodThreshold,
    pub id: SplitResult,
    pub ood: SplitResult,
}

/// Builds the bank and index from a trained model and scores both test splits.
pub fn evaluate_ltau(
    task: &ToyTask,
    outcome: &TrainOutcome,
    config: &LtauConfig,
) -> Result<LtauRun> {
    let grid = make_bin_grid(
        &outcome.trajectory,
        config.num_bins,
        config.spacing,
        EpsMaxPolicy::TrainMax,
    )?;
    let bank = build_pdf_bank(&outcome.trajectory, &grid, config.burn_in)?;
    let index = build_index(outcome.descriptors.clone(), config.index)?;
    let threshold = fit_ood_threshold(
        &outcome.descriptors,
        &index,
        OodPolicy::Quantile(config.ood_quantile),
    )?;
    let score = |data: &super::task::Dataset| -> Result<SplitResult> {
        let queries = descriptors(&outcome.model, data)?;
        Ok(SplitResult {
            estimates: estimate_batch(&queries, &index, &bank, config.k, Some(&threshold))?,
            true_errors: absolute_errors(&outcome.model, data),
            sigma: data.sigma.clone(),
        })
    };
    let id = score(&task.test_id)?;
    let ood = score(&task.test_ood)?;
    Ok(LtauRun {
        bank,
        index,
        threshold,
        id,
        ood,
    })
}

/// Final errors of one training run under a weighting scheme.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemeResult {
    pub train_mae: f64,
    pub val_mae: f64,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReweightSummary {
    pub seeds: Vec<u64>,
    pub uniform: Vec<SchemeResult>,
    pub upweight_hard: Vec<SchemeResult>,
    pub upweight_easy: Vec<SchemeResult>,
}

fn mean_of(r: &[SchemeResult], f: impl Fn(&SchemeResult) -> f64) -> f64 {
    r.iter().map(f).sum::<f64>() / r.len() as f64
}

impl ReweightSummary {
    /// `(uniform, hard, easy)` seed-averaged gaps.
    pub fn mean_gaps(&self) -> (f64, f64, f64) {
        let g = |r: &[SchemeResult]| mean_of(r, |s| s.gap);
        (
            g(&self.uniform),
            g(&self.upweight_hard),
            g(&self.upweight_easy),
        )
    }

    /// `(uniform, hard, easy)` seed-averaged training MAE.
    pub fn mean_train_mae(&self) -> (f64, f64, f64) {
        let g = |r: &[SchemeResult]| mean_of(r, |s| s.train_mae);
        (
            g(&self.uniform),
            g(&self.upweight_hard),
            g(&self.upweight_easy),
        )
    }
}

fn scheme_result(o: &TrainOutcome) -> SchemeResult {
    SchemeResult {
        train_mae: o.train_mae,
        val_mae: o.val_mae,
        gap: o.generalization_gap(),
    }
}

/// Small-data setting where the network can memorize its training set, so
/// loss weighting visibly moves the train/validation gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReweightProtocol {
    pub spec: TaskSpec,
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for ReweightProtocol {
    fn default() -> Self {
        ReweightProtocol {
            spec: TaskSpec {
                input_dim: 8,
                n_train: 150,
                n_val: 1000,
                n_test_id: 0,
                n_test_ood: 0,
                ..TaskSpec::default()
            },
            config: TrainConfig {
                epochs: 1000,
                batch_size: 4,
                learning_rate: 0.05,
                ..TrainConfig::default()
            },
            seeds: (0..5).collect(),
        }
    }
}

/// For each seed: a uniform run, difficulty scores from its trajectory, then
/// a weighted rerun per scheme from the same initialization and batch order.
pub fn reweight_experiment(
    spec: &TaskSpec,
    config: &TrainConfig,
    seeds: &[u64],
) -> Result<ReweightSummary> {
    let mut summary = ReweightSummary {
        seeds: seeds.to_vec(),
        uniform: Vec::new(),
        upweight_hard: Vec::new(),
        upweight_easy: Vec::new(),
    };
    for &seed in seeds {
        let task = generate_task(&TaskSpec {
            seed,
            ..spec.clone()
        })?;
        let cfg = TrainConfig {
            seed,
            ..config.clone()
        };
        let base = train(&task, &cfg, None)?;
        let scores = difficulty(&base.trajectory, MaeReference::FinalEpochMae)?;
        let hard = train(
            &task,
            &cfg,
            Some(&weights(&scores, WeightScheme::upweight_hard())?),
        )?;
        let easy = train(
            &task,
            &cfg,
            Some(&weights(&scores, WeightScheme::upweight_easy())?),
        )?;
        summary.uniform.push(scheme_result(&base));
        summary.upweight_hard.push(scheme_result(&hard));
        summary.upweight_easy.push(scheme_result(&easy));
    }
    Ok(summary)
}
