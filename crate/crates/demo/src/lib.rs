//! Browser demo. A [`Session`] trains the 2-D toy model, builds the PDF bank
//! and index, and answers point queries and whole-grid uncertainty maps.
//! The `wasm_bindgen` wrappers only convert errors and serialize to JSON.

use ltau::calib::{calibration_report, default_levels, MethodPredictions};
use ltau::toylab::{
    evaluate_ltau, generate_task, train, IndexChoice, LtauConfig, LtauRun, Mlp, TaskSpec,
    TrainConfig,
};
use ltau::uq::estimate;
use ltau::{HnswParams, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Plot window in input space: the in-domain box [-1, 1]² and the shifted
/// out-of-domain box to its right.
pub const X0_RANGE: (f64, f64) = (-1.5, 4.5);
pub const X1_RANGE: (f64, f64) = (-1.5, 1.5);

#[derive(Serialize)]
pub struct Summary {
    pub train_mae: f64,
    pub val_mae: f64,
    pub spearman_id: f64,
    pub spearman_ood: f64,
    pub flagged_id: f64,
    pub flagged_ood: f64,
    pub cutoff: f64,
    pub miscalibration_area: f64,
    pub curve: Vec<(f64, f64)>,
}

#[derive(Serialize)]
pub struct PointReport {
    pub prediction: f64,
    pub target: f64,
    pub expected_error: f64,
    pub nn1_distance: f64,
    pub ood: bool,
    pub pdf: Vec<f64>,
    pub edges: Vec<f64>,
}

pub struct Session {
    spec: TaskSpec,
    model: Mlp,
    run: LtauRun,
    summary: Summary,
    k: usize,
}

impl Session {
    pub fn train(seed: u64, n_train: usize, epochs: usize) -> Result<Session> {
        let spec = TaskSpec {
            n_train,
            n_val: 200,
            n_test_id: 1000,
            n_test_ood: 200,
            seed,
            ..TaskSpec::default()
        };
        let task = generate_task(&spec)?;
        let outcome = train(
            &task,
            &TrainConfig {
                epochs,
                seed,
                ..TrainConfig::default()
            },
            None,
        )?;
        let config = LtauConfig {
            index: IndexChoice::Hnsw {
                params: HnswParams::default(),
                seed,
            },
            ..LtauConfig::default()
        };
        let run = evaluate_ltau(&task, &outcome, &config)?;
        let preds = MethodPredictions::from_estimates(
            &run.id.estimates,
            run.bank.grid(),
            run.id.true_errors.clone(),
        )?;
        let report = calibration_report("ltau", &preds, &default_levels(21))?;
        let summary = Summary {
            train_mae: outcome.train_mae,
            val_mae: outcome.val_mae,
            spearman_id: run.id.spearman_true_error()?,
            spearman_ood: run.ood.spearman_true_error()?,
            flagged_id: run.id.flagged_fraction(),
            flagged_ood: run.ood.flagged_fraction(),
            cutoff: run.threshold.cutoff_distance,
            miscalibration_area: report.area_total,
            curve: report.curve.points().collect(),
        };
        Ok(Session {
            spec,
            model: outcome.model,
            run,
            summary,
            k: config.k,
        })
    }

    pub fn summary(&self) -> &Summary {
        &self.summary
    }

    pub fn query(&self, x0: f64, x1: f64) -> Result<PointReport> {
        let x = [x0, x1];
        let desc: Vec<f32> = self
            .model
            .descriptor(&x)
            .iter()
            .map(|&v| v as f32)
            .collect();
        let e = estimate(
            &desc,
            &self.run.index,
            &self.run.bank,
            self.k,
            Some(&self.run.threshold),
        )?;
        Ok(PointReport {
            prediction: self.model.forward(&x),
            target: self.spec.target.eval(&x),
            expected_error: e.expected_error,
            nn1_distance: e.nn1_distance,
            ood: e.ood_flag == Some(true),
            pdf: e.pdf,
            edges: self.run.bank.grid().edges().to_vec(),
        })
    }

    /// Expected error on a `cols x rows` grid over the plot window, row-major
    /// from the top-left, with flagged cells negated.
    pub fn uncertainty_map(&self, cols: usize, rows: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(cols * rows);
        for r in 0..rows {
            let x1 = X1_RANGE.1 - (r as f64 + 0.5) / rows as f64 * (X1_RANGE.1 - X1_RANGE.0);
            for c in 0..cols {
                let x0 = X0_RANGE.0 + (c as f64 + 0.5) / cols as f64 * (X0_RANGE.1 - X0_RANGE.0);
                let p = self.query(x0, x1)?;
                out.push(if p.ood {
                    -p.expected_error
                } else {
                    p.expected_error
                });
            }
        }
        Ok(out)
    }
}

fn js_err(e: ltau::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo(Session);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, n_train: u32, epochs: u32) -> std::result::Result<Demo, JsError> {
        Session::train(u64::from(seed), n_train as usize, epochs as usize)
            .map(Demo)
            .map_err(js_err)
    }

    /// Training and calibration summary as JSON.
    pub fn summary(&self) -> String {
        serde_json::to_string(self.0.summary()).expect("summary serializes")
    }

    /// Prediction, expected error, OOD flag and averaged PDF at one input, as JSON.
    pub fn query(&self, x0: f64, x1: f64) -> std::result::Result<String, JsError> {
        let report = self.0.query(x0, x1).map_err(js_err)?;
        Ok(serde_json::to_string(&report).expect("report serializes"))
    }

    #[wasm_bindgen(js_name = uncertaintyMap)]
    pub fn uncertainty_map(&self, cols: u32, rows: u32) -> std::result::Result<Vec<f64>, JsError> {
        self.0
            .uncertainty_map(cols as usize, rows as usize)
            .map_err(js_err)
    }
}
