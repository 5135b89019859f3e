//! Per-sample difficulty from error trajectories and the exponential
//! loss-weight schemes built on it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, Dtype, Sidecar};
use crate::error::{Error, Result};
use crate::trajlog::ErrorTrajectoryLog;

pub const WEIGHTS_KIND: &str = "weights";
pub const DEFAULT_LAMBDA_EASY: f64 = 2.0;
pub const DEFAULT_LAMBDA_HARD: f64 = 4.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum MaeReference {
    /// Mean over samples of the last logged epoch.
    FinalEpochMae,
    Explicit(f64),
}

/// `d[i]` is the fraction of epochs in which sample `i` was strictly below
/// the reference MAE. High `d` means an easy sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultyScores {
    pub d: Vec<f64>,
    pub reference_mae: f64,
}

pub fn final_epoch_mae(trajectory: &ErrorTrajectoryLog) -> f64 {
    let last = trajectory.final_epoch();
    last.iter().map(|&e| f64::from(e)).sum::<f64>() / last.len() as f64
}

pub fn difficulty(
    trajectory: &ErrorTrajectoryLog,
    reference: MaeReference,
) -> Result<DifficultyScores> {
    let mae = match reference {
        MaeReference::FinalEpochMae => final_epoch_mae(trajectory),
        MaeReference::Explicit(v) if v.is_finite() && v >= 0.0 => v,
        MaeReference::Explicit(v) => {
            return Err(Error::invalid(format!(
                "reference MAE {v} must be finite and >= 0"
            )))
        }
    };
    let e = trajectory.num_epochs() as f64;
    let d = (0..trajectory.num_samples())
        .map(|i| trajectory.sample(i).filter(|&x| f64::from(x) < mae).count() as f64 / e)
        .collect();
    Ok(DifficultyScores {
        d,
        reference_mae: mae,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    /// `w = exp(lambda * d)`
    UpweightEasy,
    /// `w = exp(lambda * (1 - d))`
    UpweightHard,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightScheme {
    pub kind: SchemeKind,
    pub lambda: f64,
}

impl WeightScheme {
    pub fn upweight_easy() -> Self {
        WeightScheme {
            kind: SchemeKind::UpweightEasy,
            lambda: DEFAULT_LAMBDA_EASY,
        }
    }

    pub fn upweight_hard() -> Self {
        WeightScheme {
            kind: SchemeKind::UpweightHard,
            lambda: DEFAULT_LAMBDA_HARD,
        }
    }

    pub fn uniform() -> Self {
        WeightScheme {
            kind: SchemeKind::Uniform,
            lambda: 0.0,
        }
    }
}

pub fn weights(scores: &DifficultyScores, scheme: WeightScheme) -> Result<Vec<f64>> {
    if !(scheme.lambda.is_finite() && scheme.lambda >= 0.0) {
        return Err(Error::invalid(format!(
            "lambda {} must be finite and >= 0",
            scheme.lambda
        )));
    }
    let l = scheme.lambda;
    Ok(scores
        .d
        .iter()
        .map(|&d| match scheme.kind {
            SchemeKind::UpweightEasy => (l * d).exp(),
            SchemeKind::UpweightHard => (l * (1.0 - d)).exp(),
            SchemeKind::Uniform => 1.0,
        })
        .collect())
}

/// Rescales to unit mean. Already-unit-mean input is returned untouched.
pub fn normalize_mean_one(w: &[f64]) -> Vec<f64> {
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    if mean == 1.0 || mean == 0.0 {
        return w.to_vec();
    }
    w.iter().map(|x| x / mean).collect()
}

pub fn write_weights(path: &Path, w: &[f64]) -> Result<()> {
    let meta = Sidecar::new(WEIGHTS_KIND, 1, w.len(), Dtype::F32Le);
    let data: Vec<f32> = w.iter().map(|&x| x as f32).collect();
    container::write_f32(path, &meta, &data)
}

pub fn read_weights(path: &Path) -> Result<Vec<f64>> {
    let (meta, payload) = container::read(path, Some(WEIGHTS_KIND))?;
    if meta.rows != 1 {
        return Err(Error::Metadata {
            path: container::sidecar_path(path),
            reason: "weights must be a single row".into(),
        });
    }
    let w = payload.into_f64();
    if let Some(index) = w.iter().position(|x| !(x.is_finite() && *x >= 0.0)) {
        return Err(Error::InvalidValue {
            index,
            row: 0,
            col: index,
            value: w[index],
        });
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(d: &[f64]) -> DifficultyScores {
        DifficultyScores {
            d: d.to_vec(),
            reference_mae: 0.0,
        }
    }

    #[test]
    fn difficulty_examples() {
        // Samples: always below, always above, [0.1, 0.3] straddling 0.2.
        let t = ErrorTrajectoryLog::new(2, 3, vec![0.0, 0.9, 0.1, 0.05, 0.8, 0.3]).unwrap();
        let s = difficulty(&t, MaeReference::Explicit(0.2)).unwrap();
        assert_eq!(s.d, vec![1.0, 0.0, 0.5]);
    }

    #[test]
    fn final_epoch_reference_and_strict_ties() {
        let t = ErrorTrajectoryLog::new(2, 2, vec![0.5, 0.5, 0.25, 0.75]).unwrap();
        let s = difficulty(&t, MaeReference::FinalEpochMae).unwrap();
        assert_eq!(s.reference_mae, 0.5);
        // Sample 0: 0.5 is not below 0.5, 0.25 is. Sample 1: neither.
        assert_eq!(s.d, vec![0.5, 0.0]);
    }

    #[test]
    fn weight_examples() {
        let hard = weights(&scores(&[1.0]), WeightScheme::upweight_hard()).unwrap();
        assert_eq!(hard, vec![1.0]);
        let easy = weights(&scores(&[1.0]), WeightScheme::upweight_easy()).unwrap();
        assert!((easy[0] - 7.38905609893065).abs() < 1e-12);
        let hard0 = weights(&scores(&[0.0]), WeightScheme::upweight_hard()).unwrap();
        assert!((hard0[0] - 90.01713130052181).abs() < 1e-10);
        let uni = weights(&scores(&[0.0, 0.4, 1.0]), WeightScheme::uniform()).unwrap();
        assert_eq!(uni, vec![1.0; 3]);
    }

    #[test]
    fn zero_lambda_is_uniform() {
        let s = scores(&[0.0, 0.3, 1.0]);
        for kind in [SchemeKind::UpweightEasy, SchemeKind::UpweightHard] {
            assert_eq!(
                weights(&s, WeightScheme { kind, lambda: 0.0 }).unwrap(),
                vec![1.0; 3]
            );
        }
        assert!(weights(
            &s,
            WeightScheme {
                kind: SchemeKind::UpweightEasy,
                lambda: -1.0
            }
        )
        .is_err());
    }

    #[test]
    fn normalization_and_round_trip() {
        let w = normalize_mean_one(&[1.0, 3.0]);
        assert_eq!(w, vec![0.5, 1.5]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.weights");
        write_weights(&p, &w).unwrap();
        assert_eq!(read_weights(&p).unwrap(), w);
    }
}
