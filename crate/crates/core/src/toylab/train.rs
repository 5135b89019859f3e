use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Activation, ForwardCache, Mlp};
use super::task::{Dataset, ToyTask};
use crate::error::{Error, Result};
use crate::reweight::normalize_mean_one;
use crate::trajlog::{DescriptorSet, ErrorTrajectoryLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Drives both initialization and batch order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.02,
            hidden: vec![32, 32],
            activation: Activation::Silu,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Mlp,
    /// `|prediction - target|` of every training sample after every epoch.
    pub trajectory: ErrorTrajectoryLog,
    /// Training-set descriptors after the final epoch.
    pub descriptors: DescriptorSet,
    pub train_mae: f64,
    pub val_mae: f64,
}

impl TrainOutcome {
    /// Validation MAE minus training MAE.
    pub fn generalization_gap(&self) -> f64 {
        self.val_mae - self.train_mae
    }
}

pub fn predict(model: &Mlp, data: &Dataset) -> Vec<f64> {
    let mut cache = ForwardCache::default();
    (0..data.len())
        .map(|i| model.forward_cached(data.input(i), &mut cache))
        .collect()
}

pub fn absolute_errors(model: &Mlp, data: &Dataset) -> Vec<f64> {
    predict(model, data)
        .iter()
        .zip(&data.targets)
        .map(|(p, t)| (p - t).abs())
        .collect()
}

pub fn mean_absolute_error(model: &Mlp, data: &Dataset) -> f64 {
    let e = absolute_errors(model, data);
    e.iter().sum::<f64>() / e.len().max(1) as f64
}

pub fn descriptors(model: &Mlp, data: &Dataset) -> Result<DescriptorSet> {
    let dim = model.descriptor_dim();
    let mut out = Vec::with_capacity(data.len() * dim);
    for i in 0..data.len() {
        out.extend(
            model
                .descriptor(data.input(i))
                .into_iter()
                .map(|v| v as f32),
        );
    }
    DescriptorSet::new(data.len(), dim, out)
}

/// Mini-batch SGD on `mean_b(w_i * 0.5 * (y_i - t_i)^2)`. Weights are
/// rescaled to unit mean first; `None` means every weight is 1.
pub fn train(
    task: &ToyTask,
    config: &TrainConfig,
    weights: Option<&[f64]>,
) -> Result<TrainOutcome> {
    let data = &task.train;
    let n = data.len();
    if config.epochs == 0 {
        return Err(Error::invalid("epochs must be at least 1"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch_size must be at least 1"));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(Error::invalid("learning_rate must be positive and finite"));
    }
    let w = match weights {
        Some(w) if w.len() != n => {
            return Err(Error::Shape(format!(
                "{} weights for {n} training samples",
                w.len()
            )));
        }
        Some(w)
            if w.iter().any(|&v| !(v.is_finite() && v >= 0.0)) || w.iter().all(|&v| v == 0.0) =>
        {
            return Err(Error::invalid(
                "weights must be finite, non-negative and not all zero",
            ));
        }
        Some(w) => normalize_mean_one(w),
        None => vec![1.0; n],
    };

    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Mlp::new(
        data.input_dim,
        &config.hidden,
        config.activation,
        &mut init_rng,
    );
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);

    let mut grads = model.zeros_like();
    let mut cache = ForwardCache::default();
    let mut order: Vec<usize> = (0..n).collect();
    let mut errors = Vec::with_capacity(config.epochs * n);
    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        for batch in order.chunks(config.batch_size) {
            grads.layers.iter_mut().for_each(|l| {
                l.weights.iter_mut().for_each(|g| *g = 0.0);
                l.bias.iter_mut().for_each(|g| *g = 0.0);
            });
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let y = model.forward_cached(data.input(i), &mut cache);
                model.backward(&cache, w[i] * (y - data.targets[i]) * scale, &mut grads);
            }
            model.sgd_step(&grads, config.learning_rate);
        }
        if !model.all_finite() {
            return Err(Error::Divergence { epoch });
        }
        let before = errors.len();
        errors.extend(absolute_errors(&model, data).into_iter().map(|e| e as f32));
        if errors[before..].iter().any(|e| !e.is_finite()) {
            return Err(Error::Divergence { epoch });
        }
    }

    let trajectory = ErrorTrajectoryLog::new(config.epochs, n, errors)?;
    let train_mae = trajectory
        .final_epoch()
        .iter()
        .map(|&e| f64::from(e))
        .sum::<f64>()
        / n as f64;
    Ok(TrainOutcome {
        descriptors: descriptors(&model, data)?,
        val_mae: mean_absolute_error(&model, &task.val),
        train_mae,
        trajectory,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toylab::task::{generate_task, TaskSpec};

    fn small_task() -> ToyTask {
        generate_task(&TaskSpec {
            n_train: 100,
            n_val: 50,
            n_test_id: 10,
            n_test_ood: 10,
            ..TaskSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn trajectory_shape() {
        let task = small_task();
        let cfg = TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        };
        let out = train(&task, &cfg, None).unwrap();
        assert_eq!(
            (out.trajectory.num_epochs(), out.trajectory.num_samples()),
            (5, 100)
        );
        assert!(out.trajectory.errors().iter().all(|&e| e >= 0.0));
        assert_eq!(out.descriptors.dim(), 32);

        let one = train(&task, &TrainConfig { epochs: 1, ..cfg }, None).unwrap();
        assert_eq!(one.trajectory.num_epochs(), 1);
    }

    #[test]
    fn unit_weights_match_unweighted_bit_for_bit() {
        let task = small_task();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let a = train(&task, &cfg, None).unwrap();
        let b = train(&task, &cfg, Some(&vec![1.0; 100])).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.descriptors, b.descriptors);
    }

    #[test]
    fn reruns_are_identical() {
        let task = small_task();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let a = train(&task, &cfg, None).unwrap();
        let b = train(&task, &cfg, None).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
    }

    #[test]
    fn huge_learning_rate_diverges_with_epoch() {
        let task = small_task();
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 1e6,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&task, &cfg, None),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn rejects_bad_weights() {
        let task = small_task();
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&task, &cfg, Some(&[1.0; 3])),
            Err(Error::Shape(_))
        ));
        assert!(train(&task, &cfg, Some(&vec![0.0; 100])).is_err());
    }
}
