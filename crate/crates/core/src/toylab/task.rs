use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajlog::DescriptorSet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetFn {
    /// `sum_k sin(x_k + k) / (k + 1) + 0.25 sin(sum_k x_k)`
    SumOfSines,
}

impl TargetFn {
    pub fn eval(self, x: &[f64]) -> f64 {
        match self {
            TargetFn::SumOfSines => {
                let per_axis: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(k, &v)| (v + k as f64).sin() / (k + 1) as f64)
                    .sum();
                per_axis + 0.25 * x.iter().sum::<f64>().sin()
            }
        }
    }
}

/// Synthetic heteroscedastic regression task.
///
/// In-domain inputs are uniform on `[-1, 1]^d`. The first two axes are cut
/// into `cells_per_axis^2` cells, each with its own Gaussian noise scale,
/// log-spaced between `sigma_min` and `sigma_max` and scattered so adjacent
/// cells differ. Out-of-domain inputs are the same box shifted by
/// `ood_shift` along the first axis, reusing the cell noise pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub input_dim: usize,
    pub target: TargetFn,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test_id: usize,
    pub n_test_ood: usize,
    pub cells_per_axis: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub ood_shift: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            input_dim: 2,
            target: TargetFn::SumOfSines,
            n_train: 5000,
            n_val: 1000,
            n_test_id: 5000,
            n_test_ood: 1000,
            cells_per_axis: 4,
            sigma_min: 0.01,
            sigma_max: 1.0,
            ood_shift: 3.0,
            seed: 0,
        }
    }
}

impl TaskSpec {
    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.cells_per_axis == 0 {
            return Err(Error::invalid(
                "input_dim and cells_per_axis must be positive",
            ));
        }
        if !(self.sigma_min > 0.0 && self.sigma_max >= self.sigma_min) {
            return Err(Error::invalid("need 0 < sigma_min <= sigma_max"));
        }
        if self.ood_shift.is_nan() || self.ood_shift.abs() <= 2.0 {
            return Err(Error::invalid(
                "ood_shift must exceed the box width 2 so regions are disjoint",
            ));
        }
        if self.n_train == 0 {
            return Err(Error::Empty("task has no training samples"));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.cells_per_axis.pow(self.input_dim.min(2) as u32)
    }

    /// Noise scale of a cell.
    pub fn cell_sigma(&self, cell: usize) -> f64 {
        let g = self.num_cells();
        if g == 1 {
            return self.sigma_min;
        }
        let stride = (g * 7 / 16..=g)
            .find(|&s| s > 0 && gcd(s, g) == 1)
            .unwrap_or(1);
        let level = (cell * stride) % g;
        let t = level as f64 / (g - 1) as f64;
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
    }

    /// Cell of an in-domain point (the OOD box is shifted back first).
    pub fn cell_of(&self, x: &[f64], ood: bool) -> usize {
        let g = self.cells_per_axis;
        let axis = |v: f64| (((v + 1.0) / 2.0 * g as f64).floor() as usize).min(g - 1);
        let x0 = if ood { x[0] - self.ood_shift } else { x[0] };
        let mut cell = axis(x0);
        if self.input_dim >= 2 {
            cell = cell * g + axis(x[1]);
        }
        cell
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// One split: inputs row-major `(n, d)`, noisy targets, and the ground truth
/// used to generate them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub clean: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Cell index; out-of-domain points are offset by the number of cells.
    pub region: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyTask {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub val: Dataset,
    pub test_id: Dataset,
    pub test_ood: Dataset,
}

fn sample_split(spec: &TaskSpec, n: usize, ood: bool, stream: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let d = spec.input_dim;
    let mut ds = Dataset {
        input_dim: d,
        inputs: Vec::with_capacity(n * d),
        targets: Vec::with_capacity(n),
        clean: Vec::with_capacity(n),
        sigma: Vec::with_capacity(n),
        region: Vec::with_capacity(n),
    };
    let mut x = vec![0.0; d];
    for _ in 0..n {
        for v in x.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        if ood {
            x[0] += spec.ood_shift;
        }
        let cell = spec.cell_of(&x, ood);
        let sigma = spec.cell_sigma(cell);
        let clean = spec.target.eval(&x);
        let z: f64 = StandardNormal.sample(&mut rng);
        ds.inputs.extend_from_slice(&x);
        ds.clean.push(clean);
        ds.targets.push(clean + sigma * z);
        ds.sigma.push(sigma);
        ds.region
            .push(if ood { cell + spec.num_cells() } else { cell });
    }
    ds
}

/// Deterministic in `spec` (including its seed). Each split draws from its own
/// stream, so changing one split's size leaves the others unchanged.
pub fn generate_task(spec: &TaskSpec) -> Result<ToyTask> {
    spec.validate()?;
    Ok(ToyTask {
        spec: spec.clone(),
        train: sample_split(spec, spec.n_train, false, 1),
        val: sample_split(spec, spec.n_val, false, 2),
        test_id: sample_split(spec, spec.n_test_id, false, 3),
        test_ood: sample_split(spec, spec.n_test_ood, true, 4),
    })
}

/// Vectors resembling learned descriptors: points on a `intrinsic_dim`
/// manifold pushed through a fixed random softplus layer into `dim`
/// dimensions. The embedding depends only on `(dim, intrinsic_dim)`; `seed`
/// picks the points.
pub fn synthetic_descriptors(
    n: usize,
    dim: usize,
    intrinsic_dim: usize,
    seed: u64,
) -> Result<DescriptorSet> {
    if dim == 0 || intrinsic_dim == 0 {
        return Err(Error::invalid("dimensions must be positive"));
    }
    let mut embed_rng =
        ChaCha8Rng::seed_from_u64(0x5eed_0000 ^ ((dim as u64) << 16) ^ intrinsic_dim as u64);
    let gauss = Normal::new(0.0f32, 1.0).expect("valid normal");
    let w: Vec<f32> = (0..dim * intrinsic_dim)
        .map(|_| gauss.sample(&mut embed_rng))
        .collect();
    let b: Vec<f32> = (0..dim).map(|_| gauss.sample(&mut embed_rng)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * dim);
    let mut z = vec![0.0f32; intrinsic_dim];
    for _ in 0..n {
        for v in z.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        for j in 0..dim {
            let a = b[j]
                + w[j * intrinsic_dim..(j + 1) * intrinsic_dim]
                    .iter()
                    .zip(&z)
                    .map(|(wi, zi)| wi * zi)
                    .sum::<f32>();
            out.push(a.max(0.0) + (-a.abs()).exp().ln_1p());
        }
    }
    DescriptorSet::new(n, dim, out)
}

/// `n` isotropic random unit vectors.
pub fn random_unit_vectors(n: usize, dim: usize, seed: u64) -> Result<DescriptorSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * dim);
    let mut v = vec![0.0f32; dim];
    for _ in 0..n {
        loop {
            for x in v.iter_mut() {
                *x = StandardNormal.sample(&mut rng);
            }
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
            if norm > 1e-6 {
                out.extend(v.iter().map(|x| x / norm));
                break;
            }
        }
    }
    DescriptorSet::new(n, dim, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TaskSpec {
        TaskSpec {
            n_train: 200,
            n_val: 50,
            n_test_id: 100,
            n_test_ood: 100,
            seed: 5,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn same_seed_same_task() {
        assert_eq!(
            generate_task(&small()).unwrap(),
            generate_task(&small()).unwrap()
        );
        let other = TaskSpec { seed: 6, ..small() };
        assert_ne!(
            generate_task(&small()).unwrap().train,
            generate_task(&other).unwrap().train
        );
    }

    #[test]
    fn ood_points_lie_outside_the_id_box() {
        let t = generate_task(&small()).unwrap();
        for i in 0..t.test_ood.len() {
            let x = t.test_ood.input(i);
            assert!(x[0] > 1.0, "{x:?}");
        }
        for ds in [&t.train, &t.val, &t.test_id] {
            assert!(ds.inputs.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn split_sizes_are_independent_streams() {
        let a = generate_task(&small()).unwrap();
        let b = generate_task(&TaskSpec {
            n_val: 7,
            ..small()
        })
        .unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test_id, b.test_id);
    }

    #[test]
    fn cell_sigmas_span_the_range_and_neighbors_differ() {
        let s = TaskSpec::default();
        let sig: Vec<f64> = (0..s.num_cells()).map(|c| s.cell_sigma(c)).collect();
        let min = sig.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = sig.iter().cloned().fold(0.0, f64::max);
        assert!((min - s.sigma_min).abs() < 1e-15);
        assert!((max - s.sigma_max).abs() < 1e-12);
        for c in 1..sig.len() {
            assert_ne!(sig[c], sig[c - 1]);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(generate_task(&TaskSpec {
            ood_shift: 1.0,
            ..small()
        })
        .is_err());
        assert!(generate_task(&TaskSpec {
            sigma_min: 0.0,
            ..small()
        })
        .is_err());
        assert!(generate_task(&TaskSpec {
            n_train: 0,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn synthetic_descriptors_are_deterministic() {
        let a = synthetic_descriptors(10, 32, 8, 1).unwrap();
        assert_eq!(a, synthetic_descriptors(10, 32, 8, 1).unwrap());
        assert_ne!(a, synthetic_descriptors(10, 32, 8, 2).unwrap());
        let u = random_unit_vectors(5, 32, 3).unwrap();
        for r in u.rows() {
            let n: f32 = r.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-5);
        }
    }
}
