//! Error trajectories, bin grids, per-sample error PDFs and latent descriptors,
//! together with their on-disk containers (`*.errs`, `*.pdfb`, `*.desc`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, Dtype, Payload, Sidecar};
use crate::error::{Error, Result};
use crate::par;

pub const ERRS_KIND: &str = "errs";
pub const PDFB_KIND: &str = "pdfb";
pub const DESC_KIND: &str = "desc";

/// Default number of logarithmic bins (an underflow bin is added on top).
pub const DEFAULT_NUM_BINS: usize = 100;

/// Per-sample, per-epoch training errors stored epoch-major: `errors[t * N + i]`
/// is the error of sample `i` at the end of epoch `t + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorTrajectoryLog {
    num_epochs: usize,
    num_samples: usize,
    errors: Vec<f32>,
}

impl ErrorTrajectoryLog {
    pub fn new(num_epochs: usize, num_samples: usize, errors: Vec<f32>) -> Result<Self> {
        if num_epochs == 0 || num_samples == 0 {
            return Err(Error::Empty(
                "trajectory needs at least one epoch and one sample",
            ));
        }
        if errors.len() != num_epochs * num_samples {
            return Err(Error::Shape(format!(
                "{} errors for {num_epochs} epochs x {num_samples} samples",
                errors.len()
            )));
        }
        if let Some(index) = errors.iter().position(|e| !e.is_finite() || *e < 0.0) {
            return Err(Error::InvalidValue {
                index,
                row: index / num_samples,
                col: index % num_samples,
                value: f64::from(errors[index]),
            });
        }
        Ok(ErrorTrajectoryLog {
            num_epochs,
            num_samples,
            errors,
        })
    }

    pub fn num_epochs(&self) -> usize {
        self.num_epochs
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn errors(&self) -> &[f32] {
        &self.errors
    }

    /// Errors of every sample at epoch `t` (zero-based).
    pub fn epoch(&self, t: usize) -> &[f32] {
        &self.errors[t * self.num_samples..(t + 1) * self.num_samples]
    }

    pub fn final_epoch(&self) -> &[f32] {
        self.epoch(self.num_epochs - 1)
    }

    pub fn sample(&self, i: usize) -> impl Iterator<Item = f32> + '_ {
        self.errors
            .iter()
            .skip(i)
            .step_by(self.num_samples)
            .copied()
    }

    pub fn max_error(&self) -> f64 {
        self.errors.iter().fold(0.0f32, |m, &e| m.max(e)).into()
    }

    pub fn min_positive_error(&self) -> Option<f64> {
        self.errors
            .iter()
            .copied()
            .filter(|&e| e > 0.0)
            .fold(None, |m: Option<f32>, e| Some(m.map_or(e, |m| m.min(e))))
            .map(f64::from)
    }

    /// Reorders samples: column `j` of the result is column `perm[j]` of `self`.
    pub fn permute_samples(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_samples {
            return Err(Error::Shape(
                "permutation length differs from sample count".into(),
            ));
        }
        let mut errors = Vec::with_capacity(self.errors.len());
        for t in 0..self.num_epochs {
            let row = self.epoch(t);
            errors.extend(perm.iter().map(|&p| row[p]));
        }
        ErrorTrajectoryLog::new(self.num_epochs, self.num_samples, errors)
    }
}

pub fn write_trajectory_log(path: &Path, log: &ErrorTrajectoryLog) -> Result<()> {
    let meta = Sidecar::new(ERRS_KIND, log.num_epochs, log.num_samples, Dtype::F32Le);
    container::write_f32(path, &meta, &log.errors)
}

pub fn read_trajectory_log(path: &Path) -> Result<ErrorTrajectoryLog> {
    let (meta, payload) = container::read(path, Some(ERRS_KIND))?;
    if meta.dtype != Dtype::F32Le {
        return Err(Error::Metadata {
            path: container::sidecar_path(path),
            reason: "error logs must be f32le".into(),
        });
    }
    ErrorTrajectoryLog::new(meta.rows, meta.cols, payload.into_f32())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    Linear,
    Logarithmic,
}

impl Spacing {
    fn as_str(self) -> &'static str {
        match self {
            Spacing::Linear => "linear",
            Spacing::Logarithmic => "logarithmic",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(Spacing::Linear),
            "logarithmic" => Some(Spacing::Logarithmic),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EpsMaxPolicy {
    /// Top edge is the largest error seen anywhere in the trajectory.
    TrainMax,
    Explicit(f64),
}

/// Shared histogram bins. Bin `b` covers `[edges[b], edges[b+1])`, the last
/// bin is closed at the top, and values outside the grid are clipped into
/// the nearest end bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    edges: Vec<f64>,
    spacing: Spacing,
}

impl BinGrid {
    pub fn new(edges: Vec<f64>, spacing: Spacing) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::Grid("need at least two edges".into()));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges[0] < 0.0 {
            return Err(Error::Grid("edges must be finite and non-negative".into()));
        }
        if edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Grid("edges must be strictly increasing".into()));
        }
        Ok(BinGrid { edges, spacing })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn num_bins(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn eps_max(&self) -> f64 {
        self.edges[self.edges.len() - 1]
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    pub fn bin_index(&self, value: f64) -> usize {
        // Number of interior edges <= value; NaN lands in bin 0.
        self.edges[1..self.edges.len() - 1].partition_point(|&e| e <= value)
    }
}

pub fn make_bin_grid(
    trajectory: &ErrorTrajectoryLog,
    num_bins: usize,
    spacing: Spacing,
    eps_max_policy: EpsMaxPolicy,
) -> Result<BinGrid> {
    if num_bins == 0 {
        return Err(Error::Grid("num_bins must be at least 1".into()));
    }
    let top = match eps_max_policy {
        EpsMaxPolicy::TrainMax => trajectory.max_error(),
        EpsMaxPolicy::Explicit(v) => {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Grid(format!(
                    "explicit eps_max must be positive, got {v}"
                )));
            }
            v
        }
    };
    match spacing {
        Spacing::Linear => {
            if top <= 0.0 {
                return Err(Error::Grid(
                    "all-zero trajectory has no linear range".into(),
                ));
            }
            let mut edges: Vec<f64> = (0..=num_bins)
                .map(|j| top * j as f64 / num_bins as f64)
                .collect();
            edges[num_bins] = top;
            BinGrid::new(edges, spacing)
        }
        Spacing::Logarithmic => {
            let low = trajectory.min_positive_error().ok_or_else(|| {
                Error::Grid(
                    "logarithmic spacing needs a positive error; trajectory is all zero".into(),
                )
            })?;
            if low >= top {
                return Err(Error::Grid(format!(
                    "logarithmic range is empty: smallest positive error {low} >= eps_max {top}"
                )));
            }
            let (llo, lhi) = (low.log10(), top.log10());
            let mut edges = Vec::with_capacity(num_bins + 2);
            // Underflow bin [0, low) catches exact zeros.
            edges.push(0.0);
            edges.extend(
                (0..=num_bins).map(|j| 10f64.powf(llo + (lhi - llo) * j as f64 / num_bins as f64)),
            );
            edges[1] = low;
            edges[num_bins + 1] = top;
            BinGrid::new(edges, spacing)
        }
    }
}

/// Integer histogram counts, row-major `(N, B)`, over epochs `burn_in..E`.
pub fn histogram_counts(
    trajectory: &ErrorTrajectoryLog,
    grid: &BinGrid,
    burn_in: usize,
) -> Result<Vec<u32>> {
    let (e, n, b) = (
        trajectory.num_epochs,
        trajectory.num_samples,
        grid.num_bins(),
    );
    if burn_in >= e {
        return Err(Error::invalid(format!(
            "burn_in {burn_in} leaves no epochs out of {e}"
        )));
    }
    let mut counts = vec![0u32; n * b];
    par::for_each_row_mut(&mut counts, b, |i, row| {
        for t in burn_in..e {
            let v = f64::from(trajectory.errors[t * n + i]);
            row[grid.bin_index(v)] += 1;
        }
    });
    Ok(counts)
}

/// Per-sample error PDFs: each row is a normalized histogram (probabilities, not densities).
#[derive(Clone, Debug, PartialEq)]
pub struct PdfBank {
    grid: BinGrid,
    num_samples: usize,
    pdfs: Vec<f64>,
}

impl PdfBank {
    pub fn new(grid: BinGrid, num_samples: usize, pdfs: Vec<f64>) -> Result<Self> {
        let b = grid.num_bins();
        if num_samples == 0 {
            return Err(Error::Empty("pdf bank has no samples"));
        }
        if pdfs.len() != num_samples * b {
            return Err(Error::Shape(format!(
                "{} values for {num_samples} rows x {b} bins",
                pdfs.len()
            )));
        }
        if let Some(index) = pdfs.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidValue {
                index,
                row: index / b,
                col: index % b,
                value: pdfs[index],
            });
        }
        for (i, row) in pdfs.chunks_exact(b).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Shape(format!("row {i} sums to {s}, not 1")));
            }
        }
        Ok(PdfBank {
            grid,
            num_samples,
            pdfs,
        })
    }

    pub fn grid(&self) -> &BinGrid {
        &self.grid
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn num_bins(&self) -> usize {
        self.grid.num_bins()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let b = self.grid.num_bins();
        &self.pdfs[i * b..(i + 1) * b]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.pdfs.chunks_exact(self.grid.num_bins())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.pdfs
    }
}

pub fn build_pdf_bank(
    trajectory: &ErrorTrajectoryLog,
    grid: &BinGrid,
    burn_in: usize,
) -> Result<PdfBank> {
    let counts = histogram_counts(trajectory, grid, burn_in)?;
    let total = (trajectory.num_epochs - burn_in) as f64;
    let pdfs = counts.iter().map(|&c| f64::from(c) / total).collect();
    Ok(PdfBank {
        grid: grid.clone(),
        num_samples: trajectory.num_samples,
        pdfs,
    })
}

/// PDF banks are written as f64 so rows stay normalized to 1e-9 after a round trip.
pub fn write_pdf_bank(path: &Path, bank: &PdfBank) -> Result<()> {
    let mut meta = Sidecar::new(PDFB_KIND, bank.num_samples, bank.num_bins(), Dtype::F64Le);
    meta.spacing = Some(bank.grid.spacing.as_str().into());
    meta.edges = Some(container::encode_edges(&bank.grid.edges));
    container::write_f64(path, &meta, &bank.pdfs)
}

pub fn read_pdf_bank(path: &Path) -> Result<PdfBank> {
    let (meta, payload) = container::read(path, Some(PDFB_KIND))?;
    let bad = |reason: String| Error::Metadata {
        path: container::sidecar_path(path),
        reason,
    };
    let raw = meta
        .edges
        .as_ref()
        .ok_or_else(|| bad("missing bin edges".into()))?;
    let edges = container::decode_edges(path, raw)?;
    let spacing = match meta.spacing.as_deref() {
        Some(s) => Spacing::parse(s).ok_or_else(|| bad(format!("unknown spacing {s:?}")))?,
        None => Spacing::Linear,
    };
    let grid = BinGrid::new(edges, spacing)?;
    if grid.num_bins() != meta.cols {
        return Err(bad(format!(
            "{} bins in grid but {} columns in payload",
            grid.num_bins(),
            meta.cols
        )));
    }
    PdfBank::new(grid, meta.rows, payload.into_f64())
}

/// Latent descriptors, row-major `(N, D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    num_samples: usize,
    dim: usize,
    vectors: Vec<f32>,
}

impl DescriptorSet {
    pub fn new(num_samples: usize, dim: usize, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("descriptor dimension must be positive"));
        }
        if vectors.len() != num_samples * dim {
            return Err(Error::Shape(format!(
                "{} values for {num_samples} descriptors of dimension {dim}",
                vectors.len()
            )));
        }
        if let Some(index) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue {
                index,
                row: index / dim,
                col: index % dim,
                value: f64::from(vectors[index]),
            });
        }
        Ok(DescriptorSet {
            num_samples,
            dim,
            vectors,
        })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut vectors = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.as_ref().len() != dim {
                return Err(Error::Shape("ragged descriptor rows".into()));
            }
            vectors.extend_from_slice(r.as_ref());
        }
        DescriptorSet::new(rows.len(), dim, vectors)
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn len(&self) -> usize {
        self.num_samples
    }

    pub fn is_empty(&self) -> bool {
        self.num_samples == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.vectors.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.vectors
    }
}

pub fn write_descriptor_set(path: &Path, set: &DescriptorSet) -> Result<()> {
    let meta = Sidecar::new(DESC_KIND, set.num_samples, set.dim, Dtype::F32Le);
    container::write_f32(path, &meta, &set.vectors)
}

pub fn read_descriptor_set(path: &Path) -> Result<DescriptorSet> {
    let (meta, payload) = container::read(path, Some(DESC_KIND))?;
    let vectors = match payload {
        Payload::F32(v) => v,
        Payload::F64(_) => {
            return Err(Error::Metadata {
                path: container::sidecar_path(path),
                reason: "descriptors must be f32le".into(),
            })
        }
    };
    DescriptorSet::new(meta.rows, meta.cols, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log(e: usize, n: usize, v: &[f32]) -> ErrorTrajectoryLog {
        ErrorTrajectoryLog::new(e, n, v.to_vec()).unwrap()
    }

    fn single(traj: &[f32]) -> ErrorTrajectoryLog {
        log(traj.len(), 1, traj)
    }

    #[test]
    fn rejects_negative_and_nan_with_position() {
        let err = ErrorTrajectoryLog::new(2, 3, vec![0.1, 0.2, 0.3, 0.4, -0.5, 0.6]).unwrap_err();
        assert!(matches!(
            err,
            Error::InvalidValue {
                index: 4,
                row: 1,
                col: 1,
                ..
            }
        ));
        let err = ErrorTrajectoryLog::new(1, 2, vec![0.1, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::InvalidValue { index: 1, .. }));
    }

    #[test]
    fn linear_grid_train_max() {
        let t = log(1, 3, &[0.5, 2.0, 1.0]);
        let g = make_bin_grid(&t, 4, Spacing::Linear, EpsMaxPolicy::TrainMax).unwrap();
        assert_eq!(g.edges(), &[0.0, 0.5, 1.0, 1.5, 2.0]);
        assert_eq!(g.eps_max(), 2.0);
    }

    #[test]
    fn linear_grid_explicit() {
        let t = log(1, 1, &[7.0]);
        let g = make_bin_grid(&t, 2, Spacing::Linear, EpsMaxPolicy::Explicit(1.0)).unwrap();
        assert_eq!(g.edges(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn log_grid_matches_hand_computed_decades() {
        let t = log(1, 3, &[1e-4, 0.0, 1.0]);
        let g = make_bin_grid(&t, 4, Spacing::Logarithmic, EpsMaxPolicy::TrainMax).unwrap();
        let low = f64::from(1e-4f32);
        let want = [0.0, low, 1e-3, 1e-2, 1e-1, 1.0];
        assert_eq!(g.num_bins(), 5);
        assert_eq!(g.edges()[0], 0.0);
        assert_eq!(g.edges()[1], low);
        for (a, b) in g.edges().iter().zip(want).skip(2) {
            // Interior edges sit on the log10 grid anchored at the f32 minimum.
            assert!((a - b).abs() <= 1e-7 * b, "{a} vs {b}");
        }
    }

    #[test]
    fn log_grid_rejects_all_zero() {
        let t = log(2, 2, &[0.0; 4]);
        let err = make_bin_grid(&t, 10, Spacing::Logarithmic, EpsMaxPolicy::TrainMax).unwrap_err();
        assert!(matches!(err, Error::Grid(_)));
        assert!(make_bin_grid(&t, 10, Spacing::Linear, EpsMaxPolicy::TrainMax).is_err());
        assert!(make_bin_grid(&t, 0, Spacing::Linear, EpsMaxPolicy::Explicit(1.0)).is_err());
    }

    #[test]
    fn one_sample_per_bin() {
        let g = BinGrid::new(vec![0.0, 0.15, 0.25, 0.35], Spacing::Linear).unwrap();
        let bank = build_pdf_bank(&single(&[0.1, 0.2, 0.3]), &g, 0).unwrap();
        for p in bank.row(0) {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_bin_takes_everything() {
        let g = BinGrid::new(vec![0.0, 1.0], Spacing::Linear).unwrap();
        let bank = build_pdf_bank(&single(&[0.5, 0.5]), &g, 0).unwrap();
        assert_eq!(bank.row(0), &[1.0]);
    }

    #[test]
    fn overflow_is_clipped_into_top_bin() {
        let g = BinGrid::new(vec![0.0, 0.5, 1.0], Spacing::Linear).unwrap();
        let bank = build_pdf_bank(&single(&[0.1, 9.9]), &g, 0).unwrap();
        assert_eq!(bank.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn half_open_bins_and_closed_top() {
        let g = BinGrid::new(vec![0.0, 1.0, 2.0], Spacing::Linear).unwrap();
        assert_eq!(g.bin_index(0.0), 0);
        assert_eq!(g.bin_index(0.999), 0);
        assert_eq!(g.bin_index(1.0), 1);
        assert_eq!(g.bin_index(2.0), 1);
        assert_eq!(g.bin_index(5.0), 1);
    }

    #[test]
    fn burn_in_drops_early_epochs() {
        let g = BinGrid::new(vec![0.0, 1.0, 2.0], Spacing::Linear).unwrap();
        let bank = build_pdf_bank(&single(&[1.5, 0.2, 0.3]), &g, 1).unwrap();
        assert_eq!(bank.row(0), &[1.0, 0.0]);
        assert!(build_pdf_bank(&single(&[1.5]), &g, 1).is_err());
    }

    #[test]
    fn trajectory_round_trip_and_size_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.errs");
        let t = log(2, 3, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        write_trajectory_log(&p, &t).unwrap();
        let back = read_trajectory_log(&p).unwrap();
        assert_eq!(back.epoch(0), &[0.1, 0.2, 0.3]);
        assert_eq!(back.epoch(1), &[0.4, 0.5, 0.6]);
        assert_eq!(back, t);

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            read_trajectory_log(&p),
            Err(Error::PayloadSize {
                expected: 24,
                actual: 20,
                ..
            })
        ));
    }

    #[test]
    fn reading_negative_entry_reports_offender() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.errs");
        let meta = Sidecar::new(ERRS_KIND, 1, 3, Dtype::F32Le);
        container::write_f32(&p, &meta, &[0.0, 1.0, -2.0]).unwrap();
        assert!(matches!(
            read_trajectory_log(&p),
            Err(Error::InvalidValue { index: 2, .. })
        ));
    }

    #[test]
    fn pdf_bank_and_descriptor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = BinGrid::new(vec![0.0, 0.1, 0.35, 1.0 / 3.0 + 1.0], Spacing::Linear).unwrap();
        let bank =
            PdfBank::new(g, 2, vec![0.2, 0.3, 0.5, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap();
        let p = dir.path().join("b.pdfb");
        write_pdf_bank(&p, &bank).unwrap();
        assert_eq!(read_pdf_bank(&p).unwrap(), bank);

        let vecs: Vec<f32> = (0..4 * 32).map(|i| (i as f32 * 0.37).sin()).collect();
        let d = DescriptorSet::new(4, 32, vecs).unwrap();
        let q = dir.path().join("d.desc");
        write_descriptor_set(&q, &d).unwrap();
        assert_eq!(read_descriptor_set(&q).unwrap(), d);
    }

    #[test]
    fn truncated_descriptor_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let d = DescriptorSet::new(2, 3, vec![1.0; 6]).unwrap();
        let q = dir.path().join("d.desc");
        write_descriptor_set(&q, &d).unwrap();
        std::fs::write(&q, [0u8; 7]).unwrap();
        assert!(matches!(
            read_descriptor_set(&q),
            Err(Error::PayloadSize { .. })
        ));
    }

    #[test]
    fn pdf_bank_rejects_unnormalized_rows() {
        let g = BinGrid::new(vec![0.0, 1.0, 2.0], Spacing::Linear).unwrap();
        assert!(PdfBank::new(g.clone(), 1, vec![0.5, 0.4]).is_err());
        assert!(PdfBank::new(g, 1, vec![1.5, -0.5]).is_err());
    }
}
