//! Scoring uncertainty estimates against observed errors: rank and linear
//! correlation, calibration curves, miscalibration areas and sharpness. Also
//! the ensemble-spread baseline and its Gaussian confidence thresholds.

use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erf_inv;
use twofloat::TwoFloat;

use crate::container::{self, Dtype, Sidecar};
use crate::error::{Error, Result};
use crate::par;
use crate::trajlog::{BinGrid, PdfBank};
use crate::uq::{self, UqEstimate};

pub const DEFAULT_LEVELS: usize = 101;
pub const ENSEMBLE_KIND: &str = "ensemble";
pub const VECTORS_KIND: &str = "vectors";

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {} values", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {} values", x.len(), y.len())));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// How a Gaussian spread `sigma` becomes an error threshold at confidence `c`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaussianInterval {
    /// `P(|e| <= t) = c` for `e ~ N(0, sigma^2)`: `t = sigma * sqrt(2) * erfinv(c)`.
    /// Same as the symmetric two-sided interval on a signed component.
    #[default]
    HalfNormal,
    /// `P(e <= t) = c`: `t = sigma * Phi^-1(c)`, floored at zero.
    OneSided,
}

pub fn gaussian_threshold(sigma: f64, confidence: f64, interval: GaussianInterval) -> Result<f64> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid(format!(
            "sigma must be finite and >= 0, got {sigma}"
        )));
    }
    if !(0.0..=1.0).contains(&confidence) {
        return Err(Error::invalid(format!(
            "confidence {confidence} outside [0, 1]"
        )));
    }
    Ok(gaussian_unchecked(sigma, confidence, interval))
}

fn gaussian_unchecked(sigma: f64, c: f64, interval: GaussianInterval) -> f64 {
    if c >= 1.0 {
        return f64::INFINITY;
    }
    let z = match interval {
        GaussianInterval::HalfNormal => {
            if c <= 0.0 {
                return 0.0;
            }
            std::f64::consts::SQRT_2 * erf_inv(c)
        }
        GaussianInterval::OneSided => {
            if c <= 0.5 {
                return 0.0;
            }
            Normal::standard().inverse_cdf(c)
        }
    };
    sigma * z
}

#[derive(Clone, Debug, PartialEq)]
pub enum Thresholds {
    /// Per-point error PDFs on a shared grid, row-major `(N, B)`.
    Pdf { grid: BinGrid, pdfs: Vec<f64> },
    /// Per-point Gaussian spreads.
    Gaussian {
        sigmas: Vec<f64>,
        interval: GaussianInterval,
    },
}

/// One method's uncertainties, the observed errors, and the way it turns a
/// confidence level into a per-point error threshold.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodPredictions {
    pub uncertainties: Vec<f64>,
    pub true_errors: Vec<f64>,
    pub thresholds: Thresholds,
}

fn check_errors(true_errors: &[f64], n: usize) -> Result<()> {
    if true_errors.len() != n {
        return Err(Error::Shape(format!(
            "{} true errors for {n} predictions",
            true_errors.len()
        )));
    }
    if n == 0 {
        return Err(Error::Empty("no predictions"));
    }
    if let Some(index) = true_errors
        .iter()
        .position(|e| !(e.is_finite() && *e >= 0.0))
    {
        return Err(Error::InvalidValue {
            index,
            row: index,
            col: 0,
            value: true_errors[index],
        });
    }
    Ok(())
}

impl MethodPredictions {
    /// Uncertainty is the expectation of each PDF.
    pub fn from_pdfs(grid: BinGrid, pdfs: Vec<f64>, true_errors: Vec<f64>) -> Result<Self> {
        let b = grid.num_bins();
        if !pdfs.len().is_multiple_of(b) {
            return Err(Error::Shape("pdf matrix width differs from grid".into()));
        }
        check_errors(&true_errors, pdfs.len() / b)?;
        let uncertainties = pdfs
            .chunks_exact(b)
            .map(|p| uq::expected_error(p, &grid))
            .collect();
        Ok(MethodPredictions {
            uncertainties,
            true_errors,
            thresholds: Thresholds::Pdf { grid, pdfs },
        })
    }

    pub fn from_bank(bank: &PdfBank, true_errors: Vec<f64>) -> Result<Self> {
        Self::from_pdfs(bank.grid().clone(), bank.as_slice().to_vec(), true_errors)
    }

    pub fn from_estimates(
        estimates: &[UqEstimate],
        grid: &BinGrid,
        true_errors: Vec<f64>,
    ) -> Result<Self> {
        let pdfs = estimates
            .iter()
            .flat_map(|e| e.pdf.iter().copied())
            .collect();
        Self::from_pdfs(grid.clone(), pdfs, true_errors)
    }

    pub fn gaussian(
        sigmas: Vec<f64>,
        true_errors: Vec<f64>,
        interval: GaussianInterval,
    ) -> Result<Self> {
        check_errors(&true_errors, sigmas.len())?;
        if let Some(i) = sigmas.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid(format!(
                "sigma {} at {i} is not a valid spread",
                sigmas[i]
            )));
        }
        Ok(MethodPredictions {
            uncertainties: sigmas.clone(),
            true_errors,
            thresholds: Thresholds::Gaussian { sigmas, interval },
        })
    }

    pub fn len(&self) -> usize {
        self.true_errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.true_errors.is_empty()
    }

    /// Error threshold of point `i` at confidence `c` in `[0, 1]`.
    pub fn threshold(&self, i: usize, c: f64) -> f64 {
        match &self.thresholds {
            Thresholds::Pdf { grid, pdfs } => {
                let b = grid.num_bins();
                uq::threshold_unchecked(&pdfs[i * b..(i + 1) * b], grid.edges(), c)
            }
            Thresholds::Gaussian { sigmas, interval } => {
                gaussian_unchecked(sigmas[i], c, *interval)
            }
        }
    }

    pub fn sharpness(&self) -> f64 {
        match &self.thresholds {
            Thresholds::Pdf { grid, pdfs } => sharpness(pdfs.chunks_exact(grid.num_bins()), grid),
            Thresholds::Gaussian { sigmas, .. } => ensemble_sharpness(sigmas),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub levels: Vec<f64>,
    pub observed: Vec<f64>,
}

impl CalibrationCurve {
    pub fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.levels
            .iter()
            .copied()
            .zip(self.observed.iter().copied())
    }

    /// `c,f` rows with a header, ready for plotting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("expected_confidence,observed_fraction\n");
        for (c, f) in self.points() {
            s.push_str(&format!("{c},{f}\n"));
        }
        s
    }
}

/// `n` evenly spaced confidence levels from 0 to 1 inclusive.
pub fn default_levels(n: usize) -> Vec<f64> {
    assert!(n >= 2, "need at least two levels");
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

pub fn calibration_curve(preds: &MethodPredictions, levels: &[f64]) -> Result<CalibrationCurve> {
    if let Some(c) = levels.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(Error::invalid(format!(
            "confidence level {c} outside [0, 1]"
        )));
    }
    let n = preds.len();
    let counts = par::map_range(levels.len(), |j| {
        let c = levels[j];
        (0..n)
            .filter(|&i| preds.true_errors[i] <= preds.threshold(i, c))
            .count()
    });
    Ok(CalibrationCurve {
        levels: levels.to_vec(),
        observed: counts.iter().map(|&k| k as f64 / n as f64).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiscalibrationAreas {
    /// Area where the curve is below the diagonal (overconfidence).
    pub over: f64,
    /// Area where the curve is above the diagonal (underconfidence).
    pub under: f64,
    pub total: f64,
}

/// Trapezoidal integration of the positive and negative parts of `c - f`.
/// Accumulated in double-double so closed-form cases come out exact.
pub fn miscalibration_areas(curve: &CalibrationCurve) -> MiscalibrationAreas {
    let zero = TwoFloat::from(0.0);
    let (mut over, mut under) = (zero, zero);
    let gap = |c: f64, f: f64| TwoFloat::from(c) - TwoFloat::from(f);
    let pts: Vec<(f64, f64)> = curve.points().collect();
    for w in pts.windows(2) {
        let ((c0, f0), (c1, f1)) = (w[0], w[1]);
        let half_h = (TwoFloat::from(c1) - TwoFloat::from(c0)) * 0.5;
        let (g0, g1) = (gap(c0, f0), gap(c1, f1));
        over += half_h * (g0.max(zero) + g1.max(zero));
        under += half_h * ((-g0).max(zero) + (-g1).max(zero));
    }
    let (over, under) = (f64::from(over), f64::from(under));
    MiscalibrationAreas {
        over,
        under,
        total: over + under,
    }
}

fn pdf_variance(pdf: &[f64], centers: &[f64]) -> f64 {
    let mean: f64 = pdf.iter().zip(centers).map(|(p, c)| p * c).sum();
    pdf.iter()
        .zip(centers)
        .map(|(p, c)| p * (c - mean) * (c - mean))
        .sum()
}

/// Root of the mean per-point variance, variances taken over bin midpoints.
pub fn sharpness<'a>(pdfs: impl Iterator<Item = &'a [f64]>, grid: &BinGrid) -> f64 {
    let centers = grid.centers();
    let (mut sum, mut n) = (0.0, 0usize);
    for p in pdfs {
        sum += pdf_variance(p, &centers);
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Root of the mean ensemble variance.
pub fn ensemble_sharpness(sigmas: &[f64]) -> f64 {
    if sigmas.is_empty() {
        return 0.0;
    }
    (sigmas.iter().map(|s| s * s).sum::<f64>() / sigmas.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub method: String,
    pub num_points: usize,
    pub pearson: f64,
    pub spearman: f64,
    pub area_over: f64,
    pub area_under: f64,
    pub area_total: f64,
    pub sharpness: f64,
    pub curve: CalibrationCurve,
}

pub fn calibration_report(
    method: &str,
    preds: &MethodPredictions,
    levels: &[f64],
) -> Result<CalibrationReport> {
    let curve = calibration_curve(preds, levels)?;
    let areas = miscalibration_areas(&curve);
    Ok(CalibrationReport {
        method: method.to_string(),
        num_points: preds.len(),
        pearson: pearson(&preds.uncertainties, &preds.true_errors)?,
        spearman: spearman(&preds.uncertainties, &preds.true_errors)?,
        area_over: areas.over,
        area_under: areas.under,
        area_total: areas.total,
        sharpness: preds.sharpness(),
        curve,
    })
}

/// Metric-wise mean of several reports on the same levels, for one-report-per-model setups.
pub fn mean_report(method: &str, reports: &[CalibrationReport]) -> Result<CalibrationReport> {
    let first = reports
        .first()
        .ok_or(Error::Empty("no reports to average"))?;
    if reports.iter().any(|r| r.curve.levels != first.curve.levels) {
        return Err(Error::Shape(
            "reports use different confidence levels".into(),
        ));
    }
    let m = reports.len() as f64;
    let mean = |f: fn(&CalibrationReport) -> f64| reports.iter().map(f).sum::<f64>() / m;
    let observed = (0..first.curve.levels.len())
        .map(|j| reports.iter().map(|r| r.curve.observed[j]).sum::<f64>() / m)
        .collect();
    let area_over = mean(|r| r.area_over);
    let area_under = mean(|r| r.area_under);
    Ok(CalibrationReport {
        method: method.to_string(),
        num_points: first.num_points,
        pearson: mean(|r| r.pearson),
        spearman: mean(|r| r.spearman),
        area_over,
        area_under,
        area_total: area_over + area_under,
        sharpness: mean(|r| r.sharpness),
        curve: CalibrationCurve {
            levels: first.curve.levels.clone(),
            observed,
        },
    })
}

/// Predictions of an ensemble, row-major `(models, points, components)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePredictions {
    pub models: usize,
    pub points: usize,
    pub components: usize,
    pub data: Vec<f64>,
}

impl EnsemblePredictions {
    pub fn new(models: usize, points: usize, components: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != models * points * components {
            return Err(Error::Shape(format!(
                "{} values for {models} x {points} x {components}",
                data.len()
            )));
        }
        if components == 0 || points == 0 {
            return Err(Error::Empty("ensemble tensor has no points or components"));
        }
        let cols = points * components;
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue {
                index,
                row: index / cols,
                col: index % cols,
                value: data[index],
            });
        }
        Ok(EnsemblePredictions {
            models,
            points,
            components,
            data,
        })
    }

    fn at(&self, m: usize, i: usize, c: usize) -> f64 {
        self.data[(m * self.points + i) * self.components + c]
    }
}

/// Spread of the ensemble as uncertainty (population std per component,
/// averaged over components) and the error of the ensemble mean as truth.
pub fn ensemble_uncertainty(
    preds: &EnsemblePredictions,
    truths: &[f64],
    interval: GaussianInterval,
) -> Result<MethodPredictions> {
    if preds.models < 2 {
        return Err(Error::invalid(format!(
            "ensemble needs at least 2 models, got {}",
            preds.models
        )));
    }
    if truths.len() != preds.points * preds.components {
        return Err(Error::Shape(
            "truths do not match the ensemble's points x components".into(),
        ));
    }
    let m = preds.models as f64;
    let mut sigmas = Vec::with_capacity(preds.points);
    let mut errors = Vec::with_capacity(preds.points);
    for i in 0..preds.points {
        let (mut spread, mut sq_err) = (0.0, 0.0);
        for c in 0..preds.components {
            // Welford: identical members give exactly zero spread.
            let (mut mean, mut m2) = (0.0, 0.0);
            for k in 0..preds.models {
                let x = preds.at(k, i, c);
                let delta = x - mean;
                mean += delta / (k + 1) as f64;
                m2 += delta * (x - mean);
            }
            spread += (m2 / m).sqrt();
            let diff = mean - truths[i * preds.components + c];
            sq_err += diff * diff;
        }
        sigmas.push(spread / preds.components as f64);
        errors.push(sq_err.sqrt());
    }
    MethodPredictions::gaussian(sigmas, errors, interval)
}

/// Ensemble tensors travel as `(models, points * components)` f32 containers
/// with the logical shape in the sidecar.
pub fn write_ensemble(path: &Path, preds: &EnsemblePredictions) -> Result<()> {
    let mut meta = Sidecar::new(
        ENSEMBLE_KIND,
        preds.models,
        preds.points * preds.components,
        Dtype::F32Le,
    );
    meta.shape = Some(vec![preds.models, preds.points, preds.components]);
    let data: Vec<f32> = preds.data.iter().map(|&x| x as f32).collect();
    container::write_f32(path, &meta, &data)
}

pub fn read_ensemble(path: &Path) -> Result<EnsemblePredictions> {
    let (meta, payload) = container::read(path, Some(ENSEMBLE_KIND))?;
    let shape = meta
        .shape
        .clone()
        .unwrap_or_else(|| vec![meta.rows, meta.cols, 1]);
    if shape.len() != 3 || shape[0] != meta.rows || shape[1] * shape[2] != meta.cols {
        return Err(Error::Metadata {
            path: container::sidecar_path(path),
            reason: format!(
                "shape {shape:?} inconsistent with {}x{}",
                meta.rows, meta.cols
            ),
        });
    }
    EnsemblePredictions::new(shape[0], shape[1], shape[2], payload.into_f64())
}

/// Plain `(rows, cols)` f64 matrix, used for per-point truths and inputs.
/// Stored at full precision so metrics recomputed from files match
/// in-memory runs exactly.
pub fn write_vectors(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    if data.len() != rows * cols {
        return Err(Error::Shape(format!(
            "{} values for {rows} x {cols}",
            data.len()
        )));
    }
    let meta = Sidecar::new(VECTORS_KIND, rows, cols, Dtype::F64Le);
    container::write_f64(path, &meta, data)
}

pub fn read_vectors(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let (meta, payload) = container::read(path, Some(VECTORS_KIND))?;
    let data = payload.into_f64();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidValue {
            index,
            row: index / meta.cols.max(1),
            col: index % meta.cols.max(1),
            value: data[index],
        });
    }
    Ok((meta.rows, meta.cols, data))
}
