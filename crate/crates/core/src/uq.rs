//! Test-time estimation: neighbor-averaged error PDFs, their expectation and
//! CDF thresholds, and first-neighbor-distance out-of-domain flagging.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::knn::{NeighborList, VectorIndex};
use crate::par;
use crate::trajlog::{BinGrid, DescriptorSet, PdfBank};

pub const DEFAULT_K: usize = 10;
pub const DEFAULT_OOD_QUANTILE: f64 = 0.99;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UqEstimate {
    pub pdf: Vec<f64>,
    pub expected_error: f64,
    pub nn1_distance: f64,
    pub neighbor_ids: Vec<usize>,
    /// `None` when no threshold was configured.
    pub ood_flag: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum OodPolicy {
    Quantile(f64),
    Manual(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodThreshold {
    pub cutoff_distance: f64,
    pub policy: OodPolicy,
    /// Set when the fitted cutoff is zero (all training points duplicated);
    /// every non-coincident query is then flagged.
    pub degenerate: bool,
}

impl OodThreshold {
    pub fn manual(cutoff: f64) -> Result<Self> {
        if !(cutoff.is_finite() && cutoff > 0.0) {
            return Err(Error::invalid(format!(
                "OOD cutoff must be positive and finite, got {cutoff}"
            )));
        }
        Ok(OodThreshold {
            cutoff_distance: cutoff,
            policy: OodPolicy::Manual(cutoff),
            degenerate: false,
        })
    }

    pub fn is_ood(&self, nn1_distance: f64) -> bool {
        nn1_distance > self.cutoff_distance
    }
}

/// Unweighted per-bin mean of the neighbors' PDFs.
pub fn average_pdfs(bank: &PdfBank, neighbors: &NeighborList) -> Result<Vec<f64>> {
    if neighbors.is_empty() {
        return Err(Error::Empty("no neighbors to average"));
    }
    let b = bank.num_bins();
    let mut acc = vec![0.0f64; b];
    for &id in &neighbors.ids {
        if id >= bank.num_samples() {
            return Err(Error::invalid(format!(
                "neighbor id {id} outside bank of {} rows",
                bank.num_samples()
            )));
        }
        for (a, p) in acc.iter_mut().zip(bank.row(id)) {
            *a += p;
        }
    }
    let k = neighbors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

/// Mean error under `pdf`, representing each bin by its midpoint.
pub fn expected_error(pdf: &[f64], grid: &BinGrid) -> f64 {
    grid.edges()
        .windows(2)
        .zip(pdf)
        .map(|(w, p)| p * 0.5 * (w[0] + w[1]))
        .sum()
}

/// Upper edge of the first bin where the CDF reaches `confidence`.
/// `confidence == 0` gives the lowest edge; if rounding keeps the CDF just
/// below `confidence`, the top edge is returned.
pub fn confidence_threshold(pdf: &[f64], grid: &BinGrid, confidence: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&confidence) {
        return Err(Error::invalid(format!(
            "confidence {confidence} outside [0, 1]"
        )));
    }
    Ok(threshold_unchecked(pdf, grid.edges(), confidence))
}

pub(crate) fn threshold_unchecked(pdf: &[f64], edges: &[f64], confidence: f64) -> f64 {
    if confidence <= 0.0 {
        return edges[0];
    }
    let mut cdf = 0.0;
    for (b, p) in pdf.iter().enumerate() {
        cdf += p;
        if cdf >= confidence {
            return edges[b + 1];
        }
    }
    edges[edges.len() - 1]
}

/// Full estimate for one query: search, average, expectation, OOD flag.
pub fn estimate(
    query: &[f32],
    index: &VectorIndex,
    bank: &PdfBank,
    k: usize,
    threshold: Option<&OodThreshold>,
) -> Result<UqEstimate> {
    if index.is_empty() {
        return Err(Error::Empty("index is empty"));
    }
    if index.len() != bank.num_samples() {
        return Err(Error::Shape(format!(
            "index has {} samples but pdf bank has {}",
            index.len(),
            bank.num_samples()
        )));
    }
    let neighbors = index.search(query, k)?;
    Ok(from_neighbors(bank, neighbors, threshold))
}

fn from_neighbors(
    bank: &PdfBank,
    neighbors: NeighborList,
    threshold: Option<&OodThreshold>,
) -> UqEstimate {
    let pdf = average_pdfs(bank, &neighbors).expect("search returns at least one valid neighbor");
    let nn1 = neighbors.nearest_distance().expect("non-empty");
    UqEstimate {
        expected_error: expected_error(&pdf, bank.grid()),
        pdf,
        nn1_distance: nn1,
        neighbor_ids: neighbors.ids,
        ood_flag: threshold.map(|t| t.is_ood(nn1)),
    }
}

/// Estimates for every row of `queries`, in order.
pub fn estimate_batch(
    queries: &DescriptorSet,
    index: &VectorIndex,
    bank: &PdfBank,
    k: usize,
    threshold: Option<&OodThreshold>,
) -> Result<Vec<UqEstimate>> {
    if queries.dim() != index.dim() {
        return Err(Error::Dimension {
            expected: index.dim(),
            actual: queries.dim(),
        });
    }
    par::map_range(queries.len(), |i| {
        estimate(queries.row(i), index, bank, k, threshold)
    })
    .into_iter()
    .collect()
}

/// Distance from each indexed point to its nearest *other* point.
pub fn self_excluded_nn1(train: &DescriptorSet, index: &VectorIndex) -> Result<Vec<f64>> {
    if train.len() < 2 {
        return Err(Error::invalid("need at least two training points"));
    }
    let found = par::map_range(train.len(), |i| {
        let hits = index.search(train.row(i), 2)?;
        // With duplicates the point itself need not rank first.
        hits.ids
            .iter()
            .zip(&hits.distances)
            .find(|(&id, _)| id != i)
            .map(|(_, &d)| d)
            .ok_or(Error::Empty("no neighbor besides the point itself"))
    });
    found.into_iter().collect()
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Cutoff on first-neighbor distance, fitted on the training set itself.
pub fn fit_ood_threshold(
    train: &DescriptorSet,
    index: &VectorIndex,
    policy: OodPolicy,
) -> Result<OodThreshold> {
    if train.len() != index.len() || train.dim() != index.dim() {
        return Err(Error::Shape(
            "OOD threshold must be fitted on the indexed descriptors".into(),
        ));
    }
    match policy {
        OodPolicy::Manual(c) => OodThreshold::manual(c),
        OodPolicy::Quantile(q) => {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::invalid(format!("quantile {q} outside [0, 1]")));
            }
            let nn1 = self_excluded_nn1(train, index)?;
            let cutoff = quantile(&nn1, q);
            Ok(OodThreshold {
                cutoff_distance: cutoff,
                policy,
                degenerate: cutoff <= 0.0,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::FlatIndex;
    use crate::trajlog::Spacing;

    fn grid(edges: &[f64]) -> BinGrid {
        BinGrid::new(edges.to_vec(), Spacing::Linear).unwrap()
    }

    fn nl(ids: &[usize]) -> NeighborList {
        NeighborList {
            ids: ids.to_vec(),
            distances: vec![0.0; ids.len()],
        }
    }

    #[test]
    fn averaging_two_opposite_pdfs() {
        let bank = PdfBank::new(grid(&[0.0, 1.0, 2.0]), 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(average_pdfs(&bank, &nl(&[0, 1])).unwrap(), vec![0.5, 0.5]);
        assert_eq!(average_pdfs(&bank, &nl(&[1])).unwrap(), bank.row(1));
        assert!(average_pdfs(&bank, &nl(&[])).is_err());
        assert!(average_pdfs(&bank, &nl(&[2])).is_err());
    }

    #[test]
    fn expectation_examples() {
        assert_eq!(expected_error(&[0.5, 0.5], &grid(&[0.0, 1.0, 2.0])), 1.0);
        assert_eq!(expected_error(&[1.0], &grid(&[0.0, 2.0])), 1.0);
        let e = expected_error(&[0.2, 0.3, 0.5], &grid(&[0.0, 1.0, 2.0, 3.0]));
        assert!((e - 1.8).abs() <= 1e-12 * 1.8);
    }

    #[test]
    fn threshold_examples() {
        let g = grid(&[0.0, 1.0, 2.0, 3.0]);
        let p = [0.2, 0.3, 0.5];
        assert_eq!(confidence_threshold(&p, &g, 0.5).unwrap(), 2.0);
        assert_eq!(confidence_threshold(&p, &g, 1.0).unwrap(), 3.0);
        assert_eq!(confidence_threshold(&p, &g, 0.0).unwrap(), 0.0);
        assert_eq!(confidence_threshold(&p, &g, 0.2).unwrap(), 1.0);
        assert!(confidence_threshold(&p, &g, 1.5).is_err());
        assert!(confidence_threshold(&p, &g, -0.1).is_err());
    }

    #[test]
    fn coincident_query_reproduces_stored_pdf() {
        let d = DescriptorSet::from_rows(&[[0.0f32, 0.0], [1.0, 0.0], [0.0, 5.0]]).unwrap();
        let idx = VectorIndex::Flat(FlatIndex::build(d).unwrap());
        let bank = PdfBank::new(
            grid(&[0.0, 1.0, 2.0, 3.0]),
            3,
            vec![0.1, 0.7, 0.2, 1.0, 0.0, 0.0, 0.0, 0.25, 0.75],
        )
        .unwrap();
        let t = OodThreshold::manual(0.5).unwrap();
        let est = estimate(&[1.0, 0.0], &idx, &bank, 1, Some(&t)).unwrap();
        assert_eq!(est.pdf, bank.row(1));
        assert_eq!(est.nn1_distance, 0.0);
        assert_eq!(est.ood_flag, Some(false));

        let far = estimate(&[100.0, 100.0], &idx, &bank, 2, Some(&t)).unwrap();
        assert_eq!(far.ood_flag, Some(true));
        assert!((far.pdf.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(
            estimate(&[0.0, 0.0], &idx, &bank, 1, None)
                .unwrap()
                .ood_flag,
            None
        );
    }

    #[test]
    fn mismatched_bank_is_rejected() {
        let d = DescriptorSet::from_rows(&[[0.0f32], [1.0]]).unwrap();
        let idx = VectorIndex::Flat(FlatIndex::build(d).unwrap());
        let bank = PdfBank::new(grid(&[0.0, 1.0]), 1, vec![1.0]).unwrap();
        assert!(matches!(
            estimate(&[0.0], &idx, &bank, 1, None),
            Err(Error::Shape(_))
        ));
        let bank2 = PdfBank::new(grid(&[0.0, 1.0]), 2, vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            estimate(&[0.0, 1.0], &idx, &bank2, 1, None),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn duplicate_points_give_degenerate_cutoff() {
        let d = DescriptorSet::from_rows(&[[2.0f32, 2.0], [2.0, 2.0]]).unwrap();
        let idx = VectorIndex::Flat(FlatIndex::build(d.clone()).unwrap());
        for q in [0.0, 0.5, 0.99, 1.0] {
            let t = fit_ood_threshold(&d, &idx, OodPolicy::Quantile(q)).unwrap();
            assert_eq!(t.cutoff_distance, 0.0);
            assert!(t.degenerate);
        }
    }

    #[test]
    fn regular_grid_cutoff_is_the_spacing() {
        let rows: Vec<[f32; 1]> = (0..50).map(|i| [i as f32 * 0.25]).collect();
        let d = DescriptorSet::from_rows(&rows).unwrap();
        let idx = VectorIndex::Flat(FlatIndex::build(d.clone()).unwrap());
        let t = fit_ood_threshold(&d, &idx, OodPolicy::Quantile(0.9)).unwrap();
        assert_eq!(t.cutoff_distance, 0.25);
        assert!(!t.degenerate);
    }

    #[test]
    fn single_point_cannot_fit_threshold() {
        let d = DescriptorSet::from_rows(&[[0.0f32]]).unwrap();
        let idx = VectorIndex::Flat(FlatIndex::build(d.clone()).unwrap());
        assert!(fit_ood_threshold(&d, &idx, OodPolicy::Quantile(0.99)).is_err());
    }

    #[test]
    fn manual_cutoff_validation() {
        assert!(OodThreshold::manual(0.0).is_err());
        assert!(OodThreshold::manual(f64::NAN).is_err());
        assert!(OodThreshold::manual(1.0).unwrap().is_ood(1.5));
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[0.0, 10.0], 0.25), 2.5);
        assert_eq!(quantile(&[4.0], 0.7), 4.0);
    }
}
