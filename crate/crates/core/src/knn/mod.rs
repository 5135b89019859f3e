//! Exact and approximate k-nearest-neighbor search over latent descriptors.
//!
//! Distances are Euclidean. Internally everything is ranked on squared L2
//! computed in f32 with a fixed summation order; [`NeighborList`] reports the
//! square root as f64. Ties are broken by ascending sample id.

mod flat;
mod hnsw;
mod io;

use std::cmp::Ordering;

pub use flat::FlatIndex;
pub use hnsw::{HnswIndex, HnswParams};
pub use io::{
    deserialize_index, read_index, serialize_index, write_index, INDEX_MAGIC, INDEX_VERSION,
};

use crate::error::{Error, Result};
use crate::par;
use crate::trajlog::DescriptorSet;

/// Squared Euclidean distance. Eight independent accumulators let the
/// compiler vectorize; the reduction order is fixed so results are
/// reproducible across runs.
#[inline]
pub fn squared_l2(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        let d = x - y;
        tail += d * d;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// A scored candidate ordered by (distance, id).
#[derive(Clone, Copy, Debug)]
pub(crate) struct Scored {
    pub dist: f32,
    pub id: u32,
}

impl PartialEq for Scored {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scored {}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then_with(|| self.id.cmp(&other.id))
    }
}

/// The k nearest training samples of one query, nearest first.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborList {
    pub ids: Vec<usize>,
    pub distances: Vec<f64>,
}

impl NeighborList {
    pub(crate) fn from_sorted(hits: &[Scored]) -> Self {
        NeighborList {
            ids: hits.iter().map(|h| h.id as usize).collect(),
            distances: hits.iter().map(|h| f64::from(h.dist).sqrt()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Distance to the rank-1 neighbor, if any.
    pub fn nearest_distance(&self) -> Option<f64> {
        self.distances.first().copied()
    }
}

/// Either index family behind one query interface.
#[derive(Clone, Debug, PartialEq)]
pub enum VectorIndex {
    Flat(FlatIndex),
    Hnsw(HnswIndex),
}

impl VectorIndex {
    pub fn len(&self) -> usize {
        self.descriptors().num_samples()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.descriptors().dim()
    }

    pub fn descriptors(&self) -> &DescriptorSet {
        match self {
            VectorIndex::Flat(f) => f.descriptors(),
            VectorIndex::Hnsw(h) => h.descriptors(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            VectorIndex::Flat(_) => "flat",
            VectorIndex::Hnsw(_) => "hnsw",
        }
    }

    /// HNSW searches with `max(ef_search, k)`, the way FAISS treats a
    /// beam narrower than the requested neighbor count.
    pub fn search(&self, query: &[f32], k: usize) -> Result<NeighborList> {
        match self {
            VectorIndex::Flat(f) => f.search(query, k),
            VectorIndex::Hnsw(h) => h.search(query, k, h.params().ef_search.max(k)),
        }
    }
}

/// Searches every row of `queries` (row-major, `Q x D`). Output order matches
/// input order and does not depend on the thread count.
pub fn batch_search(index: &VectorIndex, queries: &[f32], k: usize) -> Result<Vec<NeighborList>> {
    let d = index.dim();
    if !queries.len().is_multiple_of(d) {
        return Err(Error::Dimension {
            expected: d,
            actual: queries.len() % d,
        });
    }
    let q = queries.len() / d;
    par::map_range(q, |i| index.search(&queries[i * d..(i + 1) * d], k))
        .into_iter()
        .collect()
}

pub(crate) fn check_query(expected: usize, query: &[f32], k: usize) -> Result<()> {
    if query.len() != expected {
        return Err(Error::Dimension {
            expected,
            actual: query.len(),
        });
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_l2_matches_naive_on_odd_lengths() {
        for len in [1usize, 7, 8, 9, 31, 32, 33] {
            let a: Vec<f32> = (0..len).map(|i| (i as f32 * 0.7).sin()).collect();
            let b: Vec<f32> = (0..len).map(|i| (i as f32 * 1.3).cos()).collect();
            let naive: f64 = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
                .sum();
            assert!((f64::from(squared_l2(&a, &b)) - naive).abs() < 1e-5 * naive.max(1.0));
        }
    }

    #[test]
    fn scored_orders_ties_by_id() {
        let mut v = [
            Scored { dist: 1.0, id: 5 },
            Scored { dist: 0.5, id: 9 },
            Scored { dist: 1.0, id: 2 },
        ];
        v.sort();
        let ids: Vec<u32> = v.iter().map(|s| s.id).collect();
        assert_eq!(ids, vec![9, 2, 5]);
    }
}
