use std::collections::BinaryHeap;

use super::{check_query, squared_l2, NeighborList, Scored};
use crate::error::{Error, Result};
use crate::trajlog::DescriptorSet;

/// Brute-force exact index.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatIndex {
    descriptors: DescriptorSet,
}

impl FlatIndex {
    pub fn build(descriptors: DescriptorSet) -> Result<Self> {
        if descriptors.is_empty() {
            return Err(Error::Empty("cannot index an empty descriptor set"));
        }
        if descriptors.len() > u32::MAX as usize {
            return Err(Error::invalid("index supports at most 2^32 - 1 vectors"));
        }
        Ok(FlatIndex { descriptors })
    }

    pub fn descriptors(&self) -> &DescriptorSet {
        &self.descriptors
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    /// Exact k nearest neighbors; `k > N` returns all N.
    pub fn search(&self, query: &[f32], k: usize) -> Result<NeighborList> {
        check_query(self.descriptors.dim(), query, k)?;
        let k = k.min(self.len());
        // Max-heap holding the k best seen so far; its top is the worst of them.
        let mut heap: BinaryHeap<Scored> = BinaryHeap::with_capacity(k + 1);
        for (id, v) in self.descriptors.rows().enumerate() {
            let cand = Scored {
                dist: squared_l2(query, v),
                id: id as u32,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().expect("k >= 1") {
                heap.pop();
                heap.push(cand);
            }
        }
        Ok(NeighborList::from_sorted(&heap.into_sorted_vec()))
    }
}
