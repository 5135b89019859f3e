//! Hierarchical navigable small-world graph.
//!
//! Construction follows Malkov & Yashunin: geometric level assignment with
//! factor `1/ln(M)`, beam search of width `ef_construction` per layer, and the
//! diversity heuristic for choosing and shrinking neighbor lists. Nodes keep
//! at most `M` links on upper layers and `2M` on layer 0.

use std::cell::RefCell;
use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use super::{check_query, squared_l2, NeighborList, Scored};
use crate::error::{Error, Result};
use crate::trajlog::DescriptorSet;

pub(crate) const MAX_LEVEL: usize = 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HnswParams {
    /// Links per node on upper layers; layer 0 allows twice as many.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            m: 32,
            ef_construction: 40,
            ef_search: 16,
        }
    }
}

impl HnswParams {
    pub fn capacity(&self, layer: usize) -> usize {
        if layer == 0 {
            2 * self.m
        } else {
            self.m
        }
    }

    fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::invalid("HNSW needs M >= 2"));
        }
        if self.ef_construction == 0 || self.ef_search == 0 {
            return Err(Error::invalid(
                "ef_construction and ef_search must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HnswIndex {
    pub(super) params: HnswParams,
    pub(super) seed: u64,
    pub(super) descriptors: DescriptorSet,
    pub(super) levels: Vec<u8>,
    /// `links[node][layer]`, present for layers `0..=levels[node]`.
    pub(super) links: Vec<Vec<Vec<u32>>>,
    pub(super) entry_point: u32,
    pub(super) max_level: usize,
}

/// Generation-stamped visited set; resetting is O(1).
struct Visited {
    marks: Vec<u32>,
    stamp: u32,
}

impl Visited {
    fn new() -> Self {
        Visited {
            marks: Vec::new(),
            stamp: 0,
        }
    }

    fn reset(&mut self, n: usize) {
        if self.marks.len() < n {
            self.marks.resize(n, 0);
        }
        self.stamp = self.stamp.wrapping_add(1);
        if self.stamp == 0 {
            self.marks.iter_mut().for_each(|m| *m = 0);
            self.stamp = 1;
        }
    }

    /// Returns true when `id` had not been seen since the last reset.
    fn insert(&mut self, id: u32) -> bool {
        let slot = &mut self.marks[id as usize];
        if *slot == self.stamp {
            false
        } else {
            *slot = self.stamp;
            true
        }
    }
}

thread_local! {
    static VISITED: RefCell<Visited> = RefCell::new(Visited::new());
}

fn search_layer(
    data: &DescriptorSet,
    links: &[Vec<Vec<u32>>],
    query: &[f32],
    entry: &[Scored],
    ef: usize,
    layer: usize,
    visited: &mut Visited,
) -> Vec<Scored> {
    visited.reset(data.len());
    let mut candidates: BinaryHeap<Reverse<Scored>> = BinaryHeap::new();
    let mut results: BinaryHeap<Scored> = BinaryHeap::with_capacity(ef + 1);
    for &e in entry {
        if visited.insert(e.id) {
            candidates.push(Reverse(e));
            results.push(e);
            if results.len() > ef {
                results.pop();
            }
        }
    }
    while let Some(Reverse(current)) = candidates.pop() {
        // Stop only once the beam is full; with ef >= N this explores every
        // node reachable from the entry.
        if results.len() >= ef && current > *results.peek().expect("non-empty") {
            break;
        }
        for &nb in &links[current.id as usize][layer] {
            if !visited.insert(nb) {
                continue;
            }
            let cand = Scored {
                dist: squared_l2(query, data.row(nb as usize)),
                id: nb,
            };
            if results.len() < ef || cand < *results.peek().expect("non-empty") {
                candidates.push(Reverse(cand));
                results.push(cand);
                if results.len() > ef {
                    results.pop();
                }
            }
        }
    }
    results.into_sorted_vec()
}

/// Keeps a candidate only if it is closer to the base point than to every
/// neighbor already kept. `sorted` must be ascending by distance to the base.
fn select_neighbors(data: &DescriptorSet, sorted: &[Scored], m: usize) -> Vec<Scored> {
    let mut kept: Vec<Scored> = Vec::with_capacity(m);
    for &cand in sorted {
        if kept.len() >= m {
            break;
        }
        let v = data.row(cand.id as usize);
        let diverse = kept
            .iter()
            .all(|k| squared_l2(v, data.row(k.id as usize)) >= cand.dist);
        if diverse {
            kept.push(cand);
        }
    }
    kept
}

fn random_level(rng: &mut SplitMix64, level_mult: f64) -> usize {
    let u: f64 = rng.random();
    // 1 - u lies in (0, 1], so the log is finite.
    let level = (-(1.0 - u).ln() * level_mult).floor();
    (level as usize).min(MAX_LEVEL)
}

impl HnswIndex {
    /// Deterministic in `(descriptors, params, seed)`.
    pub fn build(descriptors: DescriptorSet, params: HnswParams, seed: u64) -> Result<Self> {
        params.validate()?;
        if descriptors.is_empty() {
            return Err(Error::Empty("cannot index an empty descriptor set"));
        }
        if descriptors.len() > u32::MAX as usize {
            return Err(Error::invalid("index supports at most 2^32 - 1 vectors"));
        }
        let n = descriptors.len();
        let mut index = HnswIndex {
            params,
            seed,
            descriptors,
            levels: Vec::with_capacity(n),
            links: Vec::with_capacity(n),
            entry_point: 0,
            max_level: 0,
        };
        let mut rng = SplitMix64::seed_from_u64(seed);
        let level_mult = 1.0 / (params.m as f64).ln();
        let mut visited = Visited::new();
        for id in 0..n {
            let level = random_level(&mut rng, level_mult);
            index.insert(id as u32, level, &mut visited);
        }
        index.repair_reachability();
        Ok(index)
    }

    fn insert(&mut self, id: u32, level: usize, visited: &mut Visited) {
        self.levels.push(level as u8);
        self.links.push(vec![Vec::new(); level + 1]);
        if id == 0 {
            self.entry_point = 0;
            self.max_level = level;
            return;
        }
        let query = self.descriptors.row(id as usize).to_vec();
        let ep = self.entry_point;
        let mut entry = vec![Scored {
            dist: squared_l2(&query, self.descriptors.row(ep as usize)),
            id: ep,
        }];
        for layer in (level + 1..=self.max_level).rev() {
            entry = search_layer(
                &self.descriptors,
                &self.links,
                &query,
                &entry,
                1,
                layer,
                visited,
            );
        }
        for layer in (0..=level.min(self.max_level)).rev() {
            let found = search_layer(
                &self.descriptors,
                &self.links,
                &query,
                &entry,
                self.params.ef_construction,
                layer,
                visited,
            );
            let chosen = select_neighbors(&self.descriptors, &found, self.params.m);
            self.links[id as usize][layer] = chosen.iter().map(|s| s.id).collect();
            for s in &chosen {
                self.connect(s.id, id, layer);
            }
            entry = found;
        }
        if level > self.max_level {
            self.entry_point = id;
            self.max_level = level;
        }
    }

    /// Adds `new` to the neighbor list of `node`, shrinking it with the
    /// selection heuristic when over capacity.
    fn connect(&mut self, node: u32, new: u32, layer: usize) {
        let cap = self.params.capacity(layer);
        let list = &self.links[node as usize][layer];
        if list.len() < cap {
            self.links[node as usize][layer].push(new);
            return;
        }
        let base = self.descriptors.row(node as usize);
        let mut cands: Vec<Scored> = list
            .iter()
            .chain(std::iter::once(&new))
            .map(|&id| Scored {
                dist: squared_l2(base, self.descriptors.row(id as usize)),
                id,
            })
            .collect();
        cands.sort_unstable();
        let kept = select_neighbors(&self.descriptors, &cands, cap);
        self.links[node as usize][layer] = kept.iter().map(|s| s.id).collect();
    }

    fn reachable_mask(&self) -> Vec<bool> {
        let mut seen = vec![false; self.len()];
        self.mark_reachable(&mut seen, self.entry_point);
        seen
    }

    fn mark_reachable(&self, seen: &mut [bool], start: u32) {
        if seen[start as usize] {
            return;
        }
        let mut queue = VecDeque::from([start]);
        seen[start as usize] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &self.links[u as usize][0] {
                if !seen[v as usize] {
                    seen[v as usize] = true;
                    queue.push_back(v);
                }
            }
        }
    }

    /// Pruning can leave a node with no incoming layer-0 link. Each orphan
    /// gets a link from its nearest reachable node that has spare capacity.
    /// Returns the number of links added.
    fn repair_reachability(&mut self) -> usize {
        let n = self.len();
        let cap = self.params.capacity(0);
        let mut reach = self.reachable_mask();
        let mut added = 0;
        for u in 0..n {
            if reach[u] {
                continue;
            }
            let target = self.descriptors.row(u);
            let donor = (0..n)
                .filter(|&v| reach[v] && self.links[v][0].len() < cap)
                .map(|v| Scored {
                    dist: squared_l2(target, self.descriptors.row(v)),
                    id: v as u32,
                })
                .min();
            let (donor, evicted) = match donor {
                Some(d) => (d.id as usize, false),
                None => {
                    // Every reachable node is full: swap out the nearest
                    // node's last link and re-check from scratch.
                    let nearest = (0..n)
                        .filter(|&v| reach[v])
                        .map(|v| Scored {
                            dist: squared_l2(target, self.descriptors.row(v)),
                            id: v as u32,
                        })
                        .min()
                        .expect("entry point is reachable")
                        .id as usize;
                    self.links[nearest][0].pop();
                    (nearest, true)
                }
            };
            self.links[donor][0].push(u as u32);
            added += 1;
            if evicted {
                reach = self.reachable_mask();
            } else {
                self.mark_reachable(&mut reach, u as u32);
            }
        }
        added
    }

    /// Approximate k nearest neighbors with a layer-0 beam of width `ef_search`.
    pub fn search(&self, query: &[f32], k: usize, ef_search: usize) -> Result<NeighborList> {
        check_query(self.descriptors.dim(), query, k)?;
        if ef_search < k {
            return Err(Error::invalid(format!(
                "ef_search {ef_search} is smaller than k {k}"
            )));
        }
        let k = k.min(self.len());
        VISITED.with(|cell| {
            let mut visited = cell.borrow_mut();
            let ep = self.entry_point;
            let mut entry = vec![Scored {
                dist: squared_l2(query, self.descriptors.row(ep as usize)),
                id: ep,
            }];
            for layer in (1..=self.max_level).rev() {
                entry = search_layer(
                    &self.descriptors,
                    &self.links,
                    query,
                    &entry,
                    1,
                    layer,
                    &mut visited,
                );
            }
            let found = search_layer(
                &self.descriptors,
                &self.links,
                query,
                &entry,
                ef_search,
                0,
                &mut visited,
            );
            Ok(NeighborList::from_sorted(&found[..k.min(found.len())]))
        })
    }

    pub fn params(&self) -> HnswParams {
        self.params
    }

    pub fn set_ef_search(&mut self, ef_search: usize) {
        self.params.ef_search = ef_search.max(1);
    }

    pub fn seed(&self) -> u64 {
        self.seed
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

    pub fn entry_point(&self) -> usize {
        self.entry_point as usize
    }

    pub fn max_level(&self) -> usize {
        self.max_level
    }

    pub fn level(&self, id: usize) -> usize {
        self.levels[id] as usize
    }

    pub fn neighbors(&self, id: usize, layer: usize) -> &[u32] {
        &self.links[id][layer]
    }

    /// Number of nodes reachable from the entry point through layer-0 links.
    pub fn reachable_count(&self) -> usize {
        self.reachable_mask().iter().filter(|&&r| r).count()
    }

    /// Structural checks shared by tests and the deserializer.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let bad = |m: String| Error::Format(m);
        if self.levels.len() != n || self.links.len() != n {
            return Err(bad("node tables disagree with descriptor count".into()));
        }
        if self.entry_point as usize >= n
            || self.levels[self.entry_point as usize] as usize != self.max_level
        {
            return Err(bad("entry point is not a top-level node".into()));
        }
        for (u, layers) in self.links.iter().enumerate() {
            if layers.len() != self.levels[u] as usize + 1 {
                return Err(bad(format!("node {u} has wrong layer count")));
            }
            for (layer, list) in layers.iter().enumerate() {
                if list.len() > self.params.capacity(layer) {
                    return Err(bad(format!("node {u} exceeds degree cap on layer {layer}")));
                }
                for &v in list {
                    if v as usize >= n || (self.levels[v as usize] as usize) < layer {
                        return Err(bad(format!(
                            "node {u} links to invalid node {v} on layer {layer}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::FlatIndex;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_set(n: usize, d: usize, seed: u64) -> DescriptorSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..n * d)
            .map(|_| rng.random::<f32>() * 2.0 - 1.0)
            .collect();
        DescriptorSet::new(n, d, v).unwrap()
    }

    #[test]
    fn single_node() {
        let d = DescriptorSet::from_rows(&[[1.0f32, 2.0]]).unwrap();
        let idx = HnswIndex::build(d, HnswParams::default(), 7).unwrap();
        let hits = idx.search(&[-5.0, 9.0], 3, 16).unwrap();
        assert_eq!(hits.ids, vec![0]);
        idx.validate().unwrap();
    }

    #[test]
    fn empty_set_is_rejected() {
        let d = DescriptorSet::new(0, 4, vec![]).unwrap();
        assert!(HnswIndex::build(d, HnswParams::default(), 0).is_err());
    }

    #[test]
    fn tiny_set_with_wide_beam_is_exact() {
        let data = random_set(10, 8, 3);
        let flat = FlatIndex::build(data.clone()).unwrap();
        let idx = HnswIndex::build(data.clone(), HnswParams::default(), 11).unwrap();
        let queries = random_set(50, 8, 4);
        for q in queries.rows() {
            assert_eq!(idx.search(q, 10, 10).unwrap(), flat.search(q, 10).unwrap());
        }
    }

    #[test]
    fn stored_point_is_its_own_nearest() {
        let data = random_set(500, 16, 5);
        let idx = HnswIndex::build(data.clone(), HnswParams::default(), 1).unwrap();
        for i in (0..500).step_by(37) {
            let hits = idx.search(data.row(i), 1, 16).unwrap();
            assert_eq!(hits.distances[0], 0.0);
            assert_eq!(hits.ids[0], i);
        }
    }

    #[test]
    fn degree_caps_and_reachability_hold() {
        let params = HnswParams {
            m: 4,
            ef_construction: 8,
            ef_search: 8,
        };
        let idx = HnswIndex::build(random_set(2000, 8, 9), params, 2).unwrap();
        idx.validate().unwrap();
        assert!(idx.max_level() >= 1);
        assert_eq!(idx.reachable_count(), 2000);
    }

    #[test]
    fn ef_smaller_than_k_is_an_error() {
        let idx = HnswIndex::build(random_set(20, 4, 1), HnswParams::default(), 0).unwrap();
        assert!(matches!(
            idx.search(&[0.0; 4], 10, 5),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            idx.search(&[0.0; 3], 1, 5),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn same_seed_same_graph() {
        let data = random_set(300, 8, 12);
        let a = HnswIndex::build(data.clone(), HnswParams::default(), 99).unwrap();
        let b = HnswIndex::build(data.clone(), HnswParams::default(), 99).unwrap();
        assert_eq!(a, b);
        let c = HnswIndex::build(data, HnswParams::default(), 100).unwrap();
        assert_ne!(a.levels, c.levels);
    }
}
