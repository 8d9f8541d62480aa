//! Snap generated embedding rows back to concrete locations (Eq. 6).
//!
//! The matcher is an exact nearest-neighbour search: the k-d tree is an
//! optimization, never an approximation, and distance ties always resolve to
//! the smallest location index. Queries and stored embeddings live in the
//! standardized space the diffusion model was trained in.

use ndarray::Array2;

use crate::autoencoder::AutoencoderParams;
use crate::codec::{location_embeddings, EmbeddingSequence, Trajectory};
use crate::diffusion::StandardizationStats;
use crate::error::{Error, Result};
use crate::features::FeatureTable;
use crate::{EMBED_DIM, SLOT_COUNT};

/// Below this many locations a linear scan beats the tree; above it we build
/// one. Either path returns bit-identical answers.
const BRUTE_THRESHOLD: usize = 64;
const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum KdNode {
    Leaf {
        ids: Vec<u32>,
    },
    Inner {
        axis: usize,
        split: f64,
        left: usize,
        right: usize,
    },
}

/// Immutable exact-NN index over the standardized location embeddings.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    emb: Array2<f64>,
    nodes: Vec<KdNode>,
    root: Option<usize>,
}

impl EmbeddingIndex {
    /// Build from rows that are already in the standardized embedding space.
    pub fn from_standardized(emb: Array2<f64>) -> Result<Self> {
        let m = emb.dim().0;
        if m == 0 {
            return Err(Error::data("embedding index needs at least one location"));
        }
        if emb.dim().1 != EMBED_DIM {
            return Err(Error::data(format!("embedding rows must be {EMBED_DIM}-dim, got {}", emb.dim().1)));
        }
        if emb.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("embedding index input has non-finite entries"));
        }
        let mut idx = EmbeddingIndex { emb, nodes: Vec::new(), root: None };
        if m >= BRUTE_THRESHOLD {
            let mut ids: Vec<u32> = (0..m as u32).collect();
            idx.root = Some(idx.build(&mut ids));
        }
        Ok(idx)
    }

    /// Number of indexed locations.
    pub fn len(&self) -> usize {
        self.emb.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn build(&mut self, ids: &mut [u32]) -> usize {
        if ids.len() <= LEAF_SIZE {
            let node = KdNode::Leaf { ids: ids.to_vec() };
            self.nodes.push(node);
            return self.nodes.len() - 1;
        }
        // split on the axis with the widest spread for a balanced tree
        let mut axis = 0;
        let mut best_spread = -1.0;
        for a in 0..EMBED_DIM {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for &id in ids.iter() {
                let v = self.emb[(id as usize, a)];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            if hi - lo > best_spread {
                best_spread = hi - lo;
                axis = a;
            }
        }
        ids.sort_by(|&a, &b| {
            self.emb[(a as usize, axis)]
                .total_cmp(&self.emb[(b as usize, axis)])
                .then(a.cmp(&b))
        });
        let mid = ids.len() / 2;
        let split = self.emb[(ids[mid] as usize, axis)];
        let (left_ids, right_ids) = ids.split_at_mut(mid);
        let left = self.build(left_ids);
        let right = self.build(right_ids);
        self.nodes.push(KdNode::Inner { axis, split, left, right });
        self.nodes.len() - 1
    }

    fn consider(&self, q: &[f64], id: u32, best: &mut (f64, u32)) {
        let row = self.emb.row(id as usize);
        let mut d2 = 0.0;
        for (a, &v) in row.iter().enumerate() {
            let d = q[a] - v;
            d2 += d * d;
        }
        if d2 < best.0 || (d2 == best.0 && id < best.1) {
            *best = (d2, id);
        }
    }

    fn visit(&self, node: usize, q: &[f64], best: &mut (f64, u32)) {
        match &self.nodes[node] {
            KdNode::Leaf { ids } => {
                for &id in ids {
                    self.consider(q, id, best);
                }
            }
            KdNode::Inner { axis, split, left, right } => {
                let diff = q[*axis] - split;
                let (near, far) = if diff < 0.0 { (*left, *right) } else { (*right, *left) };
                self.visit(near, q, best);
                // Strict inequality: an equal-distance point behind the plane
                // might carry a smaller index, so never prune the boundary.
                if diff * diff <= best.0 {
                    self.visit(far, q, best);
                }
            }
        }
    }

    fn nearest_unchecked(&self, q: &[f64]) -> u32 {
        let mut best = (f64::INFINITY, u32::MAX);
        match self.root {
            Some(root) => self.visit(root, q, &mut best),
            None => {
                for id in 0..self.len() as u32 {
                    self.consider(q, id, &mut best);
                }
            }
        }
        best.1
    }
}

/// Encode every location, standardize with the training stats, and index.
pub fn build_embedding_index(
    table: &FeatureTable,
    params: &AutoencoderParams,
    stats: &StandardizationStats,
) -> Result<EmbeddingIndex> {
    if table.len() == 0 {
        return Err(Error::data("cannot index an empty feature table"));
    }
    let mut emb = location_embeddings(params, table);
    stats.standardize_inplace(&mut emb);
    EmbeddingIndex::from_standardized(emb)
}

/// Exact argmin of squared Euclidean distance; ties go to the smallest index.
pub fn nearest_location(idx: &EmbeddingIndex, q: &[f64]) -> Result<u32> {
    if q.len() != EMBED_DIM {
        return Err(Error::data(format!("query must be {EMBED_DIM}-dim, got {}", q.len())));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("non-finite nearest-neighbour query"));
    }
    Ok(idx.nearest_unchecked(q))
}

/// Decode one generated day: token k = (start_slot + k, nearest location of
/// row k). The caller assigns `user_id`; it is left empty here.
pub fn decode_sequence(idx: &EmbeddingIndex, y: &EmbeddingSequence, start_slot: u8) -> Result<Trajectory> {
    let rows = y.x.dim().0;
    if start_slot as usize + rows > SLOT_COUNT {
        return Err(Error::data(format!(
            "{rows} rows starting at slot {start_slot} overrun the {SLOT_COUNT}-slot day"
        )));
    }
    let mut tokens = Vec::with_capacity(rows);
    for (k, row) in y.x.rows().into_iter().enumerate() {
        let q = row.as_slice().ok_or_else(|| Error::data("non-contiguous embedding row"))?;
        let loc = nearest_location(idx, q)?;
        tokens.push((start_slot + k as u8, loc));
    }
    Ok(Trajectory { user_id: String::new(), tokens, day_of_week: y.day_of_week })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::embed_day;
    use crate::codec::DaySequence;
    use crate::rng::{stream, Domain};
    use ndarray::Array2;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_emb(m: usize, seed: u64) -> Array2<f64> {
        let mut rng = stream(seed, Domain::FiniteDiff, 7);
        let mut e = Array2::zeros((m, EMBED_DIM));
        e.mapv_inplace(|_| rng.sample(StandardNormal));
        e
    }

    fn brute(emb: &Array2<f64>, q: &[f64]) -> u32 {
        let mut best = (f64::INFINITY, u32::MAX);
        for (i, row) in emb.rows().into_iter().enumerate() {
            let d2: f64 = row.iter().zip(q).map(|(&v, &w)| (v - w) * (v - w)).sum();
            if d2 < best.0 || (d2 == best.0 && (i as u32) < best.1) {
                best = (d2, i as u32);
            }
        }
        best.1
    }

    #[test]
    fn stored_embedding_maps_to_its_own_index() {
        let emb = random_emb(40, 1);
        let idx = EmbeddingIndex::from_standardized(emb.clone()).unwrap();
        for i in 0..40 {
            let q: Vec<f64> = emb.row(i).to_vec();
            assert_eq!(nearest_location(&idx, &q).unwrap(), i as u32);
        }
    }

    #[test]
    fn equidistant_tie_breaks_to_smaller_index() {
        let mut emb = Array2::zeros((2, EMBED_DIM));
        emb[(0, 0)] = 1.0;
        emb[(1, 0)] = -1.0;
        let idx = EmbeddingIndex::from_standardized(emb).unwrap();
        assert_eq!(nearest_location(&idx, &[0.0; EMBED_DIM]).unwrap(), 0);
    }

    #[test]
    fn tie_break_survives_the_tree_path() {
        // 128 points forces the tree; a duplicated far-apart pair must still
        // resolve to the smaller id.
        let mut emb = random_emb(128, 2);
        let dup: Vec<f64> = emb.row(100).to_vec();
        emb.row_mut(20).assign(&ndarray::ArrayView1::from(&dup[..]));
        let idx = EmbeddingIndex::from_standardized(emb).unwrap();
        assert_eq!(nearest_location(&idx, &dup).unwrap(), 20);
    }

    #[test]
    fn tree_matches_brute_force_on_bulk_queries() {
        let emb = random_emb(1000, 3);
        let idx = EmbeddingIndex::from_standardized(emb.clone()).unwrap();
        assert!(idx.root.is_some(), "1000 points should build a tree");
        let mut rng = stream(4, Domain::FiniteDiff, 8);
        let mut agree = 0usize;
        let n = 10_000;
        for _ in 0..n {
            let q: Vec<f64> = (0..EMBED_DIM).map(|_| rng.sample::<f64, _>(StandardNormal) * 1.5).collect();
            if nearest_location(&idx, &q).unwrap() == brute(&emb, &q) {
                agree += 1;
            }
        }
        assert_eq!(agree, n, "tree disagreed with brute force on {} queries", n - agree);
    }

    #[test]
    fn single_location_index_answers_zero() {
        let idx = EmbeddingIndex::from_standardized(random_emb(1, 5)).unwrap();
        assert_eq!(nearest_location(&idx, &[9.0; EMBED_DIM]).unwrap(), 0);
    }

    #[test]
    fn rejects_bad_queries_and_empty_input() {
        let idx = EmbeddingIndex::from_standardized(random_emb(3, 6)).unwrap();
        assert!(nearest_location(&idx, &[f64::NAN; EMBED_DIM]).is_err());
        assert!(nearest_location(&idx, &[0.0; 4]).is_err());
        assert!(EmbeddingIndex::from_standardized(Array2::zeros((0, EMBED_DIM))).is_err());
    }

    #[test]
    fn perturbation_below_half_gap_never_flips_the_answer() {
        let emb = random_emb(200, 7);
        let idx = EmbeddingIndex::from_standardized(emb.clone()).unwrap();
        let mut rng = stream(8, Domain::FiniteDiff, 9);
        for _ in 0..200 {
            let q: Vec<f64> = (0..EMBED_DIM).map(|_| rng.sample(StandardNormal)).collect();
            let win = brute(&emb, &q);
            // distance to winner and runner-up
            let mut d: Vec<f64> = emb
                .rows()
                .into_iter()
                .map(|r| r.iter().zip(&q).map(|(&v, &w)| (v - w) * (v - w)).sum::<f64>())
                .collect();
            d.sort_by(f64::total_cmp);
            let gap = d[1].sqrt() - d[0].sqrt();
            if gap <= 1e-9 {
                continue;
            }
            let mut delta: Vec<f64> = (0..EMBED_DIM).map(|_| rng.sample(StandardNormal)).collect();
            let norm = delta.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = 0.49 * gap / norm;
            for (dq, dv) in delta.iter_mut().zip(&q) {
                *dq = dv + *dq * scale;
            }
            assert_eq!(nearest_location(&idx, &delta).unwrap(), win);
        }
    }

    #[test]
    fn decode_recovers_unique_locations_exactly() {
        // idempotence: embed a real day with unique embeddings, then decode
        let emb = random_emb(30, 9);
        let idx = EmbeddingIndex::from_standardized(emb.clone()).unwrap();
        let locations: Vec<u32> = (0..SLOT_COUNT as u32).map(|k| (k * 7) % 30).collect();
        let day = DaySequence { locations: locations.clone(), day_of_week: 3 };
        let y = embed_day(&day, &emb.view()).unwrap();
        let t = decode_sequence(&idx, &y, 0).unwrap();
        assert_eq!(t.tokens.len(), SLOT_COUNT);
        assert_eq!(t.day_of_week, 3);
        let decoded: Vec<u32> = t.tokens.iter().map(|&(_, l)| l).collect();
        assert_eq!(decoded, locations);
        let slots: Vec<u8> = t.tokens.iter().map(|&(s, _)| s).collect();
        assert_eq!(slots, (0..SLOT_COUNT as u8).collect::<Vec<_>>());
    }

    #[test]
    fn decode_constant_sequence_hits_one_location() {
        let emb = random_emb(10, 10);
        let idx = EmbeddingIndex::from_standardized(emb.clone()).unwrap();
        let mut x = Array2::zeros((SLOT_COUNT, EMBED_DIM));
        for mut row in x.rows_mut() {
            row.assign(&emb.row(5));
        }
        let t = decode_sequence(&idx, &EmbeddingSequence { x, day_of_week: 0 }, 0).unwrap();
        assert!(t.tokens.iter().all(|&(_, l)| l == 5));
        let t2 = decode_sequence(
            &idx,
            &EmbeddingSequence {
                x: {
                    let mut x = Array2::zeros((SLOT_COUNT, EMBED_DIM));
                    for mut row in x.rows_mut() {
                        row.assign(&emb.row(5));
                    }
                    x
                },
                day_of_week: 0,
            },
            0,
        )
        .unwrap();
        assert_eq!(t.tokens, t2.tokens);
    }

    #[test]
    fn rebuild_from_identical_inputs_is_identical() {
        let emb = random_emb(300, 11);
        let a = EmbeddingIndex::from_standardized(emb.clone()).unwrap();
        let b = EmbeddingIndex::from_standardized(emb).unwrap();
        assert_eq!(a.emb, b.emb);
        let mut rng = stream(12, Domain::FiniteDiff, 10);
        for _ in 0..100 {
            let q: Vec<f64> = (0..EMBED_DIM).map(|_| rng.sample(StandardNormal)).collect();
            assert_eq!(a.nearest_unchecked(&q), b.nearest_unchecked(&q));
        }
    }
}
