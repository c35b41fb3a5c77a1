//! Top-K retrieval of analogous training sequences by squared Frobenius
//! distance between (temporally differenced) context features.

use alloc::vec::Vec;

use crate::disentangle::{FeatureExtractor, MotionFeatureSeq};
use crate::dynamics::{Dataset, Sequence, Split};
use crate::error::{Error, Result};
use crate::rng::{stream, subset, Domain};
use crate::tensor::Tensor;

/// First-order difference along the temporal axis: row t of the output is
/// frame t+1 minus frame t. A single frame yields an empty difference; the
/// retrieval path skips differencing in that case and matches raw features.
pub fn temporal_difference(feats: &Tensor) -> Result<Tensor> {
    let t_len = feats.rows();
    if t_len < 1 {
        return Err(Error::TooFewFrames { got: 0, need: 1 });
    }
    let c = feats.cols();
    let mut out = Tensor::zeros(t_len - 1, c);
    for t in 0..t_len - 1 {
        for k in 0..c {
            out.set(t, k, feats.at(t + 1, k) - feats.at(t, k));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct IndexEntry {
    pub id: u64,
    /// Context-window features (M rows).
    pub context: Tensor,
    /// Full-horizon features (M + H rows), kept for guidance.
    pub full: Tensor,
    /// Precomputed retrieval key: differenced context when enabled.
    key: Tensor,
}

/// In-memory feature index over a sequence pool.
#[derive(Debug, Clone)]
pub struct FeatureIndex {
    entries: Vec<IndexEntry>,
    pub use_diff: bool,
    m_context: usize,
    full_len: usize,
}

impl FeatureIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn context_len(&self) -> usize {
        self.m_context
    }

    pub fn full_len(&self) -> usize {
        self.full_len
    }

    /// Whether keys are differenced (requires a context of at least two frames).
    pub fn key_differenced(&self) -> bool {
        self.use_diff && self.m_context >= 2
    }

    fn query_key(&self, query: &MotionFeatureSeq) -> Result<Tensor> {
        if query.len() != self.m_context {
            return Err(Error::TooFewFrames {
                got: query.len(),
                need: self.m_context,
            });
        }
        if self.key_differenced() {
            temporal_difference(&query.feats)
        } else {
            Ok(query.feats.clone())
        }
    }
}

/// The K retrieved example sequences for one query, distances ascending.
#[derive(Debug, Clone)]
pub struct ExampleSet {
    pub ids: Vec<u64>,
    /// Full-horizon features of each example, aligned per timestep.
    pub features: Vec<Tensor>,
    pub distances: Vec<f64>,
}

impl ExampleSet {
    pub fn k(&self) -> usize {
        self.ids.len()
    }

    /// Feature vectors of all K examples at one timestep.
    pub fn frames_at(&self, t: usize) -> Vec<&[f64]> {
        self.features.iter().map(|f| f.row(t)).collect()
    }
}

/// Build the index over the training split, with the context window as key.
pub fn build_index(
    dataset: &Dataset,
    extractor: &FeatureExtractor,
    use_diff: bool,
) -> Result<FeatureIndex> {
    let seqs: Vec<&Sequence> = dataset.train().collect();
    build_index_over(&seqs, dataset.spec.m_context, use_diff, extractor)
}

/// Build an index over one split.
pub fn build_index_split(
    dataset: &Dataset,
    split: Split,
    extractor: &FeatureExtractor,
    use_diff: bool,
) -> Result<FeatureIndex> {
    build_index_where(dataset, extractor, use_diff, |s| s.split == split)
}

/// Build an index over an arbitrary pool (the unseen-class protocol indexes
/// the held-out test pool instead of the training split).
pub fn build_index_where(
    dataset: &Dataset,
    extractor: &FeatureExtractor,
    use_diff: bool,
    keep: impl Fn(&Sequence) -> bool,
) -> Result<FeatureIndex> {
    let seqs: Vec<&Sequence> = dataset.sequences.iter().filter(|s| keep(s)).collect();
    build_index_over(&seqs, dataset.spec.m_context, use_diff, extractor)
}

fn build_index_over(
    seqs: &[&Sequence],
    m_context: usize,
    use_diff: bool,
    extractor: &FeatureExtractor,
) -> Result<FeatureIndex> {
    if seqs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let full_len = seqs[0].obs.rows();
    let mut entries = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let feats = extractor.extract(seq);
        let context = feats.feats.slice_rows(0, m_context);
        let key = if use_diff && m_context >= 2 {
            temporal_difference(&context)?
        } else {
            context.clone()
        };
        entries.push(IndexEntry {
            id: seq.id,
            context,
            full: feats.feats,
            key,
        });
    }
    Ok(FeatureIndex {
        entries,
        use_diff,
        m_context,
        full_len,
    })
}

fn gather(index: &FeatureIndex, picks: &[(usize, f64)]) -> ExampleSet {
    ExampleSet {
        ids: picks.iter().map(|&(i, _)| index.entries[i].id).collect(),
        features: picks
            .iter()
            .map(|&(i, _)| index.entries[i].full.clone())
            .collect(),
        distances: picks.iter().map(|&(_, d)| d).collect(),
    }
}

/// Top-K by squared Frobenius distance on the (differenced) context
/// features. The query sequence itself is excluded; ties break toward the
/// smaller sequence id. Selection uses a partial sort: an average-case
/// linear select of the K nearest followed by an ordering pass.
pub fn retrieve(
    query: &MotionFeatureSeq,
    index: &FeatureIndex,
    k: usize,
    exclude_id: u64,
) -> Result<ExampleSet> {
    let key = index.query_key(query)?;
    let mut scored: Vec<(usize, f64)> = index
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.id != exclude_id)
        .map(|(i, e)| (i, e.key.sq_distance(&key)))
        .collect();
    if k == 0 || k > scored.len() {
        return Err(Error::KTooLarge {
            k,
            pool: scored.len(),
        });
    }
    let by_dist_then_id = |a: &(usize, f64), b: &(usize, f64)| {
        a.1.total_cmp(&b.1)
            .then(index.entries[a.0].id.cmp(&index.entries[b.0].id))
    };
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, by_dist_then_id);
        scored.truncate(k);
    }
    scored.sort_by(by_dist_then_id);
    Ok(gather(index, &scored))
}

/// Uniform K-subset of the pool without replacement, excluding the query.
/// Distances to the query are still computed and reported; the result is
/// ordered like `retrieve` output for interchangeability.
pub fn retrieve_random(
    query: &MotionFeatureSeq,
    index: &FeatureIndex,
    k: usize,
    seed: u64,
    exclude_id: u64,
) -> Result<ExampleSet> {
    let key = index.query_key(query)?;
    let candidates: Vec<usize> = (0..index.entries.len())
        .filter(|&i| index.entries[i].id != exclude_id)
        .collect();
    if k == 0 || k > candidates.len() {
        return Err(Error::KTooLarge {
            k,
            pool: candidates.len(),
        });
    }
    let mut rng = stream(seed, Domain::RandomRetrieval, exclude_id);
    let picked = subset(&mut rng, &candidates, k);
    let mut scored: Vec<(usize, f64)> = picked
        .into_iter()
        .map(|i| (i, index.entries[i].key.sq_distance(&key)))
        .collect();
    scored.sort_by(|a, b| {
        a.1.total_cmp(&b.1)
            .then(index.entries[a.0].id.cmp(&index.entries[b.0].id))
    });
    Ok(gather(index, &scored))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{generate, DatasetSpec, GeneratorKind};

    fn dataset(count: usize) -> Dataset {
        generate(&DatasetSpec {
            kind: GeneratorKind::StochBounce,
            count,
            test_count: count / 10,
            m_context: 5,
            horizon: 10,
            d_obs: 2,
            nuisance_dims: 0,
            seed: 21,
            num_modes: 0,
            held_out_modes: Vec::new(),
        })
        .unwrap()
    }

    fn extractor() -> FeatureExtractor {
        FeatureExtractor::GroundTruth { d_obs: 2 }
    }

    #[test]
    fn difference_basics() {
        let f = Tensor::from_rows(&[&[1.0], &[2.0], &[4.0]]);
        let d = temporal_difference(&f).unwrap();
        assert_eq!(d.data(), &[1.0, 2.0]);

        let constant = Tensor::from_rows(&[&[3.0, 1.0], &[3.0, 1.0], &[3.0, 1.0]]);
        let d = temporal_difference(&constant).unwrap();
        assert!(d.data().iter().all(|&x| x == 0.0));

        // linear in t -> constant difference rows
        let linear = Tensor::from_rows(&[&[0.0, 1.0], &[0.5, 2.0], &[1.0, 3.0]]);
        let d = temporal_difference(&linear).unwrap();
        assert_eq!(d.row(0), d.row(1));

        let single = Tensor::from_rows(&[&[5.0, 6.0]]);
        let d = temporal_difference(&single).unwrap();
        assert_eq!(d.rows(), 0);
    }

    #[test]
    fn index_covers_training_split() {
        let data = dataset(40);
        let idx = build_index(&data, &extractor(), true).unwrap();
        assert_eq!(idx.len(), data.train().count());
        // entry context features equal extractor output on the context window
        let ex = extractor();
        for e in idx.entries() {
            let seq = data.by_id(e.id).unwrap();
            let feats = ex.extract(seq);
            assert_eq!(e.context.data(), feats.feats.slice_rows(0, 5).data());
            assert_eq!(e.full.data(), feats.feats.data());
        }
    }

    #[test]
    fn rebuild_is_identical() {
        let data = dataset(30);
        let a = build_index(&data, &extractor(), true).unwrap();
        let b = build_index(&data, &extractor(), true).unwrap();
        for (x, y) in a.entries().iter().zip(b.entries()) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.key.data(), y.key.data());
        }
    }

    #[test]
    fn self_query_is_excluded() {
        let data = dataset(30);
        let idx = build_index(&data, &extractor(), true).unwrap();
        let ex = extractor();
        let seq = data.by_id(7).unwrap();
        let query = ex.extract(seq).window(0, 5);
        let got = retrieve(&query, &idx, 5, 7).unwrap();
        assert!(!got.ids.contains(&7));
        assert!(got.distances.windows(2).all(|w| w[0] <= w[1]));
        assert!(got.distances[0] > 0.0);
    }

    #[test]
    fn nearest_of_two() {
        let data = dataset(30);
        let mut idx = build_index(&data, &extractor(), false).unwrap();
        idx.entries.truncate(2);
        // craft a query equal to entry 1's context: distance 0 beats entry 0
        let q = MotionFeatureSeq {
            feats: idx.entries[1].context.clone(),
            source_id: 999,
        };
        let got = retrieve(&q, &idx, 1, 999).unwrap();
        assert_eq!(got.ids, alloc::vec![idx.entries[1].id]);
        assert_eq!(got.distances[0], 0.0);
    }

    #[test]
    fn k_at_pool_size_errors() {
        let data = dataset(12);
        let idx = build_index(&data, &extractor(), true).unwrap();
        let ex = extractor();
        let seq = data.by_id(0).unwrap();
        let query = ex.extract(seq).window(0, 5);
        let pool = idx.len() - 1; // self excluded
        assert!(retrieve(&query, &idx, pool, 0).is_ok());
        let err = retrieve(&query, &idx, pool + 1, 0).unwrap_err();
        assert!(matches!(err, Error::KTooLarge { .. }));
    }

    #[test]
    fn random_retrieval_reproducible_and_excluding() {
        let data = dataset(40);
        let idx = build_index(&data, &extractor(), true).unwrap();
        let ex = extractor();
        let seq = data.by_id(3).unwrap();
        let query = ex.extract(seq).window(0, 5);
        let a = retrieve_random(&query, &idx, 5, 77, 3).unwrap();
        let b = retrieve_random(&query, &idx, 5, 77, 3).unwrap();
        assert_eq!(a.ids, b.ids);
        assert!(!a.ids.contains(&3));
        let c = retrieve_random(&query, &idx, 5, 78, 3).unwrap();
        assert_ne!(a.ids, c.ids, "different seed should change the draw");
    }
}
