//! Triplet assembly, dataset statistics, static/dynamic filtering and splits.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::embedspace::NormalizedSim;
use crate::mtg::ModificationText;

pub const DEFAULT_FLOW_THRESHOLD: f64 = 1.0;

#[derive(Debug, Error)]
pub enum TripletError {
    #[error("{pairs} video pair(s) but {texts} modification text(s)")]
    CountMismatch { pairs: usize, texts: usize },
    #[error("video {0:?} paired with itself")]
    SelfPair(String),
    #[error("triplet {query} -> {target} has no flow magnitude")]
    MissingFlow { query: String, target: String },
    #[error("held-out corpus shares {} video id(s) with training: {}", .0.len(), .0.join(", "))]
    Overlap(Vec<String>),
    #[error("pool has {available} candidate(s), {requested} requested")]
    PoolTooSmall { available: usize, requested: usize },
}

/// One query/target assignment of a caption-pair video pair. `caption_query`
/// belongs to `query_video`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectedVideoPair {
    pub query_video: String,
    pub target_video: String,
    pub caption_query: String,
    pub caption_target: String,
    pub text_sim: NormalizedSim,
    pub visual_sim: NormalizedSim,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow_magnitude_target: Option<f64>,
}

impl DirectedVideoPair {
    pub fn reversed(&self, flow_magnitude_query: Option<f64>) -> DirectedVideoPair {
        DirectedVideoPair {
            query_video: self.target_video.clone(),
            target_video: self.query_video.clone(),
            caption_query: self.caption_target.clone(),
            caption_target: self.caption_query.clone(),
            text_sim: self.text_sim,
            visual_sim: self.visual_sim,
            flow_magnitude_target: flow_magnitude_query,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoVRTriplet {
    pub query_video: String,
    pub target_video: String,
    #[serde(flatten)]
    pub modification: ModificationText,
    /// Caption of the query video.
    pub caption_a: String,
    /// Caption of the target video.
    pub caption_b: String,
    pub text_sim: NormalizedSim,
    pub visual_sim: NormalizedSim,
    #[serde(default)]
    pub flow_magnitude_target: Option<f64>,
}

impl CoVRTriplet {
    pub fn text(&self) -> &str {
        &self.modification.text
    }

    /// Stable short identifier derived from the two video ids.
    pub fn id(&self) -> String {
        triplet_id(&self.query_video, &self.target_video)
    }
}

pub fn triplet_id(query_video: &str, target_video: &str) -> String {
    let mut h = Sha256::new();
    h.update(query_video.as_bytes());
    h.update([0u8]);
    h.update(target_video.as_bytes());
    hex::encode(&h.finalize()[..8])
}

fn triplet_order(a: &CoVRTriplet, b: &CoVRTriplet) -> std::cmp::Ordering {
    a.target_video
        .cmp(&b.target_video)
        .then_with(|| a.query_video.cmp(&b.query_video))
        .then_with(|| a.modification.text.cmp(&b.modification.text))
}

/// Pair `pairs[i]` with `texts[i]` and sort by (target, query, text).
pub fn build_triplets(
    pairs: &[DirectedVideoPair],
    texts: &[ModificationText],
) -> Result<Vec<CoVRTriplet>, TripletError> {
    if pairs.len() != texts.len() {
        return Err(TripletError::CountMismatch { pairs: pairs.len(), texts: texts.len() });
    }
    let mut out = Vec::with_capacity(pairs.len());
    for (p, t) in pairs.iter().zip(texts) {
        if p.query_video == p.target_video {
            return Err(TripletError::SelfPair(p.query_video.clone()));
        }
        out.push(CoVRTriplet {
            query_video: p.query_video.clone(),
            target_video: p.target_video.clone(),
            modification: t.clone(),
            caption_a: p.caption_query.clone(),
            caption_b: p.caption_target.clone(),
            text_sim: p.text_sim,
            visual_sim: p.visual_sim,
            flow_magnitude_target: p.flow_magnitude_target,
        });
    }
    out.sort_by(triplet_order);
    Ok(out)
}

pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_triplets: usize,
    pub n_distinct_videos: usize,
    pub n_distinct_texts: usize,
    pub avg_text_words: f64,
    pub avg_triplets_per_target: f64,
    /// Target video id → number of triplets.
    pub triplets_per_target: BTreeMap<String, usize>,
    /// Word count → number of triplets.
    pub text_word_length: BTreeMap<usize, usize>,
    /// `None` when no triplet carries a flow magnitude.
    pub static_fraction: Option<f64>,
}

pub fn compute_stats(triplets: &[CoVRTriplet]) -> DatasetStats {
    compute_stats_with_threshold(triplets, DEFAULT_FLOW_THRESHOLD)
}

pub fn compute_stats_with_threshold(triplets: &[CoVRTriplet], flow_threshold: f64) -> DatasetStats {
    let mut videos = HashSet::new();
    let mut texts = HashSet::new();
    let mut per_target: BTreeMap<String, usize> = BTreeMap::new();
    let mut lengths: BTreeMap<usize, usize> = BTreeMap::new();
    let (mut with_flow, mut n_static) = (0usize, 0usize);
    for t in triplets {
        videos.insert(t.query_video.as_str());
        videos.insert(t.target_video.as_str());
        texts.insert(t.text());
        *per_target.entry(t.target_video.clone()).or_default() += 1;
        *lengths.entry(word_count(t.text())).or_default() += 1;
        if let Some(f) = t.flow_magnitude_target {
            with_flow += 1;
            if f < flow_threshold {
                n_static += 1;
            }
        }
    }
    let n = triplets.len();
    DatasetStats {
        n_triplets: n,
        n_distinct_videos: videos.len(),
        n_distinct_texts: texts.len(),
        avg_text_words: histogram_mean(&lengths),
        avg_triplets_per_target: if per_target.is_empty() { 0.0 } else { n as f64 / per_target.len() as f64 },
        triplets_per_target: per_target,
        text_word_length: lengths,
        static_fraction: (with_flow > 0).then(|| n_static as f64 / with_flow as f64),
    }
}

/// Mean of a value → count histogram; 0 when empty.
pub fn histogram_mean(h: &BTreeMap<usize, usize>) -> f64 {
    let mass: usize = h.values().sum();
    if mass == 0 {
        return 0.0;
    }
    h.iter().map(|(&k, &c)| (k * c) as f64).sum::<f64>() / mass as f64
}

/// Static: flow strictly below the threshold. Dynamic: everything else.
pub fn split_static_dynamic(
    triplets: &[CoVRTriplet],
    threshold: f64,
) -> Result<(Vec<CoVRTriplet>, Vec<CoVRTriplet>), TripletError> {
    let (mut st, mut dy) = (Vec::new(), Vec::new());
    for t in triplets {
        let flow = t.flow_magnitude_target.ok_or_else(|| TripletError::MissingFlow {
            query: t.query_video.clone(),
            target: t.target_video.clone(),
        })?;
        if flow < threshold {
            st.push(t.clone());
        } else {
            dy.push(t.clone());
        }
    }
    Ok((st, dy))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { val_fraction: 0.1, test_fraction: 0.1 }
    }
}

/// Splits are assigned per target video so that every triplet of a target
/// lands in the same split; the assignment is a seeded hash of the id.
pub fn assign_split(target_video: &str, seed: u64, cfg: &SplitConfig) -> Split {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(target_video.as_bytes());
    let x = u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"));
    let u = (x >> 11) as f64 / (1u64 << 53) as f64;
    if u < cfg.test_fraction {
        Split::Test
    } else if u < cfg.test_fraction + cfg.val_fraction {
        Split::Val
    } else {
        Split::Train
    }
}

pub fn split_triplets(
    triplets: &[CoVRTriplet],
    seed: u64,
    cfg: &SplitConfig,
) -> BTreeMap<Split, Vec<CoVRTriplet>> {
    let mut out: BTreeMap<Split, Vec<CoVRTriplet>> = Split::ALL.iter().map(|&s| (s, Vec::new())).collect();
    for t in triplets {
        out.get_mut(&assign_split(&t.target_video, seed, cfg)).expect("all splits present").push(t.clone());
    }
    out
}

/// Video ids present in both corpora, sorted.
pub fn corpus_overlap(heldout: &Corpus, training: &Corpus) -> Vec<String> {
    let shared: BTreeSet<String> = heldout
        .records()
        .iter()
        .filter(|r| training.contains(&r.video_id))
        .map(|r| r.video_id.clone())
        .collect();
    shared.into_iter().collect()
}

pub fn check_disjoint(heldout: &Corpus, training: &Corpus) -> Result<(), TripletError> {
    let shared = corpus_overlap(heldout, training);
    if shared.is_empty() {
        Ok(())
    } else {
        Err(TripletError::Overlap(shared))
    }
}

/// Seeded disjoint (validation, annotation) samples of exactly the requested
/// sizes, each kept in the pool's original order.
pub fn sample_pools<T: Clone>(
    pool: &[T],
    n_val: usize,
    n_annotate: usize,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), TripletError> {
    let requested = n_val + n_annotate;
    if requested > pool.len() {
        return Err(TripletError::PoolTooSmall { available: pool.len(), requested });
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let mut val: Vec<usize> = idx[..n_val].to_vec();
    let mut ann: Vec<usize> = idx[n_val..requested].to_vec();
    val.sort_unstable();
    ann.sort_unstable();
    Ok((
        val.into_iter().map(|i| pool[i].clone()).collect(),
        ann.into_iter().map(|i| pool[i].clone()).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CaptionRecord;
    use crate::mtg::TextSource;
    use proptest::prelude::*;

    fn text(t: &str) -> ModificationText {
        ModificationText { text: t.into(), source: TextSource::Llm, template_id: None, candidates: None, candidate_template_ids: None }
    }

    fn dpair(q: &str, t: &str, flow: Option<f64>) -> DirectedVideoPair {
        DirectedVideoPair {
            query_video: q.into(),
            target_video: t.into(),
            caption_query: format!("caption {q}"),
            caption_target: format!("caption {t}"),
            text_sim: NormalizedSim(0.8),
            visual_sim: NormalizedSim(0.7),
            flow_magnitude_target: flow,
        }
    }

    fn triplet(q: &str, t: &str, txt: &str, flow: Option<f64>) -> CoVRTriplet {
        build_triplets(&[dpair(q, t, flow)], &[text(txt)]).unwrap().remove(0)
    }

    #[test]
    fn both_directions() {
        let fwd = dpair("v1", "v2", Some(2.0));
        let back = fwd.reversed(Some(0.5));
        let out = build_triplets(&[fwd, back], &[text("Add a cat"), text("Remove the cat")]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].query_video.as_str(), out[0].target_video.as_str()), ("v2", "v1"));
        assert_eq!(out[0].text(), "Remove the cat");
        assert_eq!(out[0].caption_a, "caption v2");
        assert_eq!(out[0].flow_magnitude_target, Some(0.5));
        assert_eq!(out[1].text(), "Add a cat");
    }

    #[test]
    fn build_errors_and_empty() {
        assert!(build_triplets(&[], &[]).unwrap().is_empty());
        assert!(matches!(
            build_triplets(&[dpair("a", "b", None)], &[]),
            Err(TripletError::CountMismatch { pairs: 1, texts: 0 })
        ));
        assert!(matches!(build_triplets(&[dpair("a", "a", None)], &[text("x")]), Err(TripletError::SelfPair(_))));
    }

    #[test]
    fn stats_examples() {
        let one = compute_stats(&[triplet("a", "b", "add a red hat", None)]);
        assert_eq!(one.avg_text_words, 4.0);
        assert_eq!(one.static_fraction, None);

        let ts = vec![
            triplet("a", "t", "w w", Some(0.2)),
            triplet("b", "t", "w w w w", Some(1.0)),
            triplet("c", "t", "w w w w w w", None),
        ];
        let s = compute_stats(&ts);
        assert_eq!(s.avg_text_words, 4.0);
        assert_eq!(s.text_word_length, BTreeMap::from([(2, 1), (4, 1), (6, 1)]));
        assert_eq!(s.triplets_per_target["t"], 3);
        assert_eq!(s.n_distinct_videos, 4);
        assert_eq!(s.static_fraction, Some(0.5));
        assert_eq!(s.avg_triplets_per_target, 3.0);
    }

    #[test]
    fn static_dynamic_boundary() {
        let ts: Vec<_> = [0.2, 1.0, 3.5]
            .iter()
            .enumerate()
            .map(|(i, &f)| triplet(&format!("q{i}"), "t", "x", Some(f)))
            .collect();
        let flows = |v: &[CoVRTriplet]| v.iter().map(|t| t.flow_magnitude_target.unwrap()).collect::<Vec<_>>();
        let (s, d) = split_static_dynamic(&ts, 1.0).unwrap();
        assert_eq!(flows(&s), [0.2]);
        assert_eq!(flows(&d), [1.0, 3.5]);
        assert_eq!(split_static_dynamic(&ts, 0.0).unwrap().1.len(), 3);
        assert_eq!(split_static_dynamic(&ts, f64::INFINITY).unwrap().0.len(), 3);
        let missing = [triplet("a", "b", "x", None)];
        assert!(matches!(split_static_dynamic(&missing, 1.0), Err(TripletError::MissingFlow { .. })));
    }

    #[test]
    fn serialized_schema() {
        let t = triplet("q", "t", "Add clouds", Some(1.5));
        let v: serde_json::Value = serde_json::to_value(&t).unwrap();
        for key in [
            "query_video", "target_video", "text", "source", "caption_a", "caption_b", "text_sim", "visual_sim",
            "flow_magnitude_target",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let back: CoVRTriplet = serde_json::from_value(v).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn stats_survive_serialization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let ts: Vec<_> = (0..30)
            .map(|i| triplet(&format!("q{i}"), &format!("t{}", i % 7), &"w ".repeat(1 + i % 5), Some(i as f64 / 10.0)))
            .collect();
        crate::jsonl::write_jsonl(&p, &ts).unwrap();
        let back: Vec<CoVRTriplet> = crate::jsonl::read_jsonl(&p).unwrap();
        assert_eq!(compute_stats(&back), compute_stats(&ts));
    }

    #[test]
    fn overlap_detection() {
        let c = |ids: &[&str]| Corpus::from_records(ids.iter().map(|i| CaptionRecord::new(*i, "a b")).collect()).unwrap();
        assert!(check_disjoint(&c(&["x", "y"]), &c(&["z"])).is_ok());
        match check_disjoint(&c(&["x", "y"]), &c(&["y", "z"])) {
            Err(TripletError::Overlap(ids)) => assert_eq!(ids, ["y"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pools() {
        let pool: Vec<u32> = (0..100).collect();
        let (v, a) = sample_pools(&pool, 30, 50, 3).unwrap();
        assert_eq!((v.len(), a.len()), (30, 50));
        let vs: HashSet<_> = v.iter().collect();
        assert!(a.iter().all(|x| !vs.contains(x)));
        assert_eq!(sample_pools(&pool, 30, 50, 3).unwrap(), (v, a));
        assert!(matches!(sample_pools(&pool, 60, 50, 3), Err(TripletError::PoolTooSmall { .. })));
    }

    #[test]
    fn splits_group_targets() {
        let ts: Vec<_> =
            (0..400).map(|i| triplet(&format!("q{i}"), &format!("t{}", i % 100), "x", None)).collect();
        let s = split_triplets(&ts, 0, &SplitConfig::default());
        assert_eq!(s.values().map(Vec::len).sum::<usize>(), 400);
        let targets = |sp: Split| s[&sp].iter().map(|t| t.target_video.clone()).collect::<HashSet<_>>();
        assert!(targets(Split::Train).is_disjoint(&targets(Split::Test)));
        assert!(targets(Split::Val).is_disjoint(&targets(Split::Test)));
        assert!(s[&Split::Train].len() > s[&Split::Test].len());
    }

    proptest! {
        #[test]
        fn histogram_invariants(specs in proptest::collection::vec((0u8..6, 0u8..6, 1usize..8, proptest::option::of(0.0f64..3.0)), 0..40)) {
            let pairs: Vec<_> = specs.iter().enumerate()
                .map(|(i, &(_, t, _, f))| dpair(&format!("q{i}"), &format!("t{t}"), f))
                .collect();
            let texts: Vec<_> = specs.iter().map(|&(_, _, w, _)| text(&vec!["w"; w].join(" "))).collect();
            let ts = build_triplets(&pairs, &texts).unwrap();
            let s = compute_stats(&ts);
            prop_assert_eq!(s.triplets_per_target.values().sum::<usize>(), s.n_triplets);
            prop_assert_eq!(s.text_word_length.values().sum::<usize>(), s.n_triplets);
            let direct = if ts.is_empty() { 0.0 } else {
                ts.iter().map(|t| word_count(t.text()) as f64).sum::<f64>() / ts.len() as f64
            };
            prop_assert!((s.avg_text_words - direct).abs() < 1e-9);
            prop_assert!(ts.iter().all(|t| t.query_video != t.target_video));
            if let Some(f) = s.static_fraction { prop_assert!((0.0..=1.0).contains(&f)); }
        }
    }
}
