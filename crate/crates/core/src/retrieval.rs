//! Query composition, query-scored video embeddings, ranking and recall.
//!
//! Gallery vectors are weighted means of frame embeddings. The weights come
//! from a softmax over frame/text cosines, so the gallery seen by a query
//! depends on that query's modification text ([`FrameGallery::scored_for`]).

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedspace::{dot_f32, normalize_f64};
use crate::hnnce::{FusionHead, HeadError};

pub const RECALL_KS: [usize; 4] = [1, 5, 10, 50];
pub const SUBSET_KS: [usize; 3] = [1, 2, 3];
pub const FRAME_SWEEP: [usize; 5] = [1, 3, 5, 9, 15];

/// Allowed deviation from unit norm for stored gallery and query vectors.
const UNIT_TOL: f64 = 1e-5;
/// Below this norm a weighted sum counts as the zero vector.
const ZERO_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("no frames given")]
    NoFrames,
    #[error("{frames} frame(s) but {weights} weight(s)")]
    WeightCount { frames: usize, weights: usize },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("weighted sum is the zero vector")]
    ZeroVector,
    #[error("vector for {0:?} is not unit norm")]
    NotUnit(String),
    #[error("duplicate gallery id {0:?}")]
    DuplicateId(String),
    #[error("empty gallery")]
    EmptyGallery,
    #[error("query {query:?}: target {target:?} not in gallery")]
    TargetMissing { query: String, target: String },
    #[error("query {query:?}: target {target:?} not in its subset")]
    TargetNotInSubset { query: String, target: String },
    #[error("query {query:?}: subset id {id:?} not in gallery")]
    SubsetMissing { query: String, id: String },
    #[error(transparent)]
    Head(#[from] HeadError),
}

fn check_dim(expected: usize, v: &[f32]) -> Result<(), RetrievalError> {
    if v.len() != expected {
        return Err(RetrievalError::DimMismatch { expected, got: v.len() });
    }
    Ok(())
}

/// `softmax_i(cos(frame_i, text) / temp)`.
pub fn frame_weights<F: AsRef<[f32]>>(frames: &[F], text: &[f32], temp: f64) -> Result<Vec<f64>, RetrievalError> {
    if frames.is_empty() {
        return Err(RetrievalError::NoFrames);
    }
    if !(temp > 0.0) {
        return Err(RetrievalError::Temperature(temp));
    }
    let mut logits = Vec::with_capacity(frames.len());
    for f in frames {
        check_dim(text.len(), f.as_ref())?;
        logits.push(dot_f32(f.as_ref(), text) / temp);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// `normalize(Σ w_i · frame_i)`.
pub fn video_embedding<F: AsRef<[f32]>>(frames: &[F], weights: &[f64]) -> Result<Vec<f32>, RetrievalError> {
    let first = frames.first().ok_or(RetrievalError::NoFrames)?.as_ref();
    if frames.len() != weights.len() {
        return Err(RetrievalError::WeightCount { frames: frames.len(), weights: weights.len() });
    }
    let mut acc = vec![0.0f64; first.len()];
    for (f, &w) in frames.iter().zip(weights) {
        check_dim(first.len(), f.as_ref())?;
        for (a, &x) in acc.iter_mut().zip(f.as_ref()) {
            *a += w * x as f64;
        }
    }
    unit_or_zero_error(acc)
}

fn unit_or_zero_error(mut v: Vec<f64>) -> Result<Vec<f32>, RetrievalError> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= ZERO_NORM || !normalize_f64(&mut v) {
        return Err(RetrievalError::ZeroVector);
    }
    Ok(v.into_iter().map(|x| x as f32).collect())
}

/// Mean of the query frames (a single frame for image queries).
pub fn mean_visual<F: AsRef<[f32]>>(frames: &[F]) -> Result<Vec<f32>, RetrievalError> {
    video_embedding(frames, &uniform_weights(frames.len()))
}

#[derive(Debug, Clone, Copy)]
pub enum Fusion<'a> {
    Avg,
    Mlp(&'a FusionHead),
}

/// Video queries are first averaged over their frames, then fused with text.
pub fn compose_query<F: AsRef<[f32]>>(
    query_frames: &[F],
    text: &[f32],
    fusion: Fusion<'_>,
) -> Result<Vec<f32>, RetrievalError> {
    let visual = mean_visual(query_frames)?;
    check_dim(visual.len(), text)?;
    match fusion {
        Fusion::Avg => {
            let mean: Vec<f64> = visual.iter().zip(text).map(|(&a, &b)| (a as f64 + b as f64) / 2.0).collect();
            unit_or_zero_error(mean)
        }
        Fusion::Mlp(head) => {
            let f = head.forward(&to_f64(&visual), &to_f64(text))?;
            Ok(f.into_iter().map(|x| x as f32).collect())
        }
    }
}

pub(crate) fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// `n` frame indices out of `available`, centred in `n` equal segments.
/// `n = 1` yields the middle frame. Never more than `available` indices.
pub fn equally_spaced_frames(available: usize, n: usize) -> Vec<usize> {
    let n = n.min(available);
    (0..n).map(|i| (2 * i + 1) * available / (2 * n)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub video_id: String,
    pub h: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Gallery {
    dim: usize,
    entries: Vec<GalleryEntry>,
    index: HashMap<String, usize>,
}

impl Gallery {
    pub fn new(entries: Vec<GalleryEntry>) -> Result<Self, RetrievalError> {
        let dim = entries.first().ok_or(RetrievalError::EmptyGallery)?.h.len();
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            check_dim(dim, &e.h)?;
            if (dot_f32(&e.h, &e.h).sqrt() - 1.0).abs() > UNIT_TOL {
                return Err(RetrievalError::NotUnit(e.video_id.clone()));
            }
            if index.insert(e.video_id.clone(), i).is_some() {
                return Err(RetrievalError::DuplicateId(e.video_id.clone()));
            }
        }
        Ok(Gallery { dim, entries, index })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.entries[i].h.as_slice())
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    fn candidates(&self, query: &ComposedQuery, subset: bool) -> Result<Vec<usize>, RetrievalError> {
        match (&query.subset_ids, subset) {
            (Some(ids), true) => ids
                .iter()
                .map(|id| {
                    self.index.get(id).copied().ok_or_else(|| RetrievalError::SubsetMissing {
                        query: query.query_id.clone(),
                        id: id.clone(),
                    })
                })
                .collect(),
            _ => Ok((0..self.entries.len()).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposedQuery {
    pub query_id: String,
    pub f: Vec<f32>,
    pub target_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_ids: Option<Vec<String>>,
}

impl ComposedQuery {
    pub fn new(query_id: impl Into<String>, f: Vec<f32>, target_id: impl Into<String>) -> Self {
        ComposedQuery { query_id: query_id.into(), f, target_id: target_id.into(), subset_ids: None }
    }
}

fn score_order(a: (&str, f64), b: (&str, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Gallery ids by descending cosine, ties by ascending id. Restricted to the
/// query's subset when it has one.
pub fn retrieve(query: &ComposedQuery, gallery: &Gallery) -> Result<Vec<String>, RetrievalError> {
    check_dim(gallery.dim, &query.f)?;
    let mut scored: Vec<(&str, f64)> = gallery
        .candidates(query, true)?
        .into_iter()
        .map(|i| {
            let e = &gallery.entries[i];
            (e.video_id.as_str(), dot_f32(&query.f, &e.h))
        })
        .collect();
    scored.sort_by(|&a, &b| score_order(a, b));
    Ok(scored.into_iter().map(|(id, _)| id.to_owned()).collect())
}

/// 1 + #strictly better + #equal with a smaller id: the position
/// [`retrieve`] gives the target.
pub fn target_rank(query: &ComposedQuery, gallery: &Gallery, within_subset: bool) -> Result<usize, RetrievalError> {
    check_dim(gallery.dim, &query.f)?;
    let target = gallery.get(&query.target_id).ok_or_else(|| RetrievalError::TargetMissing {
        query: query.query_id.clone(),
        target: query.target_id.clone(),
    })?;
    let cands = gallery.candidates(query, within_subset)?;
    if within_subset && !cands.iter().any(|&i| gallery.entries[i].video_id == query.target_id) {
        return Err(RetrievalError::TargetNotInSubset {
            query: query.query_id.clone(),
            target: query.target_id.clone(),
        });
    }
    let st = dot_f32(&query.f, target);
    let mut rank = 1;
    for i in cands {
        let e = &gallery.entries[i];
        if e.video_id == query.target_id {
            continue;
        }
        let s = dot_f32(&query.f, &e.h);
        if s > st || (s == st && e.video_id < query.target_id) {
            rank += 1;
        }
    }
    Ok(rank)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub n_queries: usize,
    pub r_at: BTreeMap<usize, f64>,
    pub mean_r: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_r_at: Option<BTreeMap<usize, f64>>,
}

pub fn recall_at(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

impl RecallReport {
    pub fn from_ranks(ranks: &[usize], subset_ranks: Option<&[usize]>) -> Self {
        let r_at: BTreeMap<usize, f64> = RECALL_KS.iter().map(|&k| (k, recall_at(ranks, k))).collect();
        let mean_r = r_at.values().sum::<f64>() / RECALL_KS.len() as f64;
        RecallReport {
            n_queries: ranks.len(),
            r_at,
            mean_r,
            subset_r_at: subset_ranks.map(|s| SUBSET_KS.iter().map(|&k| (k, recall_at(s, k))).collect()),
        }
    }

    pub fn r(&self, k: usize) -> f64 {
        self.r_at.get(&k).copied().unwrap_or(f64::NAN)
    }
}

/// Full-gallery recall for every query, plus subset recall over the queries
/// that carry a subset.
pub fn recall_report(queries: &[ComposedQuery], gallery: &Gallery) -> Result<RecallReport, RetrievalError> {
    let ranks = queries
        .par_iter()
        .map(|q| target_rank(q, gallery, false))
        .collect::<Result<Vec<_>, _>>()?;
    let with_subset: Vec<&ComposedQuery> = queries.iter().filter(|q| q.subset_ids.is_some()).collect();
    let subset = if with_subset.is_empty() {
        None
    } else {
        Some(
            with_subset
                .par_iter()
                .map(|q| target_rank(q, gallery, true))
                .collect::<Result<Vec<_>, _>>()?,
        )
    };
    Ok(RecallReport::from_ranks(&ranks, subset.as_deref()))
}

/// Per-video frame embeddings from which query-scored galleries are built.
#[derive(Debug, Clone, Default)]
pub struct FrameGallery {
    videos: Vec<(String, Vec<Vec<f32>>)>,
}

impl FrameGallery {
    /// Videos are kept sorted by id.
    pub fn new(mut videos: Vec<(String, Vec<Vec<f32>>)>) -> Result<Self, RetrievalError> {
        videos.sort_by(|a, b| a.0.cmp(&b.0));
        for w in videos.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(RetrievalError::DuplicateId(w[0].0.clone()));
            }
        }
        if let Some((id, _)) = videos.iter().find(|(_, f)| f.is_empty()) {
            return Err(RetrievalError::NotUnit(id.clone()));
        }
        Ok(FrameGallery { videos })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn frames(&self, video_id: &str) -> Option<&[Vec<f32>]> {
        self.videos
            .binary_search_by(|(id, _)| id.as_str().cmp(video_id))
            .ok()
            .map(|i| self.videos[i].1.as_slice())
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.videos.iter().map(|(id, _)| id.as_str())
    }

    /// Keep `n` equally spaced frames per video.
    pub fn subsample(&self, n: usize) -> FrameGallery {
        let videos = self
            .videos
            .iter()
            .map(|(id, f)| (id.clone(), equally_spaced_frames(f.len(), n).into_iter().map(|i| f[i].clone()).collect()))
            .collect();
        FrameGallery { videos }
    }

    /// Gallery with every video weighted by similarity to `text`.
    pub fn scored_for(&self, text: &[f32], temp: f64) -> Result<Gallery, RetrievalError> {
        let entries = self
            .videos
            .iter()
            .map(|(id, frames)| {
                let w = frame_weights(frames, text, temp)?;
                Ok(GalleryEntry { video_id: id.clone(), h: video_embedding(frames, &w)? })
            })
            .collect::<Result<Vec<_>, RetrievalError>>()?;
        Gallery::new(entries)
    }

    /// Equal frame weights: the gallery used when no text is available.
    pub fn uniform(&self) -> Result<Gallery, RetrievalError> {
        let entries = self
            .videos
            .iter()
            .map(|(id, frames)| Ok(GalleryEntry { video_id: id.clone(), h: mean_visual(frames)? }))
            .collect::<Result<Vec<_>, RetrievalError>>()?;
        Gallery::new(entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn unit(v: &[f64]) -> Vec<f32> {
        let mut v = v.to_vec();
        assert!(normalize_f64(&mut v));
        v.into_iter().map(|x| x as f32).collect()
    }

    fn random_unit(rng: &mut rand_chacha::ChaCha8Rng, d: usize) -> Vec<f32> {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        unit(&v)
    }

    #[test]
    fn weights_examples() {
        let f = unit(&[1.0, 2.0, 0.5]);
        let t = unit(&[0.3, -1.0, 2.0]);
        assert_eq!(frame_weights(&[f.clone(), f.clone(), f.clone()], &t, 1.0).unwrap(), uniform_weights(3));
        assert_eq!(frame_weights(&[f.clone()], &t, 1.0).unwrap(), [1.0]);
        assert!(matches!(frame_weights(&[f.clone()], &t, 0.0), Err(RetrievalError::Temperature(_))));
        assert!(matches!(frame_weights::<Vec<f32>>(&[], &t, 1.0), Err(RetrievalError::NoFrames)));
    }

    #[test]
    fn weights_closed_form() {
        // frames whose cosines with the text are exactly 0.9 and 0.1
        let text = vec![1.0f32, 0.0];
        let frame = |c: f64| vec![c as f32, (1.0 - c * c).sqrt() as f32];
        let (f1, f2) = (frame(0.9), frame(0.1));
        let w = frame_weights(&[f1.clone(), f2.clone()], &text, 1.0).unwrap();
        let (c1, c2) = (f1[0] as f64, f2[0] as f64);
        let z = c1.exp() + c2.exp();
        assert!((w[0] - c1.exp() / z).abs() < 1e-12);
        assert!((w[1] - c2.exp() / z).abs() < 1e-12);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn video_embedding_examples() {
        let a = unit(&[0.2, 0.3, 0.9]);
        assert_eq!(video_embedding(&[a.clone()], &[1.0]).unwrap(), a);
        let neg: Vec<f32> = a.iter().map(|x| -x).collect();
        assert!(matches!(video_embedding(&[a.clone(), neg], &[0.5, 0.5]), Err(RetrievalError::ZeroVector)));

        let fs = [unit(&[1.0, 0.0, 0.0]), unit(&[0.0, 1.0, 0.0]), unit(&[1.0, 1.0, 1.0])];
        let w = [0.5, 0.3, 0.2];
        let h = video_embedding(&fs, &w).unwrap();
        // independent evaluation with the closed form of the three inputs
        let s3 = 1.0 / 3f64.sqrt();
        let raw = [0.5 + 0.2 * s3, 0.3 + 0.2 * s3, 0.2 * s3];
        let n = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (x, r) in h.iter().zip(raw) {
            assert!((*x as f64 - r / n).abs() < 1e-7);
        }
    }

    #[test]
    fn frame_count_and_temperature_limits() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let text = random_unit(&mut rng, 16);
        let f = random_unit(&mut rng, 16);
        for n in FRAME_SWEEP {
            let frames = vec![f.clone(); n];
            let w = frame_weights(&frames, &text, 1.0).unwrap();
            let h = video_embedding(&frames, &w).unwrap();
            assert!(dot_f32(&h, &f) > 1.0 - 1e-6);
        }
        let frames: Vec<Vec<f32>> = (0..9).map(|_| random_unit(&mut rng, 16)).collect();
        let best = frames
            .iter()
            .enumerate()
            .max_by(|a, b| dot_f32(a.1, &text).total_cmp(&dot_f32(b.1, &text)))
            .unwrap()
            .0;
        let h = video_embedding(&frames, &frame_weights(&frames, &text, 1e-6).unwrap()).unwrap();
        assert!(dot_f32(&h, &frames[best]) > 0.999);
    }

    #[test]
    fn avg_fusion() {
        let v = unit(&[1.0, 2.0, 3.0]);
        let f = compose_query(&[v.clone()], &v, Fusion::Avg).unwrap();
        assert!(f.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-7));
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        assert!(matches!(compose_query(&[v.clone()], &neg, Fusion::Avg), Err(RetrievalError::ZeroVector)));
        let t = unit(&[0.0, 1.0, 0.0]);
        let five = vec![v.clone(); 5];
        assert_eq!(compose_query(&five, &t, Fusion::Avg).unwrap(), compose_query(&[v.clone()], &t, Fusion::Avg).unwrap());
        assert!(matches!(
            compose_query(&[v], &[1.0, 0.0], Fusion::Avg),
            Err(RetrievalError::DimMismatch { .. })
        ));
    }

    fn gallery_from_cosines(f: &[f32], cosines: &[(&str, f64)]) -> Gallery {
        // f = e1; entry with cosine c is (c, sqrt(1-c²), 0...)
        assert_eq!(f, [1.0, 0.0]);
        Gallery::new(
            cosines
                .iter()
                .map(|&(id, c)| GalleryEntry { video_id: id.into(), h: vec![c as f32, (1.0 - c * c).sqrt() as f32] })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn retrieve_with_ties() {
        let f = vec![1.0f32, 0.0];
        let g = gallery_from_cosines(&f, &[("d", 0.7), ("a", 0.1), ("c", 0.9), ("b", 0.7)]);
        let q = ComposedQuery::new("q", f.clone(), "d");
        let got = retrieve(&q, &g).unwrap();
        // full sort oracle
        let mut oracle: Vec<(String, f64)> =
            g.entries().iter().map(|e| (e.video_id.clone(), e.h[0] as f64)).collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let oracle: Vec<String> = oracle.into_iter().map(|x| x.0).collect();
        assert_eq!(got, oracle);
        assert_eq!(got, ["c", "b", "d", "a"]);
        assert_eq!(target_rank(&q, &g, false).unwrap(), 3);
    }

    #[test]
    fn subset_restricts_ranking() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let entries: Vec<GalleryEntry> =
            (0..20).map(|i| GalleryEntry { video_id: format!("v{i:02}"), h: random_unit(&mut rng, 8) }).collect();
        let g = Gallery::new(entries).unwrap();
        let mut q = ComposedQuery::new("q", g.get("v03").unwrap().to_vec(), "v03");
        assert_eq!(retrieve(&q, &g).unwrap()[0], "v03");
        q.subset_ids = Some((0..6).map(|i| format!("v{i:02}")).collect());
        assert_eq!(retrieve(&q, &g).unwrap().len(), 6);
        q.target_id = "v10".into();
        assert!(matches!(target_rank(&q, &g, true), Err(RetrievalError::TargetNotInSubset { .. })));
    }

    #[test]
    fn hand_computed_report() {
        let r = RecallReport::from_ranks(&[1, 4, 12], None);
        assert_eq!(r.r(1), 1.0 / 3.0);
        assert_eq!(r.r(5), 2.0 / 3.0);
        assert_eq!(r.r(10), 2.0 / 3.0);
        assert_eq!(r.r(50), 1.0);
        assert!((r.mean_r - (1.0 / 3.0 + 2.0 / 3.0 + 2.0 / 3.0 + 1.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_queries_and_missing_targets() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let entries: Vec<GalleryEntry> =
            (0..60).map(|i| GalleryEntry { video_id: format!("v{i}"), h: random_unit(&mut rng, 16) }).collect();
        let g = Gallery::new(entries.clone()).unwrap();
        let qs: Vec<_> = entries.iter().map(|e| ComposedQuery::new(&e.video_id, e.h.clone(), &e.video_id)).collect();
        let r = recall_report(&qs, &g).unwrap();
        assert!(r.r_at.values().all(|&x| x == 1.0));
        let bad = [ComposedQuery::new("q", entries[0].h.clone(), "nope")];
        assert!(matches!(recall_report(&bad, &g), Err(RetrievalError::TargetMissing { .. })));
    }

    #[test]
    fn gallery_validation() {
        assert!(matches!(Gallery::new(vec![]), Err(RetrievalError::EmptyGallery)));
        let e = |id: &str, h: Vec<f32>| GalleryEntry { video_id: id.into(), h };
        assert!(matches!(Gallery::new(vec![e("a", vec![2.0, 0.0])]), Err(RetrievalError::NotUnit(_))));
        assert!(matches!(
            Gallery::new(vec![e("a", vec![1.0, 0.0]), e("a", vec![0.0, 1.0])]),
            Err(RetrievalError::DuplicateId(_))
        ));
    }

    #[test]
    fn spaced_frames() {
        assert_eq!(equally_spaced_frames(15, 1), [7]);
        assert_eq!(equally_spaced_frames(15, 5), [1, 4, 7, 10, 13]);
        assert_eq!(equally_spaced_frames(15, 15), (0..15).collect::<Vec<_>>());
        assert_eq!(equally_spaced_frames(3, 9), [0, 1, 2]);
    }

    #[test]
    fn frame_gallery() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let vids: Vec<(String, Vec<Vec<f32>>)> =
            (0..5).map(|i| (format!("v{i}"), (0..15).map(|_| random_unit(&mut rng, 8)).collect())).collect();
        let fg = FrameGallery::new(vids).unwrap();
        let text = random_unit(&mut rng, 8);
        for n in FRAME_SWEEP {
            let sub = fg.subsample(n);
            assert!(sub.frames("v0").unwrap().len() == n);
            assert_eq!(sub.scored_for(&text, 1.0).unwrap().len(), 5);
        }
        let one = fg.subsample(1);
        let g = one.scored_for(&text, 1.0).unwrap();
        assert_eq!(g.get("v2").unwrap(), one.frames("v2").unwrap()[0].as_slice());
    }

    proptest! {
        #[test]
        fn recall_monotone_and_rank_matches_retrieve(seed in 0u64..1000, g in 2usize..40, nq in 1usize..20) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let entries: Vec<GalleryEntry> =
                (0..g).map(|i| GalleryEntry { video_id: format!("v{i}"), h: random_unit(&mut rng, 4) }).collect();
            let gal = Gallery::new(entries).unwrap();
            let qs: Vec<ComposedQuery> = (0..nq)
                .map(|i| ComposedQuery::new(format!("q{i}"), random_unit(&mut rng, 4), format!("v{}", i % g)))
                .collect();
            let r = recall_report(&qs, &gal).unwrap();
            let vals: Vec<f64> = r.r_at.values().copied().collect();
            prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
            for q in &qs {
                let order = retrieve(q, &gal).unwrap();
                let pos = order.iter().position(|id| *id == q.target_id).unwrap() + 1;
                prop_assert_eq!(pos, target_rank(q, &gal, false).unwrap());
            }
        }
    }
}
