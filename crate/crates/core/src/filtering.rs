//! Caption-pair and video-pair filters.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Lexicon;
use crate::embedspace::{frame_id, normalized_similarity, EmbedError, EmbeddingStore, NormalizedSim};
use crate::pairminer::CaptionPair;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error("no text embedding for caption {0:?}")]
    MissingTextEmbedding(String),
    #[error("no frame embedding {0:?}")]
    MissingFrameEmbedding(String),
    #[error("no frame count for video {0:?}")]
    MissingFrameCount(String),
    #[error("no videos for caption {0:?}")]
    NoVideos(String),
    #[error("invalid filter config: {0}")]
    Config(String),
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: u64, message: String },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn default_blocklist() -> Vec<String> {
    ["abstract of", "concept of", "flag of", "background", "hologram"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub sim_max: f64,
    pub sim_min: f64,
    pub zipf_min: f64,
    pub template_blocklist: Vec<String>,
    pub max_video_pairs_per_caption_pair: usize,
    pub visual_sim_min: Option<f64>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            sim_max: 0.96,
            sim_min: 0.6,
            zipf_min: 3.0,
            template_blocklist: default_blocklist(),
            max_video_pairs_per_caption_pair: 10,
            visual_sim_min: None,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), FilterError> {
        if !(0.0 <= self.sim_min && self.sim_min < self.sim_max && self.sim_max <= 1.0) {
            return Err(FilterError::Config(format!(
                "need 0 <= sim_min < sim_max <= 1, got sim_min={} sim_max={}",
                self.sim_min, self.sim_max
            )));
        }
        if self.max_video_pairs_per_caption_pair == 0 {
            return Err(FilterError::Config("max_video_pairs_per_caption_pair must be >= 1".into()));
        }
        if let Some(v) = self.visual_sim_min {
            if !(0.0..=1.0).contains(&v) {
                return Err(FilterError::Config(format!("visual_sim_min {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Why a caption pair was dropped. Rules are evaluated in declaration
/// order (after `Kept`), and the first failing rule is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterReason {
    Kept,
    TemplateCaption,
    DigitDiff,
    OovDiff,
    RareDiff,
    TooSimilar,
    TooDissimilar,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub kept: bool,
    pub reason: FilterReason,
    pub text_sim: NormalizedSim,
}

impl FilterDecision {
    fn new(reason: FilterReason, text_sim: NormalizedSim) -> Self {
        FilterDecision { kept: reason == FilterReason::Kept, reason, text_sim }
    }
}

fn diff_tokens(pair: &CaptionPair) -> impl Iterator<Item = &str> {
    pair.diff_a.as_deref().into_iter().chain(pair.diff_b.as_deref())
}

pub fn filter_caption_pair(
    pair: &CaptionPair,
    text_embs: &EmbeddingStore,
    lexicon: &Lexicon,
    cfg: &FilterConfig,
) -> Result<FilterDecision, FilterError> {
    let emb = |c: &str| {
        text_embs
            .get(c)
            .ok_or_else(|| FilterError::MissingTextEmbedding(c.to_owned()))
    };
    let sim = normalized_similarity(emb(&pair.caption_a)?, emb(&pair.caption_b)?)?;

    let templated = |c: &str| cfg.template_blocklist.iter().any(|t| c.contains(t.as_str()));
    let reason = if templated(&pair.caption_a) || templated(&pair.caption_b) {
        FilterReason::TemplateCaption
    } else if diff_tokens(pair).any(|t| t.chars().any(|c| c.is_ascii_digit())) {
        FilterReason::DigitDiff
    } else if diff_tokens(pair).any(|t| !lexicon.in_dictionary(t)) {
        FilterReason::OovDiff
    } else if diff_tokens(pair).any(|t| lexicon.zipf(t).is_none_or(|z| z < cfg.zipf_min)) {
        FilterReason::RareDiff
    } else {
        similarity_band(sim, cfg)
    };
    Ok(FilterDecision::new(reason, sim))
}

/// Keep requires `sim_min < s < sim_max`; both ends exclude.
pub fn similarity_band(sim: NormalizedSim, cfg: &FilterConfig) -> FilterReason {
    if sim.0 >= cfg.sim_max {
        FilterReason::TooSimilar
    } else if sim.0 <= cfg.sim_min {
        FilterReason::TooDissimilar
    } else {
        FilterReason::Kept
    }
}

/// [`filter_caption_pair`] over many pairs; output order follows input order.
pub fn filter_caption_pairs(
    pairs: &[CaptionPair],
    text_embs: &EmbeddingStore,
    lexicon: &Lexicon,
    cfg: &FilterConfig,
) -> Result<Vec<FilterDecision>, FilterError> {
    pairs
        .par_iter()
        .map(|p| filter_caption_pair(p, text_embs, lexicon, cfg))
        .collect()
}

/// Frame counts per video, read from `video_id,frame_count` CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FramesManifest {
    counts: BTreeMap<String, usize>,
}

#[derive(Deserialize)]
struct FrameRow {
    video_id: String,
    frame_count: usize,
}

impl FramesManifest {
    pub fn new(counts: impl IntoIterator<Item = (String, usize)>) -> Self {
        FramesManifest { counts: counts.into_iter().collect() }
    }

    pub fn load(path: &Path) -> Result<Self, FilterError> {
        let parse = |line: u64, message: String| FilterError::Parse {
            path: path.display().to_string(),
            line,
            message,
        };
        let mut reader = csv::Reader::from_path(path).map_err(|e| parse(0, e.to_string()))?;
        let headers = reader.headers().map_err(|e| parse(1, e.to_string()))?.clone();
        let mut counts = BTreeMap::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| parse(e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            let row: FrameRow = rec.deserialize(Some(&headers)).map_err(|e| parse(line, e.to_string()))?;
            if row.frame_count == 0 {
                return Err(parse(line, format!("video {:?} has zero frames", row.video_id)));
            }
            counts.insert(row.video_id, row.frame_count);
        }
        Ok(FramesManifest { counts })
    }

    pub fn save(&self, path: &Path) -> Result<(), FilterError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| FilterError::Io(e.into()))?;
        w.write_record(["video_id", "frame_count"]).map_err(|e| FilterError::Io(e.into()))?;
        for (id, n) in &self.counts {
            w.write_record([id.as_str(), &n.to_string()]).map_err(|e| FilterError::Io(e.into()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn frame_count(&self, video_id: &str) -> Option<usize> {
        self.counts.get(video_id).copied()
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.counts.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Embedding id of the middle frame, `floor(frame_count / 2)`.
    pub fn middle_frame(&self, video_id: &str) -> Result<String, FilterError> {
        let n = self
            .frame_count(video_id)
            .ok_or_else(|| FilterError::MissingFrameCount(video_id.to_owned()))?;
        Ok(frame_id(video_id, n / 2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPair {
    /// Video carrying `caption_a`.
    pub video_a: String,
    /// Video carrying `caption_b`.
    pub video_b: String,
    pub visual_sim: NormalizedSim,
}

/// Score all `caption_a` × `caption_b` videos by middle-frame similarity and
/// keep the best `max_video_pairs_per_caption_pair`.
pub fn select_video_pairs(
    pair: &CaptionPair,
    videos_by_caption: &BTreeMap<String, Vec<String>>,
    frame_embs: &EmbeddingStore,
    frames: &FramesManifest,
    cfg: &FilterConfig,
) -> Result<Vec<VideoPair>, FilterError> {
    let videos = |c: &str| {
        videos_by_caption
            .get(c)
            .filter(|v| !v.is_empty())
            .ok_or_else(|| FilterError::NoVideos(c.to_owned()))
    };
    let middle = |vid: &str| -> Result<&[f32], FilterError> {
        let id = frames.middle_frame(vid)?;
        frame_embs.get(&id).ok_or(FilterError::MissingFrameEmbedding(id))
    };

    let mut scored = Vec::new();
    for va in videos(&pair.caption_a)? {
        let ea = middle(va)?;
        for vb in videos(&pair.caption_b)? {
            if va == vb {
                continue;
            }
            let sim = normalized_similarity(ea, middle(vb)?)?;
            if cfg.visual_sim_min.is_some_and(|min| sim.0 < min) {
                continue;
            }
            scored.push(VideoPair { video_a: va.clone(), video_b: vb.clone(), visual_sim: sim });
        }
    }
    scored.sort_by(|x, y| {
        y.visual_sim
            .0
            .total_cmp(&x.visual_sim.0)
            .then_with(|| x.video_a.cmp(&y.video_a))
            .then_with(|| x.video_b.cmp(&y.video_b))
    });
    scored.truncate(cfg.max_video_pairs_per_caption_pair);
    Ok(scored)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn pair(a: &str, b: &str) -> CaptionPair {
        let t = |s: &str| s.split(' ').map(str::to_owned).collect::<Vec<_>>();
        CaptionPair::from_tokens(&t(a), &t(b)).expect("distance-1 pair")
    }

    /// Two unit vectors whose normalized similarity is exactly `s`.
    fn vectors_with_sim(s: f64) -> (Vec<f32>, Vec<f32>) {
        let c = 2.0 * s - 1.0;
        (vec![1.0, 0.0], vec![c as f32, (1.0 - c * c).sqrt() as f32])
    }

    fn store_for(p: &CaptionPair, s: f64) -> EmbeddingStore {
        let (u, v) = vectors_with_sim(s);
        EmbeddingStore::from_entries(2, [(p.caption_a.clone(), u), (p.caption_b.clone(), v)]).unwrap()
    }

    fn lexicon() -> Lexicon {
        let words = ["fit", "and", "happy", "young", "couple", "playing", "play", "in", "the", "park", "zebra", "coins", "on", "a", "white", "background", "navigation", "moscow", "aardvark"];
        let zipf = words.iter().map(|w| (*w, if *w == "aardvark" { 1.5 } else { 5.0 }));
        Lexicon::new(words, zipf)
    }

    #[test]
    fn too_similar_pair() {
        let p = pair("fit and happy young couple playing in the park", "fit and happy young couple play in the park");
        let d = filter_caption_pair(&p, &store_for(&p, 0.97), &lexicon(), &FilterConfig::default()).unwrap();
        assert_eq!(d.reason, FilterReason::TooSimilar);
        assert!(!d.kept);
    }

    #[test]
    fn too_dissimilar_pair() {
        // "background" is on the default blocklist, which would fire first
        let cfg = FilterConfig { template_blocklist: vec!["abstract of".into()], ..Default::default() };
        let p = pair("zebra on a white background", "coins on a white background");
        let d = filter_caption_pair(&p, &store_for(&p, 0.55), &lexicon(), &cfg).unwrap();
        assert_eq!(d.reason, FilterReason::TooDissimilar);
        let d = filter_caption_pair(&p, &store_for(&p, 0.55), &lexicon(), &FilterConfig::default()).unwrap();
        assert_eq!(d.reason, FilterReason::TemplateCaption);
    }

    #[test]
    fn digit_diff_pair() {
        let p = pair("23.09.2015 navigation on the moscow", "navigation on the moscow");
        let d = filter_caption_pair(&p, &store_for(&p, 0.8), &lexicon(), &FilterConfig::default()).unwrap();
        assert_eq!(d.reason, FilterReason::DigitDiff);
    }

    #[test]
    fn oov_and_rare() {
        let cfg = FilterConfig::default();
        let p = pair("happy zebra", "happy xylofoo");
        assert_eq!(filter_caption_pair(&p, &store_for(&p, 0.8), &lexicon(), &cfg).unwrap().reason, FilterReason::OovDiff);
        let p = pair("happy zebra", "happy aardvark");
        assert_eq!(filter_caption_pair(&p, &store_for(&p, 0.8), &lexicon(), &cfg).unwrap().reason, FilterReason::RareDiff);
        // in the dictionary but without a zipf score counts as rare
        let lex = Lexicon::new(["happy", "zebra", "coins"], [("zebra", 5.0)]);
        let p = pair("happy zebra", "happy coins");
        assert_eq!(filter_caption_pair(&p, &store_for(&p, 0.8), &lex, &cfg).unwrap().reason, FilterReason::RareDiff);
    }

    #[test]
    fn rule_order_is_fixed() {
        // template + digit + oov all violated: template wins
        let p = pair("flag of 1999", "flag of qqq");
        let d = filter_caption_pair(&p, &store_for(&p, 0.99), &lexicon(), &FilterConfig::default()).unwrap();
        assert_eq!(d.reason, FilterReason::TemplateCaption);
        let p = pair("happy 1999", "happy qqq");
        let d = filter_caption_pair(&p, &store_for(&p, 0.99), &lexicon(), &FilterConfig::default()).unwrap();
        assert_eq!(d.reason, FilterReason::DigitDiff);
    }

    #[test]
    fn keep_band_is_exclusive() {
        let cfg = FilterConfig::default();
        for (sim, expect) in [
            (0.96, FilterReason::TooSimilar),
            (0.96 - 1e-12, FilterReason::Kept),
            (0.6 + 1e-12, FilterReason::Kept),
            (0.6, FilterReason::TooDissimilar),
            (1.0, FilterReason::TooSimilar),
            (0.0, FilterReason::TooDissimilar),
        ] {
            assert_eq!(similarity_band(NormalizedSim(sim), &cfg), expect, "s={sim}");
        }
        let p = pair("happy zebra", "happy coins");
        let d = filter_caption_pair(&p, &store_for(&p, 0.8), &lexicon(), &cfg).unwrap();
        assert!(d.kept);
        assert!((d.text_sim.0 - 0.8).abs() < 1e-6);
    }

    #[test]
    fn missing_embedding_names_caption() {
        let p = pair("happy zebra", "happy coins");
        let store = EmbeddingStore::from_entries(2, [("happy zebra", vec![1.0, 0.0])]).unwrap();
        match filter_caption_pair(&p, &store, &lexicon(), &FilterConfig::default()) {
            Err(FilterError::MissingTextEmbedding(c)) => assert_eq!(c, "happy coins"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(FilterConfig::default().validate().is_ok());
        assert!(FilterConfig { sim_min: 0.96, ..Default::default() }.validate().is_err());
        assert!(FilterConfig { max_video_pairs_per_caption_pair: 0, ..Default::default() }.validate().is_err());
    }

    struct World {
        pair: CaptionPair,
        videos: BTreeMap<String, Vec<String>>,
        frames: FramesManifest,
        embs: EmbeddingStore,
    }

    fn world(seed: u64, na: usize, nb: usize) -> World {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let pair = pair("dog running", "cat running");
        let mut videos = BTreeMap::new();
        let mut counts = Vec::new();
        let mut entries = Vec::new();
        for (cap, n, tag) in [(&pair.caption_a, na, "a"), (&pair.caption_b, nb, "b")] {
            let ids: Vec<String> = (0..n).map(|i| format!("{tag}{i:02}")).collect();
            for id in &ids {
                let fc = rng.random_range(1..9usize);
                counts.push((id.clone(), fc));
                for f in 0..fc {
                    let v: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0f32..1.0)).collect();
                    entries.push((frame_id(id, f), v));
                }
            }
            videos.insert(cap.clone(), ids);
        }
        World { pair, videos, frames: FramesManifest::new(counts), embs: EmbeddingStore::from_entries(8, entries).unwrap() }
    }

    /// Independent score-everything-then-sort oracle.
    fn oracle(w: &World, cap: usize, min: Option<f64>) -> Vec<(String, String)> {
        let mid = |v: &str| {
            let n = w.frames.frame_count(v).unwrap();
            w.embs.get(&format!("{v}#{}", n / 2)).unwrap().to_vec()
        };
        let mut all = Vec::new();
        for a in &w.videos[&w.pair.caption_a] {
            for b in &w.videos[&w.pair.caption_b] {
                let (x, y) = (mid(a), mid(b));
                let dot: f64 = x.iter().zip(&y).map(|(p, q)| *p as f64 * *q as f64).sum();
                let s = (1.0 + dot.clamp(-1.0, 1.0)) / 2.0;
                if min.is_none_or(|m| s >= m) {
                    all.push((s, a.clone(), b.clone()));
                }
            }
        }
        all.sort_by(|p, q| q.0.partial_cmp(&p.0).unwrap().then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));
        all.into_iter().take(cap).map(|(_, a, b)| (a, b)).collect()
    }

    fn select(w: &World, cfg: &FilterConfig) -> Vec<(String, String)> {
        select_video_pairs(&w.pair, &w.videos, &w.embs, &w.frames, cfg)
            .unwrap()
            .into_iter()
            .map(|p| (p.video_a, p.video_b))
            .collect()
    }

    #[test]
    fn one_video_each_gives_one_pair() {
        let w = world(1, 1, 1);
        assert_eq!(select(&w, &FilterConfig::default()).len(), 1);
    }

    #[test]
    fn top10_of_4x5_matches_full_sort() {
        let w = world(2, 4, 5);
        let got = select(&w, &FilterConfig::default());
        assert_eq!(got.len(), 10);
        assert_eq!(got, oracle(&w, 10, None));
    }

    #[test]
    fn cap_one_is_argmax() {
        let w = world(3, 3, 3);
        let cfg = FilterConfig { max_video_pairs_per_caption_pair: 1, ..Default::default() };
        assert_eq!(select(&w, &cfg), oracle(&w, 1, None));
    }

    #[test]
    fn visual_threshold_outputs_are_nested() {
        let w = world(4, 6, 6);
        let mut prev: Option<Vec<(String, String)>> = None;
        for min in [None, Some(0.55), Some(0.65), Some(0.70)] {
            let cfg = FilterConfig { visual_sim_min: min, max_video_pairs_per_caption_pair: 100, ..Default::default() };
            let got = select(&w, &cfg);
            assert_eq!(got, oracle(&w, 100, min));
            if let Some(p) = &prev {
                assert!(got.iter().all(|x| p.contains(x)));
            }
            prev = Some(got);
        }
    }

    #[test]
    fn shared_video_is_not_paired_with_itself() {
        let mut w = world(5, 2, 2);
        let a0 = w.videos[&w.pair.caption_a][0].clone();
        w.videos.get_mut(&w.pair.caption_b).unwrap().push(a0.clone());
        assert!(select(&w, &FilterConfig::default()).iter().all(|(a, b)| a != b));
    }

    #[test]
    fn missing_frame_embedding() {
        let w = world(6, 1, 1);
        let frames = FramesManifest::new([("a00".to_owned(), 100), ("b00".to_owned(), 1)]);
        let err = select_video_pairs(&w.pair, &w.videos, &w.embs, &frames, &FilterConfig::default());
        assert!(matches!(err, Err(FilterError::MissingFrameEmbedding(id)) if id == "a00#50"));
    }

    #[test]
    fn frames_manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("frames.csv");
        let m = FramesManifest::new([("v1".to_owned(), 9), ("v2".to_owned(), 1)]);
        m.save(&p).unwrap();
        assert_eq!(FramesManifest::load(&p).unwrap(), m);
        assert_eq!(m.middle_frame("v1").unwrap(), "v1#4");
    }
}
