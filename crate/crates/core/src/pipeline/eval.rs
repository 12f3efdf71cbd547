use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::EvalConfig;
use super::PipelineError;
use crate::embedspace::{frame_id, EmbeddingStore};
use crate::filtering::{FilterError, FramesManifest};
use crate::hnnce::{FusionHead, TrainingExample};
use crate::retrieval::{
    compose_query, equally_spaced_frames, mean_visual, target_rank, to_f64, ComposedQuery, FrameGallery, Fusion,
    Gallery, RecallReport, RetrievalError,
};
use crate::tripletset::CoVRTriplet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ComposedMlp,
    ComposedAvg,
    TextOnly,
    VisualOnly,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::ComposedMlp => "composed_mlp",
            Method::ComposedAvg => "composed_avg",
            Method::TextOnly => "text_only",
            Method::VisualOnly => "visual_only",
        }
    }
}

/// One evaluation query: a triplet with its text already embedded.
#[derive(Debug, Clone)]
pub struct EvalQuery {
    pub query_id: String,
    pub query_video: String,
    pub target_video: String,
    pub text: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_queries: usize,
    pub gallery_size: usize,
    pub frames: usize,
    pub query_frames: usize,
    pub temperature: f64,
    pub methods: BTreeMap<Method, RecallReport>,
    /// Composed retrieval with `N` gallery frames per video.
    pub frame_sweep: BTreeMap<usize, RecallReport>,
}

/// Frame embeddings of `video_ids`, in frame order.
pub fn load_frame_gallery<'a>(
    video_ids: impl IntoIterator<Item = &'a str>,
    frames: &FramesManifest,
    embs: &EmbeddingStore,
) -> Result<FrameGallery, PipelineError> {
    let mut videos = Vec::new();
    for vid in video_ids {
        let n = frames.frame_count(vid).ok_or_else(|| FilterError::MissingFrameCount(vid.to_owned()))?;
        let mut fs = Vec::with_capacity(n);
        for i in 0..n {
            let id = frame_id(vid, i);
            fs.push(embs.get(&id).ok_or(FilterError::MissingFrameEmbedding(id))?.to_vec());
        }
        videos.push((vid.to_owned(), fs));
    }
    Ok(FrameGallery::new(videos)?)
}

fn query_frames<'g>(gallery: &'g FrameGallery, video: &str, n: usize) -> Result<Vec<&'g [f32]>, PipelineError> {
    let frames = gallery
        .frames(video)
        .ok_or_else(|| PipelineError::MissingVideo(video.to_owned()))?;
    Ok(equally_spaced_frames(frames.len(), n).into_iter().map(|i| frames[i].as_slice()).collect())
}

/// HN-NCE training rows: query = mean of the query frames, target = the
/// target video scored against the triplet's own text.
pub fn training_examples(
    triplets: &[CoVRTriplet],
    texts: &[Vec<f32>],
    gallery: &FrameGallery,
    cfg: &EvalConfig,
) -> Result<Vec<TrainingExample>, PipelineError> {
    let g = gallery.subsample(cfg.frames);
    triplets
        .par_iter()
        .zip(texts)
        .map(|(t, text)| {
            let q = mean_visual(&query_frames(gallery, &t.query_video, cfg.query_frames)?)?;
            let frames = g.frames(&t.target_video).ok_or_else(|| PipelineError::MissingVideo(t.target_video.clone()))?;
            let w = crate::retrieval::frame_weights(frames, text, cfg.temperature)?;
            let h = crate::retrieval::video_embedding(frames, &w)?;
            Ok(TrainingExample { target_id: t.target_video.clone(), query: to_f64(&q), text: to_f64(text), target: to_f64(&h) })
        })
        .collect()
}

fn rank(id: &str, f: Vec<f32>, target: &str, gallery: &Gallery) -> Result<usize, RetrievalError> {
    target_rank(&ComposedQuery::new(id, f, target), gallery, false)
}

/// Recall of every method on a query-scored gallery built per query, plus
/// the composed method across `cfg.frame_sweep`. Without a head the sweep
/// uses average fusion and the MLP row is left out.
pub fn evaluate(
    queries: &[EvalQuery],
    gallery: &FrameGallery,
    head: Option<&FusionHead>,
    cfg: &EvalConfig,
) -> Result<EvalReport, PipelineError> {
    let main = gallery.subsample(cfg.frames);
    let uniform = main.uniform()?;
    let sweep: Vec<(usize, FrameGallery)> = cfg.frame_sweep.iter().map(|&n| (n, gallery.subsample(n))).collect();
    let composed = |frames: &[&[f32]], text: &[f32]| match head {
        Some(h) => compose_query(frames, text, Fusion::Mlp(h)),
        None => compose_query(frames, text, Fusion::Avg),
    };

    struct Ranks {
        methods: Vec<(Method, usize)>,
        sweep: Vec<usize>,
    }
    let per_query: Vec<Ranks> = queries
        .par_iter()
        .map(|q| -> Result<Ranks, PipelineError> {
            let qf = query_frames(gallery, &q.query_video, cfg.query_frames)?;
            let scored = main.scored_for(&q.text, cfg.temperature)?;
            let (id, target) = (q.query_id.as_str(), q.target_video.as_str());
            let mut methods = Vec::with_capacity(4);
            if let Some(h) = head {
                methods.push((Method::ComposedMlp, rank(id, compose_query(&qf, &q.text, Fusion::Mlp(h))?, target, &scored)?));
            }
            methods.push((Method::ComposedAvg, rank(id, compose_query(&qf, &q.text, Fusion::Avg)?, target, &scored)?));
            methods.push((Method::TextOnly, rank(id, q.text.clone(), target, &scored)?));
            methods.push((Method::VisualOnly, rank(id, mean_visual(&qf)?, target, &uniform)?));
            let f = composed(&qf, &q.text)?;
            let sweep = sweep
                .iter()
                .map(|(_, g)| Ok(rank(id, f.clone(), target, &g.scored_for(&q.text, cfg.temperature)?)?))
                .collect::<Result<Vec<_>, PipelineError>>()?;
            Ok(Ranks { methods, sweep })
        })
        .collect::<Result<_, _>>()?;

    let mut by_method: BTreeMap<Method, Vec<usize>> = BTreeMap::new();
    for r in &per_query {
        for &(m, k) in &r.methods {
            by_method.entry(m).or_default().push(k);
        }
    }
    let frame_sweep = sweep
        .iter()
        .enumerate()
        .map(|(i, (n, _))| {
            let ranks: Vec<usize> = per_query.iter().map(|r| r.sweep[i]).collect();
            (*n, RecallReport::from_ranks(&ranks, None))
        })
        .collect();
    Ok(EvalReport {
        n_queries: queries.len(),
        gallery_size: gallery.len(),
        frames: cfg.frames,
        query_frames: cfg.query_frames,
        temperature: cfg.temperature,
        methods: by_method.into_iter().map(|(m, r)| (m, RecallReport::from_ranks(&r, None))).collect(),
        frame_sweep,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: usize, d: usize) -> Vec<f32> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn perfect_text_queries() {
        // each video is one basis direction; the text points at the target
        let gallery = FrameGallery::new((0..4).map(|i| (format!("v{i}"), vec![e(i, 4); 3])).collect()).unwrap();
        let queries: Vec<EvalQuery> = (0..4)
            .map(|i| EvalQuery {
                query_id: format!("q{i}"),
                query_video: format!("v{}", (i + 1) % 4),
                target_video: format!("v{i}"),
                text: e(i, 4),
            })
            .collect();
        let r = evaluate(&queries, &gallery, None, &EvalConfig::default()).unwrap();
        assert_eq!(r.methods[&Method::TextOnly].r(1), 1.0);
        assert_eq!(r.methods[&Method::VisualOnly].r(1), 0.0);
        assert!(!r.methods.contains_key(&Method::ComposedMlp));
        assert_eq!(r.frame_sweep.keys().copied().collect::<Vec<_>>(), [1, 3, 5, 9, 15]);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<EvalReport>(&json).unwrap(), r);
    }
}
