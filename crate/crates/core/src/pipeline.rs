//! Resumable stages from corpus to trained head and evaluation report.
//!
//! Every stage reads its inputs from disk, writes its outputs under the
//! output directory and records a `<stage>.manifest.json` with content
//! hashes. A stage whose inputs, config and outputs still match its
//! manifest is skipped.

pub mod config;
pub mod eval;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::annotate::{AnnotateError, AnnotationCandidate};
use crate::corpus::{caption_key, load_corpus, load_lexicon, normalize_caption, Corpus, CorpusError, CorpusFormat, Lexicon};
use crate::embedspace::{toy_embed, EmbedError, EmbeddingStore, NormalizedSim};
use crate::filtering::{filter_caption_pairs, select_video_pairs, FilterConfig, FilterDecision, FilterError, FramesManifest, VideoPair};
use crate::hnnce::{load_checkpoint, save_checkpoint, train, CheckpointError, TrainError};
use crate::jsonl::{read_jsonl, write_jsonl, JsonlError};
use crate::mtg::{Generator, HttpMtgClient, ModificationText, MtgClient, MtgError, MtgMode};
use crate::pairminer::{mine_pairs_with_workers, CaptionPair};
use crate::retrieval::RetrievalError;
use crate::tripletset::{
    build_triplets, check_disjoint, compute_stats_with_threshold, sample_pools, split_triplets, CoVRTriplet,
    DirectedVideoPair, Split, TripletError,
};

pub use config::{PipelineConfig, TextEncoderConfig};
pub use eval::{EvalQuery, EvalReport, Method};

pub const MANIFEST_SUFFIX: &str = ".manifest.json";

pub const PAIRS: &str = "pairs.jsonl";
pub const FILTER_REPORT: &str = "filter_report.jsonl";
pub const KEPT_PAIRS: &str = "kept_pairs.jsonl";
pub const TEXTS: &str = "texts.jsonl";
pub const GEN_TEXT_FAILURES: &str = "gen_text_failures.jsonl";
pub const VIDEO_PAIRS: &str = "video_pairs.jsonl";
pub const TRIPLETS: &str = "triplets.jsonl";
pub const STATS: &str = "stats.json";
pub const TRIPLETS_PER_TARGET_CSV: &str = "triplets_per_target.csv";
pub const TEXT_WORD_LENGTH_CSV: &str = "text_word_length.csv";
pub const HEAD: &str = "head.ckpt";
pub const LOSS_CURVE: &str = "loss_curve.csv";
pub const EVAL_REPORT: &str = "eval_report.json";
pub const EVAL_SET_DIR: &str = "eval_set";
pub const CANDIDATES: &str = "eval_set/candidates.jsonl";
pub const VAL_POOL: &str = "eval_set/val_pool.jsonl";
pub const ANNOTATION_POOL: &str = "eval_set/annotation_pool.jsonl";
pub const DECISION_LOG: &str = "eval_set/decisions.jsonl";

pub fn split_file(split: Split) -> String {
    format!("{}.jsonl", split.name())
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("{} changed since stage {stage} wrote it (recorded {expected}, found {actual})", path.display())]
    HashMismatch { path: PathBuf, stage: Stage, expected: String, actual: String },
    #[error("text generation service failed: {0}")]
    Service(String),
    #[error("video {0:?} has no frames")]
    MissingVideo(String),
    #[error("no text embedding for {0:?}")]
    MissingTextEmbedding(String),
    #[error("split {0:?} is empty")]
    EmptySplit(&'static str),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Triplet(#[from] TripletError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Annotate(#[from] AnnotateError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl PipelineError {
    /// 2 config, 3 missing or changed artifact, 4 service, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::MissingArtifact(_) | PipelineError::HashMismatch { .. } => 3,
            PipelineError::Service(_) => 4,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_owned(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Mine,
    FilterPairs,
    GenText,
    FilterVideos,
    BuildTriplets,
    Stats,
    Train,
    Eval,
    MakeEvalSet,
}

impl Stage {
    /// Stages run by `all`, in order.
    pub const PIPELINE: [Stage; 8] = [
        Stage::Mine,
        Stage::FilterPairs,
        Stage::GenText,
        Stage::FilterVideos,
        Stage::BuildTriplets,
        Stage::Stats,
        Stage::Train,
        Stage::Eval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Mine => "mine",
            Stage::FilterPairs => "filter-pairs",
            Stage::GenText => "gen-text",
            Stage::FilterVideos => "filter-videos",
            Stage::BuildTriplets => "build-triplets",
            Stage::Stats => "stats",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::MakeEvalSet => "make-eval-set",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::PIPELINE
            .iter()
            .chain([&Stage::MakeEvalSet])
            .find(|st| st.name() == s)
            .copied()
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

/// A caption pair that passed the caption filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeptPair {
    #[serde(flatten)]
    pub pair: CaptionPair,
    pub text_sim: NormalizedSim,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRecord {
    #[serde(flatten)]
    pub pair: CaptionPair,
    #[serde(flatten)]
    pub decision: FilterDecision,
}

/// Modification text for going from `from_caption` to `to_caption`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextRecord {
    pub from_caption: String,
    pub to_caption: String,
    #[serde(flatten)]
    pub modification: ModificationText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenFailure {
    pub from_caption: String,
    pub to_caption: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPairRecord {
    pub caption_a: String,
    pub caption_b: String,
    pub text_sim: NormalizedSim,
    #[serde(flatten)]
    pub videos: VideoPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub seed: u64,
    pub config_hash: String,
    pub input_hashes: BTreeMap<String, String>,
    pub output_hashes: BTreeMap<String, String>,
    pub counts: BTreeMap<String, Value>,
    /// Seconds.
    pub wall_time: f64,
}

impl StageManifest {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        serde_json::from_slice(&bytes).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
    }

    pub fn count(&self, key: &str) -> Option<u64> {
        self.counts.get(key).and_then(Value::as_u64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageOutcome {
    Ran(StageManifest),
    Skipped(StageManifest),
}

impl StageOutcome {
    pub fn manifest(&self) -> &StageManifest {
        match self {
            StageOutcome::Ran(m) | StageOutcome::Skipped(m) => m,
        }
    }

    pub fn skipped(&self) -> bool {
        matches!(self, StageOutcome::Skipped(_))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Run even when the manifest matches.
    pub force: bool,
    /// Refuse inputs whose hash differs from what their producing stage
    /// recorded, and outputs changed since the last run.
    pub strict: bool,
}

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn hash_value(v: &Value) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("json value serializes")))
}

/// Text embeddings by normalized text.
#[derive(Debug, Clone)]
pub enum TextEncoder {
    Toy(usize),
    Store(EmbeddingStore),
}

impl TextEncoder {
    pub fn from_config(cfg: &TextEncoderConfig) -> Result<Self, PipelineError> {
        match cfg {
            TextEncoderConfig::Toy { dim } => Ok(TextEncoder::Toy(*dim)),
            TextEncoderConfig::Store { path } => {
                if !path.exists() {
                    return Err(PipelineError::MissingArtifact(path.clone()));
                }
                Ok(TextEncoder::Store(EmbeddingStore::load(path)?))
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            TextEncoder::Toy(d) => *d,
            TextEncoder::Store(s) => s.dim(),
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<f32>, PipelineError> {
        match self {
            TextEncoder::Toy(d) => Ok(toy_embed(text, *d)),
            TextEncoder::Store(s) => {
                let key = caption_key(&normalize_caption(text));
                s.get(&key).map(<[f32]>::to_vec).ok_or(PipelineError::MissingTextEmbedding(key))
            }
        }
    }

    /// Store keyed by the given texts verbatim.
    pub fn store_for<'a>(&self, texts: impl IntoIterator<Item = &'a str>) -> Result<EmbeddingStore, PipelineError> {
        let mut seen = std::collections::BTreeSet::new();
        let mut entries = Vec::new();
        for t in texts {
            if seen.insert(t) {
                entries.push((t.to_owned(), self.encode(t)?));
            }
        }
        Ok(EmbeddingStore::from_entries(self.dim(), entries)?)
    }
}

fn counts<const N: usize>(items: [(&str, Value); N]) -> BTreeMap<String, Value> {
    items.into_iter().map(|(k, v)| (k.to_owned(), v)).collect()
}

// Stage bodies over in-memory data; shared by the pipeline and make-eval-set.

pub fn mine(corpus: &Corpus) -> Vec<CaptionPair> {
    mine_pairs_with_workers(&corpus.distinct_captions(), 0)
}

pub fn filter_pairs(
    pairs: &[CaptionPair],
    encoder: &TextEncoder,
    lexicon: &Lexicon,
    cfg: &FilterConfig,
) -> Result<(Vec<FilterRecord>, Vec<KeptPair>), PipelineError> {
    let store = encoder.store_for(pairs.iter().flat_map(|p| [p.caption_a.as_str(), p.caption_b.as_str()]))?;
    let decisions = filter_caption_pairs(pairs, &store, lexicon, cfg)?;
    let kept = pairs
        .iter()
        .zip(&decisions)
        .filter(|(_, d)| d.kept)
        .map(|(p, d)| KeptPair { pair: p.clone(), text_sim: d.text_sim })
        .collect();
    let report = pairs.iter().zip(decisions).map(|(p, d)| FilterRecord { pair: p.clone(), decision: d }).collect();
    Ok((report, kept))
}

/// Texts for every requested direction of every kept pair. Fails only
/// when there was work to do and every request failed.
pub fn gen_texts(
    kept: &[KeptPair],
    generator: &Generator,
    both_directions: bool,
) -> Result<(Vec<TextRecord>, Vec<GenFailure>), PipelineError> {
    let edits: Vec<_> = kept
        .iter()
        .flat_map(|k| {
            let mut e = vec![k.pair.directed(true)];
            if both_directions {
                e.push(k.pair.directed(false));
            }
            e
        })
        .collect();
    let mut texts = Vec::new();
    let mut failures = Vec::new();
    for (edit, result) in edits.iter().zip(generator.generate_all(&edits)) {
        let (from_caption, to_caption) = (edit.source.to_owned(), edit.target.to_owned());
        match result {
            Ok(modification) => texts.push(TextRecord { from_caption, to_caption, modification }),
            Err(MtgError::NoClient(mode)) => {
                return Err(PipelineError::Config(format!("mtg mode {mode:?} needs a service url")))
            }
            Err(e) => failures.push(GenFailure { from_caption, to_caption, error: e.to_string() }),
        }
    }
    if texts.is_empty() && !failures.is_empty() {
        return Err(PipelineError::Service(format!("all {} request(s) failed; first: {}", failures.len(), failures[0].error)));
    }
    if !failures.is_empty() {
        log::warn!("{} of {} text generation request(s) failed", failures.len(), edits.len());
    }
    Ok((texts, failures))
}

pub fn filter_videos(
    kept: &[KeptPair],
    corpus: &Corpus,
    frames: &FramesManifest,
    frame_embs: &EmbeddingStore,
    cfg: &FilterConfig,
) -> Result<Vec<VideoPairRecord>, PipelineError> {
    let by_caption = corpus.videos_by_caption();
    let nested = kept
        .par_iter()
        .map(|k| {
            let vps = select_video_pairs(&k.pair, &by_caption, frame_embs, frames, cfg)?;
            Ok(vps
                .into_iter()
                .map(|videos| VideoPairRecord {
                    caption_a: k.pair.caption_a.clone(),
                    caption_b: k.pair.caption_b.clone(),
                    text_sim: k.text_sim,
                    videos,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, PipelineError>>()?;
    Ok(nested.concat())
}

/// Triplets for every video pair direction that has a text. Returns the
/// triplets and the number of directions dropped for lack of a text.
pub fn assemble_triplets(
    video_pairs: &[VideoPairRecord],
    texts: &[TextRecord],
    corpus: &Corpus,
    both_directions: bool,
) -> Result<(Vec<CoVRTriplet>, usize), PipelineError> {
    let by_edit: HashMap<(&str, &str), &ModificationText> = texts
        .iter()
        .map(|t| ((t.from_caption.as_str(), t.to_caption.as_str()), &t.modification))
        .collect();
    let flow = |v: &str| corpus.get(v).and_then(|r| r.flow_magnitude);
    let mut pairs = Vec::new();
    let mut mods = Vec::new();
    let mut dropped = 0;
    for vp in video_pairs {
        let forward = DirectedVideoPair {
            query_video: vp.videos.video_a.clone(),
            target_video: vp.videos.video_b.clone(),
            caption_query: vp.caption_a.clone(),
            caption_target: vp.caption_b.clone(),
            text_sim: vp.text_sim,
            visual_sim: vp.videos.visual_sim,
            flow_magnitude_target: flow(&vp.videos.video_b),
        };
        let mut directed = vec![forward.clone()];
        if both_directions {
            directed.push(forward.reversed(flow(&vp.videos.video_a)));
        }
        for d in directed {
            match by_edit.get(&(d.caption_query.as_str(), d.caption_target.as_str())) {
                Some(m) => {
                    mods.push((*m).clone());
                    pairs.push(d);
                }
                None => dropped += 1,
            }
        }
    }
    Ok((build_triplets(&pairs, &mods)?, dropped))
}

/// Inputs, outputs and stage-relevant config of one stage run.
struct Plan {
    inputs: Vec<(String, PathBuf, Option<Stage>)>,
    outputs: Vec<&'static str>,
    config: Value,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    opts: RunOptions,
    client: Option<Arc<dyn MtgClient>>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, opts: RunOptions) -> Result<Self, PipelineError> {
        cfg.validate()?;
        Ok(Pipeline { cfg, opts, client: None })
    }

    /// Use this client instead of one built from `mtg.url`.
    pub fn with_client(mut self, client: Arc<dyn MtgClient>) -> Self {
        self.client = Some(client);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.cfg.paths.output_dir.join(name)
    }

    pub fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.out(&format!("{}{MANIFEST_SUFFIX}", stage.name()))
    }

    /// `all`: every pipeline stage not listed in `stages.skip`.
    pub fn run_all(&self) -> Result<Vec<(Stage, StageOutcome)>, PipelineError> {
        Stage::PIPELINE
            .iter()
            .filter(|s| !self.cfg.stages.skip.contains(s))
            .map(|&s| Ok((s, self.run(s)?)))
            .collect()
    }

    pub fn run(&self, stage: Stage) -> Result<StageOutcome, PipelineError> {
        let plan = self.plan(stage)?;
        let mut input_hashes = BTreeMap::new();
        for (name, path, producer) in &plan.inputs {
            if !path.exists() {
                return Err(PipelineError::MissingArtifact(path.clone()));
            }
            let h = sha256_file(path)?;
            if let (true, Some(p)) = (self.opts.strict, producer) {
                self.check_recorded(*p, name, path, &h)?;
            }
            input_hashes.insert(name.clone(), h);
        }
        let config_hash = hash_value(&plan.config);
        let manifest_path = self.manifest_path(stage);

        if manifest_path.exists() {
            let prev = StageManifest::load(&manifest_path)?;
            if prev.stage == stage && prev.seed == self.cfg.seed && prev.config_hash == config_hash && prev.input_hashes == input_hashes {
                let mut intact = true;
                for (name, recorded) in &prev.output_hashes {
                    let path = self.out(name);
                    let actual = if path.exists() { Some(sha256_file(&path)?) } else { None };
                    if actual.as_deref() != Some(recorded.as_str()) {
                        if self.opts.strict {
                            return Err(match actual {
                                None => PipelineError::MissingArtifact(path),
                                Some(actual) => PipelineError::HashMismatch { path, stage, expected: recorded.clone(), actual },
                            });
                        }
                        intact = false;
                    }
                }
                if intact && !self.opts.force {
                    log::info!("{stage}: up to date, skipped");
                    return Ok(StageOutcome::Skipped(prev));
                }
            }
        }

        let dir = &self.cfg.paths.output_dir;
        std::fs::create_dir_all(dir.join(EVAL_SET_DIR)).map_err(io_err(dir))?;
        let start = Instant::now();
        let counts = self.execute(stage)?;
        let mut output_hashes = BTreeMap::new();
        for name in plan.outputs {
            output_hashes.insert(name.to_owned(), sha256_file(&self.out(name))?);
        }
        let manifest = StageManifest {
            stage,
            seed: self.cfg.seed,
            config_hash,
            input_hashes,
            output_hashes,
            counts,
            wall_time: start.elapsed().as_secs_f64(),
        };
        let body = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&manifest_path, body).map_err(io_err(&manifest_path))?;
        log::info!("{stage}: done in {:.2}s", manifest.wall_time);
        Ok(StageOutcome::Ran(manifest))
    }

    fn check_recorded(&self, producer: Stage, name: &str, path: &Path, actual: &str) -> Result<(), PipelineError> {
        let mp = self.manifest_path(producer);
        if !mp.exists() {
            return Err(PipelineError::MissingArtifact(mp));
        }
        let m = StageManifest::load(&mp)?;
        match m.output_hashes.get(name) {
            Some(expected) if expected == actual => Ok(()),
            Some(expected) => Err(PipelineError::HashMismatch {
                path: path.to_owned(),
                stage: producer,
                expected: expected.clone(),
                actual: actual.to_owned(),
            }),
            None => Err(PipelineError::MissingArtifact(path.to_owned())),
        }
    }

    fn encoder_json(&self) -> Value {
        match &self.cfg.text_encoder {
            TextEncoderConfig::Toy { dim } => json!({"kind": "toy", "dim": dim}),
            TextEncoderConfig::Store { .. } => json!({"kind": "store"}),
        }
    }

    fn encoder_inputs(&self) -> Vec<(String, PathBuf, Option<Stage>)> {
        match &self.cfg.text_encoder {
            TextEncoderConfig::Store { path } => vec![("text_embeddings".into(), path.clone(), None)],
            TextEncoderConfig::Toy { .. } => Vec::new(),
        }
    }

    fn mtg_json(&self, n_candidates: usize) -> Value {
        let m = &self.cfg.mtg;
        json!({
            "mode": m.mode,
            "n_candidates": n_candidates,
            "select": m.select,
            "top_k": m.top_k,
            "temperature": m.temperature,
            "both_directions": self.cfg.triplets.both_directions,
        })
    }

    fn plan(&self, stage: Stage) -> Result<Plan, PipelineError> {
        let c = &self.cfg;
        let p = &c.paths;
        let ext = |name: &str, path: &Path| (name.to_owned(), path.to_owned(), None);
        let art = |name: &str, producer: Stage| (name.to_owned(), self.out(name), Some(producer));
        let f = &c.filter;
        let plan = match stage {
            Stage::Mine => Plan { inputs: vec![ext("corpus", &p.corpus)], outputs: vec![PAIRS], config: json!({}) },
            Stage::FilterPairs => {
                let mut inputs = vec![art(PAIRS, Stage::Mine), ext("dictionary", &p.dictionary), ext("zipf", &p.zipf)];
                inputs.extend(self.encoder_inputs());
                Plan {
                    inputs,
                    outputs: vec![FILTER_REPORT, KEPT_PAIRS],
                    config: json!({
                        "sim_min": f.sim_min, "sim_max": f.sim_max, "zipf_min": f.zipf_min,
                        "template_blocklist": f.template_blocklist, "text_encoder": self.encoder_json(),
                    }),
                }
            }
            Stage::GenText => Plan {
                inputs: vec![art(KEPT_PAIRS, Stage::FilterPairs)],
                outputs: vec![TEXTS, GEN_TEXT_FAILURES],
                config: self.mtg_json(c.mtg.n_candidates),
            },
            Stage::FilterVideos => Plan {
                inputs: vec![
                    art(KEPT_PAIRS, Stage::FilterPairs),
                    ext("corpus", &p.corpus),
                    ext("frames_manifest", &p.frames_manifest),
                    ext("frame_embeddings", &p.frame_embeddings),
                ],
                outputs: vec![VIDEO_PAIRS],
                config: json!({"max_video_pairs_per_caption_pair": f.max_video_pairs_per_caption_pair, "visual_sim_min": f.visual_sim_min}),
            },
            Stage::BuildTriplets => Plan {
                inputs: vec![art(VIDEO_PAIRS, Stage::FilterVideos), art(TEXTS, Stage::GenText), ext("corpus", &p.corpus)],
                outputs: vec![TRIPLETS, "train.jsonl", "val.jsonl", "test.jsonl"],
                config: json!({"triplets": c.triplets}),
            },
            Stage::Stats => Plan {
                inputs: vec![art(TRIPLETS, Stage::BuildTriplets)],
                outputs: vec![STATS, TRIPLETS_PER_TARGET_CSV, TEXT_WORD_LENGTH_CSV],
                config: json!({"flow_threshold": c.triplets.flow_threshold}),
            },
            Stage::Train => {
                let mut inputs = vec![
                    art("train.jsonl", Stage::BuildTriplets),
                    ext("frames_manifest", &p.frames_manifest),
                    ext("frame_embeddings", &p.frame_embeddings),
                ];
                inputs.extend(self.encoder_inputs());
                Plan {
                    inputs,
                    outputs: vec![HEAD, LOSS_CURVE],
                    config: json!({
                        "train": c.train_config(), "frames": c.eval.frames, "query_frames": c.eval.query_frames,
                        "temperature": c.eval.temperature, "text_encoder": self.encoder_json(),
                    }),
                }
            }
            Stage::Eval => {
                let mut inputs = vec![
                    art("test.jsonl", Stage::BuildTriplets),
                    art(HEAD, Stage::Train),
                    ext("corpus", &p.corpus),
                    ext("frames_manifest", &p.frames_manifest),
                    ext("frame_embeddings", &p.frame_embeddings),
                ];
                inputs.extend(self.encoder_inputs());
                Plan {
                    inputs,
                    outputs: vec![EVAL_REPORT],
                    config: json!({"eval": c.eval, "text_encoder": self.encoder_json()}),
                }
            }
            Stage::MakeEvalSet => {
                let heldout = p
                    .heldout_corpus
                    .as_ref()
                    .ok_or_else(|| PipelineError::Config("paths.heldout_corpus is required for make-eval-set".into()))?;
                let mut inputs = vec![
                    ext("heldout_corpus", heldout),
                    ext("corpus", &p.corpus),
                    ext("heldout_frames_manifest", self.heldout_frames_manifest()),
                    ext("heldout_frame_embeddings", self.heldout_frame_embeddings()),
                    ext("dictionary", &p.dictionary),
                    ext("zipf", &p.zipf),
                ];
                inputs.extend(self.encoder_inputs());
                let mut vf = f.clone();
                vf.max_video_pairs_per_caption_pair = c.eval_set.max_video_pairs_per_caption_pair;
                Plan {
                    inputs,
                    outputs: vec![CANDIDATES, VAL_POOL, ANNOTATION_POOL],
                    config: json!({
                        "filter": vf, "mtg": self.mtg_json(c.eval_set.n_candidates), "eval_set": c.eval_set,
                        "text_encoder": self.encoder_json(),
                    }),
                }
            }
        };
        Ok(plan)
    }

    fn heldout_frames_manifest(&self) -> &Path {
        self.cfg.paths.heldout_frames_manifest.as_deref().unwrap_or(&self.cfg.paths.frames_manifest)
    }

    fn heldout_frame_embeddings(&self) -> &Path {
        self.cfg.paths.heldout_frame_embeddings.as_deref().unwrap_or(&self.cfg.paths.frame_embeddings)
    }

    fn generator(&self, n_candidates: usize) -> Result<Generator, PipelineError> {
        let m = &self.cfg.mtg;
        let client = match (&self.client, m.mode, &m.url) {
            (Some(c), _, _) => Some(c.clone()),
            (None, MtgMode::Rule, _) => None,
            (None, _, Some(url)) => Some(Arc::new(
                HttpMtgClient::new(url)
                    .with_max_attempts(m.max_attempts)
                    .with_backoff(Duration::from_millis(m.backoff_ms)),
            ) as Arc<dyn MtgClient>),
            (None, mode, None) => return Err(PipelineError::Config(format!("mtg mode {mode:?} needs mtg.url"))),
        };
        Ok(Generator {
            mode: m.mode,
            seed: self.cfg.seed,
            n_candidates,
            select: m.select,
            sampling: m.sampling(),
            in_flight: m.in_flight,
            client,
        })
    }

    fn corpus(path: &Path) -> Result<Corpus, PipelineError> {
        Ok(load_corpus(path, CorpusFormat::from_path(path)?)?)
    }

    fn write<T: Serialize>(&self, name: &str, items: &[T]) -> Result<usize, PipelineError> {
        Ok(write_jsonl(&self.out(name), items)?)
    }

    fn read<T: serde::de::DeserializeOwned>(&self, name: &str) -> Result<Vec<T>, PipelineError> {
        Ok(read_jsonl(&self.out(name))?)
    }

    fn execute(&self, stage: Stage) -> Result<BTreeMap<String, Value>, PipelineError> {
        let c = &self.cfg;
        let p = &c.paths;
        match stage {
            Stage::Mine => {
                let corpus = Self::corpus(&p.corpus)?;
                let pairs = mine(&corpus);
                self.write(PAIRS, &pairs)?;
                Ok(counts([
                    ("videos", json!(corpus.len())),
                    ("captions", json!(corpus.distinct_captions().len())),
                    ("pairs", json!(pairs.len())),
                ]))
            }
            Stage::FilterPairs => {
                let pairs: Vec<CaptionPair> = self.read(PAIRS)?;
                let lexicon = load_lexicon(&p.dictionary, &p.zipf)?;
                let encoder = TextEncoder::from_config(&c.text_encoder)?;
                let (report, kept) = filter_pairs(&pairs, &encoder, &lexicon, &c.filter)?;
                let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
                for r in &report {
                    let name = serde_json::to_value(r.decision.reason).expect("reason serializes");
                    *reasons.entry(name.as_str().unwrap_or_default().to_owned()).or_default() += 1;
                }
                self.write(FILTER_REPORT, &report)?;
                self.write(KEPT_PAIRS, &kept)?;
                Ok(counts([("pairs", json!(pairs.len())), ("kept", json!(kept.len())), ("reasons", json!(reasons))]))
            }
            Stage::GenText => {
                let kept: Vec<KeptPair> = self.read(KEPT_PAIRS)?;
                let generator = self.generator(c.mtg.n_candidates)?;
                let (texts, failures) = gen_texts(&kept, &generator, c.triplets.both_directions)?;
                self.write(TEXTS, &texts)?;
                self.write(GEN_TEXT_FAILURES, &failures)?;
                Ok(counts([
                    ("kept_pairs", json!(kept.len())),
                    ("texts", json!(texts.len())),
                    ("failures", json!(failures.len())),
                ]))
            }
            Stage::FilterVideos => {
                let kept: Vec<KeptPair> = self.read(KEPT_PAIRS)?;
                let corpus = Self::corpus(&p.corpus)?;
                let frames = FramesManifest::load(&p.frames_manifest)?;
                let embs = EmbeddingStore::load(&p.frame_embeddings)?;
                let vps = filter_videos(&kept, &corpus, &frames, &embs, &c.filter)?;
                self.write(VIDEO_PAIRS, &vps)?;
                Ok(counts([("kept_pairs", json!(kept.len())), ("video_pairs", json!(vps.len()))]))
            }
            Stage::BuildTriplets => {
                let vps: Vec<VideoPairRecord> = self.read(VIDEO_PAIRS)?;
                let texts: Vec<TextRecord> = self.read(TEXTS)?;
                let corpus = Self::corpus(&p.corpus)?;
                let (triplets, dropped) = assemble_triplets(&vps, &texts, &corpus, c.triplets.both_directions)?;
                self.write(TRIPLETS, &triplets)?;
                let mut out = counts([
                    ("video_pairs", json!(vps.len())),
                    ("triplets", json!(triplets.len())),
                    ("dropped_without_text", json!(dropped)),
                ]);
                for (split, ts) in split_triplets(&triplets, c.seed, &c.triplets.split) {
                    self.write(&split_file(split), &ts)?;
                    out.insert(split.name().to_owned(), json!(ts.len()));
                }
                Ok(out)
            }
            Stage::Stats => {
                let triplets: Vec<CoVRTriplet> = self.read(TRIPLETS)?;
                let stats = compute_stats_with_threshold(&triplets, c.triplets.flow_threshold);
                let path = self.out(STATS);
                std::fs::write(&path, serde_json::to_vec_pretty(&stats).expect("stats serialize")).map_err(io_err(&path))?;
                let mut w = csv::Writer::from_path(self.out(TRIPLETS_PER_TARGET_CSV))?;
                w.write_record(["target_video", "triplets"])?;
                for (t, n) in &stats.triplets_per_target {
                    w.write_record([t.as_str(), &n.to_string()])?;
                }
                w.flush().map_err(io_err(&path))?;
                let mut w = csv::Writer::from_path(self.out(TEXT_WORD_LENGTH_CSV))?;
                w.write_record(["words", "triplets"])?;
                for (len, n) in &stats.text_word_length {
                    w.write_record([len.to_string(), n.to_string()])?;
                }
                w.flush().map_err(io_err(&path))?;
                Ok(counts([("triplets", json!(stats.n_triplets)), ("avg_text_words", json!(stats.avg_text_words))]))
            }
            Stage::Train => {
                let triplets: Vec<CoVRTriplet> = self.read("train.jsonl")?;
                if triplets.is_empty() {
                    return Err(PipelineError::EmptySplit("train"));
                }
                let encoder = TextEncoder::from_config(&c.text_encoder)?;
                let frames = FramesManifest::load(&p.frames_manifest)?;
                let embs = EmbeddingStore::load(&p.frame_embeddings)?;
                let mut ids: Vec<&str> = triplets.iter().flat_map(|t| [t.query_video.as_str(), t.target_video.as_str()]).collect();
                ids.sort_unstable();
                ids.dedup();
                let gallery = eval::load_frame_gallery(ids, &frames, &embs)?;
                let texts = triplets.iter().map(|t| encoder.encode(t.text())).collect::<Result<Vec<_>, _>>()?;
                let examples = eval::training_examples(&triplets, &texts, &gallery, &c.eval)?;
                let tcfg = c.train_config();
                let outcome = train(&examples, &tcfg)?;
                save_checkpoint(&self.out(HEAD), &outcome.head, &tcfg)?;
                let mut w = csv::Writer::from_path(self.out(LOSS_CURVE))?;
                w.write_record(["epoch", "mean_loss"])?;
                for (e, l) in outcome.loss_curve.iter().enumerate() {
                    w.write_record([e.to_string(), format!("{l:.9}")])?;
                }
                w.flush().map_err(io_err(&self.out(LOSS_CURVE)))?;
                Ok(counts([
                    ("examples", json!(examples.len())),
                    ("epochs", json!(tcfg.epochs)),
                    ("initial_loss", json!(outcome.loss_curve[0])),
                    ("final_loss", json!(outcome.loss_curve.last().copied())),
                ]))
            }
            Stage::Eval => {
                let triplets: Vec<CoVRTriplet> = self.read("test.jsonl")?;
                if triplets.is_empty() {
                    return Err(PipelineError::EmptySplit("test"));
                }
                let (head, _) = load_checkpoint(&self.out(HEAD))?;
                let encoder = TextEncoder::from_config(&c.text_encoder)?;
                let corpus = Self::corpus(&p.corpus)?;
                let frames = FramesManifest::load(&p.frames_manifest)?;
                let embs = EmbeddingStore::load(&p.frame_embeddings)?;
                let gallery = eval::load_frame_gallery(corpus.records().iter().map(|r| r.video_id.as_str()), &frames, &embs)?;
                let queries = triplets
                    .iter()
                    .map(|t| {
                        Ok(EvalQuery {
                            query_id: t.id(),
                            query_video: t.query_video.clone(),
                            target_video: t.target_video.clone(),
                            text: encoder.encode(t.text())?,
                        })
                    })
                    .collect::<Result<Vec<_>, PipelineError>>()?;
                let report = eval::evaluate(&queries, &gallery, Some(&head), &c.eval)?;
                let path = self.out(EVAL_REPORT);
                std::fs::write(&path, serde_json::to_vec_pretty(&report).expect("report serializes")).map_err(io_err(&path))?;
                let mut out = counts([("queries", json!(report.n_queries)), ("gallery", json!(report.gallery_size))]);
                for (m, r) in &report.methods {
                    out.insert(format!("{}_r1", m.name()), json!(r.r(1)));
                }
                Ok(out)
            }
            Stage::MakeEvalSet => self.make_eval_set(),
        }
    }

    fn make_eval_set(&self) -> Result<BTreeMap<String, Value>, PipelineError> {
        let c = &self.cfg;
        let p = &c.paths;
        let heldout_path = p.heldout_corpus.as_ref().expect("checked by plan");
        let heldout = Self::corpus(heldout_path)?;
        let training = Self::corpus(&p.corpus)?;
        check_disjoint(&heldout, &training)?;

        let lexicon = load_lexicon(&p.dictionary, &p.zipf)?;
        let encoder = TextEncoder::from_config(&c.text_encoder)?;
        let frames = FramesManifest::load(self.heldout_frames_manifest())?;
        let embs = EmbeddingStore::load(self.heldout_frame_embeddings())?;
        let mut vf = c.filter.clone();
        vf.max_video_pairs_per_caption_pair = c.eval_set.max_video_pairs_per_caption_pair;

        let pairs = mine(&heldout);
        let (_, kept) = filter_pairs(&pairs, &encoder, &lexicon, &vf)?;
        let generator = self.generator(c.eval_set.n_candidates)?;
        let (texts, failures) = gen_texts(&kept, &generator, c.triplets.both_directions)?;
        let vps = filter_videos(&kept, &heldout, &frames, &embs, &vf)?;
        let (triplets, dropped) = assemble_triplets(&vps, &texts, &heldout, c.triplets.both_directions)?;
        let (val, annotate) = sample_pools(&triplets, c.eval_set.n_val, c.eval_set.n_annotate, c.seed)?;
        let pool = annotate
            .iter()
            .map(|t| AnnotationCandidate::from_triplet(t, &frames))
            .collect::<Result<Vec<_>, _>>()?;

        self.write(CANDIDATES, &triplets)?;
        self.write(VAL_POOL, &val)?;
        self.write(ANNOTATION_POOL, &pool)?;
        Ok(counts([
            ("heldout_videos", json!(heldout.len())),
            ("pairs", json!(pairs.len())),
            ("kept_pairs", json!(kept.len())),
            ("text_failures", json!(failures.len())),
            ("video_pairs", json!(vps.len())),
            ("candidates", json!(triplets.len())),
            ("dropped_without_text", json!(dropped)),
            ("val", json!(val.len())),
            ("annotate", json!(pool.len())),
        ]))
    }
}
