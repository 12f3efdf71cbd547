use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PipelineError, Stage};
use crate::filtering::FilterConfig;
use crate::hnnce::HnNceConfig;
use crate::mtg::{MtgMode, Sampling, SelectStrategy};
use crate::retrieval::FRAME_SWEEP;
use crate::tripletset::{SplitConfig, DEFAULT_FLOW_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub frame_embeddings: PathBuf,
    pub frames_manifest: PathBuf,
    pub dictionary: PathBuf,
    pub zipf: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub heldout_corpus: Option<PathBuf>,
    /// Defaults to `frame_embeddings`.
    #[serde(default)]
    pub heldout_frame_embeddings: Option<PathBuf>,
    /// Defaults to `frames_manifest`.
    #[serde(default)]
    pub heldout_frames_manifest: Option<PathBuf>,
}

impl PathsConfig {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.corpus,
            &mut self.frame_embeddings,
            &mut self.frames_manifest,
            &mut self.dictionary,
            &mut self.zipf,
            &mut self.output_dir,
        ] {
            fix(p);
        }
        for p in [&mut self.heldout_corpus, &mut self.heldout_frame_embeddings, &mut self.heldout_frames_manifest]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TextEncoderConfig {
    /// Seeded bag-of-tokens vectors; no file needed.
    Toy { dim: usize },
    /// Precomputed text embeddings keyed by normalized text.
    Store { path: PathBuf },
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig::Toy { dim: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtgConfig {
    pub mode: MtgMode,
    pub url: Option<String>,
    pub n_candidates: usize,
    pub select: SelectStrategy,
    pub top_k: u32,
    pub temperature: f64,
    pub in_flight: usize,
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for MtgConfig {
    fn default() -> Self {
        let s = Sampling::default();
        MtgConfig {
            mode: MtgMode::Rule,
            url: None,
            n_candidates: 1,
            select: SelectStrategy::First,
            top_k: s.top_k,
            temperature: s.temperature,
            in_flight: 8,
            max_attempts: 3,
            backoff_ms: 200,
        }
    }
}

impl MtgConfig {
    pub fn sampling(&self) -> Sampling {
        Sampling { top_k: self.top_k, temperature: self.temperature }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletsConfig {
    /// Materialize both query/target assignments of every video pair.
    pub both_directions: bool,
    pub flow_threshold: f64,
    pub split: SplitConfig,
}

impl Default for TripletsConfig {
    fn default() -> Self {
        TripletsConfig { both_directions: true, flow_threshold: DEFAULT_FLOW_THRESHOLD, split: SplitConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Gallery frames per video.
    pub frames: usize,
    /// Frames averaged into the visual query.
    pub query_frames: usize,
    /// Softmax temperature of query scoring.
    pub temperature: f64,
    pub frame_sweep: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { frames: 15, query_frames: 1, temperature: 1.0, frame_sweep: FRAME_SWEEP.to_vec() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSetConfig {
    pub n_val: usize,
    pub n_annotate: usize,
    pub n_candidates: usize,
    pub max_video_pairs_per_caption_pair: usize,
}

impl Default for EvalSetConfig {
    fn default() -> Self {
        EvalSetConfig { n_val: 1000, n_annotate: 1000, n_candidates: 3, max_video_pairs_per_caption_pair: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnotateConfig {
    pub port: u16,
    pub lease_seconds: i64,
    /// Defaults to the annotation pool written by `make-eval-set`.
    pub pool: Option<PathBuf>,
    pub log: Option<PathBuf>,
    /// Directory holding `<video_id>/<frame_index>.jpg`.
    pub frames_dir: Option<PathBuf>,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        AnnotateConfig { port: 8080, lease_seconds: crate::annotate::DEFAULT_LEASE_SECONDS, pool: None, log: None, frames_dir: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StagesConfig {
    /// Stages left out of `all`.
    pub skip: Vec<Stage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub paths: PathsConfig,
    #[serde(default)]
    pub text_encoder: TextEncoderConfig,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default)]
    pub mtg: MtgConfig,
    #[serde(default)]
    pub triplets: TripletsConfig,
    /// `train.seed` is replaced by the top-level seed.
    #[serde(default)]
    pub train: HnNceConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub eval_set: EvalSetConfig,
    #[serde(default)]
    pub annotate: AnnotateConfig,
    #[serde(default)]
    pub stages: StagesConfig,
}

impl PipelineConfig {
    /// Parse TOML; relative paths are taken relative to `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, PipelineError> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.resolve(base_dir);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn resolve(&mut self, base: &Path) {
        self.paths.resolve(base);
        if let TextEncoderConfig::Store { path } = &mut self.text_encoder {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        for p in [&mut self.annotate.pool, &mut self.annotate.log, &mut self.annotate.frames_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.filter.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.train_config().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if let TextEncoderConfig::Toy { dim } = self.text_encoder {
            if dim < 2 {
                return bad(format!("toy text encoder needs dim >= 2, got {dim}"));
            }
        }
        if self.mtg.n_candidates == 0 {
            return bad("mtg.n_candidates must be >= 1".into());
        }
        if self.eval_set.n_candidates != crate::annotate::TEXTS_PER_CANDIDATE {
            return bad(format!("eval_set.n_candidates must be {}", crate::annotate::TEXTS_PER_CANDIDATE));
        }
        if self.eval_set.max_video_pairs_per_caption_pair == 0 {
            return bad("eval_set.max_video_pairs_per_caption_pair must be >= 1".into());
        }
        if self.eval.frames == 0 || self.eval.query_frames == 0 || self.eval.frame_sweep.contains(&0) {
            return bad("frame counts must be >= 1".into());
        }
        if !(self.eval.temperature > 0.0) {
            return bad("eval.temperature must be > 0".into());
        }
        let s = self.triplets.split;
        if !(s.val_fraction >= 0.0 && s.test_fraction >= 0.0 && s.val_fraction + s.test_fraction <= 1.0) {
            return bad("split fractions must be >= 0 and sum to at most 1".into());
        }
        if self.annotate.lease_seconds <= 0 {
            return bad("annotate.lease_seconds must be positive".into());
        }
        Ok(())
    }

    pub fn train_config(&self) -> HnNceConfig {
        HnNceConfig { seed: self.seed, ..self.train.clone() }
    }
}
