//! Deterministic synthetic world: captions, videos, frame embeddings and a
//! lexicon, small enough to run the whole pipeline in seconds.
//!
//! Grammar captions have the shape `a <colour> <animal> <verb> <manner>`, so
//! two of them are one edit apart exactly when they differ in one slot.
//! Distractor captions use disjoint made-up words and never pair. Frames are
//! noisy copies of the caption's toy text embedding, which makes the visual
//! and text spaces share structure.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{save_corpus, CaptionRecord, Corpus, CorpusError, CorpusFormat};
use crate::embedspace::{frame_id, normalize_f64, toy_embed, EmbedError, EmbeddingStore};
use crate::filtering::{FilterError, FramesManifest};

pub const COLOURS: [&str; 8] = ["red", "blue", "green", "yellow", "black", "white", "brown", "orange"];
pub const ANIMALS: [&str; 8] = ["dog", "cat", "horse", "bird", "cow", "fox", "goat", "sheep"];
pub const VERBS: [&str; 6] = ["runs", "sleeps", "jumps", "eats", "walks", "sits"];
pub const MANNERS: [&str; 6] = ["slowly", "quickly", "happily", "quietly", "calmly", "eagerly"];

const SYLLABLES: [&str; 12] = ["ka", "lo", "mi", "ru", "ten", "vo", "shi", "pa", "dre", "nu", "gol", "fi"];

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("requested {requested} grammar captions but only {available} exist")]
    TooManyCaptions { requested: usize, available: usize },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyWorldConfig {
    pub seed: u64,
    /// Video ids are `<prefix>0000`, `<prefix>0001`, ...
    pub id_prefix: String,
    pub dim: usize,
    pub grammar_captions: usize,
    pub distractor_captions: usize,
    pub videos_per_distractor: usize,
    pub frames_per_video: usize,
    /// Standard deviation of per-frame noise relative to the unit caption
    /// vector.
    pub frame_noise: f64,
}

impl Default for ToyWorldConfig {
    fn default() -> Self {
        ToyWorldConfig {
            seed: 0,
            id_prefix: "v".into(),
            dim: 64,
            grammar_captions: 400,
            distractor_captions: 100,
            videos_per_distractor: 2,
            frames_per_video: 15,
            frame_noise: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyWorld {
    pub corpus: Corpus,
    pub frames: FramesManifest,
    pub frame_embeddings: EmbeddingStore,
    pub dictionary: Vec<String>,
    pub zipf: Vec<(String, f64)>,
}

fn pseudo_word(i: usize) -> String {
    let n = SYLLABLES.len();
    format!("{}{}{}", SYLLABLES[i % n], SYLLABLES[(i / n) % n], SYLLABLES[(i / (n * n)) % n])
}

pub fn grammar_caption(c: usize, a: usize, v: usize, m: usize) -> String {
    format!("a {} {} {} {}", COLOURS[c], ANIMALS[a], VERBS[v], MANNERS[m])
}

impl ToyWorld {
    pub fn generate(cfg: &ToyWorldConfig) -> Result<Self, SynthError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut grid: Vec<[usize; 4]> = Vec::new();
        for c in 0..COLOURS.len() {
            for a in 0..ANIMALS.len() {
                for v in 0..VERBS.len() {
                    for m in 0..MANNERS.len() {
                        grid.push([c, a, v, m]);
                    }
                }
            }
        }
        if cfg.grammar_captions > grid.len() {
            return Err(SynthError::TooManyCaptions { requested: cfg.grammar_captions, available: grid.len() });
        }
        grid.shuffle(&mut rng);
        grid.truncate(cfg.grammar_captions);
        grid.sort_unstable();

        let mut captions: Vec<(String, usize)> =
            grid.iter().map(|&[c, a, v, m]| (grammar_caption(c, a, v, m), 1)).collect();
        for i in 0..cfg.distractor_captions {
            let words: Vec<String> = (0..3).map(|k| pseudo_word(3 * i + k)).collect();
            captions.push((words.join(" "), cfg.videos_per_distractor));
        }

        let mut records = Vec::new();
        let mut frame_counts = Vec::new();
        let mut frame_vecs = Vec::new();
        for (caption, n_videos) in &captions {
            let base = toy_embed(caption, cfg.dim);
            for _ in 0..*n_videos {
                let vid = format!("{}{:04}", cfg.id_prefix, records.len());
                let flow: f64 = rng.random_range(0.0..3.0);
                let duration: f64 = rng.random_range(4.0..30.0);
                let mut rec = CaptionRecord::new(vid.clone(), caption.clone()).with_flow((flow * 1000.0).round() / 1000.0);
                rec.duration_s = Some((duration * 10.0).round() / 10.0);
                records.push(rec);
                frame_counts.push((vid.clone(), cfg.frames_per_video));
                for f in 0..cfg.frames_per_video {
                    let scale = cfg.frame_noise / (cfg.dim as f64).sqrt();
                    let mut v: Vec<f64> = base
                        .iter()
                        .map(|&x| x as f64 + scale * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    normalize_f64(&mut v);
                    frame_vecs.push((frame_id(&vid, f), v.into_iter().map(|x| x as f32).collect::<Vec<f32>>()));
                }
            }
        }

        let mut words: BTreeSet<String> = BTreeSet::new();
        words.extend(COLOURS.iter().chain(&ANIMALS).chain(&VERBS).chain(&MANNERS).map(|w| w.to_string()));
        words.insert("a".into());
        let zipf = words
            .iter()
            .map(|w| (w.clone(), if w == "a" { 7.4 } else { 4.0 + (w.len() % 3) as f64 * 0.5 }))
            .collect();

        Ok(ToyWorld {
            corpus: Corpus::from_records(records)?,
            frames: FramesManifest::new(frame_counts),
            frame_embeddings: EmbeddingStore::from_entries(cfg.dim, frame_vecs)?,
            dictionary: words.into_iter().collect(),
            zipf,
        })
    }

    /// Write `corpus.csv`, `frames.cvem`, `frames.csv`, `dictionary.txt` and
    /// `zipf.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        let io = |path: &Path| {
            let path = path.to_owned();
            move |source| SynthError::Io { path, source }
        };
        std::fs::create_dir_all(dir).map_err(io(dir))?;
        save_corpus(&self.corpus, &dir.join("corpus.csv"), CorpusFormat::Csv)?;
        self.frame_embeddings.save(&dir.join("frames.cvem"))?;
        self.frames.save(&dir.join("frames.csv"))?;
        let dict = dir.join("dictionary.txt");
        std::fs::write(&dict, self.dictionary.join("\n") + "\n").map_err(io(&dict))?;
        let zipf = dir.join("zipf.tsv");
        let body: String = self.zipf.iter().map(|(w, s)| format!("{w}\t{s}\n")).collect();
        std::fs::write(&zipf, body).map_err(io(&zipf))?;
        Ok(())
    }
}

pub const TOY_CONFIG: &str = "toy.toml";

/// Training world in `dir/data`, a held-out world with `h`-prefixed video
/// ids in `dir/heldout`, and a pipeline config at `dir/toy.toml` with paths
/// relative to it. Returns the config path.
pub fn write_toy_project(dir: &Path, seed: u64) -> Result<PathBuf, SynthError> {
    let train = ToyWorldConfig { seed, ..Default::default() };
    let heldout = ToyWorldConfig {
        seed: seed.wrapping_add(1),
        id_prefix: "h".into(),
        grammar_captions: 150,
        distractor_captions: 20,
        ..Default::default()
    };
    ToyWorld::generate(&train)?.write(&dir.join("data"))?;
    ToyWorld::generate(&heldout)?.write(&dir.join("heldout"))?;
    let config = format!(
        r#"seed = {seed}

[paths]
corpus = "data/corpus.csv"
frame_embeddings = "data/frames.cvem"
frames_manifest = "data/frames.csv"
dictionary = "data/dictionary.txt"
zipf = "data/zipf.tsv"
output_dir = "out"
heldout_corpus = "heldout/corpus.csv"
heldout_frame_embeddings = "heldout/frames.cvem"
heldout_frames_manifest = "heldout/frames.csv"

[text_encoder]
kind = "toy"
dim = {dim}

[mtg]
mode = "rule"

[eval_set]
n_val = 50
n_annotate = 50
"#,
        dim = train.dim
    );
    let path = dir.join(TOY_CONFIG);
    std::fs::write(&path, config).map_err(|source| SynthError::Io { path: path.clone(), source })?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairminer::mine_pairs_with_workers;

    #[test]
    fn default_world_shape() {
        let w = ToyWorld::generate(&ToyWorldConfig::default()).unwrap();
        assert_eq!(w.corpus.len(), 600);
        assert_eq!(w.corpus.distinct_captions().len(), 500);
        assert_eq!(w.frame_embeddings.len(), 600 * 15);
        let pairs = mine_pairs_with_workers(&w.corpus.distinct_captions(), 1);
        assert!(pairs.len() > 300, "{}", pairs.len());
        // distractors never pair
        assert!(pairs.iter().all(|p| p.caption_a.starts_with("a ") && p.caption_b.starts_with("a ")));
    }

    #[test]
    fn deterministic() {
        let cfg = ToyWorldConfig { grammar_captions: 30, distractor_captions: 5, ..Default::default() };
        let a = ToyWorld::generate(&cfg).unwrap();
        let b = ToyWorld::generate(&cfg).unwrap();
        assert_eq!(a.frame_embeddings, b.frame_embeddings);
        assert_eq!(a.corpus.records(), b.corpus.records());
    }

    #[test]
    fn pseudo_words_are_distinct() {
        let ws: BTreeSet<String> = (0..300).map(pseudo_word).collect();
        assert_eq!(ws.len(), 300);
    }
}
