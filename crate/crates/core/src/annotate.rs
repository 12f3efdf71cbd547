//! Test-set curation: candidate queue with leases, validated decisions, an
//! append-only decision log and export of the kept triplets.
//!
//! The queue itself holds no I/O; callers append accepted decisions to the
//! log, and [`AnnotationQueue::replay`] rebuilds the same state from it.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::BufWriter;
use std::path::Path;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedspace::NormalizedSim;
use crate::filtering::{FilterError, FramesManifest};
use crate::jsonl::{append_jsonl, read_jsonl, JsonlError};
use crate::mtg::{ModificationText, TextSource};
use crate::tripletset::{triplet_id, CoVRTriplet};

pub const TEXTS_PER_CANDIDATE: usize = 3;
pub const DEFAULT_LEASE_SECONDS: i64 = 600;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("unknown candidate {0:?}")]
    UnknownCandidate(String),
    #[error("candidate {0:?} is leased to another annotator")]
    LeasedToOther(String),
    #[error("candidate {0:?} already has a different decision")]
    Conflict(String),
    #[error("invalid decision: {0}")]
    Invalid(String),
    #[error("invalid candidate {id:?}: {message}")]
    BadCandidate { id: String, message: String },
    #[error("duplicate candidate id {0:?}")]
    DuplicateCandidate(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Frames(#[from] FilterError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRef {
    pub video_id: String,
    pub frame_index: usize,
}

impl FrameRef {
    pub fn url(&self) -> String {
        format!("/frames/{}/{}.jpg", self.video_id, self.frame_index)
    }
}

/// First, middle and last frame of a video.
pub fn three_frames(frames: &FramesManifest, video_id: &str) -> Result<Vec<FrameRef>, FilterError> {
    let n = frames
        .frame_count(video_id)
        .ok_or_else(|| FilterError::MissingFrameCount(video_id.to_owned()))?;
    Ok([0, n / 2, n - 1]
        .into_iter()
        .map(|frame_index| FrameRef { video_id: video_id.to_owned(), frame_index })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRefs {
    pub query: Vec<FrameRef>,
    pub target: Vec<FrameRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationCandidate {
    pub candidate_id: String,
    pub query_video: String,
    pub target_video: String,
    pub texts: Vec<String>,
    pub frame_refs: FrameRefs,
    pub source: TextSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_ids: Option<Vec<u32>>,
    pub caption_a: String,
    pub caption_b: String,
    pub text_sim: NormalizedSim,
    pub visual_sim: NormalizedSim,
    #[serde(default)]
    pub flow_magnitude_target: Option<f64>,
}

impl AnnotationCandidate {
    /// Candidate from a triplet generated with three texts.
    pub fn from_triplet(t: &CoVRTriplet, frames: &FramesManifest) -> Result<Self, AnnotateError> {
        let texts = t.modification.candidates.clone().unwrap_or_else(|| vec![t.text().to_owned()]);
        let c = AnnotationCandidate {
            candidate_id: triplet_id(&t.query_video, &t.target_video),
            query_video: t.query_video.clone(),
            target_video: t.target_video.clone(),
            texts,
            frame_refs: FrameRefs {
                query: three_frames(frames, &t.query_video)?,
                target: three_frames(frames, &t.target_video)?,
            },
            source: t.modification.source,
            template_ids: t.modification.candidate_template_ids.clone(),
            caption_a: t.caption_a.clone(),
            caption_b: t.caption_b.clone(),
            text_sim: t.text_sim,
            visual_sim: t.visual_sim,
            flow_magnitude_target: t.flow_magnitude_target,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), AnnotateError> {
        let bad = |m: String| Err(AnnotateError::BadCandidate { id: self.candidate_id.clone(), message: m });
        if self.texts.len() != TEXTS_PER_CANDIDATE {
            return bad(format!("expected {TEXTS_PER_CANDIDATE} texts, got {}", self.texts.len()));
        }
        if self.frame_refs.query.len() != 3 || self.frame_refs.target.len() != 3 {
            return bad("expected 3 frame references per video".into());
        }
        if self.query_video == self.target_video {
            return bad("query and target are the same video".into());
        }
        if let Some(ids) = &self.template_ids {
            if ids.len() != self.texts.len() {
                return bad("template_ids does not match texts".into());
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Keep,
    Discard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    BadText,
    TooSimilar,
    TooDifferent,
    LowQuality,
    CaptionsTooSimilar,
}

impl DiscardReason {
    pub fn name(self) -> &'static str {
        match self {
            DiscardReason::BadText => "bad_text",
            DiscardReason::TooSimilar => "too_similar",
            DiscardReason::TooDifferent => "too_different",
            DiscardReason::LowQuality => "low_quality",
            DiscardReason::CaptionsTooSimilar => "captions_too_similar",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationDecision {
    pub candidate_id: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_index: Option<usize>,
    pub annotator: String,
    pub timestamp: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discard_reason: Option<DiscardReason>,
}

impl AnnotationDecision {
    pub fn keep(candidate_id: &str, chosen_index: usize, annotator: &str, timestamp: DateTime<Utc>) -> Self {
        AnnotationDecision {
            candidate_id: candidate_id.to_owned(),
            verdict: Verdict::Keep,
            chosen_index: Some(chosen_index),
            annotator: annotator.to_owned(),
            timestamp,
            discard_reason: None,
        }
    }

    pub fn discard(candidate_id: &str, reason: Option<DiscardReason>, annotator: &str, timestamp: DateTime<Utc>) -> Self {
        AnnotationDecision {
            candidate_id: candidate_id.to_owned(),
            verdict: Verdict::Discard,
            chosen_index: None,
            annotator: annotator.to_owned(),
            timestamp,
            discard_reason: reason,
        }
    }

    pub fn validate(&self) -> Result<(), AnnotateError> {
        let bad = |m: &str| Err(AnnotateError::Invalid(m.to_owned()));
        if self.annotator.trim().is_empty() {
            return bad("annotator must be nonempty");
        }
        match (self.verdict, self.chosen_index) {
            (Verdict::Keep, None) => bad("keep requires chosen_index"),
            (Verdict::Keep, Some(i)) if i >= TEXTS_PER_CANDIDATE => bad("chosen_index must be 0, 1 or 2"),
            (Verdict::Discard, Some(_)) => bad("discard must not carry chosen_index"),
            (Verdict::Keep, _) if self.discard_reason.is_some() => bad("keep must not carry discard_reason"),
            _ => Ok(()),
        }
    }

    /// Equal up to the timestamp: a resubmission of the same choice.
    pub fn same_payload(&self, other: &AnnotationDecision) -> bool {
        self.candidate_id == other.candidate_id
            && self.verdict == other.verdict
            && self.chosen_index == other.chosen_index
            && self.annotator == other.annotator
            && self.discard_reason == other.discard_reason
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Lease {
    annotator: String,
    expires: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmitOutcome {
    Recorded,
    /// Identical resubmission; nothing new to log.
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueStats {
    pub total: usize,
    pub decided: usize,
    pub kept: usize,
    pub discarded: usize,
    pub leased: usize,
    pub remaining: usize,
    /// `None` before the first decision.
    pub discard_rate: Option<f64>,
    pub discard_reasons: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSetExport {
    pub triplets: Vec<CoVRTriplet>,
    pub stats: QueueStats,
}

#[derive(Debug, Clone)]
pub struct AnnotationQueue {
    candidates: Vec<AnnotationCandidate>,
    index: HashMap<String, usize>,
    decisions: HashMap<String, AnnotationDecision>,
    leases: HashMap<String, Lease>,
    lease: Duration,
}

impl AnnotationQueue {
    pub fn new(candidates: Vec<AnnotationCandidate>, lease: Duration) -> Result<Self, AnnotateError> {
        let mut index = HashMap::new();
        for (i, c) in candidates.iter().enumerate() {
            c.validate()?;
            if index.insert(c.candidate_id.clone(), i).is_some() {
                return Err(AnnotateError::DuplicateCandidate(c.candidate_id.clone()));
            }
        }
        Ok(AnnotationQueue { candidates, index, decisions: HashMap::new(), leases: HashMap::new(), lease })
    }

    /// Rebuild the decided state from a decision log.
    pub fn replay(
        candidates: Vec<AnnotationCandidate>,
        lease: Duration,
        log: impl IntoIterator<Item = AnnotationDecision>,
    ) -> Result<Self, AnnotateError> {
        let mut q = Self::new(candidates, lease)?;
        for d in log {
            let at = d.timestamp;
            q.submit(d, at)?;
        }
        q.leases.clear();
        Ok(q)
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn candidate(&self, id: &str) -> Option<&AnnotationCandidate> {
        self.index.get(id).map(|&i| &self.candidates[i])
    }

    pub fn decision(&self, id: &str) -> Option<&AnnotationDecision> {
        self.decisions.get(id)
    }

    /// Decisions in pool order.
    pub fn decisions(&self) -> Vec<&AnnotationDecision> {
        self.candidates.iter().filter_map(|c| self.decisions.get(&c.candidate_id)).collect()
    }

    fn leased_to_other(&self, id: &str, annotator: &str, now: DateTime<Utc>) -> bool {
        self.leases.get(id).is_some_and(|l| l.annotator != annotator && l.expires > now)
    }

    /// The annotator's current lease if still valid, otherwise the first
    /// undecided candidate nobody else holds. Acquiring or re-serving a
    /// candidate (re)starts the lease.
    pub fn next_candidate(&mut self, annotator: &str, now: DateTime<Utc>) -> Option<&AnnotationCandidate> {
        let held = self.candidates.iter().position(|c| {
            !self.decisions.contains_key(&c.candidate_id)
                && self.leases.get(&c.candidate_id).is_some_and(|l| l.annotator == annotator && l.expires > now)
        });
        let pick = held.or_else(|| {
            self.candidates.iter().position(|c| {
                !self.decisions.contains_key(&c.candidate_id) && !self.leased_to_other(&c.candidate_id, annotator, now)
            })
        })?;
        let id = self.candidates[pick].candidate_id.clone();
        self.leases.insert(id, Lease { annotator: annotator.to_owned(), expires: now + self.lease });
        Some(&self.candidates[pick])
    }

    /// What [`submit`](Self::submit) would do, without changing state.
    pub fn check_submit(&self, decision: &AnnotationDecision, now: DateTime<Utc>) -> Result<SubmitOutcome, AnnotateError> {
        decision.validate()?;
        let id = &decision.candidate_id;
        if !self.index.contains_key(id) {
            return Err(AnnotateError::UnknownCandidate(id.clone()));
        }
        if let Some(existing) = self.decisions.get(id) {
            return if existing.same_payload(decision) {
                Ok(SubmitOutcome::Duplicate)
            } else {
                Err(AnnotateError::Conflict(id.clone()))
            };
        }
        if self.leased_to_other(id, &decision.annotator, now) {
            return Err(AnnotateError::LeasedToOther(id.clone()));
        }
        Ok(SubmitOutcome::Recorded)
    }

    pub fn submit(&mut self, decision: AnnotationDecision, now: DateTime<Utc>) -> Result<SubmitOutcome, AnnotateError> {
        let outcome = self.check_submit(&decision, now)?;
        if outcome == SubmitOutcome::Recorded {
            self.leases.remove(&decision.candidate_id);
            self.decisions.insert(decision.candidate_id.clone(), decision);
        }
        Ok(outcome)
    }

    /// Lease expiry of `id`, if currently leased.
    pub fn lease_expiry(&self, id: &str, now: DateTime<Utc>) -> Option<DateTime<Utc>> {
        self.leases.get(id).filter(|l| l.expires > now).map(|l| l.expires)
    }

    pub fn stats(&self, now: DateTime<Utc>) -> QueueStats {
        let mut kept = 0;
        let mut discarded = 0;
        let mut reasons: BTreeMap<String, usize> = BTreeMap::new();
        for d in self.decisions.values() {
            match d.verdict {
                Verdict::Keep => kept += 1,
                Verdict::Discard => {
                    discarded += 1;
                    let name = d.discard_reason.map_or("unspecified", DiscardReason::name);
                    *reasons.entry(name.to_owned()).or_default() += 1;
                }
            }
        }
        let decided = kept + discarded;
        let leased = self
            .leases
            .iter()
            .filter(|(id, l)| l.expires > now && !self.decisions.contains_key(*id))
            .count();
        QueueStats {
            total: self.candidates.len(),
            decided,
            kept,
            discarded,
            leased,
            remaining: self.candidates.len() - decided,
            discard_rate: (decided > 0).then(|| discarded as f64 / decided as f64),
            discard_reasons: reasons,
        }
    }

    /// Kept candidates as triplets carrying the chosen text, in pool order.
    pub fn export(&self, now: DateTime<Utc>) -> TestSetExport {
        let mut triplets = Vec::new();
        for c in &self.candidates {
            let Some(d) = self.decisions.get(&c.candidate_id) else { continue };
            let Some(i) = d.chosen_index.filter(|_| d.verdict == Verdict::Keep) else { continue };
            triplets.push(CoVRTriplet {
                query_video: c.query_video.clone(),
                target_video: c.target_video.clone(),
                modification: ModificationText {
                    text: c.texts[i].clone(),
                    source: c.source,
                    template_id: c.template_ids.as_ref().map(|t| t[i]),
                    candidates: Some(c.texts.clone()),
                    candidate_template_ids: c.template_ids.clone(),
                },
                caption_a: c.caption_a.clone(),
                caption_b: c.caption_b.clone(),
                text_sim: c.text_sim,
                visual_sim: c.visual_sim,
                flow_magnitude_target: c.flow_magnitude_target,
            });
        }
        TestSetExport { triplets, stats: self.stats(now) }
    }
}

/// Append-only JSONL writer for accepted decisions.
pub struct DecisionLog {
    writer: BufWriter<File>,
}

impl DecisionLog {
    pub fn open(path: &Path) -> Result<Self, AnnotateError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(DecisionLog { writer: BufWriter::new(file) })
    }

    pub fn append(&mut self, d: &AnnotationDecision) -> Result<(), AnnotateError> {
        append_jsonl(&mut self.writer, d)?;
        Ok(())
    }
}

/// Every decision in a log file; a missing file is an empty log.
pub fn read_decision_log(path: &Path) -> Result<Vec<AnnotationDecision>, AnnotateError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(read_jsonl(path)?)
}
