//! Exact mining of caption pairs at token edit distance one.
//!
//! Every caption is indexed under its own token sequence and under each
//! sequence obtained by deleting one token (a symmetric-delete neighbourhood
//! of radius one, over tokens instead of characters). Two captions at edit
//! distance one always share a bucket:
//!
//! * substitution at position `p`: both delete position `p`;
//! * insertion/deletion: the shorter caption's full key equals one deletion
//!   key of the longer caption.
//!
//! Bucket collisions are only candidates and are verified exactly, so the
//! output has no false positives.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::caption_key;

/// Captions longer than this are not indexed.
pub const MAX_TOKENS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditKind {
    Substitute,
    Insert,
    Delete,
}

impl EditKind {
    pub fn reversed(self) -> EditKind {
        match self {
            EditKind::Substitute => EditKind::Substitute,
            EditKind::Insert => EditKind::Delete,
            EditKind::Delete => EditKind::Insert,
        }
    }
}

/// Two captions one token edit apart. `caption_a < caption_b`; the edit is
/// described from `caption_a`'s point of view.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CaptionPair {
    pub caption_a: String,
    pub caption_b: String,
    pub edit_kind: EditKind,
    pub diff_a: Option<String>,
    pub diff_b: Option<String>,
    pub position: usize,
}

impl CaptionPair {
    /// Build the pair for two token sequences, or `None` when they are not
    /// exactly one token edit apart. The result is oriented so that
    /// `caption_a < caption_b`.
    pub fn from_tokens<S: AsRef<str>>(x: &[S], y: &[S]) -> Option<CaptionPair> {
        let x: Vec<&str> = x.iter().map(AsRef::as_ref).collect();
        let y: Vec<&str> = y.iter().map(AsRef::as_ref).collect();
        let (kx, ky) = (caption_key(&x), caption_key(&y));
        let (a, b, ka, kb) = match kx.cmp(&ky) {
            std::cmp::Ordering::Less => (&x, &y, kx, ky),
            std::cmp::Ordering::Greater => (&y, &x, ky, kx),
            std::cmp::Ordering::Equal => return None,
        };
        let edit = single_edit(a, b)?;
        let tok = |s: &[&str], i: Option<usize>| i.map(|i| s[i].to_owned());
        Some(CaptionPair {
            caption_a: ka,
            caption_b: kb,
            edit_kind: edit.kind,
            diff_a: tok(a, edit.index_a),
            diff_b: tok(b, edit.index_b),
            position: edit.position,
        })
    }

    /// The same edit seen from `caption_b` (query and target swapped).
    pub fn directed(&self, from_a: bool) -> DirectedEdit<'_> {
        if from_a {
            DirectedEdit {
                source: &self.caption_a,
                target: &self.caption_b,
                kind: self.edit_kind,
                removed: self.diff_a.as_deref(),
                added: self.diff_b.as_deref(),
            }
        } else {
            DirectedEdit {
                source: &self.caption_b,
                target: &self.caption_a,
                kind: self.edit_kind.reversed(),
                removed: self.diff_b.as_deref(),
                added: self.diff_a.as_deref(),
            }
        }
    }
}

/// One direction of a [`CaptionPair`]: going from `source` to `target`
/// removes `removed` and adds `added`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectedEdit<'a> {
    pub source: &'a str,
    pub target: &'a str,
    pub kind: EditKind,
    pub removed: Option<&'a str>,
    pub added: Option<&'a str>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SingleEdit {
    pub kind: EditKind,
    pub index_a: Option<usize>,
    pub index_b: Option<usize>,
    pub position: usize,
}

/// Exact test for token edit distance one. For insertions and deletions
/// of a repeated token the leftmost position is reported.
pub fn single_edit<T: PartialEq>(a: &[T], b: &[T]) -> Option<SingleEdit> {
    let prefix = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    match a.len() as isize - b.len() as isize {
        0 => {
            if prefix == a.len() || a[prefix + 1..] != b[prefix + 1..] {
                return None;
            }
            Some(SingleEdit {
                kind: EditKind::Substitute,
                index_a: Some(prefix),
                index_b: Some(prefix),
                position: prefix,
            })
        }
        -1 => (a[prefix..] == b[prefix + 1..]).then_some(SingleEdit {
            kind: EditKind::Insert,
            index_a: None,
            index_b: Some(prefix),
            position: prefix,
        }),
        1 => (a[prefix + 1..] == b[prefix..]).then_some(SingleEdit {
            kind: EditKind::Delete,
            index_a: Some(prefix),
            index_b: None,
            position: prefix,
        }),
        _ => None,
    }
}

type TokenId = u32;
type CaptionId = u32;

/// Deletion-neighbourhood index over a set of distinct token sequences.
#[derive(Debug, Default)]
pub struct DeletionIndex {
    vocab: Vec<String>,
    token_ids: HashMap<String, TokenId>,
    captions: Vec<Vec<TokenId>>,
    keys: Vec<String>,
    buckets: HashMap<Vec<TokenId>, Vec<CaptionId>>,
    skipped: usize,
}

/// Full key plus all single-token deletions, duplicates collapsed.
fn deletion_keys(tokens: &[TokenId]) -> Vec<Vec<TokenId>> {
    let mut keys = Vec::with_capacity(tokens.len() + 1);
    keys.push(tokens.to_vec());
    for i in 0..tokens.len() {
        // deleting either copy of a repeated neighbour gives the same key
        if i > 0 && tokens[i] == tokens[i - 1] {
            continue;
        }
        let mut k = Vec::with_capacity(tokens.len() - 1);
        k.extend_from_slice(&tokens[..i]);
        k.extend_from_slice(&tokens[i + 1..]);
        keys.push(k);
    }
    keys
}

impl DeletionIndex {
    /// Index `captions` on the current rayon pool. Input order does not
    /// matter: captions are deduplicated and sorted by key first.
    pub fn build<S: AsRef<str> + Sync>(captions: &[Vec<S>]) -> DeletionIndex {
        let mut keyed: Vec<(String, &Vec<S>)> = captions
            .par_iter()
            .map(|toks| (caption_key(toks), toks))
            .collect();
        keyed.par_sort_unstable_by(|x, y| x.0.cmp(&y.0));
        keyed.dedup_by(|x, y| x.0 == y.0);

        let mut skipped = 0;
        let mut vocab = Vec::new();
        let mut token_ids: HashMap<String, TokenId> = HashMap::new();
        let mut encoded = Vec::with_capacity(keyed.len());
        let mut keys = Vec::with_capacity(keyed.len());
        for (key, toks) in &keyed {
            if toks.len() > MAX_TOKENS {
                log::warn!("skipping caption with {} tokens (> {MAX_TOKENS}): {key:.60}", toks.len());
                skipped += 1;
                continue;
            }
            let ids: Vec<TokenId> = toks
                .iter()
                .map(|t| {
                    let t = t.as_ref();
                    *token_ids.entry(t.to_owned()).or_insert_with(|| {
                        vocab.push(t.to_owned());
                        (vocab.len() - 1) as TokenId
                    })
                })
                .collect();
            encoded.push(ids);
            keys.push(key.clone());
        }

        let mut entries: Vec<(Vec<TokenId>, CaptionId)> = encoded
            .par_iter()
            .enumerate()
            .flat_map_iter(|(id, toks)| {
                deletion_keys(toks).into_iter().map(move |k| (k, id as CaptionId))
            })
            .collect();
        entries.par_sort_unstable();
        entries.dedup();

        let mut buckets: HashMap<Vec<TokenId>, Vec<CaptionId>> = HashMap::new();
        for (key, id) in entries {
            buckets.entry(key).or_default().push(id);
        }

        DeletionIndex {
            vocab,
            token_ids,
            captions: encoded,
            keys,
            buckets,
            skipped,
        }
    }

    pub fn num_captions(&self) -> usize {
        self.captions.len()
    }

    pub fn num_buckets(&self) -> usize {
        self.buckets.len()
    }

    /// Number of input captions left out for exceeding [`MAX_TOKENS`].
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    fn decode(&self, ids: &[TokenId]) -> Vec<&str> {
        ids.iter().map(|&t| self.vocab[t as usize].as_str()).collect()
    }

    pub fn caption_key(&self, id: usize) -> &str {
        &self.keys[id]
    }

    /// Caption id for a canonical key, if indexed.
    pub fn find(&self, key: &str) -> Option<usize> {
        self.keys.binary_search_by(|k| k.as_str().cmp(key)).ok()
    }

    fn encode_key(&self, key: &str) -> Option<Vec<TokenId>> {
        if key.is_empty() {
            return Some(Vec::new());
        }
        key.split(' ').map(|t| self.token_ids.get(t).copied()).collect()
    }

    /// Bucket keys contributed by caption `id`, as joined strings.
    pub fn keys_of(&self, id: usize) -> Vec<String> {
        deletion_keys(&self.captions[id])
            .iter()
            .map(|k| caption_key(&self.decode(k)))
            .collect()
    }

    /// Caption ids stored under `key`.
    pub fn bucket(&self, key: &str) -> Option<&[u32]> {
        self.buckets.get(&self.encode_key(key)?).map(Vec::as_slice)
    }

    /// Every unordered pair of indexed captions at token edit distance one,
    /// sorted by `(caption_a, caption_b)`.
    pub fn mine_pairs(&self) -> Vec<CaptionPair> {
        let mut found: Vec<(CaptionId, CaptionId)> = self
            .buckets
            .par_iter()
            .filter(|(_, ids)| ids.len() > 1)
            .flat_map_iter(|(_, ids)| {
                ids.iter().enumerate().flat_map(move |(n, &i)| {
                    ids[n + 1..].iter().filter_map(move |&j| {
                        let (a, b) = (&self.captions[i as usize], &self.captions[j as usize]);
                        single_edit(a, b).map(|_| (i, j))
                    })
                })
            })
            .collect();
        // ids follow key order, so (i, j) order is (caption_a, caption_b) order
        found.par_sort_unstable();
        found.dedup();
        found
            .into_par_iter()
            .map(|(i, j)| {
                let a = self.decode(&self.captions[i as usize]);
                let b = self.decode(&self.captions[j as usize]);
                CaptionPair::from_tokens(&a, &b).expect("verified edit-distance-1 pair")
            })
            .collect()
    }
}

/// Index and mine on a dedicated pool of `workers` threads (0 = rayon default).
pub fn mine_pairs_with_workers<S: AsRef<str> + Sync>(
    captions: &[Vec<S>],
    workers: usize,
) -> Vec<CaptionPair> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool");
    pool.install(|| DeletionIndex::build(captions).mine_pairs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeSet;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    /// Plain Levenshtein over tokens, independent of `single_edit`.
    fn token_distance(a: &[String], b: &[String]) -> usize {
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for i in 1..=a.len() {
            let mut cur = vec![i; b.len() + 1];
            for j in 1..=b.len() {
                let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
                cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
            }
            prev = cur;
        }
        prev[b.len()]
    }

    fn brute_force(captions: &[Vec<String>]) -> BTreeSet<(String, String)> {
        let mut uniq: Vec<&Vec<String>> = captions.iter().collect();
        uniq.sort_by_key(|c| caption_key(c));
        uniq.dedup();
        let mut out = BTreeSet::new();
        for i in 0..uniq.len() {
            for j in i + 1..uniq.len() {
                if token_distance(uniq[i], uniq[j]) == 1 {
                    out.insert((caption_key(uniq[i]), caption_key(uniq[j])));
                }
            }
        }
        out
    }

    fn random_corpus(seed: u64, n: usize, vocab: usize, max_len: usize) -> Vec<Vec<String>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let len = rng.random_range(1..=max_len);
                (0..len).map(|_| format!("w{}", rng.random_range(0..vocab))).collect()
            })
            .collect()
    }

    #[test]
    fn keys_of_two_token_caption() {
        let idx = DeletionIndex::build(&[toks("a b")]);
        let keys: BTreeSet<String> = idx.keys_of(0).into_iter().collect();
        assert_eq!(keys, ["a b", "b", "a"].iter().map(|s| s.to_string()).collect());
    }

    #[test]
    fn repeated_tokens_collapse_keys() {
        let idx = DeletionIndex::build(&[toks("a a b")]);
        assert_eq!(idx.keys_of(0), ["a a b", "a b", "a a"]);
    }

    #[test]
    fn empty_index() {
        let idx = DeletionIndex::build::<String>(&[]);
        assert_eq!(idx.num_captions(), 0);
        assert_eq!(idx.num_buckets(), 0);
        assert!(idx.mine_pairs().is_empty());
    }

    #[test]
    fn substitution_with_shared_context() {
        let caps = [toks("young woman smiling"), toks("old woman smiling"), toks("young couple smiling")];
        let pairs = DeletionIndex::build(&caps).mine_pairs();
        assert_eq!(pairs.len(), 2);
        let p0 = &pairs[0];
        assert_eq!((p0.caption_a.as_str(), p0.caption_b.as_str()), ("old woman smiling", "young woman smiling"));
        assert_eq!(p0.edit_kind, EditKind::Substitute);
        assert_eq!((p0.diff_a.as_deref(), p0.diff_b.as_deref(), p0.position), (Some("old"), Some("young"), 0));
        let p1 = &pairs[1];
        assert_eq!((p1.caption_a.as_str(), p1.caption_b.as_str()), ("young couple smiling", "young woman smiling"));
        assert_eq!((p1.diff_a.as_deref(), p1.diff_b.as_deref(), p1.position), (Some("couple"), Some("woman"), 1));
    }

    #[test]
    fn insertion_pair() {
        let pairs = DeletionIndex::build(&[toks("sky timelapse"), toks("clouds sky timelapse")]).mine_pairs();
        assert_eq!(pairs.len(), 1);
        let p = &pairs[0];
        assert_eq!(p.caption_a, "clouds sky timelapse");
        assert_eq!(p.edit_kind, EditKind::Delete);
        assert_eq!(p.diff_a.as_deref(), Some("clouds"));
        let fwd = p.directed(false);
        assert_eq!(fwd.source, "sky timelapse");
        assert_eq!(fwd.kind, EditKind::Insert);
        assert_eq!(fwd.added, Some("clouds"));
        assert_eq!(fwd.removed, None);
    }

    #[test]
    fn insertion_from_a_perspective() {
        let p = CaptionPair::from_tokens(&toks("a c"), &toks("a b c")).unwrap();
        assert_eq!(p.caption_a, "a b c");
        let p = CaptionPair::from_tokens(&toks("b"), &toks("b c")).unwrap();
        assert_eq!((p.caption_a.as_str(), p.edit_kind), ("b", EditKind::Insert));
        assert_eq!((p.diff_a.as_deref(), p.diff_b.as_deref(), p.position), (None, Some("c"), 1));
    }

    #[test]
    fn self_pair_is_absent() {
        assert!(CaptionPair::from_tokens(&toks("a b"), &toks("a b")).is_none());
        assert!(DeletionIndex::build(&[toks("a b"), toks("a b")]).mine_pairs().is_empty());
    }

    #[test]
    fn distance_one_pairs_share_a_bucket() {
        let caps = random_corpus(7, 1000, 6, 4)
            .into_iter()
            .map(|c| if c.len() == 4 { c } else { vec!["w0".into(); 4] })
            .collect::<Vec<_>>();
        let idx = DeletionIndex::build(&caps);
        let oracle = brute_force(&caps);
        assert!(!oracle.is_empty());
        for (a, b) in &oracle {
            let (ia, ib) = (idx.find(a).unwrap() as u32, idx.find(b).unwrap() as u32);
            let ka: BTreeSet<String> = idx.keys_of(ia as usize).into_iter().collect();
            let shared = idx
                .keys_of(ib as usize)
                .into_iter()
                .any(|k| ka.contains(&k) && idx.bucket(&k).is_some_and(|m| m.contains(&ia) && m.contains(&ib)));
            assert!(shared, "{a:?} / {b:?} share no bucket");
        }
    }

    #[test]
    fn matches_brute_force_on_random_corpora() {
        for seed in 0..5 {
            let caps = random_corpus(seed, 300, 5, 5);
            let got: BTreeSet<(String, String)> = DeletionIndex::build(&caps)
                .mine_pairs()
                .into_iter()
                .map(|p| (p.caption_a, p.caption_b))
                .collect();
            assert_eq!(got, brute_force(&caps), "seed {seed}");
        }
    }

    #[test]
    fn long_captions_are_skipped() {
        let long: Vec<String> = (0..MAX_TOKENS + 1).map(|i| format!("t{i}")).collect();
        let idx = DeletionIndex::build(&[long, toks("a")]);
        assert_eq!(idx.skipped(), 1);
        assert_eq!(idx.num_captions(), 1);
    }

    #[test]
    fn worker_count_does_not_change_output() {
        let caps = random_corpus(3, 2000, 8, 6);
        let one = mine_pairs_with_workers(&caps, 1);
        let four = mine_pairs_with_workers(&caps, 4);
        assert_eq!(one, four);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn pair_invariants(caps in proptest::collection::vec(
            proptest::collection::vec(0u8..4, 0..5), 0..40)) {
            let caps: Vec<Vec<String>> = caps.into_iter()
                .map(|c| c.into_iter().map(|t| format!("t{t}")).collect()).collect();
            let pairs = DeletionIndex::build(&caps).mine_pairs();
            let got: BTreeSet<_> = pairs.iter().map(|p| (p.caption_a.clone(), p.caption_b.clone())).collect();
            prop_assert_eq!(&got, &brute_force(&caps));
            for p in &pairs {
                prop_assert!(p.caption_a < p.caption_b);
                match p.edit_kind {
                    EditKind::Substitute => prop_assert!(p.diff_a.is_some() && p.diff_b.is_some()),
                    EditKind::Insert => prop_assert!(p.diff_a.is_none() && p.diff_b.is_some()),
                    EditKind::Delete => prop_assert!(p.diff_a.is_some() && p.diff_b.is_none()),
                }
            }
            let mut reversed = caps.clone();
            reversed.reverse();
            prop_assert_eq!(DeletionIndex::build(&reversed).mine_pairs(), pairs);
        }
    }
}
