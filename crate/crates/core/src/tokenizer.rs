//! BPE tokenizer with a word-boundary marker, plus corpus-driven vocabulary
//! pruning.
//!
//! Words are split on whitespace and prefixed with `▁`; training repeatedly
//! merges the most frequent adjacent symbol pair (ties broken toward the
//! lexicographically smallest pair so training is deterministic). Encoding
//! applies merges in rank order. Pruning keeps exactly the symbols that occur
//! at any stage while encoding a reference corpus — including every
//! intermediate of each merge derivation — so the pruned tokenizer encodes
//! that corpus identically to the original.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GcError, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const MASK_ID: usize = 4;

const MARKER: char = '\u{2581}'; // ▁ word-boundary marker

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vec<String>,
    ids: HashMap<String, usize>,
    merges: Vec<(String, String)>,
    merge_ranks: HashMap<(String, String), usize>,
}

/// On-disk JSON representation.
#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    version: u32,
    word_boundary_marker: String,
    specials: Vec<String>,
    vocab: Vec<String>,
    merges: Vec<(String, String)>,
}

/// Outcome of vocabulary pruning. `kept_old_ids` is ascending, so the dense
/// remap preserves relative id order (and the specials keep ids 0..=4).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VocabPruneReport {
    pub old_vocab: usize,
    pub new_vocab: usize,
    pub removed_tokens: usize,
    pub kept_old_ids: Vec<usize>,
}

impl Tokenizer {
    fn from_parts(vocab: Vec<String>, merges: Vec<(String, String)>) -> Result<Tokenizer> {
        if vocab.len() < SPECIALS.len() || SPECIALS.iter().zip(&vocab).any(|(s, v)| s != v) {
            return Err(GcError::Tokenizer("vocab must start with the five special tokens".into()));
        }
        let mut ids = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.iter().enumerate() {
            if ids.insert(tok.clone(), i).is_some() {
                return Err(GcError::Tokenizer(format!("duplicate token {tok:?}")));
            }
        }
        let mut merge_ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let joined = format!("{l}{r}");
            if !ids.contains_key(l) || !ids.contains_key(r) || !ids.contains_key(&joined) {
                return Err(GcError::Tokenizer(format!("merge ({l:?}, {r:?}) references unknown tokens")));
            }
            merge_ranks.insert((l.clone(), r.clone()), rank);
        }
        Ok(Tokenizer { vocab, ids, merges, merge_ranks })
    }

    /// Learn a BPE vocabulary from text lines. `vocab_size` bounds the total
    /// vocabulary (specials + alphabet + merged symbols); merging also stops
    /// when no pair occurs at least `min_frequency` times.
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize, min_frequency: u64) -> Result<Tokenizer> {
        if corpus.is_empty() {
            return Err(GcError::InvalidInput("tokenizer training corpus is empty".into()));
        }
        // word frequencies; each word carries the boundary marker
        let mut word_freq: BTreeMap<Vec<String>, u64> = BTreeMap::new();
        let mut alphabet: BTreeSet<String> = BTreeSet::new();
        for line in corpus {
            for word in line.as_ref().split_whitespace() {
                let mut symbols = vec![MARKER.to_string()];
                for ch in word.chars() {
                    symbols.push(ch.to_string());
                }
                // fold the marker into the first character so `▁the` merges
                // as one unit: start from [▁x, y, z] rather than [▁, x, y, z]
                if symbols.len() > 1 {
                    let first = symbols.remove(1);
                    symbols[0] = format!("{MARKER}{first}");
                }
                for s in &symbols {
                    alphabet.insert(s.clone());
                }
                *word_freq.entry(symbols).or_insert(0) += 1;
            }
        }
        if word_freq.is_empty() {
            return Err(GcError::InvalidInput("tokenizer training corpus has no words".into()));
        }
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        vocab.extend(alphabet.iter().cloned());
        if vocab_size < vocab.len() {
            return Err(GcError::InvalidConfig(format!(
                "vocab_size {vocab_size} smaller than specials + alphabet ({})",
                vocab.len()
            )));
        }
        let mut words: Vec<(Vec<String>, u64)> = word_freq.into_iter().collect();
        let mut merges: Vec<(String, String)> = Vec::new();
        while vocab.len() < vocab_size {
            // count adjacent pairs over the whole corpus
            let mut pair_freq: BTreeMap<(String, String), u64> = BTreeMap::new();
            for (symbols, freq) in &words {
                for w in symbols.windows(2) {
                    *pair_freq.entry((w[0].clone(), w[1].clone())).or_insert(0) += freq;
                }
            }
            // highest frequency wins; BTreeMap order breaks ties toward the
            // lexicographically smallest pair
            let best = pair_freq.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
            let Some(((left, right), freq)) = best else { break };
            if freq < min_frequency {
                break;
            }
            let joined = format!("{left}{right}");
            for (symbols, _) in &mut words {
                merge_in_place(symbols, &left, &right, &joined);
            }
            vocab.push(joined);
            merges.push((left, right));
        }
        Tokenizer::from_parts(vocab, merges)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Encode raw text to token ids (no [CLS]/[SEP] added).
    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.encode_inner(text, None)
    }

    fn encode_inner(&self, text: &str, mut seen: Option<&mut BTreeSet<String>>) -> Vec<usize> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            let mut symbols: Vec<String> = Vec::with_capacity(word.chars().count() + 1);
            for (i, ch) in word.chars().enumerate() {
                if i == 0 {
                    symbols.push(format!("{MARKER}{ch}"));
                } else {
                    symbols.push(ch.to_string());
                }
            }
            // unknown single characters stay in place; they simply never
            // merge and map to [UNK] at the end
            if let Some(seen) = seen.as_deref_mut() {
                for s in &symbols {
                    if self.ids.contains_key(s) {
                        seen.insert(s.clone());
                    }
                }
            }
            loop {
                let mut best: Option<(usize, usize)> = None; // (rank, position)
                for (i, w) in symbols.windows(2).enumerate() {
                    if let Some(&rank) = self.merge_ranks.get(&(w[0].clone(), w[1].clone())) {
                        if best.map_or(true, |(br, _)| rank < br) {
                            best = Some((rank, i));
                        }
                    }
                }
                let Some((rank, _)) = best else { break };
                let (left, right) = self.merges[rank].clone();
                let joined = format!("{left}{right}");
                merge_in_place(&mut symbols, &left, &right, &joined);
                if let Some(seen) = seen.as_deref_mut() {
                    seen.insert(joined);
                }
            }
            for s in symbols {
                out.push(self.ids.get(&s).copied().unwrap_or(UNK_ID));
            }
        }
        out
    }

    /// Human-readable reconstruction (markers back to spaces).
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut s = String::new();
        for &id in ids {
            match self.vocab.get(id) {
                Some(tok) if SPECIALS.contains(&tok.as_str()) => {}
                Some(tok) => s.push_str(tok),
                None => s.push_str(UNK),
            }
        }
        s.replace(MARKER, " ").trim_start().to_string()
    }

    /// Drop every token that cannot occur when encoding `corpus`. Keeps the
    /// five specials, every symbol observed at any stage of encoding each
    /// corpus line (so each kept token's full merge derivation survives), and
    /// filters the merge table to rules whose parts and result all survive.
    /// Ids are densely remapped in ascending old-id order.
    pub fn prune<S: AsRef<str>>(&self, corpus: &[S]) -> Result<(Tokenizer, VocabPruneReport)> {
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for line in corpus {
            self.encode_inner(line.as_ref(), Some(&mut seen));
        }
        let mut kept_old_ids: Vec<usize> = (0..SPECIALS.len()).collect();
        for (id, tok) in self.vocab.iter().enumerate().skip(SPECIALS.len()) {
            if seen.contains(tok) {
                kept_old_ids.push(id);
            }
        }
        let kept_set: BTreeSet<usize> = kept_old_ids.iter().copied().collect();
        let vocab: Vec<String> = kept_old_ids.iter().map(|&i| self.vocab[i].clone()).collect();
        let keep_tok = |t: &String| kept_set.contains(&self.ids[t]);
        let merges: Vec<(String, String)> = self
            .merges
            .iter()
            .filter(|(l, r)| {
                let joined = format!("{l}{r}");
                keep_tok(l) && keep_tok(r) && kept_set.contains(&self.ids[&joined])
            })
            .cloned()
            .collect();
        let report = VocabPruneReport {
            old_vocab: self.vocab.len(),
            new_vocab: vocab.len(),
            removed_tokens: self.vocab.len() - vocab.len(),
            kept_old_ids,
        };
        Ok((Tokenizer::from_parts(vocab, merges)?, report))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = TokenizerFile {
            version: 1,
            word_boundary_marker: MARKER.to_string(),
            specials: SPECIALS.iter().map(|s| s.to_string()).collect(),
            vocab: self.vocab.clone(),
            merges: self.merges.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(json: &str) -> Result<Tokenizer> {
        let file: TokenizerFile = serde_json::from_str(json)?;
        if file.version != 1 {
            return Err(GcError::Tokenizer(format!("unsupported tokenizer version {}", file.version)));
        }
        if file.word_boundary_marker != MARKER.to_string() {
            return Err(GcError::Tokenizer("unexpected word boundary marker".into()));
        }
        Tokenizer::from_parts(file.vocab, file.merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Tokenizer> {
        Tokenizer::from_json(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the serialized form; checkpoints carry this to detect
    /// model/tokenizer pairings that drifted apart.
    pub fn sha256(&self) -> Result<String> {
        Ok(crate::model::sha256_hex(self.to_json()?.as_bytes()))
    }
}

fn merge_in_place(symbols: &mut Vec<String>, left: &str, right: &str, joined: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            symbols[i] = joined.to_string();
            symbols.remove(i + 1);
        } else {
            i += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus() -> Vec<String> {
        vec![
            "the cat sat on the mat".into(),
            "the dog sat on the log".into(),
            "the cat and the dog".into(),
        ]
    }

    /// Brute-force pair count, independent of the training code path.
    fn most_frequent_first_pair(corpus: &[String]) -> ((String, String), u64) {
        let mut words: BTreeMap<Vec<String>, u64> = BTreeMap::new();
        for line in corpus {
            for w in line.split_whitespace() {
                let chars: Vec<char> = w.chars().collect();
                let mut syms = vec![format!("{MARKER}{}", chars[0])];
                syms.extend(chars[1..].iter().map(|c| c.to_string()));
                *words.entry(syms).or_insert(0) += 1;
            }
        }
        let mut pairs: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (syms, f) in &words {
            for w in syms.windows(2) {
                *pairs.entry((w[0].clone(), w[1].clone())).or_insert(0) += f;
            }
        }
        pairs.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).unwrap()
    }

    #[test]
    fn first_merge_matches_brute_force_oracle() {
        let c = corpus();
        let tok = Tokenizer::train(&c, 200, 2).unwrap();
        let ((l, r), _) = most_frequent_first_pair(&c);
        assert_eq!(tok.merges()[0], (l, r));
    }

    #[test]
    fn specials_occupy_lowest_ids() {
        let tok = Tokenizer::train(&corpus(), 100, 2).unwrap();
        assert_eq!(tok.id_of(PAD), Some(PAD_ID));
        assert_eq!(tok.id_of(UNK), Some(UNK_ID));
        assert_eq!(tok.id_of(CLS), Some(CLS_ID));
        assert_eq!(tok.id_of(SEP), Some(SEP_ID));
        assert_eq!(tok.id_of(MASK), Some(MASK_ID));
    }

    #[test]
    fn encode_decode_roundtrip() {
        let c = corpus();
        let tok = Tokenizer::train(&c, 300, 1).unwrap();
        for line in &c {
            let ids = tok.encode(line);
            assert_eq!(tok.decode(&ids), *line);
        }
    }

    #[test]
    fn unknown_characters_become_unk() {
        let tok = Tokenizer::train(&corpus(), 100, 2).unwrap();
        let ids = tok.encode("zebra"); // z, b, r not in training corpus
        assert!(ids.contains(&UNK_ID));
    }

    #[test]
    fn frequent_word_becomes_single_token() {
        let tok = Tokenizer::train(&corpus(), 300, 2).unwrap();
        let ids = tok.encode("the");
        assert_eq!(ids.len(), 1, "'the' occurs 6 times and should merge fully");
        assert_eq!(tok.token(ids[0]), Some("\u{2581}the"));
    }

    #[test]
    fn prune_keeps_encodings_bit_identical() {
        let train = corpus();
        let tok = Tokenizer::train(&train, 300, 1).unwrap();
        // prune against a smaller corpus: some tokens must go away
        let prune_corpus = vec!["the cat sat".to_string(), "the dog".to_string()];
        let (pruned, report) = tok.prune(&prune_corpus).unwrap();
        assert!(report.removed_tokens > 0, "expected some tokens to be removed");
        assert_eq!(report.old_vocab, tok.vocab_size());
        assert_eq!(report.new_vocab, pruned.vocab_size());
        // the invariant: remapped old encodings equal new encodings
        let old_to_new: HashMap<usize, usize> =
            report.kept_old_ids.iter().enumerate().map(|(n, &o)| (o, n)).collect();
        for line in &prune_corpus {
            let old = tok.encode(line);
            let new = pruned.encode(line);
            let remapped: Vec<usize> = old.iter().map(|id| old_to_new[id]).collect();
            assert_eq!(remapped, new, "line {line:?}");
        }
    }

    #[test]
    fn prune_is_idempotent() {
        let tok = Tokenizer::train(&corpus(), 300, 1).unwrap();
        let prune_corpus = vec!["the cat".to_string()];
        let (p1, r1) = tok.prune(&prune_corpus).unwrap();
        let (p2, r2) = p1.prune(&prune_corpus).unwrap();
        assert_eq!(r2.removed_tokens, 0);
        assert_eq!(p1.vocab_size(), p2.vocab_size());
        assert_eq!(r1.new_vocab, r2.new_vocab);
        for line in &prune_corpus {
            assert_eq!(p1.encode(line), p2.encode(line));
        }
    }

    #[test]
    fn prune_remap_is_dense_and_order_preserving() {
        let tok = Tokenizer::train(&corpus(), 300, 1).unwrap();
        let (pruned, report) = tok.prune(&["the cat sat".to_string()]).unwrap();
        assert!(report.kept_old_ids.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(report.kept_old_ids.len(), pruned.vocab_size());
        for (new_id, &old_id) in report.kept_old_ids.iter().enumerate() {
            assert_eq!(pruned.token(new_id), tok.token(old_id));
        }
    }

    #[test]
    fn json_roundtrip_preserves_behavior() {
        let tok = Tokenizer::train(&corpus(), 300, 1).unwrap();
        let json = tok.to_json().unwrap();
        let back = Tokenizer::from_json(&json).unwrap();
        for line in &corpus() {
            assert_eq!(tok.encode(line), back.encode(line));
        }
        // serialization is deterministic
        assert_eq!(json, back.to_json().unwrap());
    }

    #[test]
    fn random_corpora_uphold_prune_invariant() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let syllables = ["ka", "to", "mi", "ren", "ba", "lu", "sha", "pe"];
        for round in 0..30 {
            let lines: Vec<String> = (0..20)
                .map(|_| {
                    (0..rng.gen_range(3..8))
                        .map(|_| {
                            let n = rng.gen_range(1..4);
                            (0..n).map(|_| syllables[rng.gen_range(0..syllables.len())]).collect::<String>()
                        })
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            let tok = Tokenizer::train(&lines, 150, 1).unwrap();
            let subset: Vec<String> = lines.iter().take(5).cloned().collect();
            let (pruned, report) = tok.prune(&subset).unwrap();
            let old_to_new: HashMap<usize, usize> =
                report.kept_old_ids.iter().enumerate().map(|(n, &o)| (o, n)).collect();
            for line in &subset {
                let remapped: Vec<usize> =
                    tok.encode(line).iter().map(|id| old_to_new[id]).collect();
                assert_eq!(remapped, pruned.encode(line), "round {round} line {line:?}");
            }
        }
    }
}
