//! Deterministic synthetic tasks. Each generator builds a dataset whose
//! labels are recoverable from surface word statistics, so a small encoder
//! can actually learn them — useful for tests and end-to-end demos without
//! shipping corpora.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Example, Target};
use crate::error::Result;

const FILLER: &[&str] = &[
    "the", "a", "and", "of", "to", "in", "on", "with", "under", "near", "quite", "rather", "very",
    "some", "most", "while",
];

/// One signature lexicon per topic; class / label `i` draws from `TOPICS[i]`.
const TOPICS: &[&[&str]] = &[
    &["match", "goal", "team", "coach", "league", "score"],
    &["market", "stock", "profit", "trade", "bank", "rate"],
    &["atom", "cell", "theory", "orbit", "sample", "laser"],
    &["bread", "butter", "spice", "roast", "flavor", "dough"],
    &["train", "hotel", "luggage", "passport", "harbor", "route"],
    &["chord", "melody", "rhythm", "drums", "violin", "tempo"],
    &["storm", "breeze", "drizzle", "frost", "cloud", "thaw"],
    &["server", "kernel", "socket", "compiler", "buffer", "cache"],
];

const POSITIVE: &[&str] = &["excellent", "great", "wonderful", "superb", "delightful"];
const NEGATIVE: &[&str] = &["terrible", "awful", "dreadful", "poor", "mediocre"];

const PEOPLE: &[&str] = &["alice", "robert", "maria", "chen", "ivanov", "sofia"];
const PLACES: &[&str] = &["paris", "berlin", "kyoto", "lagos", "lima", "oslo"];
const ORGS: &[&str] = &["acme", "globex", "initech", "vandelay"];

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words[rng.gen_range(0..words.len())]
}

fn filler_run(rng: &mut ChaCha8Rng, min: usize, max: usize) -> Vec<String> {
    let len = rng.gen_range(min..max);
    (0..len).map(|_| pick(rng, FILLER).to_string()).collect()
}

/// Single-label classification: each sentence leans on one topic's lexicon.
/// The first `classes` examples cover every class so the label set is fully
/// observed regardless of `n`. Examples alternate between two groups.
pub fn classification(seed: u64, n: usize, classes: usize) -> Result<Dataset> {
    assert!(classes >= 2 && classes <= TOPICS.len() && n >= classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let class = if i < classes { i } else { rng.gen_range(0..classes) };
        let mut words = filler_run(&mut rng, 2, 5);
        for _ in 0..rng.gen_range(2..5) {
            words.push(pick(&mut rng, TOPICS[class]).to_string());
        }
        words.shuffle(&mut rng);
        examples.push(Example {
            text: Some(words.join(" ")),
            tokens: None,
            target: Target::Label(class),
            group: Some(format!("g{}", i % 2)),
        });
    }
    Dataset::from_examples(examples)
}

/// Multi-label: each example activates a random non-empty subset of labels
/// and includes signature words for every active one.
pub fn multilabel(seed: u64, n: usize, labels: usize) -> Result<Dataset> {
    assert!(labels >= 2 && labels <= TOPICS.len() && n >= labels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let mut active: Vec<usize> =
            (0..labels).filter(|_| rng.gen_bool(0.4)).collect();
        if i < labels {
            // guarantee every label id occurs at least once
            if !active.contains(&i) {
                active.push(i);
            }
        }
        if active.is_empty() {
            active.push(rng.gen_range(0..labels));
        }
        active.sort_unstable();
        let mut words = filler_run(&mut rng, 1, 4);
        for &l in &active {
            for _ in 0..2 {
                words.push(pick(&mut rng, TOPICS[l]).to_string());
            }
        }
        words.shuffle(&mut rng);
        examples.push(Example {
            text: Some(words.join(" ")),
            tokens: None,
            target: Target::Labels(active),
            group: None,
        });
    }
    Dataset::from_examples(examples)
}

/// Regression: the score is the number of positive sentiment words among
/// four sentiment slots (an integer 0–4 stored as a float).
pub fn regression(seed: u64, n: usize) -> Result<Dataset> {
    assert!(n >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let positives = if i < 5 { i } else { rng.gen_range(0..=4) };
        let mut words = filler_run(&mut rng, 2, 5);
        for k in 0..4 {
            let lexicon = if k < positives { POSITIVE } else { NEGATIVE };
            words.push(pick(&mut rng, lexicon).to_string());
        }
        words.shuffle(&mut rng);
        examples.push(Example {
            text: Some(words.join(" ")),
            tokens: None,
            target: Target::Score(positives as f32),
            group: None,
        });
    }
    Dataset::from_examples(examples)
}

/// BIO token tagging with PER/LOC/ORG entities drawn from fixed lexicons.
/// Entity mentions are 1–2 words (`B-X` then `I-X`); everything else is `O`.
pub fn token_tagging(seed: u64, n: usize) -> Result<Dataset> {
    assert!(n >= 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds: [(&str, &[&str]); 3] = [("PER", PEOPLE), ("LOC", PLACES), ("ORG", ORGS)];
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let mut tokens = Vec::new();
        let mut tags = Vec::new();
        let extend_filler = |tokens: &mut Vec<String>, tags: &mut Vec<String>, rng: &mut ChaCha8Rng| {
            for w in filler_run(rng, 1, 4) {
                tokens.push(w);
                tags.push("O".to_string());
            }
        };
        extend_filler(&mut tokens, &mut tags, &mut rng);
        let n_entities = rng.gen_range(1..3);
        for e in 0..n_entities {
            // first three examples each lead with a distinct entity type
            let (ty, lexicon) = if i < 3 && e == 0 { kinds[i] } else { kinds[rng.gen_range(0..3)] };
            let span_len = rng.gen_range(1..=2);
            for k in 0..span_len {
                tokens.push(pick(&mut rng, lexicon).to_string());
                tags.push(format!("{}-{ty}", if k == 0 { "B" } else { "I" }));
            }
            extend_filler(&mut tokens, &mut tags, &mut rng);
        }
        examples.push(Example { text: None, tokens: Some(tokens), target: Target::Tags(tags), group: None });
    }
    Dataset::from_examples(examples)
}

/// Plain sentences over the full word inventory, for tokenizer training and
/// masked-token pretraining.
pub fn corpus(seed: u64, n: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<&[&str]> = vec![FILLER, POSITIVE, NEGATIVE, PEOPLE, PLACES, ORGS];
    pools.extend(TOPICS.iter().copied());
    (0..n)
        .map(|_| {
            let len = rng.gen_range(4..11);
            (0..len)
                .map(|_| {
                    let pool = pools[rng.gen_range(0..pools.len())];
                    pick(&mut rng, pool).to_string()
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TargetKind;

    #[test]
    fn generators_are_deterministic() {
        let a = classification(9, 40, 3).unwrap().to_jsonl();
        let b = classification(9, 40, 3).unwrap().to_jsonl();
        assert_eq!(a, b);
        assert_ne!(a, classification(10, 40, 3).unwrap().to_jsonl());
        assert_eq!(corpus(4, 20), corpus(4, 20));
    }

    #[test]
    fn class_and_tag_sets_are_fully_covered() {
        let d = classification(1, 10, 4).unwrap();
        assert_eq!(d.kind, TargetKind::SingleLabel { classes: 4 });
        let d = multilabel(2, 12, 5).unwrap();
        assert_eq!(d.kind, TargetKind::MultiLabel { labels: 5 });
        let d = token_tagging(3, 8).unwrap();
        match &d.kind {
            TargetKind::TokenLabel { tags } => {
                for t in ["B-PER", "B-LOC", "B-ORG", "O"] {
                    assert!(tags.iter().any(|x| x == t), "missing {t}");
                }
            }
            other => panic!("wrong kind {other:?}"),
        }
        let d = regression(5, 30).unwrap();
        assert_eq!(d.kind, TargetKind::Regression);
    }

    #[test]
    fn jsonl_roundtrip_through_loader() {
        let dir = tempfile::tempdir().unwrap();
        for (name, ds) in [
            ("cls", classification(11, 15, 3).unwrap()),
            ("ml", multilabel(12, 15, 3).unwrap()),
            ("reg", regression(13, 15).unwrap()),
            ("tok", token_tagging(14, 15).unwrap()),
        ] {
            let path = dir.path().join(format!("{name}.jsonl"));
            std::fs::write(&path, ds.to_jsonl()).unwrap();
            let back = Dataset::load_jsonl(&path).unwrap();
            assert_eq!(back.kind, ds.kind, "{name}");
            assert_eq!(back.examples.len(), ds.examples.len());
            assert_eq!(back.to_jsonl(), ds.to_jsonl(), "{name}");
        }
    }

    #[test]
    fn tags_align_with_tokens() {
        let d = token_tagging(21, 20).unwrap();
        for ex in &d.examples {
            let (tokens, Target::Tags(tags)) = (ex.tokens.as_ref().unwrap(), &ex.target) else {
                panic!("wrong target shape")
            };
            assert_eq!(tokens.len(), tags.len());
            // I- tags only ever continue a same-type span
            for w in tags.windows(2) {
                if let Some(ty) = w[1].strip_prefix("I-") {
                    assert!(w[0] == format!("B-{ty}") || w[0] == format!("I-{ty}"));
                }
            }
        }
    }
}
