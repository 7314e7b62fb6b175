use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A corpus segment split into a context prefix and its continuation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingExample {
    /// Position of the segment in the corpus.
    pub offset: usize,
    pub tokens: Vec<usize>,
    /// Context length `m`; the continuation is `tokens[m..]`.
    pub split: usize,
}

impl TrainingExample {
    pub fn new(offset: usize, tokens: Vec<usize>, split: usize) -> Result<Self> {
        if split == 0 || split >= tokens.len() {
            return Err(Error::Data(format!(
                "split {split} leaves an empty target in a segment of {}",
                tokens.len()
            )));
        }
        Ok(Self { offset, tokens, split })
    }

    pub fn context(&self) -> &[usize] {
        &self.tokens[..self.split]
    }

    pub fn continuation(&self) -> &[usize] {
        &self.tokens[self.split..]
    }
}

/// Non-overlapping segments of `segment_length` tokens, each split at a
/// point drawn uniformly from `[⌈n/4⌉, ⌊3n/4⌋]`.
pub fn make_examples(corpus: &[usize], segment_length: usize, seed: u64) -> Result<Vec<TrainingExample>> {
    if segment_length < 2 {
        return Err(Error::Data("segment length must be at least 2".into()));
    }
    if corpus.len() < segment_length {
        return Err(Error::Data(format!(
            "corpus of {} tokens is shorter than one segment of {segment_length}",
            corpus.len()
        )));
    }
    let n = segment_length;
    let lo = n.div_ceil(4).max(1);
    let hi = (3 * n / 4).min(n - 1).max(lo);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corpus
        .chunks_exact(n)
        .enumerate()
        .map(|(i, seg)| TrainingExample::new(i * n, seg.to_vec(), rng.random_range(lo..=hi)))
        .collect()
}

/// A key/value association for recall documents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecallPair {
    pub key: String,
    pub value: String,
}

/// Alphabet of recall keys.
pub const KEY_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ";
/// Alphabet of recall values, disjoint from the keys.
pub const VALUE_ALPHABET: &[u8] = b"0123456789";
pub const KEY_LEN: usize = 4;
pub const VALUE_LEN: usize = 4;

/// `count` pairs with distinct random keys.
pub fn random_pairs<R: Rng>(count: usize, rng: &mut R) -> Vec<RecallPair> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let key = random_string(KEY_ALPHABET, KEY_LEN, rng);
        if seen.insert(key.clone()) {
            out.push(RecallPair {
                key,
                value: random_string(VALUE_ALPHABET, VALUE_LEN, rng),
            });
        }
    }
    out
}

fn random_string<R: Rng>(alphabet: &[u8], len: usize, rng: &mut R) -> String {
    (0..len).map(|_| alphabet[rng.random_range(0..alphabet.len())] as char).collect()
}

/// One `key:value` line per pair.
pub fn render_pairs(pairs: &[RecallPair]) -> String {
    pairs.iter().map(|p| format!("{}:{}\n", p.key, p.value)).collect()
}

const NAMES: &[&str] = &[
    "Mira", "Tobin", "Asha", "Corvin", "Ilse", "Dario", "Nell", "Oskar", "Petra", "Quill", "Runa", "Soren",
    "Talia", "Ulric", "Vesna", "Wren",
];
const PLACES: &[&str] = &[
    "Tolvar", "the old mill", "Brackenford", "the harbor", "Elmshade", "the north tower", "Kestrel Hill",
    "the market", "Duskmere", "the library",
];
const THINGS: &[&str] = &[
    "a blue lantern", "a silver key", "an oak chest", "a torn map", "a brass compass", "a red scarf",
    "a clay jar", "a glass bell", "a wool cloak", "an iron ring",
];
const VERBS: &[&str] = &["keeps", "hides", "found", "lost", "sold", "mended", "carried", "painted"];

fn story<R: Rng>(rng: &mut R) -> String {
    let cast: Vec<&str> = NAMES.choose_multiple(rng, 3).copied().collect();
    let mut facts = Vec::new();
    for &who in &cast {
        let what = THINGS[rng.random_range(0..THINGS.len())];
        let verb = VERBS[rng.random_range(0..VERBS.len())];
        let place = PLACES[rng.random_range(0..PLACES.len())];
        facts.push((who, verb, what, place));
    }
    let mut text = String::new();
    for &(who, verb, what, place) in &facts {
        text.push_str(&format!("{who} {verb} {what} in {place}. "));
    }
    // Restating the facts lets the continuation depend on the context.
    let mut order: Vec<usize> = (0..facts.len()).collect();
    order.shuffle(rng);
    for i in order {
        let (who, verb, what, place) = facts[i];
        text.push_str(&format!("In {place}, {who} {verb} {what}. "));
    }
    text.push('\n');
    text
}

fn recall_document<R: Rng>(rng: &mut R) -> String {
    let count = rng.random_range(4..=16);
    let mut pairs = random_pairs(count, rng);
    let mut text = render_pairs(&pairs);
    pairs.shuffle(rng);
    text.push_str(&render_pairs(&pairs));
    text.push('\n');
    text
}

/// Deterministic synthetic text of at least `bytes` bytes mixing short
/// stories that restate their facts and `key:value` recall lists that are
/// repeated in shuffled order.
pub fn synthetic_corpus(bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 512);
    while out.len() < bytes {
        if rng.random_bool(0.5) {
            out.push_str(&recall_document(&mut rng));
        } else {
            out.push_str(&story(&mut rng));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_segment_one_example() {
        let corpus: Vec<usize> = (0..16).collect();
        let ex = make_examples(&corpus, 16, 0).unwrap();
        assert_eq!(ex.len(), 1);
        assert!((4..=12).contains(&ex[0].split));
    }

    #[test]
    fn examples_are_deterministic_and_cover_the_corpus() {
        let corpus: Vec<usize> = (0..100).map(|i| i % 256).collect();
        let a = make_examples(&corpus, 10, 7).unwrap();
        assert_eq!(a, make_examples(&corpus, 10, 7).unwrap());
        assert_eq!(a.len(), 10);
        let mut covered = vec![0u8; corpus.len()];
        for e in &a {
            assert!(e.split >= 3 && e.split <= 7);
            for (i, &t) in e.context().iter().chain(e.continuation()).enumerate() {
                assert_eq!(corpus[e.offset + i], t);
                covered[e.offset + i] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn short_corpus_is_a_data_error() {
        assert!(matches!(make_examples(&[1, 2, 3], 4, 0), Err(Error::Data(_))));
    }

    #[test]
    fn recall_pairs_have_unique_keys_and_disjoint_alphabets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pairs = random_pairs(50, &mut rng);
        let keys: std::collections::HashSet<_> = pairs.iter().map(|p| &p.key).collect();
        assert_eq!(keys.len(), 50);
        for p in &pairs {
            assert!(p.key.bytes().all(|b| KEY_ALPHABET.contains(&b)));
            assert!(p.value.bytes().all(|b| VALUE_ALPHABET.contains(&b)));
        }
        assert!(KEY_ALPHABET.iter().all(|b| !VALUE_ALPHABET.contains(b)));
    }

    #[test]
    fn synthetic_corpus_is_deterministic() {
        let a = synthetic_corpus(5_000, 3);
        assert!(a.len() >= 5_000);
        assert_eq!(a, synthetic_corpus(5_000, 3));
        assert_ne!(a, synthetic_corpus(5_000, 4));
        assert!(a.contains(':') && a.contains(". "));
    }
}
