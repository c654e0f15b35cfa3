//! Deterministic synthetic word-definition corpus.
//!
//! Each definition follows one 20-word template so every entry clears the
//! 16-word floor that a t=16 typo build needs. The answer word is composed
//! from syllables keyed to the three determining slots (adjective, noun,
//! verb); the remaining slots are distractors the model can learn to ignore.
//! Fixed syllable lengths (2+3+2) make distinct slot triples produce
//! distinct words.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::WordDef;
use crate::derive_seed;

const ADJECTIVES: [(&str, &str); 32] = [
    ("young", "yo"),
    ("old", "ol"),
    ("small", "sm"),
    ("vast", "va"),
    ("quiet", "qu"),
    ("loud", "lo"),
    ("swift", "sw"),
    ("slow", "sl"),
    ("bright", "br"),
    ("dark", "da"),
    ("gentle", "ge"),
    ("fierce", "fi"),
    ("clever", "cl"),
    ("plain", "pl"),
    ("wild", "wi"),
    ("tame", "ta"),
    ("warm", "wa"),
    ("cold", "co"),
    ("pale", "pa"),
    ("vivid", "vi"),
    ("humble", "hu"),
    ("proud", "pr"),
    ("hollow", "ho"),
    ("solid", "so"),
    ("sturdy", "st"),
    ("rough", "ro"),
    ("eager", "ea"),
    ("weary", "we"),
    ("noble", "no"),
    ("merry", "me"),
    ("hidden", "hi"),
    ("open", "op"),
];

const NOUNS: [(&str, &str); 48] = [
    ("swan", "swa"),
    ("horse", "hor"),
    ("falcon", "fal"),
    ("otter", "ott"),
    ("badger", "bad"),
    ("heron", "her"),
    ("salmon", "sal"),
    ("beetle", "bee"),
    ("marten", "mar"),
    ("lizard", "liz"),
    ("raven", "rav"),
    ("tortoise", "tor"),
    ("weasel", "wes"),
    ("donkey", "don"),
    ("rabbit", "rab"),
    ("ferret", "fer"),
    ("pigeon", "pig"),
    ("spider", "spi"),
    ("moth", "mot"),
    ("crane", "cra"),
    ("toad", "toa"),
    ("shrew", "shr"),
    ("stoat", "sto"),
    ("plover", "plo"),
    ("finch", "fin"),
    ("gull", "gul"),
    ("vole", "vol"),
    ("newt", "new"),
    ("drake", "dra"),
    ("lamb", "lam"),
    ("calf", "cal"),
    ("kitten", "kit"),
    ("puppy", "pup"),
    ("cub", "cub"),
    ("owlet", "owt"),
    ("eaglet", "eag"),
    ("tadpole", "tad"),
    ("duckling", "duc"),
    ("gosling", "gos"),
    ("leveret", "lev"),
    ("fawn", "faw"),
    ("kid", "kid"),
    ("chick", "chi"),
    ("squab", "squ"),
    ("joey", "joe"),
    ("colt", "col"),
    ("filly", "fil"),
    ("pony", "pon"),
];

const VERBS: [(&str, &str); 24] = [
    ("sings", "ng"),
    ("drifts", "ft"),
    ("leaps", "ps"),
    ("hides", "de"),
    ("glides", "gl"),
    ("wanders", "nd"),
    ("hunts", "nt"),
    ("sleeps", "ee"),
    ("dives", "iv"),
    ("climbs", "mb"),
    ("floats", "oa"),
    ("burrows", "ur"),
    ("gallops", "ga"),
    ("circles", "ci"),
    ("grazes", "gr"),
    ("nests", "ne"),
    ("swims", "im"),
    ("crawls", "cr"),
    ("hops", "hp"),
    ("struts", "ru"),
    ("soars", "rs"),
    ("trots", "tr"),
    ("flutters", "fl"),
    ("prowls", "ow"),
];

const TERRAINS: [&str; 12] = [
    "meadow", "marsh", "dune", "thicket", "tundra", "prairie", "heath", "fen", "grove", "ridge",
    "slope", "glen",
];

const REALMS: [&str; 12] = [
    "north", "south", "east", "west", "lowland", "upland", "coast", "valley", "forest", "desert",
    "island", "steppe",
];

const OBJECTS: [&str; 16] = [
    "moon", "sun", "wind", "rain", "frost", "mist", "snow", "storm", "tide", "star", "cloud",
    "thunder", "dew", "fog", "hail", "breeze",
];

const PLACES: [&str; 16] = [
    "river", "lake", "pond", "stream", "shore", "cliff", "cave", "spring", "brook", "lagoon",
    "creek", "bay", "inlet", "delta", "ford", "weir",
];

const TIMES: [&str; 12] = [
    "dawn", "dusk", "noon", "midnight", "twilight", "sunrise", "sunset", "evening", "morning",
    "night", "daybreak", "moonrise",
];

/// The literal entry heading every corpus. Its determinant slots collide with
/// the (young, swan, glides) combination, which the generator skips.
const LITERAL: (&str, &str) = (
    "cygnet",
    "the young swan that glides over the meadow within the north while the moon rests near the river during dawn",
);

fn compose(adj: usize, noun: usize, verb: usize, rng: &mut ChaCha8Rng) -> WordDef {
    let word = format!("{}{}{}", ADJECTIVES[adj].1, NOUNS[noun].1, VERBS[verb].1);
    // Every definition word is at least three characters long so the split
    // construction can always re-segment a typo'd word's region: a one-char
    // word plus an injected digit needs more tokens than its clean region
    // has bytes.
    let definition = format!(
        "the {} {} that {} over the {} within the {} while the {} rests near the {} during {}",
        ADJECTIVES[adj].0,
        NOUNS[noun].0,
        VERBS[verb].0,
        TERRAINS[rng.gen_range(0..TERRAINS.len())],
        REALMS[rng.gen_range(0..REALMS.len())],
        OBJECTS[rng.gen_range(0..OBJECTS.len())],
        PLACES[rng.gen_range(0..PLACES.len())],
        TIMES[rng.gen_range(0..TIMES.len())],
    );
    WordDef { word, definition }
}

/// Generates up to `n` word-definition pairs (the literal plus a seeded
/// sample of slot combinations). Words are unique by construction. Returns
/// fewer than `n` only when `n` exceeds the combination space.
pub fn generate_corpus(n: usize, seed: u64) -> Vec<WordDef> {
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    out.push(WordDef { word: LITERAL.0.to_string(), definition: LITERAL.1.to_string() });

    let conflict = combo_index(0, 0, 4); // (young, swan, glides) shadows the literal
    let mut combos: Vec<u32> = (0..ADJECTIVES.len() * NOUNS.len() * VERBS.len())
        .map(|i| i as u32)
        .filter(|&i| i as usize != conflict)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xc0_9b05));
    combos.shuffle(&mut rng);

    for &combo in combos.iter().take(n - 1) {
        let combo = combo as usize;
        let verb = combo % VERBS.len();
        let noun = (combo / VERBS.len()) % NOUNS.len();
        let adj = combo / (VERBS.len() * NOUNS.len());
        out.push(compose(adj, noun, verb, &mut rng));
    }
    out
}

fn combo_index(adj: usize, noun: usize, verb: usize) -> usize {
    (adj * NOUNS.len() + noun) * VERBS.len() + verb
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn syllable_tables_are_internally_unique() {
        for syls in [
            ADJECTIVES.iter().map(|p| p.1).collect::<Vec<_>>(),
            NOUNS.iter().map(|p| p.1).collect(),
            VERBS.iter().map(|p| p.1).collect(),
        ] {
            let set: HashSet<_> = syls.iter().collect();
            assert_eq!(set.len(), syls.len());
        }
        assert!(ADJECTIVES.iter().all(|p| p.1.len() == 2));
        assert!(NOUNS.iter().all(|p| p.1.len() == 3));
        assert!(VERBS.iter().all(|p| p.1.len() == 2));
    }

    #[test]
    fn corpus_is_unique_valid_and_long_enough() {
        let defs = generate_corpus(1500, 7);
        assert_eq!(defs.len(), 1500);
        assert_eq!(defs[0].word, "cygnet");
        let words: HashSet<_> = defs.iter().map(|d| d.word.as_str()).collect();
        assert_eq!(words.len(), defs.len());
        for d in &defs {
            d.validate().unwrap();
            assert!(d.definition.split_whitespace().count() >= 16);
            assert!(d.definition.split_whitespace().all(|w| w.len() >= 3));
            assert!(d.word.chars().all(|c| c.is_ascii_lowercase()));
        }
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let a = generate_corpus(200, 3);
        let b = generate_corpus(200, 3);
        let c = generate_corpus(200, 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        // A prefix of a larger corpus matches the smaller one.
        let big = generate_corpus(400, 3);
        assert_eq!(&big[..200], &a[..]);
    }

    #[test]
    fn nothing_shadows_the_literal() {
        let max = 1 + ADJECTIVES.len() * NOUNS.len() * VERBS.len() - 1;
        let defs = generate_corpus(40_000, 0);
        assert_eq!(defs.len(), max);
        assert_eq!(defs.iter().filter(|d| d.word == "yoswagl").count(), 0);
        assert_eq!(defs.iter().filter(|d| d.word == "cygnet").count(), 1);
    }
}
