//! Built-in text so every command runs without external data.
//!
//! The corpus is generated from a fixed seed: short paragraphs on a handful
//! of topics, each drawing from its own vocabulary and sentence templates.
//! That gives byte-level models local structure (spelling, punctuation) and
//! longer-range structure (a paragraph stays on topic).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::labeled::LabeledSet;

struct Topic {
    name: &'static str,
    nouns: &'static [&'static str],
    verbs: &'static [&'static str],
    adjectives: &'static [&'static str],
}

const TOPICS: [Topic; 4] = [
    Topic {
        name: "sea",
        nouns: &[
            "boat",
            "harbor",
            "sail",
            "tide",
            "captain",
            "crew",
            "anchor",
            "wave",
            "island",
            "lighthouse",
            "net",
            "gull",
        ],
        verbs: &[
            "drifts", "sails", "anchors", "rolls", "crosses", "reaches", "leaves", "circles",
        ],
        adjectives: &[
            "salty", "calm", "rough", "grey", "distant", "windy", "quiet", "deep",
        ],
    },
    Topic {
        name: "kitchen",
        nouns: &[
            "bread", "oven", "pot", "onion", "soup", "knife", "flour", "butter", "garlic", "pan",
            "recipe", "spoon",
        ],
        verbs: &[
            "bakes", "stirs", "slices", "boils", "melts", "tastes", "mixes", "roasts",
        ],
        adjectives: &[
            "warm", "fresh", "crisp", "golden", "sweet", "bitter", "thick", "smoky",
        ],
    },
    Topic {
        name: "sky",
        nouns: &[
            "star",
            "planet",
            "moon",
            "comet",
            "orbit",
            "telescope",
            "galaxy",
            "eclipse",
            "meteor",
            "cloud",
            "dawn",
            "horizon",
        ],
        verbs: &[
            "shines", "rises", "fades", "orbits", "glows", "spins", "sets", "flickers",
        ],
        adjectives: &[
            "bright", "faint", "cold", "silver", "vast", "ancient", "red", "clear",
        ],
    },
    Topic {
        name: "forest",
        nouns: &[
            "oak", "fox", "trail", "moss", "river", "owl", "pine", "fern", "deer", "stone",
            "branch", "meadow",
        ],
        verbs: &[
            "grows", "hides", "wanders", "rustles", "climbs", "shelters", "bends", "follows",
        ],
        adjectives: &[
            "green", "damp", "tall", "shady", "old", "wild", "mossy", "still",
        ],
    },
];

const TEMPLATES: [&str; 6] = [
    "The {a} {n} {v} past the {n}.",
    "A {n} {v} near the {a} {n}.",
    "Every {n} {v}, and the {n} {v} too.",
    "In the {a} morning the {n} {v}.",
    "Nobody saw how the {a} {n} {v} by the {n}.",
    "The {n} is {a}; the {n} is {a}.",
];

fn sentence<R: Rng>(topic: &Topic, rng: &mut R) -> String {
    let template = TEMPLATES.choose(rng).expect("templates");
    let mut out = String::new();
    let mut rest = *template;
    while let Some(i) = rest.find('{') {
        out.push_str(&rest[..i]);
        let slot = &rest[i + 1..i + 2];
        let words = match slot {
            "a" => topic.adjectives,
            "n" => topic.nouns,
            _ => topic.verbs,
        };
        out.push_str(words.choose(rng).expect("words"));
        rest = &rest[i + 3..];
    }
    out.push_str(rest);
    out
}

fn paragraph<R: Rng>(topic: &Topic, rng: &mut R) -> String {
    let n = rng.gen_range(3..7);
    (0..n)
        .map(|_| sentence(topic, rng))
        .collect::<Vec<_>>()
        .join(" ")
}

/// About `target_bytes` of topical paragraphs separated by blank lines.
pub fn corpus_text(target_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(target_bytes + 512);
    while out.len() < target_bytes {
        let topic = &TOPICS[rng.gen_range(0..TOPICS.len())];
        out.push_str(&paragraph(topic, &mut rng));
        out.push_str("\n\n");
    }
    out
}

/// The default training corpus: roughly 100 KB.
pub fn corpus() -> String {
    corpus_text(100_000, 0)
}

/// `per_class` single-paragraph examples per topic, labeled by topic name.
pub fn topics(per_class: usize, seed: u64) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let mut labels: Vec<String> = TOPICS.iter().map(|t| t.name.to_string()).collect();
    labels.sort();
    let mut examples = Vec::with_capacity(per_class * TOPICS.len());
    for _ in 0..per_class {
        for t in &TOPICS {
            let class = labels.iter().position(|l| l == t.name).expect("label");
            examples.push((class, paragraph(t, &mut rng)));
        }
    }
    examples.shuffle(&mut rng);
    LabeledSet { labels, examples }
}
