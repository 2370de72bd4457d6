//! Deterministic email-like text for smoke runs and tests.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "st"];
const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "ou"];

const OPENERS: [&str; 6] = ["hi", "hello", "dear", "hey", "morning", "team"];
const CLOSERS: [&str; 5] = ["thanks", "regards", "best", "cheers", "talk soon"];
const TEMPLATES: [&str; 8] = [
    "please review the {w} report before the {w} meeting on {d}",
    "the {w} deal with {n} closes at {x} dollars",
    "can you send {n} the {w} numbers for {w} by {d}",
    "we moved the {w} call to {d} at {x}",
    "{n} said the {w} contract needs {w} changes",
    "attached is the {w} schedule for {w} and {w}",
    "i will forward the {w} notes from {n} tomorrow",
    "our {w} position is up {x} percent since {d}",
];
const DAYS: [&str; 5] = ["monday", "tuesday", "wednesday", "thursday", "friday"];

fn pseudo_word(rng: &mut impl Rng) -> String {
    let syllables = rng.random_range(1..=3);
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS.choose(rng).unwrap(), NUCLEI.choose(rng).unwrap()))
        .collect()
}

/// About `bytes` bytes of whitespace-tokenizable text built from a seeded
/// lexicon of `lexicon` pseudo-words, `lexicon / 4` names, greetings and
/// templated business sentences.
pub fn synthetic_email_corpus(bytes: usize, lexicon: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words: Vec<String> = (0..lexicon.max(1)).map(|_| pseudo_word(&mut rng)).collect();
    let names: Vec<String> = (0..(lexicon / 4).max(1)).map(|_| pseudo_word(&mut rng)).collect();
    let pick_word = |rng: &mut ChaCha8Rng| {
        let u: f64 = rng.random();
        let i = ((words.len() as f64).powf(u) - 1.0) as usize;
        words[i.min(words.len() - 1)].clone()
    };
    let mut out = String::with_capacity(bytes + 256);
    while out.len() < bytes {
        let to = names.choose(&mut rng).unwrap();
        let from = names.choose(&mut rng).unwrap();
        out.push_str(&format!("{} {to}\n", OPENERS.choose(&mut rng).unwrap()));
        for _ in 0..rng.random_range(2..=5) {
            let template = TEMPLATES.choose(&mut rng).unwrap();
            let mut line = String::new();
            for (k, part) in template.split(' ').enumerate() {
                if k > 0 {
                    line.push(' ');
                }
                match part {
                    "{w}" => line.push_str(&pick_word(&mut rng)),
                    "{n}" => line.push_str(names.choose(&mut rng).unwrap()),
                    "{d}" => line.push_str(DAYS.choose(&mut rng).unwrap()),
                    "{x}" => line.push_str(&rng.random_range(1..100).to_string()),
                    other => line.push_str(other),
                }
            }
            out.push_str(&line);
            out.push('\n');
        }
        out.push_str(&format!("{} {from}\n\n", CLOSERS.choose(&mut rng).unwrap()));
    }
    out
}
