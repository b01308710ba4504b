//! Seeded generator for participant-style sentences.
//!
//! Mixes sentences that hit each polarity rule, sentences that hit none,
//! negated forms, capitalized modals (which do not match), and two-sentence
//! utterances.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SUBJECTS: [&str; 8] = [
    "I", "We", "My friend", "The manager", "Everyone", "She", "He", "They",
];
const VERBS: [&str; 8] = [
    "return", "report", "keep", "share", "hide", "explain", "admit", "ignore",
];
const OBJECTS: [&str; 8] = [
    "the wallet",
    "the mistake",
    "the money",
    "the truth",
    "the accident",
    "what happened",
    "the lost phone",
    "the extra change",
];
const ADJECTIVES: [&str; 6] = ["right", "fair", "wrong", "kind", "honest", "risky"];
const ENDINGS: [&str; 3] = [".", "!", "."];
const REASONS: [&str; 5] = [
    "It matters to me.",
    "Honesty is important.",
    "That would be fair to them.",
    "Nobody else will know.",
    "I can live with that.",
];

fn pick<'a>(rng: &mut ChaCha8Rng, items: &[&'a str]) -> &'a str {
    items.choose(rng).expect("non-empty")
}

fn clause(rng: &mut ChaCha8Rng) -> String {
    let s = pick(rng, &SUBJECTS);
    let v = pick(rng, &VERBS);
    let o = pick(rng, &OBJECTS);
    let end = pick(rng, &ENDINGS);
    match rng.gen_range(0..12) {
        0 => format!("{s} should {v} {o}{end}"),
        1 => format!("{s} should not {v} {o}{end}"),
        2 => format!("{s} would {v} {o}{end}"),
        3 => format!("{s} would not {v} {o}{end}"),
        4 => format!("{s} will {v} {o}{end}"),
        5 => format!("{s} will not {v} {o}{end}"),
        6 => format!("I agree that {} should {v} {o}{end}", s.to_lowercase()),
        7 => format!("I disagree, {} would {v} {o}{end}", s.to_lowercase()),
        8 => format!("It is {} to {v} {o}{end}", pick(rng, &ADJECTIVES)),
        9 => format!("It is not {} to {v} {o}{end}", pick(rng, &ADJECTIVES)),
        10 => format!("{s} can {v} {o}{end}"),
        _ => format!("Should {} {v} {o}?", s.to_lowercase()),
    }
}

/// One utterance: usually one sentence, sometimes two.
pub fn sentence(rng: &mut ChaCha8Rng) -> String {
    let first = clause(rng);
    match rng.gen_range(0..4) {
        0 => format!("{first} {}", clause(rng)),
        1 => format!("{first} {}", pick(rng, &REASONS)),
        _ => first,
    }
}

pub fn generate(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| sentence(&mut rng)).collect()
}
