//! Shared fixtures for the CLI test suites: a seeded template grammar for
//! synthetic corpora and helpers for driving the binary.

use sembed::rng::RngStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const ADJECTIVES: &[&str] = &[
    "red", "big", "small", "quick", "old", "young", "happy", "loud", "bright", "dark", "tall",
    "short", "warm", "cold", "soft", "clean", "windy", "quiet", "green", "blue", "heavy", "round",
    "sharp", "strange", "gentle",
];
pub const NOUNS: &[&str] = &[
    "cat", "dog", "fox", "bird", "tree", "river", "child", "man", "woman", "sun", "moon", "star",
    "house", "road", "garden", "mat", "park", "song", "game", "light", "morning", "evening",
    "boat", "fish", "horse", "mouse", "wall", "door", "book", "stone", "cloud", "rain", "wind",
    "hill", "field", "farmer", "teacher", "baker", "friend", "city",
];
pub const INTRANSITIVE: &[&str] = &[
    "runs", "sleeps", "sings", "jumps", "walks", "plays", "waits", "smiles", "falls", "grows",
    "shines", "rests", "dreams", "hides", "swims",
];
pub const TRANSITIVE: &[&str] = &[
    "sees", "finds", "likes", "chases", "follows", "watches", "carries", "holds", "meets",
    "helps", "calls", "paints", "draws", "feeds", "greets",
];
pub const PREPOSITIONS: &[&str] = &["near", "under", "over", "behind", "beside", "by"];
pub const ADVERBS: &[&str] =
    &["slowly", "quickly", "quietly", "happily", "today", "tonight", "early", "late"];

fn pick<'a>(rng: &mut RngStream, list: &[&'a str]) -> &'a str {
    list[(rng.next_u64() % list.len() as u64) as usize]
}

/// One sentence of 4..=12 tokens from the template grammar.
pub fn synth_sentence(rng: &mut RngStream) -> String {
    let template = rng.next_u64() % 10;
    let mut r = |list: &[&str]| pick(rng, list).to_string();
    match template {
        0 => format!("the {} {} .", r(NOUNS), r(INTRANSITIVE)),
        1 => format!("a {} {} {} {} .", r(ADJECTIVES), r(NOUNS), r(INTRANSITIVE), r(ADVERBS)),
        2 => format!("the {} {} the {} .", r(NOUNS), r(TRANSITIVE), r(NOUNS)),
        3 => format!(
            "the {} {} {} a {} {} .",
            r(ADJECTIVES),
            r(NOUNS),
            r(TRANSITIVE),
            r(ADJECTIVES),
            r(NOUNS)
        ),
        4 => format!("the {} {} {} the {} .", r(NOUNS), r(INTRANSITIVE), r(PREPOSITIONS), r(NOUNS)),
        5 => format!("a {} and a {} {} {} .", r(NOUNS), r(NOUNS), r(INTRANSITIVE), r(ADVERBS)),
        6 => format!(
            "the {} {} {} the {} {} the {} {} .",
            r(ADJECTIVES),
            r(NOUNS),
            r(TRANSITIVE),
            r(NOUNS),
            r(PREPOSITIONS),
            r(ADJECTIVES),
            r(NOUNS)
        ),
        7 => format!(
            "the {} {} and the {} {} .",
            r(NOUNS),
            r(INTRANSITIVE),
            r(NOUNS),
            r(INTRANSITIVE)
        ),
        8 => format!(
            "a {} {} {} {} the {} {} .",
            r(ADJECTIVES),
            r(ADJECTIVES),
            r(NOUNS),
            r(TRANSITIVE),
            r(NOUNS),
            r(ADVERBS)
        ),
        _ => format!("the {} {} the {} {} .", r(NOUNS), r(PREPOSITIONS), r(NOUNS), r(INTRANSITIVE)),
    }
}

pub fn synth_corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = RngStream::new(seed, 0x5e17);
    (0..n).map(|_| synth_sentence(&mut rng)).collect()
}

pub fn write_lines(path: &Path, lines: &[String]) {
    let mut out = String::new();
    for l in lines {
        out.push_str(l);
        out.push('\n');
    }
    std::fs::write(path, out).unwrap();
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_sembed"))
}

/// Run the binary in `dir`, returning the full output.
pub fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn assert_success(out: &Output, context: &str) {
    assert!(
        out.status.success(),
        "{context} failed (status {:?}):\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// Parse `step<TAB>combined<TAB>contrastive<TAB>denoising<TAB>token_accuracy`
/// records, skipping `#` header lines.
pub fn parse_metrics(path: &Path) -> Vec<(u64, f64, f64, f64, f64)> {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            assert_eq!(f.len(), 5, "bad metrics line {l:?}");
            (
                f[0].parse().unwrap(),
                f[1].parse().unwrap(),
                f[2].parse().unwrap(),
                f[3].parse().unwrap(),
                f[4].parse().unwrap(),
            )
        })
        .collect()
}
