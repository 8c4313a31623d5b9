//! Two-stage input perturbation: discrete token-level augmentation of the
//! sentence text, then continuous corruption (high-rate dropout) of the
//! embedded decoder input. The order is fixed — discrete first, and the
//! continuous stage only ever acts on embeddings, never on token ids.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::RngStream;
use crate::tensor::Scalar;
use crate::text::{tokenize, tokenize_str, Vocabulary};
use std::collections::HashMap;
use std::fs;
use std::path::Path;

/// Small general-purpose synonym list shipped with the crate; override with
/// [`SynonymTable::load`].
const BUNDLED_SYNONYMS: &str = include_str!("../data/synonyms.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscreteStrategy {
    /// Look the sentence up in a paraphrase table; fall back to the
    /// rule-based augmenter on a miss.
    Table,
    /// Seeded adjacent content-word swaps plus synonym substitutions.
    RuleBased,
    /// Identity.
    None,
}

impl DiscreteStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(DiscreteStrategy::Table),
            "rule_based" | "rule-based" => Ok(DiscreteStrategy::RuleBased),
            "none" => Ok(DiscreteStrategy::None),
            other => Err(Error::InvalidParameter(format!("unknown discrete strategy {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DiscreteStrategy::Table => "table",
            DiscreteStrategy::RuleBased => "rule_based",
            DiscreteStrategy::None => "none",
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseConfig {
    pub discrete_strategy: DiscreteStrategy,
    /// Continuous corruption rate applied to the embedded decoder input.
    pub continuous_rate: f64,
    pub rule_swap_prob: f64,
    pub rule_synonym_prob: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            discrete_strategy: DiscreteStrategy::RuleBased,
            continuous_rate: 0.825,
            rule_swap_prob: 0.15,
            rule_synonym_prob: 0.15,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.continuous_rate) {
            return Err(Error::InvalidParameter(format!(
                "continuous rate must be in [0, 1), got {}",
                self.continuous_rate
            )));
        }
        for (name, p) in
            [("rule_swap_prob", self.rule_swap_prob), ("rule_synonym_prob", self.rule_synonym_prob)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Externally produced sentence -> paraphrase map, ingested from file.
#[derive(Debug, Clone, Default)]
pub struct ParaphraseTable {
    map: HashMap<String, String>,
}

impl ParaphraseTable {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut map = HashMap::new();
        for (k, v) in pairs {
            if v.trim().is_empty() {
                return Err(Error::InvalidParameter(format!("empty paraphrase for {k:?}")));
            }
            map.insert(k, v);
        }
        Ok(ParaphraseTable { map })
    }

    /// `original<TAB>paraphrase` per line, no header. Duplicate keys keep the
    /// last entry and emit a warning.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let mut cols = line.splitn(2, '\t');
            let original = cols.next().unwrap_or("");
            let paraphrase = cols.next().ok_or(Error::Format {
                line: lineno,
                message: "expected original<TAB>paraphrase".into(),
            })?;
            if paraphrase.trim().is_empty() {
                return Err(Error::Format { line: lineno, message: "empty paraphrase".into() });
            }
            if map.insert(original.to_string(), paraphrase.to_string()).is_some() {
                log::warn!("duplicate paraphrase key at line {lineno}; keeping the last entry");
            }
        }
        Ok(ParaphraseTable { map })
    }

    pub fn get(&self, sentence: &str) -> Option<&str> {
        self.map.get(sentence).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// token -> synonym substitutions for the rule-based augmenter.
#[derive(Debug, Clone)]
pub struct SynonymTable {
    map: HashMap<String, String>,
}

impl SynonymTable {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_SYNONYMS).expect("bundled synonym list is well-formed")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    fn parse(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut cols = line.splitn(2, '\t');
            let token = cols.next().unwrap_or("");
            let synonym = cols.next().ok_or(Error::Format {
                line: i + 1,
                message: "expected token<TAB>synonym".into(),
            })?;
            map.insert(token.to_string(), synonym.to_string());
        }
        Ok(SynonymTable { map })
    }

    pub fn get(&self, token: &str) -> Option<&str> {
        self.map.get(token).map(String::as_str)
    }
}

/// Original ids, discrete-augmented ids, and the stream tag reserved for the
/// continuous stage applied downstream on embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyTrainingPair {
    pub original_ids: Vec<usize>,
    pub augmented_ids: Vec<usize>,
    /// (seed, stream_id) of the continuous-corruption stream.
    pub rng_tag: (u64, u64),
}

fn is_content_word(token: &str) -> bool {
    !token.is_empty() && token.chars().all(char::is_alphabetic)
}

/// Conservative rule-based augmentation: adjacent content-word swaps and
/// synonym substitutions, leaving the first token, the last token, and all
/// punctuation untouched. Deterministic given the stream.
fn rule_based_augment(
    tokens: &[String],
    config: &NoiseConfig,
    synonyms: &SynonymTable,
    rng: &mut RngStream,
) -> Vec<String> {
    let n = tokens.len();
    let mut out: Vec<String> = tokens.to_vec();
    let eligible: Vec<bool> = (0..n)
        .map(|i| i > 0 && i + 1 < n && is_content_word(&tokens[i]))
        .collect();

    let mut i = 0;
    while i + 1 < n {
        if eligible[i] && eligible[i + 1] {
            if rng.next_bool(config.rule_swap_prob) {
                out.swap(i, i + 1);
                i += 2;
                continue;
            }
        }
        i += 1;
    }
    for (j, slot) in out.iter_mut().enumerate() {
        if !eligible[j] {
            continue;
        }
        if let Some(syn) = synonyms.get(slot) {
            if rng.next_bool(config.rule_synonym_prob) {
                *slot = syn.to_string();
            }
        }
    }
    out
}

/// Discrete (token-level) augmentation of one sentence.
pub fn discrete_augment(
    sentence: &str,
    config: &NoiseConfig,
    table: Option<&ParaphraseTable>,
    synonyms: &SynonymTable,
    rng: &mut RngStream,
) -> Result<String> {
    if sentence.trim().is_empty() {
        return Err(Error::EmptySentence);
    }
    match config.discrete_strategy {
        DiscreteStrategy::None => Ok(sentence.to_string()),
        DiscreteStrategy::Table => {
            let table = table.ok_or_else(|| {
                Error::InvalidParameter("table strategy requires a paraphrase table".into())
            })?;
            match table.get(sentence) {
                Some(p) => Ok(p.to_string()),
                None => {
                    let tokens = tokenize_str(sentence)?;
                    Ok(rule_based_augment(&tokens, config, synonyms, rng).join(" "))
                }
            }
        }
        DiscreteStrategy::RuleBased => {
            let tokens = tokenize_str(sentence)?;
            Ok(rule_based_augment(&tokens, config, synonyms, rng).join(" "))
        }
    }
}

/// Substream tag under which the continuous stage draws its mask.
pub const CONTINUOUS_STAGE_TAG: u64 = 0xC0;

/// Tokenize the original and its discrete augmentation, and reserve the
/// stream for the later continuous stage. No continuous corruption happens
/// here — it acts on embeddings, downstream.
pub fn make_training_pair(
    sentence: &str,
    vocab: &Vocabulary,
    config: &NoiseConfig,
    table: Option<&ParaphraseTable>,
    synonyms: &SynonymTable,
    rng: &mut RngStream,
) -> Result<NoisyTrainingPair> {
    let original_ids = tokenize(sentence, vocab)?;
    let augmented = discrete_augment(sentence, config, table, synonyms, rng)?;
    let augmented_ids = tokenize(&augmented, vocab)?;
    let continuous = rng.substream(CONTINUOUS_STAGE_TAG);
    Ok(NoisyTrainingPair {
        original_ids,
        augmented_ids,
        rng_tag: (continuous.seed(), continuous.stream_id()),
    })
}

/// Continuous corruption of the embedded decoder input: inverted dropout at
/// rate `p` during training, identity in eval mode.
pub fn continuous_corrupt<T: Scalar>(
    g: &mut Graph<T>,
    embedded: NodeId,
    p: f64,
    training: bool,
    rng: &mut RngStream,
) -> Result<NodeId> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!(
            "continuous corruption rate must be in [0, 1), got {p}"
        )));
    }
    if !training {
        return Ok(embedded);
    }
    let (out, _mask) = g.dropout(embedded, p, rng)?;
    Ok(out)
}
