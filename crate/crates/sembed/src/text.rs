//! Tokenization, vocabulary construction, corpus / evaluation-file ingestion,
//! and padded batch assembly.

use crate::error::{Error, Result};
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const MASK_ID: usize = 2;

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const MASK_TOKEN: &str = "[MASK]";

/// Tokens the pooling template needs; always force-included in a vocabulary.
pub const TEMPLATE_TOKENS: [&str; 2] = ["means", "."];

/// Token <-> id mapping with fixed special ids PAD=0, UNK=1, MASK=2.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if token_to_id.insert(tok.clone(), id).is_some() {
                return Err(Error::ContractViolation(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        let vocab = Vocabulary { token_to_id, id_to_token: tokens };
        vocab.validate()?;
        Ok(vocab)
    }

    fn validate(&self) -> Result<()> {
        let specials = [PAD_TOKEN, UNK_TOKEN, MASK_TOKEN];
        for (id, tok) in specials.iter().enumerate() {
            if self.id_to_token.get(id).map(String::as_str) != Some(*tok) {
                return Err(Error::ContractViolation(format!(
                    "vocabulary id {id} must be {tok}, got {:?}",
                    self.id_to_token.get(id)
                )));
            }
        }
        for tok in TEMPLATE_TOKENS {
            if !self.token_to_id.contains_key(tok) {
                return Err(Error::ContractViolation(format!(
                    "vocabulary is missing required template token {tok:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn means_id(&self) -> usize {
        self.token_to_id["means"]
    }

    pub fn period_id(&self) -> usize {
        self.token_to_id["."]
    }

    /// One token per line, line index = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in &self.id_to_token {
            out.push_str(tok);
            out.push('\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(Error::EmptyInput(format!("vocabulary file {}", path.display())));
        }
        Self::from_tokens(tokens)
    }
}

fn is_ascii_punct(c: char) -> bool {
    c.is_ascii_punctuation()
}

fn is_special_form(piece: &str) -> Option<usize> {
    match piece {
        "[pad]" => Some(PAD_ID),
        "[unk]" => Some(UNK_ID),
        "[mask]" => Some(MASK_ID),
        _ => None,
    }
}

/// Lowercase, split on whitespace, and detach leading/trailing ASCII
/// punctuation into their own tokens. Special forms like `[unk]` survive as
/// atoms so detokenized text re-tokenizes to the same ids.
pub fn tokenize_str(text: &str) -> Result<Vec<String>> {
    let lowered = text.to_lowercase();
    let mut tokens = Vec::new();
    for piece in lowered.split_whitespace() {
        if is_special_form(piece).is_some() {
            tokens.push(piece.to_string());
            continue;
        }
        let mut head = Vec::new();
        let mut tail = Vec::new();
        let mut core: &str = piece;
        while let Some(c) = core.chars().next() {
            if is_ascii_punct(c) {
                head.push(c.to_string());
                core = &core[c.len_utf8()..];
            } else {
                break;
            }
        }
        while let Some(c) = core.chars().next_back() {
            if is_ascii_punct(c) {
                tail.push(c.to_string());
                core = &core[..core.len() - c.len_utf8()];
            } else {
                break;
            }
        }
        tokens.extend(head);
        if !core.is_empty() {
            tokens.push(core.to_string());
        }
        tokens.extend(tail.into_iter().rev());
    }
    if tokens.is_empty() {
        return Err(Error::EmptySentence);
    }
    Ok(tokens)
}

/// Token-id sequence for a sentence; out-of-vocabulary tokens map to UNK.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    Ok(tokenize_str(text)?
        .into_iter()
        .map(|tok| match is_special_form(&tok) {
            Some(id) => id,
            None => vocab.id_of(&tok).unwrap_or(UNK_ID),
        })
        .collect())
}

/// Inverse of [`tokenize`] up to whitespace: ids joined by single spaces.
pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .map(|&id| vocab.token_of(id).unwrap_or(UNK_TOKEN))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Most-frequent tokens meeting `min_count`, capped at `max_size`, specials
/// first, then frequency order with lexicographic tie-break. The template
/// tokens are force-included even below the count threshold.
pub fn build_vocab(corpus_path: &Path, min_count: usize, max_size: usize) -> Result<Vocabulary> {
    if min_count < 1 {
        return Err(Error::InvalidParameter(format!("min_count must be >= 1, got {min_count}")));
    }
    if max_size < 3 + TEMPLATE_TOKENS.len() {
        return Err(Error::InvalidParameter(format!(
            "max_size must hold the specials and template tokens, got {max_size}"
        )));
    }
    let sentences = load_corpus(corpus_path)?;
    let mut counts: HashMap<String, usize> = HashMap::new();
    for sentence in &sentences {
        for tok in tokenize_str(sentence)? {
            if is_special_form(&tok).is_none() {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
    }
    let mut candidates: Vec<(String, usize)> = counts
        .iter()
        .filter(|(tok, &c)| c >= min_count || TEMPLATE_TOKENS.contains(&tok.as_str()))
        .map(|(tok, &c)| (tok.clone(), c))
        .collect();
    for forced in TEMPLATE_TOKENS {
        if !counts.contains_key(forced) {
            candidates.push((forced.to_string(), 0));
        }
    }
    candidates.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let cap = max_size - 3;
    if candidates.len() > cap {
        // Keep the forced tokens by evicting the lowest-ranked regular ones.
        let keep: Vec<(String, usize)> = {
            let (head, overflow) = candidates.split_at(cap);
            let mut head: Vec<_> = head.to_vec();
            let missing: Vec<&(String, usize)> = overflow
                .iter()
                .filter(|(t, _)| TEMPLATE_TOKENS.contains(&t.as_str()))
                .collect();
            for forced in missing {
                if let Some(pos) = head
                    .iter()
                    .rposition(|(t, _)| !TEMPLATE_TOKENS.contains(&t.as_str()))
                {
                    head.remove(pos);
                    head.push(forced.clone());
                }
            }
            head
        };
        candidates = keep;
        candidates.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    }

    let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string(), MASK_TOKEN.to_string()];
    tokens.extend(candidates.into_iter().map(|(t, _)| t));
    Vocabulary::from_tokens(tokens)
}

/// One sentence per line, blank lines skipped.
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let sentences: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    if sentences.is_empty() {
        return Err(Error::EmptyInput(format!("corpus {} has no sentences", path.display())));
    }
    Ok(sentences)
}

/// Padded token-id matrix plus validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SentenceBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
    pub lengths: Vec<usize>,
    pub batch: usize,
    pub width: usize,
}

impl SentenceBatch {
    pub fn id_at(&self, b: usize, j: usize) -> usize {
        self.ids[b * self.width + j]
    }

    pub fn mask_at(&self, b: usize, j: usize) -> bool {
        self.mask[b * self.width + j] == 1
    }

    pub fn mask_bools(&self) -> Vec<bool> {
        self.mask.iter().map(|&m| m == 1).collect()
    }
}

/// Truncate each sequence to `width`, right-pad with PAD, record lengths.
pub fn make_batch(sequences: &[Vec<usize>], width: usize) -> Result<SentenceBatch> {
    if sequences.is_empty() {
        return Err(Error::EmptyInput("make_batch with no sequences".into()));
    }
    if width == 0 {
        return Err(Error::InvalidParameter("make_batch width must be >= 1".into()));
    }
    let batch = sequences.len();
    let mut ids = vec![PAD_ID; batch * width];
    let mut mask = vec![0u8; batch * width];
    let mut lengths = Vec::with_capacity(batch);
    for (b, seq) in sequences.iter().enumerate() {
        if seq.is_empty() {
            return Err(Error::EmptySentence);
        }
        if seq.len() > width {
            log::debug!("truncating sequence of length {} to {width}", seq.len());
        }
        let n = seq.len().min(width);
        for (j, &id) in seq[..n].iter().enumerate() {
            ids[b * width + j] = id;
            mask[b * width + j] = 1;
        }
        lengths.push(n);
    }
    Ok(SentenceBatch { ids, mask, lengths, batch, width })
}

/// Sentence pair plus gold similarity score in [0, 5].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub sentence_a: String,
    pub sentence_b: String,
    pub gold_score: f64,
}

/// Parse `sentence_a<TAB>sentence_b<TAB>score` records.
pub fn load_sts(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_sts(&text)
}

pub fn parse_sts(text: &str) -> Result<Vec<EvalRecord>> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Format {
                line: lineno,
                message: format!("expected 3 tab-separated columns, got {}", cols.len()),
            });
        }
        let score: f64 = cols[2].trim().parse().map_err(|_| Error::Format {
            line: lineno,
            message: format!("unparsable score {:?}", cols[2]),
        })?;
        if !(0.0..=5.0).contains(&score) {
            return Err(Error::Format {
                line: lineno,
                message: format!("score {score} outside [0, 5]"),
            });
        }
        if cols[0].trim().is_empty() || cols[1].trim().is_empty() {
            return Err(Error::Format { line: lineno, message: "empty sentence".into() });
        }
        records.push(EvalRecord {
            sentence_a: cols[0].to_string(),
            sentence_b: cols[1].to_string(),
            gold_score: score,
        });
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn temp_corpus(lines: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(lines.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    fn tiny_vocab(extra: &[&str]) -> Vocabulary {
        let mut tokens = vec![
            PAD_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
            MASK_TOKEN.to_string(),
            "means".to_string(),
            ".".to_string(),
        ];
        tokens.extend(extra.iter().map(|s| s.to_string()));
        Vocabulary::from_tokens(tokens).unwrap()
    }

    #[test]
    fn tokenize_detaches_punctuation() {
        let vocab = tiny_vocab(&["hello", "world"]);
        let ids = tokenize("Hello world.", &vocab).unwrap();
        assert_eq!(
            ids,
            vec![vocab.id_of("hello").unwrap(), vocab.id_of("world").unwrap(), vocab.period_id()]
        );
    }

    #[test]
    fn tokenize_maps_unknowns_to_unk() {
        let vocab = tiny_vocab(&[]);
        let ids = tokenize("totally unseen words", &vocab).unwrap();
        assert_eq!(ids, vec![UNK_ID, UNK_ID, UNK_ID]);
    }

    #[test]
    fn tokenize_rejects_empty_text() {
        let vocab = tiny_vocab(&[]);
        assert!(matches!(tokenize("", &vocab), Err(Error::EmptySentence)));
        assert!(matches!(tokenize("   \t ", &vocab), Err(Error::EmptySentence)));
    }

    #[test]
    fn tokenize_detokenize_tokenize_is_idempotent() {
        let vocab = tiny_vocab(&["cats", "purr"]);
        for s in ["Cats purr.", "unknownword cats!", "((cats))", "don't cats"] {
            let once = tokenize(s, &vocab).unwrap();
            let round = tokenize(&detokenize(&once, &vocab), &vocab).unwrap();
            assert_eq!(round, once, "failed for {s:?}");
        }
    }

    #[test]
    fn build_vocab_construction_example() {
        let f = temp_corpus("a a b\n");
        let v = build_vocab(f.path(), 2, 100).unwrap();
        // specials + forced template tokens + {"a"}
        assert_eq!(v.len(), 6);
        assert_eq!(v.token_of(0), Some(PAD_TOKEN));
        assert_eq!(v.token_of(1), Some(UNK_TOKEN));
        assert_eq!(v.token_of(2), Some(MASK_TOKEN));
        assert!(v.id_of("a").is_some());
        assert!(v.id_of("b").is_none());
        assert!(v.id_of("means").is_some());
        assert!(v.id_of(".").is_some());
    }

    #[test]
    fn build_vocab_respects_cap() {
        let corpus: String =
            (0..50).map(|i| format!("tok{i:02}")).collect::<Vec<_>>().join(" ");
        let f = temp_corpus(&corpus);
        let v = build_vocab(f.path(), 1, 10).unwrap();
        assert_eq!(v.len(), 10);
        // Forced tokens survive the cap.
        assert!(v.id_of("means").is_some());
        assert!(v.id_of(".").is_some());
    }

    #[test]
    fn build_vocab_is_deterministic() {
        let f = temp_corpus("c b a\nb a\na\n");
        let v1 = build_vocab(f.path(), 1, 100).unwrap();
        let v2 = build_vocab(f.path(), 1, 100).unwrap();
        for id in 0..v1.len() {
            assert_eq!(v1.token_of(id), v2.token_of(id));
        }
        // Frequency order with lexicographic tie-break: a(3), b(2), then
        // the forced "." and "means" at count 0 after c(1).
        assert!(v1.id_of("a").unwrap() < v1.id_of("b").unwrap());
        assert!(v1.id_of("b").unwrap() < v1.id_of("c").unwrap());
    }

    #[test]
    fn build_vocab_empty_corpus_errors() {
        let f = temp_corpus("\n\n");
        assert!(matches!(build_vocab(f.path(), 1, 10), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn vocab_round_trip_through_file() {
        let f = temp_corpus("the cat sat on the mat .\n");
        let v = build_vocab(f.path(), 1, 100).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        v.save(out.path()).unwrap();
        let loaded = Vocabulary::load(out.path()).unwrap();
        assert_eq!(loaded.len(), v.len());
        for id in 0..v.len() {
            assert_eq!(loaded.token_of(id), v.token_of(id));
        }
        let text = std::fs::read_to_string(out.path()).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("[PAD]"));
        assert_eq!(lines.next(), Some("[UNK]"));
        assert_eq!(lines.next(), Some("[MASK]"));
    }

    #[test]
    fn make_batch_truncates_and_pads() {
        let b = make_batch(&[vec![5, 6], vec![5, 6, 7, 8, 9]], 4).unwrap();
        assert_eq!(b.batch, 2);
        assert_eq!(b.width, 4);
        assert_eq!(b.lengths, vec![2, 4]);
        assert_eq!(b.ids, vec![5, 6, PAD_ID, PAD_ID, 5, 6, 7, 8]);
        assert_eq!(b.mask, vec![1, 1, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn make_batch_full_rows_have_all_ones_mask() {
        let b = make_batch(&[vec![3, 4, 5], vec![6, 7, 8]], 3).unwrap();
        assert!(b.mask.iter().all(|&m| m == 1));
    }

    #[test]
    fn make_batch_single_token_row() {
        let b = make_batch(&[vec![9]], 5).unwrap();
        assert_eq!(b.mask, vec![1, 0, 0, 0, 0]);
    }

    #[test]
    fn make_batch_rejects_empty_sequences() {
        assert!(matches!(make_batch(&[vec![]], 4), Err(Error::EmptySentence)));
    }

    #[test]
    fn sts_parsing() {
        let records = parse_sts("a cat.\tA cat!\t5.0\n").unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].gold_score, 5.0);

        assert!(parse_sts("").unwrap().is_empty());

        match parse_sts("x\ty") {
            Err(Error::Format { line: 1, .. }) => {}
            other => panic!("expected format error at line 1, got {other:?}"),
        }
        match parse_sts("a\tb\tnot_a_number") {
            Err(Error::Format { line: 1, .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
        match parse_sts("a\tb\t7.5") {
            Err(Error::Format { line: 1, .. }) => {}
            other => panic!("expected out-of-range error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn tokenization_is_pure(s in "[ -~]{1,60}") {
            let vocab = tiny_vocab(&["alpha", "beta"]);
            let a = tokenize(&s, &vocab);
            let b = tokenize(&s, &vocab);
            match (a, b) {
                (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "non-deterministic tokenize"),
            }
        }

        #[test]
        fn batches_never_have_all_zero_mask_rows(
            seqs in proptest::collection::vec(
                proptest::collection::vec(0usize..50, 1..12), 1..6),
            width in 1usize..16,
        ) {
            let b = make_batch(&seqs, width).unwrap();
            for row in 0..b.batch {
                let ones: usize = (0..b.width).map(|j| b.mask[row * b.width + j] as usize).sum();
                prop_assert!(ones >= 1);
                prop_assert_eq!(ones, b.lengths[row]);
            }
        }

        #[test]
        fn pads_exactly_where_mask_is_zero(
            seqs in proptest::collection::vec(
                proptest::collection::vec(3usize..50, 1..12), 1..6),
        ) {
            let b = make_batch(&seqs, 8).unwrap();
            for i in 0..b.ids.len() {
                if b.mask[i] == 0 {
                    prop_assert_eq!(b.ids[i], PAD_ID);
                }
            }
        }
    }
}
