//! Vocabulary construction, corpus ingestion and batching.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::phrase::{PhraseTable, SentenceAnnotation, Span};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token↔id map with the four reserved entries at the front. Every
/// out-of-vocabulary token encodes to [`UNK`].
#[derive(Debug, Clone)]
pub struct Vocabulary {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { ids, tokens }
    }

    /// Rebuild from a saved token list (one token per id, reserved entries
    /// first).
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || tokens[..RESERVED.len()].iter().map(String::as_str).ne(RESERVED.iter().copied())
        {
            return Err(Error::Config("vocabulary file does not start with the reserved tokens".into()));
        }
        Ok(Vocabulary::from_tokens(tokens))
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Vocabulary::from_token_list(text.lines().map(str::to_string).collect())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct VocabBuild {
    pub vocab: Vocabulary,
    /// Fraction of corpus token instances covered by the kept vocabulary.
    pub coverage: f64,
}

/// Keep the `max_size − 4` most frequent tokens after the reserved entries;
/// frequency ties break lexicographically.
pub fn build_vocab<'a, I>(sentences: I, max_size: usize) -> Result<VocabBuild>
where
    I: IntoIterator<Item = &'a [String]>,
{
    if max_size <= RESERVED.len() {
        return Err(Error::Config(format!("vocabulary size {max_size} leaves no room after reserved ids")));
    }
    let mut counts: HashMap<&'a str, usize> = HashMap::new();
    let mut total = 0usize;
    for sentence in sentences {
        for token in sentence {
            *counts.entry(token.as_str()).or_default() += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(max_size - RESERVED.len());
    let covered: usize = ranked.iter().map(|(_, c)| c).sum();
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(ranked.into_iter().map(|(t, _)| t.to_string()));
    Ok(VocabBuild { vocab: Vocabulary::from_tokens(tokens), coverage: covered as f64 / total as f64 })
}

/// A selected phrase occurrence resolved against the vocabularies: the
/// decoder works with these rather than raw table rules.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub rule_id: usize,
    pub slot: usize,
    pub source_span: Span,
    /// Target tokens as emitted (literal strings, possibly out-of-vocabulary).
    pub target_tokens: Vec<String>,
    /// Target tokens encoded against the target vocabulary (OOV → UNK).
    pub target_ids: Vec<usize>,
    /// True iff no target token is out of vocabulary (the I_unk indicator).
    pub in_vocab: bool,
    /// Where the target phrase sits in the reference, for gold segments.
    pub gold_target_span: Option<Span>,
}

pub fn make_candidates(
    annotation: &SentenceAnnotation,
    table: &PhraseTable,
    target_vocab: &Vocabulary,
) -> Vec<Candidate> {
    annotation
        .occurrences
        .iter()
        .enumerate()
        .map(|(idx, occ)| {
            let rule = table.rule(occ.rule_id);
            let gold = annotation
                .gold_occurrences
                .iter()
                .find(|g| g.occurrence == idx)
                .map(|g| g.target_span);
            Candidate {
                rule_id: occ.rule_id,
                slot: occ.slot,
                source_span: occ.source_span,
                target_tokens: rule.target.clone(),
                target_ids: target_vocab.encode(&rule.target),
                in_vocab: rule.target.iter().all(|t| target_vocab.contains(t)),
                gold_target_span: gold,
            }
        })
        .collect()
}

/// One sentence pair ready for training: encoded ids (EOS-terminated target)
/// plus its phrase annotation.
#[derive(Debug, Clone)]
pub struct ParallelExample {
    pub source_ids: Vec<usize>,
    /// Ends with EOS.
    pub target_ids: Vec<usize>,
    pub annotation: SentenceAnnotation,
    pub candidates: Vec<Candidate>,
}

pub fn make_example(
    source: &[String],
    target: &[String],
    table: &PhraseTable,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
    n_p: usize,
) -> Result<ParallelExample> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Contract("empty sentence in a parallel example".into()));
    }
    let annotation = crate::phrase::annotate(table, source, Some(target), n_p);
    let candidates = make_candidates(&annotation, table, target_vocab);
    let mut target_ids = target_vocab.encode(target);
    target_ids.push(EOS);
    Ok(ParallelExample {
        source_ids: source_vocab.encode(source),
        target_ids,
        annotation,
        candidates,
    })
}

/// A length-sorted-free, padded mini-batch. The model walks `examples`
/// one sentence at a time; the padded views carry the mask contract.
#[derive(Debug, Clone)]
pub struct Batch {
    pub examples: Vec<ParallelExample>,
    pub padded_source: Vec<Vec<usize>>,
    pub padded_target: Vec<Vec<usize>>,
    pub source_mask: Vec<Vec<u8>>,
    pub target_mask: Vec<Vec<u8>>,
}

impl Batch {
    fn from_examples(examples: Vec<ParallelExample>) -> Self {
        let max_src = examples.iter().map(|e| e.source_ids.len()).max().unwrap_or(0);
        let max_tgt = examples.iter().map(|e| e.target_ids.len()).max().unwrap_or(0);
        let mut padded_source = Vec::with_capacity(examples.len());
        let mut padded_target = Vec::with_capacity(examples.len());
        let mut source_mask = Vec::with_capacity(examples.len());
        let mut target_mask = Vec::with_capacity(examples.len());
        for ex in &examples {
            let mut s = ex.source_ids.clone();
            let mut sm = vec![1u8; s.len()];
            s.resize(max_src, PAD);
            sm.resize(max_src, 0);
            padded_source.push(s);
            source_mask.push(sm);
            let mut t = ex.target_ids.clone();
            let mut tm = vec![1u8; t.len()];
            t.resize(max_tgt, PAD);
            tm.resize(max_tgt, 0);
            padded_target.push(t);
            target_mask.push(tm);
        }
        Batch { examples, padded_source, padded_target, source_mask, target_mask }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Filter out over-length pairs, shuffle with a seeded RNG and chunk into
/// padded batches.
pub fn make_batches(
    examples: &[ParallelExample],
    batch_size: usize,
    max_len: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut kept: Vec<ParallelExample> = examples
        .iter()
        .filter(|e| e.source_ids.len() <= max_len && e.target_ids.len() <= max_len)
        .cloned()
        .collect();
    if kept.is_empty() {
        log::warn!("no examples under the length limit {max_len}; zero batches produced");
        return Ok(Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kept.shuffle(&mut rng);
    Ok(kept
        .chunks(batch_size)
        .map(|chunk| Batch::from_examples(chunk.to_vec()))
        .collect())
}

/// Read an aligned pair of one-sentence-per-line token files.
pub fn read_parallel(source_path: &Path, target_path: &Path) -> Result<Vec<(Vec<String>, Vec<String>)>> {
    let source = read_token_lines(source_path)?;
    let target = read_token_lines(target_path)?;
    if source.len() != target.len() {
        return Err(Error::Config(format!(
            "parallel files disagree: {} source lines vs {} target lines",
            source.len(),
            target.len()
        )));
    }
    Ok(source.into_iter().zip(target).collect())
}

pub fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let file = std::fs::File::open(path)?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        lines.push(line.split_whitespace().map(str::to_string).collect());
    }
    Ok(lines)
}

pub fn write_token_lines(path: &Path, sentences: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&s.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn vocab_reserves_ids_and_ranks_by_frequency() {
        let sents = [toks("a a b"), toks("a c")];
        let refs: Vec<&[String]> = sents.iter().map(|s| s.as_slice()).collect();
        let built = build_vocab(refs.iter().copied(), 8).unwrap();
        let v = built.vocab;
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<bos>"), BOS);
        assert_eq!(v.id("<eos>"), EOS);
        assert_eq!(v.id("<unk>"), UNK);
        assert_eq!(v.id("a"), 4);
        // b and c tie at one occurrence; lexicographic order breaks it
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("c"), 6);
        assert!((built.coverage - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vocab_truncates_and_reports_coverage() {
        let sents = [toks("a a a b b c")];
        let refs: Vec<&[String]> = sents.iter().map(|s| s.as_slice()).collect();
        let built = build_vocab(refs.iter().copied(), 5).unwrap();
        assert_eq!(built.vocab.len(), 5);
        assert_eq!(built.vocab.id("a"), 4);
        assert_eq!(built.vocab.id("b"), UNK);
        assert!((built.coverage - 0.5).abs() < 1e-12);
    }

    #[test]
    fn vocab_rejects_empty_corpus() {
        let refs: Vec<&[String]> = Vec::new();
        assert!(build_vocab(refs, 10).is_err());
    }

    #[test]
    fn unknown_tokens_encode_to_unk() {
        let sents = [toks("a b")];
        let refs: Vec<&[String]> = sents.iter().map(|s| s.as_slice()).collect();
        let v = build_vocab(refs.iter().copied(), 10).unwrap().vocab;
        assert_eq!(v.encode(&toks("a z b")), vec![4, UNK, 5]);
    }

    #[test]
    fn encode_decode_round_trip_in_vocab() {
        let sents = [toks("x y z")];
        let refs: Vec<&[String]> = sents.iter().map(|s| s.as_slice()).collect();
        let v = build_vocab(refs.iter().copied(), 10).unwrap().vocab;
        let ids = v.encode(&toks("z x y"));
        assert_eq!(v.encode(&v.decode(&ids)), ids);
    }

    #[test]
    fn example_terminates_target_with_eos() {
        let table = PhraseTable::new();
        let sents = [toks("a b"), toks("x y")];
        let sv = build_vocab([sents[0].as_slice()], 10).unwrap().vocab;
        let tv = build_vocab([sents[1].as_slice()], 10).unwrap().vocab;
        let ex = make_example(&toks("a b"), &toks("x y"), &table, &sv, &tv, 3).unwrap();
        assert_eq!(*ex.target_ids.last().unwrap(), EOS);
        assert_eq!(ex.target_ids.len(), 3);
    }

    #[test]
    fn candidates_carry_unk_indicator_and_gold_span() {
        let mut table = PhraseTable::new();
        table.insert(toks("a b"), toks("X Y")).unwrap();
        table.insert(toks("c"), toks("zzz")).unwrap();
        let src = [toks("a b c")];
        let tgt = [toks("X Y q")];
        let sv = build_vocab(src.iter().map(|s| s.as_slice()), 12).unwrap().vocab;
        let tv = build_vocab(tgt.iter().map(|s| s.as_slice()), 12).unwrap().vocab;
        let ex = make_example(&src[0], &tgt[0], &table, &sv, &tv, 4).unwrap();
        assert_eq!(ex.candidates.len(), 2);
        assert!(ex.candidates[0].in_vocab);
        assert_eq!(ex.candidates[0].gold_target_span, Some(Span::new(0, 2)));
        assert!(!ex.candidates[1].in_vocab, "zzz is not in the target vocabulary");
        assert_eq!(ex.candidates[1].target_ids, vec![UNK]);
        assert_eq!(ex.candidates[1].gold_target_span, None);
    }

    fn tiny_examples(n: usize) -> Vec<ParallelExample> {
        let table = PhraseTable::new();
        let words = ["a", "b", "c", "d", "e"];
        let sents: Vec<Vec<String>> = (0..n)
            .map(|i| (0..(1 + i % 4)).map(|j| words[(i + j) % 5].to_string()).collect())
            .collect();
        let refs: Vec<&[String]> = sents.iter().map(|s| s.as_slice()).collect();
        let v = build_vocab(refs.iter().copied(), 16).unwrap().vocab;
        sents
            .iter()
            .map(|s| make_example(s, s, &table, &v, &v, 3).unwrap())
            .collect()
    }

    #[test]
    fn batches_split_and_pad() {
        let examples = tiny_examples(3);
        let batches = make_batches(&examples, 2, 50, 7).unwrap();
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].len(), 2);
        assert_eq!(batches[1].len(), 1);
        for b in &batches {
            let w = b.padded_source[0].len();
            for (row, mask) in b.padded_source.iter().zip(&b.source_mask) {
                assert_eq!(row.len(), w);
                assert_eq!(mask.len(), w);
                for (x, m) in row.iter().zip(mask) {
                    if *m == 0 {
                        assert_eq!(*x, PAD);
                    }
                }
            }
        }
    }

    #[test]
    fn batches_filter_overlong() {
        let examples = tiny_examples(4);
        let batches = make_batches(&examples, 2, 1, 7).unwrap();
        // only length-1 sources with length-2 targets (EOS) survive max_len=1? none do
        assert!(batches.is_empty());
    }

    #[test]
    fn batches_are_deterministic_under_seed() {
        let examples = tiny_examples(10);
        let a = make_batches(&examples, 3, 50, 42).unwrap();
        let b = make_batches(&examples, 3, 50, 42).unwrap();
        let order =
            |bs: &[Batch]| bs.iter().flat_map(|b| b.examples.iter().map(|e| e.source_ids.clone())).collect::<Vec<_>>();
        assert_eq!(order(&a), order(&b));
        let c = make_batches(&examples, 3, 50, 43).unwrap();
        assert_ne!(order(&a), order(&c), "different seed should reshuffle");
    }
}
