//! Translation quality measurement: corpus BLEU (with the 4-gram-only
//! variant) and phrase-production accuracy against generator ground truth.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::Placement;

pub const MAX_NGRAM: usize = 4;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BleuReport {
    /// Modified n-gram precisions p1..p4, pooled over the corpus.
    pub precisions: [f64; MAX_NGRAM],
    pub brevity_penalty: f64,
    pub bleu: f64,
    /// BP · p4: overlap on longer segments only.
    pub four_gram: f64,
    pub sentences: usize,
    pub candidate_tokens: usize,
    pub reference_tokens: usize,
}

fn fold(tokens: &[String]) -> Vec<String> {
    tokens.iter().map(|t| t.to_lowercase()).collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

/// Corpus BLEU with clipped modified n-gram precisions pooled over all
/// sentences, an unsmoothed geometric mean of p1..p4, and the brevity
/// penalty exp(1 − r/c) when the candidate corpus is shorter. Comparison is
/// case-insensitive. Single reference per sentence.
pub fn corpus_bleu(candidates: &[Vec<String>], references: &[Vec<String>]) -> Result<BleuReport> {
    if candidates.is_empty() {
        return Err(Error::Contract("cannot score an empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Contract(format!(
            "{} candidates vs {} references",
            candidates.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; MAX_NGRAM];
    let mut total = [0usize; MAX_NGRAM];
    let mut c_len = 0usize;
    let mut r_len = 0usize;
    for (cand, reference) in candidates.iter().zip(references) {
        let cand = fold(cand);
        let reference = fold(reference);
        c_len += cand.len();
        r_len += reference.len();
        for n in 1..=MAX_NGRAM {
            let cand_counts = ngram_counts(&cand, n);
            let ref_counts = ngram_counts(&reference, n);
            for (gram, &count) in &cand_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(&clip + 0);
            }
            total[n - 1] += cand.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0f64; MAX_NGRAM];
    for n in 0..MAX_NGRAM {
        precisions[n] = if total[n] > 0 { matched[n] as f64 / total[n] as f64 } else { 0.0 };
    }
    let brevity_penalty = if c_len < r_len && c_len > 0 {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else if c_len == 0 {
        0.0
    } else {
        1.0
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_NGRAM as f64).exp()
    };
    Ok(BleuReport {
        precisions,
        brevity_penalty,
        bleu,
        four_gram: brevity_penalty * precisions[MAX_NGRAM - 1],
        sentences: candidates.len(),
        candidate_tokens: c_len,
        reference_tokens: r_len,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PhraseAccuracy {
    /// Fraction of expected target phrases appearing verbatim in the
    /// candidate.
    pub recall: f64,
    /// Fraction appearing with the correct left/right neighbor tokens.
    pub position_rate: f64,
    pub expected: usize,
}

fn contains_subseq(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && needle.len() <= hay.len() && hay.windows(needle.len()).any(|w| w == needle)
}

fn in_position(candidate: &[String], p: &Placement) -> bool {
    let mut window: Vec<String> = Vec::new();
    if let Some(left) = &p.left {
        window.push(left.clone());
    }
    window.extend(p.target_tokens.iter().cloned());
    if let Some(right) = &p.right {
        window.push(right.clone());
    }
    let starts: Vec<usize> = (0..=candidate.len().saturating_sub(window.len()))
        .filter(|&i| candidate.len() >= window.len() && candidate[i..i + window.len()] == window[..])
        .collect();
    starts.iter().any(|&i| {
        // a missing neighbor means a sentence boundary
        (p.left.is_some() || i == 0)
            && (p.right.is_some() || i + window.len() == candidate.len())
    })
}

/// Score candidates against the generator's phrase placement metadata.
pub fn phrase_accuracy(candidates: &[Vec<String>], metadata: &[Vec<Placement>]) -> Result<PhraseAccuracy> {
    if candidates.len() != metadata.len() {
        return Err(Error::Contract(format!(
            "{} candidates vs {} metadata records",
            candidates.len(),
            metadata.len()
        )));
    }
    let mut expected = 0usize;
    let mut recalled = 0usize;
    let mut placed = 0usize;
    for (cand, placements) in candidates.iter().zip(metadata) {
        for p in placements {
            expected += 1;
            if contains_subseq(cand, &p.target_tokens) {
                recalled += 1;
            }
            if in_position(cand, p) {
                placed += 1;
            }
        }
    }
    Ok(PhraseAccuracy {
        recall: if expected == 0 { 1.0 } else { recalled as f64 / expected as f64 },
        position_rate: if expected == 0 { 1.0 } else { placed as f64 / expected as f64 },
        expected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phrase::Span;

    fn sent(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn identical_corpus_scores_one() {
        let corpus = vec![sent("the cat sat on the mat"), sent("a stitch in time saves nine")];
        let report = corpus_bleu(&corpus, &corpus).unwrap();
        assert_eq!(report.bleu, 1.0);
        assert_eq!(report.brevity_penalty, 1.0);
        for p in report.precisions {
            assert_eq!(p, 1.0);
        }
        assert_eq!(report.four_gram, 1.0);
    }

    #[test]
    fn no_four_gram_overlap_scores_zero() {
        let cand = vec![sent("a b c d e")];
        let reference = vec![sent("a b x c d")];
        let report = corpus_bleu(&cand, &reference).unwrap();
        assert!(report.precisions[0] > 0.0);
        assert_eq!(report.precisions[3], 0.0);
        assert_eq!(report.bleu, 0.0);
    }

    #[test]
    fn comparison_is_case_insensitive() {
        let cand = vec![sent("The CAT sat ON the mat")];
        let reference = vec![sent("the cat sat on the mat")];
        let report = corpus_bleu(&cand, &reference).unwrap();
        assert_eq!(report.bleu, 1.0);
    }

    /// Independent spreadsheet-style oracle: explicit per-sentence clipped
    /// counts, then the displayed formulas.
    fn oracle_bleu(cands: &[Vec<String>], refs: &[Vec<String>]) -> (f64, f64, [f64; 4]) {
        let lower =
            |s: &[String]| s.iter().map(|t| t.to_lowercase()).collect::<Vec<String>>();
        let mut p = [0.0f64; 4];
        for n in 1..=4 {
            let mut matched = 0usize;
            let mut total = 0usize;
            for (c, r) in cands.iter().zip(refs) {
                let (c, r) = (lower(c), lower(r));
                let grams = |s: &[String]| -> Vec<Vec<String>> {
                    if s.len() < n {
                        Vec::new()
                    } else {
                        (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
                    }
                };
                let cg = grams(&c);
                let rg = grams(&r);
                total += cg.len();
                let mut used = vec![false; rg.len()];
                for g in &cg {
                    if let Some(j) = rg.iter().enumerate().position(|(j, h)| h == g && !used[j]) {
                        used[j] = true;
                        matched += 1;
                    }
                }
            }
            p[n - 1] = if total > 0 { matched as f64 / total as f64 } else { 0.0 };
        }
        let c: usize = cands.iter().map(Vec::len).sum();
        let r: usize = refs.iter().map(Vec::len).sum();
        let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
        let bleu = if p.iter().any(|&x| x == 0.0) {
            0.0
        } else {
            bp * (p.iter().map(|x| x.ln()).sum::<f64>() / 4.0).exp()
        };
        (bleu, bp, p)
    }

    #[test]
    fn three_sentence_fixture_matches_manual_oracle() {
        let cands = vec![
            sent("the quick brown fox jumps over the dog"),
            sent("hello world again"),
            sent("one two three four five six"),
        ];
        let refs = vec![
            sent("the quick brown fox jumped over the lazy dog"),
            sent("hello brave world again"),
            sent("one two three four seven six"),
        ];
        let (obleu, obp, op) = oracle_bleu(&cands, &refs);
        let report = corpus_bleu(&cands, &refs).unwrap();
        for n in 0..4 {
            assert!((report.precisions[n] - op[n]).abs() < 1e-12, "p{}", n + 1);
        }
        assert!((report.brevity_penalty - obp).abs() < 1e-12);
        assert!((report.bleu - obleu).abs() < 1e-9);
        // frozen hand-counted values for this fixture
        assert!((report.precisions[0] - 15.0 / 17.0).abs() < 1e-12);
        assert!((report.precisions[1] - 8.0 / 14.0).abs() < 1e-12);
        assert!((report.precisions[2] - 4.0 / 11.0).abs() < 1e-12);
        assert!((report.precisions[3] - 2.0 / 8.0).abs() < 1e-12);
        let expect_bp = (1.0f64 - 19.0 / 17.0).exp();
        assert!((report.brevity_penalty - expect_bp).abs() < 1e-12);
        let expect_bleu = expect_bp
            * ((15.0f64 / 17.0).ln() / 4.0 + (8.0f64 / 14.0).ln() / 4.0 + (4.0f64 / 11.0).ln() / 4.0
                + (2.0f64 / 8.0).ln() / 4.0)
                .exp();
        assert!((report.bleu - expect_bleu).abs() < 1e-9);
        assert!((report.bleu - 0.4113480401776626).abs() < 1e-9);
        assert!((report.four_gram - 0.2222524413506939).abs() < 1e-9);
    }

    #[test]
    fn bleu_is_permutation_invariant() {
        let cands = vec![sent("a b c d e"), sent("f g h i j k"), sent("l m n o p")];
        let refs = vec![sent("a b c d x"), sent("f g h j j k"), sent("l m n o p")];
        let a = corpus_bleu(&cands, &refs).unwrap();
        let perm = [2usize, 0, 1];
        let cands2: Vec<_> = perm.iter().map(|&i| cands[i].clone()).collect();
        let refs2: Vec<_> = perm.iter().map(|&i| refs[i].clone()).collect();
        let b = corpus_bleu(&cands2, &refs2).unwrap();
        assert_eq!(a.bleu, b.bleu);
        assert_eq!(a.precisions, b.precisions);
    }

    #[test]
    fn adding_perfect_pair_never_decreases_precisions() {
        let cands = vec![sent("a b c d e"), sent("f g h i j")];
        let refs = vec![sent("a b c x e"), sent("f g h i j")];
        let before = corpus_bleu(&cands, &refs).unwrap();
        let mut cands2 = cands.clone();
        let mut refs2 = refs.clone();
        cands2.push(sent("p q r s t u"));
        refs2.push(sent("p q r s t u"));
        let after = corpus_bleu(&cands2, &refs2).unwrap();
        for n in 0..4 {
            assert!(after.precisions[n] >= before.precisions[n] - 1e-15, "p{}", n + 1);
        }
    }

    #[test]
    fn four_gram_only_equals_bp_on_identical_long_segments() {
        let corpus = vec![sent("alpha beta gamma delta epsilon")];
        let report = corpus_bleu(&corpus, &corpus).unwrap();
        assert_eq!(report.four_gram, report.brevity_penalty);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(corpus_bleu(&[], &[]).is_err());
    }

    fn placement(tokens: &str, left: Option<&str>, right: Option<&str>) -> Placement {
        Placement {
            rule_id: 0,
            source_span: Span::new(0, 1),
            target_span: Span::new(0, 1),
            target_tokens: sent(tokens),
            left: left.map(str::to_string),
            right: right.map(str::to_string),
            oov_rule: false,
        }
    }

    #[test]
    fn perfect_candidates_have_full_accuracy() {
        let cands = vec![sent("w1 P Q w2 .")];
        let meta = vec![vec![placement("P Q", Some("w1"), Some("w2"))]];
        let acc = phrase_accuracy(&cands, &meta).unwrap();
        assert_eq!(acc.recall, 1.0);
        assert_eq!(acc.position_rate, 1.0);
        assert_eq!(acc.expected, 1);
    }

    #[test]
    fn misplaced_phrase_splits_the_metrics() {
        // phrase emitted but in the wrong slot: recall holds, position drops
        let cands = vec![sent("P Q w1 w2 .")];
        let meta = vec![vec![placement("P Q", Some("w1"), Some("w2"))]];
        let acc = phrase_accuracy(&cands, &meta).unwrap();
        assert_eq!(acc.recall, 1.0);
        assert_eq!(acc.position_rate, 0.0);
    }

    #[test]
    fn missing_phrase_scores_zero_recall() {
        let cands = vec![sent("w1 w2 w3 .")];
        let meta = vec![vec![placement("P Q", Some("w1"), Some("w2"))]];
        let acc = phrase_accuracy(&cands, &meta).unwrap();
        assert_eq!(acc.recall, 0.0);
        assert_eq!(acc.position_rate, 0.0);
    }

    #[test]
    fn boundary_neighbors_require_boundaries() {
        let meta = vec![vec![placement("P Q", None, Some("w1"))]];
        let at_start = vec![sent("P Q w1 w2")];
        assert_eq!(phrase_accuracy(&at_start, &meta).unwrap().position_rate, 1.0);
        let shifted = vec![sent("w0 P Q w1 w2")];
        assert_eq!(phrase_accuracy(&shifted, &meta).unwrap().position_rate, 0.0);
    }
}
