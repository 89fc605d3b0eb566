//! The symbolic phrase memory: a table of source→target phrase pairs, plus
//! the per-sentence matching pipeline that locates source phrases, resolves
//! overlaps, caps the selection at `n_p` occurrences by maximum coverage and
//! assigns tag slots.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Half-open token interval `[begin, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub begin: usize,
    pub end: usize,
}

impl Span {
    pub fn new(begin: usize, end: usize) -> Self {
        Span { begin, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.begin
    }

    pub fn is_empty(&self) -> bool {
        self.begin == self.end
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.begin < other.end && other.begin < self.end
    }

    pub fn contains(&self, pos: usize) -> bool {
        pos >= self.begin && pos < self.end
    }
}

/// One source→target phrase pair. Source phrases are unique within a table:
/// each has exactly one translation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub id: usize,
    pub source: Vec<String>,
    pub target: Vec<String>,
}

/// The phrase table, with a first-token index for matching.
#[derive(Debug, Clone, Default)]
pub struct PhraseTable {
    rules: Vec<Rule>,
    by_first_token: HashMap<String, Vec<usize>>,
}

impl PhraseTable {
    pub fn new() -> Self {
        PhraseTable::default()
    }

    /// Insert a rule unless its source phrase is already present; returns
    /// whether the rule was kept.
    pub fn insert(&mut self, source: Vec<String>, target: Vec<String>) -> Result<bool> {
        if source.is_empty() || target.is_empty() {
            return Err(Error::Contract("rule with an empty side".into()));
        }
        if self.find_source(&source).is_some() {
            return Ok(false);
        }
        let id = self.rules.len();
        self.by_first_token.entry(source[0].clone()).or_default().push(id);
        self.rules.push(Rule { id, source, target });
        Ok(true)
    }

    fn find_source(&self, source: &[String]) -> Option<usize> {
        self.by_first_token
            .get(&source[0])?
            .iter()
            .copied()
            .find(|&id| self.rules[id].source == source)
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn rule(&self, id: usize) -> &Rule {
        &self.rules[id]
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Write the table back in its file format.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for r in &self.rules {
            let _ = writeln!(out, "{}\t{}", r.source.join(" "), r.target.join(" "));
        }
        out
    }
}

/// Parse a phrase table: UTF-8, one rule per line, source TAB target with
/// space-separated tokens, `#` starts a comment line. A duplicate source
/// phrase keeps the first rule and logs a warning.
pub fn parse_table<R: BufRead>(reader: R) -> Result<PhraseTable> {
    let mut table = PhraseTable::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::Parse { line: lineno, message: e.to_string() })?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (src, tgt) = trimmed.split_once('\t').ok_or_else(|| Error::Parse {
            line: lineno,
            message: "missing TAB separator between source and target".into(),
        })?;
        let source: Vec<String> = src.split_whitespace().map(str::to_string).collect();
        let target: Vec<String> = tgt.split_whitespace().map(str::to_string).collect();
        if source.is_empty() || target.is_empty() {
            return Err(Error::Parse { line: lineno, message: "empty source or target phrase".into() });
        }
        if !table.insert(source, target)? {
            log::warn!("line {lineno}: duplicate source phrase, keeping the first translation");
        }
    }
    Ok(table)
}

pub fn load_table(path: &Path) -> Result<PhraseTable> {
    let file = std::fs::File::open(path)?;
    parse_table(std::io::BufReader::new(file))
}

/// One located source phrase in a sentence, with its tag slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhraseOccurrence {
    pub rule_id: usize,
    pub source_span: Span,
    pub slot: usize,
    pub consumed: bool,
}

/// A candidate occurrence whose target phrase was located in the reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldOccurrence {
    /// Index into [`SentenceAnnotation::occurrences`].
    pub occurrence: usize,
    pub target_span: Span,
}

/// Per-sentence match results: the selected occurrences (decode-time
/// candidates), the training-time gold subset with target spans, the tag
/// matrix, and the not-in-phrase position groups on both sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceAnnotation {
    pub occurrences: Vec<PhraseOccurrence>,
    pub gold_occurrences: Vec<GoldOccurrence>,
    /// Row per source position, `n_p` wide, all-zero or one-hot.
    pub tag_matrix: Vec<Vec<u8>>,
    pub word_positions_source: Vec<usize>,
    pub word_positions_target: Vec<usize>,
    pub n_slots: usize,
}

/// Every occurrence of every rule's source phrase as a contiguous token
/// subsequence, ordered by (begin, longer first).
pub fn match_all(table: &PhraseTable, sentence: &[String]) -> Vec<(usize, Span)> {
    let mut found = Vec::new();
    for begin in 0..sentence.len() {
        if let Some(ids) = table.by_first_token.get(&sentence[begin]) {
            for &id in ids {
                let src = &table.rules[id].source;
                let end = begin + src.len();
                if end <= sentence.len() && sentence[begin..end] == src[..] {
                    found.push((id, Span::new(begin, end)));
                }
            }
        }
    }
    found.sort_by(|a, b| a.1.begin.cmp(&b.1.begin).then(b.1.len().cmp(&a.1.len())).then(a.0.cmp(&b.0)));
    found
}

/// Remove overlapping matches: whenever two spans overlap, drop the one with
/// fewer tokens; equal lengths keep the leftmost. Repeats until overlap-free.
pub fn resolve_overlaps(mut matches: Vec<(usize, Span)>) -> Vec<(usize, Span)> {
    loop {
        let mut removed = None;
        'scan: for i in 0..matches.len() {
            for j in (i + 1)..matches.len() {
                if matches[i].1.overlaps(&matches[j].1) {
                    // matches are in (begin, longer-first) order, so when the
                    // lengths tie, j is the rightmost of the pair
                    removed = if matches[i].1.len() < matches[j].1.len() {
                        Some(i)
                    } else {
                        Some(j)
                    };
                    break 'scan;
                }
            }
        }
        match removed {
            Some(idx) => {
                matches.remove(idx);
            }
            None => return matches,
        }
    }
}

/// Keep at most `n_p` non-overlapping matches, maximizing the number of
/// covered source tokens; ties prefer the lexicographically earliest begin
/// positions. Slots are assigned 0,1,2,… in source order.
pub fn select_candidates(matches: &[(usize, Span)], n_p: usize) -> Vec<PhraseOccurrence> {
    let mut chosen: Vec<(usize, Span)> = if matches.len() <= n_p {
        matches.to_vec()
    } else {
        best_coverage_subset(matches, n_p)
    };
    chosen.sort_by_key(|(_, s)| (s.begin, s.end));
    chosen
        .into_iter()
        .enumerate()
        .map(|(slot, (rule_id, source_span))| PhraseOccurrence {
            rule_id,
            source_span,
            slot,
            consumed: false,
        })
        .collect()
}

fn best_coverage_subset(matches: &[(usize, Span)], k: usize) -> Vec<(usize, Span)> {
    // Matches arrive sorted by begin, so comparing chosen index lists
    // lexicographically is the "earliest begin positions" tie-break.
    let mut best: Option<(usize, Vec<usize>)> = None;
    let mut indices: Vec<usize> = (0..k).collect();
    loop {
        let coverage: usize = indices.iter().map(|&i| matches[i].1.len()).sum();
        let better = match &best {
            None => true,
            Some((c, ix)) => coverage > *c || (coverage == *c && indices < *ix),
        };
        if better {
            best = Some((coverage, indices.clone()));
        }
        // next k-combination of 0..matches.len()
        let n = matches.len();
        let mut i = k;
        loop {
            if i == 0 {
                let (_, ix) = best.unwrap();
                return ix.into_iter().map(|i| matches[i]).collect();
            }
            i -= 1;
            if indices[i] != i + n - k {
                indices[i] += 1;
                for j in (i + 1)..k {
                    indices[j] = indices[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Locate each candidate's target phrase in the reference (leftmost unused
/// occurrence); candidates whose gold target spans would overlap drop the
/// later-slot one.
fn locate_gold(
    table: &PhraseTable,
    occurrences: &[PhraseOccurrence],
    reference: &[String],
) -> Vec<GoldOccurrence> {
    let mut used: Vec<Span> = Vec::new();
    let mut gold = Vec::new();
    for (idx, occ) in occurrences.iter().enumerate() {
        let target = &table.rules[occ.rule_id].target;
        let mut begin = 0usize;
        while begin + target.len() <= reference.len() {
            let span = Span::new(begin, begin + target.len());
            if reference[span.begin..span.end] == target[..] && !used.iter().any(|u| u.overlaps(&span)) {
                used.push(span);
                gold.push(GoldOccurrence { occurrence: idx, target_span: span });
                break;
            }
            begin += 1;
        }
    }
    gold
}

/// Run the whole preprocessing pipeline for one sentence: match, resolve
/// overlaps, select candidates, build the tag matrix, and (when a reference
/// is given) find the gold subset and the not-in-phrase target positions.
pub fn annotate(
    table: &PhraseTable,
    source: &[String],
    reference: Option<&[String]>,
    n_p: usize,
) -> SentenceAnnotation {
    let matches = match_all(table, source);
    let matches = resolve_overlaps(matches);
    let occurrences = select_candidates(&matches, n_p);

    let mut tag_matrix = vec![vec![0u8; n_p]; source.len()];
    for occ in &occurrences {
        for pos in occ.source_span.begin..occ.source_span.end {
            tag_matrix[pos][occ.slot] = 1;
        }
    }
    let word_positions_source = (0..source.len())
        .filter(|&i| !occurrences.iter().any(|o| o.source_span.contains(i)))
        .collect();

    let (gold_occurrences, word_positions_target) = match reference {
        Some(reference) => {
            let gold = locate_gold(table, &occurrences, reference);
            let words = (0..reference.len())
                .filter(|&i| !gold.iter().any(|g| g.target_span.contains(i)))
                .collect();
            (gold, words)
        }
        None => (Vec::new(), Vec::new()),
    };

    SentenceAnnotation {
        occurrences,
        gold_occurrences,
        tag_matrix,
        word_positions_source,
        word_positions_target,
        n_slots: n_p,
    }
}
