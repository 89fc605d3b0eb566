//! Deterministic synthetic parallel-corpus generator with injected phrase
//! pairs, for end-to-end evaluation without real bilingual data.
//!
//! Sentences are template-shaped: runs of "filler" words (translated by a
//! fixed bijection) interleaved with zero to three phrase placements drawn
//! from the emitted table. A configurable fraction of rules carry target
//! phrases whose tokens never become frequent enough to enter the target
//! vocabulary, so those phrases can only be produced through phrase mode.
//! Filler words are drawn round-robin, which keeps regular-token frequencies
//! far above the rare phrase-only tokens and makes the vocabulary split
//! deterministic.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phrase::{PhraseTable, Span};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Intended `build_vocab` cap; also sizes the filler pools.
    pub vocab_size: usize,
    pub n_templates: usize,
    pub n_rules: usize,
    /// Fraction of rules whose target phrase uses out-of-vocabulary tokens.
    pub oov_fraction: f64,
    /// Training pairs.
    pub n_pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            vocab_size: 120,
            n_templates: 12,
            n_rules: 40,
            oov_fraction: 0.25,
            n_pairs: 2000,
            dev_pairs: 200,
            test_pairs: 200,
            seed: 1,
        }
    }
}

/// Ground truth for one embedded phrase pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub rule_id: usize,
    pub source_span: Span,
    pub target_span: Span,
    pub target_tokens: Vec<String>,
    /// Reference token immediately left/right of the target phrase;
    /// `None` marks a sentence boundary.
    pub left: Option<String>,
    pub right: Option<String>,
    /// Whether the rule was generated as an OOV-target rule.
    pub oov_rule: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSentence {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub placements: Vec<Placement>,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub table: PhraseTable,
    pub train: Vec<SynthSentence>,
    pub dev: Vec<SynthSentence>,
    pub test: Vec<SynthSentence>,
}

/// Pops items in shuffled round-robin order: counts stay balanced to within
/// one draw, which pins the frequency ranking of the generated corpus.
struct Deck {
    items: Vec<usize>,
    queue: Vec<usize>,
}

impl Deck {
    fn new(items: Vec<usize>) -> Self {
        Deck { items, queue: Vec::new() }
    }

    fn pop(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.queue.is_empty() {
            self.queue = self.items.clone();
            self.queue.shuffle(rng);
        }
        self.queue.pop().expect("deck is never empty")
    }
}

const IN_VOCAB_TARGET_POOL: usize = 30;
const IN_VOCAB_SOURCE_POOL: usize = 30;

fn filler_source(i: usize) -> String {
    format!("sw{i:03}")
}

fn filler_target(i: usize) -> String {
    format!("tw{i:03}")
}

fn build_rules(cfg: &SynthConfig) -> Result<PhraseTable> {
    let n_oov = (cfg.oov_fraction * cfg.n_rules as f64).round() as usize;
    let mut table = PhraseTable::new();
    let mut sources: Vec<Vec<String>> = Vec::new();
    for k in 0..cfg.n_rules {
        // spread OOV rules evenly across ids
        let oov = (k * n_oov) / cfg.n_rules != ((k + 1) * n_oov) / cfg.n_rules;
        let src_len = 1 + k % 3;
        let tgt_len = 1 + (k / 3) % 3;
        let mut source: Vec<String> = if oov {
            (0..src_len).map(|j| format!("up{k}{}", (b'a' + j as u8) as char)).collect()
        } else {
            (0..src_len).map(|j| format!("sp{:02}", (k + j * 7) % IN_VOCAB_SOURCE_POOL)).collect()
        };
        // no source phrase may be a contiguous subsequence of another, or
        // nested matches would shadow placements
        let mut salt = 0usize;
        while sources.iter().any(|other| is_subseq(&source, other) || is_subseq(other, &source)) {
            salt += 1;
            source = (0..src_len)
                .map(|j| format!("sp{:02}", (k + j * 7 + salt) % IN_VOCAB_SOURCE_POOL))
                .collect();
            if salt > 4 * IN_VOCAB_SOURCE_POOL {
                source = (0..src_len).map(|j| format!("xp{k}{}", (b'a' + j as u8) as char)).collect();
                break;
            }
        }
        sources.push(source.clone());
        let target: Vec<String> = if oov {
            (0..tgt_len).map(|j| format!("oq{k}{}", (b'a' + j as u8) as char)).collect()
        } else {
            (0..tgt_len).map(|j| format!("pt{:02}", (k * 5 + j) % IN_VOCAB_TARGET_POOL)).collect()
        };
        if !table.insert(source, target)? {
            return Err(Error::Contract(format!("generated duplicate source phrase for rule {k}")));
        }
    }
    Ok(table)
}

fn is_subseq(needle: &[String], hay: &[String]) -> bool {
    needle.len() <= hay.len() && hay.windows(needle.len()).any(|w| w == needle)
}

/// Filler-chunk layout patterns. Each template is four chunk sizes; a
/// sentence with `n` phrases uses the first `n + 1` chunks and folds the
/// rest into the last one.
fn build_templates(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<[usize; 4]> {
    (0..cfg.n_templates.max(1))
        .map(|_| {
            let mut t = [0usize; 4];
            for slot in &mut t {
                *slot = rng.gen_range(1..=3);
            }
            t
        })
        .collect()
}

struct Generator {
    cfg: SynthConfig,
    table: PhraseTable,
    templates: Vec<[usize; 4]>,
    rule_deck: Deck,
    filler_deck: Deck,
    oov_flags: Vec<bool>,
    rng: ChaCha8Rng,
}

impl Generator {
    fn new(cfg: &SynthConfig) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.oov_fraction) {
            return Err(Error::Config(format!("oov_fraction {} outside [0, 1]", cfg.oov_fraction)));
        }
        if cfg.n_rules == 0 || cfg.n_pairs == 0 || cfg.vocab_size <= 4 {
            return Err(Error::Config("n_rules, n_pairs and vocab_size must all be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let table = build_rules(cfg)?;
        let oov_flags: Vec<bool> = table
            .rules()
            .iter()
            .map(|r| r.target.first().map(|t| t.starts_with("oq")).unwrap_or(false))
            .collect();
        let templates = build_templates(cfg, &mut rng);
        // in-vocabulary rules are placed twice as often as OOV rules
        let mut weighted = Vec::new();
        for (id, &oov) in oov_flags.iter().enumerate() {
            weighted.push(id);
            if !oov {
                weighted.push(id);
            }
        }
        let filler_deck = Deck::new((0..cfg.vocab_size).collect());
        Ok(Generator {
            cfg: cfg.clone(),
            table,
            templates,
            rule_deck: Deck::new(weighted),
            filler_deck,
            oov_flags,
            rng,
        })
    }

    fn draw_rules(&mut self, n: usize) -> Vec<usize> {
        let mut picked = Vec::with_capacity(n);
        let mut guard = 0usize;
        while picked.len() < n && guard < 64 {
            let id = self.rule_deck.pop(&mut self.rng);
            if !picked.contains(&id) {
                picked.push(id);
            }
            guard += 1;
        }
        picked
    }

    fn sentence(&mut self) -> SynthSentence {
        let max_ph = 3.min(self.cfg.n_rules);
        let roll: f64 = self.rng.gen();
        let n_ph = if roll < 0.15 {
            0
        } else if roll < 0.55 {
            1
        } else if roll < 0.85 {
            2
        } else {
            3
        }
        .min(max_ph);
        let template = self.templates[self.rng.gen_range(0..self.templates.len())];
        let rules = self.draw_rules(n_ph);
        let n_ph = rules.len();

        let mut source = Vec::new();
        let mut target = Vec::new();
        let mut placed: Vec<(usize, Span, Span)> = Vec::new();
        for chunk in 0..=n_ph {
            let mut size = template[chunk.min(3)];
            if chunk == n_ph {
                size += template[(chunk + 1).min(3)..4.min(template.len())].iter().sum::<usize>().min(2);
            }
            for _ in 0..size {
                let f = self.filler_deck.pop(&mut self.rng);
                source.push(filler_source(f));
                target.push(filler_target(f));
            }
            if chunk < n_ph {
                let rule = self.table.rule(rules[chunk]).clone();
                let s_span = Span::new(source.len(), source.len() + rule.source.len());
                source.extend(rule.source.iter().cloned());
                let t_span = Span::new(target.len(), target.len() + rule.target.len());
                target.extend(rule.target.iter().cloned());
                placed.push((rule.id, s_span, t_span));
            }
        }
        source.push(".".into());
        target.push(".".into());

        let placements = placed
            .into_iter()
            .map(|(rule_id, source_span, target_span)| Placement {
                rule_id,
                source_span,
                target_span,
                target_tokens: self.table.rule(rule_id).target.clone(),
                left: target_span.begin.checked_sub(1).map(|i| target[i].clone()),
                right: (target_span.end < target.len()).then(|| target[target_span.end].clone()),
                oov_rule: self.oov_flags[rule_id],
            })
            .collect();
        SynthSentence { source, target, placements }
    }

    fn split(&mut self, n: usize) -> Vec<SynthSentence> {
        (0..n).map(|_| self.sentence()).collect()
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthCorpus> {
    let mut generator = Generator::new(cfg)?;
    let train = generator.split(cfg.n_pairs);
    let dev = generator.split(cfg.dev_pairs);
    let test = generator.split(cfg.test_pairs);
    Ok(SynthCorpus { table: generator.table, train, dev, test })
}

#[derive(Debug, Serialize, Deserialize)]
struct MetaRecord {
    index: usize,
    placements: Vec<Placement>,
}

impl SynthCorpus {
    /// Write `{split}.src`, `{split}.tgt` and `{split}.meta.jsonl` for each
    /// split plus `table.tsv` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, sentences) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            let src: Vec<Vec<String>> = sentences.iter().map(|s| s.source.clone()).collect();
            let tgt: Vec<Vec<String>> = sentences.iter().map(|s| s.target.clone()).collect();
            crate::corpus::write_token_lines(&dir.join(format!("{name}.src")), &src)?;
            crate::corpus::write_token_lines(&dir.join(format!("{name}.tgt")), &tgt)?;
            let mut meta = String::new();
            for (index, s) in sentences.iter().enumerate() {
                let record = MetaRecord { index, placements: s.placements.clone() };
                meta.push_str(&serde_json::to_string(&record).map_err(|e| Error::Config(e.to_string()))?);
                meta.push('\n');
            }
            std::fs::write(dir.join(format!("{name}.meta.jsonl")), meta)?;
        }
        std::fs::write(dir.join("table.tsv"), self.table.to_file_string())?;
        Ok(())
    }
}

/// Read a `.meta.jsonl` file back into per-sentence placement lists.
pub fn read_metadata(path: &Path) -> Result<Vec<Vec<Placement>>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: MetaRecord =
            serde_json::from_str(line).map_err(|e| Error::Parse { line: idx + 1, message: e.to_string() })?;
        out.push(record.placements);
    }
    Ok(out)
}
