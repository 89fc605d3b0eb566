//! Greedy and beam decoding over the mixture model.

use crate::corpus::{make_candidates, Candidate, Vocabulary, EOS};
use crate::decoder::{
    advance, distribution_of, emit_phrase, init_state, step_vars, CandidateSet, DecodeChoice,
    StepDistribution,
};
use crate::encoder::{encode, TagState};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Variant};
use crate::phrase::{annotate, PhraseTable};
use crate::scalar::Scalar;

/// A source sentence prepared for decoding: encoded ids, tag rows and the
/// live phrase candidates (without gold spans).
#[derive(Debug, Clone)]
pub struct DecodeInput {
    pub source_ids: Vec<usize>,
    pub tag_matrix: Vec<Vec<u8>>,
    pub candidates: Vec<Candidate>,
}

/// Annotate a raw sentence against the table. The baseline variant ignores
/// the table: no candidates, all-zero tags.
pub fn prepare_input(
    config: &ModelConfig,
    source: &[String],
    table: &PhraseTable,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
) -> DecodeInput {
    if config.variant == Variant::Baseline {
        return DecodeInput {
            source_ids: source_vocab.encode(source),
            tag_matrix: vec![vec![0u8; config.n_slots]; source.len()],
            candidates: Vec::new(),
        };
    }
    let annotation = annotate(table, source, None, config.n_slots);
    let candidates = make_candidates(&annotation, table, target_vocab);
    DecodeInput {
        source_ids: source_vocab.encode(source),
        tag_matrix: annotation.tag_matrix,
        candidates,
    }
}

/// Per-decision diagnostics for the decode trace.
#[derive(Debug, Clone)]
pub struct StepTrace {
    /// Token position at which the decision was made.
    pub position: usize,
    pub choice: DecodeChoice,
    pub mode_prior: Option<f64>,
    /// Top word probabilities as (token id, probability), highest first.
    pub top_words: Vec<(usize, f64)>,
    pub phrase_probs: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    /// Emitted tokens, EOS excluded.
    pub tokens: Vec<String>,
    /// Σ log p of every decision (one term per phrase), EOS included.
    pub score: f64,
    /// Emitted token count, EOS included; phrases count their full length.
    pub emitted: usize,
    pub trace: Vec<StepTrace>,
    /// Attention weights for every decoder tick, idle-run ticks included.
    pub attention: Vec<Vec<f64>>,
}

impl DecodeResult {
    pub fn normalized_score(&self) -> f64 {
        self.score / self.emitted.max(1) as f64
    }
}

fn top_words(dist: &StepDistribution, k: usize) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = dist.word_probs.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}

/// Argmax decoding: at each decision point take the most probable word or
/// phrase; a phrase appends its whole target and advances by its length.
/// Stops at EOS or once `max_len` tokens have been emitted.
pub fn decode_greedy<F: Scalar>(
    model: &Model<F>,
    input: &DecodeInput,
    target_vocab: &Vocabulary,
    max_len: usize,
) -> Result<DecodeResult> {
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let mut p = model.pass();
    let enc = encode(&mut p, &input.source_ids)?;
    let mut tags = TagState::new(&input.tag_matrix);
    let mut cands = CandidateSet::new(input.candidates.clone());
    let (mut s, mut y_prev) = init_state(&mut p, &enc)?;

    let mut result = DecodeResult { tokens: Vec::new(), score: 0.0, emitted: 0, trace: Vec::new(), attention: Vec::new() };
    while result.emitted < max_len {
        let ctx = advance(&mut p, &enc, &mut tags, s, y_prev)?;
        result.attention.push(ctx.alpha.clone());
        let sv = step_vars(&mut p, &ctx, &mut cands)?;
        let dist = distribution_of(&p, &sv);
        let choice = dist.best();
        result.trace.push(StepTrace {
            position: result.emitted,
            choice,
            mode_prior: dist.mode_prior,
            top_words: top_words(&dist, 5),
            phrase_probs: dist.phrase_probs.clone(),
        });
        match choice {
            DecodeChoice::Word(id) => {
                result.score += dist.word_probs[id].ln();
                result.emitted += 1;
                if id == EOS {
                    break;
                }
                result.tokens.push(target_vocab.token(id).to_string());
                s = ctx.s;
                y_prev = id;
            }
            DecodeChoice::Phrase(ci) => {
                let prob = dist
                    .phrase_probs
                    .iter()
                    .find(|(i, _)| *i == ci)
                    .map(|(_, p)| *p)
                    .expect("chosen phrase is live");
                result.score += prob.ln();
                result.tokens.extend(cands.get(ci).target_tokens.iter().cloned());
                result.emitted += cands.get(ci).target_ids.len();
                let emitted = emit_phrase(&mut p, &enc, &mut tags, &mut cands, &ctx, ci)?;
                result.attention.extend(emitted.alphas.iter().cloned());
                s = emitted.s_end;
                y_prev = emitted.y_end;
            }
        }
    }
    Ok(result)
}

#[derive(Clone)]
struct Hypothesis<F: Scalar> {
    s: crate::autodiff::Var,
    y_prev: usize,
    tags: TagState<F>,
    cands: CandidateSet,
    tokens: Vec<String>,
    score: f64,
    emitted: usize,
    done: bool,
}

struct Expansion {
    from: usize,
    choice: DecodeChoice,
    /// Combined tie-break ordinal: word id, or |V| + live position.
    ordinal: usize,
    logp: f64,
    total: f64,
}

/// Beam search: hypotheses score by summed log step-probabilities (a phrase
/// contributes one term for all its tokens); pruning uses the raw sum and
/// the final ranking normalizes by emitted token count. beam = 1 reproduces
/// greedy decoding exactly.
pub fn decode_beam<F: Scalar>(
    model: &Model<F>,
    input: &DecodeInput,
    target_vocab: &Vocabulary,
    beam: usize,
    max_len: usize,
) -> Result<DecodeResult> {
    if beam == 0 {
        return Err(Error::Contract("beam width must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let mut p = model.pass();
    let enc = encode(&mut p, &input.source_ids)?;
    let (s0, y0) = init_state(&mut p, &enc)?;
    let root = Hypothesis {
        s: s0,
        y_prev: y0,
        tags: TagState::new(&input.tag_matrix),
        cands: CandidateSet::new(input.candidates.clone()),
        tokens: Vec::new(),
        score: 0.0,
        emitted: 0,
        done: false,
    };
    let mut live = vec![root];
    let mut finished: Vec<Hypothesis<F>> = Vec::new();

    while !live.is_empty() {
        let mut contexts = Vec::with_capacity(live.len());
        let mut expansions: Vec<Expansion> = Vec::new();
        for (hi, hyp) in live.iter_mut().enumerate() {
            let ctx = advance(&mut p, &enc, &mut hyp.tags, hyp.s, hyp.y_prev)?;
            let sv = step_vars(&mut p, &ctx, &mut hyp.cands)?;
            let dist = distribution_of(&p, &sv);
            let words = dist.word_probs.len();
            for (id, &prob) in dist.word_probs.iter().enumerate() {
                let logp = prob.ln();
                expansions.push(Expansion {
                    from: hi,
                    choice: DecodeChoice::Word(id),
                    ordinal: id,
                    logp,
                    total: hyp.score + logp,
                });
            }
            for (pos, &(ci, prob)) in dist.phrase_probs.iter().enumerate() {
                let logp = prob.ln();
                expansions.push(Expansion {
                    from: hi,
                    choice: DecodeChoice::Phrase(ci),
                    ordinal: words + pos,
                    logp,
                    total: hyp.score + logp,
                });
            }
            contexts.push(ctx);
        }
        expansions.sort_by(|a, b| {
            b.total
                .partial_cmp(&a.total)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.from.cmp(&b.from))
                .then(a.ordinal.cmp(&b.ordinal))
        });
        expansions.truncate(beam);

        let mut next = Vec::with_capacity(expansions.len());
        for exp in expansions {
            let parent = &live[exp.from];
            let ctx = &contexts[exp.from];
            let mut hyp = parent.clone();
            hyp.score += exp.logp;
            match exp.choice {
                DecodeChoice::Word(id) => {
                    hyp.emitted += 1;
                    if id == EOS {
                        hyp.done = true;
                    } else {
                        hyp.tokens.push(target_vocab.token(id).to_string());
                        hyp.s = ctx.s;
                        hyp.y_prev = id;
                    }
                }
                DecodeChoice::Phrase(ci) => {
                    hyp.tokens.extend(hyp.cands.get(ci).target_tokens.iter().cloned());
                    hyp.emitted += hyp.cands.get(ci).target_ids.len();
                    let emitted = emit_phrase(&mut p, &enc, &mut hyp.tags, &mut hyp.cands, ctx, ci)?;
                    hyp.s = emitted.s_end;
                    hyp.y_prev = emitted.y_end;
                }
            }
            if hyp.emitted >= max_len {
                hyp.done = true;
            }
            if hyp.done {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;
    }

    let best = finished
        .into_iter()
        .max_by(|a, b| {
            let na = a.score / a.emitted.max(1) as f64;
            let nb = b.score / b.emitted.max(1) as f64;
            na.partial_cmp(&nb).unwrap_or(std::cmp::Ordering::Equal)
        })
        .ok_or_else(|| Error::Contract("beam search produced no hypotheses".into()))?;
    Ok(DecodeResult {
        tokens: best.tokens,
        score: best.score,
        emitted: best.emitted,
        trace: Vec::new(),
        attention: Vec::new(),
    })
}
