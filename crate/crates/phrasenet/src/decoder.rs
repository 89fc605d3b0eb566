//! The decoding state machine: state updates, the word head, the two
//! phrase-generation heads (gated mixture and joint softmax), idle-run
//! emission of multi-word phrases, and the mixture likelihood.

use std::collections::HashMap;

use crate::attention::attend;
use crate::autodiff::Var;
use crate::corpus::{Candidate, ParallelExample, BOS};
use crate::encoder::{encode, EncodedSource, TagState};
use crate::error::{Error, Result};
use crate::gru::gru_cell;
use crate::model::{Pass, Variant};
use crate::scalar::Scalar;

/// Decode-time candidate bookkeeping: consumed occurrences leave the live
/// set and never reappear in phrase distributions.
#[derive(Clone)]
pub struct CandidateSet {
    cands: Vec<Candidate>,
    consumed: Vec<bool>,
    embed_cache: Vec<Option<Var>>,
}

impl CandidateSet {
    pub fn new(cands: Vec<Candidate>) -> Self {
        let n = cands.len();
        CandidateSet { cands, consumed: vec![false; n], embed_cache: vec![None; n] }
    }

    pub fn empty() -> Self {
        CandidateSet::new(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.cands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cands.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Candidate {
        &self.cands[idx]
    }

    pub fn is_live(&self, idx: usize) -> bool {
        !self.consumed[idx]
    }

    /// Indices of unconsumed candidates, in slot order.
    pub fn live(&self) -> Vec<usize> {
        (0..self.cands.len()).filter(|&i| !self.consumed[i]).collect()
    }

    pub fn consume(&mut self, idx: usize) -> Result<()> {
        if self.consumed[idx] {
            return Err(Error::Contract(format!("candidate {idx} already consumed")));
        }
        self.consumed[idx] = true;
        Ok(())
    }

    /// Backward-GRU embedding of a candidate's target phrase, cached for the
    /// lifetime of one pass.
    fn embedding<F: Scalar>(&mut self, p: &mut Pass<F>, idx: usize) -> Result<Var> {
        if let Some(v) = self.embed_cache[idx] {
            return Ok(v);
        }
        let v = embed_phrase(p, &self.cands[idx].target_ids)?;
        self.embed_cache[idx] = Some(v);
        Ok(v)
    }
}

/// Everything the heads consume at one step: S_t = (s_t, c_t, e_{y_{t−1}}).
pub struct StepContext {
    pub s: Var,
    pub c: Var,
    pub e_prev: Var,
    pub alpha: Vec<f64>,
}

/// s_0 = tanh(W_init · ←h_1), first input token is BOS.
pub fn init_state<F: Scalar>(p: &mut Pass<F>, enc: &EncodedSource) -> Result<(Var, usize)> {
    let w = p.p(p.wiring().init_w);
    let lin = p.g.matmul(w, enc.h_bwd_first)?;
    Ok((p.g.tanh(lin), BOS))
}

/// GRU state update with input [c_t, e_prev].
pub fn step_state<F: Scalar>(p: &mut Pass<F>, s_prev: Var, c: Var, e_prev: Var) -> Result<Var> {
    let ids = p.wiring().dec_gru;
    let x = p.g.concat_rows(&[c, e_prev])?;
    gru_cell(p, &ids, x, s_prev)
}

/// One decoder tick: attend with (s_{t−1}, e_{y_{t−1}}), then update the
/// state. Returns the full step context for the heads.
pub fn advance<F: Scalar>(
    p: &mut Pass<F>,
    enc: &EncodedSource,
    tags: &mut TagState<F>,
    s_prev: Var,
    y_prev: usize,
) -> Result<StepContext> {
    let embed = p.p(p.wiring().dec_embed);
    let e_prev = p.g.row(embed, y_prev)?;
    let tagged = tags.tagged(&mut p.g, enc)?;
    let mask = vec![true; tagged.len()];
    let (c, alpha) = attend(p, s_prev, &tagged, e_prev, &mask)?;
    let s = step_state(p, s_prev, c, e_prev)?;
    Ok(StepContext { s, c, e_prev, alpha })
}

/// Unnormalized word scores W · tanh(U s + C c + V e_prev).
pub fn word_scores<F: Scalar>(p: &mut Pass<F>, ctx: &StepContext) -> Result<Var> {
    let head = p.wiring().word;
    let (u, c_w, v, w) = (p.p(head.u), p.p(head.c), p.p(head.v), p.p(head.w));
    let us = p.g.matmul(u, ctx.s)?;
    let cc = p.g.matmul(c_w, ctx.c)?;
    let ve = p.g.matmul(v, ctx.e_prev)?;
    let sum = p.g.add(us, cc)?;
    let sum = p.g.add(sum, ve)?;
    let hidden = p.g.tanh(sum);
    p.g.matmul(w, hidden)
}

/// Mode gate f_z(S_t): two tanh hidden layers, sigmoid output.
fn gate_value<F: Scalar>(p: &mut Pass<F>, ctx: &StepContext) -> Result<Var> {
    let ids = p.wiring().gate.ok_or_else(|| Error::Contract("gate head absent in this variant".into()))?;
    let input = p.g.concat_rows(&[ctx.s, ctx.c, ctx.e_prev])?;
    let (w1, b1) = (p.p(ids.w1), p.p(ids.b1));
    let (w2, b2) = (p.p(ids.w2), p.p(ids.b2));
    let (w3, b3) = (p.p(ids.w3), p.p(ids.b3));
    let l1 = p.g.matmul(w1, input)?;
    let l1 = p.g.add(l1, b1)?;
    let h1 = p.g.tanh(l1);
    let l2 = p.g.matmul(w2, h1)?;
    let l2 = p.g.add(l2, b2)?;
    let h2 = p.g.tanh(l2);
    let out = p.g.matmul(w3, h2)?;
    let out = p.g.add(out, b3)?;
    Ok(p.g.sigmoid(out))
}

/// Backward-GRU final state over a target phrase read right to left from a
/// zero initial state; keeps the most information about the first word.
pub fn embed_phrase<F: Scalar>(p: &mut Pass<F>, target_ids: &[usize]) -> Result<Var> {
    if target_ids.is_empty() {
        return Err(Error::Contract("cannot embed an empty phrase".into()));
    }
    let ids = p
        .wiring()
        .phrase_rnn
        .ok_or_else(|| Error::Contract("phrase embedder absent in this variant".into()))?;
    let embed = p.p(p.wiring().dec_embed);
    let mut state = p.g.zeros(&[p.config().d_hidden]);
    for &tok in target_ids.iter().rev() {
        let x = p.g.row(embed, tok)?;
        state = gru_cell(p, &ids, x, state)?;
    }
    Ok(state)
}

/// Per-step generation pieces, by variant and live-candidate situation.
pub enum StepVars {
    /// Plain word softmax: the baseline variant, a pinned model, or an
    /// empty live candidate set (the gate is forced to 0).
    WordOnly { word_sm: Var },
    /// Gated mixture: independent word and phrase softmaxes under f_z.
    Gate { word_sm: Var, gate: Var, live: Vec<usize>, phrase_sm: Var },
    /// One softmax over [ψ_w ; ψ_p].
    Joint { joint: Var, live: Vec<usize> },
}

impl StepVars {
    pub fn live(&self) -> &[usize] {
        match self {
            StepVars::WordOnly { .. } => &[],
            StepVars::Gate { live, .. } => live,
            StepVars::Joint { live, .. } => live,
        }
    }
}

/// Evaluate the generation heads at one step.
pub fn step_vars<F: Scalar>(
    p: &mut Pass<F>,
    ctx: &StepContext,
    cands: &mut CandidateSet,
) -> Result<StepVars> {
    let variant = p.config().variant;
    let live = cands.live();
    let word_only =
        p.model.pin_word_only || variant == Variant::Baseline || live.is_empty();
    if word_only {
        let scores = word_scores(p, ctx)?;
        let word_sm = p.g.softmax(scores)?;
        return Ok(StepVars::WordOnly { word_sm });
    }
    match variant {
        Variant::Gate => {
            let scores = word_scores(p, ctx)?;
            let word_sm = p.g.softmax(scores)?;
            let gate = gate_value(p, ctx)?;
            let head = p.wiring().gate_phrase.expect("gate variant has a phrase head");
            let (u, c_w, v, w) = (p.p(head.u), p.p(head.c), p.p(head.v), p.p(head.w));
            let us = p.g.matmul(u, ctx.s)?;
            let cc = p.g.matmul(c_w, ctx.c)?;
            let ve = p.g.matmul(v, ctx.e_prev)?;
            let sum = p.g.add(us, cc)?;
            let sum = p.g.add(sum, ve)?;
            let hidden = p.g.tanh(sum);
            let all_slots = p.g.matmul(w, hidden)?;
            let picked: Vec<Var> = live
                .iter()
                .map(|&i| p.g.pick(all_slots, cands.get(i).slot))
                .collect::<Result<_>>()?;
            let live_scores = p.g.concat_rows(&picked)?;
            let phrase_sm = p.g.softmax(live_scores)?;
            Ok(StepVars::Gate { word_sm, gate, live, phrase_sm })
        }
        Variant::Softmax => {
            let word = word_scores(p, ctx)?;
            let head = p.wiring().soft_phrase.expect("softmax variant has a phrase head");
            let (u, c_w, v, r, w) = (p.p(head.u), p.p(head.c), p.p(head.v), p.p(head.r), p.p(head.w));
            let us = p.g.matmul(u, ctx.s)?;
            let cc = p.g.matmul(c_w, ctx.c)?;
            let ve = p.g.matmul(v, ctx.e_prev)?;
            let base = p.g.add(us, cc)?;
            let base = p.g.add(base, ve)?;
            let mut pieces = vec![word];
            for &i in &live {
                let e_p = cands.embedding(p, i)?;
                let re = p.g.matmul(r, e_p)?;
                let lin = p.g.add(base, re)?;
                let hidden = p.g.tanh(lin);
                pieces.push(p.g.matmul(w, hidden)?);
            }
            let all_scores = p.g.concat_rows(&pieces)?;
            let joint = p.g.softmax(all_scores)?;
            Ok(StepVars::Joint { joint, live })
        }
        Variant::Baseline => unreachable!("handled by the word_only branch"),
    }
}

/// p(z=0, y) at this step: the word's probability including the mode factor
/// where the variant has one. `apply_gate` drops the (1−g) factor for
/// not-in-phrase words when the configuration says they are generated
/// exactly as in the word-only model.
pub fn word_mixture_prob<F: Scalar>(
    p: &mut Pass<F>,
    sv: &StepVars,
    y: usize,
    apply_gate: bool,
) -> Result<Var> {
    match sv {
        StepVars::WordOnly { word_sm } => p.g.pick(*word_sm, y),
        StepVars::Gate { word_sm, gate, .. } => {
            let picked = p.g.pick(*word_sm, y)?;
            if apply_gate {
                let one = p.g.scalar(F::one());
                let keep = p.g.sub(one, *gate)?;
                p.g.mul(keep, picked)
            } else {
                Ok(picked)
            }
        }
        StepVars::Joint { joint, .. } => p.g.pick(*joint, y),
    }
}

/// p(z=1, p_j) at this step for a live candidate.
pub fn phrase_mixture_prob<F: Scalar>(p: &mut Pass<F>, sv: &StepVars, cand_idx: usize) -> Result<Var> {
    match sv {
        StepVars::WordOnly { .. } => {
            Err(Error::Contract("no phrase probabilities in a word-only step".into()))
        }
        StepVars::Gate { gate, live, phrase_sm, .. } => {
            let pos = live
                .iter()
                .position(|&i| i == cand_idx)
                .ok_or_else(|| Error::Contract(format!("candidate {cand_idx} is not live")))?;
            let picked = p.g.pick(*phrase_sm, pos)?;
            p.g.mul(*gate, picked)
        }
        StepVars::Joint { joint, live } => {
            let pos = live
                .iter()
                .position(|&i| i == cand_idx)
                .ok_or_else(|| Error::Contract(format!("candidate {cand_idx} is not live")))?;
            let words = p.g.value(*joint).len() - live.len();
            p.g.pick(*joint, words + pos)
        }
    }
}

/// One decoding step's normalized probabilities over words and live phrase
/// candidates, as plain numbers.
#[derive(Debug, Clone)]
pub struct StepDistribution {
    pub word_probs: Vec<f64>,
    /// (candidate index, probability), in slot order.
    pub phrase_probs: Vec<(usize, f64)>,
    /// p(z=1): gate variant only.
    pub mode_prior: Option<f64>,
}

impl StepDistribution {
    pub fn total(&self) -> f64 {
        self.word_probs.iter().sum::<f64>() + self.phrase_probs.iter().map(|(_, p)| p).sum::<f64>()
    }

    /// Argmax over the combined [words ; phrases] vector; ties go to the
    /// lowest index, words before phrases.
    pub fn best(&self) -> DecodeChoice {
        let mut best = (0usize, self.word_probs[0]);
        for (i, &p) in self.word_probs.iter().enumerate().skip(1) {
            if p > best.1 {
                best = (i, p);
            }
        }
        let mut choice = DecodeChoice::Word(best.0);
        let mut best_p = best.1;
        for &(idx, p) in &self.phrase_probs {
            if p > best_p {
                best_p = p;
                choice = DecodeChoice::Phrase(idx);
            }
        }
        choice
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeChoice {
    Word(usize),
    Phrase(usize),
}

pub fn step_distribution<F: Scalar>(
    p: &mut Pass<F>,
    ctx: &StepContext,
    cands: &mut CandidateSet,
) -> Result<StepDistribution> {
    let sv = step_vars(p, ctx, cands)?;
    Ok(distribution_of(p, &sv))
}

pub fn distribution_of<F: Scalar>(p: &Pass<F>, sv: &StepVars) -> StepDistribution {
    match sv {
        StepVars::WordOnly { word_sm } => StepDistribution {
            word_probs: p.g.value(*word_sm).iter().map(|x| x.to_double()).collect(),
            phrase_probs: Vec::new(),
            mode_prior: None,
        },
        StepVars::Gate { word_sm, gate, live, phrase_sm } => {
            let g = p.g.value_scalar(*gate).to_double();
            StepDistribution {
                word_probs: p.g.value(*word_sm).iter().map(|x| (1.0 - g) * x.to_double()).collect(),
                phrase_probs: live
                    .iter()
                    .zip(p.g.value(*phrase_sm))
                    .map(|(&i, &x)| (i, g * x.to_double()))
                    .collect(),
                mode_prior: Some(g),
            }
        }
        StepVars::Joint { joint, live } => {
            let values = p.g.value(*joint);
            let words = values.len() - live.len();
            StepDistribution {
                word_probs: values[..words].iter().map(|x| x.to_double()).collect(),
                phrase_probs: live
                    .iter()
                    .zip(&values[words..])
                    .map(|(&i, &x)| (i, x.to_double()))
                    .collect(),
                mode_prior: None,
            }
        }
    }
}

/// Idle-run emission of one multi-word phrase after the decision step: the
/// state advances exactly as in word mode with each phrase token forced, no
/// sampling happens, and the occurrence's tags are zeroed only after the
/// final token.
pub struct EmittedPhrase {
    /// Decoder state at each emitted token, the decision step's first.
    pub states: Vec<Var>,
    /// Attention weights of the idle-run ticks (the decision step's own
    /// weights belong to its caller).
    pub alphas: Vec<Vec<f64>>,
    pub s_end: Var,
    pub y_end: usize,
}

pub fn emit_phrase<F: Scalar>(
    p: &mut Pass<F>,
    enc: &EncodedSource,
    tags: &mut TagState<F>,
    cands: &mut CandidateSet,
    first_step: &StepContext,
    cand_idx: usize,
) -> Result<EmittedPhrase> {
    if !cands.is_live(cand_idx) {
        return Err(Error::Contract(format!("candidate {cand_idx} already consumed")));
    }
    let token_ids = cands.get(cand_idx).target_ids.clone();
    let mut states = vec![first_step.s];
    let mut alphas = Vec::new();
    let mut s = first_step.s;
    let mut y_prev = token_ids[0];
    for &tok in &token_ids[1..] {
        let ctx = advance(p, enc, tags, s, y_prev)?;
        states.push(ctx.s);
        alphas.push(ctx.alpha);
        s = ctx.s;
        y_prev = tok;
    }
    cands.consume(cand_idx)?;
    tags.zero_span(cands.get(cand_idx).source_span);
    Ok(EmittedPhrase { states, alphas, s_end: s, y_end: y_prev })
}

/// Log-probability of one gold phrase segment under the two-path mixture:
/// I_unk · Π_i p(z_i=0, y_i | S_i) + p(z_t=1, p | S_t), with the state
/// advanced through the segment by idle-run mechanics and the tags zeroed
/// after the final token.
pub fn phrase_segment_logprob<F: Scalar>(
    p: &mut Pass<F>,
    enc: &EncodedSource,
    tags: &mut TagState<F>,
    cands: &mut CandidateSet,
    first_step: &StepContext,
    cand_idx: usize,
    token_ids: &[usize],
) -> Result<(Var, Var, usize, f64)> {
    let sv = step_vars(p, first_step, cands)?;
    let phrase_path = phrase_mixture_prob(p, &sv, cand_idx)?;
    let phrase_mass = decision_phrase_mass(p, &sv);
    let in_vocab = cands.get(cand_idx).in_vocab;

    let mut word_factors = Vec::new();
    if in_vocab {
        word_factors.push(word_mixture_prob(p, &sv, token_ids[0], true)?);
    }
    let mut s = first_step.s;
    let mut y_prev = token_ids[0];
    for &tok in &token_ids[1..] {
        let ctx = advance(p, enc, tags, s, y_prev)?;
        if in_vocab {
            let svi = step_vars(p, &ctx, cands)?;
            word_factors.push(word_mixture_prob(p, &svi, tok, true)?);
        }
        s = ctx.s;
        y_prev = tok;
    }
    let total = if in_vocab {
        let mut word_path = word_factors[0];
        for f in &word_factors[1..] {
            word_path = p.g.mul(word_path, *f)?;
        }
        p.g.add(word_path, phrase_path)?
    } else {
        phrase_path
    };
    let term = p.g.ln(total);
    cands.consume(cand_idx)?;
    tags.zero_span(cands.get(cand_idx).source_span);
    Ok((term, s, y_prev, phrase_mass))
}

/// Probability mass the step assigns to phrase mode (the gate value, or the
/// summed phrase entries of the joint softmax).
fn decision_phrase_mass<F: Scalar>(p: &Pass<F>, sv: &StepVars) -> f64 {
    match sv {
        StepVars::WordOnly { .. } => 0.0,
        StepVars::Gate { gate, .. } => p.g.value_scalar(*gate).to_double(),
        StepVars::Joint { joint, live } => {
            let values = p.g.value(*joint);
            let words = values.len() - live.len();
            values[words..].iter().map(|x| x.to_double()).sum()
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct NllStats {
    /// Not-in-phrase target tokens scored (EOS included).
    pub wy_tokens: usize,
    /// Σ log p over those tokens, for token-level perplexity.
    pub wy_log_sum: f64,
    /// Decision points (word steps plus segment starts).
    pub decisions: usize,
    /// Σ phrase-mode mass over decision points.
    pub phrase_mass_sum: f64,
    pub segments: usize,
}

pub struct SequenceNll {
    pub loss: Var,
    pub stats: NllStats,
}

/// Teacher-forced negative log-likelihood of one example under the mixture
/// model: not-in-phrase positions contribute word terms, gold segments
/// contribute [`phrase_segment_logprob`], and EOS is an ordinary word.
pub fn sequence_nll<F: Scalar>(p: &mut Pass<F>, ex: &ParallelExample) -> Result<SequenceNll> {
    if ex.annotation.n_slots != p.config().n_slots {
        return Err(Error::Shape(format!(
            "annotation has {} slots, model expects {}",
            ex.annotation.n_slots,
            p.config().n_slots
        )));
    }
    let vocab = p.config().target_vocab;
    if let Some(&bad) = ex.target_ids.iter().find(|&&y| y >= vocab) {
        return Err(Error::Contract(format!("target token id {bad} out of vocabulary range {vocab}")));
    }
    let use_phrases = !p.model.pin_word_only && p.config().variant != Variant::Baseline;

    let enc = encode(p, &ex.source_ids)?;
    let mut tags = TagState::new(&ex.annotation.tag_matrix);
    let mut cands = if use_phrases { CandidateSet::new(ex.candidates.clone()) } else { CandidateSet::empty() };
    let segment_starts: HashMap<usize, usize> = if use_phrases {
        ex.candidates
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.gold_target_span.map(|span| (span.begin, i)))
            .collect()
    } else {
        HashMap::new()
    };

    let (mut s, mut y_prev) = init_state(p, &enc)?;
    let mut stats = NllStats::default();
    let mut total: Option<Var> = None;
    let mut t = 0usize;
    while t < ex.target_ids.len() {
        let ctx = advance(p, &enc, &mut tags, s, y_prev)?;
        let term = if let Some(&ci) = segment_starts.get(&t) {
            let span = cands.get(ci).gold_target_span.expect("segment has a gold span");
            let tokens = &ex.target_ids[span.begin..span.end];
            let (term, s_end, y_end, phrase_mass) =
                phrase_segment_logprob(p, &enc, &mut tags, &mut cands, &ctx, ci, tokens)?;
            stats.decisions += 1;
            stats.segments += 1;
            stats.phrase_mass_sum += phrase_mass;
            s = s_end;
            y_prev = y_end;
            t = span.end;
            term
        } else {
            let y = ex.target_ids[t];
            let sv = step_vars(p, &ctx, &mut cands)?;
            let prob = word_mixture_prob(p, &sv, y, p.config().gate_factor_on_words)?;
            let term = p.g.ln(prob);
            stats.decisions += 1;
            stats.wy_tokens += 1;
            stats.wy_log_sum += p.g.value_scalar(term).to_double();
            stats.phrase_mass_sum += decision_phrase_mass(p, &sv);
            s = ctx.s;
            y_prev = y;
            t += 1;
            term
        };
        total = Some(match total {
            None => term,
            Some(acc) => p.g.add(acc, term)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("empty target sentence".into()))?;
    let loss = p.g.neg(total);
    Ok(SequenceNll { loss, stats })
}
