//! Shared acceptance-test support: fixtures and a straight-line f64 oracle
//! that re-implements the full forward pass and the mixture likelihood by
//! exhaustive mode-assignment enumeration, independently of the graph code.

use phrasenet::corpus::{build_vocab, make_example, ParallelExample, Vocabulary, BOS};
use phrasenet::model::{Model, ModelConfig, ParamStore, Variant};
use phrasenet::phrase::PhraseTable;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// The gradient-check fixture: |V| = 20 on both sides (16 tokens plus the
/// four reserved ids), a table with one in-vocabulary rule, one OOV-target
/// rule and two decoy rules so every phrase softmax sees competition, and
/// two examples carrying one in-vocab and one OOV gold phrase.
pub struct CheckWorld {
    pub table: PhraseTable,
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
    pub examples: Vec<ParallelExample>,
}

impl CheckWorld {
    pub fn new(n_slots: usize) -> Self {
        let mut table = PhraseTable::new();
        table.insert(toks("s03 s04"), toks("t03 t04")).unwrap();
        table.insert(toks("s07"), toks("qqq")).unwrap();
        table.insert(toks("s05"), toks("t08 t09")).unwrap();
        table.insert(toks("s06"), toks("t07")).unwrap();
        let src = [toks("s01 s02 s03 s04 s05 s06 s07 s08 s09 s10 s11 s12 s13 s14 s15 s16")];
        let tgt = [toks("t01 t02 t03 t04 t05 t06 t07 t08 t09 t10 t11 t12 t13 t14 t15 t16")];
        let source_vocab = build_vocab(src.iter().map(|s| s.as_slice()), 20).unwrap().vocab;
        let target_vocab = build_vocab(tgt.iter().map(|s| s.as_slice()), 20).unwrap().vocab;
        assert_eq!(source_vocab.len(), 20);
        assert_eq!(target_vocab.len(), 20);
        let examples = vec![
            make_example(&toks("s01 s03 s04 s05"), &toks("t01 t03 t04 t05"), &table, &source_vocab, &target_vocab, n_slots)
                .unwrap(),
            make_example(&toks("s06 s07 s08"), &toks("t06 qqq t08"), &table, &source_vocab, &target_vocab, n_slots)
                .unwrap(),
        ];
        assert!(examples[0].candidates.iter().any(|c| c.in_vocab && c.gold_target_span.is_some()));
        assert!(examples[1].candidates.iter().any(|c| !c.in_vocab && c.gold_target_span.is_some()));
        CheckWorld { table, source_vocab, target_vocab, examples }
    }

    pub fn model(&self, variant: Variant, d_embed: usize, d_hidden: usize, n_slots: usize, seed: u64, scale: f64) -> Model<f64> {
        let cfg = ModelConfig::new(variant, d_embed, d_hidden, n_slots, self.source_vocab.len(), self.target_vocab.len());
        Model::with_init_scale(cfg, seed, scale).unwrap()
    }
}

/// Random tiny instances for the normalization and likelihood-oracle
/// criteria: a model plus an example with a controlled number of phrase
/// candidates and gold segments.
pub struct RandomInstance {
    pub model: Model<f64>,
    pub example: ParallelExample,
}

pub fn random_instance(variant: Variant, candidates: usize, gold: usize, seed: u64) -> RandomInstance {
    assert!(gold <= candidates);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_slots = 6;

    // rule k owns token pk on the source side; half the targets are OOV
    let mut table = PhraseTable::new();
    let mut rule_targets: Vec<Vec<String>> = Vec::new();
    for k in 0..candidates {
        let src_len = 1 + rng.gen_range(0..2);
        let source: Vec<String> = (0..src_len).map(|j| format!("p{k}{j}")).collect();
        let tgt_len = 1 + rng.gen_range(0..2);
        let oov = rng.gen_bool(0.4);
        let target: Vec<String> = (0..tgt_len)
            .map(|j| if oov { format!("o{k}{j}") } else { format!("pt{}", (k * 2 + j) % 6) })
            .collect();
        rule_targets.push(target.clone());
        table.insert(source, target).unwrap();
    }

    // corpus that defines both vocabularies: fillers plus in-vocab targets
    let vocab_line_src: Vec<String> = (0..10).map(|i| format!("f{i:02}")).collect();
    let mut vocab_line_tgt: Vec<String> = (0..10).map(|i| format!("g{i:02}")).collect();
    vocab_line_tgt.extend((0..6).map(|i| format!("pt{i}")));
    let source_vocab = build_vocab([vocab_line_src.as_slice()], 40).unwrap().vocab;
    let target_vocab = build_vocab([vocab_line_tgt.as_slice()], 40).unwrap().vocab;

    // sentence: filler chunks interleaved with every rule's source; the
    // reference embeds the first `gold` rules' targets
    let mut source = Vec::new();
    let mut target = Vec::new();
    for k in 0..candidates {
        for _ in 0..(1 + rng.gen_range(0..2)) {
            let f = rng.gen_range(0..10);
            source.push(format!("f{f:02}"));
            target.push(format!("g{f:02}"));
        }
        source.extend(table.rule(k).source.iter().cloned());
        if k < gold {
            target.extend(rule_targets[k].iter().cloned());
        }
    }
    let f = rng.gen_range(0..10);
    source.push(format!("f{f:02}"));
    target.push(format!("g{f:02}"));

    let example = make_example(&source, &target, &table, &source_vocab, &target_vocab, n_slots).unwrap();
    let cfg = ModelConfig::new(variant, 4, 6, n_slots, source_vocab.len(), target_vocab.len());
    let model = Model::with_init_scale(cfg, seed ^ 0x5eed, 0.4).unwrap();
    RandomInstance { model, example }
}

// ---------------------------------------------------------------------------
// Straight-line oracle
// ---------------------------------------------------------------------------

fn mat<'a>(p: &'a ParamStore<f64>, name: &str) -> &'a phrasenet::tensor::Tensor<f64> {
    p.get(name).unwrap_or_else(|| panic!("parameter {name} missing"))
}

fn matvec(m: &phrasenet::tensor::Tensor<f64>, x: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| m.row(i).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add3(a: Vec<f64>, b: Vec<f64>, c: Vec<f64>) -> Vec<f64> {
    a.into_iter().zip(b).zip(c).map(|((x, y), z)| x + y + z).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn oracle_gru(p: &ParamStore<f64>, prefix: &str, x: &[f64], s: &[f64]) -> Vec<f64> {
    let pre_z = add3(
        matvec(mat(p, &format!("{prefix}.wz")), x),
        matvec(mat(p, &format!("{prefix}.uz")), s),
        mat(p, &format!("{prefix}.bz")).data().to_vec(),
    );
    let z: Vec<f64> = pre_z.into_iter().map(sigmoid).collect();
    let pre_r = add3(
        matvec(mat(p, &format!("{prefix}.wr")), x),
        matvec(mat(p, &format!("{prefix}.ur")), s),
        mat(p, &format!("{prefix}.br")).data().to_vec(),
    );
    let r: Vec<f64> = pre_r.into_iter().map(sigmoid).collect();
    let gated: Vec<f64> = r.iter().zip(s).map(|(a, b)| a * b).collect();
    let pre_c = add3(
        matvec(mat(p, &format!("{prefix}.wc")), x),
        matvec(mat(p, &format!("{prefix}.uc")), &gated),
        mat(p, &format!("{prefix}.bc")).data().to_vec(),
    );
    let cand: Vec<f64> = pre_c.into_iter().map(f64::tanh).collect();
    z.iter()
        .zip(s)
        .zip(&cand)
        .map(|((zi, si), ci)| (1.0 - zi) * si + zi * ci)
        .collect()
}

pub struct OracleWalk<'m> {
    model: &'m Model<f64>,
    h: Vec<Vec<f64>>,
    tags: Vec<Vec<f64>>,
    s: Vec<f64>,
    y_prev: usize,
}

struct OracleStep {
    word_sm: Vec<f64>,
    gate: Option<f64>,
    phrase_probs: Vec<(usize, f64)>,
}

impl<'m> OracleWalk<'m> {
    pub fn new(model: &'m Model<f64>, ex: &ParallelExample) -> Self {
        let p = &model.params;
        let embed = mat(p, "enc.embed");
        let d_h = model.config.d_hidden;
        let xs: Vec<Vec<f64>> = ex.source_ids.iter().map(|&id| embed.row(id).to_vec()).collect();
        let mut fwd = Vec::new();
        let mut state = vec![0.0; d_h];
        for x in &xs {
            state = oracle_gru(p, "enc.fwd", x, &state);
            fwd.push(state.clone());
        }
        let mut bwd = vec![Vec::new(); xs.len()];
        let mut back = vec![0.0; d_h];
        for (i, x) in xs.iter().enumerate().rev() {
            back = oracle_gru(p, "enc.bwd", x, &back);
            bwd[i] = back.clone();
        }
        let h: Vec<Vec<f64>> = fwd
            .into_iter()
            .zip(&bwd)
            .map(|(f, b)| f.into_iter().chain(b.iter().copied()).collect())
            .collect();
        let s0: Vec<f64> = matvec(mat(p, "dec.init_w"), &bwd[0]).into_iter().map(f64::tanh).collect();
        let tags: Vec<Vec<f64>> = ex
            .annotation
            .tag_matrix
            .iter()
            .map(|row| row.iter().map(|&t| t as f64).collect())
            .collect();
        OracleWalk { model, h, tags, s: s0, y_prev: BOS }
    }

    fn tagged(&self, j: usize) -> Vec<f64> {
        self.h[j].iter().copied().chain(self.tags[j].iter().copied()).collect()
    }

    /// Attend then update the state; mirrors one decoder tick.
    fn advance(&mut self) -> (Vec<f64>, Vec<f64>) {
        let p = &self.model.params;
        let e_prev = mat(p, "dec.embed").row(self.y_prev).to_vec();
        let w = mat(p, "attn.w");
        let b = mat(p, "attn.b");
        let v = mat(p, "attn.v");
        let mut scores = Vec::with_capacity(self.h.len());
        for j in 0..self.h.len() {
            let input: Vec<f64> = self
                .s
                .iter()
                .copied()
                .chain(self.tagged(j))
                .chain(e_prev.iter().copied())
                .collect();
            let hidden: Vec<f64> = matvec(w, &input)
                .into_iter()
                .zip(b.data())
                .map(|(x, bi)| (x + bi).tanh())
                .collect();
            scores.push(dot(v.data(), &hidden));
        }
        let alpha = softmax(&scores);
        let width = 2 * self.model.config.d_hidden + self.model.config.n_slots;
        let mut context = vec![0.0; width];
        for (j, a) in alpha.iter().enumerate() {
            for (c, x) in context.iter_mut().zip(self.tagged(j)) {
                *c += a * x;
            }
        }
        let x: Vec<f64> = context.iter().copied().chain(e_prev.iter().copied()).collect();
        self.s = oracle_gru(p, "dec.gru", &x, &self.s);
        (context, e_prev)
    }

    fn embed_phrase(&self, target_ids: &[usize]) -> Vec<f64> {
        let p = &self.model.params;
        let mut state = vec![0.0; self.model.config.d_hidden];
        for &tok in target_ids.iter().rev() {
            let x = mat(p, "dec.embed").row(tok).to_vec();
            state = oracle_gru(p, "pembed", &x, &state);
        }
        state
    }

    fn head(&self, prefix: &str, context: &[f64], e_prev: &[f64]) -> Vec<f64> {
        let p = &self.model.params;
        let hidden: Vec<f64> = add3(
            matvec(mat(p, &format!("{prefix}.u")), &self.s),
            matvec(mat(p, &format!("{prefix}.c")), context),
            matvec(mat(p, &format!("{prefix}.v")), e_prev),
        )
        .into_iter()
        .map(f64::tanh)
        .collect();
        matvec(mat(p, &format!("{prefix}.w")), &hidden)
    }

    fn step(&self, context: &[f64], e_prev: &[f64], live: &[&phrasenet::corpus::Candidate]) -> OracleStep {
        let p = &self.model.params;
        let word_scores = self.head("word", context, e_prev);
        if live.is_empty() || self.model.config.variant == Variant::Baseline || self.model.pin_word_only {
            return OracleStep { word_sm: softmax(&word_scores), gate: None, phrase_probs: Vec::new() };
        }
        match self.model.config.variant {
            Variant::Gate => {
                let word_sm = softmax(&word_scores);
                let input: Vec<f64> = self
                    .s
                    .iter()
                    .copied()
                    .chain(context.iter().copied())
                    .chain(e_prev.iter().copied())
                    .collect();
                let h1: Vec<f64> = matvec(mat(p, "gate.w1"), &input)
                    .into_iter()
                    .zip(mat(p, "gate.b1").data())
                    .map(|(x, b)| (x + b).tanh())
                    .collect();
                let h2: Vec<f64> = matvec(mat(p, "gate.w2"), &h1)
                    .into_iter()
                    .zip(mat(p, "gate.b2").data())
                    .map(|(x, b)| (x + b).tanh())
                    .collect();
                let gate = sigmoid(dot(mat(p, "gate.w3").data(), &h2) + mat(p, "gate.b3").data()[0]);
                let all_slots = self.head("phrase", context, e_prev);
                let live_scores: Vec<f64> = live.iter().map(|c| all_slots[c.slot]).collect();
                let phr_sm = softmax(&live_scores);
                let phrase_probs = live
                    .iter()
                    .zip(&phr_sm)
                    .map(|(c, &q)| (c.slot, gate * q))
                    .collect();
                OracleStep {
                    word_sm: word_sm.into_iter().map(|w| (1.0 - gate) * w).collect(),
                    gate: Some(gate),
                    phrase_probs,
                }
            }
            Variant::Softmax => {
                let base = add3(
                    matvec(mat(p, "phrase.u"), &self.s),
                    matvec(mat(p, "phrase.c"), context),
                    matvec(mat(p, "phrase.v"), e_prev),
                );
                let mut scores = word_scores;
                for c in live {
                    let ep = self.embed_phrase(&c.target_ids);
                    let re = matvec(mat(p, "phrase.r"), &ep);
                    let hidden: Vec<f64> =
                        base.iter().zip(&re).map(|(a, b)| (a + b).tanh()).collect();
                    scores.push(dot(mat(p, "phrase.w").row(0), &hidden));
                }
                let joint = softmax(&scores);
                let words = joint.len() - live.len();
                OracleStep {
                    word_sm: joint[..words].to_vec(),
                    gate: None,
                    phrase_probs: live
                        .iter()
                        .zip(&joint[words..])
                        .map(|(c, &q)| (c.slot, q))
                        .collect(),
                }
            }
            Variant::Baseline => unreachable!(),
        }
    }
}

/// The sentence probability by exhaustive enumeration over mode assignments:
/// every gold segment is generated either word-by-word (only when its target
/// phrase has no OOV token) or as one phrase-mode retrieval; the teacher-
/// forced state trajectory is shared and tags are zeroed after each segment.
pub fn oracle_sentence_probability(model: &Model<f64>, ex: &ParallelExample) -> f64 {
    let use_phrases = model.config.variant != Variant::Baseline && !model.pin_word_only;
    let mut walk = OracleWalk::new(model, ex);
    let mut consumed = vec![false; ex.candidates.len()];

    struct Segment {
        word_path: Option<f64>,
        phrase_path: f64,
    }
    let mut wy_product = 1.0f64;
    let mut segments: Vec<Segment> = Vec::new();

    let seg_at = |t: usize, consumed: &[bool]| -> Option<usize> {
        if !use_phrases {
            return None;
        }
        ex.candidates
            .iter()
            .enumerate()
            .find(|(i, c)| !consumed[*i] && c.gold_target_span.map(|s| s.begin) == Some(t))
            .map(|(i, _)| i)
    };

    let mut t = 0usize;
    while t < ex.target_ids.len() {
        let (context, e_prev) = walk.advance();
        let live: Vec<&phrasenet::corpus::Candidate> = if use_phrases {
            ex.candidates.iter().enumerate().filter(|(i, _)| !consumed[*i]).map(|(_, c)| c).collect()
        } else {
            Vec::new()
        };
        if let Some(ci) = seg_at(t, &consumed) {
            let cand = &ex.candidates[ci];
            let span = cand.gold_target_span.unwrap();
            let step = walk.step(&context, &e_prev, &live);
            let phrase_path = step
                .phrase_probs
                .iter()
                .find(|(slot, _)| *slot == cand.slot)
                .map(|(_, p)| *p)
                .expect("gold candidate is live");
            let mut word_path = if cand.in_vocab {
                Some(step.word_sm[ex.target_ids[t]])
            } else {
                None
            };
            walk.y_prev = ex.target_ids[t];
            for i in (span.begin + 1)..span.end {
                let (context, e_prev) = walk.advance();
                if let Some(w) = word_path {
                    let step = walk.step(&context, &e_prev, &live);
                    word_path = Some(w * step.word_sm[ex.target_ids[i]]);
                }
                walk.y_prev = ex.target_ids[i];
            }
            segments.push(Segment { word_path, phrase_path });
            consumed[ci] = true;
            for pos in cand.source_span.begin..cand.source_span.end {
                for tag in &mut walk.tags[pos] {
                    *tag = 0.0;
                }
            }
            t = span.end;
        } else {
            let y = ex.target_ids[t];
            let step = walk.step(&context, &e_prev, &live);
            let factor = match (step.gate, model.config.gate_factor_on_words) {
                (Some(gate), false) => step.word_sm[y] / (1.0 - gate),
                _ => step.word_sm[y],
            };
            wy_product *= factor;
            walk.y_prev = y;
            t += 1;
        }
    }

    // explicit enumeration over the 2^G assignments (with I_unk pruning)
    let mut total = 0.0f64;
    let g = segments.len();
    for mask in 0u32..(1 << g) {
        let mut p = wy_product;
        let mut feasible = true;
        for (k, seg) in segments.iter().enumerate() {
            if mask & (1 << k) != 0 {
                p *= seg.phrase_path;
            } else {
                match seg.word_path {
                    Some(w) => p *= w,
                    None => {
                        feasible = false;
                        break;
                    }
                }
            }
        }
        if feasible {
            total += p;
        }
    }
    total
}
