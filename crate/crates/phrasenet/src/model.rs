//! Model parameters: a named tensor store plus the wiring that binds every
//! weight into a computation graph for one forward/backward pass.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Gated mixture: an explicit mode gate scales independent word and
    /// phrase distributions.
    Gate,
    /// Joint softmax: phrase candidates compete with words in one softmax.
    Softmax,
    /// Word-only attention model; the phrase table is ignored.
    Baseline,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Gate => "gate",
            Variant::Softmax => "softmax",
            Variant::Baseline => "baseline",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gate" => Ok(Variant::Gate),
            "softmax" => Ok(Variant::Softmax),
            "baseline" => Ok(Variant::Baseline),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Word embedding width (both sides).
    pub d_embed: usize,
    /// Recurrent state width; also the head and gate hidden widths.
    pub d_hidden: usize,
    /// Tag vector length n_p: the cap on phrase candidates per sentence.
    pub n_slots: usize,
    pub source_vocab: usize,
    pub target_vocab: usize,
    /// Whether not-in-phrase target words carry the p(z=0) factor in the
    /// gate variant's likelihood.
    pub gate_factor_on_words: bool,
}

impl ModelConfig {
    pub fn new(variant: Variant, d_embed: usize, d_hidden: usize, n_slots: usize, source_vocab: usize, target_vocab: usize) -> Self {
        ModelConfig {
            variant,
            d_embed,
            d_hidden,
            n_slots,
            source_vocab,
            target_vocab,
            gate_factor_on_words: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_embed == 0 || self.d_hidden == 0 || self.n_slots == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.source_vocab < 5 || self.target_vocab < 5 {
            return Err(Error::Config("vocabularies need at least one non-reserved entry".into()));
        }
        Ok(())
    }

    /// Width of a tagged annotation h′ = [h_fwd, h_bwd, tag].
    pub fn d_annotation(&self) -> usize {
        2 * self.d_hidden + self.n_slots
    }

    /// Width of the step context (s_t, c_t, e_prev) fed to the gate and the
    /// attention scorer.
    pub fn d_step_input(&self) -> usize {
        self.d_hidden + self.d_annotation() + self.d_embed
    }
}

/// Index of a named parameter tensor within a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    entries: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<F>) -> ParamId {
        debug_assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.entries.len();
        self.index.insert(name.to_string(), id);
        self.entries.push((name.to_string(), tensor));
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.index.get(name).copied().map(move |i| &mut self.entries[i].1)
    }

    pub fn by_id(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].1
    }

    pub fn by_id_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].1
    }

    pub fn name_of(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn total_entries(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// GRU weights for one direction: update (z), reset (r) and candidate (c)
/// gates, each with an input weight, a recurrent weight and a bias.
#[derive(Debug, Clone, Copy)]
pub struct GruIds {
    pub wz: ParamId,
    pub uz: ParamId,
    pub bz: ParamId,
    pub wr: ParamId,
    pub ur: ParamId,
    pub br: ParamId,
    pub wc: ParamId,
    pub uc: ParamId,
    pub bc: ParamId,
}

/// A score head `W · tanh(U s + C c + V e_prev)`.
#[derive(Debug, Clone, Copy)]
pub struct HeadIds {
    pub u: ParamId,
    pub c: ParamId,
    pub v: ParamId,
    pub w: ParamId,
}

/// The mode gate f_z: two tanh hidden layers and a sigmoid output.
#[derive(Debug, Clone, Copy)]
pub struct GateIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub w3: ParamId,
    pub b3: ParamId,
}

/// Joint-softmax phrase scorer `W · tanh(U s + C c + V e_prev + R e_p)`.
#[derive(Debug, Clone, Copy)]
pub struct SoftPhraseIds {
    pub u: ParamId,
    pub c: ParamId,
    pub v: ParamId,
    pub r: ParamId,
    pub w: ParamId,
}

#[derive(Debug, Clone)]
pub struct Wiring {
    pub enc_embed: ParamId,
    pub enc_fwd: GruIds,
    pub enc_bwd: GruIds,
    pub init_w: ParamId,
    pub attn_w: ParamId,
    pub attn_b: ParamId,
    pub attn_v: ParamId,
    pub dec_embed: ParamId,
    pub dec_gru: GruIds,
    pub word: HeadIds,
    pub gate: Option<GateIds>,
    pub gate_phrase: Option<HeadIds>,
    pub soft_phrase: Option<SoftPhraseIds>,
    pub phrase_rnn: Option<GruIds>,
}

struct Registrar<'r, F: Scalar> {
    store: &'r mut ParamStore<F>,
    rng: ChaCha8Rng,
    init_scale: f64,
}

impl<'r, F: Scalar> Registrar<'r, F> {
    fn weight(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let numel: usize = shape.iter().product();
        let data: Vec<F> = (0..numel)
            .map(|_| F::lit(self.rng.gen_range(-self.init_scale..self.init_scale)))
            .collect();
        self.store.add(name, Tensor::new(shape.to_vec(), data).expect("valid shape"))
    }

    fn bias(&mut self, name: &str, len: usize) -> ParamId {
        self.store.add(name, Tensor::zeros(vec![len]))
    }

    fn gru(&mut self, prefix: &str, d_in: usize, d_h: usize) -> GruIds {
        GruIds {
            wz: self.weight(&format!("{prefix}.wz"), &[d_h, d_in]),
            uz: self.weight(&format!("{prefix}.uz"), &[d_h, d_h]),
            bz: self.bias(&format!("{prefix}.bz"), d_h),
            wr: self.weight(&format!("{prefix}.wr"), &[d_h, d_in]),
            ur: self.weight(&format!("{prefix}.ur"), &[d_h, d_h]),
            br: self.bias(&format!("{prefix}.br"), d_h),
            wc: self.weight(&format!("{prefix}.wc"), &[d_h, d_in]),
            uc: self.weight(&format!("{prefix}.uc"), &[d_h, d_h]),
            bc: self.bias(&format!("{prefix}.bc"), d_h),
        }
    }

    fn head(&mut self, prefix: &str, cfg: &ModelConfig, out_rows: usize) -> HeadIds {
        let d = cfg.d_hidden;
        HeadIds {
            u: self.weight(&format!("{prefix}.u"), &[d, cfg.d_hidden]),
            c: self.weight(&format!("{prefix}.c"), &[d, cfg.d_annotation()]),
            v: self.weight(&format!("{prefix}.v"), &[d, cfg.d_embed]),
            w: self.weight(&format!("{prefix}.w"), &[out_rows, d]),
        }
    }
}

/// A full parameter set for one variant, with its wiring.
#[derive(Debug, Clone)]
pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
    pub wiring: Wiring,
    /// Evaluation switch: force word-only generation. In the gate variant
    /// this pins f_z to 0; in the softmax variant it pins phrase scores out
    /// of the softmax. Never serialized.
    pub pin_word_only: bool,
}

impl<F: Scalar> Model<F> {
    /// Fresh model with weights from uniform(−0.08, 0.08) and zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Model::with_init_scale(config, seed, 0.08)
    }

    /// Fresh model with weights from uniform(−scale, scale). Training uses
    /// the 0.08 default; gradient-check fixtures use a larger scale so that
    /// recurrent states are far from zero and every parameter influences the
    /// loss above finite-difference resolution.
    pub fn with_init_scale(config: ModelConfig, seed: u64, init_scale: f64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut reg = Registrar { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed), init_scale };
        let cfg = &config;
        let d_h = cfg.d_hidden;

        let enc_embed = reg.weight("enc.embed", &[cfg.source_vocab, cfg.d_embed]);
        let enc_fwd = reg.gru("enc.fwd", cfg.d_embed, d_h);
        let enc_bwd = reg.gru("enc.bwd", cfg.d_embed, d_h);
        let init_w = reg.weight("dec.init_w", &[d_h, d_h]);
        let attn_w = reg.weight("attn.w", &[d_h, cfg.d_step_input()]);
        let attn_b = reg.bias("attn.b", d_h);
        let attn_v = reg.weight("attn.v", &[d_h]);
        let dec_embed = reg.weight("dec.embed", &[cfg.target_vocab, cfg.d_embed]);
        let dec_gru = reg.gru("dec.gru", cfg.d_annotation() + cfg.d_embed, d_h);
        let word = reg.head("word", cfg, cfg.target_vocab);

        let (gate, gate_phrase, soft_phrase, phrase_rnn) = match cfg.variant {
            Variant::Gate => {
                let gate = GateIds {
                    w1: reg.weight("gate.w1", &[d_h, cfg.d_step_input()]),
                    b1: reg.bias("gate.b1", d_h),
                    w2: reg.weight("gate.w2", &[d_h, d_h]),
                    b2: reg.bias("gate.b2", d_h),
                    w3: reg.weight("gate.w3", &[d_h]),
                    b3: reg.bias("gate.b3", 1),
                };
                let phrase = reg.head("phrase", cfg, cfg.n_slots);
                (Some(gate), Some(phrase), None, None)
            }
            Variant::Softmax => {
                let soft = SoftPhraseIds {
                    u: reg.weight("phrase.u", &[d_h, d_h]),
                    c: reg.weight("phrase.c", &[d_h, cfg.d_annotation()]),
                    v: reg.weight("phrase.v", &[d_h, cfg.d_embed]),
                    r: reg.weight("phrase.r", &[d_h, d_h]),
                    w: reg.weight("phrase.w", &[1, d_h]),
                };
                let rnn = reg.gru("pembed", cfg.d_embed, d_h);
                (None, None, Some(soft), Some(rnn))
            }
            Variant::Baseline => (None, None, None, None),
        };

        let wiring = Wiring {
            enc_embed,
            enc_fwd,
            enc_bwd,
            init_w,
            attn_w,
            attn_b,
            attn_v,
            dec_embed,
            dec_gru,
            word,
            gate,
            gate_phrase,
            soft_phrase,
            phrase_rnn,
        };
        Ok(Model { config, params: store, wiring, pin_word_only: false })
    }

    /// A word-only model over the same trunk: shared parameters are copied
    /// by name, phrase-side heads are dropped.
    pub fn baseline_twin(&self) -> Result<Model<F>> {
        let config = ModelConfig { variant: Variant::Baseline, ..self.config.clone() };
        let mut twin = Model::new(config, 0)?;
        let names: Vec<String> = twin.params.names().map(str::to_string).collect();
        for name in names {
            let source = self
                .params
                .get(&name)
                .ok_or_else(|| Error::Contract(format!("trunk parameter {name} missing")))?
                .clone();
            *twin.params.get_mut(&name).expect("own name") = source;
        }
        Ok(twin)
    }

    /// Begin a forward pass: every parameter is bound into a fresh graph.
    pub fn pass(&self) -> Pass<'_, F> {
        let mut g = Graph::new();
        let bound = self
            .params
            .iter()
            .map(|(_, t)| g.leaf(t.shape(), t.data()))
            .collect();
        Pass { g, model: self, bound }
    }
}

/// One forward/backward evaluation: a graph with all parameters bound as
/// leading leaves. Confined to one worker; the parameter snapshot it copied
/// from stays immutable for its lifetime.
pub struct Pass<'m, F: Scalar> {
    pub g: Graph<F>,
    pub model: &'m Model<F>,
    bound: Vec<Var>,
}

impl<'m, F: Scalar> Pass<'m, F> {
    pub fn p(&self, id: ParamId) -> Var {
        self.bound[id.0]
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn wiring(&self) -> &Wiring {
        &self.model.wiring
    }

    /// Gradient slices aligned with the parameter store, for the optimizer.
    pub fn param_grads(&self) -> Vec<&[F]> {
        self.bound.iter().map(|&v| self.g.grad(v)).collect()
    }
}
