//! Two-level gated recurrent decoder.
//!
//! A response-level LSTM carries global semantics from the knowledge
//! vector; a word-level LSTM re-reads the encoder through a
//! question-guided deliberation step, an abandon gate filters the
//! word-level embedding, and a memory gate fuses both levels before the
//! output projection. Units nest into the ablation ladder
//! `2lstm ⊂ 2l-m ⊂ 2l-dm ⊂ 2l-dam`.

use serde::{Deserialize, Serialize};

use crate::data::{END, START, UNK};
use crate::encoder::{attend, gate_fuse, AttnParams, EncoderVariant, GateFusionParams, KnowledgeBase};
use crate::error::{DamError, Result};
use crate::lstm::{lstm_step, uniform_matrix, uniform_vector, zero_vector, LstmParams, LstmState};
use crate::model::{Model, ModelConfig};
use crate::rng::DetRng;
use crate::tensor::{ParamId, ParamSet, Scalar, Tape, Var};

// ── Unit configuration ───────────────────────────────────────────────

/// Which decoder units are active. The ladder nests: abandon requires
/// deliberation, deliberation requires memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitConfig {
    pub memory: bool,
    pub deliberation: bool,
    pub abandon: bool,
}

impl UnitConfig {
    pub const TWO_LSTM: UnitConfig = UnitConfig {
        memory: false,
        deliberation: false,
        abandon: false,
    };
    pub const MEMORY: UnitConfig = UnitConfig {
        memory: true,
        deliberation: false,
        abandon: false,
    };
    pub const DELIB_MEMORY: UnitConfig = UnitConfig {
        memory: true,
        deliberation: true,
        abandon: false,
    };
    pub const FULL: UnitConfig = UnitConfig {
        memory: true,
        deliberation: true,
        abandon: true,
    };

    pub const LADDER: [UnitConfig; 4] = [
        UnitConfig::TWO_LSTM,
        UnitConfig::MEMORY,
        UnitConfig::DELIB_MEMORY,
        UnitConfig::FULL,
    ];

    pub fn validate(&self) -> Result<()> {
        if self.abandon && !self.deliberation {
            return Err(DamError::Config(
                "abandon unit requires the deliberation unit".into(),
            ));
        }
        if self.deliberation && !self.memory {
            return Err(DamError::Config(
                "deliberation unit requires the memory unit".into(),
            ));
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match (self.memory, self.deliberation, self.abandon) {
            (false, false, false) => "2lstm",
            (true, false, false) => "2l-m",
            (true, true, false) => "2l-dm",
            (true, true, true) => "2l-dam",
            _ => "invalid",
        }
    }
}

impl std::str::FromStr for UnitConfig {
    type Err = DamError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2lstm" => Ok(UnitConfig::TWO_LSTM),
            "2l-m" => Ok(UnitConfig::MEMORY),
            "2l-dm" => Ok(UnitConfig::DELIB_MEMORY),
            "2l-dam" => Ok(UnitConfig::FULL),
            other => Err(DamError::Config(format!(
                "unknown unit configuration {other:?}, expected one of 2lstm, 2l-m, 2l-dm, 2l-dam"
            ))),
        }
    }
}

impl std::fmt::Display for UnitConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for UnitConfig {
    fn serialize<Ser: serde::Serializer>(&self, s: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        self.validate().map_err(serde::ser::Error::custom)?;
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for UnitConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

// ── Parameters ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct GateParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl GateParams {
    fn register<S: Scalar>(
        params: &mut ParamSet<S>,
        prefix: &str,
        width: usize,
        rng: &mut DetRng,
    ) -> Self {
        let scale = 1.0 / (width as f64).sqrt();
        GateParams {
            w: uniform_matrix(params, format!("{prefix}.w"), width, width, scale, rng),
            b: zero_vector(params, format!("{prefix}.b"), width),
        }
    }
}

/// Deliberation parameters. Structurally these mirror the encoder's
/// variant, but the tensors are independent of the encoder's own.
#[derive(Debug, Clone, Copy)]
pub enum DelibParams {
    Lf {
        fuse_w: ParamId,
        fuse_b: ParamId,
    },
    Mn {
        query_w: ParamId,
        query_b: ParamId,
        attn: AttnParams,
        out_w: ParamId,
        out_b: ParamId,
    },
    Dualvd {
        attn_history: AttnParams,
        fuse_query: GateFusionParams,
        attn_regions: AttnParams,
        attn_captions: AttnParams,
        fuse_image: GateFusionParams,
        out_w: ParamId,
        out_b: ParamId,
    },
}

impl DelibParams {
    fn register<S: Scalar>(
        params: &mut ParamSet<S>,
        prefix: &str,
        variant: EncoderVariant,
        hidden: usize,
        rng: &mut DetRng,
    ) -> Self {
        let h = hidden;
        let scale3 = 1.0 / ((3 * h) as f64).sqrt();
        let scale2 = 1.0 / ((2 * h) as f64).sqrt();
        match variant {
            EncoderVariant::Lf => DelibParams::Lf {
                fuse_w: uniform_matrix(params, format!("{prefix}.fuse.w"), h, 3 * h, scale3, rng),
                fuse_b: zero_vector(params, format!("{prefix}.fuse.b"), h),
            },
            EncoderVariant::Mn => DelibParams::Mn {
                query_w: uniform_matrix(params, format!("{prefix}.query.w"), h, 2 * h, scale2, rng),
                query_b: zero_vector(params, format!("{prefix}.query.b"), h),
                attn: AttnParams::register(params, &format!("{prefix}.attn"), h, rng),
                out_w: uniform_matrix(params, format!("{prefix}.out.w"), h, 2 * h, scale2, rng),
                out_b: zero_vector(params, format!("{prefix}.out.b"), h),
            },
            EncoderVariant::Dualvd => DelibParams::Dualvd {
                attn_history: AttnParams::register(params, &format!("{prefix}.attn_hist"), h, rng),
                fuse_query: GateFusionParams::register(params, &format!("{prefix}.fuse_query"), h, rng),
                attn_regions: AttnParams::register(params, &format!("{prefix}.attn_vis"), h, rng),
                attn_captions: AttnParams::register(params, &format!("{prefix}.attn_sem"), h, rng),
                fuse_image: GateFusionParams::register(params, &format!("{prefix}.fuse_image"), h, rng),
                out_w: uniform_matrix(params, format!("{prefix}.out.w"), h, 3 * h, scale3, rng),
                out_b: zero_vector(params, format!("{prefix}.out.b"), h),
            },
        }
    }
}

/// All decoder-side tensors. Gate widths equal the length of the
/// concatenation they act on; the output projection width follows the
/// active units (2·hidden for the bare two-stream decoder, 3·hidden once
/// the memory gate concatenates `[r, d]`).
#[derive(Debug, Clone, Copy)]
pub struct DecoderParams {
    pub response_lstm: LstmParams,
    pub word_lstm: LstmParams,
    pub init_response_cell: ParamId,
    pub init_word_hidden: ParamId,
    pub init_word_cell: ParamId,
    pub question_gate: Option<GateParams>,
    pub question_proj: Option<ParamId>,
    pub delib: Option<DelibParams>,
    pub abandon_gate: Option<GateParams>,
    pub memory_gate: Option<GateParams>,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub baseline_w: ParamId,
    pub baseline_b: ParamId,
}

impl DecoderParams {
    pub fn register<S: Scalar>(
        params: &mut ParamSet<S>,
        prefix: &str,
        config: &ModelConfig,
        vocab_size: usize,
        rng: &mut DetRng,
    ) -> Self {
        let h = config.hidden;
        let units = config.units;
        let response_lstm =
            LstmParams::register(params, &format!("{prefix}.r_lstm"), config.embed_dim, h, rng);
        let word_lstm = LstmParams::register(
            params,
            &format!("{prefix}.d_lstm"),
            config.embed_dim + h,
            h,
            rng,
        );
        let scale_h = 1.0 / (h as f64).sqrt();
        let init_response_cell =
            uniform_vector(params, format!("{prefix}.init.r_cell"), h, scale_h, rng);
        let init_word_hidden =
            uniform_vector(params, format!("{prefix}.init.d_hidden"), h, scale_h, rng);
        let init_word_cell =
            uniform_vector(params, format!("{prefix}.init.d_cell"), h, scale_h, rng);

        let (question_gate, question_proj, delib) = if units.deliberation {
            let gate = GateParams::register(params, &format!("{prefix}.q_gate"), 2 * h, rng);
            let proj = uniform_matrix(
                params,
                format!("{prefix}.q_proj.w"),
                h,
                2 * h,
                1.0 / ((2 * h) as f64).sqrt(),
                rng,
            );
            let delib = DelibParams::register(params, &format!("{prefix}.delib"), config.encoder, h, rng);
            (Some(gate), Some(proj), Some(delib))
        } else {
            (None, None, None)
        };

        let abandon_gate = units
            .abandon
            .then(|| GateParams::register(params, &format!("{prefix}.a_gate"), 2 * h, rng));
        let memory_gate = units
            .memory
            .then(|| GateParams::register(params, &format!("{prefix}.m_gate"), 3 * h, rng));

        let o_dim = if units.memory { 3 * h } else { 2 * h };
        let out_scale = 1.0 / (o_dim as f64).sqrt();
        let out_w = uniform_matrix(params, format!("{prefix}.out.w"), vocab_size, o_dim, out_scale, rng);
        let out_b = zero_vector(params, format!("{prefix}.out.b"), vocab_size);
        let baseline_w =
            uniform_matrix(params, format!("{prefix}.base.w"), vocab_size, h, scale_h, rng);
        let baseline_b = zero_vector(params, format!("{prefix}.base.b"), vocab_size);

        DecoderParams {
            response_lstm,
            word_lstm,
            init_response_cell,
            init_word_hidden,
            init_word_cell,
            question_gate,
            question_proj,
            delib,
            abandon_gate,
            memory_gate,
            out_w,
            out_b,
            baseline_w,
            baseline_b,
        }
    }
}

// ── Decoder state and traces ─────────────────────────────────────────

/// Per-sequence decoding state: both LSTM states plus the current
/// question and knowledge vectors.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub response: LstmState,
    pub word: LstmState,
    pub question: Var,
    pub knowledge: Var,
    pub step: usize,
}

/// Per-step diagnostics. Gate values are in (0,1); the memory-gate mass
/// ratios sum to one.
#[derive(Debug, Clone, Default)]
pub struct StepTrace {
    pub token: Option<usize>,
    pub ratio_rsl: Option<f64>,
    pub ratio_wdl: Option<f64>,
    pub question_gate: Option<Vec<f64>>,
    pub abandon_gate: Option<Vec<f64>>,
    pub memory_gate: Option<Vec<f64>>,
    pub history_attention: Option<Vec<f64>>,
    pub region_attention: Option<Vec<f64>>,
    pub caption_attention: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
struct DelibTrace {
    history: Option<Vec<f64>>,
    regions: Option<Vec<f64>>,
    captions: Option<Vec<f64>>,
}

fn values_f64<S: Scalar>(tape: &Tape<S>, v: Var) -> Vec<f64> {
    tape.value(v).iter().map(|x| x.as_f64()).collect()
}

// ── Decoder ops ──────────────────────────────────────────────────────

impl<S: Scalar> Model<S> {
    /// Fresh decoding state: the knowledge vector seeds the
    /// response-level hidden state, learned vectors seed the rest.
    pub fn init_state(&self, tape: &mut Tape<S>, kb: &KnowledgeBase) -> Result<DecoderState> {
        let h = self.config.hidden;
        if tape.shape(kb.knowledge) != [h] {
            return Err(DamError::shapes("decoder init", &[h], tape.shape(kb.knowledge)));
        }
        let response = LstmState {
            hidden: kb.knowledge,
            cell: tape.param(&self.params, self.dec.init_response_cell),
        };
        let word = LstmState {
            hidden: tape.param(&self.params, self.dec.init_word_hidden),
            cell: tape.param(&self.params, self.dec.init_word_cell),
        };
        Ok(DecoderState {
            response,
            word,
            question: kb.question,
            knowledge: kb.knowledge,
            step: 0,
        })
    }

    /// Response-level recurrence over the previous token.
    pub fn response_step(&self, tape: &mut Tape<S>, x_prev: usize, state: &mut DecoderState) -> Result<Var> {
        let table = tape.param(&self.params, self.embed);
        let x = tape.embed_row(table, x_prev)?;
        let (r, next) = lstm_step(tape, &self.params, &self.dec.response_lstm, x, &state.response)?;
        state.response = next;
        Ok(r)
    }

    /// Word-level recurrence over the previous token joined with the
    /// current knowledge vector.
    pub fn word_step(&self, tape: &mut Tape<S>, x_prev: usize, state: &mut DecoderState) -> Result<Var> {
        let table = tape.param(&self.params, self.embed);
        let x = tape.embed_row(table, x_prev)?;
        let joint = tape.concat(&[x, state.knowledge])?;
        let (n, next) = lstm_step(tape, &self.params, &self.dec.word_lstm, joint, &state.word)?;
        state.word = next;
        Ok(n)
    }

    /// Word-guided question update:
    /// `gate = σ(W[q, n] + b)`, `q' = P(gate ∘ [q, n])`.
    pub fn question_update(&self, tape: &mut Tape<S>, q_prev: Var, n: Var) -> Result<(Var, Var)> {
        let gate_params = self.dec.question_gate.as_ref().ok_or_else(|| {
            DamError::Config("question update requires the deliberation unit".into())
        })?;
        let proj = self.dec.question_proj.expect("registered with the gate");
        let joint = tape.concat(&[q_prev, n])?;
        let w = tape.param(&self.params, gate_params.w);
        let b = tape.param(&self.params, gate_params.b);
        let pre = tape.linear(w, joint, Some(b))?;
        let gate = tape.sigmoid(pre);
        let gated = tape.mul(gate, joint)?;
        let pw = tape.param(&self.params, proj);
        let q_new = tape.linear(pw, gated, None)?;
        Ok((q_new, gate))
    }

    /// Re-queries the knowledge base with the updated question, using the
    /// structure matching the encoder variant. Returns the new knowledge
    /// vector and the attention weights it used.
    fn deliberate_traced(
        &self,
        tape: &mut Tape<S>,
        kb: &KnowledgeBase,
        q_new: Var,
        collect: bool,
    ) -> Result<(Var, DelibTrace)> {
        if kb.variant != self.config.encoder {
            return Err(DamError::Config(format!(
                "knowledge base built by {} encoder but model expects {}",
                kb.variant, self.config.encoder
            )));
        }
        let delib = self.dec.delib.as_ref().ok_or_else(|| {
            DamError::Config("deliberation unit is not enabled in this configuration".into())
        })?;
        let params = &self.params;
        let mut trace = DelibTrace::default();
        let k_new = match delib {
            DelibParams::Lf { fuse_w, fuse_b } => {
                let mean_regions = tape.mean_n(&kb.regions)?;
                let mean_history = tape.mean_n(&kb.history)?;
                let joint = tape.concat(&[q_new, mean_regions, mean_history])?;
                let w = tape.param(params, *fuse_w);
                let b = tape.param(params, *fuse_b);
                let fused = tape.linear(w, joint, Some(b))?;
                tape.tanh(fused)
            }
            DelibParams::Mn {
                query_w,
                query_b,
                attn,
                out_w,
                out_b,
            } => {
                let mean_regions = tape.mean_n(&kb.regions)?;
                let joint = tape.concat(&[q_new, mean_regions])?;
                let w = tape.param(params, *query_w);
                let b = tape.param(params, *query_b);
                let query = tape.linear(w, joint, Some(b))?;
                let hist = attend(tape, params, attn, query, &kb.history)?;
                if collect {
                    trace.history = Some(values_f64(tape, hist.weights));
                }
                let fused_in = tape.concat(&[q_new, hist.summary])?;
                let ow = tape.param(params, *out_w);
                let ob = tape.param(params, *out_b);
                let fused = tape.linear(ow, fused_in, Some(ob))?;
                tape.tanh(fused)
            }
            DelibParams::Dualvd {
                attn_history,
                fuse_query,
                attn_regions,
                attn_captions,
                fuse_image,
                out_w,
                out_b,
            } => {
                let hist = attend(tape, params, attn_history, q_new, &kb.history)?;
                let query = gate_fuse(tape, params, fuse_query, q_new, hist.summary)?;
                let visual = attend(tape, params, attn_regions, query, &kb.regions)?;
                let semantic = attend(tape, params, attn_captions, query, &kb.captions)?;
                if collect {
                    trace.history = Some(values_f64(tape, hist.weights));
                    trace.regions = Some(values_f64(tape, visual.weights));
                    trace.captions = Some(values_f64(tape, semantic.weights));
                }
                let image = gate_fuse(tape, params, fuse_image, visual.summary, semantic.summary)?;
                let joint = tape.concat(&[q_new, hist.summary, image])?;
                let w = tape.param(params, *out_w);
                let b = tape.param(params, *out_b);
                let fused = tape.linear(w, joint, Some(b))?;
                tape.tanh(fused)
            }
        };
        Ok((k_new, trace))
    }

    /// Deliberation with attention traces.
    pub fn deliberate(
        &self,
        tape: &mut Tape<S>,
        kb: &KnowledgeBase,
        q_new: Var,
    ) -> Result<Var> {
        self.deliberate_traced(tape, kb, q_new, false).map(|(k, _)| k)
    }

    /// Abandon gate: filters `[n, k]` down to the word-level embedding.
    pub fn abandon(&self, tape: &mut Tape<S>, n: Var, k: Var) -> Result<(Var, Var)> {
        let gate_params = self.dec.abandon_gate.as_ref().ok_or_else(|| {
            DamError::Config("abandon unit is not enabled in this configuration".into())
        })?;
        let joint = tape.concat(&[n, k])?;
        let w = tape.param(&self.params, gate_params.w);
        let b = tape.param(&self.params, gate_params.b);
        let pre = tape.linear(w, joint, Some(b))?;
        let gate = tape.sigmoid(pre);
        let d = tape.mul(gate, joint)?;
        Ok((d, gate))
    }

    /// Memory gate over `[r, d]`. Returns the fused vector, the gate, and
    /// the (response, word) shares of the total gate mass.
    pub fn memory_fuse(&self, tape: &mut Tape<S>, r: Var, d: Var) -> Result<(Var, Var, (f64, f64))> {
        let gate_params = self.dec.memory_gate.as_ref().ok_or_else(|| {
            DamError::Config("memory unit is not enabled in this configuration".into())
        })?;
        let joint = tape.concat(&[r, d])?;
        let w = tape.param(&self.params, gate_params.w);
        let b = tape.param(&self.params, gate_params.b);
        let pre = tape.linear(w, joint, Some(b))?;
        let gate = tape.sigmoid(pre);
        let o = tape.mul(gate, joint)?;

        let h = self.config.hidden;
        let gv = tape.value(gate);
        let response_mass: f64 = gv[..h].iter().map(|v| v.as_f64()).sum();
        let total: f64 = gv.iter().map(|v| v.as_f64()).sum();
        let ratio_response = response_mass / total;
        Ok((o, gate, (ratio_response, 1.0 - ratio_response)))
    }

    /// Vocabulary distribution from the fused output vector.
    pub fn output_distribution(&self, tape: &mut Tape<S>, o: Var) -> Result<Var> {
        let w = tape.param(&self.params, self.dec.out_w);
        let b = tape.param(&self.params, self.dec.out_b);
        let logits = tape.linear(w, o, Some(b))?;
        Ok(tape.softmax(logits))
    }

    fn decode_step_inner(
        &self,
        tape: &mut Tape<S>,
        x_prev: usize,
        state: &mut DecoderState,
        kb: &KnowledgeBase,
        collect: bool,
    ) -> Result<(Var, Option<StepTrace>)> {
        let units = self.config.units;
        units.validate()?;

        let r = self.response_step(tape, x_prev, state)?;
        let n = self.word_step(tape, x_prev, state)?;

        let mut trace = collect.then(StepTrace::default);

        if units.deliberation {
            let (q_new, gate_q) = self.question_update(tape, state.question, n)?;
            let (k_new, delib_trace) = self.deliberate_traced(tape, kb, q_new, collect)?;
            state.question = q_new;
            state.knowledge = k_new;
            if let Some(t) = trace.as_mut() {
                t.question_gate = Some(values_f64(tape, gate_q));
                t.history_attention = delib_trace.history;
                t.region_attention = delib_trace.regions;
                t.caption_attention = delib_trace.captions;
            }
        }

        let o = if units.memory {
            let d = if units.abandon {
                let (d, gate_a) = self.abandon(tape, n, state.knowledge)?;
                if let Some(t) = trace.as_mut() {
                    t.abandon_gate = Some(values_f64(tape, gate_a));
                }
                d
            } else {
                tape.concat(&[n, state.knowledge])?
            };
            let (o, gate_m, ratios) = self.memory_fuse(tape, r, d)?;
            if let Some(t) = trace.as_mut() {
                t.memory_gate = Some(values_f64(tape, gate_m));
                t.ratio_rsl = Some(ratios.0);
                t.ratio_wdl = Some(ratios.1);
            }
            o
        } else {
            tape.concat(&[r, n])?
        };

        let probs = self.output_distribution(tape, o)?;
        state.step += 1;
        Ok((probs, trace))
    }

    /// One decoding step: both recurrences, the active units, and the
    /// output distribution. Without deliberation the knowledge vector
    /// stays pinned to the encoder's output.
    pub fn decode_step(
        &self,
        tape: &mut Tape<S>,
        x_prev: usize,
        state: &mut DecoderState,
        kb: &KnowledgeBase,
    ) -> Result<(Var, StepTrace)> {
        self.decode_step_inner(tape, x_prev, state, kb, true)
            .map(|(p, t)| (p, t.expect("trace collection requested")))
    }

    /// Initial state for the single-LSTM reference decoder.
    pub fn baseline_init(&self, tape: &mut Tape<S>, kb: &KnowledgeBase) -> Result<LstmState> {
        let h = self.config.hidden;
        if tape.shape(kb.knowledge) != [h] {
            return Err(DamError::shapes("baseline init", &[h], tape.shape(kb.knowledge)));
        }
        Ok(LstmState {
            hidden: kb.knowledge,
            cell: tape.param(&self.params, self.dec.init_response_cell),
        })
    }

    /// Single-LSTM decoding step with its own output head.
    pub fn baseline_step(
        &self,
        tape: &mut Tape<S>,
        x_prev: usize,
        state: &mut LstmState,
    ) -> Result<Var> {
        let table = tape.param(&self.params, self.embed);
        let x = tape.embed_row(table, x_prev)?;
        let (a, next) = lstm_step(tape, &self.params, &self.dec.response_lstm, x, state)?;
        *state = next;
        let w = tape.param(&self.params, self.dec.baseline_w);
        let b = tape.param(&self.params, self.dec.baseline_b);
        let logits = tape.linear(w, a, Some(b))?;
        Ok(tape.softmax(logits))
    }

    /// Greedy argmax decoding from the start token. Ties break toward the
    /// lowest token id. Returns the emitted tokens (start and end token
    /// excluded) and one trace per step including the end-of-sequence
    /// step.
    pub fn greedy_decode(
        &self,
        tape: &mut Tape<S>,
        kb: &KnowledgeBase,
        max_len: usize,
    ) -> Result<(Vec<usize>, Vec<StepTrace>)> {
        if max_len == 0 {
            return Err(DamError::InvalidArgument("max_len must be at least 1".into()));
        }
        let mut state = self.init_state(tape, kb)?;
        let mut tokens = Vec::new();
        let mut traces = Vec::new();
        let mut x_prev = START;
        loop {
            let (probs, mut trace) = self.decode_step(tape, x_prev, &mut state, kb)?;
            let chosen = argmax_lowest(tape.value(probs));
            trace.token = Some(chosen);
            traces.push(trace);
            if chosen == END {
                break;
            }
            tokens.push(chosen);
            if tokens.len() == max_len {
                break;
            }
            x_prev = chosen;
        }
        Ok((tokens, traces))
    }

    /// Per-step log-probabilities of a token sequence under teacher
    /// forcing, end-of-sequence step included. Ids outside the
    /// vocabulary are treated as the unknown token.
    pub fn teacher_forced_log_probs(
        &self,
        tape: &mut Tape<S>,
        kb: &KnowledgeBase,
        tokens: &[usize],
    ) -> Result<Vec<Var>> {
        let vocab = self.vocab.len();
        let mut state = self.init_state(tape, kb)?;
        let mut log_probs = Vec::with_capacity(tokens.len() + 1);
        let mut x_prev = START;
        for &raw in tokens.iter().chain(std::iter::once(&END)) {
            let target = if raw < vocab { raw } else { UNK };
            let (probs, _) = self.decode_step_inner(tape, x_prev, &mut state, kb, false)?;
            let p = tape.pick(probs, target)?;
            log_probs.push(tape.log(p));
            x_prev = target;
        }
        Ok(log_probs)
    }

    /// Teacher-forced log-likelihood of a candidate response, summed over
    /// the tokens plus the end-of-sequence step. Optionally normalized by
    /// the step count.
    pub fn score_response(
        &self,
        tape: &mut Tape<S>,
        kb: &KnowledgeBase,
        tokens: &[usize],
        length_normalize: bool,
    ) -> Result<f64> {
        if tokens.is_empty() {
            return Err(DamError::InvalidArgument(
                "cannot score an empty response".into(),
            ));
        }
        let log_probs = self.teacher_forced_log_probs(tape, kb, tokens)?;
        let total: f64 = log_probs.iter().map(|&lp| tape.scalar(lp).as_f64()).sum();
        Ok(if length_normalize {
            total / log_probs.len() as f64
        } else {
            total
        })
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax_lowest<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::model::{test_model_f64, test_round_input};

    fn make(variant: EncoderVariant, units: UnitConfig) -> (Model<f64>, crate::data::RoundInput) {
        let model = test_model_f64(variant, units, 4);
        let input = test_round_input(&model);
        (model, input)
    }

    #[test]
    fn unit_config_nesting_is_enforced() {
        assert!(UnitConfig::FULL.validate().is_ok());
        let bad = UnitConfig {
            memory: false,
            deliberation: true,
            abandon: false,
        };
        assert!(bad.validate().is_err());
        let bad = UnitConfig {
            memory: true,
            deliberation: false,
            abandon: true,
        };
        assert!(bad.validate().is_err());
        for (name, cfg) in [
            ("2lstm", UnitConfig::TWO_LSTM),
            ("2l-m", UnitConfig::MEMORY),
            ("2l-dm", UnitConfig::DELIB_MEMORY),
            ("2l-dam", UnitConfig::FULL),
        ] {
            assert_eq!(name.parse::<UnitConfig>().unwrap(), cfg);
            assert_eq!(cfg.name(), name);
        }
    }

    #[test]
    fn init_state_seeds_response_hidden_with_knowledge() {
        let (mut model, input) = make(EncoderVariant::Lf, UnitConfig::FULL);
        // zero fusion output → zero knowledge vector
        let crate::encoder::VariantParams::Lf { fuse_w, fuse_b } = model.enc.variant else {
            panic!("lf fixture");
        };
        model.params.get_mut(fuse_w).data_mut().fill(0.0);
        model.params.get_mut(fuse_b).data_mut().fill(0.0);

        let mut tape = Tape::new();
        let kb = model.encode(&mut tape, &input).unwrap();
        let state = model.init_state(&mut tape, &kb).unwrap();
        assert!(tape.value(state.response.hidden).iter().all(|&v| v == 0.0));
        assert_eq!(state.step, 0);

        let again = model.init_state(&mut tape, &kb).unwrap();
        assert_eq!(tape.value(state.response.hidden), tape.value(again.response.hidden));
        assert_eq!(tape.value(state.word.hidden), tape.value(again.word.hidden));
    }

    #[test]
    fn word_lstm_width_covers_embedding_and_knowledge() {
        let (model, _) = make(EncoderVariant::Mn, UnitConfig::FULL);
        assert_eq!(
            model.dec.word_lstm.input_dim,
            model.config.embed_dim + model.config.hidden
        );
    }

    #[test]
    fn question_update_half_gate_when_weights_zero() {
        let (mut model, input) = make(EncoderVariant::Lf, UnitConfig::FULL);
        let gate = model.dec.question_gate.unwrap();
        model.params.get_mut(gate.w).data_mut().fill(0.0);
        model.params.get_mut(gate.b).data_mut().fill(0.0);

        let mut tape = Tape::new();
        let kb = model.encode(&mut tape, &input).unwrap();
        let mut state = model.init_state(&mut tape, &kb).unwrap();
        let n = model.word_step(&mut tape, START, &mut state).unwrap();
        let (q_new, gate_var) = model.question_update(&mut tape, state.question, n).unwrap();
        assert!(tape.value(gate_var).iter().all(|&g| g == 0.5));

        // q' = W1(0.5·[q, n])
        let joint = tape.concat(&[state.question, n]).unwrap();
        let half = tape.scale(joint, 0.5);
        let pw = tape.param(&model.params, model.dec.question_proj.unwrap());
        let expected = tape.linear(pw, half, None).unwrap();
        for (a, b) in tape.value(q_new).iter().zip(tape.value(expected)) {
            assert!((a - b).abs() < 1e-12);
        }

        // fully zeroed projection → zero question
        model
            .params
            .get_mut(model.dec.question_proj.unwrap())
            .data_mut()
            .fill(0.0);
        let mut tape = Tape::new();
        let kb = model.encode(&mut tape, &input).unwrap();
        let mut state = model.init_state(&mut tape, &kb).unwrap();
        let n = model.word_step(&mut tape, START, &mut state).unwrap();
        let (q_new, _) = model.question_update(&mut tape, state.question, n).unwrap();
        assert!(tape.value(q_new).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deliberate_zero_weights_zero_knowledge_for_every_variant() {
        for variant in EncoderVariant::ALL {
            let (mut model, input) = make(variant, UnitConfig::FULL);
            match model.dec.delib.unwrap() {
                DelibParams::Lf { fuse_w, fuse_b } => {
                    model.params.get_mut(fuse_w).data_mut().fill(0.0);
                    model.params.get_mut(fuse_b).data_mut().fill(0.0);
                }
                DelibParams::Mn { out_w, out_b, .. } => {
                    model.params.get_mut(out_w).data_mut().fill(0.0);
                    model.params.get_mut(out_b).data_mut().fill(0.0);
                }
                DelibParams::Dualvd { out_w, out_b, .. } => {
                    model.params.get_mut(out_w).data_mut().fill(0.0);
                    model.params.get_mut(out_b).data_mut().fill(0.0);
                }
            }
            let mut tape = Tape::new();
            let kb = model.encode(&mut tape, &input).unwrap();
            let mut state = model.init_state(&mut tape, &kb).unwrap();
            let n = model.word_step(&mut tape, START, &mut state).unwrap();
            let (q_new, _) = model.question_update(&mut tape, state.question, n).unwrap();
            let k_new = model.deliberate(&mut tape, &kb, q_new).unwrap();
            assert!(
                tape.value(k_new).iter().all(|&v| v == 0.0),
                "{variant} should produce a zero knowledge vector"
            );
        }
    }

    #[test]
    fn deliberate_dualvd_collapses_on_singleton_lists() {
        let (model, mut input) = make(EncoderVariant::Dualvd, UnitConfig::FULL);
        input.history.truncate(1);
        input.regions.truncate(1);
        input.captions.truncate(1);
        let mut tape = Tape::new();
        let kb = model.encode(&mut tape, &input).unwrap();
        let mut state = model.init_state(&mut tape, &kb).unwrap();
        let n = model.word_step(&mut tape, START, &mut state).unwrap();
        let (q_new, _) = model.question_update(&mut tape, state.question, n).unwrap();
        let (_, trace) = model.deliberate_traced(&mut tape, &kb, q_new, true).unwrap();
        assert_eq!(trace.history.unwrap(), vec![1.0]);
        assert_eq!(trace.regions.unwrap(), vec![1.0]);
        assert_eq!(trace.captions.unwrap(), vec![1.0]);
    }

    #[test]
    fn deliberate_rejects_variant_mismatch() {
        let (model, input) = make(EncoderVariant::Lf, UnitConfig::FULL);
        let mut tape = Tape::new();
        let mut kb = model.encode(&mut tape, &input).unwrap();
        kb.variant = EncoderVariant::Mn;
        let q = kb.question;
        let err = model.deliberate(&mut tape, &kb, q).unwrap_err();
        assert!(err.to_string().contains("encoder"));
    }

    #[test]
    fn abandon_half_gate_and_magnitude_bound() {
        let (mut model, input) = make(EncoderVariant::Lf, UnitConfig::FULL);
        let gate = model.dec.abandon_gate.unwrap();
        model.params.get_mut(gate.w).data_mut().fill(0.0);
        model.params.get_mut(gate.b).data_mut().fill(0.0);

        let mut tape = Tape::new();
        let kb = model.encode(&mut tape, &input).unwrap();
        let mut state = model.init_state(&mut tape, &kb).unwrap();
        let n = model.word_step(&mut tape, START, &mut state).unwrap();
        let (d, _) = model.abandon(&mut tape, n, state.knowledge).unwrap();
        let joint = tape.concat(&[n, state.knowledge]).unwrap();
        for (dv, jv) in tape.value(d).iter().zip(tape.value(joint)) {
            assert!((dv - 0.5 * jv).abs() < 1e-12);
            assert!(dv.abs() <= jv.abs());
        }
    }

    #[test]
    fn memory_fuse_uniform_gate_ratio() {
        let (mut model, input) = make(EncoderVariant::Lf, UnitConfig::FULL);
        let gate = model.dec.memory_gate.unwrap();
        model.params.get_mut(gate.w).data_mut().fill(0.0);
        model.params.get_mut(gate.b).data_mut().fill(0.0);

        let mut tape = Tape::new();
        let kb = model.encode(&mut tape, &input).unwrap();
        let mut state = model.init_state(&mut tape, &kb).unwrap();
        let r = model.response_step(&mut tape, START, &mut state).unwrap();
        let n = model.word_step(&mut tape, START, &mut state).unwrap();
        let d = tape.concat(&[n, state.knowledge]).unwrap();
        let (o, _, (ratio_r, ratio_w)) = model.memory_fuse(&mut tape, r, d).unwrap();

        // uniform gate: o = 0.5·[r, d], response share = h / 3h
        let joint = tape.concat(&[r, d]).unwrap();
        for (ov, jv) in tape.value(o).iter().zip(tape.value(joint)) {
            assert!((ov - 0.5 * jv).abs() < 1e-12);
        }
        assert!((ratio_r - 1.0 / 3.0).abs() < 1e-12);
        assert!((ratio_r + ratio_w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn output_distribution_uniform_and_shift_invariant() {
        let (mut model, input) = make(EncoderVariant::Lf, UnitConfig::FULL);
        model.zero_params();
        let vocab = model.vocab.len();
        let mut tape = Tape::new();
        let kb = model.encode(&mut tape, &input).unwrap();
        let mut state = model.init_state(&mut tape, &kb).unwrap();
        let (probs, _) = model.decode_step(&mut tape, START, &mut state, &kb).unwrap();
        for &p in tape.value(probs) {
            assert!((p - 1.0 / vocab as f64).abs() < 1e-12);
        }
        let sum: f64 = tape.value(probs).iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn output_argmax_invariant_under_constant_bias_shift() {
        let (mut model, input) = make(EncoderVariant::Mn, UnitConfig::FULL);
        let run = |model: &Model<f64>| {
            let mut tape = Tape::new();
            let kb = model.encode(&mut tape, &input).unwrap();
            let mut state = model.init_state(&mut tape, &kb).unwrap();
            let (probs, _) = model.decode_step(&mut tape, START, &mut state, &kb).unwrap();
            argmax_lowest(tape.value(probs))
        };
        let before = run(&model);
        for v in model.params.get_mut(model.dec.out_b).data_mut() {
            *v += 3.7;
        }
        assert_eq!(before, run(&model));
    }

    #[test]
    fn two_lstm_wiring_keeps_knowledge_fixed_and_concatenates_streams() {
        let (model, input) = make(EncoderVariant::Lf, UnitConfig::TWO_LSTM);
        let mut tape = Tape::new();
        let kb = model.encode(&mut tape, &input).unwrap();
        let mut state = model.init_state(&mut tape, &kb).unwrap();
        let k0 = tape.value(kb.knowledge).to_vec();
        for step in 0..3 {
            let x = if step == 0 { START } else { 5 };
            let (probs, trace) = model.decode_step(&mut tape, x, &mut state, &kb).unwrap();
            assert_eq!(tape.value(state.knowledge), &k0[..]);
            assert!(trace.ratio_rsl.is_none());
            assert!(trace.memory_gate.is_none());
            let sum: f64 = tape.value(probs).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }

        // o = [r, n] exactly: recompute the streams independently
        let mut tape = Tape::new();
        let kb = model.encode(&mut tape, &input).unwrap();
        let mut s1 = model.init_state(&mut tape, &kb).unwrap();
        let (probs, _) = model.decode_step(&mut tape, START, &mut s1, &kb).unwrap();

        let mut s2 = model.init_state(&mut tape, &kb).unwrap();
        let r = model.response_step(&mut tape, START, &mut s2).unwrap();
        let n = model.word_step(&mut tape, START, &mut s2).unwrap();
        let o = tape.concat(&[r, n]).unwrap();
        let expected = model.output_distribution(&mut tape, o).unwrap();
        assert_eq!(tape.value(probs), tape.value(expected));
    }

    #[test]
    fn memory_only_wiring_uses_encoder_knowledge_in_word_embedding() {
        let (model, input) = make(EncoderVariant::Mn, UnitConfig::MEMORY);
        let mut tape = Tape::new();
        let kb = model.encode(&mut tape, &input).unwrap();
        let mut state = model.init_state(&mut tape, &kb).unwrap();
        let (_, trace) = model.decode_step(&mut tape, START, &mut state, &kb).unwrap();
        assert_eq!(tape.value(state.knowledge), tape.value(kb.knowledge));
        let (r1, r2) = (trace.ratio_rsl.unwrap(), trace.ratio_wdl.unwrap());
        assert!((r1 + r2 - 1.0).abs() < 1e-6);
        assert!(trace.question_gate.is_none());
        assert!(trace.abandon_gate.is_none());
    }

    #[test]
    fn gate_bounds_hold_on_random_models() {
        let (model, input) = make(EncoderVariant::Dualvd, UnitConfig::FULL);
        let mut tape = Tape::new();
        let kb = model.encode(&mut tape, &input).unwrap();
        let mut state = model.init_state(&mut tape, &kb).unwrap();
        let mut x = START;
        for _ in 0..4 {
            let n_before = model.word_step(&mut tape, x, &mut state).unwrap();
            // recompute d and o with explicit bounds
            let (q_new, gate_q) = model
                .question_update(&mut tape, state.question, n_before)
                .unwrap();
            let k_new = model.deliberate(&mut tape, &kb, q_new).unwrap();
            let (d, gate_a) = model.abandon(&mut tape, n_before, k_new).unwrap();
            let joint_nk = tape.concat(&[n_before, k_new]).unwrap();
            for (dv, jv) in tape.value(d).iter().zip(tape.value(joint_nk)) {
                assert!(dv.abs() <= jv.abs());
            }
            for &g in tape.value(gate_a).iter().chain(tape.value(gate_q)) {
                assert!(g > 0.0 && g < 1.0);
            }
            state.question = q_new;
            state.knowledge = k_new;
            let r = model.response_step(&mut tape, x, &mut state).unwrap();
            let (o, gate_m, (rr, rw)) = model.memory_fuse(&mut tape, r, d).unwrap();
            let joint_rd = tape.concat(&[r, d]).unwrap();
            for (ov, jv) in tape.value(o).iter().zip(tape.value(joint_rd)) {
                assert!(ov.abs() <= jv.abs());
            }
            for &g in tape.value(gate_m) {
                assert!(g > 0.0 && g < 1.0);
            }
            assert!((rr + rw - 1.0).abs() < 1e-6);
            x = 4 + (state.step % 3);
        }
    }

    #[test]
    fn baseline_uniform_distribution_with_zero_params() {
        let (mut model, input) = make(EncoderVariant::Lf, UnitConfig::TWO_LSTM);
        model.zero_params();
        let vocab = model.vocab.len();
        let mut tape = Tape::new();
        let kb = model.encode(&mut tape, &input).unwrap();
        let mut state = model.baseline_init(&mut tape, &kb).unwrap();
        let p = model.baseline_step(&mut tape, START, &mut state).unwrap();
        for &v in tape.value(p) {
            assert!((v - 1.0 / vocab as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn baseline_is_deterministic() {
        let (model, input) = make(EncoderVariant::Lf, UnitConfig::TWO_LSTM);
        let run = || {
            let mut tape = Tape::new();
            let kb = model.encode(&mut tape, &input).unwrap();
            let mut state = model.baseline_init(&mut tape, &kb).unwrap();
            let p = model.baseline_step(&mut tape, START, &mut state).unwrap();
            tape.value(p).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn greedy_stops_on_forced_end_token() {
        let (mut model, input) = make(EncoderVariant::Lf, UnitConfig::FULL);
        model.zero_params();
        // bias the output head hard toward end-of-sequence
        model.params.get_mut(model.dec.out_b).data_mut()[END] = 10.0;
        let mut tape = Tape::new();
        let kb = model.encode(&mut tape, &input).unwrap();
        let (tokens, traces) = model.greedy_decode(&mut tape, &kb, 20).unwrap();
        assert!(tokens.is_empty());
        assert_eq!(traces.len(), 1);
        assert_eq!(traces[0].token, Some(END));
    }

    #[test]
    fn greedy_respects_max_len() {
        let (mut model, input) = make(EncoderVariant::Lf, UnitConfig::FULL);
        model.zero_params();
        // bias toward a non-terminal token → response hits the cap
        model.params.get_mut(model.dec.out_b).data_mut()[5] = 10.0;
        let mut tape = Tape::new();
        let kb = model.encode(&mut tape, &input).unwrap();
        let (tokens, traces) = model.greedy_decode(&mut tape, &kb, 7).unwrap();
        assert_eq!(tokens.len(), 7);
        assert_eq!(traces.len(), 7);
        assert!(tokens.iter().all(|&t| t == 5));
    }

    #[test]
    fn greedy_is_deterministic() {
        let (model, input) = make(EncoderVariant::Dualvd, UnitConfig::FULL);
        let run = || {
            let mut tape = Tape::inference();
            let kb = model.encode(&mut tape, &input).unwrap();
            model.greedy_decode(&mut tape, &kb, 20).unwrap().0
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn uniform_model_scores_are_length_scaled_log_vocab() {
        let (mut model, input) = make(EncoderVariant::Lf, UnitConfig::FULL);
        model.zero_params();
        let vocab = model.vocab.len() as f64;
        let mut tape = Tape::inference();
        let kb = model.encode(&mut tape, &input).unwrap();
        let two = model
            .score_response(&mut tape, &kb, &[5, 6], false)
            .unwrap();
        assert!((two - (-3.0 * vocab.ln())).abs() < 1e-9);

        let normalized = model
            .score_response(&mut tape, &kb, &[5, 6], true)
            .unwrap();
        assert!((normalized - (-vocab.ln())).abs() < 1e-9);
    }

    #[test]
    fn extending_a_response_never_raises_its_score() {
        let (model, input) = make(EncoderVariant::Mn, UnitConfig::FULL);
        let mut tape = Tape::inference();
        let kb = model.encode(&mut tape, &input).unwrap();
        let base = model.score_response(&mut tape, &kb, &[4, 5], false).unwrap();
        for extra in 4..10 {
            let extended = model
                .score_response(&mut tape, &kb, &[4, 5, extra], false)
                .unwrap();
            assert!(extended <= base + 1e-12);
        }
        assert!(base <= 0.0);
    }

    #[test]
    fn out_of_vocabulary_ids_map_to_unknown_when_scoring() {
        let (model, input) = make(EncoderVariant::Lf, UnitConfig::FULL);
        let mut tape = Tape::inference();
        let kb = model.encode(&mut tape, &input).unwrap();
        let huge = model.vocab.len() + 50;
        let with_unk = model.score_response(&mut tape, &kb, &[UNK], false).unwrap();
        let with_oov = model.score_response(&mut tape, &kb, &[huge], false).unwrap();
        assert_eq!(with_unk.to_bits(), with_oov.to_bits());
    }

    #[test]
    fn full_pipeline_gradients_match_finite_differences() {
        // One variant here keeps the unit suite quick; the acceptance
        // suite sweeps all unit configurations × encoder variants.
        let (mut model, input) = make(EncoderVariant::Dualvd, UnitConfig::FULL);
        // inflate parameters: the deepest attention-query gradients sit
        // near the finite-difference noise floor at default init
        for id in model.params().ids().collect::<Vec<_>>() {
            for v in model.params_mut().get_mut(id).data_mut() {
                *v *= 2.0;
            }
        }
        let report = finite_diff_check(&mut model, 1e-5, |m, tape| {
            let kb = m.encode(tape, &input)?;
            let lps = m.teacher_forced_log_probs(tape, &kb, &[5, 6])?;
            let total = tape.add_n(&lps)?;
            Ok(tape.scale(total, -1.0 / lps.len() as f64))
        })
        .unwrap();
        assert!(
            report.max_rel_error() < 1e-4,
            "worst {:?}",
            report.worst().map(|e| (&e.name, e.rel_error))
        );
    }
}
