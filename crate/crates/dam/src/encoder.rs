//! Context encoders producing the knowledge base the decoder reads from.
//!
//! Three simplified variants with different structural assumptions:
//! `lf` fuses question, image, and history in one affine map; `mn`
//! attends over dialogue history; `dualvd` reads the image through both
//! visual regions and semantic captions, fused by gates.

use serde::{Deserialize, Serialize};

use crate::data::RoundInput;
use crate::error::{DamError, Result};
use crate::lstm::{encode_sequence, uniform_matrix, zero_vector, LstmParams};
use crate::model::{Model, ModelConfig};
use crate::rng::DetRng;
use crate::tensor::{ParamId, ParamSet, Scalar, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    Lf,
    Mn,
    Dualvd,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 3] = [EncoderVariant::Lf, EncoderVariant::Mn, EncoderVariant::Dualvd];

    pub fn name(self) -> &'static str {
        match self {
            EncoderVariant::Lf => "lf",
            EncoderVariant::Mn => "mn",
            EncoderVariant::Dualvd => "dualvd",
        }
    }
}

impl std::str::FromStr for EncoderVariant {
    type Err = DamError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lf" => Ok(EncoderVariant::Lf),
            "mn" => Ok(EncoderVariant::Mn),
            "dualvd" => Ok(EncoderVariant::Dualvd),
            other => Err(DamError::Config(format!(
                "unknown encoder {other:?}, expected one of lf, mn, dualvd"
            ))),
        }
    }
}

impl std::fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// ── Shared primitives ────────────────────────────────────────────────

/// Score weights for one attention site: `score_i = w·(query ∘ key_i)`.
/// A scalar score bias would shift every softmax input equally and could
/// never influence the weights, so none is kept.
#[derive(Debug, Clone, Copy)]
pub struct AttnParams {
    pub w: ParamId,
}

impl AttnParams {
    pub fn register<S: Scalar>(
        params: &mut ParamSet<S>,
        prefix: &str,
        hidden: usize,
        rng: &mut DetRng,
    ) -> Self {
        let scale = 1.0 / (hidden as f64).sqrt();
        let w = uniform_matrix(params, format!("{prefix}.w"), 1, hidden, scale, rng);
        AttnParams { w }
    }
}

/// Softmax weights over the keys plus their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct AttentionResult {
    pub weights: Var,
    pub summary: Var,
}

/// Attention with element-wise-product scoring. Keys double as values.
pub fn attend<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    attn: &AttnParams,
    query: Var,
    keys: &[Var],
) -> Result<AttentionResult> {
    if keys.is_empty() {
        return Err(DamError::InvalidArgument(
            "attention over an empty key list".into(),
        ));
    }
    let w = tape.param(params, attn.w);
    let mut scores = Vec::with_capacity(keys.len());
    for &key in keys {
        let qk = tape.mul(query, key)?;
        scores.push(tape.linear(w, qk, None)?);
    }
    let score_vec = tape.concat(&scores)?;
    let weights = tape.softmax(score_vec);
    let mut terms = Vec::with_capacity(keys.len());
    for (i, &key) in keys.iter().enumerate() {
        let wi = tape.pick(weights, i)?;
        terms.push(tape.scale_by(wi, key)?);
    }
    let summary = tape.add_n(&terms)?;
    Ok(AttentionResult { weights, summary })
}

/// Gate-fusion of two vectors: `gate = σ(W[a,b] + c)`,
/// `out = P(gate ∘ [a,b])` projected back to one hidden width.
#[derive(Debug, Clone, Copy)]
pub struct GateFusionParams {
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub proj_w: ParamId,
}

impl GateFusionParams {
    pub fn register<S: Scalar>(
        params: &mut ParamSet<S>,
        prefix: &str,
        hidden: usize,
        rng: &mut DetRng,
    ) -> Self {
        let two = 2 * hidden;
        let scale = 1.0 / (two as f64).sqrt();
        let gate_w = uniform_matrix(params, format!("{prefix}.gate_w"), two, two, scale, rng);
        let gate_b = zero_vector(params, format!("{prefix}.gate_b"), two);
        let proj_w = uniform_matrix(params, format!("{prefix}.proj_w"), hidden, two, scale, rng);
        GateFusionParams {
            gate_w,
            gate_b,
            proj_w,
        }
    }
}

pub fn gate_fuse<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    fusion: &GateFusionParams,
    a: Var,
    b: Var,
) -> Result<Var> {
    let joint = tape.concat(&[a, b])?;
    let gw = tape.param(params, fusion.gate_w);
    let gb = tape.param(params, fusion.gate_b);
    let pre = tape.linear(gw, joint, Some(gb))?;
    let gate = tape.sigmoid(pre);
    let gated = tape.mul(gate, joint)?;
    let pw = tape.param(params, fusion.proj_w);
    tape.linear(pw, gated, None)
}

// ── Encoder parameters ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub enum VariantParams {
    Lf {
        fuse_w: ParamId,
        fuse_b: ParamId,
    },
    Mn {
        query_w: ParamId,
        query_b: ParamId,
        attn: AttnParams,
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

#[derive(Debug, Clone, Copy)]
pub struct EncoderParams {
    pub question_lstm: LstmParams,
    pub utterance_lstm: LstmParams,
    pub region_w: ParamId,
    pub region_b: ParamId,
    pub variant: VariantParams,
}

impl EncoderParams {
    pub fn register<S: Scalar>(
        params: &mut ParamSet<S>,
        prefix: &str,
        config: &ModelConfig,
        rng: &mut DetRng,
    ) -> Self {
        let h = config.hidden;
        let scale = 1.0 / (h as f64).sqrt();
        let question_lstm =
            LstmParams::register(params, &format!("{prefix}.q_lstm"), config.embed_dim, h, rng);
        let utterance_lstm =
            LstmParams::register(params, &format!("{prefix}.h_lstm"), config.embed_dim, h, rng);
        let region_w = uniform_matrix(
            params,
            format!("{prefix}.region.w"),
            h,
            config.region_dim,
            1.0 / (config.region_dim as f64).sqrt(),
            rng,
        );
        let region_b = zero_vector(params, format!("{prefix}.region.b"), h);

        let variant = match config.encoder {
            EncoderVariant::Lf => VariantParams::Lf {
                fuse_w: uniform_matrix(params, format!("{prefix}.fuse.w"), h, 3 * h, scale, rng),
                fuse_b: zero_vector(params, format!("{prefix}.fuse.b"), h),
            },
            EncoderVariant::Mn => VariantParams::Mn {
                query_w: uniform_matrix(params, format!("{prefix}.query.w"), h, 2 * h, scale, rng),
                query_b: zero_vector(params, format!("{prefix}.query.b"), h),
                attn: AttnParams::register(params, &format!("{prefix}.attn"), h, rng),
            },
            EncoderVariant::Dualvd => VariantParams::Dualvd {
                attn_history: AttnParams::register(params, &format!("{prefix}.attn_hist"), h, rng),
                fuse_query: GateFusionParams::register(params, &format!("{prefix}.fuse_query"), h, rng),
                attn_regions: AttnParams::register(params, &format!("{prefix}.attn_vis"), h, rng),
                attn_captions: AttnParams::register(params, &format!("{prefix}.attn_sem"), h, rng),
                fuse_image: GateFusionParams::register(params, &format!("{prefix}.fuse_image"), h, rng),
                out_w: uniform_matrix(params, format!("{prefix}.out.w"), h, 3 * h, scale, rng),
                out_b: zero_vector(params, format!("{prefix}.out.b"), h),
            },
        };

        EncoderParams {
            question_lstm,
            utterance_lstm,
            region_w,
            region_b,
            variant,
        }
    }
}

// ── Knowledge base ───────────────────────────────────────────────────

/// Encoder output: the fused knowledge vector plus the addressable
/// internals the decoder's deliberation step re-queries.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    pub knowledge: Var,
    pub question: Var,
    /// Per-utterance embeddings, caption first.
    pub history: Vec<Var>,
    pub regions: Vec<Var>,
    /// Semantic caption embeddings; populated for `dualvd`.
    pub captions: Vec<Var>,
    pub variant: EncoderVariant,
}

impl<S: Scalar> Model<S> {
    /// Encodes a round's context into a [`KnowledgeBase`] on the tape.
    pub fn encode(&self, tape: &mut Tape<S>, input: &RoundInput) -> Result<KnowledgeBase> {
        if input.question.is_empty() {
            return Err(DamError::InvalidArgument("empty question".into()));
        }
        if input.history.is_empty() {
            return Err(DamError::InvalidArgument("empty dialogue history".into()));
        }
        if input.regions.is_empty() {
            return Err(DamError::InvalidArgument("empty region list".into()));
        }
        let enc = &self.enc;
        let params = &self.params;

        let (question, _) = encode_sequence(
            tape,
            params,
            &enc.question_lstm,
            self.encoder_embedding(),
            &input.question,
        )?;

        let mut history = Vec::with_capacity(input.history.len());
        for utt in &input.history {
            let (h, _) = encode_sequence(
                tape,
                params,
                &enc.utterance_lstm,
                self.encoder_embedding(),
                utt,
            )?;
            history.push(h);
        }

        let rw = tape.param(params, enc.region_w);
        let rb = tape.param(params, enc.region_b);
        let mut regions = Vec::with_capacity(input.regions.len());
        for raw in &input.regions {
            if raw.len() != self.config.region_dim {
                return Err(DamError::shapes(
                    "region features",
                    &[self.config.region_dim],
                    &[raw.len()],
                ));
            }
            let feats: Vec<S> = raw.iter().map(|&v| S::from_f64_lossy(v)).collect();
            let fv = tape.constant(&feats);
            let projected = tape.linear(rw, fv, Some(rb))?;
            regions.push(tape.tanh(projected));
        }

        let mut captions = Vec::new();
        if matches!(self.config.encoder, EncoderVariant::Dualvd) {
            if input.captions.is_empty() {
                return Err(DamError::InvalidArgument(
                    "dualvd encoder requires at least one caption".into(),
                ));
            }
            for cap in &input.captions {
                let (c, _) = encode_sequence(
                    tape,
                    params,
                    &enc.utterance_lstm,
                    self.encoder_embedding(),
                    cap,
                )?;
                captions.push(c);
            }
        }

        let knowledge = match &enc.variant {
            VariantParams::Lf { fuse_w, fuse_b } => {
                let mean_regions = tape.mean_n(&regions)?;
                let mean_history = tape.mean_n(&history)?;
                let joint = tape.concat(&[question, mean_regions, mean_history])?;
                let w = tape.param(params, *fuse_w);
                let b = tape.param(params, *fuse_b);
                let fused = tape.linear(w, joint, Some(b))?;
                tape.tanh(fused)
            }
            VariantParams::Mn {
                query_w,
                query_b,
                attn,
            } => {
                let mean_regions = tape.mean_n(&regions)?;
                let joint = tape.concat(&[question, mean_regions])?;
                let w = tape.param(params, *query_w);
                let b = tape.param(params, *query_b);
                let query = tape.linear(w, joint, Some(b))?;
                let attended = attend(tape, params, attn, query, &history)?;
                tape.add(query, attended.summary)?
            }
            VariantParams::Dualvd {
                attn_history,
                fuse_query,
                attn_regions,
                attn_captions,
                fuse_image,
                out_w,
                out_b,
            } => {
                let hist = attend(tape, params, attn_history, question, &history)?;
                let query = gate_fuse(tape, params, fuse_query, question, hist.summary)?;
                let visual = attend(tape, params, attn_regions, query, &regions)?;
                let semantic = attend(tape, params, attn_captions, query, &captions)?;
                let image = gate_fuse(tape, params, fuse_image, visual.summary, semantic.summary)?;
                let joint = tape.concat(&[question, hist.summary, image])?;
                let w = tape.param(params, *out_w);
                let b = tape.param(params, *out_b);
                let fused = tape.linear(w, joint, Some(b))?;
                tape.tanh(fused)
            }
        };

        Ok(KnowledgeBase {
            knowledge,
            question,
            history,
            regions,
            captions,
            variant: self.config.encoder,
        })
    }
}
