//! Central-difference verification of tape gradients, in double
//! precision.
//!
//! The caller supplies a graph builder that produces a scalar loss from a
//! parameter-owning subject (a bare [`ParamSet`] or a whole model). The
//! checker runs one backward pass for the analytic gradients, then
//! perturbs every parameter entry by `±step` and re-evaluates the loss
//! forward-only. Per tensor it reports
//!
//! ```text
//! rel_error = max_i |analytic_i - numeric_i|
//!           / max(max_i |analytic_i|, max_i |numeric_i|, 1e-8)
//! ```
//!
//! i.e. the largest entry disagreement relative to the gradient's scale.
//! A parameter with no path to the loss yields exactly zero on both
//! sides, so dead tensors report zero error rather than noise.

use crate::error::{DamError, Result};
use crate::model::HasParams;
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub rel_error: f64,
    pub max_abs_diff: f64,
    pub grad_scale: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn all_below(&self, tolerance: f64) -> bool {
        self.entries.iter().all(|e| e.rel_error < tolerance)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<40} rel_error {:>12.3e}  |diff| {:>12.3e}  scale {:>12.3e}",
                e.name, e.rel_error, e.max_abs_diff, e.grad_scale
            )?;
        }
        Ok(())
    }
}

/// Checks the analytic gradient of `graph`'s scalar loss against central
/// finite differences for every parameter tensor of `subject`.
pub fn finite_diff_check<C, F>(subject: &mut C, step: f64, mut graph: F) -> Result<GradCheckReport>
where
    C: HasParams<f64>,
    F: FnMut(&C, &mut Tape<f64>) -> Result<Var>,
{
    fn eval<C, F>(subject: &C, graph: &mut F) -> Result<f64>
    where
        F: FnMut(&C, &mut Tape<f64>) -> Result<Var>,
    {
        let mut tape = Tape::inference();
        let loss = graph(subject, &mut tape)?;
        let v = tape.scalar(loss);
        if !v.is_finite() {
            return Err(DamError::NonFinite("loss during finite differences".into()));
        }
        Ok(v)
    }

    let mut tape = Tape::new();
    let loss = graph(subject, &mut tape)?;
    if !tape.scalar(loss).is_finite() {
        return Err(DamError::NonFinite("loss during gradient check".into()));
    }
    tape.backward(loss)?;

    let ids: Vec<_> = subject.param_set().ids().collect();
    let mut entries = Vec::with_capacity(ids.len());
    for id in ids {
        let name = subject.param_set().name(id).to_string();
        let numel = subject.param_set().get(id).numel();
        let analytic: Vec<f64> = match tape.param_grad(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; numel],
        };

        let mut max_diff = 0.0f64;
        let mut scale = 0.0f64;
        for e in 0..numel {
            let orig = subject.param_set().get(id).data()[e];
            subject.param_set_mut().get_mut(id).data_mut()[e] = orig + step;
            let f_plus = eval(subject, &mut graph)?;
            subject.param_set_mut().get_mut(id).data_mut()[e] = orig - step;
            let f_minus = eval(subject, &mut graph)?;
            subject.param_set_mut().get_mut(id).data_mut()[e] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            max_diff = max_diff.max((analytic[e] - numeric).abs());
            scale = scale.max(analytic[e].abs()).max(numeric.abs());
        }
        let denom = scale.max(1e-8);
        entries.push(GradCheckEntry {
            name,
            rel_error: max_diff / denom,
            max_abs_diff: max_diff,
            grad_scale: scale,
        });
    }
    Ok(GradCheckReport { entries })
}

// ── Full-pipeline suite ──────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub label: String,
    pub report: GradCheckReport,
}

/// Context for one gradient check: a probe input pair and targets. Key
/// diversity matters here — attention-query parameters act only through
/// the softmax weights, so near-identical keys would leave them with
/// gradients at rounding-noise scale and the check could not separate
/// signal from noise.
struct Probe {
    inputs: Vec<crate::data::RoundInput>,
    targets: Vec<Vec<usize>>,
}

fn build_probe(vocab: &crate::data::Vocabulary, seed: u64, steps: usize) -> Probe {
    use crate::data::{RoundInput, REGION_DIM};
    let mut rng = crate::rng::DetRng::seed(seed ^ 0xd1b5_4a32_d192_ed03);
    let word_ids: Vec<usize> = (4..vocab.len()).collect();
    fn utterance(rng: &mut crate::rng::DetRng, words: &[usize], len: usize) -> Vec<usize> {
        (0..len).map(|_| *rng.choice(words)).collect()
    }
    fn region(
        rng: &mut crate::rng::DetRng,
        shape: usize,
        color: usize,
        row: f64,
        col: f64,
    ) -> Vec<f64> {
        let mut v = vec![0.0; REGION_DIM];
        v[shape % 3] = 1.0;
        v[3 + color % 4] = 1.0;
        v[7] = row;
        v[8] = col;
        // small perturbation keeps regions linearly independent
        v[(shape + color) % REGION_DIM] += rng.uniform(0.05, 0.25);
        v
    }
    let mut input = |n_regions: usize, n_captions: usize, n_history: usize| -> RoundInput {
        RoundInput {
            question: utterance(&mut rng, &word_ids, 5),
            history: (0..n_history)
                .map(|i| utterance(&mut rng, &word_ids, 3 + i % 3))
                .collect(),
            regions: (0..n_regions)
                .map(|i| region(&mut rng, i, i + 1, (i % 3) as f64 / 2.0, (i % 2) as f64))
                .collect(),
            captions: (0..n_captions)
                .map(|i| utterance(&mut rng, &word_ids, 3 + i % 2))
                .collect(),
        }
    };
    let inputs = vec![input(4, 3, 3), input(3, 2, 4)];
    let targets = inputs
        .iter()
        .map(|_| {
            (0..steps.saturating_sub(1))
                .map(|_| *rng.choice(&word_ids))
                .collect()
        })
        .collect();
    Probe { inputs, targets }
}

fn probe_vocab() -> crate::data::Vocabulary {
    let mut tokens: Vec<String> = ["<pad>", "<s>", "</s>", "<unk>"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for t in [
        "a", "blue", "circle", "red", "square", "triangle", "yellow", "green", "is", "there",
        "what", "color", "how", "many", "one", "two", "three", "yes", "no", "?",
    ] {
        tokens.push(t.to_string());
    }
    crate::data::Vocabulary::from_tokens(tokens, 0)
}

/// Runs the finite-difference check through encoder and decoder for
/// every unit configuration × encoder variant, plus the single-stream
/// reference decoder. The loss is a teacher-forced mean over exactly
/// `steps` decode steps, summed over two diverse probe inputs.
pub fn decoder_suite(hidden: usize, seed: u64, steps: usize) -> Result<Vec<SuiteEntry>> {
    use crate::data::{END, START};
    use crate::decoder::UnitConfig;
    use crate::encoder::EncoderVariant;
    use crate::model::{Model, ModelConfig};
    use crate::tensor::Tape;

    if hidden == 0 || steps == 0 {
        return Err(DamError::InvalidArgument(
            "gradient suite needs hidden >= 1 and steps >= 1".into(),
        ));
    }
    let vocab = probe_vocab();
    let probe = build_probe(&vocab, seed, steps);
    let model_config = |variant, units| ModelConfig {
        hidden,
        embed_dim: 6,
        region_dim: crate::data::REGION_DIM,
        encoder: variant,
        units,
        share_embedding: true,
    };
    let probe_loss = |m: &Model<f64>, tape: &mut Tape<f64>, probe: &Probe| -> Result<Var> {
        let mut per_input = Vec::with_capacity(probe.inputs.len());
        for (input, target) in probe.inputs.iter().zip(&probe.targets) {
            let kb = m.encode(tape, input)?;
            let lps = m.teacher_forced_log_probs(tape, &kb, target)?;
            let total = tape.add_n(&lps)?;
            per_input.push(tape.scale(total, -1.0 / lps.len() as f64));
        }
        tape.add_n(&per_input)
    };

    // Checked at an inflated parameter point: attenuation through the
    // gate/attention chain leaves some gradients near the rounding floor
    // of central differences at the default initialization, where the
    // check could not tell signal from noise.
    fn amplify(model: &mut Model<f64>, gain: f64) {
        for id in model.params().ids().collect::<Vec<_>>() {
            for v in model.params_mut().get_mut(id).data_mut() {
                *v *= gain;
            }
        }
    }

    let mut entries = Vec::new();
    for variant in EncoderVariant::ALL {
        for units in UnitConfig::LADDER {
            let mut model = Model::<f64>::new(model_config(variant, units), vocab.clone(), seed)?;
            amplify(&mut model, 2.0);
            let report = finite_diff_check(&mut model, 1e-5, |m, tape| probe_loss(m, tape, &probe))?;
            entries.push(SuiteEntry {
                label: format!("{variant}/{units}"),
                report,
            });
        }
    }

    // single-stream reference decoder and its own output head
    let mut model = Model::<f64>::new(
        model_config(EncoderVariant::Lf, UnitConfig::TWO_LSTM),
        vocab,
        seed,
    )?;
    amplify(&mut model, 2.0);
    let report = finite_diff_check(&mut model, 1e-5, |m, tape| {
        let mut per_input = Vec::with_capacity(probe.inputs.len());
        for (input, target) in probe.inputs.iter().zip(&probe.targets) {
            let kb = m.encode(tape, input)?;
            let mut state = m.baseline_init(tape, &kb)?;
            let mut lps = Vec::with_capacity(target.len() + 1);
            let mut x = START;
            for &t in target.iter().chain(std::iter::once(&END)) {
                let probs = m.baseline_step(tape, x, &mut state)?;
                let picked = tape.pick(probs, t)?;
                lps.push(tape.log(picked));
                x = t;
            }
            let total = tape.add_n(&lps)?;
            per_input.push(tape.scale(total, -1.0 / lps.len() as f64));
        }
        tape.add_n(&per_input)
    })?;
    entries.push(SuiteEntry {
        label: "lf/single-stream".into(),
        report,
    });
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ParamSet, Tensor};

    #[test]
    fn affine_map_is_checked_exactly() {
        // Central differences are exact for affine functions up to
        // rounding, so the error must be far below the usual tolerance.
        let mut params = ParamSet::new();
        params.add("w", Tensor::matrix(2, 3, vec![0.3, -0.1, 0.7, 0.2, 0.5, -0.4]).unwrap());
        params.add("b", Tensor::vector(vec![0.1, -0.2]));

        let report = finite_diff_check(&mut params, 1e-5, |ps, tape| {
            let (wid, _) = ps.by_name("w").unwrap();
            let (bid, _) = ps.by_name("b").unwrap();
            let w = tape.param(ps, wid);
            let b = tape.param(ps, bid);
            let x = tape.constant(&[0.5, -1.5, 2.0]);
            let y = tape.linear(w, x, Some(b))?;
            Ok(tape.sum_all(y))
        })
        .unwrap();

        assert!(
            report.max_rel_error() < 1e-6,
            "affine check error {:.3e}",
            report.max_rel_error()
        );
    }

    #[test]
    fn detached_parameter_reports_zero_error() {
        let mut params = ParamSet::new();
        params.add("used", Tensor::vector(vec![0.4, -0.6]));
        params.add("unused", Tensor::vector(vec![1.0, 2.0]));

        let report = finite_diff_check(&mut params, 1e-5, |ps, tape| {
            let (uid, _) = ps.by_name("used").unwrap();
            let u = tape.param(ps, uid);
            let t = tape.tanh(u);
            Ok(tape.sum_all(t))
        })
        .unwrap();

        let unused = report.entries.iter().find(|e| e.name == "unused").unwrap();
        assert_eq!(unused.rel_error, 0.0);
        assert_eq!(unused.max_abs_diff, 0.0);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut params = ParamSet::new();
        params.add("x", Tensor::vector(vec![0.0]));
        let err = finite_diff_check(&mut params, 1e-5, |ps, tape| {
            let (xid, _) = ps.by_name("x").unwrap();
            let x = tape.param(ps, xid);
            let l = tape.log(x); // log(0) = -inf
            Ok(tape.sum_all(l))
        })
        .unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }
}
