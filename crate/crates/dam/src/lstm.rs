//! Standard LSTM cell (Hochreiter formulation) and a left-to-right
//! sequence encoder. The same cell serves the decoder's response-level
//! and word-level recurrences and the encoder-side utterance encoders.

use crate::error::{DamError, Result};
use crate::rng::DetRng;
use crate::tensor::{ParamId, ParamSet, Scalar, Tape, Tensor, Var};

/// Weights for one of the four gates: input-to-hidden `w`, hidden-to-hidden
/// `u`, bias `b`.
#[derive(Debug, Clone, Copy)]
pub struct GateWeights {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

/// Parameter handles for one LSTM cell.
#[derive(Debug, Clone, Copy)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub input_gate: GateWeights,
    pub forget_gate: GateWeights,
    pub cell_gate: GateWeights,
    pub output_gate: GateWeights,
}

impl LstmParams {
    /// Registers a cell's tensors under `prefix`. Weights are uniform in
    /// ±1/√hidden_dim; biases zero except the forget bias at 1.0.
    pub fn register<S: Scalar>(
        params: &mut ParamSet<S>,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut DetRng,
    ) -> Self {
        let scale = 1.0 / (hidden_dim as f64).sqrt();
        let mut gate = |name: &str, forget: bool| {
            let w = uniform_matrix(params, format!("{prefix}.{name}.w"), hidden_dim, input_dim, scale, rng);
            let u = uniform_matrix(params, format!("{prefix}.{name}.u"), hidden_dim, hidden_dim, scale, rng);
            let bias = if forget {
                Tensor::vector(vec![S::one(); hidden_dim])
            } else {
                Tensor::vector(vec![S::zero(); hidden_dim])
            };
            let b = params.add(format!("{prefix}.{name}.b"), bias);
            GateWeights { w, u, b }
        };
        let input_gate = gate("input", false);
        let forget_gate = gate("forget", true);
        let cell_gate = gate("cell", false);
        let output_gate = gate("output", false);
        LstmParams {
            input_dim,
            hidden_dim,
            input_gate,
            forget_gate,
            cell_gate,
            output_gate,
        }
    }
}

pub(crate) fn uniform_matrix<S: Scalar>(
    params: &mut ParamSet<S>,
    name: String,
    rows: usize,
    cols: usize,
    scale: f64,
    rng: &mut DetRng,
) -> ParamId {
    let data: Vec<S> = (0..rows * cols)
        .map(|_| S::from_f64_lossy(rng.uniform(-scale, scale)))
        .collect();
    params.add(name, Tensor::matrix(rows, cols, data).expect("positive dims"))
}

pub(crate) fn uniform_vector<S: Scalar>(
    params: &mut ParamSet<S>,
    name: String,
    len: usize,
    scale: f64,
    rng: &mut DetRng,
) -> ParamId {
    let data: Vec<S> = (0..len)
        .map(|_| S::from_f64_lossy(rng.uniform(-scale, scale)))
        .collect();
    params.add(name, Tensor::vector(data))
}

pub(crate) fn zero_vector<S: Scalar>(params: &mut ParamSet<S>, name: String, len: usize) -> ParamId {
    params.add(name, Tensor::vector(vec![S::zero(); len]))
}

/// Hidden and cell state of one LSTM, as tape variables.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

impl LstmState {
    pub fn zeros<S: Scalar>(tape: &mut Tape<S>, hidden_dim: usize) -> Self {
        let zeros = vec![S::zero(); hidden_dim];
        let hidden = tape.constant(&zeros);
        let cell = tape.constant(&zeros);
        LstmState { hidden, cell }
    }
}

/// One step of the standard recurrence:
/// i,f,o = σ(affine), g = tanh(affine), c' = f∘c + i∘g, h' = o∘tanh(c').
/// Returns the output (== new hidden) and the new state.
pub fn lstm_step<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    cell: &LstmParams,
    x: Var,
    state: &LstmState,
) -> Result<(Var, LstmState)> {
    if tape.shape(x) != [cell.input_dim] {
        return Err(DamError::shapes("lstm input", &[cell.input_dim], tape.shape(x)));
    }
    let pre = |tape: &mut Tape<S>, g: &GateWeights| -> Result<Var> {
        let w = tape.param(params, g.w);
        let u = tape.param(params, g.u);
        let b = tape.param(params, g.b);
        let wx = tape.linear(w, x, Some(b))?;
        let uh = tape.linear(u, state.hidden, None)?;
        tape.add(wx, uh)
    };
    let zi = pre(tape, &cell.input_gate)?;
    let zf = pre(tape, &cell.forget_gate)?;
    let zg = pre(tape, &cell.cell_gate)?;
    let zo = pre(tape, &cell.output_gate)?;

    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);

    let fc = tape.mul(f, state.cell)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let tc = tape.tanh(c_new);
    let h_new = tape.mul(o, tc)?;
    Ok((
        h_new,
        LstmState {
            hidden: h_new,
            cell: c_new,
        },
    ))
}

/// Unrolls the cell over embedded tokens from a zero state. Returns the
/// final hidden and every per-step hidden.
pub fn encode_sequence<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    cell: &LstmParams,
    embedding: ParamId,
    tokens: &[usize],
) -> Result<(Var, Vec<Var>)> {
    if tokens.is_empty() {
        return Err(DamError::InvalidArgument(
            "cannot encode an empty token sequence".into(),
        ));
    }
    let table = tape.param(params, embedding);
    let mut state = LstmState::zeros(tape, cell.hidden_dim);
    let mut hiddens = Vec::with_capacity(tokens.len());
    for &tok in tokens {
        let x = tape.embed_row(table, tok)?;
        let (h, next) = lstm_step(tape, params, cell, x, &state)?;
        state = next;
        hiddens.push(h);
    }
    Ok((*hiddens.last().expect("non-empty"), hiddens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::tensor::sigmoid;
    use proptest::prelude::*;

    fn zeroed_cell(input_dim: usize, hidden_dim: usize) -> (ParamSet<f64>, LstmParams) {
        let mut params = ParamSet::new();
        let mut rng = DetRng::seed(0);
        let cell = LstmParams::register(&mut params, "lstm", input_dim, hidden_dim, &mut rng);
        for id in params.ids().collect::<Vec<_>>() {
            params.get_mut(id).data_mut().fill(0.0);
        }
        (params, cell)
    }

    #[test]
    fn zero_params_give_zero_output() {
        let (params, cell) = zeroed_cell(3, 2);
        let mut tape = Tape::new();
        let x = tape.constant(&[5.0, -2.0, 1.0]);
        let state = LstmState::zeros(&mut tape, 2);
        let (h, _) = lstm_step(&mut tape, &params, &cell, x, &state).unwrap();
        assert_eq!(tape.value(h), &[0.0, 0.0]);
    }

    #[test]
    fn forget_bias_only_matches_hand_evaluation() {
        // Hand evaluation of the cell equations with every weight zero
        // except a forget bias of 1, prior cell state 1, input 0:
        //   i = σ(0), f = σ(1), g = tanh(0) = 0, o = σ(0)
        //   c' = σ(1)·1, h' = σ(0)·tanh(σ(1))
        let (mut params, cell) = zeroed_cell(1, 1);
        params.get_mut(cell.forget_gate.b).data_mut()[0] = 1.0;

        let mut tape = Tape::new();
        let x = tape.constant(&[0.0]);
        let one = tape.constant(&[1.0]);
        let zero = tape.constant(&[0.0]);
        let state = LstmState {
            hidden: zero,
            cell: one,
        };
        let (h, next) = lstm_step(&mut tape, &params, &cell, x, &state).unwrap();

        let expected_c = sigmoid(1.0f64);
        let expected_h = sigmoid(0.0f64) * expected_c.tanh();
        assert!((tape.value(next.cell)[0] - expected_c).abs() < 1e-12);
        assert!((tape.value(h)[0] - expected_h).abs() < 1e-12);
        assert!((expected_c - 0.731059).abs() < 1e-6);
        assert!((expected_h - 0.311856).abs() < 1e-6);
    }

    #[test]
    fn repeated_step_is_bitwise_identical() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = DetRng::seed(11);
        let cell = LstmParams::register(&mut params, "lstm", 4, 3, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let x = tape.constant(&[0.3, -0.7, 0.2, 0.9]);
            let state = LstmState::zeros(&mut tape, 3);
            let (h, _) = lstm_step(&mut tape, &params, &cell, x, &state).unwrap();
            tape.value(h).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn step_gradients_match_finite_differences() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = DetRng::seed(3);
        let cell = LstmParams::register(&mut params, "lstm", 3, 4, &mut rng);
        let report = finite_diff_check(&mut params, 1e-5, |ps, tape| {
            let x1 = tape.constant(&[0.4, -0.2, 0.8]);
            let x2 = tape.constant(&[-0.9, 0.3, 0.1]);
            let state = LstmState::zeros(tape, 4);
            let (_h1, s1) = lstm_step(tape, ps, &cell, x1, &state)?;
            let (_h2, s2) = lstm_step(tape, ps, &cell, x2, &s1)?;
            let both = tape.concat(&[s2.hidden, s2.cell])?;
            let t = tape.tanh(both);
            Ok(tape.sum_all(t))
        })
        .unwrap();
        assert!(
            report.max_rel_error() < 1e-4,
            "worst {:?}",
            report.worst().map(|e| (&e.name, e.rel_error))
        );
    }

    #[test]
    fn encode_sequence_basics() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = DetRng::seed(5);
        let cell = LstmParams::register(&mut params, "lstm", 2, 3, &mut rng);
        let embed = uniform_matrix(&mut params, "embed".into(), 6, 2, 0.5, &mut rng);

        let mut tape = Tape::new();
        let err = encode_sequence(&mut tape, &params, &cell, embed, &[]).unwrap_err();
        assert!(err.to_string().contains("empty"));

        let oov = encode_sequence(&mut tape, &params, &cell, embed, &[9]).unwrap_err();
        assert!(oov.to_string().contains("out of range"));

        let (_, h1) = encode_sequence(&mut tape, &params, &cell, embed, &[1]).unwrap();
        let (_, h12) = encode_sequence(&mut tape, &params, &cell, embed, &[1, 2]).unwrap();
        assert_eq!(h12.len(), 2);
        // unrolling prefix property: step-1 hidden shared
        assert_eq!(tape.value(h1[0]), tape.value(h12[0]));

        let (final_h, all) = encode_sequence(&mut tape, &params, &cell, embed, &[3, 4, 5]).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(tape.value(final_h), tape.value(all[2]));
    }

    #[test]
    fn single_token_zero_params_is_zero() {
        let (mut params, cell) = zeroed_cell(2, 3);
        let mut rng = DetRng::seed(0);
        let embed = uniform_matrix(&mut params, "embed".into(), 4, 2, 0.5, &mut rng);
        let mut tape = Tape::new();
        let (h, _) = encode_sequence(&mut tape, &params, &cell, embed, &[2]).unwrap();
        assert_eq!(tape.value(h), &[0.0, 0.0, 0.0]);
    }

    proptest! {
        /// |h'[i]| is bounded by |tanh(c'[i])| since the output gate is in (0,1).
        #[test]
        fn output_bounded_by_cell_tanh(seed in 0u64..500) {
            let mut params = ParamSet::<f64>::new();
            let mut rng = DetRng::seed(seed);
            let cell = LstmParams::register(&mut params, "lstm", 2, 3, &mut rng);
            let mut tape = Tape::new();
            let xv: Vec<f64> = (0..2).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let x = tape.constant(&xv);
            let state = LstmState::zeros(&mut tape, 3);
            let (h, next) = lstm_step(&mut tape, &params, &cell, x, &state).unwrap();
            let tc = tape.tanh(next.cell);
            for (hv, tv) in tape.value(h).iter().zip(tape.value(tc)) {
                prop_assert!(hv.abs() < 1.0);
                prop_assert!(hv.abs() <= tv.abs() + 1e-15);
            }
        }
    }
}
