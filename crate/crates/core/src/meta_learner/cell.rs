//! Per-coordinate meta-learner step: first-layer LSTM, forget/input gates
//! and the cell-as-weight update, with the matching reverse pass.

use super::params::{MetaParams, GATE_CANDIDATE, GATE_FORGET, GATE_INPUT, GATE_OUTPUT};
use super::preprocess::CoordinateInput;
use crate::error::{Error, Result};
use crate::nn_core::logistic;

/// Recurrent state of one coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateState {
    pub h: Vec<f64>,
    pub cell: Vec<f64>,
    pub prev_f: f64,
    pub prev_i: f64,
    pub theta: f64,
}

impl CoordinateState {
    /// Zero LSTM state, `prev_f = 1`, `prev_i = 0`.
    pub fn initial(hidden: usize, theta: f64) -> Self {
        Self {
            h: vec![0.0; hidden],
            cell: vec![0.0; hidden],
            prev_f: 1.0,
            prev_i: 0.0,
            theta,
        }
    }
}

/// Gate activations (input, forget, output, candidate; each `H` wide) and
/// the new cell/hidden vectors. `skip_recurrent` is a fast path valid only
/// when `h_prev` is all zeros.
#[inline]
#[allow(clippy::too_many_arguments)]
pub(crate) fn layer1_forward(
    params: &MetaParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    skip_recurrent: bool,
    gates: &mut [f64],
    c: &mut [f64],
    h: &mut [f64],
) {
    let l = params.layout();
    let hs = l.hidden;
    let d = l.input_width;
    let v = params.values();
    for g in 0..4 {
        let wx = &v[l.wx(g)..l.wx(g) + hs * d];
        let wh = &v[l.wh(g)..l.wh(g) + hs * hs];
        let b = &v[l.bias(g)..l.bias(g) + hs];
        for k in 0..hs {
            let mut z = b[k];
            let wr = &wx[k * d..(k + 1) * d];
            for (w, xv) in wr.iter().zip(x) {
                z += w * xv;
            }
            if !skip_recurrent {
                let wr = &wh[k * hs..(k + 1) * hs];
                for (w, hv) in wr.iter().zip(h_prev) {
                    z += w * hv;
                }
            }
            gates[g * hs + k] = if g == GATE_CANDIDATE {
                z.tanh()
            } else {
                logistic(z)
            };
        }
    }
    for k in 0..hs {
        let ig = gates[GATE_INPUT * hs + k];
        let fg = gates[GATE_FORGET * hs + k];
        let og = gates[GATE_OUTPUT * hs + k];
        let cand = gates[GATE_CANDIDATE * hs + k];
        c[k] = fg * c_prev[k] + ig * cand;
        h[k] = og * c[k].tanh();
    }
}

/// `f = σ(W_F·[h, prev_f] + b_F)`, `i = σ(W_I·[h, prev_i] + b_I)`.
#[inline]
pub(crate) fn gates_forward(
    params: &MetaParams,
    h: &[f64],
    prev_f: f64,
    prev_i: f64,
) -> (f64, f64) {
    let hs = params.hidden();
    let wf = params.w_f();
    let wi = params.w_i();
    let mut af = 0.0;
    let mut ai = 0.0;
    for k in 0..hs {
        af += wf[k] * h[k];
        ai += wi[k] * h[k];
    }
    af += wf[hs] * prev_f;
    ai += wi[hs] * prev_i;
    (logistic(af + params.b_f()), logistic(ai + params.b_i()))
}

/// `θ_{t+1} = f θ_t − i g`.
#[inline]
pub fn coordinate_update(theta: f64, f: f64, i: f64, g: f64) -> f64 {
    f * theta - i * g
}

/// One step of the first LSTM layer for a single coordinate.
pub fn lstm_layer1_step(
    params: &MetaParams,
    state: &CoordinateState,
    input: &CoordinateInput,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let hs = params.hidden();
    if input.preprocessed.len() != params.layout().input_width
        || state.h.len() != hs
        || state.cell.len() != hs
    {
        return Err(Error::Shape(format!(
            "meta-learner expects input width {} and state width {hs}",
            params.layout().input_width
        )));
    }
    let mut gates = vec![0.0; 4 * hs];
    let mut c = vec![0.0; hs];
    let mut h = vec![0.0; hs];
    layer1_forward(
        params,
        &input.preprocessed,
        &state.h,
        &state.cell,
        false,
        &mut gates,
        &mut c,
        &mut h,
    );
    Ok((h, c))
}

/// Forget and input gate values for one coordinate.
pub fn gate_step(params: &MetaParams, h: &[f64], prev_f: f64, prev_i: f64) -> Result<(f64, f64)> {
    if h.len() != params.hidden() {
        return Err(Error::Shape(format!(
            "gate input has width {}, expected {}",
            h.len(),
            params.hidden()
        )));
    }
    Ok(gates_forward(params, h, prev_f, prev_i))
}

/// Adjoints flowing from step `t+1` into step `t` for one coordinate.
#[derive(Clone, Debug, Default)]
pub(crate) struct CoordAdjoint {
    pub theta: f64,
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub f: f64,
    pub i: f64,
}

/// Everything the reverse pass needs from one coordinate's forward step.
pub(crate) struct CoordTrace<'a> {
    pub x: &'a [f64],
    pub gates: &'a [f64],
    pub c: &'a [f64],
    pub h: &'a [f64],
    pub h_prev: &'a [f64],
    pub c_prev: &'a [f64],
    pub prev_f: f64,
    pub prev_i: f64,
    pub f: f64,
    pub i: f64,
    pub theta: f64,
    pub g: f64,
    /// `h_prev` is identically zero, so recurrent-weight terms vanish.
    pub first: bool,
}

/// Reverse pass through one coordinate step. Accumulates into `grad`
/// (meta-parameter gradient) and rewrites `adj` in place so that it holds
/// the adjoints of the previous step's outputs. `dz` is `4H` scratch.
pub(crate) fn coord_backward(
    params: &MetaParams,
    tr: &CoordTrace<'_>,
    adj: &mut CoordAdjoint,
    grad: &mut [f64],
    dz: &mut [f64],
    value_input: bool,
) {
    let l = *params.layout();
    let hs = l.hidden;
    let d = l.input_width;
    let v = params.values();

    // θ_{t+1} = F θ_t − I g
    let d_theta_next = adj.theta;
    let d_f = d_theta_next * tr.theta + adj.f;
    let d_i = -d_theta_next * tr.g + adj.i;
    let mut d_theta = d_theta_next * tr.f;

    let da_f = d_f * tr.f * (1.0 - tr.f);
    let da_i = d_i * tr.i * (1.0 - tr.i);
    let (wf, bf, wi, bi) = (l.w_f(), l.b_f(), l.w_i(), l.b_i());
    for k in 0..hs {
        grad[wf + k] += da_f * tr.h[k];
        grad[wi + k] += da_i * tr.h[k];
    }
    grad[wf + hs] += da_f * tr.prev_f;
    grad[wi + hs] += da_i * tr.prev_i;
    grad[bf] += da_f;
    grad[bi] += da_i;
    let d_prev_f = da_f * v[wf + hs];
    let d_prev_i = da_i * v[wi + hs];

    // through h = o ⊙ tanh(c), c = f⊙c_prev + i⊙cand
    for k in 0..hs {
        let dh = adj.h[k] + da_f * v[wf + k] + da_i * v[wi + k];
        let ig = tr.gates[GATE_INPUT * hs + k];
        let fg = tr.gates[GATE_FORGET * hs + k];
        let og = tr.gates[GATE_OUTPUT * hs + k];
        let cand = tr.gates[GATE_CANDIDATE * hs + k];
        let tc = tr.c[k].tanh();
        let dc = adj.c[k] + dh * og * (1.0 - tc * tc);
        dz[GATE_INPUT * hs + k] = dc * cand * ig * (1.0 - ig);
        dz[GATE_FORGET * hs + k] = dc * tr.c_prev[k] * fg * (1.0 - fg);
        dz[GATE_OUTPUT * hs + k] = dh * tc * og * (1.0 - og);
        dz[GATE_CANDIDATE * hs + k] = dc * ig * (1.0 - cand * cand);
        adj.c[k] = dc * fg;
    }

    if !tr.first {
        adj.h.iter_mut().for_each(|x| *x = 0.0);
    }
    let mut dx0 = 0.0;
    for g in 0..4 {
        let (wx, wh, b) = (l.wx(g), l.wh(g), l.bias(g));
        for k in 0..hs {
            let z = dz[g * hs + k];
            grad[b + k] += z;
            let row = wx + k * d;
            for (gv, &xv) in grad[row..row + d].iter_mut().zip(tr.x) {
                *gv += z * xv;
            }
            if value_input {
                dx0 += z * v[row];
            }
            if !tr.first {
                let row = wh + k * hs;
                for (j, &hp) in tr.h_prev.iter().enumerate() {
                    grad[row + j] += z * hp;
                    adj.h[j] += z * v[row + j];
                }
            }
        }
    }
    if value_input {
        d_theta += dx0;
    }
    adj.theta = d_theta;
    adj.f = d_prev_f;
    adj.i = d_prev_i;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta_learner::params::{init_meta_params, InputVariant};
    use crate::meta_learner::preprocess::{build_input, CoordPosition, PreprocessConfig};
    use crate::nn_core::finite_diff_check;

    fn sigma(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn zero_weights_give_zero_hidden() {
        let p = MetaParams::zeros(3, InputVariant::Value, PreprocessConfig::default()).unwrap();
        let st = CoordinateState::initial(3, 0.7);
        let pos = CoordPosition {
            i: 0,
            j: 0,
            m: 1,
            n: 1,
        };
        let inp = build_input(InputVariant::Value, 0.7, pos, 5.0, -2.0, p.preprocess()).unwrap();
        let (h, c) = lstm_layer1_step(&p, &st, &inp).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
        assert!(c.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn candidate_bias_closed_form() {
        let mut p = MetaParams::zeros(2, InputVariant::Value, PreprocessConfig::default()).unwrap();
        let l = *p.layout();
        let bc = 0.8;
        p.values_mut()[l.bias(GATE_CANDIDATE)] = bc;
        let st = CoordinateState::initial(2, 0.0);
        let inp = CoordinateInput {
            raw: vec![0.0; 3],
            preprocessed: vec![0.0; 5],
        };
        let (h, c) = lstm_layer1_step(&p, &st, &inp).unwrap();
        assert!((c[0] - 0.5 * bc.tanh()).abs() < 1e-15);
        assert!((h[0] - 0.5 * (0.5 * bc.tanh()).tanh()).abs() < 1e-15);
        assert_eq!(c[1], 0.0);
    }

    #[test]
    fn gate_values() {
        let mut p = MetaParams::zeros(3, InputVariant::Value, PreprocessConfig::default()).unwrap();
        p.set_b_f(5.0);
        p.set_b_i(-5.0);
        let (f, i) = gate_step(&p, &[0.3, -0.2, 0.9], 0.4, 0.1).unwrap();
        assert!((f - 0.993_307_1).abs() < 1e-7);
        assert!((i - 0.006_692_9).abs() < 1e-7);
        p.set_b_f(0.0);
        assert_eq!(gate_step(&p, &[1.0, 2.0, 3.0], 0.9, 0.0).unwrap().0, 0.5);
        assert!(gate_step(&p, &[1.0], 0.0, 0.0).is_err());
    }

    #[test]
    fn update_rule() {
        assert_eq!(coordinate_update(1.234, 1.0, 0.0, 9.0), 1.234);
        assert!((coordinate_update(2.0, 0.5, 0.1, 1.0) - 0.9).abs() < 1e-15);
        let v = coordinate_update(1.0, sigma(5.0), sigma(-5.0), 0.5);
        assert!((v - 0.989_960_724).abs() < 1e-9);
    }

    #[test]
    fn layer1_hidden_matches_finite_differences() {
        // d(sum of weighted h)/d(params) through a non-first step
        let p = init_meta_params(4, InputVariant::Value, PreprocessConfig::default(), 17).unwrap();
        let mut p = p;
        p.values_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(k, v)| *v += 0.05 * ((k % 7) as f64 - 3.0));
        let x = [0.4, -0.3, 1.0, -1.0, 0.2];
        let h_prev = [0.1, -0.2, 0.3, 0.05];
        let c_prev = [0.5, -0.4, 0.2, 0.1];
        let weights = [0.7, -1.1, 0.4, 0.9];
        let objective = |vals: &[f64]| {
            let q = p.with_values(vals.to_vec()).unwrap();
            let mut gates = [0.0; 16];
            let mut c = [0.0; 4];
            let mut h = [0.0; 4];
            layer1_forward(&q, &x, &h_prev, &c_prev, false, &mut gates, &mut c, &mut h);
            h.iter().zip(&weights).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut gates = [0.0; 16];
        let mut c = [0.0; 4];
        let mut h = [0.0; 4];
        layer1_forward(&p, &x, &h_prev, &c_prev, false, &mut gates, &mut c, &mut h);
        // only the hidden output carries an adjoint; the update path is idle
        let tr = CoordTrace {
            x: &x,
            gates: &gates,
            c: &c,
            h: &h,
            h_prev: &h_prev,
            c_prev: &c_prev,
            prev_f: 0.9,
            prev_i: 0.1,
            f: 0.99,
            i: 0.01,
            theta: 0.3,
            g: 0.2,
            first: false,
        };
        let mut adj = CoordAdjoint {
            theta: 0.0,
            h: weights.to_vec(),
            c: vec![0.0; 4],
            f: 0.0,
            i: 0.0,
        };
        let mut grad = vec![0.0; p.len()];
        let mut dz = vec![0.0; 16];
        coord_backward(&p, &tr, &mut adj, &mut grad, &mut dz, false);
        let r = finite_diff_check(objective, p.values(), &grad, 1e-4).unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }
}
