use super::chunks::{ChunkPlan, TargetRegime};
use crate::error::{Error, Result};
use crate::meta_learner::{unroll, unroll_backward, InputVariant, MetaParams, Unroll};
use crate::nn_core::{backward, batch_loss, FrameBatch, HiddenOverlay, ModelSpec, ParameterVector};

/// Meta-objective value of one pair and its gradient with respect to Φ,
/// laid out like `MetaParams::values`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaGradient {
    pub d_phi: Vec<f64>,
    pub j_value: f64,
}

/// Loss and gradient at the unadapted weights, shared by every Φ.
#[derive(Clone, Debug)]
pub(crate) struct FirstSignal {
    pub loss: f64,
    pub grad: Vec<f64>,
}

impl FirstSignal {
    pub fn compute(spec: &ModelSpec, theta: &ParameterVector, adapt: &FrameBatch) -> Result<Self> {
        let (loss, grad) = backward(spec, theta, adapt)?;
        finite(loss, 0)?;
        Ok(Self {
            loss,
            grad: grad.into_values(),
        })
    }
}

fn finite(loss: f64, step: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("adaptation loss at step {step}")))
    }
}

pub(crate) fn positions_for(meta: &MetaParams, theta: &ParameterVector) -> Vec<(f64, f64)> {
    match meta.variant() {
        InputVariant::Position => theta.normalized_positions(),
        InputVariant::Value => Vec::new(),
    }
}

pub(crate) fn run_unroll(
    spec: &ModelSpec,
    theta: &ParameterVector,
    adapt: &FrameBatch,
    meta: &MetaParams,
    steps: usize,
    positions: &[(f64, f64)],
    first: Option<&FirstSignal>,
) -> Result<Unroll> {
    if adapt.is_empty() {
        return Err(Error::NoAdaptationFrames);
    }
    if steps == 0 {
        return Err(Error::Precondition(
            "adaptation needs at least one step".into(),
        ));
    }
    let mut current = theta.clone();
    unroll(meta, theta.values(), positions, steps, |t, values| {
        if let (0, Some(s)) = (t, first) {
            return Ok((s.loss, s.grad.clone()));
        }
        current.values_mut().copy_from_slice(values);
        let (loss, grad) = backward(spec, &current, adapt)?;
        Ok((finite(loss, t)?, grad.into_values()))
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn pair_loss_cached(
    spec: &ModelSpec,
    theta: &ParameterVector,
    meta: &MetaParams,
    adapt: &FrameBatch,
    eval: &FrameBatch,
    steps: usize,
    positions: &[(f64, f64)],
    first: Option<&FirstSignal>,
) -> Result<f64> {
    let un = run_unroll(spec, theta, adapt, meta, steps, positions, first)?;
    let adapted = theta.with_values(un.theta_final)?;
    batch_loss(spec, &adapted, eval, HiddenOverlay::None)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn meta_gradient_cached(
    spec: &ModelSpec,
    theta: &ParameterVector,
    meta: &MetaParams,
    adapt: &FrameBatch,
    eval: &FrameBatch,
    steps: usize,
    positions: &[(f64, f64)],
    first: Option<&FirstSignal>,
) -> Result<MetaGradient> {
    let un = run_unroll(spec, theta, adapt, meta, steps, positions, first)?;
    let adapted = theta.with_values(un.theta_final.clone())?;
    let (j_value, d_theta) = backward(spec, &adapted, eval)?;
    if !j_value.is_finite() {
        return Err(Error::NonFinite(format!(
            "evaluation loss after {steps} adaptation steps"
        )));
    }
    let d_phi = unroll_backward(meta, &un, d_theta.values())?;
    Ok(MetaGradient { d_phi, j_value })
}

/// Cross-entropy on `eval` after `steps` meta-learner steps on `adapt`,
/// starting from `theta`.
pub fn pair_loss(
    spec: &ModelSpec,
    theta: &ParameterVector,
    meta: &MetaParams,
    adapt: &FrameBatch,
    eval: &FrameBatch,
    steps: usize,
) -> Result<f64> {
    let positions = positions_for(meta, theta);
    pair_loss_cached(spec, theta, meta, adapt, eval, steps, &positions, None)
}

/// Reverse-mode gradient of [`pair_loss`] with respect to Φ. Losses and
/// gradients fed to the meta-learner are held constant, which is exact for
/// a single step.
pub fn meta_gradient(
    spec: &ModelSpec,
    theta: &ParameterVector,
    meta: &MetaParams,
    adapt: &FrameBatch,
    eval: &FrameBatch,
    steps: usize,
) -> Result<MetaGradient> {
    let positions = positions_for(meta, theta);
    meta_gradient_cached(spec, theta, meta, adapt, eval, steps, &positions, None)
}

/// Sum in ascending order, so the total does not depend on input order.
pub(crate) fn order_free_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// `J(Φ)`: every pair adapts from the same `theta` and contributes its
/// evaluation-chunk cross-entropy.
pub fn meta_loss(
    spec: &ModelSpec,
    theta: &ParameterVector,
    meta: &MetaParams,
    plan: &ChunkPlan,
    regime: TargetRegime,
    steps: usize,
) -> Result<f64> {
    if plan.pairs.is_empty() {
        return Err(Error::NoChunkPairs);
    }
    let positions = positions_for(meta, theta);
    let mut losses = Vec::with_capacity(plan.pairs.len());
    for &pair in &plan.pairs {
        let adapt = plan.adapt_batch(pair, regime)?;
        let eval = &plan.eval_chunk(pair).frames;
        losses.push(pair_loss_cached(
            spec, theta, meta, &adapt, eval, steps, &positions, None,
        )?);
    }
    Ok(order_free_sum(losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta_learner::{init_meta_params, PreprocessConfig};
    use crate::meta_training::chunks::{make_chunks, pseudo_label_chunks, ChunkPair};
    use crate::nn_core::{finite_diff_check, Matrix};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn segment(n: usize, dim: usize, classes: usize, seed: u64) -> FrameBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * dim).map(|_| rng.random_range(-1.5..1.5)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
        FrameBatch::new(
            Matrix::from_vec(n, dim, data).unwrap(),
            labels,
            vec![false; n],
        )
        .unwrap()
    }

    fn setup() -> (ModelSpec, ParameterVector, ChunkPlan) {
        let spec = ModelSpec::new(3, vec![4], 2).unwrap();
        let theta = spec.init_params(7);
        let plan =
            make_chunks(&[vec![segment(24, 3, 2, 1)], vec![segment(16, 3, 2, 2)]], 8).unwrap();
        (spec, theta, plan)
    }

    fn meta(variant: InputVariant, seed: u64) -> MetaParams {
        let mut m = init_meta_params(4, variant, PreprocessConfig::default(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 50);
        for v in m.values_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        m.set_b_f(1.0);
        m.set_b_i(-1.0);
        m
    }

    #[test]
    fn identity_adaptation_gives_unadapted_loss() {
        let (spec, theta, plan) = setup();
        let m = meta(InputVariant::Position, 1).with_pinned_gates(1.0, 0.0);
        let j = meta_loss(&spec, &theta, &m, &plan, TargetRegime::Supervised, 1).unwrap();
        let expected = order_free_sum(
            plan.pairs
                .iter()
                .map(|&p| {
                    batch_loss(
                        &spec,
                        &theta,
                        &plan.eval_chunk(p).frames,
                        HiddenOverlay::None,
                    )
                    .unwrap()
                })
                .collect(),
        );
        assert_eq!(j, expected);
    }

    #[test]
    fn additive_and_order_free() {
        let (spec, theta, plan) = setup();
        let m = meta(InputVariant::Value, 2);
        let sup = TargetRegime::Supervised;
        let single: Vec<f64> = plan
            .pairs
            .iter()
            .map(|&p| {
                meta_loss(
                    &spec,
                    &theta,
                    &m,
                    &plan.with_pairs(vec![p]).unwrap(),
                    sup,
                    1,
                )
                .unwrap()
            })
            .collect();
        let all = meta_loss(&spec, &theta, &m, &plan, sup, 1).unwrap();
        assert_eq!(all, order_free_sum(single.clone()));
        let rev: Vec<ChunkPair> = plan.pairs.iter().rev().copied().collect();
        assert_eq!(
            meta_loss(&spec, &theta, &m, &plan.with_pairs(rev).unwrap(), sup, 1).unwrap(),
            all
        );
        let p0 = plan.pairs[0];
        let doubled = plan.with_pairs(vec![p0, p0]).unwrap();
        assert_eq!(
            meta_loss(&spec, &theta, &m, &doubled, sup, 1).unwrap(),
            2.0 * single[0]
        );
    }

    #[test]
    fn no_pairs_is_an_error() {
        let (spec, theta, plan) = setup();
        let empty = plan.with_pairs(Vec::new()).unwrap();
        let err = meta_loss(
            &spec,
            &theta,
            &meta(InputVariant::Value, 3),
            &empty,
            TargetRegime::Supervised,
            1,
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "no chunk pairs");
    }

    #[test]
    fn unsupervised_matches_supervised_when_pseudo_labels_are_true() {
        let (spec, theta, plan) = setup();
        let labelled = pseudo_label_chunks(&spec, &theta, &plan).unwrap();
        let mut truthful = labelled.clone();
        for c in truthful.speakers.iter_mut().flatten() {
            c.frames.labels = c.pseudo_labels.clone().unwrap();
        }
        let m = meta(InputVariant::Position, 4);
        let sup = meta_loss(&spec, &theta, &m, &truthful, TargetRegime::Supervised, 1).unwrap();
        let unsup = meta_loss(&spec, &theta, &m, &truthful, TargetRegime::Unsupervised, 1).unwrap();
        assert_eq!(sup, unsup);
    }

    #[test]
    fn gradient_value_equals_loss() {
        let (spec, theta, plan) = setup();
        let m = meta(InputVariant::Position, 5);
        let p = plan.pairs[0];
        let adapt = &plan.adapt_chunk(p).frames;
        let eval = &plan.eval_chunk(p).frames;
        let g = meta_gradient(&spec, &theta, &m, adapt, eval, 1).unwrap();
        let single = plan.with_pairs(vec![p]).unwrap();
        assert_eq!(
            g.j_value,
            meta_loss(&spec, &theta, &m, &single, TargetRegime::Supervised, 1).unwrap()
        );
        assert_eq!(g.d_phi.len(), m.len());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (spec, theta, plan) = setup();
        let labelled = pseudo_label_chunks(&spec, &theta, &plan).unwrap();
        for (variant, regime) in [
            (InputVariant::Position, TargetRegime::Supervised),
            (InputVariant::Value, TargetRegime::Supervised),
            (InputVariant::Position, TargetRegime::Unsupervised),
            (InputVariant::Value, TargetRegime::Unsupervised),
        ] {
            let m = meta(variant, 6);
            let p = labelled.pairs[1];
            let adapt = labelled.adapt_batch(p, regime).unwrap();
            let eval = &labelled.eval_chunk(p).frames;
            let g = meta_gradient(&spec, &theta, &m, &adapt, eval, 1).unwrap();
            let report = finite_diff_check(
                |v| {
                    pair_loss(
                        &spec,
                        &theta,
                        &m.with_values(v.to_vec()).unwrap(),
                        &adapt,
                        eval,
                        1,
                    )
                    .unwrap()
                },
                m.values(),
                &g.d_phi,
                1e-4,
            )
            .unwrap();
            assert!(
                report.max_rel_error <= 1e-5,
                "{variant:?} {regime:?}: {report:?}"
            );
        }
    }

    #[test]
    fn saturated_gates_hide_first_layer() {
        let (spec, theta, plan) = setup();
        let mut m = meta(InputVariant::Position, 8);
        m.zero_gate_weights();
        m.set_b_f(5.0);
        m.set_b_i(-5.0);
        let p = plan.pairs[0];
        let g = meta_gradient(
            &spec,
            &theta,
            &m,
            &plan.adapt_chunk(p).frames,
            &plan.eval_chunk(p).frames,
            1,
        )
        .unwrap();
        let l = m.layout();
        assert!(g.d_phi[..l.w_f()].iter().all(|&v| v == 0.0));
        assert!(g.d_phi[l.b_f()] != 0.0 && g.d_phi[l.b_i()] != 0.0);
    }
}
