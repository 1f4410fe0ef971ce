//! Seeded finite-difference suites behind the `gradcheck` command.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::adaptation::{LhucParams, LinearTransformParams};
use crate::error::{Error, Result};
use crate::meta_learner::{
    init_meta_params, unroll, unroll_backward, InputVariant, MetaParams, PreprocessConfig,
};
use crate::meta_training::{
    make_chunks, meta_gradient, pair_loss, pseudo_label_chunks, TargetRegime,
};
use crate::nn_core::{
    backward, backward_with_overlay, batch_loss, finite_diff_check, FrameBatch, GradCheckReport,
    HiddenOverlay, Matrix, ModelSpec, OverlayGrad, ParameterVector,
};

pub const GRADCHECK_EPSILON: f64 = 1e-4;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradTarget {
    Am,
    Lhuc,
    Linear,
    MetaStep,
    MetaLoss,
}

impl GradTarget {
    pub const ALL: [GradTarget; 5] = [
        GradTarget::Am,
        GradTarget::Lhuc,
        GradTarget::Linear,
        GradTarget::MetaStep,
        GradTarget::MetaLoss,
    ];
}

impl FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "am" => Ok(GradTarget::Am),
            "lhuc" => Ok(GradTarget::Lhuc),
            "linear" => Ok(GradTarget::Linear),
            "meta-step" => Ok(GradTarget::MetaStep),
            "meta-loss" => Ok(GradTarget::MetaLoss),
            other => Err(Error::Config(format!(
                "unknown gradcheck target {other:?} (am, lhuc, linear, meta-step, meta-loss)"
            ))),
        }
    }
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GradTarget::Am => "am",
            GradTarget::Lhuc => "lhuc",
            GradTarget::Linear => "linear",
            GradTarget::MetaStep => "meta-step",
            GradTarget::MetaLoss => "meta-loss",
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckCase {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckOutcome {
    pub target: GradTarget,
    pub seed: u64,
    pub cases: Vec<GradCheckCase>,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.cases
            .iter()
            .all(|c| c.report.passes(GRADCHECK_TOLERANCE))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.report.max_rel_error)
            .fold(0.0, f64::max)
    }
}

fn random_batch(n: usize, dim: usize, classes: usize, rng: &mut ChaCha8Rng) -> FrameBatch {
    let data = (0..n * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    FrameBatch::new(
        Matrix::from_vec(n, dim, data).expect("shape"),
        labels,
        vec![false; n],
    )
    .expect("batch")
}

/// Meta parameters away from saturation, so every coordinate carries a
/// gradient well above the finite-difference noise floor.
fn lively_meta(
    hidden: usize,
    variant: InputVariant,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<MetaParams> {
    let mut m = init_meta_params(hidden, variant, PreprocessConfig::default(), seed)?;
    for v in m.values_mut() {
        *v += rng.random_range(-0.3..0.3);
    }
    m.set_b_f(1.0 + rng.random_range(-0.2..0.2));
    m.set_b_i(-1.0 + rng.random_range(-0.2..0.2));
    Ok(m)
}

/// Shifts the largest analytic entry so the comparison must fail.
fn corrupt(grad: &mut [f64]) {
    if let Some((k, _)) = grad
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
    {
        grad[k] += 1e-2 * (1.0 + grad[k].abs());
    }
}

fn case(name: impl Into<String>, report: GradCheckReport) -> GradCheckCase {
    GradCheckCase {
        name: name.into(),
        report,
    }
}

fn check_am(rng: &mut ChaCha8Rng, seed: u64, broken: bool) -> Result<Vec<GradCheckCase>> {
    let mut cases = Vec::new();
    for (input, hidden, classes) in [(3, vec![4], 2), (10, vec![32, 32, 16], 6)] {
        let spec = ModelSpec::new(input, hidden, classes)?;
        let theta = spec.init_params(seed);
        let batch = random_batch(12, input, classes, rng);
        let (_, mut grad) = backward(&spec, &theta, &batch)?;
        if broken {
            corrupt(grad.values_mut());
        }
        let report = finite_diff_check(
            |v| {
                let t = theta.with_values(v.to_vec()).expect("layout");
                batch_loss(&spec, &t, &batch, HiddenOverlay::None).unwrap_or(f64::NAN)
            },
            theta.values(),
            grad.values(),
            GRADCHECK_EPSILON,
        )?;
        cases.push(case(format!("am {}", describe(&spec)), report));
    }
    Ok(cases)
}

fn describe(spec: &ModelSpec) -> String {
    let mut dims = vec![spec.input_dim.to_string()];
    dims.extend(spec.hidden_dims.iter().map(usize::to_string));
    dims.push(spec.num_classes.to_string());
    dims.join("-")
}

fn overlay_setup(
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<(ModelSpec, ParameterVector, FrameBatch)> {
    let spec = ModelSpec::new(8, vec![24, 16, 12], 5)?;
    let theta = spec.init_params(seed);
    let batch = random_batch(16, 8, 5, rng);
    Ok((spec, theta, batch))
}

fn check_lhuc(rng: &mut ChaCha8Rng, seed: u64, broken: bool) -> Result<Vec<GradCheckCase>> {
    let (spec, theta, batch) = overlay_setup(rng, seed)?;
    let mut lhuc = LhucParams::ones(&spec);
    for v in lhuc.r.iter_mut().flatten() {
        *v += rng.random_range(-0.5..0.5);
    }
    let out = backward_with_overlay(&spec, &theta, &batch, lhuc.as_overlay(), false)?;
    let OverlayGrad::Scale(g) = out.overlay else {
        return Err(Error::Shape("expected a scale-overlay gradient".into()));
    };
    let mut g = g.concat();
    if broken {
        corrupt(&mut g);
    }
    let widths = spec.hidden_dims.clone();
    let report = finite_diff_check(
        |v| {
            let mut r = Vec::with_capacity(widths.len());
            let mut off = 0;
            for &w in &widths {
                r.push(v[off..off + w].to_vec());
                off += w;
            }
            batch_loss(&spec, &theta, &batch, HiddenOverlay::Scale(&r)).unwrap_or(f64::NAN)
        },
        &lhuc.r.concat(),
        &g,
        GRADCHECK_EPSILON,
    )?;
    Ok(vec![case(format!("lhuc {}", describe(&spec)), report)])
}

fn check_linear(rng: &mut ChaCha8Rng, seed: u64, broken: bool) -> Result<Vec<GradCheckCase>> {
    let (spec, theta, batch) = overlay_setup(rng, seed)?;
    let mut cases = Vec::new();
    for layer in 0..spec.hidden_dims.len() {
        let mut lin = LinearTransformParams::identity(&spec, layer)?;
        for v in lin.a.as_mut_slice() {
            *v += rng.random_range(-0.1..0.1);
        }
        let d = lin.a.rows();
        let out = backward_with_overlay(&spec, &theta, &batch, lin.as_overlay(), false)?;
        let OverlayGrad::Linear(g) = out.overlay else {
            return Err(Error::Shape("expected a linear-overlay gradient".into()));
        };
        let mut g = g.into_vec();
        if broken {
            corrupt(&mut g);
        }
        let report = finite_diff_check(
            |v| {
                let a = Matrix::from_vec(d, d, v.to_vec()).expect("square");
                batch_loss(
                    &spec,
                    &theta,
                    &batch,
                    HiddenOverlay::Linear { layer, matrix: &a },
                )
                .unwrap_or(f64::NAN)
            },
            lin.a.as_slice(),
            &g,
            GRADCHECK_EPSILON,
        )?;
        cases.push(case(format!("linear after hidden layer {layer}"), report));
    }
    Ok(cases)
}

/// One meta-learner step on random coordinates; the objective is a fixed
/// random projection of the updated weights.
fn check_meta_step(rng: &mut ChaCha8Rng, seed: u64, broken: bool) -> Result<Vec<GradCheckCase>> {
    let mut cases = Vec::new();
    let coords = 24;
    for variant in [InputVariant::Position, InputVariant::Value] {
        let meta = lively_meta(20, variant, rng, seed)?;
        let theta: Vec<f64> = (0..coords).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grad: Vec<f64> = (0..coords).map(|_| rng.random_range(-2.0..2.0)).collect();
        let positions: Vec<(f64, f64)> = (0..coords)
            .map(|k| ((k % 4) as f64 / 4.0, (k % 6) as f64 / 6.0))
            .collect();
        let proj: Vec<f64> = (0..coords).map(|_| rng.random_range(-1.0..1.0)).collect();
        let loss = 3.7;
        let run =
            |m: &MetaParams| unroll(m, &theta, &positions, 1, |_, _| Ok((loss, grad.clone())));
        let un = run(&meta)?;
        let mut g = unroll_backward(&meta, &un, &proj)?;
        if broken {
            corrupt(&mut g);
        }
        let report = finite_diff_check(
            |v| match meta.with_values(v.to_vec()).and_then(|m| run(&m)) {
                Ok(u) => u.theta_final.iter().zip(&proj).map(|(a, b)| a * b).sum(),
                Err(_) => f64::NAN,
            },
            meta.values(),
            &g,
            GRADCHECK_EPSILON,
        )?;
        cases.push(case(format!("meta step H=20 {variant}"), report));
    }
    Ok(cases)
}

/// End-to-end gradient of one chunk pair's loss, one adaptation step.
fn check_meta_loss(rng: &mut ChaCha8Rng, seed: u64, broken: bool) -> Result<Vec<GradCheckCase>> {
    let spec = ModelSpec::new(4, vec![6, 5], 3)?;
    let theta = spec.init_params(seed);
    let stream = random_batch(20, 4, 3, rng);
    let plan = pseudo_label_chunks(&spec, &theta, &make_chunks(&[vec![stream]], 10)?)?;
    let pair = plan.pairs[0];
    let eval = &plan.eval_chunk(pair).frames;
    let mut cases = Vec::new();
    for variant in [InputVariant::Position, InputVariant::Value] {
        let meta = lively_meta(8, variant, rng, seed)?;
        for regime in [TargetRegime::Supervised, TargetRegime::Unsupervised] {
            let adapt = plan.adapt_batch(pair, regime)?;
            let mut g = meta_gradient(&spec, &theta, &meta, &adapt, eval, 1)?.d_phi;
            if broken {
                corrupt(&mut g);
            }
            let report = finite_diff_check(
                |v| {
                    meta.with_values(v.to_vec())
                        .and_then(|m| pair_loss(&spec, &theta, &m, &adapt, eval, 1))
                        .unwrap_or(f64::NAN)
                },
                meta.values(),
                &g,
                GRADCHECK_EPSILON,
            )?;
            cases.push(case(
                format!("meta loss {} H=8 {variant} {regime}", describe(&spec)),
                report,
            ));
        }
    }
    Ok(cases)
}

/// Runs the suite for `target`. `broken` perturbs the analytic gradient,
/// as a negative control.
pub fn run_gradcheck(target: GradTarget, seed: u64, broken: bool) -> Result<GradCheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = match target {
        GradTarget::Am => check_am(&mut rng, seed, broken)?,
        GradTarget::Lhuc => check_lhuc(&mut rng, seed, broken)?,
        GradTarget::Linear => check_linear(&mut rng, seed, broken)?,
        GradTarget::MetaStep => check_meta_step(&mut rng, seed, broken)?,
        GradTarget::MetaLoss => check_meta_loss(&mut rng, seed, broken)?,
    };
    Ok(GradCheckOutcome {
        target,
        seed,
        cases,
    })
}

impl fmt::Display for GradCheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.cases {
            writeln!(
                f,
                "{:<44} coords {:>6}  max rel err {:.3e}  worst #{}  {}",
                c.name,
                c.report.coordinates,
                c.report.max_rel_error,
                c.report.worst_coordinate,
                if c.report.passes(GRADCHECK_TOLERANCE) {
                    "ok"
                } else {
                    "FAIL"
                }
            )?;
        }
        write!(
            f,
            "gradcheck {} seed {}: {}",
            self.target,
            self.seed,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_suite_passes_and_detects_corruption() {
        for target in GradTarget::ALL {
            let ok = run_gradcheck(target, 7, false).unwrap();
            assert!(ok.passed(), "{ok}");
            let bad = run_gradcheck(target, 7, true).unwrap();
            assert!(!bad.passed(), "{bad}");
        }
    }

    #[test]
    fn target_names_round_trip() {
        for t in GradTarget::ALL {
            assert_eq!(t.to_string().parse::<GradTarget>().unwrap(), t);
        }
        assert!("weights".parse::<GradTarget>().is_err());
    }
}
