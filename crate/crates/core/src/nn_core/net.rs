//! Forward and backward passes of the frame classifier.
//!
//! Hidden layers compute `h = logistic(x W + b)`; the output layer is a
//! softmax over `x W + b`. An optional [`HiddenOverlay`] rescales or
//! linearly transforms hidden activations without touching the base
//! weights, which is how the LHUC and linear-transform adaptations plug in.

use super::matrix::Matrix;
use super::model::{FrameBatch, ModelSpec, ParameterVector};
use crate::error::{Error, Result};

/// Floor applied to the true-class posterior before taking its log.
pub const POSTERIOR_FLOOR: f64 = 1e-12;

/// Transform applied to hidden activations after the nonlinearity.
#[derive(Clone, Copy, Debug)]
pub enum HiddenOverlay<'a> {
    None,
    /// `h' = r ∘ h` on every hidden layer; one vector per hidden layer.
    Scale(&'a [Vec<f64>]),
    /// `h' = A h` after hidden layer `layer`; `A` is square.
    Linear {
        layer: usize,
        matrix: &'a Matrix,
    },
}

impl HiddenOverlay<'_> {
    fn check(&self, spec: &ModelSpec) -> Result<()> {
        match self {
            HiddenOverlay::None => Ok(()),
            HiddenOverlay::Scale(r) => {
                let ok = r.len() == spec.hidden_dims.len()
                    && r.iter().zip(&spec.hidden_dims).all(|(v, &d)| v.len() == d);
                if ok {
                    Ok(())
                } else {
                    Err(Error::Shape(
                        "scale overlay does not match hidden widths".into(),
                    ))
                }
            }
            HiddenOverlay::Linear { layer, matrix } => {
                let d = *spec
                    .hidden_dims
                    .get(*layer)
                    .ok_or_else(|| Error::Shape(format!("hidden layer {layer} does not exist")))?;
                if matrix.rows() != d || matrix.cols() != d {
                    return Err(Error::Shape(format!(
                        "linear overlay must be {d}x{d}, got {}x{}",
                        matrix.rows(),
                        matrix.cols()
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Gradient of an overlay's own parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum OverlayGrad {
    None,
    Scale(Vec<Vec<f64>>),
    Linear(Matrix),
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input of every affine layer (after any overlay).
    layer_inputs: Vec<Matrix>,
    /// Hidden activations before the overlay.
    hidden: Vec<Matrix>,
    pub posteriors: Matrix,
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out[f, :] = bias + x[f, :] W` with `W` row-major `[fan_in x fan_out]`.
fn affine(x: &Matrix, w: &[f64], b: &[f64]) -> Matrix {
    let fan_out = b.len();
    let mut out = Matrix::zeros(x.rows(), fan_out);
    for f in 0..x.rows() {
        let xr = x.row(f);
        let orow = out.row_mut(f);
        orow.copy_from_slice(b);
        for (i, &a) in xr.iter().enumerate() {
            let wr = &w[i * fan_out..(i + 1) * fan_out];
            for (o, &wv) in orow.iter_mut().zip(wr) {
                *o += a * wv;
            }
        }
    }
    out
}

fn softmax_rows(m: &mut Matrix) {
    for f in 0..m.rows() {
        let row = m.row_mut(f);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

fn apply_overlay(h: &Matrix, overlay: &HiddenOverlay<'_>, hidden_layer: usize) -> Option<Matrix> {
    match overlay {
        HiddenOverlay::None => None,
        HiddenOverlay::Scale(r) => {
            let r = &r[hidden_layer];
            let mut out = h.clone();
            for f in 0..out.rows() {
                for (v, &s) in out.row_mut(f).iter_mut().zip(r) {
                    *v *= s;
                }
            }
            Some(out)
        }
        HiddenOverlay::Linear { layer, matrix } if *layer == hidden_layer => {
            let d = h.cols();
            let mut out = Matrix::zeros(h.rows(), d);
            for f in 0..h.rows() {
                let hr = h.row(f);
                let orow = out.row_mut(f);
                for (k, o) in orow.iter_mut().enumerate() {
                    let ar = matrix.row(k);
                    let mut s = 0.0;
                    for j in 0..d {
                        s += ar[j] * hr[j];
                    }
                    *o = s;
                }
            }
            Some(out)
        }
        HiddenOverlay::Linear { .. } => None,
    }
}

fn check_inputs(spec: &ModelSpec, theta: &ParameterVector, features: &Matrix) -> Result<()> {
    theta.check_matches(spec)?;
    if features.cols() != spec.input_dim {
        return Err(Error::Shape(format!(
            "features have {} columns, model expects {}",
            features.cols(),
            spec.input_dim
        )));
    }
    Ok(())
}

/// Full forward pass keeping every intermediate needed for backprop.
pub fn forward_cached(
    spec: &ModelSpec,
    theta: &ParameterVector,
    features: &Matrix,
    overlay: HiddenOverlay<'_>,
) -> Result<ForwardCache> {
    check_inputs(spec, theta, features)?;
    overlay.check(spec)?;
    let num_hidden = spec.hidden_dims.len();
    let mut layer_inputs = Vec::with_capacity(spec.num_layers());
    let mut hidden = Vec::with_capacity(num_hidden);
    let mut x = features.clone();
    for l in 0..num_hidden {
        let (w, b) = theta.layer(l);
        let mut h = affine(&x, w, b);
        for v in h.as_mut_slice() {
            *v = logistic(*v);
        }
        layer_inputs.push(x);
        x = match apply_overlay(&h, &overlay, l) {
            Some(transformed) => transformed,
            None => h.clone(),
        };
        hidden.push(h);
    }
    let (w, b) = theta.layer(num_hidden);
    let mut posteriors = affine(&x, w, b);
    layer_inputs.push(x);
    softmax_rows(&mut posteriors);
    Ok(ForwardCache {
        layer_inputs,
        hidden,
        posteriors,
    })
}

/// Class posteriors for every frame.
pub fn forward(spec: &ModelSpec, theta: &ParameterVector, features: &Matrix) -> Result<Matrix> {
    forward_with_overlay(spec, theta, features, HiddenOverlay::None)
}

pub fn forward_with_overlay(
    spec: &ModelSpec,
    theta: &ParameterVector,
    features: &Matrix,
    overlay: HiddenOverlay<'_>,
) -> Result<Matrix> {
    check_inputs(spec, theta, features)?;
    overlay.check(spec)?;
    let num_hidden = spec.hidden_dims.len();
    let mut x = features.clone();
    for l in 0..num_hidden {
        let (w, b) = theta.layer(l);
        let mut h = affine(&x, w, b);
        for v in h.as_mut_slice() {
            *v = logistic(*v);
        }
        x = apply_overlay(&h, &overlay, l).unwrap_or(h);
    }
    let (w, b) = theta.layer(num_hidden);
    let mut out = affine(&x, w, b);
    softmax_rows(&mut out);
    Ok(out)
}

/// Summed cross-entropy `Σ_f −log max(p_f[y_f], 1e-12)`.
pub fn cross_entropy_loss(posteriors: &Matrix, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Precondition(
            "cross-entropy of an empty batch".into(),
        ));
    }
    if posteriors.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} posterior rows for {} labels",
            posteriors.rows(),
            labels.len()
        )));
    }
    let k = posteriors.cols();
    let mut loss = 0.0;
    for (f, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Precondition(format!(
                "label {y} at frame {f} is outside [0, {k})"
            )));
        }
        loss -= posteriors.get(f, y).max(POSTERIOR_FLOOR).ln();
    }
    Ok(loss)
}

/// Per-frame argmax of the posteriors; ties resolve to the lowest class index.
pub fn argmax_rows(posteriors: &Matrix) -> Vec<usize> {
    (0..posteriors.rows())
        .map(|f| {
            let row = posteriors.row(f);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn predict_labels(
    spec: &ModelSpec,
    theta: &ParameterVector,
    features: &Matrix,
) -> Result<Vec<usize>> {
    Ok(argmax_rows(&forward(spec, theta, features)?))
}

/// Loss of `batch` under the model, without gradients.
pub fn batch_loss(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &FrameBatch,
    overlay: HiddenOverlay<'_>,
) -> Result<f64> {
    let p = forward_with_overlay(spec, theta, &batch.features, overlay)?;
    cross_entropy_loss(&p, &batch.labels)
}

/// Result of a backward pass.
#[derive(Clone, Debug)]
pub struct Backward {
    pub loss: f64,
    /// Gradient with respect to the base weights (zeros when not requested).
    pub theta: ParameterVector,
    pub overlay: OverlayGrad,
}

/// Summed cross-entropy and its gradient with respect to the weights.
pub fn backward(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &FrameBatch,
) -> Result<(f64, ParameterVector)> {
    let out = backward_with_overlay(spec, theta, batch, HiddenOverlay::None, true)?;
    Ok((out.loss, out.theta))
}

/// Backward pass that also differentiates the overlay parameters.
/// With `need_theta = false` the weight gradient is left at zero.
pub fn backward_with_overlay(
    spec: &ModelSpec,
    theta: &ParameterVector,
    batch: &FrameBatch,
    overlay: HiddenOverlay<'_>,
    need_theta: bool,
) -> Result<Backward> {
    let cache = forward_cached(spec, theta, &batch.features, overlay)?;
    let loss = cross_entropy_loss(&cache.posteriors, &batch.labels)?;
    let grad_out = output_delta(&cache.posteriors, &batch.labels);
    backward_from_delta(spec, theta, &cache, grad_out, overlay, need_theta, loss)
}

/// dL/dlogits = p − onehot(y), zero for frames whose true-class posterior
/// is below the floor (the clamped loss is locally constant there).
fn output_delta(posteriors: &Matrix, labels: &[usize]) -> Matrix {
    let mut delta = posteriors.clone();
    for (f, &y) in labels.iter().enumerate() {
        let row = delta.row_mut(f);
        if row[y] < POSTERIOR_FLOOR {
            row.iter_mut().for_each(|v| *v = 0.0);
        } else {
            row[y] -= 1.0;
        }
    }
    delta
}

fn backward_from_delta(
    spec: &ModelSpec,
    theta: &ParameterVector,
    cache: &ForwardCache,
    mut delta: Matrix,
    overlay: HiddenOverlay<'_>,
    need_theta: bool,
    loss: f64,
) -> Result<Backward> {
    let mut grad = theta.zeros_like();
    let mut overlay_grad = match overlay {
        HiddenOverlay::None => OverlayGrad::None,
        HiddenOverlay::Scale(r) => {
            OverlayGrad::Scale(r.iter().map(|v| vec![0.0; v.len()]).collect())
        }
        HiddenOverlay::Linear { matrix, .. } => {
            OverlayGrad::Linear(Matrix::zeros(matrix.rows(), matrix.cols()))
        }
    };
    let layout = theta.layout().to_vec();
    for l in (0..spec.num_layers()).rev() {
        let x = &cache.layer_inputs[l];
        let (w, _) = theta.layer(l);
        let fan_in = x.cols();
        let fan_out = delta.cols();
        if need_theta {
            let wblock = layout[2 * l];
            let bblock = layout[2 * l + 1];
            let g = grad.values_mut();
            for f in 0..x.rows() {
                let dr = delta.row(f);
                let (gw, gb) = g.split_at_mut(bblock.offset);
                let gw = &mut gw[wblock.offset..];
                for (gbv, &d) in gb[..fan_out].iter_mut().zip(dr) {
                    *gbv += d;
                }
                for (i, &a) in x.row(f).iter().enumerate() {
                    let row = &mut gw[i * fan_out..(i + 1) * fan_out];
                    for (gv, &d) in row.iter_mut().zip(dr) {
                        *gv += a * d;
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        // gradient w.r.t. this layer's input (the post-overlay hidden output)
        let mut dx = Matrix::zeros(x.rows(), fan_in);
        for f in 0..x.rows() {
            let dr = delta.row(f);
            let dxr = dx.row_mut(f);
            for (i, v) in dxr.iter_mut().enumerate() {
                let wr = &w[i * fan_out..(i + 1) * fan_out];
                let mut s = 0.0;
                for (&wv, &d) in wr.iter().zip(dr) {
                    s += wv * d;
                }
                *v = s;
            }
        }
        let hidden_layer = l - 1;
        let h = &cache.hidden[hidden_layer];
        let dh = match (&overlay, &mut overlay_grad) {
            (HiddenOverlay::Scale(r), OverlayGrad::Scale(gr)) => {
                let r = &r[hidden_layer];
                let gr = &mut gr[hidden_layer];
                let mut dh = dx;
                for f in 0..h.rows() {
                    let hr = h.row(f);
                    let dhr = dh.row_mut(f);
                    for k in 0..hr.len() {
                        gr[k] += dhr[k] * hr[k];
                        dhr[k] *= r[k];
                    }
                }
                dh
            }
            (HiddenOverlay::Linear { layer, matrix }, OverlayGrad::Linear(ga))
                if *layer == hidden_layer =>
            {
                let d = h.cols();
                let mut dh = Matrix::zeros(h.rows(), d);
                for f in 0..h.rows() {
                    let hr = h.row(f);
                    let dxr = dx.row(f);
                    let dhr = dh.row_mut(f);
                    for (k, &dk) in dxr.iter().enumerate() {
                        let gar = ga.row_mut(k);
                        let ar = matrix.row(k);
                        for j in 0..d {
                            gar[j] += dk * hr[j];
                            dhr[j] += dk * ar[j];
                        }
                    }
                }
                dh
            }
            _ => dx,
        };
        let mut dz = dh;
        for (v, &hv) in dz.as_mut_slice().iter_mut().zip(h.as_slice()) {
            *v *= hv * (1.0 - hv);
        }
        delta = dz;
    }
    Ok(Backward {
        loss,
        theta: grad,
        overlay: overlay_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn_core::gradcheck::finite_diff_check;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rows: usize, dim: usize, classes: usize, seed: u64) -> FrameBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * dim)
            .map(|_| rng.random_range(-1.5..1.5))
            .collect();
        let labels: Vec<usize> = (0..rows).map(|_| rng.random_range(0..classes)).collect();
        FrameBatch::new(
            Matrix::from_vec(rows, dim, data).unwrap(),
            labels,
            vec![false; rows],
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_posteriors() {
        let spec = ModelSpec::new(3, vec![4], 5).unwrap();
        let theta = ParameterVector::zeros(spec.layout());
        let batch = random_batch(7, 3, 5, 1);
        let p = forward(&spec, &theta, &batch.features).unwrap();
        for v in p.as_slice() {
            assert!((v - 0.2).abs() < 1e-15);
        }
        assert_eq!(
            predict_labels(&spec, &theta, &batch.features).unwrap(),
            vec![0; 7]
        );
    }

    #[test]
    fn hand_evaluated_two_class_network() {
        // one hidden layer with 2 units, identity-like weights
        let spec = ModelSpec::new(2, vec![2], 2).unwrap();
        let values = vec![
            1.0, 0.0, 0.0, 1.0, // W1
            0.0, 0.0, // b1
            1.0, 0.0, 0.0, 1.0, // W2
            0.5, -0.5, // b2
        ];
        let theta = ParameterVector::from_values(spec.layout(), values).unwrap();
        let x = Matrix::from_rows(&[vec![2.0, -1.0]]).unwrap();
        let p = forward(&spec, &theta, &x).unwrap();
        let h0 = 1.0 / (1.0 + (-2.0f64).exp());
        let h1 = 1.0 / (1.0 + 1.0f64.exp());
        let z0 = h0 + 0.5;
        let z1 = h1 - 0.5;
        let p0 = z0.exp() / (z0.exp() + z1.exp());
        assert!((p.get(0, 0) - p0).abs() < 1e-15);
        assert!((p.get(0, 1) - (1.0 - p0)).abs() < 1e-15);
    }

    #[test]
    fn rows_sum_to_one() {
        let spec = ModelSpec::new(4, vec![8, 8], 6).unwrap();
        let theta = spec.init_params(3);
        let batch = random_batch(50, 4, 6, 2);
        let p = forward(&spec, &theta, &batch.features).unwrap();
        for f in 0..p.rows() {
            let s: f64 = p.row(f).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            assert!(p.row(f).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn loss_special_values() {
        let one_hot = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(cross_entropy_loss(&one_hot, &[0, 1]).unwrap(), 0.0);
        let uniform = Matrix::from_rows(&[vec![0.25; 4], vec![0.25; 4], vec![0.25; 4]]).unwrap();
        let l = cross_entropy_loss(&uniform, &[0, 1, 3]).unwrap();
        assert!((l - 3.0 * 4f64.ln()).abs() < 1e-12);
        let wrong = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let l = cross_entropy_loss(&wrong, &[1, 1]).unwrap();
        assert!((l - 2.0 * 1e12f64.ln()).abs() < 1e-9);
        assert!(cross_entropy_loss(&Matrix::zeros(0, 2), &[]).is_err());
        assert!(cross_entropy_loss(&one_hot, &[0, 2]).is_err());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let spec = ModelSpec::new(3, vec![4], 2).unwrap();
        let theta = spec.init_params(0);
        assert!(forward(&spec, &theta, &Matrix::zeros(2, 4)).is_err());
        let other = ModelSpec::new(3, vec![5], 2).unwrap();
        assert!(forward(&other, &theta, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let spec = ModelSpec::new(3, vec![4], 2).unwrap();
        let theta = spec.init_params(11);
        let batch = random_batch(5, 3, 2, 12);
        let (_, grad) = backward(&spec, &theta, &batch).unwrap();
        let report = finite_diff_check(
            |p| {
                let t = theta.with_values(p.to_vec()).unwrap();
                batch_loss(&spec, &t, &batch, HiddenOverlay::None).unwrap()
            },
            theta.values(),
            grad.values(),
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }

    #[test]
    fn saturated_posteriors_have_zero_gradient() {
        let spec = ModelSpec::new(2, vec![2], 2).unwrap();
        let mut theta = ParameterVector::zeros(spec.layout());
        // output bias strongly favours class 1
        let last = theta.layout()[3];
        theta.block_mut(&last).copy_from_slice(&[-40.0, 40.0]);
        let batch = random_batch(4, 2, 1, 5).with_labels(vec![1; 4]).unwrap();
        let (loss, grad) = backward(&spec, &theta, &batch).unwrap();
        assert!(loss < 1e-9);
        assert!(grad.max_abs() <= 1e-9);
    }

    #[test]
    fn gradient_is_additive_over_frames() {
        let spec = ModelSpec::new(3, vec![5, 4], 3).unwrap();
        let theta = spec.init_params(2);
        let batch = random_batch(9, 3, 3, 4);
        let a = batch.slice(0, 4);
        let b = batch.slice(4, 9);
        let (la, ga) = backward(&spec, &theta, &a).unwrap();
        let (lb, gb) = backward(&spec, &theta, &b).unwrap();
        let (l, g) = backward(&spec, &theta, &batch).unwrap();
        assert!((l - (la + lb)).abs() <= 1e-12);
        for ((x, y), z) in g.values().iter().zip(ga.values()).zip(gb.values()) {
            assert!((x - (y + z)).abs() <= 1e-12);
        }
    }

    #[test]
    fn tie_break_prefers_lowest_index() {
        let p = Matrix::from_rows(&[vec![0.1, 0.4, 0.1, 0.4], vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(argmax_rows(&p), vec![1, 2]);
    }
}
