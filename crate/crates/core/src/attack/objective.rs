//! The attack loss and its exact gradient.
//!
//! For a perturbed input `xh = x + delta`, each guide `i` in each layer `l`
//! contributes a penalty built from the signed gap between its distance to
//! `xh` and the layer threshold `eta[l]`. In Euclidean layers the gap uses
//! squared distances, `w_i (|f(xh) - g_i|^2 - eta^2)`; in cosine layers it
//! uses the raw cosine distance, `w_i (d_cos - eta)`. The hinge objective
//! adds a margin and clips at zero; the sigmoid objective squashes the gap
//! instead (with the argument clamped to `[-50, 50]` before
//! exponentiation). The total loss is the sum over guides and layers plus
//! `c * |delta|^2`, and the gradient is taken with respect to `delta`.

use crate::error::{Error, Result};
use crate::knn::{KnnModel, Metric};

use super::{GuideSet, ObjectiveKind};

/// Clamp bound for the sigmoid argument.
const SIGMOID_CLAMP: f64 = 50.0;

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Evaluates the attack loss at `x + delta` and its gradient with respect
/// to `delta`. Guide features and thresholds are taken from `guides` as-is;
/// callers refresh them separately.
pub fn objective_and_grad(
    model: &KnnModel,
    guides: &GuideSet,
    x: &[f64],
    delta: &[f64],
    c: f64,
    margin: f64,
    kind: ObjectiveKind,
) -> Result<(f64, Vec<f64>)> {
    if x.len() != delta.len() {
        return Err(Error::Argument(format!(
            "x has dimension {} but delta has {}",
            x.len(),
            delta.len()
        )));
    }
    if guides.eta.len() != model.num_layers() {
        return Err(Error::Argument(format!(
            "guide set carries {} thresholds for a {}-layer model",
            guides.eta.len(),
            model.num_layers()
        )));
    }
    if !(c.is_finite() && c >= 0.0) {
        return Err(Error::Argument(format!(
            "norm weight must be non-negative, got {}",
            c
        )));
    }
    let xh: Vec<f64> = x.iter().zip(delta).map(|(a, d)| a + d).collect();
    let feats = model.embed(&xh)?;

    let mut loss = 0.0;
    let mut seeds = Vec::with_capacity(model.num_layers());
    for (l, layer) in model.layers().iter().enumerate() {
        let f = &feats[l];
        let eta = guides.eta[l];
        let mut seed = vec![0.0; f.len()];
        for (i, gi) in guides.feats[l].iter().enumerate() {
            if gi.len() != f.len() {
                return Err(Error::Argument(format!(
                    "guide {} has dimension {} in layer {} but the layer emits {}",
                    i,
                    gi.len(),
                    l,
                    f.len()
                )));
            }
            let w = guides.weights[i];
            match layer.metric {
                Metric::Euclidean => {
                    let d2: f64 = f.iter().zip(gi).map(|(a, b)| (a - b) * (a - b)).sum();
                    let gap = d2 - eta * eta;
                    // coeff = d(term)/d(d2); d(d2)/d(f) = 2 (f - g).
                    let coeff = match kind {
                        ObjectiveKind::Relu => {
                            let a = w * gap + margin;
                            if a > 0.0 {
                                loss += a;
                                w
                            } else {
                                0.0
                            }
                        }
                        ObjectiveKind::Sigmoid => {
                            let t = gap.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
                            let s = sigmoid(t);
                            loss += w * s;
                            if gap.abs() < SIGMOID_CLAMP {
                                w * s * (1.0 - s)
                            } else {
                                0.0
                            }
                        }
                    };
                    if coeff != 0.0 {
                        for (sv, (a, b)) in seed.iter_mut().zip(f.iter().zip(gi)) {
                            *sv += coeff * 2.0 * (a - b);
                        }
                    }
                }
                Metric::Cosine => {
                    let nf = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let ng = gi.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if nf == 0.0 || ng == 0.0 {
                        return Err(Error::Argument(
                            "cosine distance is undefined for the zero vector".into(),
                        ));
                    }
                    let dot: f64 = f.iter().zip(gi).map(|(a, b)| a * b).sum();
                    let cos = dot / (nf * ng);
                    let d = 1.0 - cos;
                    let gap = d - eta;
                    let coeff = match kind {
                        ObjectiveKind::Relu => {
                            let a = w * gap + margin;
                            if a > 0.0 {
                                loss += a;
                                w
                            } else {
                                0.0
                            }
                        }
                        ObjectiveKind::Sigmoid => {
                            let t = gap.clamp(-SIGMOID_CLAMP, SIGMOID_CLAMP);
                            let s = sigmoid(t);
                            loss += w * s;
                            if gap.abs() < SIGMOID_CLAMP {
                                w * s * (1.0 - s)
                            } else {
                                0.0
                            }
                        }
                    };
                    if coeff != 0.0 {
                        // d(1 - cos)/df = -(g / (|f||g|) - cos * f / |f|^2)
                        for (k, sv) in seed.iter_mut().enumerate() {
                            let dcos = gi[k] / (nf * ng) - cos * f[k] / (nf * nf);
                            *sv += coeff * (-dcos);
                        }
                    }
                }
            }
        }
        seeds.push((layer.handle, seed));
    }

    let mut grad = model.map().backward_many(&xh, &seeds)?;
    for (g, d) in grad.iter_mut().zip(delta) {
        *g += 2.0 * c * d;
        loss += c * d * d;
    }
    Ok((loss, grad))
}
