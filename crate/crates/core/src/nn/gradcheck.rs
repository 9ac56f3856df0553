//! Central finite-difference gradient checks, independent of the analytic
//! backward pass.

use super::{Gradients, LayerSpec, Model};

pub const DEFAULT_STEP: f64 = 1e-3;

/// Denominator floor of [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Flat index of the worst component.
    pub worst: usize,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn numeric_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst: 0,
        checked: analytic.len(),
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n);
        if e > out.max_rel_error || e.is_nan() {
            out.max_rel_error = e;
            out.worst = i;
        }
    }
    out
}

/// Perturbs every model parameter in turn and compares the central
/// difference of `loss` against `analytic`.
pub fn check_params<F>(model: &Model, loss: F, analytic: &Gradients, h: f64) -> GradCheck
where
    F: Fn(&Model) -> f64,
{
    let mut probe = model.clone();
    let mut numeric = Vec::with_capacity(model.count_parameters());
    let n_tensors = model.params().len();
    for t in 0..n_tensors {
        for i in 0..model.params()[t].len() {
            let orig = model.params()[t][i];
            probe.params_mut()[t][i] = orig + h;
            let up = loss(&probe);
            probe.params_mut()[t][i] = orig - h;
            let down = loss(&probe);
            probe.params_mut()[t][i] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
    }
    compare(&analytic.flat(), &numeric)
}

/// Distance of `x` from the nearest non-differentiable point of the
/// network: the smallest |pre-activation| entering a ReLU and the smallest
/// gap between the two largest values of any pooling window.
pub fn activation_margin(model: &Model, x: &[f64]) -> f64 {
    let fwd = match model.forward(x) {
        Ok(f) => f,
        Err(_) => return 0.0,
    };
    let mut margin = f64::INFINITY;
    for (i, layer) in model.layers.iter().enumerate() {
        let input = fwd.cache.layer_input(i);
        match layer.spec {
            LayerSpec::Relu => {
                for v in input {
                    margin = margin.min(v.abs());
                }
            }
            LayerSpec::MaxPool2d { window_h, window_w } => {
                let [c, h, w] = layer.shape3();
                for ch in 0..c {
                    for oy in 0..h / window_h {
                        for ox in 0..w / window_w {
                            let mut vals: Vec<f64> = (0..window_h)
                                .flat_map(|dy| {
                                    (0..window_w).map(move |dx| {
                                        (ch * h + oy * window_h + dy) * w + ox * window_w + dx
                                    })
                                })
                                .map(|k| input[k])
                                .collect();
                            if vals.len() > 1 {
                                vals.sort_by(|a, b| b.total_cmp(a));
                                margin = margin.min(vals[0] - vals[1]);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    margin
}
