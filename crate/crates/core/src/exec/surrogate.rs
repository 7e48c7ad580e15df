use nalgebra::{DMatrix, DVector};

use super::FeatureVector;

/// Fewer samples than this give a predictor that always answers unknown.
pub const MIN_SAMPLES: usize = 8;
const LAMBDA: f64 = 1e-3;

/// Ridge-regression cost model.
#[derive(Clone, Debug)]
pub struct Predictor {
    model: Option<Linear>,
}

#[derive(Clone, Debug)]
struct Linear {
    mean_x: Vec<f64>,
    mean_y: f64,
    w: Vec<f64>,
}

impl Predictor {
    pub fn is_trained(&self) -> bool {
        self.model.is_some()
    }
}

/// Fits `cost ~ w . features + b` by least squares with an L2 penalty on
/// `w`. Features that never vary get zero weight; with no varying feature
/// at all the model predicts the mean.
pub fn train_surrogate(pairs: &[(FeatureVector, f64)]) -> Predictor {
    if pairs.len() < MIN_SAMPLES {
        return Predictor { model: None };
    }
    let n = pairs.len();
    let p = pairs[0].0.len();
    let mut mean_x = vec![0.0; p];
    for (x, _) in pairs {
        for (m, v) in mean_x.iter_mut().zip(x) {
            *m += v / n as f64;
        }
    }
    let mean_y = pairs.iter().map(|(_, y)| y).sum::<f64>() / n as f64;
    let varying: Vec<usize> = (0..p)
        .filter(|&j| pairs.iter().any(|(x, _)| (x[j] - mean_x[j]).abs() > 1e-12))
        .collect();
    let mut w = vec![0.0; p];
    if !varying.is_empty() {
        let xc = DMatrix::from_fn(n, varying.len(), |i, k| {
            let j = varying[k];
            pairs[i].0[j] - mean_x[j]
        });
        let yc = DVector::from_fn(n, |i, _| pairs[i].1 - mean_y);
        // Ridge through the SVD stays stable when columns span many scales.
        let svd = xc.svd(true, true);
        let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
        let uty = u.transpose() * yc;
        let shrunk = DVector::from_fn(svd.singular_values.len(), |i, _| {
            let s = svd.singular_values[i];
            s / (s * s + LAMBDA) * uty[i]
        });
        let sol = vt.transpose() * shrunk;
        for (k, &j) in varying.iter().enumerate() {
            w[j] = sol[k];
        }
    }
    if w.iter().any(|v| !v.is_finite()) {
        w.iter_mut().for_each(|v| *v = 0.0);
    }
    Predictor {
        model: Some(Linear { mean_x, mean_y, w }),
    }
}

/// Predicted cost, or `None` while the model is untrained.
pub fn predict_cost(p: &Predictor, fv: &FeatureVector) -> Option<f64> {
    let m = p.model.as_ref()?;
    Some(
        m.mean_y
            + fv
                .iter()
                .zip(&m.mean_x)
                .zip(&m.w)
                .map(|((x, mx), w)| (x - mx) * w)
                .sum::<f64>(),
    )
}
