//! Central finite-difference gradient checking in double precision.

use crate::{Graph, Tensor, TensorError, Var};

/// Outcome of a finite-difference check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest per-input relative error, `|g_a - g_n|_2 / max(|g_a|_2, |g_n|_2)`.
    pub max_rel_err: f64,
    /// Number of scalar coordinates perturbed.
    pub coords: usize,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Norm-wise relative error; two vanishing gradients compare equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Compare the reverse-mode gradient of the scalar built by `f` against
/// central differences with step `h`, for every coordinate of `inputs`.
pub fn check_gradients<F, E>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck, E>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |xs: &[Tensor<f64>]| -> Result<f64, E> {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let l = f(&mut g, &vs)?;
        Ok(g.scalar(l))
    };

    let mut worst = 0.0f64;
    let mut coords = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[k].numel()]);
        let mut numeric = vec![0.0; inputs[k].numel()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        coords += numeric.len();
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(GradCheck { max_rel_err: worst, coords })
}
