use crate::{AutodiffError, Graph, Result, Tensor, Var};

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the worst `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` receives a fresh graph and one trainable leaf per entry of `params`.
pub fn check_gradients<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(AutodiffError::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        let v = g.scalar(out)?;
        if !v.is_finite() {
            return Err(AutodiffError::NonFinite("gradient check objective"));
        }
        Ok(v)
    };

    let g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t)).collect();
    let out = f(&g, &vars)?;
    if !g.scalar(out)?.is_finite() {
        return Err(AutodiffError::NonFinite("gradient check objective"));
    }
    let grads = g.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params[pi].len());
        for (j, &a) in analytic.iter().enumerate() {
            let orig = params[pi].data()[j];
            probe[pi].data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe[pi].data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let scale = 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    Ok(worst)
}
