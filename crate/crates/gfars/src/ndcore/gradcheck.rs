use super::{Gradients, ModelParams, NdError, NdResult, ParamVars, Tape};

/// Worst-case comparison of analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over every scalar in every parameter.
    pub max_rel_err: f64,
    /// Name of the parameter holding the worst scalar.
    pub worst_param: String,
    /// Flat index of the worst scalar within that parameter.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare the tape's gradients of `f` against central finite differences
/// `(f(x+eps) - f(x-eps)) / (2 eps)` for every scalar parameter.
///
/// `f` builds a scalar loss on the given tape from bound parameter vars; it
/// must be deterministic (any sampling fixed outside the closure) and smooth
/// at the evaluation point. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &ModelParams, eps: f64) -> NdResult<GradCheckReport>
where
    F: Fn(&Tape, &ParamVars) -> NdResult<super::Var>,
{
    let eval = |p: &ModelParams| -> NdResult<f64> {
        let tape = Tape::new();
        let vars = p.bind(&tape);
        let root = f(&tape, &vars)?;
        let v = tape.value(root);
        let out = v.scalar_value()?;
        if !out.is_finite() {
            return Err(NdError::NonFinite("grad_check objective"));
        }
        Ok(out)
    };

    let analytic: Gradients = {
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let root = f(&tape, &vars)?;
        if !tape.value(root).scalar_value()?.is_finite() {
            return Err(NdError::NonFinite("grad_check objective"));
        }
        tape.backward(root)?
    };
    let base_vars = {
        let tape = Tape::new();
        params.bind(&tape)
    };
    // Var indices from bind() depend only on registration order, so the
    // adjoint lookup below stays valid across the fresh tapes used by eval.
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };

    for (name, var) in base_vars.iter() {
        let base = params.get(name)?.clone();
        let zero;
        let a_tensor = match analytic.get(var) {
            Some(g) => g,
            None => {
                zero = base.map(|_| 0.0)?;
                &zero
            }
        };
        for i in 0..base.numel() {
            let mut plus = base.data().to_vec();
            plus[i] += eps;
            let mut minus = base.data().to_vec();
            minus[i] -= eps;

            let mut p_plus = params.clone();
            p_plus.set(name, super::Tensor::new(base.shape().to_vec(), plus)?)?;
            let mut p_minus = params.clone();
            p_minus.set(name, super::Tensor::new(base.shape().to_vec(), minus)?)?;

            let numeric = (eval(&p_plus)? - eval(&p_minus)?) / (2.0 * eps);
            let a = a_tensor.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.to_string();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
