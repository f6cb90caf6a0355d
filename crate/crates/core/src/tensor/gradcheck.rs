use super::{Graph, Tensor, TensorError, Var};

/// Relative error with an absolute floor of `1e-8` on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (input index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Central-difference check of a scalar function of one tensor.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph, Var) -> Result<Var, TensorError>,
{
    let report = grad_check_many(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(x),
        eps,
    )?;
    Ok(report.max_relative_error)
}

/// Central-difference check of a scalar function of several tensors,
/// comparing every element's autodiff gradient with
/// `(f(x + eps·e_i) - f(x - eps·e_i)) / (2·eps)`.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    if eps <= 0.0 {
        return Err(TensorError::Invalid("grad_check eps must be positive".into()));
    }
    let eval = |inputs: &[Tensor]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|t| g.param(t)).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor> = xs.to_vec();
    for (ti, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        for ei in 0..xs[ti].numel() {
            let orig = xs[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let up = eval(&work)?;
            work[ti].data_mut()[ei] = orig - eps;
            let down = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[ei];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.checked == 1 {
                report.max_relative_error = err;
                report.worst = (ti, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
