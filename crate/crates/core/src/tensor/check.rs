//! Central finite-difference gradient checking.

use super::{Graph, OpKind, Result, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Norms below this are treated as "no gradient" when forming relative errors.
const NORM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct InputReport {
    pub input: usize,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, 1e-6)`
    pub rel_error: f64,
    pub max_abs_error: f64,
}

/// Relative error between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(NORM_FLOOR)
}

/// Numerical gradient of a scalar function of one flat parameter vector.
pub fn numeric_gradient(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Fixed, non-degenerate projection weights used to reduce an output to a scalar.
pub fn probe_cotangent(shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |i| (1.3 * i as f64 + 0.7).sin() + 0.1)
}

/// Compares backward-pass gradients of `build` with central differences for every input.
///
/// `build` receives a fresh graph and one parameter leaf per input. Its output,
/// of any shape, is reduced to `Σ output · c` with `c` from [`probe_cotangent`]
/// outside the graph, so the reduction adds no ops of its own. With `fault`
/// set, the analytic pass runs on a graph that corrupts that op's backward rule.
pub fn check_gradients<F>(inputs: &[Tensor], build: F, step: f64, fault: Option<OpKind>) -> Result<Vec<InputReport>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = fault.map_or_else(Graph::new, Graph::with_fault);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let cot = probe_cotangent(g.shape(out));
    let grads = g.backward_with(out, &cot)?;

    let eval = |values: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars).expect("build succeeded on the analytic pass");
        g.value(out).data().iter().zip(cot.data()).map(|(a, b)| a * b).sum()
    };

    let mut reports = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.tensor(*var).into_data();
        let mut work = inputs.to_vec();
        let shape = inputs[i].shape().to_vec();
        let numeric = numeric_gradient(inputs[i].data(), step, |x| {
            work[i] = Tensor::new(shape.clone(), x.to_vec()).expect("same shape");
            eval(&work)
        });
        let max_abs_error = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        reports.push(InputReport {
            input: i,
            rel_error: relative_error(&analytic, &numeric),
            max_abs_error,
        });
    }
    Ok(reports)
}
