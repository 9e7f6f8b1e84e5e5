//! Central finite-difference oracle for validating analytic gradients.
//!
//! The oracle only ever runs the forward pass, so it is independent of the
//! backward rules it checks.

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};

/// Analytic vs numeric gradient for one input tensor.
#[derive(Clone, Debug)]
pub struct GradComparison {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradComparison {
    /// `‖analytic − numeric‖∞ / max(‖numeric‖∞, ‖analytic‖∞)`, or the raw
    /// absolute difference when both gradients vanish.
    pub fn relative_error(&self) -> f64 {
        let diff = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        let scale = self
            .analytic
            .iter()
            .chain(&self.numeric)
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        if scale < 1e-12 {
            diff
        } else {
            diff / scale
        }
    }
}

/// Evaluate `f` on fresh graphs to compare the backward pass of the scalar
/// it returns against central differences with step `step`, for every input.
pub fn compare_gradients<F>(
    inputs: &[Tensor<f64>],
    step: f64,
    f: F,
) -> Result<Vec<GradComparison>, AutodiffError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.parameter(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.parameter(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut out = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v, &g).into_data();
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
        out.push(GradComparison { analytic, numeric });
    }
    Ok(out)
}

/// Worst relative error over all inputs.
pub fn max_relative_error<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<f64, AutodiffError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    Ok(compare_gradients(inputs, step, f)?
        .iter()
        .map(GradComparison::relative_error)
        .fold(0.0, f64::max))
}

/// Reduce a tensor-valued output to a scalar with fixed random weights so
/// every output element takes part in the check.
pub fn project(graph: &mut Graph<f64>, out: Var, weights: &[f64]) -> Result<Var, AutodiffError> {
    let w = graph.constant(Tensor::new(graph.shape(out).to_vec(), weights.to_vec())?);
    let prod = graph.mul(out, w)?;
    Ok(graph.sum(prod))
}
