use ndarray::Array2;

use super::{backward_into, backward_reference, denoiser_forward, reference_forward, DenoiserParams};
use crate::diffusion::weighted_eps_loss;
use crate::error::Result;
use crate::transition::WeightMap;

/// One training example for checking gradients end to end, reference branch included.
#[derive(Debug, Clone)]
pub struct GradCheckInputs {
    pub x_t: Array2<f64>,
    pub t: usize,
    pub cond: Array2<f64>,
    pub ref_mel: Array2<f64>,
    pub eps_true: Array2<f64>,
    pub weights: WeightMap,
}

fn loss(params: &DenoiserParams, inp: &GradCheckInputs) -> Result<f64> {
    let hidden = reference_forward(params, &inp.ref_mel, &inp.cond)?.hidden();
    let (eps_hat, _) = denoiser_forward(params, &inp.x_t, inp.t, &inp.cond, &hidden)?;
    Ok(weighted_eps_loss(&inp.eps_true, &eps_hat, &inp.weights)?.0)
}

/// Analytic gradient of the weighted loss over every parameter.
pub fn analytic_gradient(params: &DenoiserParams, inp: &GradCheckInputs) -> Result<DenoiserParams> {
    let ro = reference_forward(params, &inp.ref_mel, &inp.cond)?;
    let (eps_hat, trace) = denoiser_forward(params, &inp.x_t, inp.t, &inp.cond, &ro.hidden())?;
    let (_, dl) = weighted_eps_loss(&inp.eps_true, &eps_hat, &inp.weights)?;
    let mut grads = DenoiserParams::zeros_like(*params.config());
    let d_ref = backward_into(params, &trace, &dl, &mut grads)?;
    backward_reference(params, &ro, &d_ref, &mut grads)?;
    Ok(grads)
}

/// Compares the analytic gradient with central differences of step `h` over
/// every parameter. Returns the largest `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check(params: &DenoiserParams, inputs: &GradCheckInputs, h: f64) -> Result<f64> {
    let analytic = analytic_gradient(params, inputs)?;
    let flat_a: Vec<f64> = analytic
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.iter().copied())
        .collect();

    let mut p = params.clone();
    let sizes: Vec<usize> = p.tensors().iter().map(|(_, t)| t.len()).collect();
    let mut flat_n = Vec::with_capacity(flat_a.len());
    for (ti, &len) in sizes.iter().enumerate() {
        for k in 0..len {
            let orig = p.tensors_mut()[ti][k];
            p.tensors_mut()[ti][k] = orig + h;
            let up = loss(&p, inputs)?;
            p.tensors_mut()[ti][k] = orig - h;
            let down = loss(&p, inputs)?;
            p.tensors_mut()[ti][k] = orig;
            flat_n.push((up - down) / (2.0 * h));
        }
    }

    Ok(flat_a
        .iter()
        .zip(&flat_n)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max))
}
