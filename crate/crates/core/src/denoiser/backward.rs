use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Axis, Zip};

use super::forward::{BranchTrace, ForwardTrace, ReferenceOutput};
use super::{Activation, Block, Conv1d, DenoiserParams, Linear};
use crate::error::{Error, Result};

/// Parameter gradients (same layout as the parameters) plus the gradient with
/// respect to the injected reference states.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: DenoiserParams,
    pub ref_hidden: Vec<Array2<f64>>,
}

fn check_version(params: &DenoiserParams, seen: u64) -> Result<()> {
    if params.version() != seen {
        return Err(Error::StaleTrace(format!(
            "trace recorded at parameter version {seen}, parameters are at {}",
            params.version()
        )));
    }
    Ok(())
}

fn linear_backward(l: &Linear, g: &mut Linear, input: &Array2<f64>, dout: &Array2<f64>) -> Array2<f64> {
    general_mat_mul(1.0, dout, &input.t(), 1.0, &mut g.w);
    g.b += &dout.sum_axis(Axis(1));
    l.w.t().dot(dout)
}

fn conv_backward(c: &Conv1d, g: &mut Conv1d, h: &Array2<f64>, dz: &Array2<f64>) -> Array2<f64> {
    let n = h.ncols();
    g.b += &dz.sum_axis(Axis(1));
    general_mat_mul(1.0, dz, &h.t(), 1.0, &mut g.taps[1]);
    let mut dh = c.taps[1].t().dot(dz);
    if n > 1 {
        general_mat_mul(1.0, &dz.slice(s![.., 1..]), &h.slice(s![.., ..n - 1]).t(), 1.0, &mut g.taps[0]);
        general_mat_mul(1.0, &dz.slice(s![.., ..n - 1]), &h.slice(s![.., 1..]).t(), 1.0, &mut g.taps[2]);
        general_mat_mul(1.0, &c.taps[0].t(), &dz.slice(s![.., 1..]), 1.0, &mut dh.slice_mut(s![.., ..n - 1]));
        general_mat_mul(1.0, &c.taps[2].t(), &dz.slice(s![.., ..n - 1]), 1.0, &mut dh.slice_mut(s![.., 1..]));
    }
    dh
}

/// Backpropagates through block `i` given the gradient at its output.
/// Returns the gradients at the gated activation (where injection happens)
/// and at the block input.
fn block_backward(
    block: &Block,
    g: &mut Block,
    activation: Activation,
    trace: &BranchTrace,
    i: usize,
    dout: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let dg = linear_backward(&block.res, &mut g.res, &trace.gated[i], dout);
    let hidden = dg.nrows();
    let mut dz = Array2::zeros((2 * hidden, dg.ncols()));
    match activation {
        Activation::TanhGate => {
            let (filt, gate) = (&trace.filt[i], &trace.gate[i]);
            Zip::from(dz.slice_mut(s![..hidden, ..]))
                .and(&dg)
                .and(filt)
                .and(gate)
                .for_each(|d, &dg, &f, &s| *d = dg * s * (1.0 - f * f));
            Zip::from(dz.slice_mut(s![hidden.., ..]))
                .and(&dg)
                .and(filt)
                .and(gate)
                .for_each(|d, &dg, &f, &s| *d = dg * f * s * (1.0 - s));
        }
        Activation::Linear => dz.slice_mut(s![..hidden, ..]).assign(&dg),
    }
    let mut dh = conv_backward(&block.conv, &mut g.conv, &trace.inputs[i], &dz);
    dh += dout;
    (dg, dh)
}

/// Accumulates the denoising-branch gradients of a loss with gradient
/// `loss_grad` at the output into `grads`, and returns the gradient with
/// respect to each injected reference state.
pub fn backward_into(
    params: &DenoiserParams,
    trace: &ForwardTrace,
    loss_grad: &Array2<f64>,
    grads: &mut DenoiserParams,
) -> Result<Vec<Array2<f64>>> {
    check_version(params, trace.version)?;
    params.same_layout(grads)?;
    if loss_grad.dim() != trace.x.dim() {
        return Err(Error::shape(trace.x.dim(), loss_grad.dim()));
    }
    let c = *params.config();
    let br = &trace.branch;

    let mut dh = linear_backward(&params.out_proj, &mut grads.out_proj, &br.output, loss_grad);
    general_mat_mul(1.0, loss_grad, &trace.x.t(), 1.0, &mut grads.skip_proj.w);
    grads.skip_proj.b += &loss_grad.sum_axis(Axis(1));
    let mut d_ref = vec![Array2::zeros((0, 0)); c.layers];
    for i in (0..c.layers).rev() {
        let (dg, dh_in) = block_backward(&params.blocks[i], &mut grads.blocks[i], c.activation, br, i, &dh);
        d_ref[i] = linear_backward(&params.zero_linears[i], &mut grads.zero_linears[i], &trace.ref_hidden[i], &dg);
        dh = dh_in;
    }

    linear_backward(&params.in_proj, &mut grads.in_proj, &trace.x, &dh);
    linear_backward(&params.cond_proj, &mut grads.cond_proj, &trace.cond, &dh);
    let dstep = dh.sum_axis(Axis(1));
    grads.step_fc2.b += &dstep;
    for (o, &d) in dstep.iter().enumerate() {
        grads.step_fc2.w.row_mut(o).scaled_add(d, &trace.step_hidden);
    }
    let mut du = params.step_fc2.w.t().dot(&dstep);
    if c.activation == Activation::TanhGate {
        Zip::from(&mut du).and(&trace.step_hidden).for_each(|d, &s| *d *= 1.0 - s * s);
    }
    grads.step_fc1.b += &du;
    for (o, &d) in du.iter().enumerate() {
        grads.step_fc1.w.row_mut(o).scaled_add(d, &trace.emb);
    }
    Ok(d_ref)
}

pub fn backward(
    params: &DenoiserParams,
    trace: &ForwardTrace,
    loss_grad: &Array2<f64>,
) -> Result<Gradients> {
    let mut grads = DenoiserParams::zeros_like(*params.config());
    let ref_hidden = backward_into(params, trace, loss_grad, &mut grads)?;
    Ok(Gradients {
        params: grads,
        ref_hidden,
    })
}

/// Accumulates reference-branch gradients given the gradient at each block
/// output (as returned by [`backward_into`]).
pub fn backward_reference(
    params: &DenoiserParams,
    out: &ReferenceOutput,
    d_hidden: &[Array2<f64>],
    grads: &mut DenoiserParams,
) -> Result<()> {
    check_version(params, out.version)?;
    params.same_layout(grads)?;
    let c = *params.config();
    if d_hidden.len() != c.layers {
        return Err(Error::shape(c.layers, d_hidden.len()));
    }
    let tr = &out.trace;
    for d in d_hidden {
        if d.dim() != tr.output.dim() {
            return Err(Error::shape(tr.output.dim(), d.dim()));
        }
    }
    let mut dh = d_hidden[c.layers - 1].clone();
    for i in (0..c.layers).rev() {
        let (_, mut dh_in) = block_backward(&params.ref_blocks[i], &mut grads.ref_blocks[i], c.activation, tr, i, &dh);
        if i > 0 {
            dh_in += &d_hidden[i - 1];
        }
        dh = dh_in;
    }
    linear_backward(&params.ref_in_proj, &mut grads.ref_in_proj, &out.ref_mel, &dh);
    linear_backward(&params.ref_cond_proj, &mut grads.ref_cond_proj, &out.cond, &dh);
    Ok(())
}
