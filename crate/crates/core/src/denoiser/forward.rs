use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis};

use super::{Activation, Block, Conv1d, DenoiserParams, Linear};
use crate::diffusion::{ConditionBundle, NoisePredictor};
use crate::error::{Error, Result};

/// Sinusoidal step embedding, interleaved as `[sin(t w_0), cos(t w_0), sin(t w_1), ...]`
/// with `w_i = 10000^(-2i/dim)`.
pub fn step_embedding(t: usize, dim: usize) -> Result<Array1<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::param(format!("embedding size must be even, got {dim}")));
    }
    let mut e = Array1::zeros(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        let arg = t as f64 * freq;
        e[2 * i] = arg.sin();
        e[2 * i + 1] = arg.cos();
    }
    Ok(e)
}

pub(super) fn linear(l: &Linear, x: &Array2<f64>) -> Array2<f64> {
    let mut out = l.w.dot(x);
    out += &l.b.view().insert_axis(Axis(1));
    out
}

pub(super) fn conv(c: &Conv1d, h: &Array2<f64>) -> Array2<f64> {
    let n = h.ncols();
    let mut z = Array2::zeros((c.b.len(), n));
    z += &c.b.view().insert_axis(Axis(1));
    if n > 1 {
        general_mat_mul(1.0, &c.taps[0], &h.slice(s![.., ..n - 1]), 1.0, &mut z.slice_mut(s![.., 1..]));
        general_mat_mul(1.0, &c.taps[2], &h.slice(s![.., 1..]), 1.0, &mut z.slice_mut(s![.., ..n - 1]));
    }
    general_mat_mul(1.0, &c.taps[1], h, 1.0, &mut z);
    z
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Cached activations of one branch.
#[derive(Debug, Clone)]
pub(super) struct BranchTrace {
    /// Input of each block.
    pub inputs: Vec<Array2<f64>>,
    /// Filter output (tanh or identity).
    pub filt: Vec<Array2<f64>>,
    /// Gate output (sigmoid); unused in linear mode.
    pub gate: Vec<Array2<f64>>,
    /// Value fed to each block's residual projection.
    pub gated: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

/// Runs the blocks of one branch. `inject(i, g)` may add to the gated
/// activation of block `i` before its residual projection.
fn run_blocks(
    blocks: &[Block],
    activation: Activation,
    h0: Array2<f64>,
    mut inject: impl FnMut(usize, &mut Array2<f64>),
) -> BranchTrace {
    let hidden = h0.nrows();
    let mut trace = BranchTrace {
        inputs: Vec::with_capacity(blocks.len()),
        filt: Vec::with_capacity(blocks.len()),
        gate: Vec::with_capacity(blocks.len()),
        gated: Vec::with_capacity(blocks.len()),
        output: Array2::zeros((0, 0)),
    };
    let mut h = h0;
    for (i, block) in blocks.iter().enumerate() {
        let z = conv(&block.conv, &h);
        let (filt, gate, mut g) = match activation {
            Activation::TanhGate => {
                let filt = z.slice(s![..hidden, ..]).mapv(f64::tanh);
                let gate = z.slice(s![hidden.., ..]).mapv(sigmoid);
                let g = &filt * &gate;
                (filt, gate, g)
            }
            Activation::Linear => {
                let filt = z.slice(s![..hidden, ..]).to_owned();
                let g = filt.clone();
                (filt, Array2::zeros((0, 0)), g)
            }
        };
        inject(i, &mut g);
        let next = &h + &linear(&block.res, &g);
        trace.inputs.push(h);
        trace.filt.push(filt);
        trace.gate.push(gate);
        trace.gated.push(g);
        h = next;
    }
    trace.output = h;
    trace
}

/// Reference-branch hidden states plus what backpropagation needs.
#[derive(Debug, Clone)]
pub struct ReferenceOutput {
    pub(super) trace: BranchTrace,
    pub(super) ref_mel: Array2<f64>,
    pub(super) cond: Array2<f64>,
    pub(super) version: u64,
}

impl ReferenceOutput {
    /// Output of every reference block, before the injection maps (`L` tensors of `H x T`).
    pub fn hidden(&self) -> Vec<Array2<f64>> {
        let mut out: Vec<Array2<f64>> = self.trace.inputs.iter().skip(1).cloned().collect();
        out.push(self.trace.output.clone());
        out
    }
}

fn check_inputs(params: &DenoiserParams, mel: &Array2<f64>, cond: &Array2<f64>) -> Result<()> {
    let c = params.config();
    if mel.nrows() != c.n_mels {
        return Err(Error::shape(format!("{} mel rows", c.n_mels), mel.dim()));
    }
    if cond.dim() != (c.cond_dim, mel.ncols()) {
        return Err(Error::shape((c.cond_dim, mel.ncols()), cond.dim()));
    }
    if mel.ncols() == 0 {
        return Err(Error::shape("at least one frame", mel.dim()));
    }
    Ok(())
}

pub fn reference_forward(
    params: &DenoiserParams,
    ref_mel: &Array2<f64>,
    cond: &Array2<f64>,
) -> Result<ReferenceOutput> {
    check_inputs(params, ref_mel, cond)?;
    let h0 = linear(&params.ref_in_proj, ref_mel) + linear(&params.ref_cond_proj, cond);
    let trace = run_blocks(&params.ref_blocks, params.config().activation, h0, |_, _| {});
    Ok(ReferenceOutput {
        trace,
        ref_mel: ref_mel.clone(),
        cond: cond.clone(),
        version: params.version(),
    })
}

/// Everything the denoising-branch backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub(super) version: u64,
    pub(super) x: Array2<f64>,
    pub(super) cond: Array2<f64>,
    pub(super) emb: Array1<f64>,
    pub(super) step_hidden: Array1<f64>,
    pub(super) branch: BranchTrace,
    pub(super) ref_hidden: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn param_version(&self) -> u64 {
        self.version
    }
}

/// Predicts the noise in `x_t`. `ref_hidden` must hold one `H x T` tensor per
/// block; pass zeros to run without a reference.
pub fn denoiser_forward(
    params: &DenoiserParams,
    x_t: &Array2<f64>,
    t: usize,
    cond: &Array2<f64>,
    ref_hidden: &[Array2<f64>],
) -> Result<(Array2<f64>, ForwardTrace)> {
    check_inputs(params, x_t, cond)?;
    let c = *params.config();
    if ref_hidden.len() != c.layers {
        return Err(Error::shape(
            format!("{} reference tensors", c.layers),
            ref_hidden.len(),
        ));
    }
    for r in ref_hidden {
        if r.dim() != (c.hidden, x_t.ncols()) {
            return Err(Error::shape((c.hidden, x_t.ncols()), r.dim()));
        }
    }

    let emb = step_embedding(t, c.emb_dim)?;
    let mut s1 = params.step_fc1.w.dot(&emb) + &params.step_fc1.b;
    if c.activation == Activation::TanhGate {
        s1.mapv_inplace(f64::tanh);
    }
    let step = params.step_fc2.w.dot(&s1) + &params.step_fc2.b;

    let mut h0 = linear(&params.in_proj, x_t) + linear(&params.cond_proj, cond);
    h0 += &step.view().insert_axis(Axis(1));

    let branch = run_blocks(&params.blocks, c.activation, h0, |i, g| {
        let z = &params.zero_linears[i];
        general_mat_mul(1.0, &z.w, &ref_hidden[i], 1.0, g);
        *g += &z.b.view().insert_axis(Axis(1));
    });
    let mut eps_hat = linear(&params.out_proj, &branch.output);
    general_mat_mul(1.0, &params.skip_proj.w, x_t, 1.0, &mut eps_hat);
    eps_hat += &params.skip_proj.b.view().insert_axis(Axis(1));

    Ok((
        eps_hat,
        ForwardTrace {
            version: params.version(),
            x: x_t.clone(),
            cond: cond.clone(),
            emb,
            step_hidden: s1,
            branch,
            ref_hidden: ref_hidden.to_vec(),
        },
    ))
}

/// A denoiser with its reference hidden states computed once, for sampling.
#[derive(Debug, Clone)]
pub struct ReferencedDenoiser<'a> {
    params: &'a DenoiserParams,
    hidden: Vec<Array2<f64>>,
}

impl<'a> ReferencedDenoiser<'a> {
    /// With `use_reference == false` the injected states are all zero.
    pub fn new(
        params: &'a DenoiserParams,
        bundle: &ConditionBundle,
        use_reference: bool,
    ) -> Result<Self> {
        let c = params.config();
        let hidden = if use_reference {
            reference_forward(params, &bundle.ref_mel, &bundle.cond)?.hidden()
        } else {
            vec![Array2::zeros((c.hidden, bundle.ref_mel.ncols())); c.layers]
        };
        Ok(Self { params, hidden })
    }
}

impl NoisePredictor for ReferencedDenoiser<'_> {
    fn predict_eps(
        &self,
        x_t: &Array2<f64>,
        t: usize,
        bundle: &ConditionBundle,
    ) -> Result<Array2<f64>> {
        Ok(denoiser_forward(self.params, x_t, t, &bundle.cond, &self.hidden)?.0)
    }
}

impl NoisePredictor for DenoiserParams {
    fn predict_eps(
        &self,
        x_t: &Array2<f64>,
        t: usize,
        bundle: &ConditionBundle,
    ) -> Result<Array2<f64>> {
        let hidden = reference_forward(self, &bundle.ref_mel, &bundle.cond)?.hidden();
        Ok(denoiser_forward(self, x_t, t, &bundle.cond, &hidden)?.0)
    }
}
