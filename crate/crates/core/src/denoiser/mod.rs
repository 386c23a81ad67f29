//! Noise predictor with a mirrored reference branch.
//!
//! Both branches are stacks of gated residual 1D-convolution blocks running
//! along time with mel bands (or hidden units) as channels. The reference
//! branch encodes the reference spectrogram; after every block its output is
//! passed through a zero-initialized linear map and added to the gated
//! activation of the matching denoising block, before that block's residual
//! projection. With freshly initialized injection maps the reference has no
//! effect on the output at all.
//!
//! Everything is double precision and differentiated by hand.

mod backward;
mod checkpoint;
mod forward;
mod gradcheck;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backward::{backward, backward_into, backward_reference, Gradients};
pub use checkpoint::{read_checkpoint, read_checkpoint_from, write_checkpoint, write_checkpoint_to, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    denoiser_forward, reference_forward, step_embedding, ForwardTrace, ReferenceOutput,
    ReferencedDenoiser,
};
pub use gradcheck::{grad_check, GradCheckInputs};

pub const KERNEL_SIZE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `tanh(filter) * sigmoid(gate)` in blocks, `tanh` in the step MLP.
    #[default]
    TanhGate,
    /// Passes the filter half straight through and skips the step-MLP
    /// nonlinearity; used to check gradients of the purely multilinear network.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub n_mels: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub emb_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            cond_dim: 2,
            hidden: 64,
            layers: 4,
            emb_dim: 32,
            activation: Activation::TanhGate,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mels == 0 || self.cond_dim == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::param("denoiser dimensions must be positive"));
        }
        if self.emb_dim == 0 || self.emb_dim % 2 != 0 {
            return Err(Error::param(format!(
                "step embedding size must be even and positive, got {}",
                self.emb_dim
            )));
        }
        Ok(())
    }
}

/// Dense map applied column-wise: `out = w * in + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    fn xavier<R: Rng>(rng: &mut R, out_dim: usize, in_dim: usize) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Self {
            w: Array2::from_shape_simple_fn((out_dim, in_dim), || rng.random_range(-a..a)),
            b: Array1::zeros(out_dim),
        }
    }
}

/// Width-3 temporal convolution, zero-padded, one weight matrix per tap.
/// Tap `j` reads frame `t + j - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    pub taps: Vec<Array2<f64>>,
    pub b: Array1<f64>,
}

impl Conv1d {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            taps: (0..KERNEL_SIZE)
                .map(|_| Array2::zeros((out_dim, in_dim)))
                .collect(),
            b: Array1::zeros(out_dim),
        }
    }

    fn xavier<R: Rng>(rng: &mut R, out_dim: usize, in_dim: usize) -> Self {
        let a = (6.0 / (KERNEL_SIZE * in_dim + out_dim) as f64).sqrt();
        Self {
            taps: (0..KERNEL_SIZE)
                .map(|_| Array2::from_shape_simple_fn((out_dim, in_dim), || rng.random_range(-a..a)))
                .collect(),
            b: Array1::zeros(out_dim),
        }
    }
}

/// Gated residual block: `h + res(gate(conv(h)))`. The conv emits the
/// filter half in rows `0..H` and the gate half in rows `H..2H`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub conv: Conv1d,
    pub res: Linear,
}

impl Block {
    fn zeros(hidden: usize) -> Self {
        Self {
            conv: Conv1d::zeros(2 * hidden, hidden),
            res: Linear::zeros(hidden, hidden),
        }
    }

    fn xavier<R: Rng>(rng: &mut R, hidden: usize) -> Self {
        Self {
            conv: Conv1d::xavier(rng, 2 * hidden, hidden),
            res: Linear::xavier(rng, hidden, hidden),
        }
    }
}

/// All learnable tensors. The same layout doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    pub in_proj: Linear,
    pub cond_proj: Linear,
    pub step_fc1: Linear,
    pub step_fc2: Linear,
    pub blocks: Vec<Block>,
    pub zero_linears: Vec<Linear>,
    pub out_proj: Linear,
    /// Direct `F -> F` map from `x_t` to the output, zero at init. With
    /// `H < F` the hidden path alone cannot carry every noise direction.
    pub skip_proj: Linear,
    pub ref_in_proj: Linear,
    pub ref_cond_proj: Linear,
    pub ref_blocks: Vec<Block>,
    /// Bumped on every in-place update; traces remember the value they saw.
    version: u64,
}

impl DenoiserParams {
    /// Random initialization. The reference branch starts as an exact copy of
    /// the denoising branch and every injection map is exactly zero.
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (f, d, h, e) = (config.n_mels, config.cond_dim, config.hidden, config.emb_dim);
        let in_proj = Linear::xavier(&mut rng, h, f);
        let cond_proj = Linear::xavier(&mut rng, h, d);
        let step_fc1 = Linear::xavier(&mut rng, h, e);
        let step_fc2 = Linear::xavier(&mut rng, h, h);
        let blocks: Vec<Block> = (0..config.layers).map(|_| Block::xavier(&mut rng, h)).collect();
        let out_proj = Linear::xavier(&mut rng, f, h);
        Ok(Self {
            config,
            ref_in_proj: in_proj.clone(),
            ref_cond_proj: cond_proj.clone(),
            ref_blocks: blocks.clone(),
            in_proj,
            cond_proj,
            step_fc1,
            step_fc2,
            blocks,
            zero_linears: (0..config.layers).map(|_| Linear::zeros(h, h)).collect(),
            out_proj,
            skip_proj: Linear::zeros(f, f),
            version: 0,
        })
    }

    /// Same layout, every entry zero.
    pub fn zeros_like(config: DenoiserConfig) -> Self {
        let (f, d, h, e) = (config.n_mels, config.cond_dim, config.hidden, config.emb_dim);
        Self {
            config,
            in_proj: Linear::zeros(h, f),
            cond_proj: Linear::zeros(h, d),
            step_fc1: Linear::zeros(h, e),
            step_fc2: Linear::zeros(h, h),
            blocks: (0..config.layers).map(|_| Block::zeros(h)).collect(),
            zero_linears: (0..config.layers).map(|_| Linear::zeros(h, h)).collect(),
            out_proj: Linear::zeros(f, h),
            skip_proj: Linear::zeros(f, f),
            ref_in_proj: Linear::zeros(h, f),
            ref_cond_proj: Linear::zeros(h, d),
            ref_blocks: (0..config.layers).map(|_| Block::zeros(h)).collect(),
            version: 0,
        }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn touch(&mut self) {
        self.version += 1;
    }

    /// Fills the injection maps with small random values, e.g. to exercise
    /// every gradient path in tests.
    pub fn randomize_injection(&mut self, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for z in &mut self.zero_linears {
            z.w.mapv_inplace(|_| rng.random_range(-scale..scale));
            z.b.mapv_inplace(|_| rng.random_range(-scale..scale));
        }
        self.touch();
    }

    /// Named views of every tensor in declaration order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        fn lin<'a>(out: &mut Vec<(String, &'a [f64])>, name: &str, l: &'a Linear) {
            out.push((format!("{name}.w"), l.w.as_slice().expect("standard layout")));
            out.push((format!("{name}.b"), l.b.as_slice().expect("standard layout")));
        }
        fn block<'a>(out: &mut Vec<(String, &'a [f64])>, name: &str, b: &'a Block) {
            for (j, tap) in b.conv.taps.iter().enumerate() {
                out.push((format!("{name}.conv.w{j}"), tap.as_slice().expect("standard layout")));
            }
            out.push((format!("{name}.conv.b"), b.conv.b.as_slice().expect("standard layout")));
            lin(out, &format!("{name}.res"), &b.res);
        }
        lin(&mut out, "in_proj", &self.in_proj);
        lin(&mut out, "cond_proj", &self.cond_proj);
        lin(&mut out, "step_fc1", &self.step_fc1);
        lin(&mut out, "step_fc2", &self.step_fc2);
        for (i, b) in self.blocks.iter().enumerate() {
            block(&mut out, &format!("blocks.{i}"), b);
        }
        for (i, z) in self.zero_linears.iter().enumerate() {
            lin(&mut out, &format!("zero_linears.{i}"), z);
        }
        lin(&mut out, "out_proj", &self.out_proj);
        lin(&mut out, "skip_proj", &self.skip_proj);
        lin(&mut out, "ref_in_proj", &self.ref_in_proj);
        lin(&mut out, "ref_cond_proj", &self.ref_cond_proj);
        for (i, b) in self.ref_blocks.iter().enumerate() {
            block(&mut out, &format!("ref_blocks.{i}"), b);
        }
        out
    }

    /// Mutable views in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.touch();
        let mut out: Vec<&mut [f64]> = Vec::new();
        fn lin<'a>(out: &mut Vec<&'a mut [f64]>, l: &'a mut Linear) {
            out.push(l.w.as_slice_mut().expect("standard layout"));
            out.push(l.b.as_slice_mut().expect("standard layout"));
        }
        fn block<'a>(out: &mut Vec<&'a mut [f64]>, b: &'a mut Block) {
            for tap in &mut b.conv.taps {
                out.push(tap.as_slice_mut().expect("standard layout"));
            }
            out.push(b.conv.b.as_slice_mut().expect("standard layout"));
            lin(out, &mut b.res);
        }
        lin(&mut out, &mut self.in_proj);
        lin(&mut out, &mut self.cond_proj);
        lin(&mut out, &mut self.step_fc1);
        lin(&mut out, &mut self.step_fc2);
        for b in &mut self.blocks {
            block(&mut out, b);
        }
        for z in &mut self.zero_linears {
            lin(&mut out, z);
        }
        lin(&mut out, &mut self.out_proj);
        lin(&mut out, &mut self.skip_proj);
        lin(&mut out, &mut self.ref_in_proj);
        lin(&mut out, &mut self.ref_cond_proj);
        for b in &mut self.ref_blocks {
            block(&mut out, b);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Names of tensors that belong to the reference branch.
    pub fn is_reference_tensor(name: &str) -> bool {
        name.starts_with("ref_")
    }

    pub(crate) fn same_layout(&self, other: &Self) -> Result<()> {
        if self.config != other.config {
            return Err(Error::shape(self.config, other.config));
        }
        Ok(())
    }
}
