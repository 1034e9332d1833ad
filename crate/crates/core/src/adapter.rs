//! Local patch adapter: multi-scale fusion, coordinate channels and the
//! learnable per-position (1×1) projection, with its backward pass.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamHyper, AdamState};
use crate::resample::bilinear;
use crate::rng;
use crate::tensor::{Matrix, Tensor3};

/// Resizes every scale onto the grid of the first one and stacks channels.
pub fn fuse_scales(scales: &[Tensor3]) -> Result<Tensor3> {
    let first = scales
        .first()
        .ok_or_else(|| Error::EmptyShape("fuse_scales needs at least one scale".into()))?;
    if scales.len() == 1 {
        return Ok(first.clone());
    }
    let (_, h, w) = first.shape();
    let d: usize = scales.iter().map(Tensor3::channels).sum();
    let mut data = Vec::with_capacity(d * h * w);
    for s in scales {
        let (sd, sh, sw) = s.shape();
        if sh == 0 || sw == 0 {
            return Err(Error::EmptyShape("scale with empty grid".into()));
        }
        for c in 0..sd {
            data.extend(bilinear(s.plane(c), sh, sw, h, w));
        }
    }
    Tensor3::from_vec(d, h, w, data)
}

fn linspace(n: usize, k: usize) -> f32 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * k as f32 / (n - 1) as f32
    }
}

/// Appends two coordinate channels: `x` in `[-1, 1]` across the width, then
/// `y` across the height.
pub fn add_coords(t: &Tensor3) -> Tensor3 {
    let (d, h, w) = t.shape();
    let mut data = Vec::with_capacity((d + 2) * h * w);
    data.extend_from_slice(t.as_slice());
    for _i in 0..h {
        data.extend((0..w).map(|j| linspace(w, j)));
    }
    for i in 0..h {
        data.extend(std::iter::repeat_n(linspace(h, i), w));
    }
    Tensor3::from_vec(d + 2, h, w, data).expect("sized above")
}

/// `fuse_scales` followed by `add_coords`: the adapter's input.
pub fn prepare_input(scales: &[Tensor3]) -> Result<Tensor3> {
    Ok(add_coords(&fuse_scales(scales)?))
}

/// Weights of the 1×1 projection plus their optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    /// `d_out × d_in`
    pub weight: Matrix,
    pub bias: Vec<f32>,
    pub weight_state: AdamState,
    pub bias_state: AdamState,
}

impl AdapterParams {
    /// Fan-in scaled uniform weights in `±1/√d_in`, zero bias.
    pub fn init(d_in: usize, d_out: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::EmptyShape(format!("adapter {d_in} -> {d_out}")));
        }
        let bound = 1.0 / (d_in as f32).sqrt();
        let mut r = rng::rng(seed);
        let w: Vec<f32> = (0..d_in * d_out)
            .map(|_| r.random_range(-bound..=bound))
            .collect();
        Self::from_parts(Matrix::from_vec(d_out, d_in, w)?, vec![0.0; d_out])
    }

    pub fn from_parts(weight: Matrix, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(Error::Dimension(format!(
                "bias of {} for {} outputs",
                bias.len(),
                weight.rows()
            )));
        }
        Ok(Self {
            weight_state: AdamState::new(weight.rows() * weight.cols()),
            bias_state: AdamState::new(bias.len()),
            weight,
            bias,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    /// Parameter count including optimizer moments.
    pub fn stored_floats(&self) -> usize {
        3 * (self.weight.rows() * self.weight.cols() + self.bias.len())
    }

    /// Adam on both groups; decay only on the weight.
    pub fn apply_gradients(&mut self, grads: &AdapterGrads, hyper: &AdamHyper) -> Result<()> {
        adam_step(
            self.weight.as_mut_slice(),
            grads.weight.as_slice(),
            &mut self.weight_state,
            hyper,
        )?;
        adam_step(
            &mut self.bias,
            &grads.bias,
            &mut self.bias_state,
            &hyper.without_decay(),
        )
    }
}

/// `z(:, i, j) = W · t(:, i, j) + b` at every position.
pub fn project_forward(t: &Tensor3, params: &AdapterParams) -> Result<Tensor3> {
    let (d_in, h, w) = t.shape();
    if d_in != params.d_in() {
        return Err(Error::Dimension(format!(
            "adapter expects {} input channels, got {d_in}",
            params.d_in()
        )));
    }
    let n = h * w;
    let d_out = params.d_out();
    let mut out = Vec::with_capacity(d_out * n);
    let mut acc = vec![0.0f64; n];
    for o in 0..d_out {
        acc.fill(f64::from(params.bias[o]));
        for (c, &wt) in params.weight.row(o).iter().enumerate() {
            let wt = f64::from(wt);
            for (a, &x) in acc.iter_mut().zip(t.plane(c)) {
                *a += wt * f64::from(x);
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    Tensor3::from_vec(d_out, h, w, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub weight: Matrix,
    pub bias: Vec<f32>,
}

/// Gradients of a scalar loss w.r.t. the projection, given `∂L/∂z`:
/// `∂W = Σ_ij grad_z(:,i,j) ⊗ t(:,i,j)`, `∂b = Σ_ij grad_z(:,i,j)`.
pub fn project_backward(
    t: &Tensor3,
    grad_z: &Tensor3,
    params: &AdapterParams,
) -> Result<AdapterGrads> {
    let (d_in, h, w) = t.shape();
    let (d_out, gh, gw) = grad_z.shape();
    if d_in != params.d_in() || d_out != params.d_out() || (h, w) != (gh, gw) {
        return Err(Error::Dimension(format!(
            "project_backward: input {:?}, grad {:?}, params {}x{}",
            t.shape(),
            grad_z.shape(),
            d_out,
            d_in
        )));
    }
    let mut gw_data = Vec::with_capacity(d_out * d_in);
    let mut gb = Vec::with_capacity(d_out);
    for o in 0..d_out {
        let g = grad_z.plane(o);
        gb.push(g.iter().map(|&v| f64::from(v)).sum::<f64>() as f32);
        for c in 0..d_in {
            let s: f64 = g
                .iter()
                .zip(t.plane(c))
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            gw_data.push(s as f32);
        }
    }
    Ok(AdapterGrads {
        weight: Matrix::from_vec(d_out, d_in, gw_data)?,
        bias: gb,
    })
}
