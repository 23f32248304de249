//! `PFPO` posterior checkpoints with an optional trailing `PFFL` flow block.
//!
//! ```text
//! "PFPO"  dim u32  mean (dim f64)  covariance (dim² f64, row-major)  γ f64
//! "PFFL"  L u32    per layer: x0 (dim f64), alpha_raw f64, beta_raw f64
//! ```
//! Little-endian throughout. The flow block is absent when no flow was trained.

use std::io::{Read, Write};

use super::posterior::GaussianPosterior;
use crate::flows::{FlowStack, RadialLayer};
use crate::model::{expect_magic, read_f64s, read_u32, write_f64s, write_u32};
use crate::numerics::Matrix;
use crate::{Error, Result};

pub const POSTERIOR_MAGIC: &[u8; 4] = b"PFPO";
pub const FLOW_MAGIC: &[u8; 4] = b"PFFL";

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorCheckpoint {
    pub posterior: GaussianPosterior,
    pub prior_precision: f64,
    pub flow: Option<FlowStack>,
}

pub fn write_posterior(
    w: &mut impl Write,
    post: &GaussianPosterior,
    prior_precision: f64,
    flow: Option<&FlowStack>,
) -> Result<()> {
    w.write_all(POSTERIOR_MAGIC)?;
    write_u32(w, post.dim() as u32)?;
    write_f64s(w, post.mean())?;
    write_f64s(w, post.covariance().data())?;
    write_f64s(w, &[prior_precision])?;
    if let Some(flow) = flow {
        write_flow(w, flow, post.dim())?;
    }
    Ok(())
}

pub fn write_flow(w: &mut impl Write, flow: &FlowStack, dim: usize) -> Result<()> {
    if let Some(p) = flow.dim() {
        if p != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                actual: p,
            });
        }
    }
    w.write_all(FLOW_MAGIC)?;
    write_u32(w, flow.len() as u32)?;
    for l in &flow.layers {
        write_f64s(w, &l.x0)?;
        write_f64s(w, &[l.alpha_raw, l.beta_raw])?;
    }
    Ok(())
}

pub fn read_flow(r: &mut impl Read, dim: usize) -> Result<FlowStack> {
    expect_magic(r, FLOW_MAGIC)?;
    let count = read_u32(r, "flow length")? as usize;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let x0 = read_f64s(r, dim, "flow centre")?;
        let raw = read_f64s(r, 2, "flow scalars")?;
        layers.push(RadialLayer {
            x0,
            alpha_raw: raw[0],
            beta_raw: raw[1],
        });
    }
    FlowStack::new(layers)
}

pub fn read_posterior(r: &mut impl Read) -> Result<PosteriorCheckpoint> {
    expect_magic(r, POSTERIOR_MAGIC)?;
    let dim = read_u32(r, "dimension")? as usize;
    let mean = read_f64s(r, dim, "mean")?;
    let cov = Matrix::from_vec(dim, dim, read_f64s(r, dim * dim, "covariance")?)?;
    let prior_precision = read_f64s(r, 1, "prior precision")?[0];
    let posterior = GaussianPosterior::from_covariance(mean, cov)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    let flow = if rest.is_empty() {
        None
    } else {
        Some(read_flow(&mut rest.as_slice(), dim)?)
    };
    Ok(PosteriorCheckpoint {
        posterior,
        prior_precision,
        flow,
    })
}
