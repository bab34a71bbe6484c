//! Supervised loss algebra: hybrid alignment, asymmetric consistency, and
//! the stage losses.
//!
//! Conventions (fixed across the crate): the cosine term averages the
//! per-row cosine over the K rows; the squared-error term averages over
//! all elements.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use std::ops::Range;

/// Mixing weights of the hybrid alignment loss.
#[derive(Debug, Clone, Copy)]
pub struct AlignWeights {
    pub lambda_cos: f64,
    pub lambda_mse: f64,
}

impl Default for AlignWeights {
    fn default() -> Self {
        AlignWeights {
            lambda_cos: 1.0,
            lambda_mse: 1.0,
        }
    }
}

impl AlignWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_cos < 0.0 || self.lambda_mse < 0.0 {
            return Err(Error::InvalidArgument("alignment weights must be non-negative".into()));
        }
        if self.lambda_cos == 0.0 && self.lambda_mse == 0.0 {
            return Err(Error::InvalidArgument("alignment weights must not both be zero".into()));
        }
        Ok(())
    }
}

/// `lambda_cos * (1 - mean row-cosine) + lambda_mse * mean squared error`,
/// differentiable in both arguments.
pub fn align_loss(g: &mut Graph, h_gen: NodeId, h_target: NodeId, w: &AlignWeights) -> Result<NodeId> {
    w.validate()?;
    let cos = g.row_cosine_mean(h_gen, h_target)?;
    let neg = g.scale(cos, -w.lambda_cos)?;
    let cos_term = g.add_scalar(neg, w.lambda_cos)?;
    let mse = g.mse(h_gen, h_target)?;
    let mse_term = g.scale(mse, w.lambda_mse)?;
    g.add(cos_term, mse_term)
}

/// `1 - mean row-cosine(h_txt, sg(h_img))`; the stop-gradient makes the
/// derivative with respect to `h_img` exactly zero.
pub fn consistency_loss(g: &mut Graph, h_txt: NodeId, h_img: NodeId) -> Result<NodeId> {
    let detached = g.stop_grad(h_img);
    let cos = g.row_cosine_mean(h_txt, detached)?;
    let neg = g.scale(cos, -1.0)?;
    g.add_scalar(neg, 1.0)
}

/// Stage-2 combination over already-reduced scalars.
pub fn stage2_loss_value(ce: f64, sim_img: f64, sim_txt: f64, cons: f64) -> f64 {
    0.1 * ce + sim_img + sim_txt + cons
}

/// Graph form of the stage-2 combination.
pub fn stage2_loss(g: &mut Graph, ce: NodeId, sim_img: NodeId, sim_txt: NodeId, cons: NodeId) -> Result<NodeId> {
    let ce_term = g.scale(ce, 0.1)?;
    let a = g.add(ce_term, sim_img)?;
    let b = g.add(a, sim_txt)?;
    g.add(b, cons)
}

/// Mean token cross-entropy over the output span.
///
/// `targets` are position/token pairs in full-sequence coordinates: the
/// target at position `p` is predicted from the logits row `p - 1`. Prompt
/// positions are excluded by construction; latent pad and boundary tokens
/// are included.
pub fn stage3_ce(
    g: &mut Graph,
    logits: NodeId,
    tokens: &[u32],
    prefix_len: usize,
    output: Range<usize>,
) -> Result<NodeId> {
    if output.is_empty() {
        return Err(Error::InvalidArgument("cross-entropy over an empty output span".into()));
    }
    if output.start == 0 {
        return Err(Error::InvalidArgument("output span must not start at position 0".into()));
    }
    let idx: Vec<(usize, usize)> = output
        .clone()
        .map(|p| {
            let tok = tokens[p - prefix_len] as usize;
            (p - 1, tok)
        })
        .collect();
    let gathered = g.gather_log_softmax(logits, &idx)?;
    let total = g.sum_all(gathered)?;
    g.scale(total, -1.0 / idx.len() as f64)
}
