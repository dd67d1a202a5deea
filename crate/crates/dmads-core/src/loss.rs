//! Pixel losses and the deep-supervision loss assembly.

use crate::error::{Error, Result};
use crate::net::{ForwardOutput, LossKind};
use crate::tensor::{Element, Graph, Tensor, Var};

/// Scalar loss of a logit map against a binary ground-truth tensor.
pub fn pixel_loss<T: Element>(
    g: &Graph<T>,
    pred_logits: Var,
    gt: &Tensor<T>,
    kind: LossKind,
) -> Result<Var> {
    match kind {
        LossKind::Bce => g.bce_with_logits(pred_logits, gt),
        LossKind::SoftIou => g.soft_iou_loss(pred_logits, gt),
    }
}

/// Total loss with its components, so callers can verify the decomposition
/// `total = final + theta * sum(deep)` exactly as computed.
pub struct LossBreakdown {
    pub total: Var,
    pub final_loss: Var,
    pub deep_losses: Vec<Var>,
}

/// `L_total = L(final) + theta * sum_i L(deep_i)`; the deep sum is folded
/// left to right in tap order so the decomposition is reproducible.
pub fn deep_supervised_loss<T: Element>(
    g: &Graph<T>,
    out: &ForwardOutput,
    gt: &Tensor<T>,
    theta: f64,
    kind: LossKind,
) -> Result<LossBreakdown> {
    let n = out.deep_maps.len();
    if n != 0 && n != 6 {
        return Err(Error::InvalidConfig {
            op: "deep_supervised_loss",
            reason: format!("expected 0 or 6 companion maps, got {n}"),
        });
    }
    let final_loss = pixel_loss(g, out.final_map, gt, kind)?;
    let mut deep_losses = Vec::with_capacity(n);
    for &map in &out.deep_maps {
        deep_losses.push(pixel_loss(g, map, gt, kind)?);
    }
    let total = match deep_losses.split_first() {
        None => final_loss,
        Some((&first, rest)) => {
            let mut acc = first;
            for &l in rest {
                acc = g.add(acc, l)?;
            }
            let weighted = g.scale(acc, T::from_f64(theta))?;
            g.add(final_loss, weighted)?
        }
    };
    Ok(LossBreakdown {
        total,
        final_loss,
        deep_losses,
    })
}
