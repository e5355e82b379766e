//! Spatial-broadcast MLP decoder and the reconstruction objective.
//!
//! Each slot is tiled to all N token positions, a learned positional
//! embedding is added, and a shared 3-layer MLP maps every position to
//! D_feat + 1 channels. The final channel is softmaxed across slots into
//! per-token alpha weights that mix the per-slot reconstructions.

use crate::encoders::{linear, LinVars};
use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};

/// Decoder parameter handles.
#[derive(Clone, Copy, Debug)]
pub struct DecoderVars {
    /// Positional embedding, [N, D_slot].
    pub pos: Var,
    pub l1: LinVars,
    pub l2: LinVars,
    pub l3: LinVars,
}

/// Graph handles for the decoder outputs.
#[derive(Clone, Debug)]
pub struct DecodeOutput {
    /// Mixed reconstruction, [N, D_feat].
    pub recon: Var,
    /// Per-token mixing weights over slots, [2, N].
    pub alpha: Var,
    /// Per-slot reconstructions, each [N, D_feat].
    pub per_slot: Vec<Var>,
}

/// Decode a [2, D_slot] slot matrix into per-token features and alpha
/// masks.
pub fn decode(g: &mut Graph, slots: Var, vars: &DecoderVars, d_feat: usize) -> Result<DecodeOutput> {
    let t = g.value(slots);
    if t.rank() != 2 {
        return Err(Error::shape("decode", "slots must be [K, D_slot]"));
    }
    let k_slots = t.rows();
    let n = g.value(vars.pos).rows();
    let mut per_slot = Vec::with_capacity(k_slots);
    let mut logits = Vec::with_capacity(k_slots);
    for k in 0..k_slots {
        let row = g.select_row(slots, k)?;
        let tiled = g.repeat_row(row, n)?;
        let placed = g.add(tiled, vars.pos)?;
        let h1 = linear(g, placed, &vars.l1)?;
        let a1 = g.relu(h1)?;
        let h2 = linear(g, a1, &vars.l2)?;
        let a2 = g.relu(h2)?;
        let out = linear(g, a2, &vars.l3)?;
        if g.value(out).cols() != d_feat + 1 {
            return Err(Error::shape(
                "decode",
                format!(
                    "decoder head produced {} channels, expected {}",
                    g.value(out).cols(),
                    d_feat + 1
                ),
            ));
        }
        let feats = g.slice_cols(out, 0, d_feat)?;
        let logit = g.slice_cols(out, d_feat, 1)?;
        per_slot.push(feats);
        logits.push(g.reshape(logit, &[n])?);
    }
    let stacked = g.stack_rows(&logits)?;
    let alpha = g.softmax(stacked, 0)?;
    let mut recon = None;
    for (k, &feats) in per_slot.iter().enumerate() {
        let ak = g.select_row(alpha, k)?;
        let ak_vec = g.reshape(ak, &[n])?;
        let weighted = g.scale_rows(feats, ak_vec)?;
        recon = Some(match recon {
            None => weighted,
            Some(acc) => g.add(acc, weighted)?,
        });
    }
    Ok(DecodeOutput {
        recon: recon.expect("at least one slot"),
        alpha,
        per_slot,
    })
}

/// Mean squared error over all N·D_feat entries.
pub fn recon_loss(g: &mut Graph, target: Var, recon: Var) -> Result<Var> {
    if g.value(target).shape() != g.value(recon).shape() {
        return Err(Error::shape(
            "recon_loss",
            format!(
                "target {:?} vs reconstruction {:?}",
                g.value(target).shape(),
                g.value(recon).shape()
            ),
        ));
    }
    let diff = g.sub(recon, target)?;
    let sq = g.mul(diff, diff)?;
    g.mean_all(sq)
}
