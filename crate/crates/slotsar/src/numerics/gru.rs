//! Gated recurrent unit cell built from graph primitives.
//!
//! Convention (fixed for testability): update gate z, reset gate r,
//! candidate h̃, blended as h' = (1 − z) ⊙ h + z ⊙ h̃, with
//!   z = sigmoid(x·W_z + h·U_z + b_z)
//!   r = sigmoid(x·W_r + h·U_r + b_r)
//!   h̃ = tanh(x·W_h + (r ⊙ h)·U_h + b_h)

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, Var};

/// Graph handles for one GRU cell's nine parameter tensors.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

/// One GRU step on row-stacked states: h and x are [M, D].
pub fn gru_cell(g: &mut Graph, h: Var, x: Var, p: &GruParams) -> Result<Var> {
    if g.value(h).shape() != g.value(x).shape() {
        return Err(Error::shape(
            "gru_cell",
            format!(
                "h {:?} vs x {:?}",
                g.value(h).shape(),
                g.value(x).shape()
            ),
        ));
    }
    let gate = |g: &mut Graph, x: Var, h: Var, w: Var, u: Var, b: Var| -> Result<Var> {
        let xw = g.matmul(x, w)?;
        let hu = g.matmul(h, u)?;
        let s = g.add(xw, hu)?;
        g.add_row_vec(s, b)
    };
    let z_pre = gate(g, x, h, p.w_z, p.u_z, p.b_z)?;
    let z = g.sigmoid(z_pre)?;
    let r_pre = gate(g, x, h, p.w_r, p.u_r, p.b_r)?;
    let r = g.sigmoid(r_pre)?;
    let rh = g.mul(r, h)?;
    let cand_pre = gate(g, x, rh, p.w_h, p.u_h, p.b_h)?;
    let cand = g.tanh(cand_pre)?;
    // h' = (1 - z) ⊙ h + z ⊙ h̃
    let nz = g.neg(z)?;
    let one_minus_z = g.add_const(nz, 1.0)?;
    let keep = g.mul(one_minus_z, h)?;
    let take = g.mul(z, cand)?;
    g.add(keep, take)
}
