//! Gated recurrent unit cell, shared by the encoder directions, the decoder
//! and the phrase embedder.

use crate::autodiff::Var;
use crate::error::Result;
use crate::model::{GruIds, Pass};
use crate::scalar::Scalar;

/// One GRU step:
/// z = σ(Wz·x + Uz·s + bz), r = σ(Wr·x + Ur·s + br),
/// ŝ = tanh(Wc·x + Uc·(r⊙s) + bc), s′ = (1−z)⊙s + z⊙ŝ.
pub fn gru_cell<F: Scalar>(p: &mut Pass<F>, ids: &GruIds, x: Var, s_prev: Var) -> Result<Var> {
    let (wz, uz, bz) = (p.p(ids.wz), p.p(ids.uz), p.p(ids.bz));
    let (wr, ur, br) = (p.p(ids.wr), p.p(ids.ur), p.p(ids.br));
    let (wc, uc, bc) = (p.p(ids.wc), p.p(ids.uc), p.p(ids.bc));
    let g = &mut p.g;

    let zx = g.matmul(wz, x)?;
    let zs = g.matmul(uz, s_prev)?;
    let zsum = g.add(zx, zs)?;
    let zin = g.add(zsum, bz)?;
    let z = g.sigmoid(zin);

    let rx = g.matmul(wr, x)?;
    let rs = g.matmul(ur, s_prev)?;
    let rsum = g.add(rx, rs)?;
    let rin = g.add(rsum, br)?;
    let r = g.sigmoid(rin);

    let gated = g.mul(r, s_prev)?;
    let cx = g.matmul(wc, x)?;
    let cs = g.matmul(uc, gated)?;
    let csum = g.add(cx, cs)?;
    let cin = g.add(csum, bc)?;
    let cand = g.tanh(cin);

    let ones = g.vector(&vec![F::one(); g.value(z).len()]);
    let keep = g.sub(ones, z)?;
    let kept = g.mul(keep, s_prev)?;
    let new = g.mul(z, cand)?;
    g.add(kept, new)
}
