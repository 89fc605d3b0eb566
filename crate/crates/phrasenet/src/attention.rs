//! Content-based attention over the tagged annotations.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::Pass;
use crate::scalar::Scalar;

/// Score every valid position with the one-hidden-layer tanh scorer over
/// (s_{t−1}, h′_j, e_prev), normalize to weights α and mix the tagged
/// annotations into the context c_t = Σ α_j h′_j.
///
/// Returns the context and the full-length weight vector; masked positions
/// hold exactly zero.
pub fn attend<F: Scalar>(
    p: &mut Pass<F>,
    s_prev: Var,
    tagged: &[Var],
    e_prev: Var,
    mask: &[bool],
) -> Result<(Var, Vec<f64>)> {
    if tagged.len() != mask.len() {
        return Err(Error::Shape(format!("{} annotations vs {} mask entries", tagged.len(), mask.len())));
    }
    let valid: Vec<usize> = (0..tagged.len()).filter(|&j| mask[j]).collect();
    if valid.is_empty() {
        return Err(Error::Contract("attention over a fully masked source".into()));
    }
    let w = p.p(p.wiring().attn_w);
    let b = p.p(p.wiring().attn_b);
    let v = p.p(p.wiring().attn_v);

    let mut scores = Vec::with_capacity(valid.len());
    for &j in &valid {
        let input = p.g.concat_rows(&[s_prev, tagged[j], e_prev])?;
        let lin = p.g.matmul(w, input)?;
        let biased = p.g.add(lin, b)?;
        let hidden = p.g.tanh(biased);
        scores.push(p.g.matmul(v, hidden)?);
    }
    let score_vec = p.g.concat_rows(&scores)?;
    let alpha = p.g.softmax(score_vec)?;

    let rows: Vec<Var> = valid.iter().map(|&j| tagged[j]).collect();
    let stacked = p.g.stack_rows(&rows)?;
    let context = p.g.matmul(alpha, stacked)?;

    let mut weights = vec![0.0f64; tagged.len()];
    for (k, &j) in valid.iter().enumerate() {
        weights[j] = p.g.value(alpha)[k].to_double();
    }
    Ok((context, weights))
}
