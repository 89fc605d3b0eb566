//! Bidirectional GRU encoder and the tag-augmented source representation.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::gru::gru_cell;
use crate::model::Pass;
use crate::phrase::Span;
use crate::scalar::Scalar;

/// Immutable per-position annotations h_i = [→h_i, ←h_i].
pub struct EncodedSource {
    pub h: Vec<Var>,
    /// Backward state at the first position (it has read the whole
    /// sentence); seeds the decoder state.
    pub h_bwd_first: Var,
}

impl EncodedSource {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

/// The mutable tag components of the tagged annotations. The decoder zeroes
/// a consumed phrase's rows; everything else in h′ never changes, so the
/// tagged vectors are rebuilt from `h` whenever the tags move.
#[derive(Clone)]
pub struct TagState<F> {
    rows: Vec<Vec<F>>,
    cache: Option<Vec<Var>>,
}

impl<F: Scalar> TagState<F> {
    pub fn new(tag_matrix: &[Vec<u8>]) -> Self {
        let rows = tag_matrix
            .iter()
            .map(|row| row.iter().map(|&t| if t == 0 { F::zero() } else { F::one() }).collect())
            .collect();
        TagState { rows, cache: None }
    }

    pub fn all_zero(positions: usize, n_slots: usize) -> Self {
        TagState { rows: vec![vec![F::zero(); n_slots]; positions], cache: None }
    }

    pub fn rows(&self) -> &[Vec<F>] {
        &self.rows
    }

    pub fn zero_span(&mut self, span: Span) {
        for pos in span.begin..span.end {
            for t in &mut self.rows[pos] {
                *t = F::zero();
            }
        }
        self.cache = None;
    }

    /// Tagged annotations h′_i = [h_i, tag_i] under the current tags.
    pub fn tagged(&mut self, g: &mut Graph<F>, enc: &EncodedSource) -> Result<Vec<Var>> {
        if let Some(cached) = &self.cache {
            return Ok(cached.clone());
        }
        if self.rows.len() != enc.len() {
            return Err(Error::Shape(format!(
                "tag rows {} vs source positions {}",
                self.rows.len(),
                enc.len()
            )));
        }
        let mut tagged = Vec::with_capacity(enc.len());
        for (i, &h) in enc.h.iter().enumerate() {
            let tag = g.vector(&self.rows[i]);
            tagged.push(g.concat_rows(&[h, tag])?);
        }
        self.cache = Some(tagged.clone());
        Ok(tagged)
    }
}

/// Run both GRU directions over the source and concatenate per position.
pub fn encode<F: Scalar>(p: &mut Pass<F>, source_ids: &[usize]) -> Result<EncodedSource> {
    if source_ids.is_empty() {
        return Err(Error::Contract("cannot encode an empty sentence".into()));
    }
    let embed = p.p(p.wiring().enc_embed);
    let fwd_ids = p.wiring().enc_fwd;
    let bwd_ids = p.wiring().enc_bwd;
    let d_h = p.config().d_hidden;

    let embedded: Vec<Var> = source_ids
        .iter()
        .map(|&id| p.g.row(embed, id))
        .collect::<Result<_>>()?;

    let mut fwd = Vec::with_capacity(source_ids.len());
    let mut state = p.g.zeros(&[d_h]);
    for &x in &embedded {
        state = gru_cell(p, &fwd_ids, x, state)?;
        fwd.push(state);
    }

    let mut bwd = vec![state; source_ids.len()];
    let mut back = p.g.zeros(&[d_h]);
    for (i, &x) in embedded.iter().enumerate().rev() {
        back = gru_cell(p, &bwd_ids, x, back)?;
        bwd[i] = back;
    }

    let h = fwd
        .iter()
        .zip(&bwd)
        .map(|(&f, &b)| p.g.concat_rows(&[f, b]))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedSource { h, h_bwd_first: bwd[0] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig, Variant};

    fn model(seed: u64) -> Model<f64> {
        Model::new(ModelConfig::new(Variant::Baseline, 3, 4, 5, 16, 8), seed).unwrap()
    }

    #[test]
    fn rejects_empty_sentence() {
        let m = model(0);
        let mut p = m.pass();
        assert!(encode(&mut p, &[]).is_err());
    }

    #[test]
    fn annotation_width_is_twice_hidden() {
        let m = model(1);
        let mut p = m.pass();
        let enc = encode(&mut p, &[4, 5, 6]).unwrap();
        assert_eq!(enc.len(), 3);
        for &h in &enc.h {
            assert_eq!(p.g.shape(h), &[8]);
        }
    }

    #[test]
    fn tag_layout_follows_slots() {
        // phrases at positions {2,3}, {6,7,8}, {10,11} with n_p = 5
        let mut tag_matrix = vec![vec![0u8; 5]; 13];
        for pos in [2usize, 3] {
            tag_matrix[pos][0] = 1;
        }
        for pos in [6usize, 7, 8] {
            tag_matrix[pos][1] = 1;
        }
        for pos in [10usize, 11] {
            tag_matrix[pos][2] = 1;
        }
        let m = model(2);
        let mut p = m.pass();
        let ids: Vec<usize> = (0..13).map(|i| 4 + i % 10).collect();
        let enc = encode(&mut p, &ids).unwrap();
        let mut tags = TagState::new(&tag_matrix);
        let tagged = tags.tagged(&mut p.g, &enc).unwrap();
        let expect = |slot: Option<usize>| {
            let mut t = [0.0f64; 5];
            if let Some(s) = slot {
                t[s] = 1.0;
            }
            t
        };
        for (pos, slot) in [
            (0, None),
            (1, None),
            (2, Some(0)),
            (3, Some(0)),
            (4, None),
            (5, None),
            (6, Some(1)),
            (7, Some(1)),
            (8, Some(1)),
            (9, None),
            (10, Some(2)),
            (11, Some(2)),
            (12, None),
        ] {
            let row = p.g.value(tagged[pos]);
            assert_eq!(row.len(), 8 + 5);
            assert_eq!(&row[8..], &expect(slot), "position {pos}");
        }
    }

    #[test]
    fn single_token_sentence_concatenates_one_step_per_direction() {
        let m = model(3);
        let mut p = m.pass();
        let enc = encode(&mut p, &[7]).unwrap();
        let h = p.g.value(enc.h[0]).to_vec();

        // recompute each direction as an isolated cell from zero state
        let mut q = m.pass();
        let embed = q.p(m.wiring.enc_embed);
        let x = q.g.row(embed, 7).unwrap();
        let z = q.g.zeros(&[4]);
        let f = crate::gru::gru_cell(&mut q, &m.wiring.enc_fwd, x, z).unwrap();
        let b = crate::gru::gru_cell(&mut q, &m.wiring.enc_bwd, x, z).unwrap();
        let mut expect = q.g.value(f).to_vec();
        expect.extend_from_slice(q.g.value(b));
        assert_eq!(h, expect);
    }

    #[test]
    fn reversing_sentence_swaps_direction_roles() {
        let m = model(4);
        // swap fwd and bwd weights into a second model
        let mut swapped = m.clone();
        for gate in ["wz", "uz", "bz", "wr", "ur", "br", "wc", "uc", "bc"] {
            let f = m.params.get(&format!("enc.fwd.{gate}")).unwrap().clone();
            let b = m.params.get(&format!("enc.bwd.{gate}")).unwrap().clone();
            *swapped.params.get_mut(&format!("enc.fwd.{gate}")).unwrap() = b;
            *swapped.params.get_mut(&format!("enc.bwd.{gate}")).unwrap() = f;
        }
        let ids = [4usize, 9, 6, 5];
        let rev: Vec<usize> = ids.iter().rev().copied().collect();
        let mut p = m.pass();
        let enc = encode(&mut p, &ids).unwrap();
        let mut q = swapped.pass();
        let enc_rev = encode(&mut q, &rev).unwrap();
        let d = m.config.d_hidden;
        for i in 0..ids.len() {
            let fwd_of_x = &p.g.value(enc.h[i])[..d];
            let bwd_of_rev = &q.g.value(enc_rev.h[ids.len() - 1 - i])[d..];
            for (a, b) in fwd_of_x.iter().zip(bwd_of_rev) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let m = model(5);
        let run = || {
            let mut p = m.pass();
            let enc = encode(&mut p, &[4, 5, 6, 7]).unwrap();
            enc.h.iter().map(|&h| p.g.value(h).to_vec()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zeroing_tags_rebuilds_only_tag_components() {
        let m = model(6);
        let mut p = m.pass();
        let enc = encode(&mut p, &[4, 5, 6]).unwrap();
        let mut tag_matrix = vec![vec![0u8; 5]; 3];
        tag_matrix[1][2] = 1;
        let mut tags = TagState::new(&tag_matrix);
        let before: Vec<Vec<f64>> = {
            let t = tags.tagged(&mut p.g, &enc).unwrap();
            t.iter().map(|&v| p.g.value(v).to_vec()).collect()
        };
        tags.zero_span(Span::new(1, 2));
        let after: Vec<Vec<f64>> = {
            let t = tags.tagged(&mut p.g, &enc).unwrap();
            t.iter().map(|&v| p.g.value(v).to_vec()).collect()
        };
        for (pos, (b, a)) in before.iter().zip(&after).enumerate() {
            assert_eq!(&b[..8], &a[..8], "annotation part moved at {pos}");
        }
        assert_eq!(before[1][8 + 2], 1.0);
        assert_eq!(after[1][8 + 2], 0.0);
    }
}
