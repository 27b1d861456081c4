//! Learnable 1-D positional embeddings over a 2-D patch grid, with
//! corner-aligned bilinear resizing for resolution changes.
//!
//! Two layouts are supported: a single (possibly enlarged) first-layer
//! embedding, and per-layer embeddings added to the input of every
//! intermediate encoder layer. Spatial rows come first in raster order;
//! non-spatial slots ([CLS]/[DET]) sit at the end and are never resampled.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PePlacement {
    FirstLayerOnly,
    EveryLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionEmbedding {
    /// Spatial layout (rows, cols) of the patch grid the values were trained at.
    pub grid: (usize, usize),
    /// Non-spatial slots appended after the spatial rows.
    pub extra_slots: usize,
    /// `(rows * cols + extra_slots) x dim` values.
    pub values: Tensor,
    pub placement: PePlacement,
}

impl PositionEmbedding {
    pub fn new(grid: (usize, usize), extra_slots: usize, values: Tensor, placement: PePlacement) -> Result<Self> {
        let expected = grid.0 * grid.1 + extra_slots;
        if values.rank() != 2 || values.shape()[0] != expected {
            return Err(Error::invalid(
                "position_embedding",
                format!("grid {:?} + {} slots needs {} rows, got shape {:?}", grid, extra_slots, expected, values.shape()),
            ));
        }
        Ok(PositionEmbedding {
            grid,
            extra_slots,
            values,
            placement,
        })
    }

    pub fn random(
        grid: (usize, usize),
        extra_slots: usize,
        dim: usize,
        placement: PePlacement,
        rng: &mut impl Rng,
    ) -> Self {
        let rows = grid.0 * grid.1 + extra_slots;
        PositionEmbedding {
            grid,
            extra_slots,
            values: Tensor::trunc_normal(&[rows, dim], 0.02, rng),
            placement,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.values.numel()
    }
}

/// Corner-aligned source coordinate of destination index `i`.
fn src_coord(i: usize, dst_len: usize, src_len: usize) -> f64 {
    if dst_len <= 1 || src_len <= 1 {
        0.0
    } else {
        i as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64
    }
}

/// Sparse bilinear resampling weights from a `src` grid to a `dst` grid.
///
/// Entry `r` of the result lists `(source_row, weight)` pairs for destination
/// spatial row `r` (raster order). Corner alignment maps source corners
/// exactly onto destination corners, so equal grids yield exact identity.
pub fn bilinear_grid_weights(src: (usize, usize), dst: (usize, usize)) -> Vec<Vec<(usize, f64)>> {
    let (sr, sc) = src;
    let (dr, dc) = dst;
    let mut weights = Vec::with_capacity(dr * dc);
    for i in 0..dr {
        let y = src_coord(i, dr, sr);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(sr - 1);
        let wy = y - y0 as f64;
        for j in 0..dc {
            let x = src_coord(j, dc, sc);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(sc - 1);
            let wx = x - x0 as f64;
            let mut terms: Vec<(usize, f64)> = Vec::with_capacity(4);
            let mut push = |row: usize, w: f64| {
                if w == 0.0 {
                    return;
                }
                if let Some(t) = terms.iter_mut().find(|(r, _)| *r == row) {
                    t.1 += w;
                } else {
                    terms.push((row, w));
                }
            };
            push(y0 * sc + x0, (1.0 - wy) * (1.0 - wx));
            push(y0 * sc + x1, (1.0 - wy) * wx);
            push(y1 * sc + x0, wy * (1.0 - wx));
            push(y1 * sc + x1, wy * wx);
            weights.push(terms);
        }
    }
    weights
}

/// Row-mixing table covering spatial rows plus pass-through extra slots,
/// shaped for [`crate::autodiff::Var::mix_rows`].
pub fn resize_row_weights(
    src: (usize, usize),
    dst: (usize, usize),
    extra_slots: usize,
) -> Rc<Vec<Vec<(usize, f64)>>> {
    let mut weights = bilinear_grid_weights(src, dst);
    let spatial_src = src.0 * src.1;
    for e in 0..extra_slots {
        weights.push(vec![(spatial_src + e, 1.0)]);
    }
    Rc::new(weights)
}

/// Resamples the spatial rows to `dst_grid`; extra slots are copied verbatim.
pub fn interpolate_pe(pe: &PositionEmbedding, dst_grid: (usize, usize)) -> Result<PositionEmbedding> {
    if dst_grid.0 == 0 || dst_grid.1 == 0 {
        return Err(Error::invalid("interpolate_pe", format!("destination grid {dst_grid:?} has a zero extent")));
    }
    if dst_grid == pe.grid {
        return Ok(pe.clone());
    }
    let dim = pe.dim();
    let spatial_src = pe.grid.0 * pe.grid.1;
    let spatial_dst = dst_grid.0 * dst_grid.1;
    let weights = bilinear_grid_weights(pe.grid, dst_grid);
    let mut values = Tensor::zeros(&[spatial_dst + pe.extra_slots, dim]);
    for (r, terms) in weights.iter().enumerate() {
        for &(src_row, w) in terms {
            let src = pe.values.row(src_row).to_vec();
            let dst = &mut values.data_mut()[r * dim..(r + 1) * dim];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    // Extra slots are bit-identical, never resampled.
    for e in 0..pe.extra_slots {
        let src = pe.values.row(spatial_src + e).to_vec();
        values.data_mut()[(spatial_dst + e) * dim..(spatial_dst + e + 1) * dim].copy_from_slice(&src);
    }
    PositionEmbedding::new(dst_grid, pe.extra_slots, values, pe.placement)
}

/// First-layer plus per-intermediate-layer embeddings (the heavier scheme).
#[derive(Clone, Debug)]
pub struct TypeIPe {
    pub first: PositionEmbedding,
    pub intermediates: Vec<PositionEmbedding>,
}

/// Bookkeeping for a pre-train to detection PE conversion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PeParamDelta {
    /// PE parameters before conversion (spatial + [CLS] slot).
    pub before: usize,
    /// PE parameters after conversion (all layers, spatial + [DET] slots).
    pub after: usize,
}

impl PeParamDelta {
    pub fn added(&self) -> i64 {
        self.after as i64 - self.before as i64
    }
}

/// Builds the per-layer scheme from a pre-trained first-layer embedding:
/// the first layer is interpolated, layers `2..depth` get freshly
/// initialized embeddings on `intermediate_grid`, and every embedding keeps
/// one slot per detection token.
pub fn build_type1(
    pretrained: &PositionEmbedding,
    depth: usize,
    det_tokens: usize,
    first_grid: (usize, usize),
    intermediate_grid: (usize, usize),
    rng: &mut impl Rng,
) -> Result<(TypeIPe, PeParamDelta)> {
    if depth == 0 {
        return Err(Error::invalid("build_type1", "depth must be at least 1"));
    }
    let dim = pretrained.dim();
    let spatial = interpolate_pe(&strip_extras(pretrained), first_grid)?;
    let first = append_fresh_extras(&spatial, det_tokens, PePlacement::EveryLayer, rng)?;
    let intermediates: Vec<PositionEmbedding> = (1..depth)
        .map(|_| PositionEmbedding::random(intermediate_grid, det_tokens, dim, PePlacement::EveryLayer, rng))
        .collect();
    let after = first.param_count() + intermediates.iter().map(|p| p.param_count()).sum::<usize>();
    let delta = PeParamDelta {
        before: pretrained.param_count(),
        after,
    };
    Ok((TypeIPe { first, intermediates }, delta))
}

/// Builds the single enlarged first-layer embedding: the pre-trained spatial
/// grid is interpolated to `stored_grid` (chosen at least as large as the
/// largest training resolution) and no intermediate embeddings exist.
pub fn build_type2(
    pretrained: &PositionEmbedding,
    det_tokens: usize,
    stored_grid: (usize, usize),
    rng: &mut impl Rng,
) -> Result<(PositionEmbedding, PeParamDelta)> {
    let spatial = interpolate_pe(&strip_extras(pretrained), stored_grid)?;
    let pe = append_fresh_extras(&spatial, det_tokens, PePlacement::FirstLayerOnly, rng)?;
    let delta = PeParamDelta {
        before: pretrained.param_count(),
        after: pe.param_count(),
    };
    Ok((pe, delta))
}

fn strip_extras(pe: &PositionEmbedding) -> PositionEmbedding {
    let spatial = pe.grid.0 * pe.grid.1;
    let dim = pe.dim();
    let values = Tensor::from_vec(
        vec![spatial, dim],
        pe.values.data()[..spatial * dim].to_vec(),
    )
    .expect("spatial rows");
    PositionEmbedding {
        grid: pe.grid,
        extra_slots: 0,
        values,
        placement: pe.placement,
    }
}

fn append_fresh_extras(
    spatial: &PositionEmbedding,
    extra_slots: usize,
    placement: PePlacement,
    rng: &mut impl Rng,
) -> Result<PositionEmbedding> {
    let dim = spatial.dim();
    let fresh = Tensor::trunc_normal(&[extra_slots, dim], 0.02, rng);
    let mut data = spatial.values.data().to_vec();
    data.extend_from_slice(fresh.data());
    PositionEmbedding::new(
        spatial.grid,
        extra_slots,
        Tensor::from_vec(vec![spatial.grid.0 * spatial.grid.1 + extra_slots, dim], data)?,
        placement,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pe_from(grid: (usize, usize), extra: usize, dim: usize, seed: u64) -> PositionEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PositionEmbedding::random(grid, extra, dim, PePlacement::FirstLayerOnly, &mut rng)
    }

    #[test]
    fn identity_resize_is_exact() {
        let pe = pe_from((4, 5), 3, 8, 1);
        let out = interpolate_pe(&pe, (4, 5)).unwrap();
        assert_eq!(out.values, pe.values);
    }

    #[test]
    fn constant_values_survive_any_resize() {
        let values = Tensor::full(&[2 * 3 + 1, 4], 0.7);
        let pe = PositionEmbedding::new((2, 3), 1, values, PePlacement::FirstLayerOnly).unwrap();
        let out = interpolate_pe(&pe, (5, 9)).unwrap();
        assert!(out.values.data().iter().all(|&x| (x - 0.7).abs() < 1e-15));
    }

    #[test]
    fn two_by_two_to_three_by_three_closed_form() {
        // Scalar grid [[0,1],[2,3]]; corner-aligned bilinear puts the corners
        // at 0, 1, 2, 3 and the center at 1.5.
        let values = Tensor::from_vec(vec![4, 1], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let pe = PositionEmbedding::new((2, 2), 0, values, PePlacement::FirstLayerOnly).unwrap();
        let out = interpolate_pe(&pe, (3, 3)).unwrap();
        let expected = [0.0, 0.5, 1.0, 1.0, 1.5, 2.0, 2.0, 2.5, 3.0];
        for (a, e) in out.values.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15, "{a} vs {e}");
        }
    }

    #[test]
    fn interpolation_is_linear_in_values() {
        let a = pe_from((3, 4), 2, 6, 2);
        let mut b = a.clone();
        b.values = pe_from((3, 4), 2, 6, 3).values;
        let (alpha, beta) = (1.75, -0.4);
        let mut combo = a.clone();
        for (c, (&x, &y)) in combo
            .values
            .data_mut()
            .iter_mut()
            .zip(a.values.data().iter().zip(b.values.data()))
        {
            *c = alpha * x + beta * y;
        }
        let ia = interpolate_pe(&a, (7, 5)).unwrap();
        let ib = interpolate_pe(&b, (7, 5)).unwrap();
        let ic = interpolate_pe(&combo, (7, 5)).unwrap();
        for ((&x, &y), &z) in ia.values.data().iter().zip(ib.values.data()).zip(ic.values.data()) {
            assert!((alpha * x + beta * y - z).abs() < 1e-12);
        }
    }

    #[test]
    fn extra_slots_are_bit_identical() {
        let pe = pe_from((6, 6), 5, 16, 9);
        let out = interpolate_pe(&pe, (11, 3)).unwrap();
        for e in 0..5 {
            let src = pe.values.row(36 + e);
            let dst = out.values.row(33 + e);
            for (a, b) in src.iter().zip(dst) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn zero_extent_destination_rejected() {
        let pe = pe_from((2, 2), 0, 4, 4);
        assert!(interpolate_pe(&pe, (0, 3)).is_err());
        assert!(interpolate_pe(&pe, (3, 0)).is_err());
    }

    #[test]
    fn type1_grids_and_counts() {
        // Desk-scale analogue of the published conversion: 14x14 pre-trained
        // grid enlarged to 32x54 with same-sized intermediates.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dim = 8;
        let pre = pe_from((14, 14), 1, dim, 10);
        let (set, delta) = build_type1(&pre, 12, 100, (32, 54), (32, 54), &mut rng).unwrap();
        assert_eq!(set.first.grid, (32, 54));
        assert_eq!(set.first.extra_slots, 100);
        assert_eq!(set.intermediates.len(), 11);
        for mid in &set.intermediates {
            assert_eq!(mid.grid, (32, 54));
            assert_eq!(mid.extra_slots, 100);
            assert_eq!(mid.placement, PePlacement::EveryLayer);
        }
        let per_layer = (32 * 54 + 100) * dim;
        assert_eq!(delta.after, 12 * per_layer);
        assert_eq!(delta.before, (14 * 14 + 1) * dim);
        assert_eq!(delta.added(), (12 * per_layer) as i64 - ((14 * 14 + 1) * dim) as i64);
    }

    #[test]
    fn type1_single_layer_has_no_intermediates() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pre = pe_from((4, 4), 1, 8, 13);
        let (set, _) = build_type1(&pre, 1, 10, (8, 8), (4, 4), &mut rng).unwrap();
        assert!(set.intermediates.is_empty());
    }

    #[test]
    fn type2_row_count_and_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let pre = pe_from((14, 14), 1, 8, 15);
        let (pe, delta) = build_type2(&pre, 100, (50, 84), &mut rng).unwrap();
        assert_eq!(pe.values.shape()[0], 50 * 84 + 100);
        assert_eq!(pe.placement, PePlacement::FirstLayerOnly);
        assert_eq!(delta.after, (50 * 84 + 100) * 8);

        // Same-size fine-tune leaves byte count unchanged (minus [CLS], plus [DET]).
        let (same, _) = build_type2(&pre, 1, (14, 14), &mut rng).unwrap();
        assert_eq!(same.param_count(), pre.param_count());
    }

    #[test]
    fn type2_is_smaller_than_type1_at_equal_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let pre = pe_from((14, 14), 1, 8, 17);
        for depth in 2..6 {
            let (t1, d1) = build_type1(&pre, depth, 16, (20, 20), (20, 20), &mut rng).unwrap();
            let (t2, d2) = build_type2(&pre, 16, (20, 20), &mut rng).unwrap();
            assert!(d2.after < d1.after);
            assert_eq!(t1.intermediates.len(), depth - 1);
            assert_eq!(t2.param_count(), d2.after);
        }
    }
}
