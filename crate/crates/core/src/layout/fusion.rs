//! Head-group fusion: packing the query heads of one kv group into the row
//! dimension, so a single kv load serves the whole group.
//!
//! Fused rows are head-major within each query row: fused row `r` of a
//! request maps to original row `r / g` and head-in-group `r % g`, keeping a
//! request's rows contiguous. For kv head `h`, head-in-group `j` addresses
//! original query head `h * g + j`.

use crate::config::HeadConfig;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::ragged::RaggedTensor;

/// Fused row (request relative) -> (original row, head in group).
#[inline]
pub fn fused_to_original(fused_row: usize, group_size: usize) -> (usize, usize) {
    (fused_row / group_size, fused_row % group_size)
}

/// (original row, head in group) -> fused row (request relative).
#[inline]
pub fn original_to_fused(row: usize, head_in_group: usize, group_size: usize) -> usize {
    row * group_size + head_in_group
}

/// Index bijection of one fusion, with the inverse scatter.
#[derive(Clone, Copy, Debug)]
pub struct HeadFusionMap {
    pub group_size: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
}

impl HeadFusionMap {
    /// Scatter a fused tensor (rows `l_qo * g` per request, width
    /// `num_kv_heads * head_dim`) back to the original layout (rows `l_qo`,
    /// width `num_qo_heads * head_dim`).
    pub fn scatter<T: Scalar>(&self, fused: &RaggedTensor<T>) -> Result<RaggedTensor<T>> {
        let g = self.group_size;
        let d = self.head_dim;
        let fused_lens = fused.lens();
        if fused_lens.iter().any(|l| l % g != 0) {
            return Err(Error::DimensionMismatch {
                context: "fused row counts must be multiples of the group size".into(),
            });
        }
        let orig_lens: Vec<usize> = fused_lens.iter().map(|l| l / g).collect();
        let mut out = RaggedTensor::zeros(&orig_lens, self.num_kv_heads * g * d);
        for request in 0..fused.batch() {
            for fr in 0..fused_lens[request] {
                let (row, j) = fused_to_original(fr, g);
                let src = fused.row(fused.global_row(request, fr));
                let dst_row = out.global_row(request, row);
                let width = out.row_width();
                let dst = &mut out.data_mut()[dst_row * width..(dst_row + 1) * width];
                for h in 0..self.num_kv_heads {
                    let qo_head = h * g + j;
                    dst[qo_head * d..(qo_head + 1) * d].copy_from_slice(&src[h * d..(h + 1) * d]);
                }
            }
        }
        Ok(out)
    }
}

/// Fuse query heads into the row dimension: request rows become `l_qo * g`,
/// and column block `h` of fused row `r` holds original head `h*g + r%g` of
/// original row `r/g`. Returns the fused tensor and the map that scatters
/// outputs back.
pub fn fuse_head_groups<T: Scalar>(
    q: &RaggedTensor<T>,
    cfg: &HeadConfig,
) -> Result<(RaggedTensor<T>, HeadFusionMap)> {
    let g = cfg.group_size();
    let d = cfg.head_dim;
    if q.row_width() != cfg.num_qo_heads * d {
        return Err(Error::DimensionMismatch {
            context: format!(
                "query row width {} does not match {} heads of dim {d}",
                q.row_width(),
                cfg.num_qo_heads
            ),
        });
    }
    let fused_lens: Vec<usize> = q.lens().iter().map(|l| l * g).collect();
    let mut fused = RaggedTensor::zeros(&fused_lens, cfg.num_kv_heads * d);
    for request in 0..q.batch() {
        for fr in 0..fused_lens[request] {
            let (row, j) = fused_to_original(fr, g);
            let src = q.row(q.global_row(request, row));
            let dst_row = fused.global_row(request, fr);
            let width = fused.row_width();
            let dst = &mut fused.data_mut()[dst_row * width..(dst_row + 1) * width];
            for h in 0..cfg.num_kv_heads {
                let qo_head = h * g + j;
                dst[h * d..(h + 1) * d].copy_from_slice(&src[qo_head * d..(qo_head + 1) * d]);
            }
        }
    }
    Ok((
        fused,
        HeadFusionMap {
            group_size: g,
            num_kv_heads: cfg.num_kv_heads,
            head_dim: d,
        },
    ))
}
