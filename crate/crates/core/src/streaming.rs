//! Single-pass streaming attention over an ordered sequence of kv tiles.
//!
//! Per query row the pass maintains a running maximum, a running softmax
//! denominator and an unnormalized output accumulator; earlier contributions
//! are rescaled whenever the maximum grows. The final state per row equals
//! the reference state over the concatenation of all tiles, with the
//! variant's logits transform and mask applied before accumulation.
//!
//! With softmax disabled the pass accumulates plain weighted value sums
//! ([`ScaleFreeState`]) and the transformed logit is used directly as the
//! pair weight.

use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};
use crate::state::{AttentionState, ScaleFreeState};
use crate::variant::{IndexContext, VariantSpec};

/// Fixed token count per gathered kv sub-tile in the execution path.
pub const KV_TILE_TOKENS: usize = 64;

/// Identity of one query row inside a tile.
#[derive(Clone, Copy, Debug)]
pub struct QueryRowMeta {
    /// Request-relative query index, `0..l_qo`.
    pub q_idx: usize,
    pub qo_head: usize,
}

/// A tile of query rows, all belonging to the same request and kv head.
pub struct QueryTile<'a, T> {
    /// `rows.len() == meta.len() * head_dim`, row-major.
    pub rows: &'a [T],
    pub meta: &'a [QueryRowMeta],
    pub head_dim: usize,
}

/// Request/head coordinates shared by every row of a query tile, used to
/// derive the per-pair [`IndexContext`] handed to hooks.
#[derive(Clone, Copy, Debug)]
pub struct TileContext {
    pub request: usize,
    pub kv_head: usize,
    pub l_qo: usize,
    pub l_kv: usize,
}

impl TileContext {
    #[inline]
    fn pair(&self, row: &QueryRowMeta, kv_idx: usize) -> IndexContext {
        IndexContext {
            request: self.request,
            q_idx: row.q_idx,
            kv_idx,
            qo_head: row.qo_head,
            kv_head: self.kv_head,
            l_qo: self.l_qo,
            l_kv: self.l_kv,
        }
    }
}

/// One gathered kv tile: `len` tokens of keys and values for a single kv
/// head, contiguous and in logical order, starting at request-relative kv
/// position `kv_start`.
#[derive(Clone, Copy, Debug)]
pub struct KvTileRef<'a, T> {
    pub keys: &'a [T],
    pub values: &'a [T],
    pub kv_start: usize,
    pub len: usize,
}

/// Ordered producer of kv tiles. A lending trait rather than `Iterator` so
/// implementations can gather into a reused staging buffer.
pub trait KvTileSource<T> {
    fn next_tile(&mut self) -> Result<Option<KvTileRef<'_, T>>>;
}

/// Tiles over plain contiguous key/value buffers, split every
/// `tile_tokens` tokens. Used by tests and by the dense oracle path.
pub struct SliceTiles<'a, T> {
    keys: &'a [T],
    values: &'a [T],
    head_dim: usize,
    tile_tokens: usize,
    kv_start: usize,
    cursor: usize,
    len: usize,
}

impl<'a, T> SliceTiles<'a, T> {
    pub fn new(
        keys: &'a [T],
        values: &'a [T],
        head_dim: usize,
        len: usize,
        tile_tokens: usize,
        kv_start: usize,
    ) -> Self {
        debug_assert_eq!(keys.len(), len * head_dim);
        debug_assert_eq!(values.len(), len * head_dim);
        Self {
            keys,
            values,
            head_dim,
            tile_tokens: tile_tokens.max(1),
            kv_start,
            cursor: 0,
            len,
        }
    }
}

impl<T> KvTileSource<T> for SliceTiles<'_, T> {
    fn next_tile(&mut self) -> Result<Option<KvTileRef<'_, T>>> {
        if self.cursor >= self.len {
            return Ok(None);
        }
        let take = self.tile_tokens.min(self.len - self.cursor);
        let lo = self.cursor * self.head_dim;
        let hi = (self.cursor + take) * self.head_dim;
        let tile = KvTileRef {
            keys: &self.keys[lo..hi],
            values: &self.values[lo..hi],
            kv_start: self.kv_start + self.cursor,
            len: take,
        };
        self.cursor += take;
        Ok(Some(tile))
    }
}

/// Per-row result of a streaming pass: an attention state when softmax is
/// on, a plain weighted sum otherwise. The scale-free form stores `lse = 0`
/// when written to partial-output slots and ignores it on merge.
#[derive(Clone, Debug, PartialEq)]
pub enum PartialState<T> {
    Softmax(AttentionState<T>),
    ScaleFree(ScaleFreeState<T>),
}

impl<T: Scalar> PartialState<T> {
    pub fn empty(dim: usize, use_softmax: bool) -> Self {
        if use_softmax {
            Self::Softmax(AttentionState::empty(dim))
        } else {
            Self::ScaleFree(ScaleFreeState::zero(dim))
        }
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        match (self, other) {
            (Self::Softmax(a), Self::Softmax(b)) => Ok(Self::Softmax(a.merge(b)?)),
            (Self::ScaleFree(a), Self::ScaleFree(b)) => Ok(Self::ScaleFree(a.merge(b)?)),
            _ => Err(Error::DimensionMismatch {
                context: "cannot merge softmax and scale-free states".into(),
            }),
        }
    }

    pub fn output(&self) -> &[T] {
        match self {
            Self::Softmax(s) => &s.output,
            Self::ScaleFree(s) => &s.output,
        }
    }

    /// `(output row, lse slot)` view used by the partial-output workspace.
    pub fn to_slot(&self) -> (&[T], T) {
        match self {
            Self::Softmax(s) => (&s.output, s.lse),
            Self::ScaleFree(s) => (&s.output, T::ZERO),
        }
    }

    pub fn from_slot(output: &[T], lse: T, use_softmax: bool) -> Self {
        if use_softmax {
            Self::Softmax(AttentionState {
                output: output.to_vec(),
                lse,
            })
        } else {
            Self::ScaleFree(ScaleFreeState {
                output: output.to_vec(),
            })
        }
    }
}

/// Running online-softmax accumulator for one query row.
struct RowAccum<T> {
    max: T,
    denom: T,
    acc: Vec<T>,
}

/// Streaming attention of a query tile against an ordered kv tile source.
///
/// Returns one [`PartialState`] per query row. Output transforms are *not*
/// applied here; callers apply them once after any cross-chunk merging.
pub fn streaming_tile_attention<T: Scalar, S: KvTileSource<T>>(
    q_tile: &QueryTile<'_, T>,
    mut kv_tiles: S,
    variant: &VariantSpec,
    ctx: &TileContext,
) -> Result<Vec<PartialState<T>>> {
    let d = q_tile.head_dim;
    let n_rows = q_tile.meta.len();
    if q_tile.rows.len() != n_rows * d {
        return Err(Error::DimensionMismatch {
            context: format!(
                "query tile holds {} values for {n_rows} rows of dim {d}",
                q_tile.rows.len()
            ),
        });
    }

    // Query transform once per row; hooks run in f64.
    let mut q_rows: Vec<T> = Vec::with_capacity(n_rows * d);
    let mut row_f64 = vec![0.0f64; d];
    for (r, meta) in q_tile.meta.iter().enumerate() {
        for (dst, src) in row_f64.iter_mut().zip(&q_tile.rows[r * d..(r + 1) * d]) {
            *dst = src.to_f64();
        }
        let hook_ctx = ctx.pair(meta, 0);
        (variant.query_transform)(&mut row_f64, &hook_ctx, &variant.params);
        q_rows.extend(row_f64.iter().map(|x| T::from_f64(*x)));
    }

    let mut rows: Vec<RowAccum<T>> = (0..n_rows)
        .map(|_| RowAccum {
            max: T::NEG_INFINITY,
            denom: T::ZERO,
            acc: vec![T::ZERO; d],
        })
        .collect();
    let use_softmax = variant.use_softmax;
    let key_meta = QueryRowMeta {
        q_idx: 0,
        qo_head: 0,
    };

    let mut k_row = vec![0.0f64; d];
    let mut v_row = vec![0.0f64; d];
    let mut k_t = vec![T::ZERO; d];
    let mut v_t = vec![T::ZERO; d];
    while let Some(tile) = kv_tiles.next_tile()? {
        if tile.keys.len() != tile.len * d || tile.values.len() != tile.len * d {
            return Err(Error::DimensionMismatch {
                context: format!(
                    "kv tile of {} tokens holds {} key and {} value elements (dim {d})",
                    tile.len,
                    tile.keys.len(),
                    tile.values.len()
                ),
            });
        }
        for j in 0..tile.len {
            let kv_idx = tile.kv_start + j;
            // Key/value transforms run once per kv row and see kv-side
            // indices; the query-side fields are zeroed.
            let key_ctx = ctx.pair(&key_meta, kv_idx);
            for (dst, src) in k_row.iter_mut().zip(&tile.keys[j * d..(j + 1) * d]) {
                *dst = src.to_f64();
            }
            (variant.key_transform)(&mut k_row, &key_ctx, &variant.params);
            for (dst, src) in k_t.iter_mut().zip(&k_row) {
                *dst = T::from_f64(*src);
            }
            for (dst, src) in v_row.iter_mut().zip(&tile.values[j * d..(j + 1) * d]) {
                *dst = src.to_f64();
            }
            (variant.value_transform)(&mut v_row, &key_ctx, &variant.params);
            for (dst, src) in v_t.iter_mut().zip(&v_row) {
                *dst = T::from_f64(*src);
            }

            for (r, meta) in q_tile.meta.iter().enumerate() {
                let pair_ctx = ctx.pair(meta, kv_idx);
                if !(variant.logits_mask)(&pair_ctx, &variant.params) {
                    continue;
                }
                let s = dot(&q_rows[r * d..(r + 1) * d], &k_t);
                let s = T::from_f64((variant.logits_transform)(
                    s.to_f64(),
                    &pair_ctx,
                    &variant.params,
                ));
                let row = &mut rows[r];
                if use_softmax {
                    let new_max = row.max.maximum(s);
                    let rescale = if row.max == T::NEG_INFINITY {
                        T::ZERO
                    } else {
                        (row.max - new_max).exp()
                    };
                    let w = (s - new_max).exp();
                    row.denom = row.denom * rescale + w;
                    for (a, v) in row.acc.iter_mut().zip(&v_t) {
                        *a = *a * rescale + w * *v;
                    }
                    row.max = new_max;
                } else {
                    // transformed logit is the pair weight
                    for (a, v) in row.acc.iter_mut().zip(&v_t) {
                        *a += s * *v;
                    }
                }
            }
        }
    }

    Ok(rows
        .into_iter()
        .map(|row| {
            if use_softmax {
                if row.max == T::NEG_INFINITY {
                    PartialState::Softmax(AttentionState::empty(d))
                } else {
                    let output = row.acc.iter().map(|a| *a / row.denom).collect();
                    PartialState::Softmax(AttentionState {
                        output,
                        lse: row.max + row.denom.ln(),
                    })
                }
            } else {
                PartialState::ScaleFree(ScaleFreeState { output: row.acc })
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::attention_state;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn one_tile_equals_reference_state_exactly() {
        let mut rng = StdRng::seed_from_u64(21);
        let d = 8;
        let n = 24;
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let keys: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();

        let meta = [QueryRowMeta {
            q_idx: 0,
            qo_head: 0,
        }];
        let tile = QueryTile {
            rows: &q,
            meta: &meta,
            head_dim: d,
        };
        let ctx = TileContext {
            request: 0,
            kv_head: 0,
            l_qo: 1,
            l_kv: n,
        };
        // one tile containing everything degenerates to the reference
        let src = SliceTiles::new(&keys, &values, d, n, n, 0);
        let got = streaming_tile_attention(&tile, src, &VariantSpec::identity(), &ctx).unwrap();
        let want = attention_state(&q, &keys, &values, n).unwrap();
        match &got[0] {
            PartialState::Softmax(s) => {
                assert!((s.lse - want.lse).abs() < 1e-12);
                for (a, b) in s.output.iter().zip(&want.output) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            _ => panic!("expected softmax state"),
        }
    }

    #[test]
    fn one_token_tiles_match_single_tile_f32() {
        let mut rng = StdRng::seed_from_u64(22);
        let d = 16;
        let n = 40;
        let q: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let keys: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f32> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();

        let meta = [QueryRowMeta {
            q_idx: 0,
            qo_head: 0,
        }];
        let tile = QueryTile {
            rows: &q,
            meta: &meta,
            head_dim: d,
        };
        let ctx = TileContext {
            request: 0,
            kv_head: 0,
            l_qo: 1,
            l_kv: n,
        };
        let variant = VariantSpec::identity();
        let whole = streaming_tile_attention(
            &tile,
            SliceTiles::new(&keys, &values, d, n, n, 0),
            &variant,
            &ctx,
        )
        .unwrap();
        let shredded = streaming_tile_attention(
            &tile,
            SliceTiles::new(&keys, &values, d, n, 1, 0),
            &variant,
            &ctx,
        )
        .unwrap();
        let (PartialState::Softmax(a), PartialState::Softmax(b)) = (&whole[0], &shredded[0]) else {
            panic!("expected softmax states");
        };
        assert!((a.lse - b.lse).abs() < 1e-5);
        for (x, y) in a.output.iter().zip(&b.output) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn causal_masked_square_matches_dense_masked_oracle() {
        let mut rng = StdRng::seed_from_u64(23);
        let d = 8;
        let n = 8;
        let scale = 1.0 / (d as f64).sqrt();
        let qs: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let keys: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();

        let meta: Vec<QueryRowMeta> = (0..n)
            .map(|q_idx| QueryRowMeta { q_idx, qo_head: 0 })
            .collect();
        let tile = QueryTile {
            rows: &qs,
            meta: &meta,
            head_dim: d,
        };
        let ctx = TileContext {
            request: 0,
            kv_head: 0,
            l_qo: n,
            l_kv: n,
        };
        let variant =
            crate::variant::builtin_causal(&crate::config::HeadConfig::new(1, 1, d).unwrap());
        let got = streaming_tile_attention(
            &tile,
            SliceTiles::new(&keys, &values, d, n, 3, 0),
            &variant,
            &ctx,
        )
        .unwrap();

        // dense oracle that materializes the masked score matrix
        for (i, state) in got.iter().enumerate() {
            let visible = i + 1;
            let mut scores = vec![0.0f64; visible];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = qs[i * d..(i + 1) * d]
                    .iter()
                    .zip(&keys[j * d..(j + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    * scale;
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            let mut want = vec![0.0f64; d];
            for (j, s) in scores.iter().enumerate() {
                let w = (s - m).exp() / total;
                for (o, v) in want.iter_mut().zip(&values[j * d..(j + 1) * d]) {
                    *o += w * v;
                }
            }
            let PartialState::Softmax(s) = state else {
                panic!()
            };
            assert!((s.lse - (m + total.ln())).abs() < 1e-12);
            for (a, b) in s.output.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "row {i}");
            }
        }
    }

    #[test]
    fn fully_masked_rows_come_back_empty() {
        let d = 4;
        let q = vec![1.0f64; d];
        let keys = vec![1.0f64; 6 * d];
        let values = vec![1.0f64; 6 * d];
        let meta = [QueryRowMeta {
            q_idx: 0,
            qo_head: 0,
        }];
        let tile = QueryTile {
            rows: &q,
            meta: &meta,
            head_dim: d,
        };
        let ctx = TileContext {
            request: 0,
            kv_head: 0,
            l_qo: 1,
            l_kv: 6,
        };
        let mut variant = VariantSpec::identity();
        variant.logits_mask = std::sync::Arc::new(|_, _| false);
        let got = streaming_tile_attention(
            &tile,
            SliceTiles::new(&keys, &values, d, 6, 2, 0),
            &variant,
            &ctx,
        )
        .unwrap();
        let PartialState::Softmax(s) = &got[0] else {
            panic!()
        };
        assert!(s.is_empty());
        assert_eq!(s.output, vec![0.0; d]);
    }

    #[test]
    fn scale_free_accumulation_is_additive_over_chunks() {
        let mut rng = StdRng::seed_from_u64(24);
        let d = 8;
        let n = 12;
        let q: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let keys: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cfg = crate::config::HeadConfig::new(1, 1, d).unwrap();
        let variant = crate::variant::builtin_sigmoid(&cfg, -0.5);

        let meta = [QueryRowMeta {
            q_idx: 0,
            qo_head: 0,
        }];
        let tile = QueryTile {
            rows: &q,
            meta: &meta,
            head_dim: d,
        };
        let ctx = TileContext {
            request: 0,
            kv_head: 0,
            l_qo: 1,
            l_kv: n,
        };
        let whole = streaming_tile_attention(
            &tile,
            SliceTiles::new(&keys, &values, d, n, n, 0),
            &variant,
            &ctx,
        )
        .unwrap();
        let split = 5;
        let first = streaming_tile_attention(
            &tile,
            SliceTiles::new(&keys[..split * d], &values[..split * d], d, split, split, 0),
            &variant,
            &ctx,
        )
        .unwrap();
        let second = streaming_tile_attention(
            &tile,
            SliceTiles::new(
                &keys[split * d..],
                &values[split * d..],
                d,
                n - split,
                n - split,
                split,
            ),
            &variant,
            &ctx,
        )
        .unwrap();
        let merged = first[0].merge(&second[0]).unwrap();
        for (a, b) in merged.output().iter().zip(whole[0].output()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn any_tiling_matches_the_untiled_pass_for_every_builtin() {
        use crate::config::HeadConfig;
        use crate::variant as v;

        let mut rng = StdRng::seed_from_u64(25);
        let d = 8;
        let n = 37;
        let cfg = HeadConfig::new(2, 1, d).unwrap();
        let variants = [
            v::builtin_vanilla(&cfg),
            v::builtin_causal(&cfg),
            v::builtin_softcap(&cfg, 20.0),
            v::builtin_sliding_window(&cfg, 9),
            v::builtin_alibi(&cfg, v::default_alibi_slopes(2)),
            v::builtin_sigmoid(&cfg, -1.0),
            v::builtin_fused_rope(&cfg, 10000.0),
        ];
        let l_qo = 4;
        let qs: Vec<f64> = (0..l_qo * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let keys: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let meta: Vec<QueryRowMeta> = (0..l_qo)
            .map(|q_idx| QueryRowMeta { q_idx, qo_head: 1 })
            .collect();
        let tile = QueryTile {
            rows: &qs,
            meta: &meta,
            head_dim: d,
        };
        let ctx = TileContext {
            request: 0,
            kv_head: 0,
            l_qo,
            l_kv: n,
        };
        for variant in &variants {
            let untiled = streaming_tile_attention(
                &tile,
                SliceTiles::new(&keys, &values, d, n, n, 0),
                variant,
                &ctx,
            )
            .unwrap();
            for tile_tokens in [1usize, 3, 16] {
                let tiled = streaming_tile_attention(
                    &tile,
                    SliceTiles::new(&keys, &values, d, n, tile_tokens, 0),
                    variant,
                    &ctx,
                )
                .unwrap();
                for (a, b) in untiled.iter().zip(&tiled) {
                    let diff = a
                        .output()
                        .iter()
                        .zip(b.output())
                        .map(|(x, y)| (x - y).abs())
                        .fold(0.0, f64::max);
                    assert!(
                        diff <= 1e-12,
                        "{}: tiling {tile_tokens} diverged by {diff:.2e}",
                        variant.name
                    );
                }
            }
        }
    }

    #[test]
    fn rejects_mismatched_tile_dims() {
        let meta = [QueryRowMeta {
            q_idx: 0,
            qo_head: 0,
        }];
        let q = vec![0.0f64; 3];
        let tile = QueryTile {
            rows: &q,
            meta: &meta,
            head_dim: 4,
        };
        let ctx = TileContext {
            request: 0,
            kv_head: 0,
            l_qo: 1,
            l_kv: 0,
        };
        let src = SliceTiles::new(&[][..], &[][..], 4, 0, 8, 0);
        assert!(streaming_tile_attention(&tile, src, &VariantSpec::identity(), &ctx).is_err());
    }
}
