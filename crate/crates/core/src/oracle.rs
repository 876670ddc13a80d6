//! Brute-force reference attention in f64.
//!
//! Materializes the full score matrix per (request, query head), applies the
//! variant hooks exactly as the engine does (same contexts, same order of
//! transforms), then softmax or direct weighting. Ground truth for every
//! equivalence test; deliberately simple and allocation heavy.

use crate::config::HeadConfig;
use crate::error::{Error, Result};
use crate::layout::RaggedTensor;
use crate::variant::{IndexContext, VariantSpec};

/// Dense ragged inputs for the oracle: queries are `(sum l_qo) x (H_qo * D)`,
/// keys/values `(sum l_kv) x (H_kv * D)`.
pub struct OracleInputs<'a> {
    pub q: &'a RaggedTensor<f64>,
    pub keys: &'a RaggedTensor<f64>,
    pub values: &'a RaggedTensor<f64>,
    pub cfg: HeadConfig,
}

/// Oracle result: outputs shaped like the query tensor, plus per
/// (row, qo_head) log-sum-exp (zero for softmax-free variants).
pub struct OracleOutput {
    pub output: RaggedTensor<f64>,
    pub lse: Vec<f64>,
}

pub fn oracle_attention(inputs: &OracleInputs<'_>, variant: &VariantSpec) -> Result<OracleOutput> {
    let cfg = &inputs.cfg;
    let d = cfg.head_dim;
    let g = cfg.group_size();
    if inputs.q.row_width() != cfg.num_qo_heads * d {
        return Err(Error::DimensionMismatch {
            context: format!(
                "oracle query width {} for {} heads of dim {d}",
                inputs.q.row_width(),
                cfg.num_qo_heads
            ),
        });
    }
    if inputs.keys.row_width() != cfg.num_kv_heads * d
        || inputs.values.row_width() != cfg.num_kv_heads * d
        || inputs.keys.lens() != inputs.values.lens()
    {
        return Err(Error::DimensionMismatch {
            context: "oracle kv tensors disagree".into(),
        });
    }
    if inputs.q.batch() != inputs.keys.batch() {
        return Err(Error::DimensionMismatch {
            context: format!(
                "oracle batch sizes disagree: {} vs {}",
                inputs.q.batch(),
                inputs.keys.batch()
            ),
        });
    }

    let mut output = RaggedTensor::<f64>::zeros(&inputs.q.lens(), inputs.q.row_width());
    let mut lse = vec![f64::NEG_INFINITY; inputs.q.total_rows() * cfg.num_qo_heads];

    for request in 0..inputs.q.batch() {
        let l_qo = inputs.q.len_of(request);
        let l_kv = inputs.keys.len_of(request);
        for qo_head in 0..cfg.num_qo_heads {
            let kv_head = qo_head / g;
            // key/value transforms once per kv row, kv-side context
            let mut keys_t = Vec::with_capacity(l_kv);
            let mut values_t = Vec::with_capacity(l_kv);
            for kv_idx in 0..l_kv {
                let ctx = IndexContext {
                    request,
                    q_idx: 0,
                    kv_idx,
                    qo_head: 0,
                    kv_head,
                    l_qo,
                    l_kv,
                };
                let row = inputs.keys.row(inputs.keys.global_row(request, kv_idx));
                let mut k = row[kv_head * d..(kv_head + 1) * d].to_vec();
                (variant.key_transform)(&mut k, &ctx, &variant.params);
                let row = inputs.values.row(inputs.values.global_row(request, kv_idx));
                let mut v = row[kv_head * d..(kv_head + 1) * d].to_vec();
                (variant.value_transform)(&mut v, &ctx, &variant.params);
                keys_t.push(k);
                values_t.push(v);
            }
            for q_idx in 0..l_qo {
                let q_ctx = IndexContext {
                    request,
                    q_idx,
                    kv_idx: 0,
                    qo_head,
                    kv_head,
                    l_qo,
                    l_kv,
                };
                let q_row = inputs.q.row(inputs.q.global_row(request, q_idx));
                let mut q = q_row[qo_head * d..(qo_head + 1) * d].to_vec();
                (variant.query_transform)(&mut q, &q_ctx, &variant.params);

                // materialize the masked, transformed score row
                let mut kept: Vec<(usize, f64)> = Vec::with_capacity(l_kv);
                for kv_idx in 0..l_kv {
                    let ctx = IndexContext {
                        request,
                        q_idx,
                        kv_idx,
                        qo_head,
                        kv_head,
                        l_qo,
                        l_kv,
                    };
                    if !(variant.logits_mask)(&ctx, &variant.params) {
                        continue;
                    }
                    let s: f64 = q.iter().zip(&keys_t[kv_idx]).map(|(a, b)| a * b).sum();
                    kept.push((kv_idx, (variant.logits_transform)(s, &ctx, &variant.params)));
                }

                let mut out = vec![0.0f64; d];
                let mut row_lse = f64::NEG_INFINITY;
                if variant.use_softmax {
                    if !kept.is_empty() {
                        let m = kept
                            .iter()
                            .map(|(_, s)| *s)
                            .fold(f64::NEG_INFINITY, f64::max);
                        let total: f64 = kept.iter().map(|(_, s)| (s - m).exp()).sum();
                        for (kv_idx, s) in &kept {
                            let w = (s - m).exp() / total;
                            for (o, v) in out.iter_mut().zip(&values_t[*kv_idx]) {
                                *o += w * v;
                            }
                        }
                        row_lse = m + total.ln();
                    }
                } else {
                    // transformed logit is the pair weight; no normalization
                    for (kv_idx, w) in &kept {
                        for (o, v) in out.iter_mut().zip(&values_t[*kv_idx]) {
                            *o += w * v;
                        }
                    }
                    row_lse = 0.0;
                }
                let out_ctx = IndexContext {
                    request,
                    q_idx,
                    kv_idx: 0,
                    qo_head,
                    kv_head,
                    l_qo,
                    l_kv,
                };
                (variant.output_transform)(&mut out, &out_ctx, &variant.params);

                let global = output.global_row(request, q_idx);
                let width = output.row_width();
                output.data_mut()[global * width + qo_head * d..global * width + (qo_head + 1) * d]
                    .copy_from_slice(&out);
                lse[global * cfg.num_qo_heads + qo_head] = row_lse;
            }
        }
    }
    Ok(OracleOutput { output, lse })
}
