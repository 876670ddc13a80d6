//! Attention variant specification.
//!
//! A variant is a bundle of hook functions composed into the pipeline
//! `f_out(scan(f_logits(f_q(Q) . f_k(K))) . f_v(V))`: transforms for queries,
//! keys, values and outputs, plus a logits transform, a logits mask and a
//! softmax on/off switch. Hooks are plain callable values with a fixed
//! signature; both the engine and the oracle call the same hooks, so a custom
//! variant is automatically covered by the oracle.
//!
//! Hooks always compute in f64 regardless of engine storage precision; the
//! engine casts results back to its element type at the call boundary.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::config::HeadConfig;
use crate::error::{Error, Result};

/// Position of one (query, kv) pair inside its request, handed to hooks.
///
/// `q_idx` and `kv_idx` are request-relative. Row-level hooks (query, key,
/// value, output transforms) see only their own side's indices; the opposite
/// side's index is zero for those calls. `logits_transform` and `logits_mask`
/// receive the full pair context.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexContext {
    pub request: usize,
    pub q_idx: usize,
    pub kv_idx: usize,
    pub qo_head: usize,
    pub kv_head: usize,
    pub l_qo: usize,
    pub l_kv: usize,
}

impl IndexContext {
    /// Absolute position of the query token in the kv timeline, under the
    /// right-aligned convention (the query block sits at the end of the
    /// sequence).
    #[inline]
    pub fn query_position(&self) -> usize {
        self.l_kv - self.l_qo + self.q_idx
    }
}

/// Named scalar/tensor parameter bag passed to every hook.
#[derive(Clone, Debug, Default)]
pub struct Params {
    scalars: BTreeMap<String, f64>,
    tensors: BTreeMap<String, Arc<Vec<f64>>>,
}

impl Params {
    pub fn set_scalar(&mut self, name: &str, value: f64) {
        self.scalars.insert(name.to_string(), value);
    }

    pub fn set_tensor(&mut self, name: &str, value: Vec<f64>) {
        self.tensors.insert(name.to_string(), Arc::new(value));
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.scalars.get(name).copied()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.tensors.get(name).map(|t| t.as_slice())
    }
}

/// In-place transform of one row vector (query/key/value/output).
pub type RowHook = Arc<dyn Fn(&mut [f64], &IndexContext, &Params) + Send + Sync>;
/// Transform of one raw logit.
pub type LogitsHook = Arc<dyn Fn(f64, &IndexContext, &Params) -> f64 + Send + Sync>;
/// Keep/skip decision for one (query, kv) pair. Skipped pairs contribute
/// nothing; they are never turned into -inf logits.
pub type MaskHook = Arc<dyn Fn(&IndexContext, &Params) -> bool + Send + Sync>;

fn identity_row() -> RowHook {
    Arc::new(|_, _, _| {})
}

fn identity_logits() -> LogitsHook {
    Arc::new(|s, _, _| s)
}

fn keep_all() -> MaskHook {
    Arc::new(|_, _| true)
}

/// The hook bundle defining an attention variant.
#[derive(Clone)]
pub struct VariantSpec {
    pub name: String,
    pub query_transform: RowHook,
    pub key_transform: RowHook,
    pub value_transform: RowHook,
    pub output_transform: RowHook,
    pub logits_transform: LogitsHook,
    pub logits_mask: MaskHook,
    pub use_softmax: bool,
    pub params: Params,
}

impl std::fmt::Debug for VariantSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VariantSpec")
            .field("name", &self.name)
            .field("use_softmax", &self.use_softmax)
            .field("params", &self.params)
            .finish()
    }
}

impl VariantSpec {
    /// Identity hooks, softmax on, no score scaling. Mostly useful as a base
    /// for custom variants and in algebra tests.
    pub fn identity() -> Self {
        Self {
            name: "identity".to_string(),
            query_transform: identity_row(),
            key_transform: identity_row(),
            value_transform: identity_row(),
            output_transform: identity_row(),
            logits_transform: identity_logits(),
            logits_mask: keep_all(),
            use_softmax: true,
            params: Params::default(),
        }
    }

    /// One (query, kv) pair pushed through the pipeline: returns the
    /// transformed logit and value row, or `None` when the mask skips the
    /// pair. `q` and `k` must already be query/key-transformed.
    pub fn apply_pipeline(
        &self,
        q_transformed: &[f64],
        k_transformed: &[f64],
        v: &[f64],
        ctx: &IndexContext,
    ) -> Option<(f64, Vec<f64>)> {
        if !(self.logits_mask)(ctx, &self.params) {
            return None;
        }
        let s: f64 = q_transformed
            .iter()
            .zip(k_transformed)
            .map(|(a, b)| a * b)
            .sum();
        let s = (self.logits_transform)(s, ctx, &self.params);
        let mut v = v.to_vec();
        (self.value_transform)(&mut v, ctx, &self.params);
        Some((s, v))
    }
}

fn inv_sqrt_dim(cfg: &HeadConfig) -> f64 {
    1.0 / (cfg.head_dim as f64).sqrt()
}

fn scale_query_hook() -> RowHook {
    Arc::new(|row, _, params| {
        let scale = params.scalar("sm_scale").unwrap_or(1.0);
        for x in row.iter_mut() {
            *x *= scale;
        }
    })
}

/// Right-aligned causal keep rule shared by the causal and sliding-window
/// builtins: `kv_idx <= l_kv - l_qo + q_idx`.
#[inline]
fn causal_keep(ctx: &IndexContext) -> bool {
    ctx.kv_idx <= ctx.query_position()
}

/// Standard scaled attention: `q <- q / sqrt(D)`, softmax over all kv.
pub fn builtin_vanilla(cfg: &HeadConfig) -> VariantSpec {
    let mut spec = VariantSpec::identity();
    spec.name = "vanilla".to_string();
    spec.params.set_scalar("sm_scale", inv_sqrt_dim(cfg));
    spec.query_transform = scale_query_hook();
    spec
}

/// Causal masking under the right-aligned convention: query row `i` of a
/// request sees kv indices `0..=l_kv - l_qo + i`. A single decode row
/// (`l_qo = 1`) sees the whole cache.
pub fn builtin_causal(cfg: &HeadConfig) -> VariantSpec {
    let mut spec = builtin_vanilla(cfg);
    spec.name = "causal".to_string();
    spec.logits_mask = Arc::new(|ctx, _| causal_keep(ctx));
    spec
}

/// Logits soft-cap: `s -> cap * tanh(s / cap)`, bounded by `cap` in absolute
/// value.
pub fn builtin_softcap(cfg: &HeadConfig, cap: f64) -> VariantSpec {
    let mut spec = builtin_vanilla(cfg);
    spec.name = "softcap".to_string();
    spec.params.set_scalar("cap", cap);
    spec.logits_transform = Arc::new(|s, _, params| {
        let cap = params.scalar("cap").expect("softcap requires cap");
        cap * (s / cap).tanh()
    });
    spec
}

/// Sliding-window attention: causal, and only the last `window` tokens before
/// (and including) the query position are visible.
pub fn builtin_sliding_window(cfg: &HeadConfig, window: usize) -> VariantSpec {
    let mut spec = builtin_vanilla(cfg);
    spec.name = "sliding_window".to_string();
    spec.params.set_scalar("window", window as f64);
    spec.logits_mask = Arc::new(|ctx, params| {
        let window = params
            .scalar("window")
            .expect("sliding_window requires window") as usize;
        let pos = ctx.query_position();
        causal_keep(ctx) && ctx.kv_idx + window > pos
    });
    spec
}

/// Linear positional bias: `s += slopes[qo_head] * (kv_idx - q_pos)`.
pub fn builtin_alibi(cfg: &HeadConfig, slopes: Vec<f64>) -> VariantSpec {
    let mut spec = builtin_vanilla(cfg);
    spec.name = "alibi".to_string();
    spec.params.set_tensor("slopes", slopes);
    spec.logits_transform = Arc::new(|s, ctx, params| {
        let slopes = params.tensor("slopes").expect("alibi requires slopes");
        let slope = slopes[ctx.qo_head];
        s + slope * (ctx.kv_idx as f64 - ctx.query_position() as f64)
    });
    spec
}

/// Geometric per-head slopes commonly used with the linear-bias variant:
/// `2^(-8 (h+1) / H)` for head `h`.
pub fn default_alibi_slopes(num_heads: usize) -> Vec<f64> {
    (0..num_heads)
        .map(|h| 2f64.powf(-8.0 * (h + 1) as f64 / num_heads as f64))
        .collect()
}

/// Softmax-free variant: each pair contributes `sigmoid(s + bias) * v` and
/// rows accumulate as plain sums. `bias` has no default.
pub fn builtin_sigmoid(cfg: &HeadConfig, bias: f64) -> VariantSpec {
    let mut spec = builtin_vanilla(cfg);
    spec.name = "sigmoid".to_string();
    spec.use_softmax = false;
    spec.params.set_scalar("bias", bias);
    spec.logits_transform = Arc::new(|s, _, params| {
        let bias = params.scalar("bias").expect("sigmoid requires bias");
        1.0 / (1.0 + (-(s + bias)).exp())
    });
    spec
}

fn rotate_in_place(row: &mut [f64], position: usize, theta: f64) {
    let d = row.len();
    debug_assert!(
        d.is_multiple_of(2),
        "rotary embedding requires even head_dim"
    );
    let pos = position as f64;
    for i in 0..d / 2 {
        let freq = theta.powf(-2.0 * i as f64 / d as f64);
        let angle = pos * freq;
        let (sin, cos) = angle.sin_cos();
        let a = row[2 * i];
        let b = row[2 * i + 1];
        row[2 * i] = a * cos - b * sin;
        row[2 * i + 1] = a * sin + b * cos;
    }
}

/// Rotary position embedding fused into the attention pipeline: queries and
/// keys are rotated at their absolute positions taken from the context
/// (`query_position()` for queries, `kv_idx` for keys).
///
/// The `1/sqrt(D)` score scaling lives in the logits transform here, keeping
/// the query/key transforms pure rotations (norm preserving) while remaining
/// equivalent to pre-rotating Q/K and running the vanilla variant.
pub fn builtin_fused_rope(cfg: &HeadConfig, theta: f64) -> VariantSpec {
    let mut spec = VariantSpec::identity();
    spec.name = "rope".to_string();
    spec.params.set_scalar("theta", theta);
    spec.params.set_scalar("sm_scale", inv_sqrt_dim(cfg));
    spec.query_transform = Arc::new(|row, ctx, params| {
        let theta = params.scalar("theta").expect("rope requires theta");
        rotate_in_place(row, ctx.query_position(), theta);
    });
    spec.key_transform = Arc::new(|row, ctx, params| {
        let theta = params.scalar("theta").expect("rope requires theta");
        rotate_in_place(row, ctx.kv_idx, theta);
    });
    spec.logits_transform = Arc::new(|s, _, params| s * params.scalar("sm_scale").unwrap_or(1.0));
    spec
}

/// Build a variant from its CLI JSON form, e.g.
/// `{"variant":"softcap","cap":30.0}`. Unknown names and missing required
/// parameters are rejected.
pub fn variant_from_json(json: &serde_json::Value, cfg: &HeadConfig) -> Result<VariantSpec> {
    let obj = json
        .as_object()
        .ok_or_else(|| Error::InvalidVariant("expected a JSON object".into()))?;
    let name = obj
        .get("variant")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::InvalidVariant("missing \"variant\" name".into()))?;

    let scalar = |key: &str| -> Result<f64> {
        obj.get(key)
            .and_then(|v| v.as_f64())
            .ok_or_else(|| Error::InvalidVariant(format!("{name} requires numeric \"{key}\"")))
    };

    match name {
        "vanilla" => Ok(builtin_vanilla(cfg)),
        "causal" => Ok(builtin_causal(cfg)),
        "softcap" => Ok(builtin_softcap(cfg, scalar("cap")?)),
        "sliding_window" => {
            let w = scalar("window")?;
            if w < 1.0 || w.fract() != 0.0 {
                return Err(Error::InvalidVariant(
                    "sliding_window \"window\" must be a positive integer".into(),
                ));
            }
            Ok(builtin_sliding_window(cfg, w as usize))
        }
        "alibi" => {
            let slopes = match obj.get("slopes") {
                Some(serde_json::Value::String(s)) if s == "auto" => {
                    default_alibi_slopes(cfg.num_qo_heads)
                }
                Some(serde_json::Value::Array(a)) => {
                    let v: Option<Vec<f64>> = a.iter().map(|x| x.as_f64()).collect();
                    let v = v.ok_or_else(|| {
                        Error::InvalidVariant("alibi \"slopes\" must be numbers".into())
                    })?;
                    if v.len() != cfg.num_qo_heads {
                        return Err(Error::InvalidVariant(format!(
                            "alibi needs {} slopes, got {}",
                            cfg.num_qo_heads,
                            v.len()
                        )));
                    }
                    v
                }
                _ => {
                    return Err(Error::InvalidVariant(
                        "alibi requires \"slopes\": [..] or \"auto\"".into(),
                    ))
                }
            };
            Ok(builtin_alibi(cfg, slopes))
        }
        "sigmoid" => Ok(builtin_sigmoid(cfg, scalar("bias")?)),
        "rope" => {
            let theta = match obj.get("theta") {
                None => 10000.0,
                Some(v) => v.as_f64().ok_or_else(|| {
                    Error::InvalidVariant("rope \"theta\" must be a number".into())
                })?,
            };
            if !cfg.head_dim.is_multiple_of(2) {
                return Err(Error::InvalidVariant(
                    "rope requires an even head_dim".into(),
                ));
            }
            Ok(builtin_fused_rope(cfg, theta))
        }
        other => Err(Error::InvalidVariant(format!("unknown variant {other:?}"))),
    }
}

/// All builtin variant names, in the order the verification harness cycles
/// through them.
pub const BUILTIN_NAMES: [&str; 7] = [
    "vanilla",
    "causal",
    "softcap",
    "sliding_window",
    "alibi",
    "sigmoid",
    "rope",
];
