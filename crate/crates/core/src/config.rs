use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Head layout of the attention problem.
///
/// `num_qo_heads` query heads share `num_kv_heads` kv heads in groups of
/// `group_size() = num_qo_heads / num_kv_heads`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub num_qo_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
}

impl HeadConfig {
    pub fn new(num_qo_heads: usize, num_kv_heads: usize, head_dim: usize) -> Result<Self> {
        if num_kv_heads == 0 || !num_qo_heads.is_multiple_of(num_kv_heads) {
            return Err(Error::NonDivisibleHeads {
                qo: num_qo_heads,
                kv: num_kv_heads,
            });
        }
        Ok(Self {
            num_qo_heads,
            num_kv_heads,
            head_dim,
        })
    }

    #[inline]
    pub fn group_size(&self) -> usize {
        self.num_qo_heads / self.num_kv_heads
    }
}

/// Flops per element of memory traffic (up to a constant factor) for one
/// request: `g / (1/l_qo + 1/l_kv)`.
///
/// Grows with the query length and with the head group size; decode
/// (`l_qo = 1`) is memory bound at `g * l_kv / (l_kv + 1)`.
pub fn operational_intensity(l_qo: usize, l_kv: usize, group_size: usize) -> Result<f64> {
    if l_qo == 0 || l_kv == 0 {
        return Err(Error::ZeroLength { l_qo, l_kv });
    }
    Ok(group_size as f64 / (1.0 / l_qo as f64 + 1.0 / l_kv as f64))
}
