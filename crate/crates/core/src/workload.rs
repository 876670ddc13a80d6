//! Seeded workload generation: sequence-length distributions and random
//! tensor data for the verification and benchmark harness.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::config::HeadConfig;
use crate::error::{Error, Result};
use crate::layout::RaggedTensor;
use crate::scalar::Scalar;
use crate::schedule::WorkloadSpec;

/// Sequence-length distribution of a generated batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum LengthDistribution {
    Constant {
        len: usize,
    },
    Uniform {
        lo: usize,
        hi: usize,
    },
    /// Heavy-tailed ranks rescaled so the batch mean lands on `mean`.
    Zipf {
        mean: usize,
        #[serde(default = "default_zipf_exponent")]
        exponent: f64,
    },
}

fn default_zipf_exponent() -> f64 {
    1.1
}

/// Query-length regime of the batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WorkloadMode {
    /// One query row per request.
    Decode,
    /// Query length equals kv length.
    PrefillCausal,
    /// Query block shorter than the kv cache (appended at its end).
    IncrementalPrefill,
}

/// Everything needed to reproduce one workload.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadProfile {
    pub distribution: LengthDistribution,
    pub batch: usize,
    pub mode: WorkloadMode,
    pub seed: u64,
    pub num_qo_heads: usize,
    pub num_kv_heads: usize,
    pub head_dim: usize,
}

impl WorkloadProfile {
    pub fn head_config(&self) -> Result<HeadConfig> {
        HeadConfig::new(self.num_qo_heads, self.num_kv_heads, self.head_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidProfile("batch must be positive".into()));
        }
        match self.distribution {
            LengthDistribution::Constant { len: 0 } => Err(Error::InvalidProfile(
                "constant length must be positive".into(),
            )),
            LengthDistribution::Uniform { lo, hi } if lo == 0 || hi < lo => Err(
                Error::InvalidProfile(format!("bad uniform range [{lo}, {hi}]")),
            ),
            LengthDistribution::Zipf { mean, exponent } if mean == 0 || exponent <= 1.0 => Err(
                Error::InvalidProfile("zipf needs mean >= 1 and exponent > 1".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// Generated lengths plus dense ragged tensors, all engine precision.
pub struct GeneratedWorkload<T> {
    pub qo_lens: Vec<usize>,
    pub kv_lens: Vec<usize>,
    pub heads: HeadConfig,
    pub q: RaggedTensor<T>,
    pub keys: RaggedTensor<T>,
    pub values: RaggedTensor<T>,
}

/// Sample kv lengths from the profile's distribution.
pub fn generate_kv_lens(profile: &WorkloadProfile, rng: &mut StdRng) -> Result<Vec<usize>> {
    profile.validate()?;
    let lens = match profile.distribution {
        LengthDistribution::Constant { len } => vec![len; profile.batch],
        LengthDistribution::Uniform { lo, hi } => (0..profile.batch)
            .map(|_| rng.random_range(lo..=hi))
            .collect(),
        LengthDistribution::Zipf { mean, exponent } => {
            // ranks over a capped support, rescaled to the target mean
            let support = (mean as f64 * 16.0).max(2.0);
            let zipf = Zipf::new(support, exponent)
                .map_err(|e| Error::InvalidProfile(format!("zipf: {e}")))?;
            let raw: Vec<f64> = (0..profile.batch).map(|_| zipf.sample(rng)).collect();
            let raw_mean = raw.iter().sum::<f64>() / raw.len() as f64;
            let scale = mean as f64 / raw_mean;
            raw.iter()
                .map(|r| ((r * scale).round() as usize).max(1))
                .collect()
        }
    };
    Ok(lens)
}

fn fill_random<T: Scalar>(rng: &mut StdRng, tensor: &mut RaggedTensor<T>) {
    for x in tensor.data_mut() {
        *x = T::from_f64(rng.random_range(-1.0..1.0));
    }
}

/// Generate a reproducible workload: lengths from the distribution, query
/// lengths from the mode, values uniform in [-1, 1).
pub fn generate_workload<T: Scalar>(profile: &WorkloadProfile) -> Result<GeneratedWorkload<T>> {
    let heads = profile.head_config()?;
    let mut rng = StdRng::seed_from_u64(profile.seed);
    let kv_lens = generate_kv_lens(profile, &mut rng)?;
    let qo_lens: Vec<usize> = kv_lens
        .iter()
        .map(|&l_kv| match profile.mode {
            WorkloadMode::Decode => 1,
            WorkloadMode::PrefillCausal => l_kv,
            WorkloadMode::IncrementalPrefill => rng.random_range(1..=l_kv),
        })
        .collect();
    let mut q = RaggedTensor::zeros(&qo_lens, heads.num_qo_heads * heads.head_dim);
    let mut keys = RaggedTensor::zeros(&kv_lens, heads.num_kv_heads * heads.head_dim);
    let mut values = RaggedTensor::zeros(&kv_lens, heads.num_kv_heads * heads.head_dim);
    fill_random(&mut rng, &mut q);
    fill_random(&mut rng, &mut keys);
    fill_random(&mut rng, &mut values);
    Ok(GeneratedWorkload {
        qo_lens,
        kv_lens,
        heads,
        q,
        keys,
        values,
    })
}

impl<T: Scalar> GeneratedWorkload<T> {
    /// Assemble the scheduler input for this workload.
    pub fn workload_spec(
        &self,
        num_ctas: usize,
        tile_size: usize,
        block_cols: usize,
    ) -> WorkloadSpec {
        WorkloadSpec {
            qo_lens: self.qo_lens.clone(),
            kv_lens: self.kv_lens.clone(),
            heads: self.heads,
            num_ctas,
            tile_size,
            alpha: 1.0,
            beta: 1.0,
            block_cols,
        }
    }
}
