use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::decode::ClassLogits;
use crate::error::{Error, Result};
use crate::heads::{MaskProjection, QuerySet};
use crate::scalar::Scalar;
use crate::tensor::DenseTensor;

/// Seeded inputs for one head invocation.
#[derive(Clone, Debug)]
pub struct SyntheticInputs<T> {
    /// `B×N×C`, values in `[-1, 1]`.
    pub tokens: DenseTensor<T>,
    /// `B×Qn×C`, values in `[-1, 1]`.
    pub queries: QuerySet<T>,
    /// Weight and bias uniform in `[-1/√C, 1/√C]`.
    pub projection: MaskProjection<T>,
    /// `B×Qn×(K+1)`, values in `[-3, 3]`.
    pub classes: ClassLogits<T>,
}

/// Draws tokens, queries, projection and class logits from a ChaCha8 stream
/// seeded with `seed`, in that order. Values are drawn in 64-bit and then
/// rounded, so the f32 and f64 instantiations see the same underlying draws.
pub fn gen_synthetic<T: Scalar>(
    seed: u64,
    batch: usize,
    tokens: usize,
    channels: usize,
    queries: usize,
    categories: usize,
) -> Result<SyntheticInputs<T>> {
    if [batch, tokens, channels, queries, categories].contains(&0) {
        return Err(Error::config("synthetic extents must all be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |shape: &[usize], bound: f64| {
        DenseTensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
    };
    let t = uniform(&[batch, tokens, channels], 1.0);
    let q = uniform(&[batch, queries, channels], 1.0);
    let scale = 1.0 / (channels as f64).sqrt();
    let weight = uniform(&[channels, channels], scale);
    let bias = uniform(&[channels], scale);
    let classes = uniform(&[batch, queries, categories + 1], 3.0);
    Ok(SyntheticInputs {
        tokens: t,
        queries: QuerySet::new(q)?,
        projection: MaskProjection::linear(weight, Some(bias))?,
        classes: ClassLogits::new(classes)?,
    })
}

/// Order-sensitive FNV-1a checksum over the bit patterns of a tensor.
pub fn checksum<T: Scalar>(t: &DenseTensor<T>) -> u64 {
    t.data().iter().fold(0xcbf2_9ce4_8422_2325u64, |h, v| {
        let bits = v.as_f64().to_bits();
        (h ^ bits).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
