//! Bilinear resampling over an arbitrary channel axis.
//!
//! Sample positions use half-pixel centers: destination index `i` maps to
//! source coordinate `(i + 0.5) · src / dst − 0.5`, clamped to `[0, src − 1]`.
//! The same kernel serves feature upsampling (C channels) and logit upsampling
//! (Qn channels). No anti-aliasing is applied when downsampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{DenseTensor, OpCounter};

/// FLOPs charged per output sample and channel: 4 multiplies + 3 adds.
pub const FLOPS_PER_SAMPLE: u64 = 7;

/// Output strides accepted by [`resolve_output_stride`].
pub const OUTPUT_STRIDES: [usize; 4] = [1, 4, 8, 16];

/// Source and destination extents of one resampling step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResamplePlan {
    pub src_h: usize,
    pub src_w: usize,
    pub dst_h: usize,
    pub dst_w: usize,
    pub channel_count: usize,
}

impl ResamplePlan {
    pub fn new(src: (usize, usize), dst: (usize, usize), channel_count: usize) -> Result<Self> {
        let plan = Self {
            src_h: src.0,
            src_w: src.1,
            dst_h: dst.0,
            dst_w: dst.1,
            channel_count,
        };
        if [plan.src_h, plan.src_w, plan.dst_h, plan.dst_w, channel_count].contains(&0) {
            return Err(Error::config(format!("resample extents must be >= 1: {plan:?}")));
        }
        Ok(plan)
    }

    /// Same geometry for a different channel count.
    pub fn with_channels(self, channel_count: usize) -> Self {
        Self { channel_count, ..self }
    }

    /// True when source and destination grids coincide.
    pub fn is_identity(&self) -> bool {
        self.src_h == self.dst_h && self.src_w == self.dst_w
    }

    pub fn dst_len(&self) -> usize {
        self.dst_h * self.dst_w
    }
}

/// Maps an image size, patch size and output stride to the patch grid
/// (source) and emitted mask resolution (destination).
///
/// The returned plan carries `channel_count = 1`; callers set the real count
/// with [`ResamplePlan::with_channels`].
pub fn resolve_output_stride(
    image_h: usize,
    image_w: usize,
    patch: usize,
    stride: usize,
) -> Result<ResamplePlan> {
    if !OUTPUT_STRIDES.contains(&stride) {
        return Err(Error::config(format!("output stride {stride} not in {OUTPUT_STRIDES:?}")));
    }
    if patch == 0 || image_h == 0 || image_w == 0 {
        return Err(Error::config("image and patch extents must be >= 1"));
    }
    if !image_h.is_multiple_of(patch) || !image_w.is_multiple_of(patch) {
        return Err(Error::config(format!(
            "image {image_h}×{image_w} not divisible by patch {patch}"
        )));
    }
    if !image_h.is_multiple_of(stride) || !image_w.is_multiple_of(stride) {
        return Err(Error::config(format!(
            "image {image_h}×{image_w} not divisible by stride {stride}"
        )));
    }
    ResamplePlan::new(
        (image_h / patch, image_w / patch),
        (image_h / stride, image_w / stride),
        1,
    )
}

/// Two-tap filter along one axis.
#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(src: usize, dst: usize) -> Vec<Tap> {
    let scale = src as f64 / dst as f64;
    let last = (src - 1) as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            Tap { lo, hi, frac: pos - lo as f64 }
        })
        .collect()
}

/// Resamples every `H×W` plane of a `B×Ch×H×W` tensor to the plan's
/// destination extents. Charges `7·B·Ch·Ĥ·Ŵ` FLOPs.
pub fn bilinear_resize<T: Scalar>(
    x: &DenseTensor<T>,
    plan: &ResamplePlan,
    counter: &mut OpCounter,
) -> Result<DenseTensor<T>> {
    let [batch, ch, h, w] = x.dims4("bilinear_resize")?;
    if (h, w) != (plan.src_h, plan.src_w) || ch != plan.channel_count {
        return Err(Error::shape(
            "bilinear_resize",
            format!(
                "input {:?} does not match plan src {}×{} with {} channels",
                x.shape(),
                plan.src_h,
                plan.src_w,
                plan.channel_count
            ),
        ));
    }
    let ys = taps(h, plan.dst_h);
    let xs = taps(w, plan.dst_w);
    // Corner weights per destination sample, shared by every plane.
    let weights: Vec<[T; 4]> = ys
        .iter()
        .flat_map(|ty| {
            xs.iter().map(move |tx| {
                let (fy, fx) = (ty.frac, tx.frac);
                [
                    T::from_f64_lossy((1.0 - fy) * (1.0 - fx)),
                    T::from_f64_lossy((1.0 - fy) * fx),
                    T::from_f64_lossy(fy * (1.0 - fx)),
                    T::from_f64_lossy(fy * fx),
                ]
            })
        })
        .collect();

    let plane_in = h * w;
    let plane_out = plan.dst_len();
    let mut out = vec![T::zero(); batch * ch * plane_out];
    for (src, dst) in x.data().chunks_exact(plane_in).zip(out.chunks_exact_mut(plane_out)) {
        let mut k = 0;
        for ty in &ys {
            let row_lo = &src[ty.lo * w..(ty.lo + 1) * w];
            let row_hi = &src[ty.hi * w..(ty.hi + 1) * w];
            for tx in &xs {
                let [w00, w01, w10, w11] = weights[k];
                dst[k] = w00 * row_lo[tx.lo]
                    + w01 * row_lo[tx.hi]
                    + w10 * row_hi[tx.lo]
                    + w11 * row_hi[tx.hi];
                k += 1;
            }
        }
    }
    let out = DenseTensor::from_raw(vec![batch, ch, plan.dst_h, plan.dst_w], out);
    counter.record(
        FLOPS_PER_SAMPLE * out.len() as u64,
        x.byte_size(),
        out.byte_size(),
        out.byte_size(),
    );
    Ok(out)
}
