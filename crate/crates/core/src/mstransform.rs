//! Multi-scale masking and patching of raw windows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;

/// Patch lengths as multiples of the sample rate for the small, middle and
/// large scales.
pub const PATCH_SECONDS: [f64; 3] = [0.04, 0.08, 0.16];
pub const MASK_RATIOS: [f64; 3] = [0.05, 0.10, 0.15];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSpec {
    pub patch_len: usize,
    pub mask_ratio: f64,
}

impl ScaleSpec {
    pub fn new(patch_len: usize, mask_ratio: f64) -> Result<Self> {
        let s = ScaleSpec { patch_len, mask_ratio };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 {
            return Err(Error::param("patch_len must be >= 1"));
        }
        check_ratio(self.mask_ratio)
    }
}

/// The three default scales at sample rate `fs`, small patch paired with
/// small ratio.
pub fn default_scales(fs: f64) -> Vec<ScaleSpec> {
    PATCH_SECONDS
        .iter()
        .zip(MASK_RATIOS)
        .map(|(&sec, ratio)| ScaleSpec {
            patch_len: ((sec * fs).round() as usize).max(1),
            mask_ratio: ratio,
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskGranularity {
    /// Independent Bernoulli draw per timestamp.
    #[default]
    Timestamp,
    /// One draw per patch; a masked patch loses all its samples.
    Token,
}

/// Tokens of one scale, `[C x T x patch_len]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub scale: ScaleSpec,
}

impl TokenSequence {
    pub fn channels(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// Concatenate the tokens back into `[C x T*patch_len]`.
    pub fn unpatch(&self) -> Tensor {
        let s = self.tokens.shape();
        self.tokens
            .reshape(vec![s[0], s[1] * s[2]])
            .expect("same element count")
    }
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::param(format!("mask ratio must lie in [0, 1), got {ratio}")));
    }
    Ok(())
}

/// Keep-mask over `len` timestamps: 0 where masked, 1 elsewhere.
pub fn mask_pattern(len: usize, ratio: f64, seed: u64) -> Result<Vec<f64>> {
    check_ratio(ratio)?;
    let mut rng = rng_from(seed, &[0x3a5c]);
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < ratio { 0.0 } else { 1.0 })
        .collect())
}

fn token_mask_pattern(len: usize, patch_len: usize, ratio: f64, seed: u64) -> Result<Vec<f64>> {
    check_ratio(ratio)?;
    let mut rng = rng_from(seed, &[0x70c]);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len.div_ceil(patch_len.max(1)) {
        let keep = if rng.random::<f64>() < ratio { 0.0 } else { 1.0 };
        out.extend(std::iter::repeat_n(keep, patch_len));
    }
    out.truncate(len);
    Ok(out)
}

fn apply_mask(x: &Tensor, keep: &[f64]) -> Tensor {
    let len = x.shape()[1];
    let data = x
        .data()
        .chunks(len)
        .flat_map(|row| row.iter().zip(keep).map(|(v, m)| v * m))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Zero a Bernoulli(`ratio`) subset of timestamps of `x: [C x L]`; the same
/// timestamps are dropped in every channel.
pub fn mask(x: &Tensor, ratio: f64, seed: u64) -> Result<Tensor> {
    if x.ndim() != 2 {
        return Err(Error::dim("mask expects [channels x length]"));
    }
    let keep = mask_pattern(x.shape()[1], ratio, seed)?;
    Ok(apply_mask(x, &keep))
}

/// Split `x: [C x L]` into `floor(L / P)` non-overlapping patches, dropping
/// the trailing remainder.
pub fn patch(x: &Tensor, patch_len: usize) -> Result<TokenSequence> {
    if x.ndim() != 2 {
        return Err(Error::dim("patch expects [channels x length]"));
    }
    let (c, len) = (x.shape()[0], x.shape()[1]);
    if patch_len == 0 || len < patch_len {
        return Err(Error::param(format!(
            "patch length {patch_len} needs a window of at least that many samples, got {len}"
        )));
    }
    let t = len / patch_len;
    let used = t * patch_len;
    let data = x.data().chunks(len).flat_map(|row| &row[..used]).copied().collect();
    Ok(TokenSequence {
        tokens: Tensor::new(vec![c, t, patch_len], data)?,
        scale: ScaleSpec {
            patch_len,
            mask_ratio: 0.0,
        },
    })
}

/// Mask (in training mode) then patch at every scale. Scale `i` draws its
/// mask from a sub-seed of `seed`, so scales are independent.
pub fn transform_multiscale(
    x: &Tensor,
    scales: &[ScaleSpec],
    seed: u64,
    training: bool,
    granularity: MaskGranularity,
) -> Result<Vec<TokenSequence>> {
    if scales.is_empty() {
        return Err(Error::param("at least one scale is required"));
    }
    if x.ndim() != 2 {
        return Err(Error::dim("transform expects [channels x length]"));
    }
    let len = x.shape()[1];
    scales
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.validate()?;
            let input = if training && s.mask_ratio > 0.0 {
                let sub = derive_seed(seed, &[i as u64]);
                let keep = match granularity {
                    MaskGranularity::Timestamp => mask_pattern(len, s.mask_ratio, sub)?,
                    MaskGranularity::Token => token_mask_pattern(len, s.patch_len, s.mask_ratio, sub)?,
                };
                apply_mask(x, &keep)
            } else {
                x.clone()
            };
            let mut ts = patch(&input, s.patch_len)?;
            ts.scale = *s;
            Ok(ts)
        })
        .collect()
}
