//! Lossless latent codec: space-to-depth rearrangement standing in for a
//! learned autoencoder. Each k×k pixel block of a [C, H, W] frame becomes
//! k² channels, so a frame maps to [C·k², H/k, W/k] and back bit-exactly.
//!
//! Channel order is normative: latent channel c·k² + dy·k + dx holds the
//! pixel at block offset (dy, dx) of image channel c.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Spatial reduction factor k; latents have C·k² channels.
    pub reduction: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig { reduction: 4 }
    }
}

impl CodecConfig {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        let k = self.reduction;
        if k == 0 {
            return Err(Error::invalid("codec", "reduction must be at least 1"));
        }
        if height % k != 0 || width % k != 0 {
            return Err(Error::invalid(
                "codec",
                format!("image {}x{} not divisible by reduction {}", height, width, k),
            ));
        }
        Ok(())
    }

    pub fn latent_channels(&self, image_channels: usize) -> usize {
        image_channels * self.reduction * self.reduction
    }
}

/// [C, H, W] → [C·k², H/k, W/k]
pub fn encode_frame<T: Element>(frame: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let s = frame.shape();
    if s.len() != 3 {
        return Err(Error::invalid("encode", format!("expected [C,H,W], got {:?}", s)));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    CodecConfig { reduction: k }.validate(h, w)?;
    let (lh, lw) = (h / k, w / k);
    let mut out = vec![T::zero(); frame.numel()];
    let data = frame.data();
    for ci in 0..c {
        for dy in 0..k {
            for dx in 0..k {
                let co = (ci * k + dy) * k + dx;
                for y in 0..lh {
                    for x in 0..lw {
                        out[(co * lh + y) * lw + x] = data[(ci * h + y * k + dy) * w + x * k + dx];
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![c * k * k, lh, lw], out)
}

/// Exact inverse of `encode_frame`.
pub fn decode_frame<T: Element>(latent: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let s = latent.shape();
    if s.len() != 3 {
        return Err(Error::invalid("decode", format!("expected [C',h,w], got {:?}", s)));
    }
    let (cl, lh, lw) = (s[0], s[1], s[2]);
    if k == 0 || cl % (k * k) != 0 {
        return Err(Error::invalid(
            "decode",
            format!("latent channels {} not divisible by k²={}", cl, k * k),
        ));
    }
    let c = cl / (k * k);
    let (h, w) = (lh * k, lw * k);
    let mut out = vec![T::zero(); latent.numel()];
    let data = latent.data();
    for ci in 0..c {
        for dy in 0..k {
            for dx in 0..k {
                let co = (ci * k + dy) * k + dx;
                for y in 0..lh {
                    for x in 0..lw {
                        out[(ci * h + y * k + dy) * w + x * k + dx] = data[(co * lh + y) * lw + x];
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![c, h, w], out)
}

/// Stack per-frame encodings into [F, C·k², H/k, W/k]. Missing slots are
/// expected to hold zero frames and therefore encode to zero latents.
pub fn encode_sequence<T: Element>(frames: &[Tensor<T>], k: usize) -> Result<Tensor<T>> {
    if frames.is_empty() {
        return Err(Error::invalid("encode", "empty sequence"));
    }
    let mut latents = Vec::with_capacity(frames.len());
    for frame in frames {
        latents.push(encode_frame(frame, k)?);
    }
    let per = latents[0].shape().to_vec();
    let mut shape = vec![frames.len()];
    shape.extend_from_slice(&per);
    let mut data = Vec::with_capacity(latents[0].numel() * frames.len());
    for l in &latents {
        if l.shape() != per.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: per,
                rhs: l.shape().to_vec(),
            });
        }
        data.extend_from_slice(l.data());
    }
    Tensor::from_vec(shape, data)
}

/// [F, C·k², h, w] → F frames of [C, H, W].
pub fn decode_sequence<T: Element>(latents: &Tensor<T>, k: usize) -> Result<Vec<Tensor<T>>> {
    let s = latents.shape();
    if s.len() != 4 {
        return Err(Error::invalid("decode", format!("expected [F,C',h,w], got {:?}", s)));
    }
    let per = s[1] * s[2] * s[3];
    (0..s[0])
        .map(|f| {
            let frame = Tensor::from_vec(
                vec![s[1], s[2], s[3]],
                latents.data()[f * per..(f + 1) * per].to_vec(),
            )?;
            decode_frame(&frame, k)
        })
        .collect()
}
