//! Time-aligned masking: slot codes for irregularly sampled sequences,
//! random frame hiding, broadcast to latent shape, the three-branch
//! truncation producing the conditioning latents, and denoiser input
//! assembly.
//!
//! Slot codes are normative: Present = 1, Missing = 255, Hidden = 0. The
//! 255 sentinel is deliberately far outside latent range so the network
//! can tell "no data exists for this year" apart from "this frame is the
//! generation target"; an optional remap sends 255 to -1 for runs that
//! prefer in-range conditioning values.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Tensor, ValueId};

/// Sentinel written into mask and conditioning tensors for missing slots.
pub const MISSING_SENTINEL: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotCode {
    Present,
    Missing,
    Hidden,
}

impl SlotCode {
    /// Numeric mask code: 1 / 255 / 0.
    pub fn code(self) -> f64 {
        match self {
            SlotCode::Present => 1.0,
            SlotCode::Missing => MISSING_SENTINEL,
            SlotCode::Hidden => 0.0,
        }
    }
}

/// Per-slot codes plus the slot-to-year mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeAlignedMask {
    codes: Vec<SlotCode>,
    window_start_year: i32,
    years_per_slot: u32,
}

impl TimeAlignedMask {
    /// Map sampled years onto F slots: Present where a sample exists,
    /// Missing elsewhere.
    pub fn align(
        years: &[i32],
        window_start_year: i32,
        frames: usize,
        years_per_slot: u32,
    ) -> Result<Self> {
        if frames == 0 || years_per_slot == 0 {
            return Err(Error::invalid("align", "frames and years_per_slot must be positive"));
        }
        let mut codes = vec![SlotCode::Missing; frames];
        let span = frames as i64 * years_per_slot as i64;
        for &year in years {
            let offset = year as i64 - window_start_year as i64;
            if offset < 0 || offset >= span {
                return Err(Error::invalid(
                    "align",
                    format!(
                        "year {} outside window [{}, {})",
                        year,
                        window_start_year,
                        window_start_year as i64 + span
                    ),
                ));
            }
            let slot = (offset / years_per_slot as i64) as usize;
            if codes[slot] == SlotCode::Present {
                return Err(Error::invalid(
                    "align",
                    format!("year {} collides with an earlier sample in slot {}", year, slot),
                ));
            }
            codes[slot] = SlotCode::Present;
        }
        Ok(TimeAlignedMask {
            codes,
            window_start_year,
            years_per_slot,
        })
    }

    pub fn from_codes(codes: Vec<SlotCode>, window_start_year: i32, years_per_slot: u32) -> Self {
        TimeAlignedMask {
            codes,
            window_start_year,
            years_per_slot,
        }
    }

    pub fn codes(&self) -> &[SlotCode] {
        &self.codes
    }

    pub fn frames(&self) -> usize {
        self.codes.len()
    }

    pub fn window_start_year(&self) -> i32 {
        self.window_start_year
    }

    pub fn years_per_slot(&self) -> u32 {
        self.years_per_slot
    }

    pub fn slot_year(&self, slot: usize) -> i32 {
        self.window_start_year + (slot as i64 * self.years_per_slot as i64) as i32
    }

    /// Slot a year falls into, if inside the window.
    pub fn slot_for_year(&self, year: i32) -> Option<usize> {
        let offset = year as i64 - self.window_start_year as i64;
        let span = self.frames() as i64 * self.years_per_slot as i64;
        if offset < 0 || offset >= span {
            None
        } else {
            Some((offset / self.years_per_slot as i64) as usize)
        }
    }

    pub fn present_slots(&self) -> Vec<usize> {
        self.codes
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == SlotCode::Present)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn hidden_slot(&self) -> Option<usize> {
        self.codes.iter().position(|c| *c == SlotCode::Hidden)
    }

    /// Hide one uniformly chosen Present slot. Needs at least two Present
    /// slots so something remains to condition on.
    pub fn hide_random_frame<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<TimeAlignedMask> {
        let present = self.present_slots();
        if present.len() < 2 {
            return Err(Error::invalid(
                "hide_random_frame",
                format!("{} present slots; need at least 2", present.len()),
            ));
        }
        let slot = present[rng.gen_range(0..present.len())];
        let mut out = self.clone();
        out.codes[slot] = SlotCode::Hidden;
        Ok(out)
    }

    /// Hide a specific slot for inference. Hiding a Missing slot is
    /// allowed so absent years can be generated.
    pub fn hide_target_slot(&self, slot: usize) -> Result<TimeAlignedMask> {
        if slot >= self.frames() {
            return Err(Error::invalid(
                "hide_target_slot",
                format!("slot {} out of range for {} frames", slot, self.frames()),
            ));
        }
        let mut out = self.clone();
        out.codes[slot] = SlotCode::Hidden;
        Ok(out)
    }

    /// Replicate each slot code across C'×h×w, yielding the mask tensor
    /// with values {0, 1, missing_value}.
    pub fn broadcast<T: Element>(&self, latent_shape: &[usize], missing_value: f64) -> Result<Tensor<T>> {
        if latent_shape.len() != 4 || latent_shape[0] != self.frames() {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: vec![self.frames()],
                rhs: latent_shape.to_vec(),
            });
        }
        let per = latent_shape[1] * latent_shape[2] * latent_shape[3];
        let mut data = Vec::with_capacity(self.frames() * per);
        for code in &self.codes {
            let v = T::from_f64(match code {
                SlotCode::Missing => missing_value,
                other => other.code(),
            });
            data.extend(std::iter::repeat(v).take(per));
        }
        Tensor::from_vec(latent_shape.to_vec(), data)
    }

    /// Per-element loss weights: slots with data (Present or Hidden)
    /// participate, Missing slots never do. The hidden slot may be
    /// upweighted.
    pub fn loss_weights<T: Element>(&self, latent_shape: &[usize], hidden_weight: f64) -> Result<Tensor<T>> {
        if latent_shape.len() != 4 || latent_shape[0] != self.frames() {
            return Err(Error::ShapeMismatch {
                op: "loss_weights",
                lhs: vec![self.frames()],
                rhs: latent_shape.to_vec(),
            });
        }
        let per = latent_shape[1] * latent_shape[2] * latent_shape[3];
        let mut data = Vec::with_capacity(self.frames() * per);
        for code in &self.codes {
            let w = match code {
                SlotCode::Present => 1.0,
                SlotCode::Hidden => hidden_weight,
                SlotCode::Missing => 0.0,
            };
            data.extend(std::iter::repeat(T::from_f64(w)).take(per));
        }
        Tensor::from_vec(latent_shape.to_vec(), data)
    }
}

/// Three-branch truncation: 0 where the mask is 0, the latent where the
/// mask is 1, the missing sentinel where the mask is 255.
pub fn truncate<T: Element>(z0: &Tensor<T>, m_hat: &Tensor<T>) -> Result<Tensor<T>> {
    if z0.shape() != m_hat.shape() {
        return Err(Error::ShapeMismatch {
            op: "truncate",
            lhs: z0.shape().to_vec(),
            rhs: m_hat.shape().to_vec(),
        });
    }
    let zero = T::zero();
    let one = T::one();
    let sentinel = T::from_f64(MISSING_SENTINEL);
    let mut data = Vec::with_capacity(z0.numel());
    for (&z, &m) in z0.data().iter().zip(m_hat.data()) {
        if m == zero {
            data.push(zero);
        } else if m == one {
            data.push(z);
        } else if m == sentinel {
            data.push(sentinel);
        } else {
            return Err(Error::invalid(
                "truncate",
                format!("mask value {} outside {{0, 1, 255}}", m),
            ));
        }
    }
    Tensor::from_vec(z0.shape().to_vec(), data)
}

/// Remap the 255 sentinel to -1 in a conditioning tensor (mask or
/// truncated latents). Only exact sentinel values are touched.
pub fn remap_missing<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let sentinel = T::from_f64(MISSING_SENTINEL);
    let neg_one = -T::one();
    t.map(|v| if v == sentinel { neg_one } else { v })
}

/// Channel concatenation (Z_t, M̂, Z_M) → [F, 3·C', h, w]. The channel
/// order is fixed: noisy latents first, mask second, truncated latents
/// third.
pub fn assemble_input<T: Element>(
    g: &mut Graph<T>,
    z_t: ValueId,
    m_hat: ValueId,
    z_m: ValueId,
) -> Result<ValueId> {
    let (sa, sb, sc) = (
        g.shape(z_t).to_vec(),
        g.shape(m_hat).to_vec(),
        g.shape(z_m).to_vec(),
    );
    if sa != sb || sa != sc {
        return Err(Error::ShapeMismatch {
            op: "assemble_input",
            lhs: sa,
            rhs: if sb != sa { sb } else { sc },
        });
    }
    g.concat(&[z_t, m_hat, z_m], 1)
}

/// Plain-tensor version of `assemble_input` for callers outside a graph.
pub fn assemble_input_tensor<T: Element>(
    z_t: &Tensor<T>,
    m_hat: &Tensor<T>,
    z_m: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let a = g.constant(z_t.clone())?;
    let b = g.constant(m_hat.clone())?;
    let c = g.constant(z_m.clone())?;
    let out = assemble_input(&mut g, a, b, c)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn mask(codes: &[SlotCode]) -> TimeAlignedMask {
        TimeAlignedMask::from_codes(codes.to_vec(), 2000, 1)
    }

    #[test]
    fn align_hand_checked_example() {
        let m = TimeAlignedMask::align(&[1990, 1992, 1995], 1990, 6, 1).unwrap();
        use SlotCode::*;
        assert_eq!(m.codes(), &[Present, Missing, Present, Missing, Missing, Present]);
    }

    #[test]
    fn align_consecutive_years_all_present() {
        let years: Vec<i32> = (2000..2006).collect();
        let m = TimeAlignedMask::align(&years, 2000, 6, 1).unwrap();
        assert!(m.codes().iter().all(|c| *c == SlotCode::Present));
    }

    #[test]
    fn align_empty_years_all_missing() {
        let m = TimeAlignedMask::align(&[], 2000, 4, 1).unwrap();
        assert!(m.codes().iter().all(|c| *c == SlotCode::Missing));
        // Degenerate input is rejected downstream by hide_random_frame.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(m.hide_random_frame(&mut rng).is_err());
    }

    #[test]
    fn align_rejects_collisions_and_out_of_window() {
        let err = TimeAlignedMask::align(&[2000, 2001], 2000, 4, 2).unwrap_err();
        assert!(err.to_string().contains("2001"), "{}", err);
        assert!(TimeAlignedMask::align(&[1999], 2000, 4, 1).is_err());
        assert!(TimeAlignedMask::align(&[2004], 2000, 4, 1).is_err());
    }

    #[test]
    fn align_is_invariant_within_a_slot() {
        let a = TimeAlignedMask::align(&[2000, 2002], 2000, 3, 2).unwrap();
        let b = TimeAlignedMask::align(&[2001, 2003], 2000, 3, 2).unwrap();
        assert_eq!(a.codes(), b.codes());
    }

    #[test]
    fn hide_random_is_seeded_and_hits_present_only() {
        use SlotCode::*;
        let m = mask(&[Present, Present]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h1 = m.hide_random_frame(&mut rng).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h2 = m.hide_random_frame(&mut rng).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1.codes().iter().filter(|c| **c == Hidden).count(), 1);

        let m = mask(&[Present, Missing, Present]);
        for seed in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = m.hide_random_frame(&mut rng).unwrap();
            assert_eq!(h.codes()[1], Missing);
        }
    }

    #[test]
    fn hide_random_changes_exactly_one_code() {
        use SlotCode::*;
        let m = mask(&[Present, Missing, Present, Present]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = m.hide_random_frame(&mut rng).unwrap();
        let diffs: Vec<_> = m
            .codes()
            .iter()
            .zip(h.codes())
            .filter(|(a, b)| a != b)
            .collect();
        assert_eq!(diffs.len(), 1);
        assert_eq!(*diffs[0].0, Present);
        assert_eq!(*diffs[0].1, Hidden);
    }

    #[test]
    fn hide_random_is_uniform() {
        use SlotCode::*;
        let m = mask(&[Present; 4]);
        let mut counts = HashMap::new();
        for seed in 0..10_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = m.hide_random_frame(&mut rng).unwrap();
            *counts.entry(h.hidden_slot().unwrap()).or_insert(0usize) += 1;
        }
        for slot in 0..4 {
            let freq = counts[&slot] as f64 / 10_000.0;
            assert!((freq - 0.25).abs() < 0.02, "slot {} freq {}", slot, freq);
        }
    }

    #[test]
    fn hide_target_slot_cases() {
        use SlotCode::*;
        let m = mask(&[Present; 4]);
        let h = m.hide_target_slot(3).unwrap();
        assert_eq!(h.codes(), &[Present, Present, Present, Hidden]);

        let m = mask(&[Present, Missing, Present]);
        let h = m.hide_target_slot(1).unwrap();
        assert_eq!(h.codes(), &[Present, Hidden, Present]);

        assert!(m.hide_target_slot(3).is_err());
    }

    #[test]
    fn broadcast_replicates_codes() {
        use SlotCode::*;
        let m = mask(&[Present, Hidden]);
        let t: Tensor<f32> = m.broadcast(&[2, 1, 1, 1], MISSING_SENTINEL).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0]);

        let m = mask(&[Present, Missing, Hidden]);
        let t: Tensor<f32> = m.broadcast(&[3, 2, 2, 2], MISSING_SENTINEL).unwrap();
        // All values within one frame are equal, and the value histogram
        // is the slot histogram scaled by C'·h·w.
        for f in 0..3 {
            let frame = &t.data()[f * 8..(f + 1) * 8];
            assert!(frame.iter().all(|v| *v == frame[0]));
        }
        let count = |v: f32| t.data().iter().filter(|x| **x == v).count();
        assert_eq!(count(1.0), 8);
        assert_eq!(count(255.0), 8);
        assert_eq!(count(0.0), 8);

        assert!(m.broadcast::<f32>(&[2, 1, 1, 1], MISSING_SENTINEL).is_err());
    }

    #[test]
    fn truncate_pure_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::<f32>::randn(&[6], &mut rng);
        let ones = Tensor::<f32>::full(&[6], 1.0);
        assert_eq!(truncate(&z, &ones).unwrap(), z);
        let zeros = Tensor::<f32>::zeros(&[6]);
        assert_eq!(truncate(&z, &zeros).unwrap(), Tensor::zeros(&[6]));
    }

    #[test]
    fn truncate_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Tensor::<f32>::randn(&[64], &mut rng);
        let mask_vals: Vec<f32> = (0..64)
            .map(|_| [0.0, 1.0, 255.0][rng.gen_range(0..3)])
            .collect();
        let m = Tensor::from_vec(vec![64], mask_vals.clone()).unwrap();
        let out = truncate(&z, &m).unwrap();
        // Independent per-element loop over the three branches.
        for i in 0..64 {
            let expected = if mask_vals[i] == 0.0 {
                0.0
            } else if mask_vals[i] == 1.0 {
                z.data()[i]
            } else {
                255.0
            };
            assert_eq!(out.data()[i], expected);
        }
    }

    #[test]
    fn truncate_rejects_unknown_codes() {
        let z = Tensor::<f32>::zeros(&[2]);
        let m = Tensor::<f32>::from_vec(vec![2], vec![1.0, 0.5]).unwrap();
        assert!(truncate(&z, &m).is_err());
    }

    #[test]
    fn truncate_is_idempotent_on_masked_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = Tensor::<f32>::randn(&[32], &mut rng);
        let mask_vals: Vec<f32> = (0..32)
            .map(|_| [0.0, 1.0, 255.0][rng.gen_range(0..3)])
            .collect();
        let m = Tensor::from_vec(vec![32], mask_vals).unwrap();
        let once = truncate(&z, &m).unwrap();
        let twice = truncate(&once, &m).unwrap();
        // 255 positions stay 255, 0 positions stay 0, and present values
        // are bit-identical to the originals.
        assert_eq!(once, twice);
    }

    #[test]
    fn remap_missing_touches_only_sentinels() {
        let t = Tensor::<f32>::from_vec(vec![4], vec![255.0, 1.0, 0.0, -3.5]).unwrap();
        assert_eq!(remap_missing(&t).data(), &[-1.0, 1.0, 0.0, -3.5]);
    }

    #[test]
    fn assemble_input_layout() {
        // Micro-tensor: channel order (Z_t, M̂, Z_M) must hold byte for byte.
        let z_t = Tensor::<f32>::from_vec(vec![1, 1, 1, 1], vec![10.0]).unwrap();
        let m_hat = Tensor::<f32>::from_vec(vec![1, 1, 1, 1], vec![20.0]).unwrap();
        let z_m = Tensor::<f32>::from_vec(vec![1, 1, 1, 1], vec![30.0]).unwrap();
        let out = assemble_input_tensor(&z_t, &m_hat, &z_m).unwrap();
        assert_eq!(out.shape(), &[1, 3, 1, 1]);
        assert_eq!(out.data(), &[10.0, 20.0, 30.0]);
    }

    #[test]
    fn assemble_input_slices_back_to_z_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let c = 4;
        let z_t = Tensor::<f32>::randn(&[2, c, 3, 3], &mut rng);
        let m_hat = Tensor::<f32>::randn(&[2, c, 3, 3], &mut rng);
        let z_m = Tensor::<f32>::randn(&[2, c, 3, 3], &mut rng);
        let mut g = Graph::inference();
        let a = g.constant(z_t.clone()).unwrap();
        let b = g.constant(m_hat).unwrap();
        let cc = g.constant(z_m).unwrap();
        let out = assemble_input(&mut g, a, b, cc).unwrap();
        assert_eq!(g.shape(out)[1], 3 * c);
        let back = g.slice(out, 1, 0, c).unwrap();
        assert_eq!(g.value(back), &z_t);

        let short = g.constant(Tensor::<f32>::zeros(&[2, c, 3, 2])).unwrap();
        assert!(assemble_input(&mut g, a, b, short).is_err());
    }
}
