//! Model size accounting for quantized checkpoints.
//!
//! A stored quantized layer consists of packed weight codes plus its
//! quantizer state. The accounting mirrors the container checkpoint layout:
//!
//! - weight payload: `ceil(sum_i bits_i * weights_per_channel / 8)` bytes
//!   per layer;
//! - per output channel: bits (u8), scale (f64), zero-point (u16),
//!   lower (f64), upper (f64) = 27 bytes;
//! - per layer: bias as f64 per output channel, plus one activation
//!   quantizer (27 bytes);
//! - fixed container framing of 10 bytes.

use crate::container::HEADER_BYTES;

/// Serialized bytes of one quantizer parameter set.
pub const CHANNEL_PARAM_BYTES: u64 = 1 + 8 + 2 + 8 + 8;
/// Serialized bytes of one bias value.
pub const BIAS_BYTES: u64 = 8;

/// Per-layer allocation: per-output-channel bit-widths plus the number of
/// weights in each channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerAllocation {
    pub bits_per_channel: Vec<u8>,
    pub weights_per_channel: usize,
}

impl LayerAllocation {
    pub fn uniform(bits: u8, channels: usize, weights_per_channel: usize) -> Self {
        Self {
            bits_per_channel: vec![bits; channels],
            weights_per_channel,
        }
    }

    /// Packed weight payload in bytes (bit total rounded up per layer).
    pub fn payload_bytes(&self) -> u64 {
        let bits: u64 = self
            .bits_per_channel
            .iter()
            .map(|&b| b as u64 * self.weights_per_channel as u64)
            .sum();
        bits.div_ceil(8)
    }

    /// Quantizer state plus bias bytes.
    pub fn overhead_bytes(&self) -> u64 {
        let channels = self.bits_per_channel.len() as u64;
        channels * (CHANNEL_PARAM_BYTES + BIAS_BYTES) + CHANNEL_PARAM_BYTES
    }
}

/// Packed weight payload over all layers.
pub fn payload_bytes(layers: &[LayerAllocation]) -> u64 {
    layers.iter().map(LayerAllocation::payload_bytes).sum()
}

/// Total stored size: payload, quantizer state, biases and framing.
pub fn model_size_bytes(layers: &[LayerAllocation]) -> u64 {
    HEADER_BYTES
        + layers
            .iter()
            .map(|l| l.payload_bytes() + l.overhead_bytes())
            .sum::<u64>()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_model_is_framing_only() {
        assert_eq!(model_size_bytes(&[]), HEADER_BYTES);
        assert_eq!(payload_bytes(&[]), 0);
    }

    #[test]
    fn eight_bit_payload_is_exactly_double_four_bit() {
        let dims = [(64usize, 18usize), (64, 64), (2, 64)];
        let at = |bits: u8| -> Vec<LayerAllocation> {
            dims.iter()
                .map(|&(c, w)| LayerAllocation::uniform(bits, c, w))
                .collect()
        };
        assert_eq!(payload_bytes(&at(8)), 2 * payload_bytes(&at(4)));
    }

    #[test]
    fn mixed_allocation_bit_accounting() {
        // 3 channels of 4 weights at {2, 3, 4} bits: 36 bits -> 5 bytes.
        let l = LayerAllocation {
            bits_per_channel: vec![2, 3, 4],
            weights_per_channel: 4,
        };
        assert_eq!(l.payload_bytes(), 5);
        assert_eq!(l.overhead_bytes(), 3 * (27 + 8) + 27);
    }
}
