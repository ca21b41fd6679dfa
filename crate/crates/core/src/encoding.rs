//! Sinusoidal positional encoding of coordinates, directions and time.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncodingConfig {
    pub n_freq_position: usize,
    pub n_freq_direction: usize,
    pub n_freq_time: usize,
    pub include_input: bool,
    /// Feed time through the sinusoidal encoding (otherwise only the raw value).
    pub encode_time: bool,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            n_freq_position: 10,
            n_freq_direction: 4,
            n_freq_time: 4,
            include_input: true,
            encode_time: true,
        }
    }
}

/// Output width of encoding `components` values with `n_freq` frequencies.
pub fn encoded_len(components: usize, n_freq: usize, include_input: bool) -> usize {
    components * (2 * n_freq + usize::from(include_input))
}

/// Writes `[u, sin(2^0 π u), cos(2^0 π u), ..., sin(2^(L-1) π u), cos(2^(L-1) π u)]`
/// for every component `u` (raw value only when `include_input`), grouped by frequency.
pub fn encode_into(values: &[f64], n_freq: usize, include_input: bool, out: &mut [f64]) {
    debug_assert_eq!(out.len(), encoded_len(values.len(), n_freq, include_input));
    let mut o = 0;
    if include_input {
        out[..values.len()].copy_from_slice(values);
        o = values.len();
    }
    for k in 0..n_freq {
        let f = (1u64 << k) as f64 * PI;
        for &u in values {
            let (s, c) = (f * u).sin_cos();
            out[o] = s;
            out[o + 1] = c;
            o += 2;
        }
    }
}

pub fn encode(values: &[f64], n_freq: usize, include_input: bool) -> Vec<f64> {
    let mut out = vec![0.0; encoded_len(values.len(), n_freq, include_input)];
    encode_into(values, n_freq, include_input, &mut out);
    out
}

/// Chain rule through `encode_into`: accumulates `d loss / d values` given the
/// gradient on the encoded vector.
pub fn encode_backward(
    values: &[f64],
    n_freq: usize,
    include_input: bool,
    d_out: &[f64],
    d_values: &mut [f64],
) {
    let mut o = 0;
    if include_input {
        for (dv, g) in d_values.iter_mut().zip(d_out) {
            *dv += g;
        }
        o = values.len();
    }
    for k in 0..n_freq {
        let f = (1u64 << k) as f64 * PI;
        for (a, &u) in values.iter().enumerate() {
            let (s, c) = (f * u).sin_cos();
            d_values[a] += f * (c * d_out[o] - s * d_out[o + 1]);
            o += 2;
        }
    }
}

/// Map a frame index to [-1, 1] over `n_frames` frames.
pub fn normalized_time(time_index: f64, n_frames: usize) -> f64 {
    if n_frames <= 1 {
        0.0
    } else {
        2.0 * time_index / (n_frames - 1) as f64 - 1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_input_gives_zero_sines_and_unit_cosines() {
        let e = encode(&[0.0, 0.0, 0.0], 3, true);
        assert_eq!(e.len(), 21);
        assert!(e[..3].iter().all(|&v| v == 0.0));
        for pair in e[3..].chunks(2) {
            assert_eq!(pair, [0.0, 1.0]);
        }
    }

    #[test]
    fn no_frequencies_is_identity() {
        assert_eq!(encode(&[0.3, -1.2, 2.0], 0, true), vec![0.3, -1.2, 2.0]);
        assert!(encode(&[0.3], 0, false).is_empty());
    }

    #[test]
    fn matches_table_for_half() {
        // x = (0.5, 0, 0), two frequencies: sin/cos of π/2 and π per component.
        let e = encode(&[0.5, 0.0, 0.0], 2, false);
        let expected = [
            1.0, 0.0, 0.0, 1.0, 0.0, 1.0, // k = 0: sin(π/2), cos(π/2), then y and z
            0.0, -1.0, 0.0, 1.0, 0.0, 1.0, // k = 1: sin(π), cos(π)
        ];
        for (a, b) in e.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = [0.31, -0.72, 0.05];
        let g: Vec<f64> = (0..encoded_len(3, 4, true)).map(|i| (i as f64 * 0.37).sin()).collect();
        let loss = |x: &[f64]| -> f64 { encode(x, 4, true).iter().zip(&g).map(|(a, b)| a * b).sum() };
        let mut d = [0.0; 3];
        encode_backward(&x, 4, true, &g, &mut d);
        for a in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[a] += 1e-6;
            xm[a] -= 1e-6;
            assert_abs_diff_eq!(d[a], (loss(&xp) - loss(&xm)) / 2e-6, epsilon = 1e-6);
        }
    }

    #[test]
    fn time_spans_unit_interval() {
        assert_eq!(normalized_time(0.0, 8), -1.0);
        assert_eq!(normalized_time(7.0, 8), 1.0);
        assert_eq!(normalized_time(0.0, 1), 0.0);
    }
}
