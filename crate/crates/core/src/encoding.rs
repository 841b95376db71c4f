//! Multi-frequency sin/cos features of a normalized scalar.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionalEncodingConfig {
    pub num_frequencies: usize,
    pub include_raw: bool,
}

impl Default for PositionalEncodingConfig {
    fn default() -> Self {
        Self {
            num_frequencies: 4,
            include_raw: true,
        }
    }
}

impl PositionalEncodingConfig {
    /// Features produced per scalar.
    pub fn width(&self) -> usize {
        2 * self.num_frequencies + usize::from(self.include_raw)
    }

    /// Euclidean Lipschitz constant of the encoding as a function of `x`.
    pub fn lipschitz(&self) -> f64 {
        let freq_sq: f64 = (0..self.num_frequencies)
            .map(|k| (2f64.powi(k as i32) * PI).powi(2))
            .sum();
        (freq_sq + if self.include_raw { 1.0 } else { 0.0 }).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_frequencies == 0 {
            return Err(Error::Config("num_frequencies must be positive".into()));
        }
        Ok(())
    }
}

/// `[sin(2^0 πx), cos(2^0 πx), …, sin(2^(L-1) πx), cos(2^(L-1) πx), (x)]`
pub fn positional_encode(x: f64, cfg: &PositionalEncodingConfig) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(cfg.width());
    encode_into(x, cfg, &mut out)?;
    Ok(out)
}

pub(crate) fn encode_into(x: f64, cfg: &PositionalEncodingConfig, out: &mut Vec<f64>) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Precondition(format!(
            "positional encoding input {x} not in [0, 1]"
        )));
    }
    for k in 0..cfg.num_frequencies {
        let w = 2f64.powi(k as i32) * PI;
        let (s, c) = (w * x).sin_cos();
        out.push(s);
        out.push(c);
    }
    if cfg.include_raw {
        out.push(x);
    }
    Ok(())
}

/// Derivative of each feature with respect to `x`.
pub fn positional_encode_derivative(x: f64, cfg: &PositionalEncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.width());
    for k in 0..cfg.num_frequencies {
        let w = 2f64.powi(k as i32) * PI;
        let (s, c) = (w * x).sin_cos();
        out.push(w * c);
        out.push(-w * s);
    }
    if cfg.include_raw {
        out.push(1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(l: usize, raw: bool) -> PositionalEncodingConfig {
        PositionalEncodingConfig {
            num_frequencies: l,
            include_raw: raw,
        }
    }

    #[test]
    fn zero_input() {
        assert_eq!(positional_encode(0.0, &cfg(2, false)).unwrap(), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn half_input() {
        let v = positional_encode(0.5, &cfg(1, false)).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-15);
        assert!(v[1].abs() < 1e-15);
    }

    #[test]
    fn matches_direct_scalar_evaluation() {
        let v = positional_encode(0.3, &cfg(2, true)).unwrap();
        let expect = [
            (0.3 * PI).sin(),
            (0.3 * PI).cos(),
            (0.6 * PI).sin(),
            (0.6 * PI).cos(),
            0.3,
        ];
        for (a, b) in v.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(positional_encode(1.0000001, &cfg(2, true)).is_err());
        assert!(positional_encode(-0.1, &cfg(2, true)).is_err());
        assert!(positional_encode(f64::NAN, &cfg(2, true)).is_err());
    }

    #[test]
    fn width_counts_raw_term() {
        assert_eq!(cfg(6, true).width(), 13);
        assert_eq!(cfg(3, false).width(), 6);
    }

    #[test]
    fn derivative_matches_central_difference() {
        let c = cfg(4, true);
        let x = 0.37;
        let h = 1e-6;
        let d = positional_encode_derivative(x, &c);
        let p = positional_encode(x + h, &c).unwrap();
        let m = positional_encode(x - h, &c).unwrap();
        for i in 0..c.width() {
            let fd = (p[i] - m[i]) / (2.0 * h);
            assert!((fd - d[i]).abs() < 1e-6, "{i}: {fd} vs {}", d[i]);
        }
    }

    proptest! {
        #[test]
        fn encoded_components_bounded(x in 0.0f64..=1.0, l in 1usize..10) {
            let v = positional_encode(x, &cfg(l, true)).unwrap();
            prop_assert_eq!(v.len(), 2 * l + 1);
            for c in &v[..2 * l] {
                prop_assert!((-1.0..=1.0).contains(c));
            }
            prop_assert!((0.0..=1.0).contains(&v[2 * l]));
        }
    }
}
