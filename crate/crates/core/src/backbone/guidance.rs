use ndarray::{Array2, Array3, Zip};

use super::DiffusionBackbone;
use crate::error::{Error, Result};

/// Classifier-free guidance: `negative + s·(positive − negative)`.
///
/// `s = 1` returns the positive prediction and `s = 0` the negative one
/// without any arithmetic, so both endpoints are exact.
pub fn cfg_predict<B: DiffusionBackbone + ?Sized>(
    backbone: &B,
    sample: &Array3<f64>,
    t: usize,
    positive: &Array2<f64>,
    negative: &Array2<f64>,
    scale: f64,
) -> Result<Array3<f64>> {
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::Precondition(format!("guidance scale {scale} must be finite and ≥ 0")));
    }
    if positive.dim() != negative.dim() {
        return Err(Error::ShapeMismatch {
            expected: positive.shape().to_vec(),
            actual: negative.shape().to_vec(),
        });
    }
    let pos = backbone.denoise(sample, t, positive)?;
    let neg = backbone.denoise(sample, t, negative)?;
    Ok(combine(pos, neg, scale))
}

pub(crate) fn combine(pos: Array3<f64>, neg: Array3<f64>, scale: f64) -> Array3<f64> {
    if scale == 1.0 {
        return pos;
    }
    if scale == 0.0 {
        return neg;
    }
    Zip::from(&pos)
        .and(&neg)
        .map_collect(|&p, &n| n + scale * (p - n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{ToyBackbone, ToyConfig};
    use ndarray::Array2;

    fn setup() -> (ToyBackbone, Array3<f64>, Array2<f64>, Array2<f64>) {
        let bb = ToyBackbone::new(ToyConfig::default()).unwrap();
        let x = Array3::from_shape_fn((3, 32, 32), |(c, i, j)| ((c * 31 + i * 7 + j) as f64 * 0.37).sin());
        let p = bb
            .encode(&Array2::from_shape_fn((24, 16), |(i, j)| ((i * 16 + j) as f64 * 0.11).cos()))
            .unwrap();
        let n = bb
            .encode(&Array2::from_shape_fn((24, 16), |(i, j)| ((i + j * 3) as f64 * 0.21).sin()))
            .unwrap();
        (bb, x, p, n)
    }

    #[test]
    fn endpoints_are_exact() {
        let (bb, x, p, n) = setup();
        assert_eq!(cfg_predict(&bb, &x, 40, &p, &n, 1.0).unwrap(), bb.denoise(&x, 40, &p).unwrap());
        assert_eq!(cfg_predict(&bb, &x, 40, &p, &n, 0.0).unwrap(), bb.denoise(&x, 40, &n).unwrap());
    }

    #[test]
    fn linear_in_scale() {
        let (bb, x, p, n) = setup();
        let at = |s| cfg_predict(&bb, &x, 60, &p, &n, s).unwrap();
        let expected = at(1.0) * 2.0 - at(0.0);
        let err = (&at(2.0) - &expected).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let (bb, x, p, _) = setup();
        let short = p.slice(ndarray::s![..20, ..]).to_owned();
        assert!(cfg_predict(&bb, &x, 10, &p, &short, 2.0).is_err());
        assert!(cfg_predict(&bb, &x, 10, &p, &p, -1.0).is_err());
    }
}
