//! Attribute word sources: the continuous mapper and a discrete per-bin
//! token table used as a comparison baseline.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attribute::{normalize, AttributeSpec, AttributeValue};
use crate::error::{Error, Result};
use crate::mapper::{MapperGrads, MapperTrace, WordMapper, INIT_STD};

/// One learned token per grid value of a single attribute. Off-grid values
/// blend the two nearest bins linearly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteWordTable {
    pub slot: String,
    pub attribute: AttributeSpec,
    /// Normalized bin centres, ascending.
    pub bins: Vec<f64>,
    /// `bins.len() × width`
    pub embeddings: Array2<f64>,
}

impl DiscreteWordTable {
    pub fn new(
        attribute: &AttributeSpec,
        bins: usize,
        width: usize,
        seed: u64,
        init_bias: Option<&[f64]>,
    ) -> Result<Self> {
        if bins < 2 || width == 0 {
            return Err(Error::Config(format!(
                "discrete table needs >= 2 bins and positive width, got {bins}/{width}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut embeddings = Array2::from_shape_simple_fn((bins, width), || normal.sample(&mut rng));
        if let Some(bias) = init_bias {
            if bias.len() != width {
                return Err(Error::ShapeMismatch {
                    expected: vec![width],
                    actual: vec![bias.len()],
                });
            }
            for mut row in embeddings.rows_mut() {
                row += &ndarray::ArrayView1::from(bias);
            }
        }
        let denom = if attribute.periodic { bins } else { bins - 1 } as f64;
        Ok(Self {
            slot: attribute.name.clone(),
            attribute: attribute.clone(),
            bins: (0..bins).map(|i| i as f64 / denom).collect(),
            embeddings,
        })
    }

    /// The (bin, weight) pairs blended for a normalized value.
    pub fn blend(&self, u: f64) -> Vec<(usize, f64)> {
        let n = self.bins.len();
        let upper = self.bins.partition_point(|&b| b <= u);
        if upper == 0 {
            return vec![(0, 1.0)];
        }
        let lo = upper - 1;
        if upper == n {
            if self.attribute.periodic && u > self.bins[lo] {
                let w = (u - self.bins[lo]) / (1.0 - self.bins[lo]);
                return vec![(lo, 1.0 - w), (0, w)];
            }
            return vec![(lo, 1.0)];
        }
        let w = (u - self.bins[lo]) / (self.bins[upper] - self.bins[lo]);
        if w == 0.0 {
            vec![(lo, 1.0)]
        } else {
            vec![(lo, 1.0 - w), (upper, w)]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WordModel {
    Continuous(WordMapper),
    Discrete(DiscreteWordTable),
}

#[derive(Debug, Clone)]
pub enum WordTrace {
    Continuous(MapperTrace),
    Discrete {
        blend: Vec<(usize, f64)>,
        output: Array1<f64>,
    },
}

impl WordTrace {
    pub fn output(&self) -> &Array1<f64> {
        match self {
            WordTrace::Continuous(t) => &t.output,
            WordTrace::Discrete { output, .. } => output,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum WordGrads {
    Continuous(MapperGrads),
    Discrete(Array2<f64>),
}

impl WordGrads {
    pub fn zeros_like(model: &WordModel) -> Self {
        match model {
            WordModel::Continuous(m) => WordGrads::Continuous(MapperGrads::zeros_like(m)),
            WordModel::Discrete(t) => WordGrads::Discrete(Array2::zeros(t.embeddings.raw_dim())),
        }
    }

    pub fn add_assign(&mut self, other: &WordGrads) {
        match (self, other) {
            (WordGrads::Continuous(a), WordGrads::Continuous(b)) => a.add_assign(b),
            (WordGrads::Discrete(a), WordGrads::Discrete(b)) => *a += b,
            _ => panic!("mismatched word gradient kinds"),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            WordGrads::Continuous(g) => g.is_zero(),
            WordGrads::Discrete(g) => g.iter().all(|&v| v == 0.0),
        }
    }

    /// Flat views in the same order as [`WordModel::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        match self {
            WordGrads::Continuous(g) => vec![
                g.w1.as_slice().unwrap(),
                g.b1.as_slice().unwrap(),
                g.w2.as_slice().unwrap(),
                g.b2.as_slice().unwrap(),
            ],
            WordGrads::Discrete(g) => vec![g.as_slice().unwrap()],
        }
    }
}

impl WordModel {
    pub fn slot(&self) -> &str {
        match self {
            WordModel::Continuous(m) => &m.slot,
            WordModel::Discrete(t) => &t.slot,
        }
    }

    pub fn attributes(&self) -> &[AttributeSpec] {
        match self {
            WordModel::Continuous(m) => &m.attributes,
            WordModel::Discrete(t) => std::slice::from_ref(&t.attribute),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            WordModel::Continuous(m) => m.output_dim(),
            WordModel::Discrete(t) => t.embeddings.ncols(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            WordModel::Continuous(m) => m.param_count(),
            WordModel::Discrete(t) => t.embeddings.len(),
        }
    }

    pub fn forward(&self, values: &AttributeValue) -> Result<WordTrace> {
        match self {
            WordModel::Continuous(m) => m.forward(values).map(WordTrace::Continuous),
            WordModel::Discrete(t) => {
                let spec = &t.attribute;
                let v = values
                    .get(&spec.name)
                    .ok_or_else(|| Error::MissingAttribute(spec.name.clone()))?;
                let blend = t.blend(normalize(spec, v)?);
                let mut output = Array1::zeros(t.embeddings.ncols());
                for &(i, w) in &blend {
                    output.scaled_add(w, &t.embeddings.row(i));
                }
                Ok(WordTrace::Discrete { blend, output })
            }
        }
    }

    pub fn backward(&self, trace: &WordTrace, d_output: &Array1<f64>) -> WordGrads {
        match (self, trace) {
            (WordModel::Continuous(m), WordTrace::Continuous(t)) => {
                WordGrads::Continuous(m.backward(t, d_output))
            }
            (WordModel::Discrete(t), WordTrace::Discrete { blend, .. }) => {
                let mut g = Array2::zeros(t.embeddings.raw_dim());
                for &(i, w) in blend {
                    g.row_mut(i).scaled_add(w, d_output);
                }
                WordGrads::Discrete(g)
            }
            _ => panic!("trace does not belong to this word model"),
        }
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            WordModel::Continuous(m) => vec![
                m.w1.as_slice_mut().unwrap(),
                m.b1.as_slice_mut().unwrap(),
                m.w2.as_slice_mut().unwrap(),
                m.b2.as_slice_mut().unwrap(),
            ],
            WordModel::Discrete(t) => vec![t.embeddings.as_slice_mut().unwrap()],
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            WordModel::Continuous(m) => m.is_finite(),
            WordModel::Discrete(t) => t.embeddings.iter().all(|v| v.is_finite()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(periodic: bool) -> DiscreteWordTable {
        let spec = AttributeSpec::new("x", 0.0, 1.0).unwrap().periodic(periodic);
        DiscreteWordTable::new(&spec, 5, 4, 0, None).unwrap()
    }

    #[test]
    fn blend_hits_bins_exactly() {
        let t = table(false);
        assert_eq!(t.blend(0.0), vec![(0, 1.0)]);
        assert_eq!(t.blend(0.5), vec![(2, 1.0)]);
        assert_eq!(t.blend(1.0), vec![(4, 1.0)]);
    }

    #[test]
    fn blend_interpolates_neighbours() {
        let t = table(false);
        let b = t.blend(0.375);
        assert_eq!(b[0].0, 1);
        assert_eq!(b[1].0, 2);
        assert!((b[0].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn periodic_blend_wraps_to_first_bin() {
        let t = table(true);
        let b = t.blend(0.9);
        assert_eq!(b[0].0, 4);
        assert_eq!(b[1].0, 0);
        assert!((b[1].1 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn discrete_backward_routes_to_blended_rows() {
        let model = WordModel::Discrete(table(false));
        let trace = model.forward(&AttributeValue::new().with("x", 0.125)).unwrap();
        let g = model.backward(&trace, &Array1::ones(4));
        let WordGrads::Discrete(g) = g else { unreachable!() };
        assert_eq!(g.row(0).sum(), 2.0);
        assert_eq!(g.row(1).sum(), 2.0);
        assert_eq!(g.row(2).sum(), 0.0);
    }
}
