//! The learnable map from attribute values to a token embedding: positional
//! encoding of each normalized attribute followed by a two-layer MLP.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attribute::{normalize, AttributeSpec, AttributeValue};
use crate::encoding::{encode_into, positional_encode_derivative, PositionalEncodingConfig};
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordMapper {
    /// Name used by `<attr:NAME>` slots.
    pub slot: String,
    /// Consumed attributes, in input order.
    pub attributes: Vec<AttributeSpec>,
    pub pe_config: PositionalEncodingConfig,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Gradients with the same layout as the mapper weights.
#[derive(Debug, Clone, PartialEq)]
pub struct MapperGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl MapperGrads {
    pub fn zeros_like(m: &WordMapper) -> Self {
        Self {
            w1: Array2::zeros(m.w1.raw_dim()),
            b1: Array1::zeros(m.b1.raw_dim()),
            w2: Array2::zeros(m.w2.raw_dim()),
            b2: Array1::zeros(m.b2.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &MapperGrads) {
        self.w1 += &other.w1;
        self.b1 += &other.b1;
        self.w2 += &other.w2;
        self.b2 += &other.b2;
    }

    pub fn is_zero(&self) -> bool {
        [
            self.w1.as_slice().unwrap(),
            self.b1.as_slice().unwrap(),
            self.w2.as_slice().unwrap(),
            self.b2.as_slice().unwrap(),
        ]
        .iter()
        .all(|s| s.iter().all(|&v| v == 0.0))
    }
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MapperTrace {
    pub input: Array1<f64>,
    pub hidden: Array1<f64>,
    pub output: Array1<f64>,
}

/// Builds a mapper with N(0, 0.02²) weights. The output bias starts at
/// `init_bias` (typically the embedding of a category word) or zero.
pub fn init_mapper(
    specs: &[AttributeSpec],
    pe_config: PositionalEncodingConfig,
    hidden_dim: usize,
    output_dim: usize,
    seed: u64,
    init_bias: Option<&[f64]>,
) -> Result<WordMapper> {
    if specs.is_empty() {
        return Err(Error::Config("mapper needs at least one attribute".into()));
    }
    if hidden_dim == 0 || output_dim == 0 {
        return Err(Error::Config(format!(
            "mapper dims must be positive (hidden {hidden_dim}, output {output_dim})"
        )));
    }
    pe_config.validate()?;
    for spec in specs {
        spec.validate()?;
    }
    let input_dim = pe_config.width() * specs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let w1 = Array2::from_shape_simple_fn((hidden_dim, input_dim), || normal.sample(&mut rng));
    let w2 = Array2::from_shape_simple_fn((output_dim, hidden_dim), || normal.sample(&mut rng));
    let b2 = match init_bias {
        Some(bias) if bias.len() != output_dim => {
            return Err(Error::ShapeMismatch {
                expected: vec![output_dim],
                actual: vec![bias.len()],
            })
        }
        Some(bias) => Array1::from(bias.to_vec()),
        None => Array1::zeros(output_dim),
    };
    let slot = specs
        .iter()
        .map(|s| s.name.as_str())
        .collect::<Vec<_>>()
        .join("-");
    Ok(WordMapper {
        slot,
        attributes: specs.to_vec(),
        pe_config,
        w1,
        b1: Array1::zeros(hidden_dim),
        w2,
        b2,
    })
}

impl WordMapper {
    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn attribute_names(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|s| s.name.as_str())
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|v| v.is_finite())
    }

    /// Normalized inputs in `attributes` order.
    pub fn normalized_inputs(&self, values: &AttributeValue) -> Result<Vec<f64>> {
        self.attributes
            .iter()
            .map(|spec| {
                let v = values
                    .get(&spec.name)
                    .ok_or_else(|| Error::MissingAttribute(spec.name.clone()))?;
                normalize(spec, v)
            })
            .collect()
    }

    pub fn encode_inputs(&self, normalized: &[f64]) -> Result<Array1<f64>> {
        if normalized.len() != self.attributes.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.attributes.len()],
                actual: vec![normalized.len()],
            });
        }
        let mut feats = Vec::with_capacity(self.input_dim());
        for &x in normalized {
            encode_into(x, &self.pe_config, &mut feats)?;
        }
        Ok(Array1::from(feats))
    }

    pub fn forward_normalized(&self, normalized: &[f64]) -> Result<MapperTrace> {
        let input = self.encode_inputs(normalized)?;
        let hidden = (self.w1.dot(&input) + &self.b1).mapv(f64::tanh);
        let output = self.w2.dot(&hidden) + &self.b2;
        Ok(MapperTrace {
            input,
            hidden,
            output,
        })
    }

    pub fn forward(&self, values: &AttributeValue) -> Result<MapperTrace> {
        self.forward_normalized(&self.normalized_inputs(values)?)
    }

    /// Backpropagates `d_output` through a recorded forward pass.
    pub fn backward(&self, trace: &MapperTrace, d_output: &Array1<f64>) -> MapperGrads {
        let d_hidden = self.w2.t().dot(d_output);
        let d_pre = &d_hidden * &trace.hidden.mapv(|h| 1.0 - h * h);
        MapperGrads {
            w1: outer(&d_pre, &trace.input),
            b1: d_pre,
            w2: outer(d_output, &trace.hidden),
            b2: d_output.clone(),
        }
    }

    /// Jacobian of the output with respect to the normalized inputs
    /// (`output_dim × n_attributes`).
    pub fn input_jacobian(&self, normalized: &[f64]) -> Result<Array2<f64>> {
        let trace = self.forward_normalized(normalized)?;
        let width = self.pe_config.width();
        let mut d_input = Array2::zeros((self.input_dim(), normalized.len()));
        for (j, &x) in normalized.iter().enumerate() {
            for (k, d) in positional_encode_derivative(x, &self.pe_config)
                .into_iter()
                .enumerate()
            {
                d_input[[j * width + k, j]] = d;
            }
        }
        let gate = trace.hidden.mapv(|h| 1.0 - h * h).insert_axis(Axis(1));
        Ok(self.w2.dot(&(self.w1.dot(&d_input) * &gate)))
    }

    /// Upper bound on `|g(a) - g(a')| / |a - a'|` in normalized units:
    /// the product of spectral norms, tanh's slope bound of 1, and the
    /// encoding's Lipschitz constant.
    pub fn lipschitz_bound(&self) -> f64 {
        spectral_norm(&self.w2) * spectral_norm(&self.w1) * self.pe_config.lipschitz()
    }

    pub fn apply_update(&mut self, f: impl Fn(&mut [f64], &[f64]), grads: &MapperGrads) {
        f(self.w1.as_slice_mut().unwrap(), grads.w1.as_slice().unwrap());
        f(self.b1.as_slice_mut().unwrap(), grads.b1.as_slice().unwrap());
        f(self.w2.as_slice_mut().unwrap(), grads.w2.as_slice().unwrap());
        f(self.b2.as_slice_mut().unwrap(), grads.b2.as_slice().unwrap());
    }
}

/// Always in standard layout; optimizer updates walk it as a flat slice.
fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

pub fn spectral_norm(m: &Array2<f64>) -> f64 {
    let dm = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]]);
    dm.singular_values().max()
}
