use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

/// Low-rank factors of one adapted layer: `ΔW = scale · B·A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraFactors {
    /// `rank × in`
    pub a: Array2<f64>,
    /// `out × rank`
    pub b: Array2<f64>,
    pub scale: f64,
}

impl LoraFactors {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrad {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

impl LoraGrad {
    pub fn add_assign(&mut self, other: &LoraGrad) {
        self.a += &other.a;
        self.b += &other.b;
    }
}

/// Dense layer applied row-wise: `y = x·Wᵀ + bias (+ scale·(x·Aᵀ)·Bᵀ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub lora: Option<LoraFactors>,
}

impl Linear {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        assert_eq!(weight.nrows(), bias.len());
        Self {
            weight,
            bias,
            lora: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn base_param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        if let Some(l) = &self.lora {
            let xa = x.dot(&l.a.t());
            ndarray::linalg::general_mat_mul(l.scale, &xa, &l.b.t(), 1.0, &mut y);
        }
        y
    }

    pub fn forward_vec(&self, x: &Array1<f64>) -> Array1<f64> {
        self.forward(x.view().insert_axis(Axis(0)))
            .index_axis_move(Axis(0), 0)
    }

    /// Returns the input gradient (when requested) and the LoRA factor
    /// gradients (when adapted). Base weights are frozen.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        need_dx: bool,
    ) -> (Option<Array2<f64>>, Option<LoraGrad>) {
        let mut dx = need_dx.then(|| dy.dot(&self.weight));
        let grad = self.lora.as_ref().map(|l| {
            let dyb = dy.dot(&l.b);
            let xa = x.dot(&l.a.t());
            if let Some(dx) = dx.as_mut() {
                ndarray::linalg::general_mat_mul(l.scale, &dyb, &l.a, 1.0, dx);
            }
            // products of transposed views come back column-major
            LoraGrad {
                a: (dyb.t().dot(&x) * l.scale).as_standard_layout().into_owned(),
                b: (dy.t().dot(&xa) * l.scale).as_standard_layout().into_owned(),
            }
        });
        (dx, grad)
    }

    /// Folds the adapter into the base weight and removes it.
    pub fn merge_lora(&mut self) {
        if let Some(l) = self.lora.take() {
            self.weight += &l.delta();
        }
    }
}
