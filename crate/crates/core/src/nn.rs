//! Small dense building blocks shared by the lifting MLP and the decoder.
//!
//! Every routine walks its inputs in a fixed order so results are
//! bit-identical no matter how rows are scheduled across threads.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Hidden-layer nonlinearity of a two-layer MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative, taking 0 at the ReLU kink.
    #[inline]
    pub fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

/// `out = x · w + b` for a single row; `w` is `d_in x d_out`.
#[inline]
pub fn affine_row(x: &[f64], w: &Array2<f64>, b: Option<&Array1<f64>>) -> Vec<f64> {
    let d_out = w.ncols();
    let mut out = match b {
        Some(b) => b.to_vec(),
        None => vec![0.0; d_out],
    };
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = w.row(i);
        for (o, &wij) in out.iter_mut().zip(row.iter()) {
            *o += xi * wij;
        }
    }
    out
}

/// Row-wise `x · w` without bias.
#[inline]
pub fn project_row(x: &[f64], w: &Array2<f64>) -> Vec<f64> {
    affine_row(x, w, None)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place softmax over a row of logits.
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

pub(crate) fn rows_to_array(rows: Vec<Vec<f64>>, ncols: usize) -> Array2<f64> {
    let n = rows.len();
    let mut flat = Vec::with_capacity(n * ncols);
    for r in rows {
        debug_assert_eq!(r.len(), ncols);
        flat.extend(r);
    }
    Array2::from_shape_vec((n, ncols), flat).expect("row lengths checked")
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, rounded to f32 so weights
/// survive a round trip through the weight file unchanged.
pub(crate) fn uniform_init<R: Rng>(rng: &mut R, shape: (usize, usize), fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn(shape, || {
        let v: f64 = rng.random_range(-bound..=bound);
        v as f32 as f64
    })
}

/// Two-layer perceptron `act(x·w1 + b1)·w2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub activation: Activation,
}

/// Intermediate values of one forward row, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl MlpWeights {
    pub fn new(
        w1: Array2<f64>,
        b1: Array1<f64>,
        w2: Array2<f64>,
        b2: Array1<f64>,
        activation: Activation,
    ) -> Result<Self> {
        let mlp = Self {
            w1,
            b1,
            w2,
            b2,
            activation,
        };
        mlp.validate()?;
        Ok(mlp)
    }

    pub fn zeros(d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            w1: Array2::zeros((d_in, d_hidden)),
            b1: Array1::zeros(d_hidden),
            w2: Array2::zeros((d_hidden, d_out)),
            b2: Array1::zeros(d_out),
            activation: Activation::Relu,
        }
    }

    pub fn init<R: Rng>(rng: &mut R, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        let w1 = uniform_init(rng, (d_in, d_hidden), d_in);
        let b1 = uniform_init(rng, (1, d_hidden), d_in).into_shape_with_order(d_hidden).unwrap();
        let w2 = uniform_init(rng, (d_hidden, d_out), d_hidden);
        let b2 = uniform_init(rng, (1, d_out), d_hidden).into_shape_with_order(d_out).unwrap();
        Self {
            w1,
            b1,
            w2,
            b2,
            activation: Activation::Relu,
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.nrows()
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.w2.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.b1.len() == self.w1.ncols(),
            "mlp b1 has {} entries, w1 has {} columns",
            self.b1.len(),
            self.w1.ncols()
        );
        ensure!(
            self.w2.nrows() == self.w1.ncols(),
            "mlp w2 has {} rows, hidden width is {}",
            self.w2.nrows(),
            self.w1.ncols()
        );
        ensure!(
            self.b2.len() == self.w2.ncols(),
            "mlp b2 has {} entries, w2 has {} columns",
            self.b2.len(),
            self.w2.ncols()
        );
        let finite = self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|v| v.is_finite());
        ensure!(finite, "mlp weights contain non-finite values");
        Ok(())
    }

    pub fn forward_traced(&self, x: &[f64]) -> MlpTrace {
        let hidden_pre = affine_row(x, &self.w1, Some(&self.b1));
        let hidden: Vec<f64> = hidden_pre.iter().map(|&h| self.activation.apply(h)).collect();
        let output = affine_row(&hidden, &self.w2, Some(&self.b2));
        MlpTrace {
            hidden_pre,
            hidden,
            output,
        }
    }

    #[inline]
    pub fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        let hidden: Vec<f64> = affine_row(x, &self.w1, Some(&self.b1))
            .into_iter()
            .map(|h| self.activation.apply(h))
            .collect();
        affine_row(&hidden, &self.w2, Some(&self.b2))
    }

    /// Applies the MLP to every row of `x`.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        ensure!(
            x.ncols() == self.d_in(),
            "mlp expects {} input columns, got {}",
            self.d_in(),
            x.ncols()
        );
        let rows: Vec<Vec<f64>> = (0..x.nrows())
            .into_par_iter()
            .map(|r| {
                let row = x.row(r);
                match row.as_slice() {
                    Some(s) => self.forward_row(s),
                    None => self.forward_row(&row.to_vec()),
                }
            })
            .collect();
        Ok(rows_to_array(rows, self.d_out()))
    }
}
