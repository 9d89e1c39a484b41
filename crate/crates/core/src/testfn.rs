//! Scalar test functions on mode space.

use serde::{Deserialize, Serialize};

/// A bounded or smooth scalar function of the state.
pub trait ScalarField: Sync {
    fn eval(&self, z: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64 + Sync> ScalarField for F {
    fn eval(&self, z: &[f64]) -> f64 {
        self(z)
    }
}

/// Named test functions used by the experiments and the configuration layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestFunction {
    /// `z_mode`.
    Coordinate { mode: usize },
    /// `z_mode^2`.
    Square { mode: usize },
    /// `cos(freq·z_mode)`.
    Cosine { mode: usize, freq: f64 },
    /// `tanh(scale·⟨w, z⟩)`, a bounded smooth function.
    Tanh { weights: Vec<f64>, scale: f64 },
    /// `1{⟨w, z⟩ > level}`.
    HalfSpace { weights: Vec<f64>, level: f64 },
    /// `exp⟨w, z⟩`, positive and unbounded.
    Exponential { weights: Vec<f64> },
    /// `exp(c·tanh(⟨w, z⟩/c))`, a soft-clipped exponential with values in `[e^{-c}, e^c]`.
    ClippedExponential { weights: Vec<f64>, clip: f64 },
}

impl TestFunction {
    /// Declared sup bound, if finite.
    pub fn bound(&self) -> Option<f64> {
        match self {
            Self::Coordinate { .. } | Self::Square { .. } | Self::Exponential { .. } => None,
            Self::Cosine { .. } | Self::Tanh { .. } | Self::HalfSpace { .. } => Some(1.0),
            Self::ClippedExponential { clip, .. } => Some(clip.exp()),
        }
    }
}

fn weighted(w: &[f64], z: &[f64]) -> f64 {
    w.iter().zip(z).map(|(a, b)| a * b).sum()
}

impl ScalarField for TestFunction {
    fn eval(&self, z: &[f64]) -> f64 {
        match self {
            Self::Coordinate { mode } => z[*mode],
            Self::Square { mode } => z[*mode] * z[*mode],
            Self::Cosine { mode, freq } => (freq * z[*mode]).cos(),
            Self::Tanh { weights, scale } => (scale * weighted(weights, z)).tanh(),
            Self::HalfSpace { weights, level } => {
                if weighted(weights, z) > *level {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Exponential { weights } => weighted(weights, z).exp(),
            Self::ClippedExponential { weights, clip } => (clip * (weighted(weights, z) / clip).tanh()).exp(),
        }
    }
}
