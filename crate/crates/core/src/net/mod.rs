//! Graph-convolutional keypoint classifier and the probabilistic keypoint
//! head.
//!
//! Per point the network computes `p(k | x_p)`; columns are renormalised
//! into `p(x_p | k)` and each keypoint is the expectation of the point
//! coordinates under its column, so every keypoint is a convex combination
//! of input points.

mod baseline;
mod detect;
pub mod layers;
pub mod prob;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point3;

pub use baseline::nn_baseline_keypoints;
pub use detect::{detect_keypoints, forward, point_logits, ForwardCache};
pub use layers::{EdgeConvCache, FeatureCache};
pub use prob::PointProbabilities;

/// Network shape and the softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Number of keypoint classes K.
    pub keypoints: usize,
    /// Hidden width H.
    pub hidden: usize,
    /// Number of edge-convolution layers L.
    pub layers: usize,
    /// Generalised softmax temperature t.
    pub temperature: f64,
    /// Factor applied to millimetre coordinates before the first layer.
    pub input_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            keypoints: 512,
            hidden: 64,
            layers: 3,
            temperature: 0.6,
            input_scale: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.keypoints < 4 {
            return Err(Error::InvalidArgument(format!(
                "need at least 4 keypoints, got {}",
                self.keypoints
            )));
        }
        if self.hidden == 0 {
            return Err(Error::InvalidArgument("hidden width must be positive".to_string()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.input_scale > 0.0) || !self.input_scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "input scale must be positive, got {}",
                self.input_scale
            )));
        }
        Ok(())
    }
}

/// Affine layer `y = x W + b`, bias stored as a 1-row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: DMatrix<f64>,
    pub bias: DMatrix<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: DMatrix::zeros(inputs, outputs),
            bias: DMatrix::zeros(1, outputs),
        }
    }
}

/// Edge MLP acting on `[h_i, h_j - h_i]`, split into the node half and the
/// difference half of its weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeConvParams {
    pub w_node: DMatrix<f64>,
    pub w_diff: DMatrix<f64>,
    pub bias: DMatrix<f64>,
}

impl EdgeConvParams {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        EdgeConvParams {
            w_node: DMatrix::zeros(inputs, outputs),
            w_diff: DMatrix::zeros(inputs, outputs),
            bias: DMatrix::zeros(1, outputs),
        }
    }
}

/// All trainable tensors plus the configuration they were built for.
/// Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub feature: Dense,
    pub edge: Vec<EdgeConvParams>,
    pub head: Dense,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let h = config.hidden;
        ModelParams {
            config,
            feature: Dense::zeros(3, h),
            edge: (0..config.layers).map(|_| EdgeConvParams::zeros(h, h)).collect(),
            head: Dense::zeros(h, config.keypoints),
        }
    }

    /// Random initialisation scaled for leaky-rectifier layers.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::zeros(config);
        let h = config.hidden as f64;
        let mut fill = |m: &mut DMatrix<f64>, std: f64| {
            let normal = Normal::new(0.0, std).expect("positive std");
            m.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        };
        fill(&mut p.feature.weight, 1.0);
        fill(&mut p.feature.bias, 1.0);
        for layer in &mut p.edge {
            fill(&mut layer.w_node, (1.0 / h).sqrt());
            fill(&mut layer.w_diff, (1.0 / h).sqrt());
        }
        fill(&mut p.head.weight, (1.0 / h).sqrt());
        Ok(p)
    }

    /// Tensors in canonical order with stable names.
    pub fn tensors(&self) -> Vec<(String, &DMatrix<f64>)> {
        let mut out = vec![
            ("feature.weight".to_string(), &self.feature.weight),
            ("feature.bias".to_string(), &self.feature.bias),
        ];
        for (l, e) in self.edge.iter().enumerate() {
            out.push((format!("edge{l}.w_node"), &e.w_node));
            out.push((format!("edge{l}.w_diff"), &e.w_diff));
            out.push((format!("edge{l}.bias"), &e.bias));
        }
        out.push(("head.weight".to_string(), &self.head.weight));
        out.push(("head.bias".to_string(), &self.head.bias));
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut DMatrix<f64>> {
        let mut out = vec![&mut self.feature.weight, &mut self.feature.bias];
        for e in &mut self.edge {
            out.push(&mut e.w_node);
            out.push(&mut e.w_diff);
            out.push(&mut e.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks shapes against the configuration and that every value is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = ModelParams::zeros(self.config);
        if self.edge.len() != expected.edge.len() {
            return Err(Error::Shape(format!(
                "{} edge-conv layers, config says {}",
                self.edge.len(),
                expected.edge.len()
            )));
        }
        for ((name, t), (_, e)) in self.tensors().into_iter().zip(expected.tensors()) {
            if t.shape() != e.shape() {
                return Err(Error::Shape(format!(
                    "{name} has shape {:?}, expected {:?}",
                    t.shape(),
                    e.shape()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter {name}")));
            }
        }
        Ok(())
    }

    /// `self += k * other`.
    pub fn add_scaled(&mut self, other: &ModelParams, k: f64) {
        for (a, (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.zip_apply(b, |x, y| *x += k * y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= k);
        }
    }

    /// Euclidean norm over all tensors.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Expected keypoint locations, one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<Point3>,
    pub subject: Option<String>,
}

impl KeypointSet {
    pub fn new(points: Vec<Point3>) -> Self {
        KeypointSet {
            points,
            subject: None,
        }
    }

    pub fn with_subject(mut self, subject: impl Into<String>) -> Self {
        self.subject = Some(subject.into());
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}
