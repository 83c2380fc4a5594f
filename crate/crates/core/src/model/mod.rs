//! Layer stacks, dense forward pass with feature-map capture, and synthetic models.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{LosaError, Result};
use crate::linalg::{gaussian_fill, Matrix, Rng};

pub mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

/// One linear layer; `weight` is `c_out × c_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub weight: Matrix,
}

impl Layer {
    pub fn c_out(&self) -> usize {
        self.weight.rows()
    }

    pub fn c_in(&self) -> usize {
        self.weight.cols()
    }
}

/// Ordered, chain-composable stack of linear layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    layers: Vec<Layer>,
}

impl LayerStack {
    /// Names layers `layer0`, `layer1`, ... and checks chain composability.
    pub fn from_weights(weights: Vec<Matrix>) -> Result<Self> {
        let layers = weights
            .into_iter()
            .enumerate()
            .map(|(i, weight)| Layer {
                name: format!("layer{i}"),
                weight,
            })
            .collect();
        Self::new(layers)
    }

    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(LosaError::InvalidArgument(
                "layer stack needs at least one layer".into(),
            ));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].c_out() != pair[1].c_in() {
                return Err(LosaError::InvalidArgument(format!(
                    "layer {i} has c_out {} but layer {} has c_in {}",
                    pair[0].c_out(),
                    i + 1,
                    pair[1].c_in()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].c_in()
    }

    pub fn weights(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().map(|l| &l.weight)
    }

    /// Same names, new weights; shapes must match layer by layer.
    pub fn with_weights(&self, weights: Vec<Matrix>) -> Result<Self> {
        if weights.len() != self.layers.len() {
            return Err(LosaError::InvalidArgument(format!(
                "expected {} weight matrices, got {}",
                self.layers.len(),
                weights.len()
            )));
        }
        let layers = self
            .layers
            .iter()
            .zip(weights)
            .map(|(l, w)| {
                if l.weight.shape() != w.shape() {
                    return Err(LosaError::Shape {
                        op: "with_weights",
                        left: l.weight.shape(),
                        right: w.shape(),
                    });
                }
                Ok(Layer {
                    name: l.name.clone(),
                    weight: w,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    /// `min(c_out, c_in)` per layer; the largest admissible adapter rank.
    pub fn rank_caps(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.c_out().min(l.c_in())).collect()
    }

    pub fn total_weights(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }
}

/// Elementwise nonlinearity between consecutive layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, m: &Matrix) -> Matrix {
        match self {
            Activation::Relu => m.map(|v| v.max(0.0)),
            Activation::Identity => m.clone(),
        }
    }
}

/// Per-layer input and output maps, stored as `samples × features`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub inputs: Vec<Matrix>,
    pub outputs: Vec<Matrix>,
}

impl FeatureMaps {
    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn samples(&self) -> usize {
        self.inputs.first().map_or(0, Matrix::rows)
    }

    pub fn uniform_samples(&self) -> bool {
        let n = self.samples();
        self.inputs
            .iter()
            .chain(&self.outputs)
            .all(|m| m.rows() == n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibSource {
    Synthetic { seed: u64 },
    File { path: PathBuf },
    Inline,
}

/// Calibration inputs, `samples × c_in` of the first layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibBatch {
    inputs: Matrix,
    source: CalibSource,
}

impl CalibBatch {
    pub fn new(inputs: Matrix, source: CalibSource) -> Result<Self> {
        if inputs.rows() < 2 {
            return Err(LosaError::InvalidArgument(format!(
                "calibration batch needs at least 2 samples, got {}",
                inputs.rows()
            )));
        }
        Ok(Self { inputs, source })
    }

    /// I.i.d. standard Gaussian inputs.
    pub fn synthetic(samples: usize, width: usize, seed: u64) -> Result<Self> {
        let inputs = gaussian_fill(&mut Rng::new(seed), samples, width, 1.0);
        Self::new(inputs, CalibSource::Synthetic { seed })
    }

    /// Reads a headerless numeric CSV, one sample per row.
    pub fn from_csv(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        if !path.exists() {
            return Err(LosaError::NotFound(path));
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_path(&path)?;
        let mut data = Vec::new();
        let mut cols = None;
        let mut rows = 0;
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            match cols {
                None => cols = Some(record.len()),
                Some(c) if c != record.len() => {
                    return Err(LosaError::InvalidArgument(format!(
                        "{}: row {} has {} columns, expected {c}",
                        path.display(),
                        line + 1,
                        record.len()
                    )))
                }
                _ => {}
            }
            for field in record.iter() {
                let v: f64 = field.parse().map_err(|_| {
                    LosaError::InvalidArgument(format!(
                        "{}: row {} has non-numeric value {field:?}",
                        path.display(),
                        line + 1
                    ))
                })?;
                data.push(v);
            }
            rows += 1;
        }
        let inputs = Matrix::new(rows, cols.unwrap_or(0), data)?;
        Self::new(inputs, CalibSource::File { path })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn source(&self) -> &CalibSource {
        &self.source
    }

    pub fn samples(&self) -> usize {
        self.inputs.rows()
    }
}

/// Dense forward pass: `Y_i = X_i · W_iᵀ`, `X_{i+1} = act(Y_i)`.
pub fn forward_capture(
    stack: &LayerStack,
    batch: &CalibBatch,
    activation: Activation,
) -> Result<FeatureMaps> {
    forward_capture_inputs(stack, batch.inputs(), activation)
}

pub(crate) fn forward_capture_inputs(
    stack: &LayerStack,
    x: &Matrix,
    activation: Activation,
) -> Result<FeatureMaps> {
    if x.cols() != stack.input_dim() {
        return Err(LosaError::Shape {
            op: "forward_capture",
            left: x.shape(),
            right: stack.layers[0].weight.shape(),
        });
    }
    let n = stack.len();
    let mut inputs = Vec::with_capacity(n);
    let mut outputs = Vec::with_capacity(n);
    let mut current = x.clone();
    for (i, layer) in stack.layers.iter().enumerate() {
        let y = current.matmul_t(&layer.weight)?;
        let next = if i + 1 < n {
            Some(activation.apply(&y))
        } else {
            None
        };
        inputs.push(current);
        outputs.push(y);
        if let Some(next) = next {
            current = next;
        } else {
            break;
        }
    }
    Ok(FeatureMaps { inputs, outputs })
}

/// Final-layer output of the stack for `x`.
pub fn forward(stack: &LayerStack, x: &Matrix, activation: Activation) -> Result<Matrix> {
    let maps = forward_capture_inputs(stack, x, activation)?;
    Ok(maps.outputs.into_iter().last().expect("non-empty stack"))
}

/// Gaussian stack with layer `i` shaped `dims[i+1] × dims[i]`.
pub fn make_synthetic(n_layers: usize, dims: &[usize], seed: u64, sigma: f64) -> Result<LayerStack> {
    if n_layers == 0 || dims.len() != n_layers + 1 {
        return Err(LosaError::InvalidArgument(format!(
            "{n_layers} layers need {} dims, got {}",
            n_layers + 1,
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(LosaError::InvalidArgument("layer dims must be positive".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(LosaError::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
    }
    let mut rng = Rng::new(seed);
    let weights = dims
        .windows(2)
        .map(|d| gaussian_fill(&mut rng, d[1], d[0], sigma))
        .collect();
    LayerStack::from_weights(weights)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(samples: usize, width: usize, seed: u64) -> CalibBatch {
        CalibBatch::synthetic(samples, width, seed).unwrap()
    }

    #[test]
    fn identity_layer_passes_inputs_through() {
        let stack = LayerStack::from_weights(vec![Matrix::identity(4)]).unwrap();
        let b = batch(6, 4, 1);
        let maps = forward_capture(&stack, &b, Activation::Relu).unwrap();
        assert_eq!(&maps.outputs[0], b.inputs());
        assert_eq!(&maps.inputs[0], b.inputs());
    }

    #[test]
    fn zero_weights_give_zero_maps() {
        let stack = make_synthetic(3, &[4, 5, 6, 3], 0, 0.0).unwrap();
        let maps = forward_capture(&stack, &batch(5, 4, 2), Activation::Relu).unwrap();
        for y in &maps.outputs {
            assert_eq!(y.frobenius_norm(), 0.0);
        }
        for x in &maps.inputs[1..] {
            assert_eq!(x.frobenius_norm(), 0.0);
        }
    }

    #[test]
    fn three_layers_match_hand_composition() {
        let stack = make_synthetic(3, &[4, 6, 5, 3], 11, 0.7).unwrap();
        let b = batch(7, 4, 12);
        let maps = forward_capture(&stack, &b, Activation::Relu).unwrap();
        // oracle: explicit loops, no shared helpers beyond element access
        let mut x = b.inputs().clone();
        for (i, layer) in stack.layers().iter().enumerate() {
            let w = &layer.weight;
            let mut y = Matrix::zeros(x.rows(), w.rows());
            for s in 0..x.rows() {
                for o in 0..w.rows() {
                    let mut acc = 0.0;
                    for k in 0..w.cols() {
                        acc += x.get(s, k) * w.get(o, k);
                    }
                    y.set(s, o, acc);
                }
            }
            assert!(maps.inputs[i].max_abs_diff(&x).unwrap() < 1e-12);
            assert!(maps.outputs[i].max_abs_diff(&y).unwrap() < 1e-12);
            x = Matrix::from_fn(y.rows(), y.cols(), |r, c| y.get(r, c).max(0.0));
        }
        assert!(maps.uniform_samples());
    }

    #[test]
    fn forward_capture_leaves_stack_untouched() {
        let stack = make_synthetic(2, &[3, 4, 2], 5, 1.0).unwrap();
        let copy = stack.clone();
        let _ = forward_capture(&stack, &batch(4, 3, 6), Activation::Identity).unwrap();
        assert_eq!(stack, copy);
    }

    #[test]
    fn forward_capture_rejects_bad_width() {
        let stack = make_synthetic(1, &[3, 2], 0, 1.0).unwrap();
        assert!(forward_capture(&stack, &batch(4, 5, 0), Activation::Relu).is_err());
    }

    #[test]
    fn synthetic_shapes_and_determinism() {
        let s = make_synthetic(2, &[8, 16, 8], 42, 0.1).unwrap();
        assert_eq!(s.layers()[0].weight.shape(), (16, 8));
        assert_eq!(s.layers()[1].weight.shape(), (8, 16));
        assert_eq!(s, make_synthetic(2, &[8, 16, 8], 42, 0.1).unwrap());
        let z = make_synthetic(2, &[8, 16, 8], 42, 0.0).unwrap();
        assert!(z.weights().all(|w| w.frobenius_norm() == 0.0));
        assert!(make_synthetic(3, &[8, 16, 8], 42, 0.1).is_err());
    }

    #[test]
    fn chain_mismatch_rejected() {
        let err = LayerStack::from_weights(vec![Matrix::zeros(4, 3), Matrix::zeros(2, 5)]);
        assert!(err.is_err());
    }

    #[test]
    fn calib_needs_two_samples() {
        assert!(CalibBatch::new(Matrix::zeros(1, 3), CalibSource::Inline).is_err());
    }

    #[test]
    fn calib_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("calib.csv");
        std::fs::write(&path, "1.0, 2.0\n-3.5,4\n").unwrap();
        let b = CalibBatch::from_csv(&path).unwrap();
        assert_eq!(b.inputs(), &Matrix::from_rows(&[&[1.0, 2.0], &[-3.5, 4.0]]));
        std::fs::write(&path, "1.0,2.0\n3.0\n").unwrap();
        assert!(CalibBatch::from_csv(&path).is_err());
        assert!(matches!(
            CalibBatch::from_csv(dir.path().join("missing.csv")),
            Err(LosaError::NotFound(_))
        ));
    }
}
