//! Architecture descriptions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a feed-forward network. Input sizes are inferred from the
/// preceding layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { out: usize },
    Conv2d { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    ConvTranspose2d { out_channels: usize, kernel: usize, stride: usize, padding: usize },
    BatchNorm,
    Relu,
    Tanh,
    Flatten,
}

impl LayerSpec {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv",
            LayerSpec::ConvTranspose2d { .. } => "deconv",
            LayerSpec::BatchNorm => "bn",
            LayerSpec::Relu => "relu",
            LayerSpec::Tanh => "tanh",
            LayerSpec::Flatten => "flatten",
        }
    }

    /// Output shape (excluding batch) for a given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Dense { out } => {
                if input.len() != 1 {
                    return Err(Error::Spec(format!("dense layer needs a flat input, got {input:?}")));
                }
                Ok(vec![out])
            }
            LayerSpec::Conv2d { out_channels, kernel, stride, padding } => {
                let [_, h, w] = image_dims(input)?;
                if stride == 0 || kernel == 0 {
                    return Err(Error::Spec("conv kernel and stride must be positive".into()));
                }
                if h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(Error::Spec(format!("conv kernel {kernel} larger than padded input {input:?}")));
                }
                Ok(vec![out_channels, (h + 2 * padding - kernel) / stride + 1, (w + 2 * padding - kernel) / stride + 1])
            }
            LayerSpec::ConvTranspose2d { out_channels, kernel, stride, padding } => {
                let [_, h, w] = image_dims(input)?;
                if stride == 0 || kernel == 0 {
                    return Err(Error::Spec("deconv kernel and stride must be positive".into()));
                }
                let oh = (h - 1) * stride + kernel;
                let ow = (w - 1) * stride + kernel;
                if oh <= 2 * padding || ow <= 2 * padding {
                    return Err(Error::Spec(format!("deconv padding {padding} too large for {input:?}")));
                }
                Ok(vec![out_channels, oh - 2 * padding, ow - 2 * padding])
            }
            LayerSpec::BatchNorm | LayerSpec::Relu | LayerSpec::Tanh => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn image_dims(input: &[usize]) -> Result<[usize; 3]> {
    match input {
        &[c, h, w] => Ok([c, h, w]),
        _ => Err(Error::Spec(format!("convolution needs a (C, H, W) input, got {input:?}"))),
    }
}

/// A complete network: input shape, layers, and for classifiers the class
/// count and the index of the first classification-head layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    /// `Some(K)` for classifiers; `None` for image-to-image generators.
    pub classes: Option<usize>,
    /// First layer belonging to the private classification head.
    pub head_split: Option<usize>,
}

impl NetworkSpec {
    /// Per-layer input shapes, followed by the network output shape.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|e| Error::Spec(format!("layer {i} ({}): {e}", layer.tag())))?;
            if next.iter().any(|&d| d == 0) {
                return Err(Error::Spec(format!("layer {i} ({}) produces an empty shape", layer.tag())));
            }
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Spec(format!("bad input shape {:?}", self.input_shape)));
        }
        if self.layers.is_empty() {
            return Err(Error::Spec("network has no layers".into()));
        }
        let shapes = self.shapes()?;
        let out = shapes.last().unwrap();
        match self.classes {
            Some(k) => {
                if k < 2 {
                    return Err(Error::Spec("classifier needs at least 2 classes".into()));
                }
                match self.layers.last() {
                    Some(LayerSpec::Dense { out }) if *out == k => {}
                    _ => return Err(Error::Spec(format!("classifier must end in a dense layer of width {k}"))),
                }
                if let Some(split) = self.head_split {
                    if split == 0 || split >= self.layers.len() {
                        return Err(Error::Spec(format!(
                            "head split {split} must lie in 1..{}",
                            self.layers.len()
                        )));
                    }
                    if !self.layers[split..].iter().any(|l| matches!(l, LayerSpec::Dense { .. })) {
                        return Err(Error::Spec("head must contain the final dense layer".into()));
                    }
                }
            }
            None => {
                if out != &self.input_shape {
                    return Err(Error::Spec(format!(
                        "generator output {out:?} must equal its input {:?}",
                        self.input_shape
                    )));
                }
                if self.head_split.is_some() {
                    return Err(Error::Spec("head split is only meaningful for classifiers".into()));
                }
            }
        }
        Ok(shapes)
    }

    /// Desk-scale classifier: two strided conv blocks with batch norm, a
    /// dense feature layer, and a private dense head.
    pub fn desk_classifier(channels: usize, size: usize, classes: usize) -> Self {
        NetworkSpec {
            input_shape: vec![channels, size, size],
            layers: vec![
                LayerSpec::Conv2d { out_channels: 8, kernel: 4, stride: 2, padding: 1 },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Conv2d { out_channels: 16, kernel: 4, stride: 2, padding: 1 },
                LayerSpec::BatchNorm,
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense { out: 32 },
                LayerSpec::Relu,
                LayerSpec::Dense { out: classes },
            ],
            classes: Some(classes),
            head_split: Some(9),
        }
    }

    /// Encoder-decoder trigger generator: `depth` stride-2 conv blocks
    /// (k4/s2/p1, channel doubling, BN+ReLU) mirrored by transposed
    /// convolutions, with BN+tanh on the last block.
    pub fn generator(channels: usize, size: usize, base_width: usize, depth: usize) -> Self {
        let mut layers = Vec::new();
        let mut width = base_width;
        for _ in 0..depth {
            layers.push(LayerSpec::Conv2d { out_channels: width, kernel: 4, stride: 2, padding: 1 });
            layers.push(LayerSpec::BatchNorm);
            layers.push(LayerSpec::Relu);
            width *= 2;
        }
        width /= 2;
        for i in 0..depth {
            let last = i + 1 == depth;
            let out = if last { channels } else { width / 2 };
            layers.push(LayerSpec::ConvTranspose2d { out_channels: out, kernel: 4, stride: 2, padding: 1 });
            layers.push(LayerSpec::BatchNorm);
            layers.push(if last { LayerSpec::Tanh } else { LayerSpec::Relu });
            width /= 2;
        }
        NetworkSpec { input_shape: vec![channels, size, size], layers, classes: None, head_split: None }
    }
}
