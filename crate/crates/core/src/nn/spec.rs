//! Declarative network descriptions and their U-shaped partition.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d { out_channels: usize, kernel: usize, stride: usize },
    #[serde(rename = "maxpool2x2")]
    MaxPool2x2,
    Relu,
    Fc { inputs: usize, outputs: usize },
}

impl LayerKind {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Fc { .. })
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerKind::Conv2d { out_channels, kernel, stride } => match input {
                [_, h, w] if *h >= kernel && *w >= kernel && stride > 0 && kernel > 0 => {
                    Ok(vec![out_channels, (h - kernel) / stride + 1, (w - kernel) / stride + 1])
                }
                _ => Err(Error::Spec(format!("conv {}x{} does not fit input {:?}", kernel, kernel, input))),
            },
            LayerKind::MaxPool2x2 => match input {
                [c, h, w] if *h >= 2 && *w >= 2 => Ok(vec![*c, h / 2, w / 2]),
                _ => Err(Error::Spec(format!("maxpool needs a [C,H,W] input of at least 2x2, got {:?}", input))),
            },
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::Fc { inputs, outputs } => {
                let flat: usize = input.iter().product();
                if flat != inputs {
                    return Err(Error::Spec(format!("fc expects {} inputs, previous layer gives {:?}", inputs, input)));
                }
                Ok(vec![outputs])
            }
        }
    }

    /// `(weight shape, bias length, fan_in)` for parameterized layers.
    pub fn param_shape(&self, input: &[usize]) -> Option<(Vec<usize>, usize, usize)> {
        match *self {
            LayerKind::Conv2d { out_channels, kernel, .. } => {
                let c = input[0];
                Some((vec![out_channels, c, kernel, kernel], out_channels, c * kernel * kernel))
            }
            LayerKind::Fc { inputs, outputs } => Some((vec![inputs, outputs], outputs, inputs)),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    ClientFront,
    Server,
    ClientOutput,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub placement: Placement,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// Per-sample input shape `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    #[serde(rename = "layer")]
    pub layers: Vec<LayerSpec>,
}

/// Layer index ranges of the three segments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub front: std::ops::Range<usize>,
    pub server: std::ops::Range<usize>,
    pub output: std::ops::Range<usize>,
}

fn layer(kind: LayerKind, placement: Placement) -> LayerSpec {
    LayerSpec { kind, placement }
}

fn conv_front() -> Vec<LayerSpec> {
    use LayerKind::*;
    use Placement::ClientFront as F;
    vec![
        layer(Conv2d { out_channels: 16, kernel: 5, stride: 1 }, F),
        layer(MaxPool2x2, F),
        layer(Relu, F),
        layer(Conv2d { out_channels: 16, kernel: 5, stride: 1 }, F),
        layer(MaxPool2x2, F),
        layer(Relu, F),
    ]
}

impl NetworkSpec {
    /// Two convolutions on the client, one FC + ReLU on the servers, and the
    /// FC output layer on the client.
    pub fn network1(classes: usize) -> Self {
        let mut layers = conv_front();
        layers.push(layer(LayerKind::Fc { inputs: 256, outputs: 64 }, Placement::Server));
        layers.push(layer(LayerKind::Relu, Placement::Server));
        layers.push(layer(LayerKind::Fc { inputs: 64, outputs: classes }, Placement::ClientOutput));
        Self { name: "network1".into(), input_shape: vec![1, 28, 28], classes, layers }
    }

    /// `network1` with a second server FC + ReLU.
    pub fn network2(classes: usize) -> Self {
        let mut layers = conv_front();
        for inputs in [256, 64] {
            layers.push(layer(LayerKind::Fc { inputs, outputs: 64 }, Placement::Server));
            layers.push(layer(LayerKind::Relu, Placement::Server));
        }
        layers.push(layer(LayerKind::Fc { inputs: 64, outputs: classes }, Placement::ClientOutput));
        Self { name: "network2".into(), input_shape: vec![1, 28, 28], classes, layers }
    }

    pub fn by_name(name: &str, classes: usize) -> Result<Self> {
        match name {
            "1" | "network1" => Ok(Self::network1(classes)),
            "2" | "network2" => Ok(Self::network2(classes)),
            _ => Err(Error::Spec(format!("unknown network {:?}", name))),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let spec: Self = toml::from_str(s).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("network spec serializes")
    }

    /// Per-sample shapes: entry `i` is the input of layer `i`, the last entry
    /// is the network output.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for l in &self.layers {
            let next = l.kind.output_shape(shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
            return Err(Error::Spec(format!("input shape must be [C,H,W], got {:?}", self.input_shape)));
        }
        if self.classes == 0 {
            return Err(Error::Spec("at least one class is required".into()));
        }
        let shapes = self.shapes()?;
        if shapes.last().unwrap() != &vec![self.classes] {
            return Err(Error::Spec(format!("network output {:?} does not match {} classes", shapes.last(), self.classes)));
        }
        let rank = |p: Placement| match p {
            Placement::ClientFront => 0,
            Placement::Server => 1,
            Placement::ClientOutput => 2,
        };
        if self.layers.windows(2).any(|w| rank(w[0].placement) > rank(w[1].placement)) {
            return Err(Error::Spec("placements must run client_front, server, client_output in order".into()));
        }
        for l in self.layers.iter().filter(|l| l.placement != Placement::ClientFront) {
            if !matches!(l.kind, LayerKind::Fc { .. } | LayerKind::Relu) {
                return Err(Error::Spec(format!("{:?} layers are only supported in the client front", l.kind)));
            }
        }
        if !self.layers.iter().any(|l| l.placement == Placement::ClientOutput) {
            return Err(Error::Spec("the client must hold at least the output layer".into()));
        }
        Ok(())
    }

    pub fn partition(&self) -> Partition {
        let count = |p: Placement| self.layers.iter().filter(|l| l.placement == p).count();
        let f = count(Placement::ClientFront);
        let s = count(Placement::Server);
        Partition { front: 0..f, server: f..f + s, output: f + s..self.layers.len() }
    }

    /// Flattened per-sample width entering layer `i`.
    pub fn width_at(&self, i: usize) -> Result<usize> {
        Ok(self.shapes()?[i].iter().product())
    }

    /// Stable 64-bit FNV-1a digest of the TOML form.
    pub fn fingerprint(&self) -> u64 {
        self.to_toml_string()
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
    }
}
