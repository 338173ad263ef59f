//! Trained parameters as held by the roles, with JSON persistence.

use std::path::Path;

use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{NetworkSpec, RealParams};
use crate::protocol::config::Mode;
use crate::protocol::material::ShareParams;
use crate::ring::{FixedConfig, FixedTensor};
use crate::sharing::{reconstruct, split, PartyId, Share};
use crate::tensor::Tensor;

/// Raw ring words with a shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTensor {
    pub shape: Vec<usize>,
    pub data: Vec<u64>,
}

impl RawTensor {
    pub fn of(t: &FixedTensor) -> Self {
        Self { shape: t.shape().to_vec(), data: t.data().to_vec() }
    }

    pub fn of_plain(t: &Tensor<u64>) -> Self {
        Self { shape: t.shape().to_vec(), data: t.data().to_vec() }
    }

    pub fn fixed(&self, cfg: FixedConfig) -> Result<FixedTensor> {
        FixedTensor::new(cfg, self.shape.clone(), self.data.clone())
    }
}

/// One layer's parameters as stored after a session.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum LayerParams {
    None,
    Plain { w: RawTensor, b: RawTensor },
    /// Server-held additive shares, P0 first.
    Shared { w: [RawTensor; 2], b: [RawTensor; 2] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub mode: Mode,
    pub fixed: FixedConfig,
    pub network: NetworkSpec,
    pub layers: Vec<LayerParams>,
}

impl TrainedModel {
    /// Plaintext `(W, b)` per layer; shared layers are reconstructed.
    pub fn plain_params(&self) -> Result<Vec<Option<(FixedTensor, FixedTensor)>>> {
        let cfg = self.fixed;
        self.layers
            .iter()
            .map(|l| match l {
                LayerParams::None => Ok(None),
                LayerParams::Plain { w, b } => Ok(Some((w.fixed(cfg)?, b.fixed(cfg)?))),
                LayerParams::Shared { w, b } => {
                    let join = |p: &[RawTensor; 2]| -> Result<FixedTensor> {
                        reconstruct(&Share::new(PartyId::P0, p[0].fixed(cfg)?), &Share::new(PartyId::P1, p[1].fixed(cfg)?))
                    };
                    Ok(Some((join(w)?, join(b)?)))
                }
            })
            .collect()
    }

    pub fn real_params(&self) -> Result<Vec<Option<RealParams>>> {
        Ok(self
            .plain_params()?
            .into_iter()
            .map(|p| {
                p.map(|(w, b)| RealParams { w_shape: w.shape().to_vec(), w: w.to_f64(), b: b.to_f64() })
            })
            .collect())
    }

    /// One server's shares of the layers in `range`.
    pub fn server_shares(&self, party: PartyId, range: std::ops::Range<usize>) -> Result<ShareParams> {
        let cfg = self.fixed;
        self.layers[range]
            .iter()
            .map(|l| match l {
                LayerParams::None => Ok(None),
                LayerParams::Shared { w, b } => {
                    let i = party.index();
                    Ok(Some((Share::new(party, w[i].fixed(cfg)?), Share::new(party, b[i].fixed(cfg)?))))
                }
                LayerParams::Plain { .. } => {
                    Err(Error::Spec("server layers are plaintext; convert the model for private mode first".into()))
                }
            })
            .collect()
    }

    /// Re-expresses the server layers for `mode`: fresh shares for private
    /// mode, reconstructed plaintext otherwise.
    pub fn for_mode<R: RngCore + CryptoRng>(&self, mode: Mode, rng: &mut R) -> Result<TrainedModel> {
        let server = self.network.partition().server;
        let plain = self.plain_params()?;
        let mut out = self.clone();
        out.mode = mode;
        for i in server {
            if let Some((w, b)) = &plain[i] {
                out.layers[i] = if mode.is_private() {
                    let (w0, w1) = split(w, rng)?;
                    let (b0, b1) = split(b, rng)?;
                    LayerParams::Shared {
                        w: [RawTensor::of(&w0.value), RawTensor::of(&w1.value)],
                        b: [RawTensor::of(&b0.value), RawTensor::of(&b1.value)],
                    }
                } else {
                    LayerParams::Plain { w: RawTensor::of(w), b: RawTensor::of(b) }
                };
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharing::seeded_rng;

    fn plain_model() -> TrainedModel {
        let cfg = FixedConfig::default();
        let spec = NetworkSpec::network1(10);
        let params = crate::nn::init_params(&spec, 3).unwrap();
        let layers = params
            .iter()
            .map(|p| match p {
                None => LayerParams::None,
                Some(p) => LayerParams::Plain {
                    w: RawTensor::of(&FixedTensor::from_f64(cfg, p.w_shape.clone(), &p.w).unwrap()),
                    b: RawTensor::of(&FixedTensor::from_f64(cfg, vec![p.b.len()], &p.b).unwrap()),
                },
            })
            .collect();
        TrainedModel { mode: Mode::UShapedPublic, fixed: cfg, network: spec, layers }
    }

    #[test]
    fn private_conversion_reconstructs_to_the_same_weights() {
        let m = plain_model();
        let p = m.for_mode(Mode::UShapedPrivate, &mut seeded_rng(1, 0)).unwrap();
        assert!(matches!(p.layers[6], LayerParams::Shared { .. }));
        assert!(matches!(p.layers[0], LayerParams::Plain { .. }));
        assert_eq!(p.plain_params().unwrap(), m.plain_params().unwrap());
        let back = p.for_mode(Mode::UShapedPublic, &mut seeded_rng(1, 0)).unwrap();
        assert_eq!(back.layers, m.layers);
        assert!(m.server_shares(PartyId::P0, 6..8).is_err());
        assert_eq!(p.server_shares(PartyId::P1, 6..8).unwrap().len(), 2);
    }

    #[test]
    fn json_round_trip() {
        let m = plain_model();
        let dir = std::env::temp_dir().join(format!("splitfss-model-{}.json", std::process::id()));
        m.save(&dir).unwrap();
        let back = TrainedModel::load(&dir).unwrap();
        std::fs::remove_file(&dir).unwrap();
        assert_eq!(back, m);
    }
}
