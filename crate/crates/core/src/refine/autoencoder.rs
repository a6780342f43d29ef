use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RefineError;
use crate::numerics::{checkpoint, Activation, AdamState, Mlp, StreamRng, Tape, Tensor};
use crate::score_models::{TraceRow, TrainSpec, TrainTrace};

/// Widths of an autoencoder: encoder `in -> hidden... -> d_z`, decoder the
/// mirror image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AeArch {
    pub d_z: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for AeArch {
    fn default() -> Self {
        Self {
            d_z: 16,
            hidden: vec![256],
            activation: Activation::Silu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoEncoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
    /// Mean squared reconstruction error per element on the training set.
    pub recon_mse: f64,
}

/// Files of an autoencoder checkpoint directory.
pub const ENCODER_FILE: &str = "encoder.flb";
pub const DECODER_FILE: &str = "decoder.flb";
pub const AE_STATS_FILE: &str = "ae.json";

#[derive(Debug, Serialize, Deserialize)]
struct AeStats {
    recon_mse: f64,
    input_dim: usize,
    d_z: usize,
}

impl AutoEncoder {
    pub fn new(encoder: Mlp, decoder: Mlp, recon_mse: f64) -> Result<Self, RefineError> {
        if encoder.output_dim() != decoder.input_dim() || decoder.output_dim() != encoder.input_dim() {
            return Err(RefineError::Config(format!(
                "encoder {} -> {} does not fit decoder {} -> {}",
                encoder.input_dim(),
                encoder.output_dim(),
                decoder.input_dim(),
                decoder.output_dim()
            )));
        }
        Ok(Self {
            encoder,
            decoder,
            recon_mse,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor, RefineError> {
        Ok(self.encoder.forward(&x.as_matrix())?)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor, RefineError> {
        Ok(self.decoder.forward(&z.as_matrix())?)
    }

    /// Mean squared `D(E(x)) − x` per element.
    pub fn recon_error(&self, x: &Tensor) -> Result<f64, RefineError> {
        let r = self.decode(&self.encode(x)?)?;
        Ok(r.sub(&x.as_matrix())?.norm_sq() / x.len().max(1) as f64)
    }

    /// Writes `encoder.flb`, `decoder.flb` and `ae.json` into `dir`. The
    /// encoder file alone serves as a `colorglyph/ae:` subject.
    pub fn save(&self, dir: &Path) -> Result<(), RefineError> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save_mlp(&self.encoder, &dir.join(ENCODER_FILE))?;
        checkpoint::save_mlp(&self.decoder, &dir.join(DECODER_FILE))?;
        let stats = AeStats {
            recon_mse: self.recon_mse,
            input_dim: self.input_dim(),
            d_z: self.latent_dim(),
        };
        let json = serde_json::to_string_pretty(&stats).map_err(|e| RefineError::Config(e.to_string()))?;
        std::fs::write(dir.join(AE_STATS_FILE), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, RefineError> {
        let enc = checkpoint::load_mlp(&dir.join(ENCODER_FILE))?;
        let dec = checkpoint::load_mlp(&dir.join(DECODER_FILE))?;
        let stats_path: PathBuf = dir.join(AE_STATS_FILE);
        let recon_mse = match std::fs::read(&stats_path) {
            Ok(b) => {
                let s: AeStats = serde_json::from_slice(&b)
                    .map_err(|e| RefineError::Config(format!("{}: {e}", stats_path.display())))?;
                s.recon_mse
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => f64::NAN,
            Err(e) => return Err(e.into()),
        };
        Self::new(enc, dec, recon_mse)
    }
}

/// Trains an autoencoder on the rows of `data` by mean squared
/// reconstruction error with Adam.
pub fn train_autoencoder(
    data: &Tensor,
    arch: &AeArch,
    spec: &TrainSpec,
    rng: &mut StreamRng,
) -> Result<(AutoEncoder, TrainTrace), RefineError> {
    let (n, d) = (data.rows(), data.cols());
    if n == 0 {
        return Err(RefineError::EmptyDataset);
    }
    if arch.d_z == 0 || arch.d_z > d {
        return Err(RefineError::Config(format!("d_z must be in 1..={d}, got {}", arch.d_z)));
    }
    let mut dims = vec![d];
    dims.extend(&arch.hidden);
    dims.push(arch.d_z);
    let mut enc = Mlp::init(&dims, arch.activation, rng);
    dims.reverse();
    let mut dec = Mlp::init(&dims, arch.activation, rng);
    let mut adam = AdamState::new(enc.params().into_iter().chain(dec.params()), spec.lr);
    let mut trace = TrainTrace::default();
    for step in 0..spec.steps {
        let batch = crate::score_models::minibatch(data, spec.batch_size, rng);
        let mut tape = Tape::new();
        let pe = enc.bind(&mut tape);
        let pd = dec.bind(&mut tape);
        let x = tape.constant(batch.clone());
        let z = enc.forward_bound(&mut tape, &pe, x)?;
        let r = dec.forward_bound(&mut tape, &pd, z)?;
        let diff = tape.sub(r, x)?;
        let sq = tape.square(diff)?;
        let total = tape.sum(sq)?;
        let loss = tape.scale(total, 1.0 / batch.len() as f64)?;
        let value = tape.scalar_value(loss);
        trace.rows.push(TraceRow {
            step,
            loss: value,
            fiber_loss_component: 0.0,
        });
        if !(value <= crate::score_models::DIVERGENCE_LIMIT) {
            return Err(RefineError::Diverged {
                step,
                reason: format!("loss {value}"),
                trace,
            });
        }
        let mut g = tape.backward(loss)?;
        let grads: Vec<Tensor> = pe.vars().chain(pd.vars()).map(|v| g.take(v)).collect();
        adam.lr = spec.lr_at(step);
        let mut params: Vec<&mut Tensor> = enc.params_mut();
        params.extend(dec.params_mut());
        adam.step(&mut params, &grads)?;
    }
    let mut ae = AutoEncoder::new(enc, dec, 0.0)?;
    ae.recon_mse = ae.recon_error(data)?;
    Ok((ae, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{normal_tensor, stream_rng};

    #[test]
    fn linear_full_rank_ae_learns_identity() {
        let data = normal_tensor(&[256, 4], &mut stream_rng(1, 0));
        let arch = AeArch {
            d_z: 4,
            hidden: vec![],
            activation: Activation::Linear,
        };
        let spec = TrainSpec {
            steps: 3000,
            batch_size: 64,
            lr: 1e-2,
            lr_final_frac: 0.01,
            ema: 0.0,
        };
        let (ae, trace) = train_autoencoder(&data, &arch, &spec, &mut stream_rng(2, 0)).unwrap();
        assert_eq!(trace.rows.len(), 3000);
        assert!(ae.recon_mse < 1e-6, "{}", ae.recon_mse);
    }

    #[test]
    fn training_is_deterministic_and_round_trips() {
        let data = normal_tensor(&[64, 6], &mut stream_rng(1, 0));
        let arch = AeArch {
            d_z: 2,
            hidden: vec![8],
            activation: Activation::Tanh,
        };
        let spec = TrainSpec {
            steps: 50,
            batch_size: 16,
            ..TrainSpec::default()
        };
        let (a, ta) = train_autoencoder(&data, &arch, &spec, &mut stream_rng(4, 0)).unwrap();
        let (b, tb) = train_autoencoder(&data, &arch, &spec, &mut stream_rng(4, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        assert_eq!(AutoEncoder::load(dir.path()).unwrap(), a);
    }

    #[test]
    fn rejects_bad_latent_size() {
        let data = Tensor::zeros(&[4, 3]);
        for d_z in [0, 4] {
            let arch = AeArch {
                d_z,
                ..AeArch::default()
            };
            assert!(train_autoencoder(&data, &arch, &TrainSpec::default(), &mut stream_rng(0, 0)).is_err());
        }
    }
}
