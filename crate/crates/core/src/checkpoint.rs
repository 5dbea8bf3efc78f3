//! Self-describing checkpoint container: a JSON header with the model
//! configuration and training state, the named parameter tensors as
//! row-major little-endian f64, and optionally the optimizer moments.
//! Round trips are bit-exact.

use crate::error::{Error, Result};
use crate::model::{FvpModel, ModelConfig};
use crate::train::OptimizerState;
use crate::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FVPC";
const VERSION: u32 = 1;

/// Where a training run stands: epochs completed, optimizer updates done,
/// the run's root seed and the best validation loss seen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub global_step: u64,
    pub seed: u64,
    pub best_valid_loss: Option<f64>,
}

impl TrainState {
    pub fn fresh(seed: u64) -> Self {
        TrainState {
            epoch: 0,
            global_step: 0,
            seed,
            best_valid_loss: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    train_state: TrainState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub train_state: TrainState,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn capture(
        model: &FvpModel,
        train_state: &TrainState,
        optimizer: Option<&OptimizerState>,
    ) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, name, t)| (name.to_string(), t.clone()))
            .collect();
        Checkpoint {
            config: model.config.clone(),
            train_state: train_state.clone(),
            params,
            optimizer: optimizer.cloned(),
        }
    }

    /// Rebuilds the model with the stored weights.
    pub fn restore_model(&self) -> Result<FvpModel> {
        let mut model = FvpModel::new(self.config.clone(), self.train_state.seed)?;
        if model.store.len() != self.params.len() {
            return Err(Error::config(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        let ids: Vec<_> = model.store.ids().collect();
        for (id, (name, value)) in ids.into_iter().zip(&self.params) {
            if model.store.name(id) != name {
                return Err(Error::config(format!(
                    "checkpoint parameter {} does not match model parameter {}",
                    name,
                    model.store.name(id)
                )));
            }
            if model.store.get(id).shape() != value.shape() {
                return Err(Error::config(format!(
                    "checkpoint parameter {} has mismatched shape",
                    name
                )));
            }
            *model.store.get_mut(id) = value.clone();
        }
        Ok(model)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            train_state: self.train_state.clone(),
        })
        .map_err(|e| Error::data(e.to_string()))?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;

        out.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, tensor) in &self.params {
            let name_bytes = name.as_bytes();
            out.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
            out.write_all(name_bytes)?;
            out.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
            for &d in tensor.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in tensor.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }

        match &self.optimizer {
            None => out.write_all(&[0u8])?,
            Some(state) => {
                out.write_all(&[1u8])?;
                out.write_all(&state.step.to_le_bytes())?;
                out.write_all(&state.beta1.to_le_bytes())?;
                out.write_all(&state.beta2.to_le_bytes())?;
                out.write_all(&state.eps.to_le_bytes())?;
                for buffers in [&state.first_moment, &state.second_moment] {
                    for (buf, (_, tensor)) in buffers.iter().zip(&self.params) {
                        if buf.len() != tensor.numel() {
                            return Err(Error::config(
                                "optimizer buffers misaligned with parameters",
                            ));
                        }
                        for &v in buf {
                            out.write_all(&v.to_le_bytes())?;
                        }
                    }
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let mut file = std::io::BufReader::new(
            std::fs::File::open(path)
                .map_err(|e| Error::data(format!("{}: {}", path.display(), e)))?,
        );
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)
            .map_err(|_| Error::format(format!("{}: shorter than the header", path.display())))?;
        if &magic != MAGIC {
            return Err(Error::format(format!(
                "{}: not a checkpoint file (magic {:?})",
                path.display(),
                String::from_utf8_lossy(&magic)
            )));
        }
        let version = read_u32(&mut file)?;
        if version != VERSION {
            return Err(Error::format(format!(
                "{}: unsupported checkpoint version {}",
                path.display(),
                version
            )));
        }
        let header_len = read_u64(&mut file)? as usize;
        let mut header_bytes = vec![0u8; header_len];
        file.read_exact(&mut header_bytes)?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::format(format!("{}: bad header: {}", path.display(), e)))?;

        let n_params = read_u32(&mut file)? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = read_u32(&mut file)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            file.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|_| Error::format("checkpoint: parameter name is not utf-8"))?;
            let ndim = read_u32(&mut file)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut file)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(read_f64(&mut file)?);
            }
            params.push((name, Tensor::new(shape, data)?));
        }

        let mut flag = [0u8; 1];
        file.read_exact(&mut flag)?;
        let optimizer = if flag[0] == 1 {
            let step = read_u64(&mut file)?;
            let beta1 = read_f64(&mut file)?;
            let beta2 = read_f64(&mut file)?;
            let eps = read_f64(&mut file)?;
            let mut read_buffers = |params: &[(String, Tensor)]| -> Result<Vec<Vec<f64>>> {
                let mut all = Vec::with_capacity(params.len());
                for (_, tensor) in params {
                    let mut buf = Vec::with_capacity(tensor.numel());
                    for _ in 0..tensor.numel() {
                        buf.push(read_f64(&mut file)?);
                    }
                    all.push(buf);
                }
                Ok(all)
            };
            let first_moment = read_buffers(&params)?;
            let second_moment = read_buffers(&params)?;
            Some(OptimizerState {
                step,
                beta1,
                beta2,
                eps,
                first_moment,
                second_moment,
            })
        } else {
            None
        };

        Ok(Checkpoint {
            config: header.config,
            train_state: header.train_state,
            params,
            optimizer,
        })
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::format("checkpoint: truncated"))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::format("checkpoint: truncated"))?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|_| Error::format("checkpoint: truncated"))?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn round_trip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fvpc");
        let model = FvpModel::new(ModelConfig::tiny(12), 7).unwrap();
        let mut optimizer = OptimizerState::new(&model.store);
        optimizer.step = 42;
        optimizer.first_moment[0][0] = 0.123_456_789_012_345_68;
        let state = TrainState {
            epoch: 3,
            global_step: 42,
            seed: 7,
            best_valid_loss: Some(1.2345678901234567),
        };
        let ck = Checkpoint::capture(&model, &state, Some(&optimizer));
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(ck, back);

        // writing the read-back checkpoint gives identical bytes
        let path2 = dir.path().join("model2.fvpc");
        back.write(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn restore_rebuilds_identical_model() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.fvpc");
        let model = FvpModel::new(ModelConfig::tiny(12), 9).unwrap();
        let ck = Checkpoint::capture(&model, &TrainState::fresh(9), None);
        ck.write(&path).unwrap();
        let restored = Checkpoint::read(&path).unwrap().restore_model().unwrap();
        for (id, name, t) in model.store.iter() {
            assert_eq!(restored.store.name(id), name);
            assert_eq!(restored.store.get(id), t);
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.fvpc");
        std::fs::write(&path, b"JUNKxxxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(Checkpoint::read(&path), Err(Error::Format(_))));
    }
}
