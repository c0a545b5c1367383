//! Rectifier training loop, checkpoints and the CSV training log.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{RectifierConfig, RectifierModel, SceneInput};
use crate::autodiff::{clip_grads, Adam, Graph};
use crate::checkpoint;
use crate::datapipe::{mix_heterogeneous, ClipSource, TrainingPair};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub train_loss: f64,
    /// Present on evaluation steps only.
    pub val_loss: Option<f64>,
}

impl RectifierModel {
    /// Loss and parameter gradients for one pair.
    pub fn pair_loss_grad(&self, pair: &TrainingPair) -> Result<(f64, Vec<Array2<f64>>)> {
        let mut g = Graph::new();
        let inp = SceneInput::new(&pair.inputs, &pair.map, &pair.env);
        let out = self.forward(&mut g, &inp)?;
        let l = Self::loss_node(&mut g, out.pred, &pair.targets, &pair.weights);
        let grads = g.backward(l, &self.params)?;
        Ok((g.scalar(l), grads))
    }

    pub fn pair_loss(&self, pair: &TrainingPair) -> Result<f64> {
        let mut g = Graph::new();
        let inp = SceneInput::new(&pair.inputs, &pair.map, &pair.env);
        let out = self.forward(&mut g, &inp)?;
        let l = Self::loss_node(&mut g, out.pred, &pair.targets, &pair.weights);
        Ok(g.scalar(l))
    }

    pub fn mean_loss(&self, pairs: &[TrainingPair]) -> Result<f64> {
        if pairs.is_empty() {
            return Ok(f64::NAN);
        }
        let mut s = 0.0;
        for p in pairs {
            s += self.pair_loss(p)?;
        }
        Ok(s / pairs.len() as f64)
    }
}

/// Seed-determined batch order: 1:1 nominal/physics-rich mixing when both
/// pools are present, uniform otherwise.
fn batch_indices(train: &[TrainingPair], cfg: &RectifierConfig) -> Result<Vec<Vec<usize>>> {
    let nominal: Vec<usize> = (0..train.len()).filter(|&i| train[i].source == ClipSource::Nominal).collect();
    let rich: Vec<usize> = (0..train.len())
        .filter(|&i| train[i].source == ClipSource::PhysicsRich)
        .collect();
    let total = cfg.steps * cfg.batch_size;
    let flat: Vec<usize> = if !nominal.is_empty() && !rich.is_empty() {
        mix_heterogeneous(&nominal, &rich, cfg.seed ^ 0x5eed)?
            .take(total)
            .map(|(_, _, &i)| i)
            .collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        (0..total).map(|_| rng.random_range(0..train.len())).collect()
    };
    Ok(flat.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect())
}

/// Trains a fresh model with Adam on the weighted L1 loss, the learning rate
/// following a cosine decay to zero over `steps`. Validation loss
/// is logged every `eval_every` steps and after the last step. A
/// non-finite loss aborts with the offending step.
pub fn train(
    config: &RectifierConfig,
    train_pairs: &[TrainingPair],
    val_pairs: &[TrainingPair],
) -> Result<(RectifierModel, Vec<TrainLogRow>)> {
    let model = RectifierModel::new(config.clone())?;
    train_from(model, train_pairs, val_pairs)
}

/// Continues training an existing model with its own configuration.
pub fn train_from(
    mut model: RectifierModel,
    train_pairs: &[TrainingPair],
    val_pairs: &[TrainingPair],
) -> Result<(RectifierModel, Vec<TrainLogRow>)> {
    let cfg = model.config.clone();
    if train_pairs.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    for p in train_pairs.iter().chain(val_pairs) {
        p.validate()?;
    }
    let batches = batch_indices(train_pairs, &cfg)?;
    let mut opt = Adam::new(&model.params, cfg.learning_rate);
    let mut log = Vec::with_capacity(cfg.steps);
    let n_steps = batches.len() as f64;
    for (step, batch) in batches.iter().enumerate() {
        opt.lr = cfg.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / n_steps).cos());
        let mut acc = model.params.zeros_like();
        let mut total = 0.0;
        for &i in batch {
            let (l, grads) = match model.pair_loss_grad(&train_pairs[i]) {
                Ok(x) => x,
                Err(Error::Numeric(_)) => return Err(Error::Divergence { step, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            if !l.is_finite() {
                return Err(Error::Divergence { step, loss: l });
            }
            total += l;
            for (a, g) in acc.iter_mut().zip(&grads) {
                *a += g;
            }
        }
        let scale = 1.0 / batch.len() as f64;
        acc.iter_mut().for_each(|a| a.mapv_inplace(|v| v * scale));
        if acc.iter().any(|a| a.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence {
                step,
                loss: total * scale,
            });
        }
        clip_grads(&mut acc, cfg.grad_clip);
        opt.update(&mut model.params, &acc);
        let last = step + 1 == batches.len();
        let val_loss = if !val_pairs.is_empty() && ((step + 1) % cfg.eval_every == 0 || last) {
            Some(model.mean_loss(val_pairs)?)
        } else {
            None
        };
        log.push(TrainLogRow {
            step,
            train_loss: total * scale,
            val_loss,
        });
    }
    Ok((model, log))
}

pub fn write_train_log(rows: &[TrainLogRow], path: &Path) -> Result<()> {
    let mut s = String::from("step,train_loss,val_loss\n");
    for r in rows {
        let v = r.val_loss.map(|v| format!("{v:.9e}")).unwrap_or_default();
        s.push_str(&format!("{},{:.9e},{}\n", r.step, r.train_loss, v));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PHYGRECT";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    config: RectifierConfig,
    params: Vec<(String, [usize; 2])>,
}

pub fn checkpoint_bytes(model: &RectifierModel) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        params: checkpoint::shapes(&model.params),
    };
    checkpoint::encode(CHECKPOINT_MAGIC, &header, &model.params)
}

pub fn save_checkpoint(model: &RectifierModel, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<RectifierModel> {
    let (header, payload): (CheckpointHeader, _) = checkpoint::decode(CHECKPOINT_MAGIC, bytes)?;
    let mut model = RectifierModel::new(header.config)?;
    if checkpoint::shapes(&model.params) != header.params {
        return Err(Error::parse("checkpoint", "parameter layout does not match the configuration"));
    }
    checkpoint::fill_params(&mut model.params, payload)?;
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<RectifierModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes).map_err(|e| match e {
        Error::Parse { location, message } => Error::Parse {
            location: format!("{}: {location}", path.display()),
            message,
        },
        other => other,
    })
}
