//! Mini-batch Adam training shared by the frame and sequence models.

use std::io::Write;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::nn::{adam_step, AdamConfig, AdamState, Parameters, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 30,
            seed: 0,
        }
    }
}

/// Mean training loss over the epoch's updates, plus validation loss when a
/// validation set was given.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Writes a loss history as `epoch,train_loss,val_loss` CSV (empty
/// `val_loss` when absent).
pub fn write_history<W: Write>(history: &[EpochLoss], mut writer: W) -> Result<()> {
    let err = |e: std::io::Error| Error::invalid(format!("writing loss history: {e}"));
    writeln!(writer, "epoch,train_loss,val_loss").map_err(err)?;
    for h in history {
        match h.val_loss {
            Some(v) => writeln!(writer, "{},{:.10},{:.10}", h.epoch, h.train_loss, v),
            None => writeln!(writer, "{},{:.10},", h.epoch, h.train_loss),
        }
        .map_err(err)?;
    }
    writer.flush().map_err(err)
}

pub(crate) fn check_train_config(cfg: &TrainConfig) -> Result<()> {
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(Error::invalid(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    Ok(())
}

/// Mini-batch Adam over shuffled records. `loss_grads(i)` returns the loss
/// and per-tensor gradients of training example `i`.
pub(crate) fn train_loop<M, F, V>(
    model: &mut M,
    n: usize,
    cfg: &TrainConfig,
    stream: &str,
    mut loss_grads: F,
    mut val_loss: V,
) -> Result<Vec<EpochLoss>>
where
    M: Parameters,
    F: FnMut(&M, usize) -> Result<(f64, Vec<Tensor>)>,
    V: FnMut(&M) -> Result<Option<f64>>,
{
    let mut rng = crate::seed::stage_rng(cfg.seed, stream);
    let mut adam = AdamState::new(model.named_params().into_iter().map(|(_, t)| t), AdamConfig::with_lr(cfg.lr));
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let (loss, grads) = loss_grads(model, i)?;
                total += loss;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (a, g) in a.iter_mut().zip(&grads) {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let mut grads = acc.expect("batch is non-empty");
            let scale = 1.0 / batch.len() as f64;
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            adam_step(&mut model.params_mut(), &grads, &mut adam)?;
        }
        let train_loss = total / n as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at epoch {epoch}")));
        }
        history.push(EpochLoss {
            epoch,
            train_loss,
            val_loss: val_loss(model)?,
        });
    }
    Ok(history)
}
