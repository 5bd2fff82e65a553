use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixed_effect::{DesignMatrix, FixedEffectSet};
use crate::neural_process::arch::NpArchitecture;
use crate::neural_process::model::NpModel;
use crate::neural_process::ops::{build_elbo, context_for};
use crate::tensorcore::{adam_step, AdamState, Decay, Graph, LrSchedule, Mode, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub decay: Decay,
    pub batch_size: usize,
    /// Reparameterized latent samples per batch.
    pub n_mc: usize,
}

impl Default for TrainSchedule {
    /// 100 epochs with the learning rate decaying from 1e-2 to 1e-5.
    fn default() -> Self {
        TrainSchedule {
            epochs: 100,
            lr_start: 1e-2,
            lr_end: 1e-5,
            decay: Decay::Geometric,
            batch_size: 8,
            n_mc: 1,
        }
    }
}

impl TrainSchedule {
    pub fn lr_schedule(&self) -> Result<LrSchedule> {
        LrSchedule::with_decay(self.lr_start, self.lr_end, self.epochs, self.decay)
    }

    pub fn validate(&self) -> Result<()> {
        self.lr_schedule()?;
        if self.batch_size < 2 {
            return Err(Error::invalid("batch size must be at least 2 for batch normalization"));
        }
        if self.n_mc == 0 {
            return Err(Error::invalid("n_mc must be at least 1"));
        }
        Ok(())
    }
}

/// Per-epoch training terms, averaged per subject.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub lr: f64,
}

impl EpochLog {
    pub fn loss(&self) -> f64 {
        self.kl - self.recon
    }
}

/// Contiguous batches of `order`; a trailing single subject joins the
/// previous batch so train-mode batchnorm always sees two samples.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().unwrap() = &order[start..];
    }
    out
}

/// Fits the encoder/decoder by minimizing the negative ELBO with ADAM.
///
/// `x_train` holds standardized covariates and `y_train` quantile-space
/// responses. The context functions are those of `f` evaluated at
/// `x_train`. Initialization uses `rng.split(0)`, epoch shuffles
/// `rng.split(1)`, and batch noise `rng.split(2)`.
pub fn train(
    x_train: &DesignMatrix,
    y_train: &Tensor,
    f: &FixedEffectSet,
    arch: NpArchitecture,
    schedule: &TrainSchedule,
    rng: &Rng,
) -> Result<NpModel> {
    arch.validate()?;
    let model = NpModel::init(arch, &rng.split(0))?;
    train_model(model, x_train, y_train, f, schedule, rng)
}

/// [`train`] starting from an already initialized model.
pub fn train_model(
    mut model: NpModel,
    x_train: &DesignMatrix,
    y_train: &Tensor,
    f: &FixedEffectSet,
    schedule: &TrainSchedule,
    rng: &Rng,
) -> Result<NpModel> {
    schedule.validate()?;
    let arch = model.arch().clone();
    let n = x_train.n();
    if arch.covariates != x_train.d() {
        return Err(Error::shape(
            "train",
            format!("architecture expects {} covariates, design has {}", arch.covariates, x_train.d()),
        ));
    }
    if arch.context_channels != f.m() {
        return Err(Error::shape(
            "train",
            format!("architecture expects {} context channels, set has {}", arch.context_channels, f.m()),
        ));
    }
    if y_train.dim(0) != n || y_train.shape()[1..] != arch.grid[..] {
        return Err(Error::shape(
            "train",
            format!("targets {:?} vs {n} subjects on grid {:?}", y_train.shape(), arch.grid),
        ));
    }
    if n < 2 {
        return Err(Error::invalid("training needs at least two subjects"));
    }
    let c = context_for(f, x_train)?;
    let lrs = schedule.lr_schedule()?;

    let mut adam = AdamState::new(model.params());
    let shuffle_root = rng.split(1);
    let noise_root = rng.split(2);

    for epoch in 0..schedule.epochs {
        let lr = lrs.lr(epoch);
        let mut order: Vec<usize> = (0..n).collect();
        shuffle_root.split(epoch as u64).shuffle(&mut order);
        let epoch_rng = noise_root.split(epoch as u64);
        let (mut recon, mut kl) = (0.0, 0.0);
        for (bi, rows) in batches(&order, schedule.batch_size).into_iter().enumerate() {
            let xb = x_train.select_rows(rows);
            let yb = y_train.select_rows(rows);
            let cb = c.select_rows(rows);
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let e = build_elbo(&model, &mut g, &bound, &xb, &yb, &cb, Mode::Train, &epoch_rng.split(bi as u64), schedule.n_mc)?;
            if !e.terms.loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {}, batch {bi} (recon {}, kl {})",
                    epoch + 1,
                    e.terms.recon,
                    e.terms.kl
                )));
            }
            let mean_loss = g.scale(e.loss, 1.0 / rows.len() as f64);
            let grads = g.backward(mean_loss, model.params().len())?;
            adam_step(&mut adam, model.params_mut(), &grads.params, lr)
                .map_err(|err| Error::Numeric(format!("epoch {}, batch {bi}: {err}", epoch + 1)))?;
            model.update_running(&e.stats);
            recon += e.terms.recon;
            kl += e.terms.kl;
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            recon: recon / n as f64,
            kl: kl / n as f64,
            lr,
        };
        log::debug!(
            "epoch {}: recon {:.4} kl {:.4} lr {:.2e}",
            entry.epoch,
            entry.recon,
            entry.kl,
            entry.lr
        );
        model.log.push(entry);
    }
    model.schedule = Some(schedule.clone());
    model.context = Some(f.clone());
    model.seed = rng.seed();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_absorb_singletons() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|b| b.len()).collect::<Vec<_>>(), vec![4, 5]);
        let b = batches(&order, 3);
        assert_eq!(b.len(), 3);
        let b = batches(&order[..1], 4);
        assert_eq!(b.len(), 1);
    }

    #[test]
    fn paper_schedule_accepted() {
        let s = TrainSchedule::default();
        s.validate().unwrap();
        let lr = s.lr_schedule().unwrap();
        assert_eq!(lr.lr(0), 1e-2);
        assert!((lr.lr(99) - 1e-5).abs() < 1e-18);
    }
}
