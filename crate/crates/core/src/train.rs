//! Epoch loop: seeded shuffling, Adam steps, IWO freezes, metrics records.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ImagePair;
use crate::error::{Error, Result};
use crate::loss::{lvw_backward, lvw_loss, LvwConfig};
use crate::metrics::psnr;
use crate::network::TrainNet;
use crate::optim::{lr_at, Adam, TrainConfig};
use crate::params::{Role, Visit};
use crate::tensor::Tensor4;

pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_psnr";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean PSNR of the eval-mode output on the validation pairs (the
    /// training pairs when no validation set is given).
    pub val_psnr: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.epoch, self.lr, self.train_loss, self.val_psnr)
    }
}

/// Trainable-tensor indices (visiting order) whose name ends in `suffix`.
pub fn trainable_indices<V: Visit<f32> + ?Sized>(model: &mut V, suffix: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 0;
    model.visit("", &mut |name, _, _, role| {
        if role == Role::Trainable {
            if name.ends_with(suffix) {
                out.push(i);
            }
            i += 1;
        }
    });
    out
}

pub fn mean_psnr(net: &TrainNet<f32>, pairs: &[ImagePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Argument("no pairs to evaluate".into()));
    }
    let mut total = 0.0;
    for p in pairs {
        total += psnr(&net.infer(&p.degraded)?, &p.ground_truth)?;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub net: TrainNet<f32>,
    pub adam: Adam,
    pub config: TrainConfig,
    pub loss: LvwConfig,
    /// Next epoch to run.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(net: TrainNet<f32>, config: TrainConfig, loss: LvwConfig) -> Result<Self> {
        config.check()?;
        loss.check()?;
        Ok(Self {
            net,
            adam: Adam::from_config(&config),
            config,
            loss,
            epoch: 0,
        })
    }

    /// Incremental weight stage: freeze every integration weight and restart
    /// the optimizer moments of the fresh increments.
    pub fn freeze(&mut self) {
        self.net.freeze_all();
        let idx = trainable_indices(&mut self.net, ".w_learn");
        self.adam.reset(&idx);
    }

    fn epoch_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.config.seed ^ (self.epoch as u64).wrapping_mul(0x2545_F491_4F6C_DD1D))
    }

    pub fn run_epoch(&mut self, train: &[ImagePair], val: &[ImagePair]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::Argument("training set is empty".into()));
        }
        let epoch = self.epoch;
        let lr = lr_at(epoch, &self.config)?;
        if self.config.iwo_freeze_epochs.contains(&epoch) {
            self.freeze();
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.epoch_rng());
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let xs: Vec<&Tensor4<f32>> = chunk.iter().map(|&i| &train[i].degraded).collect();
            let ys: Vec<&Tensor4<f32>> = chunk.iter().map(|&i| &train[i].ground_truth).collect();
            let x = Tensor4::stack(&xs)?;
            let y = Tensor4::stack(&ys)?;
            let (out, cache) = self.net.forward_train(&x)?;
            let report = lvw_loss(&out, &y, &self.loss)?;
            if !report.loss.is_finite() {
                return Err(Error::Numeric(format!("loss is {} at epoch {epoch}, batch {b}", report.loss)));
            }
            let g = lvw_backward(&report, &out, &y, &self.loss)?;
            let grads = self.net.backward(&cache, &g)?;
            if grads.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient at epoch {epoch}, batch {b}")));
            }
            self.adam.step(&mut self.net, &grads, lr)?;
            loss_sum += report.loss * chunk.len() as f64;
        }
        let eval_set = if val.is_empty() { train } else { val };
        let val_psnr = mean_psnr(&self.net, eval_set)?;
        self.epoch += 1;
        Ok(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            val_psnr,
        })
    }

    /// Runs the remaining epochs, handing each record to `on_epoch`.
    pub fn run(
        &mut self,
        train: &[ImagePair],
        val: &[ImagePair],
        mut on_epoch: impl FnMut(&EpochRecord, &Trainer) -> Result<()>,
    ) -> Result<Vec<EpochRecord>> {
        let mut records = Vec::new();
        while self.epoch < self.config.total_epochs {
            let rec = self.run_epoch(train, val)?;
            on_epoch(&rec, self)?;
            records.push(rec);
        }
        Ok(records)
    }
}
