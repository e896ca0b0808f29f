//! Two-stage fine-tuning loop.
//!
//! Each epoch walks a seeded permutation of the classification set in
//! batches of `id_batch`; every batch is paired with a slice of the
//! auxiliary outlier stream, which runs at its own batch size and cycles
//! (with wraparound) through a per-epoch permutation of the outlier set.
//! Epochs before `switch_epoch` optimize stage one of the composite loss,
//! later epochs stage two. The optimizer is classic SGD with momentum and
//! coupled L2 weight decay on a cosine learning-rate schedule.
//!
//! Runs are deterministic given (config, seed, data) and resumable:
//! checkpoints carry the rng state and the optimizer velocity, so a resumed
//! run continues the exact parameter trajectory of an uninterrupted one.

use std::path::Path;

use crate::dataset::{LabeledDataset, OutlierDataset, OutlierRole};
use crate::detection::{accuracy, class_alignment_cosines, orth_term};
use crate::error::{Error, Result};
use crate::losses::{composite_loss, LossBreakdown, LossVariant, LossWeights, Stage, StagePlan};
use crate::model::{load_checkpoint, save_checkpoint, Model, TrainMeta};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Stream id for the fine-tuning rng (see [`Rng::with_stream`]).
pub const STREAM_TRAIN: u64 = 0;
/// Stream id for the warm-up rng.
pub const STREAM_WARMUP: u64 = 1;

/// Everything a fine-tuning run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub switch_epoch: usize,
    pub id_batch: usize,
    pub ood_batch: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub variant: LossVariant,
    /// Cross-entropy-only epochs run before fine-tuning when no starting
    /// checkpoint is supplied.
    pub warmup_epochs: usize,
    pub warmup_lr0: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            switch_epoch: 25,
            id_batch: 128,
            ood_batch: 256,
            lr0: 0.07,
            momentum: 0.9,
            weight_decay: 0.0005,
            weights: LossWeights::default(),
            seed: 0,
            variant: LossVariant::Ours,
            warmup_epochs: 20,
            warmup_lr0: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.switch_epoch > self.epochs {
            return Err(Error::Config(format!(
                "switch_epoch {} exceeds epochs {}",
                self.switch_epoch, self.epochs
            )));
        }
        if self.id_batch == 0 || self.ood_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0)
            || !(self.warmup_lr0.is_finite() && self.warmup_lr0 > 0.0)
        {
            return Err(Error::Config(format!(
                "learning rates must be positive, got lr0={} warmup_lr0={}",
                self.lr0, self.warmup_lr0
            )));
        }
        if !(self.momentum.is_finite() && (0.0..1.0).contains(&self.momentum)) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        self.weights.validate()
    }

    pub fn stage_plan(&self) -> StagePlan {
        StagePlan {
            total_epochs: self.epochs,
            switch_epoch: self.switch_epoch,
        }
    }

    /// Learning rate at `epoch` under the cosine schedule:
    /// `lr0 * (1 + cos(pi * epoch / epochs)) / 2`.
    pub fn cosine_lr(&self, epoch: usize) -> f64 {
        cosine_lr(epoch, self.epochs, self.lr0)
    }

    /// FNV-1a fingerprint of every field, stored in checkpoints so a
    /// resumed run can reject a drifted configuration.
    pub fn hash(&self) -> u64 {
        let canonical = format!(
            "epochs={};switch_epoch={};id_batch={};ood_batch={};lr0={};momentum={};\
             weight_decay={};lambda={};alpha={};beta={};seed={};variant={};\
             warmup_epochs={};warmup_lr0={}",
            self.epochs,
            self.switch_epoch,
            self.id_batch,
            self.ood_batch,
            self.lr0,
            self.momentum,
            self.weight_decay,
            self.weights.lambda,
            self.weights.alpha,
            self.weights.beta,
            self.seed,
            self.variant.name(),
            self.warmup_epochs,
            self.warmup_lr0,
        );
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in canonical.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Cosine schedule value at `epoch` of `total` epochs.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64) -> f64 {
    assert!(total > 0, "cosine_lr: zero-epoch schedule");
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / total as f64).cos())
}

/// Momentum buffers, flat over the model's parameters in checkpoint order.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    velocity: Vec<f64>,
}

impl SgdState {
    pub fn zeros(n: usize) -> Self {
        SgdState {
            velocity: vec![0.0; n],
        }
    }

    pub fn from_velocity(velocity: Vec<f64>) -> Self {
        SgdState { velocity }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }
}

/// Classic coupled update, per element:
/// `g <- grad + wd * theta; v <- momentum * v + g; theta <- theta - lr * v`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    state: &mut SgdState,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape(format!(
            "sgd_step: {} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    let total: usize = params.iter().map(|t| t.numel()).sum();
    if total != state.velocity.len() {
        return Err(Error::Shape(format!(
            "sgd_step: velocity length {} for {total} parameters",
            state.velocity.len()
        )));
    }
    let mut offset = 0;
    for (param, grad) in params.iter_mut().zip(grads) {
        if grad.len() != param.numel() {
            return Err(Error::Shape(format!(
                "sgd_step: gradient length {} for parameter of {} elements",
                grad.len(),
                param.numel()
            )));
        }
        let v = &mut state.velocity[offset..offset + grad.len()];
        for ((theta, g), vel) in param.data_mut().iter_mut().zip(grad).zip(v.iter_mut()) {
            let g = g + weight_decay * *theta;
            *vel = momentum * *vel + g;
            *theta -= lr * *vel;
        }
        offset += grad.len();
    }
    Ok(())
}

/// One epoch's log line.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Batch-mean raw component losses; masked-out components are 0.
    pub ce: f64,
    pub oe: f64,
    pub nc: f64,
    pub orth: f64,
    /// Training-set accuracy at epoch end.
    pub id_acc: f64,
    /// Mean orthogonality term of the auxiliary outlier set at epoch end.
    pub aux_orth_mean: f64,
    /// Mean cosine between training features and their class weights.
    pub id_nc_cos: f64,
}

/// Per-epoch records of one run, serializable as CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("epoch,lr,ce,oe,nc,orth,id_acc,aux_orth_mean,id_nc_cos\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.epoch, r.lr, r.ce, r.oe, r.nc, r.orth, r.id_acc, r.aux_orth_mean, r.id_nc_cos
            ));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.records.extend(other.records);
    }
}

/// Resumable fine-tuning driver.
#[derive(Debug)]
pub struct Trainer {
    model: Model,
    config: TrainConfig,
    sgd: SgdState,
    rng: Rng,
    next_epoch: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let n = model.param_count();
        Ok(Trainer {
            model,
            sgd: SgdState::zeros(n),
            rng: Rng::with_stream(config.seed, STREAM_TRAIN),
            next_epoch: 0,
            config,
        })
    }

    /// Restores a mid-run trainer. The configuration must be identical to
    /// the one that produced the checkpoint.
    pub fn from_checkpoint(path: &Path, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, meta) = load_checkpoint(path)?;
        if meta.config_hash != config.hash() {
            return Err(Error::Config(format!(
                "checkpoint {} was produced by a different configuration \
                 (stored hash {:#x}, current {:#x})",
                path.display(),
                meta.config_hash,
                config.hash()
            )));
        }
        let n = model.param_count();
        let sgd = if meta.velocity.is_empty() {
            SgdState::zeros(n)
        } else {
            SgdState::from_velocity(meta.velocity)
        };
        Ok(Trainer {
            model,
            sgd,
            rng: Rng::restore(meta.rng),
            next_epoch: meta.epoch as usize,
            config,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let plan = self.config.stage_plan();
        let stage_epoch = self.next_epoch.min(self.config.epochs.saturating_sub(1));
        let stage = if self.config.epochs == 0 {
            0
        } else {
            match plan.stage_for(stage_epoch) {
                Stage::One => 1,
                Stage::Two => 2,
            }
        };
        let meta = TrainMeta {
            stage,
            epoch: self.next_epoch as u64,
            config_hash: self.config.hash(),
            rng: self.rng.state(),
            velocity: self.sgd.velocity.clone(),
        };
        save_checkpoint(&self.model, &meta, path)
    }

    fn validate_data(&self, id: &LabeledDataset, aux: &OutlierDataset) -> Result<()> {
        if aux.role() != OutlierRole::Auxiliary {
            return Err(Error::Config(
                "training requires an auxiliary outlier set; a test-role set was supplied".into(),
            ));
        }
        if id.dim() != self.model.input_dim() || aux.dim() != self.model.input_dim() {
            return Err(Error::Shape(format!(
                "data width (id {}, aux {}) does not match model input dim {}",
                id.dim(),
                aux.dim(),
                self.model.input_dim()
            )));
        }
        if id.n_classes() > self.model.n_classes() {
            return Err(Error::Shape(format!(
                "dataset has {} classes, model only {}",
                id.n_classes(),
                self.model.n_classes()
            )));
        }
        Ok(())
    }

    /// Runs every remaining epoch.
    pub fn run(&mut self, id: &LabeledDataset, aux: &OutlierDataset) -> Result<TrainLog> {
        let remaining = self.config.epochs.saturating_sub(self.next_epoch);
        self.run_epochs(id, aux, remaining)
    }

    /// Runs up to `count` more epochs (fewer if the schedule ends first).
    pub fn run_epochs(
        &mut self,
        id: &LabeledDataset,
        aux: &OutlierDataset,
        count: usize,
    ) -> Result<TrainLog> {
        self.validate_data(id, aux)?;
        let plan = self.config.stage_plan();
        let last = self.config.epochs.min(self.next_epoch + count);
        let mut log = TrainLog::default();

        while self.next_epoch < last {
            let epoch = self.next_epoch;
            let stage = plan.stage_for(epoch);
            let lr = self.config.cosine_lr(epoch);

            let id_perm = self.rng.permutation(id.len());
            let ood_perm = self.rng.permutation(aux.len());
            let mut sums = LossBreakdown::default();
            let mut batches = 0usize;

            for (b, id_idx) in id_perm.chunks(self.config.id_batch).enumerate() {
                let ood_idx: Vec<usize> = (0..self.config.ood_batch)
                    .map(|t| ood_perm[(b * self.config.ood_batch + t) % aux.len()])
                    .collect();
                let (x_id, y) = id.gather(id_idx);
                let x_ood = aux.gather(&ood_idx);

                let breakdown = self.step(stage, &x_id, &y, &x_ood, lr)?;
                sums.ce += breakdown.ce;
                sums.oe += breakdown.oe;
                sums.nc += breakdown.nc;
                sums.orth += breakdown.orth;
                batches += 1;
            }

            let nb = batches.max(1) as f64;
            let (id_acc, id_nc_cos) = self.id_diagnostics(id)?;
            let aux_orth_mean = self.aux_orth_mean(aux)?;
            log.records.push(EpochRecord {
                epoch,
                lr,
                ce: sums.ce / nb,
                oe: sums.oe / nb,
                nc: sums.nc / nb,
                orth: sums.orth / nb,
                id_acc,
                aux_orth_mean,
                id_nc_cos,
            });
            self.next_epoch += 1;
        }
        Ok(log)
    }

    fn step(
        &mut self,
        stage: Stage,
        x_id: &Tensor,
        labels: &[usize],
        x_ood: &Tensor,
        lr: f64,
    ) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let bound = self.model.bind(&mut tape);
        let id_input = tape.constant(x_id.clone());
        let ood_input = tape.constant(x_ood.clone());
        let (id_logits, id_features) = bound.forward(&mut tape, id_input)?;
        let (ood_logits, ood_features) = bound.forward(&mut tape, ood_input)?;
        let out = composite_loss(
            &mut tape,
            stage,
            self.config.variant,
            id_logits,
            id_features,
            labels,
            ood_logits,
            ood_features,
            bound.fc_weight,
            &self.config.weights,
        )?;
        tape.backward(out.total)?;

        let grads: Vec<Vec<f64>> = bound
            .param_ids()
            .iter()
            .map(|&pid| {
                tape.grad(pid)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(pid).numel()])
            })
            .collect();
        let mut params = self.model.parameters_mut();
        sgd_step(
            &mut params,
            &grads,
            lr,
            self.config.momentum,
            self.config.weight_decay,
            &mut self.sgd,
        )?;
        Ok(out.breakdown)
    }

    fn id_diagnostics(&self, id: &LabeledDataset) -> Result<(f64, f64)> {
        let (logits, features) = self.model.forward(id.features())?;
        let acc = accuracy(&logits, id.labels());
        let cosines =
            class_alignment_cosines(&features, id.labels(), self.model.class_weights())?;
        let mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
        Ok((acc, mean))
    }

    fn aux_orth_mean(&self, aux: &OutlierDataset) -> Result<f64> {
        let (_, features) = self.model.forward(aux.features())?;
        let w = self.model.class_weights();
        let sum: f64 = (0..features.rows())
            .map(|i| orth_term(features.row(i), w))
            .sum();
        Ok(sum / features.rows() as f64)
    }
}

/// Fine-tunes `model` for the configured epochs. Convenience wrapper over
/// [`Trainer`].
pub fn train(
    model: Model,
    id: &LabeledDataset,
    aux: &OutlierDataset,
    config: TrainConfig,
) -> Result<(Model, TrainLog)> {
    let mut trainer = Trainer::new(model, config)?;
    let log = trainer.run(id, aux)?;
    Ok((trainer.into_model(), log))
}

/// Continues an interrupted run from a checkpoint; bit-identical to the
/// uninterrupted run under the same configuration.
pub fn resume(
    checkpoint: &Path,
    id: &LabeledDataset,
    aux: &OutlierDataset,
    config: TrainConfig,
) -> Result<(Model, TrainLog)> {
    let mut trainer = Trainer::from_checkpoint(checkpoint, config)?;
    let log = trainer.run(id, aux)?;
    Ok((trainer.into_model(), log))
}

/// Cross-entropy-only warm-up: brings a fresh model near convergence on
/// the classification task before fine-tuning, standing in for a long
/// pretraining run. Uses its own cosine schedule over `warmup_epochs` at
/// `warmup_lr0` and its own rng stream. The auxiliary diagnostics column
/// is 0 (no outlier set is involved).
pub fn warmup(model: &mut Model, id: &LabeledDataset, config: &TrainConfig) -> Result<TrainLog> {
    config.validate()?;
    if id.dim() != model.input_dim() {
        return Err(Error::Shape(format!(
            "data width {} does not match model input dim {}",
            id.dim(),
            model.input_dim()
        )));
    }
    let mut rng = Rng::with_stream(config.seed, STREAM_WARMUP);
    let mut sgd = SgdState::zeros(model.param_count());
    let mut log = TrainLog::default();

    for epoch in 0..config.warmup_epochs {
        let lr = cosine_lr(epoch, config.warmup_epochs, config.warmup_lr0);
        let mut ce_sum = 0.0;
        let mut batches = 0usize;
        for (x, y) in id.batches(config.id_batch, &mut rng) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let input = tape.constant(x);
            let (logits, _features) = bound.forward(&mut tape, input)?;
            let loss = crate::losses::ce_loss(&mut tape, logits, &y)?;
            ce_sum += tape.scalar(loss);
            tape.backward(loss)?;
            let grads: Vec<Vec<f64>> = bound
                .param_ids()
                .iter()
                .map(|&pid| {
                    tape.grad(pid)
                        .map(|g| g.to_vec())
                        .unwrap_or_else(|| vec![0.0; tape.value(pid).numel()])
                })
                .collect();
            let mut params = model.parameters_mut();
            sgd_step(
                &mut params,
                &grads,
                lr,
                config.momentum,
                config.weight_decay,
                &mut sgd,
            )?;
            batches += 1;
        }
        let (logits, features) = model.forward(id.features())?;
        let id_acc = accuracy(&logits, id.labels());
        let cosines = class_alignment_cosines(&features, id.labels(), model.class_weights())?;
        let id_nc_cos = cosines.iter().sum::<f64>() / cosines.len() as f64;
        log.records.push(EpochRecord {
            epoch,
            lr,
            ce: ce_sum / batches.max(1) as f64,
            oe: 0.0,
            nc: 0.0,
            orth: 0.0,
            id_acc,
            aux_orth_mean: 0.0,
            id_nc_cos,
        });
    }
    Ok(log)
}
