//! Bi-level alternating optimization with beta-decay regularization,
//! compact retraining, evaluation, and checkpointing.

pub mod checkpoint;
mod optim;

pub use checkpoint::{Manifest, SearchState};
pub use optim::{Adam, SgdMomentum};

use std::path::Path;

use crate::a2sconv::Phase;
use crate::data::{BatchIter, Batch, HsiCube, Pixel};
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, ConfusionMatrix, MetricsReport};
use crate::rng::Rng;
use crate::supernet::{build_compact, build_supernet, CompactNet, Genotype, Supernet, SupernetConfig};
use crate::tensor::{ParamKind, ParamStore, Scalar, Tape, Tensor};

/// Hyperparameters of one search/retrain run.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct SearchConfig {
    pub search_epochs: usize,
    pub retrain_epochs: usize,
    pub batch_size: usize,
    /// Adam rate for network weights; betas 0.9/0.999, eps 1e-8.
    pub w_lr: f64,
    /// Multiplicative per-epoch decay of the weight rate.
    pub w_lr_decay: f64,
    /// SGD rate for architecture logits.
    pub arch_lr: f64,
    pub arch_momentum: f64,
    /// Beta-decay regularization weight.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            search_epochs: 50,
            retrain_epochs: 100,
            batch_size: 16,
            w_lr: 1e-3,
            w_lr_decay: 0.97,
            arch_lr: 0.01,
            arch_momentum: 0.9,
            lambda: 1.0,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::invalid("search_config", "lambda must be >= 0"));
        }
        if self.w_lr <= 0.0 || self.arch_lr <= 0.0 {
            return Err(Error::invalid("search_config", "learning rates must be > 0"));
        }
        if !(self.w_lr_decay > 0.0 && self.w_lr_decay <= 1.0) {
            return Err(Error::invalid("search_config", "decay factor must be in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("search_config", "batch_size must be >= 1"));
        }
        Ok(())
    }

    /// Weight learning rate at a 0-based epoch: w_lr * decay^epoch.
    pub fn weight_lr_at(&self, epoch: usize) -> f64 {
        self.w_lr * self.w_lr_decay.powi(epoch as i32)
    }
}

/// Sum of smoothmax (log-sum-exp) over every architecture logit group. The
/// gradient of each group's term is that group's softmax.
pub fn beta_decay_loss<E: Scalar>(tape: &Tape<E>, params: &ParamStore<E>) -> Result<Tensor<E>> {
    let mut total: Option<Tensor<E>> = None;
    for name in params.names_of_kind(ParamKind::Arch) {
        let logits = params.tracked(tape, &name)?;
        let term = tape.logsumexp(&logits)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(&acc, &term)?,
        });
    }
    total.ok_or_else(|| Error::invalid("beta_decay_loss", "no architecture parameters"))
}

/// Per-epoch search history entry. `block_probs` holds, for each block in
/// order, the softmax of its 3 outer then 4 inner logits (42 values).
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_loss: f32,
    pub val_oa: f32,
    pub block_probs: Vec<f32>,
}

/// CSV rendering of a search history: epoch, losses, validation OA, then
/// the 42 per-block softmax columns.
pub fn history_to_csv(history: &[EpochRecord]) -> String {
    use std::fmt::Write;
    let mut csv = String::from("epoch,train_loss,val_loss,val_oa");
    for block in 0..crate::supernet::NUM_BLOCKS {
        for i in 0..3 {
            let _ = write!(csv, ",block{block}.beta{i}");
        }
        for i in 0..4 {
            let _ = write!(csv, ",block{block}.alpha{i}");
        }
    }
    csv.push('\n');
    for rec in history {
        let _ = write!(
            csv,
            "{},{},{},{}",
            rec.epoch, rec.train_loss, rec.val_loss, rec.val_oa
        );
        for p in &rec.block_probs {
            let _ = write!(csv, ",{p}");
        }
        csv.push('\n');
    }
    csv
}

#[derive(Clone, Copy, Debug)]
pub struct StepLosses {
    /// Validation objective of the arch step: data loss + lambda * beta decay.
    pub arch_objective: f32,
    /// Data part of the validation loss.
    pub val_loss: f32,
    /// Training loss of the weight step.
    pub train_loss: f32,
}

/// Anything that can classify batches in evaluation mode.
pub trait EvalModel {
    fn eval_logits(&self, params: &mut ParamStore<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>>;
    fn patch_size(&self) -> usize;
}

impl EvalModel for Supernet {
    fn eval_logits(&self, params: &mut ParamStore<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tape = Tape::inference();
        self.forward(&tape, params, Phase::Eval, x)
    }
    fn patch_size(&self) -> usize {
        self.cfg.patch_size
    }
}

impl EvalModel for CompactNet {
    fn eval_logits(&self, params: &mut ParamStore<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tape = Tape::inference();
        self.forward(&tape, params, Phase::Eval, x)
    }
    fn patch_size(&self) -> usize {
        self.cfg.patch_size
    }
}

fn argmax_row(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode predictions (1-based class per pixel).
pub fn predict(
    model: &dyn EvalModel,
    params: &mut ParamStore<f32>,
    cube: &HsiCube,
    pixels: &[Pixel],
    batch_size: usize,
) -> Result<Vec<(Pixel, u16)>> {
    let mut out = Vec::with_capacity(pixels.len());
    for batch in BatchIter::new(cube, pixels, model.patch_size(), batch_size, None)? {
        let batch = batch?;
        let logits = model.eval_logits(params, &batch.inputs)?;
        let k = logits.shape()[1];
        for (i, px) in batch.pixels.iter().enumerate() {
            let row = &logits.data()[i * k..(i + 1) * k];
            out.push((*px, argmax_row(row) as u16 + 1));
        }
    }
    Ok(out)
}

/// Eval-mode forward over a split, accumulating a confusion matrix.
pub fn evaluate(
    model: &dyn EvalModel,
    params: &mut ParamStore<f32>,
    cube: &HsiCube,
    pixels: &[Pixel],
    batch_size: usize,
) -> Result<(ConfusionMatrix, MetricsReport)> {
    if pixels.is_empty() {
        return Err(Error::invalid("evaluate", "empty split"));
    }
    let mut cm = ConfusionMatrix::new(cube.num_classes());
    for (px, predicted) in predict(model, params, cube, pixels, batch_size)? {
        cm.accumulate(cube.label(px) as usize - 1, predicted as usize - 1)?;
    }
    let report = compute_metrics(&cm)?;
    Ok((cm, report))
}

/// One search/training context over the supernet.
pub struct SearchRun {
    pub net: Supernet,
    pub params: ParamStore<f32>,
    pub cfg: SearchConfig,
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    adam: Adam,
    sgd: SgdMomentum,
}

impl SearchRun {
    pub fn new(cfg: &SearchConfig, net_cfg: &SupernetConfig) -> Result<Self> {
        cfg.validate()?;
        let (net, params) = build_supernet(net_cfg, cfg.seed)?;
        Ok(SearchRun {
            net,
            params,
            cfg: *cfg,
            epoch: 0,
            history: Vec::new(),
            adam: Adam::new(cfg.w_lr),
            sgd: SgdMomentum::new(cfg.arch_lr, cfg.arch_momentum),
        })
    }

    /// Architecture sub-step: minimize L_val + lambda * L_beta over the
    /// logits with the weights frozen (first-order approximation: current
    /// weights stand in for omega*(alpha)). Returns (objective, data loss).
    pub fn arch_step(&mut self, val_batch: &Batch) -> Result<(f32, f32)> {
        if val_batch.labels.is_empty() {
            return Err(Error::invalid("arch_step", "empty batch"));
        }
        let tape = Tape::new();
        let logits = self
            .net
            .forward(&tape, &mut self.params, Phase::Train, &val_batch.inputs)?;
        let data_loss = tape.cross_entropy(&logits, &val_batch.labels)?;
        let decay = beta_decay_loss(&tape, &self.params)?;
        let scaled = tape.scale(&decay, self.cfg.lambda);
        let objective = tape.add(&data_loss, &scaled)?;
        let grads = tape.backward(&objective, &self.params)?;
        self.sgd.step(&mut self.params, &grads, ParamKind::Arch)?;
        Ok((objective.item(), data_loss.item()))
    }

    /// Weight sub-step: minimize L_train over the weights with the logits
    /// frozen. Returns the training loss.
    pub fn weight_step(&mut self, train_batch: &Batch) -> Result<f32> {
        if train_batch.labels.is_empty() {
            return Err(Error::invalid("weight_step", "empty batch"));
        }
        let tape = Tape::new();
        let logits = self
            .net
            .forward(&tape, &mut self.params, Phase::Train, &train_batch.inputs)?;
        let train_loss = tape.cross_entropy(&logits, &train_batch.labels)?;
        let grads = tape.backward(&train_loss, &self.params)?;
        self.adam.step(&mut self.params, &grads, ParamKind::Weight)?;
        Ok(train_loss.item())
    }

    /// One bi-level iteration, arch step then weight step.
    pub fn search_step(&mut self, train_batch: &Batch, val_batch: &Batch) -> Result<StepLosses> {
        let (arch_objective, val_loss) = self.arch_step(val_batch)?;
        let train_loss = self.weight_step(train_batch)?;
        Ok(StepLosses {
            arch_objective,
            val_loss,
            train_loss,
        })
    }

    /// Softmax distributions of every block's logit groups, 7 values per
    /// block in block order.
    pub fn block_distributions(&self) -> Result<Vec<f32>> {
        let tape = Tape::inference();
        let mut out = Vec::with_capacity(self.net.blocks.len() * 7);
        for block in &self.net.blocks {
            for name in [block.beta_name(), block.alpha_name()] {
                let probs = tape.softmax(self.params.value(&name)?)?;
                out.extend_from_slice(probs.data());
            }
        }
        Ok(out)
    }

    /// One epoch of alternating steps over the training split, validation
    /// batches drawn round-robin, followed by an eval-mode pass for the
    /// epoch's validation accuracy.
    pub fn run_epoch(&mut self, cube: &HsiCube, train: &[Pixel], val: &[Pixel]) -> Result<()> {
        self.adam.lr = self.cfg.weight_lr_at(self.epoch);
        let patch = self.net.cfg.patch_size;
        let mut train_rng =
            Rng::stream_indexed(self.cfg.seed, "search.shuffle.train", self.epoch as u64);
        let mut val_rng = Rng::stream_indexed(self.cfg.seed, "search.shuffle.val", self.epoch as u64);
        let val_batches: Vec<Batch> =
            BatchIter::new(cube, val, patch, self.cfg.batch_size, Some(&mut val_rng))?
                .collect::<Result<_>>()?;
        if val_batches.is_empty() {
            return Err(Error::invalid("run_epoch", "empty validation split"));
        }
        let mut train_sum = 0.0f64;
        let mut val_sum = 0.0f64;
        let mut steps = 0usize;
        let train_iter =
            BatchIter::new(cube, train, patch, self.cfg.batch_size, Some(&mut train_rng))?;
        for (i, train_batch) in train_iter.enumerate() {
            let train_batch = train_batch?;
            let val_batch = &val_batches[i % val_batches.len()];
            let losses = self.search_step(&train_batch, val_batch)?;
            train_sum += losses.train_loss as f64;
            val_sum += losses.val_loss as f64;
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::invalid("run_epoch", "empty training split"));
        }
        let (_, report) = evaluate(&self.net, &mut self.params, cube, val, self.cfg.batch_size)?;
        let record = EpochRecord {
            epoch: self.epoch,
            train_loss: (train_sum / steps as f64) as f32,
            val_loss: (val_sum / steps as f64) as f32,
            val_oa: report.oa as f32,
            block_probs: self.block_distributions()?,
        };
        self.history.push(record);
        self.epoch += 1;
        Ok(())
    }

    /// Run the remaining epochs up to the configured budget.
    pub fn run(&mut self, cube: &HsiCube, train: &[Pixel], val: &[Pixel]) -> Result<()> {
        while self.epoch < self.cfg.search_epochs {
            self.run_epoch(cube, train, val)?;
        }
        Ok(())
    }

    pub fn genotype(&self) -> Result<Genotype> {
        self.net.derive_genotype(&self.params)
    }

    fn state(&self) -> SearchState {
        SearchState {
            epoch: self.epoch,
            seed: self.cfg.seed,
            adam_t: self.adam.t,
            adam_m: self.adam.m.clone(),
            adam_v: self.adam.v.clone(),
            sgd_buf: self.sgd.buf.clone(),
            history: self.history.clone(),
        }
    }

    /// Write a resumable checkpoint directory.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        let manifest = Manifest {
            format_version: checkpoint::FORMAT_VERSION,
            kind: "supernet".to_string(),
            fingerprint: self.net.cfg.fingerprint(),
            epoch: self.epoch,
            val_oa: self.history.last().map(|r| r.val_oa as f64),
        };
        checkpoint::save_checkpoint(dir, &manifest, &self.genotype()?, &self.params, Some(&self.state()))
    }

    /// Restore a run saved by [`SearchRun::save_checkpoint`]; the resumed
    /// run reproduces the uninterrupted run bit-exactly.
    pub fn resume(cfg: &SearchConfig, net_cfg: &SupernetConfig, dir: &Path) -> Result<Self> {
        checkpoint::load_manifest_checked(dir, &net_cfg.fingerprint())?;
        let mut run = SearchRun::new(cfg, net_cfg)?;
        checkpoint::read_weights_into(&dir.join(checkpoint::WEIGHTS_FILE), &mut run.params)?;
        let state = checkpoint::read_state(&dir.join(checkpoint::STATE_FILE))?;
        if state.seed != cfg.seed {
            return Err(Error::format(
                dir.join(checkpoint::STATE_FILE).display().to_string(),
                format!("checkpoint seed {} != config seed {}", state.seed, cfg.seed),
            ));
        }
        run.epoch = state.epoch;
        run.history = state.history;
        run.adam.t = state.adam_t;
        run.adam.m = state.adam_m;
        run.adam.v = state.adam_v;
        run.sgd.buf = state.sgd_buf;
        Ok(run)
    }
}

/// Search from scratch: epochs of bi-level steps, then argmax derivation.
pub fn run_search(
    cfg: &SearchConfig,
    net_cfg: &SupernetConfig,
    cube: &HsiCube,
    train: &[Pixel],
    val: &[Pixel],
) -> Result<(Genotype, Vec<EpochRecord>, SearchRun)> {
    let mut run = SearchRun::new(cfg, net_cfg)?;
    run.run(cube, train, val)?;
    let genotype = run.genotype()?;
    let history = run.history.clone();
    Ok((genotype, history, run))
}

/// Per-epoch retraining history entry.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrainRecord {
    pub epoch: usize,
    pub train_loss: f32,
    pub val_oa: f32,
    pub lr: f64,
}

/// A retrained compact network with its best-validation snapshot.
pub struct TrainedCompact {
    pub net: CompactNet,
    pub final_params: ParamStore<f32>,
    pub best_params: ParamStore<f32>,
    pub best_epoch: usize,
    pub best_val_oa: f64,
    pub history: Vec<RetrainRecord>,
}

impl TrainedCompact {
    /// Write the best-validation snapshot as a checkpoint directory.
    pub fn save_best_checkpoint(&self, dir: &Path) -> Result<()> {
        let manifest = Manifest {
            format_version: checkpoint::FORMAT_VERSION,
            kind: "compact".to_string(),
            fingerprint: self.net.cfg.fingerprint(),
            epoch: self.best_epoch,
            val_oa: Some(self.best_val_oa),
        };
        checkpoint::save_checkpoint(dir, &manifest, &self.net.genotype, &self.best_params, None)
    }
}

/// Retrain a derived genotype from fresh seeded weights with Adam and the
/// exponential rate schedule, keeping the best validation-OA snapshot.
pub fn train_compact(
    cfg: &SearchConfig,
    genotype: &Genotype,
    net_cfg: &SupernetConfig,
    cube: &HsiCube,
    train: &[Pixel],
    val: &[Pixel],
) -> Result<TrainedCompact> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("train_compact", "empty split"));
    }
    let init_seed = Rng::stream(cfg.seed, "retrain.init").next_u64();
    let (net, mut params) = build_compact::<f32>(genotype, net_cfg, init_seed)?;
    let mut adam = Adam::new(cfg.w_lr);
    let mut history = Vec::with_capacity(cfg.retrain_epochs);
    let mut best_params = params.clone();
    let mut best_epoch = 0usize;
    let mut best_val_oa = f64::NEG_INFINITY;
    for epoch in 0..cfg.retrain_epochs {
        adam.lr = cfg.weight_lr_at(epoch);
        let mut rng = Rng::stream_indexed(cfg.seed, "retrain.shuffle", epoch as u64);
        let mut loss_sum = 0.0f64;
        let mut steps = 0usize;
        for batch in BatchIter::new(cube, train, net_cfg.patch_size, cfg.batch_size, Some(&mut rng))? {
            let batch = batch?;
            let tape = Tape::new();
            let logits = net.forward(&tape, &mut params, Phase::Train, &batch.inputs)?;
            let loss = tape.cross_entropy(&logits, &batch.labels)?;
            let grads = tape.backward(&loss, &params)?;
            adam.step(&mut params, &grads, ParamKind::Weight)?;
            loss_sum += loss.item() as f64;
            steps += 1;
        }
        let (_, report) = evaluate(&net, &mut params, cube, val, cfg.batch_size)?;
        if report.oa > best_val_oa {
            best_val_oa = report.oa;
            best_epoch = epoch;
            best_params = params.clone();
        }
        history.push(RetrainRecord {
            epoch,
            train_loss: (loss_sum / steps.max(1) as f64) as f32,
            val_oa: report.oa as f32,
            lr: adam.lr,
        });
    }
    Ok(TrainedCompact {
        net,
        final_params: params,
        best_params,
        best_epoch,
        best_val_oa,
        history,
    })
}
