//! Training loop with early stopping, evaluation and resumable checkpoints.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::data::{self, DataSplits, WindowedDataset};
use crate::error::{Error, Result};
use crate::loss::{self, Metrics};
use crate::model::DMambaModel;
use crate::nn::Forward;
use crate::optim::Adam;
use crate::report::{self, RunReport};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

const SHUFFLE_STREAM: u64 = 1 << 56;
const DROPOUT_STREAM: u64 = 2 << 56;

/// Independent stream `stream` of the generator seeded by `seed`.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Load the configured CSV, truncate, split and standardize. Sets
/// `config.model.channels` from the file and returns the dataset name.
pub fn load_data(config: &mut TrainConfig) -> Result<(DataSplits, String)> {
    let path = config
        .data
        .clone()
        .ok_or_else(|| Error::Config("no data file given".into()))?;
    let mut series = data::load_csv_auto(&path)?;
    if let Some(rows) = config.max_rows {
        series = series.truncate(rows);
    }
    config.model.channels = series.dim();
    let ratios = config.split_ratios.unwrap_or_else(|| data::default_split_ratios(&path));
    let splits = data::prepare(&series, ratios, config.model.seq_len, config.model.pred_len, config.stride)?;
    Ok((splits, dataset_name(&path)))
}

pub fn dataset_name(path: &Path) -> String {
    path.file_stem()
        .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

/// Test-set evaluation summary.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: Metrics,
    /// Configured training loss, averaged over windows.
    pub loss: f64,
    pub batches: usize,
    pub infer_seconds: f64,
}

impl Evaluation {
    pub fn infer_batch_seconds(&self) -> f64 {
        if self.batches == 0 {
            0.0
        } else {
            self.infer_seconds / self.batches as f64
        }
    }
}

/// Options that steer one invocation without changing the configuration.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for the checkpoint, reports and forecast sample.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) once this many epochs are complete, as if
    /// the process had been interrupted.
    pub stop_after_epochs: Option<usize>,
}

pub struct Trainer<S: Scalar> {
    pub config: TrainConfig,
    pub model: DMambaModel<S>,
    pub adam: Adam<S>,
    pub epochs_done: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub best_val: f64,
    pub best_epoch: usize,
    pub best_weights: Vec<Tensor<S>>,
    pub bad_epochs: usize,
    /// Early stopping fired or the epoch budget is spent; the model then
    /// holds the best weights.
    pub finished: bool,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = DMambaModel::new(config.model.clone(), config.seed)?;
        let adam = Adam::new(config.adam, &model.params);
        let best_weights = model.params.values();
        Ok(Trainer {
            config,
            model,
            adam,
            epochs_done: 0,
            train_loss: Vec::new(),
            val_loss: Vec::new(),
            epoch_seconds: Vec::new(),
            best_val: f64::INFINITY,
            best_epoch: 0,
            best_weights,
            bad_epochs: 0,
            finished: false,
        })
    }

    /// One optimizer step on the windows `indices`. Returns the batch loss.
    pub fn train_step(&mut self, data: &WindowedDataset, indices: &[usize]) -> Result<f64> {
        let (x, y) = data.batch::<S>(indices);
        let rng = stream_rng(self.config.seed, DROPOUT_STREAM | self.adam.step);
        let tape = Tape::new();
        let f = Forward::new(&tape, &self.model.params, true, rng);
        let pred = self.model.forward(&f, tape.constant(x))?;
        let l = loss::loss(self.config.loss, pred, &y)?;
        let value = l.value().item().as_f64();
        if !value.is_finite() {
            return Err(Error::Divergence(format!("non-finite training loss {value}")));
        }
        let grads = tape.backward(l)?;
        let mut grads = f.params.gradients(&grads);
        drop(f);
        self.adam.step(&mut self.model.params, &mut grads)?;
        Ok(value)
    }

    /// One pass over the shuffled training windows, then validation and the
    /// early-stopping bookkeeping.
    pub fn run_epoch(&mut self, train: &WindowedDataset, val: &WindowedDataset) -> Result<()> {
        let start = Instant::now();
        let epoch = self.epochs_done + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(self.config.seed, SHUFFLE_STREAM | epoch as u64));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let l = self.train_step(train, chunk).map_err(|e| match e {
                Error::Divergence(m) => Error::Divergence(format!("epoch {epoch}, batch {}: {m}", b + 1)),
                e => e,
            })?;
            total += l;
            batches += 1;
            if b % 50 == 0 {
                debug!("epoch {epoch} batch {} loss {l:.6}", b + 1);
            }
        }
        let train_loss = total / batches as f64;
        let val_loss = evaluate(&self.model, val, &self.config)?.loss;
        if !val_loss.is_finite() {
            return Err(Error::Divergence(format!("epoch {epoch}: non-finite validation loss")));
        }
        self.epochs_done = epoch;
        self.train_loss.push(train_loss);
        self.val_loss.push(val_loss);
        self.epoch_seconds.push(start.elapsed().as_secs_f64());
        if val_loss < self.best_val {
            self.best_val = val_loss;
            self.best_epoch = epoch;
            self.best_weights = self.model.params.values();
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        info!(
            "epoch {epoch}: train {train_loss:.6} val {val_loss:.6} ({:.1}s)",
            self.epoch_seconds[epoch - 1]
        );
        if self.bad_epochs >= self.config.patience || epoch >= self.config.max_epochs {
            self.finish();
        }
        Ok(())
    }

    /// Restore the best validation weights and stop.
    pub fn finish(&mut self) {
        if self.best_epoch > 0 {
            self.model.params.set_values(self.best_weights.clone());
        }
        self.finished = true;
    }

    /// Train until early stopping or the epoch budget, saving a checkpoint
    /// after each epoch when `checkpoint` is given.
    pub fn fit(&mut self, splits: &DataSplits, checkpoint: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
        if splits.train.is_empty() || splits.val.is_empty() {
            return Err(Error::Data("training and validation splits need at least one window".into()));
        }
        while !self.finished {
            if stop_after.is_some_and(|n| self.epochs_done >= n) {
                return Ok(());
            }
            self.run_epoch(&splits.train, &splits.val)?;
            if let Some(path) = checkpoint {
                self.checkpoint().save(path)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.config.hash(), self.config.to_text());
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        c.set_meta("epochs_done", self.epochs_done);
        c.set_meta("adam_step", self.adam.step);
        c.set_meta("best_val", self.best_val);
        c.set_meta("best_epoch", self.best_epoch);
        c.set_meta("bad_epochs", self.bad_epochs);
        c.set_meta("finished", self.finished);
        c.set_meta("train_loss", join(&self.train_loss));
        c.set_meta("val_loss", join(&self.val_loss));
        c.set_meta("epoch_seconds", join(&self.epoch_seconds));
        let store = &self.model.params;
        c.push_store("param.", store);
        c.push_all("adam_m.", store, &self.adam.m);
        c.push_all("adam_v.", store, &self.adam.v);
        c.push_all("best.", store, &self.best_weights);
        c
    }

    /// Rebuild the exact training state saved by [`Trainer::checkpoint`].
    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::from_text(&c.config_text)?;
        if config.hash() != c.config_hash {
            return Err(Error::Checkpoint("stored config does not match its hash".into()));
        }
        let mut t = Trainer::new(config)?;
        let store = &t.model.params;
        let params = c.load_all("param.", store)?;
        t.adam.m = c.load_all("adam_m.", store)?;
        t.adam.v = c.load_all("adam_v.", store)?;
        t.best_weights = c.load_all("best.", store)?;
        t.model.params.set_values(params);
        t.adam.step = c.meta_parse("adam_step")?;
        t.epochs_done = c.meta_parse("epochs_done")?;
        t.best_val = c.meta_parse("best_val")?;
        t.best_epoch = c.meta_parse("best_epoch")?;
        t.bad_epochs = c.meta_parse("bad_epochs")?;
        t.finished = c.meta_parse("finished")?;
        let list = |key: &str| -> Result<Vec<f64>> {
            let v = c.meta(key)?;
            if v.is_empty() {
                return Ok(Vec::new());
            }
            v.split(',')
                .map(|x| x.parse().map_err(|_| Error::Checkpoint(format!("bad {key} entry {x:?}"))))
                .collect()
        };
        t.train_loss = list("train_loss")?;
        t.val_loss = list("val_loss")?;
        t.epoch_seconds = list("epoch_seconds")?;
        Ok(t)
    }

    pub fn report(&self, dataset: &str, test: &Evaluation) -> RunReport {
        let c = &self.config;
        let config = c
            .entries()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(";");
        RunReport {
            dataset: dataset.to_string(),
            variant: c.model.variant.name().to_string(),
            seq_len: c.model.seq_len,
            pred_len: c.model.pred_len,
            alpha: c.model.alpha,
            loss: c.loss.name().to_string(),
            seed: c.seed,
            epochs: self.epochs_done,
            best_epoch: self.best_epoch,
            train_loss: self.train_loss.clone(),
            val_loss: self.val_loss.clone(),
            test_mse: test.metrics.mse(),
            test_mae: test.metrics.mae(),
            wall_seconds: self.epoch_seconds.iter().sum::<f64>() + test.infer_seconds,
            epoch_seconds: self.epoch_seconds.clone(),
            infer_batch_seconds: test.infer_batch_seconds(),
            param_count: self.model.num_params(),
            config_hash: c.hash(),
            config,
        }
    }
}

/// Forward every window of `data` in order, in batches of the configured
/// size, without dropout.
pub fn evaluate<S: Scalar>(model: &DMambaModel<S>, data: &WindowedDataset, config: &TrainConfig) -> Result<Evaluation> {
    let mut metrics = Metrics::default();
    let mut loss_sum = 0.0;
    let mut infer_seconds = 0.0;
    let mut batches = 0;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(config.batch_size) {
        let (x, y) = data.batch::<S>(chunk);
        let start = Instant::now();
        let pred = model.predict(&x)?;
        infer_seconds += start.elapsed().as_secs_f64();
        batches += 1;
        metrics.update(&pred, &y)?;
        let tape = Tape::new();
        let l = loss::loss(config.loss, tape.constant(pred), &y)?;
        loss_sum += l.value().item().as_f64() * chunk.len() as f64;
    }
    Ok(Evaluation {
        metrics,
        loss: loss_sum / data.len() as f64,
        batches,
        infer_seconds,
    })
}

/// Predictions and targets of the first test batch in long format, in the
/// standardized scale.
pub fn write_forecast_sample<S: Scalar>(
    path: &Path,
    model: &DMambaModel<S>,
    data: &WindowedDataset,
    batch_size: usize,
) -> Result<()> {
    let n = batch_size.min(data.len());
    let idx: Vec<usize> = (0..n).collect();
    let (x, y) = data.batch::<S>(&idx);
    let pred = model.predict(&x)?;
    let (t, d) = (data.pred_len(), data.dim());
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["window", "step", "channel", "prediction", "target"])?;
    for (i, (p, y)) in pred.data().iter().zip(y.data()).enumerate() {
        let (b, s, c) = (i / (t * d), (i / d) % t, i % d);
        w.write_record([
            b.to_string(),
            s.to_string(),
            c.to_string(),
            p.as_f64().to_string(),
            y.as_f64().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Full run: fit (or resume), evaluate on the test split and, with an output
/// directory, write the checkpoint, reports and forecast sample. Returns
/// `None` as the report when `stop_after_epochs` interrupted training.
pub fn train<S: Scalar>(
    config: TrainConfig,
    splits: &DataSplits,
    dataset: &str,
    opts: &TrainOptions,
) -> Result<(Option<RunReport>, Trainer<S>)> {
    let mut trainer = match &opts.resume {
        Some(path) => {
            let t = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
            if t.config.hash() != config.hash() {
                return Err(Error::Checkpoint(format!(
                    "checkpoint config hash {} differs from the requested config {}",
                    t.config.hash(),
                    config.hash()
                )));
            }
            info!("resuming after epoch {}", t.epochs_done);
            t
        }
        None => Trainer::new(config)?,
    };
    let ckpt = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(dir.join("checkpoint.bin"))
        }
        None => None,
    };
    trainer.fit(splits, ckpt.as_deref(), opts.stop_after_epochs)?;
    if !trainer.finished {
        return Ok((None, trainer));
    }
    let test = evaluate(&trainer.model, &splits.test, &trainer.config)?;
    let rep = trainer.report(dataset, &test);
    if let Some(dir) = &opts.out_dir {
        report::write_reports(dir, std::slice::from_ref(&rep))?;
        write_forecast_sample(&dir.join("forecast_sample.csv"), &trainer.model, &splits.test, trainer.config.batch_size)?;
    }
    info!("test mse {:.6} mae {:.6}", rep.test_mse, rep.test_mae);
    Ok((Some(rep), trainer))
}
