use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffnet::{adam_update, save_params, AdamConfig, AdamState, ParamGrads, ParameterSet};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub adam: AdamConfig,
    /// Test-loss evaluation (and checkpoint) cadence in iterations.
    pub eval_every: usize,
    pub seed: u64,
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { iterations: 1000, adam: AdamConfig::default(), eval_every: 1000, seed: 0, checkpoint: None }
    }
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub iteration: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainRecord {
    pub seed: u64,
    pub iterations: usize,
    /// Training loss before each update.
    pub train_loss: Vec<f64>,
    pub checkpoints: Vec<Checkpoint>,
    pub wall_ms: f64,
}

impl TrainRecord {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.train_loss.last().copied()
    }

    /// `iteration,train_loss,test_loss`, one row per checkpoint. Wall times
    /// stay out of the CSV so that reruns reproduce it byte for byte.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iteration", "train_loss", "test_loss"])?;
        for c in &self.checkpoints {
            out.write_record([c.iteration.to_string(), c.train_loss.to_string(), c.test_loss.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Adam loop over `objective(params, iteration) -> (loss, grads)`.
///
/// `test` is evaluated every `eval_every` iterations and after the last one;
/// parameters are checkpointed at the same points when a path is set. A
/// non-finite training loss stops the run with [`Error::Diverged`].
pub fn train<T, F, G>(params: &mut ParameterSet<T>, cfg: &TrainConfig, mut objective: F, mut test: G) -> Result<TrainRecord>
where
    T: Real,
    F: FnMut(&ParameterSet<T>, usize) -> Result<(T, ParamGrads<T>)>,
    G: FnMut(&ParameterSet<T>) -> Result<T>,
{
    let start = Instant::now();
    let mut state = AdamState::new(params);
    let mut record = TrainRecord { seed: cfg.seed, iterations: cfg.iterations, ..Default::default() };
    let every = cfg.eval_every.max(1);
    for it in 0..cfg.iterations {
        let (loss, grads) = objective(params, it)?;
        let lv = loss.as_f64();
        if !lv.is_finite() {
            return Err(Error::Diverged { iteration: it, loss: lv });
        }
        record.train_loss.push(lv);
        adam_update(params, &grads, &mut state, &cfg.adam);
        let done = it + 1;
        if done % every == 0 || done == cfg.iterations {
            let test_loss = test(params)?.as_f64();
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            record.checkpoints.push(Checkpoint { iteration: done, train_loss: lv, test_loss, wall_ms });
            if let Some(path) = &cfg.checkpoint {
                save_params(&params.cast::<f64>(), path)?;
            }
        }
    }
    record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(record)
}
