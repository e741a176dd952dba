//! RMSProp training with alternating discriminator and generator updates,
//! checkpointing and a CSV metric log.

mod checkpoint;
mod config;
mod optim;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, MAGIC,
    VERSION,
};
pub use config::{Mode, TrainConfig};
pub use optim::{rmsprop_step, rmsprop_update, RmsPropConfig, RmsPropState, RMSPROP_EPS};

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{
    crossbreed_forward, discriminator_loss, four_child_forward, generator_loss, stacked_forward,
    stacked_generator_loss, GeneratorTerms, ModelError, Net, ParamStore, Session,
};
use crate::rng::SplitMix64;
use crate::synth::{DataError, Sample};
use crate::tensor::{BnMode, Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("unknown config key `{key}` on line {line}")]
    UnknownKey { line: usize, key: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Data(String),
    #[error("gradient key set mismatch: {0}")]
    GradientKeys(String),
    #[error("non-finite {what} at step {step}")]
    NonFinite { step: u64, what: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

pub const METRICS_HEADER: &str = "step,L_rec_Au,L_rec_B0,L_gan_0,L_gan_ne0,L_null,L_par,L_D_with,L_D_without";

/// Loss terms measured during one training step (before that step's updates).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    /// 1-based index of the step.
    pub step: u64,
    pub gen: GeneratorTerms,
    pub d_with: f64,
    pub d_without: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let g = &self.gen;
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step, g.rec_au, g.rec_b0, g.gan_0, g.gan_ne0, g.null, g.par, self.d_with, self.d_without
        )
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn check_keys(grads: &BTreeMap<(Net, String), Tensor<f32>>, store: &ParamStore<f32>, nets: &[Net]) -> Result<()> {
    let expected: BTreeSet<(Net, String)> = store
        .iter_params()
        .filter(|(n, _, _)| nets.contains(n))
        .map(|(n, k, _)| (n, k.to_string()))
        .collect();
    let got: BTreeSet<(Net, String)> = grads.keys().cloned().collect();
    if got != expected {
        let stray: Vec<String> = got.difference(&expected).map(|(n, k)| format!("{n}.{k}")).collect();
        let missing: Vec<String> = expected.difference(&got).map(|(n, k)| format!("{n}.{k}")).collect();
        return Err(TrainError::GradientKeys(format!(
            "unexpected {stray:?}, missing {missing:?}"
        )));
    }
    Ok(())
}

/// Per-epoch sample order: the larger set is shuffled, a smaller set is drawn
/// with replacement to the same length.
struct EpochPlan {
    with: Vec<usize>,
    without: Vec<usize>,
    steps: u64,
    next_state: u64,
}

impl EpochPlan {
    fn new(state: u64, n_with: usize, n_without: usize, batch: usize) -> Self {
        let mut rng = SplitMix64::from_state(state);
        let len = n_with.max(n_without).max(batch);
        let mut order = |n: usize| -> Vec<usize> {
            if n == len {
                let mut v: Vec<usize> = (0..n).collect();
                rng.shuffle(&mut v);
                v
            } else {
                (0..len).map(|_| rng.below(n)).collect()
            }
        };
        let with = order(n_with);
        let without = order(n_without);
        Self {
            with,
            without,
            steps: (len / batch) as u64,
            next_state: rng.state(),
        }
    }
}

/// Mutable training state: parameters, optimizer state and data position.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    opt_g: RmsPropState<f32>,
    opt_d: RmsPropState<f32>,
    step: u64,
    rng_state: u64,
    epoch_start_step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let root = SplitMix64::new(config.seed);
        let params = ParamStore::init(&config.model(), root.fork(1).next_u64());
        let momentum = config.momentum != 0.0;
        Ok(Self {
            opt_g: RmsPropState::new(&params, &Net::GENERATOR, momentum),
            opt_d: RmsPropState::new(&params, &Net::DISCRIMINATORS, momentum),
            params,
            rng_state: root.fork(2).state(),
            epoch_start_step: 0,
            step: 0,
            config,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Self {
        Self {
            config: ck.config,
            params: ck.params,
            opt_g: ck.opt_g,
            opt_d: ck.opt_d,
            step: ck.step,
            rng_state: ck.rng_state,
            epoch_start_step: ck.epoch_start_step,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            rng_state: self.rng_state,
            epoch_start_step: self.epoch_start_step,
            params: self.params.clone(),
            opt_g: self.opt_g.clone(),
            opt_d: self.opt_d.clone(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn hp(&self) -> RmsPropConfig {
        RmsPropConfig {
            lr: self.config.lr,
            decay: self.config.rmsprop_decay,
            momentum: self.config.momentum,
            eps: RMSPROP_EPS,
        }
    }

    fn discriminator_update(&mut self, xa: &Tensor<f32>, xb: &Tensor<f32>) -> Result<(f64, f64)> {
        let (grads, updates, values) = {
            let mut g = Graph::new();
            let mut s = Session::new(
                &self.params,
                self.config.model(),
                &Net::DISCRIMINATORS,
                BnMode::Train { track_stats: false },
                BnMode::Train { track_stats: true },
            );
            let a = g.constant(xa.clone());
            let b = g.constant(xb.clone());
            let c = crossbreed_forward(&mut s, &mut g, a, b)?;
            let d = discriminator_loss(&mut s, &mut g, a, b, c.x_a0, c.x_bu)?;
            let values = d.values(&g);
            let grads = g.backward(d.total)?;
            (s.named_gradients(&grads), s.into_stat_updates(), values)
        };
        check_keys(&grads, &self.params, &Net::DISCRIMINATORS)?;
        let hp = self.hp();
        rmsprop_step(&mut self.params, &grads, &mut self.opt_d, &hp)?;
        self.params.apply_stat_updates(&updates)?;
        Ok(values)
    }

    fn generator_update(&mut self, xa: &Tensor<f32>, xb: &Tensor<f32>) -> Result<GeneratorTerms> {
        let weights = self.config.weights();
        let (grads, updates, terms) = {
            let mut g = Graph::new();
            let mut s = Session::new(
                &self.params,
                self.config.model(),
                &Net::GENERATOR,
                BnMode::Train { track_stats: true },
                BnMode::Train { track_stats: false },
            );
            let a = g.constant(xa.clone());
            let b = g.constant(xb.clone());
            let loss = match self.config.mode {
                Mode::GeneGan => {
                    let c = four_child_forward(&mut s, &mut g, a, b)?;
                    generator_loss(&mut s, &mut g, &c, a, b, &weights)?
                }
                Mode::Stacked => {
                    let c = stacked_forward(&mut s, &mut g, a, b)?;
                    stacked_generator_loss(&mut s, &mut g, &c, a, b, &weights)?
                }
            };
            let terms = loss.terms(&g);
            let grads = g.backward(loss.total)?;
            (s.named_gradients(&grads), s.into_stat_updates(), terms)
        };
        check_keys(&grads, &self.params, &Net::GENERATOR)?;
        let hp = self.hp();
        rmsprop_step(&mut self.params, &grads, &mut self.opt_g, &hp)?;
        self.params.apply_stat_updates(&updates)?;
        Ok(terms)
    }

    /// `d_steps_per_g_step` discriminator updates, then one generator update,
    /// on the same pair of batches.
    pub fn train_step(&mut self, batch_au: &Tensor<f32>, batch_b0: &Tensor<f32>) -> Result<StepMetrics> {
        if batch_au.shape() != batch_b0.shape() {
            return Err(TrainError::Data(format!(
                "batches differ in shape: {:?} vs {:?}",
                batch_au.shape(),
                batch_b0.shape()
            )));
        }
        let mut d = (0.0, 0.0);
        for _ in 0..self.config.d_steps_per_g_step {
            d = self.discriminator_update(batch_au, batch_b0)?;
        }
        let gen = self.generator_update(batch_au, batch_b0)?;
        self.step += 1;
        let finite = [gen.total, d.0, d.1].iter().all(|v| v.is_finite());
        if !finite {
            return Err(TrainError::NonFinite {
                step: self.step,
                what: "loss",
            });
        }
        Ok(StepMetrics {
            step: self.step,
            gen,
            d_with: d.0,
            d_without: d.1,
        })
    }

    fn check_data(&self, with: &[Sample], without: &[Sample]) -> Result<()> {
        let s = self.config.image_size;
        for (name, set) in [("with-object", with), ("without-object", without)] {
            if set.is_empty() {
                return Err(TrainError::Data(format!("{name} set is empty")));
            }
            if let Some((i, bad)) = set.iter().enumerate().find(|(_, x)| x.image.shape() != [3, s, s]) {
                return Err(TrainError::Data(format!(
                    "{name} sample {i} has shape {:?}, expected [3, {s}, {s}]",
                    bad.image.shape()
                )));
            }
        }
        Ok(())
    }

    /// Trains until `config.steps`, calling `on_step` after every step.
    pub fn run(
        &mut self,
        with: &[Sample],
        without: &[Sample],
        mut on_step: impl FnMut(&StepMetrics, &Trainer) -> Result<()>,
    ) -> Result<()> {
        self.check_data(with, without)?;
        let batch = self.config.batch_size;
        let mut plan = EpochPlan::new(self.rng_state, with.len(), without.len(), batch);
        while self.step < self.config.steps {
            let mut i = self.step - self.epoch_start_step;
            if i >= plan.steps {
                self.rng_state = plan.next_state;
                self.epoch_start_step = self.step;
                plan = EpochPlan::new(self.rng_state, with.len(), without.len(), batch);
                i = 0;
            }
            let range = i as usize * batch..(i as usize + 1) * batch;
            let xa = Tensor::stack(&plan.with[range.clone()].iter().map(|&j| &with[j].image).collect::<Vec<_>>())?;
            let xb = Tensor::stack(&plan.without[range].iter().map(|&j| &without[j].image).collect::<Vec<_>>())?;
            let m = self.train_step(&xa, &xb)?;
            on_step(&m, self)?;
        }
        Ok(())
    }
}

/// Result of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<StepMetrics>,
}

/// Continues `trainer` to `config.steps`. With `out_dir`, metric rows are
/// appended to `metrics.csv` (header written when the file is new),
/// intermediate checkpoints go to `step_XXXXXXXX.ggck`, and the final state to
/// `final.ggck`.
pub fn train_from(
    mut trainer: Trainer,
    with: &[Sample],
    without: &[Sample],
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&StepMetrics),
) -> Result<TrainOutcome> {
    let mut log: Option<BufWriter<File>> = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("metrics.csv");
        let fresh = !path.exists();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let mut w = BufWriter::new(file);
        if fresh {
            writeln!(w, "{METRICS_HEADER}").map_err(io_err(&path))?;
        }
        log = Some(w);
    }
    let every = trainer.config.checkpoint_every;
    let mut metrics = Vec::new();
    trainer.run(with, without, |m, t| {
        metrics.push(*m);
        progress(m);
        if let (Some(w), Some(dir)) = (log.as_mut(), out_dir) {
            writeln!(w, "{}", m.csv_row()).map_err(io_err(&dir.join("metrics.csv")))?;
            if every > 0 && m.step % every == 0 {
                w.flush().map_err(io_err(&dir.join("metrics.csv")))?;
                save_checkpoint(dir.join(format!("step_{:08}.ggck", m.step)), &t.checkpoint())?;
            }
        }
        Ok(())
    })?;
    let checkpoint = trainer.checkpoint();
    if let (Some(mut w), Some(dir)) = (log, out_dir) {
        w.flush().map_err(io_err(&dir.join("metrics.csv")))?;
        save_checkpoint(dir.join("final.ggck"), &checkpoint)?;
    }
    Ok(TrainOutcome { checkpoint, metrics })
}

/// Fresh run from `config`.
pub fn train(config: TrainConfig, with: &[Sample], without: &[Sample], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    train_from(Trainer::new(config)?, with, without, out_dir, |_| {})
}

#[cfg(test)]
mod tests;
