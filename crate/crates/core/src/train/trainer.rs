use std::fmt;
use std::time::Instant;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::net::ModelParams;
use crate::streamline::Tractogram;
use crate::train::adam::AdamState;
use crate::train::checkpoint::Checkpoint;
use crate::train::config::{TrainConfig, TrainSettings};
use crate::train::step::train_iteration;

/// `lr_0 * decay^floor(epoch / decay_every)`.
pub fn lr_schedule(settings: &TrainSettings, epoch: u64) -> f64 {
    let steps = (epoch / settings.decay_every) as i32;
    settings.learning_rate * settings.decay.powi(steps)
}

// splitmix64 finaliser, used to derive independent stream seeds
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    mix(mix(base ^ mix(tag)) ^ index)
}

const TAG_EPOCH: u64 = 1;
const TAG_ITERATION: u64 = 2;

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub iteration: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    pub lambda: f64,
    pub seconds: f64,
}

impl LogRecord {
    pub const HEADER: &'static str = "iter,epoch,loss_mm,lr,lambda,seconds";
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{:.3}",
            self.iteration, self.epoch, self.loss, self.lr, self.lambda, self.seconds
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub epoch: u64,
    pub mean_loss: f64,
    pub iterations: usize,
    pub failed: usize,
}

/// Owns the parameters and optimizer state for a training run over a pool
/// of subjects.
///
/// Each epoch visits every subject once as the moving side, in a shuffled
/// order, paired with a uniformly drawn different subject as the fixed side.
/// All randomness derives from the configured seed and the epoch/iteration
/// counters, so a run resumed from a checkpoint continues exactly as an
/// uninterrupted one would.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    params: ModelParams,
    opt: AdamState,
    epoch: u64,
    iteration: u64,
    pool: Vec<Tractogram>,
    started: Instant,
}

impl Trainer {
    pub fn new(config: TrainConfig, pool: Vec<Tractogram>) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(config.model, config.train.seed)?;
        let opt = AdamState::new(&params);
        Self::assemble(config, params, opt, 0, 0, pool)
    }

    pub fn resume(checkpoint: Checkpoint, pool: Vec<Tractogram>) -> Result<Self> {
        let Checkpoint {
            config,
            params,
            optimizer,
            epoch,
            iteration,
        } = checkpoint;
        Self::assemble(config, params, optimizer, epoch, iteration, pool)
    }

    fn assemble(
        config: TrainConfig,
        params: ModelParams,
        opt: AdamState,
        epoch: u64,
        iteration: u64,
        pool: Vec<Tractogram>,
    ) -> Result<Self> {
        if pool.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "training needs at least 2 subjects, got {}",
                pool.len()
            )));
        }
        let p = config.train.points;
        let pool = pool
            .iter()
            .map(|t| t.resampled(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trainer {
            config,
            params,
            opt,
            epoch,
            iteration,
            pool,
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn optimizer(&self) -> &AdamState {
        &self.opt
    }

    /// Next epoch to run.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Iterations completed (or attempted) so far.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.train.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            optimizer: self.opt.clone(),
            epoch: self.epoch,
            iteration: self.iteration,
        }
    }

    /// Ordered (moving, fixed) subject indices for `epoch`.
    pub fn epoch_pairs(&self, epoch: u64) -> Vec<(usize, usize)> {
        let n = self.pool.len();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.train.seed, TAG_EPOCH, epoch));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
            .into_iter()
            .map(|m| {
                let mut f = rng.random_range(0..n - 1);
                if f >= m {
                    f += 1;
                }
                (m, f)
            })
            .collect()
    }

    /// Runs one epoch, passing every successful iteration to `log`.
    /// Numerical failures skip the iteration with a warning; the epoch fails
    /// only if none of its iterations succeed.
    pub fn run_epoch(&mut self, mut log: impl FnMut(&LogRecord)) -> Result<EpochSummary> {
        let epoch = self.epoch;
        let lr = lr_schedule(&self.config.train, epoch);
        let pairs = self.epoch_pairs(epoch);
        let mut total = 0.0;
        let mut ok = 0usize;
        let mut last_err = None;
        for (m, f) in pairs.iter().copied() {
            let seed = derive_seed(self.config.train.seed, TAG_ITERATION, self.iteration);
            let result = train_iteration(
                &self.pool[m],
                &self.pool[f],
                &mut self.params,
                &mut self.opt,
                &self.config,
                lr,
                seed,
            );
            self.iteration += 1;
            match result {
                Ok(report) => {
                    total += report.loss;
                    ok += 1;
                    log(&LogRecord {
                        iteration: self.iteration,
                        epoch,
                        loss: report.loss,
                        lr,
                        lambda: report.lambda,
                        seconds: self.started.elapsed().as_secs_f64(),
                    });
                }
                Err(e) if e.is_numerical() => {
                    warn!("iteration {} skipped: {e}", self.iteration);
                    last_err = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        self.epoch += 1;
        if ok == 0 {
            return Err(last_err.unwrap_or_else(|| {
                Error::NonFinite(format!("epoch {epoch} produced no iterations"))
            }));
        }
        Ok(EpochSummary {
            epoch,
            mean_loss: total / ok as f64,
            iterations: ok,
            failed: pairs.len() - ok,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_closed_form() {
        let s = TrainSettings::default();
        assert_eq!(lr_schedule(&s, 0), 1e-3);
        assert_eq!(lr_schedule(&s, 9), 1e-3);
        assert_eq!(lr_schedule(&s, 10), 5e-4);
        assert_eq!(lr_schedule(&s, 25), 2.5e-4);
    }

    #[test]
    fn seeds_are_distinct() {
        let a = derive_seed(0, TAG_ITERATION, 0);
        let b = derive_seed(0, TAG_ITERATION, 1);
        let c = derive_seed(0, TAG_EPOCH, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(0, TAG_ITERATION, 0));
    }
}
