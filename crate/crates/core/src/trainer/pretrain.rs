use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;

use crate::align::AlignConfig;
use crate::augment::{make_view_pair, AugmentConfig, ViewPair};
use crate::data::{sample_patch, ssl_source_shape, Volume};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::networks::{init_online, target_from_online, NetworkConfig};
use crate::rng::{restore_state, save_state, stream, streams, Rng};

use super::checkpoint::Checkpoint;
use super::metrics::{CsvLog, SSL_COLUMNS};
use super::optim::LarsConfig;
use super::prefetch::Prefetch;
use super::schedule::{cosine_lr, ema_omega};
use super::ssl::{ssl_train_step, SslModel, SslState, StepMetrics, StepMode};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainPlan {
    pub net: NetworkConfig,
    pub align: AlignConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub lars: LarsConfig,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub view_shape: [usize; 3],
    pub omega_base: f64,
    pub seed: u64,
    pub prefetch: usize,
    /// Save a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    /// Write measured step times; when off the `wall_ms` column is 0.
    pub record_wall_ms: bool,
    pub mode: StepMode,
}

impl PretrainPlan {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if self.warmup_steps >= self.steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if !(0.0..=1.0).contains(&self.omega_base) {
            return Err(Error::Config("omega_base must lie in [0, 1]".into()));
        }
        self.net.encoder.check_input(self.view_shape).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model(&self) -> SslModel<'_> {
        SslModel {
            net: &self.net,
            align: &self.align,
            loss: &self.loss,
        }
    }
}

/// A batch of view pairs and the data stream position right after it.
type Batch = (Vec<ViewPair>, [u64; 7]);

fn batch_source(plan: &PretrainPlan, volumes: Arc<Vec<Volume>>, mut rng: Rng, count: u64) -> impl FnMut() -> Option<Result<Batch>> + Send {
    let source = ssl_source_shape(plan.view_shape);
    let (view, batch, augment) = (plan.view_shape, plan.batch_size, plan.augment.clone());
    let mut made = 0;
    move || {
        if made == count {
            return None;
        }
        made += 1;
        let pairs = (0..batch)
            .map(|_| {
                let v = &volumes[rng.random_range(0..volumes.len())];
                let patch = sample_patch(v, source, &mut rng)?;
                make_view_pair(&patch.values, view, &augment, &mut rng)
            })
            .collect::<Result<Vec<_>>>();
        Some(pairs.map(|p| (p, save_state(&rng))))
    }
}

pub struct PretrainOutcome {
    pub state: SslState,
    pub metrics: Vec<StepMetrics>,
    pub last_checkpoint: Option<PathBuf>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("ckpt_{step:06}.pgl"))
}

/// Run SSL pretraining on preprocessed volumes. With `out_dir` the run
/// writes `metrics.csv` and checkpoints there. `resume` continues from a
/// checkpoint of the same plan. `observer` sees every step after its update.
pub fn pretrain(
    plan: &PretrainPlan,
    volumes: Vec<Volume>,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
    observer: &mut dyn FnMut(&StepMetrics, &SslState),
) -> Result<PretrainOutcome> {
    plan.validate()?;
    if volumes.is_empty() {
        return Err(Error::Invalid("no pretraining volumes".into()));
    }
    let online = init_online::<f32>(&plan.net, &mut stream(plan.seed, streams::INIT))?;
    let (mut state, data_rng) = match resume {
        None => (SslState::new(online, plan.lars), stream(plan.seed, streams::DATA)),
        Some(path) => {
            let ck = Checkpoint::load(path, &online, &target_from_online(&online))?;
            let mut s = SslState::new(ck.online, plan.lars);
            s.target = ck.target;
            s.opt.buffers = ck.opt;
            s.step = ck.step;
            (s, restore_state(&ck.rng))
        }
    };
    let mut csv = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            Some(if resume.is_some() && path.exists() {
                CsvLog::append(&path, SSL_COLUMNS.len())?
            } else {
                CsvLog::create(&path, &SSL_COLUMNS)?
            })
        }
        None => None,
    };
    let remaining = plan.steps.saturating_sub(state.step);
    let batches = Prefetch::new(
        plan.prefetch,
        batch_source(plan, Arc::new(volumes), data_rng, remaining),
    );
    let mut metrics = Vec::with_capacity(remaining as usize);
    let mut last_checkpoint = None;
    for item in batches {
        let (batch, rng_state) = item?;
        let started = Instant::now();
        let lr = cosine_lr(state.step, plan.steps, plan.warmup_steps, plan.base_lr);
        let omega = ema_omega(state.step, plan.steps, plan.omega_base);
        let m = ssl_train_step(&mut state, &batch, plan.model(), lr, omega, plan.mode)?;
        let wall_ms = if plan.record_wall_ms {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        if let Some(csv) = csv.as_mut() {
            csv.row(&[
                m.step.to_string(),
                m.loss.to_string(),
                m.lr.to_string(),
                m.omega.to_string(),
                m.skipped_pairs.to_string(),
                wall_ms.to_string(),
            ])?;
        }
        observer(&m, &state);
        metrics.push(m);
        let due = plan.checkpoint_every > 0 && state.step % plan.checkpoint_every == 0;
        if let Some(dir) = out_dir {
            if due || state.step == plan.steps {
                let path = checkpoint_path(dir, state.step);
                Checkpoint {
                    online: state.online.clone(),
                    target: state.target.clone(),
                    opt: state.opt.buffers.clone(),
                    step: state.step,
                    rng: rng_state,
                }
                .save(&path)?;
                last_checkpoint = Some(path);
            }
        }
    }
    Ok(PretrainOutcome {
        state,
        metrics,
        last_checkpoint,
    })
}
