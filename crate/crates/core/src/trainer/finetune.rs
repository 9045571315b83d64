use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;

use crate::data::{sample_patch, Volume};
use crate::error::{Error, Result};
use crate::loss::{dice_ce_binary, dice_ce_multiclass};
use crate::networks::{init_segmentation, segment, Bound, NetworkConfig, ParamStore, ENCODER};
use crate::rng::{stream, streams, Rng};
use crate::tensor::{Tape, Tensor};

use super::checkpoint::{store_entries, write_entries};
use super::eval::{evaluate, one_hot, SegReport};
use super::metrics::CsvLog;
use super::optim::Sgd;
use super::prefetch::Prefetch;
use super::schedule::cosine_lr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegLoss {
    /// Softmax over `num_classes` logits.
    Multiclass,
    /// One sigmoid logit for foreground (label > 0) vs background.
    Binary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetunePlan {
    pub net: NetworkConfig,
    pub num_classes: usize,
    pub loss: SegLoss,
    pub steps: u64,
    pub batch_size: usize,
    pub patch_shape: [usize; 3],
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub freeze_encoder: bool,
    pub dice_eps: f64,
    pub seed: u64,
    /// Validate every this many steps (0: only at the end).
    pub eval_every: u64,
    pub prefetch: usize,
    pub record_wall_ms: bool,
}

impl FinetunePlan {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("finetune steps and batch_size must be positive".into()));
        }
        if self.warmup_steps >= self.steps {
            return Err(Error::Config("finetune warmup_steps must be below steps".into()));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(Error::Config("num_classes must lie in [2, 256]".into()));
        }
        if self.loss == SegLoss::Binary && self.num_classes != 2 {
            return Err(Error::Config("binary loss needs num_classes = 2".into()));
        }
        self.net.encoder.check_input(self.patch_shape).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn head_channels(&self) -> usize {
        match self.loss {
            SegLoss::Multiclass => self.num_classes,
            SegLoss::Binary => 1,
        }
    }

    /// Report classes: binary runs score background and foreground.
    pub fn report_classes(&self) -> usize {
        self.num_classes
    }
}

pub enum EncoderInit<'a> {
    Random,
    /// A store holding `encoder.*` entries, such as a pretrained online store.
    Pretrained(&'a ParamStore<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

pub struct FinetuneOutcome {
    pub params: ParamStore<f32>,
    pub report: SegReport,
    pub metrics: Vec<FinetuneMetrics>,
}

/// The segmentation store a fine-tuning run starts from.
pub fn initial_params(plan: &FinetunePlan, init: &EncoderInit) -> Result<ParamStore<f32>> {
    let mut params = init_segmentation(&plan.net, plan.head_channels(), &mut stream(plan.seed, streams::INIT))?;
    if let EncoderInit::Pretrained(src) = init {
        params.copy_prefix_from(src, ENCODER)?;
    }
    Ok(params)
}

pub fn check_labels(vols: &[Volume], classes: usize) -> Result<()> {
    for v in vols {
        let labels = v
            .labels()
            .ok_or_else(|| Error::Invalid(format!("volume `{}` has no labels", v.provenance)))?;
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Invalid(format!(
                "volume `{}` has label {bad}, but num_classes is {classes}",
                v.provenance
            )));
        }
    }
    Ok(())
}

type LabeledBatch = (Tensor<f32>, Vec<Vec<u8>>);

fn batch_source(plan: &FinetunePlan, vols: Arc<Vec<Volume>>, mut rng: Rng) -> impl FnMut() -> Option<Result<LabeledBatch>> + Send {
    let (shape, batch, steps) = (plan.patch_shape, plan.batch_size, plan.steps);
    let mut made = 0;
    move || {
        if made == steps {
            return None;
        }
        made += 1;
        let mut xs = Vec::with_capacity(batch);
        let mut ls = Vec::with_capacity(batch);
        for _ in 0..batch {
            let v = &vols[rng.random_range(0..vols.len())];
            let p = match sample_patch(v, shape, &mut rng) {
                Ok(p) => p,
                Err(e) => return Some(Err(e)),
            };
            xs.push(p.values.reshape([vec![1], shape.to_vec()].concat()).expect("one channel"));
            ls.push(p.labels.expect("labels checked"));
        }
        Some(Tensor::stack(&xs).map(|x| (x, ls)))
    }
}

fn val_header(classes: usize) -> Vec<String> {
    let mut h = vec!["step".to_string(), "mean_dice".to_string(), "mean_iou".to_string()];
    h.extend((0..classes).map(|c| format!("dice_{c}")));
    h
}

/// Fine-tune a segmentation network on preprocessed labeled volumes and
/// score it on `val`. With `out_dir` the run writes `metrics.csv`,
/// `val.csv` and the final weights (`seg.pgl`).
pub fn finetune(plan: &FinetunePlan, train: Vec<Volume>, val: &[Volume], init: EncoderInit, out_dir: Option<&Path>) -> Result<FinetuneOutcome> {
    plan.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Invalid("fine-tuning needs training and validation volumes".into()));
    }
    check_labels(&train, plan.num_classes)?;
    check_labels(val, plan.num_classes)?;
    let mut params = initial_params(plan, &init)?;
    let mut opt = Sgd::new(plan.momentum, plan.weight_decay);
    let (mut csv, mut val_csv) = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let header = val_header(plan.report_classes());
            let header: Vec<&str> = header.iter().map(String::as_str).collect();
            (
                Some(CsvLog::create(dir.join("metrics.csv"), &["step", "loss", "lr", "wall_ms"])?),
                Some(CsvLog::create(dir.join("val.csv"), &header)?),
            )
        }
        None => (None, None),
    };
    let batches = Prefetch::new(
        plan.prefetch,
        batch_source(plan, Arc::new(train), stream(plan.seed, streams::FINETUNE)),
    );
    let frozen = plan.freeze_encoder;
    let mut metrics = Vec::with_capacity(plan.steps as usize);
    let mut report = None;
    for (step, item) in (0u64..).zip(batches) {
        let (x, labels) = item?;
        let started = Instant::now();
        let lr = cosine_lr(step, plan.steps, plan.warmup_steps, plan.base_lr);
        let mut tape = Tape::new();
        let mut b = Bound::bind(&mut tape, &params, true, |k| !(frozen && k.starts_with(ENCODER)));
        if frozen {
            b.eval_prefixes.push(ENCODER.to_string());
        }
        let xv = tape.constant(x);
        let logits = segment(&mut tape, &mut b, xv, &plan.net)?;
        let label_refs: Vec<&[u8]> = labels.iter().map(Vec::as_slice).collect();
        let loss = match plan.loss {
            SegLoss::Multiclass => {
                let prob = tape.softmax_channels(logits)?;
                let gt = tape.constant(one_hot(&label_refs, plan.patch_shape, plan.num_classes)?);
                dice_ce_multiclass(&mut tape, prob, gt, plan.dice_eps, plan.num_classes)?
            }
            SegLoss::Binary => {
                let prob = tape.sigmoid(logits);
                let fg: Vec<f32> = labels.iter().flatten().map(|&l| (l > 0) as u8 as f32).collect();
                let gt = tape.constant(Tensor::new(tape.shape(prob).to_vec(), fg)?);
                dice_ce_binary(&mut tape, prob, gt, plan.dice_eps)?
            }
        };
        let value = tape.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { name: "finetune loss".into() });
        }
        tape.backward(loss)?;
        let grads = b.grads(&tape);
        b.commit(&mut params)?;
        opt.step(&mut params, &grads, lr)?;
        let wall_ms = if plan.record_wall_ms {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        if let Some(csv) = csv.as_mut() {
            csv.row(&[step.to_string(), value.to_string(), lr.to_string(), wall_ms.to_string()])?;
        }
        metrics.push(FinetuneMetrics { step, loss: value, lr });
        let done = step + 1;
        if done == plan.steps || (plan.eval_every > 0 && done % plan.eval_every == 0) {
            let r = evaluate(&params, &plan.net, val, plan.patch_shape, plan.report_classes())?;
            if let Some(v) = val_csv.as_mut() {
                let mut row = vec![done.to_string(), r.mean_dice().to_string(), r.mean_iou().to_string()];
                row.extend(r.dice.iter().map(f64::to_string));
                v.row(&row)?;
            }
            report = Some(r);
        }
    }
    if let Some(dir) = out_dir {
        write_entries(&dir.join("seg.pgl"), &store_entries("seg/", &params))?;
    }
    Ok(FinetuneOutcome {
        params,
        report: report.expect("at least one evaluation"),
        metrics,
    })
}
