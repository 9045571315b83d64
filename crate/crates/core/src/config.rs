//! Run configuration: `[section]` headers followed by `key = value` lines.
//! `#` starts a comment. Every key has a default, so an empty file is a
//! valid desk-scale configuration. Unknown sections and keys are errors.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::align::AlignConfig;
use crate::augment::AugmentConfig;
use crate::data::{SynthSpec, HU_CLIP};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::networks::{NetworkConfig, PredictorMode};
use crate::trainer::{FinetunePlan, LarsConfig, PretrainPlan, SegLoss, StepMode};

#[derive(Clone, Debug, PartialEq)]
pub struct DataSection {
    /// Manifest paths; empty means unset.
    pub pretrain: String,
    pub train: String,
    pub val: String,
    pub test: String,
    pub clip_lo: f64,
    pub clip_hi: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            pretrain: String::new(),
            train: String::new(),
            val: String::new(),
            test: String::new(),
            clip_lo: HU_CLIP.0 as f64,
            clip_hi: HU_CLIP.1 as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSection {
    /// `desk` or `full`.
    pub preset: String,
    pub predictor: PredictorMode,
}

impl Default for NetworkSection {
    fn default() -> Self {
        NetworkSection {
            preset: "desk".into(),
            predictor: PredictorMode::Mlp,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerSection {
    pub base_lr: f64,
    pub batch_size: usize,
    pub warmup_steps: u64,
    pub steps: u64,
    pub view_shape: [usize; 3],
    pub omega_base: f64,
    pub seed: u64,
    pub prefetch: usize,
    pub checkpoint_every: u64,
    pub step_mode: StepMode,
    pub lars_trust: f64,
    pub lars_weight_decay: f64,
    pub lars_momentum: f64,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let lars = LarsConfig::default();
        TrainerSection {
            base_lr: 0.2,
            batch_size: 4,
            warmup_steps: 20,
            steps: 200,
            view_shape: [8, 32, 32],
            omega_base: 0.996,
            seed: 0,
            prefetch: 2,
            checkpoint_every: 50,
            step_mode: StepMode::Fused,
            lars_trust: lars.trust,
            lars_weight_decay: lars.weight_decay,
            lars_momentum: lars.momentum,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneSection {
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
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            num_classes: 3,
            loss: SegLoss::Multiclass,
            steps: 300,
            batch_size: 2,
            patch_shape: [8, 32, 32],
            base_lr: 0.01,
            warmup_steps: 0,
            momentum: 0.9,
            weight_decay: 0.0,
            freeze_encoder: false,
            eval_every: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputSection {
    pub dir: String,
    /// Measured step times in the metrics CSVs; when off `wall_ms` is 0 and
    /// reruns produce identical files.
    pub record_wall_ms: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "runs/pgl".into(),
            record_wall_ms: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub data: DataSection,
    pub augment: AugmentConfig,
    pub align: AlignConfig,
    pub network: NetworkSection,
    pub trainer: TrainerSection,
    pub finetune: FinetuneSection,
    pub loss: LossConfig,
    pub output: OutputSection,
    pub synth: SynthSpec,
}

trait Field {
    fn set(&mut self, s: &str) -> std::result::Result<(), String>;
    fn show(&self) -> String;
}

macro_rules! parsed_field {
    ($($t:ty),*) => {$(
        impl Field for $t {
            fn set(&mut self, s: &str) -> std::result::Result<(), String> {
                *self = s.parse().map_err(|e| format!("{e}"))?;
                Ok(())
            }
            fn show(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

parsed_field!(f64, usize, u64, bool, String);

impl Field for [usize; 3] {
    fn set(&mut self, s: &str) -> std::result::Result<(), String> {
        let parts: Vec<&str> = s.split('x').map(str::trim).collect();
        if parts.len() != 3 {
            return Err("expected DxHxW".into());
        }
        for (d, p) in self.iter_mut().zip(parts) {
            *d = p.parse().map_err(|e| format!("{e}"))?;
        }
        Ok(())
    }
    fn show(&self) -> String {
        format!("{}x{}x{}", self[0], self[1], self[2])
    }
}

impl Field for Vec<f64> {
    fn set(&mut self, s: &str) -> std::result::Result<(), String> {
        *self = s
            .split(',')
            .map(|p| p.trim().parse().map_err(|e| format!("{e}")))
            .collect::<std::result::Result<_, _>>()?;
        Ok(())
    }
    fn show(&self) -> String {
        self.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
    }
}

macro_rules! enum_field {
    ($t:ty, $($name:literal => $v:expr),*) => {
        impl Field for $t {
            fn set(&mut self, s: &str) -> std::result::Result<(), String> {
                *self = match s {
                    $($name => $v,)*
                    _ => return Err(format!("expected one of: {}", [$($name),*].join(", "))),
                };
                Ok(())
            }
            fn show(&self) -> String {
                $(if *self == $v { return $name.to_string(); })*
                unreachable!()
            }
        }
    };
}

enum_field!(PredictorMode, "mlp" => PredictorMode::Mlp, "identity" => PredictorMode::Identity);
enum_field!(StepMode, "fused" => StepMode::Fused, "sequential" => StepMode::Sequential);
enum_field!(SegLoss, "multiclass" => SegLoss::Multiclass, "binary" => SegLoss::Binary);

type Visitor<'a> = dyn FnMut(&str, &str, &mut dyn Field) + 'a;

impl RunConfig {
    /// Every key in file order.
    fn visit(&mut self, f: &mut Visitor) {
        let d = &mut self.data;
        f("data", "pretrain", &mut d.pretrain);
        f("data", "train", &mut d.train);
        f("data", "val", &mut d.val);
        f("data", "test", &mut d.test);
        f("data", "clip_lo", &mut d.clip_lo);
        f("data", "clip_hi", &mut d.clip_hi);
        let a = &mut self.augment;
        f("augment", "scale_min", &mut a.scale_min);
        f("augment", "scale_max", &mut a.scale_max);
        f("augment", "min_overlap", &mut a.min_overlap);
        f("augment", "max_attempts", &mut a.max_attempts);
        f("augment", "flip_prob", &mut a.flip_prob);
        f("augment", "intensity", &mut a.intensity);
        f("augment", "noise_prob", &mut a.noise_prob);
        f("augment", "noise_var_max", &mut a.noise_var_max);
        f("augment", "blur_prob", &mut a.blur_prob);
        f("augment", "blur_sigma_min", &mut a.blur_sigma_min);
        f("augment", "blur_sigma_max", &mut a.blur_sigma_max);
        f("augment", "brightness_prob", &mut a.brightness_prob);
        f("augment", "brightness_min", &mut a.brightness_min);
        f("augment", "brightness_max", &mut a.brightness_max);
        f("augment", "gamma_prob", &mut a.gamma_prob);
        f("augment", "gamma_min", &mut a.gamma_min);
        f("augment", "gamma_max", &mut a.gamma_max);
        let al = &mut self.align;
        f("align", "use_flipalign", &mut al.use_flipalign);
        f("align", "use_csalign", &mut al.use_csalign);
        f("align", "samples_per_bin", &mut al.samples_per_bin);
        f("network", "preset", &mut self.network.preset);
        f("network", "predictor", &mut self.network.predictor);
        let t = &mut self.trainer;
        f("trainer", "base_lr", &mut t.base_lr);
        f("trainer", "batch_size", &mut t.batch_size);
        f("trainer", "warmup_steps", &mut t.warmup_steps);
        f("trainer", "steps", &mut t.steps);
        f("trainer", "view_shape", &mut t.view_shape);
        f("trainer", "omega_base", &mut t.omega_base);
        f("trainer", "seed", &mut t.seed);
        f("trainer", "prefetch", &mut t.prefetch);
        f("trainer", "checkpoint_every", &mut t.checkpoint_every);
        f("trainer", "step_mode", &mut t.step_mode);
        f("trainer", "lars_trust", &mut t.lars_trust);
        f("trainer", "lars_weight_decay", &mut t.lars_weight_decay);
        f("trainer", "lars_momentum", &mut t.lars_momentum);
        let ft = &mut self.finetune;
        f("finetune", "num_classes", &mut ft.num_classes);
        f("finetune", "loss", &mut ft.loss);
        f("finetune", "steps", &mut ft.steps);
        f("finetune", "batch_size", &mut ft.batch_size);
        f("finetune", "patch_shape", &mut ft.patch_shape);
        f("finetune", "base_lr", &mut ft.base_lr);
        f("finetune", "warmup_steps", &mut ft.warmup_steps);
        f("finetune", "momentum", &mut ft.momentum);
        f("finetune", "weight_decay", &mut ft.weight_decay);
        f("finetune", "freeze_encoder", &mut ft.freeze_encoder);
        f("finetune", "eval_every", &mut ft.eval_every);
        f("finetune", "seed", &mut ft.seed);
        let l = &mut self.loss;
        f("loss", "norm_eps", &mut l.norm_eps);
        f("loss", "dice_eps", &mut l.dice_eps);
        f("loss", "normalize_channels", &mut l.normalize_channels);
        f("output", "dir", &mut self.output.dir);
        f("output", "record_wall_ms", &mut self.output.record_wall_ms);
        let s = &mut self.synth;
        f("synth", "dims", &mut s.dims);
        f("synth", "num_classes", &mut s.num_classes);
        f("synth", "objects_min", &mut s.objects_min);
        f("synth", "objects_max", &mut s.objects_max);
        f("synth", "class_mean", &mut s.class_mean);
        f("synth", "class_std", &mut s.class_std);
        f("synth", "radius_min", &mut s.radius_min);
        f("synth", "radius_max", &mut s.radius_max);
    }

    /// Set one key from its text form.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let mut outcome = None;
        self.visit(&mut |s, k, field| {
            if s == section && k == key {
                outcome = Some(field.set(value));
            }
        });
        match outcome {
            None => Err(Error::Config(format!("unknown key `{section}.{key}`"))),
            Some(Err(e)) => Err(Error::Config(format!("`{section}.{key} = {value}`: {e}"))),
            Some(Ok(())) => Ok(()),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("line {}: {msg}", i + 1));
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| at(format!("bad section header `{line}`")))?;
                section = Some(name.trim().to_string());
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| at(format!("expected key = value, got `{line}`")))?;
            let s = section.as_deref().ok_or_else(|| at("key before any section header".into()))?;
            cfg.set(s, k.trim(), v.trim()).map_err(|e| at(e.to_string()))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Apply `section.key=value` overrides (leading dashes allowed).
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref().trim_start_matches('-');
            let (path, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not section.key=value")))?;
            let (section, key) = path
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override `{path}` is not section.key")))?;
            self.set(section, key, value)?;
        }
        Ok(())
    }

    /// The fully resolved configuration; parsing it yields `self` again.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut current = String::new();
        self.clone().visit(&mut |s, k, field| {
            if s != current {
                if !current.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{s}]");
                current = s.to_string();
            }
            let _ = writeln!(out, "{k} = {}", field.show());
        });
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).map_err(|e| Error::io(path, e))
    }

    pub fn network(&self) -> Result<NetworkConfig> {
        let mut net = NetworkConfig::preset(&self.network.preset)?;
        net.predictor_mode = self.network.predictor;
        Ok(net)
    }

    pub fn output_dir(&self) -> PathBuf {
        PathBuf::from(&self.output.dir)
    }

    pub fn pretrain_plan(&self) -> Result<PretrainPlan> {
        let t = &self.trainer;
        let plan = PretrainPlan {
            net: self.network()?,
            align: self.align,
            loss: self.loss,
            augment: self.augment.clone(),
            lars: LarsConfig {
                trust: t.lars_trust,
                weight_decay: t.lars_weight_decay,
                momentum: t.lars_momentum,
            },
            base_lr: t.base_lr,
            warmup_steps: t.warmup_steps,
            steps: t.steps,
            batch_size: t.batch_size,
            view_shape: t.view_shape,
            omega_base: t.omega_base,
            seed: t.seed,
            prefetch: t.prefetch,
            checkpoint_every: t.checkpoint_every,
            record_wall_ms: self.output.record_wall_ms,
            mode: t.step_mode,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn finetune_plan(&self) -> Result<FinetunePlan> {
        let f = &self.finetune;
        let plan = FinetunePlan {
            net: self.network()?,
            num_classes: f.num_classes,
            loss: f.loss,
            steps: f.steps,
            batch_size: f.batch_size,
            patch_shape: f.patch_shape,
            base_lr: f.base_lr,
            warmup_steps: f.warmup_steps,
            momentum: f.momentum,
            weight_decay: f.weight_decay,
            freeze_encoder: f.freeze_encoder,
            dice_eps: self.loss.dice_eps,
            seed: f.seed,
            eval_every: f.eval_every,
            prefetch: self.trainer.prefetch,
            record_wall_ms: self.output.record_wall_ms,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn clip(&self) -> Result<(f32, f32)> {
        let (lo, hi) = (self.data.clip_lo as f32, self.data.clip_hi as f32);
        if !(lo < hi) {
            return Err(Error::Config(format!("data.clip_lo {lo} must be below clip_hi {hi}")));
        }
        Ok((lo, hi))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(&["--trainer.steps=7", "align.use_csalign=false", "synth.class_mean=1.5,-2,3e10"])
            .unwrap();
        let back = RunConfig::parse(&cfg.render()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.trainer.steps, 7);
        assert!(!back.align.use_csalign);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::parse("[trainer]\nstepz = 3\n").is_err());
        assert!(RunConfig::parse("[nope]\nsteps = 3\n").is_err());
        assert!(RunConfig::parse("steps = 3\n").is_err());
        assert!(RunConfig::parse("[trainer]\nsteps = -3\n").is_err());
        assert!(RunConfig::parse("[trainer]\nstep_mode = eager\n").is_err());
        let cfg = RunConfig::parse("# comment\n[trainer]\nsteps = 3 # trailing\nview_shape = 4x16x16\n").unwrap();
        assert_eq!(cfg.trainer.view_shape, [4, 16, 16]);
    }

    #[test]
    fn defaults_make_valid_plans() {
        let cfg = RunConfig::default();
        cfg.pretrain_plan().unwrap();
        cfg.finetune_plan().unwrap();
    }
}
