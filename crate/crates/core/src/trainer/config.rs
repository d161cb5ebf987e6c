use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::datagen::AugmentPolicy;
use crate::error::{MoproError, Result};
use crate::model::ModelConfig;
use crate::settings::{Entry, Settings, SettingsWriter};

/// Component switches for the ablation study. Independent of each other.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Drop the prototypical contrastive term from the loss.
    pub disable_pro: bool,
    /// Drop the instance contrastive term from the loss.
    pub disable_ins: bool,
    /// Blend weight 1: correction uses classifier probabilities only.
    pub force_alpha_1: bool,
    /// Keep training on the given labels after warm-up; no correction.
    pub fixed_labels: bool,
}

/// Named ablation presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    WoPro,
    WoIns,
    WoS,
    CeOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::WoPro, Ablation::WoIns, Ablation::WoS, Ablation::CeOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::WoPro => "wo_pro",
            Ablation::WoIns => "wo_ins",
            Ablation::WoS => "wo_s",
            Ablation::CeOnly => "ce_only",
        }
    }

    /// `ce_only` switches off every component and lifts the threshold above
    /// 1 so the arg-max rule can never fire.
    pub fn apply(self, config: &mut TrainConfig) {
        let flags = &mut config.ablation;
        match self {
            Ablation::WoPro => flags.disable_pro = true,
            Ablation::WoIns => flags.disable_ins = true,
            Ablation::WoS => flags.force_alpha_1 = true,
            Ablation::CeOnly => {
                flags.disable_pro = true;
                flags.disable_ins = true;
                flags.force_alpha_1 = true;
                flags.fixed_labels = true;
                config.threshold = 1.01;
            }
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = MoproError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace("w/o_", "wo_").as_str() {
            "wo_pro" => Ok(Ablation::WoPro),
            "wo_ins" => Ok(Ablation::WoIns),
            "wo_s" => Ok(Ablation::WoS),
            "ce_only" => Ok(Ablation::CeOnly),
            _ => Err(MoproError::config(
                "ablate",
                format!("`{s}` is not one of wo_pro|wo_ins|wo_s|ce_only"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub tau: f64,
    pub alpha: f64,
    pub threshold: f64,
    /// Momentum of both the encoder twin and the prototypes.
    pub momentum: f64,
    pub queue_size: usize,
    pub lambda_pro: f64,
    pub lambda_ins: f64,
    pub warmup_epochs: usize,
    /// Total epochs, warm-up included.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    /// `None` means 2/3 and 8/9 of `epochs`.
    pub lr_milestones: Option<Vec<usize>>,
    pub lr_decay: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub weak: AugmentPolicy,
    pub strong: AugmentPolicy,
    pub hidden: Vec<usize>,
    pub repr_dim: usize,
    pub proj_hidden: Option<usize>,
    pub embed_dim: usize,
    pub renormalize_prototypes: bool,
    pub ablation: AblationFlags,
    /// Neighbours for the per-epoch k-NN probe.
    pub knn_k: usize,
    pub probe_reference: usize,
    pub probe_queries: usize,
    pub finetune: bool,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    /// Worker threads for probes. Training itself is always sequential.
    pub threads: usize,
    /// Record the per-batch operation sequence.
    pub trace: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.1,
            alpha: 0.5,
            threshold: 0.8,
            momentum: 0.999,
            queue_size: 1024,
            lambda_pro: 1.0,
            lambda_ins: 1.0,
            warmup_epochs: 10,
            epochs: 60,
            batch_size: 64,
            lr: 0.025,
            lr_milestones: None,
            lr_decay: 0.1,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            weak: AugmentPolicy::weak(0.5),
            strong: AugmentPolicy::strong(1.0, 0.5, (0.8, 1.2)),
            hidden: vec![128, 128],
            repr_dim: 64,
            proj_hidden: None,
            embed_dim: 16,
            renormalize_prototypes: true,
            ablation: AblationFlags::default(),
            knn_k: 5,
            probe_reference: 1000,
            probe_queries: 500,
            finetune: false,
            finetune_epochs: 10,
            finetune_lr: 0.1,
            threads: 1,
            trace: false,
        }
    }
}

fn check(ok: bool, field: &str, msg: impl Into<String>) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(MoproError::config(field, msg))
    }
}

impl TrainConfig {
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        ablation.apply(&mut self);
        self
    }

    pub fn model_config(&self, input_dim: usize, classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden: self.hidden.clone(),
            repr_dim: self.repr_dim,
            proj_hidden: self.proj_hidden,
            embed_dim: self.embed_dim,
            classes,
        }
    }

    pub fn milestones(&self) -> Vec<usize> {
        self.lr_milestones.clone().unwrap_or_else(|| {
            let e = self.epochs as f64;
            vec![(e * 2.0 / 3.0).round() as usize, (e * 8.0 / 9.0).round() as usize]
        })
    }

    /// Learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones().iter().filter(|&&m| epoch >= m).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }

    /// Blend weight actually used by the correction rule.
    pub fn effective_alpha(&self) -> f64 {
        if self.ablation.force_alpha_1 {
            1.0
        } else {
            self.alpha
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        check(self.tau > 0.0 && self.tau.is_finite(), "tau", format!("{} must be > 0", self.tau))?;
        check(
            (0.0..=1.0).contains(&self.alpha),
            "alpha",
            format!("{} is outside [0, 1]", self.alpha),
        )?;
        let floor = 1.0 / classes.max(1) as f64;
        // `fixed_labels` runs never harden labels, so the ce_only threshold
        // of 1.01 is allowed there.
        let ceiling = if self.ablation.fixed_labels { f64::INFINITY } else { 1.0 };
        check(
            self.threshold > floor && self.threshold <= ceiling,
            "threshold",
            format!("{} is outside (1/K, 1] = ({floor}, 1]", self.threshold),
        )?;
        check(
            (0.0..1.0).contains(&self.momentum),
            "momentum",
            format!("{} is outside [0, 1)", self.momentum),
        )?;
        check(self.queue_size > 0, "queue_size", "must be positive")?;
        check(self.batch_size > 0, "batch_size", "must be positive")?;
        check(
            self.epochs >= self.warmup_epochs,
            "epochs",
            format!("{} is fewer than warmup_epochs = {}", self.epochs, self.warmup_epochs),
        )?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be > 0")?;
        check(self.lr_decay > 0.0, "lr_decay", "must be > 0")?;
        check((0.0..1.0).contains(&self.sgd_momentum), "sgd_momentum", "must be in [0, 1)")?;
        check(self.weight_decay >= 0.0, "weight_decay", "must be >= 0")?;
        check(self.lambda_pro >= 0.0, "lambda_pro", "must be >= 0")?;
        check(self.lambda_ins >= 0.0, "lambda_ins", "must be >= 0")?;
        check(!self.hidden.is_empty() && self.hidden.iter().all(|&h| h > 0), "hidden", "need positive widths")?;
        check(self.repr_dim > 0 && self.embed_dim > 0, "embed_dim", "dimensions must be positive")?;
        check(self.knn_k % 2 == 1, "knn_k", format!("{} must be odd", self.knn_k))?;
        check(self.finetune_lr > 0.0, "finetune_lr", "must be > 0")?;
        self.weak.validate()?;
        self.strong.validate()?;
        check(
            self.weak.sigma < self.strong.sigma,
            "augment",
            format!(
                "weak sigma {} must be below strong sigma {}",
                self.weak.sigma, self.strong.sigma
            ),
        )
    }

    /// Render as `key = value` sections. Floats use the shortest
    /// round-trip form, so parsing the text back is exact.
    pub fn write_settings(&self, w: &mut SettingsWriter) {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(", ");
        w.section("train")
            .kv("tau", self.tau)
            .kv("alpha", self.alpha)
            .kv("threshold", self.threshold)
            .kv("momentum", self.momentum)
            .kv("queue_size", self.queue_size)
            .kv("lambda_pro", self.lambda_pro)
            .kv("lambda_ins", self.lambda_ins)
            .kv("warmup_epochs", self.warmup_epochs)
            .kv("epochs", self.epochs)
            .kv("batch_size", self.batch_size)
            .kv("lr", self.lr)
            .kv("lr_milestones", self.lr_milestones.as_deref().map_or("auto".into(), list))
            .kv("lr_decay", self.lr_decay)
            .kv("sgd_momentum", self.sgd_momentum)
            .kv("weight_decay", self.weight_decay)
            .kv("seed", self.seed)
            .kv("renormalize_prototypes", self.renormalize_prototypes)
            .kv("threads", self.threads)
            .kv("trace", self.trace);
        w.section("augment")
            .kv("weak_sigma", self.weak.sigma)
            .kv("strong_sigma", self.strong.sigma)
            .kv("strong_dropout", self.strong.dropout)
            .kv("strong_scale_low", self.strong.scale.0)
            .kv("strong_scale_high", self.strong.scale.1);
        w.section("model")
            .kv("hidden", list(&self.hidden))
            .kv("repr_dim", self.repr_dim)
            .kv("proj_hidden", self.proj_hidden.map_or("auto".into(), |h| h.to_string()))
            .kv("embed_dim", self.embed_dim);
        w.section("ablation")
            .kv("disable_pro", self.ablation.disable_pro)
            .kv("disable_ins", self.ablation.disable_ins)
            .kv("force_alpha_1", self.ablation.force_alpha_1)
            .kv("fixed_labels", self.ablation.fixed_labels);
        w.section("probe")
            .kv("knn_k", self.knn_k)
            .kv("reference", self.probe_reference)
            .kv("queries", self.probe_queries);
        w.section("finetune")
            .kv("enabled", self.finetune)
            .kv("epochs", self.finetune_epochs)
            .kv("lr", self.finetune_lr);
    }

    pub fn to_settings_text(&self) -> String {
        let mut w = SettingsWriter::default();
        self.write_settings(&mut w);
        w.finish()
    }

    /// Apply one entry. Returns `Ok(false)` if the section is not one this
    /// config owns.
    pub fn apply_entry(&mut self, e: &Entry) -> Result<bool> {
        let auto = e.value == "auto";
        match (e.section.as_str(), e.key.as_str()) {
            ("train", "tau") => self.tau = e.parse()?,
            ("train", "alpha") => self.alpha = e.parse()?,
            ("train", "threshold") => self.threshold = e.parse()?,
            ("train", "momentum") => self.momentum = e.parse()?,
            ("train", "queue_size") => self.queue_size = e.parse()?,
            ("train", "lambda_pro") => self.lambda_pro = e.parse()?,
            ("train", "lambda_ins") => self.lambda_ins = e.parse()?,
            ("train", "warmup_epochs") => self.warmup_epochs = e.parse()?,
            ("train", "epochs") => self.epochs = e.parse()?,
            ("train", "batch_size") => self.batch_size = e.parse()?,
            ("train", "lr") => self.lr = e.parse()?,
            ("train", "lr_milestones") => {
                self.lr_milestones = if auto { None } else { Some(e.parse_list()?) }
            }
            ("train", "lr_decay") => self.lr_decay = e.parse()?,
            ("train", "sgd_momentum") => self.sgd_momentum = e.parse()?,
            ("train", "weight_decay") => self.weight_decay = e.parse()?,
            ("train", "seed") => self.seed = e.parse()?,
            ("train", "renormalize_prototypes") => self.renormalize_prototypes = e.parse()?,
            ("train", "threads") => self.threads = e.parse()?,
            ("train", "trace") => self.trace = e.parse()?,
            ("augment", "weak_sigma") => self.weak.sigma = e.parse()?,
            ("augment", "strong_sigma") => self.strong.sigma = e.parse()?,
            ("augment", "strong_dropout") => self.strong.dropout = e.parse()?,
            ("augment", "strong_scale_low") => self.strong.scale.0 = e.parse()?,
            ("augment", "strong_scale_high") => self.strong.scale.1 = e.parse()?,
            ("model", "hidden") => self.hidden = e.parse_list()?,
            ("model", "repr_dim") => self.repr_dim = e.parse()?,
            ("model", "proj_hidden") => self.proj_hidden = if auto { None } else { Some(e.parse()?) },
            ("model", "embed_dim") => self.embed_dim = e.parse()?,
            ("ablation", "disable_pro") => self.ablation.disable_pro = e.parse()?,
            ("ablation", "disable_ins") => self.ablation.disable_ins = e.parse()?,
            ("ablation", "force_alpha_1") => self.ablation.force_alpha_1 = e.parse()?,
            ("ablation", "fixed_labels") => self.ablation.fixed_labels = e.parse()?,
            ("ablation", "preset") => {
                let preset: Ablation = e.value.parse().map_err(|err| e.invalid(err))?;
                preset.apply(self);
            }
            ("probe", "knn_k") => self.knn_k = e.parse()?,
            ("probe", "reference") => self.probe_reference = e.parse()?,
            ("probe", "queries") => self.probe_queries = e.parse()?,
            ("finetune", "enabled") => self.finetune = e.parse()?,
            ("finetune", "epochs") => self.finetune_epochs = e.parse()?,
            ("finetune", "lr") => self.finetune_lr = e.parse()?,
            ("train" | "augment" | "model" | "ablation" | "probe" | "finetune", _) => {
                return Err(e.unknown())
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Parse text produced by [`to_settings_text`](Self::to_settings_text).
    /// Unset keys keep their defaults.
    pub fn from_settings_text(text: &str) -> Result<Self> {
        let settings = Settings::parse(text)?;
        let mut config = TrainConfig::default();
        for e in &settings.entries {
            if !config.apply_entry(e)? {
                return Err(e.unknown());
            }
        }
        Ok(config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_reference_values() {
        let c = TrainConfig::default();
        c.validate(10).unwrap();
        assert_eq!((c.tau, c.alpha, c.threshold, c.momentum), (0.1, 0.5, 0.8, 0.999));
        assert_eq!((c.lambda_pro, c.lambda_ins, c.warmup_epochs), (1.0, 1.0, 10));
        assert_eq!(c.milestones(), vec![40, 53]);
        assert_eq!(c.lr_at(0), 0.025);
        assert!((c.lr_at(45) - 0.0025).abs() < 1e-15);
        assert!((c.lr_at(59) - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn validation_names_the_field() {
        let bad = [
            TrainConfig { tau: 0.0, ..Default::default() },
            TrainConfig { threshold: 0.1, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { epochs: 5, ..Default::default() },
            TrainConfig { weak: AugmentPolicy::weak(1.0), ..Default::default() },
        ];
        let fields = ["tau", "threshold", "momentum", "epochs", "augment"];
        for (c, want) in bad.iter().zip(fields) {
            match c.validate(10) {
                Err(MoproError::Config { field, .. }) => assert_eq!(field, want),
                other => panic!("{want}: {other:?}"),
            }
        }
    }

    #[test]
    fn ce_only_preset() {
        let c = TrainConfig::default().with_ablation(Ablation::CeOnly);
        let f = c.ablation;
        assert!(f.disable_pro && f.disable_ins && f.force_alpha_1 && f.fixed_labels);
        assert_eq!(c.threshold, 1.01);
        c.validate(10).unwrap();
        assert_eq!(c.effective_alpha(), 1.0);
    }

    #[test]
    fn ablation_names_parse() {
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
        assert_eq!("w/o_pro".parse::<Ablation>().unwrap(), Ablation::WoPro);
        assert!("wo_everything".parse::<Ablation>().is_err());
    }

    #[test]
    fn settings_round_trip() {
        let mut c = TrainConfig::default().with_ablation(Ablation::WoIns);
        c.lr = 0.1 + 0.2;
        c.lr_milestones = Some(vec![3, 7]);
        c.proj_hidden = Some(24);
        let back = TrainConfig::from_settings_text(&c.to_settings_text()).unwrap();
        assert_eq!(back, c);
        assert!(TrainConfig::from_settings_text("[train]\nbogus = 1\n").is_err());
    }
}
