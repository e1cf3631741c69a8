//! Flat `section.key = value` experiment configuration.

use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::{join, parse_list, parse_value, KvDoc};
use crate::planner::SpacingRule;
use crate::synthdata::PhantomConfig;
use crate::trainer::TrainConfig;

/// All tunables of a run. Sections: `train`, `lambda`, `augment`, `phantom`,
/// `spacing`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    /// When set, the lambda ramp ends at half of `train.epochs`.
    pub ramp_auto: bool,
    pub phantom: PhantomConfig,
    pub spacing: SpacingRule,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            ramp_auto: true,
            phantom: PhantomConfig::default(),
            spacing: SpacingRule::default(),
        }
    }
}

fn triple<T: std::str::FromStr + Copy>(key: &str, raw: &str) -> Result<[T; 3]> {
    parse_list::<T>(raw)
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| Error::Config(format!("key {key}: expected three comma-separated values, got {raw:?}")))
}

impl ExperimentConfig {
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        let mut train = KvDoc::new();
        self.train.push_kv(&mut train);
        for (k, v) in train.entries() {
            if k == "lambda.ramp_end_epoch" && self.ramp_auto {
                doc.push(k.as_str(), "auto");
            } else {
                doc.push(k.as_str(), v);
            }
        }
        let p = &self.phantom;
        doc.push("phantom.dims", join(&p.dims));
        doc.push("phantom.num_organs", p.num_organs);
        doc.push("phantom.background_mean", p.background_mean);
        doc.push("phantom.organ_means", join(&p.organ_means));
        doc.push("phantom.intensity_jitter", p.intensity_jitter);
        doc.push("phantom.noise_sigma", p.noise_sigma);
        doc.push("phantom.radius_min_frac", p.radius_frac.0);
        doc.push("phantom.radius_max_frac", p.radius_frac.1);
        doc.push("phantom.spacing_min", p.spacing_range.0);
        doc.push("phantom.spacing_max", p.spacing_range.1);
        let s = &self.spacing;
        doc.push("spacing.default", join(&s.default_spacing));
        doc.push("spacing.s_low", s.s_low);
        doc.push("spacing.s_high", s.s_high);
        doc.push("spacing.z_floor", s.z_floor);
        doc
    }

    pub fn to_text(&self) -> String {
        self.to_kv().to_text()
    }

    /// Start from defaults and apply every entry; unknown keys are errors.
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in doc.entries() {
            cfg.apply(k, v)?;
        }
        cfg.resolve();
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvDoc::parse(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KvDoc::read(path)?)
    }

    /// Set one key.
    pub fn apply(&mut self, key: &str, raw: &str) -> Result<()> {
        if key == "lambda.ramp_end_epoch" {
            if raw.trim() == "auto" {
                self.ramp_auto = true;
                return Ok(());
            }
            self.ramp_auto = false;
        }
        if self.train.apply_kv(key, raw)? {
            return Ok(());
        }
        let p = &mut self.phantom;
        let s = &mut self.spacing;
        match key {
            "phantom.dims" => p.dims = triple(key, raw)?,
            "phantom.num_organs" => p.num_organs = parse_value(key, raw)?,
            "phantom.background_mean" => p.background_mean = parse_value(key, raw)?,
            "phantom.organ_means" => {
                p.organ_means = parse_list(raw).ok_or_else(|| Error::Config(format!("key {key}: cannot parse {raw:?}")))?
            }
            "phantom.intensity_jitter" => p.intensity_jitter = parse_value(key, raw)?,
            "phantom.noise_sigma" => p.noise_sigma = parse_value(key, raw)?,
            "phantom.radius_min_frac" => p.radius_frac.0 = parse_value(key, raw)?,
            "phantom.radius_max_frac" => p.radius_frac.1 = parse_value(key, raw)?,
            "phantom.spacing_min" => p.spacing_range.0 = parse_value(key, raw)?,
            "phantom.spacing_max" => p.spacing_range.1 = parse_value(key, raw)?,
            "spacing.default" => s.default_spacing = triple(key, raw)?,
            "spacing.s_low" => s.s_low = parse_value(key, raw)?,
            "spacing.s_high" => s.s_high = parse_value(key, raw)?,
            "spacing.z_floor" => s.z_floor = parse_value(key, raw)?,
            _ => return Err(Error::Config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Recompute derived values (the automatic lambda ramp end).
    pub fn resolve(&mut self) {
        if self.ramp_auto {
            self.train.lambda.ramp_end_epoch = (self.train.total_epochs / 2).max(1);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.spacing.validate()?;
        self.train.lambda.validate()
    }
}
