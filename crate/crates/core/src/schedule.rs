//! Burn-in schedules for every scheduled hyperparameter.
//!
//! Each hyperparameter follows a blend from `initial` to `final` driven by
//! training progress. The blend runs over the burn-in span (a fraction of
//! the total image budget) and then holds `final`. A burn-in fraction above
//! one truncates the curve at training end, so the final value is never
//! reached.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the blend between a schedule's endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveShape {
    /// `0.5 (1 + cos(pi x))`
    Cosine,
    /// `0.5 (1 + cos(pi x^2))`: holds the initial value longer, then drops steeply.
    CosineSquared,
    /// Always the initial value.
    Constant,
}

/// One scheduled hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_value: f64,
    /// Burn-in length as a fraction of the training budget. May exceed 1.
    pub burn_in_fraction: f64,
    pub shape: CurveShape,
}

impl ScheduleSpec {
    pub fn new(initial: f64, final_value: f64, burn_in_fraction: f64, shape: CurveShape) -> Self {
        ScheduleSpec {
            initial,
            final_value,
            burn_in_fraction,
            shape,
        }
    }

    pub fn constant(value: f64) -> Self {
        ScheduleSpec::new(value, value, 1.0, CurveShape::Constant)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.burn_in_fraction > 0.0 && self.burn_in_fraction.is_finite()) {
            return Err(Error::Config(format!(
                "burn_in_fraction must be a positive finite number, got {}",
                self.burn_in_fraction
            )));
        }
        if !self.initial.is_finite() || !self.final_value.is_finite() {
            return Err(Error::Config("schedule endpoints must be finite".into()));
        }
        Ok(())
    }

    pub fn value_at(&self, progress: f64) -> Result<f64> {
        schedule_value(self, progress)
    }

    fn endpoints_within(&self, lo: f64, hi: f64) -> bool {
        (lo..=hi).contains(&self.initial) && (lo..=hi).contains(&self.final_value)
    }
}

/// Remaining fraction of `initial - final` at normalized burn-in position `x`.
pub fn cosine_fraction(x: f64, shape: CurveShape) -> Result<f64> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Domain(format!(
            "burn-in position must lie in [0, 1], got {x}"
        )));
    }
    Ok(match shape {
        CurveShape::Cosine => 0.5 * (1.0 + (PI * x).cos()),
        CurveShape::CosineSquared => 0.5 * (1.0 + (PI * x * x).cos()),
        CurveShape::Constant => 1.0,
    })
}

/// Evaluates `spec` at training progress in `[0, 1]`.
pub fn schedule_value(spec: &ScheduleSpec, progress: f64) -> Result<f64> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::Domain(format!(
            "progress must lie in [0, 1], got {progress}"
        )));
    }
    let x = (progress / spec.burn_in_fraction).min(1.0);
    let remaining = cosine_fraction(x, spec.shape)?;
    if remaining == 1.0 {
        return Ok(spec.initial);
    }
    let value = spec.final_value + (spec.initial - spec.final_value) * remaining;
    // Rounding can push the blend a hair outside the endpoint interval.
    let (lo, hi) = if spec.initial <= spec.final_value {
        (spec.initial, spec.final_value)
    } else {
        (spec.final_value, spec.initial)
    };
    Ok(value.clamp(lo, hi))
}

/// Full set of scheduled hyperparameters plus the image budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub notes: Option<String>,
    pub lr: ScheduleSpec,
    pub gamma: ScheduleSpec,
    pub beta2: ScheduleSpec,
    pub ema_halflife_kimg: ScheduleSpec,
    pub aug_prob: ScheduleSpec,
    /// Budget counted in images processed, real and generated together.
    pub total_images: u64,
}

/// Every scheduled value at one point of training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperparamSnapshot {
    pub lr: f64,
    pub gamma: f64,
    pub beta2: f64,
    pub ema_halflife_kimg: f64,
    pub aug_prob: f64,
    pub progress: f64,
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        for (name, spec) in self.specs() {
            spec.validate()
                .map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        if self.total_images == 0 {
            return Err(Error::Config("total_images must be positive".into()));
        }
        if !self.aug_prob.endpoints_within(0.0, 1.0) {
            return Err(Error::Config(
                "aug_prob endpoints must lie in [0, 1]".into(),
            ));
        }
        let b2 = &self.beta2;
        if !(b2.initial > 0.0 && b2.initial < 1.0 && b2.final_value > 0.0 && b2.final_value < 1.0) {
            return Err(Error::Config("beta2 endpoints must lie in (0, 1)".into()));
        }
        if self.gamma.initial < 0.0 || self.gamma.final_value < 0.0 {
            return Err(Error::Config("gamma endpoints must be non-negative".into()));
        }
        if !(self.lr.initial >= 0.0 && self.lr.final_value >= 0.0) {
            return Err(Error::Config("lr endpoints must be non-negative".into()));
        }
        if !(self.ema_halflife_kimg.initial > 0.0 && self.ema_halflife_kimg.final_value > 0.0) {
            return Err(Error::Config(
                "ema_halflife_kimg endpoints must be positive".into(),
            ));
        }
        Ok(())
    }

    fn specs(&self) -> [(&'static str, &ScheduleSpec); 5] {
        [
            ("lr", &self.lr),
            ("gamma", &self.gamma),
            ("beta2", &self.beta2),
            ("ema_halflife_kimg", &self.ema_halflife_kimg),
            ("aug_prob", &self.aug_prob),
        ]
    }

    pub fn snapshot_at_progress(&self, progress: f64) -> Result<HyperparamSnapshot> {
        Ok(HyperparamSnapshot {
            lr: schedule_value(&self.lr, progress)?,
            gamma: schedule_value(&self.gamma, progress)?,
            beta2: schedule_value(&self.beta2, progress)?,
            ema_halflife_kimg: schedule_value(&self.ema_halflife_kimg, progress)?,
            aug_prob: schedule_value(&self.aug_prob, progress)?,
            progress,
        })
    }

    pub fn snapshot_at(&self, images_seen: u64) -> Result<HyperparamSnapshot> {
        snapshot_at(self, images_seen)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("schedule serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schedule: TrainingSchedule =
            serde_json::from_str(text).map_err(|e| Error::json("training schedule", e))?;
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schedule: TrainingSchedule =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        schedule.validate()?;
        Ok(schedule)
    }

    /// Replaces gamma with a constant zero, keeping everything else.
    pub fn without_penalty(&self) -> Self {
        let mut out = self.clone();
        out.gamma = ScheduleSpec::constant(0.0);
        out.name = self.name.as_ref().map(|n| format!("{n}-gamma0"));
        out
    }
}

pub fn snapshot_at(schedule: &TrainingSchedule, images_seen: u64) -> Result<HyperparamSnapshot> {
    if images_seen > schedule.total_images {
        return Err(Error::Range(format!(
            "images_seen {images_seen} exceeds the budget of {}",
            schedule.total_images
        )));
    }
    schedule.snapshot_at_progress(images_seen as f64 / schedule.total_images as f64)
}

/// Toy image budget that stands in for the 300 kimg ladder budget.
pub const BASE_BUDGET_IMAGES: u64 = 120_000;

const PRESETS: &[(&str, &str, &str)] = &[
    (
        "exp003",
        include_str!("../presets/exp003.json"),
        "2 Mimg burn-in kept under a 300 kimg budget",
    ),
    (
        "exp004",
        include_str!("../presets/exp004.json"),
        "100% burn-in",
    ),
    (
        "exp006",
        include_str!("../presets/exp006.json"),
        "20% burn-in baseline",
    ),
    (
        "exp007",
        include_str!("../presets/exp007.json"),
        "50% burn-in",
    ),
    (
        "exp008",
        include_str!("../presets/exp008.json"),
        "squared-progress decay",
    ),
    (
        "exp009",
        include_str!("../presets/exp009.json"),
        "150% burn-in",
    ),
    (
        "exp010",
        include_str!("../presets/exp010.json"),
        "seed replicate of exp008",
    ),
    (
        "exp011",
        include_str!("../presets/exp011.json"),
        "seed replicate of exp009",
    ),
    (
        "exp012",
        include_str!("../presets/exp012.json"),
        "fixed gamma 75",
    ),
    (
        "exp013",
        include_str!("../presets/exp013.json"),
        "increasing gamma 15 -> 150",
    ),
    (
        "exp014",
        include_str!("../presets/exp014.json"),
        "gamma 7 -> 75",
    ),
    (
        "exp017",
        include_str!("../presets/exp017.json"),
        "gamma 5 -> 40, aug 0 -> 0.6",
    ),
];

pub fn preset_names() -> Vec<String> {
    PRESETS.iter().map(|(n, _, _)| n.to_string()).collect()
}

/// `(name, citation)` pairs for listing the ladder.
pub fn preset_citations() -> Vec<(&'static str, &'static str)> {
    PRESETS.iter().map(|(n, _, c)| (*n, *c)).collect()
}

/// The raw JSON file content of a preset.
pub fn preset_source(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _, _)| *n == name)
        .map(|(_, src, _)| *src)
        .ok_or_else(|| Error::UnknownPreset {
            name: name.to_string(),
            available: preset_names(),
        })
}

pub fn load_preset(name: &str) -> Result<TrainingSchedule> {
    TrainingSchedule::from_json(preset_source(name)?)
}
