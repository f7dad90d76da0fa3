//! Hypothesis functions `g: label -> [0, 1]` and the protocol that ranks
//! them by the held-out error of segmenters trained against them.
//!
//! A hypothesis is written `family[:params]`:
//!
//! | spec                | g(t)                                              |
//! |---------------------|---------------------------------------------------|
//! | `linear`            | `(t_max - t) / (t_max - t_min)`                   |
//! | `power-decay:A`     | `((t_max - t) / (t_max - t_min))^A`               |
//! | `inverse-power:P`   | `clamp(1 - t^-P, 0, 1)`, needs `t >= 1`           |
//! | `alternating`       | `(t - t_min) mod 2`                               |
//! | `constant:V`        | `V`                                               |
//! | `table:v0/v1/...`   | `v[t - t_min]`                                    |
//!
//! `inverse-power` increases with `t`; it is kept for comparison against the
//! decreasing families.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::synth::{Dataset, Split};
use crate::train::{train_segmenter, RunMetrics, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Family {
    Linear,
    PowerDecay { alpha: f64 },
    InversePowerVerbatim { p: f64 },
    Alternating,
    Constant { value: f64 },
    Table { values: Vec<f64> },
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Family::Linear => write!(f, "linear"),
            Family::PowerDecay { alpha } => write!(f, "power-decay:{alpha}"),
            Family::InversePowerVerbatim { p } => write!(f, "inverse-power:{p}"),
            Family::Alternating => write!(f, "alternating"),
            Family::Constant { value } => write!(f, "constant:{value}"),
            Family::Table { values } => {
                let parts: Vec<String> = values.iter().map(|v| v.to_string()).collect();
                write!(f, "table:{}", parts.join("/"))
            }
        }
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, params) = match s.split_once(':') {
            Some((h, p)) => (h.trim(), Some(p.trim())),
            None => (s.trim(), None),
        };
        let num = |p: Option<&str>| -> Result<f64> {
            let p = p.ok_or_else(|| Error::Invalid(format!("hypothesis `{s}` needs a parameter")))?;
            p.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Invalid(format!("bad hypothesis parameter `{p}`")))
        };
        let none = |p: Option<&str>| -> Result<()> {
            match p {
                None => Ok(()),
                Some(_) => Err(Error::Invalid(format!("hypothesis `{head}` takes no parameter"))),
            }
        };
        let family = match head {
            "linear" => {
                none(params)?;
                Family::Linear
            }
            "power-decay" => Family::PowerDecay { alpha: num(params)? },
            "inverse-power" => Family::InversePowerVerbatim { p: num(params)? },
            "alternating" => {
                none(params)?;
                Family::Alternating
            }
            "constant" => Family::Constant { value: num(params)? },
            "table" => {
                let p = params.ok_or_else(|| Error::Invalid("table hypothesis needs values".into()))?;
                let values = p.split('/').map(|v| num(Some(v))).collect::<Result<Vec<_>>>()?;
                Family::Table { values }
            }
            other => return Err(Error::Invalid(format!("unknown hypothesis family `{other}`"))),
        };
        if let Family::PowerDecay { alpha } = family {
            if alpha <= 0.0 {
                return Err(Error::Invalid(format!("power-decay exponent must be > 0, got {alpha}")));
            }
        }
        Ok(family)
    }
}

impl TryFrom<String> for Family {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Family> for String {
    fn from(f: Family) -> String {
        f.to_string()
    }
}

impl Family {
    fn eval_raw(&self, t: i64, (t_min, t_max): (i64, i64)) -> Result<f64> {
        let span = (t_max - t_min) as f64;
        let frac = || (t_max - t) as f64 / span;
        Ok(match self {
            Family::Linear => frac(),
            Family::PowerDecay { alpha } => frac().powf(*alpha),
            Family::InversePowerVerbatim { p } => {
                if t < 1 {
                    return Err(Error::Invalid(format!("inverse-power hypothesis is undefined at t = {t} (< 1)")));
                }
                (1.0 - (t as f64).powf(-p)).clamp(0.0, 1.0)
            }
            Family::Alternating => (t - t_min).rem_euclid(2) as f64,
            Family::Constant { value } => *value,
            Family::Table { values } => values[(t - t_min) as usize],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Decreasing,
    Increasing,
    Neither,
}

/// Non-strict monotonicity over the integer labels of the range. A constant
/// function satisfies both conditions; it is reported as decreasing with
/// `constant` set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Monotonicity {
    pub direction: Direction,
    pub constant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub name: String,
    pub family: Family,
    pub label_range: (i64, i64),
}

impl Hypothesis {
    /// Validates that every label in `label_range` maps into `[0, 1]`.
    pub fn new(name: impl Into<String>, family: Family, label_range: (i64, i64)) -> Result<Self> {
        let (t_min, t_max) = label_range;
        if t_min > t_max {
            return Err(Error::Invalid(format!("empty label range [{t_min}, {t_max}]")));
        }
        if matches!(family, Family::Linear | Family::PowerDecay { .. }) && t_min == t_max {
            return Err(Error::Invalid("decay families need at least two labels".into()));
        }
        if let Family::Table { values } = &family {
            if values.len() as i64 != t_max - t_min + 1 {
                return Err(Error::Invalid(format!(
                    "table has {} values for {} labels",
                    values.len(),
                    t_max - t_min + 1
                )));
            }
        }
        let h = Self {
            name: name.into(),
            family,
            label_range,
        };
        for t in t_min..=t_max {
            let v = h.family.eval_raw(t, label_range)?;
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Invalid(format!("hypothesis `{}` maps label {t} to {v}, outside [0, 1]", h.name)));
            }
        }
        Ok(h)
    }

    /// Parses `family[:params]`; the spec string becomes the name.
    pub fn parse(spec: &str, label_range: (i64, i64)) -> Result<Self> {
        let family: Family = spec.parse()?;
        Self::new(family.to_string(), family, label_range)
    }

    pub fn g(&self, t: i64) -> Result<f64> {
        let (t_min, t_max) = self.label_range;
        if t < t_min || t > t_max {
            return Err(Error::LabelOutOfRange {
                label: t,
                min: t_min,
                max: t_max,
            });
        }
        self.family.eval_raw(t, self.label_range)
    }

    pub fn labels(&self) -> impl Iterator<Item = i64> {
        self.label_range.0..=self.label_range.1
    }

    pub fn values(&self) -> Vec<f64> {
        self.labels().map(|t| self.g(t).expect("validated at construction")).collect()
    }

    pub fn monotonicity(&self) -> Monotonicity {
        let v = self.values();
        let dec = v.windows(2).all(|w| w[1] <= w[0]);
        let inc = v.windows(2).all(|w| w[1] >= w[0]);
        let direction = match (dec, inc) {
            (true, _) => Direction::Decreasing,
            (false, true) => Direction::Increasing,
            _ => Direction::Neither,
        };
        Monotonicity {
            direction,
            constant: dec && inc,
        }
    }
}

/// One label's target and mean prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMean {
    pub label: i64,
    pub target_g: f64,
    pub mean_prediction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisEntry {
    pub name: String,
    pub train_mse: f64,
    pub val_mse: f64,
    pub test_mse: f64,
    /// Validation MSE against the generator's true ratio function, when the
    /// dataset records one.
    pub val_mse_vs_truth: Option<f64>,
    /// Per-label validation means.
    pub per_label: Vec<LabelMean>,
    pub monotonicity: Monotonicity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisReport {
    /// Sorted ascending by validation MSE, ties by name.
    pub entries: Vec<HypothesisEntry>,
}

impl HypothesisReport {
    pub fn ranking(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.name.as_str()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&HypothesisEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Writes `hypothesis_mse.csv`, `hypothesis_labels.csv` and
    /// `hypothesis_ranking.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut mse = String::from("hypothesis,split,mse\n");
        let mut labels = String::from("hypothesis,label,target_g,mean_prediction\n");
        for e in &self.entries {
            for (split, v) in [("train", e.train_mse), ("val", e.val_mse), ("test", e.test_mse)] {
                mse.push_str(&format!("{},{split},{v}\n", e.name));
            }
            for l in &e.per_label {
                labels.push_str(&format!("{},{},{},{}\n", e.name, l.label, l.target_g, l.mean_prediction));
            }
        }
        let summary = serde_json::json!({
            "ranking": self.entries.iter().enumerate().map(|(i, e)| serde_json::json!({
                "rank": i + 1,
                "hypothesis": e.name,
                "val_mse": e.val_mse,
                "val_mse_vs_truth": e.val_mse_vs_truth,
                "monotonicity": e.monotonicity.direction,
                "constant": e.monotonicity.constant,
            })).collect::<Vec<_>>(),
        });
        crate::io::write_text(dir.join("hypothesis_mse.csv"), &mse)?;
        crate::io::write_text(dir.join("hypothesis_labels.csv"), &labels)?;
        crate::io::write_text(
            dir.join("hypothesis_ranking.json"),
            &serde_json::to_string_pretty(&summary).expect("json values serialize"),
        )
    }
}

/// Trains a fresh segmenter against `h` and summarizes its errors.
pub fn evaluate_hypothesis(
    h: &Hypothesis,
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<(HypothesisEntry, RunMetrics, Model)> {
    let mut model = Model::segmenter(*model_config, train_config.seed)?;
    let metrics = train_segmenter(&mut model, dataset, h, train_config)?;
    let seg = metrics.segmenter.as_ref().expect("segmenter run records segmenter metrics");
    let entry = HypothesisEntry {
        name: h.name.clone(),
        train_mse: seg.final_mse.train,
        val_mse: seg.final_mse.val,
        test_mse: seg.final_mse.test,
        val_mse_vs_truth: mse_vs_truth(&metrics, dataset),
        per_label: seg.per_label.clone(),
        monotonicity: h.monotonicity(),
    };
    Ok((entry, metrics, model))
}

fn mse_vs_truth(metrics: &RunMetrics, dataset: &Dataset) -> Option<f64> {
    let f_true = dataset.f_true().ok()?;
    let preds: Vec<_> = metrics.predictions.iter().filter(|p| p.split == Split::Val).collect();
    if preds.is_empty() {
        return None;
    }
    let total: f64 = preds
        .iter()
        .map(|p| {
            let t = f_true.g(p.label).unwrap_or(f64::NAN);
            (p.prediction - t).powi(2)
        })
        .sum();
    Some(total / preds.len() as f64)
}

/// Evaluates every hypothesis with identical configs and seeds and ranks
/// them by validation MSE. Returns the report and each run's metrics, both
/// in ranking order. With `threads > 1` evaluations run concurrently; each
/// run is independent, so the result does not depend on `threads`.
pub fn rank_hypotheses(
    hypotheses: &[Hypothesis],
    dataset: &Dataset,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    threads: usize,
) -> Result<(HypothesisReport, Vec<RunMetrics>)> {
    if hypotheses.is_empty() {
        return Err(Error::Invalid("no hypotheses to rank".into()));
    }
    let eval = |h: &Hypothesis| evaluate_hypothesis(h, dataset, model_config, train_config).map(|r| (r.0, r.1));
    let results: Vec<Result<(HypothesisEntry, RunMetrics)>> = if threads <= 1 {
        hypotheses.iter().map(eval).collect()
    } else {
        let chunk = hypotheses.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = hypotheses
                .chunks(chunk)
                .map(|part| s.spawn(move || part.iter().map(eval).collect::<Vec<_>>()))
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("hypothesis worker panicked"))
                .collect()
        })
    };
    let mut runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    runs.sort_by(|a, b| a.0.val_mse.total_cmp(&b.0.val_mse).then_with(|| a.0.name.cmp(&b.0.name)));
    let (entries, metrics) = runs.into_iter().unzip();
    Ok((HypothesisReport { entries }, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn h(spec: &str, range: (i64, i64)) -> Hypothesis {
        Hypothesis::parse(spec, range).unwrap()
    }

    #[test]
    fn linear_endpoints() {
        let lin = h("linear", (0, 7));
        assert_eq!(lin.g(0).unwrap(), 1.0);
        assert_eq!(lin.g(7).unwrap(), 0.0);
        assert!((lin.g(2).unwrap() - 5.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn alternating_values() {
        let alt = h("alternating", (1, 14));
        assert_eq!(alt.g(1).unwrap(), 0.0);
        assert_eq!(alt.g(2).unwrap(), 1.0);
        assert_eq!(alt.g(3).unwrap(), 0.0);
    }

    #[test]
    fn inverse_power_values() {
        let inv = h("inverse-power:2", (1, 14));
        assert_eq!(inv.g(1).unwrap(), 0.0);
        assert_eq!(inv.g(2).unwrap(), 0.75);
        assert!(Hypothesis::parse("inverse-power:0.5", (0, 7)).is_err());
    }

    #[test]
    fn power_decay_alpha_one_is_verbatim_linear() {
        // 1 - t/T over [0, T]
        let p = h("power-decay:1", (0, 5));
        for t in 0..=5 {
            assert!((p.g(t).unwrap() - (1.0 - t as f64 / 5.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_label() {
        let lin = h("linear", (0, 7));
        assert!(matches!(lin.g(8), Err(Error::LabelOutOfRange { .. })));
        assert!(matches!(lin.g(-1), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn range_violation_rejected() {
        assert!(Hypothesis::parse("constant:1.5", (0, 3)).is_err());
        assert!(Hypothesis::parse("table:0.1/0.2", (0, 3)).is_err());
        assert!(Hypothesis::parse("table:0.1/2/0.3/0.4", (0, 3)).is_err());
        assert!(Hypothesis::parse("power-decay:-1", (0, 3)).is_err());
        assert!(Hypothesis::parse("bogus", (0, 3)).is_err());
    }

    #[test]
    fn monotonicity_classes() {
        let dec = Monotonicity {
            direction: Direction::Decreasing,
            constant: false,
        };
        assert_eq!(h("linear", (0, 7)).monotonicity(), dec);
        assert_eq!(h("power-decay:2", (0, 7)).monotonicity(), dec);
        assert_eq!(h("alternating", (0, 7)).monotonicity().direction, Direction::Neither);
        assert_eq!(h("inverse-power:0.5", (1, 14)).monotonicity().direction, Direction::Increasing);
        let c = h("constant:0.5", (0, 7)).monotonicity();
        assert_eq!(c.direction, Direction::Decreasing);
        assert!(c.constant);
    }

    #[test]
    fn spec_strings_round_trip() {
        for s in ["linear", "power-decay:2", "inverse-power:0.5", "alternating", "constant:0.25", "table:1/0.5/0"] {
            let f: Family = s.parse().unwrap();
            assert_eq!(f.to_string(), s);
        }
    }

    #[test]
    fn catalog_maps_into_unit_interval() {
        for spec in ["linear", "power-decay:0.5", "power-decay:2", "power-decay:3", "alternating", "constant:0.3"] {
            for range in [(0, 7), (1, 14), (0, 15)] {
                let hyp = h(spec, range);
                assert!(hyp.values().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        for p in [0.5, 1.0, 2.0] {
            let hyp = Hypothesis::new("inv", Family::InversePowerVerbatim { p }, (1, 14)).unwrap();
            assert!(hyp.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
