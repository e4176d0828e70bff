//! Fairness and accuracy metrics: group selection rates, demographic parity
//! ratio, equalized odds ratio, accuracy, and Pareto frontiers over
//! accuracy/parity trade-offs.
//!
//! Ratios are reported as min/max across the two protected groups, so 1.0 is
//! perfect parity. Degenerate cases follow fixed conventions: when both rates
//! are zero the ratio is 1.0 (the groups are treated identically), and when
//! exactly one rate is zero the ratio is 0.0.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-group positive counts and sample counts for exactly two groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupRates {
    /// Keyed by group name; always exactly two entries.
    groups: BTreeMap<String, GroupCount>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupCount {
    pub positives: usize,
    pub count: usize,
}

impl GroupRates {
    /// Count positive predictions per group over `(prediction, group)` pairs.
    ///
    /// Both declared groups are always present in the result; a group that
    /// never occurs keeps a zero count and reports an absent rate. Outcomes
    /// tagged with an undeclared group are an error.
    pub fn from_outcomes<'a, I>(outcomes: I, declared: (&str, &str)) -> Result<Self>
    where
        I: IntoIterator<Item = (u8, &'a str)>,
    {
        let mut groups = BTreeMap::new();
        groups.insert(
            declared.0.to_string(),
            GroupCount {
                positives: 0,
                count: 0,
            },
        );
        groups.insert(
            declared.1.to_string(),
            GroupCount {
                positives: 0,
                count: 0,
            },
        );
        if groups.len() != 2 {
            return Err(Error::Schema(format!(
                "declared groups must be distinct, got '{}' twice",
                declared.0
            )));
        }
        for (prediction, group) in outcomes {
            let entry = groups
                .get_mut(group)
                .ok_or_else(|| Error::Schema(format!("undeclared group '{group}'")))?;
            entry.count += 1;
            if prediction == 1 {
                entry.positives += 1;
            }
        }
        Ok(Self { groups })
    }

    pub fn group_names(&self) -> (&str, &str) {
        let mut keys = self.groups.keys();
        (keys.next().unwrap(), keys.next().unwrap())
    }

    /// Selection rate for `group`; absent when the group has zero samples.
    pub fn rate(&self, group: &str) -> Option<f64> {
        let entry = self.groups.get(group)?;
        if entry.count == 0 {
            None
        } else {
            Some(entry.positives as f64 / entry.count as f64)
        }
    }

    pub fn count(&self, group: &str) -> usize {
        self.groups.get(group).map_or(0, |e| e.count)
    }

    /// Both rates in group-name order, or an error naming the absent group.
    pub fn both_rates(&self) -> Result<(f64, f64)> {
        let (a, b) = self.group_names();
        let ra = self
            .rate(a)
            .ok_or_else(|| Error::MissingRate(a.to_string()))?;
        let rb = self
            .rate(b)
            .ok_or_else(|| Error::MissingRate(b.to_string()))?;
        Ok((ra, rb))
    }

    /// Absolute difference in selection rates.
    pub fn gap(&self) -> Result<f64> {
        let (ra, rb) = self.both_rates()?;
        Ok((ra - rb).abs())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &GroupCount)> {
        self.groups.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Ratio of the smaller to the larger of two rates, under the degenerate
/// conventions: both zero → 1.0, exactly one zero → 0.0.
fn min_max_ratio(a: f64, b: f64) -> f64 {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    if hi == 0.0 {
        1.0
    } else if lo == 0.0 {
        0.0
    } else {
        lo / hi
    }
}

/// Selection rates per group; see [`GroupRates::from_outcomes`].
pub fn selection_rates<'a, I>(outcomes: I, declared: (&str, &str)) -> Result<GroupRates>
where
    I: IntoIterator<Item = (u8, &'a str)>,
{
    GroupRates::from_outcomes(outcomes, declared)
}

/// Demographic parity ratio: min group selection rate over max.
pub fn dp_ratio(rates: &GroupRates) -> Result<f64> {
    let (ra, rb) = rates.both_rates()?;
    Ok(min_max_ratio(ra, rb))
}

/// Equalized odds ratio over `(prediction, group, label)` triples.
///
/// For each label value the positive-prediction rates of the two groups are
/// compared as a min/max ratio (the y=1 case compares true positive rates,
/// the y=0 case false positive rates); the worse of the two ratios is
/// returned. Any empty (group, label) stratum is an error naming the stratum.
pub fn eo_ratio<'a, I>(outcomes: I, declared: (&str, &str)) -> Result<f64>
where
    I: IntoIterator<Item = (u8, &'a str, u8)>,
{
    let mut strata: BTreeMap<(String, u8), GroupCount> = BTreeMap::new();
    for group in [declared.0, declared.1] {
        for label in [0u8, 1u8] {
            strata.insert(
                (group.to_string(), label),
                GroupCount {
                    positives: 0,
                    count: 0,
                },
            );
        }
    }
    for (prediction, group, label) in outcomes {
        let entry = strata
            .get_mut(&(group.to_string(), label))
            .ok_or_else(|| Error::Schema(format!("undeclared group '{group}'")))?;
        entry.count += 1;
        if prediction == 1 {
            entry.positives += 1;
        }
    }
    let mut worst = f64::INFINITY;
    for label in [0u8, 1u8] {
        let mut rates = [0.0f64; 2];
        for (i, group) in [declared.0, declared.1].iter().enumerate() {
            let entry = &strata[&(group.to_string(), label)];
            if entry.count == 0 {
                return Err(Error::EmptyStratum {
                    group: group.to_string(),
                    label,
                });
            }
            rates[i] = entry.positives as f64 / entry.count as f64;
        }
        worst = worst.min(min_max_ratio(rates[0], rates[1]));
    }
    Ok(worst)
}

/// Fraction of correct predictions over `(prediction, label)` pairs.
pub fn accuracy<I>(outcomes: I) -> Result<f64>
where
    I: IntoIterator<Item = (u8, u8)>,
{
    let mut correct = 0usize;
    let mut total = 0usize;
    for (prediction, label) in outcomes {
        total += 1;
        if prediction == label {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("accuracy over empty input".to_string()));
    }
    Ok(correct as f64 / total as f64)
}

/// One evaluated candidate in accuracy/parity space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub accuracy: f64,
    pub dp_ratio: f64,
    /// Candidate identifier: prompt hash, epoch index, or ratio pair.
    pub tag: String,
}

impl TradeoffPoint {
    pub fn new(accuracy: f64, dp_ratio: f64, tag: impl Into<String>) -> Self {
        Self {
            accuracy,
            dp_ratio,
            tag: tag.into(),
        }
    }

    /// True when this point is at least as good on both axes and strictly
    /// better on one.
    pub fn dominates(&self, other: &Self) -> bool {
        self.accuracy >= other.accuracy
            && self.dp_ratio >= other.dp_ratio
            && (self.accuracy > other.accuracy || self.dp_ratio > other.dp_ratio)
    }
}

/// Nondominated subset under (accuracy ↑, dp_ratio ↑).
///
/// Points identical on both coordinates collapse to the representative whose
/// tag sorts first. The result is sorted by ascending accuracy.
pub fn pareto_front(points: &[TradeoffPoint]) -> Vec<TradeoffPoint> {
    // Collapse exact coordinate duplicates.
    let mut unique: Vec<&TradeoffPoint> = Vec::new();
    for p in points {
        match unique
            .iter_mut()
            .find(|q| q.accuracy == p.accuracy && q.dp_ratio == p.dp_ratio)
        {
            Some(q) => {
                if p.tag < q.tag {
                    *q = p;
                }
            }
            None => unique.push(p),
        }
    }
    // Sweep: sort by accuracy descending (dp descending within ties); a point
    // survives iff its dp strictly exceeds every point with accuracy >= its own.
    unique.sort_by(|a, b| {
        b.accuracy
            .partial_cmp(&a.accuracy)
            .unwrap()
            .then(b.dp_ratio.partial_cmp(&a.dp_ratio).unwrap())
            .then(a.tag.cmp(&b.tag))
    });
    let mut front: Vec<TradeoffPoint> = Vec::new();
    let mut best_dp = f64::NEG_INFINITY;
    for p in unique {
        if p.dp_ratio > best_dp {
            front.push(p.clone());
            best_dp = p.dp_ratio;
        }
    }
    front.reverse();
    front
}

/// Operating point selected from a candidate set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub point: TradeoffPoint,
    /// False when no Pareto point reached `dp_min` and the max-DP point was
    /// returned instead.
    pub constraint_met: bool,
}

/// Among Pareto points with `dp_ratio >= dp_min`, the one with the highest
/// accuracy (ties: higher dp_ratio, then tag order). When no point meets
/// `dp_min`, the Pareto point with the highest dp_ratio is returned flagged.
pub fn select_operating_point(points: &[TradeoffPoint], dp_min: f64) -> Result<OperatingPoint> {
    if points.is_empty() {
        return Err(Error::EmptyInput(
            "select_operating_point over empty candidate set".to_string(),
        ));
    }
    let front = pareto_front(points);
    let qualifying = front
        .iter()
        .filter(|p| p.dp_ratio >= dp_min)
        .max_by(|a, b| {
            a.accuracy
                .partial_cmp(&b.accuracy)
                .unwrap()
                .then(a.dp_ratio.partial_cmp(&b.dp_ratio).unwrap())
                .then(b.tag.cmp(&a.tag))
        });
    if let Some(point) = qualifying {
        return Ok(OperatingPoint {
            point: point.clone(),
            constraint_met: true,
        });
    }
    let fallback = front
        .iter()
        .max_by(|a, b| {
            a.dp_ratio
                .partial_cmp(&b.dp_ratio)
                .unwrap()
                .then(a.accuracy.partial_cmp(&b.accuracy).unwrap())
                .then(b.tag.cmp(&a.tag))
        })
        .expect("front is nonempty");
    Ok(OperatingPoint {
        point: fallback.clone(),
        constraint_met: false,
    })
}

/// One scored sample feeding an [`EvalReport`]. A `None` prediction is an
/// abstention (e.g. unparseable model output): excluded from every metric but
/// counted.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub prediction: Option<u8>,
    pub group: String,
    pub label: Option<u8>,
}

/// Accuracy, selection rates, and parity ratios for one prediction set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Absent when no evaluated sample carries a label.
    pub accuracy: Option<f64>,
    pub dp_ratio: f64,
    /// Absent when labels are absent or a (group, label) stratum is empty;
    /// the reason names the stratum in the latter case.
    pub eo_ratio: Option<f64>,
    pub eo_absent_reason: Option<String>,
    pub rates: GroupRates,
    /// Number of evaluated (non-abstained) samples.
    pub n: usize,
    pub abstentions: usize,
}

impl EvalReport {
    /// Compute all metrics over a sample set with the two declared groups.
    pub fn compute(samples: &[EvalSample], declared: (&str, &str)) -> Result<Self> {
        let evaluated: Vec<&EvalSample> =
            samples.iter().filter(|s| s.prediction.is_some()).collect();
        let abstentions = samples.len() - evaluated.len();
        let rates = selection_rates(
            evaluated
                .iter()
                .map(|s| (s.prediction.unwrap(), s.group.as_str())),
            declared,
        )?;
        let dp = dp_ratio(&rates)?;
        let labeled: Vec<&&EvalSample> = evaluated.iter().filter(|s| s.label.is_some()).collect();
        let accuracy = if labeled.is_empty() {
            None
        } else {
            Some(accuracy(
                labeled
                    .iter()
                    .map(|s| (s.prediction.unwrap(), s.label.unwrap())),
            )?)
        };
        let (eo, eo_absent_reason) = if labeled.is_empty() {
            (None, Some("labels absent".to_string()))
        } else {
            match eo_ratio(
                labeled
                    .iter()
                    .map(|s| (s.prediction.unwrap(), s.group.as_str(), s.label.unwrap())),
                declared,
            ) {
                Ok(v) => (Some(v), None),
                Err(e @ Error::EmptyStratum { .. }) => (None, Some(e.to_string())),
                Err(e) => return Err(e),
            }
        };
        Ok(Self {
            accuracy,
            dp_ratio: dp,
            eo_ratio: eo,
            eo_absent_reason,
            rates,
            n: evaluated.len(),
            abstentions,
        })
    }

    /// Flat JSON object: accuracy, dp_ratio, eo_ratio, rate_<group>, n,
    /// abstentions. Absent metrics serialize as null.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert("accuracy".to_string(), json_opt(self.accuracy));
        map.insert("dp_ratio".to_string(), serde_json::json!(self.dp_ratio));
        map.insert("eo_ratio".to_string(), json_opt(self.eo_ratio));
        for (group, _) in self.rates.iter() {
            map.insert(format!("rate_{group}"), json_opt(self.rates.rate(group)));
        }
        map.insert("n".to_string(), serde_json::json!(self.n));
        map.insert(
            "abstentions".to_string(),
            serde_json::json!(self.abstentions),
        );
        serde_json::Value::Object(map)
    }
}

fn json_opt(v: Option<f64>) -> serde_json::Value {
    match v {
        Some(x) => serde_json::json!(x),
        None => serde_json::Value::Null,
    }
}

impl Serialize for EvalReport {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(serializer)
    }
}
