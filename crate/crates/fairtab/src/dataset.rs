//! Tabular dataset handling: feature schemas with categorical decoders, CSV
//! loading, stratified splitting, and continuous-value binning.
//!
//! A schema declares the feature order, how raw categorical codes decode to
//! display strings (e.g. a sex code of 1 becomes "male"), which feature is
//! the protected attribute, the answer-label vocabulary, and the task
//! instructions paragraph. Everything downstream treats records as immutable
//! values.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::fnv1a64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Categorical,
    Integer,
    Continuous,
}

/// One column of the tabular schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Raw code -> display string; required for categorical features and must
    /// cover every observed code.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decoder: Option<BTreeMap<String, String>>,
    /// Strictly increasing edges for similarity binning (continuous only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin_edges: Option<Vec<f64>>,
}

/// Full dataset description: ordered features, protected attribute, label
/// vocabulary, and task instructions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub name: String,
    pub features: Vec<FeatureSpec>,
    pub protected_attribute: String,
    pub label_column: String,
    pub positive_label_code: String,
    pub negative_label_code: String,
    pub positive_label_text: String,
    pub negative_label_text: String,
    pub task_instructions: String,
}

/// Trim and lowercase a decoded protected value into a group name
/// (e.g. " Male" -> "male").
pub fn normalize_group(display: &str) -> String {
    display.trim().to_lowercase()
}

impl DatasetSchema {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let schema: DatasetSchema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for feature in &self.features {
            if !seen.insert(&feature.name) {
                return Err(Error::Schema(format!(
                    "duplicate feature '{}'",
                    feature.name
                )));
            }
            match feature.kind {
                FeatureKind::Categorical => {
                    if feature.decoder.is_none() {
                        return Err(Error::Schema(format!(
                            "categorical feature '{}' lacks a decoder",
                            feature.name
                        )));
                    }
                }
                _ => {
                    if feature.decoder.is_some() {
                        return Err(Error::Schema(format!(
                            "numeric feature '{}' must not declare a decoder",
                            feature.name
                        )));
                    }
                }
            }
            if let Some(edges) = &feature.bin_edges {
                if feature.kind != FeatureKind::Continuous {
                    return Err(Error::Schema(format!(
                        "bin_edges on non-continuous feature '{}'",
                        feature.name
                    )));
                }
                if edges.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Schema(format!(
                        "bin_edges for '{}' not strictly increasing",
                        feature.name
                    )));
                }
            }
        }
        let protected = self
            .features
            .iter()
            .find(|f| f.name == self.protected_attribute)
            .ok_or_else(|| {
                Error::Schema(format!(
                    "protected attribute '{}' is not a feature",
                    self.protected_attribute
                ))
            })?;
        let decoder = protected
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Schema("protected attribute must be categorical".to_string()))?;
        let values: BTreeSet<String> = decoder.values().map(|v| normalize_group(v)).collect();
        if values.len() != 2 {
            return Err(Error::Schema(format!(
                "protected attribute '{}' must decode to exactly two values, got {:?}",
                self.protected_attribute, values
            )));
        }
        if self.positive_label_text == self.negative_label_text {
            return Err(Error::Schema("label texts must be distinct".to_string()));
        }
        if seen.contains(&self.label_column) {
            return Err(Error::Schema(format!(
                "label column '{}' collides with a feature",
                self.label_column
            )));
        }
        Ok(())
    }

    pub fn feature(&self, name: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.name == name)
    }

    /// The two normalized protected group names, in sorted order.
    pub fn protected_values(&self) -> (String, String) {
        let decoder = self
            .feature(&self.protected_attribute)
            .and_then(|f| f.decoder.as_ref())
            .expect("validated schema");
        let values: BTreeSet<String> = decoder.values().map(|v| normalize_group(v)).collect();
        let mut it = values.into_iter();
        (it.next().unwrap(), it.next().unwrap())
    }

    pub fn label_text(&self, label: u8) -> &str {
        if label == 1 {
            &self.positive_label_text
        } else {
            &self.negative_label_text
        }
    }

    /// Fill in missing bin edges for continuous features from pool quantiles
    /// (`n_bins` half-open intervals). Explicitly declared edges are kept.
    pub fn with_quantile_bins(&self, pool: &[Record], n_bins: usize) -> Result<DatasetSchema> {
        if n_bins < 2 {
            return Err(Error::Schema("n_bins must be at least 2".to_string()));
        }
        let mut schema = self.clone();
        for feature in &mut schema.features {
            if feature.kind != FeatureKind::Continuous || feature.bin_edges.is_some() {
                continue;
            }
            let mut values: Vec<f64> = pool
                .iter()
                .filter_map(|r| match r.value(&feature.name) {
                    Some(FieldValue::Continuous(v)) => Some(*v),
                    _ => None,
                })
                .collect();
            if values.is_empty() {
                return Err(Error::Schema(format!(
                    "cannot compute quantile bins for '{}' from an empty pool",
                    feature.name
                )));
            }
            values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut edges = Vec::new();
            for k in 1..n_bins {
                let idx = (k * values.len() / n_bins).min(values.len() - 1);
                let edge = values[idx];
                if edges.last().is_none_or(|last| *last < edge) {
                    edges.push(edge);
                }
            }
            feature.bin_edges = Some(edges);
        }
        Ok(schema)
    }
}

/// One decoded cell value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FieldValue {
    Categorical {
        code: String,
        display: String,
    },
    Integer(i64),
    Continuous(f64),
    /// Continuous value replaced by its bin index (similarity matching only).
    Bin(usize),
}

impl FieldValue {
    /// Rendering used in prompts: decoded categoricals verbatim, integers
    /// without decimals, continuous values always with a decimal point.
    pub fn display_text(&self) -> String {
        match self {
            FieldValue::Categorical { display, .. } => display.clone(),
            FieldValue::Integer(v) => v.to_string(),
            FieldValue::Continuous(v) => render_continuous(*v),
            FieldValue::Bin(i) => i.to_string(),
        }
    }

    /// Raw CSV form: the categorical code, or the canonical numeric text.
    pub fn raw_text(&self) -> String {
        match self {
            FieldValue::Categorical { code, .. } => code.clone(),
            FieldValue::Integer(v) => v.to_string(),
            FieldValue::Continuous(v) => render_continuous(*v),
            FieldValue::Bin(i) => i.to_string(),
        }
    }
}

fn render_continuous(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

/// One tabular row: feature values, normalized protected group, optional
/// binary label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    values: BTreeMap<String, FieldValue>,
    group: String,
    label: Option<u8>,
}

impl Record {
    /// Build a record, checking that the value keys match the schema features
    /// and that the group is one of the schema's two protected values.
    pub fn new(
        schema: &DatasetSchema,
        values: BTreeMap<String, FieldValue>,
        group: String,
        label: Option<u8>,
    ) -> Result<Self> {
        if values.len() != schema.features.len()
            || schema
                .features
                .iter()
                .any(|f| !values.contains_key(&f.name))
        {
            return Err(Error::Schema(
                "record keys do not match schema features".to_string(),
            ));
        }
        let (a, b) = schema.protected_values();
        if group != a && group != b {
            return Err(Error::Schema(format!("unknown group '{group}'")));
        }
        Ok(Self {
            values,
            group,
            label,
        })
    }

    pub fn value(&self, feature: &str) -> Option<&FieldValue> {
        self.values.get(feature)
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn label(&self) -> Option<u8> {
        self.label
    }

    pub fn with_label(&self, label: Option<u8>) -> Record {
        let mut r = self.clone();
        r.label = label;
        r
    }

    /// Raw field texts in schema order plus the raw label code; inverts
    /// [`load_csv`] for canonically formatted sources.
    pub fn raw_fields(&self, schema: &DatasetSchema) -> Vec<String> {
        let mut fields: Vec<String> = schema
            .features
            .iter()
            .map(|f| self.values[&f.name].raw_text())
            .collect();
        if let Some(label) = self.label {
            fields.push(if label == 1 {
                schema.positive_label_code.clone()
            } else {
                schema.negative_label_code.clone()
            });
        }
        fields
    }
}

/// Load a headered CSV whose columns are exactly the schema features plus the
/// label column, in any order. Every parse problem is reported with its
/// 1-based data row index.
pub fn load_csv(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path)?;
    load_csv_reader(file, schema)
}

pub fn load_csv_reader<R: std::io::Read>(reader: R, schema: &DatasetSchema) -> Result<Vec<Record>> {
    let mut csv_reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = csv_reader.headers()?.clone();
    let mut column_of: BTreeMap<&str, usize> = BTreeMap::new();
    for (idx, header) in headers.iter().enumerate() {
        column_of.insert(header, idx);
    }
    let mut expected: BTreeSet<&str> = schema.features.iter().map(|f| f.name.as_str()).collect();
    expected.insert(&schema.label_column);
    for feature in &expected {
        if !column_of.contains_key(*feature) {
            return Err(Error::MissingColumn {
                row: 0,
                column: (*feature).to_string(),
            });
        }
    }
    for header in headers.iter() {
        if !expected.contains(header) {
            return Err(Error::Schema(format!("unexpected column '{header}'")));
        }
    }

    let protected_decoder = schema
        .feature(&schema.protected_attribute)
        .and_then(|f| f.decoder.as_ref())
        .ok_or_else(|| Error::Schema("protected attribute must be categorical".to_string()))?
        .clone();

    let mut records = Vec::new();
    for (i, row) in csv_reader.records().enumerate() {
        let row = row?;
        let row_index = i + 1;
        let mut values = BTreeMap::new();
        for feature in &schema.features {
            let raw =
                row.get(column_of[feature.name.as_str()])
                    .ok_or_else(|| Error::MissingColumn {
                        row: row_index,
                        column: feature.name.clone(),
                    })?;
            if raw.contains('\n') || raw.contains('\r') {
                return Err(Error::Schema(format!(
                    "row {row_index}: value for '{}' contains a line break",
                    feature.name
                )));
            }
            let value = match feature.kind {
                FeatureKind::Categorical => {
                    let decoder = feature.decoder.as_ref().expect("validated schema");
                    let display = decoder.get(raw).ok_or_else(|| Error::UnknownCode {
                        row: row_index,
                        feature: feature.name.clone(),
                        code: raw.to_string(),
                    })?;
                    FieldValue::Categorical {
                        code: raw.to_string(),
                        display: display.clone(),
                    }
                }
                FeatureKind::Integer => {
                    FieldValue::Integer(raw.trim().parse().map_err(|_| Error::NonNumeric {
                        row: row_index,
                        feature: feature.name.clone(),
                        value: raw.to_string(),
                    })?)
                }
                FeatureKind::Continuous => {
                    FieldValue::Continuous(raw.trim().parse().map_err(|_| Error::NonNumeric {
                        row: row_index,
                        feature: feature.name.clone(),
                        value: raw.to_string(),
                    })?)
                }
            };
            values.insert(feature.name.clone(), value);
        }
        let raw_label = row
            .get(column_of[schema.label_column.as_str()])
            .ok_or_else(|| Error::MissingColumn {
                row: row_index,
                column: schema.label_column.clone(),
            })?;
        let label = if raw_label == schema.positive_label_code {
            1
        } else if raw_label == schema.negative_label_code {
            0
        } else {
            return Err(Error::Schema(format!(
                "row {row_index}: label code '{raw_label}' matches neither '{}' nor '{}'",
                schema.positive_label_code, schema.negative_label_code
            )));
        };
        let raw_protected = row
            .get(column_of[schema.protected_attribute.as_str()])
            .expect("checked above");
        let group = normalize_group(&protected_decoder[raw_protected]);
        records.push(Record {
            values,
            group,
            label: Some(label),
        });
    }
    Ok(records)
}

/// Requested split sizes; the pool is the remainder.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitPlan {
    pub eval_size: usize,
    pub validation_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct Splits {
    pub eval: Vec<Record>,
    pub validation: Vec<Record>,
    pub pool: Vec<Record>,
}

/// Deterministic split into eval/validation/pool, stratified by
/// (group, label) so small validation sets still contain both groups and both
/// labels. Identical inputs yield identical partitions.
pub fn split(records: &[Record], plan: &SplitPlan) -> Result<Splits> {
    if plan.eval_size + plan.validation_size > records.len() {
        return Err(Error::Split(format!(
            "eval {} + validation {} exceeds {} records",
            plan.eval_size,
            plan.validation_size,
            records.len()
        )));
    }
    // Strata keyed by (group, label), in sorted key order.
    let mut strata: BTreeMap<(String, Option<u8>), Vec<usize>> = BTreeMap::new();
    for (i, record) in records.iter().enumerate() {
        strata
            .entry((record.group.clone(), record.label))
            .or_default()
            .push(i);
    }
    let keys: Vec<(String, Option<u8>)> = strata.keys().cloned().collect();
    for key in &keys {
        let seed = plan.seed ^ fnv1a64(format!("{}/{:?}", key.0, key.1).as_bytes());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        strata.get_mut(key).unwrap().shuffle(&mut rng);
    }

    let sizes: Vec<usize> = keys.iter().map(|k| strata[k].len()).collect();
    let mut eval_alloc = allocate_proportionally(plan.eval_size, &sizes);
    ensure_group_presence(&keys, &sizes, &mut eval_alloc, plan.eval_size);
    let remaining: Vec<usize> = sizes
        .iter()
        .zip(&eval_alloc)
        .map(|(size, taken)| size - taken)
        .collect();
    let val_alloc = allocate_proportionally(plan.validation_size, &remaining);

    let mut eval_idx = Vec::new();
    let mut val_idx = Vec::new();
    let mut pool_idx = Vec::new();
    for (s, key) in keys.iter().enumerate() {
        let indices = &strata[key];
        let e = eval_alloc[s];
        let v = val_alloc[s];
        eval_idx.extend_from_slice(&indices[..e]);
        val_idx.extend_from_slice(&indices[e..e + v]);
        pool_idx.extend_from_slice(&indices[e + v..]);
    }
    eval_idx.sort_unstable();
    val_idx.sort_unstable();
    pool_idx.sort_unstable();
    let take = |idx: &[usize]| idx.iter().map(|&i| records[i].clone()).collect();
    Ok(Splits {
        eval: take(&eval_idx),
        validation: take(&val_idx),
        pool: take(&pool_idx),
    })
}

/// Quota-deficit greedy allocation of `total` slots across strata, capped by
/// stratum sizes. Deterministic: ties resolve by stratum order.
fn allocate_proportionally(total: usize, sizes: &[usize]) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    let mut alloc = vec![0usize; sizes.len()];
    if n == 0 || total == 0 {
        return alloc;
    }
    let quotas: Vec<f64> = sizes
        .iter()
        .map(|&s| total as f64 * s as f64 / n as f64)
        .collect();
    for _ in 0..total {
        let mut best: Option<usize> = None;
        let mut best_deficit = f64::NEG_INFINITY;
        for (i, &size) in sizes.iter().enumerate() {
            if alloc[i] >= size {
                continue;
            }
            let deficit = quotas[i] - alloc[i] as f64;
            if deficit > best_deficit {
                best_deficit = deficit;
                best = Some(i);
            }
        }
        alloc[best.expect("total <= sum(sizes)")] += 1;
    }
    alloc
}

/// Guarantee that any group with input count >= eval_size/20 receives at
/// least one eval slot, stealing from the largest allocation if needed.
fn ensure_group_presence(
    keys: &[(String, Option<u8>)],
    sizes: &[usize],
    alloc: &mut [usize],
    eval_size: usize,
) {
    if eval_size == 0 {
        return;
    }
    let groups: BTreeSet<&str> = keys.iter().map(|(g, _)| g.as_str()).collect();
    for group in groups {
        let members: Vec<usize> = keys
            .iter()
            .enumerate()
            .filter(|(_, (g, _))| g == group)
            .map(|(i, _)| i)
            .collect();
        let input_count: usize = members.iter().map(|&i| sizes[i]).sum();
        let allocated: usize = members.iter().map(|&i| alloc[i]).sum();
        if allocated > 0 || (input_count as f64) < eval_size as f64 / 20.0 {
            continue;
        }
        let donor = (0..keys.len())
            .filter(|i| !members.contains(i) && alloc[*i] > 0)
            .max_by_key(|&i| alloc[i]);
        let receiver = members
            .iter()
            .copied()
            .filter(|&i| sizes[i] > 0)
            .max_by_key(|&i| sizes[i]);
        if let (Some(donor), Some(receiver)) = (donor, receiver) {
            alloc[donor] -= 1;
            alloc[receiver] += 1;
        }
    }
}

/// Index of the half-open interval containing `v`: below the first edge is
/// bin 0, at or above the last edge is the last bin.
pub fn bin_index(v: f64, edges: &[f64]) -> usize {
    edges.iter().take_while(|&&e| v >= e).count()
}

/// Replace continuous values with their bin indices; categorical and integer
/// values pass through untouched.
pub fn bin_continuous(record: &Record, schema: &DatasetSchema) -> Result<Record> {
    let mut values = record.values.clone();
    for feature in &schema.features {
        if feature.kind != FeatureKind::Continuous {
            continue;
        }
        let edges = feature.bin_edges.as_ref().ok_or_else(|| {
            Error::Schema(format!(
                "continuous feature '{}' has no bin edges; call with_quantile_bins first",
                feature.name
            ))
        })?;
        if let Some(FieldValue::Continuous(v)) = values.get(&feature.name) {
            let bin = bin_index(*v, edges);
            values.insert(feature.name.clone(), FieldValue::Bin(bin));
        }
    }
    Ok(Record {
        values,
        group: record.group.clone(),
        label: record.label,
    })
}
