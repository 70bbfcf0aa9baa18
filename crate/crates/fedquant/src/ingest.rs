//! CSV ingestion: turn a grouped value column into one empirical client per
//! group, with small-group merging and oversampling to balance sizes.

use crate::config::ClientSpec;
use crate::dist::{DistributionSpec, SamplingMode};
use crate::error::{Error, Result};
use crate::streams::{substream, Domain};
use rand::Rng;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Transform {
    #[default]
    None,
    /// Natural log; requires strictly positive values.
    Log,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    pub group_column: String,
    pub value_column: String,
    /// Merge this many of the smallest groups into an "Others" group.
    pub merge_smallest: usize,
    pub transform: Transform,
    pub delimiter: u8,
    pub seed: u64,
    /// Level and rate stamped on every produced client; callers may adjust
    /// per client afterwards.
    pub quantile_level: f64,
    pub truthful_rate: f64,
}

impl IngestOptions {
    pub fn new(group_column: &str, value_column: &str) -> Self {
        Self {
            group_column: group_column.to_string(),
            value_column: value_column.to_string(),
            merge_smallest: 0,
            transform: Transform::None,
            delimiter: b',',
            seed: 0,
            quantile_level: 0.5,
            truthful_rate: 0.9,
        }
    }
}

/// Bookkeeping for one produced client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupSummary {
    pub name: String,
    /// Row count before balancing (after any merge).
    pub original_size: usize,
    /// Row count after oversampling.
    pub balanced_size: usize,
    /// Names of the groups folded into this one, if it is a merge product.
    pub merged_from: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct IngestReport {
    /// One client per group, ids in ascending group-name order, uniform
    /// weights.
    pub clients: Vec<ClientSpec>,
    /// Aligned with `clients` by index.
    pub groups: Vec<GroupSummary>,
}

/// Read a header-rowed CSV, group the value column, merge the smallest
/// groups, oversample every group to the largest size (originals kept,
/// extras drawn with replacement from a seeded stream), and apply the
/// transform. Deterministic given the options.
pub fn ingest_csv(path: &Path, options: &IngestOptions) -> Result<IngestReport> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(options.delimiter)
        .from_path(path)
        .map_err(|e| Error::config(format!("cannot open {}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?
        .clone();
    let group_idx = headers
        .iter()
        .position(|h| h == options.group_column)
        .ok_or_else(|| {
            Error::config(format!(
                "column '{}' not found in {}",
                options.group_column,
                path.display()
            ))
        })?;
    let value_idx = headers
        .iter()
        .position(|h| h == options.value_column)
        .ok_or_else(|| {
            Error::config(format!(
                "column '{}' not found in {}",
                options.value_column,
                path.display()
            ))
        })?;

    // BTreeMap keeps group iteration in name order everywhere below.
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| Error::config(format!("row {row}: {e}")))?;
        let name = record
            .get(group_idx)
            .ok_or_else(|| Error::config(format!("row {row}: missing group field")))?;
        let raw = record
            .get(value_idx)
            .ok_or_else(|| Error::config(format!("row {row}: missing value field")))?;
        let value: f64 = raw.trim().parse().map_err(|_| {
            Error::config(format!("row {row}: value '{raw}' is not a number"))
        })?;
        if !value.is_finite() {
            return Err(Error::config(format!("row {row}: value {value} is not finite")));
        }
        if options.transform == Transform::Log && value <= 0.0 {
            return Err(Error::config(format!(
                "row {row}: value {value} is not positive, log transform impossible"
            )));
        }
        groups.entry(name.to_string()).or_default().push(value);
    }

    if groups.is_empty() {
        return Err(Error::config(format!("{} has no data rows", path.display())));
    }
    if options.merge_smallest >= groups.len() {
        return Err(Error::config(format!(
            "cannot merge {} groups out of {}",
            options.merge_smallest,
            groups.len()
        )));
    }

    let mut merged_from = None;
    if options.merge_smallest > 0 {
        // Smallest by size, ties by name, so the merge set is deterministic.
        let mut order: Vec<(usize, String)> = groups
            .iter()
            .map(|(name, vals)| (vals.len(), name.clone()))
            .collect();
        order.sort();
        let mut folded_names: Vec<String> = order
            .into_iter()
            .take(options.merge_smallest)
            .map(|(_, name)| name)
            .collect();
        folded_names.sort();
        let mut folded_values = Vec::new();
        for name in &folded_names {
            folded_values.extend(groups.remove(name).expect("selected group exists"));
        }
        groups.insert("Others".to_string(), folded_values);
        merged_from = Some(folded_names);
    }

    let max_size = groups.values().map(Vec::len).max().expect("non-empty");

    let mut clients = Vec::with_capacity(groups.len());
    let mut summaries = Vec::with_capacity(groups.len());
    let weight = 1.0 / groups.len() as f64;
    for (id, (name, mut values)) in groups.into_iter().enumerate() {
        let original_size = values.len();
        let mut rng = substream(options.seed, Domain::Ingest, 0, id as u64);
        while values.len() < max_size {
            let pick = rng.random_range(0..original_size);
            values.push(values[pick]);
        }
        if options.transform == Transform::Log {
            for v in values.iter_mut() {
                *v = v.ln();
            }
        }
        summaries.push(GroupSummary {
            merged_from: if name == "Others" { merged_from.clone() } else { None },
            name: name.clone(),
            original_size,
            balanced_size: values.len(),
        });
        clients.push(ClientSpec {
            id: id as u64,
            weight,
            quantile_level: options.quantile_level,
            truthful_rate: options.truthful_rate,
            source: DistributionSpec::Empirical {
                values,
                mode: SamplingMode::WithReplacement,
            },
        });
    }

    for client in &clients {
        client.validate()?;
    }
    Ok(IngestReport {
        clients,
        groups: summaries,
    })
}
