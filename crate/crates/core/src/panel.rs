//! Longitudinal claim-count panels and their CSV form.
//!
//! A panel holds, for each policyholder `i`, a ragged sequence of periods, each
//! with a claim count and a covariate vector of fixed length `p`. Storage is
//! flattened row-major so the likelihood loops can walk it without chasing
//! pointers.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FIXED_COLUMNS: [&str; 3] = ["policy_id", "period", "count"];

/// One observed period of a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Period {
    pub period: i64,
    pub count: u64,
    pub covariates: Vec<f64>,
}

/// Owned per-policy record, the unit of panel construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub id: String,
    pub periods: Vec<Period>,
}

/// Ragged longitudinal count data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClaimPanel {
    covariate_names: Vec<String>,
    ids: Vec<String>,
    /// `offsets[i]..offsets[i+1]` indexes the cells of policy `i`.
    offsets: Vec<usize>,
    period_labels: Vec<i64>,
    counts: Vec<u64>,
    /// Row-major `n_cells x p`.
    design: Vec<f64>,
}

/// Borrowed view of one policy.
#[derive(Debug, Clone, Copy)]
pub struct PolicyRef<'a> {
    panel: &'a ClaimPanel,
    index: usize,
}

impl<'a> PolicyRef<'a> {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn id(&self) -> &'a str {
        &self.panel.ids[self.index]
    }

    /// Number of periods `T_i`.
    pub fn len(&self) -> usize {
        self.panel.offsets[self.index + 1] - self.panel.offsets[self.index]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat cell indices of this policy.
    pub fn cells(&self) -> std::ops::Range<usize> {
        self.panel.offsets[self.index]..self.panel.offsets[self.index + 1]
    }

    pub fn counts(&self) -> &'a [u64] {
        &self.panel.counts[self.cells()]
    }

    pub fn period_labels(&self) -> &'a [i64] {
        &self.panel.period_labels[self.cells()]
    }

    /// Covariate row of the policy's `t`-th period.
    pub fn covariates(&self, t: usize) -> &'a [f64] {
        self.panel.covariates(self.cells().start + t)
    }

    pub fn total_count(&self) -> u64 {
        self.counts().iter().sum()
    }

    pub fn to_record(&self) -> PolicyRecord {
        PolicyRecord {
            id: self.id().to_string(),
            periods: (0..self.len())
                .map(|t| Period {
                    period: self.period_labels()[t],
                    count: self.counts()[t],
                    covariates: self.covariates(t).to_vec(),
                })
                .collect(),
        }
    }
}

impl ClaimPanel {
    /// Builds a panel, checking every invariant. Periods inside each record are
    /// sorted by label.
    pub fn from_records(covariate_names: Vec<String>, records: Vec<PolicyRecord>) -> Result<Self> {
        let p = covariate_names.len();
        if records.is_empty() {
            return Err(Error::domain("a panel needs at least one policy"));
        }
        let mut seen = HashSet::new();
        let mut panel = ClaimPanel {
            covariate_names,
            ids: Vec::with_capacity(records.len()),
            offsets: vec![0],
            period_labels: Vec::new(),
            counts: Vec::new(),
            design: Vec::new(),
        };
        for mut rec in records {
            if !seen.insert(rec.id.clone()) {
                return Err(Error::domain(format!("duplicate policy id `{}`", rec.id)));
            }
            if rec.periods.is_empty() {
                return Err(Error::domain(format!("policy `{}` has no periods", rec.id)));
            }
            rec.periods.sort_by_key(|q| q.period);
            for w in rec.periods.windows(2) {
                if w[0].period == w[1].period {
                    return Err(Error::domain(format!(
                        "policy `{}` has period {} twice",
                        rec.id, w[0].period
                    )));
                }
            }
            for q in &rec.periods {
                if q.covariates.len() != p {
                    return Err(Error::domain(format!(
                        "policy `{}` period {} has {} covariates, expected {p}",
                        rec.id,
                        q.period,
                        q.covariates.len()
                    )));
                }
                if let Some(bad) = q.covariates.iter().find(|v| !v.is_finite()) {
                    return Err(Error::domain(format!(
                        "policy `{}` period {} has non-finite covariate {bad}",
                        rec.id, q.period
                    )));
                }
                panel.period_labels.push(q.period);
                panel.counts.push(q.count);
                panel.design.extend_from_slice(&q.covariates);
            }
            panel.ids.push(rec.id);
            panel.offsets.push(panel.counts.len());
        }
        Ok(panel)
    }

    /// Panel where every policy has `periods` rows with the same layout. Used by
    /// the simulators; labels are `1..=T`.
    pub(crate) fn from_flat(
        covariate_names: Vec<String>,
        ids: Vec<String>,
        periods: &[usize],
        counts: Vec<u64>,
        design: Vec<f64>,
    ) -> Self {
        let mut offsets = Vec::with_capacity(periods.len() + 1);
        offsets.push(0);
        let mut labels = Vec::with_capacity(counts.len());
        for &t in periods {
            offsets.push(offsets.last().unwrap() + t);
            labels.extend(1..=t as i64);
        }
        debug_assert_eq!(*offsets.last().unwrap(), counts.len());
        debug_assert_eq!(design.len(), counts.len() * covariate_names.len());
        ClaimPanel {
            covariate_names,
            ids,
            offsets,
            period_labels: labels,
            counts,
            design,
        }
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    /// Number of covariates `p`.
    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    /// Number of policies `k`.
    pub fn n_policies(&self) -> usize {
        self.ids.len()
    }

    /// Total number of (policy, period) cells.
    pub fn n_cells(&self) -> usize {
        self.counts.len()
    }

    pub fn policy(&self, i: usize) -> PolicyRef<'_> {
        assert!(i < self.n_policies(), "policy index {i} out of range");
        PolicyRef { panel: self, index: i }
    }

    pub fn policies(&self) -> impl ExactSizeIterator<Item = PolicyRef<'_>> + '_ {
        (0..self.n_policies()).map(move |i| PolicyRef { panel: self, index: i })
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn covariates(&self, cell: usize) -> &[f64] {
        let p = self.n_covariates();
        &self.design[cell * p..(cell + 1) * p]
    }

    pub fn total_count(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_records(&self) -> Vec<PolicyRecord> {
        self.policies().map(|p| p.to_record()).collect()
    }

    /// `x_it' beta` for every cell.
    pub fn linear_index(&self, beta: &[f64]) -> Result<Vec<f64>> {
        let p = self.n_covariates();
        if beta.len() != p {
            return Err(Error::domain(format!(
                "coefficient vector has length {}, panel has {p} covariates",
                beta.len()
            )));
        }
        Ok(self
            .design
            .chunks_exact(p.max(1))
            .take(self.n_cells())
            .map(|row| if p == 0 { 0.0 } else { dot(row, beta) })
            .collect())
    }

    /// Keeps the first `T_i - drop` periods of every policy. Policies must keep at
    /// least one period.
    pub fn drop_last_periods(&self, drop: usize) -> Result<ClaimPanel> {
        let mut records = Vec::with_capacity(self.n_policies());
        for pol in self.policies() {
            if pol.len() <= drop {
                return Err(Error::domain(format!(
                    "policy `{}` has {} period(s); cannot hold out {drop}",
                    pol.id(),
                    pol.len()
                )));
            }
            let mut rec = pol.to_record();
            rec.periods.truncate(pol.len() - drop);
            records.push(rec);
        }
        ClaimPanel::from_records(self.covariate_names.clone(), records)
    }

    /// Serialises to the CSV layout accepted by [`parse_panel_csv`].
    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        out.push_str(&FIXED_COLUMNS.join(","));
        for name in &self.covariate_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for pol in self.policies() {
            for t in 0..pol.len() {
                out.push_str(&csv_field(pol.id()));
                out.push_str(&format!(",{},{}", pol.period_labels()[t], pol.counts()[t]));
                for v in pol.covariates(t) {
                    out.push_str(&format!(",{v:?}"));
                }
                out.push('\n');
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `lambda_it = exp(x_it' beta)` for every cell, in panel order.
pub fn linear_predictor(panel: &ClaimPanel, beta: &[f64]) -> Result<Vec<f64>> {
    let eta = panel.linear_index(beta)?;
    let lambda: Vec<f64> = eta.into_iter().map(f64::exp).collect();
    if let Some(bad) = lambda.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
        return Err(Error::domain(format!("linear predictor produced rate {bad}")));
    }
    Ok(lambda)
}

/// Parses `policy_id,period,count,<covariates...>`.
///
/// Rows are grouped by policy in order of first appearance and sorted by
/// period within a policy. Row numbers in errors are 1-based with the header
/// on row 1.
pub fn parse_panel_csv(text: &str) -> Result<ClaimPanel> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::parse(1, "<header>", e.to_string()))?
        .clone();
    for (pos, want) in FIXED_COLUMNS.iter().enumerate() {
        match headers.get(pos) {
            Some(h) if h == *want => {}
            Some(h) => {
                return Err(Error::parse(1, *want, format!("expected column `{want}` at position {}, found `{h}`", pos + 1)))
            }
            None => return Err(Error::parse(1, *want, "missing column")),
        }
    }
    let covariate_names: Vec<String> = headers.iter().skip(3).map(str::to_string).collect();
    let width = headers.len();

    let mut order: Vec<String> = Vec::new();
    let mut grouped: HashMap<String, Vec<Period>> = HashMap::new();
    let mut seen: HashSet<(String, i64)> = HashSet::new();

    for (idx, rec) in reader.records().enumerate() {
        let row = idx + 2;
        let rec = rec.map_err(|e| Error::parse(row, "<row>", e.to_string()))?;
        if rec.len() != width {
            return Err(Error::parse(
                row,
                "<row>",
                format!("expected {width} fields, found {}", rec.len()),
            ));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(Error::parse(row, "policy_id", "empty policy id"));
        }
        let period: i64 = rec[1]
            .parse()
            .map_err(|_| Error::parse(row, "period", format!("`{}` is not an integer", &rec[1])))?;
        let count: i64 = rec[2]
            .parse()
            .map_err(|_| Error::parse(row, "count", format!("`{}` is not an integer", &rec[2])))?;
        if count < 0 {
            return Err(Error::parse(row, "count", format!("negative count {count}")));
        }
        let mut covariates = Vec::with_capacity(covariate_names.len());
        for (j, name) in covariate_names.iter().enumerate() {
            let raw = &rec[3 + j];
            let v: f64 = raw
                .parse()
                .map_err(|_| Error::parse(row, name.as_str(), format!("`{raw}` is not a number")))?;
            if !v.is_finite() {
                return Err(Error::parse(row, name.as_str(), format!("non-finite value `{raw}`")));
            }
            covariates.push(v);
        }
        if !seen.insert((id.clone(), period)) {
            return Err(Error::parse(
                row,
                "period",
                format!("duplicate (policy_id, period) = ({id}, {period})"),
            ));
        }
        grouped
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id.clone());
                Vec::new()
            })
            .push(Period {
                period,
                count: count as u64,
                covariates,
            });
    }
    if order.is_empty() {
        return Err(Error::parse(2, "<row>", "no data rows"));
    }
    let records = order
        .into_iter()
        .map(|id| {
            let periods = grouped.remove(&id).unwrap_or_default();
            PolicyRecord { id, periods }
        })
        .collect();
    ClaimPanel::from_records(covariate_names, records)
}
