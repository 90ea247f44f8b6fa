//! Group metrics, quartile fences, rankings, kernel-PCA projection and
//! patient timelines.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use chrono::{DateTime, Datelike, Duration, NaiveDate, TimeZone, Utc};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::community::SuspiciousGroup;
use crate::covisit::CoVisitNetwork;
use crate::ingest::{DateRange, DrugTable, Gender, InstitutionType, PatientTable, VisitTable};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalyticsError {
    #[error("no groups to summarize")]
    NoGroups,
    #[error("insufficient groups: projection needs at least 2, got {0}")]
    InsufficientGroups(usize),
    #[error("invalid time range: start is after end")]
    InvalidRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    P,
    F,
    C,
    D,
    G,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::P, Metric::F, Metric::C, Metric::D, Metric::G];

    /// Sign applied before statistics so that larger always means more
    /// suspicious: tighter cadence (d) and shorter gaps (g) are negated.
    pub fn orientation(self) -> f64 {
        match self {
            Metric::P | Metric::F | Metric::C => 1.0,
            Metric::D | Metric::G => -1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::P => "p",
            Metric::F => "f",
            Metric::C => "c",
            Metric::D => "d",
            Metric::G => "g",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group_id: String,
    /// Member count.
    pub p: usize,
    /// Total fee per capita over all member visits.
    pub f: f64,
    /// Number of co-visits between members.
    pub c: usize,
    /// Mean days between consecutive joint-visit events (0 with fewer than
    /// two). Pair midpoints within theta1 of an event's first midpoint belong
    /// to that event, so the pairs of one joint visit count once.
    pub d: f64,
    /// Smallest co-visit gap, minutes.
    pub g: f64,
}

impl GroupMetrics {
    pub fn value(&self, m: Metric) -> f64 {
        match m {
            Metric::P => self.p as f64,
            Metric::F => self.f,
            Metric::C => self.c as f64,
            Metric::D => self.d,
            Metric::G => self.g,
        }
    }

    pub fn oriented(&self, m: Metric) -> f64 {
        m.orientation() * self.value(m)
    }

    fn set(&mut self, m: Metric, v: f64) {
        match m {
            Metric::P => self.p = v as usize,
            Metric::F => self.f = v,
            Metric::C => self.c = v as usize,
            Metric::D => self.d = v,
            Metric::G => self.g = v,
        }
    }

    /// Returns a copy with metric `m` replaced (used by property tests and
    /// what-if tooling).
    pub fn with(&self, m: Metric, v: f64) -> Self {
        let mut out = self.clone();
        out.set(m, v);
        out
    }
}

fn metrics_with_fees(
    group: &SuspiciousGroup,
    network: &CoVisitNetwork,
    fees: &HashMap<&str, f64>,
) -> GroupMetrics {
    let p = group.members.len();
    let total_fee: f64 = group
        .members
        .iter()
        .map(|m| fees.get(m.as_str()).copied().unwrap_or(0.0))
        .sum();

    let idx: Vec<usize> = group
        .members
        .iter()
        .filter_map(|m| network.node_index(m))
        .collect();
    let mut events = Vec::new();
    let mut g = f64::INFINITY;
    for (x, &i) in idx.iter().enumerate() {
        for &j in &idx[x + 1..] {
            if let Some(e) = network.edges.get(&(i.min(j), i.max(j))) {
                for pair in &e.pairs {
                    events.push(pair.midpoint().timestamp());
                    g = g.min(pair.gap_minutes);
                }
            }
        }
    }
    let c = events.len();
    events.sort_unstable();
    let window = (network.params.theta1 * 60.0) as i64;
    let mut starts: Vec<i64> = Vec::new();
    for t in events {
        if starts.last().is_none_or(|&s| t - s > window) {
            starts.push(t);
        }
    }
    let d = match starts.len() {
        0 | 1 => 0.0,
        k => (starts[k - 1] - starts[0]) as f64 / 86_400.0 / (k - 1) as f64,
    };
    GroupMetrics {
        group_id: group.group_id.clone(),
        p,
        f: if p == 0 { 0.0 } else { total_fee / p as f64 },
        c,
        d,
        g: if g.is_finite() { g } else { 0.0 },
    }
}

fn fee_totals(visits: &VisitTable) -> HashMap<&str, f64> {
    let mut fees: HashMap<&str, f64> = HashMap::new();
    for v in &visits.visits {
        *fees.entry(v.patient_id.as_str()).or_insert(0.0) += v.total_fee;
    }
    fees
}

/// Metrics for one group. Co-visit event times are the midpoints of each
/// matched visit pair; `d` is the mean successive difference of the sorted
/// event times, in days.
pub fn group_metrics(group: &SuspiciousGroup, network: &CoVisitNetwork, visits: &VisitTable) -> GroupMetrics {
    metrics_with_fees(group, network, &fee_totals(visits))
}

pub fn all_group_metrics(
    groups: &[SuspiciousGroup],
    network: &CoVisitNetwork,
    visits: &VisitTable,
) -> Vec<GroupMetrics> {
    let fees = fee_totals(visits);
    groups
        .iter()
        .map(|g| metrics_with_fees(g, network, &fees))
        .collect()
}

/// Quantile of sorted data by linear interpolation between closest ranks
/// (position `q * (n - 1)`).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FenceStats {
    pub lower_fence: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub upper_fence: f64,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl FenceStats {
    pub fn from_values(values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let q1 = quantile(&sorted, 0.25);
        let median = quantile(&sorted, 0.5);
        let q3 = quantile(&sorted, 0.75);
        let iqr = q3 - q1;
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            lower_fence: q1 - 1.5 * iqr,
            q1,
            median,
            q3,
            upper_fence: q3 + 1.5 * iqr,
            mean,
            std: var.sqrt(),
        }
    }

    pub fn z(&self, v: f64) -> f64 {
        if self.std > 0.0 {
            (v - self.mean) / self.std
        } else {
            0.0
        }
    }
}

/// Fence statistics of the oriented metric values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub p: FenceStats,
    pub f: FenceStats,
    pub c: FenceStats,
    pub d: FenceStats,
    pub g: FenceStats,
    pub orientation: BTreeMap<Metric, f64>,
}

impl MetricStats {
    pub fn get(&self, m: Metric) -> &FenceStats {
        match m {
            Metric::P => &self.p,
            Metric::F => &self.f,
            Metric::C => &self.c,
            Metric::D => &self.d,
            Metric::G => &self.g,
        }
    }
}

pub fn metric_stats(all: &[GroupMetrics]) -> Result<MetricStats, AnalyticsError> {
    if all.is_empty() {
        return Err(AnalyticsError::NoGroups);
    }
    let stats = |m: Metric| {
        let vals: Vec<f64> = all.iter().map(|g| g.oriented(m)).collect();
        FenceStats::from_values(&vals)
    };
    Ok(MetricStats {
        p: stats(Metric::P),
        f: stats(Metric::F),
        c: stats(Metric::C),
        d: stats(Metric::D),
        g: stats(Metric::G),
        orientation: Metric::ALL.iter().map(|&m| (m, m.orientation())).collect(),
    })
}

/// Metrics whose oriented value lies above the upper fence.
pub fn outlier_flags(metrics: &GroupMetrics, stats: &MetricStats) -> Vec<Metric> {
    Metric::ALL
        .into_iter()
        .filter(|&m| metrics.oriented(m) > stats.get(m).upper_fence)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankKey {
    P,
    F,
    C,
    D,
    G,
    Overall,
}

impl RankKey {
    pub fn metric(self) -> Option<Metric> {
        match self {
            RankKey::P => Some(Metric::P),
            RankKey::F => Some(Metric::F),
            RankKey::C => Some(Metric::C),
            RankKey::D => Some(Metric::D),
            RankKey::G => Some(Metric::G),
            RankKey::Overall => None,
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "p" => RankKey::P,
            "f" => RankKey::F,
            "c" => RankKey::C,
            "d" => RankKey::D,
            "g" => RankKey::G,
            "overall" => RankKey::Overall,
            _ => return None,
        })
    }
}

/// Mean z-score of the oriented metrics.
pub fn overall_score(metrics: &GroupMetrics, stats: &MetricStats) -> f64 {
    Metric::ALL
        .iter()
        .map(|&m| stats.get(m).z(metrics.oriented(m)))
        .sum::<f64>()
        / Metric::ALL.len() as f64
}

/// Group ids from most to least suspicious under `key`; ties by group id.
pub fn rank_groups(all: &[GroupMetrics], stats: &MetricStats, key: RankKey) -> Vec<String> {
    let score = |g: &GroupMetrics| match key.metric() {
        Some(m) => g.oriented(m),
        None => overall_score(g, stats),
    };
    let mut scored: Vec<(f64, &str)> = all.iter().map(|g| (score(g), g.group_id.as_str())).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().map(|(_, id)| id.to_string()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedGroup {
    pub group_id: String,
    pub x: f64,
    pub y: f64,
}

/// Oriented metrics z-scored per column (population std; constant columns
/// become 0).
pub fn standardized_features(all: &[GroupMetrics]) -> Vec<[f64; 5]> {
    let mut out = vec![[0.0; 5]; all.len()];
    for (k, &m) in Metric::ALL.iter().enumerate() {
        let vals: Vec<f64> = all.iter().map(|g| g.oriented(m)).collect();
        let stats = FenceStats::from_values(&vals);
        for (row, v) in out.iter_mut().zip(&vals) {
            row[k] = stats.z(*v);
        }
    }
    out
}

/// Two-dimensional RBF kernel-PCA embedding of the standardized metrics.
///
/// The bandwidth is `1 / (d * mean feature variance)` with `d = 5`
/// features. Each component is scaled by the square root of its eigenvalue
/// and flipped so that its largest-magnitude coordinate is positive.
pub fn project_groups(all: &[GroupMetrics]) -> Result<Vec<ProjectedGroup>, AnalyticsError> {
    let n = all.len();
    if n < 2 {
        return Err(AnalyticsError::InsufficientGroups(n));
    }
    let x = standardized_features(all);
    let dims = Metric::ALL.len() as f64;
    let mean_var = (0..5)
        .map(|k| {
            let mean = x.iter().map(|r| r[k]).sum::<f64>() / n as f64;
            x.iter().map(|r| (r[k] - mean).powi(2)).sum::<f64>() / n as f64
        })
        .sum::<f64>()
        / dims;
    let gamma = if mean_var > 0.0 { 1.0 / (dims * mean_var) } else { 1.0 / dims };

    let k = DMatrix::from_fn(n, n, |i, j| {
        let d2: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b).powi(2)).sum();
        (-gamma * d2).exp()
    });
    let row_means: Vec<f64> = (0..n).map(|i| k.row(i).sum() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let centered = DMatrix::from_fn(n, n, |i, j| k[(i, j)] - row_means[i] - row_means[j] + grand);

    let eig = SymmetricEigen::new(centered);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let trace: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let tol = 1e-10 * trace.max(1.0);

    let mut coords = vec![[0.0f64; 2]; n];
    for (c, &e) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[e];
        if lambda <= tol {
            continue;
        }
        let scale = lambda.sqrt();
        let col: Vec<f64> = (0..n).map(|i| eig.eigenvectors[(i, e)] * scale).collect();
        let pivot = col
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > col[best].abs() + 1e-12 { i } else { best });
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for (row, v) in coords.iter_mut().zip(col) {
            row[c] = sign * v;
        }
    }
    Ok(all
        .iter()
        .zip(coords)
        .map(|(g, [x, y])| ProjectedGroup {
            group_id: g.group_id.clone(),
            x,
            y,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Day,
    Week,
    Month,
}

impl Granularity {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "day" => Some(Granularity::Day),
            "week" => Some(Granularity::Week),
            "month" => Some(Granularity::Month),
            _ => None,
        }
    }
}

/// Start of the UTC bucket containing `t`. Weeks start on Monday.
pub fn bucket_start(t: DateTime<Utc>, granularity: Granularity) -> DateTime<Utc> {
    let date = t.date_naive();
    let start: NaiveDate = match granularity {
        Granularity::Day => date,
        Granularity::Week => date - Duration::days(date.weekday().num_days_from_monday() as i64),
        Granularity::Month => date.with_day(1).expect("day 1 exists"),
    };
    Utc.from_utc_datetime(&start.and_hms_opt(0, 0, 0).expect("midnight"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineBucket {
    pub bucket_start: DateTime<Utc>,
    pub visit_count: u32,
    pub disease_counts: BTreeMap<String, u32>,
    pub fee_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTimeline {
    pub patient_id: String,
    pub buckets: Vec<TimelineBucket>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoVisitLink {
    pub patient_a: String,
    pub patient_b: String,
    pub bucket: DateTime<Utc>,
    pub institution_id: String,
    pub count: u32,
    pub min_gap_minutes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountPoint {
    pub bucket: DateTime<Utc>,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimelineBundle {
    pub granularity: Granularity,
    pub range: DateRange,
    pub patients: Vec<PatientTimeline>,
    pub covisit_links: Vec<CoVisitLink>,
    /// Up to five most frequent disease codes among the selected patients.
    pub top_diseases: Vec<String>,
    /// Visits of the selected patients per bucket, for the overview line chart.
    pub visit_counts: Vec<CountPoint>,
}

/// Buckets the selected patients' visits inside `range` and aggregates the
/// co-visits between them whose gap is at most `covisit_gap_filter` minutes.
/// A co-visit is placed by the earlier of its two visits.
pub fn timeline(
    members: &[String],
    visits: &VisitTable,
    network: &CoVisitNetwork,
    range: DateRange,
    granularity: Granularity,
    covisit_gap_filter: f64,
) -> Result<TimelineBundle, AnalyticsError> {
    if range.start() > range.end() {
        return Err(AnalyticsError::InvalidRange);
    }
    let selected: HashSet<&str> = members.iter().map(String::as_str).collect();
    let mut per_patient: BTreeMap<&str, BTreeMap<DateTime<Utc>, TimelineBucket>> =
        members.iter().map(|m| (m.as_str(), BTreeMap::new())).collect();
    let mut disease_totals: BTreeMap<&str, u32> = BTreeMap::new();
    let mut counts: BTreeMap<DateTime<Utc>, u32> = BTreeMap::new();

    for v in &visits.visits {
        if !selected.contains(v.patient_id.as_str()) || !range.contains(v.timestamp) {
            continue;
        }
        let start = bucket_start(v.timestamp, granularity);
        let bucket = per_patient
            .get_mut(v.patient_id.as_str())
            .expect("selected patient")
            .entry(start)
            .or_insert_with(|| TimelineBucket {
                bucket_start: start,
                visit_count: 0,
                disease_counts: BTreeMap::new(),
                fee_sum: 0.0,
            });
        bucket.visit_count += 1;
        *bucket.disease_counts.entry(v.disease_code.clone()).or_insert(0) += 1;
        bucket.fee_sum += v.total_fee;
        *disease_totals.entry(v.disease_code.as_str()).or_insert(0) += 1;
        *counts.entry(start).or_insert(0) += 1;
    }

    let mut links: BTreeMap<(String, String, DateTime<Utc>, String), (u32, f64)> = BTreeMap::new();
    let idx: Vec<usize> = members.iter().filter_map(|m| network.node_index(m)).collect();
    for (x, &i) in idx.iter().enumerate() {
        for &j in &idx[x + 1..] {
            let (a, b) = (i.min(j), i.max(j));
            let Some(edge) = network.edges.get(&(a, b)) else {
                continue;
            };
            for pair in &edge.pairs {
                if pair.gap_minutes > covisit_gap_filter || !range.contains(pair.earlier()) {
                    continue;
                }
                let key = (
                    network.nodes[a].clone(),
                    network.nodes[b].clone(),
                    bucket_start(pair.earlier(), granularity),
                    pair.institution_id.clone(),
                );
                let e = links.entry(key).or_insert((0, f64::INFINITY));
                e.0 += 1;
                e.1 = e.1.min(pair.gap_minutes);
            }
        }
    }

    let mut top: Vec<(&str, u32)> = disease_totals.into_iter().collect();
    top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    Ok(TimelineBundle {
        granularity,
        range,
        patients: per_patient
            .into_iter()
            .map(|(id, buckets)| PatientTimeline {
                patient_id: id.to_string(),
                buckets: buckets.into_values().collect(),
            })
            .collect(),
        covisit_links: links
            .into_iter()
            .map(|((patient_a, patient_b, bucket, institution_id), (count, min_gap))| CoVisitLink {
                patient_a,
                patient_b,
                bucket,
                institution_id,
                count,
                min_gap_minutes: min_gap,
            })
            .collect(),
        top_diseases: top.into_iter().take(5).map(|(c, _)| c.to_string()).collect(),
        visit_counts: counts
            .into_iter()
            .map(|(bucket, count)| CountPoint { bucket, count })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodeCount {
    pub code: String,
    pub name: String,
    pub count: u32,
    pub fee: f64,
}

/// Attribute summary of one patient, for detail pop-ups and the stacked
/// attribute charts of a group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSummary {
    pub patient_id: String,
    pub age: u32,
    pub gender: Gender,
    pub visit_count: u32,
    pub total_fee: f64,
    pub institution_visits: BTreeMap<InstitutionType, u32>,
    pub diseases: Vec<CodeCount>,
    /// Drug purchases; `fee` is not tracked per drug and stays 0.
    pub drugs: Vec<CodeCount>,
}

pub fn patient_summary(
    patient_id: &str,
    patients: &PatientTable,
    visits: &VisitTable,
    drugs: &DrugTable,
) -> Option<PatientSummary> {
    let record = patients.get(patient_id)?;
    let mut summary = PatientSummary {
        patient_id: record.patient_id.clone(),
        age: record.age,
        gender: record.gender,
        visit_count: 0,
        total_fee: 0.0,
        institution_visits: BTreeMap::new(),
        diseases: Vec::new(),
        drugs: Vec::new(),
    };
    let mut diseases: BTreeMap<&str, CodeCount> = BTreeMap::new();
    let mut own_visits = HashSet::new();
    for v in visits.visits.iter().filter(|v| v.patient_id == patient_id) {
        summary.visit_count += 1;
        summary.total_fee += v.total_fee;
        *summary.institution_visits.entry(v.institution_type).or_insert(0) += 1;
        let e = diseases.entry(v.disease_code.as_str()).or_insert_with(|| CodeCount {
            code: v.disease_code.clone(),
            name: v.disease_name.clone(),
            count: 0,
            fee: 0.0,
        });
        e.count += 1;
        e.fee += v.total_fee;
        own_visits.insert(v.visit_id.as_str());
    }
    let mut drug_counts: BTreeMap<&str, CodeCount> = BTreeMap::new();
    for d in drugs.rows.iter().filter(|d| own_visits.contains(d.visit_id.as_str())) {
        drug_counts
            .entry(d.drug_code.as_str())
            .or_insert_with(|| CodeCount {
                code: d.drug_code.clone(),
                name: d.drug_name.clone(),
                count: 0,
                fee: 0.0,
            })
            .count += 1;
    }
    let by_count = |a: &CodeCount, b: &CodeCount| b.count.cmp(&a.count).then_with(|| a.code.cmp(&b.code));
    summary.diseases = diseases.into_values().collect();
    summary.diseases.sort_by(by_count);
    summary.drugs = drug_counts.into_values().collect();
    summary.drugs.sort_by(by_count);
    Some(summary)
}
