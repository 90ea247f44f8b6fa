//! End-to-end detection: filter → network → Louvain → groups → analytics,
//! plus the artifact renderers shared by the CLI and the HTTP service so both
//! emit identical bytes for identical inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::analytics::{
    all_group_metrics, metric_stats, outlier_flags, overall_score, project_groups, rank_groups, GroupMetrics,
    Metric, MetricStats, ProjectedGroup, RankKey,
};
use crate::community::{filter_groups, louvain, GroupsExport, Partition, SuspiciousGroupSet};
use crate::covisit::{build_network, CoVisitNetwork, CoVisitParams, ParamError};
use crate::ingest::{filter_records, FilterError, FilterSpec, PatientTable, VisitTable};

pub const DEFAULT_MIN_COMPONENT_SIZE: usize = 3;
pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("min_component_size must be at least 1")]
    MinComponentSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectParams {
    pub filter: FilterSpec,
    pub covisit: CoVisitParams,
    pub min_component_size: usize,
    pub seed: u64,
}

impl Default for DetectParams {
    fn default() -> Self {
        Self {
            filter: FilterSpec::default(),
            covisit: CoVisitParams::default(),
            min_component_size: DEFAULT_MIN_COMPONENT_SIZE,
            seed: DEFAULT_SEED,
        }
    }
}

impl DetectParams {
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.filter.validate()?;
        self.covisit.validate()?;
        if self.min_component_size == 0 {
            return Err(PipelineError::MinComponentSize);
        }
        Ok(())
    }
}

/// Per-group analytics row, in overall-rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedGroup {
    pub rank: usize,
    pub metrics: GroupMetrics,
    pub overall_score: f64,
    pub outlier_flags: Vec<Metric>,
}

#[derive(Debug, Clone)]
pub struct DetectionResult {
    pub params: DetectParams,
    /// Visits surviving the filter; all downstream numbers derive from it.
    pub visits: VisitTable,
    pub network: CoVisitNetwork,
    pub partition: Partition,
    pub groups: SuspiciousGroupSet,
    /// Metrics in group-id order.
    pub metrics: Vec<GroupMetrics>,
    /// `None` when no group survived.
    pub stats: Option<MetricStats>,
    pub ranked: Vec<RankedGroup>,
    /// Empty when fewer than two groups survived.
    pub projection: Vec<ProjectedGroup>,
}

impl DetectionResult {
    pub fn metrics_of(&self, group_id: &str) -> Option<&GroupMetrics> {
        self.metrics.iter().find(|m| m.group_id == group_id)
    }

    pub fn ranking(&self, key: RankKey) -> Vec<String> {
        match &self.stats {
            Some(stats) => rank_groups(&self.metrics, stats, key),
            None => Vec::new(),
        }
    }

    pub fn groups_export(&self) -> GroupsExport {
        GroupsExport::new(&self.groups, self.partition.modularity, self.params.seed)
    }
}

pub fn run(patients: &PatientTable, visits: &VisitTable, params: &DetectParams) -> Result<DetectionResult, PipelineError> {
    params.validate()?;
    let visits = filter_records(visits, patients, &params.filter);
    let network = build_network(&visits, &params.covisit);
    let partition = louvain(&network, params.seed);
    let groups = filter_groups(&partition, &network, params.min_component_size);
    let metrics = all_group_metrics(&groups.groups, &network, &visits);
    let stats = metric_stats(&metrics).ok();
    let mut ranked = Vec::new();
    if let Some(stats) = &stats {
        let by_id: BTreeMap<&str, &GroupMetrics> = metrics.iter().map(|m| (m.group_id.as_str(), m)).collect();
        for (i, id) in rank_groups(&metrics, stats, RankKey::Overall).iter().enumerate() {
            let m = by_id[id.as_str()];
            ranked.push(RankedGroup {
                rank: i + 1,
                metrics: m.clone(),
                overall_score: overall_score(m, stats),
                outlier_flags: outlier_flags(m, stats),
            });
        }
    }
    let projection = project_groups(&metrics).unwrap_or_default();
    Ok(DetectionResult {
        params: params.clone(),
        visits,
        network,
        partition,
        groups,
        metrics,
        stats,
        ranked,
        projection,
    })
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("export types serialize");
    s.push('\n');
    s
}

pub fn groups_json(result: &DetectionResult) -> String {
    pretty(&result.groups_export())
}

pub fn network_json(result: &DetectionResult) -> String {
    pretty(&result.network.to_export())
}

pub fn flags_field(flags: &[Metric]) -> String {
    flags.iter().map(|m| m.name()).collect::<Vec<_>>().join(";")
}

/// `group_id,p,f,c,d,g,outlier_flags`, one row per group in id order;
/// flags are `;`-separated metric names.
pub fn metrics_csv(result: &DetectionResult) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["group_id", "p", "f", "c", "d", "g", "outlier_flags"])
        .expect("in-memory write");
    for m in &result.metrics {
        let flags = result
            .stats
            .as_ref()
            .map(|s| flags_field(&outlier_flags(m, s)))
            .unwrap_or_default();
        w.write_record([
            m.group_id.clone(),
            m.p.to_string(),
            format!("{:.2}", m.f),
            m.c.to_string(),
            format!("{:.4}", m.d),
            format!("{:.2}", m.g),
            flags,
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

pub fn projection_csv(result: &DetectionResult) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["group_id", "x", "y"]).expect("in-memory write");
    for p in &result.projection {
        w.write_record([p.group_id.clone(), format!("{:.6}", p.x), format!("{:.6}", p.y)])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// Co-visits inside a group whose gap is at most `gap_filter` minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TightCoVisits {
    pub count: usize,
    pub institutions: Vec<String>,
}

pub fn tight_covisits(result: &DetectionResult, group_id: &str, gap_filter: f64) -> TightCoVisits {
    let mut count = 0;
    let mut institutions = std::collections::BTreeSet::new();
    if let Some(group) = result.groups.get(group_id) {
        for e in &group.edges {
            let Some(edge) = result.network.edge_between(&e.a, &e.b) else {
                continue;
            };
            for pair in edge.pairs.iter().filter(|p| p.gap_minutes <= gap_filter) {
                count += 1;
                institutions.insert(pair.institution_id.clone());
            }
        }
    }
    TightCoVisits {
        count,
        institutions: institutions.into_iter().collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportGroup {
    #[serde(flatten)]
    pub ranked: RankedGroup,
    pub members: Vec<String>,
    pub tight_covisits: TightCoVisits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub params: DetectParams,
    pub gap_filter_minutes: f64,
    pub visit_count: usize,
    pub node_count: usize,
    pub edge_count: usize,
    pub modularity: f64,
    pub groups: Vec<ReportGroup>,
}

/// Ranked groups with outlier flags; `gap_filter` (minutes) selects which
/// co-visits are itemised per group.
pub fn report(result: &DetectionResult, gap_filter: f64) -> Report {
    Report {
        params: result.params.clone(),
        gap_filter_minutes: gap_filter,
        visit_count: result.visits.n(),
        node_count: result.network.node_count(),
        edge_count: result.network.edge_count(),
        modularity: result.partition.modularity,
        groups: result
            .ranked
            .iter()
            .map(|r| ReportGroup {
                ranked: r.clone(),
                members: result
                    .groups
                    .get(&r.metrics.group_id)
                    .map(|g| g.members.clone())
                    .unwrap_or_default(),
                tight_covisits: tight_covisits(result, &r.metrics.group_id, gap_filter),
            })
            .collect(),
    }
}

pub fn report_json(result: &DetectionResult, gap_filter: f64) -> String {
    pretty(&report(result, gap_filter))
}

pub fn report_md(result: &DetectionResult, gap_filter: f64) -> String {
    let rep = report(result, gap_filter);
    let p = &rep.params;
    let mut out = String::new();
    let _ = writeln!(out, "# Suspicious group report\n");
    let _ = writeln!(
        out,
        "- parameters: theta1 = {} min, min co-visits = {}, min component size = {}, seed = {}",
        p.covisit.theta1, p.covisit.theta2, p.min_component_size, p.seed
    );
    let _ = writeln!(out, "- visits analysed: {}", rep.visit_count);
    let _ = writeln!(out, "- network: {} patients, {} edges", rep.node_count, rep.edge_count);
    let _ = writeln!(out, "- modularity: {:.6}", rep.modularity);
    let _ = writeln!(out, "- suspicious groups: {}\n", rep.groups.len());
    if rep.groups.is_empty() {
        let _ = writeln!(out, "No group met the thresholds.");
        return out;
    }
    let _ = writeln!(
        out,
        "Groups ranked by overall score (mean oriented z-score). Outlier flags mark metrics above the upper quartile fence. \
         The last columns count co-visits with a gap of at most {gap_filter} min and where they happened.\n"
    );
    let _ = writeln!(
        out,
        "| rank | group | p | f | c | d (days) | g (min) | score | outliers | co-visits <= {gap_filter} min | institutions | members |"
    );
    let _ = writeln!(out, "|---:|---|---:|---:|---:|---:|---:|---:|---|---:|---|---|");
    for g in &rep.groups {
        let (r, m) = (&g.ranked, &g.ranked.metrics);
        let _ = writeln!(
            out,
            "| {} | {} | {} | {:.2} | {} | {:.2} | {:.2} | {:.3} | {} | {} | {} | {} |",
            r.rank,
            m.group_id,
            m.p,
            m.f,
            m.c,
            m.d,
            m.g,
            r.overall_score,
            flags_field(&r.outlier_flags),
            g.tight_covisits.count,
            g.tight_covisits.institutions.join(", "),
            g.members.join(", ")
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, SynthConfig};

    #[test]
    fn invalid_params_rejected() {
        let (patients, visits) = (PatientTable::default(), VisitTable::default());
        let mut p = DetectParams::default();
        p.min_component_size = 0;
        assert_eq!(run(&patients, &visits, &p).unwrap_err(), PipelineError::MinComponentSize);
        p = DetectParams::default();
        p.covisit.theta2 = 0;
        assert!(matches!(run(&patients, &visits, &p), Err(PipelineError::Params(_))));
    }

    #[test]
    fn empty_dataset_yields_no_groups() {
        let r = run(&PatientTable::default(), &VisitTable::default(), &DetectParams::default()).unwrap();
        assert!(r.groups.groups.is_empty() && r.stats.is_none() && r.projection.is_empty());
        assert!(report_md(&r, 60.0).contains("No group met the thresholds."));
        assert_eq!(metrics_csv(&r), "group_id,p,f,c,d,g,outlier_flags\n");
    }

    #[test]
    fn small_synthetic_run_is_consistent() {
        let ds = generate(&SynthConfig {
            m_patients: 150,
            n_fraud_rings: 4,
            n_confounder_groups: 1,
            background_visit_rate: 5.0,
            ..Default::default()
        })
        .unwrap();
        let r = run(&ds.patients, &ds.visits, &DetectParams::default()).unwrap();
        assert!(!r.groups.groups.is_empty());
        assert_eq!(r.metrics.len(), r.groups.groups.len());
        assert_eq!(r.ranked.len(), r.groups.groups.len());
        let again = run(&ds.patients, &ds.visits, &DetectParams::default()).unwrap();
        assert_eq!(groups_json(&r), groups_json(&again));
        assert_eq!(metrics_csv(&r).lines().count(), r.metrics.len() + 1);
        let loose = report(&r, 60.0);
        let tight = report(&r, 1.0);
        for (a, b) in loose.groups.iter().zip(&tight.groups) {
            assert!(b.tight_covisits.count <= a.tight_covisits.count);
            assert_eq!(a.tight_covisits.count, a.ranked.metrics.c);
        }
    }
}
