//! Co-visit extraction and the weighted patient co-visit network.
//!
//! Two visits by different patients at the same institution whose time gap
//! is at most `theta1` form a co-visit. Each co-visit weighs
//! `1 / max(cutoff, gap)` (gap in minutes), and a patient pair becomes an
//! edge once it accumulates at least `theta2` co-visits; the edge weight is
//! the sum of its co-visit weights.

use std::collections::{BTreeMap, HashMap, HashSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::ingest::VisitTable;

/// Time-gap thresholds offered by the audit UI, in minutes.
pub const THETA1_CHOICES: [f64; 4] = [60.0, 360.0, 720.0, 1440.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoVisitParams {
    /// Maximum gap between two visits that still counts as a co-visit, minutes.
    pub theta1: f64,
    /// Minimum number of co-visits for a patient pair to become an edge.
    pub theta2: usize,
    /// Gaps shorter than this are weighted as if they were exactly this long.
    pub cutoff: f64,
}

impl Default for CoVisitParams {
    fn default() -> Self {
        Self {
            theta1: 60.0,
            theta2: 4,
            cutoff: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParamError {
    #[error("theta1 must be a positive number of minutes, got {0}")]
    Theta1(f64),
    #[error("theta2 must be at least 1")]
    Theta2,
    #[error("cutoff ({cutoff}) must be positive and not exceed theta1 ({theta1})")]
    Cutoff { cutoff: f64, theta1: f64 },
}

impl CoVisitParams {
    pub fn with_thresholds(theta1: f64, theta2: usize) -> Self {
        Self {
            theta1,
            theta2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        if !(self.theta1.is_finite() && self.theta1 > 0.0) {
            return Err(ParamError::Theta1(self.theta1));
        }
        if self.theta2 < 1 {
            return Err(ParamError::Theta2);
        }
        if !(self.cutoff > 0.0 && self.cutoff <= self.theta1) {
            return Err(ParamError::Cutoff {
                cutoff: self.cutoff,
                theta1: self.theta1,
            });
        }
        Ok(())
    }
}

/// Absolute gap between two instants in minutes.
pub fn gap_minutes(t_i: DateTime<Utc>, t_j: DateTime<Utc>) -> f64 {
    (t_i.timestamp() - t_j.timestamp()).unsigned_abs() as f64 / 60.0
}

pub fn weight_for_gap(gap: f64, params: &CoVisitParams) -> f64 {
    if gap <= params.theta1 {
        1.0 / params.cutoff.max(gap)
    } else {
        0.0
    }
}

/// Weight of a single co-visit, in 1/minutes.
pub fn pair_weight(t_i: DateTime<Utc>, t_j: DateTime<Utc>, params: &CoVisitParams) -> f64 {
    weight_for_gap(gap_minutes(t_i, t_j), params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoVisitPair {
    /// Visit of the patient with the smaller id.
    pub visit_a: String,
    pub visit_b: String,
    pub time_a: DateTime<Utc>,
    pub time_b: DateTime<Utc>,
    pub gap_minutes: f64,
    pub institution_id: String,
    pub weight: f64,
}

impl CoVisitPair {
    pub fn earlier(&self) -> DateTime<Utc> {
        self.time_a.min(self.time_b)
    }

    /// Midpoint of the two visit instants.
    pub fn midpoint(&self) -> DateTime<Utc> {
        let a = self.time_a.timestamp();
        let b = self.time_b.timestamp();
        let mid = a.min(b) + (a - b).abs() / 2;
        DateTime::from_timestamp(mid, 0).expect("midpoint of two valid instants")
    }
}

pub type PatientPairKey = (String, String);

/// Sum of pair weights when there are at least `theta2` pairs, else 0.
pub fn edge_weight(pairs: &[CoVisitPair], params: &CoVisitParams) -> f64 {
    if pairs.len() >= params.theta2 {
        pairs.iter().map(|p| p.weight).sum()
    } else {
        0.0
    }
}

struct Candidate {
    pa: u32,
    pb: u32,
    va: u32,
    vb: u32,
    gap_secs: u64,
    earlier: i64,
}

/// Matched co-visits for every patient pair with at least one, keyed by node
/// indices into `patients` (sorted ids).
fn extract_indexed(
    visits: &VisitTable,
    params: &CoVisitParams,
    patients: &[String],
) -> BTreeMap<(u32, u32), Vec<CoVisitPair>> {
    let pidx: HashMap<&str, u32> = patients
        .iter()
        .enumerate()
        .map(|(i, p)| (p.as_str(), i as u32))
        .collect();
    let vs = &visits.visits;

    let mut order: Vec<u32> = (0..vs.len() as u32).collect();
    order.sort_by(|&a, &b| {
        let (x, y) = (&vs[a as usize], &vs[b as usize]);
        x.institution_id
            .cmp(&y.institution_id)
            .then(x.timestamp.cmp(&y.timestamp))
            .then(x.visit_id.cmp(&y.visit_id))
    });

    let mut candidates = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        let vi = &vs[i as usize];
        for &j in &order[pos + 1..] {
            let vj = &vs[j as usize];
            if vj.institution_id != vi.institution_id {
                break;
            }
            let gap = gap_minutes(vi.timestamp, vj.timestamp);
            if gap > params.theta1 {
                break;
            }
            let (pi, pj) = (pidx[vi.patient_id.as_str()], pidx[vj.patient_id.as_str()]);
            if pi == pj {
                continue;
            }
            let (pa, va, pb, vb) = if pi < pj { (pi, i, pj, j) } else { (pj, j, pi, i) };
            candidates.push(Candidate {
                pa,
                pb,
                va,
                vb,
                gap_secs: (vi.timestamp.timestamp() - vj.timestamp.timestamp()).unsigned_abs(),
                earlier: vi.timestamp.timestamp().min(vj.timestamp.timestamp()),
            });
        }
    }

    candidates.sort_by(|x, y| {
        (x.pa, x.pb, x.gap_secs, x.earlier)
            .cmp(&(y.pa, y.pb, y.gap_secs, y.earlier))
            .then_with(|| vs[x.va as usize].visit_id.cmp(&vs[y.va as usize].visit_id))
            .then_with(|| vs[x.vb as usize].visit_id.cmp(&vs[y.vb as usize].visit_id))
    });

    let mut out = BTreeMap::new();
    let mut start = 0;
    while start < candidates.len() {
        let key = (candidates[start].pa, candidates[start].pb);
        let mut end = start;
        while end < candidates.len() && (candidates[end].pa, candidates[end].pb) == key {
            end += 1;
        }
        let mut used = HashSet::new();
        let mut pairs = Vec::new();
        for c in &candidates[start..end] {
            if used.contains(&c.va) || used.contains(&c.vb) {
                continue;
            }
            used.insert(c.va);
            used.insert(c.vb);
            let (a, b) = (&vs[c.va as usize], &vs[c.vb as usize]);
            let gap = gap_minutes(a.timestamp, b.timestamp);
            pairs.push(CoVisitPair {
                visit_a: a.visit_id.clone(),
                visit_b: b.visit_id.clone(),
                time_a: a.timestamp,
                time_b: b.timestamp,
                gap_minutes: gap,
                institution_id: a.institution_id.clone(),
                weight: weight_for_gap(gap, params),
            });
        }
        sort_pairs_by_time(&mut pairs);
        out.insert(key, pairs);
        start = end;
    }
    out
}

/// Orders co-visits by the earlier of their two instants, then by visit ids.
pub fn sort_pairs_by_time(pairs: &mut [CoVisitPair]) {
    pairs.sort_by(|x, y| {
        x.earlier()
            .cmp(&y.earlier())
            .then_with(|| x.visit_a.cmp(&y.visit_a))
            .then_with(|| x.visit_b.cmp(&y.visit_b))
    });
}

fn sorted_patients(visits: &VisitTable) -> Vec<String> {
    let mut ids: Vec<String> = visits.visits.iter().map(|v| v.patient_id.clone()).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Extracts one-to-one matched co-visits for every unordered patient pair.
///
/// Within a patient pair, eligible visit pairs are taken greedily by
/// ascending gap (ties: earlier instant, then the visit ids of the smaller
/// and larger patient id), skipping any pair that reuses a visit. A visit may
/// still be matched in several different patient pairs.
pub fn extract_covisits(
    visits: &VisitTable,
    params: &CoVisitParams,
) -> BTreeMap<PatientPairKey, Vec<CoVisitPair>> {
    let patients = sorted_patients(visits);
    extract_indexed(visits, params, &patients)
        .into_iter()
        .map(|((a, b), pairs)| {
            (
                (patients[a as usize].clone(), patients[b as usize].clone()),
                pairs,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoVisitEdge {
    pub pairs: Vec<CoVisitPair>,
    pub weight: f64,
}

/// Undirected weighted patient graph. Node indices follow ascending patient
/// id, so the canonical edge key `(i, j)` with `i < j` is also id order.
#[derive(Debug, Clone, PartialEq)]
pub struct CoVisitNetwork {
    pub nodes: Vec<String>,
    pub edges: BTreeMap<(usize, usize), CoVisitEdge>,
    pub params: CoVisitParams,
}

impl CoVisitNetwork {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node_index(&self, patient_id: &str) -> Option<usize> {
        self.nodes
            .binary_search_by(|n| n.as_str().cmp(patient_id))
            .ok()
    }

    pub fn edge_between(&self, a: &str, b: &str) -> Option<&CoVisitEdge> {
        let (i, j) = (self.node_index(a)?, self.node_index(b)?);
        self.edges.get(&(i.min(j), i.max(j)))
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.values().map(|e| e.weight).sum()
    }

    /// Adjacency lists `(neighbor, weight)`, each sorted by neighbor.
    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (&(i, j), e) in &self.edges {
            adj[i].push((j, e.weight));
            adj[j].push((i, e.weight));
        }
        for list in &mut adj {
            list.sort_by_key(|&(n, _)| n);
        }
        adj
    }

    pub fn degree(&self) -> Vec<usize> {
        let mut deg = vec![0; self.nodes.len()];
        for &(i, j) in self.edges.keys() {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    pub fn to_export(&self) -> NetworkExport {
        NetworkExport {
            nodes: self.nodes.clone(),
            edges: self
                .edges
                .iter()
                .map(|(&(i, j), e)| EdgeExport {
                    a: self.nodes[i].clone(),
                    b: self.nodes[j].clone(),
                    weight: e.weight,
                    pairs: e
                        .pairs
                        .iter()
                        .map(|p| PairExport {
                            visit_a: p.visit_a.clone(),
                            visit_b: p.visit_b.clone(),
                            gap_minutes: p.gap_minutes,
                        })
                        .collect(),
                })
                .collect(),
            params: ParamsExport {
                theta1: self.params.theta1,
                theta2: self.params.theta2,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairExport {
    pub visit_a: String,
    pub visit_b: String,
    pub gap_minutes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeExport {
    pub a: String,
    pub b: String,
    pub weight: f64,
    pub pairs: Vec<PairExport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsExport {
    pub theta1: f64,
    pub theta2: usize,
}

/// JSON document written as `network.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkExport {
    pub nodes: Vec<String>,
    pub edges: Vec<EdgeExport>,
    pub params: ParamsExport,
}

/// Builds the co-visit network over every patient with at least one visit.
pub fn build_network(visits: &VisitTable, params: &CoVisitParams) -> CoVisitNetwork {
    let nodes = sorted_patients(visits);
    let edges = extract_indexed(visits, params, &nodes)
        .into_iter()
        .filter_map(|((a, b), pairs)| {
            let weight = edge_weight(&pairs, params);
            (weight > 0.0).then_some(((a as usize, b as usize), CoVisitEdge { pairs, weight }))
        })
        .collect();
    CoVisitNetwork {
        nodes,
        edges,
        params: *params,
    }
}
