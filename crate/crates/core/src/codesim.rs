//! Nearest-match similarity over hierarchical disease and drug codes.
//!
//! A code's weight is the length of its longest common prefix with any code
//! of the other patient, divided by the code's own length. Patient
//! similarity is the count-weighted mean of those weights over both
//! patients' codes.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::ingest::{DrugTable, VisitTable};

/// Uppercases, trims and strips dots, so `k02.1 ` and `K021` compare equal.
pub fn normalize_code(code: &str) -> String {
    code.trim()
        .chars()
        .filter(|&c| c != '.')
        .flat_map(char::to_uppercase)
        .collect()
}

fn common_prefix_len(a: &str, b: &str) -> usize {
    a.chars().zip(b.chars()).take_while(|(x, y)| x == y).count()
}

/// Weight of `code` against the other patient's codes, in `[0, 1]`.
/// Both sides are expected to be normalized already.
pub fn code_weight<'a, I>(code: &str, other_codes: I) -> f64
where
    I: IntoIterator<Item = &'a str>,
{
    let len = code.chars().count();
    if len == 0 {
        return 0.0;
    }
    let best = other_codes
        .into_iter()
        .map(|o| common_prefix_len(code, o))
        .max()
        .unwrap_or(0);
    best as f64 / len as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodeKind {
    Disease,
    Drug,
}

/// Per-patient code multisets: disease code → visits, drug code → purchase rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClinicalProfile {
    pub patient_id: String,
    pub diseases: BTreeMap<String, u32>,
    pub drugs: BTreeMap<String, u32>,
}

impl ClinicalProfile {
    pub fn new(patient_id: impl Into<String>) -> Self {
        Self {
            patient_id: patient_id.into(),
            ..Default::default()
        }
    }

    pub fn add_disease(&mut self, code: &str, count: u32) {
        let code = normalize_code(code);
        if !code.is_empty() && count > 0 {
            *self.diseases.entry(code).or_insert(0) += count;
        }
    }

    pub fn add_drug(&mut self, code: &str, count: u32) {
        let code = normalize_code(code);
        if !code.is_empty() && count > 0 {
            *self.drugs.entry(code).or_insert(0) += count;
        }
    }

    pub fn codes(&self, kind: CodeKind) -> &BTreeMap<String, u32> {
        match kind {
            CodeKind::Disease => &self.diseases,
            CodeKind::Drug => &self.drugs,
        }
    }
}

/// Builds profiles for `patient_ids` from the visit and drug tables. Every
/// requested patient gets a profile, possibly empty.
pub fn build_profiles(
    patient_ids: &[String],
    visits: &VisitTable,
    drugs: &DrugTable,
) -> BTreeMap<String, ClinicalProfile> {
    let mut profiles: BTreeMap<String, ClinicalProfile> = patient_ids
        .iter()
        .map(|p| (p.clone(), ClinicalProfile::new(p.clone())))
        .collect();
    let mut visit_owner: HashMap<&str, &str> = HashMap::new();
    for v in &visits.visits {
        if let Some(profile) = profiles.get_mut(&v.patient_id) {
            profile.add_disease(&v.disease_code, 1);
            visit_owner.insert(v.visit_id.as_str(), v.patient_id.as_str());
        }
    }
    for d in &drugs.rows {
        if let Some(owner) = visit_owner.get(d.visit_id.as_str()) {
            profiles
                .get_mut(*owner)
                .expect("owner has a profile")
                .add_drug(&d.drug_code, 1);
        }
    }
    profiles
}

fn weighted_side(own: &BTreeMap<String, u32>, other: &BTreeMap<String, u32>) -> (f64, f64) {
    own.iter().fold((0.0, 0.0), |(num, den), (code, &c)| {
        let w = code_weight(code, other.keys().map(String::as_str));
        (num + w * c as f64, den + c as f64)
    })
}

/// Count-weighted nearest-match similarity in `[0, 1]`; 0 when both
/// profiles are empty for `kind`.
pub fn patient_similarity(a: &ClinicalProfile, b: &ClinicalProfile, kind: CodeKind) -> f64 {
    let (ca, cb) = (a.codes(kind), b.codes(kind));
    let (num_a, den_a) = weighted_side(ca, cb);
    let (num_b, den_b) = weighted_side(cb, ca);
    let den = den_a + den_b;
    if den == 0.0 {
        0.0
    } else {
        (num_a + num_b) / den
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClusterError {
    #[error("similarity matrix is not square ({rows} rows, row {row} has {len} entries)")]
    NotSquare { rows: usize, row: usize, len: usize },
    #[error("similarity matrix is not symmetric at ({i}, {j})")]
    NotSymmetric { i: usize, j: usize },
    #[error("group has no members")]
    Empty,
}

/// Leaf order of an average-linkage agglomerative clustering on
/// `1 - sim`. The closest pair merges first; ties go to the pair with the
/// smaller cluster indices. A merged cluster lists the leaves of its
/// lower-indexed child first.
pub fn cluster_order(sim: &[Vec<f64>]) -> Result<Vec<usize>, ClusterError> {
    let n = sim.len();
    for (row, r) in sim.iter().enumerate() {
        if r.len() != n {
            return Err(ClusterError::NotSquare {
                rows: n,
                row,
                len: r.len(),
            });
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            if (sim[i][j] - sim[j][i]).abs() > 1e-9 {
                return Err(ClusterError::NotSymmetric { i, j });
            }
        }
    }
    // Active clusters keyed by slot; a slot keeps the index of the
    // lower-indexed child after a merge.
    let mut leaves: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let mut dist: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| 1.0 - sim[i][j]).collect())
        .collect();
    for _ in 1..n {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if leaves[i].is_none() {
                continue;
            }
            for j in i + 1..n {
                if leaves[j].is_none() {
                    continue;
                }
                if best.is_none_or(|(_, _, d)| dist[i][j] < d) {
                    best = Some((i, j, dist[i][j]));
                }
            }
        }
        let (i, j, _) = best.expect("at least two active clusters");
        let right = leaves[j].take().expect("active");
        let (size_i, size_j) = (leaves[i].as_ref().unwrap().len() as f64, right.len() as f64);
        for k in 0..n {
            if k == i || leaves[k].is_none() {
                continue;
            }
            let d = (dist[i][k] * size_i + dist[j][k] * size_j) / (size_i + size_j);
            dist[i][k] = d;
            dist[k][i] = d;
        }
        leaves[i].as_mut().unwrap().extend(right);
    }
    Ok(leaves.into_iter().flatten().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub members: Vec<String>,
    pub disease_sim: Vec<Vec<f64>>,
    pub drug_sim: Vec<Vec<f64>>,
    pub order: Vec<usize>,
}

/// JSON form of a similarity matrix with row-major cell arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityExport {
    pub members: Vec<String>,
    pub order: Vec<usize>,
    pub disease_sim: Vec<f64>,
    pub drug_sim: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn to_export(&self) -> SimilarityExport {
        SimilarityExport {
            members: self.members.clone(),
            order: self.order.clone(),
            disease_sim: self.disease_sim.iter().flatten().copied().collect(),
            drug_sim: self.drug_sim.iter().flatten().copied().collect(),
        }
    }

    /// Mean of the off-diagonal disease similarities (1.0 for one member).
    pub fn mean_disease_similarity(&self) -> f64 {
        mean_off_diagonal(&self.disease_sim)
    }

    pub fn mean_drug_similarity(&self) -> f64 {
        mean_off_diagonal(&self.drug_sim)
    }
}

pub fn mean_off_diagonal(m: &[Vec<f64>]) -> f64 {
    let n = m.len();
    if n < 2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += m[i][j];
            }
        }
    }
    sum / (n * (n - 1)) as f64
}

/// Pairwise disease and drug similarities for `members`, with the diagonal
/// fixed at 1 and a clustering order computed from the disease matrix.
/// Members without a profile are treated as empty.
pub fn similarity_matrix(
    members: &[String],
    profiles: &BTreeMap<String, ClinicalProfile>,
) -> Result<SimilarityMatrix, ClusterError> {
    if members.is_empty() {
        return Err(ClusterError::Empty);
    }
    let n = members.len();
    let empty = ClinicalProfile::default();
    let prof: Vec<&ClinicalProfile> = members
        .iter()
        .map(|m| profiles.get(m).unwrap_or(&empty))
        .collect();
    let mut disease = vec![vec![1.0; n]; n];
    let mut drug = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = patient_similarity(prof[i], prof[j], CodeKind::Disease);
            let r = patient_similarity(prof[i], prof[j], CodeKind::Drug);
            disease[i][j] = d;
            disease[j][i] = d;
            drug[i][j] = r;
            drug[j][i] = r;
        }
    }
    let order = cluster_order(&disease)?;
    Ok(SimilarityMatrix {
        members: members.to_vec(),
        disease_sim: disease,
        drug_sim: drug,
        order,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(diseases: &[(&str, u32)]) -> ClinicalProfile {
        let mut p = ClinicalProfile::new("x");
        for &(c, n) in diseases {
            p.add_disease(c, n);
        }
        p
    }

    #[test]
    fn worked_example_weights() {
        assert!((code_weight("K02", ["E10", "K12", "K13"]) - 1.0 / 3.0).abs() < 1e-15);
        assert!((code_weight("K12", ["K02", "K13", "M54"]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(code_weight("K13", ["K13", "E10"]), 1.0);
        assert_eq!(code_weight("K13", std::iter::empty()), 0.0);
    }

    #[test]
    fn shorter_code_fully_matched_by_longer_prefix() {
        assert_eq!(code_weight("K02", ["K0213"]), 1.0);
        assert!((code_weight("K0213", ["K02"]) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_code(" k02.1 "), "K021");
        let a = profile(&[("K02.1", 1)]);
        let b = profile(&[("k021", 1)]);
        assert_eq!(patient_similarity(&a, &b, CodeKind::Disease), 1.0);
    }

    #[test]
    fn similarity_examples() {
        let a = profile(&[("K12", 1)]);
        let b = profile(&[("K13", 1)]);
        assert!((patient_similarity(&a, &b, CodeKind::Disease) - 2.0 / 3.0).abs() < 1e-15);
        let a = profile(&[("E10", 5)]);
        let b = profile(&[("M54", 3)]);
        assert_eq!(patient_similarity(&a, &b, CodeKind::Disease), 0.0);
        let a = profile(&[("E10", 5), ("K13", 2)]);
        assert_eq!(patient_similarity(&a, &a, CodeKind::Disease), 1.0);
        let e = ClinicalProfile::default();
        assert_eq!(patient_similarity(&e, &e, CodeKind::Drug), 0.0);
    }

    #[test]
    fn cluster_order_small_cases() {
        assert_eq!(cluster_order(&[vec![1.0, 0.3], vec![0.3, 1.0]]).unwrap(), vec![0, 1]);
        assert_eq!(cluster_order(&[vec![1.0]]).unwrap(), vec![0]);
        assert!(matches!(
            cluster_order(&[vec![1.0, 0.3], vec![0.4, 1.0]]),
            Err(ClusterError::NotSymmetric { i: 0, j: 1 })
        ));
        assert!(matches!(
            cluster_order(&[vec![1.0, 0.3], vec![0.3]]),
            Err(ClusterError::NotSquare { .. })
        ));
    }

    #[test]
    fn cluster_order_groups_blocks() {
        // Interleaved blocks {0,2,4} and {1,3,5}.
        let n = 6;
        let sim: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if i == j { 1.0 } else if i % 2 == j % 2 { 0.9 } else { 0.1 })
                    .collect()
            })
            .collect();
        let order = cluster_order(&sim).unwrap();
        let parity: Vec<_> = order.iter().map(|i| i % 2).collect();
        assert_eq!(parity, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn single_member_matrix() {
        let members = vec!["a".to_string()];
        let m = similarity_matrix(&members, &BTreeMap::new()).unwrap();
        assert_eq!(m.disease_sim, vec![vec![1.0]]);
        assert_eq!(m.drug_sim, vec![vec![1.0]]);
        assert_eq!(m.order, vec![0]);
        assert!(similarity_matrix(&[], &BTreeMap::new()).is_err());
    }
}
