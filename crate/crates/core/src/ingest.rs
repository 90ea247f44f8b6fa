//! Claim table ingestion, record filtering and attribute histograms.
//!
//! Three CSV files make up a dataset: `patients.csv` (demographics),
//! `visits.csv` (one row per visit, one diagnosis per visit) and `drugs.csv`
//! (zero or more drug rows per visit). Loading checks every foreign key and
//! rejects the whole dataset on the first structural problem.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Timelike, Utc};
use serde::{Deserialize, Serialize};

pub const PATIENTS_HEADER: [&str; 3] = ["patient_id", "age", "gender"];
pub const VISITS_HEADER: [&str; 8] = [
    "visit_id",
    "patient_id",
    "timestamp",
    "institution_id",
    "institution_type",
    "disease_code",
    "disease_name",
    "total_fee",
];
pub const DRUGS_HEADER: [&str; 4] = ["visit_id", "drug_code", "drug_name", "dosage"];

pub const MAX_AGE: u32 = 130;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{file}: line {line}: {message}")]
    Malformed {
        file: &'static str,
        line: u64,
        message: String,
    },
    #[error("{file}: expected header `{expected}`, found `{found}`")]
    Header {
        file: &'static str,
        expected: String,
        found: String,
    },
    #[error("{file}: line {line}: unparseable timestamp `{value}`")]
    Timestamp {
        file: &'static str,
        line: u64,
        value: String,
    },
    #[error("{file}: line {line}: timestamp `{value}` outside the declared date range")]
    OutOfRange {
        file: &'static str,
        line: u64,
        value: String,
    },
    #[error("{file}: duplicate key(s): {}", keys.join(", "))]
    Duplicate { file: &'static str, keys: Vec<String> },
    #[error("{file}: referential integrity violated, unknown {kind}(s): {}", keys.join(", "))]
    Referential {
        file: &'static str,
        kind: &'static str,
        keys: Vec<String>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    F,
    M,
    #[serde(rename = "unknown")]
    Unknown,
}

impl Gender {
    fn parse(s: &str) -> Option<Self> {
        match s.trim() {
            "F" | "f" => Some(Gender::F),
            "M" | "m" => Some(Gender::M),
            "unknown" | "U" | "" => Some(Gender::Unknown),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::F => "F",
            Gender::M => "M",
            Gender::Unknown => "unknown",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstitutionType {
    PublicHospital,
    CommunityHospital,
    Drugstore,
    Clinic,
    Other,
}

impl InstitutionType {
    pub const ALL: [InstitutionType; 5] = [
        InstitutionType::PublicHospital,
        InstitutionType::CommunityHospital,
        InstitutionType::Drugstore,
        InstitutionType::Clinic,
        InstitutionType::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InstitutionType::PublicHospital => "public_hospital",
            InstitutionType::CommunityHospital => "community_hospital",
            InstitutionType::Drugstore => "drugstore",
            InstitutionType::Clinic => "clinic",
            InstitutionType::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s.trim())
    }
}

impl fmt::Display for InstitutionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub patient_id: String,
    pub age: u32,
    pub gender: Gender,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitRecord {
    pub visit_id: String,
    pub patient_id: String,
    pub timestamp: DateTime<Utc>,
    pub institution_id: String,
    pub institution_type: InstitutionType,
    pub disease_code: String,
    pub disease_name: String,
    pub total_fee: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrugRecord {
    pub visit_id: String,
    pub drug_code: String,
    pub drug_name: String,
    pub dosage: String,
}

#[derive(Debug, Clone, Default)]
pub struct PatientTable {
    patients: Vec<PatientRecord>,
    index: HashMap<String, usize>,
}

impl PatientTable {
    /// Builds the table, rejecting duplicate ids and out-of-range ages.
    pub fn new(patients: Vec<PatientRecord>) -> Result<Self, IngestError> {
        let mut index = HashMap::with_capacity(patients.len());
        let mut dups = BTreeSet::new();
        for (i, p) in patients.iter().enumerate() {
            if p.age > MAX_AGE {
                return Err(IngestError::Malformed {
                    file: "patients.csv",
                    line: i as u64 + 2,
                    message: format!("age {} outside [0, {MAX_AGE}]", p.age),
                });
            }
            if index.insert(p.patient_id.clone(), i).is_some() {
                dups.insert(p.patient_id.clone());
            }
        }
        if !dups.is_empty() {
            return Err(IngestError::Duplicate {
                file: "patients.csv",
                keys: dups.into_iter().collect(),
            });
        }
        Ok(Self { patients, index })
    }

    pub fn m(&self) -> usize {
        self.patients.len()
    }

    pub fn records(&self) -> &[PatientRecord] {
        &self.patients
    }

    pub fn get(&self, patient_id: &str) -> Option<&PatientRecord> {
        self.index.get(patient_id).map(|&i| &self.patients[i])
    }

    pub fn contains(&self, patient_id: &str) -> bool {
        self.index.contains_key(patient_id)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VisitTable {
    pub visits: Vec<VisitRecord>,
}

impl VisitTable {
    pub fn new(visits: Vec<VisitRecord>) -> Self {
        Self { visits }
    }

    pub fn n(&self) -> usize {
        self.visits.len()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, VisitRecord> {
        self.visits.iter()
    }

    /// Visits grouped by patient id, each list in table order.
    pub fn by_patient(&self) -> HashMap<&str, Vec<&VisitRecord>> {
        let mut out: HashMap<&str, Vec<&VisitRecord>> = HashMap::new();
        for v in &self.visits {
            out.entry(v.patient_id.as_str()).or_default().push(v);
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DrugTable {
    pub rows: Vec<DrugRecord>,
}

impl DrugTable {
    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn by_visit(&self) -> HashMap<&str, Vec<&DrugRecord>> {
        let mut out: HashMap<&str, Vec<&DrugRecord>> = HashMap::new();
        for d in &self.rows {
            out.entry(d.visit_id.as_str()).or_default().push(d);
        }
        out
    }
}

/// Inclusive UTC instant range, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange(pub DateTime<Utc>, pub DateTime<Utc>);

impl DateRange {
    pub fn start(&self) -> DateTime<Utc> {
        self.0
    }

    pub fn end(&self) -> DateTime<Utc> {
        self.1
    }

    pub fn contains(&self, t: DateTime<Utc>) -> bool {
        self.0 <= t && t <= self.1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistogramConfig {
    /// Width of the per-patient visit-count buckets.
    pub visit_count_width: u32,
    pub age_width: u32,
    /// Number of equal-width bins spanning the observed per-patient fee range.
    pub fee_bins: usize,
}

impl Default for HistogramConfig {
    fn default() -> Self {
        Self {
            visit_count_width: 20,
            age_width: 10,
            fee_bins: 10,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadConfig {
    /// When set, every visit timestamp must fall inside it.
    pub date_range: Option<DateRange>,
    pub histogram: HistogramConfig,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub patients: PatientTable,
    pub visits: VisitTable,
    pub drugs: DrugTable,
    pub histogram: HistogramConfig,
}

/// Parses an ISO-8601 instant. Offsets are converted to UTC, minute
/// precision is zero-filled and sub-second digits are truncated.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim();
    let parsed = DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .ok()
        .or_else(|| {
            let naive = s.strip_suffix('Z').unwrap_or(s);
            NaiveDateTime::parse_from_str(naive, "%Y-%m-%dT%H:%M:%S")
                .or_else(|_| NaiveDateTime::parse_from_str(naive, "%Y-%m-%dT%H:%M"))
                .ok()
                .map(|n| n.and_utc())
        })?;
    parsed.with_nanosecond(0)
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(input)
}

fn check_header<R: Read>(
    rdr: &mut csv::Reader<R>,
    file: &'static str,
    expected: &[&str],
) -> Result<(), IngestError> {
    let found = rdr.headers().map_err(|e| csv_error(file, e))?.clone();
    if found.iter().ne(expected.iter().copied()) {
        return Err(IngestError::Header {
            file,
            expected: expected.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        });
    }
    Ok(())
}

fn csv_error(file: &'static str, e: csv::Error) -> IngestError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    IngestError::Malformed {
        file,
        line,
        message: e.to_string(),
    }
}

fn records<'r, R: Read>(
    rdr: &'r mut csv::Reader<R>,
    file: &'static str,
) -> impl Iterator<Item = Result<(u64, csv::StringRecord), IngestError>> + 'r {
    rdr.records().map(move |r| {
        let rec = r.map_err(|e| csv_error(file, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        Ok((line, rec))
    })
}

fn field<'r>(
    rec: &'r csv::StringRecord,
    idx: usize,
    file: &'static str,
    line: u64,
    name: &str,
) -> Result<&'r str, IngestError> {
    match rec.get(idx) {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(IngestError::Malformed {
            file,
            line,
            message: format!("missing value for `{name}`"),
        }),
    }
}

pub fn read_patients<R: Read>(input: R) -> Result<PatientTable, IngestError> {
    const FILE: &str = "patients.csv";
    let mut rdr = reader(input);
    check_header(&mut rdr, FILE, &PATIENTS_HEADER)?;
    let mut out = Vec::new();
    for r in records(&mut rdr, FILE) {
        let (line, rec) = r?;
        let patient_id = field(&rec, 0, FILE, line, "patient_id")?.to_string();
        let age_raw = field(&rec, 1, FILE, line, "age")?;
        let age: u32 = age_raw.parse().map_err(|_| IngestError::Malformed {
            file: FILE,
            line,
            message: format!("invalid age `{age_raw}`"),
        })?;
        if age > MAX_AGE {
            return Err(IngestError::Malformed {
                file: FILE,
                line,
                message: format!("age {age} outside [0, {MAX_AGE}]"),
            });
        }
        let g = rec.get(2).unwrap_or("");
        let gender = Gender::parse(g).ok_or_else(|| IngestError::Malformed {
            file: FILE,
            line,
            message: format!("invalid gender `{g}`"),
        })?;
        out.push(PatientRecord {
            patient_id,
            age,
            gender,
        });
    }
    PatientTable::new(out)
}

pub fn read_visits<R: Read>(
    input: R,
    date_range: Option<DateRange>,
) -> Result<VisitTable, IngestError> {
    const FILE: &str = "visits.csv";
    let mut rdr = reader(input);
    check_header(&mut rdr, FILE, &VISITS_HEADER)?;
    let mut out = Vec::new();
    for r in records(&mut rdr, FILE) {
        let (line, rec) = r?;
        let visit_id = field(&rec, 0, FILE, line, "visit_id")?.to_string();
        let patient_id = field(&rec, 1, FILE, line, "patient_id")?.to_string();
        let ts_raw = field(&rec, 2, FILE, line, "timestamp")?;
        let timestamp = parse_timestamp(ts_raw).ok_or_else(|| IngestError::Timestamp {
            file: FILE,
            line,
            value: ts_raw.to_string(),
        })?;
        if let Some(range) = date_range {
            if !range.contains(timestamp) {
                return Err(IngestError::OutOfRange {
                    file: FILE,
                    line,
                    value: ts_raw.to_string(),
                });
            }
        }
        let institution_id = field(&rec, 3, FILE, line, "institution_id")?.to_string();
        let it_raw = field(&rec, 4, FILE, line, "institution_type")?;
        let institution_type =
            InstitutionType::parse(it_raw).ok_or_else(|| IngestError::Malformed {
                file: FILE,
                line,
                message: format!("unknown institution_type `{it_raw}`"),
            })?;
        let disease_code = field(&rec, 5, FILE, line, "disease_code")?;
        if disease_code.contains([';', '|', ',', ' ']) {
            return Err(IngestError::Malformed {
                file: FILE,
                line,
                message: format!(
                    "multiple diagnoses in `{disease_code}`; exactly one disease code per visit is supported"
                ),
            });
        }
        let disease_name = rec.get(6).unwrap_or("").to_string();
        let fee_raw = field(&rec, 7, FILE, line, "total_fee")?;
        let total_fee: f64 = fee_raw
            .parse()
            .ok()
            .filter(|f: &f64| f.is_finite() && *f >= 0.0)
            .ok_or_else(|| IngestError::Malformed {
                file: FILE,
                line,
                message: format!("invalid total_fee `{fee_raw}`"),
            })?;
        out.push(VisitRecord {
            visit_id,
            patient_id,
            timestamp,
            institution_id,
            institution_type,
            disease_code: disease_code.to_string(),
            disease_name,
            total_fee,
        });
    }
    Ok(VisitTable::new(out))
}

pub fn read_drugs<R: Read>(input: R) -> Result<DrugTable, IngestError> {
    const FILE: &str = "drugs.csv";
    let mut rdr = reader(input);
    check_header(&mut rdr, FILE, &DRUGS_HEADER)?;
    let mut rows = Vec::new();
    for r in records(&mut rdr, FILE) {
        let (line, rec) = r?;
        rows.push(DrugRecord {
            visit_id: field(&rec, 0, FILE, line, "visit_id")?.to_string(),
            drug_code: field(&rec, 1, FILE, line, "drug_code")?.to_string(),
            drug_name: rec.get(2).unwrap_or("").to_string(),
            dosage: rec.get(3).unwrap_or("").to_string(),
        });
    }
    Ok(DrugTable { rows })
}

/// Checks uniqueness of visit ids and that every foreign key resolves.
pub fn check_integrity(
    patients: &PatientTable,
    visits: &VisitTable,
    drugs: &DrugTable,
) -> Result<(), IngestError> {
    let mut seen = HashSet::with_capacity(visits.n());
    let mut dups = BTreeSet::new();
    for v in &visits.visits {
        if !seen.insert(v.visit_id.as_str()) {
            dups.insert(v.visit_id.clone());
        }
    }
    if !dups.is_empty() {
        return Err(IngestError::Duplicate {
            file: "visits.csv",
            keys: dups.into_iter().collect(),
        });
    }
    let dangling: BTreeSet<_> = visits
        .visits
        .iter()
        .filter(|v| !patients.contains(&v.patient_id))
        .map(|v| v.patient_id.clone())
        .collect();
    if !dangling.is_empty() {
        return Err(IngestError::Referential {
            file: "visits.csv",
            kind: "patient_id",
            keys: dangling.into_iter().collect(),
        });
    }
    let dangling: BTreeSet<_> = drugs
        .rows
        .iter()
        .filter(|d| !seen.contains(d.visit_id.as_str()))
        .map(|d| d.visit_id.clone())
        .collect();
    if !dangling.is_empty() {
        return Err(IngestError::Referential {
            file: "drugs.csv",
            kind: "visit_id",
            keys: dangling.into_iter().collect(),
        });
    }
    Ok(())
}

pub fn load_dataset<P: Read, V: Read, D: Read>(
    patients_csv: P,
    visits_csv: V,
    drugs_csv: D,
    config: &LoadConfig,
) -> Result<Dataset, IngestError> {
    let patients = read_patients(patients_csv)?;
    let visits = read_visits(visits_csv, config.date_range)?;
    let drugs = read_drugs(drugs_csv)?;
    check_integrity(&patients, &visits, &drugs)?;
    Ok(Dataset {
        patients,
        visits,
        drugs,
        histogram: config.histogram,
    })
}

fn open(path: &Path) -> Result<File, IngestError> {
    File::open(path).map_err(|source| IngestError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_dataset_from_paths(
    patients: &Path,
    visits: &Path,
    drugs: &Path,
    config: &LoadConfig,
) -> Result<Dataset, IngestError> {
    let (p, v, d) = (open(patients)?, open(visits)?, open(drugs)?);
    load_dataset(
        std::io::BufReader::new(p),
        std::io::BufReader::new(v),
        std::io::BufReader::new(d),
        config,
    )
}

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum FilterError {
    #[error("{clause}: range minimum exceeds maximum")]
    Degenerate { clause: &'static str },
    #[error("{clause}: range bounds must be finite")]
    NotFinite { clause: &'static str },
}

/// Record selection. Every `None` clause is inactive; the default selects
/// everything. Set-valued clauses list the values to keep.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSpec {
    pub age_range: Option<(u32, u32)>,
    pub visit_count_buckets: Option<Vec<(u32, u32)>>,
    pub fee_buckets: Option<Vec<(f64, f64)>>,
    pub institution_types: Option<BTreeSet<InstitutionType>>,
    pub institution_ids: Option<BTreeSet<String>>,
    pub date_range: Option<DateRange>,
}

impl FilterSpec {
    pub fn is_empty(&self) -> bool {
        *self == FilterSpec::default()
    }

    pub fn validate(&self) -> Result<(), FilterError> {
        if let Some((lo, hi)) = self.age_range {
            if lo > hi {
                return Err(FilterError::Degenerate { clause: "age_range" });
            }
        }
        for &(lo, hi) in self.visit_count_buckets.iter().flatten() {
            if lo > hi {
                return Err(FilterError::Degenerate {
                    clause: "visit_count_buckets",
                });
            }
        }
        for &(lo, hi) in self.fee_buckets.iter().flatten() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(FilterError::NotFinite {
                    clause: "fee_buckets",
                });
            }
            if lo > hi {
                return Err(FilterError::Degenerate {
                    clause: "fee_buckets",
                });
            }
        }
        if let Some(r) = self.date_range {
            if r.0 > r.1 {
                return Err(FilterError::Degenerate {
                    clause: "date_range",
                });
            }
        }
        Ok(())
    }

    fn keeps_visit(&self, v: &VisitRecord, patients: &PatientTable) -> bool {
        if let Some(types) = &self.institution_types {
            if !types.contains(&v.institution_type) {
                return false;
            }
        }
        if let Some(ids) = &self.institution_ids {
            if !ids.contains(&v.institution_id) {
                return false;
            }
        }
        if let Some(range) = self.date_range {
            if !range.contains(v.timestamp) {
                return false;
            }
        }
        if let Some((lo, hi)) = self.age_range {
            match patients.get(&v.patient_id) {
                Some(p) if (lo..=hi).contains(&p.age) => {}
                _ => return false,
            }
        }
        true
    }
}

/// Applies `spec` to `visits`, preserving input order.
///
/// Institution and date clauses drop individual visits. Age drops every
/// visit of a patient. Visit-count and fee buckets are evaluated per patient
/// on the visits that survive the visit-level clauses, which keeps the
/// operation idempotent.
pub fn filter_records(visits: &VisitTable, patients: &PatientTable, spec: &FilterSpec) -> VisitTable {
    let kept: Vec<&VisitRecord> = visits
        .visits
        .iter()
        .filter(|v| spec.keeps_visit(v, patients))
        .collect();

    if spec.visit_count_buckets.is_none() && spec.fee_buckets.is_none() {
        return VisitTable::new(kept.into_iter().cloned().collect());
    }

    let mut per_patient: HashMap<&str, (u32, f64)> = HashMap::new();
    for v in &kept {
        let e = per_patient.entry(v.patient_id.as_str()).or_default();
        e.0 += 1;
        e.1 += v.total_fee;
    }
    let selected: HashSet<&str> = per_patient
        .iter()
        .filter(|(_, &(count, fee))| {
            let count_ok = spec
                .visit_count_buckets
                .as_ref()
                .is_none_or(|b| b.iter().any(|&(lo, hi)| (lo..=hi).contains(&count)));
            let fee_ok = spec
                .fee_buckets
                .as_ref()
                .is_none_or(|b| b.iter().any(|&(lo, hi)| lo <= fee && fee <= hi));
            count_ok && fee_ok
        })
        .map(|(&id, _)| id)
        .collect();

    VisitTable::new(
        kept.into_iter()
            .filter(|v| selected.contains(v.patient_id.as_str()))
            .cloned()
            .collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBucket {
    pub label: String,
    pub original_count: usize,
    pub current_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub attribute: String,
    pub buckets: Vec<HistogramBucket>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSet {
    pub histograms: Vec<Histogram>,
}

impl HistogramSet {
    pub fn get(&self, attribute: &str) -> Option<&Histogram> {
        self.histograms.iter().find(|h| h.attribute == attribute)
    }
}

pub const HIST_VISIT_COUNT: &str = "visit_count";
pub const HIST_AGE: &str = "age";
pub const HIST_TOTAL_FEE: &str = "total_fee";
pub const HIST_INSTITUTION_TYPE: &str = "institution_type";

fn visit_count_bucket(count: usize, width: usize) -> usize {
    if count == 0 {
        0
    } else {
        (count - 1) / width
    }
}

fn fee_label(x: f64) -> String {
    format!("{x:.2}")
}

/// Patient-level histograms (visit count, age, total fee) place each patient
/// by their value in `original`; a patient counts as current when they still
/// have a visit in `current` (patients without any original visit always
/// count). The institution histogram counts visits.
pub fn attribute_histograms(
    original: &VisitTable,
    current: &VisitTable,
    patients: &PatientTable,
    config: &HistogramConfig,
) -> HistogramSet {
    let mut orig_stats: HashMap<&str, (usize, f64)> = HashMap::new();
    for v in &original.visits {
        let e = orig_stats.entry(v.patient_id.as_str()).or_default();
        e.0 += 1;
        e.1 += v.total_fee;
    }
    let current_patients: HashSet<&str> =
        current.visits.iter().map(|v| v.patient_id.as_str()).collect();
    let is_current = |id: &str| current_patients.contains(id) || !orig_stats.contains_key(id);

    let vc_width = config.visit_count_width.max(1) as usize;
    let max_count = orig_stats.values().map(|s| s.0).max().unwrap_or(0);
    let n_vc = visit_count_bucket(max_count, vc_width) + 1;
    let mut vc = (0..n_vc)
        .map(|i| HistogramBucket {
            label: format!("{}-{}", if i == 0 { 0 } else { i * vc_width + 1 }, (i + 1) * vc_width),
            original_count: 0,
            current_count: 0,
        })
        .collect::<Vec<_>>();

    let age_width = config.age_width.max(1);
    let max_age = patients.records().iter().map(|p| p.age).max().unwrap_or(0);
    let n_age = (max_age / age_width + 1) as usize;
    let mut age = (0..n_age as u32)
        .map(|i| HistogramBucket {
            label: format!("{}-{}", i * age_width, (i + 1) * age_width - 1),
            original_count: 0,
            current_count: 0,
        })
        .collect::<Vec<_>>();

    let fees: Vec<f64> = patients
        .records()
        .iter()
        .map(|p| orig_stats.get(p.patient_id.as_str()).map_or(0.0, |s| s.1))
        .collect();
    let fee_min = fees.iter().copied().fold(f64::INFINITY, f64::min);
    let fee_max = fees.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n_fee = if fees.is_empty() || fee_max <= fee_min {
        1
    } else {
        config.fee_bins.max(1)
    };
    let (fee_min, fee_max) = if fees.is_empty() { (0.0, 0.0) } else { (fee_min, fee_max) };
    let fee_width = (fee_max - fee_min) / n_fee as f64;
    let mut fee = (0..n_fee)
        .map(|i| {
            let lo = fee_min + fee_width * i as f64;
            let hi = if i + 1 == n_fee { fee_max } else { fee_min + fee_width * (i + 1) as f64 };
            HistogramBucket {
                label: format!("{}-{}", fee_label(lo), fee_label(hi)),
                original_count: 0,
                current_count: 0,
            }
        })
        .collect::<Vec<_>>();

    for (p, &total_fee) in patients.records().iter().zip(&fees) {
        let id = p.patient_id.as_str();
        let count = orig_stats.get(id).map_or(0, |s| s.0);
        let cur = is_current(id) as usize;
        let b = &mut vc[visit_count_bucket(count, vc_width)];
        b.original_count += 1;
        b.current_count += cur;
        let b = &mut age[(p.age / age_width) as usize];
        b.original_count += 1;
        b.current_count += cur;
        let idx = if fee_width > 0.0 {
            (((total_fee - fee_min) / fee_width) as usize).min(n_fee - 1)
        } else {
            0
        };
        fee[idx].original_count += 1;
        fee[idx].current_count += cur;
    }

    let mut inst = InstitutionType::ALL
        .iter()
        .map(|t| HistogramBucket {
            label: t.as_str().to_string(),
            original_count: 0,
            current_count: 0,
        })
        .collect::<Vec<_>>();
    let slot = |t: InstitutionType| InstitutionType::ALL.iter().position(|&x| x == t).unwrap();
    for v in &original.visits {
        inst[slot(v.institution_type)].original_count += 1;
    }
    for v in &current.visits {
        inst[slot(v.institution_type)].current_count += 1;
    }

    HistogramSet {
        histograms: vec![
            Histogram {
                attribute: HIST_VISIT_COUNT.into(),
                buckets: vc,
            },
            Histogram {
                attribute: HIST_AGE.into(),
                buckets: age,
            },
            Histogram {
                attribute: HIST_TOTAL_FEE.into(),
                buckets: fee,
            },
            Histogram {
                attribute: HIST_INSTITUTION_TYPE.into(),
                buckets: inst,
            },
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PATIENTS: &str = "patient_id,age,gender\nP-1,25,F\nP-2,40,M\nP-3,67,unknown\n";
    const VISITS: &str = "visit_id,patient_id,timestamp,institution_id,institution_type,disease_code,disease_name,total_fee
V-1,P-1,2019-12-19T16:23:00Z,I-1,drugstore,K02.1,Caries,50.0
V-2,P-2,2019-12-19T16:30Z,I-1,drugstore,K12,Stomatitis,60
V-3,P-3,2019-12-20T08:00:00Z,I-2,public_hospital,I10,Hypertension,300.5
V-4,P-1,2019-12-21T09:00:00Z,I-2,public_hospital,M54.5,Low back pain,120
V-5,P-2,2019-12-22T10:15:00+08:00,I-3,clinic,E10,Diabetes,80
";
    const DRUGS: &str = "visit_id,drug_code,drug_name,dosage
V-1,XA01,Drug A,10mg
V-1,XA02,Drug B,5mg
V-2,XA01,Drug A,10mg
V-3,XC07,Drug C,1 tab
V-4,XM01,Drug D,2 tab
V-4,XM02,Drug E,1 tab
V-5,XA10,Drug F,3 units
";

    fn fixture() -> Dataset {
        load_dataset(
            PATIENTS.as_bytes(),
            VISITS.as_bytes(),
            DRUGS.as_bytes(),
            &LoadConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn loads_counts_and_preserves_order() {
        let ds = fixture();
        assert_eq!(ds.patients.m(), 3);
        assert_eq!(ds.visits.n(), 5);
        assert_eq!(ds.drugs.n(), 7);
        let ids: Vec<_> = ds.visits.iter().map(|v| v.visit_id.as_str()).collect();
        assert_eq!(ids, ["V-1", "V-2", "V-3", "V-4", "V-5"]);
    }

    #[test]
    fn minute_precision_is_zero_filled_and_offsets_normalized() {
        let ds = fixture();
        assert_eq!(ds.visits.visits[1].timestamp.to_rfc3339(), "2019-12-19T16:30:00+00:00");
        assert_eq!(ds.visits.visits[4].timestamp.to_rfc3339(), "2019-12-22T02:15:00+00:00");
        assert_eq!(
            parse_timestamp("2019-12-19T16:23:00.750Z").unwrap(),
            parse_timestamp("2019-12-19T16:23:00Z").unwrap()
        );
    }

    #[test]
    fn dangling_patient_is_named() {
        let visits = VISITS.replace("V-5,P-2", "V-5,P-999");
        let err = load_dataset(
            PATIENTS.as_bytes(),
            visits.as_bytes(),
            DRUGS.as_bytes(),
            &LoadConfig::default(),
        )
        .unwrap_err();
        match &err {
            IngestError::Referential { kind, keys, .. } => {
                assert_eq!(*kind, "patient_id");
                assert_eq!(keys, &vec!["P-999".to_string()]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("P-999"));
    }

    #[test]
    fn dangling_visit_in_drugs() {
        let drugs = format!("{DRUGS}V-77,XA01,Drug A,1\n");
        let err = load_dataset(
            PATIENTS.as_bytes(),
            VISITS.as_bytes(),
            drugs.as_bytes(),
            &LoadConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, IngestError::Referential { kind: "visit_id", .. }));
    }

    #[test]
    fn malformed_row_reports_line() {
        let visits = VISITS.replace("120\n", "12x0\n");
        let err = read_visits(visits.as_bytes(), None).unwrap_err();
        match err {
            IngestError::Malformed { line, .. } => assert_eq!(line, 5),
            other => panic!("unexpected {other:?}"),
        }
        let short = "patient_id,age,gender\nP-1,25\nP-2,30,F,extra\n";
        let err = read_patients(short.as_bytes()).unwrap_err();
        assert!(matches!(err, IngestError::Malformed { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn bad_timestamp_rejected() {
        let visits = VISITS.replace("2019-12-20T08:00:00Z", "20/12/2019 08:00");
        let err = read_visits(visits.as_bytes(), None).unwrap_err();
        assert!(matches!(err, IngestError::Timestamp { line: 4, .. }), "{err:?}");
    }

    #[test]
    fn out_of_declared_range_rejected() {
        let range = DateRange(
            parse_timestamp("2019-12-19T00:00Z").unwrap(),
            parse_timestamp("2019-12-21T00:00Z").unwrap(),
        );
        let err = read_visits(VISITS.as_bytes(), Some(range)).unwrap_err();
        assert!(matches!(err, IngestError::OutOfRange { line: 5, .. }), "{err:?}");
    }

    #[test]
    fn multi_diagnosis_rejected() {
        let visits = VISITS.replace("K12,", "\"K12;K13\",");
        let err = read_visits(visits.as_bytes(), None).unwrap_err();
        assert!(err.to_string().contains("multiple diagnoses"));
    }

    #[test]
    fn header_mismatch_rejected() {
        let err = read_drugs("visit_id,code,name,dosage\n".as_bytes()).unwrap_err();
        assert!(matches!(err, IngestError::Header { .. }));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = read_patients("patient_id,age,gender\nP-1,3,F\nP-1,4,M\n".as_bytes()).unwrap_err();
        assert!(matches!(err, IngestError::Duplicate { .. }));
        let visits = format!("{VISITS}V-1,P-1,2019-12-23T09:00:00Z,I-2,clinic,K02,x,1\n");
        let err = load_dataset(
            PATIENTS.as_bytes(),
            visits.as_bytes(),
            DRUGS.as_bytes(),
            &LoadConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, IngestError::Duplicate { file: "visits.csv", .. }));
    }

    #[test]
    fn empty_filter_is_identity() {
        let ds = fixture();
        let out = filter_records(&ds.visits, &ds.patients, &FilterSpec::default());
        assert_eq!(out, ds.visits);
    }

    #[test]
    fn institution_exclusion_keeps_other_visits() {
        let ds = fixture();
        let spec = FilterSpec {
            institution_types: Some(
                InstitutionType::ALL
                    .into_iter()
                    .filter(|t| *t != InstitutionType::PublicHospital)
                    .collect(),
            ),
            ..Default::default()
        };
        let out = filter_records(&ds.visits, &ds.patients, &spec);
        assert!(out.iter().all(|v| v.institution_type != InstitutionType::PublicHospital));
        // P-1 lost V-4 only.
        assert!(out.iter().any(|v| v.visit_id == "V-1"));
        assert_eq!(out.n(), 3);
    }

    #[test]
    fn age_clause_drops_whole_patient() {
        let ds = fixture();
        let spec = FilterSpec {
            age_range: Some((30, 130)),
            ..Default::default()
        };
        let out = filter_records(&ds.visits, &ds.patients, &spec);
        // linear-scan oracle
        let expected: Vec<_> = ds
            .visits
            .iter()
            .filter(|v| ds.patients.get(&v.patient_id).unwrap().age >= 30)
            .cloned()
            .collect();
        assert_eq!(out.visits, expected);
        assert!(out.iter().all(|v| v.patient_id != "P-1"));
    }

    #[test]
    fn visit_count_bucket_clause() {
        let ds = fixture();
        let spec = FilterSpec {
            visit_count_buckets: Some(vec![(2, 5)]),
            ..Default::default()
        };
        let out = filter_records(&ds.visits, &ds.patients, &spec);
        let pats: BTreeSet<_> = out.iter().map(|v| v.patient_id.as_str()).collect();
        assert_eq!(pats, BTreeSet::from(["P-1", "P-2"]));
    }

    #[test]
    fn degenerate_spec_invalid() {
        let spec = FilterSpec {
            age_range: Some((50, 10)),
            ..Default::default()
        };
        assert_eq!(spec.validate(), Err(FilterError::Degenerate { clause: "age_range" }));
        let spec = FilterSpec {
            fee_buckets: Some(vec![(0.0, f64::NAN)]),
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn histograms_identity_and_partition() {
        let ds = fixture();
        let h = attribute_histograms(&ds.visits, &ds.visits, &ds.patients, &ds.histogram);
        assert_eq!(h.histograms.len(), 4);
        for hist in &h.histograms {
            for b in &hist.buckets {
                assert_eq!(b.original_count, b.current_count, "{}", hist.attribute);
            }
        }
        let vc: usize = h.get(HIST_VISIT_COUNT).unwrap().buckets.iter().map(|b| b.original_count).sum();
        assert_eq!(vc, ds.patients.m());
        let inst: usize = h
            .get(HIST_INSTITUTION_TYPE)
            .unwrap()
            .buckets
            .iter()
            .map(|b| b.original_count)
            .sum();
        assert_eq!(inst, ds.visits.n());
    }

    #[test]
    fn histogram_excluded_patient_recount() {
        let ds = fixture();
        let spec = FilterSpec {
            age_range: Some((30, 130)),
            ..Default::default()
        };
        let cur = filter_records(&ds.visits, &ds.patients, &spec);
        let h = attribute_histograms(&ds.visits, &cur, &ds.patients, &ds.histogram);
        let age = h.get(HIST_AGE).unwrap();
        let b = age.buckets.iter().find(|b| b.label == "20-29").unwrap();
        assert_eq!(b.original_count, 1);
        assert_eq!(b.current_count, 0);
        for hist in &h.histograms {
            for b in &hist.buckets {
                assert!(b.current_count <= b.original_count);
            }
        }
    }

    #[test]
    fn filter_spec_json_shape() {
        let spec: FilterSpec = serde_json::from_str(
            r#"{"age_range":[30,60],"institution_types":["drugstore"],"date_range":["2019-01-01T00:00:00Z","2019-12-31T23:59:59Z"]}"#,
        )
        .unwrap();
        assert_eq!(spec.age_range, Some((30, 60)));
        assert!(spec.validate().is_ok());
    }
}
