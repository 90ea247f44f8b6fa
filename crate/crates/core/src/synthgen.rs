//! Synthetic claim datasets with planted collusive rings and benign
//! chronic-care confounder groups, plus a detection scoring harness.
//!
//! Rings co-visit a shared drugstore or community hospital within a few
//! minutes, carry unrelated ("messy") diagnoses, near-constant fees and a
//! common basket of resellable drugs. Confounders meet on a weekly cadence at
//! a community hospital or clinic for the same chronic condition. Everyone
//! else visits a few home institutions independently.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use crate::codesim::{build_profiles, similarity_matrix};
use crate::community::SuspiciousGroupSet;
use crate::ingest::{
    DateRange, DrugRecord, DrugTable, Gender, InstitutionType, PatientRecord, PatientTable, VisitRecord,
    VisitTable,
};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(
        "planted groups are not separated: confounder disease similarity {confounders:.3} <= ring similarity {rings:.3}"
    )]
    Separation { confounders: f64, rings: f64 },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstitutionCounts {
    pub public_hospital: usize,
    pub community_hospital: usize,
    pub drugstore: usize,
    pub clinic: usize,
    pub other: usize,
}

impl Default for InstitutionCounts {
    fn default() -> Self {
        Self {
            public_hospital: 12,
            community_hospital: 40,
            drugstore: 90,
            clinic: 40,
            other: 8,
        }
    }
}

impl InstitutionCounts {
    fn get(&self, t: InstitutionType) -> usize {
        match t {
            InstitutionType::PublicHospital => self.public_hospital,
            InstitutionType::CommunityHospital => self.community_hospital,
            InstitutionType::Drugstore => self.drugstore,
            InstitutionType::Clinic => self.clinic,
            InstitutionType::Other => self.other,
        }
    }
}

/// Log-normal fee parameters (of the underlying normal) per institution type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeeModel {
    pub log_mean: BTreeMap<InstitutionType, f64>,
    pub log_sd: f64,
    /// Range of a ring's base per-visit fee.
    pub ring_fee_range: (f64, f64),
    /// Relative jitter around a ring's base fee.
    pub ring_fee_jitter: f64,
}

impl Default for FeeModel {
    fn default() -> Self {
        Self {
            log_mean: BTreeMap::from([
                (InstitutionType::PublicHospital, 5.6),
                (InstitutionType::CommunityHospital, 4.8),
                (InstitutionType::Drugstore, 4.6),
                (InstitutionType::Clinic, 4.4),
                (InstitutionType::Other, 4.2),
            ]),
            log_sd: 0.6,
            ring_fee_range: (200.0, 600.0),
            ring_fee_jitter: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub m_patients: usize,
    pub date_range: DateRange,
    pub institutions: InstitutionCounts,
    pub n_fraud_rings: usize,
    pub ring_size_range: (usize, usize),
    /// Number of joint visits a ring makes.
    pub ring_covisit_count_range: (usize, usize),
    /// Arrival offsets within a joint visit, minutes; pairwise gaps stay
    /// within the width of this range.
    pub ring_gap_minutes_range: (f64, f64),
    pub ring_institution_types: Vec<InstitutionType>,
    /// Length of the window a ring is active in, days.
    pub ring_active_days_range: (i64, i64),
    /// Probability that a member joins a given joint visit.
    pub ring_attendance: f64,
    pub n_confounder_groups: usize,
    pub confounder_size_range: (usize, usize),
    pub confounder_period_days: i64,
    pub confounder_sessions_range: (usize, usize),
    pub confounder_attendance: f64,
    /// Spread of arrival times within a confounder session, minutes.
    pub confounder_spread_minutes: f64,
    pub confounder_disease_pool: Vec<String>,
    /// Background visits per patient-year.
    pub background_visit_rate: f64,
    pub home_institutions: usize,
    /// Mean number of drug rows per visit beyond the first.
    pub extra_drugs_per_visit: f64,
    pub fees: FeeModel,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            m_patients: 1035,
            date_range: DateRange(
                Utc.with_ymd_and_hms(2019, 1, 1, 0, 0, 0).unwrap(),
                Utc.with_ymd_and_hms(2020, 12, 31, 23, 59, 59).unwrap(),
            ),
            institutions: InstitutionCounts::default(),
            n_fraud_rings: 20,
            ring_size_range: (3, 8),
            ring_covisit_count_range: (8, 16),
            ring_gap_minutes_range: (0.0, 15.0),
            ring_institution_types: vec![InstitutionType::Drugstore, InstitutionType::CommunityHospital],
            ring_active_days_range: (30, 120),
            ring_attendance: 0.9,
            n_confounder_groups: 3,
            confounder_size_range: (4, 6),
            confounder_period_days: 7,
            confounder_sessions_range: (20, 52),
            confounder_attendance: 0.85,
            confounder_spread_minutes: 40.0,
            confounder_disease_pool: ["M54.5", "I10", "E11.9", "J45.9", "M17.0", "K29.5"]
                .into_iter()
                .map(String::from)
                .collect(),
            background_visit_rate: 21.7,
            home_institutions: 3,
            extra_drugs_per_visit: 5.6,
            fees: FeeModel::default(),
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::Config(msg));
        if self.m_patients == 0 {
            return bad("m_patients must be positive".into());
        }
        if self.date_range.0 >= self.date_range.1 {
            return bad("date_range is empty".into());
        }
        for (name, (lo, hi)) in [
            ("ring_size_range", self.ring_size_range),
            ("ring_covisit_count_range", self.ring_covisit_count_range),
            ("confounder_size_range", self.confounder_size_range),
            ("confounder_sessions_range", self.confounder_sessions_range),
        ] {
            if lo > hi {
                return bad(format!("{name}: min exceeds max"));
            }
        }
        if self.n_fraud_rings > 0 && self.ring_size_range.0 < 2 {
            return bad("rings need at least 2 members".into());
        }
        if self.n_confounder_groups > 0 && self.confounder_size_range.0 < 2 {
            return bad("confounder groups need at least 2 members".into());
        }
        let (glo, ghi) = self.ring_gap_minutes_range;
        if !(glo >= 0.0 && glo <= ghi && ghi.is_finite()) {
            return bad("ring_gap_minutes_range must satisfy 0 <= min <= max".into());
        }
        if self.ring_active_days_range.0 < 1 || self.ring_active_days_range.0 > self.ring_active_days_range.1 {
            return bad("ring_active_days_range must satisfy 1 <= min <= max".into());
        }
        for (name, p) in [
            ("ring_attendance", self.ring_attendance),
            ("confounder_attendance", self.confounder_attendance),
        ] {
            if !(p > 0.0 && p <= 1.0) {
                return bad(format!("{name} must be in (0, 1]"));
            }
        }
        if self.confounder_period_days < 1 {
            return bad("confounder_period_days must be positive".into());
        }
        if self.n_confounder_groups > 0 && self.confounder_disease_pool.is_empty() {
            return bad("confounder_disease_pool is empty".into());
        }
        if self.n_fraud_rings > 0 {
            if self.ring_institution_types.is_empty() {
                return bad("ring_institution_types is empty".into());
            }
            if self.ring_institution_types.iter().all(|&t| self.institutions.get(t) == 0) {
                return bad("no institutions of the ring institution types".into());
            }
        }
        if self.n_confounder_groups > 0
            && self.institutions.community_hospital + self.institutions.clinic == 0
        {
            return bad("confounders need a community hospital or clinic".into());
        }
        if InstitutionType::ALL.iter().all(|&t| self.institutions.get(t) == 0) {
            return bad("no institutions".into());
        }
        if !(self.background_visit_rate >= 0.0 && self.extra_drugs_per_visit >= 0.0) {
            return bad("rates must be non-negative".into());
        }
        let span_days = (self.date_range.1 - self.date_range.0).num_days();
        if self.n_fraud_rings > 0 && self.ring_active_days_range.1 > span_days {
            return bad("ring active window longer than the date range".into());
        }
        let min_planted = self.n_fraud_rings * self.ring_size_range.0
            + self.n_confounder_groups * self.confounder_size_range.0;
        if min_planted > self.m_patients {
            return bad(format!(
                "planted groups need at least {min_planted} patients but m_patients = {}",
                self.m_patients
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Fraud,
    Confounder,
    Background,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub rings: Vec<Vec<String>>,
    pub confounders: Vec<Vec<String>>,
    /// Per-visit provenance; kept in memory only.
    #[serde(skip)]
    pub visit_tags: BTreeMap<String, Provenance>,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub patients: PatientTable,
    pub visits: VisitTable,
    pub drugs: DrugTable,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone)]
struct Institution {
    id: String,
    kind: InstitutionType,
}

struct DraftVisit {
    patient: usize,
    time: DateTime<Utc>,
    institution: usize,
    disease: String,
    fee: f64,
    drugs: Vec<String>,
    tag: Provenance,
}

const LETTERS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTVWXYZ";

fn random_disease(rng: &mut ChaCha8Rng) -> String {
    let letter = LETTERS[rng.random_range(0..LETTERS.len())] as char;
    format!("{letter}{:02}.{}", rng.random_range(0..100), rng.random_range(0..10))
}

/// A sibling code in the same category: the subcategory digit is redrawn.
fn sibling(code: &str, rng: &mut ChaCha8Rng) -> String {
    let digit = rng.random_range(0..10);
    match code.split_once('.') {
        Some((cat, _)) => format!("{cat}.{digit}"),
        None => format!("{code}.{digit}"),
    }
}

/// Drug codes prescribed for a disease: `X` + the disease's 3-character
/// category + a two-digit product number.
fn drug_for(disease: &str, rng: &mut ChaCha8Rng) -> String {
    let cat: String = disease.chars().filter(|&c| c != '.').take(3).collect();
    format!("X{cat}{:02}", rng.random_range(0..8))
}

fn disease_name(code: &str) -> String {
    format!("Condition {code}")
}

fn round_cents(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

struct Generator<'c> {
    cfg: &'c SynthConfig,
    rng: ChaCha8Rng,
    institutions: Vec<Institution>,
    by_type: BTreeMap<InstitutionType, Vec<usize>>,
    drafts: Vec<DraftVisit>,
    extra_drugs: Option<Poisson<f64>>,
}

impl Generator<'_> {
    fn minute_of_day(&mut self, from_h: i64, to_h: i64) -> Duration {
        Duration::minutes(self.rng.random_range(from_h * 60..to_h * 60))
    }

    fn day_in(&mut self, start: DateTime<Utc>, days: i64) -> DateTime<Utc> {
        let midnight = start.date_naive().and_hms_opt(0, 0, 0).unwrap().and_utc();
        midnight + Duration::days(self.rng.random_range(0..days.max(1)))
    }

    fn fee(&mut self, kind: InstitutionType) -> f64 {
        let mu = self.cfg.fees.log_mean.get(&kind).copied().unwrap_or(4.5);
        let d = LogNormal::new(mu, self.cfg.fees.log_sd).expect("valid log-normal");
        round_cents(d.sample(&mut self.rng))
    }

    fn extra_drug_count(&mut self) -> usize {
        match &self.extra_drugs {
            Some(p) => p.sample(&mut self.rng) as usize,
            None => 0,
        }
    }

    fn clamp_time(&self, t: DateTime<Utc>) -> DateTime<Utc> {
        t.clamp(self.cfg.date_range.0, self.cfg.date_range.1)
    }
}

/// Generates a dataset. Output is a pure function of `config`.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset, SynthError> {
    config.validate()?;
    let cfg = config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut institutions = Vec::new();
    let mut by_type: BTreeMap<InstitutionType, Vec<usize>> = BTreeMap::new();
    let mut next_id = 9_500_000u32;
    for kind in InstitutionType::ALL {
        for _ in 0..cfg.institutions.get(kind) {
            next_id += rng.random_range(1..40);
            by_type.entry(kind).or_default().push(institutions.len());
            institutions.push(Institution {
                id: next_id.to_string(),
                kind,
            });
        }
    }

    let width = cfg.m_patients.to_string().len().max(4);
    let patient_ids: Vec<String> = (1..=cfg.m_patients).map(|i| format!("P-{i:0width$}")).collect();
    let patients: Vec<PatientRecord> = patient_ids
        .iter()
        .map(|id| PatientRecord {
            patient_id: id.clone(),
            age: rng.random_range(18..90),
            gender: if rng.random_bool(0.5) { Gender::F } else { Gender::M },
        })
        .collect();

    // Planted memberships.
    let mut pool: Vec<usize> = (0..cfg.m_patients).collect();
    pool.shuffle(&mut rng);
    let mut cursor = 0;
    let mut take = |n: usize, pool: &[usize]| -> Result<Vec<usize>, SynthError> {
        if cursor + n > pool.len() {
            return Err(SynthError::Config(format!(
                "planted groups exceed m_patients = {}",
                pool.len()
            )));
        }
        let mut g = pool[cursor..cursor + n].to_vec();
        cursor += n;
        g.sort_unstable();
        Ok(g)
    };
    let mut rings = Vec::new();
    for _ in 0..cfg.n_fraud_rings {
        let size = rng.random_range(cfg.ring_size_range.0..=cfg.ring_size_range.1);
        rings.push(take(size, &pool)?);
    }
    let mut confounders = Vec::new();
    for _ in 0..cfg.n_confounder_groups {
        let size = rng.random_range(cfg.confounder_size_range.0..=cfg.confounder_size_range.1);
        confounders.push(take(size, &pool)?);
    }

    let extra_drugs = (cfg.extra_drugs_per_visit > 0.0)
        .then(|| Poisson::new(cfg.extra_drugs_per_visit).expect("positive rate"));
    let mut g = Generator {
        cfg,
        rng,
        institutions,
        by_type,
        drafts: Vec::new(),
        extra_drugs,
    };

    // Chronic anchor per confounder group; its members' routine care is
    // dominated by that condition.
    let mut personal: Vec<Vec<String>> = (0..cfg.m_patients)
        .map(|_| {
            let k = g.rng.random_range(2..=4);
            (0..k).map(|_| random_disease(&mut g.rng)).collect()
        })
        .collect();
    let mut anchors = Vec::new();
    for members in &confounders {
        let anchor = cfg
            .confounder_disease_pool
            .choose(&mut g.rng)
            .expect("pool checked non-empty")
            .clone();
        for &m in members {
            personal[m] = vec![anchor.clone(), anchor.clone(), sibling(&anchor, &mut g.rng)];
        }
        anchors.push(anchor);
    }

    background_visits(&mut g, &personal);
    for members in &rings {
        ring_visits(&mut g, members);
    }
    for (members, anchor) in confounders.iter().zip(&anchors) {
        confounder_visits(&mut g, members, anchor);
    }

    let Generator {
        institutions,
        mut drafts,
        ..
    } = g;
    drafts.sort_by(|a, b| {
        a.time
            .cmp(&b.time)
            .then(a.patient.cmp(&b.patient))
            .then(a.institution.cmp(&b.institution))
    });

    let vwidth = drafts.len().to_string().len().max(6);
    let mut visits = Vec::with_capacity(drafts.len());
    let mut drugs = Vec::new();
    let mut visit_tags = BTreeMap::new();
    for (k, d) in drafts.into_iter().enumerate() {
        let visit_id = format!("V-{:0vwidth$}", k + 1);
        for code in &d.drugs {
            drugs.push(DrugRecord {
                visit_id: visit_id.clone(),
                drug_code: code.clone(),
                drug_name: format!("Drug {code}"),
                dosage: "1 box".into(),
            });
        }
        visit_tags.insert(visit_id.clone(), d.tag);
        let inst = &institutions[d.institution];
        visits.push(VisitRecord {
            visit_id,
            patient_id: patient_ids[d.patient].clone(),
            timestamp: d.time,
            institution_id: inst.id.clone(),
            institution_type: inst.kind,
            disease_name: disease_name(&d.disease),
            disease_code: d.disease,
            total_fee: d.fee,
        });
    }

    let names = |groups: &[Vec<usize>]| -> Vec<Vec<String>> {
        groups
            .iter()
            .map(|g| g.iter().map(|&i| patient_ids[i].clone()).collect())
            .collect()
    };
    let dataset = SynthDataset {
        patients: PatientTable::new(patients).map_err(|e| SynthError::Config(e.to_string()))?,
        visits: VisitTable::new(visits),
        drugs: DrugTable { rows: drugs },
        truth: GroundTruth {
            rings: names(&rings),
            confounders: names(&confounders),
            visit_tags,
        },
    };
    check_separation(&dataset)?;
    Ok(dataset)
}

fn background_visits(g: &mut Generator<'_>, personal: &[Vec<String>]) {
    let cfg = g.cfg;
    let years = (cfg.date_range.1 - cfg.date_range.0).num_seconds() as f64 / (365.25 * 86_400.0);
    let span_days = (cfg.date_range.1 - cfg.date_range.0).num_days().max(1);
    let n_inst = g.institutions.len();
    for (patient, codes) in personal.iter().enumerate() {
        let homes: Vec<usize> = (0..cfg.home_institutions.max(1))
            .map(|_| g.rng.random_range(0..n_inst))
            .collect();
        let rate = cfg.background_visit_rate * years * g.rng.random_range(0.25..1.75);
        let count = if rate > 0.0 {
            Poisson::new(rate).expect("positive rate").sample(&mut g.rng) as usize
        } else {
            0
        };
        for _ in 0..count {
            let day = g.day_in(cfg.date_range.0, span_days + 1);
            let t = day + g.minute_of_day(8, 20) + Duration::seconds(g.rng.random_range(0..60));
            let time = g.clamp_time(t);
            let institution = if g.rng.random_bool(0.8) {
                *homes.choose(&mut g.rng).expect("non-empty")
            } else {
                g.rng.random_range(0..n_inst)
            };
            let disease = if g.rng.random_bool(0.85) {
                codes.choose(&mut g.rng).expect("non-empty").clone()
            } else {
                random_disease(&mut g.rng)
            };
            let fee = g.fee(g.institutions[institution].kind);
            let mut drugs = vec![drug_for(&disease, &mut g.rng)];
            for _ in 0..g.extra_drug_count() {
                drugs.push(drug_for(&disease, &mut g.rng));
            }
            g.drafts.push(DraftVisit {
                patient,
                time,
                institution,
                disease,
                fee,
                drugs,
                tag: Provenance::Background,
            });
        }
    }
}

/// Resellable products shared by every ring's basket.
fn marketable_drugs() -> Vec<String> {
    (0..20).map(|k| format!("XN02B{:02}", k)).collect()
}

fn ring_visits(g: &mut Generator<'_>, members: &[usize]) {
    let cfg = g.cfg;
    let candidates: Vec<usize> = cfg
        .ring_institution_types
        .iter()
        .flat_map(|t| g.by_type.get(t).cloned().unwrap_or_default())
        .collect();
    let institution = *candidates.choose(&mut g.rng).expect("validated non-empty");
    let market = marketable_drugs();
    let basket_size = g.rng.random_range(4..=6);
    let basket: Vec<String> = market
        .choose_multiple(&mut g.rng, basket_size)
        .cloned()
        .collect();
    let base_fee = g.rng.random_range(cfg.fees.ring_fee_range.0..=cfg.fees.ring_fee_range.1);

    let span_days = (cfg.date_range.1 - cfg.date_range.0).num_days();
    let active = g.rng.random_range(cfg.ring_active_days_range.0..=cfg.ring_active_days_range.1);
    let start = g.day_in(cfg.date_range.0, (span_days - active).max(1));
    let events = g
        .rng
        .random_range(cfg.ring_covisit_count_range.0..=cfg.ring_covisit_count_range.1);
    let mut days: Vec<i64> = (0..active).collect();
    days.shuffle(&mut g.rng);
    let mut days: Vec<i64> = days.into_iter().take(events).collect();
    days.sort_unstable();

    let (glo, ghi) = cfg.ring_gap_minutes_range;
    let (lo_s, hi_s) = ((glo * 60.0).round() as i64, (ghi * 60.0).round() as i64);
    for day in days {
        let t0 = start + Duration::days(day) + g.minute_of_day(8, 19);
        let mut attending: Vec<usize> = members
            .iter()
            .copied()
            .filter(|_| g.rng.random_bool(cfg.ring_attendance))
            .collect();
        if attending.len() < 2 {
            attending = members.choose_multiple(&mut g.rng, 2).copied().collect();
        }
        for patient in attending {
            let t = t0 + Duration::seconds(g.rng.random_range(lo_s..=hi_s));
            let time = g.clamp_time(t);
            let disease = random_disease(&mut g.rng);
            let jitter = cfg.fees.ring_fee_jitter;
            let fee = round_cents(base_fee * g.rng.random_range(1.0 - jitter..=1.0 + jitter));
            let n = 1 + g.extra_drug_count();
            let drugs = (0..n)
                .map(|_| basket.choose(&mut g.rng).expect("non-empty").clone())
                .collect();
            g.drafts.push(DraftVisit {
                patient,
                time,
                institution,
                disease,
                fee,
                drugs,
                tag: Provenance::Fraud,
            });
        }
    }
}

fn confounder_visits(g: &mut Generator<'_>, members: &[usize], anchor: &str) {
    let cfg = g.cfg;
    let candidates: Vec<usize> = [InstitutionType::CommunityHospital, InstitutionType::Clinic]
        .iter()
        .flat_map(|t| g.by_type.get(t).cloned().unwrap_or_default())
        .collect();
    let institution = *candidates.choose(&mut g.rng).expect("validated non-empty");
    let span_days = (cfg.date_range.1 - cfg.date_range.0).num_days();
    let sessions = g
        .rng
        .random_range(cfg.confounder_sessions_range.0..=cfg.confounder_sessions_range.1);
    let needed = sessions as i64 * cfg.confounder_period_days;
    let start = g.day_in(cfg.date_range.0, (span_days - needed).max(1));
    let session_minute = g.minute_of_day(8, 16);
    let spread_s = (cfg.confounder_spread_minutes * 60.0).round() as i64;
    let kind = g.institutions[institution].kind;
    for s in 0..sessions {
        let t0 = start + Duration::days(s as i64 * cfg.confounder_period_days) + session_minute;
        if t0 > cfg.date_range.1 {
            break;
        }
        for &patient in members {
            if !g.rng.random_bool(cfg.confounder_attendance) {
                continue;
            }
            let t = t0 + Duration::seconds(g.rng.random_range(0..=spread_s));
            let time = g.clamp_time(t);
            let disease = if g.rng.random_bool(0.8) {
                anchor.to_string()
            } else {
                sibling(anchor, &mut g.rng)
            };
            let fee = g.fee(kind);
            let n = 1 + g.extra_drug_count();
            let drugs = (0..n).map(|_| drug_for(anchor, &mut g.rng)).collect();
            g.drafts.push(DraftVisit {
                patient,
                time,
                institution,
                disease,
                fee,
                drugs,
                tag: Provenance::Confounder,
            });
        }
    }
}

/// Mean of the per-group mean pairwise disease similarities.
pub fn mean_group_disease_similarity(groups: &[Vec<String>], visits: &VisitTable, drugs: &DrugTable) -> Option<f64> {
    let groups: Vec<&Vec<String>> = groups.iter().filter(|g| g.len() >= 2).collect();
    if groups.is_empty() {
        return None;
    }
    let members: Vec<String> = groups.iter().flat_map(|g| g.iter().cloned()).collect();
    let profiles = build_profiles(&members, visits, drugs);
    let total: f64 = groups
        .iter()
        .map(|g| {
            similarity_matrix(g, &profiles)
                .expect("non-empty group")
                .mean_disease_similarity()
        })
        .sum();
    Some(total / groups.len() as f64)
}

fn check_separation(ds: &SynthDataset) -> Result<(), SynthError> {
    let conf = mean_group_disease_similarity(&ds.truth.confounders, &ds.visits, &ds.drugs);
    let ring = mean_group_disease_similarity(&ds.truth.rings, &ds.visits, &ds.drugs);
    if let (Some(confounders), Some(rings)) = (conf, ring) {
        if confounders <= rings {
            return Err(SynthError::Separation { confounders, rings });
        }
    }
    Ok(())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<(), SynthError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let to_io = |e: csv::Error| SynthError::Io {
        path: path.display().to_string(),
        source: e.into(),
    };
    w.write_record(header).map_err(to_io)?;
    for row in rows {
        w.write_record(&row).map_err(to_io)?;
    }
    w.flush().map_err(io_err(path))
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

/// Writes `patients.csv`, `visits.csv`, `drugs.csv` and `ground_truth.json`
/// into `dir`, creating it if needed.
pub fn write_dataset(dir: &Path, ds: &SynthDataset) -> Result<(), SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_csv(
        &dir.join("patients.csv"),
        &crate::ingest::PATIENTS_HEADER,
        ds.patients.records().iter().map(|p| {
            vec![p.patient_id.clone(), p.age.to_string(), p.gender.as_str().to_string()]
        }),
    )?;
    write_csv(
        &dir.join("visits.csv"),
        &crate::ingest::VISITS_HEADER,
        ds.visits.iter().map(|v| {
            vec![
                v.visit_id.clone(),
                v.patient_id.clone(),
                format_timestamp(v.timestamp),
                v.institution_id.clone(),
                v.institution_type.as_str().to_string(),
                v.disease_code.clone(),
                v.disease_name.clone(),
                format!("{:.2}", v.total_fee),
            ]
        }),
    )?;
    write_csv(
        &dir.join("drugs.csv"),
        &crate::ingest::DRUGS_HEADER,
        ds.drugs.rows.iter().map(|d| {
            vec![
                d.visit_id.clone(),
                d.drug_code.clone(),
                d.drug_name.clone(),
                d.dosage.clone(),
            ]
        }),
    )?;
    let path = dir.join(GROUND_TRUTH_FILE);
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    let json = serde_json::to_string_pretty(&ds.truth).expect("ground truth serializes");
    f.write_all(json.as_bytes()).map_err(io_err(&path))?;
    f.write_all(b"\n").map_err(io_err(&path))
}

/// Detection quality against planted rings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ari: f64,
    pub detected_groups: usize,
    pub rings: usize,
    pub matched: usize,
    pub jaccard_threshold: f64,
}

pub const HIT_JACCARD: f64 = 0.5;

pub fn jaccard(a: &BTreeSet<&str>, b: &BTreeSet<&str>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn choose2(n: usize) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(truth: &[usize], predicted: &[usize]) -> f64 {
    assert_eq!(truth.len(), predicted.len());
    let n = truth.len();
    let mut table: HashMap<(usize, usize), usize> = HashMap::new();
    let mut rows: HashMap<usize, usize> = HashMap::new();
    let mut cols: HashMap<usize, usize> = HashMap::new();
    for (&t, &p) in truth.iter().zip(predicted) {
        *table.entry((t, p)).or_insert(0) += 1;
        *rows.entry(t).or_insert(0) += 1;
        *cols.entry(p).or_insert(0) += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = rows.values().map(|&c| choose2(c)).sum();
    let sum_cols: f64 = cols.values().map(|&c| choose2(c)).sum();
    let total = choose2(n);
    let expected = if total > 0.0 { sum_rows * sum_cols / total } else { 0.0 };
    let max = 0.5 * (sum_rows + sum_cols);
    if (max - expected).abs() < 1e-12 {
        return if table.len() == rows.len() && table.len() == cols.len() { 1.0 } else { 0.0 };
    }
    (index - expected) / (max - expected)
}

/// Scores detected member lists against the planted rings.
///
/// A detected group and a ring match when their Jaccard similarity is at
/// least 0.5 (inclusive). Matching is one-to-one, greedy by descending
/// Jaccard, so a ring split into two halves is recalled once while both
/// halves count against precision. ARI is computed over ring members only,
/// with undetected members as singletons.
pub fn evaluate_members(detected: &[Vec<String>], truth: &GroundTruth) -> EvalReport {
    let det_sets: Vec<BTreeSet<&str>> = detected
        .iter()
        .map(|g| g.iter().map(String::as_str).collect())
        .collect();
    let ring_sets: Vec<BTreeSet<&str>> = truth
        .rings
        .iter()
        .map(|g| g.iter().map(String::as_str).collect())
        .collect();
    let mut candidates = Vec::new();
    for (d, ds) in det_sets.iter().enumerate() {
        for (r, rs) in ring_sets.iter().enumerate() {
            let j = jaccard(ds, rs);
            if j >= HIT_JACCARD {
                candidates.push((j, d, r));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut det_used = vec![false; det_sets.len()];
    let mut ring_used = vec![false; ring_sets.len()];
    let mut matched = 0;
    for (_, d, r) in candidates {
        if !det_used[d] && !ring_used[r] {
            det_used[d] = true;
            ring_used[r] = true;
            matched += 1;
        }
    }
    let precision = if det_sets.is_empty() {
        if ring_sets.is_empty() { 1.0 } else { 0.0 }
    } else {
        matched as f64 / det_sets.len() as f64
    };
    let recall = if ring_sets.is_empty() {
        1.0
    } else {
        matched as f64 / ring_sets.len() as f64
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };

    let mut truth_labels = Vec::new();
    let mut pred_labels = Vec::new();
    let singleton_base = det_sets.len();
    for (r, ring) in ring_sets.iter().enumerate() {
        for member in ring {
            truth_labels.push(r);
            let label = det_sets
                .iter()
                .position(|d| d.contains(member))
                .unwrap_or(singleton_base + truth_labels.len());
            pred_labels.push(label);
        }
    }
    let ari = if truth_labels.is_empty() {
        1.0
    } else {
        adjusted_rand_index(&truth_labels, &pred_labels)
    };
    EvalReport {
        precision,
        recall,
        f1,
        ari,
        detected_groups: det_sets.len(),
        rings: ring_sets.len(),
        matched,
        jaccard_threshold: HIT_JACCARD,
    }
}

pub fn evaluate(detected: &SuspiciousGroupSet, truth: &GroundTruth) -> EvalReport {
    let members: Vec<Vec<String>> = detected.groups.iter().map(|g| g.members.clone()).collect();
    evaluate_members(&members, truth)
}
