//! Dual-event prompt suites: record schema, a synthetic generator with the
//! reference category counts, and a validator.
//!
//! Suite files are JSON Lines: one self-contained record object per line.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{EventParams, View};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    General,
    MotionOrder,
    HumanIdentity,
    ComplexPlot,
    EgoExo,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::General,
        Category::MotionOrder,
        Category::HumanIdentity,
        Category::ComplexPlot,
        Category::EgoExo,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::General => "General",
            Category::MotionOrder => "MotionOrder",
            Category::HumanIdentity => "HumanIdentity",
            Category::ComplexPlot => "ComplexPlot",
            Category::EgoExo => "EgoExo",
        }
    }

    fn id_prefix(self) -> &'static str {
        match self {
            Category::General => "general",
            Category::MotionOrder => "motion-order",
            Category::HumanIdentity => "human-identity",
            Category::ComplexPlot => "complex-plot",
            Category::EgoExo => "egoexo",
        }
    }

    /// Record count of the reference suite.
    pub fn reference_count(self) -> usize {
        match self {
            Category::General => 60,
            Category::MotionOrder => 98,
            Category::HumanIdentity => 32,
            Category::ComplexPlot => 60,
            Category::EgoExo => 100,
        }
    }
}

impl std::fmt::Display for Category {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown category {s:?}")))
    }
}

/// Sum of the reference per-category counts.
pub const REFERENCE_SUITE_SIZE: usize = 60 + 98 + 32 + 60 + 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub id: String,
    pub category: Category,
    pub view: View,
    #[serde(default)]
    pub pair_id: Option<String>,
    pub events: Vec<EventParams>,
    #[serde(default)]
    pub text: Option<String>,
}

impl PromptRecord {
    pub fn event_pair(&self) -> Result<[&EventParams; 2]> {
        match self.events.as_slice() {
            [a, b] => Ok([a, b]),
            other => Err(Error::Config(format!(
                "record {} has {} events, expected 2",
                self.id,
                other.len()
            ))),
        }
    }
}

/// Knobs of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteGenConfig {
    pub feature_dim: usize,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Smallest angular separation between the two headings of a General or
    /// EgoExo prompt.
    pub min_separation: f64,
}

impl Default for SuiteGenConfig {
    fn default() -> Self {
        Self {
            feature_dim: 2,
            speed_min: 0.75,
            speed_max: 1.25,
            min_separation: FRAC_PI_2,
        }
    }
}

struct Gen<'a> {
    rng: ChaCha8Rng,
    cfg: &'a SuiteGenConfig,
}

impl Gen<'_> {
    fn angle(&mut self) -> f64 {
        self.rng.random_range(0.0..TAU)
    }

    fn speed(&mut self) -> f64 {
        if self.cfg.speed_max > self.cfg.speed_min {
            self.rng.random_range(self.cfg.speed_min..self.cfg.speed_max)
        } else {
            self.cfg.speed_min
        }
    }

    /// Random unit vector in `d` dimensions (uniform direction).
    fn unit(&mut self) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..self.cfg.feature_dim)
                .map(|_| self.rng.random_range(-1.0..1.0))
                .collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-3 && n <= 1.0 {
                return v.into_iter().map(|x| x / n).collect();
            }
        }
    }

    /// A unit vector at least 60 degrees away from `from`.
    fn distinct_unit(&mut self, from: &[f64]) -> Vec<f64> {
        loop {
            let v = self.unit();
            let dot: f64 = v.iter().zip(from).map(|(a, b)| a * b).sum();
            if dot <= 0.5 {
                return v;
            }
        }
    }

    /// Second heading separated from the first by at least `min_separation`.
    fn separated(&mut self, theta: f64) -> f64 {
        let sep = self.cfg.min_separation.clamp(0.0, PI);
        let offset = if sep < PI {
            self.rng.random_range(sep..=(TAU - sep))
        } else {
            PI
        };
        theta + offset
    }

    fn events(&mut self, category: Category) -> [EventParams; 2] {
        let theta1 = self.angle();
        let speed = self.speed();
        let id1 = self.unit();
        let bg1 = self.unit();
        let e1 = EventParams::new(theta1, speed, id1.clone(), bg1.clone());
        let e2 = match category {
            Category::General | Category::EgoExo => {
                EventParams::new(self.separated(theta1), speed, id1, bg1)
            }
            Category::MotionOrder => EventParams::new(theta1 + FRAC_PI_2, speed, id1, bg1),
            Category::HumanIdentity => {
                let id2 = self.distinct_unit(&id1);
                EventParams::new(theta1, speed, id2, bg1)
            }
            Category::ComplexPlot => {
                let theta2 = self.separated(theta1);
                let id2 = self.distinct_unit(&id1);
                let bg2 = self.distinct_unit(&bg1);
                EventParams::new(theta2, speed, id2, bg2)
            }
        };
        [e1, e2]
    }
}

/// Generates `count` records of one category. EgoExo counts must be even;
/// each event pair is emitted once per view with a shared `pair_id`.
pub fn generate_category(
    category: Category,
    count: usize,
    seed: u64,
    cfg: &SuiteGenConfig,
) -> Result<Vec<PromptRecord>> {
    if cfg.feature_dim == 0 {
        return Err(Error::Config("feature_dim must be >= 1".into()));
    }
    if category == Category::EgoExo && !count.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "EgoExo records come in pairs; got an odd count {count}"
        )));
    }
    // Separate stream per category so changing one count leaves the others alone.
    let stream = Category::ALL.iter().position(|c| *c == category).unwrap_or(0) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut g = Gen { rng, cfg };
    let prefix = category.id_prefix();
    let mut out = Vec::with_capacity(count);
    if category == Category::EgoExo {
        for n in 0..count / 2 {
            let events = g.events(category);
            let pair = format!("{prefix}-{n:03}");
            for view in [View::First, View::Third] {
                out.push(PromptRecord {
                    id: format!("{pair}-{view}"),
                    category,
                    view,
                    pair_id: Some(pair.clone()),
                    events: events.to_vec(),
                    text: None,
                });
            }
        }
    } else {
        for n in 0..count {
            out.push(PromptRecord {
                id: format!("{prefix}-{n:03}"),
                category,
                view: View::Third,
                pair_id: None,
                events: g.events(category).to_vec(),
                text: None,
            });
        }
    }
    Ok(out)
}

/// The full reference-size suite with the reference category counts.
pub fn generate_suite(seed: u64) -> Vec<PromptRecord> {
    generate_suite_with(seed, &SuiteGenConfig::default())
        .expect("default generator config is valid")
}

pub fn generate_suite_with(seed: u64, cfg: &SuiteGenConfig) -> Result<Vec<PromptRecord>> {
    let mut out = Vec::with_capacity(REFERENCE_SUITE_SIZE);
    for c in Category::ALL {
        out.extend(generate_category(c, c.reference_count(), seed, cfg)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Record id, or `line N` for unparseable lines, or `None` for suite-level issues.
    pub record: Option<String>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.record {
            Some(r) => write!(f, "{r}: {}", self.message),
            None => write!(f, "suite: {}", self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, record: Option<&str>, message: impl Into<String>) {
        self.violations.push(Violation {
            record: record.map(str::to_owned),
            message: message.into(),
        });
    }
}

pub fn category_counts(records: &[PromptRecord]) -> BTreeMap<Category, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.category).or_insert(0) += 1;
    }
    counts
}

/// Checks record invariants, EgoExo pairing, and, in strict mode, the
/// reference category counts.
pub fn validate_suite(records: &[PromptRecord], strict: bool) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut seen = HashSet::new();
    let mut feature_dim = None;

    for r in records {
        let id = Some(r.id.as_str());
        if r.id.is_empty() {
            report.push(None, "record with empty id");
        }
        if !seen.insert(r.id.as_str()) {
            report.push(id, "duplicate id");
        }
        if r.events.len() != 2 {
            report.push(
                id,
                format!("events must have length 2 (found {})", r.events.len()),
            );
        }
        for (n, e) in r.events.iter().enumerate() {
            if let Err(msg) = e.validate() {
                report.push(id, format!("event {}: {msg}", n + 1));
            }
            match feature_dim {
                None => feature_dim = Some(e.feature_dim()),
                Some(d) if d != e.feature_dim() => report.push(
                    id,
                    format!(
                        "event {} has feature dimension {}, suite uses {d}",
                        n + 1,
                        e.feature_dim()
                    ),
                ),
                Some(_) => {}
            }
        }
        match r.category {
            Category::EgoExo => {
                if r.pair_id.is_none() {
                    report.push(id, "EgoExo record without pair_id");
                }
            }
            _ => {
                if r.view != View::Third {
                    report.push(id, format!("{} records must use the third view", r.category));
                }
                if r.pair_id.is_some() {
                    report.push(id, "pair_id is only meaningful for EgoExo records");
                }
            }
        }
    }

    let mut pairs: HashMap<&str, Vec<&PromptRecord>> = HashMap::new();
    for r in records.iter().filter(|r| r.category == Category::EgoExo) {
        if let Some(p) = &r.pair_id {
            pairs.entry(p.as_str()).or_default().push(r);
        }
    }
    let mut pair_ids: Vec<&&str> = pairs.keys().collect();
    pair_ids.sort();
    for p in pair_ids {
        let members = &pairs[*p];
        let views: Vec<View> = members.iter().map(|r| r.view).collect();
        let ok_views = members.len() == 2 && views.contains(&View::First) && views.contains(&View::Third);
        if !ok_views {
            for r in members {
                report.push(
                    Some(&r.id),
                    format!(
                        "pairing violation: pair {p} needs one first-view and one third-view record, found {} record(s)",
                        members.len()
                    ),
                );
            }
        } else if members[0].events != members[1].events {
            report.push(
                Some(&members[0].id),
                format!("pairing violation: pair {p} has differing events across views"),
            );
        }
    }

    if strict {
        let counts = category_counts(records);
        for c in Category::ALL {
            let got = counts.get(&c).copied().unwrap_or(0);
            if got != c.reference_count() {
                report.push(
                    None,
                    format!("{c} has {got} records, strict mode expects {}", c.reference_count()),
                );
            }
        }
        if records.len() != REFERENCE_SUITE_SIZE {
            report.push(
                None,
                format!(
                    "suite has {} records, strict mode expects {REFERENCE_SUITE_SIZE}",
                    records.len()
                ),
            );
        }
    }
    report
}

pub fn write_suite(path: &Path, records: &[PromptRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Internal(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

/// Parses a suite file, collecting per-line parse failures as violations.
pub fn parse_suite(text: &str) -> (Vec<PromptRecord>, ValidationReport) {
    let mut records = Vec::new();
    let mut report = ValidationReport::default();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PromptRecord>(line) {
            Ok(r) => records.push(r),
            Err(e) => report.push(Some(&format!("line {}", n + 1)), format!("unparseable record: {e}")),
        }
    }
    (records, report)
}

pub fn read_suite(path: &Path) -> Result<Vec<PromptRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Input {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    let (records, report) = parse_suite(&text);
    if let Some(v) = report.violations.first() {
        return Err(Error::Input {
            path: path.to_owned(),
            reason: v.to_string(),
        });
    }
    Ok(records)
}

pub fn validate_file(path: &Path, strict: bool) -> Result<ValidationReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::Input {
        path: path.to_owned(),
        reason: e.to_string(),
    })?;
    let (records, mut report) = parse_suite(&text);
    report.violations.extend(validate_suite(&records, strict).violations);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn angle_between(a: &EventParams, b: &EventParams) -> f64 {
        let (u, v) = (a.drift(), b.drift());
        let cross = u[0] * v[1] - u[1] * v[0];
        let dot = u[0] * v[0] + u[1] * v[1];
        cross.atan2(dot).abs()
    }

    #[test]
    fn reference_counts() {
        let s = generate_suite(7);
        assert_eq!(s.len(), REFERENCE_SUITE_SIZE);
        let c = category_counts(&s);
        assert_eq!(c[&Category::General], 60);
        assert_eq!(c[&Category::MotionOrder], 98);
        assert_eq!(c[&Category::HumanIdentity], 32);
        assert_eq!(c[&Category::ComplexPlot], 60);
        assert_eq!(c[&Category::EgoExo], 100);
        assert!(validate_suite(&s, true).is_valid());
    }

    #[test]
    fn category_semantics() {
        let s = generate_suite(3);
        for r in &s {
            let [a, b] = r.event_pair().unwrap();
            match r.category {
                Category::MotionOrder => {
                    assert!((angle_between(a, b) - FRAC_PI_2).abs() < 1e-12);
                    assert_eq!(a.identity, b.identity);
                    assert_eq!(a.speed, b.speed);
                }
                Category::HumanIdentity => {
                    assert_eq!(a.theta, b.theta);
                    assert_ne!(a.identity, b.identity);
                    assert_eq!(a.background, b.background);
                }
                Category::ComplexPlot => {
                    assert_ne!(a.theta, b.theta);
                    assert_ne!(a.identity, b.identity);
                    assert_ne!(a.background, b.background);
                }
                Category::General => {
                    assert!(angle_between(a, b) >= FRAC_PI_2 - 1e-12);
                    assert_eq!(a.identity, b.identity);
                    assert_eq!(a.background, b.background);
                }
                Category::EgoExo => {}
            }
        }
    }

    #[test]
    fn egoexo_pairs_share_events() {
        let s = generate_suite(9);
        let ego: Vec<_> = s.iter().filter(|r| r.category == Category::EgoExo).collect();
        for pair in ego.chunks(2) {
            assert_eq!(pair[0].pair_id, pair[1].pair_id);
            assert_eq!(pair[0].events, pair[1].events);
            assert_ne!(pair[0].view, pair[1].view);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(generate_suite(1), generate_suite(1));
        assert_ne!(generate_suite(1), generate_suite(2));
    }

    #[test]
    fn three_events_flagged() {
        let mut s = generate_suite(1);
        let extra = s[0].events[0].clone();
        s[0].events.push(extra);
        let r = validate_suite(&s, false);
        assert!(r
            .violations
            .iter()
            .any(|v| v.record.as_deref() == Some(s[0].id.as_str())
                && v.message.contains("events must have length 2")));
    }

    #[test]
    fn missing_pair_flagged() {
        let mut s = generate_suite(1);
        let pos = s.iter().position(|r| r.category == Category::EgoExo).unwrap();
        let removed = s.remove(pos);
        let r = validate_suite(&s, false);
        let partner = removed.pair_id.unwrap();
        assert!(r
            .violations
            .iter()
            .any(|v| v.message.contains("pairing violation") && v.message.contains(&partner)));
        // Strict mode also catches the count.
        assert!(validate_suite(&s, true).violations.len() > r.violations.len());
    }

    #[test]
    fn strict_counts() {
        let mut s = generate_suite(1);
        s.retain(|r| r.category != Category::HumanIdentity);
        assert!(validate_suite(&s, false).is_valid());
        assert!(!validate_suite(&s, true).is_valid());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("suite.jsonl");
        let s = generate_suite(4);
        write_suite(&path, &s).unwrap();
        let back = read_suite(&path).unwrap();
        assert_eq!(back, s);
        assert!(validate_file(&path, true).unwrap().is_valid());
    }

    #[test]
    fn unreadable_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = validate_file(&dir.path().join("missing.jsonl"), false).unwrap_err();
        assert!(matches!(err, Error::Input { .. }));
    }

    #[test]
    fn garbage_line_reported() {
        let (recs, report) = parse_suite("{\"id\": 3}\n\n");
        assert!(recs.is_empty());
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].record.as_deref(), Some("line 1"));
    }

    #[test]
    fn odd_egoexo_count_rejected() {
        assert!(generate_category(Category::EgoExo, 3, 0, &SuiteGenConfig::default()).is_err());
    }
}
