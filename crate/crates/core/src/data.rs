//! Trial data model, CSV ingestion and validation.
//!
//! One row per participant with the column order
//! `id,w0,y0,a0,c1,w1,y1,a1,c2,w2,y2,c3,y3`. Fields belonging to a missed
//! visit are encoded as empty strings.

use std::collections::{HashMap, HashSet};
use std::hash::{Hash, Hasher};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regime::{step_up_eligible, Arm, Regime};

pub const CSV_HEADER: [&str; 13] = [
    "id", "w0", "y0", "a0", "c1", "w1", "y1", "a1", "c2", "w2", "y2", "c3", "y3",
];

pub const DEFAULT_MAX_COUNT: u32 = 1000;

/// Observed data for one participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub w0: f64,
    pub y0: u32,
    pub a0: Arm,
    pub c1: bool,
    pub w1: Option<f64>,
    pub y1: Option<u32>,
    pub a1: Option<Arm>,
    pub c2: bool,
    pub w2: Option<f64>,
    pub y2: Option<u32>,
    pub c3: bool,
    pub y3: Option<u32>,
}

impl SubjectRecord {
    /// `C̄_t = 1̄`: attended every visit up to and including `t` (t = 0 is
    /// enrollment and always true).
    pub fn attended_through(&self, t: usize) -> bool {
        match t {
            0 => true,
            1 => self.c1,
            2 => self.c1 && self.c2,
            _ => self.c1 && self.c2 && self.c3,
        }
    }

    /// Cumulative outcome `Y1 + Y2 + Y3`, when fully observed.
    pub fn total_outcome(&self) -> Option<f64> {
        Some((self.y1? + self.y2? + self.y3?) as f64)
    }

    fn step_up_eligible(&self) -> Option<bool> {
        self.y1.map(|y1| step_up_eligible(self.y0, y1))
    }
}

/// Whether a record's arm assignments agree with `regime` through
/// `through_stage` (0 or 1). Attendance is not checked here; a record
/// without a stage-1 assignment never follows at stage 1.
pub fn follows_regime(record: &SubjectRecord, regime: &Regime, through_stage: usize) -> bool {
    if record.a0 != regime.stage0_arm {
        return false;
    }
    if through_stage == 0 {
        return true;
    }
    match (record.y1, record.a1) {
        (Some(y1), Some(a1)) => a1 == regime.stage1_arm(record.y0, y1),
        _ => false,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IngestOptions {
    /// Zero out every attendance indicator after the first missed visit
    /// instead of rejecting non-monotone rows.
    pub coerce_monotone: bool,
    pub max_count: u32,
}

impl Default for IngestOptions {
    fn default() -> Self {
        IngestOptions {
            coerce_monotone: false,
            max_count: DEFAULT_MAX_COUNT,
        }
    }
}

/// A validated collection of participant records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDataset {
    records: Vec<SubjectRecord>,
}

impl TrialDataset {
    pub fn new(records: Vec<SubjectRecord>) -> Result<Self> {
        Self::with_options(records, IngestOptions::default())
    }

    pub fn with_options(mut records: Vec<SubjectRecord>, options: IngestOptions) -> Result<Self> {
        if options.coerce_monotone {
            records.iter_mut().for_each(coerce_monotone);
        }
        validate(&records, options.max_count)?;
        Ok(TrialDataset { records })
    }

    pub fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Whether time-varying covariates `w1` / `w2` are recorded.
    pub fn has_w1(&self) -> bool {
        self.records.iter().any(|r| r.w1.is_some())
    }

    pub fn has_w2(&self) -> bool {
        self.records.iter().any(|r| r.w2.is_some())
    }

    /// Stable fingerprint of the data, used to check that two fits were
    /// computed on the same dataset.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.records.len().hash(&mut h);
        for r in &self.records {
            r.id.hash(&mut h);
            r.w0.to_bits().hash(&mut h);
            r.y0.hash(&mut h);
            r.a0.hash(&mut h);
            (r.c1, r.c2, r.c3).hash(&mut h);
            r.w1.map(f64::to_bits).hash(&mut h);
            r.w2.map(f64::to_bits).hash(&mut h);
            (r.y1, r.y2, r.y3, r.a1).hash(&mut h);
        }
        h.finish()
    }
}

fn coerce_monotone(r: &mut SubjectRecord) {
    if !r.c1 {
        r.c2 = false;
    }
    if !r.c2 {
        r.c3 = false;
    }
    if !r.c1 {
        r.w1 = None;
        r.y1 = None;
        r.a1 = None;
    }
    if !r.c2 {
        r.w2 = None;
        r.y2 = None;
    }
    if !r.c3 {
        r.y3 = None;
    }
}

fn validate(records: &[SubjectRecord], max_count: u32) -> Result<()> {
    let mut seen = HashSet::new();
    let mut problems: HashMap<&'static str, Vec<String>> = HashMap::new();
    let mut flag = |reason: &'static str, id: &str| {
        problems.entry(reason).or_default().push(id.to_string());
    };

    for r in records {
        if !seen.insert(r.id.as_str()) {
            flag("duplicate id", &r.id);
        }
        if !r.a0.is_initial() {
            flag("a0 must be 0, 1 or 2", &r.id);
        }
        if !r.w0.is_finite() || r.w1.is_some_and(|w| !w.is_finite()) || r.w2.is_some_and(|w| !w.is_finite()) {
            flag("non-finite covariate", &r.id);
        }
        if (r.c2 && !r.c1) || (r.c3 && !r.c2) {
            flag("non-monotone missingness", &r.id);
        }
        let presence_ok = r.c1 == r.y1.is_some()
            && r.c1 == r.a1.is_some()
            && (r.c1 || r.w1.is_none())
            && r.c2 == r.y2.is_some()
            && (r.c2 || r.w2.is_none())
            && r.c3 == r.y3.is_some();
        if !presence_ok {
            flag("fields present/absent inconsistently with attendance", &r.id);
        }
        if [Some(r.y0), r.y1, r.y2, r.y3]
            .into_iter()
            .flatten()
            .any(|y| y > max_count)
        {
            flag("count exceeds the configured maximum", &r.id);
        }
        if let (Some(a1), Some(eligible)) = (r.a1, r.step_up_eligible()) {
            let ok = match r.a0 {
                Arm::Control => a1 == Arm::Control,
                a0 if eligible => a1 == a0 || a1 == Arm::ECoaching,
                a0 => a1 == a0,
            };
            if !ok {
                flag("stage-1 arm inconsistent with the step-up design", &r.id);
            }
        }
    }

    // Time-varying covariates are either recorded for every attendee or for none.
    for (t, get) in [
        (1usize, (|r: &SubjectRecord| r.w1) as fn(&SubjectRecord) -> Option<f64>),
        (2, |r: &SubjectRecord| r.w2),
    ] {
        let attendees: Vec<_> = records.iter().filter(|r| r.attended_through(t)).collect();
        let with = attendees.iter().filter(|r| get(r).is_some()).count();
        if with > 0 && with < attendees.len() {
            for r in attendees.iter().filter(|r| get(r).is_none()) {
                flag("time-varying covariate recorded for only some attendees", &r.id);
            }
        }
    }

    if problems.is_empty() {
        return Ok(());
    }
    let mut reasons: Vec<_> = problems.into_iter().collect();
    reasons.sort_by_key(|(reason, _)| *reason);
    let (reason, ids) = reasons.swap_remove(0);
    Err(Error::Validation {
        ids,
        reason: reason.to_string(),
    })
}

fn parse_field<T: std::str::FromStr>(raw: &str, name: &str, row: usize) -> Result<Option<T>> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    raw.parse::<T>().map(Some).map_err(|_| Error::Parse {
        row,
        message: format!("cannot parse {name} from '{raw}'"),
    })
}

fn required<T>(value: Option<T>, name: &str, row: usize) -> Result<T> {
    value.ok_or_else(|| Error::Parse {
        row,
        message: format!("{name} is required"),
    })
}

fn parse_indicator(raw: &str, name: &str, row: usize) -> Result<bool> {
    match required(parse_field::<u8>(raw, name, row)?, name, row)? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::Parse {
            row,
            message: format!("{name} must be 0 or 1, got {v}"),
        }),
    }
}

fn parse_arm(raw: &str, name: &str, row: usize) -> Result<Option<Arm>> {
    parse_field::<u8>(raw, name, row)?
        .map(|code| {
            Arm::from_code(code).map_err(|e| Error::Parse {
                row,
                message: format!("{name}: {e}"),
            })
        })
        .transpose()
}

/// Parse and validate a dataset from CSV text. Row numbers in errors are
/// file line numbers (the header is line 1).
pub fn parse_dataset<R: Read>(source: R, options: IngestOptions) -> Result<TrialDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(source);
    let header = reader.headers()?.clone();
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != CSV_HEADER {
        return Err(Error::Parse {
            row: 1,
            message: format!("header must be '{}'", CSV_HEADER.join(",")),
        });
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::Parse {
            row: line,
            message: e.to_string(),
        })?;
        let f = |k: usize| row.get(k).unwrap_or("");
        let id = f(0).trim().to_string();
        if id.is_empty() {
            return Err(Error::Parse {
                row: line,
                message: "id is required".into(),
            });
        }
        records.push(SubjectRecord {
            id,
            w0: required(parse_field(f(1), "w0", line)?, "w0", line)?,
            y0: required(parse_field(f(2), "y0", line)?, "y0", line)?,
            a0: required(parse_arm(f(3), "a0", line)?, "a0", line)?,
            c1: parse_indicator(f(4), "c1", line)?,
            w1: parse_field(f(5), "w1", line)?,
            y1: parse_field(f(6), "y1", line)?,
            a1: parse_arm(f(7), "a1", line)?,
            c2: parse_indicator(f(8), "c2", line)?,
            w2: parse_field(f(9), "w2", line)?,
            y2: parse_field(f(10), "y2", line)?,
            c3: parse_indicator(f(11), "c3", line)?,
            y3: parse_field(f(12), "y3", line)?,
        });
    }
    TrialDataset::with_options(records, options)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Write a dataset in the CSV schema accepted by [`parse_dataset`].
pub fn write_dataset<W: Write>(data: &TrialDataset, sink: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(sink);
    writer.write_record(CSV_HEADER)?;
    for r in data.records() {
        writer.write_record([
            r.id.clone(),
            r.w0.to_string(),
            r.y0.to_string(),
            r.a0.to_string(),
            u8::from(r.c1).to_string(),
            opt(r.w1),
            opt(r.y1),
            opt(r.a1),
            u8::from(r.c2).to_string(),
            opt(r.w2),
            opt(r.y2),
            u8::from(r.c3).to_string(),
            opt(r.y3),
        ])?;
    }
    writer.flush()?;
    Ok(())
}
