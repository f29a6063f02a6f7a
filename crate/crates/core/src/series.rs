//! Daily count series per age cohort: CSV ingest, validation, centered
//! 7-day smoothing and date windowing.
//!
//! Series are gap-free by construction. A missing day in the input is an
//! error; nothing is imputed.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Duration, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SeriesError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("gap in dates for {cohort}/{quantity}: {date} is missing")]
    GapInDates {
        cohort: AgeGroup,
        quantity: Quantity,
        date: NaiveDate,
    },
    #[error("duplicate date {date} for {cohort}/{quantity}")]
    DuplicateDate {
        cohort: AgeGroup,
        quantity: Quantity,
        date: NaiveDate,
    },
    #[error("negative value on row {0}")]
    NegativeValue(usize),
    #[error("unknown age group label `{0}`")]
    UnknownCohortLabel(String),
    #[error("unknown quantity `{0}`")]
    UnknownQuantity(String),
    #[error("row {row}: {msg}")]
    Parse { row: usize, msg: String },
    #[error("series {cohort}/{quantity} is missing from the dataset")]
    MissingSeries { cohort: AgeGroup, quantity: Quantity },
    #[error("population for {0} must be positive")]
    NonPositivePopulation(AgeGroup),
    #[error("requested range {requested} is not inside the series support {support}")]
    OutOfRange { requested: DateRange, support: DateRange },
    #[error("series must contain at least one value")]
    Empty,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ten-year age band, `00-09` through `90-99`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgeGroup(u8);

impl AgeGroup {
    pub const COUNT: usize = 10;

    /// Band starting at `10 * decade` years.
    pub fn new(decade: u8) -> Option<Self> {
        (decade < 10).then_some(AgeGroup(decade))
    }

    pub fn decade(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = AgeGroup> {
        (0..10).map(AgeGroup)
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}0-{}9", self.0, self.0)
    }
}

impl FromStr for AgeGroup {
    type Err = SeriesError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let bytes = t.as_bytes();
        let ok = bytes.len() == 5
            && bytes[0].is_ascii_digit()
            && bytes[1] == b'0'
            && bytes[2] == b'-'
            && bytes[3] == bytes[0]
            && bytes[4] == b'9';
        if ok {
            Ok(AgeGroup(bytes[0] - b'0'))
        } else {
            Err(SeriesError::UnknownCohortLabel(s.to_string()))
        }
    }
}

impl Serialize for AgeGroup {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AgeGroup {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgeCohort {
    pub label: AgeGroup,
    pub population: u64,
}

impl AgeCohort {
    pub fn new(label: AgeGroup, population: u64) -> Result<Self, SeriesError> {
        if population == 0 {
            return Err(SeriesError::NonPositivePopulation(label));
        }
        Ok(AgeCohort { label, population })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    NewCases,
    HospitalAdmissions,
}

impl Quantity {
    pub fn as_str(self) -> &'static str {
        match self {
            Quantity::NewCases => "new_cases",
            Quantity::HospitalAdmissions => "hospital_admissions",
        }
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Quantity {
    type Err = SeriesError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "new_cases" => Ok(Quantity::NewCases),
            "hospital_admissions" => Ok(Quantity::HospitalAdmissions),
            other => Err(SeriesError::UnknownQuantity(other.to_string())),
        }
    }
}

/// Inclusive calendar interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        DateRange { start, end }
    }

    pub fn is_empty(&self) -> bool {
        self.end < self.start
    }

    /// Number of days covered, zero when empty.
    pub fn len_days(&self) -> usize {
        if self.is_empty() {
            0
        } else {
            (self.end - self.start).num_days() as usize + 1
        }
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d <= self.end
    }

    pub fn contains_range(&self, other: &DateRange) -> bool {
        !other.is_empty() && self.contains(other.start) && self.contains(other.end)
    }

    pub fn intersect(&self, other: &DateRange) -> DateRange {
        DateRange {
            start: self.start.max(other.start),
            end: self.end.min(other.end),
        }
    }

    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> {
        let start = self.start;
        (0..self.len_days()).map(move |i| start + Duration::days(i as i64))
    }
}

impl fmt::Display for DateRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.start, self.end)
    }
}

/// One value per consecutive day, starting at `start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailySeries {
    pub start: NaiveDate,
    pub values: Vec<f64>,
    pub quantity: Quantity,
    pub cohort: AgeGroup,
    pub smoothed: bool,
}

impl DailySeries {
    pub fn new(start: NaiveDate, values: Vec<f64>, quantity: Quantity, cohort: AgeGroup) -> Result<Self, SeriesError> {
        if values.is_empty() {
            return Err(SeriesError::Empty);
        }
        if let Some(i) = values.iter().position(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(SeriesError::NegativeValue(i));
        }
        Ok(DailySeries {
            start,
            values,
            quantity,
            cohort,
            smoothed: false,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn end(&self) -> NaiveDate {
        self.start + Duration::days(self.values.len() as i64 - 1)
    }

    pub fn support(&self) -> DateRange {
        DateRange::new(self.start, self.end())
    }

    pub fn date_at(&self, i: usize) -> NaiveDate {
        self.start + Duration::days(i as i64)
    }

    /// Index of `date`, which may fall outside the series.
    pub fn offset_of(&self, date: NaiveDate) -> i64 {
        (date - self.start).num_days()
    }

    pub fn get(&self, date: NaiveDate) -> Option<f64> {
        let k = self.offset_of(date);
        if k < 0 {
            return None;
        }
        self.values.get(k as usize).copied()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NaiveDate, f64)> + '_ {
        self.values.iter().enumerate().map(|(i, v)| (self.date_at(i), *v))
    }
}

/// Centered seven-day moving average with a shrinking window at both ends.
///
/// Day `t` becomes the mean of the values in `[t-3, t+3]` that exist, so the
/// output has the same length and dates as the input.
pub fn moving_average_7(s: &DailySeries) -> DailySeries {
    let n = s.values.len();
    let values = (0..n)
        .map(|t| {
            let lo = t.saturating_sub(3);
            let hi = (t + 3).min(n - 1);
            let sum: f64 = s.values[lo..=hi].iter().sum();
            sum / (hi - lo + 1) as f64
        })
        .collect();
    DailySeries {
        values,
        smoothed: true,
        ..s.clone()
    }
}

/// Slice `s` to `range`, which must lie inside the series support.
pub fn window(s: &DailySeries, range: DateRange) -> Result<DailySeries, SeriesError> {
    let support = s.support();
    if !support.contains_range(&range) {
        return Err(SeriesError::OutOfRange {
            requested: range,
            support,
        });
    }
    let lo = s.offset_of(range.start) as usize;
    let hi = s.offset_of(range.end) as usize;
    Ok(DailySeries {
        start: range.start,
        values: s.values[lo..=hi].to_vec(),
        ..s.clone()
    })
}

/// Column names for the long-format series file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub date: String,
    pub age_group: String,
    pub quantity: String,
    pub value: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            date: "date".into(),
            age_group: "age_group".into(),
            quantity: "quantity".into(),
            value: "value".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CohortDataset {
    pub series: BTreeMap<(AgeGroup, Quantity), DailySeries>,
    pub populations: BTreeMap<AgeGroup, u64>,
    pub windows: BTreeMap<String, DateRange>,
}

impl CohortDataset {
    pub fn age_groups(&self) -> Vec<AgeGroup> {
        let mut out: Vec<AgeGroup> = self.series.keys().map(|(g, _)| *g).collect();
        out.dedup();
        out
    }

    pub fn get(&self, cohort: AgeGroup, quantity: Quantity) -> Option<&DailySeries> {
        self.series.get(&(cohort, quantity))
    }

    pub fn cohort(&self, label: AgeGroup) -> Option<AgeCohort> {
        self.populations
            .get(&label)
            .and_then(|p| AgeCohort::new(label, *p).ok())
    }

    /// Cohorts that carry a population.
    pub fn cohorts(&self) -> Vec<AgeCohort> {
        self.age_groups().into_iter().filter_map(|g| self.cohort(g)).collect()
    }

    /// Every age group present must carry both quantities.
    pub fn validate(&self) -> Result<(), SeriesError> {
        for g in self.age_groups() {
            for q in [Quantity::NewCases, Quantity::HospitalAdmissions] {
                if !self.series.contains_key(&(g, q)) {
                    return Err(SeriesError::MissingSeries { cohort: g, quantity: q });
                }
            }
        }
        Ok(())
    }

    pub fn smoothed(&self) -> CohortDataset {
        CohortDataset {
            series: self
                .series
                .iter()
                .map(|(k, s)| (*k, if s.smoothed { s.clone() } else { moving_average_7(s) }))
                .collect(),
            ..self.clone()
        }
    }
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, SeriesError> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| SeriesError::MissingColumn(name.to_string()))
}

/// Parse long-format series rows from any reader.
pub fn read_series<R: Read>(rdr: R, schema: &CsvSchema) -> Result<CohortDataset, SeriesError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(rdr);
    let headers = rdr.headers()?.clone();
    let c_date = column(&headers, &schema.date)?;
    let c_age = column(&headers, &schema.age_group)?;
    let c_qty = column(&headers, &schema.quantity)?;
    let c_val = column(&headers, &schema.value)?;
    let c_smooth = headers.iter().position(|h| h.trim() == "smoothed");

    let mut rows: BTreeMap<(AgeGroup, Quantity), (Vec<(NaiveDate, f64)>, bool)> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let date = NaiveDate::parse_from_str(field(c_date), "%Y-%m-%d").map_err(|e| SeriesError::Parse {
            row,
            msg: format!("bad date `{}`: {e}", field(c_date)),
        })?;
        let age: AgeGroup = field(c_age).parse()?;
        let qty: Quantity = field(c_qty).parse()?;
        let value: f64 = field(c_val).parse().map_err(|_| SeriesError::Parse {
            row,
            msg: format!("bad value `{}`", field(c_val)),
        })?;
        if !value.is_finite() {
            return Err(SeriesError::Parse {
                row,
                msg: format!("non-finite value `{}`", field(c_val)),
            });
        }
        if value < 0.0 {
            return Err(SeriesError::NegativeValue(row));
        }
        let smoothed = c_smooth.map(|c| matches!(field(c), "true" | "1")).unwrap_or(false);
        let entry = rows.entry((age, qty)).or_insert_with(|| (Vec::new(), true));
        entry.0.push((date, value));
        entry.1 &= smoothed;
    }

    let mut ds = CohortDataset::default();
    for ((cohort, quantity), (mut pts, smoothed)) in rows {
        pts.sort_by_key(|(d, _)| *d);
        for w in pts.windows(2) {
            let next = w[0].0 + Duration::days(1);
            if w[1].0 == w[0].0 {
                return Err(SeriesError::DuplicateDate {
                    cohort,
                    quantity,
                    date: w[1].0,
                });
            }
            if w[1].0 != next {
                return Err(SeriesError::GapInDates {
                    cohort,
                    quantity,
                    date: next,
                });
            }
        }
        let start = pts[0].0;
        let mut s = DailySeries::new(start, pts.into_iter().map(|p| p.1).collect(), quantity, cohort)?;
        s.smoothed = smoothed;
        ds.series.insert((cohort, quantity), s);
    }
    ds.validate()?;
    Ok(ds)
}

/// Load a long-format series file (`date,age_group,quantity,value`).
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<CohortDataset, SeriesError> {
    read_series(File::open(path)?, schema)
}

/// Parse `age_group,population` rows.
pub fn read_population<R: Read>(rdr: R) -> Result<BTreeMap<AgeGroup, u64>, SeriesError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(rdr);
    let headers = rdr.headers()?.clone();
    let c_age = column(&headers, "age_group")?;
    let c_pop = column(&headers, "population")?;
    let mut out = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let age: AgeGroup = rec.get(c_age).unwrap_or("").parse()?;
        let raw = rec.get(c_pop).unwrap_or("");
        let pop: u64 = raw.parse().map_err(|_| SeriesError::Parse {
            row: i + 2,
            msg: format!("bad population `{raw}`"),
        })?;
        if pop == 0 {
            return Err(SeriesError::NonPositivePopulation(age));
        }
        out.insert(age, pop);
    }
    Ok(out)
}

pub fn load_population(path: impl AsRef<Path>) -> Result<BTreeMap<AgeGroup, u64>, SeriesError> {
    read_population(File::open(path)?)
}

/// Write the dataset in the input schema plus a `smoothed` column.
pub fn write_series<W: Write>(w: W, ds: &CohortDataset) -> Result<(), SeriesError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["date", "age_group", "quantity", "value", "smoothed"])?;
    for s in ds.series.values() {
        for (d, v) in s.iter() {
            wtr.write_record([
                d.to_string(),
                s.cohort.to_string(),
                s.quantity.to_string(),
                format_value(v),
                s.smoothed.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

pub fn save_csv(path: impl AsRef<Path>, ds: &CohortDataset) -> Result<(), SeriesError> {
    write_series(File::create(path)?, ds)
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn format_value(v: f64) -> String {
    format!("{v:?}")
}
