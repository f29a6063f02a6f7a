//! Report tables and the files they are written to.
//!
//! Totals are reported in thousands, rounded to integers. The
//! underestimation factor is computed from the rounded columns so that a
//! reader can recompute it from the table itself. Undefined values (a zero
//! official count) are written as empty fields.

use std::fs;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::series::{format_value, AgeCohort, DailySeries};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("series are not aligned: {0}")]
    MisalignedDates(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Cases per 100,000 people.
pub fn per_100k(series: &DailySeries, cohort: &AgeCohort) -> DailySeries {
    let f = 100_000.0 / cohort.population as f64;
    DailySeries {
        values: series.values.iter().map(|v| v * f).collect(),
        ..series.clone()
    }
}

/// Daily ratio of reconstructed to official counts; `None` where the
/// official count is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSeries {
    pub label: String,
    pub start: NaiveDate,
    pub reconstructed: Vec<f64>,
    pub official: Vec<f64>,
    pub factor: Vec<Option<f64>>,
}

impl FactorSeries {
    pub fn date_at(&self, i: usize) -> NaiveDate {
        self.start + chrono::Duration::days(i as i64)
    }
}

pub fn underestimation_series(
    reconstructed: &DailySeries,
    official: &DailySeries,
) -> Result<FactorSeries, ReportError> {
    if reconstructed.start != official.start || reconstructed.len() != official.len() {
        return Err(ReportError::MisalignedDates(format!(
            "{} vs {}",
            reconstructed.support(),
            official.support()
        )));
    }
    let factor = reconstructed
        .values
        .iter()
        .zip(&official.values)
        .map(|(r, o)| if *o == 0.0 { None } else { Some(r / o) })
        .collect();
    Ok(FactorSeries {
        label: reconstructed.cohort.to_string(),
        start: reconstructed.start,
        reconstructed: reconstructed.values.clone(),
        official: official.values.clone(),
        factor,
    })
}

/// Lower and upper percentile of a scalar.
pub type Band = Option<(f64, f64)>;

/// One row of the kernel table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRow {
    pub label: String,
    /// Gain as a fraction; written in percent.
    pub gain: f64,
    pub gain_band: Band,
    pub delay: i64,
    pub delay_band: Band,
    pub time_constant: f64,
    pub time_constant_band: Band,
    pub mean_lag: f64,
}

/// One row of the totals table, in cases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotalsRow {
    pub label: String,
    pub official: f64,
    pub reconstructed: f64,
    pub band: Band,
}

impl TotalsRow {
    /// `(official, reconstructed, lo, hi, factor)` as written to the table.
    pub fn rounded(&self) -> (i64, i64, Option<(i64, i64)>, Option<f64>) {
        let k = |v: f64| (v / 1000.0).round() as i64;
        let off = k(self.official);
        let rec = k(self.reconstructed);
        let factor = (off != 0).then(|| rec as f64 / off as f64);
        (off, rec, self.band.map(|(lo, hi)| (k(lo), k(hi))), factor)
    }

    pub fn csv_row(&self) -> String {
        let (off, rec, band, factor) = self.rounded();
        let (lo, hi) = band.map_or((String::new(), String::new()), |(l, h)| (l.to_string(), h.to_string()));
        let factor = factor.map_or(String::new(), |f| format!("{f:.3}"));
        format!("{},{off},{rec},{lo},{hi},{factor}", self.label)
    }
}

/// Percentile bands of a dated series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandSeries {
    pub label: String,
    pub quantity: String,
    pub start: NaiveDate,
    pub levels: Vec<f64>,
    /// One row per day, one value per level.
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTables {
    pub kernel_table: Vec<KernelRow>,
    pub totals_table: Vec<TotalsRow>,
    pub daily_factor: Vec<FactorSeries>,
    pub bands: Vec<BandSeries>,
    pub summary: serde_json::Value,
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or(String::new(), |v| format!("{v:.prec$}"))
}

fn band_cols(b: Band, scale: f64, prec: usize) -> String {
    format!(
        "{},{}",
        opt(b.map(|x| x.0 * scale), prec),
        opt(b.map(|x| x.1 * scale), prec)
    )
}

pub fn table1_csv(rows: &[KernelRow]) -> String {
    let mut out = String::from(
        "age_group,gain_pct,gain_pct_lo,gain_pct_hi,delay,delay_lo,delay_hi,\
         time_constant,time_constant_lo,time_constant_hi,mean_lag\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{:.2},{},{},{},{:.2},{},{:.2}\n",
            r.label,
            r.gain * 100.0,
            band_cols(r.gain_band, 100.0, 2),
            r.delay,
            band_cols(r.delay_band, 1.0, 1),
            r.time_constant,
            band_cols(r.time_constant_band, 1.0, 2),
            r.mean_lag,
        ));
    }
    out
}

pub fn table2_csv(rows: &[TotalsRow]) -> String {
    let mut out = String::from(
        "age_group,official_thousands,reconstructed_thousands,reconstructed_lo,reconstructed_hi,underestimation_factor\n",
    );
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn daily_factor_csv(series: &[FactorSeries]) -> String {
    let mut out = String::from("date,age_group,reconstructed,official,underestimation_factor\n");
    for s in series {
        for i in 0..s.reconstructed.len() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.date_at(i),
                s.label,
                format_value(s.reconstructed[i]),
                format_value(s.official[i]),
                s.factor[i].map_or(String::new(), format_value),
            ));
        }
    }
    out
}

/// Column name for a percentile level: `p2.5`, `p50`, `p97.5`.
pub fn level_name(p: f64) -> String {
    format!("p{p}")
}

pub fn band_csv(b: &BandSeries) -> String {
    let mut out = String::from("date,quantity");
    for l in &b.levels {
        out.push(',');
        out.push_str(&level_name(*l));
    }
    out.push('\n');
    for (i, row) in b.rows.iter().enumerate() {
        out.push_str(&format!(
            "{},{}",
            b.start + chrono::Duration::days(i as i64),
            b.quantity
        ));
        for v in row {
            out.push(',');
            if !v.is_nan() {
                out.push_str(&format_value(*v));
            }
        }
        out.push('\n');
    }
    out
}

pub(crate) fn write_file(dir: &Path, name: &str, contents: &[u8]) -> Result<(), ReportError> {
    let mut f = fs::File::create(dir.join(name))?;
    f.write_all(contents)?;
    Ok(())
}

/// Write `table1.csv`, `table2.csv`, `daily_factor.csv`, one
/// `bands_<label>.csv` per band series and `summary.json`.
pub fn emit_tables(tables: &ReportTables, dir: &Path) -> Result<(), ReportError> {
    fs::create_dir_all(dir)?;
    write_file(dir, "table1.csv", table1_csv(&tables.kernel_table).as_bytes())?;
    write_file(dir, "table2.csv", table2_csv(&tables.totals_table).as_bytes())?;
    write_file(
        dir,
        "daily_factor.csv",
        daily_factor_csv(&tables.daily_factor).as_bytes(),
    )?;
    for b in &tables.bands {
        write_file(dir, &format!("bands_{}.csv", b.label), band_csv(b).as_bytes())?;
    }
    let mut json = serde_json::to_string_pretty(&tables.summary)?;
    json.push('\n');
    write_file(dir, "summary.json", json.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::{AgeGroup, Quantity};

    fn series(v: Vec<f64>) -> DailySeries {
        DailySeries::new(
            "2020-03-01".parse().unwrap(),
            v,
            Quantity::NewCases,
            AgeGroup::new(4).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn per_100k_examples() {
        let g = AgeGroup::new(4).unwrap();
        let s = series(vec![50.0, 0.0]);
        assert_eq!(
            per_100k(&s, &AgeCohort::new(g, 1_000_000).unwrap()).values,
            vec![5.0, 0.0]
        );
        assert_eq!(per_100k(&s, &AgeCohort::new(g, 100_000).unwrap()).values, s.values);
        let z = series(vec![0.0; 4]);
        assert_eq!(per_100k(&z, &AgeCohort::new(g, 7).unwrap()).values, z.values);
    }

    #[test]
    fn factor_examples() {
        let off = series(vec![2.0, 5.0, 0.0, 1.0]);
        let same = underestimation_series(&off, &off).unwrap();
        assert_eq!(same.factor, vec![Some(1.0), Some(1.0), None, Some(1.0)]);
        let six = series(off.values.iter().map(|v| 6.0 * v).collect());
        let f = underestimation_series(&six, &off).unwrap();
        assert_eq!(f.factor, vec![Some(6.0), Some(6.0), None, Some(6.0)]);
        let shifted = DailySeries {
            start: off.start + chrono::Duration::days(1),
            ..off.clone()
        };
        assert!(matches!(
            underestimation_series(&shifted, &off),
            Err(ReportError::MisalignedDates(_))
        ));
    }

    #[test]
    fn totals_row_format() {
        let row = TotalsRow {
            label: "40-49".into(),
            official: 31_200.0,
            reconstructed: 221_400.0,
            band: Some((219_000.0, 223_100.0)),
        };
        assert_eq!(row.csv_row(), "40-49,31,221,219,223,7.129");

        let zero = TotalsRow {
            label: "00-09".into(),
            official: 0.0,
            reconstructed: 0.0,
            band: Some((0.0, 0.0)),
        };
        assert_eq!(zero.csv_row(), "00-09,0,0,0,0,");
    }

    #[test]
    fn factor_recomputes_from_columns() {
        for (o, r) in [(234_400.0, 1_073_200.0), (12_345.0, 54_321.0), (999.0, 1_501.0)] {
            let row = TotalsRow {
                label: "x".into(),
                official: o,
                reconstructed: r,
                band: None,
            };
            let line = row.csv_row();
            let f: Vec<&str> = line.split(',').collect();
            let off: f64 = f[1].parse().unwrap();
            let rec: f64 = f[2].parse().unwrap();
            let factor: f64 = f[5].parse().unwrap();
            assert!((rec / off - factor).abs() <= 5e-4, "{line}");
        }
    }

    #[test]
    fn band_csv_header_and_na() {
        let b = BandSeries {
            label: "20-29".into(),
            quantity: "new_cases".into(),
            start: "2020-02-01".parse().unwrap(),
            levels: vec![2.5, 50.0, 97.5],
            rows: vec![vec![1.0, 2.0, 3.0], vec![f64::NAN, 1.5, 2.0]],
        };
        assert_eq!(
            band_csv(&b),
            "date,quantity,p2.5,p50,p97.5\n2020-02-01,new_cases,1.0,2.0,3.0\n2020-02-02,new_cases,,1.5,2.0\n"
        );
    }

    #[test]
    fn daily_factor_na_is_empty() {
        let off = series(vec![0.0, 2.0]);
        let rec = series(vec![1.0, 3.0]);
        let csv = daily_factor_csv(&[underestimation_series(&rec, &off).unwrap()]);
        assert_eq!(
            csv,
            "date,age_group,reconstructed,official,underestimation_factor\n\
             2020-03-01,40-49,1.0,0.0,\n2020-03-02,40-49,3.0,2.0,1.5\n"
        );
    }
}
