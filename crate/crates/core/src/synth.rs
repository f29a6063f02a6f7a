//! Synthetic ten-cohort datasets with known kernels and known true
//! infections, for tests and demos.
//!
//! True daily cases follow two smooth epidemic waves. Admissions are the
//! true cases convolved with each cohort's kernel plus optional noise.
//! Official cases equal the truth during the second wave and a
//! time-varying fraction of it during the first.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::kernel::{convolve, ExpKernel};
use crate::series::{AgeGroup, CohortDataset, DailySeries, DateRange, Quantity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub start: NaiveDate,
    pub end: NaiveDate,
    /// Admission noise sd as a multiple of `sqrt(mean)`.
    pub noise: f64,
    /// Fraction of true cases reported at the start of the first wave.
    pub early_reporting: f64,
    /// Fraction reported by the end of the first wave.
    pub late_reporting: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 1,
            start: "2019-11-15".parse().expect("date"),
            end: "2021-01-10".parse().expect("date"),
            noise: 0.0,
            early_reporting: 0.15,
            late_reporting: 0.4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub kernels: BTreeMap<AgeGroup, ExpKernel>,
    /// True daily cases over the whole span.
    pub infections: BTreeMap<AgeGroup, DailySeries>,
}

/// Kernel used for a cohort: gain grows with age, delays between -10 and -6.
pub fn cohort_kernel(g: AgeGroup) -> ExpKernel {
    let d = g.decade() as f64;
    let gain = 0.004 * (0.55 * d).exp();
    let alpha = 0.72 + 0.018 * d;
    let delay = -6 - (g.decade() as i64 % 5);
    ExpKernel::new(alpha, gain * (1.0 - alpha), delay).expect("valid kernel")
}

fn bump(t: f64, centre: f64, width: f64) -> f64 {
    (-0.5 * ((t - centre) / width).powi(2)).exp()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Dataset with ten cohorts and their populations, plus the truth.
pub fn synthetic_dataset(cfg: &SynthConfig) -> (CohortDataset, SynthTruth) {
    let n = (cfg.end - cfg.start).num_days() as usize + 1;
    let day = |s: &str| (s.parse::<NaiveDate>().expect("date") - cfg.start).num_days() as f64;
    let (c1, c2, turn) = (day("2020-03-18"), day("2020-11-08"), day("2020-04-05"));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut ds = CohortDataset::default();
    let mut truth = SynthTruth {
        kernels: BTreeMap::new(),
        infections: BTreeMap::new(),
    };
    for g in AgeGroup::all() {
        let d = g.decade() as f64;
        let size = 2500.0 * (1.0 + 0.8 * bump(d, 4.5, 2.5));
        let true_cases: Vec<f64> = (0..n)
            .map(|t| {
                let t = t as f64;
                size * (bump(t, c1 + 2.0 * d, 16.0) + 1.4 * bump(t, c2 - d, 20.0)) + 3.0
            })
            .collect();
        let reporting = |t: f64| {
            if t < day("2020-07-01") {
                cfg.early_reporting + (cfg.late_reporting - cfg.early_reporting) * logistic((t - turn) / 9.0)
            } else {
                1.0
            }
        };
        let official: Vec<f64> = true_cases
            .iter()
            .enumerate()
            .map(|(t, c)| c * reporting(t as f64))
            .collect();
        let kernel = cohort_kernel(g);
        let admissions: Vec<f64> = convolve(&true_cases, &kernel)
            .into_iter()
            .map(|y| {
                let e: f64 = rng.sample(StandardNormal);
                (y + cfg.noise * y.max(1.0).sqrt() * e).max(0.0)
            })
            .collect();

        let mk = |v: Vec<f64>, q| DailySeries::new(cfg.start, v, q, g).expect("finite nonnegative");
        ds.series
            .insert((g, Quantity::NewCases), mk(official, Quantity::NewCases));
        ds.series.insert(
            (g, Quantity::HospitalAdmissions),
            mk(admissions, Quantity::HospitalAdmissions),
        );
        ds.populations
            .insert(g, (6_000_000.0 * (1.0 + 0.3 * bump(d, 5.0, 3.0))) as u64);
        truth.kernels.insert(g, kernel);
        truth.infections.insert(g, mk(true_cases, Quantity::NewCases));
    }
    ds.windows.insert(
        "first_wave".into(),
        DateRange::new("2020-01-07".parse().expect("date"), "2020-05-15".parse().expect("date")),
    );
    ds.windows.insert(
        "second_wave".into(),
        DateRange::new("2020-10-01".parse().expect("date"), "2020-12-15".parse().expect("date")),
    );
    (ds, truth)
}

/// `age_group,population` rows.
pub fn population_csv(ds: &CohortDataset) -> String {
    let mut out = String::from("age_group,population\n");
    for (g, p) in &ds.populations {
        out.push_str(&format!("{g},{p}\n"));
    }
    out
}
