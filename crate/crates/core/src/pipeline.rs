//! End-to-end run: smoothing, identification on the second wave, lambda
//! selection and reconstruction on the first wave, bootstrap bands and
//! report tables.
//!
//! Each stage works on every cohort in parallel and records per-cohort
//! failures instead of aborting; a stage fails only when no cohort is left.
//! Stages write their own artifacts, and later stages can be rerun from
//! those artifacts alone (this is what the CLI subcommands do).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::bootstrap::{
    bootstrap_deconvolve, bootstrap_identify, BootstrapConfig, BootstrapError, BootstrapSummary, DeconvBootstrap,
    DeconvTemplate,
};
use crate::deconv::{reconstruct_cohort, DeconvError, DeconvProblem, Loss, PenaltyKind, Reconstruction};
use crate::ident::{identify, IdentConfig, IdentError, IdentResult, InputHistory};
use crate::kernel::{convolve, ExpKernel, KernelError};
use crate::report::{
    emit_tables, per_100k, underestimation_series, write_file, BandSeries, FactorSeries, KernelRow, ReportError,
    ReportTables, TotalsRow,
};
use crate::select::{
    default_lambda_grid, estimate_sigma2, mallows_cp, CpCurve, NoiseEstimate, SelectError, DEFAULT_GRID_HI,
    DEFAULT_GRID_LO, DEFAULT_GRID_POINTS, DEFAULT_POLY_DEGREE,
};
use crate::series::{
    format_value, load_csv, load_population, save_csv, window, AgeCohort, AgeGroup, CohortDataset, CsvSchema,
    DailySeries, DateRange, Quantity, SeriesError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error("cannot load {}", path.display())]
    Input { path: PathBuf, source: SeriesError },
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("missing artifact {0}; run the earlier stage first")]
    MissingArtifact(PathBuf),
    #[error("every cohort failed: {0}")]
    AllCohortsFailed(String),
}

/// Per-cohort failures, converted to text when recorded.
#[derive(Debug, Error)]
pub enum CohortError {
    #[error(transparent)]
    Series(#[from] SeriesError),
    #[error(transparent)]
    Ident(#[from] IdentError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Select(#[from] SelectError),
    #[error(transparent)]
    Deconv(#[from] DeconvError),
    #[error(transparent)]
    Bootstrap(#[from] BootstrapError),
    #[error("{0}")]
    Missing(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaConfig {
    pub grid_points: usize,
    /// Grid bounds relative to `|G|_F^2 / |P|_F^2`.
    pub grid_lo: f64,
    pub grid_hi: f64,
    /// Degree of the polynomial behind the noise variance estimate.
    pub poly_degree: usize,
    /// Skip Cp and use this value for every cohort.
    pub fixed: Option<f64>,
}

impl Default for LambdaConfig {
    fn default() -> Self {
        LambdaConfig {
            grid_points: DEFAULT_GRID_POINTS,
            grid_lo: DEFAULT_GRID_LO,
            grid_hi: DEFAULT_GRID_HI,
            poly_degree: DEFAULT_POLY_DEGREE,
            fixed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Long-format series file.
    pub data: PathBuf,
    /// Optional `age_group,population` file.
    pub population: Option<PathBuf>,
    pub schema: CsvSchema,
    pub first_wave: DateRange,
    pub second_wave: DateRange,
    pub ident: IdentConfig,
    pub penalty: PenaltyKind,
    pub pre_window: i64,
    pub loss: Loss,
    pub lambda: LambdaConfig,
    pub bootstrap: BootstrapConfig,
    pub output_dir: PathBuf,
}

fn date(s: &str) -> NaiveDate {
    s.parse().expect("valid literal date")
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: PathBuf::from("data/series.csv"),
            population: None,
            schema: CsvSchema::default(),
            first_wave: DateRange::new(date("2020-01-07"), date("2020-05-15")),
            second_wave: DateRange::new(date("2020-10-01"), date("2020-12-15")),
            ident: IdentConfig::default(),
            penalty: PenaltyKind::SecondDifference,
            pre_window: 21,
            loss: Loss::Quadratic,
            lambda: LambdaConfig::default(),
            bootstrap: BootstrapConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.first_wave.is_empty() || self.second_wave.is_empty() {
            return bad("wave windows must be nonempty");
        }
        if self.first_wave.end >= self.second_wave.start {
            return bad("the first wave must end before the second wave starts");
        }
        if self.pre_window < -1 {
            return bad("pre_window must be >= -1");
        }
        if self.lambda.grid_points == 0 || !(self.lambda.grid_lo > 0.0 && self.lambda.grid_lo < self.lambda.grid_hi) {
            return bad("lambda grid must have points and 0 < grid_lo < grid_hi");
        }
        if let Some(l) = self.lambda.fixed {
            if !(l >= 0.0 && l.is_finite()) {
                return bad("fixed lambda must be finite and >= 0");
            }
        }
        self.ident
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.bootstrap
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Smoothed full-range series of one cohort.
#[derive(Debug, Clone)]
pub struct CohortInputs {
    pub group: AgeGroup,
    pub cases: DailySeries,
    pub admissions: DailySeries,
    pub population: Option<u64>,
}

impl CohortInputs {
    pub fn second_wave_admissions(&self, cfg: &PipelineConfig) -> Result<DailySeries, SeriesError> {
        window(&self.admissions, cfg.second_wave)
    }

    pub fn first_wave_admissions(&self, cfg: &PipelineConfig) -> Result<DailySeries, SeriesError> {
        window(&self.admissions, cfg.first_wave)
    }

    /// Official cases over the first wave, clipped to what the data covers.
    pub fn official_first_wave(&self, cfg: &PipelineConfig) -> Option<DailySeries> {
        let r = self.cases.support().intersect(&cfg.first_wave);
        (!r.is_empty()).then(|| window(&self.cases, r).ok()).flatten()
    }
}

/// Load, validate and smooth the dataset. Smoothing runs on the full
/// available range before any windowing.
pub fn load_inputs(cfg: &PipelineConfig) -> Result<Vec<CohortInputs>, PipelineError> {
    cfg.validate()?;
    let mut ds = load_csv(&cfg.data, &cfg.schema).map_err(|e| PipelineError::Input {
        path: cfg.data.clone(),
        source: e,
    })?;
    if let Some(p) = &cfg.population {
        ds.populations = load_population(p).map_err(|e| PipelineError::Input {
            path: p.clone(),
            source: e,
        })?;
    }
    inputs_from_dataset(&ds.smoothed(), cfg)
}

pub fn inputs_from_dataset(ds: &CohortDataset, cfg: &PipelineConfig) -> Result<Vec<CohortInputs>, PipelineError> {
    ds.validate()?;
    let mut out = Vec::new();
    for g in AgeGroup::all() {
        let get = |q| {
            ds.get(g, q)
                .cloned()
                .ok_or(SeriesError::MissingSeries { cohort: g, quantity: q })
        };
        let cases = get(Quantity::NewCases)?;
        let admissions = get(Quantity::HospitalAdmissions)?;
        for (s, r) in [
            (&cases, cfg.second_wave),
            (&admissions, cfg.second_wave),
            (&admissions, cfg.first_wave),
        ] {
            if !s.support().contains_range(&r) {
                return Err(SeriesError::OutOfRange {
                    requested: r,
                    support: s.support(),
                }
                .into());
            }
        }
        out.push(CohortInputs {
            group: g,
            cases,
            admissions,
            population: ds.populations.get(&g).copied(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub lambda: f64,
    pub noise: Option<NoiseEstimate>,
    #[serde(skip)]
    pub curve: Option<CpCurve>,
}

/// Everything known about one cohort so far.
#[derive(Debug, Clone, Default)]
pub struct CohortState {
    pub ident: Option<IdentResult>,
    pub selection: Option<Selection>,
    pub reconstruction: Option<Reconstruction>,
    pub ident_boot: Option<BootstrapSummary>,
    pub deconv_boot: Option<DeconvBootstrap>,
    pub error: Option<String>,
}

pub struct Run {
    pub cfg: PipelineConfig,
    pub inputs: Vec<CohortInputs>,
    pub states: Vec<CohortState>,
    /// Bootstrap summary of the all-ages series.
    pub all_ages_boot: Option<BootstrapSummary>,
}

pub const ALL_AGES: &str = "all";

/// Identification record as written to `identification.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentRecord {
    pub age_group: AgeGroup,
    pub alpha: f64,
    pub beta: f64,
    pub delay: i64,
    pub gain: f64,
    pub time_constant: f64,
    pub mean_lag: f64,
    pub rss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub age_group: AgeGroup,
    pub lambda: f64,
    pub noise: Option<NoiseEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortBootstrapRecord {
    pub age_group: AgeGroup,
    pub ident: BootstrapSummary,
    pub deconv: BootstrapSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRecord {
    pub seed: u64,
    pub n_replicates_ident: usize,
    pub n_replicates_deconv: usize,
    pub cohorts: Vec<CohortBootstrapRecord>,
    pub all_ages: Option<BootstrapSummary>,
}

/// Fit statistics of a given kernel on the second wave, as identification
/// would have reported them.
pub fn ident_from_kernel(
    c: &CohortInputs,
    kernel: ExpKernel,
    cfg: &PipelineConfig,
) -> Result<IdentResult, CohortError> {
    let y = c.second_wave_admissions(cfg)?;
    let offset = c.cases.offset_of(y.start);
    let u: Vec<f64> = match cfg.ident.input_history {
        InputHistory::UseAvailable => c.cases.values.clone(),
        InputHistory::ZeroPad => c
            .cases
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| if (i as i64) < offset { 0.0 } else { *v })
            .collect(),
    };
    let full = convolve(&u, &kernel);
    let fitted: Vec<f64> = (0..y.len()).map(|t| full[offset as usize + t]).collect();
    let residuals: Vec<f64> = y.values.iter().zip(&fitted).map(|(a, b)| a - b).collect();
    Ok(IdentResult {
        kernel,
        stats: kernel.stats(),
        rss: residuals.iter().map(|r| r * r).sum(),
        fitted,
        residuals,
    })
}

pub fn identify_cohort(c: &CohortInputs, cfg: &PipelineConfig) -> Result<IdentResult, CohortError> {
    let y = c.second_wave_admissions(cfg)?;
    Ok(identify(&c.cases, &y, &cfg.ident)?)
}

/// Noise variance and Cp selection on the first-wave admissions. Cp is
/// evaluated for quadratic loss whatever loss the reconstruction uses. When
/// the polynomial fits exactly (for example all-zero admissions) the
/// largest grid value is taken.
pub fn select_cohort(c: &CohortInputs, kernel: &ExpKernel, cfg: &PipelineConfig) -> Result<Selection, CohortError> {
    if let Some(lambda) = cfg.lambda.fixed {
        return Ok(Selection {
            lambda,
            noise: None,
            curve: None,
        });
    }
    let y = c.first_wave_admissions(cfg)?;
    let noise = estimate_sigma2(&y.values, cfg.lambda.poly_degree)?;
    let problem = DeconvProblem::new(y.values, *kernel, cfg.pre_window, cfg.penalty, 1.0)?;
    let grid = default_lambda_grid(&problem, cfg.lambda.grid_points, cfg.lambda.grid_lo, cfg.lambda.grid_hi)?;
    if !(noise.sigma2 > 0.0) {
        warn!("{}: noise variance is zero, using the largest lambda", c.group);
        return Ok(Selection {
            lambda: *grid.last().expect("nonempty grid"),
            noise: Some(noise),
            curve: None,
        });
    }
    let curve = mallows_cp(&problem, &grid, noise.sigma2)?;
    Ok(Selection {
        lambda: curve.selected_lambda,
        noise: Some(noise),
        curve: Some(curve),
    })
}

pub fn reconstruct(
    c: &CohortInputs,
    kernel: &ExpKernel,
    lambda: f64,
    cfg: &PipelineConfig,
) -> Result<Reconstruction, CohortError> {
    let y = c.first_wave_admissions(cfg)?;
    Ok(reconstruct_cohort(
        &y,
        kernel,
        cfg.penalty,
        lambda,
        cfg.pre_window,
        cfg.loss,
    )?)
}

pub fn bootstrap_cohort(
    c: &CohortInputs,
    ident: &IdentResult,
    lambda: f64,
    cfg: &PipelineConfig,
) -> Result<(BootstrapSummary, DeconvBootstrap), CohortError> {
    let y2 = c.second_wave_admissions(cfg)?;
    let ib = bootstrap_identify(&c.cases, &y2, ident, &cfg.ident, &cfg.bootstrap)?;
    let y1 = c.first_wave_admissions(cfg)?;
    let mut template = DeconvTemplate::new(ident.kernel, cfg.penalty, lambda, cfg.pre_window);
    template.loss = cfg.loss;
    template.total_window = Some(cfg.first_wave);
    let db = bootstrap_deconvolve(&y1, &ib, &template, &cfg.bootstrap)?;
    Ok((ib.summary, db))
}

/// Datewise sum over the union of supports, each series counting as zero
/// outside its own support.
pub fn sum_series(parts: &[&DailySeries]) -> Option<DailySeries> {
    let start = parts.iter().map(|s| s.start).min()?;
    let end = parts.iter().map(|s| s.end()).max()?;
    let len = (end - start).num_days() as usize + 1;
    let mut values = vec![0.0; len];
    for s in parts {
        let off = (s.start - start).num_days() as usize;
        for (i, v) in s.values.iter().enumerate() {
            values[off + i] += v;
        }
    }
    Some(DailySeries {
        start,
        values,
        ..parts[0].clone()
    })
}

fn total_in(s: &DailySeries, r: &DateRange) -> f64 {
    s.iter().filter(|(d, _)| r.contains(*d)).map(|(_, v)| v).sum()
}

fn check_alive(states: &[CohortState], inputs: &[CohortInputs], stage: &str) -> Result<(), PipelineError> {
    if states.iter().all(|s| s.error.is_some()) {
        let msg = inputs
            .iter()
            .zip(states)
            .map(|(c, s)| format!("{}: {}", c.group, s.error.as_deref().unwrap_or("")))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(PipelineError::AllCohortsFailed(format!("{stage}: {msg}")));
    }
    for (c, s) in inputs.iter().zip(states) {
        if let Some(e) = &s.error {
            warn!("{} failed: {e}", c.group);
        }
    }
    Ok(())
}

fn json_file<T: Serialize>(dir: &Path, name: &str, v: &T) -> Result<(), PipelineError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write_file(dir, name, s.as_bytes())?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<T, PipelineError> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(path));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

impl Run {
    pub fn new(cfg: PipelineConfig) -> Result<Self, PipelineError> {
        let inputs = load_inputs(&cfg)?;
        Ok(Self::from_inputs(cfg, inputs))
    }

    pub fn from_inputs(cfg: PipelineConfig, inputs: Vec<CohortInputs>) -> Self {
        let states = vec![CohortState::default(); inputs.len()];
        Run {
            cfg,
            inputs,
            states,
            all_ages_boot: None,
        }
    }

    fn out(&self) -> Result<&Path, PipelineError> {
        fs::create_dir_all(&self.cfg.output_dir)?;
        Ok(&self.cfg.output_dir)
    }

    /// Apply `f` to every live cohort in parallel, recording failures.
    fn each<F>(&mut self, stage: &str, f: F) -> Result<(), PipelineError>
    where
        F: Fn(&CohortInputs, &mut CohortState, &PipelineConfig) -> Result<(), CohortError> + Sync,
    {
        let cfg = &self.cfg;
        self.states
            .par_iter_mut()
            .zip(self.inputs.par_iter())
            .for_each(|(s, c)| {
                if s.error.is_none() {
                    if let Err(e) = f(c, s, cfg) {
                        s.error = Some(format!("{stage}: {e}"));
                    }
                }
            });
        check_alive(&self.states, &self.inputs, stage)
    }

    /// Cohorts that failed, with their messages.
    pub fn failures(&self) -> Vec<(AgeGroup, String)> {
        self.inputs
            .iter()
            .zip(&self.states)
            .filter_map(|(c, s)| s.error.clone().map(|e| (c.group, e)))
            .collect()
    }

    pub fn identify(&mut self) -> Result<(), PipelineError> {
        self.each("identify", |c, s, cfg| {
            s.ident = Some(identify_cohort(c, cfg)?);
            Ok(())
        })
    }

    pub fn select(&mut self) -> Result<(), PipelineError> {
        self.each("select-lambda", |c, s, cfg| {
            let ident = s
                .ident
                .as_ref()
                .ok_or_else(|| CohortError::Missing("no identification".into()))?;
            s.selection = Some(select_cohort(c, &ident.kernel, cfg)?);
            Ok(())
        })
    }

    pub fn deconvolve(&mut self) -> Result<(), PipelineError> {
        self.each("deconvolve", |c, s, cfg| {
            let ident = s
                .ident
                .as_ref()
                .ok_or_else(|| CohortError::Missing("no identification".into()))?;
            let sel = s
                .selection
                .as_ref()
                .ok_or_else(|| CohortError::Missing("no lambda".into()))?;
            s.reconstruction = Some(reconstruct(c, &ident.kernel, sel.lambda, cfg)?);
            Ok(())
        })
    }

    pub fn bootstrap(&mut self) -> Result<(), PipelineError> {
        self.each("bootstrap", |c, s, cfg| {
            let ident = s
                .ident
                .as_ref()
                .ok_or_else(|| CohortError::Missing("no identification".into()))?;
            let sel = s
                .selection
                .as_ref()
                .ok_or_else(|| CohortError::Missing("no lambda".into()))?;
            let (ib, db) = bootstrap_cohort(c, ident, sel.lambda, cfg)?;
            s.ident_boot = Some(ib);
            s.deconv_boot = Some(db);
            Ok(())
        })?;
        self.all_ages_boot = self.aggregate_bootstrap();
        Ok(())
    }

    /// Replicate `r` of the all-ages series is the sum of replicate `r` of
    /// every cohort.
    fn aggregate_bootstrap(&self) -> Option<BootstrapSummary> {
        let boots: Vec<&DeconvBootstrap> = self.states.iter().filter_map(|s| s.deconv_boot.as_ref()).collect();
        let bases: Vec<&DailySeries> = boots.iter().map(|b| &b.base.series).collect();
        let grid = sum_series(&bases)?;
        let reps = boots.iter().map(|b| b.curves.len()).min()?;
        let mut curves = vec![vec![0.0; grid.len()]; reps];
        let mut totals = vec![vec![0.0]; reps];
        for b in &boots {
            let off = (b.base.series.start - grid.start).num_days() as usize;
            for r in 0..reps {
                for (i, v) in b.curves[r].iter().enumerate() {
                    curves[r][off + i] += v;
                }
                totals[r][0] += b.summary.replicates[r][0];
            }
        }
        Some(BootstrapSummary::from_replicates(
            self.cfg.bootstrap.levels(),
            vec!["total".into()],
            totals,
            &curves,
            Some(grid.start),
            0,
        ))
    }

    // ---- artifacts ----

    pub fn write_smoothed(&self) -> Result<(), PipelineError> {
        let mut ds = CohortDataset::default();
        for c in &self.inputs {
            ds.series.insert((c.group, Quantity::NewCases), c.cases.clone());
            ds.series
                .insert((c.group, Quantity::HospitalAdmissions), c.admissions.clone());
        }
        save_csv(self.out()?.join("smoothed.csv"), &ds)?;
        Ok(())
    }

    fn records<T>(&self, f: impl Fn(&CohortInputs, &CohortState) -> Option<T>) -> Vec<T> {
        self.inputs
            .iter()
            .zip(&self.states)
            .filter_map(|(c, s)| f(c, s))
            .collect()
    }

    pub fn write_identification(&self) -> Result<(), PipelineError> {
        let recs = self.records(|c, s| {
            s.ident.as_ref().map(|r| IdentRecord {
                age_group: c.group,
                alpha: r.kernel.alpha(),
                beta: r.kernel.beta(),
                delay: r.kernel.delay(),
                gain: r.stats.gain,
                time_constant: r.stats.time_constant,
                mean_lag: r.stats.mean_lag,
                rss: r.rss,
            })
        });
        json_file(self.out()?, "identification.json", &recs)
    }

    pub fn read_identification(&mut self) -> Result<(), PipelineError> {
        let recs: Vec<IdentRecord> = read_json(&self.cfg.output_dir, "identification.json")?;
        let by: BTreeMap<AgeGroup, IdentRecord> = recs.into_iter().map(|r| (r.age_group, r)).collect();
        self.each("identify", |c, s, cfg| {
            let r = by
                .get(&c.group)
                .ok_or_else(|| CohortError::Missing("not identified".into()))?;
            s.ident = Some(ident_from_kernel(c, ExpKernel::new(r.alpha, r.beta, r.delay)?, cfg)?);
            Ok(())
        })
    }

    pub fn write_selection(&self) -> Result<(), PipelineError> {
        let dir = self.out()?;
        for (c, s) in self.inputs.iter().zip(&self.states) {
            if let Some(curve) = s.selection.as_ref().and_then(|x| x.curve.as_ref()) {
                write_file(dir, &format!("cp_{}.csv", c.group), curve.to_csv().as_bytes())?;
            }
        }
        let recs = self.records(|c, s| {
            s.selection.as_ref().map(|x| SelectionRecord {
                age_group: c.group,
                lambda: x.lambda,
                noise: x.noise,
            })
        });
        json_file(dir, "selection.json", &recs)
    }

    pub fn read_selection(&mut self) -> Result<(), PipelineError> {
        let recs: Vec<SelectionRecord> = read_json(&self.cfg.output_dir, "selection.json")?;
        let by: BTreeMap<AgeGroup, SelectionRecord> = recs.into_iter().map(|r| (r.age_group, r)).collect();
        self.each("select-lambda", |c, s, _| {
            let r = by
                .get(&c.group)
                .ok_or_else(|| CohortError::Missing("no lambda selected".into()))?;
            s.selection = Some(Selection {
                lambda: r.lambda,
                noise: r.noise,
                curve: None,
            });
            Ok(())
        })
    }

    /// `reconstruction.csv`: reconstructed and official first-wave cases.
    pub fn write_reconstruction(&self) -> Result<(), PipelineError> {
        let mut out = String::from("date,age_group,reconstructed_cases,official_cases\n");
        for (c, s) in self.inputs.iter().zip(&self.states) {
            if let Some(r) = &s.reconstruction {
                for (d, v) in r.series.iter() {
                    let off = c.cases.get(d).map_or(String::new(), format_value);
                    out.push_str(&format!("{d},{},{},{off}\n", c.group, format_value(v)));
                }
            }
        }
        write_file(self.out()?, "reconstruction.csv", out.as_bytes())?;
        Ok(())
    }

    pub fn write_bootstrap(&self) -> Result<(), PipelineError> {
        let rec = BootstrapRecord {
            seed: self.cfg.bootstrap.seed,
            n_replicates_ident: self.cfg.bootstrap.n_replicates_ident,
            n_replicates_deconv: self.cfg.bootstrap.n_replicates_deconv,
            cohorts: self.records(|c, s| match (&s.ident_boot, &s.deconv_boot) {
                (Some(i), Some(d)) => Some(CohortBootstrapRecord {
                    age_group: c.group,
                    ident: i.clone(),
                    deconv: d.summary.clone(),
                }),
                _ => None,
            }),
            all_ages: self.all_ages_boot.clone(),
        };
        json_file(self.out()?, "bootstrap.json", &rec)
    }

    /// Rebuild reconstructions from the stored kernels and lambdas and
    /// attach stored bootstrap summaries when present.
    pub fn read_bootstrap(&mut self) -> Result<Option<BootstrapRecord>, PipelineError> {
        let rec: BootstrapRecord = match read_json(&self.cfg.output_dir, "bootstrap.json") {
            Ok(r) => r,
            Err(PipelineError::MissingArtifact(p)) => {
                warn!("{} not found; reporting without bands", p.display());
                return Ok(None);
            }
            Err(e) => return Err(e),
        };
        // the summary reports the settings the bands were made with
        self.cfg.bootstrap.seed = rec.seed;
        self.cfg.bootstrap.n_replicates_ident = rec.n_replicates_ident;
        self.cfg.bootstrap.n_replicates_deconv = rec.n_replicates_deconv;
        let by: BTreeMap<AgeGroup, &CohortBootstrapRecord> = rec.cohorts.iter().map(|r| (r.age_group, r)).collect();
        for (c, s) in self.inputs.iter().zip(self.states.iter_mut()) {
            if let Some(r) = by.get(&c.group) {
                s.ident_boot = Some(r.ident.clone());
                if let Some(base) = s.reconstruction.clone() {
                    s.deconv_boot = Some(DeconvBootstrap {
                        base,
                        summary: r.deconv.clone(),
                        curves: Vec::new(),
                    });
                }
            }
        }
        self.all_ages_boot = rec.all_ages.clone();
        Ok(Some(rec))
    }

    // ---- report ----

    pub fn tables(&self) -> ReportTables {
        let cfg = &self.cfg;
        let band = |s: Option<&BootstrapSummary>, name: &str| s.and_then(|b| b.band(name));
        let mut kernel_table = Vec::new();
        let mut totals_table = Vec::new();
        let mut daily_factor = Vec::new();
        let mut bands = Vec::new();
        let mut cohorts_json = Vec::new();
        let mut recon_parts = Vec::new();
        let mut official_parts = Vec::new();

        for (c, s) in self.inputs.iter().zip(&self.states) {
            let label = c.group.to_string();
            let Some(ident) = &s.ident else { continue };
            let ib = s.ident_boot.as_ref();
            kernel_table.push(KernelRow {
                label: label.clone(),
                gain: ident.stats.gain,
                gain_band: band(ib, "gain"),
                delay: ident.kernel.delay(),
                delay_band: band(ib, "delay"),
                time_constant: ident.stats.time_constant,
                time_constant_band: band(ib, "time_constant"),
                mean_lag: ident.stats.mean_lag,
            });
            let mut cj = json!({
                "age_group": label,
                "identification": {
                    "alpha": ident.kernel.alpha(),
                    "beta": ident.kernel.beta(),
                    "delay": ident.kernel.delay(),
                    "gain": ident.stats.gain,
                    "time_constant": ident.stats.time_constant,
                    "mean_lag": ident.stats.mean_lag,
                    "rss": ident.rss,
                },
            });
            if let Some(ib) = ib {
                cj["identification_bands"] = json!({
                    "levels": ib.levels,
                    "scalars": ib.scalar,
                    "kernel": ib.pointwise,
                    "failures": ib.failures,
                });
            }
            if let Some(sel) = &s.selection {
                cj["lambda"] = json!(sel.lambda);
                if let Some(n) = sel.noise {
                    cj["sigma2"] = json!(n.sigma2);
                }
            }
            let Some(rec) = &s.reconstruction else {
                cohorts_json.push(cj);
                continue;
            };
            let db = s.deconv_boot.as_ref().map(|b| &b.summary);
            let official = c.official_first_wave(cfg);
            let row = TotalsRow {
                label: label.clone(),
                official: official.as_ref().map_or(0.0, |o| o.total()),
                reconstructed: total_in(&rec.series, &cfg.first_wave),
                band: band(db, "total"),
            };
            cj["totals"] = json!({
                "official": row.official,
                "reconstructed": row.reconstructed,
                "band": row.band,
            });
            if let Some(db) = db {
                cj["reconstruction_failures"] = json!(db.failures);
                bands.push(band_series(&label, db));
            }
            if let Some(f) = factor_on_window(&rec.series, official.as_ref(), &label) {
                daily_factor.push(f);
            }
            totals_table.push(row);
            recon_parts.push(&rec.series);
            if let Some(o) = official {
                official_parts.push(o);
            }
            cohorts_json.push(cj);
        }

        let mut all_json = serde_json::Value::Null;
        if let Some(all) = sum_series(&recon_parts) {
            let op: Vec<&DailySeries> = official_parts.iter().collect();
            let official = sum_series(&op);
            // the all-ages row is the sum of the cohort rows
            let row = TotalsRow {
                label: ALL_AGES.into(),
                official: totals_table.iter().map(|r| r.official).sum(),
                reconstructed: totals_table.iter().map(|r| r.reconstructed).sum(),
                band: band(self.all_ages_boot.as_ref(), "total"),
            };
            all_json = json!({
                "official": row.official,
                "reconstructed": row.reconstructed,
                "band": row.band,
            });
            if let Some(b) = &self.all_ages_boot {
                bands.push(band_series(ALL_AGES, b));
            }
            if let Some(f) = factor_on_window(&all, official.as_ref(), ALL_AGES) {
                daily_factor.push(f);
            }
            totals_table.push(row);
        }

        let failures: BTreeMap<String, String> = self.failures().into_iter().map(|(g, e)| (g.to_string(), e)).collect();
        let summary = json!({
            "seed": cfg.bootstrap.seed,
            "first_wave": cfg.first_wave,
            "second_wave": cfg.second_wave,
            "pre_window": cfg.pre_window,
            "penalty": cfg.penalty,
            "loss": cfg.loss,
            "replicates": {
                "identification": cfg.bootstrap.n_replicates_ident,
                "reconstruction": cfg.bootstrap.n_replicates_deconv,
            },
            "cohorts": cohorts_json,
            "all_ages": all_json,
            "failures": failures,
        });
        ReportTables {
            kernel_table,
            totals_table,
            daily_factor,
            bands,
            summary,
        }
    }

    /// `solution.csv`: reconstruction with its band, official cases and the
    /// reconstruction per 100,000 people, for every cohort and all ages.
    pub fn solution_csv(&self) -> String {
        let mut out = String::from(
            "date,age_group,reconstructed_cases,lower_95,upper_95,official_cases,median,reconstructed_per_100k\n",
        );
        let mut parts = Vec::new();
        let mut pops = Vec::new();
        for (c, s) in self.inputs.iter().zip(&self.states) {
            let Some(r) = &s.reconstruction else { continue };
            let cohort = c.population.and_then(|p| AgeCohort::new(c.group, p).ok());
            let band = s.deconv_boot.as_ref().map(|b| &b.summary);
            write_solution_rows(
                &mut out,
                &c.group.to_string(),
                &r.series,
                band,
                |d| c.cases.get(d),
                cohort.as_ref(),
            );
            parts.push(&r.series);
            pops.push(c.population);
        }
        if let Some(all) = sum_series(&parts) {
            let total_pop: Option<u64> = pops.iter().copied().sum();
            let cohort = total_pop.and_then(|p| AgeCohort::new(AgeGroup::new(0).expect("decade 0"), p).ok());
            let official = |d: NaiveDate| -> Option<f64> { self.inputs.iter().map(|c| c.cases.get(d)).sum() };
            write_solution_rows(
                &mut out,
                ALL_AGES,
                &all,
                self.all_ages_boot.as_ref(),
                official,
                cohort.as_ref(),
            );
        }
        out
    }

    pub fn write_report(&self) -> Result<ReportTables, PipelineError> {
        let tables = self.tables();
        let dir = self.out()?;
        emit_tables(&tables, dir)?;
        write_file(dir, "solution.csv", self.solution_csv().as_bytes())?;
        Ok(tables)
    }
}

fn band_series(label: &str, b: &BootstrapSummary) -> BandSeries {
    BandSeries {
        label: label.into(),
        quantity: Quantity::NewCases.to_string(),
        start: b.start.expect("reconstruction bands are dated"),
        levels: b.levels.clone(),
        rows: b.pointwise.clone(),
    }
}

fn factor_on_window(rec: &DailySeries, official: Option<&DailySeries>, label: &str) -> Option<FactorSeries> {
    let official = official?;
    let r = rec.support().intersect(&official.support());
    if r.is_empty() {
        return None;
    }
    let mut f = underestimation_series(&window(rec, r).ok()?, &window(official, r).ok()?).ok()?;
    f.label = label.into();
    Some(f)
}

fn write_solution_rows(
    out: &mut String,
    label: &str,
    series: &DailySeries,
    band: Option<&BootstrapSummary>,
    official: impl Fn(NaiveDate) -> Option<f64>,
    cohort: Option<&AgeCohort>,
) {
    let per = cohort.map(|c| per_100k(series, c));
    let pick = |i: usize, p: f64| -> String {
        band.and_then(|b| {
            let row = b.pointwise.get((series.date_at(i) - b.start?).num_days() as usize)?;
            let v = row[b.level_index(p)?];
            (!v.is_nan()).then(|| format_value(v))
        })
        .unwrap_or_default()
    };
    for (i, (d, v)) in series.iter().enumerate() {
        let lo = band.map_or(String::new(), |b| pick(i, b.levels[0]));
        let hi = band.map_or(String::new(), |b| pick(i, *b.levels.last().expect("levels")));
        out.push_str(&format!(
            "{d},{label},{},{lo},{hi},{},{},{}\n",
            format_value(v),
            official(d).map_or(String::new(), format_value),
            pick(i, 50.0),
            per.as_ref().map_or(String::new(), |p| format_value(p.values[i])),
        ));
    }
}

/// Every stage in order, writing all artifacts.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<(ReportTables, Vec<(AgeGroup, String)>), PipelineError> {
    let mut run = Run::new(cfg.clone())?;
    run.write_smoothed()?;
    info!("identifying kernels on {}", cfg.second_wave);
    run.identify()?;
    run.write_identification()?;
    info!("selecting lambda on {}", cfg.first_wave);
    run.select()?;
    run.write_selection()?;
    run.deconvolve()?;
    run.write_reconstruction()?;
    info!(
        "bootstrap: {} identification and {} reconstruction replicates per cohort",
        cfg.bootstrap.n_replicates_ident, cfg.bootstrap.n_replicates_deconv
    );
    run.bootstrap()?;
    run.write_bootstrap()?;
    let tables = run.write_report()?;
    Ok((tables, run.failures()))
}
