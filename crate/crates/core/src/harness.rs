//! Convergence studies: configuration, the staged pipeline, rate fits and
//! report files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::cell::{CellOptions, CellSolver};
use crate::correctors::{build_hierarchy, max_order, CorrectorHierarchy, SlowGrid};
use crate::effective::{solve_effective, FanOptions};
use crate::error::{Error, Result};
use crate::geometry::{vect_from_slice, BoxRegion, Vect};
use crate::io::{format_float, write_csv, write_text};
use crate::problem::{
    default_k_max, validate_initial_data, validate_problem, InitialData, InitialDataFile, ProblemFile, ProblemSpec,
    ValidationReport,
};
use crate::reference::{
    compare, insulation_margin, prepared_initial, slice_speed, solve_reference, FarField, FineGrid1D,
    ReferenceOptions, ReferenceSolution,
};
use crate::table::{effective_table, EffectiveTable};
use crate::torus::TorusGrid;

pub const SCHEMA_VERSION: u32 = 1;

/// Errors below this are treated as exact and left out of rate fits.
pub const ERROR_FLOOR: f64 = 1e-9;

/// Accepted shortfall of a fitted slope below the order `m`.
pub const SLOPE_SLACK: f64 = 0.3;

/// Largest allowed change of the windowed solution when the domain is doubled.
pub const INSULATION_TOL: f64 = 1e-9;

/// Bound on end-to-end errors for affine data, where the expansion is exact
/// and only the reference discretization error remains.
pub const SCHEME_LEVEL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyMode {
    #[default]
    Residual,
    EndToEnd,
    Both,
}

impl StudyMode {
    pub fn residual(self) -> bool {
        matches!(self, Self::Residual | Self::Both)
    }

    pub fn end_to_end(self) -> bool {
        matches!(self, Self::EndToEnd | Self::Both)
    }
}

/// Problem given inline or as a path (relative to the config file).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProblemSource {
    Path(PathBuf),
    Inline(Box<ProblemFile>),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CellConfig {
    /// Torus nodes per axis.
    pub n: usize,
    #[serde(flatten)]
    pub options: CellOptions,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self {
            n: 64,
            options: CellOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableConfig {
    pub p_lo: Vec<f64>,
    pub p_hi: Vec<f64>,
    pub dp: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SlowConfig {
    pub hx: f64,
    /// Defaults to `hx / 2`.
    pub ht: Option<f64>,
}

impl Default for SlowConfig {
    fn default() -> Self {
        Self { hx: 0.02, ht: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

fn default_zeta_min() -> f64 {
    1e-3
}

fn default_samples() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub problem: ProblemSource,
    /// Overrides the initial data stored with the problem.
    #[serde(default)]
    pub initial_data: Option<InitialDataFile>,
    pub orders: Vec<usize>,
    pub eps: Vec<f64>,
    #[serde(default)]
    pub cell: CellConfig,
    pub table: TableConfig,
    #[serde(default)]
    pub slow: SlowConfig,
    #[serde(default)]
    pub reference: ReferenceOptions,
    pub window: WindowConfig,
    pub horizon: f64,
    #[serde(default)]
    pub mode: StudyMode,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_zeta_min")]
    pub zeta_min: f64,
    #[serde(default = "default_samples")]
    pub validation_samples: usize,
    /// Directory that relative problem paths are resolved against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn check(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::InvalidInput(format!(
                "schema_version {} not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.eps.iter().any(|e| !(*e > 0.0 && *e <= 0.5)) {
            return Err(Error::InvalidInput("eps values must lie in (0, 1/2]".into()));
        }
        if self.eps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidInput("eps values must be sorted strictly descending".into()));
        }
        if self.orders.is_empty() || self.orders.contains(&0) {
            return Err(Error::InvalidInput("orders must be a non-empty list of positive integers".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidInput("horizon must be positive".into()));
        }
        Ok(())
    }

    pub fn problem_file(&self) -> Result<ProblemFile> {
        let mut file = match &self.problem {
            ProblemSource::Inline(p) => (**p).clone(),
            ProblemSource::Path(path) => {
                let full = match &self.base_dir {
                    Some(dir) if path.is_relative() => dir.join(path),
                    _ => path.clone(),
                };
                ProblemFile::load(&full)?
            }
        };
        if let Some(g) = &self.initial_data {
            file.initial_data = Some(g.clone());
        }
        if file.dim != 1 && self.mode.end_to_end() {
            return Err(Error::InvalidInput("end-to-end comparison is 1D only".into()));
        }
        Ok(file)
    }

    fn max_order(&self) -> usize {
        self.orders.iter().copied().max().unwrap_or(1)
    }
}

/// One `(ε, m)` entry of a study.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub eps: f64,
    pub m: usize,
    pub sup_error: Option<f64>,
    pub max_residual: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitStatus {
    Fitted,
    /// Every error sits below [`ERROR_FLOOR`].
    Exact,
    /// Fewer than two rows above the floor.
    Degenerate,
}

/// Least-squares fit of `log(error)` against `log(ε)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    /// 95% confidence interval for the slope (needs three or more points).
    pub ci: Option<(f64, f64)>,
    pub points: usize,
    pub status: FitStatus,
}

impl RateFit {
    /// Slope at least `m - 0.3`, or exact.
    pub fn meets(&self, m: usize) -> bool {
        match self.status {
            FitStatus::Exact => true,
            FitStatus::Fitted => self.slope >= m as f64 - SLOPE_SLACK,
            FitStatus::Degenerate => false,
        }
    }
}

/// Fits `(ε, error)` pairs. Needs at least three rows; rows below
/// [`ERROR_FLOOR`] are dropped.
pub fn fit_rates(rows: &[(f64, f64)]) -> Result<RateFit> {
    if rows.len() < 3 {
        return Err(Error::InsufficientRows(format!("{} rows given, at least 3 needed", rows.len())));
    }
    let kept: Vec<(f64, f64)> = rows
        .iter()
        .filter(|(_, e)| *e >= ERROR_FLOOR)
        .map(|(eps, e)| (eps.ln(), e.ln()))
        .collect();
    let n = kept.len();
    if n == 0 {
        return Ok(RateFit {
            slope: f64::INFINITY,
            intercept: f64::NEG_INFINITY,
            ci: None,
            points: 0,
            status: FitStatus::Exact,
        });
    }
    if n < 2 {
        return Ok(RateFit {
            slope: f64::NAN,
            intercept: f64::NAN,
            ci: None,
            points: n,
            status: FitStatus::Degenerate,
        });
    }
    let mx = kept.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let my = kept.iter().map(|p| p.1).sum::<f64>() / n as f64;
    let sxx: f64 = kept.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = kept.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("rate fit needs distinct eps values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ci = (n >= 3).then(|| {
        let sse: f64 = kept.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
        let se = (sse / (n - 2) as f64 / sxx).sqrt();
        let t = StudentsT::new(0.0, 1.0, (n - 2) as f64)
            .expect("positive degrees of freedom")
            .inverse_cdf(0.975);
        (slope - t * se, slope + t * se)
    });
    Ok(RateFit {
        slope,
        intercept,
        ci,
        points: n,
        status: FitStatus::Fitted,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quantity {
    /// `sup |u^ε - η_m^ε|` over the window.
    Error,
    /// `max |ψ_m^ε|` over the window.
    Residual,
}

impl Quantity {
    fn name(self) -> &'static str {
        match self {
            Self::Error => "error",
            Self::Residual => "residual",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeRow {
    pub quantity: Quantity,
    pub m: usize,
    pub fit: RateFit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub package: String,
    pub version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub schema_version: u32,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            package: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            threads: rayon::current_num_threads(),
            schema_version: SCHEMA_VERSION,
        }
    }
}

/// Pass/fail line of a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub rows: Vec<StudyRow>,
    pub slopes: Vec<SlopeRow>,
    /// `(ε, seconds)` per swept ε.
    pub timings: Vec<(f64, f64)>,
    /// Stages in the order they ran.
    pub stages: Vec<String>,
    /// Change of the windowed solution when the reference domain is doubled.
    pub insulation: Option<f64>,
    /// Affine initial data: error rows measure the reference scheme only.
    pub affine: bool,
    pub environment: Environment,
    /// Set when the pipeline stopped early.
    pub failure: Option<String>,
}

impl StudyReport {
    fn new(config: &StudyConfig) -> Self {
        Self {
            config: config.clone(),
            rows: Vec::new(),
            slopes: Vec::new(),
            timings: Vec::new(),
            stages: Vec::new(),
            insulation: None,
            affine: false,
            environment: Environment::current(),
            failure: None,
        }
    }

    fn row_mut(&mut self, eps: f64, m: usize) -> &mut StudyRow {
        let i = match self.rows.iter().position(|r| r.eps == eps && r.m == m) {
            Some(i) => i,
            None => {
                self.rows.push(StudyRow {
                    eps,
                    m,
                    sup_error: None,
                    max_residual: None,
                });
                self.rows.len() - 1
            }
        };
        &mut self.rows[i]
    }

    fn series(&self, quantity: Quantity, m: usize) -> Vec<(f64, f64)> {
        self.rows
            .iter()
            .filter(|r| r.m == m)
            .filter_map(|r| {
                let v = match quantity {
                    Quantity::Error => r.sup_error,
                    Quantity::Residual => r.max_residual,
                };
                v.map(|v| (r.eps, v))
            })
            .collect()
    }

    /// Refits every `(quantity, m)` series that has data.
    pub fn fit(&mut self) -> Result<()> {
        let mut slopes = Vec::new();
        for quantity in [Quantity::Residual, Quantity::Error] {
            for &m in &self.config.orders {
                let series = self.series(quantity, m);
                if series.is_empty() {
                    continue;
                }
                slopes.push(SlopeRow {
                    quantity,
                    m,
                    fit: fit_rates(&series)?,
                });
            }
        }
        self.slopes = slopes;
        Ok(())
    }

    /// Rate, ordering and insulation checks.
    pub fn checks(&self) -> Vec<Check> {
        let mut out = Vec::new();
        for s in &self.slopes {
            if self.affine && s.quantity == Quantity::Error {
                let worst = self.series(Quantity::Error, s.m).iter().fold(0.0f64, |w, r| w.max(r.1));
                out.push(Check {
                    name: format!("error at scheme level m={}", s.m),
                    passed: worst <= SCHEME_LEVEL,
                    detail: format!("max {worst:.3e} <= {SCHEME_LEVEL:e}"),
                });
                continue;
            }
            out.push(Check {
                name: format!("{} slope m={}", s.quantity.name(), s.m),
                passed: s.fit.meets(s.m),
                detail: match s.fit.status {
                    FitStatus::Exact => "exact (all rows below floor)".into(),
                    _ => format!("slope {:.3} >= {:.1}", s.fit.slope, s.m as f64 - SLOPE_SLACK),
                },
            });
        }
        let mut orders = self.config.orders.clone();
        orders.sort_unstable();
        for &eps in &self.config.eps {
            let errs: Vec<f64> = orders
                .iter()
                .filter_map(|&m| self.rows.iter().find(|r| r.eps == eps && r.m == m)?.sup_error)
                .collect();
            if errs.len() < 2 {
                continue;
            }
            let ok = errs.windows(2).all(|w| w[1] <= 1.1 * w[0] || w[1] < ERROR_FLOOR);
            out.push(Check {
                name: format!("error non-increasing in m at eps={}", format_float(eps)),
                passed: ok,
                detail: format!("{errs:?}"),
            });
        }
        if let Some(d) = self.insulation {
            out.push(Check {
                name: "boundary insulation".into(),
                passed: d <= INSULATION_TOL,
                detail: format!("windowed change {d:.3e} <= {INSULATION_TOL:e}"),
            });
        }
        out
    }

    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.checks().iter().all(|c| c.passed)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, format_float)
}

/// Writes `rows.csv`, `slopes.csv`, `config-echo.json`, `errors.dat`,
/// `residuals.dat`, `checks.csv`, `stages.log`, `timings.csv` and
/// `environment.json`. Everything except the last two is byte-stable.
pub fn emit_report(report: &StudyReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut rows = String::from("eps,m,sup_error,max_residual\n");
    for r in &report.rows {
        let _ = writeln!(rows, "{},{},{},{}", format_float(r.eps), r.m, opt(r.sup_error), opt(r.max_residual));
    }
    write_text(&dir.join("rows.csv"), &rows)?;

    let mut slopes = String::from("quantity,m,slope,ci_low,ci_high,points,status\n");
    for s in &report.slopes {
        let status = serde_json::to_value(s.fit.status)?;
        let _ = writeln!(
            slopes,
            "{},{},{},{},{},{},{}",
            s.quantity.name(),
            s.m,
            format_float(s.fit.slope),
            opt(s.fit.ci.map(|c| c.0)),
            opt(s.fit.ci.map(|c| c.1)),
            s.fit.points,
            status.as_str().unwrap_or_default()
        );
    }
    write_text(&dir.join("slopes.csv"), &slopes)?;

    let mut checks = String::from("check,passed,detail\n");
    for c in report.checks() {
        let _ = writeln!(checks, "\"{}\",{},\"{}\"", c.name, c.passed, c.detail.replace('"', "'"));
    }
    write_text(&dir.join("checks.csv"), &checks)?;

    write_text(&dir.join("config-echo.json"), &(report.config.to_json()? + "\n"))?;
    for (quantity, file) in [(Quantity::Error, "errors.dat"), (Quantity::Residual, "residuals.dat")] {
        write_text(&dir.join(file), &plot_data(report, quantity))?;
    }
    let mut log = report.stages.join("\n");
    if let Some(f) = &report.failure {
        let _ = write!(log, "\nfailed: {f}");
    }
    write_text(&dir.join("stages.log"), &(log + "\n"))?;
    write_csv(
        &dir.join("timings.csv"),
        &["eps", "seconds"],
        &report.timings.iter().map(|(e, s)| vec![*e, *s]).collect::<Vec<_>>(),
    )?;
    write_text(
        &dir.join("environment.json"),
        &(serde_json::to_string_pretty(&report.environment)? + "\n"),
    )?;
    Ok(())
}

/// Columns `log10(ε)` and `log10(value)` for each order.
fn plot_data(report: &StudyReport, quantity: Quantity) -> String {
    let mut orders = report.config.orders.clone();
    orders.sort_unstable();
    let mut out = String::from("# log10_eps");
    for m in &orders {
        let _ = write!(out, " log10_{}_m{m}", quantity.name());
    }
    out.push('\n');
    for &eps in &report.config.eps {
        let _ = write!(out, "{}", format_float(eps.log10()));
        for &m in &orders {
            let v = report.series(quantity, m).into_iter().find(|(e, _)| *e == eps).map(|(_, v)| v.log10());
            let _ = write!(out, " {}", v.map_or_else(|| "nan".into(), format_float));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

fn region<const D: usize>(lo: &[f64], hi: &[f64]) -> Result<BoxRegion<D>> {
    BoxRegion::new(vect_from_slice(lo)?, vect_from_slice(hi)?)
}

fn max_bbar<const D: usize>(table: &EffectiveTable<D>) -> f64 {
    table.bbar_nodes().iter().fold(0.0f64, |m, b| m.max(b.norm()))
}

/// Problem, data and tabulated `H̄` for one config.
pub struct Prepared<const D: usize> {
    pub spec: ProblemSpec<D>,
    pub g: InitialData<D>,
    pub table: Arc<EffectiveTable<D>>,
    pub window: BoxRegion<D>,
}

impl<const D: usize> Prepared<D> {
    /// Region the corrector hierarchy must cover for order `order`.
    pub fn slow_region(&self, cfg: &StudyConfig, order: usize) -> BoxRegion<D> {
        let mut margin = (order - 1) as f64 * cfg.horizon * max_bbar(&self.table) + 8.0 * cfg.slow.hx;
        if cfg.mode.end_to_end() {
            let eps = cfg.eps.first().copied().unwrap_or(0.5);
            margin += 6.0 * (eps * self.spec.bounds.lambda_upper * cfg.horizon).sqrt();
        }
        self.window.inflate(margin)
    }
}

fn logged<T>(stages: &mut Vec<String>, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    stages.push(name.to_string());
    f().map_err(|e| Error::stage(name, e))
}

/// Structure-condition checks on the problem alone.
pub fn validate_spec<const D: usize>(cfg: &StudyConfig, spec: &ProblemSpec<D>) -> Result<ValidationReport> {
    validate_problem(spec, cfg.validation_samples, cfg.seed)
}

fn require(report: &ValidationReport, what: &str) -> Result<()> {
    if report.passed() {
        return Ok(());
    }
    let failed: Vec<String> = report
        .checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} ({})", c.name, c.violation.clone().unwrap_or_default()))
        .collect();
    Err(Error::Inadmissible(format!("{what}: {}", failed.join("; "))))
}

/// Loads and validates the problem, tabulates `H̄`, and checks the data.
pub fn prepare<const D: usize>(cfg: &StudyConfig, file: &ProblemFile, stages: &mut Vec<String>) -> Result<Prepared<D>> {
    let mut spec: ProblemSpec<D> = file.build()?;
    if file.k_max.is_none() {
        spec.k_max = default_k_max(cfg.max_order());
    }
    let g: InitialData<D> = file.initial_data()?;
    let window = region::<D>(&cfg.window.lo, &cfg.window.hi)?;
    logged(stages, "validate", || require(&validate_spec(cfg, &spec)?, "problem"))?;
    let table = logged(stages, "effective_table", || {
        let grid = TorusGrid::new(cfg.cell.n)?;
        let p_box = region::<D>(&cfg.table.p_lo, &cfg.table.p_hi)?;
        effective_table(&spec, grid, cfg.cell.options, &p_box, cfg.table.dp)
    })?;
    let prepared = Prepared {
        spec,
        g,
        table: Arc::new(table),
        window,
    };
    logged(stages, "validate_initial_data", || {
        let region = prepared.slow_region(cfg, cfg.max_order());
        let t = &prepared.table;
        let report = validate_initial_data(
            &prepared.g,
            |p| if t.contains(p) { t.bbar(p).ok() } else { None },
            &region,
            cfg.validation_samples,
            cfg.zeta_min,
            prepared.spec.k_max,
            prepared.spec.bounds.l_data,
        )?;
        require(&report, "initial data")
    })?;
    Ok(prepared)
}

/// Effective solution and corrector hierarchy up to `order`.
pub fn hierarchy<const D: usize>(
    cfg: &StudyConfig,
    prepared: &Prepared<D>,
    order: usize,
    stages: &mut Vec<String>,
) -> Result<CorrectorHierarchy<D>> {
    if order > max_order(D) {
        return Err(Error::InvalidInput(format!("order {order} above the supported {} in {D}D", max_order(D))));
    }
    let region = prepared.slow_region(cfg, order);
    let effective = logged(stages, "solve_effective", || {
        let options = FanOptions {
            zeta_min: cfg.zeta_min,
            ..FanOptions::default()
        };
        solve_effective(&prepared.g, prepared.table.clone(), &region, cfg.horizon, options)
    })?;
    logged(stages, "build_hierarchy", || {
        let slow = SlowGrid::new(&region, cfg.slow.hx, cfg.horizon, cfg.slow.ht.unwrap_or(cfg.slow.hx / 2.0))?;
        build_hierarchy(
            Arc::new(effective),
            &prepared.spec,
            *prepared.table.grid(),
            cfg.cell.options,
            slow,
            order,
        )
    })
}

/// Fine grid for one ε, with the step set from the prepared initial slice.
pub fn reference_for(
    cfg: &StudyConfig,
    prepared: &Prepared<1>,
    h: &CorrectorHierarchy<1>,
    eps: f64,
    extra: f64,
) -> Result<ReferenceSolution> {
    let spec = &prepared.spec;
    let b = &spec.bounds;
    let margin = insulation_margin(cfg.horizon, max_bbar(&prepared.table), eps, b.lambda_upper, prepared.g.core_width());
    let domain = prepared.window.inflate(margin + extra);
    let far = FarField::from_data(spec, *prepared.table.grid(), cfg.cell.options, &prepared.g)?;
    let init = prepared_initial(h, eps);
    let probe = FineGrid1D::new(&domain, eps, &cfg.reference, 0.0, b.lambda, b.lambda_upper)?;
    let u0: Vec<f64> = (0..probe.len).map(|i| init(probe.x(i))).collect();
    let speed = 1.25 * slice_speed(spec, &probe, &u0);
    let grid = FineGrid1D::new(&domain, eps, &cfg.reference, speed, b.lambda, b.lambda_upper)?;
    let times: Vec<f64> = (1..=4).map(|k| k as f64 * cfg.horizon / 4.0).collect();
    solve_reference(spec, &far, &init, grid, &times)
}

/// Largest change of the windowed solution between the standard domain and
/// one twice as wide.
pub fn insulation_defect(
    cfg: &StudyConfig,
    prepared: &Prepared<1>,
    h: &CorrectorHierarchy<1>,
    eps: f64,
) -> Result<f64> {
    let base = reference_for(cfg, prepared, h, eps, 0.0)?;
    let extra = base.grid.domain().width(0) / 2.0;
    let wide = reference_for(cfg, prepared, h, eps, extra)?;
    let shift = (base.grid.i0 - wide.grid.i0) as usize;
    let mut d = 0.0f64;
    for (a, b) in base.snapshots.iter().zip(&wide.snapshots) {
        for i in 0..base.grid.len {
            if prepared.window.contains(&Vect::<1>::new(base.grid.x(i))) {
                d = d.max((a[i] - b[i + shift]).abs());
            }
        }
    }
    Ok(d)
}

fn residual_sweep<const D: usize>(
    cfg: &StudyConfig,
    prepared: &Prepared<D>,
    h: &CorrectorHierarchy<D>,
    report: &mut StudyReport,
) -> Result<()> {
    let out: Vec<Result<(Vec<f64>, f64)>> = cfg
        .eps
        .par_iter()
        .map(|&eps| {
            let start = Instant::now();
            let v = cfg
                .orders
                .iter()
                .map(|&m| Ok(h.residual_field(eps, m, &prepared.window)?.max))
                .collect::<Result<Vec<_>>>()?;
            Ok((v, start.elapsed().as_secs_f64()))
        })
        .collect();
    for (&eps, res) in cfg.eps.iter().zip(out) {
        report.stages.push(format!("residual eps={}", format_float(eps)));
        let (values, secs) = res.map_err(|e| Error::stage(format!("residual eps={}", format_float(eps)), e))?;
        for (&m, v) in cfg.orders.iter().zip(values) {
            report.row_mut(eps, m).max_residual = Some(v);
        }
        report.timings.push((eps, secs));
    }
    Ok(())
}

fn reference_sweep(
    cfg: &StudyConfig,
    prepared: &Prepared<1>,
    h: &CorrectorHierarchy<1>,
    report: &mut StudyReport,
) -> Result<()> {
    let out: Vec<Result<(Vec<f64>, f64)>> = cfg
        .eps
        .par_iter()
        .map(|&eps| {
            let start = Instant::now();
            let r = reference_for(cfg, prepared, h, eps, 0.0)?;
            let v = cfg
                .orders
                .iter()
                .map(|&m| Ok(compare(&r, h, m, &prepared.window)?.sup_error))
                .collect::<Result<Vec<_>>>()?;
            Ok((v, start.elapsed().as_secs_f64()))
        })
        .collect();
    for (&eps, res) in cfg.eps.iter().zip(out) {
        report.stages.push(format!("reference eps={}", format_float(eps)));
        let (values, secs) = res.map_err(|e| Error::stage(format!("reference eps={}", format_float(eps)), e))?;
        for (&m, v) in cfg.orders.iter().zip(values) {
            report.row_mut(eps, m).sup_error = Some(v);
        }
        match report.timings.iter_mut().find(|t| t.0 == eps) {
            Some(t) => t.1 += secs,
            None => report.timings.push((eps, secs)),
        }
    }
    if let Some(&eps) = cfg.eps.first() {
        report.insulation = Some(logged(&mut report.stages, "insulation", || {
            insulation_defect(cfg, prepared, h, eps)
        })?);
    }
    Ok(())
}

fn run_dim<const D: usize>(
    cfg: &StudyConfig,
    file: &ProblemFile,
    report: &mut StudyReport,
    end_to_end: impl FnOnce(&StudyConfig, &Prepared<D>, &CorrectorHierarchy<D>, &mut StudyReport) -> Result<()>,
) -> Result<()> {
    let prepared = prepare::<D>(cfg, file, &mut report.stages)?;
    report.affine = prepared.g.is_affine();
    let h = hierarchy(cfg, &prepared, cfg.max_order(), &mut report.stages)?;
    if cfg.mode.residual() {
        residual_sweep(cfg, &prepared, &h, report)?;
    }
    if cfg.mode.end_to_end() {
        end_to_end(cfg, &prepared, &h, report)?;
    }
    Ok(())
}

/// Runs the whole pipeline. On failure the partial report is written to the
/// configured output directory (if any) before the error is returned.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    let mut report = StudyReport::new(cfg);
    let result = (|| {
        cfg.check()?;
        let file = cfg.problem_file()?;
        match file.dim {
            1 => run_dim::<1>(cfg, &file, &mut report, reference_sweep)?,
            2 => run_dim::<2>(cfg, &file, &mut report, |_, _, _, _| {
                Err(Error::InvalidInput("end-to-end comparison is 1D only".into()))
            })?,
            d => return Err(Error::UnsupportedDimension(d)),
        }
        report.fit()
    })();
    match result {
        Ok(()) => {
            if let Some(dir) = &cfg.output_dir {
                emit_report(&report, dir)?;
            }
            Ok(report)
        }
        Err(e) => {
            report.failure = Some(e.to_string());
            if let Some(dir) = &cfg.output_dir {
                emit_report(&report, dir)?;
            }
            Err(e)
        }
    }
}

/// Cell solution at one gradient: `(H̄(p), w at the torus nodes)`.
pub fn cell_at<const D: usize>(cfg: &StudyConfig, file: &ProblemFile, p: &[f64]) -> Result<(f64, Vec<Vect<D>>, Vec<f64>)> {
    let spec: ProblemSpec<D> = file.build()?;
    let grid = TorusGrid::new(cfg.cell.n)?;
    let solver = CellSolver::new(&spec, grid, cfg.cell.options)?;
    let sol = solver.solve(&vect_from_slice(p)?, None)?;
    Ok((sol.gamma, grid.nodes(), sol.w.values.clone()))
}
