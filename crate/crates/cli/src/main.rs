//! `hjh`: run the homogenization workbench stages from a study config.
//!
//! Exit status: 0 when every check passes, 2 when a check fails, 1 on error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use hjh_core::error::Error;
use hjh_core::geometry::Vect;
use hjh_core::harness::{
    cell_at, hierarchy, prepare, reference_for, run_study, validate_spec, StudyConfig, StudyMode,
};
use hjh_core::io::{format_float, write_text};
use hjh_core::problem::{ProblemFile, ProblemSpec};
use hjh_core::table::EffectiveTable;

#[derive(Parser)]
#[command(name = "hjh", version, about = "Periodic homogenization of viscous Hamilton-Jacobi equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Study config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the structure conditions on the problem and the initial data.
    Validate,
    /// Solve one cell problem.
    Cell {
        /// Gradient, comma separated (default: centre of the table box).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        p: Vec<f64>,
    },
    /// Tabulate the effective Hamiltonian and check its properties.
    Effective,
    /// Build the corrector hierarchy and archive it.
    Correctors,
    /// Residual rates only.
    Residual,
    /// Fine-grid reference snapshots for every eps (1D).
    Reference,
    /// End-to-end errors against the reference (1D).
    Compare,
    /// The study as configured.
    Study,
}

const TABLE_CONVEXITY_TOL: f64 = 1e-8;
const TABLE_FD_TOL: f64 = 1e-5;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let path = cli.config.context("--config is required")?;
    let mut cfg = StudyConfig::load(&path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(out) = cli.out {
        cfg.output_dir = Some(out);
    }
    let out = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    cfg.check()?;
    let file = cfg.problem_file()?;
    match cli.command {
        Command::Study => study(cfg, &out),
        Command::Residual => {
            cfg.mode = StudyMode::Residual;
            study(cfg, &out)
        }
        Command::Compare => {
            cfg.mode = StudyMode::EndToEnd;
            study(cfg, &out)
        }
        Command::Validate => match file.dim {
            1 => validate::<1>(&cfg, &file, &out),
            2 => validate::<2>(&cfg, &file, &out),
            d => Err(Error::UnsupportedDimension(d).into()),
        },
        Command::Cell { p } => match file.dim {
            1 => cell::<1>(&cfg, &file, p, &out),
            2 => cell::<2>(&cfg, &file, p, &out),
            d => Err(Error::UnsupportedDimension(d).into()),
        },
        Command::Effective => match file.dim {
            1 => effective::<1>(&cfg, &file, &out),
            2 => effective::<2>(&cfg, &file, &out),
            d => Err(Error::UnsupportedDimension(d).into()),
        },
        Command::Correctors => match file.dim {
            1 => correctors::<1>(&cfg, &file, &out),
            2 => correctors::<2>(&cfg, &file, &out),
            d => Err(Error::UnsupportedDimension(d).into()),
        },
        Command::Reference => reference(&cfg, &file, &out),
    }
}

fn study(cfg: StudyConfig, out: &Path) -> Result<bool> {
    let mut cfg = cfg;
    cfg.output_dir = Some(out.to_path_buf());
    let report = run_study(&cfg)?;
    for c in report.checks() {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("report written to {}", out.display());
    Ok(report.passed())
}

fn validate<const D: usize>(cfg: &StudyConfig, file: &ProblemFile, out: &Path) -> Result<bool> {
    let spec: ProblemSpec<D> = file.build()?;
    let report = validate_spec(cfg, &spec)?;
    write_text(&out.join("validation.csv"), &report.to_csv())?;
    for c in &report.checks {
        println!("{} {} (worst margin {:.3e})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.worst_margin);
    }
    if !report.passed() {
        return Ok(false);
    }
    let mut stages = Vec::new();
    match prepare::<D>(cfg, file, &mut stages) {
        Ok(_) => {
            println!("PASS initial data");
            Ok(true)
        }
        Err(Error::Stage { stage, inner }) if matches!(*inner, Error::Inadmissible(_) | Error::TableRange(_)) => {
            println!("FAIL {stage}: {inner}");
            Ok(false)
        }
        Err(e) => Err(e.into()),
    }
}

fn cell<const D: usize>(cfg: &StudyConfig, file: &ProblemFile, p: Vec<f64>, out: &Path) -> Result<bool> {
    let p = if p.is_empty() {
        cfg.table.p_lo.iter().zip(&cfg.table.p_hi).map(|(a, b)| 0.5 * (a + b)).collect()
    } else {
        p
    };
    if p.len() != D {
        bail!("--p needs {D} components");
    }
    let (hbar, nodes, w) = cell_at::<D>(cfg, file, &p)?;
    let mut csv = String::new();
    for a in 0..D {
        let _ = write!(csv, "y{a},");
    }
    csv.push_str("w\n");
    for (y, v) in nodes.iter().zip(&w) {
        for a in 0..D {
            let _ = write!(csv, "{},", format_float(y[a]));
        }
        let _ = writeln!(csv, "{}", format_float(*v));
    }
    write_text(&out.join("cell.csv"), &csv)?;
    println!("H̄({p:?}) = {hbar:.12}");
    Ok(true)
}

fn table_csv<const D: usize>(table: &EffectiveTable<D>) -> String {
    let mut csv = String::new();
    for a in 0..D {
        let _ = write!(csv, "p{a},");
    }
    csv.push_str("hbar");
    for a in 0..D {
        let _ = write!(csv, ",bbar{a}");
    }
    csv.push('\n');
    for i in 0..table.len() {
        let p = table.p_node(i);
        for a in 0..D {
            let _ = write!(csv, "{},", format_float(p[a]));
        }
        let _ = write!(csv, "{}", format_float(table.hbar_nodes()[i]));
        for a in 0..D {
            let _ = write!(csv, ",{}", format_float(table.bbar_nodes()[i][a]));
        }
        csv.push('\n');
    }
    csv
}

fn effective<const D: usize>(cfg: &StudyConfig, file: &ProblemFile, out: &Path) -> Result<bool> {
    let mut stages = Vec::new();
    let prepared = prepare::<D>(cfg, file, &mut stages)?;
    let table = &prepared.table;
    write_text(&out.join("table.json"), &table.to_json()?)?;
    write_text(&out.join("table.csv"), &table_csv(table))?;
    let r = table.check_properties(&prepared.spec.bounds);
    let checks = [
        ("bounds", r.worst_bound_margin >= 0.0, format!("worst margin {:.3e}", r.worst_bound_margin)),
        (
            "midpoint convexity",
            r.worst_convexity_gap >= -TABLE_CONVEXITY_TOL,
            format!("worst gap {:.3e}", r.worst_convexity_gap),
        ),
        (
            "drift vs finite differences",
            r.worst_fd_relative <= TABLE_FD_TOL,
            format!("worst relative {:.3e} over {} samples", r.worst_fd_relative, r.fd_samples),
        ),
    ];
    for (name, ok, detail) in &checks {
        println!("{} {name}: {detail}", if *ok { "PASS" } else { "FAIL" });
    }
    Ok(checks.iter().all(|c| c.1))
}

fn correctors<const D: usize>(cfg: &StudyConfig, file: &ProblemFile, out: &Path) -> Result<bool> {
    let mut stages = Vec::new();
    let prepared = prepare::<D>(cfg, file, &mut stages)?;
    let order = cfg.orders.iter().copied().max().unwrap_or(1);
    let h = hierarchy(cfg, &prepared, order, &mut stages)?;
    write_text(&out.join("hierarchy.json"), &serde_json::to_string(&h.to_file())?)?;
    let (fast, initial) = h.normalization_defect();
    println!(
        "hierarchy of order {order} on {} slow nodes; normalization defects {fast:.1e} (fast), {initial:.1e} (initial)",
        h.slow().len()
    );
    Ok(true)
}

fn reference(cfg: &StudyConfig, file: &ProblemFile, out: &Path) -> Result<bool> {
    if file.dim != 1 {
        bail!("reference solving is 1D only");
    }
    let mut stages = Vec::new();
    let prepared = prepare::<1>(cfg, file, &mut stages)?;
    let order = cfg.orders.iter().copied().max().unwrap_or(1);
    let h = hierarchy(cfg, &prepared, order, &mut stages)?;
    for &eps in &cfg.eps {
        let r = reference_for(cfg, &prepared, &h, eps, 0.0)?;
        let mut csv = String::from("x,t,u\n");
        for (slice, t) in r.snapshots.iter().zip(&r.times) {
            for (i, u) in slice.iter().enumerate() {
                let x = r.grid.x(i);
                if prepared.window.contains(&Vect::<1>::new(x)) {
                    let _ = writeln!(csv, "{},{},{}", format_float(x), format_float(*t), format_float(*u));
                }
            }
        }
        let name = format!("reference-eps-{}.csv", format_float(eps));
        write_text(&out.join(&name), &csv)?;
        println!(
            "eps {eps}: {} nodes, {} steps, max CFL {:.3} -> {name}",
            r.grid.len, r.diagnostics.steps, r.diagnostics.max_cfl
        );
    }
    Ok(true)
}
