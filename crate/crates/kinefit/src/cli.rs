//! The `kinefit` command line. Data and written paths go to stdout,
//! diagnostics to stderr. Exit codes: 0 success, 2 data error, 3 numerical
//! abort, 64 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use kinefit_core::fitting::FitConfig;
use kinefit_core::gait::NormativeBank;
use kinefit_core::stats::{icc, mann_whitney_u, pearson, spearman, srm, srm_jackknife_ci, t_test, RepeatedMeasures};
use serde::Serialize;

use crate::config::load_config;
use crate::error::{exit, Error, Result};
use crate::executor::Threaded;
use crate::export::export_csv;
use crate::formats::{load_bank, load_events, save_bank};
use crate::manifest::SessionManifest;
use crate::pipeline::{fit_manifest, load_reference, report_cycles, report_mjae, report_rte, trial_metrics, Model};
use crate::report::FitReport;
use crate::script::{synthesize, SynthScript};

#[derive(Debug, Parser)]
#[command(name = "kinefit", version, about = "Monocular skeleton fitting, gait metrics and clinimetric statistics")]
pub struct Cli {
    /// Skeleton model definition (JSON); the bundled model when omitted.
    #[arg(long, global = true, env = "KINEFIT_MODEL")]
    pub model: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a session and write `report.json` and `checkpoint.kfck`.
    Fit {
        manifest: PathBuf,
        /// Fit configuration (TOML); defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; one per core when omitted.
        #[arg(long)]
        threads: Option<usize>,
        /// Suppress progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Render a synthesis script into a session directory.
    Synth {
        script: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normative bank construction and scoring.
    #[command(subcommand)]
    Gdi(GdiCommand),
    /// Cadence, double support and residuals of each trial.
    Metrics {
        report: PathBuf,
        /// Events applied to every trial instead of the report's own.
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Accuracy and clinimetric statistics.
    #[command(subcommand)]
    Stats(StatsCommand),
    /// Write tidy CSV files of a report.
    Export {
        report: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum GdiCommand {
    /// Fit a normative bank to the gait cycles of fit reports.
    BuildBank {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-step and session GDI of a report.
    Score {
        report: PathBuf,
        #[arg(long)]
        bank: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum StatsCommand {
    /// Median joint-angle error per joint group against a reference
    /// (a manifest with truth files, or another report).
    Mjae {
        report: PathBuf,
        #[arg(long)]
        reference: PathBuf,
    },
    /// Root translation error in centimeters against a reference.
    Rte {
        report: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        /// Remove the best rigid transform first.
        #[arg(long)]
        aligned: bool,
    },
    /// ICC(2,1) and ICC(2,k) from a CSV with `subject,value` columns.
    Icc {
        table: PathBuf,
        /// Seed for trimming subjects to a common repeat count.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Standardized response mean from a CSV with `pre,post` columns.
    Srm {
        table: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Pearson and Spearman correlation of two CSV columns.
    Correlate {
        table: PathBuf,
        #[arg(long)]
        x: String,
        #[arg(long)]
        y: String,
    },
    /// Two-sided Mann-Whitney U test from a CSV with `group,value` columns.
    MannWhitney { table: PathBuf },
    /// Two-sample t test from a CSV with `group,value` columns; paired
    /// tests match rows by order within each group.
    Ttest {
        table: PathBuf,
        #[arg(long)]
        paired: bool,
    },
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    return exit::OK;
                }
                _ => exit::USAGE,
            };
            let _ = write!(err, "{}", e.render());
            return code;
        }
    };
    match execute(cli, out, err) {
        Ok(()) => exit::OK,
        Err(e) => {
            let _ = writeln!(err, "kinefit: error: {e}");
            e.exit_code()
        }
    }
}

fn print_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    writeln!(out, "{text}").map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn print_line(out: &mut dyn Write, line: impl std::fmt::Display) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io(Path::new("<stdout>"), e))
}

pub fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let model = Model::load(cli.model.as_deref())?;
    let def = &model.def;
    match cli.command {
        Command::Fit { manifest, config, out: dir, threads, quiet } => {
            let manifest = SessionManifest::load(&manifest)?;
            let config = match config {
                Some(p) => load_config(&p)?,
                None => FitConfig::default(),
            };
            let executor = threads.map(Threaded::new).unwrap_or_else(Threaded::available);
            let every = (config.iterations / 20).max(1);
            let (report, checkpoint) = fit_manifest(&model, &manifest, &config, &executor, |i, r| {
                if !quiet && (i % every == 0 || i + 1 == config.iterations) {
                    let _ = writeln!(err, "iteration {:>6}/{}  loss {:.6}", i + 1, config.iterations, r.total);
                }
            })?;
            let report_path = dir.join("report.json");
            report.save(&report_path)?;
            checkpoint.save(&dir.join("checkpoint.kfck"))?;
            print_line(out, report_path.display())
        }
        Command::Synth { script, out: dir } => {
            let script = SynthScript::load(&script)?;
            let path = synthesize(def, &script, &dir, &Threaded::available())?;
            print_line(out, path.display())
        }
        Command::Gdi(GdiCommand::BuildBank { reports, out: path }) => {
            let mut rows = Vec::new();
            for p in &reports {
                let (cycles, warnings) = report_cycles(def, &FitReport::load(p)?)?;
                for w in warnings {
                    let _ = writeln!(err, "warning: {}: {w}", p.display());
                }
                rows.extend(cycles.into_iter().map(|c| c.values));
            }
            let bank = NormativeBank::fit(&rows)?;
            save_bank(&path, &bank)?;
            let _ = writeln!(err, "{} cycles, {} components", bank.cycles, bank.k());
            print_line(out, path.display())
        }
        Command::Gdi(GdiCommand::Score { report, bank }) => {
            let bank = load_bank(&bank)?;
            let report = FitReport::load(&report)?;
            let (cycles, warnings) = report_cycles(def, &report)?;
            for w in warnings {
                let _ = writeln!(err, "warning: {w}");
            }
            #[derive(Serialize)]
            struct Step {
                side: kinefit_core::gait::Foot,
                start: f64,
                end: f64,
                gdi: f64,
            }
            #[derive(Serialize)]
            struct Scores {
                session: String,
                session_gdi: f64,
                steps: Vec<Step>,
            }
            let values: Vec<Vec<f64>> = cycles.iter().map(|c| c.values.clone()).collect();
            let steps = cycles.iter().map(|c| Ok(Step { side: c.side, start: c.start, end: c.end, gdi: bank.gdi(&c.values)? })).collect::<Result<Vec<_>>>()?;
            print_json(out, &Scores { session: report.session.clone(), session_gdi: bank.session_gdi(&values)?, steps })
        }
        Command::Metrics { report, events } => {
            let report = FitReport::load(&report)?;
            let supplied = events.as_deref().map(load_events).transpose()?;
            let mut rows = Vec::new();
            for t in &report.trials {
                let (m, warning) = trial_metrics(def, &report, t, supplied.as_ref())?;
                if let Some(w) = warning {
                    let _ = writeln!(err, "warning: {w}");
                }
                rows.push(m);
            }
            print_json(out, &rows)
        }
        Command::Stats(cmd) => stats(def, cmd, out),
        Command::Export { report, csv } => {
            let report = FitReport::load(&report)?;
            for p in export_csv(def, &report, &csv)? {
                print_line(out, p.display())?;
            }
            Ok(())
        }
    }
}

/// A numeric CSV column by header name.
fn column(path: &Path, name: &str) -> Result<Vec<f64>> {
    let (headers, rows) = read_csv(path)?;
    let j = headers.iter().position(|h| h == name).ok_or_else(|| Error::format(path, format!("no column '{name}'")))?;
    rows.iter().enumerate().map(|(i, r)| parse_cell(path, i + 2, name, &r[j])).collect()
}

fn parse_cell(path: &Path, record: usize, field: &str, text: &str) -> Result<f64> {
    let v: f64 = text.trim().parse().map_err(|_| Error::record(path, record, field, format!("'{text}' is not a number")))?;
    if !v.is_finite() {
        return Err(Error::record(path, record, field, "not finite"));
    }
    Ok(v)
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e))?;
    let headers = r.headers().map_err(|e| Error::format(path, e))?.iter().map(|h| h.trim().to_string()).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(|e| Error::format(path, e))?.iter().map(String::from).collect());
    }
    Ok((headers, rows))
}

/// Values of a `key,value` table grouped by key, keys in first-seen order.
fn grouped(path: &Path, key: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let (headers, rows) = read_csv(path)?;
    let find = |n: &str| headers.iter().position(|h| h == n).ok_or_else(|| Error::format(path, format!("no column '{n}'")));
    let (k, v) = (find(key)?, find("value")?);
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let x = parse_cell(path, i + 2, "value", &r[v])?;
        match groups.iter_mut().find(|(g, _)| *g == r[k]) {
            Some((_, vals)) => vals.push(x),
            None => groups.push((r[k].clone(), vec![x])),
        }
    }
    Ok(groups)
}

fn two_groups(path: &Path) -> Result<[(String, Vec<f64>); 2]> {
    let g = grouped(path, "group")?;
    let n = g.len();
    g.try_into().map_err(|_| Error::format(path, format!("expected exactly 2 groups, found {n}")))
}

fn stats(def: &kinefit_core::skeleton::SkeletonDefinition, cmd: StatsCommand, out: &mut dyn Write) -> Result<()> {
    match cmd {
        StatsCommand::Mjae { report, reference } => {
            let report = FitReport::load(&report)?;
            let rows = report_mjae(def, &report, &load_reference(def, &reference)?)?;
            #[derive(Serialize)]
            struct Out {
                unit: &'static str,
                trials: Vec<TrialOut>,
            }
            #[derive(Serialize)]
            struct TrialOut {
                id: String,
                groups: BTreeMap<String, f64>,
                mjae: f64,
            }
            let trials = rows.into_iter().map(|r| TrialOut { id: r.id, groups: r.groups.into_iter().collect(), mjae: r.aggregate }).collect();
            print_json(out, &Out { unit: "deg", trials })
        }
        StatsCommand::Rte { report, reference, aligned } => {
            let report = FitReport::load(&report)?;
            let rows: BTreeMap<String, f64> = report_rte(def, &report, &load_reference(def, &reference)?, aligned)?.into_iter().collect();
            print_json(out, &serde_json::json!({ "unit": "cm", "aligned": aligned, "trials": rows }))
        }
        StatsCommand::Icc { table, seed } => {
            let subjects = grouped(&table, "subject")?.into_iter().map(|(_, v)| v).collect();
            let t = RepeatedMeasures { subjects }.balanced(seed)?;
            let r = icc(&t)?;
            print_json(out, &serde_json::json!({ "subjects": t.len(), "repeats": t[0].len(), "icc2": r.single, "icc2k": r.average }))
        }
        StatsCommand::Srm { table, level } => {
            let (pre, post) = (column(&table, "pre")?, column(&table, "post")?);
            let diffs: Vec<f64> = post.iter().zip(&pre).map(|(b, a)| b - a).collect();
            let ci = srm_jackknife_ci(&diffs, level)?;
            print_json(out, &serde_json::json!({ "n": diffs.len(), "srm": srm(&diffs)?, "jackknife": ci, "level": level }))
        }
        StatsCommand::Correlate { table, x, y } => {
            let (a, b) = (column(&table, &x)?, column(&table, &y)?);
            print_json(out, &serde_json::json!({ "n": a.len(), "pearson": pearson(&a, &b)?, "spearman": spearman(&a, &b)? }))
        }
        StatsCommand::MannWhitney { table } => {
            let [(ga, a), (gb, b)] = two_groups(&table)?;
            let r = mann_whitney_u(&a, &b)?;
            print_json(out, &serde_json::json!({ "groups": [ga, gb], "u": r.statistic, "p": r.p }))
        }
        StatsCommand::Ttest { table, paired } => {
            let [(ga, a), (gb, b)] = two_groups(&table)?;
            let r = t_test(&a, &b, paired)?;
            print_json(out, &serde_json::json!({ "groups": [ga, gb], "paired": paired, "t": r.statistic, "p": r.p }))
        }
    }
}
