//! Subcommand implementations. Each returns the number of failed cells;
//! an `Err` means the run as a whole could not proceed.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use lagsid::bspline::assemble_matrices;
use lagsid::dynamics::{
    basin_of_attraction, generate_dataset, regenerate_clean, with_suffix, Dataset, DatasetMeta,
    Mode, SystemId,
};
use lagsid::identify::{fit, FitConfig, FitReport};
use lagsid::library::{CandidateLibrary, LibraryDescriptor};
use lagsid::metrics::{evaluate, EvalResult};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Cell, ExperimentConfig};

fn pool(cfg: &ExperimentConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .context("starting worker pool")
}

fn data_stem(cfg: &ExperimentConfig, cell: &Cell) -> PathBuf {
    cfg.out_dir("data").join(cell.name())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn remove_if_present(path: &Path) -> Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => {
            Err(e).with_context(|| format!("removing {}", path.display()))
        }
        _ => Ok(()),
    }
}

fn generate_cell(cfg: &ExperimentConfig, cell: &Cell) -> Result<Dataset> {
    let spec = cfg.system_spec(cell.system)?;
    let generated = generate_dataset(&spec, &cfg.sampling, cell.noise, cell.missing, cell.seed)?;
    generated.dataset.write(&data_stem(cfg, cell))?;
    Ok(generated.dataset)
}

/// Reads the cell's dataset, generating it first if absent. An existing
/// file made under different settings is an error rather than overwritten.
fn load_or_generate(cfg: &ExperimentConfig, cell: &Cell) -> Result<Dataset> {
    let csv = with_suffix(&data_stem(cfg, cell), "csv");
    if !csv.exists() {
        return generate_cell(cfg, cell);
    }
    let ds = Dataset::read(&csv)?;
    let spec = cfg.system_spec(cell.system)?;
    let m = &ds.meta;
    let same = m.system == cell.system
        && m.params == spec.params
        && m.mode == spec.mode
        && m.noise_level == cell.noise
        && m.missing_frac == cell.missing
        && m.seed == cell.seed
        && m.sampling == cfg.sampling
        && m.terms == spec.library.names()
        && m.true_coeffs == spec.true_coeffs;
    if !same {
        bail!(
            "{} was generated with different settings; rerun `generate`",
            csv.display()
        );
    }
    Ok(ds)
}

fn dataset_library(meta: &DatasetMeta) -> Result<CandidateLibrary> {
    Ok(CandidateLibrary::try_from(LibraryDescriptor {
        dof: meta.system.dof(),
        terms: meta.terms.clone(),
    })?)
}

fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn read_report(path: &Path) -> Result<FitReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    FitReport::from_json(&text).with_context(|| format!("parsing {}", path.display()))
}

fn report_text(cell: &str, report: &FitReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "cell: {cell}");
    let _ = writeln!(s, "{}", report.expression);
    let _ = writeln!(
        s,
        "surviving terms: {}",
        report.surviving_terms().join(", ")
    );
    let _ = writeln!(
        s,
        "stop: {} after {} iterations",
        report.stop_reason, report.iterations
    );
    s
}

fn report_failures(what: &str, failures: &[(String, String)]) {
    for (name, msg) in failures {
        eprintln!("{what} {name} failed: {msg}");
    }
}

pub fn generate(cfg: &ExperimentConfig) -> Result<usize> {
    let cells = cfg.cells(cfg.missing);
    let results: Vec<(String, Result<Dataset>)> = pool(cfg)?.install(|| {
        cells
            .par_iter()
            .map(|c| (c.name(), generate_cell(cfg, c)))
            .collect()
    });
    let mut failures = Vec::new();
    for (name, r) in results {
        match r {
            Ok(ds) => println!("{name}: {} rows", ds.t_meas.len()),
            Err(e) => failures.push((name, format!("{e:#}"))),
        }
    }
    report_failures("generate", &failures);
    Ok(failures.len())
}

struct FitOutcome {
    name: String,
    result: Result<FitReport>,
}

fn identify_cell(
    cfg: &ExperimentConfig,
    fit_cfg: &FitConfig,
    cell: &Cell,
    dir: &Path,
    suffix: &str,
) -> FitOutcome {
    let name = format!("{}{suffix}", cell.name());
    let result = (|| {
        let ds = load_or_generate(cfg, cell)?;
        let lib = dataset_library(&ds.meta)?;
        let report = fit(&ds, &lib, ds.meta.mode, fit_cfg)?;
        Ok(report)
    })();
    let json = dir.join(format!("{name}.json"));
    let txt = dir.join(format!("{name}.txt"));
    let err = dir.join(format!("{name}.error"));
    let written = match &result {
        Ok(report) => report
            .to_json()
            .map_err(anyhow::Error::from)
            .and_then(|j| write_file(&json, &(j + "\n")))
            .and_then(|_| write_file(&txt, &report_text(&name, report)))
            .and_then(|_| remove_if_present(&err)),
        Err(e) => remove_if_present(&json)
            .and_then(|_| remove_if_present(&txt))
            .and_then(|_| write_file(&err, &format!("{e:#}\n"))),
    };
    let result = match (result, written) {
        (Ok(r), Ok(())) => Ok(r),
        (Err(e), _) | (Ok(_), Err(e)) => Err(e),
    };
    FitOutcome { name, result }
}

fn write_timings(path: &Path, outcomes: &[FitOutcome]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record([
        "cell",
        "status",
        "iterations",
        "wall_time_s",
        "stop_reason",
        "error",
    ])?;
    for o in outcomes {
        match &o.result {
            Ok(r) => w.write_record([
                o.name.as_str(),
                "ok",
                &r.iterations.to_string(),
                &format!("{:.3}", r.wall_time_s),
                &r.stop_reason,
                "",
            ])?,
            Err(e) => w.write_record([o.name.as_str(), "failed", "", "", "", &format!("{e:#}")])?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn identify(cfg: &ExperimentConfig) -> Result<usize> {
    let dir = cfg.out_dir("reports");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let cells = cfg.cells(cfg.missing);
    let outcomes: Vec<FitOutcome> = pool(cfg)?.install(|| {
        cells
            .par_iter()
            .map(|c| identify_cell(cfg, &cfg.fit, c, &dir, ""))
            .collect()
    });
    write_timings(&cfg.out.join("timings.csv"), &outcomes)?;
    let mut failures = Vec::new();
    for o in &outcomes {
        match &o.result {
            Ok(r) => println!("{}: {}", o.name, r.expression),
            Err(e) => failures.push((o.name.clone(), format!("{e:#}"))),
        }
    }
    report_failures("identify", &failures);
    Ok(failures.len())
}

/// Scores a report against the truth recorded in the dataset sidecar.
fn score(report: &FitReport, meta: &DatasetMeta) -> Result<EvalResult> {
    if report.terms != meta.terms {
        bail!("report terms differ from the dataset library");
    }
    let align = meta.mode == Mode::Active;
    Ok(evaluate(
        &report.coefficients.values,
        &meta.true_coeffs,
        &report.terms,
        align,
    )?)
}

#[derive(Debug, Clone, Default)]
struct Mean {
    l2: f64,
    l2_raw: f64,
    precision: f64,
    recall: f64,
    ok: usize,
    total: usize,
}

impl Mean {
    fn add(&mut self, r: Option<&EvalResult>) {
        self.total += 1;
        if let Some(r) = r {
            self.ok += 1;
            self.l2 += r.l2_rel;
            self.l2_raw += r.l2_raw;
            self.precision += r.precision;
            self.recall += r.recall;
        }
    }

    fn finish(&self) -> Option<[f64; 4]> {
        let n = self.ok as f64;
        (self.ok > 0).then(|| {
            [
                self.l2 / n,
                self.l2_raw / n,
                self.precision / n,
                self.recall / n,
            ]
        })
    }
}

const LEDGER_HEADER: [&str; 10] = [
    "system",
    "noise",
    "missing",
    "seed",
    "status",
    "l2_x100",
    "l2_raw_x100",
    "precision_pct",
    "recall_pct",
    "surviving_terms",
];

fn metric_fields(v: Option<[f64; 4]>) -> [String; 4] {
    match v {
        Some([l2, raw, p, r]) => [
            (l2 * 100.0).to_string(),
            (raw * 100.0).to_string(),
            (p * 100.0).to_string(),
            (r * 100.0).to_string(),
        ],
        None => Default::default(),
    }
}

fn table_entry(v: Option<[f64; 4]>) -> String {
    match v {
        Some([l2, _, p, r]) => format!("{:.2} / {:.0} / {:.0}", l2 * 100.0, p * 100.0, r * 100.0),
        None => "n/a".into(),
    }
}

/// Groups cells of one (system, noise) pair.
fn groups(cells: &[Cell]) -> Vec<(SystemId, f64, Vec<usize>)> {
    let mut out: Vec<(SystemId, f64, Vec<usize>)> = Vec::new();
    for (k, c) in cells.iter().enumerate() {
        match out
            .iter_mut()
            .find(|(s, n, _)| *s == c.system && *n == c.noise)
        {
            Some(g) => g.2.push(k),
            None => out.push((c.system, c.noise, vec![k])),
        }
    }
    out
}

pub fn evaluate_cmd(cfg: &ExperimentConfig) -> Result<usize> {
    let cells = cfg.cells(cfg.missing);
    let reports = cfg.out_dir("reports");
    let scored: Vec<(Result<EvalResult>, String)> = cells
        .iter()
        .map(|c| {
            let name = c.name();
            let r = read_report(&reports.join(format!("{name}.json"))).and_then(|rep| {
                let meta = read_meta(&with_suffix(&data_stem(cfg, c), "json"))?;
                let surviving = rep.surviving_terms().join(" + ");
                score(&rep, &meta).map(|e| (e, surviving))
            });
            match r {
                Ok((e, s)) => (Ok(e), s),
                Err(e) => (Err(e), String::new()),
            }
        })
        .collect();

    let ledger = cfg.out.join("ledger.csv");
    let mut w =
        csv::Writer::from_path(&ledger).with_context(|| format!("writing {}", ledger.display()))?;
    w.write_record(LEDGER_HEADER)?;
    let mut missing = Vec::new();
    let mut summary_rows = Vec::new();
    for (system, noise, idx) in groups(&cells) {
        let mut mean = Mean::default();
        for &k in &idx {
            let c = &cells[k];
            let (res, surviving) = &scored[k];
            let (status, fields) = match res {
                Ok(e) => (
                    "ok".to_string(),
                    metric_fields(Some([e.l2_rel, e.l2_raw, e.precision, e.recall])),
                ),
                Err(e) => {
                    missing.push(format!("{}: {e:#}", c.name()));
                    ("missing".to_string(), metric_fields(None))
                }
            };
            mean.add(res.as_ref().ok());
            let mut rec = vec![
                system.to_string(),
                noise.to_string(),
                c.missing.to_string(),
                c.seed.to_string(),
                status,
            ];
            rec.extend(fields);
            rec.push(surviving.clone());
            w.write_record(&rec)?;
        }
        let avg = mean.finish();
        let mut rec = vec![
            system.to_string(),
            noise.to_string(),
            cfg.missing.to_string(),
            "mean".to_string(),
            format!("{}/{}", mean.ok, mean.total),
        ];
        rec.extend(metric_fields(avg));
        rec.push(String::new());
        w.write_record(&rec)?;
        summary_rows.push((system, noise, avg, mean.ok, mean.total));
    }
    w.flush()?;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "l2 x10^2 / precision % / recall %, mean over successful seeds"
    );
    let _ = writeln!(s);
    let noises: Vec<f64> = cfg.noise.clone();
    let _ = write!(s, "{:<28}", "system");
    for n in &noises {
        let _ = write!(s, "| {:<22}", format!("noise {}%", n * 100.0));
    }
    let _ = writeln!(s);
    for &system in &cfg.systems {
        let _ = write!(s, "{:<28}", system.as_str());
        for &n in &noises {
            let cell = summary_rows.iter().find(|r| r.0 == system && r.1 == n);
            let entry = match cell {
                Some(&(_, _, avg, ok, total)) if ok < total => {
                    format!("{} ({ok}/{total})", table_entry(avg))
                }
                Some(&(_, _, avg, _, _)) => table_entry(avg),
                None => "n/a".into(),
            };
            let _ = write!(s, "| {entry:<22}");
        }
        let _ = writeln!(s);
    }
    if !missing.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "excluded cells:");
        for m in &missing {
            let _ = writeln!(s, "  {m}");
        }
    }
    write_file(&cfg.out.join("summary.txt"), &s)?;
    print!("{s}");
    Ok(missing.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    A,
    B,
    C,
}

impl Group {
    fn label(self) -> &'static str {
        match self {
            Group::A => "A",
            Group::B => "B",
            Group::C => "C",
        }
    }
}

struct AblationRow {
    cell: Cell,
    group: Group,
    result: Result<(EvalResult, f64)>,
}

/// Writes one curve file per coordinate and returns the `q̈` mean-squared
/// error against the clean trajectory.
fn write_curves(report: &FitReport, meta: &DatasetMeta, stem: &Path, points: usize) -> Result<f64> {
    let clean = regenerate_clean(meta)?;
    let rows: Vec<usize> = if points == 0 || points >= clean.len() {
        (0..clean.len()).collect()
    } else {
        (0..points)
            .map(|k| k * (clean.len() - 1) / (points - 1).max(1))
            .collect()
    };
    let model = report.model()?;
    let basis = assemble_matrices(model.knots(), &clean.t)?;
    let fitted = model.eval_curve(&basis)?;
    let n = meta.system.dof();
    let mut sq = 0.0;
    for r in 0..clean.len() {
        for i in 0..n {
            sq += (fitted.qddot[(r, i)] - clean.qdd[(r, i)]).powi(2);
        }
    }
    for i in 0..n {
        let path = PathBuf::from(format!("{}_q{}.csv", stem.display(), i + 1));
        let mut w =
            csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record([
            "t", "q_true", "q_fit", "qd_true", "qd_fit", "qdd_true", "qdd_fit",
        ])?;
        for &r in &rows {
            w.write_record([
                clean.t[r].to_string(),
                clean.q[(r, i)].to_string(),
                fitted.q[(r, i)].to_string(),
                clean.qd[(r, i)].to_string(),
                fitted.qdot[(r, i)].to_string(),
                clean.qdd[(r, i)].to_string(),
                fitted.qddot[(r, i)].to_string(),
            ])?;
        }
        w.flush()?;
    }
    Ok(sq / (clean.len() * n) as f64)
}

pub fn ablate(cfg: &ExperimentConfig) -> Result<usize> {
    let root = cfg.out_dir("ablate");
    let reports = root.join("reports");
    let curves = root.join("curves");
    for d in [&reports, &curves] {
        fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let mut no_reg = cfg.fit.clone();
    no_reg.weights.beta = 0.0;
    let mut jobs = Vec::new();
    for group in [Group::A, Group::B, Group::C] {
        let missing = if group == Group::B {
            cfg.ablate.missing
        } else {
            cfg.missing
        };
        for cell in cfg.cells(missing) {
            jobs.push((cell, group));
        }
    }
    // A and C share datasets; make each one exactly once before fitting.
    let mut unique: Vec<Cell> = Vec::new();
    for (cell, _) in &jobs {
        if !unique.contains(cell) {
            unique.push(*cell);
        }
    }
    let pool = pool(cfg)?;
    pool.install(|| {
        unique.par_iter().for_each(|c| {
            let _ = load_or_generate(cfg, c);
        })
    });
    let rows: Vec<AblationRow> = pool.install(|| {
        jobs.par_iter()
            .map(|&(cell, group)| {
                let fit_cfg = if group == Group::C { &no_reg } else { &cfg.fit };
                let suffix = format!("_{}", group.label());
                let outcome = identify_cell(cfg, fit_cfg, &cell, &reports, &suffix);
                let result = outcome.result.and_then(|report| {
                    let meta = read_meta(&with_suffix(&data_stem(cfg, &cell), "json"))?;
                    let eval = score(&report, &meta)?;
                    let mse = write_curves(
                        &report,
                        &meta,
                        &curves.join(&outcome.name),
                        cfg.ablate.curve_points,
                    )?;
                    Ok((eval, mse))
                });
                AblationRow {
                    cell,
                    group,
                    result,
                }
            })
            .collect()
    });

    let path = root.join("ablation.csv");
    let mut w =
        csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record([
        "group",
        "system",
        "noise",
        "missing",
        "seed",
        "status",
        "l2_x100",
        "precision_pct",
        "recall_pct",
        "qdd_mse",
    ])?;
    let mut failures = Vec::new();
    let mut table: Vec<(SystemId, f64, Group, Option<[f64; 4]>)> = Vec::new();
    for group in [Group::A, Group::B, Group::C] {
        for &system in &cfg.systems {
            for &noise in &cfg.noise {
                let (mut sums, mut ok, mut total) = ([0.0; 4], 0usize, 0usize);
                let mut miss = cfg.missing;
                for row in rows.iter().filter(|r| {
                    r.group == group && r.cell.system == system && r.cell.noise == noise
                }) {
                    total += 1;
                    miss = row.cell.missing;
                    let mut rec = vec![
                        group.label().to_string(),
                        system.to_string(),
                        noise.to_string(),
                        row.cell.missing.to_string(),
                        row.cell.seed.to_string(),
                    ];
                    match &row.result {
                        Ok((e, mse)) => {
                            ok += 1;
                            let v = [e.l2_rel, e.precision, e.recall, *mse];
                            for (s, x) in sums.iter_mut().zip(v) {
                                *s += x;
                            }
                            rec.extend([
                                "ok".to_string(),
                                (e.l2_rel * 100.0).to_string(),
                                (e.precision * 100.0).to_string(),
                                (e.recall * 100.0).to_string(),
                                mse.to_string(),
                            ]);
                        }
                        Err(e) => {
                            failures.push((
                                format!("{}_{}", row.cell.name(), group.label()),
                                format!("{e:#}"),
                            ));
                            rec.extend([
                                "failed".to_string(),
                                String::new(),
                                String::new(),
                                String::new(),
                                String::new(),
                            ]);
                        }
                    }
                    w.write_record(&rec)?;
                }
                let avg = (ok > 0).then(|| sums.map(|s| s / ok as f64));
                let mut rec = vec![
                    group.label().to_string(),
                    system.to_string(),
                    noise.to_string(),
                    miss.to_string(),
                    "mean".to_string(),
                    format!("{ok}/{total}"),
                ];
                match avg {
                    Some([l2, p, r, mse]) => rec.extend([
                        (l2 * 100.0).to_string(),
                        (p * 100.0).to_string(),
                        (r * 100.0).to_string(),
                        mse.to_string(),
                    ]),
                    None => {
                        rec.extend([String::new(), String::new(), String::new(), String::new()])
                    }
                }
                w.write_record(&rec)?;
                table.push((system, noise, group, avg));
            }
        }
    }
    w.flush()?;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "A: full data   B: {}% missing   C: beta = 0",
        cfg.ablate.missing * 100.0
    );
    let _ = writeln!(
        s,
        "l2 x10^2 / precision % / recall %, mean over successful seeds"
    );
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<28}{:<10}| {:<22}| {:<22}| {:<22}",
        "system", "noise", "A", "B", "C"
    );
    for &system in &cfg.systems {
        for &noise in &cfg.noise {
            let _ = write!(
                s,
                "{:<28}{:<10}",
                system.as_str(),
                format!("{}%", noise * 100.0)
            );
            for group in [Group::A, Group::B, Group::C] {
                let avg = table
                    .iter()
                    .find(|t| t.0 == system && t.1 == noise && t.2 == group)
                    .and_then(|t| t.3);
                let entry = avg
                    .map(|[l2, p, r, _]| table_entry(Some([l2, 0.0, p, r])))
                    .unwrap_or_else(|| "n/a".into());
                let _ = write!(s, "| {entry:<22}");
            }
            let _ = writeln!(s);
        }
    }
    write_file(&root.join("ablation.txt"), &s)?;
    print!("{s}");
    report_failures("ablate", &failures);
    Ok(failures.len())
}

#[derive(Serialize)]
struct BasinSummary<'a> {
    agreement: f64,
    resolution: usize,
    magnets: Vec<(f64, f64)>,
    cell: String,
    expression: &'a str,
    terms: &'a [String],
    true_coefficients: &'a [f64],
    identified_coefficients: &'a [f64],
}

pub fn basin(cfg: &ExperimentConfig) -> Result<usize> {
    let dir = cfg.out_dir("basin");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let cell = Cell {
        system: SystemId::MagneticPendulum,
        noise: cfg.basin.noise,
        missing: 0.0,
        seed: cfg.basin.seed,
    };
    let pool = pool(cfg)?;
    let outcome = pool.install(|| identify_cell(cfg, &cfg.fit, &cell, &dir, ""));
    let report = match outcome.result {
        Ok(r) => r,
        Err(e) => {
            report_failures("basin identification", &[(outcome.name, format!("{e:#}"))]);
            return Ok(1);
        }
    };
    let meta = read_meta(&with_suffix(&data_stem(cfg, &cell), "json"))?;
    let lib = dataset_library(&meta)?;
    let magnets = meta.params.magnet_positions();
    let grid = &cfg.basin.grid;
    let (truth, found) = pool.install(|| -> Result<_> {
        let truth = basin_of_attraction(&lib, &meta.true_coeffs, &magnets, grid)?;
        let found = basin_of_attraction(&lib, &report.coefficients.values, &magnets, grid)?;
        Ok((truth, found))
    })?;
    truth.write_csv(&dir.join("true.csv"))?;
    found.write_csv(&dir.join("identified.csv"))?;
    let agreement = truth.agreement(&found)?;
    let summary = BasinSummary {
        agreement,
        resolution: grid.resolution,
        magnets,
        cell: outcome.name,
        expression: &report.expression,
        terms: &report.terms,
        true_coefficients: &meta.true_coeffs,
        identified_coefficients: &report.coefficients.values,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| anyhow!(e))?;
    write_file(&dir.join("basin.json"), &(json + "\n"))?;
    println!(
        "basin agreement {agreement:.4} on a {0}x{0} grid",
        grid.resolution
    );
    Ok(0)
}
