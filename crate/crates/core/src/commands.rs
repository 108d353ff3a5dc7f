//! The `simulate`, `eof`, `fit`, `bench` and `diagnose` subcommands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DataFormat, FitConfig, SimulateConfig};
use crate::dfm::{simulate_design, BreakKind, DfmSpec, ThetaMode};
use crate::eof::{compute_eof, EofBasis};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, load_csv, load_grid, save_csv, series_from_matrix, write_rows};
use crate::mcmc::{any_break_probability, break_probabilities, run_chain, ChainOutput, RunConfig};
use crate::reduction::{bench_reduction, log_log_slope, BenchConfig};

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::InvalidParameter(_) => 2,
        Error::Parse { .. }
        | Error::Format { .. }
        | Error::Io { .. }
        | Error::Dimension { .. }
        | Error::MissingOutput(_)
        | Error::DegenerateBasis(_) => 3,
        e if e.is_numerical() => 4,
        Error::Sweep { source, .. } | Error::Chain { source, .. } => exit_code(source),
        _ => 4,
    }
}

fn kind_name(kind: BreakKind) -> &'static str {
    match kind {
        BreakKind::Level => "level",
        BreakKind::Slope => "slope",
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Run record written next to every command's outputs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub config_sha256: Option<String>,
    pub seed: u64,
    pub chains: usize,
    pub version: String,
    pub outputs: Vec<String>,
}

fn manifest(command: &str, config: Option<&[u8]>, seed: u64, chains: usize, outputs: &[&str]) -> Manifest {
    Manifest {
        command: command.into(),
        config_sha256: config.map(sha256_hex),
        seed,
        chains,
        version: env!("CARGO_PKG_VERSION").into(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `simulate`: data, regressors and the generating truth.
pub fn simulate_command(config: Option<&Path>, out: &Path) -> Result<()> {
    let (cfg, bytes) = match config {
        Some(path) => (SimulateConfig::load(path)?, std::fs::read(path).map_err(|e| Error::io(path, e))?),
        None => (SimulateConfig::parse("", Path::new("."))?, Vec::new()),
    };
    ensure_dir(out)?;
    let data = simulate_design(&cfg.design)?;
    let n = cfg.design.n;
    let k = cfg.design.k();
    save_csv(out.join("data.csv"), &series_from_matrix(data.obs.clone(), "y"))?;
    save_csv(out.join("regressors.csv"), &series_from_matrix(data.regressors.clone(), "w"))?;
    save_csv(out.join("true_loadings.csv"), &series_from_matrix(data.theta.clone(), "theta"))?;
    let mut breaks = data.breaks.clone();
    breaks.sort_by_key(|b| (b.component, b.t));
    write_rows(
        out.join("true_breaks.csv"),
        &["component", "t", "kind", "magnitude"],
        breaks.iter().map(|b| vec![(b.component + 1).to_string(), (b.t + 1).to_string(), kind_name(b.kind).into(), fmt_f64(b.magnitude)]),
    )?;
    let rows = (0..k).flat_map(|i| {
        let data = &data;
        (0..n).map(move |t| {
            vec![
                (i + 1).to_string(),
                (t + 1).to_string(),
                fmt_f64(data.trend[(t, i)]),
                fmt_f64(data.seasonal[(t, i)]),
                fmt_f64(data.cycle[(t, i)]),
                fmt_f64(data.slope[(t, i)]),
            ]
        })
    });
    write_rows(out.join("true_paths.csv"), &["component", "t", "trend", "seasonal", "cycle", "slope"], rows)?;
    write_json(
        &out.join("manifest.json"),
        &manifest(
            "simulate",
            config.map(|_| bytes.as_slice()),
            cfg.design.seed,
            1,
            &["data.csv", "regressors.csv", "true_loadings.csv", "true_breaks.csv", "true_paths.csv"],
        ),
    )
}

fn write_basis(out: &Path, basis: &EofBasis, grid: Option<(usize, usize)>) -> Result<()> {
    write_loadings(&out.join("loadings.csv"), &basis.theta, grid)?;
    write_rows(
        out.join("explained.csv"),
        &["component", "explained"],
        basis.explained.iter().enumerate().map(|(i, e)| vec![(i + 1).to_string(), fmt_f64(*e)]),
    )?;
    write_rows(
        out.join("means.csv"),
        &["series", "mean"],
        basis.col_means.iter().enumerate().map(|(j, m)| vec![(j + 1).to_string(), fmt_f64(*m)]),
    )
}

fn write_loadings(path: &Path, theta: &DMatrix<f64>, grid: Option<(usize, usize)>) -> Result<()> {
    let k = theta.ncols();
    let names: Vec<String> = (1..=k).map(|i| format!("theta{i}")).collect();
    let mut header: Vec<&str> = match grid {
        Some(_) => vec!["row", "col"],
        None => vec!["series"],
    };
    header.extend(names.iter().map(String::as_str));
    let rows = (0..theta.nrows()).map(|j| {
        let mut row = match grid {
            Some((_, cols)) => vec![(j / cols + 1).to_string(), (j % cols + 1).to_string()],
            None => vec![(j + 1).to_string()],
        };
        row.extend(theta.row(j).iter().map(|&v| fmt_f64(v)));
        row
    });
    write_rows(path, &header, rows)
}

fn load_data(path: &Path, format: DataFormat) -> Result<(DMatrix<f64>, Option<(usize, usize)>)> {
    match format {
        DataFormat::Series => Ok((load_csv(path)?.values, None)),
        DataFormat::Grid => {
            let g = load_grid(path)?;
            Ok((g.values, Some((g.rows, g.cols))))
        }
    }
}

fn guess_format(path: &Path) -> DataFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("cgsg") | Some("bin") => DataFormat::Grid,
        _ => DataFormat::Series,
    }
}

/// `eof`: basis, explained fractions and series means.
pub fn eof_command(data: &Path, threshold: f64, k_max: usize, standardize: bool, out: &Path) -> Result<()> {
    let (values, grid) = load_data(data, guess_format(data))?;
    let basis = compute_eof(&values, threshold, k_max, standardize)?;
    ensure_dir(out)?;
    write_basis(out, &basis, grid)?;
    write_json(&out.join("manifest.json"), &manifest("eof", None, 0, 1, &["loadings.csv", "explained.csv", "means.csv"]))
}

/// Worker threads for independent chains: `CGSSM_THREADS` if set, else the
/// available parallelism.
pub fn thread_cap() -> usize {
    std::env::var("CGSSM_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&v| v > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn run_chains(obs: &DMatrix<f64>, spec: &DfmSpec, theta: Option<&DMatrix<f64>>, cfg: RunConfig, chains: usize) -> Result<Vec<ChainOutput>> {
    let seeds: Vec<u64> = (0..chains as u64).map(|c| cfg.seed.wrapping_add(c)).collect();
    let cap = thread_cap().min(chains).max(1);
    let mut results: Vec<Option<Result<ChainOutput>>> = (0..chains).map(|_| None).collect();
    for batch in seeds.chunks(cap).enumerate() {
        let (b, batch_seeds) = batch;
        let outs: Vec<Result<ChainOutput>> = std::thread::scope(|s| {
            let handles: Vec<_> = batch_seeds
                .iter()
                .map(|&seed| s.spawn(move || run_chain(obs, spec, theta, RunConfig { seed, ..cfg })))
                .collect();
            handles.into_iter().map(|h| h.join().expect("chain thread panicked")).collect()
        });
        for (i, r) in outs.into_iter().enumerate() {
            results[b * cap + i] = Some(r);
        }
    }
    results.into_iter().map(|r| r.expect("every chain ran")).collect()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn path_rows(chains: &[ChainOutput], pick: impl Fn(&ChainOutput) -> &Vec<DMatrix<f64>>) -> Vec<Vec<String>> {
    let first = pick(&chains[0]);
    let Some(shape) = first.first().map(|m| m.shape()) else {
        return Vec::new();
    };
    let (n, k) = shape;
    let mut rows = Vec::with_capacity(n * k);
    for i in 0..k {
        for t in 0..n {
            let mut vals: Vec<f64> = chains.iter().flat_map(|c| pick(c).iter().map(|m| m[(t, i)])).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            vals.sort_by(f64::total_cmp);
            rows.push(vec![
                (i + 1).to_string(),
                (t + 1).to_string(),
                fmt_f64(mean),
                fmt_f64(quantile(&vals, 0.05)),
                fmt_f64(quantile(&vals, 0.5)),
                fmt_f64(quantile(&vals, 0.95)),
            ]);
        }
    }
    rows
}

/// `fit`: run the sampler and write posterior summaries.
pub fn fit_command(config: &Path, out: Option<&Path>, chains: Option<usize>, seed: Option<u64>) -> Result<PathBuf> {
    let cfg = FitConfig::load(config)?;
    let bytes = std::fs::read(config).map_err(|e| Error::io(config, e))?;
    let out = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config(vec!["no output directory: pass --out or set output.dir".into()]))?;
    let chains = chains.unwrap_or(cfg.mcmc.chains);
    if chains == 0 {
        return Err(Error::Config(vec!["--chains must be at least 1".into()]));
    }
    let seed = seed.unwrap_or(cfg.mcmc.seed);

    let (values, grid) = load_data(&cfg.data.path, cfg.data.format)?;
    let n = values.nrows();
    let regressors = match &cfg.data.regressors {
        Some(path) => load_csv(path)?.values,
        None => DMatrix::zeros(n, 0),
    };
    if regressors.nrows() != n {
        return Err(Error::dim("regressor rows", n, regressors.nrows()));
    }
    let (obs, theta, k) = match cfg.model.theta_mode {
        ThetaMode::Eof => {
            let basis = compute_eof(&values, cfg.model.eof_threshold, cfg.model.k, cfg.model.eof_standardize)?;
            let k = basis.k();
            (basis.prepare(&values)?, Some(basis.theta), k)
        }
        ThetaMode::Unknown => (values, None, cfg.model.k),
    };
    let spec = DfmSpec {
        k,
        regressors,
        priors: cfg.priors.clone(),
        theta_mode: cfg.model.theta_mode,
    };
    let run = RunConfig {
        iterations: cfg.mcmc.iterations,
        burn_in: cfg.mcmc.burn_in,
        thin: cfg.mcmc.thin,
        seed,
        adapt: cfg.mcmc.adapt,
    };
    let outputs = run_chains(&obs, &spec, theta.as_ref(), run, chains)?;
    ensure_dir(&out)?;
    write_fit_outputs(&out, &outputs, grid)?;
    write_json(
        &out.join("manifest.json"),
        &manifest(
            "fit",
            Some(&bytes),
            seed,
            chains,
            &[
                "params.csv",
                "breaks.csv",
                "break_any.csv",
                "trend.csv",
                "seasonal.csv",
                "trend_bands.csv",
                "seasonal_bands.csv",
                "loadings.csv",
                "acceptance.csv",
                "draws_chain*.csv",
            ],
        ),
    )?;
    Ok(out)
}

fn write_fit_outputs(out: &Path, chains: &[ChainOutput], grid: Option<(usize, usize)>) -> Result<()> {
    let first = &chains[0];
    let names = &first.names;
    let total: usize = chains.iter().map(|c| c.kept()).sum();
    let ifs: Vec<Vec<Option<f64>>> = chains.iter().map(|c| c.inefficiency_factors()).collect();
    let mut rows = Vec::new();
    for (c, name) in names.iter().enumerate() {
        let vals: Vec<f64> = chains.iter().flat_map(|ch| ch.draws.iter().map(move |r| r[c])).collect();
        let mean = vals.iter().sum::<f64>() / total.max(1) as f64;
        let var = if total > 1 {
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (total - 1) as f64
        } else {
            f64::NAN
        };
        let chain_ifs: Vec<f64> = ifs.iter().filter_map(|f| f[c]).collect();
        let ineff = if chain_ifs.len() == chains.len() {
            fmt_f64(chain_ifs.iter().sum::<f64>() / chain_ifs.len() as f64)
        } else {
            "NA".into()
        };
        rows.push(vec![name.clone(), fmt_f64(mean), fmt_f64(var.sqrt()), ineff]);
    }
    write_rows(out.join("params.csv"), &["parameter", "mean", "sd", "if"], rows)?;

    let n = first.label_counts.len();
    let k = first.k;
    let counts: Vec<Vec<u32>> = (0..n)
        .map(|t| (0..first.label_counts[t].len()).map(|l| chains.iter().map(|c| c.label_counts[t][l]).sum()).collect())
        .collect();
    let mut rows = Vec::new();
    for i in 0..k {
        let (level, slope) = break_probabilities(&counts, total, k, i);
        for t in 0..n {
            rows.push(vec![(i + 1).to_string(), (t + 1).to_string(), fmt_f64(level[t]), fmt_f64(slope[t])]);
        }
    }
    write_rows(out.join("breaks.csv"), &["component", "t", "level", "slope"], rows)?;
    let any = any_break_probability(&counts, total);
    write_rows(out.join("break_any.csv"), &["t", "any"], any.iter().enumerate().map(|(t, p)| vec![(t + 1).to_string(), fmt_f64(*p)]))?;

    for (file, bands, pick) in [
        ("trend.csv", "trend_bands.csv", (|c: &ChainOutput| &c.trend_draws) as fn(&ChainOutput) -> &Vec<DMatrix<f64>>),
        ("seasonal.csv", "seasonal_bands.csv", |c: &ChainOutput| &c.seasonal_draws),
    ] {
        let band_rows = path_rows(chains, pick);
        write_rows(out.join(bands), &["component", "t", "mean", "q05", "q50", "q95"], band_rows.clone())?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=k).map(|i| format!("component{i}")));
        let header: Vec<&str> = header.iter().map(String::as_str).collect();
        let rows = (0..n).map(|t| {
            let mut row = vec![(t + 1).to_string()];
            row.extend((0..k).filter_map(|i| band_rows.get(i * n + t).map(|r| r[2].clone())));
            row
        });
        write_rows(out.join(file), &header, rows)?;
    }

    let mut theta = DMatrix::zeros(first.theta_sum.nrows(), first.theta_sum.ncols());
    for c in chains {
        theta += &c.theta_sum;
    }
    theta /= total.max(1) as f64;
    write_loadings(&out.join("loadings.csv"), &theta, grid)?;

    let mut rows = Vec::new();
    for (c, ch) in chains.iter().enumerate() {
        for (name, acc, prop) in &ch.acceptance {
            let rate = if *prop > 0 { *acc as f64 / *prop as f64 } else { f64::NAN };
            rows.push(vec![(c + 1).to_string(), name.clone(), acc.to_string(), prop.to_string(), fmt_f64(rate)]);
        }
    }
    write_rows(out.join("acceptance.csv"), &["chain", "parameter", "accepted", "proposed", "rate"], rows)?;

    for (c, ch) in chains.iter().enumerate() {
        let mut header = vec!["iteration"];
        header.extend(names.iter().map(String::as_str));
        let rows = ch.draws.iter().zip(&ch.kept_iterations).map(|(r, it)| {
            std::iter::once(it.to_string()).chain(r.iter().map(|&v| fmt_f64(v))).collect::<Vec<_>>()
        });
        write_rows(out.join(format!("draws_chain{}.csv", c + 1)), &header, rows)?;
    }
    Ok(())
}

/// Summary of a `bench` run.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BenchSummary {
    pub p_grid: Vec<usize>,
    pub n: usize,
    pub k: usize,
    pub sweeps: usize,
    /// Log-log slope of naive time against p over `p >= 50`.
    pub naive_slope: f64,
    /// Largest over smallest reduced-path time.
    pub reduced_spread: f64,
    pub speedup_at_100: Option<f64>,
}

/// `bench`: time both paths over a grid of series counts.
pub fn bench_command(cfg: &BenchConfig, out: &Path) -> Result<BenchSummary> {
    let rows = bench_reduction(cfg)?;
    ensure_dir(out)?;
    write_rows(
        out.join("bench.csv"),
        &["p", "naive_seconds", "naive_estimated", "reduced_seconds", "reduced_estimated", "speedup"],
        rows.iter().map(|r| {
            vec![
                r.p.to_string(),
                fmt_f64(r.naive_seconds),
                r.naive_estimated.to_string(),
                fmt_f64(r.reduced_seconds),
                r.reduced_estimated.to_string(),
                fmt_f64(r.speedup()),
            ]
        }),
    )?;
    let big: Vec<_> = rows.iter().filter(|r| r.p >= 50).collect();
    let naive_slope = if big.len() >= 2 {
        log_log_slope(&big.iter().map(|r| r.p as f64).collect::<Vec<_>>(), &big.iter().map(|r| r.naive_seconds).collect::<Vec<_>>())
    } else {
        f64::NAN
    };
    let reduced: Vec<f64> = rows.iter().map(|r| r.reduced_seconds).collect();
    let reduced_spread = reduced.iter().cloned().fold(f64::MIN, f64::max) / reduced.iter().cloned().fold(f64::MAX, f64::min);
    let summary = BenchSummary {
        p_grid: cfg.p_grid.clone(),
        n: cfg.n,
        k: cfg.k,
        sweeps: cfg.sweeps,
        naive_slope,
        reduced_spread,
        speedup_at_100: rows.iter().find(|r| r.p == 100).map(|r| r.speedup()),
    };
    write_json(&out.join("bench_summary.json"), &summary)?;
    Ok(summary)
}

/// Default bench settings with an optional grid and time budget.
pub fn bench_config(p_grid: Option<Vec<usize>>, sweeps: Option<usize>, budget_secs: Option<f64>, seed: u64) -> BenchConfig {
    let d = BenchConfig::default();
    BenchConfig {
        p_grid: p_grid.unwrap_or(d.p_grid),
        sweeps: sweeps.unwrap_or(d.sweeps),
        budget: budget_secs.map(Duration::from_secs_f64).unwrap_or(d.budget),
        seed,
        ..d
    }
}

fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    if !path.exists() {
        return Err(Error::MissingOutput(format!("{} not found", path.display())));
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let header = reader
        .headers()
        .map_err(|e| Error::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok((header, rows))
}

fn num(path: &Path, row: usize, cell: &str) -> Result<f64> {
    if cell == "NA" {
        return Ok(f64::NAN);
    }
    cell.parse().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line: row + 2,
        message: format!("{cell:?} is not a number"),
    })
}

/// `diagnose`: a text report and long-format plot files from a fit directory.
pub fn diagnose_command(dir: &Path) -> Result<String> {
    let params_path = dir.join("params.csv");
    let (_, params) = read_table(&params_path)?;
    let (_, acceptance) = read_table(&dir.join("acceptance.csv"))?;
    let draws_path = dir.join("draws_chain1.csv");
    let (draw_header, draws) = read_table(&draws_path)?;

    let mut report = String::new();
    let _ = writeln!(report, "parameters ({}):", params.len());
    let _ = writeln!(report, "{:<20} {:>14} {:>14} {:>10}   batch means (chain 1, 5 batches)", "name", "mean", "sd", "IF");
    for (i, row) in params.iter().enumerate() {
        let col = draw_header.iter().position(|h| h == &row[0]);
        let mut batches = String::new();
        if let Some(c) = col {
            let vals: Vec<f64> = draws.iter().enumerate().map(|(r, d)| num(&draws_path, r, &d[c])).collect::<Result<_>>()?;
            let size = vals.len() / 5;
            if size > 0 {
                for b in 0..5 {
                    let m = vals[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64;
                    let _ = write!(batches, " {m:.4}");
                }
            }
        }
        let mean = num(&params_path, i, &row[1])?;
        let sd = num(&params_path, i, &row[2])?;
        let _ = writeln!(report, "{:<20} {:>14.6} {:>14.6} {:>10}  {}", row[0], mean, sd, row[3], batches);
    }
    let _ = writeln!(report, "\nacceptance rates:");
    for row in &acceptance {
        let _ = writeln!(report, "  chain {} {:<14} {}/{} = {}", row[0], row[1], row[2], row[3], row[4]);
    }

    let (_, trend) = read_table(&dir.join("trend_bands.csv"))?;
    let (_, seasonal) = read_table(&dir.join("seasonal_bands.csv"))?;
    let rows = trend
        .iter()
        .map(|r| ("trend", r))
        .chain(seasonal.iter().map(|r| ("seasonal", r)))
        .map(|(what, r)| vec![what.to_string(), r[0].clone(), r[1].clone(), r[3].clone(), r[4].clone(), r[5].clone(), r[2].clone()]);
    write_rows(dir.join("plot_paths.csv"), &["series", "component", "t", "q05", "q50", "q95", "mean"], rows)?;

    let breaks_path = dir.join("breaks.csv");
    let (_, breaks) = read_table(&breaks_path)?;
    let mut heat = Vec::new();
    for r in &breaks {
        heat.push(vec![r[1].clone(), r[0].clone(), "level".to_string(), r[2].clone()]);
        heat.push(vec![r[1].clone(), r[0].clone(), "slope".to_string(), r[3].clone()]);
    }
    heat.sort_by_key(|r| (r[0].parse::<usize>().unwrap_or(0), r[1].parse::<usize>().unwrap_or(0), r[2].clone()));
    write_rows(dir.join("plot_breaks.csv"), &["t", "component", "kind", "probability"], heat)?;
    std::fs::write(dir.join("report.txt"), &report).map_err(|e| Error::io(dir.join("report.txt"), e))?;
    Ok(report)
}
