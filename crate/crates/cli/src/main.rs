//! Configuration-driven front end tying the simulator and the analysis
//! toolkit into reproducible experiment runs.
//!
//! The stages communicate through run directories: `simulate` writes
//! per-channel timetag files plus a manifest hashing every output,
//! `characterize` and `analyze` read a run directory back (using the
//! configuration stored inside unless overridden) and add their reports
//! and tables, and `report` verifies the manifests and bundles the CSV
//! tables for external plotting.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration or data error,
//! 3 estimation failure (well-formed inputs that do not support a finite
//! estimate).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgAction, Args, Parser, Subcommand};
use hspsim_core::config::RunConfig;
use hspsim_core::error::{Error, Result};
use hspsim_core::io::{ensure_dir, read_json, read_manifest, sha256_file, RunManifest};
use hspsim_core::pipeline::{
    analyze, characterize, run_sweep, simulate, CharacterizationReport, HspsMetrics, SweepRow,
    ANALYSIS_MANIFEST_FILE, CHARACTERIZATION_FILE, CHARACTERIZATION_MANIFEST_FILE, CONFIG_FILE,
    MANIFEST_FILE, METRICS_FILE,
};
use hspsim_core::types::Estimate;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_ESTIMATION: u8 = 3;

/// CSV tables a run directory can accumulate; `report` bundles the ones
/// that exist.
const CSV_TABLES: &[&str] = &[
    "cross_correlation.csv",
    "hbt_correlation.csv",
    "period_histogram.csv",
    "afterpulse_vs_holdoff.csv",
    "sweep.csv",
];

#[derive(Parser)]
#[command(
    name = "hspsim",
    version,
    about = "Photon-pair source simulator and timetag analysis toolkit",
    propagate_version = true
)]
struct Cli {
    /// Worker threads for the simulation stage; 0 keeps the default pool.
    /// Results are identical for every thread count.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Increase log verbosity (repeatable); RUST_LOG takes precedence.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a configured acquisition into per-channel timetag files.
    Simulate(SimulateArgs),
    /// Extract gated-detector figures from a simulated calibration run.
    Characterize(CharacterizeArgs),
    /// Extract source metrics and correlation tables from a run.
    Analyze(AnalyzeArgs),
    /// Verify a run's manifests and bundle its CSV tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Run configuration (TOML).
    #[arg(short, long, value_name = "FILE")]
    config: PathBuf,

    /// Output run directory; falls back to HSPSIM_OUT_DIR, then to the
    /// configuration's run.out_dir.
    #[arg(short, long, value_name = "DIR", env = "HSPSIM_OUT_DIR")]
    out: Option<PathBuf>,

    /// Replace an existing, non-empty output directory.
    #[arg(long)]
    force: bool,

    /// Keep ground-truth origin labels in the tag files instead of
    /// stripping them.
    #[arg(long)]
    keep_origin: bool,

    /// Override the configured acquisition duration, in seconds.
    #[arg(long, value_name = "SECONDS")]
    duration_s: Option<f64>,

    /// Override the configured random seed.
    #[arg(long, value_name = "SEED")]
    seed: Option<u64>,
}

#[derive(Args)]
struct CharacterizeArgs {
    /// Simulated run directory to characterize.
    #[arg(short, long, value_name = "DIR")]
    run: PathBuf,

    /// Configuration override; defaults to the one stored in the run
    /// directory.
    #[arg(short, long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Treat the record as a dark acquisition: report the dark rate only.
    #[arg(long)]
    laser_off: bool,

    /// Emulated hold-off times for the afterpulse curve, in microseconds.
    #[arg(long, value_name = "US", value_delimiter = ',')]
    holdoff_us: Option<Vec<f64>>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["run", "sweep"]))]
struct AnalyzeArgs {
    /// Simulated run directory to analyze.
    #[arg(short, long, value_name = "DIR")]
    run: Option<PathBuf>,

    /// Simulate and analyze the configured pump-power ladder instead of
    /// reading an existing run.
    #[arg(long)]
    sweep: bool,

    /// Configuration override; required with --sweep, otherwise defaults
    /// to the one stored in the run directory.
    #[arg(short, long, value_name = "FILE", required_if_eq("sweep", "true"))]
    config: Option<PathBuf>,

    /// Output directory for --sweep; falls back to HSPSIM_OUT_DIR, then
    /// to the configuration's run.out_dir.
    #[arg(short, long, value_name = "DIR", env = "HSPSIM_OUT_DIR")]
    out: Option<PathBuf>,

    /// Replace an existing, non-empty sweep output directory.
    #[arg(long)]
    force: bool,

    /// Keep ground-truth origin labels in sweep tag files.
    #[arg(long)]
    keep_origin: bool,

    /// Fixed coincidence window around zero delay, in picoseconds:
    /// either one full width or an explicit lo,hi pair.
    #[arg(
        long,
        value_name = "PS[,PS]",
        value_delimiter = ',',
        num_args = 1..=2,
        conflicts_with = "fitted_window"
    )]
    window_ps: Option<Vec<i64>>,

    /// Derive the asymmetric coincidence window from the fitted decay
    /// constants, overriding a fixed window in the configuration.
    #[arg(long)]
    fitted_window: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory (a single run or a sweep directory).
    #[arg(short, long, value_name = "DIR")]
    run: PathBuf,

    /// Where to place the bundle; defaults to <run>/report.
    #[arg(short, long, value_name = "DIR")]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests arrive here too; keep their
            // conventional success exit.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };

    let default_level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(
        env_logger::Env::default().default_filter_or(default_level),
    )
    .format_timestamp(None)
    .init();

    if cli.threads > 0 {
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global()
        {
            log::debug!("thread pool already initialized: {e}");
        }
    }

    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Characterize(args) => cmd_characterize(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_estimation() { EXIT_ESTIMATION } else { EXIT_DATA })
        }
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Command-line flag (which clap also fills from HSPSIM_OUT_DIR), then
/// the configuration's own default.
fn resolve_out_dir(flag: Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| config.run.out_dir.clone()).ok_or_else(|| {
        Error::Config(
            "no output directory: pass --out, set HSPSIM_OUT_DIR, or set run.out_dir".into(),
        )
    })
}

fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    match std::fs::read_dir(out) {
        Ok(mut entries) => {
            if entries.next().is_some() {
                if !force {
                    return Err(Error::Config(format!(
                        "output directory {} is not empty; pass --force to replace it",
                        out.display()
                    )));
                }
                std::fs::remove_dir_all(out)?;
            }
            Ok(())
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Error::Config(format!("output directory {}: {e}", out.display()))),
    }
}

fn fmt_est(e: &Estimate) -> String {
    format!("{:.6e} +- {:.3e}", e.value, e.std_err)
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(d) = args.duration_s {
        config.run.duration_s = d;
    }
    if let Some(s) = args.seed {
        config.run.seed = s;
    }
    let out = resolve_out_dir(args.out, &config)?;
    prepare_out_dir(&out, args.force)?;

    let started = Instant::now();
    let result = simulate(&config, &out, args.keep_origin)?;
    log::info!(
        "simulated {} s of detector time in {:.1} s",
        config.run.duration_s,
        started.elapsed().as_secs_f64()
    );

    println!("run directory  {}", result.out_dir.display());
    for f in &result.manifest.files {
        println!("  {:<28} {:>12} bytes  {:>10} records", f.name, f.bytes, f.records);
    }
    println!("manifest_digest  {}", result.manifest.digest()?);
    Ok(())
}

fn cmd_characterize(args: CharacterizeArgs) -> Result<()> {
    let config_path = args.config.unwrap_or_else(|| args.run.join(CONFIG_FILE));
    let mut config = load_config(&config_path)?;
    let c = config
        .characterize
        .as_mut()
        .ok_or_else(|| Error::Config("configuration has no characterize section".into()))?;
    if args.laser_off {
        c.laser_off = true;
    }
    if let Some(us) = args.holdoff_us {
        c.holdoff_sweep_s = us.iter().map(|u| u * 1e-6).collect();
    }

    let report = characterize(&config, &args.run)?;
    print_characterization(&report);
    println!("report written to {}", args.run.join(CHARACTERIZATION_FILE).display());
    Ok(())
}

fn print_characterization(r: &CharacterizationReport) {
    println!("channel                    {}", r.channel);
    println!("integration_time_s         {}", r.integration_time_s);
    println!("gate_frequency_hz          {:.6e}", r.gate_frequency_hz);
    println!("dark_rate_hz               {}", fmt_est(&r.dark_rate_hz));
    println!("dark_probability_per_gate  {}", fmt_est(&r.dark_probability_per_gate));
    if let Some(g) = &r.gated {
        println!("pulses                     {}", g.n_pulses);
        println!("laser_counts               {}", g.laser_counts);
        println!("trigger_probability        {:.6e}", g.p_trigger);
        println!("pde_logarithmic            {}", fmt_est(&g.pde_logarithmic));
        println!("pde_linear                 {}", fmt_est(&g.pde_linear));
        println!("afterpulse_probability     {}", fmt_est(&g.afterpulse_probability));
    }
    for p in &r.afterpulse_vs_holdoff {
        println!(
            "afterpulse @ holdoff {:>9.3e} s   {}",
            p.holdoff_s,
            fmt_est(&p.afterpulse_probability)
        );
    }
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    if args.sweep {
        // clap guarantees --config came with --sweep.
        let config_path = args.config.expect("clap enforces --config with --sweep");
        let config = load_config(&config_path)?;
        let out = resolve_out_dir(args.out, &config)?;
        prepare_out_dir(&out, args.force)?;
        let rows = run_sweep(&config, &out, args.keep_origin)?;
        print_sweep(&rows);
        println!("sweep directory  {}", out.display());
        return Ok(());
    }

    let run = args.run.expect("clap requires --run without --sweep");
    let config_path = args.config.unwrap_or_else(|| run.join(CONFIG_FILE));
    let mut config = load_config(&config_path)?;
    match args.window_ps.as_deref() {
        Some([width]) => {
            config.analysis.coincidence_window_ps = Some((-width / 2, width / 2));
        }
        Some([lo, hi]) => {
            config.analysis.coincidence_window_ps = Some((*lo, *hi));
        }
        _ => {}
    }
    if args.fitted_window {
        config.analysis.coincidence_window_ps = None;
    }

    let metrics = analyze(&config, &run)?;
    print_metrics(&metrics);
    println!("metrics written to {}", run.join(METRICS_FILE).display());
    Ok(())
}

fn print_metrics(m: &HspsMetrics) {
    println!("duration_s                 {}", m.duration_s);
    for ch in &m.channels {
        println!(
            "channel {:<2} tags            {:>12}  ({:.6e} Hz)",
            ch.channel, ch.tags, ch.rate_hz
        );
    }
    println!(
        "coincidence_window_ps      [{}, {}]",
        m.coincidence_window_ps.0, m.coincidence_window_ps.1
    );
    println!("coincidences               {}", m.coincidences);
    println!("accidentals_expected       {:.6e}", m.accidentals_expected);
    println!("herald_rate_hz             {}", fmt_est(&m.herald_rate_hz));
    println!("coincidence_rate_hz        {}", fmt_est(&m.coincidence_rate_hz));
    println!("corrected_rate_hz          {}", fmt_est(&m.corrected_coincidence_rate_hz));
    println!("heralding_efficiency       {}", fmt_est(&m.heralding_efficiency));
    println!("heralded_rate_hz           {}", fmt_est(&m.heralded_rate_hz));
    println!(
        "coherence_tau_ps           left {}  right {}",
        fmt_est(&m.cross_fit.tau_left_ps),
        fmt_est(&m.cross_fit.tau_right_ps)
    );
    if let Some(g) = &m.heralded_g2 {
        println!("heralded_g2                {}", fmt_est(g));
    }
    if let Some(g) = &m.g2_auto_zero {
        println!("g2_auto_zero               {}", fmt_est(g));
    }
    if let Some(p) = &m.purity {
        println!("purity                     {}", fmt_est(p));
    }
}

fn print_sweep(rows: &[SweepRow]) {
    println!(
        "{:>14} {:>14} {:>12} {:>14} {:>24} {:>24}",
        "pump_power_uw", "pgr_hz", "duration_s", "herald_hz", "heralding_efficiency", "heralded_g2"
    );
    for r in rows {
        let g2 = r
            .heralded_g2
            .as_ref()
            .map_or_else(|| "-".into(), fmt_est);
        println!(
            "{:>14} {:>14.6e} {:>12} {:>14.6e} {:>24} {:>24}",
            r.pump_power_uw,
            r.pair_generation_rate_hz,
            r.duration_s,
            r.herald_rate_hz,
            fmt_est(&r.heralding_efficiency),
            g2
        );
    }
}

/// Re-hash every file listed in `manifest_path` and compare against the
/// recorded digests.
fn verify_manifest(dir: &Path, manifest_path: &Path) -> Result<RunManifest> {
    let manifest = read_manifest(manifest_path)?;
    for f in &manifest.files {
        let path = dir.join(&f.name);
        let sha = sha256_file(&path)
            .map_err(|e| Error::Precondition(format!("{}: {e}", path.display())))?;
        if sha != f.sha256 {
            return Err(Error::Precondition(format!(
                "integrity check failed for {}: manifest records {}, file hashes to {sha}",
                path.display(),
                f.sha256
            )));
        }
    }
    Ok(manifest)
}

fn csv_field(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        String::new()
    }
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let run = &args.run;
    let out = args.out.unwrap_or_else(|| run.join("report"));
    ensure_dir(&out)?;

    // Every manifest present must verify, including per-point manifests
    // of sweep subdirectories.
    let mut verified = 0usize;
    let mut dirs = vec![run.clone()];
    if let Ok(entries) = std::fs::read_dir(run) {
        let mut subs: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && p != &out)
            .collect();
        subs.sort();
        dirs.extend(subs);
    }
    for dir in &dirs {
        for name in [MANIFEST_FILE, ANALYSIS_MANIFEST_FILE, CHARACTERIZATION_MANIFEST_FILE] {
            let path = dir.join(name);
            if path.exists() {
                let manifest = verify_manifest(dir, &path)?;
                verified += manifest.files.len();
            }
        }
    }
    if verified == 0 {
        return Err(Error::Config(format!(
            "{} contains no run manifests to verify",
            run.display()
        )));
    }
    println!("verified {verified} files against their manifests");

    let mut bundled = Vec::new();
    for name in CSV_TABLES {
        let src = run.join(name);
        if src.exists() {
            std::fs::copy(&src, out.join(name))?;
            bundled.push(*name);
        }
    }

    // Headline quantities as a flat CSV for external plotting.
    let mut summary = String::from("quantity,value,std_err\n");
    let mut rows = 0usize;
    let metrics_path = run.join(METRICS_FILE);
    if metrics_path.exists() {
        let m: HspsMetrics = read_json(&metrics_path)?;
        let mut push = |name: &str, value: f64, err: Option<f64>| {
            summary.push_str(&format!(
                "{name},{},{}\n",
                csv_field(value),
                err.map_or_else(String::new, |e| csv_field(e))
            ));
            rows += 1;
        };
        push("duration_s", m.duration_s, None);
        push("herald_rate_hz", m.herald_rate_hz.value, Some(m.herald_rate_hz.std_err));
        push(
            "coincidence_rate_hz",
            m.coincidence_rate_hz.value,
            Some(m.coincidence_rate_hz.std_err),
        );
        push(
            "corrected_coincidence_rate_hz",
            m.corrected_coincidence_rate_hz.value,
            Some(m.corrected_coincidence_rate_hz.std_err),
        );
        push(
            "heralding_efficiency",
            m.heralding_efficiency.value,
            Some(m.heralding_efficiency.std_err),
        );
        push("heralded_rate_hz", m.heralded_rate_hz.value, Some(m.heralded_rate_hz.std_err));
        if let Some(g) = &m.heralded_g2 {
            push("heralded_g2", g.value, Some(g.std_err));
        }
        if let Some(g) = &m.g2_auto_zero {
            push("g2_auto_zero", g.value, Some(g.std_err));
        }
        if let Some(p) = &m.purity {
            push("purity", p.value, Some(p.std_err));
        }
    }
    let characterization_path = run.join(CHARACTERIZATION_FILE);
    if characterization_path.exists() {
        let r: CharacterizationReport = read_json(&characterization_path)?;
        let mut push = |name: &str, e: &Estimate| {
            summary.push_str(&format!("{name},{},{}\n", csv_field(e.value), csv_field(e.std_err)));
            rows += 1;
        };
        push("dark_rate_hz", &r.dark_rate_hz);
        push("dark_probability_per_gate", &r.dark_probability_per_gate);
        if let Some(g) = &r.gated {
            push("pde_logarithmic", &g.pde_logarithmic);
            push("pde_linear", &g.pde_linear);
            push("afterpulse_probability", &g.afterpulse_probability);
        }
    }
    if rows > 0 {
        std::fs::write(out.join("summary.csv"), &summary)?;
        bundled.push("summary.csv");
    }

    if bundled.is_empty() {
        return Err(Error::Config(format!(
            "{} has no tables to bundle; run analyze or characterize first",
            run.display()
        )));
    }
    println!("bundle directory  {}", out.display());
    for name in &bundled {
        println!("  {name}");
    }
    Ok(())
}
