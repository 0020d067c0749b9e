//! Command-line driver: ROM-in-the-loop optimization, the shadow
//! comparison experiment, and an incremental-SVD benchmark.

use std::io::Write;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wpod::config::{Method, RunConfig};
use wpod::{driver, svd};

#[derive(Parser)]
#[command(name = "wpod", version, about = "Weighted-POD model reduction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for CSV and JSON artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Seed recorded in the report (the pipeline itself is deterministic).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the constrained design optimization with the configured method.
    Optimize {
        #[command(flatten)]
        common: ConfigArgs,
        /// Override the configured method (hdm | global | weighted | weighted-deriv).
        #[arg(long)]
        method: Option<Method>,
        /// Override the configured reduced-basis size.
        #[arg(long)]
        nr: Option<usize>,
    },
    /// Evaluate every configured (method, nr) pair alongside an HDM-only run.
    ShadowCompare {
        #[command(flatten)]
        common: ConfigArgs,
    },
    /// Benchmark incremental SVD updates against direct refactorization.
    SvdBench {
        /// Comma-separated size triplets rows x block_cols x blocks,
        /// e.g. 200x10x5,400x20x10.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(common: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::from_file(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Optimize { common, method, nr } => {
            let mut config = load_config(&common)?;
            if let Some(method) = method {
                config.method = method;
            }
            if let Some(nr) = nr {
                config.nr = nr;
            }
            config.validate().context("invalid configuration")?;
            let report = driver::optimize(&config, &common.out)?;
            println!(
                "method={} nr={} n_s={} n_s_d={} n_a={} n_e={} c_rel={:.6} termination={:?}",
                report.method,
                report.nr,
                report.n_s,
                report.n_s_d,
                report.n_a,
                report.n_e,
                report.c_rel,
                report.termination,
            );
            println!("artifacts in {}", common.out.display());
        }
        Command::ShadowCompare { common } => {
            let config = load_config(&common)?;
            let summary = driver::shadow_compare(&config, &common.out)?;
            for row in &summary.aggregates {
                println!(
                    "method={} nr={} queries={} median_rel_error={:.3e} median_wall_s={:.4}",
                    row.method, row.nr, row.queries, row.median_rel_error, row.median_wall_s
                );
            }
            println!("artifacts in {}", common.out.display());
        }
        Command::SvdBench { sizes, out, seed } => {
            run_svd_bench(&sizes, &out, seed)?;
        }
    }
    Ok(())
}

fn parse_size(spec: &str) -> anyhow::Result<(usize, usize, usize)> {
    let parts: Vec<&str> = spec.split('x').collect();
    if parts.len() != 3 {
        bail!("size '{spec}' must be rows x block_cols x blocks, e.g. 200x10x5");
    }
    Ok((
        parts[0].trim().parse().context("rows")?,
        parts[1].trim().parse().context("block_cols")?,
        parts[2].trim().parse().context("blocks")?,
    ))
}

fn run_svd_bench(sizes: &[String], out: &PathBuf, seed: u64) -> anyhow::Result<()> {
    if sizes.is_empty() {
        bail!("--sizes requires at least one rows x block_cols x blocks triplet");
    }
    std::fs::create_dir_all(out)?;
    let path = out.join("svd_bench.csv");
    let mut file = std::fs::File::create(&path)?;
    writeln!(
        file,
        "size,rows,block_cols,blocks,incremental_ms,direct_ms,max_sv_rel_err"
    )?;
    for spec in sizes {
        let (rows, block_cols, blocks) = parse_size(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all: Vec<DMatrix<f64>> = (0..blocks)
            .map(|_| DMatrix::from_fn(rows, block_cols, |_, _| rng.random_range(-1.0..1.0)))
            .collect();

        let started = std::time::Instant::now();
        let mut raw = all[0].clone();
        let mut running = svd::truncated_svd(&raw, 1e-8)?;
        for block in &all[1..] {
            let block_svd = svd::truncated_svd(block, 1e-8)?;
            let mut grown = DMatrix::zeros(rows, raw.ncols() + block_cols);
            grown.view_mut((0, 0), (rows, raw.ncols())).copy_from(&raw);
            grown
                .view_mut((0, raw.ncols()), (rows, block_cols))
                .copy_from(block);
            raw = grown;
            running = svd::incremental_append(&running, &block_svd, &raw, 1e-2, 1e-8)?;
        }
        let incremental_ms = started.elapsed().as_secs_f64() * 1e3;

        let started = std::time::Instant::now();
        let direct = svd::truncated_svd(&raw, 1e-8)?;
        let direct_ms = started.elapsed().as_secs_f64() * 1e3;

        let mut max_rel = 0.0_f64;
        for i in 0..running.rank().min(direct.rank()) {
            let rel = (running.singular_values[i] - direct.singular_values[i]).abs()
                / direct.singular_values[i];
            max_rel = max_rel.max(rel);
        }
        writeln!(
            file,
            "{spec},{rows},{block_cols},{blocks},{incremental_ms:.3},{direct_ms:.3},{max_rel:.3e}"
        )?;
        println!(
            "{spec}: incremental {incremental_ms:.2} ms, direct {direct_ms:.2} ms, max sv rel err {max_rel:.2e}"
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}
