//! Command-line workflows over the library.
//!
//! Verbs: `gradcheck`, `train`, `eval`, `ablate`, `bench`, `dump-features`.
//! Exit codes: 0 success, 1 validation failure, 2 I/O or parse failure.
//! Every file a command writes is a pure function of the config's seeds;
//! wall-clock timings go to stderr only, so reruns stay byte-identical.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{checkpoint, load_cloud, load_run_config, RunConfig};
use crate::numerics::batch_norm::BnMode;
use crate::numerics::gradcheck::FD_TOLERANCE;
use crate::numerics::tape::{CombineRule, GradTape, PoolMode};
use crate::pnp::block::search_neighbors;
use crate::pnp::check::run_variant_suite;
use crate::pnp::complexity::{count_flops, count_params, instrumented_flops};
use crate::pnp::config::RegularizationOp;
use crate::pnp::params::PnpParams;
use crate::rng::Rng;
use crate::toy::classifier::{forward as classifier_forward, ClassifierParams};
use crate::toy::dataset::generate;
use crate::toy::train::{evaluate, neighbor_tables, train_with_tables};

const USAGE: &str = "\
usage: pnp3d <command> [flags]

commands:
  gradcheck       verify analytic gradients of all 36 block variants
  train           train the toy classifier, write report + checkpoint
  eval            re-evaluate a checkpoint on the test split
  ablate          train the published variant grid, write a CSV table
  bench           complexity report: parameters, multiply-adds, latency
  dump-features   export per-point activations before/after the block

flags:
  --config PATH      JSON run configuration (defaults used when omitted)
  --out DIR          output directory (default .)
  --seed N           override the training/probe seed
  --tolerance X      gradcheck acceptance threshold (default 1e-5)
  --n N              bench point count (default 1024)
  --checkpoint PATH  checkpoint to evaluate / export from
  --cloud PATH       point-cloud file (xyz or off) for dump-features
";

struct CliArgs {
    verb: String,
    config: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    tolerance: Option<f64>,
    n: Option<usize>,
    checkpoint: Option<PathBuf>,
    cloud: Option<PathBuf>,
}

/// Entry point used by the binary; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    if args.iter().any(|a| a == "--help" || a == "-h") {
        println!("{USAGE}");
        return 0;
    }
    match execute(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io { .. } | Error::Parse { .. } => 2,
                _ => 1,
            }
        }
    }
}

fn execute(args: &[String]) -> Result<()> {
    let cli = parse_args(args)?;
    let mut config = match &cli.config {
        Some(path) => load_run_config(path)?,
        None => {
            let mut c = RunConfig::default();
            c.ablation_seeds = RunConfig::default_ablation_seeds();
            c
        }
    };
    if let Some(seed) = cli.seed {
        config.classifier.seed = seed;
    }

    match cli.verb.as_str() {
        "gradcheck" => cmd_gradcheck(&config, cli.tolerance.unwrap_or(FD_TOLERANCE)),
        "train" => cmd_train(&config, &cli.out),
        "eval" => cmd_eval(&config, &cli.out, cli.checkpoint.as_deref()),
        "ablate" => cmd_ablate(&config, &cli.out),
        "bench" => cmd_bench(&config, cli.n.unwrap_or(1024), &cli.out),
        "dump-features" => {
            let ckpt = cli.checkpoint.as_deref().ok_or_else(|| {
                Error::Param("dump-features requires --checkpoint PATH".into())
            })?;
            let cloud = cli
                .cloud
                .as_deref()
                .ok_or_else(|| Error::Param("dump-features requires --cloud PATH".into()))?;
            cmd_dump_features(&config, ckpt, cloud, &cli.out)
        }
        other => Err(Error::Param(format!(
            "unknown command \"{other}\"\n\n{USAGE}"
        ))),
    }
}

fn parse_args(args: &[String]) -> Result<CliArgs> {
    let mut it = args.iter();
    let verb = it
        .next()
        .ok_or_else(|| Error::Param(format!("missing command\n\n{USAGE}")))?
        .clone();
    let mut cli = CliArgs {
        verb,
        config: None,
        out: PathBuf::from("."),
        seed: None,
        tolerance: None,
        n: None,
        checkpoint: None,
        cloud: None,
    };
    while let Some(flag) = it.next() {
        let mut value = || {
            it.next()
                .ok_or_else(|| Error::Param(format!("flag {flag} needs a value")))
        };
        match flag.as_str() {
            "--config" => cli.config = Some(PathBuf::from(value()?)),
            "--out" => cli.out = PathBuf::from(value()?),
            "--seed" => {
                cli.seed = Some(value()?.parse().map_err(|_| {
                    Error::Param("--seed needs an unsigned integer".into())
                })?)
            }
            "--tolerance" => {
                cli.tolerance = Some(value()?.parse().map_err(|_| {
                    Error::Param("--tolerance needs a number".into())
                })?)
            }
            "--n" => {
                cli.n = Some(value()?.parse().map_err(|_| {
                    Error::Param("--n needs an unsigned integer".into())
                })?)
            }
            "--checkpoint" => cli.checkpoint = Some(PathBuf::from(value()?)),
            "--cloud" => cli.cloud = Some(PathBuf::from(value()?)),
            other => {
                return Err(Error::Param(format!(
                    "unknown argument \"{other}\"\n\n{USAGE}"
                )))
            }
        }
    }
    Ok(cli)
}

fn ensure_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_out(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn cmd_gradcheck(config: &RunConfig, tolerance: f64) -> Result<()> {
    let started = Instant::now();
    let outcomes = run_variant_suite(config.classifier.seed)?;
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for o in &outcomes {
        println!(
            "gradcheck {:<40} max relative error {:9.3e}",
            o.label(),
            o.max_rel_error
        );
        if o.max_rel_error.is_nan() {
            return Err(Error::Domain(format!(
                "non-finite gradient in variant {}",
                o.label()
            )));
        }
        worst = worst.max(o.max_rel_error);
        if !(o.max_rel_error < tolerance) {
            failed.push(o.label());
        }
    }
    eprintln!(
        "gradcheck: 36 variants in {:.1}s",
        started.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        println!("gradcheck: all 36 variants within {tolerance:e} (worst {worst:.3e})");
        Ok(())
    } else {
        Err(Error::Param(format!(
            "{} variants exceed tolerance {tolerance:e}: {}",
            failed.len(),
            failed.join(", ")
        )))
    }
}

fn cmd_train(config: &RunConfig, out: &Path) -> Result<()> {
    ensure_out(out)?;
    let started = Instant::now();
    let data = generate(&config.dataset)?;
    let train_tables = neighbor_tables(&data.train, &config.classifier)?;
    let test_tables = neighbor_tables(&data.test, &config.classifier)?;
    let (params, report) =
        train_with_tables(&config.classifier, &data, &train_tables, &test_tables)?;

    let report_path = out.join(&config.output.report);
    let mut json = serde_json::to_string_pretty(&report).expect("report serialization");
    json.push('\n');
    write_out(&report_path, json)?;

    let ckpt_path = out.join(&config.output.checkpoint);
    checkpoint::save(&ckpt_path, &params.named_tensors())?;

    println!(
        "train: {} parameters, final test accuracy {:.4}",
        report.param_count, report.final_test_accuracy
    );
    println!("train: wrote {} and {}", report_path.display(), ckpt_path.display());
    eprintln!("train: {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct EvalReport {
    test_accuracy: f64,
    confusion: Vec<Vec<usize>>,
}

fn cmd_eval(config: &RunConfig, out: &Path, ckpt: Option<&Path>) -> Result<()> {
    ensure_out(out)?;
    let default_path = out.join(&config.output.checkpoint);
    let ckpt_path = ckpt.unwrap_or(&default_path);
    let entries = checkpoint::load(ckpt_path)?;

    let mut params =
        ClassifierParams::init(&config.classifier, &mut Rng::new(config.classifier.seed))?;
    params.load_named(&entries)?;

    let data = generate(&config.dataset)?;
    let test_tables = neighbor_tables(&data.test, &config.classifier)?;
    let (accuracy, confusion) = evaluate(&mut params, &config.classifier, &data.test, &test_tables)?;

    let report_path = out.join(&config.output.eval_report);
    let mut json = serde_json::to_string_pretty(&EvalReport {
        test_accuracy: accuracy,
        confusion,
    })
    .expect("eval report serialization");
    json.push('\n');
    write_out(&report_path, json)?;

    println!("eval: test accuracy {accuracy:.4}");
    println!("eval: wrote {}", report_path.display());
    Ok(())
}

/// The published variant grid: six pooling/regularization combinations,
/// plus the five alternative combine rules around the reference model.
pub fn ablation_grid() -> Vec<(PoolMode, RegularizationOp, CombineRule)> {
    use PoolMode::{Avg, Max};
    let geo = CombineRule::GeometricMean;
    vec![
        (Max, RegularizationOp::Product, geo),
        (Max, RegularizationOp::Sum, geo),
        (Max, RegularizationOp::Subtract, geo),
        (Avg, RegularizationOp::Product, geo),
        (Avg, RegularizationOp::Sum, geo),
        (Avg, RegularizationOp::Subtract, geo), // reference
        (Avg, RegularizationOp::Subtract, CombineRule::Sum),
        (Avg, RegularizationOp::Subtract, CombineRule::Product),
        (Avg, RegularizationOp::Subtract, CombineRule::GrandMean),
        (Avg, RegularizationOp::Subtract, CombineRule::QuadraticMean),
        (Avg, RegularizationOp::Subtract, CombineRule::HarmonicMean),
    ]
}

fn cmd_ablate(config: &RunConfig, out: &Path) -> Result<()> {
    ensure_out(out)?;
    let started = Instant::now();
    if !config.classifier.use_pnp {
        return Err(Error::Config(
            "the ablation sweep varies the block; set classifier.use_pnp = true".into(),
        ));
    }
    let data = generate(&config.dataset)?;
    // Neighbor tables depend only on coordinates and k, shared by the grid.
    let train_tables = neighbor_tables(&data.train, &config.classifier)?;
    let test_tables = neighbor_tables(&data.test, &config.classifier)?;

    let mut csv = String::from(
        "pooling,regularization,combine,mean_accuracy,std_accuracy,seeds,reference\n",
    );
    let reference = (
        PoolMode::Avg,
        RegularizationOp::Subtract,
        CombineRule::GeometricMean,
    );
    for (pooling, regularization, combine) in ablation_grid() {
        let mut accuracies = Vec::new();
        let mut diverged = false;
        for &seed in &config.ablation_seeds {
            let mut cfg = config.classifier.clone();
            cfg.pnp.pooling = pooling;
            cfg.pnp.regularization = regularization;
            cfg.pnp.combine = combine;
            cfg.seed = seed;
            match train_with_tables(&cfg, &data, &train_tables, &test_tables) {
                Ok((_, report)) => accuracies.push(report.final_test_accuracy),
                Err(Error::Diverged { epoch }) => {
                    eprintln!(
                        "ablate: variant {:?}/{}/{} diverged at epoch {epoch} (seed {seed})",
                        pooling,
                        regularization.name(),
                        combine.name()
                    );
                    diverged = true;
                    break;
                }
                Err(other) => return Err(other),
            }
        }
        let (mean, std) = if diverged {
            (f64::NAN, f64::NAN)
        } else {
            mean_std(&accuracies)
        };
        let is_ref = (pooling, regularization, combine) == reference;
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6},{},{}\n",
            pool_name(pooling),
            regularization.name(),
            combine.name(),
            mean,
            std,
            config.ablation_seeds.len(),
            is_ref
        ));
    }

    let path = out.join(&config.output.ablation);
    write_out(&path, &csv)?;
    print!("{csv}");
    println!("ablate: wrote {}", path.display());
    eprintln!("ablate: {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn pool_name(mode: PoolMode) -> &'static str {
    match mode {
        PoolMode::Max => "max",
        PoolMode::Avg => "avg",
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn cmd_bench(config: &RunConfig, n: usize, out: &Path) -> Result<()> {
    ensure_out(out)?;
    let pnp = &config.classifier.pnp;
    let seed = config.classifier.seed;

    let analytic_params = count_params(pnp)?;
    let enumerated = PnpParams::init(pnp, &mut Rng::new(seed))?.param_count();
    if analytic_params.total != enumerated {
        return Err(Error::Integrity(format!(
            "analytic parameter count {} disagrees with enumeration {enumerated}",
            analytic_params.total
        )));
    }

    let analytic = count_flops(pnp, n)?;
    let instrumented = instrumented_flops(pnp, n, seed)?;
    if analytic.total != instrumented {
        return Err(Error::Integrity(format!(
            "analytic flops {} disagree with instrumented forward {instrumented}",
            analytic.total
        )));
    }
    let doubled = count_flops(pnp, 2 * n)?;
    let ratio = doubled.total as f64 / analytic.total as f64;

    let mut text = String::new();
    text.push_str(&format!(
        "block complexity (channels {}, neighbors {}, reduction {})\n",
        pnp.channels, pnp.neighbors, pnp.reduction
    ));
    text.push_str(&format!("parameters (analytic):    {}\n", analytic_params.total));
    text.push_str(&format!("parameters (enumerated):  {enumerated}\n"));
    for (name, count) in &analytic_params.per_tensor {
        text.push_str(&format!("  {name:<24} {count}\n"));
    }
    text.push_str(&format!("\nmultiply-adds at n={n}\n"));
    text.push_str(&format!("flops (analytic):     {}\n", analytic.total));
    text.push_str(&format!("flops (instrumented): {instrumented}\n"));
    for (name, count) in &analytic.per_stage {
        text.push_str(&format!("  {name:<24} {count}\n"));
    }
    text.push_str(&format!(
        "\nflops at n={}: {} (ratio {ratio:.3})\n",
        2 * n,
        doubled.total
    ));

    let path = out.join(&config.output.bench);
    write_out(&path, &text)?;
    print!("{text}");
    println!("bench: wrote {}", path.display());

    // Latency is inherently non-deterministic; keep it off the outputs.
    let latency = {
        let mut best = f64::INFINITY;
        for probe in 0..3 {
            let t = Instant::now();
            instrumented_flops(pnp, n, seed.wrapping_add(probe))?;
            best = best.min(t.elapsed().as_secs_f64());
        }
        best
    };
    eprintln!("bench: forward latency at n={n}: {:.3} ms", latency * 1e3);
    Ok(())
}

fn cmd_dump_features(
    config: &RunConfig,
    ckpt_path: &Path,
    cloud_path: &Path,
    out: &Path,
) -> Result<()> {
    ensure_out(out)?;
    if !config.classifier.use_pnp {
        return Err(Error::Config(
            "dump-features needs a model with the block enabled".into(),
        ));
    }
    let cloud = load_cloud(cloud_path)?;
    if cloud.len() != config.dataset.points_per_cloud {
        return Err(Error::Config(format!(
            "cloud holds {} points but the config expects {}",
            cloud.len(),
            config.dataset.points_per_cloud
        )));
    }

    let entries = checkpoint::load(ckpt_path)?;
    let mut params =
        ClassifierParams::init(&config.classifier, &mut Rng::new(config.classifier.seed))?;
    params.load_named(&entries)?;
    // Inference matches toy::evaluate: per-cloud normalization statistics.
    params.set_mode(BnMode::Training);

    let idx = search_neighbors(&cloud, &config.classifier.pnp)?;
    let mut tape = GradTape::new();
    let ids = params.register(&mut tape);
    let fwd = classifier_forward(
        &mut tape,
        &params,
        &ids,
        &cloud,
        Some(&idx),
        &config.classifier.pnp,
    )?;
    let before = per_point_heat(tape.value(fwd.before_block).data(), cloud.len());
    let after_id = fwd.after_block.expect("block enabled");
    let after = per_point_heat(tape.value(after_id).data(), cloud.len());

    let mut csv = String::from("x,y,z,before,after\n");
    for i in 0..cloud.len() {
        let p = cloud.point(i);
        csv.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            p[0], p[1], p[2], before[i], after[i]
        ));
    }
    let path = out.join(&config.output.features);
    write_out(&path, &csv)?;
    println!("dump-features: wrote {} rows to {}", cloud.len(), path.display());
    Ok(())
}

/// Mean activation per point, min-max normalized into [0, 1] for heat-map
/// style plotting (a constant map normalizes to all zeros).
fn per_point_heat(features: &[f64], n: usize) -> Vec<f64> {
    let channels = features.len() / n;
    let mut heat: Vec<f64> = (0..n)
        .map(|i| {
            features[i * channels..(i + 1) * channels]
                .iter()
                .sum::<f64>()
                / channels as f64
        })
        .collect();
    let lo = heat.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = heat.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in &mut heat {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
    heat
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_grid_has_eleven_distinct_rows() {
        let grid = ablation_grid();
        assert_eq!(grid.len(), 11);
        let mut unique = grid.clone();
        unique.sort_by_key(|(p, r, c)| (format!("{p:?}"), r.name(), c.name()));
        unique.dedup();
        assert_eq!(unique.len(), 11);
        assert!(grid.contains(&(
            PoolMode::Avg,
            RegularizationOp::Subtract,
            CombineRule::GeometricMean
        )));
    }

    #[test]
    fn heat_normalization_stays_in_unit_interval() {
        let heat = per_point_heat(&[1.0, 3.0, -2.0, 0.0, 5.0, 5.0], 3);
        assert!(heat.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(heat.len(), 3);
        // constant map degenerates to zeros
        let flat = per_point_heat(&[2.0, 2.0, 2.0, 2.0], 2);
        assert_eq!(flat, vec![0.0, 0.0]);
    }

    #[test]
    fn unknown_arguments_are_rejected() {
        let args: Vec<String> = vec!["bench".into(), "--bogus".into()];
        assert!(matches!(parse_args(&args), Err(Error::Param(_))));
        let args: Vec<String> = vec!["bench".into(), "--seed".into(), "x".into()];
        assert!(matches!(parse_args(&args), Err(Error::Param(_))));
    }

    #[test]
    fn mean_std_of_constant_is_zero_spread() {
        let (m, s) = mean_std(&[0.5, 0.5, 0.5]);
        assert_eq!(m, 0.5);
        assert_eq!(s, 0.0);
    }
}
