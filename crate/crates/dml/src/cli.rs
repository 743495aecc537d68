//! The `dml` command line.
//!
//! ```text
//! dml <subcommand> --config PATH [--set key=value]... [--out DIR] ...
//! ```
//!
//! Subcommands: `train` (one config), `pretrain` (teacher checkpoint),
//! `compare` (all four modes over shared seeds), `sweep-k` (cohort sizes),
//! `analyze` (flatness/entropy/rank profiles on checkpoints), `gradcheck`
//! (finite-difference suite), `worker` (distributed cohort member).
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 runtime error,
//! 3 gradient-check tolerance failure.
//!
//! All file outputs land under `--out` (default: the config's `out_dir`);
//! stdout carries a human-readable summary only. Primary outputs are
//! byte-identical across reruns of the same config; wall-clock timing is
//! quarantined in `meta.json`.
//!
//! CSV layouts:
//! - `metrics.csv`: `epoch,member,train_loss,test_acc,entropy`
//! - `compare.csv`: `mode,seed,member,test_acc`; summary rows use
//!   `delta_<mode>` in the mode column and give the mean accuracy delta
//!   against the matched independent runs.
//! - `sweep.csv`: `k,seed,mode,member,test_acc`
//! - `sweep_summary.csv`:
//!   `k,mode,mean_member_acc,std_across_runs,std_within_cohort,ensemble_mean,ensemble_std`
//!   (both deviation flavors: across seeded runs, and across members inside
//!   a cohort)
//! - `flatness.csv`: `member,sigma,mean_loss,std,trials,noise_seed`
//! - `entropy.csv`: `member,entropy`
//! - `rank_profile.csv`: `member,rank,mass`

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{avg_posterior_entropy, ensemble_accuracy, flatness_probe, topk_mass_profile};
use crate::data::{
    apply_override, write_checkpoints, write_report, AnalysisConfig, Dataset, ExperimentConfig,
};
use crate::error::{Error, Result};
use crate::model::load_checkpoint;
use crate::rng::mix;
use crate::trainer::{
    pretrain_teacher, train, CohortConfig, DistillRuntime, MemberSpec, Mode, TrainOutcome,
};
use crate::transport::{run_distributed_worker, WirePrecision, WorkerOptions};
use crate::Real;

#[derive(Parser)]
#[command(
    name = "dml",
    version,
    about = "Mutual learning for classifier cohorts",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration and write its report and checkpoints.
    Train(RunArgs),
    /// Train a single independent network and save it as teacher.ckpt.
    Pretrain(RunArgs),
    /// Run independent/dml/dml_e/distill over shared seeds; emit a delta table.
    Compare(CompareArgs),
    /// Sweep cohort sizes with matched independent baselines.
    #[command(name = "sweep-k")]
    SweepK(SweepArgs),
    /// Flatness, entropy, and rank-profile diagnostics on saved checkpoints.
    Analyze(RunArgs),
    /// Finite-difference validation of all primitives and losses.
    Gradcheck(GradcheckArgs),
    /// One distributed cohort member exchanging posteriors over TCP.
    Worker(WorkerArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Dotted-key config overrides, e.g. --set optimizer.lr=0.05
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (default: the config's out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Paired seed replicates.
    #[arg(long, default_value_t = 10)]
    seeds: u32,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Seed replicates per cohort size.
    #[arg(long, default_value_t = 5)]
    seeds: u32,
    /// Cohort sizes to sweep.
    #[arg(long, value_delimiter = ',', default_values_t = vec![2usize, 3, 4, 5])]
    ks: Vec<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per check target.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Max allowed relative error.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct WorkerArgs {
    #[command(flatten)]
    run: RunArgs,
    /// This worker's cohort index.
    #[arg(long = "member-id")]
    member_id: u16,
    /// host:port of every member, ordered by member id.
    #[arg(long, value_delimiter = ',')]
    endpoints: Vec<String>,
    /// Use 64-bit wire payloads instead of 32-bit.
    #[arg(long)]
    wide: bool,
    /// Seconds to wait for peers before aborting.
    #[arg(long, default_value_t = 30.0)]
    timeout_secs: f64,
}

/// Parses argv, dispatches, and maps the outcome onto the exit-code
/// contract. This is the whole binary; `main` just forwards to it.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::GradCheck(_) => 3,
                e if e.is_validation() => 1,
                _ => 2,
            }
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Pretrain(args) => cmd_pretrain(args),
        Cmd::Compare(args) => cmd_compare(args),
        Cmd::SweepK(args) => cmd_sweep(args),
        Cmd::Analyze(args) => cmd_analyze(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
        Cmd::Worker(args) => cmd_worker(args),
    }
}

struct Loaded {
    config: ExperimentConfig,
    out_dir: PathBuf,
}

fn load(args: &RunArgs) -> Result<Loaded> {
    let text = fs::read_to_string(&args.config).map_err(|e| {
        Error::Config(format!("cannot read config {}: {e}", args.config.display()))
    })?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", args.config.display())))?;
    for pair in &args.set {
        let (key, raw) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set: expected key=value, got \"{pair}\""))
        })?;
        apply_override(&mut value, key, raw)?;
    }
    let config = ExperimentConfig::from_value(value, args.config.parent().map(PathBuf::from))?;
    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&config.file.out_dir));
    Ok(Loaded { config, out_dir })
}

fn print_final_accuracy(outcome: &TrainOutcome) {
    for row in outcome.report.final_rows() {
        println!(
            "member {}: test_acc {:.4}  train_loss {:.4}  entropy {:.4}",
            row.member, row.test_acc, row.train_loss, row.entropy
        );
    }
}

fn cmd_train(args: RunArgs) -> Result<()> {
    let loaded = load(&args)?;
    let dataset = loaded.config.build_dataset()?;
    let cohort = loaded.config.cohort_config()?;
    let mut outcome = train(&cohort, &dataset)?;
    outcome.report.config_echo = loaded.config.echo();
    outcome.report.checkpoints = write_checkpoints(&outcome.members, &loaded.out_dir)?;
    write_report(&outcome.report, &loaded.out_dir)?;
    println!(
        "trained mode {} with {} member(s) for {} epochs on {}",
        cohort.mode.as_str(),
        cohort.members.len(),
        cohort.epochs,
        dataset.provenance
    );
    print_final_accuracy(&outcome);
    println!("report: {}", loaded.out_dir.join("report.json").display());
    Ok(())
}

fn cmd_pretrain(args: RunArgs) -> Result<()> {
    let loaded = load(&args)?;
    let dataset = loaded.config.build_dataset()?;
    let cohort = loaded.config.cohort_config()?;
    let mut outcome = pretrain_teacher(&cohort, &dataset)?;
    fs::create_dir_all(&loaded.out_dir)?;
    fs::write(
        loaded.out_dir.join("teacher.ckpt"),
        crate::model::save_checkpoint(&outcome.members[0]),
    )?;
    outcome.report.config_echo = loaded.config.echo();
    outcome.report.checkpoints = vec!["teacher.ckpt".into()];
    write_report(&outcome.report, &loaded.out_dir)?;
    println!("pretrained teacher on {}", dataset.provenance);
    print_final_accuracy(&outcome);
    println!("teacher: {}", loaded.out_dir.join("teacher.ckpt").display());
    Ok(())
}

/// Derived per-replicate seeds: every mode inside one replicate shares
/// member inits and data order, so mode is the only varying factor.
fn replicate_members(base: &[MemberSpec], rep: u32) -> Vec<MemberSpec> {
    base.iter()
        .map(|m| MemberSpec::new(m.hidden.clone(), mix(&[m.seed, u64::from(rep), 0xC0])))
        .collect()
}

fn replicate_data_seed(base: u64, rep: u32) -> u64 {
    mix(&[base, u64::from(rep), 0xDA])
}

fn train_mode(
    base: &CohortConfig,
    mode: Mode,
    members: Vec<MemberSpec>,
    data_seed: u64,
    distill: Option<DistillRuntime>,
    dataset: &Dataset,
) -> Result<TrainOutcome> {
    let cfg = CohortConfig {
        mode,
        members,
        distill,
        data_seed,
        ..base.clone()
    };
    train(&cfg, dataset)
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let loaded = load(&args.run)?;
    let dataset = loaded.config.build_dataset()?;
    let base = loaded.config.cohort_config()?;
    if base.members.len() < 2 {
        return Err(Error::Config(
            "members: compare needs K >= 2 so the mimicry modes are defined".into(),
        ));
    }
    if args.seeds == 0 {
        return Err(Error::Config("--seeds: must be >= 1".into()));
    }
    let distill_file = loaded.config.file.distill.clone().unwrap_or_default();
    let teacher_hidden = distill_file.teacher_hidden.clone().unwrap_or_else(|| {
        base.members[0].hidden.iter().map(|&h| h * 2).collect()
    });
    let temperature = distill_file.temperature;

    let modes = [Mode::Independent, Mode::Dml, Mode::DmlE, Mode::Distill];
    let mut rows: Vec<(Mode, u32, usize, f64)> = Vec::new();
    for rep in 0..args.seeds {
        let members = replicate_members(&base.members, rep);
        let data_seed = replicate_data_seed(base.data_seed, rep);
        let teacher = {
            let teacher_cfg = CohortConfig {
                mode: Mode::Independent,
                members: vec![MemberSpec::new(
                    teacher_hidden.clone(),
                    mix(&[base.data_seed, u64::from(rep), 0x7EAC]),
                )],
                data_seed,
                distill: None,
                ..base.clone()
            };
            pretrain_teacher(&teacher_cfg, &dataset)?.members.remove(0)
        };
        for mode in modes {
            let distill = (mode == Mode::Distill).then(|| DistillRuntime {
                teacher: teacher.clone(),
                temperature,
            });
            let outcome = train_mode(&base, mode, members.clone(), data_seed, distill, &dataset)?;
            for row in outcome.report.final_rows() {
                rows.push((mode, rep, row.member, row.test_acc));
            }
        }
        println!("replicate {rep} done");
    }

    let mean_of = |mode: Mode| -> f64 {
        let accs: Vec<f64> = rows
            .iter()
            .filter(|(m, ..)| *m == mode)
            .map(|&(_, _, _, a)| a)
            .collect();
        accs.iter().sum::<f64>() / accs.len() as f64
    };
    let indep = mean_of(Mode::Independent);

    let mut csv = String::from("mode,seed,member,test_acc\n");
    for (mode, rep, member, acc) in &rows {
        csv.push_str(&format!("{},{rep},{member},{acc}\n", mode.as_str()));
    }
    for mode in [Mode::Dml, Mode::DmlE, Mode::Distill] {
        csv.push_str(&format!("delta_{},,,{}\n", mode.as_str(), mean_of(mode) - indep));
    }
    fs::create_dir_all(&loaded.out_dir)?;
    fs::write(loaded.out_dir.join("compare.csv"), csv)?;

    println!("\nmean test accuracy over {} seeds:", args.seeds);
    for mode in modes {
        let delta = mean_of(mode) - indep;
        println!(
            "  {:<12} {:.4}  (delta vs independent {:+.4})",
            mode.as_str(),
            mean_of(mode),
            delta
        );
    }
    println!("table: {}", loaded.out_dir.join("compare.csv").display());
    Ok(())
}

fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() as f64 - 1.0)).sqrt()
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let loaded = load(&args.run)?;
    let dataset = loaded.config.build_dataset()?;
    let base = loaded.config.cohort_config()?;
    if args.seeds == 0 {
        return Err(Error::Config("--seeds: must be >= 1".into()));
    }
    if args.ks.iter().any(|&k| k < 2) {
        return Err(Error::Config("--ks: cohort sizes must be >= 2".into()));
    }
    let proto = base.members[0].clone();

    let mut csv = String::from("k,seed,mode,member,test_acc\n");
    let mut summary = String::from(
        "k,mode,mean_member_acc,std_across_runs,std_within_cohort,ensemble_mean,ensemble_std\n",
    );
    for &k in &args.ks {
        for mode in [Mode::Independent, Mode::Dml] {
            let mut run_means = Vec::new();
            let mut within_vars = Vec::new();
            let mut ensembles = Vec::new();
            for rep in 0..args.seeds {
                let members: Vec<MemberSpec> = (0..k)
                    .map(|j| {
                        MemberSpec::new(
                            proto.hidden.clone(),
                            mix(&[proto.seed, u64::from(rep), j as u64, 0x5EED]),
                        )
                    })
                    .collect();
                let data_seed = replicate_data_seed(base.data_seed, rep);
                let outcome = train_mode(&base, mode, members, data_seed, None, &dataset)?;
                let accs: Vec<f64> = outcome
                    .report
                    .final_rows()
                    .iter()
                    .map(|r| r.test_acc)
                    .collect();
                for (member, acc) in accs.iter().enumerate() {
                    csv.push_str(&format!("{k},{rep},{},{member},{acc}\n", mode.as_str()));
                }
                run_means.push(accs.iter().sum::<f64>() / accs.len() as f64);
                let s = std_dev(&accs);
                within_vars.push(s * s);
                ensembles.push(ensemble_accuracy(
                    &outcome.members,
                    &dataset.test_x,
                    &dataset.test_y,
                )?);
            }
            let mean = run_means.iter().sum::<f64>() / run_means.len() as f64;
            let within =
                (within_vars.iter().sum::<f64>() / within_vars.len() as f64).sqrt();
            let ens_mean = ensembles.iter().sum::<f64>() / ensembles.len() as f64;
            summary.push_str(&format!(
                "{k},{},{mean},{},{within},{ens_mean},{}\n",
                mode.as_str(),
                std_dev(&run_means),
                std_dev(&ensembles)
            ));
            println!(
                "k={k} {:<12} mean member acc {:.4}  ensemble {:.4}",
                mode.as_str(),
                mean,
                ens_mean
            );
        }
    }
    fs::create_dir_all(&loaded.out_dir)?;
    fs::write(loaded.out_dir.join("sweep.csv"), csv)?;
    fs::write(loaded.out_dir.join("sweep_summary.csv"), summary)?;
    println!(
        "tables: {} and sweep_summary.csv",
        loaded.out_dir.join("sweep.csv").display()
    );
    Ok(())
}

fn cmd_analyze(args: RunArgs) -> Result<()> {
    let loaded = load(&args)?;
    let dataset = loaded.config.build_dataset()?;
    let analysis: AnalysisConfig = loaded.config.analysis();
    let mut sigmas: Vec<Real> = vec![0.0];
    sigmas.extend(analysis.sigmas.iter().copied().filter(|&s| s != 0.0));
    let k = loaded.config.file.members.len();
    let topk = analysis.topk.min(dataset.num_classes());

    let mut flatness_csv = String::from("member,sigma,mean_loss,std,trials,noise_seed\n");
    let mut entropy_csv = String::from("member,entropy\n");
    let mut rank_csv = String::from("member,rank,mass\n");
    let mut members_json = Vec::new();

    for member in 0..k {
        let path = loaded.out_dir.join(format!("member_{member}.ckpt"));
        let bytes = fs::read(&path).map_err(|e| {
            Error::Config(format!(
                "checkpoint {} not found ({e}); train into this --out first",
                path.display()
            ))
        })?;
        let params = load_checkpoint(&bytes)?;
        let table = flatness_probe(
            &params,
            &dataset,
            &sigmas,
            analysis.trials,
            mix(&[analysis.noise_seed, member as u64]),
        )?;
        for row in &table.rows {
            flatness_csv.push_str(&format!(
                "{member},{},{},{},{},{}\n",
                row.sigma, row.mean_loss, row.std, row.trials, row.noise_seed
            ));
        }
        let entropy = avg_posterior_entropy(&params, &dataset)?;
        entropy_csv.push_str(&format!("{member},{entropy}\n"));
        let profile = topk_mass_profile(&params, &dataset, topk)?;
        for (rank, mass) in profile.masses.iter().enumerate() {
            rank_csv.push_str(&format!("{member},{},{mass}\n", rank + 1));
        }
        println!(
            "member {member}: entropy {entropy:.4}, base train loss {:.4}",
            table.base_loss
        );
        members_json.push(serde_json::json!({
            "member": member,
            "entropy": entropy,
            "flatness": table,
            "rank_profile": profile,
        }));
    }

    fs::create_dir_all(&loaded.out_dir)?;
    fs::write(loaded.out_dir.join("flatness.csv"), flatness_csv)?;
    fs::write(loaded.out_dir.join("entropy.csv"), entropy_csv)?;
    fs::write(loaded.out_dir.join("rank_profile.csv"), rank_csv)?;
    let bundle = serde_json::json!({
        "config_echo": loaded.config.echo(),
        "members": members_json,
    });
    fs::write(
        loaded.out_dir.join("analysis.json"),
        format!("{}\n", serde_json::to_string_pretty(&bundle)?),
    )?;
    println!("analysis tables written under {}", loaded.out_dir.display());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let report = crate::gradcheck::run_gradcheck(args.seed, args.trials)?;
    for t in &report.targets {
        println!(
            "{:<22} trials {:>4}  max rel err {:.3e}",
            t.name, t.trials, t.max_rel_err
        );
    }
    println!(
        "max relative error {:.3e} (tolerance {:.1e})",
        report.worst(),
        args.tol
    );
    report.require(args.tol)
}

fn cmd_worker(args: WorkerArgs) -> Result<()> {
    let loaded = load(&args.run)?;
    let opts = WorkerOptions {
        precision: if args.wide {
            WirePrecision::F64
        } else {
            WirePrecision::F32
        },
        timeout: Duration::from_secs_f64(args.timeout_secs),
        out_dir: Some(loaded.out_dir.clone()),
    };
    let outcome = run_distributed_worker(&loaded.config, args.member_id, &args.endpoints, &opts)?;
    println!(
        "worker {} finished {} rounds of training",
        args.member_id,
        outcome.report.rows.len().saturating_sub(1)
    );
    print_final_accuracy(&outcome);
    println!(
        "report: {}",
        loaded
            .out_dir
            .join(format!("worker_{}", args.member_id))
            .join("report.json")
            .display()
    );
    Ok(())
}

/// Entry point used by the `dml` binary.
pub fn main_from_env() -> i32 {
    run(std::env::args_os())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::Path;

    fn write_config(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("config.json");
        fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn missing_config_exits_with_validation_code_and_names_path() {
        let code = run(["dml", "train", "--config", "definitely_missing.json"]);
        assert_eq!(code, 1);
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        assert_eq!(run(["dml", "frobnicate"]), 1);
        assert_eq!(run(["dml", "train", "--bogus-flag"]), 1);
        assert_eq!(run(["dml", "--help"]), 0);
    }

    #[test]
    fn train_writes_deterministic_outputs() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write_config(
            tmp.path(),
            r#"{
              "mode": "dml",
              "members": [{"hidden": [8], "seed": 1}, {"hidden": [8], "seed": 2}],
              "epochs": 2,
              "batch_size": 32,
              "dataset": {"kind": "spiral", "params": {"n_train": 120, "n_test": 60}}
            }"#,
        );
        let out_a = tmp.path().join("a");
        let out_b = tmp.path().join("b");
        for out in [&out_a, &out_b] {
            let code = run([
                "dml",
                "train",
                "--config",
                cfg.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]);
            assert_eq!(code, 0);
        }
        for file in ["report.json", "metrics.csv", "member_0.ckpt", "member_1.ckpt"] {
            let a = fs::read(out_a.join(file)).unwrap();
            let b = fs::read(out_b.join(file)).unwrap();
            assert_eq!(a, b, "{file} differs between identical runs");
        }
    }

    #[test]
    fn gradcheck_subcommand_exit_codes() {
        assert_eq!(
            run(["dml", "gradcheck", "--seed", "0", "--trials", "5", "--tol", "1e-4"]),
            0
        );
        // An absurd tolerance must trip the dedicated exit code.
        assert_eq!(
            run(["dml", "gradcheck", "--seed", "0", "--trials", "5", "--tol", "1e-18"]),
            3
        );
    }
}
