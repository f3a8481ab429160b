//! `coopseg` — batch pipeline for the cooperative segmentation lab:
//! generate synthetic benchmarks, train one method, evaluate saved models,
//! compare the four method topologies, and check gradients.

mod support;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use coopseg::coop::{ConnectionScheme, CoopModel};
use coopseg::data::{generate_dataset, Dataset, DatasetConfig};
use coopseg::gradcheck;
use coopseg::metrics::{EvalReport, Head};
use coopseg::model_io::{load_model_into, save_model};
use coopseg::segnet::{default_spec, NetworkSpec};
use coopseg::tensor::Elem;
use coopseg::trainer::{
    compare, evaluate, train, CoopWiring, EvalTag, TrainConfig, BOTTOM_SEED_OFFSET,
};

use support::{resolve_seed, write_manifest, CliError, KvConfig};

#[derive(Parser)]
#[command(
    name = "coopseg",
    version,
    about = "Cooperative feature-sharing segmentation lab",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic shapes dataset container.
    GenData(GenDataArgs),
    /// Train one method and write loss/eval CSVs plus the model file.
    Train(TrainArgs),
    /// Evaluate a saved model file on a dataset.
    Eval(EvalArgs),
    /// Train and evaluate all four methods across seeds.
    Compare(CompareArgs),
    /// Finite-difference and gradient-isolation checks.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of samples.
    #[arg(long)]
    n: Option<usize>,
    /// Image height (divisible by 4).
    #[arg(long)]
    h: Option<usize>,
    /// Image width (divisible by 4).
    #[arg(long)]
    w: Option<usize>,
    /// Class count including background.
    #[arg(long)]
    k: Option<usize>,
    /// Additive Gaussian noise stddev.
    #[arg(long)]
    noise: Option<f64>,
    /// Fewest shapes per image.
    #[arg(long)]
    shapes_min: Option<usize>,
    /// Most shapes per image.
    #[arg(long)]
    shapes_max: Option<usize>,
    /// Generation seed (falls back to COOPSEG_SEED, then 1).
    #[arg(long)]
    seed: Option<u64>,
    /// Output container path.
    #[arg(long)]
    out: PathBuf,
    /// Optional flat key-value config file; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Topology flags shared by train/eval/compare.
#[derive(Args)]
struct SchemeArgs {
    /// Method topology.
    #[arg(long, value_parser = ["single", "ensemble", "same", "multi"])]
    method: Option<String>,
    /// Comma-separated tap names: receiving blocks for `same`, source taps
    /// for `multi`.
    #[arg(long)]
    taps: Option<String>,
    /// Receiving block for `multi`.
    #[arg(long)]
    target: Option<String>,
    /// Cut gradients at the connection (bottom loss stops at the top's
    /// feature maps).
    #[arg(long)]
    detach: bool,
    /// Architecture file in the text spec form; bundled spec if omitted.
    #[arg(long)]
    spec_file: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    scheme: SchemeArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Square crop edge (divisible by 4): random in training, centered in
    /// evaluation.
    #[arg(long)]
    crop: Option<usize>,
    /// Run seed (falls back to COOPSEG_SEED, then 1). The bottom network
    /// initializes from seed + 1000.
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate on --val every n epochs (0 = final epoch only).
    #[arg(long)]
    eval_every: Option<usize>,
    /// Training dataset container.
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset container.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    scheme: SchemeArgs,
    /// Saved model parameter file.
    #[arg(long)]
    model: PathBuf,
    /// Dataset container to score.
    #[arg(long)]
    data: PathBuf,
    /// Which output to score.
    #[arg(long, value_parser = ["top", "bottom", "ensemble"])]
    head: Option<String>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Seed tag recorded in the report row.
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Comma-separated run seeds, e.g. `1,2,3`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    crop: Option<usize>,
    /// Comma-separated taps for the `same` method.
    #[arg(long)]
    taps: Option<String>,
    /// Comma-separated source taps for the `multi` method.
    #[arg(long)]
    sources: Option<String>,
    /// Receiving block for the `multi` method.
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    detach: bool,
    #[arg(long)]
    spec_file: Option<PathBuf>,
    /// Training dataset container.
    #[arg(long)]
    data: PathBuf,
    /// Evaluation dataset container.
    #[arg(long)]
    val: PathBuf,
    /// Parallel (method, seed) cells; 0 = number of cores.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run only the detached-connection isolation case.
    #[arg(long)]
    detach: bool,
    /// Test fixture: deliberately corrupt one op's analytic gradient.
    #[arg(long, hide = true)]
    corrupt_op: Option<String>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Compare(args) => cmd_compare(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn parse_name_list(raw: &str) -> Vec<String> {
    raw.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn load_spec(spec_file: Option<&Path>, data: &Dataset) -> Result<NetworkSpec, CliError> {
    let spec = match spec_file {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Data(format!("spec {}: {e}", path.display())))?;
            NetworkSpec::from_text(&text)?
        }
        None => {
            let channels = data
                .samples
                .first()
                .map(|s| s.image.shape()[0])
                .unwrap_or(coopseg::data::CHANNELS);
            default_spec(channels, data.num_classes)
        }
    };
    if spec.num_classes != data.num_classes {
        return Err(CliError::Data(format!(
            "spec has {} classes but the dataset has {}",
            spec.num_classes, data.num_classes
        )));
    }
    Ok(spec)
}

fn build_scheme(args: &SchemeArgs, cfg: &KvConfig) -> Result<ConnectionScheme, CliError> {
    let method = cfg.resolve(args.method.clone(), "method", "single".to_string())?;
    let taps = cfg
        .resolve_opt(args.taps.clone(), "taps")?
        .map(|s| parse_name_list(&s));
    let target = cfg.resolve_opt(args.target.clone(), "target")?;
    let detach = args.detach || cfg.get("detach") == Some("true");
    let scheme = match method.as_str() {
        "single" => ConnectionScheme::single(),
        "ensemble" => ConnectionScheme::ensemble(),
        "same" => {
            ConnectionScheme::same_layer(taps.unwrap_or_else(coopseg::coop::default_same_taps))
        }
        "multi" => {
            let (default_sources, default_target) = coopseg::coop::default_multi_wiring();
            ConnectionScheme::multi_layer(
                taps.unwrap_or(default_sources),
                target.unwrap_or(default_target),
            )
        }
        other => return Err(CliError::Usage(format!("unknown method {other:?}"))),
    };
    Ok(scheme.with_detach(detach))
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let kv = KvConfig::load(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, &kv)?;
    let mut cfg = DatasetConfig::new(
        kv.resolve(args.n, "n", 100)?,
        kv.resolve(args.h, "h", 64)?,
        kv.resolve(args.w, "w", 64)?,
        kv.resolve(args.k, "k", 4)?,
    );
    cfg.noise_stddev = kv.resolve(args.noise, "noise", cfg.noise_stddev)?;
    cfg.shapes_min = kv.resolve(args.shapes_min, "shapes-min", cfg.shapes_min)?;
    cfg.shapes_max = kv.resolve(args.shapes_max, "shapes-max", cfg.shapes_max)?;
    cfg.seed = seed;
    let dataset = generate_dataset(&cfg)?;
    dataset.save(&args.out)?;
    let resolved = [
        ("n", cfg.n_samples.to_string()),
        ("h", cfg.height.to_string()),
        ("w", cfg.width.to_string()),
        ("k", cfg.num_classes.to_string()),
        ("noise", cfg.noise_stddev.to_string()),
        ("shapes-min", cfg.shapes_min.to_string()),
        ("shapes-max", cfg.shapes_max.to_string()),
        ("seed", cfg.seed.to_string()),
        ("out", args.out.display().to_string()),
    ];
    write_manifest(
        &manifest_path_for_file(&args.out),
        &resolved,
        &[args.out.as_path()],
    )?;
    println!(
        "wrote {} ({} samples, {} classes)",
        args.out.display(),
        dataset.samples.len(),
        dataset.num_classes
    );
    Ok(())
}

fn manifest_path_for_file(out: &Path) -> PathBuf {
    let mut os = out.as_os_str().to_owned();
    os.push(".manifest");
    PathBuf::from(os)
}

struct ResolvedTrain {
    cfg: TrainConfig,
    resolved: Vec<(&'static str, String)>,
}

fn resolve_train_flags(
    kv: &KvConfig,
    epochs: Option<usize>,
    lr: Option<f64>,
    momentum: Option<f64>,
    batch: Option<usize>,
    crop: Option<usize>,
    seed: Option<u64>,
    eval_every: Option<usize>,
    scheme: ConnectionScheme,
) -> Result<ResolvedTrain, CliError> {
    let mut cfg = TrainConfig::new(scheme);
    cfg.epochs = kv.resolve(epochs, "epochs", cfg.epochs)?;
    cfg.lr = kv.resolve(lr, "lr", f64::from(cfg.lr))? as Elem;
    cfg.momentum = kv.resolve(momentum, "momentum", f64::from(cfg.momentum))? as Elem;
    cfg.batch_size = kv.resolve(batch, "batch", cfg.batch_size)?;
    cfg.crop = kv.resolve(crop, "crop", cfg.crop)?;
    cfg.eval_every = kv.resolve(eval_every, "eval-every", cfg.eval_every)?;
    cfg.seed = resolve_seed(seed, kv)?;
    let resolved = vec![
        ("method", cfg.scheme.method_name().to_string()),
        ("detach", cfg.scheme.detach_gradients.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("lr", format!("{}", cfg.lr)),
        ("momentum", format!("{}", cfg.momentum)),
        ("batch", cfg.batch_size.to_string()),
        ("crop", cfg.crop.to_string()),
        ("eval-every", cfg.eval_every.to_string()),
        ("seed", cfg.seed.to_string()),
    ];
    Ok(ResolvedTrain { cfg, resolved })
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let kv = KvConfig::load(args.config.as_deref())?;
    let train_set = Dataset::load(&args.data)?;
    let val_set = match &args.val {
        Some(p) => Some(Dataset::load(p)?),
        None => None,
    };
    let spec = load_spec(args.scheme.spec_file.as_deref(), &train_set)?;
    let scheme = build_scheme(&args.scheme, &kv)?;
    let mut rt = resolve_train_flags(
        &kv,
        args.epochs,
        args.lr,
        args.momentum,
        args.batch,
        args.crop,
        args.seed,
        args.eval_every,
        scheme.clone(),
    )?;
    rt.cfg.train_data = Some(args.data.display().to_string());
    rt.cfg.eval_data = args.val.as_ref().map(|p| p.display().to_string());

    let mut model = CoopModel::build(&spec, scheme, rt.cfg.seed, rt.cfg.seed + BOTTOM_SEED_OFFSET)?;
    let record = train(&mut model, &train_set, val_set.as_ref(), &rt.cfg)?;

    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("loss.csv"), record.loss_csv())?;
    if !record.evals.is_empty() {
        fs::write(
            args.out.join("eval.csv"),
            record.eval_csv(train_set.num_classes),
        )?;
    }
    save_model(args.out.join("model.cmdl"), &model)?;

    let mut resolved = rt.resolved;
    resolved.push(("data", args.data.display().to_string()));
    if let Some(v) = &args.val {
        resolved.push(("val", v.display().to_string()));
    }
    resolved.push(("out", args.out.display().to_string()));
    let mut datasets: Vec<&Path> = vec![args.data.as_path()];
    if let Some(v) = &args.val {
        datasets.push(v.as_path());
    }
    write_manifest(&args.out.join("manifest.txt"), &resolved, &datasets)?;

    let last = record.epoch_losses.last();
    println!(
        "trained {} for {} epochs; final mean loss {}",
        record.method,
        record.epoch_losses.len(),
        last.map_or("n/a".to_string(), |e| format!("{:.6}", e.total)),
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let kv = KvConfig::load(args.config.as_deref())?;
    let data = Dataset::load(&args.data)?;
    let spec = load_spec(args.scheme.spec_file.as_deref(), &data)?;
    let scheme = build_scheme(&args.scheme, &kv)?;
    let head_raw = kv.resolve(args.head.clone(), "head", "top".to_string())?;
    let head = Head::parse(&head_raw)
        .ok_or_else(|| CliError::Usage(format!("unknown head {head_raw:?}")))?;
    let crop = kv.resolve(args.crop, "crop", 32)?;
    let batch = kv.resolve(args.batch, "batch", 8)?;
    let seed = resolve_seed(args.seed, &kv)?;

    let mut model = CoopModel::build(&spec, scheme, 0, BOTTOM_SEED_OFFSET)?;
    load_model_into(&args.model, &mut model)?;
    let tag = EvalTag {
        method: model.scheme().method_name().to_string(),
        seed,
        epoch: 0,
        split: "test".into(),
    };
    let report = evaluate(&model, &data, crop, batch, head, &tag)?;

    let mut csv = EvalReport::csv_header(data.num_classes);
    csv.push('\n');
    csv.push_str(&report.csv_row());
    csv.push('\n');
    match &args.out {
        Some(path) => {
            fs::write(path, &csv)?;
            let resolved = [
                ("method", tag.method.clone()),
                ("head", head.as_str().to_string()),
                ("crop", crop.to_string()),
                ("batch", batch.to_string()),
                ("model", args.model.display().to_string()),
                ("data", args.data.display().to_string()),
            ];
            write_manifest(
                &manifest_path_for_file(path),
                &resolved,
                &[args.data.as_path(), args.model.as_path()],
            )?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    let kv = KvConfig::load(args.config.as_deref())?;
    let seeds_raw = kv.resolve(args.seeds.clone(), "seeds", "1,2,3".to_string())?;
    let mut seeds = Vec::new();
    for part in parse_name_list(&seeds_raw) {
        seeds.push(
            part.parse::<u64>()
                .map_err(|e| CliError::Usage(format!("--seeds entry {part:?}: {e}")))?,
        );
    }
    let train_set = Dataset::load(&args.data)?;
    let eval_set = Dataset::load(&args.val)?;
    let spec = load_spec(args.spec_file.as_deref(), &train_set)?;

    let mut wiring = CoopWiring::default();
    if let Some(taps) = kv.resolve_opt(args.taps.clone(), "taps")? {
        wiring.same_taps = parse_name_list(&taps);
    }
    if let Some(sources) = kv.resolve_opt(args.sources.clone(), "sources")? {
        wiring.multi_sources = parse_name_list(&sources);
    }
    if let Some(target) = kv.resolve_opt(args.target.clone(), "target")? {
        wiring.multi_target = target;
    }
    wiring.detach = args.detach || kv.get("detach") == Some("true");

    let rt = resolve_train_flags(
        &kv,
        args.epochs,
        args.lr,
        args.momentum,
        args.batch,
        args.crop,
        None,
        None,
        ConnectionScheme::single(),
    )?;
    let jobs = kv.resolve(args.jobs, "jobs", 0)?;

    let result = compare(&spec, &rt.cfg, &wiring, &seeds, &train_set, &eval_set, jobs)?;

    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("compare.csv"), result.csv())?;
    let mut eval_csv = EvalReport::csv_header(result.num_classes);
    eval_csv.push('\n');
    for cell in &result.cells {
        fs::write(
            args.out
                .join(format!("loss_{}_seed{}.csv", cell.method, cell.seed)),
            cell.record.loss_csv(),
        )?;
        for r in &cell.record.evals {
            eval_csv.push_str(&r.csv_row());
            eval_csv.push('\n');
        }
    }
    fs::write(args.out.join("eval.csv"), eval_csv)?;

    let mut resolved = rt.resolved;
    resolved.retain(|(k, _)| *k != "method" && *k != "seed" && *k != "eval-every");
    resolved.push(("seeds", seeds_raw.clone()));
    resolved.push(("same-taps", wiring.same_taps.join(",")));
    resolved.push(("multi-sources", wiring.multi_sources.join(",")));
    resolved.push(("multi-target", wiring.multi_target.clone()));
    resolved.push(("detach", wiring.detach.to_string()));
    resolved.push(("jobs", jobs.to_string()));
    resolved.push(("data", args.data.display().to_string()));
    resolved.push(("val", args.val.display().to_string()));
    resolved.push(("out", args.out.display().to_string()));
    write_manifest(
        &args.out.join("manifest.txt"),
        &resolved,
        &[args.data.as_path(), args.val.as_path()],
    )?;

    print!("{}", result.csv());
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let mut all_pass = true;
    let mut failing: Vec<String> = Vec::new();

    if !args.detach {
        let checks = gradcheck::finite_difference_suite(args.corrupt_op.as_deref())
            .map_err(|e| CliError::Numeric(e.to_string()))?;
        for c in &checks {
            let status = if c.passed() { "PASS" } else { "FAIL" };
            println!(
                "op {:<24} worst relative error {:>12.3e} (tolerance {:.0e})  {status}",
                c.op, c.worst_rel_error, c.tolerance
            );
            if !c.passed() {
                all_pass = false;
                failing.push(c.op.clone());
            }
        }
    }

    let isolation = gradcheck::isolation_suite()?;
    for check in isolation {
        if args.detach && !(check.detach && check.method != "single" && check.method != "ensemble")
        {
            continue;
        }
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3e}"));
        let status = if check.passed { "PASS" } else { "FAIL" };
        println!(
            "isolation {:<8} detach={:<5} d(loss1)/d(bottom)={:<10} d(loss2)/d(top)={:<10} {status}  [{}]",
            check.method,
            check.detach,
            fmt(check.loss1_grad_bottom_norm),
            fmt(check.loss2_grad_top_norm),
            check.rule
        );
        if !check.passed {
            all_pass = false;
            failing.push(format!("isolation:{}", check.method));
        }
    }

    if all_pass {
        println!("gradcheck: all checks passed");
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradcheck failed: {}",
            failing.join(", ")
        )))
    }
}
