//! Command-line driver for reproducible experiment runs.
//!
//! Subcommands: `gen-data`, `train`, `eval`, `separation`, `project`,
//! `gradcheck`. Every command is deterministic given its flags/config and
//! writes plain CSV (plus binary checkpoints), so reruns produce
//! byte-identical outputs. The `NC_OOD_OUT_DIR` environment variable
//! overrides any configured output directory.
//!
//! Exit codes: 0 success, 2 configuration errors, 3 data/IO errors,
//! 4 numeric/internal errors.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nc_ood::dataset::{
    gen_gaussian_id, gen_outliers, load_csv, LabeledDataset, OutlierDataset, OutlierMode,
    OutlierRole,
};
use nc_ood::detection::{
    evaluate, principal_ood_direction, project_features, score_series, separation_triplet,
    write_projection_csv, write_reports_csv, write_separation_csv, DetectionReport, ScoreKind,
};
use nc_ood::gradcheck;
use nc_ood::model::{load_checkpoint, Model};
use nc_ood::trainer::{warmup, Trainer};
use nc_ood::{Error, Result, Tensor};

use config::RunConfig;

const OUT_DIR_ENV: &str = "NC_OOD_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "nc-ood",
    about = "Feature-separation fine-tuning and detection metrics for OOD detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the four experiment CSVs: id_train, id_test, ood_aux, ood_test.
    GenData(GenDataArgs),
    /// Warm up (unless a checkpoint is given) and run the two-stage fine-tune.
    Train(TrainArgs),
    /// Detection metrics (FPR95/AUROC) of a trained model on held-out data.
    Eval(EvalArgs),
    /// Feature-separation degree (euclidean/cosine/reconstruction) table.
    Separation(PairArgs),
    /// Project features into the class-weight plane for plotting.
    Project(ProjectArgs),
    /// Finite-difference verification of every loss and tape op.
    Gradcheck(GradcheckArgs),
}

#[derive(clap::Args)]
struct GenDataArgs {
    /// Output directory for the four CSV files.
    #[arg(long, default_value = "data")]
    out_dir: PathBuf,
    /// Number of classes.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Feature dimension (must exceed the class count).
    #[arg(long, default_value_t = 16)]
    dim: usize,
    /// Training samples per class.
    #[arg(long, default_value_t = 200)]
    n_per_class: usize,
    /// Held-out test samples per class (same clusters, fresh draws).
    #[arg(long, default_value_t = 50)]
    n_test_per_class: usize,
    /// Distance scale between cluster means.
    #[arg(long, default_value_t = 4.0)]
    mean_scale: f64,
    /// Cluster standard deviation.
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    /// Auxiliary outlier count.
    #[arg(long, default_value_t = 800)]
    m_aux: usize,
    /// Test outlier count.
    #[arg(long, default_value_t = 800)]
    m_test: usize,
    /// Auxiliary outlier mode: shifted-gaussian | uniform-shell | mixture.
    #[arg(long, default_value = "shifted-gaussian")]
    aux_mode: String,
    /// Test outlier mode (kept different from the auxiliary mode).
    #[arg(long, default_value = "uniform-shell")]
    test_mode: String,
    /// Center offset of the auxiliary shifted-gaussian component.
    #[arg(long, default_value_t = 10.0)]
    aux_offset: f64,
    /// Spread of the auxiliary shifted-gaussian component.
    #[arg(long, default_value_t = 1.0)]
    aux_sigma: f64,
    /// Inner shell radius of the auxiliary shell component.
    #[arg(long, default_value_t = 8.0)]
    aux_r_min: f64,
    /// Outer shell radius of the auxiliary shell component.
    #[arg(long, default_value_t = 12.0)]
    aux_r_max: f64,
    /// Center offset of the test shifted-gaussian component.
    #[arg(long, default_value_t = 7.0)]
    test_offset: f64,
    /// Spread of the test shifted-gaussian component.
    #[arg(long, default_value_t = 1.0)]
    test_sigma: f64,
    /// Inner shell radius of the test shell component.
    #[arg(long, default_value_t = 6.0)]
    test_r_min: f64,
    /// Outer shell radius of the test shell component.
    #[arg(long, default_value_t = 9.0)]
    test_r_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Key-value run configuration file.
    #[arg(long)]
    config: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    id_test: PathBuf,
    #[arg(long)]
    ood_test: PathBuf,
    /// Score function: msp | combined | all.
    #[arg(long, default_value = "all")]
    score: String,
    /// Target in-distribution true positive rate for the threshold.
    #[arg(long, default_value_t = 0.95)]
    tpr: f64,
    /// Report CSV path.
    #[arg(long, default_value = "detection_report.csv")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct PairArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    id_test: PathBuf,
    #[arg(long)]
    ood_test: PathBuf,
    /// Output CSV path.
    #[arg(long, default_value = "separation.csv")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ProjectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    id_test: PathBuf,
    #[arg(long)]
    ood_test: PathBuf,
    /// 2 projects onto the first two class weights; 3 adds the principal
    /// outlier direction as a third axis.
    #[arg(long, default_value_t = 2)]
    dims: usize,
    /// Output CSV path.
    #[arg(long, default_value = "projection.csv")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeds to sweep.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) => 3,
        Error::Shape(_) | Error::Tape(_) | Error::Numeric(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Separation(args) => cmd_separation(args),
        Command::Project(args) => cmd_project(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn out_dir_override(configured: PathBuf) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) => PathBuf::from(dir),
        None => configured,
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn load_labeled(path: &Path) -> Result<LabeledDataset> {
    load_csv(path)?.into_labeled()
}

fn load_outliers(path: &Path, role: OutlierRole) -> Result<OutlierDataset> {
    load_csv(path)?.into_outliers(role)
}

fn cmd_gen_data(args: GenDataArgs) -> Result<ExitCode> {
    let out_dir = out_dir_override(args.out_dir);
    ensure_dir(&out_dir)?;

    let aux_mode = OutlierMode::parse(
        &args.aux_mode,
        args.aux_offset,
        args.aux_sigma,
        args.aux_r_min,
        args.aux_r_max,
    )?;
    let test_mode = OutlierMode::parse(
        &args.test_mode,
        args.test_offset,
        args.test_sigma,
        args.test_r_min,
        args.test_r_max,
    )?;
    if args.aux_mode == args.test_mode {
        eprintln!(
            "note: auxiliary and test outliers share mode '{}'; held-out \
             evaluation is more meaningful with different modes",
            args.aux_mode
        );
    }

    let total = args.n_per_class + args.n_test_per_class;
    let all = gen_gaussian_id(
        args.classes,
        args.dim,
        total,
        args.mean_scale,
        args.sigma,
        args.seed,
    )?;
    let (id_train, id_test) = all.split_per_class(args.n_per_class)?;
    let ood_aux = gen_outliers(
        args.dim,
        args.m_aux,
        aux_mode,
        args.seed.wrapping_add(1),
        OutlierRole::Auxiliary,
    )?;
    let ood_test = gen_outliers(
        args.dim,
        args.m_test,
        test_mode,
        args.seed.wrapping_add(2),
        OutlierRole::Test,
    )?;

    id_train.save_csv(&out_dir.join("id_train.csv"))?;
    id_test.save_csv(&out_dir.join("id_test.csv"))?;
    ood_aux.save_csv(&out_dir.join("ood_aux.csv"))?;
    ood_test.save_csv(&out_dir.join("ood_test.csv"))?;
    println!(
        "wrote id_train ({} samples), id_test ({}), ood_aux ({}), ood_test ({}) to {}",
        id_train.len(),
        id_test.len(),
        ood_aux.len(),
        ood_test.len(),
        out_dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let config = RunConfig::parse_file(&args.config)?;
    let out_dir = out_dir_override(config.out_dir.clone());
    ensure_dir(&out_dir)?;

    let id_train = load_labeled(&config.id_train)?;
    let ood_aux = load_outliers(&config.ood_aux, OutlierRole::Auxiliary)?;

    let mut model = match &config.init_checkpoint {
        Some(path) => {
            let (model, _meta) = load_checkpoint(path)?;
            println!("starting from checkpoint {}", path.display());
            model
        }
        None => {
            let mut dims = vec![id_train.dim()];
            dims.extend_from_slice(&config.hidden_dims);
            Model::init(&dims, id_train.n_classes(), config.train.seed)?
        }
    };

    if config.init_checkpoint.is_none() && config.train.warmup_epochs > 0 {
        let warmup_log = warmup(&mut model, &id_train, &config.train)?;
        warmup_log.save_csv(&out_dir.join("warmup_log.csv"))?;
        let last = warmup_log.records.last().expect("warmup ran");
        println!(
            "warm-up: {} epochs, final ce {:.4}, train acc {:.3}",
            config.train.warmup_epochs, last.ce, last.id_acc
        );
    }

    let mut trainer = Trainer::new(model, config.train.clone())?;
    let log = trainer.run(&id_train, &ood_aux)?;
    log.save_csv(&out_dir.join("train_log.csv"))?;
    trainer.save_checkpoint(&out_dir.join("model.ckpt"))?;

    if let Some(last) = log.records.last() {
        println!(
            "fine-tune ({}): {} epochs, train acc {:.3}, aux orth {:.4}, nc cos {:.3}",
            config.train.variant.name(),
            log.records.len(),
            last.id_acc,
            last.aux_orth_mean,
            last.id_nc_cos
        );
    }
    println!(
        "wrote {} and {}",
        out_dir.join("train_log.csv").display(),
        out_dir.join("model.ckpt").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval_kinds(score: &str) -> Result<Vec<ScoreKind>> {
    match score {
        "msp" => Ok(vec![ScoreKind::Msp]),
        "combined" => Ok(vec![ScoreKind::Combined]),
        "all" => Ok(vec![ScoreKind::Msp, ScoreKind::Combined]),
        other => Err(Error::Config(format!(
            "unknown score kind '{other}' (expected msp|combined|all)"
        ))),
    }
}

fn dataset_tag(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let (model, _meta) = load_checkpoint(&args.checkpoint)?;
    let id_test = load_labeled(&args.id_test)?;
    let ood_test = load_outliers(&args.ood_test, OutlierRole::Test)?;
    let tag = dataset_tag(&args.ood_test);

    let mut rows: Vec<(String, DetectionReport)> = Vec::new();
    for kind in eval_kinds(&args.score)? {
        let series = score_series(&model, id_test.features(), ood_test.features(), kind)?;
        let report = evaluate(&series, args.tpr)?;
        println!(
            "{:>8}  fpr95 {:.4}  auroc {:.4}  threshold {:.6}",
            kind.name(),
            report.fpr95,
            report.auroc,
            report.threshold
        );
        rows.push((tag.clone(), report));
    }
    write_reports_csv(&args.out, &rows)?;
    println!("wrote {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_separation(args: PairArgs) -> Result<ExitCode> {
    let (model, _meta) = load_checkpoint(&args.checkpoint)?;
    let id_test = load_labeled(&args.id_test)?;
    let ood_test = load_outliers(&args.ood_test, OutlierRole::Test)?;

    let triplet = separation_triplet(&model, id_test.features(), ood_test.features())?;
    let diff = triplet.diff();
    println!("metric                 id        ood       diff");
    for (name, id, ood, d) in [
        (
            "euclidean",
            triplet.id.euclidean,
            triplet.ood.euclidean,
            diff.euclidean,
        ),
        ("cosine", triplet.id.cosine, triplet.ood.cosine, diff.cosine),
        (
            "reconstruction_error",
            triplet.id.reconstruction,
            triplet.ood.reconstruction,
            diff.reconstruction,
        ),
    ] {
        println!("{name:<21} {id:>9.4} {ood:>9.4} {d:>9.4}");
    }
    write_separation_csv(&args.out, &triplet)?;
    println!("wrote {}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_project(args: ProjectArgs) -> Result<ExitCode> {
    if args.dims != 2 && args.dims != 3 {
        return Err(Error::Config(format!(
            "dims must be 2 or 3, got {}",
            args.dims
        )));
    }
    let (model, _meta) = load_checkpoint(&args.checkpoint)?;
    let id_test = load_labeled(&args.id_test)?;
    let ood_test = load_outliers(&args.ood_test, OutlierRole::Test)?;

    let (_, id_features) = model.forward(id_test.features())?;
    let (_, ood_features) = model.forward(ood_test.features())?;
    let direction = if args.dims == 3 {
        Some(principal_ood_direction(&ood_features)?.direction)
    } else {
        None
    };
    let dir_ref = direction.as_deref();

    let mut blocks: Vec<(String, Tensor)> = Vec::new();
    for class in 0..id_test.n_classes() {
        let idx: Vec<usize> = id_test
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| id_features.row(i).to_vec()).collect();
        let class_features = Tensor::from_rows(&rows)?;
        let coords = project_features(&class_features, model.class_weights(), dir_ref)?;
        blocks.push((format!("id:{class}"), coords));
    }
    let ood_coords = project_features(&ood_features, model.class_weights(), dir_ref)?;
    blocks.push(("ood".to_string(), ood_coords));

    write_projection_csv(&args.out, &blocks)?;
    println!(
        "wrote {}-column projection of {} populations to {}",
        args.dims,
        blocks.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let mut all_passed = true;
    println!("{:<32} {:>12} {:>6}  status", "check", "max_rel_err", "n");
    for seed in args.seed..args.seed + args.seeds.max(1) {
        let reports = gradcheck::run_suite(seed)?;
        for r in &reports {
            let status = if r.passed() { "pass" } else { "FAIL" };
            all_passed &= r.passed();
            println!(
                "{:<32} {:>12.3e} {:>6}  {status}",
                format!("{} (seed {seed})", r.name),
                r.max_rel_err,
                r.checked
            );
        }
    }
    if all_passed {
        println!("all gradient checks passed");
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::Numeric(
            "gradient check failure: analytic and finite-difference gradients disagree".into(),
        ))
    }
}
