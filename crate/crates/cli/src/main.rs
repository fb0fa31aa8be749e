//! Command-line driver for the point-sampling pose pipeline: dataset
//! generation, the three training stages, evaluation, point-set export,
//! and report rendering. Failures print a machine-readable JSON line to
//! stderr and exit nonzero.

mod config;
mod svg;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde_json::json;

use config::{load_config, RunConfig};
use pips_core::align::DEFAULT_THRESHOLDS;
use pips_core::geom3::icosahedral_group;
use pips_core::io::{
    load_checkpoint, load_pseudo_gt, load_sample, save_checkpoint, save_ply, save_pseudo_gt,
    save_sample, PseudoGtRecord,
};
use pips_core::pips::{loss_pipsc, loss_sparsity, loss_sparsity_grad, loss_stability_points, GateNet};
use pips_core::synth::{make_dataset, Sample};
use pips_core::train::{
    eval_student, export_pseudo_gt, grad_check, pips_points, sample_id, train_pips, train_student,
    train_teacher, Curve, EvalQueries, PipsClassifier, PipsNets, StudentMode,
};
use pips_core::uncertainty::loss_adv_aniso_grad;
use pips_core::vnconv::{BackboneConfig, ImplicitNet, NetConfig};
use pips_core::voxel::VoxelGrid;
use pips_core::{RotationGroup, Vec3};

pub const SPLITS: [&str; 6] = [
    "train",
    "test_clean",
    "test_holdout_pose",
    "test_novel_shape",
    "test_high_occlusion",
    "test_severe_noise",
];

#[derive(Parser)]
#[command(name = "pips", version, about = "Learned point sampling for implicit pose estimation")]
struct Cli {
    /// Rayon worker count for dataset generation. Training itself is
    /// sequential and bitwise deterministic at any thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonOpts {
    /// Config file with [section] key = value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override, e.g. --set teacher.epochs=100 (repeatable).
    #[arg(long = "set")]
    sets: Vec<String>,
    /// Overwrite outputs that already exist.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainOpts {
    #[command(flatten)]
    common: CommonOpts,
    /// Skip the finite-difference gradient self-check before training.
    #[arg(long)]
    skip_gradcheck: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic benchmark into per-split directories.
    GenData {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: train the uncertainty-aware teacher.
    TrainTeacher {
        #[command(flatten)]
        train: TrainOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Stage 1b: label voxel grids with the teacher's uncertainty head.
    MakePseudoGt {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Stage 2: train the voxel classifier and the sampling gate.
    TrainPips {
        #[command(flatten)]
        train: TrainOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Stage 3: train a student on sampled, classified, or random queries.
    TrainStudent {
        #[command(flatten)]
        train: TrainOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        /// pips-s, pips-c, or random.
        #[arg(long)]
        mode: String,
    },
    /// Align predicted canonical coordinates and report pose errors.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        split: String,
        /// Student checkpoint to evaluate (pips-s, pips-c, or random).
        #[arg(long, conflicts_with = "oracle")]
        student: Option<String>,
        /// Read canonical coordinates off the ground truth instead.
        #[arg(long)]
        oracle: bool,
        /// Query source: observed or pips-s.
        #[arg(long, default_value = "observed")]
        queries: String,
    },
    /// Dump the classifier (C) and stability (S) point sets as PLY.
    SamplePoints {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test_clean")]
        split: String,
        /// Sample index within the split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render curves, cost, and precision summaries from a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    if let Err(e) = run(cli.cmd) {
        eprintln!("{}", json!({ "error": format!("{e:#}") }));
        std::process::exit(1);
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { common, out } => gen_data(&common, &out),
        Cmd::TrainTeacher { train, data, run } => cmd_train_teacher(&train, &data, &run),
        Cmd::MakePseudoGt { common, data, run } => cmd_make_pseudo_gt(&common, &data, &run),
        Cmd::TrainPips { train, data, run } => cmd_train_pips(&train, &data, &run),
        Cmd::TrainStudent { train, data, run, mode } => {
            cmd_train_student(&train, &data, &run, &mode)
        }
        Cmd::Eval { common, data, run, split, student, oracle, queries } => {
            cmd_eval(&common, &data, &run, &split, student.as_deref(), oracle, &queries)
        }
        Cmd::SamplePoints { common, data, run, split, index, out } => {
            cmd_sample_points(&common, &data, &run, &split, index, &out)
        }
        Cmd::Report { run, force } => cmd_report(&run, force),
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn group() -> RotationGroup {
    icosahedral_group()
}

fn guard_output(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!(
            "output {} already exists; pass --force to overwrite",
            path.display()
        );
    }
    Ok(())
}

fn write_echo(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.echo"), cfg.echo())?;
    Ok(())
}

fn load_split(data: &Path, split: &str) -> Result<Vec<Sample>> {
    if !SPLITS.contains(&split) {
        bail!("unknown split {split:?}; expected one of {SPLITS:?}");
    }
    let dir = data.join(split);
    let mut plys: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("reading split directory {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ply"))
        .collect();
    plys.sort();
    if plys.is_empty() {
        bail!("split directory {} holds no .ply samples", dir.display());
    }
    plys.iter()
        .map(|p| load_sample(p).map_err(|e| anyhow!("loading {}: {e}", p.display())))
        .collect()
}

fn save_net(run: &Path, name: &str, net: &mut ImplicitNet) -> Result<()> {
    let dir = run.join("checkpoints");
    fs::create_dir_all(&dir)?;
    save_checkpoint(&dir.join(format!("{name}.ckpt")), net)?;
    fs::write(
        dir.join(format!("{name}.net.json")),
        serde_json::to_string_pretty(&net.config)?,
    )?;
    Ok(())
}

fn load_net(run: &Path, name: &str) -> Result<ImplicitNet> {
    let dir = run.join("checkpoints");
    let spec = fs::read_to_string(dir.join(format!("{name}.net.json")))
        .with_context(|| format!("missing {name} network spec; run the training stage first"))?;
    let cfg: NetConfig = serde_json::from_str(&spec)?;
    let mut net = ImplicitNet::new(cfg, &mut StdRng::seed_from_u64(0));
    load_checkpoint(&dir.join(format!("{name}.ckpt")), &mut net)?;
    Ok(net)
}

#[derive(serde::Serialize, serde::Deserialize)]
struct PipsNetSpec {
    backbone: BackboneConfig,
    propagation_k: usize,
    head_widths: Vec<usize>,
    grid_h: usize,
}

fn save_pips_nets(run: &Path, nets: &mut PipsNets, spec: &PipsNetSpec) -> Result<()> {
    let dir = run.join("checkpoints");
    fs::create_dir_all(&dir)?;
    save_checkpoint(&dir.join("pips.ckpt"), nets)?;
    fs::write(dir.join("pips.net.json"), serde_json::to_string_pretty(spec)?)?;
    Ok(())
}

fn load_pips_nets(run: &Path) -> Result<PipsNets> {
    let dir = run.join("checkpoints");
    let spec = fs::read_to_string(dir.join("pips.net.json"))
        .context("missing sampling network spec; run train-pips first")?;
    let spec: PipsNetSpec = serde_json::from_str(&spec)?;
    let mut rng = StdRng::seed_from_u64(0);
    let classifier =
        PipsClassifier::new(spec.backbone, spec.propagation_k, &spec.head_widths, &mut rng);
    let gate = GateNet::new(classifier.n_features(), &mut rng);
    let mut nets = PipsNets { classifier, gate, grid_h: spec.grid_h };
    load_checkpoint(&dir.join("pips.ckpt"), &mut nets)?;
    Ok(nets)
}

fn save_curve(run: &Path, name: &str, curve: &Curve) -> Result<()> {
    let dir = run.join("curves");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(format!("{name}.csv")), curve.to_csv())?;
    Ok(())
}

fn last(curve: &Curve, col: &str) -> f64 {
    curve.column(col).and_then(|v| v.last().copied()).unwrap_or(f64::NAN)
}

/// Finite-difference self-check of the analytic loss gradients; cheap
/// insurance before spending minutes on a training run.
fn quick_gradcheck() -> Result<()> {
    let mut rng = StdRng::seed_from_u64(11);
    let tol = 1e-3;
    let mut worst: (f64, &str) = (0.0, "");
    let mut track = |name: &'static str, err: f64| {
        if err > worst.0 {
            worst = (err, name);
        }
    };

    // Anisotropic uncertainty loss over [pred(3), quat_raw(4), log_scales(3)].
    let x_hat = Vec3::new(0.05, -0.02, 0.11);
    let x0 = [0.1, 0.03, -0.07, 0.9, 0.1, -0.2, 0.3, 0.2, -0.1, 0.15];
    let rep = grad_check(&x0, 8, &mut rng, &mut |v: &[f64]| {
        let x = Vec3::new(v[0], v[1], v[2]);
        let q = [v[3], v[4], v[5], v[6]];
        let z = [v[7], v[8], v[9]];
        let (loss, gx, gq, gz) = loss_adv_aniso_grad(&x, &x_hat, &q, &z).unwrap();
        let mut g = vec![gx.x, gx.y, gx.z];
        g.extend(gq);
        g.extend(gz);
        (loss, g)
    });
    track("aniso", rep.max_rel_err);

    // Sparsity KL in the achieved rate.
    let rep = grad_check(&[0.37], 1, &mut rng, &mut |v: &[f64]| {
        (loss_sparsity(v[0], 0.1).0, vec![loss_sparsity_grad(v[0], 0.1)])
    });
    track("sparsity", rep.max_rel_err);

    // Stability loss in the point positions.
    let pts0: Vec<f64> = (0..12).map(|i| 0.3 * ((i * 7 + 3) as f64).sin()).collect();
    let gaussians: Vec<_> = (0..4)
        .map(|i| {
            pips_core::uncertainty::AnisoGaussian::isotropic(Vec3::zeros(), 0.4 + 0.1 * i as f64)
        })
        .collect();
    let rep = grad_check(&pts0, 8, &mut rng, &mut |v: &[f64]| {
        let pts: Vec<_> = (0..4)
            .map(|i| (Vec3::new(v[3 * i], v[3 * i + 1], v[3 * i + 2]), gaussians[i]))
            .collect();
        let (loss, gx, _) = loss_stability_points(&pts, None).unwrap();
        (loss, gx.iter().flat_map(|g| [g.x, g.y, g.z]).collect())
    });
    track("stability", rep.max_rel_err);

    // Classifier cross-entropy in the logits.
    let grid: VoxelGrid<bool> = VoxelGrid::fit(&[Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0)], 2);
    let labels = grid.with_values((0..grid.len()).map(|i| i % 3 == 0).collect());
    let l0: Vec<f64> = (0..grid.len()).map(|i| ((i * 13 + 5) as f64).sin()).collect();
    let rep = grad_check(&l0, 8, &mut rng, &mut |v: &[f64]| {
        let logits = labels.with_values(v.to_vec());
        let (loss, grad) = loss_pipsc(&logits, &labels).unwrap();
        (loss, grad.values)
    });
    track("classifier-ce", rep.max_rel_err);

    if worst.0 > tol {
        bail!(
            "gradient self-check failed: {} loss gradient off by {:.2e} (tolerance {tol:.0e})",
            worst.1,
            worst.0
        );
    }
    eprintln!("gradient self-check passed (worst {} rel err {:.2e})", worst.1, worst.0);
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn gen_data(common: &CommonOpts, out: &Path) -> Result<()> {
    let cfg = load_config(common.config.as_deref(), &common.sets)?;
    guard_output(&out.join("train"), common.force)?;
    let ds = make_dataset(&cfg.data)?;
    let splits: [(&str, &Vec<Sample>); 6] = [
        ("train", &ds.train),
        ("test_clean", &ds.test_clean),
        ("test_holdout_pose", &ds.test_holdout_pose),
        ("test_novel_shape", &ds.test_novel_shape),
        ("test_high_occlusion", &ds.test_high_occlusion),
        ("test_severe_noise", &ds.test_severe_noise),
    ];
    let mut counts = serde_json::Map::new();
    for (name, samples) in splits {
        let dir = out.join(name);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        for (i, s) in samples.iter().enumerate() {
            save_sample(&dir.join(format!("{i:04}.ply")), s)?;
        }
        counts.insert(name.to_string(), json!(samples.len()));
    }
    write_echo(out, &cfg)?;
    println!("{}", json!({ "out": out.display().to_string(), "samples": counts }));
    Ok(())
}

fn cmd_train_teacher(opts: &TrainOpts, data: &Path, run: &Path) -> Result<()> {
    let cfg = load_config(opts.common.config.as_deref(), &opts.common.sets)?;
    guard_output(&run.join("checkpoints/teacher.ckpt"), opts.common.force)?;
    if !opts.skip_gradcheck {
        quick_gradcheck()?;
    }
    let samples = load_split(data, "train")?;
    let group = group();
    let (mut net, curve) = train_teacher(&samples, &cfg.teacher, &group)?;
    write_echo(run, &cfg)?;
    save_net(run, "teacher", &mut net)?;
    save_curve(run, "teacher", &curve)?;
    println!(
        "{}",
        json!({
            "stage": "teacher",
            "epochs": curve.rows.len(),
            "final_mse": last(&curve, "mse"),
            "final_total": last(&curve, "total"),
            "wall_s": curve.column("wall_s").map(|v| v.iter().sum::<f64>()),
        })
    );
    Ok(())
}

fn cmd_make_pseudo_gt(common: &CommonOpts, data: &Path, run: &Path) -> Result<()> {
    let cfg = load_config(common.config.as_deref(), &common.sets)?;
    let out_dir = run.join("pseudo_gt");
    guard_output(&out_dir, common.force)?;
    let teacher = load_net(run, "teacher")?;
    let samples = load_split(data, "train")?;
    let n = ((cfg.pseudo_fraction * samples.len() as f64).ceil() as usize)
        .clamp(1, samples.len());
    // Evenly strided subset, so every shape family stays represented.
    let subset: Vec<Sample> = (0..n)
        .map(|i| samples[i * samples.len() / n].clone())
        .collect();
    let group = group();
    let records = export_pseudo_gt(&teacher, &subset, &cfg.pseudo_gt, &group)?;
    if out_dir.exists() {
        fs::remove_dir_all(&out_dir)?;
    }
    fs::create_dir_all(&out_dir)?;
    let mut positives = 0usize;
    for rec in &records {
        positives += rec.gaussians.len();
        save_pseudo_gt(&out_dir.join(format!("{}.pgt", rec.id)), rec)?;
    }
    println!(
        "{}",
        json!({
            "stage": "pseudo-gt",
            "records": records.len(),
            "positive_voxels": positives,
        })
    );
    Ok(())
}

fn cmd_train_pips(opts: &TrainOpts, data: &Path, run: &Path) -> Result<()> {
    let cfg = load_config(opts.common.config.as_deref(), &opts.common.sets)?;
    guard_output(&run.join("checkpoints/pips.ckpt"), opts.common.force)?;
    if !opts.skip_gradcheck {
        quick_gradcheck()?;
    }
    let samples = load_split(data, "train")?;
    let by_id: BTreeMap<String, &Sample> =
        samples.iter().map(|s| (sample_id(s), s)).collect();
    let gt_dir = run.join("pseudo_gt");
    let mut paths: Vec<PathBuf> = fs::read_dir(&gt_dir)
        .context("missing pseudo-GT directory; run make-pseudo-gt first")?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgt"))
        .collect();
    paths.sort();
    let mut records: Vec<PseudoGtRecord> = Vec::new();
    let mut paired: Vec<Sample> = Vec::new();
    for p in &paths {
        let rec = load_pseudo_gt(p)?;
        let s = by_id
            .get(&rec.id)
            .ok_or_else(|| anyhow!("pseudo-GT record {} has no matching train sample", rec.id))?;
        paired.push((*s).clone());
        records.push(rec);
    }
    let group = group();
    let (mut nets, curve) = train_pips(&paired, &records, &cfg.pips, &group)?;
    let spec = PipsNetSpec {
        backbone: cfg.pips.backbone.clone(),
        propagation_k: cfg.pips.propagation_k,
        head_widths: cfg.pips.head_widths.clone(),
        grid_h: cfg.pips.grid_h,
    };
    write_echo(run, &cfg)?;
    save_pips_nets(run, &mut nets, &spec)?;
    save_curve(run, "pips", &curve)?;
    println!(
        "{}",
        json!({
            "stage": "pips",
            "epochs": curve.rows.len(),
            "final_ce": last(&curve, "ce"),
            "clean_rate": last(&curve, "clean_rate"),
        })
    );
    Ok(())
}

fn cmd_train_student(opts: &TrainOpts, data: &Path, run: &Path, mode: &str) -> Result<()> {
    let mode = StudentMode::parse(mode)
        .ok_or_else(|| anyhow!("unknown student mode {mode:?}; want pips-s, pips-c, or random"))?;
    let cfg = load_config(opts.common.config.as_deref(), &opts.common.sets)?;
    let name = format!("student-{}", mode.name());
    guard_output(&run.join(format!("checkpoints/{name}.ckpt")), opts.common.force)?;
    if !opts.skip_gradcheck {
        quick_gradcheck()?;
    }
    let samples = load_split(data, "train")?;
    let pips = match mode {
        StudentMode::Random => None,
        _ => Some(load_pips_nets(run)?),
    };
    let group = group();
    let (mut net, curve, stats) =
        train_student(&samples, mode, pips.as_ref(), &cfg.student, &group)?;
    write_echo(run, &cfg)?;
    save_net(run, &name, &mut net)?;
    save_curve(run, &name, &curve)?;
    let stats_json = json!({
        "stage": "student",
        "mode": mode.name(),
        "final_mse": last(&curve, "mse"),
        "queries_per_epoch": stats.queries_per_epoch,
        "wall_per_epoch_s": stats.wall_per_epoch_s,
        "fallback_random": stats.fallback_random,
    });
    let dir = run.join("stats");
    fs::create_dir_all(&dir)?;
    fs::write(
        dir.join(format!("{name}.json")),
        serde_json::to_string_pretty(&stats_json)?,
    )?;
    println!("{stats_json}");
    Ok(())
}

fn cmd_eval(
    common: &CommonOpts,
    data: &Path,
    run: &Path,
    split: &str,
    student: Option<&str>,
    oracle: bool,
    queries: &str,
) -> Result<()> {
    let cfg = load_config(common.config.as_deref(), &common.sets)?;
    let (student_label, net) = if oracle {
        ("oracle".to_string(), None)
    } else {
        let mode = student.ok_or_else(|| anyhow!("pass --student MODE or --oracle"))?;
        StudentMode::parse(mode)
            .ok_or_else(|| anyhow!("unknown student mode {mode:?}"))?;
        (mode.to_string(), Some(load_net(run, &format!("student-{mode}"))?))
    };
    let (queries_label, qspec, need_pips) = match queries {
        "observed" => ("observed", EvalQueries::Observed { n: cfg.eval_observed_n }, false),
        "pips-s" => (
            "pips-s",
            EvalQueries::PipsS { jitter: cfg.eval_jitter, dropout: cfg.eval_dropout },
            true,
        ),
        other => bail!("unknown query source {other:?}; want observed or pips-s"),
    };
    let tag = format!("{student_label}-{split}-{queries_label}");
    let csv_path = run.join("metrics").join(format!("{tag}.csv"));
    guard_output(&csv_path, common.force)?;
    let samples = load_split(data, split)?;
    let pips = if need_pips { Some(load_pips_nets(run)?) } else { None };
    let group = group();
    let outcome = eval_student(
        net.as_ref(),
        &samples,
        qspec,
        pips.as_ref(),
        cfg.eval_observed_n,
        cfg.eval_seed,
        &group,
    )?;
    let precision = outcome.report.precision_table(&DEFAULT_THRESHOLDS)?;
    let precision: serde_json::Map<String, serde_json::Value> = DEFAULT_THRESHOLDS
        .iter()
        .zip(&precision)
        .map(|(&(deg, cm), &p)| (format!("{deg:.0}deg{cm:.0}cm"), json!(p)))
        .collect();
    let summary = json!({
        "tag": tag,
        "split": split,
        "student": student_label,
        "queries": queries_label,
        "n_total": outcome.n_total,
        "n_valid": outcome.n_valid,
        "median_rot_deg": outcome.report.median_rotation_deg(),
        "median_trans_m": outcome.report.median_translation_m(),
        "mean_rot_deg": outcome.report.mean_rotation_deg(),
        "mean_trans_m": outcome.report.mean_translation_m(),
        "precision": precision,
    });
    fs::create_dir_all(run.join("metrics"))?;
    fs::write(&csv_path, outcome.report.to_csv())?;
    fs::write(
        run.join("metrics").join(format!("{tag}.json")),
        serde_json::to_string_pretty(&summary)?,
    )?;
    println!("{summary}");
    Ok(())
}

fn cmd_sample_points(
    common: &CommonOpts,
    data: &Path,
    run: &Path,
    split: &str,
    index: usize,
    out: &Path,
) -> Result<()> {
    let cfg = load_config(common.config.as_deref(), &common.sets)?;
    let samples = load_split(data, split)?;
    let sample = samples
        .get(index)
        .ok_or_else(|| anyhow!("index {index} out of range; split holds {}", samples.len()))?;
    let nets = load_pips_nets(run)?;
    let group = group();
    let mut rng = StdRng::seed_from_u64(cfg.eval_seed);
    let (c, s) = pips_points(
        &nets,
        sample,
        cfg.eval_observed_n,
        Some(cfg.eval_jitter),
        &group,
        &mut rng,
    )?;
    let id = sample_id(sample);
    fs::create_dir_all(out)?;
    let c_path = out.join(format!("{id}-c.ply"));
    guard_output(&c_path, common.force)?;
    save_ply(&c_path, &c, None)?;
    save_ply(&out.join(format!("{id}-s.ply")), &s, None)?;
    println!(
        "{}",
        json!({ "id": id, "classified": c.len(), "stability": s.len() })
    );
    Ok(())
}

fn cmd_report(run: &Path, force: bool) -> Result<()> {
    let report_dir = run.join("report");
    guard_output(&report_dir.join("report.md"), force)?;
    fs::create_dir_all(&report_dir)?;

    // Loss curves: the second column of every curve CSV.
    let mut series: Vec<(String, Vec<f64>)> = Vec::new();
    let curves_dir = run.join("curves");
    if curves_dir.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(&curves_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        paths.sort();
        for p in &paths {
            let Some(curve) = Curve::from_csv(&fs::read_to_string(p)?) else {
                continue;
            };
            if curve.columns.len() < 2 {
                continue;
            }
            let name = format!(
                "{} ({})",
                p.file_stem().unwrap().to_string_lossy(),
                curve.columns[1]
            );
            if let Some(v) = curve.column(&curve.columns[1].clone()) {
                series.push((name, v));
            }
        }
    }
    if !series.is_empty() {
        fs::write(
            report_dir.join("curves.svg"),
            svg::line_chart("Training loss per epoch", &series, "epoch"),
        )?;
    }

    // Metrics summaries.
    let mut metrics: Vec<serde_json::Value> = Vec::new();
    let metrics_dir = run.join("metrics");
    if metrics_dir.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(&metrics_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in &paths {
            metrics.push(serde_json::from_str(&fs::read_to_string(p)?)?);
        }
    }
    if !metrics.is_empty() {
        let bars: Vec<(String, f64)> = metrics
            .iter()
            .map(|m| {
                (
                    m["tag"].as_str().unwrap_or("?").to_string(),
                    m["precision"]["5deg5cm"].as_f64().unwrap_or(0.0),
                )
            })
            .collect();
        fs::write(
            report_dir.join("precision.svg"),
            svg::bar_chart("Precision at 5 deg / 5 cm", &bars, ""),
        )?;
    }

    // Student cost comparison.
    let mut stats: Vec<serde_json::Value> = Vec::new();
    let stats_dir = run.join("stats");
    if stats_dir.is_dir() {
        let mut paths: Vec<PathBuf> = fs::read_dir(&stats_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in &paths {
            stats.push(serde_json::from_str(&fs::read_to_string(p)?)?);
        }
    }
    if !stats.is_empty() {
        let bars: Vec<(String, f64)> = stats
            .iter()
            .map(|s| {
                (
                    s["mode"].as_str().unwrap_or("?").to_string(),
                    s["queries_per_epoch"].as_f64().unwrap_or(0.0),
                )
            })
            .collect();
        fs::write(
            report_dir.join("queries.svg"),
            svg::bar_chart("Student queries per epoch", &bars, ""),
        )?;
        let bars: Vec<(String, f64)> = stats
            .iter()
            .map(|s| {
                (
                    s["mode"].as_str().unwrap_or("?").to_string(),
                    s["wall_per_epoch_s"].as_f64().unwrap_or(0.0),
                )
            })
            .collect();
        fs::write(
            report_dir.join("wall.svg"),
            svg::bar_chart("Student wall time per epoch", &bars, "s"),
        )?;
    }

    // Markdown summary table.
    let mut md = String::from("# Run report\n\n");
    if !stats.is_empty() {
        md.push_str("## Student training cost\n\n");
        md.push_str("| mode | final MSE | queries/epoch | wall s/epoch |\n");
        md.push_str("|---|---|---|---|\n");
        for s in &stats {
            md.push_str(&format!(
                "| {} | {:.5} | {:.1} | {:.2} |\n",
                s["mode"].as_str().unwrap_or("?"),
                s["final_mse"].as_f64().unwrap_or(f64::NAN),
                s["queries_per_epoch"].as_f64().unwrap_or(f64::NAN),
                s["wall_per_epoch_s"].as_f64().unwrap_or(f64::NAN),
            ));
        }
        md.push('\n');
    }
    if !metrics.is_empty() {
        md.push_str("## Pose metrics\n\n");
        md.push_str(
            "| tag | valid | median rot (deg) | median trans (m) | P@5deg5cm |\n",
        );
        md.push_str("|---|---|---|---|---|\n");
        for m in &metrics {
            md.push_str(&format!(
                "| {} | {}/{} | {:.3} | {:.4} | {:.3} |\n",
                m["tag"].as_str().unwrap_or("?"),
                m["n_valid"],
                m["n_total"],
                m["median_rot_deg"].as_f64().unwrap_or(f64::NAN),
                m["median_trans_m"].as_f64().unwrap_or(f64::NAN),
                m["precision"]["5deg5cm"].as_f64().unwrap_or(f64::NAN),
            ));
        }
        md.push('\n');
    }
    if stats.is_empty() && metrics.is_empty() && series.is_empty() {
        bail!("run directory {} holds no curves, stats, or metrics", run.display());
    }
    fs::write(report_dir.join("report.md"), &md)?;
    println!(
        "{}",
        json!({
            "report": report_dir.display().to_string(),
            "curves": series.len(),
            "metrics": metrics.len(),
            "stats": stats.len(),
        })
    );
    Ok(())
}
