use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use secure_core::adversary::{NormKind, PgdConfig, PgdMode};
use secure_core::data::{
    generate_synthetic, load_dataset, save_dataset, Dataset, Split, SyntheticConfig, MANIFEST_FILE,
};
use secure_core::evalsuite::plot::{line_chart, stack, trajectory_svg, Series};
use secure_core::evalsuite::{
    bench, certification_csv, certify_secure_sweep, input_noise, perturb_gru2, predict_all, BenchReport, Condition,
};
use secure_core::losses::Term;
use secure_core::model::{load_checkpoint, predict, save_checkpoint, Checkpoint, ModelParams, Role};
use secure_core::trainer::{secure_finetune, train_baseline, RunLog, TrainConfig};
use secure_core::verify::gradcheck_suite;

use crate::args::{
    float_list, required, BenchArgs, CertifyArgs, FinetuneArgs, GenDataArgs, GradcheckArgs, PgdFlags, ReportArgs,
    TrainArgs, TrainingFlags,
};
use crate::failure::Failure;
use crate::run::{pretty_json, write_atomic, Run};

pub const TRAJECTORIES_FILE: &str = "trajectories.json";
pub const RUN_LOG_FILE: &str = "run_log.json";

/// `path` itself when it holds a dataset, otherwise its `split` subdirectory.
fn dataset_dir(path: &Path, split: &str) -> PathBuf {
    if !path.join(MANIFEST_FILE).exists() && path.join(split).join(MANIFEST_FILE).exists() {
        path.join(split)
    } else {
        path.to_path_buf()
    }
}

fn load_data(run: &mut Run, path: &Path, split: &str) -> Result<Dataset> {
    let dir = dataset_dir(path, split);
    let ds = load_dataset(&dir)?;
    run.input(&dir.join(MANIFEST_FILE))?;
    Ok(ds)
}

fn load_model(run: &mut Run, path: &Path) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    run.input(path)?;
    Ok(ck)
}

fn check_dims(params: &ModelParams, ds: &Dataset, what: &Path) -> Result<(), Failure> {
    if params.dims.d != ds.dim() {
        return Err(Failure::Usage(format!(
            "{}: model feature dimension {} does not match dataset dimension {}",
            what.display(),
            params.dims.d,
            ds.dim()
        )));
    }
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let seed = a.seed.unwrap_or(0);
    let d = SyntheticConfig::default();
    let train_cfg = SyntheticConfig {
        num_videos: a.num_videos.unwrap_or(d.num_videos),
        positive_fraction: a.positive_frac.unwrap_or(d.positive_fraction),
        frames: a.t.unwrap_or(d.frames),
        objects: a.n.unwrap_or(d.objects),
        dim: a.d.unwrap_or(d.dim),
        fps: a.fps.unwrap_or(d.fps),
        signal_strength: a.signal.unwrap_or(d.signal_strength),
        noise_std: a.noise.unwrap_or(d.noise_std),
        ramp_len: a.ramp_len.unwrap_or(d.ramp_len),
        split: Split::Train,
    };
    train_cfg.validate()?;
    let test_cfg = SyntheticConfig {
        num_videos: a.test_videos.unwrap_or(train_cfg.num_videos / 2),
        split: Split::Test,
        ..train_cfg.clone()
    };
    let mut run = Run::open("gen-data", Some(seed), a.out.as_deref())?;
    let mut splits = vec![("train", &train_cfg)];
    if test_cfg.num_videos > 0 {
        splits.push(("test", &test_cfg));
    }
    for (name, cfg) in splits {
        let ds = generate_synthetic(cfg, seed)?;
        let dir = run.path(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
        }
        save_dataset(&ds, &dir)?;
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        files.sort();
        files.iter().for_each(|f| run.output(f));
        println!(
            "{name}: {} videos ({} positive) -> {}",
            ds.len(),
            ds.num_positive(),
            dir.display()
        );
    }
    run.finish(json!({ "seed": seed, "train": train_cfg, "test": test_cfg }))?;
    Ok(())
}

fn apply_training(cfg: &mut TrainConfig, t: &TrainingFlags) {
    if let Some(v) = t.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = t.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = t.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = t.seed {
        cfg.seed = v;
    }
    if let Some(v) = t.clip_norm {
        cfg.clip_norm = v;
    }
}

fn parse_norm(s: &str) -> Result<NormKind, Failure> {
    match s.to_ascii_lowercase().as_str() {
        "l2" => Ok(NormKind::L2),
        "linf" | "l-inf" | "inf" => Ok(NormKind::Linf),
        _ => Err(Failure::Usage(format!("--norm: expected `l2` or `linf`, got `{s}`"))),
    }
}

fn apply_pgd(cfg: &mut PgdConfig, p: &PgdFlags) -> Result<(), Failure> {
    if let Some(v) = p.epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = p.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = p.iterations {
        cfg.iterations = v;
    }
    if let Some(s) = &p.norm {
        cfg.norm = parse_norm(s)?;
    }
    if let Some(s) = &p.pgd_mode {
        cfg.mode = match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "per-sample" => PgdMode::PerSample,
            "shared-batch" => PgdMode::SharedBatch,
            _ => {
                return Err(Failure::Usage(format!(
                    "--pgd-mode: expected `per-sample` or `shared-batch`, got `{s}`"
                )))
            }
        };
    }
    Ok(())
}

/// Robustness terms named by an `--ablation` value.
pub fn parse_terms(s: &str) -> Result<Vec<Term>, Failure> {
    let s = s.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("none") || s.eq_ignore_ascii_case("task") {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| Term::parse(t).ok_or_else(|| Failure::Usage(format!("--ablation: unknown term `{}`", t.trim()))))
        .collect()
}

fn write_run_log(run: &mut Run, log: &RunLog) -> Result<()> {
    run.write("run_log.csv", log.to_csv().as_bytes())?;
    run.write("epochs.csv", log.epochs_csv().as_bytes())?;
    run.write(RUN_LOG_FILE, &pretty_json(log))?;
    run.write("config.json", &pretty_json(&log.config))?;
    Ok(())
}

fn print_epochs(log: &RunLog) {
    for e in &log.epochs {
        let m = &e.mean;
        println!(
            "epoch {:>3}  task {:.5}  cps {:.3e}  spd {:.3e}  clm {:.3e}  sld {:.3e}  total {:.5}  train AP {:.4}",
            e.epoch, m.l_task, m.l_cps, m.l_spd, m.l_clm, m.l_sld, m.l_total, e.train_ap
        );
    }
}

fn save_model(run: &mut Run, explicit: Option<&Path>, default: &str, params: &ModelParams, role: Role) -> Result<()> {
    let path = explicit.map_or_else(|| run.path(default), Path::to_path_buf);
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    save_checkpoint(&path, params, role)?;
    run.output(&path);
    println!("checkpoint -> {}", path.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let data = required(&a.data, "data")?;
    let mut cfg = TrainConfig::baseline();
    apply_training(&mut cfg, &a.training);
    if let Some(v) = a.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = a.heads {
        cfg.heads = v;
    }
    cfg.validate()?;
    let mut run = Run::open("train", Some(cfg.seed), a.output.out_dir.as_deref())?;
    let ds = load_data(&mut run, data, "train")?;
    let (params, log) = train_baseline(&ds, &cfg)?;
    print_epochs(&log);
    save_model(
        &mut run,
        a.out_checkpoint.as_deref(),
        "baseline.ckpt",
        &params,
        Role::Baseline,
    )?;
    write_run_log(&mut run, &log)?;
    run.finish(json!({ "data": data, "train": cfg }))?;
    Ok(())
}

pub fn finetune_secure(a: &FinetuneArgs) -> Result<()> {
    let baseline = required(&a.baseline, "baseline")?;
    let data = required(&a.data, "data")?;
    let mut cfg = TrainConfig::finetune();
    apply_training(&mut cfg, &a.training);
    apply_pgd(&mut cfg.pgd, &a.pgd)?;
    let w = &mut cfg.weights;
    for (flag, slot) in [
        (a.lambda_c_out, &mut w.lambda_c_out),
        (a.lambda_s_out, &mut w.lambda_s_out),
        (a.lambda_c_feat, &mut w.lambda_c_feat),
        (a.lambda_s_feat, &mut w.lambda_s_feat),
    ] {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(s) = &a.ablation {
        let keep = parse_terms(s)?;
        for t in Term::ALL {
            w.set_enabled(t, keep.contains(&t));
        }
    }
    let mut run = Run::open("finetune-secure", Some(cfg.seed), a.output.out_dir.as_deref())?;
    let base = load_model(&mut run, baseline)?;
    cfg.hidden = base.params.dims.hidden;
    cfg.heads = base.params.dims.heads;
    cfg.validate()?;
    let ds = load_data(&mut run, data, "train")?;
    check_dims(&base.params, &ds, baseline)?;
    let (params, log) = secure_finetune(&base.params, &ds, &cfg)?;
    print_epochs(&log);
    save_model(
        &mut run,
        a.out_checkpoint.as_deref(),
        "secure.ckpt",
        &params,
        Role::Secure,
    )?;
    write_run_log(&mut run, &log)?;
    let enabled: Vec<&str> = Term::ALL
        .iter()
        .filter(|t| cfg.weights.enabled(**t))
        .map(|t| t.name())
        .collect();
    run.finish(json!({
        "baseline": baseline,
        "data": data,
        "terms": enabled,
        "train": cfg,
    }))?;
    Ok(())
}

/// Display names for the checkpoints: their roles, or file stems when roles
/// repeat.
fn model_names(paths: &[PathBuf], roles: &[Role]) -> Vec<String> {
    let role_name = |r: Role| {
        serde_json::to_value(r)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default()
    };
    let by_role: Vec<String> = roles.iter().map(|&r| role_name(r)).collect();
    let unique = |names: &[String]| names.iter().enumerate().all(|(i, n)| !names[..i].contains(n));
    if unique(&by_role) {
        return by_role;
    }
    let stems: Vec<String> = paths
        .iter()
        .map(|p| {
            p.file_stem()
                .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
        })
        .collect();
    if unique(&stems) {
        return stems;
    }
    (0..paths.len()).map(|i| format!("model{}", i + 1)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VideoTrajectory {
    pub video_id: String,
    pub positive: bool,
    pub tau: usize,
    pub clean: Vec<f64>,
    pub perturbed: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelTrajectories {
    pub model: String,
    pub videos: Vec<VideoTrajectory>,
}

/// Frame probabilities of every test video, clean and under the strongest
/// requested perturbation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectories {
    pub condition: Option<Condition>,
    pub seed: u64,
    pub fps: u32,
    pub models: Vec<ModelTrajectories>,
}

fn strongest(levels: &[f64]) -> Option<f64> {
    levels.iter().copied().filter(|s| *s > 0.0).reduce(f64::max)
}

fn trajectories(
    names: &[String],
    models: &[&ModelParams],
    ds: &Dataset,
    ip: &[f64],
    lp: &[f64],
    seed: u64,
) -> Result<Trajectories> {
    let condition = strongest(ip)
        .map(Condition::Ip)
        .or_else(|| strongest(lp).map(Condition::Lp));
    let xs: Vec<_> = ds.videos().iter().map(|v| &v.features).collect();
    let mut out = Vec::with_capacity(models.len());
    for (name, params) in names.iter().zip(models) {
        let clean = predict_all(params, &xs)?;
        let perturbed = match condition {
            Some(Condition::Ip(s)) => Some(
                xs.iter()
                    .enumerate()
                    .map(|(i, x)| predict(&input_noise(x, s, seed, i)?, params))
                    .collect::<secure_core::Result<Vec<_>>>()?,
            ),
            Some(Condition::Lp(s)) => Some(predict_all(&perturb_gru2(params, s, seed)?, &xs)?),
            _ => None,
        };
        let videos = ds
            .videos()
            .iter()
            .enumerate()
            .map(|(i, v)| VideoTrajectory {
                video_id: v.features.video_id.clone(),
                positive: v.label.accident,
                tau: v.label.tau,
                clean: clean[i].clone(),
                perturbed: perturbed.as_ref().map(|p| p[i].clone()),
            })
            .collect();
        out.push(ModelTrajectories {
            model: name.clone(),
            videos,
        });
    }
    Ok(Trajectories {
        condition,
        seed,
        fps: ds.fps(),
        models: out,
    })
}

pub fn bench_cmd(a: &BenchArgs) -> Result<()> {
    if a.checkpoint.is_empty() {
        return Err(Failure::Usage("--checkpoint is required".into()).into());
    }
    let data = required(&a.data, "data")?;
    let ip = float_list("ip-sigmas", a.ip_sigmas.as_deref().unwrap_or("0.1,0.2"))?;
    let lp = float_list("lp-sigmas", a.lp_sigmas.as_deref().unwrap_or("0.1,0.2"))?;
    let k = a.seeds.unwrap_or(3);
    if k == 0 {
        return Err(Failure::Usage("--seeds must be >= 1".into()).into());
    }
    let base_seed = a.seed.unwrap_or(0);
    let seeds: Vec<u64> = (0..k as u64).map(|i| base_seed + i).collect();
    let mut run = Run::open("bench", Some(base_seed), a.output.out_dir.as_deref())?;
    let ds = load_data(&mut run, data, "test")?;
    let mut checkpoints = Vec::with_capacity(a.checkpoint.len());
    for p in &a.checkpoint {
        let ck = load_model(&mut run, p)?;
        check_dims(&ck.params, &ds, p)?;
        checkpoints.push(ck);
    }
    let names = model_names(&a.checkpoint, &checkpoints.iter().map(|c| c.role).collect::<Vec<_>>());
    let mut report = BenchReport::default();
    for (name, ck) in names.iter().zip(&checkpoints) {
        report.rows.extend(bench(name, &ck.params, &ds, &ip, &lp, &seeds)?.rows);
    }
    let params: Vec<&ModelParams> = checkpoints.iter().map(|c| &c.params).collect();
    let traj = trajectories(&names, &params, &ds, &ip, &lp, base_seed)?;
    let table = report.comparison_markdown();
    print!("{table}");
    run.write("bench.csv", report.to_csv().as_bytes())?;
    run.write("bench.json", &pretty_json(&report))?;
    run.write("comparison.md", table.as_bytes())?;
    run.write(TRAJECTORIES_FILE, &pretty_json(&traj))?;
    run.finish(json!({
        "checkpoints": a.checkpoint,
        "models": names,
        "data": data,
        "ip_sigmas": ip,
        "lp_sigmas": lp,
        "seeds": seeds,
    }))?;
    Ok(())
}

pub fn certify(a: &CertifyArgs) -> Result<()> {
    let checkpoint = required(&a.checkpoint, "checkpoint")?;
    let reference = required(&a.reference, "reference")?;
    let data = required(&a.data, "data")?;
    let epsilons = float_list("epsilon", a.epsilons.as_deref().unwrap_or("0.01"))?;
    if epsilons.is_empty() {
        return Err(Failure::Usage("--epsilon: at least one radius is required".into()).into());
    }
    let mut pgd = PgdConfig::default();
    apply_pgd(
        &mut pgd,
        &PgdFlags {
            alpha: a.alpha,
            iterations: a.iterations,
            norm: a.norm.clone(),
            ..PgdFlags::default()
        },
    )?;
    pgd.validate()?;
    let probes = a.probes.unwrap_or(50);
    let seed = a.seed.unwrap_or(0);
    let mut run = Run::open("certify", Some(seed), a.output.out_dir.as_deref())?;
    let theta = load_model(&mut run, checkpoint)?;
    let theta_star = load_model(&mut run, reference)?;
    let ds = load_data(&mut run, data, "test")?;
    check_dims(&theta.params, &ds, checkpoint)?;
    let results = certify_secure_sweep(&theta.params, &theta_star.params, &ds, &epsilons, &pgd, probes, seed)?;
    let csv = certification_csv(&results);
    print!("{csv}");
    run.write("certification.csv", csv.as_bytes())?;
    run.write("certification.json", &pretty_json(&results))?;
    run.finish(json!({
        "checkpoint": checkpoint,
        "reference": reference,
        "data": data,
        "epsilons": epsilons,
        "probes": probes,
        "pgd": pgd,
        "seed": seed,
    }))?;
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<()> {
    let first = a.seed.unwrap_or(0);
    let count = a.seeds.unwrap_or(5);
    let coords = a.coords.unwrap_or(10);
    let tolerance = a.tolerance.unwrap_or(1e-4);
    if count == 0 || coords == 0 {
        return Err(Failure::Usage("--seeds and --coords must be >= 1".into()).into());
    }
    if !(tolerance > 0.0 && tolerance.is_finite()) {
        return Err(Failure::Usage(format!("--tolerance must be finite and > 0, got {tolerance}")).into());
    }
    let seeds: Vec<u64> = (0..count as u64).map(|i| first + i).collect();
    let mut run = Run::open("gradcheck", Some(first), a.output.out_dir.as_deref())?;
    let report = gradcheck_suite(&seeds, coords, tolerance)?;
    run.write("gradcheck.json", &pretty_json(&report))?;
    run.finish(json!({ "seeds": seeds, "coords": coords, "tolerance": tolerance }))?;
    let worst = report.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    println!(
        "{} checks over {} seeds, worst relative error {worst:.3e} (tolerance {tolerance:e})",
        report.cases.len(),
        seeds.len()
    );
    let failures: Vec<String> = report
        .failures()
        .map(|c| format!("{} (seed {}): {:.3e}", c.name, c.seed, c.max_rel_err))
        .collect();
    if failures.is_empty() {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(Failure::Verification(format!("gradcheck failed:\n  {}", failures.join("\n  "))).into())
    }
}

fn trajectory_report(traj: &Trajectories, videos: &Option<String>) -> Result<(Vec<String>, String)> {
    let all = traj.models.first().map_or(&[][..], |m| &m.videos[..]);
    let wanted: Vec<String> = match videos.as_deref().map(str::trim).filter(|s| !s.is_empty()) {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => all
            .iter()
            .find(|v| v.positive)
            .or(all.first())
            .map(|v| v.video_id.clone())
            .into_iter()
            .collect(),
    };
    let label = traj
        .condition
        .map_or_else(|| "perturbed".to_string(), |c| c.to_string());
    let mut panels = Vec::new();
    let mut csv = String::from("model,video_id,frame,clean,perturbed\n");
    for id in &wanted {
        for m in &traj.models {
            let v = m
                .videos
                .iter()
                .find(|v| &v.video_id == id)
                .ok_or_else(|| Failure::Usage(format!("--videos: no video `{id}` in the bench run")))?;
            let mut series = vec![Series::new("clean", v.clean.clone())];
            if let Some(p) = &v.perturbed {
                series.push(Series::new(label.clone(), p.clone()).dashed());
            }
            let title = format!("{} / {}", m.model, v.video_id);
            panels.push(trajectory_svg(&title, &series, v.positive.then_some(v.tau)));
            for (t, c) in v.clean.iter().enumerate() {
                let p = v.perturbed.as_ref().map_or(String::new(), |p| p[t].to_string());
                let _ = writeln!(csv, "{},{},{},{c},{p}", m.model, v.video_id, t + 1);
            }
        }
    }
    Ok((panels, csv))
}

fn loss_report(log: &RunLog) -> (Vec<String>, String) {
    let col = |f: fn(&secure_core::losses::LossBreakdown) -> f64| log.steps.iter().map(|s| f(&s.losses)).collect();
    let task = vec![
        Series::new("L_task", col(|l| l.l_task)),
        Series::new("L_total", col(|l| l.l_total)).dashed(),
    ];
    let title = format!("{} training loss", log.kind);
    let mut panels = vec![line_chart(&title, "step", "loss", &task, None, None)];
    let robust: Vec<Series> = [
        ("L_cps", col(|l| l.l_cps)),
        ("L_spd", col(|l| l.l_spd)),
        ("L_clm", col(|l| l.l_clm)),
        ("L_sld", col(|l| l.l_sld)),
    ]
    .into_iter()
    .filter(|(_, v): &(_, Vec<f64>)| v.iter().any(|x| *x != 0.0))
    .map(|(n, v)| Series::new(n, v))
    .collect();
    if !robust.is_empty() {
        panels.push(line_chart("robustness terms", "step", "loss", &robust, None, None));
    }
    (panels, log.to_csv())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let dir = required(&a.run_dir, "run-dir")?;
    if !dir.is_dir() {
        return Err(Failure::Io(format!("{}: not a directory", dir.display())).into());
    }
    let traj_path = dir.join(TRAJECTORIES_FILE);
    let log_path = dir.join(RUN_LOG_FILE);
    if !traj_path.exists() && !log_path.exists() {
        return Err(Failure::Io(format!(
            "{}: no {TRAJECTORIES_FILE} or {RUN_LOG_FILE}; expected a bench, train or finetune-secure run",
            dir.display()
        ))
        .into());
    }
    let svg_path = a.out_svg.clone().unwrap_or_else(|| dir.join("report.svg"));
    let mut panels = Vec::new();
    if traj_path.exists() {
        let text = fs::read_to_string(&traj_path).with_context(|| format!("reading {}", traj_path.display()))?;
        let traj: Trajectories =
            serde_json::from_str(&text).map_err(|e| Failure::Io(format!("{}: {e}", traj_path.display())))?;
        let (p, csv) = trajectory_report(&traj, &a.videos)?;
        panels.extend(p);
        let csv_path = svg_path.with_extension("csv");
        write_atomic(&csv_path, csv.as_bytes())?;
        println!("trajectories -> {}", csv_path.display());
    }
    if log_path.exists() {
        let text = fs::read_to_string(&log_path).with_context(|| format!("reading {}", log_path.display()))?;
        let log: RunLog =
            serde_json::from_str(&text).map_err(|e| Failure::Io(format!("{}: {e}", log_path.display())))?;
        let (p, csv) = loss_report(&log);
        panels.extend(p);
        let stem = svg_path
            .file_stem()
            .map_or_else(|| "report".into(), |s| s.to_string_lossy().into_owned());
        let csv_path = svg_path.with_file_name(format!("{stem}_losses.csv"));
        write_atomic(&csv_path, csv.as_bytes())?;
        println!("loss curves -> {}", csv_path.display());
    }
    write_atomic(&svg_path, stack(&panels).as_bytes())?;
    println!("svg -> {}", svg_path.display());
    Ok(())
}
