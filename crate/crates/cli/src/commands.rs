use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dpilab::eval::{denoise_sweep, svg_line_plot, uniform_steps, write_sweep_csv, Series, DEFAULT_SWEEP_STEPS};
use dpilab::experiment::{
    heldout_objective, overhead_row, sample_metrics, test_set, write_overhead_csv, write_points_csv,
    write_sample_metrics_csv, HeldoutSpec,
};
use dpilab::networks::{ArchSpec, Model, ModelSpec};
use dpilab::train::{write_metrics_csv, ArchKind, Checkpoint, LoadedRun, RunConfig, Trainer};
use dpilab::{Error, LambdaMode, Scope, Strategy};

use crate::{Command, RunArgs};

pub const CHECKPOINT_FILE: &str = "checkpoint.dpi";
pub const CONFIG_FILE: &str = "config.txt";
pub const METRICS_FILE: &str = "metrics.csv";

/// 2 for configuration errors, 3 for numeric aborts, 4 for I/O and format.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Numeric(_) => 3,
                Error::Io(_) | Error::Format { .. } => 4,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
    }
    2
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { run, out } => {
            let cfg = resolve(&run, &out)?;
            train_into(&cfg, &out, true)?;
            Ok(())
        }
        Command::SweepDenoise {
            ckpts,
            out,
            seeds,
            n_test,
            noise_seed,
            steps,
        } => sweep(&ckpts, &out, seeds, n_test, noise_seed, &steps),
        Command::Sample {
            ckpt,
            n,
            steps,
            solver,
            seed,
            out,
        } => sample(&ckpt, n, steps, solver.as_deref(), seed, &out),
        Command::Report { runs, out } => report(&runs, &out),
        Command::AblateLambda { mode, seeds, run, out } => ablate(&mode, seeds, &run, &out),
        Command::Overhead { batch, out } => overhead(batch, &out),
    }
}

fn resolve(args: &RunArgs, out: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
    }
    let flags = [
        ("framework", args.framework.clone()),
        ("conditioning", args.conditioning.clone()),
        ("dataset", args.dataset.clone()),
        ("iterations", args.iterations.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("lambda_mode", args.lambda_mode.clone()),
    ];
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, &v)?;
        }
    }
    for kv in &args.sets {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Error::Config(format!("--set expects KEY=VALUE, got '{}'", kv)).into());
        };
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.out = Some(out.to_path_buf());
    cfg.validate()?;
    Ok(cfg.resolved())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_lambda(model: &Model, dir: &Path) -> Result<()> {
    let Some(dual) = model.dual() else { return Ok(()) };
    let interp = dual.interp();
    let mut w = create(&dir.join("lambda.csv"))?;
    interp.write_table_csv(&mut w)?;
    w.flush()?;
    let points = interp.table().into_iter().map(|(_, s, l)| (s, l)).collect();
    let series = [Series {
        label: interp.mode().to_string(),
        points,
    }];
    write_text(&dir.join("lambda.svg"), &svg_line_plot("interpolation weight", "s", "lambda", &series, false))
}

/// Trains `cfg` and writes its artifacts into `dir`.
fn train_into(cfg: &RunConfig, dir: &Path, verbose: bool) -> Result<Checkpoint> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_text(&dir.join(CONFIG_FILE), &cfg.to_text())?;
    if cfg.arch_kind() == ArchKind::Oracle {
        let ckpt = dpilab::train::train(cfg)?.checkpoint;
        ckpt.save(&dir.join(CHECKPOINT_FILE))?;
        write_metrics_csv(&[], create(&dir.join(METRICS_FILE))?)?;
        return Ok(ckpt);
    }
    let mut trainer = Trainer::new(cfg)?;
    let outcome = trainer.run(|row| {
        if verbose {
            eprintln!(
                "iter {:>7}  loss {:.5}  lambda_l1 {:.4}  {:.1}s",
                row.iteration, row.loss, row.lambda_l1_delta, row.wall_seconds
            );
        }
    })?;
    outcome.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    let mut w = create(&dir.join(METRICS_FILE))?;
    write_metrics_csv(&outcome.metrics, &mut w)?;
    w.flush()?;
    write_lambda(trainer.model(), dir)?;
    Ok(outcome.checkpoint)
}

fn sweep(ckpts: &[PathBuf], out: &Path, seeds: usize, n_test: usize, noise_seed: u64, steps: &[usize]) -> Result<()> {
    let runs: Vec<LoadedRun> = ckpts
        .iter()
        .map(|p| LoadedRun::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<_>>()?;
    let first = &runs[0];
    let Some(sched) = &first.sched else {
        return Err(Error::Config("the denoising sweep needs diffusion checkpoints".into()).into());
    };
    for (run, path) in runs.iter().zip(ckpts) {
        if run.sched.as_ref() != Some(sched) {
            return Err(Error::Config(format!("{} uses a different noise schedule", path.display())).into());
        }
        if run.config.dataset_spec() != first.config.dataset_spec() {
            return Err(Error::Config(format!("{} uses a different dataset", path.display())).into());
        }
    }
    let steps = if !steps.is_empty() {
        steps.to_vec()
    } else if sched.steps() == 1000 {
        DEFAULT_SWEEP_STEPS.to_vec()
    } else {
        uniform_steps(sched.steps(), 10)
    };
    let test = test_set(&first.config, n_test, noise_seed);
    let labels = labels(&runs);
    let mut reports = Vec::new();
    for (run, label) in runs.iter().zip(labels) {
        let rep = denoise_sweep(&run.predictor, &label, sched, &test, &steps, seeds, noise_seed)?;
        eprintln!("{:<24} mean eps_mse {:.5}", rep.strategy, rep.mean_eps_mse());
        reports.push(rep);
    }
    fs::create_dir_all(out)?;
    let mut w = create(&out.join("sweep.csv"))?;
    write_sweep_csv(&reports, &mut w)?;
    w.flush()?;
    let series: Vec<Series> = reports
        .iter()
        .map(|r| Series {
            label: r.strategy.clone(),
            points: r.rows.iter().map(|row| (row.t as f64, row.noise_scaled_mse)).collect(),
        })
        .collect();
    write_text(&out.join("sweep.svg"), &svg_line_plot("noise-scaled MSE", "t", "sigma^2 * eps MSE", &series, true))?;
    let ck: Vec<String> = ckpts.iter().map(|p| p.display().to_string()).collect();
    let st: Vec<String> = steps.iter().map(|s| s.to_string()).collect();
    write_text(
        &out.join("sweep_config.txt"),
        &format!(
            "ckpts = {}\nseeds = {}\nn_test = {}\nnoise_seed = {}\nsteps = {}\n",
            ck.join(","),
            seeds,
            n_test,
            noise_seed,
            st.join(",")
        ),
    )
}

/// Strategy names, with the seed appended where two runs share one.
fn labels(runs: &[LoadedRun]) -> Vec<String> {
    let base: Vec<String> = runs
        .iter()
        .map(|r| match r.config.arch_kind() {
            ArchKind::Oracle => "oracle".to_string(),
            _ => r.config.conditioning.to_string(),
        })
        .collect();
    base.iter()
        .zip(runs)
        .map(|(b, r)| {
            if base.iter().filter(|x| *x == b).count() > 1 {
                format!("{}-seed{}", b, r.config.seed)
            } else {
                b.clone()
            }
        })
        .collect()
}

fn sample(ckpt: &Path, n: usize, steps: Option<usize>, solver: Option<&str>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut run = LoadedRun::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    if let Some(s) = steps {
        run.config.sample_steps = s;
    }
    if let Some(s) = solver {
        run.config.solver = s.parse()?;
    }
    let seed = seed.unwrap_or(run.config.seed);
    run.config.validate()?;
    fs::create_dir_all(out)?;
    write_text(&out.join(CONFIG_FILE), &format!("{}sample_n = {}\nsample_seed = {}\n", run.config.to_text(), n, seed))?;
    let samples = run.sample(n, seed)?;
    if run.config.dataset.is_image() {
        let dump = Checkpoint {
            config: run.config.to_text(),
            params: vec![("samples".into(), samples.clone())],
            optim: Vec::new(),
            ema: Vec::new(),
        };
        dump.save(&out.join("samples.dpi"))?;
    } else {
        let mut w = create(&out.join("samples.csv"))?;
        write_points_csv(&samples, &mut w)?;
        w.flush()?;
    }
    if n > 0 {
        let m = sample_metrics(&samples, &run.config, seed.wrapping_add(1))?;
        eprintln!("energy distance {:.5} (reference {:.5})", m.energy_distance, m.reference_baseline);
        if let Some(c) = &m.coverage {
            eprintln!("mode coverage {:.3}", c.covered);
        }
        let mut w = create(&out.join("sample_metrics.csv"))?;
        write_sample_metrics_csv(&m, &mut w)?;
        w.flush()?;
    }
    if let Some(model) = run.model() {
        write_lambda(model, out)?;
    }
    Ok(())
}

const REPORT_HEADER: &str = "run,framework,conditioning,dataset,seed,lambda_mode,iterations,final_loss,heldout_objective,energy_distance,reference_baseline,mode_coverage";

fn last_loss(dir: &Path) -> Result<Option<f64>> {
    let path = dir.join(METRICS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path)?;
    match text.lines().skip(1).last() {
        Some(line) => {
            let cell = line.split(',').nth(1).unwrap_or("");
            let v = cell
                .parse()
                .map_err(|_| Error::Config(format!("bad loss '{}' in {}", cell, path.display())))?;
            Ok(Some(v))
        }
        None => Ok(None),
    }
}

fn sample_values(dir: &Path) -> Result<[Option<f64>; 3]> {
    let mut vals = [None; 3];
    let path = dir.join("sample_metrics.csv");
    if !path.exists() {
        return Ok(vals);
    }
    for line in fs::read_to_string(&path)?.lines().skip(1) {
        if let Some((k, v)) = line.split_once(',') {
            let slot = match k {
                "energy_distance" => 0,
                "reference_baseline" => 1,
                "mode_coverage" => 2,
                _ => continue,
            };
            vals[slot] = v.parse().ok();
        }
    }
    Ok(vals)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{:?}", x)).unwrap_or_default()
}

fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let mut rows = vec![REPORT_HEADER.to_string()];
    for dir in runs {
        let ckpt = Checkpoint::load(&dir.join(CHECKPOINT_FILE)).with_context(|| format!("loading run {}", dir.display()))?;
        let run = LoadedRun::from_checkpoint(&ckpt)?;
        let objective = heldout_objective(&run, &HeldoutSpec::default())?;
        // Sample metrics live in the run directory or a `samples` subdirectory.
        let mut sm = sample_values(dir)?;
        if sm.iter().all(Option::is_none) {
            sm = sample_values(&dir.join("samples"))?;
        }
        let c = &run.config;
        rows.push(format!(
            "{},{},{},{},{},{},{},{},{:?},{},{},{}",
            dir.display(),
            c.framework,
            c.conditioning,
            c.dataset,
            c.seed,
            c.lambda_mode,
            ckpt.iteration(),
            cell(last_loss(dir)?),
            objective,
            cell(sm[0]),
            cell(sm[1]),
            cell(sm[2])
        ));
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_text(out, &(rows.join("\n") + "\n"))
}

fn ablate(mode: &str, seeds: u64, args: &RunArgs, out: &Path) -> Result<()> {
    let base = resolve(args, out)?;
    if base.conditioning != Strategy::Dpi {
        return Err(Error::Config("the λ ablation needs dpi conditioning".into()).into());
    }
    let learnable = if base.lambda_mode.is_learnable() { base.lambda_mode } else { LambdaMode::ExactEndpoint };
    let modes = match mode {
        "learnable" => vec![learnable],
        "linear" => vec![LambdaMode::FixedLinear],
        "both" => vec![learnable, LambdaMode::FixedLinear],
        other => return Err(Error::Config(format!("unknown ablation mode '{}' (learnable|linear|both)", other)).into()),
    };
    if seeds == 0 {
        return Err(Error::Config("need at least one seed".into()).into());
    }
    fs::create_dir_all(out)?;
    let mut rows = vec!["lambda_mode,seed,heldout_objective,final_loss,lambda_l1_delta".to_string()];
    let mut summary = vec!["lambda_mode,mean_heldout_objective,seeds".to_string()];
    for m in modes {
        let mut total = 0.0;
        for k in 0..seeds {
            let mut cfg = base.clone();
            cfg.lambda_mode = m;
            cfg.seed = base.seed + k;
            let dir = out.join(format!("{}-seed{}", m, cfg.seed));
            cfg.out = Some(dir.clone());
            eprintln!("training {} seed {}", m, cfg.seed);
            let ckpt = train_into(&cfg, &dir, false)?;
            let run = LoadedRun::from_checkpoint(&ckpt)?;
            let objective = heldout_objective(&run, &HeldoutSpec::default())?;
            let delta = run.model().and_then(Model::dual).map_or(0.0, |d| d.interp().l1_from_linear());
            total += objective;
            rows.push(format!("{},{},{:?},{},{:?}", m, cfg.seed, objective, cell(last_loss(&dir)?), delta));
        }
        let mean = total / seeds as f64;
        eprintln!("{:<16} mean held-out objective {:.6}", m.to_string(), mean);
        summary.push(format!("{},{:?},{}", m, mean, seeds));
    }
    write_text(&out.join("ablation.csv"), &(rows.join("\n") + "\n"))?;
    write_text(&out.join("ablation_summary.csv"), &(summary.join("\n") + "\n"))
}

fn overhead(batch: usize, out: &Path) -> Result<()> {
    if batch == 0 {
        return Err(Error::Config("batch must be positive".into()).into());
    }
    let defaults = RunConfig::default();
    let mlp = ModelSpec {
        arch: ArchSpec::Mlp {
            hidden: defaults.hidden.clone(),
        },
        data_shape: vec![2],
        strategy: Strategy::Dpi,
        emb_dim: 32,
        scope: Scope::WEIGHTS,
        lambda_mode: LambdaMode::ExactEndpoint,
        grid_size: defaults.grid_size,
        s_range: (0.0, (defaults.diffusion_steps - 1) as f64),
        init_scheme: defaults.init_scheme,
        seed: 0,
    };
    let unet = ModelSpec {
        arch: ArchSpec::UNet {
            width: defaults.unet_width,
            groups: defaults.unet_groups,
        },
        data_shape: vec![1, defaults.image_size, defaults.image_size],
        emb_dim: 64,
        scope: Scope::ALL,
        ..mlp.clone()
    };
    let mut rows = Vec::new();
    for spec in [&mlp, &unet] {
        for scope in [Scope::WEIGHTS, Scope::ALL] {
            rows.push(overhead_row(spec, scope, batch)?);
        }
    }
    fs::create_dir_all(out)?;
    let mut w = create(&out.join("overhead.csv"))?;
    write_overhead_csv(&rows, &mut w)?;
    w.flush()?;
    write_overhead_csv(&rows, std::io::stdout().lock())?;
    Ok(())
}
