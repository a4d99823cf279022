use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cit_core::harness::checkpoint::{Checkpoint, CITC_VERSION};
use cit_core::harness::config::TrainConfig;
use cit_core::harness::data::{gen_dataset, read_dataset, read_sample, write_dataset, DataConfig};
use cit_core::harness::eval::evaluate;
use cit_core::harness::gradsuite::{self, TOLERANCE};
use cit_core::harness::image_io::{read_pgm, read_ppm, write_pgm, write_ppm};
use cit_core::harness::train::{train_matching, train_tryon, Pipeline, TrainOutcome};
use cit_core::kernel::tensor::CITT_VERSION;
use cit_core::{Error, Result, Tensor};

use crate::{Command, EvalArgs, GenDataArgs, GradCheckArgs, TrainFlags, TrainMatchingArgs, TrainTryonArgs, TryonArgs, WarpArgs};

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::TrainMatching(a) => train_matching_cmd(a),
        Command::TrainTryon(a) => train_tryon_cmd(a),
        Command::Warp(a) => warp(a),
        Command::Tryon(a) => tryon(a),
        Command::Eval(a) => eval(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Version => {
            println!("cit {}", env!("CARGO_PKG_VERSION"));
            println!("checkpoint format CITC v{CITC_VERSION}");
            println!("tensor format CITT v{CITT_VERSION}");
            Ok(())
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn read_config_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    TrainConfig::parse_pairs(&fs::read_to_string(path).map_err(io_err(path))?)
}

/// Applies one layer of pairs; `ablation` goes first so explicit weights in the same layer win.
fn apply(cfg: &mut TrainConfig, pairs: &[(String, String)]) -> Result<()> {
    let (first, rest): (Vec<_>, Vec<_>) = pairs.iter().partition(|(k, _)| k == "ablation");
    for (k, v) in first.into_iter().chain(rest) {
        cfg.set(k, v)?;
    }
    Ok(())
}

/// `base`, then the config file, then named flags, then `--set` pairs.
fn merged_config(mut cfg: TrainConfig, flags: &TrainFlags) -> Result<TrainConfig> {
    if let Some(path) = &flags.config {
        apply(&mut cfg, &read_config_pairs(path)?)?;
    }
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut named = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.to_string(), v));
        }
    };
    named("ablation", flags.ablation.clone());
    named("steps", flags.steps.map(|v| v.to_string()));
    named("batch_size", flags.batch_size.map(|v| v.to_string()));
    named("lr", flags.lr.map(|v| v.to_string()));
    named("decay_start", flags.decay_start.map(|v| v.to_string()));
    named("seed", flags.seed.map(|v| v.to_string()));
    apply(&mut cfg, &pairs)?;
    let mut set = Vec::with_capacity(flags.set.len());
    for kv in &flags.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        set.push((k.trim().to_string(), v.trim().to_string()));
    }
    apply(&mut cfg, &set)?;
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let defaults = DataConfig::default();
    let file = match &a.config {
        Some(path) => {
            let mut cfg = TrainConfig::default();
            apply(&mut cfg, &read_config_pairs(path)?)?;
            Some(cfg)
        }
        None => None,
    };
    let config = DataConfig {
        height: a.height.or(file.as_ref().map(|c| c.height)).unwrap_or(defaults.height),
        width: a.width.or(file.as_ref().map(|c| c.width)).unwrap_or(defaults.width),
        grid_k: a.grid_k.or(file.as_ref().map(|c| c.grid_k)).unwrap_or(defaults.grid_k),
    };
    let samples = gen_dataset(a.seed, a.count, config)?;
    write_dataset(&a.out, &samples)?;
    println!(
        "wrote {} samples ({}x{}, K={}) to {}",
        samples.len(),
        config.height,
        config.width,
        config.grid_k,
        a.out.display()
    );
    Ok(())
}

/// Runs `train` with stderr progress and an optional per-step loss file.
fn run_training(
    flags: &TrainFlags,
    cfg: &TrainConfig,
    train: impl FnOnce(&mut dyn FnMut(usize, f64)) -> Result<TrainOutcome>,
) -> Result<TrainOutcome> {
    let total = cfg.steps;
    let every = flags.log_every;
    let mut progress = |step: usize, loss: f64| {
        if every > 0 && ((step + 1).is_multiple_of(every) || step + 1 == total) {
            eprintln!("step {}/{total} loss {loss:.6}", step + 1);
        }
    };
    let outcome = train(&mut progress)?;
    if let Some(path) = &flags.loss_log {
        let mut text = String::with_capacity(outcome.losses.len() * 16);
        for (i, l) in outcome.losses.iter().enumerate() {
            text.push_str(&format!("{i} {l}\n"));
        }
        fs::write(path, text).map_err(io_err(path))?;
    }
    Ok(outcome)
}

fn report_training(cfg: &TrainConfig, outcome: &TrainOutcome, out: &Path) {
    println!("config digest {}", cfg.digest());
    println!("steps {}", cfg.steps);
    if let Some(l) = outcome.losses.last() {
        println!("final loss {l}");
    }
    println!("checkpoint {}", out.display());
}

fn train_matching_cmd(a: TrainMatchingArgs) -> Result<()> {
    let cfg = merged_config(TrainConfig::default(), &a.train)?;
    let data = read_dataset(&a.data)?;
    let outcome = run_training(&a.train, &cfg, |p| train_matching(&data, &cfg, p))?;
    outcome.pipeline.matching_checkpoint(cfg.steps as u32).save(&a.out)?;
    report_training(&cfg, &outcome, &a.out);
    Ok(())
}

fn train_tryon_cmd(a: TrainTryonArgs) -> Result<()> {
    let stage1 = Checkpoint::load(&a.stage1)?;
    let base = TrainConfig::parse(&stage1.config)?;
    let cfg = merged_config(base, &a.train)?;
    let data = read_dataset(&a.data)?;
    let outcome = run_training(&a.train, &cfg, |p| train_tryon(&data, &stage1, &cfg, p))?;
    outcome.pipeline.full_checkpoint(cfg.steps as u32).save(&a.out)?;
    report_training(&cfg, &outcome, &a.out);
    Ok(())
}

/// The cloth mask from `--mask`, else every pixel of `cloth` that is not pure white.
fn cloth_mask(cloth: &Tensor, mask: Option<&PathBuf>) -> Result<Tensor> {
    if let Some(path) = mask {
        return read_pgm(path);
    }
    let s = cloth.shape();
    let plane = s[1] * s[2];
    let d = cloth.data();
    Tensor::new(
        &[1, s[1], s[2]],
        (0..plane)
            .map(|p| (0..3).any(|c| d[c * plane + p] < 1.0) as u8 as f64)
            .collect(),
    )
}

fn load_pipeline(path: &Path) -> Result<Pipeline> {
    Pipeline::from_checkpoint(&Checkpoint::load(path)?)
}

fn check_inputs(cfg: &TrainConfig, person: &Tensor, cloth: &Tensor) -> Result<()> {
    let (h, w) = (cfg.height, cfg.width);
    if cloth.shape() != [3, h, w] || person.rank() != 3 || person.shape()[1..] != [h, w] {
        return Err(Error::Invalid(format!(
            "model expects {h}x{w} inputs, got person {:?} and cloth {:?}",
            person.shape(),
            cloth.shape()
        )));
    }
    Ok(())
}

fn warp(a: WarpArgs) -> Result<()> {
    let pipeline = load_pipeline(&a.ckpt)?;
    let person = Tensor::load(&a.person)?;
    let cloth = read_ppm(&a.cloth)?;
    check_inputs(&pipeline.config, &person, &cloth)?;
    let mask = cloth_mask(&cloth, a.mask.as_ref())?;
    let warped = pipeline.warp(&person, &cloth, &mask)?;
    write_ppm(&a.out, &warped.cloth)?;
    if let Some(path) = &a.mask_out {
        write_pgm(path, &warped.mask)?;
    }
    if let Some(path) = &a.theta_out {
        warped.theta.save(path)?;
    }
    Ok(())
}

fn tryon(a: TryonArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    if !Pipeline::has_reasoning_weights(&ck) {
        return Err(Error::Invalid(format!(
            "{} holds no try-on weights; train it with train-tryon",
            a.ckpt.display()
        )));
    }
    let pipeline = Pipeline::from_checkpoint(&ck)?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let render = |name: &str, person: &Tensor, cloth: &Tensor, mask: &Tensor| -> Result<()> {
        check_inputs(&pipeline.config, person, cloth)?;
        let t = pipeline.tryon(person, cloth, mask)?;
        write_ppm(&a.out.join(format!("{name}.ppm")), &t.image)?;
        write_pgm(&a.out.join(format!("{name}.pgm")), &t.mask)
    };
    match (&a.data, &a.person, &a.cloth) {
        (Some(root), _, _) => {
            let mut dirs: Vec<PathBuf> = fs::read_dir(root)
                .map_err(io_err(root))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("sample_")))
                .collect();
            dirs.sort();
            if dirs.is_empty() {
                return Err(Error::Empty(format!("no sample_* directories in {}", root.display())));
            }
            for dir in &dirs {
                let s = read_sample(dir)?;
                let name = dir.file_name().unwrap().to_string_lossy();
                render(&name, &s.person, &s.cloth, &s.cloth_mask)?;
            }
            println!("rendered {} samples to {}", dirs.len(), a.out.display());
        }
        (None, Some(person), Some(cloth)) => {
            let person = Tensor::load(person)?;
            let cloth = read_ppm(cloth)?;
            let mask = cloth_mask(&cloth, a.mask.as_ref())?;
            render(&a.name, &person, &cloth, &mask)?;
            println!("rendered {} to {}", a.name, a.out.display());
        }
        _ => return Err(Error::Config("tryon needs --data, or --person and --cloth".into())),
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let text = evaluate(&a.pred, &a.reference)?.to_text();
    if let Some(path) = &a.out {
        fs::write(path, &text).map_err(io_err(path))?;
    }
    std::io::stdout()
        .write_all(text.as_bytes())
        .map_err(io_err(Path::new("<stdout>")))
}

fn grad_check(a: GradCheckArgs) -> Result<()> {
    let results = gradsuite::run(a.filter.as_deref())?;
    if results.is_empty() {
        return Err(Error::Empty(format!("no gradient case matches {:?}", a.filter.unwrap_or_default())));
    }
    let mut failed = 0;
    for (name, r) in &results {
        let ok = r.passes(TOLERANCE);
        failed += usize::from(!ok);
        println!(
            "{name} max_rel_err={:.3e} checked={} {}",
            r.max_rel_err,
            r.checked,
            if ok { "PASS" } else { "FAIL" }
        );
    }
    if failed > 0 {
        return Err(Error::Invalid(format!("{failed} gradient case(s) above {TOLERANCE:e}")));
    }
    Ok(())
}
