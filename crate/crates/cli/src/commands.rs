//! One function per CLI verb.

use std::path::{Path, PathBuf};

use dmm_core::metrics::{evaluate_run, write_records, write_summary, FlowSource};
use dmm_core::morphing::FlowField;
use dmm_core::phantom::{
    generate_pair_dataset, generate_sources, read_image, read_manifest, resize_bilinear,
    write_manifest, write_pgm, write_png, PairRecord, TRUTH_ETAS,
};
use dmm_core::supervision::{
    pretrain_supervisor, severity_class_dataset, SupervisorNet, ADVANCED_SEVERITY,
    MODERATE_SEVERITY,
};
use dmm_core::training::{
    fit, run_sweep, synthesize_sequence, write_sweep, Checkpoint, FitOutputs, Trainer,
    LATEST_CHECKPOINT,
};
use dmm_core::Image;

use crate::config::{FlowMode, RunConfig};
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.tsv";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))
}

fn require(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.to_path_buf()))
    }
}

/// Writes the resolved configuration next to the command's outputs.
fn record_config(cfg: &RunConfig, verb: &str) -> Result<(), CliError> {
    create_dir(&cfg.out)?;
    let path = cfg.out.join(format!("{verb}.cfg"));
    std::fs::write(&path, cfg.render()).map_err(|e| io(&path, e))
}

fn write_both(dir: &Path, stem: &str, img: &Image) -> Result<(), CliError> {
    write_pgm(&dir.join(format!("{stem}.pgm")), img)?;
    write_png(&dir.join(format!("{stem}.png")), img)?;
    Ok(())
}

fn truth_stem(eta: f64) -> String {
    format!("truth-{eta}")
}

fn frame_stem(eta: f64) -> String {
    format!("eta-{eta}")
}

pub fn phantom_gen(cfg: &RunConfig) -> Result<(), CliError> {
    record_config(cfg, "phantom-gen")?;
    let dir = cfg.data_dir();
    let pairs = generate_pair_dataset(cfg.n_pairs, &cfg.phantom, cfg.seed)?;
    let mut manifest = Vec::new();
    for pair in &pairs {
        let name = format!("pair-{:03}", pair.id);
        let pdir = dir.join(&name);
        create_dir(&pdir)?;
        write_both(&pdir, "source", &pair.source)?;
        write_both(&pdir, "target", &pair.target)?;
        for (eta, img) in &pair.truth {
            write_both(&pdir, &truth_stem(*eta), img)?;
        }
        manifest.push((format!("{name}/source.pgm"), format!("{name}/target.pgm")));
    }
    write_manifest(&dir.join(MANIFEST), &manifest)?;
    if cfg.n_sources > 0 {
        let held = dir.join("heldout");
        create_dir(&held)?;
        for (i, img) in generate_sources(cfg.n_sources, &cfg.phantom, cfg.seed)?
            .iter()
            .enumerate()
        {
            write_both(&held, &format!("source-{i:03}"), img)?;
        }
    }
    eprintln!(
        "wrote {} pairs and {} held-out sources to {}",
        pairs.len(),
        cfg.n_sources,
        dir.display()
    );
    Ok(())
}

/// Reads an image and resamples it to the configured size if needed.
fn load_image(cfg: &RunConfig, path: &Path) -> Result<Image, CliError> {
    require(path)?;
    let img = read_image(path)?;
    let (h, w) = (cfg.phantom.height, cfg.phantom.width);
    Ok(if img.dims() == (h, w) {
        img
    } else {
        resize_bilinear(&img, h, w)
    })
}

/// Pairs listed in the manifest, numbered by line. Ground-truth frames are
/// picked up from `truth-<η>` files next to each source when present.
pub fn load_pairs(cfg: &RunConfig) -> Result<Vec<PairRecord>, CliError> {
    let manifest = cfg.data_dir().join(MANIFEST);
    require(&manifest)?;
    let entries = read_manifest(&manifest)?;
    if entries.is_empty() {
        return Err(CliError::Config(format!(
            "{} lists no pairs",
            manifest.display()
        )));
    }
    entries
        .iter()
        .enumerate()
        .map(|(id, (s, t))| {
            let ext = s.extension().and_then(|e| e.to_str()).unwrap_or("pgm");
            let dir = s.parent().unwrap_or(Path::new("."));
            let mut truth = Vec::new();
            for eta in TRUTH_ETAS {
                let p = dir.join(format!("{}.{ext}", truth_stem(eta)));
                if p.exists() {
                    truth.push((eta, load_image(cfg, &p)?));
                }
            }
            Ok(PairRecord {
                id,
                texture_seed: 0,
                source: load_image(cfg, s)?,
                target: load_image(cfg, t)?,
                truth,
            })
        })
        .collect()
}

fn load_supervisor(cfg: &RunConfig) -> Result<SupervisorNet, CliError> {
    let path = cfg.supervisor_path();
    require(&path)?;
    Ok(SupervisorNet::from_checkpoint(&Checkpoint::load(&path)?)?)
}

fn load_trainer(cfg: &RunConfig) -> Result<Trainer, CliError> {
    let path = cfg.model_path();
    require(&path)?;
    Ok(Trainer::from_checkpoint(
        cfg.train.clone(),
        &Checkpoint::load(&path)?,
    )?)
}

pub fn pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    record_config(cfg, "pretrain-supervisor")?;
    let moderate = severity_class_dataset(
        cfg.sup_samples,
        MODERATE_SEVERITY,
        &cfg.phantom,
        cfg.seed,
        "sup-moderate",
    )?;
    let advanced = severity_class_dataset(
        cfg.sup_samples,
        ADVANCED_SEVERITY,
        &cfg.phantom,
        cfg.seed,
        "sup-advanced",
    )?;
    let (net, report) = pretrain_supervisor(&moderate, &advanced, &cfg.pretrain)?;
    let path = cfg.supervisor_path();
    net.to_checkpoint(report.val_accuracy).save(&path)?;
    eprintln!(
        "supervisor validation accuracy {:.4} over {} images, saved to {}",
        report.val_accuracy,
        report.val_size,
        path.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    record_config(cfg, "train")?;
    let supervisor = load_supervisor(cfg)?;
    let pairs = load_pairs(cfg)?;
    let ckpt_dir = cfg.out.join(CHECKPOINT_DIR);
    let latest = ckpt_dir.join(LATEST_CHECKPOINT);
    let mut trainer = if cfg.resume && latest.exists() {
        let t = Trainer::from_checkpoint(cfg.train.clone(), &Checkpoint::load(&latest)?)?;
        eprintln!("resuming after step {}", t.steps_done());
        t
    } else {
        Trainer::new(cfg.train.clone())?
    };
    let outputs = FitOutputs {
        log: Some(cfg.out.join(TRAIN_LOG)),
        checkpoint_dir: Some(ckpt_dir),
        stop_at: (cfg.stop_at_step > 0).then_some(cfg.stop_at_step),
    };
    let log = fit(&mut trainer, &pairs, &supervisor, &outputs)?;
    if let Some(last) = log.last() {
        eprintln!("step {} l_hybrid {:.5}", last.step, last.losses.l_hybrid);
    }
    trainer.checkpoint().save(&cfg.model_path())?;
    match trainer.unified_flow() {
        Ok(phi) => phi.save(&cfg.flow_path())?,
        Err(e) => eprintln!("unified flow not written: {e}"),
    }
    Ok(())
}

/// Image files directly inside `dir`, sorted by name.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    require(dir)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "png")))
        .collect();
    files.sort();
    // a frame stored in both formats is used once, preferring PGM
    files.dedup_by(|b, a| a.with_extension("") == b.with_extension(""));
    Ok(files)
}

fn load_flow(cfg: &RunConfig) -> Result<FlowField, CliError> {
    let path = cfg.flow_path();
    require(&path)?;
    Ok(FlowField::load(&path)?)
}

pub fn synthesize(cfg: &RunConfig) -> Result<(), CliError> {
    record_config(cfg, "synthesize")?;
    let root = cfg.out.join("synth");
    let mut jobs: Vec<(String, Image, FlowField)> = Vec::new();
    match cfg.mode {
        FlowMode::Paired => {
            let trainer = load_trainer(cfg)?;
            for pair in load_pairs(cfg)? {
                let phi = trainer.pair_flow(&pair.source, &pair.target, pair.id as u64)?;
                jobs.push((format!("pair-{:03}", pair.id), pair.source, phi));
            }
        }
        FlowMode::SourceOnly => {
            let phi = load_flow(cfg)?;
            for path in list_images(&cfg.sources_dir())? {
                let name = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or("source")
                    .to_string();
                jobs.push((name, load_image(cfg, &path)?, phi.clone()));
            }
        }
    }
    for (name, source, phi) in &jobs {
        let dir = root.join(name);
        create_dir(&dir)?;
        for (eta, frame) in cfg
            .etas
            .iter()
            .zip(synthesize_sequence(source, phi, &cfg.etas)?)
        {
            write_both(&dir, &frame_stem(*eta), &frame)?;
        }
    }
    eprintln!(
        "wrote {} frames for {} sources to {}",
        cfg.etas.len(),
        jobs.len(),
        root.display()
    );
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    record_config(cfg, "evaluate")?;
    let pairs = load_pairs(cfg)?;
    let (records, summary) = match cfg.mode {
        FlowMode::Paired => {
            let trainer = load_trainer(cfg)?;
            let per_pair = |p: &PairRecord| trainer.pair_flow(&p.source, &p.target, p.id as u64);
            evaluate_run(
                &FlowSource::PerPair(&per_pair),
                &pairs,
                &cfg.eval_etas,
                cfg.max_i,
            )?
        }
        FlowMode::SourceOnly => {
            let phi = load_flow(cfg)?;
            evaluate_run(
                &FlowSource::Unified(&phi),
                &pairs,
                &cfg.eval_etas,
                cfg.max_i,
            )?
        }
    };
    write_records(&cfg.out.join("eval_records.csv"), &records)?;
    write_summary(&cfg.out.join("eval_summary.csv"), &summary)?;
    for row in summary.iter().filter(|r| r.metric != "mse") {
        eprintln!(
            "eta {} {} median {:.4} (q1 {:.4}, q3 {:.4})",
            row.eta, row.metric, row.median, row.q1, row.q3
        );
    }
    Ok(())
}

pub fn sweep(cfg: &RunConfig) -> Result<(), CliError> {
    record_config(cfg, "sweep")?;
    let supervisor = load_supervisor(cfg)?;
    let pairs = load_pairs(cfg)?;
    let base = dmm_core::training::TrainConfig {
        steps: cfg.sweep_steps,
        checkpoint_interval: 0,
        ..cfg.train.clone()
    };
    let rows = run_sweep(
        &base,
        &cfg.sweep_lambda1,
        &cfg.sweep_lambda2,
        cfg.sweep_tail,
        &pairs,
        &supervisor,
    )?;
    write_sweep(&cfg.out.join("sweep.csv"), &rows)?;
    for r in &rows {
        eprintln!(
            "lambda1 {} lambda2 {}: final l_sup {:.5}",
            r.lambda1, r.lambda2, r.final_l_sup
        );
    }
    Ok(())
}
