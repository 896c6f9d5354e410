//! End-to-end runs of the `dmm` binary on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
height = 32
width = 32
g0 = 4
g1 = 1.5
o_max = 2
n_pairs = 4
n_sources = 2
sup_samples = 12
sup_epochs = 2
sup_batch_size = 8
sup_min_accuracy = 0
steps = 6
batch_size = 2
t_max = 20
checkpoint_interval = 2
denoiser_base_channels = 8
denoiser_channel_mults = 1,2
denoiser_res_blocks = 1
regnet_base_channels = 4
regnet_levels = 2
sweep_steps = 2
sweep_tail = 1
";

fn dmm(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmm"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) {
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("run.cfg"), format!("{TINY}{extra}")).unwrap();
        Self { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("run.cfg")
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn run(&self, verb: &str) -> Output {
        dmm(&[verb], &self.config(), &self.out())
    }

    fn with_extra(&self, name: &str, extra: &str) -> PathBuf {
        let path = self.dir.path().join(name);
        let base = std::fs::read_to_string(self.config()).unwrap();
        std::fs::write(&path, format!("{base}{extra}")).unwrap();
        path
    }
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn default_phantom_set_is_sixty_reproducible_pairs() {
    let ws = Workspace::new("");
    let cfg = ws.with_extra(
        "default.cfg",
        "n_pairs = 60\nn_sources = 10\nheight = 64\nwidth = 64\ng0 = 7\ng1 = 3\no_max = 4\n",
    );
    let a = ws.dir.path().join("a");
    let b = ws.dir.path().join("b");
    ok(dmm(&["phantom-gen"], &cfg, &a));
    ok(dmm(&["phantom-gen"], &cfg, &b));
    let manifest = std::fs::read_to_string(a.join("data/manifest.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 60);
    let fa = files_under(&a.join("data"));
    let fb = files_under(&b.join("data"));
    assert_eq!(fa.len(), fb.len());
    // 60 pairs × (source, target, 3 truths) × 2 formats, 10 held-out × 2, manifest
    assert_eq!(fa.len(), 60 * 5 * 2 + 10 * 2 + 1);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(
            std::fs::read(x).unwrap(),
            std::fs::read(y).unwrap(),
            "{}",
            x.display()
        );
    }
    assert!(a.join("phantom-gen.cfg").exists());
}

#[test]
fn configuration_errors_exit_with_one() {
    let ws = Workspace::new("g1 = 5\n");
    let o = ws.run("phantom-gen");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("g1"), "{}", stderr(&o));

    let typo = ws.with_extra("typo.cfg", "lamda1 = 0.1\n");
    let o = dmm(&["train"], &typo, &ws.out());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lamda1"));

    let o = dmm(&["train"], &ws.dir.path().join("absent.cfg"), &ws.out());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("absent.cfg"));

    let o = Command::new(env!("CARGO_BIN_EXE_dmm"))
        .arg("morph")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_prerequisites_are_named() {
    let ws = Workspace::new("g1 = 1.5\n");
    ok(ws.run("phantom-gen"));
    let o = ws.run("train");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("supervisor.dmmc"), "{}", stderr(&o));
    let o = ws.run("synthesize");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.dmmc"), "{}", stderr(&o));
}

#[test]
fn full_pipeline_and_resume() {
    let ws = Workspace::new("");
    ok(ws.run("phantom-gen"));
    ok(ws.run("pretrain-supervisor"));
    ok(ws.run("train"));
    let out = ws.out();
    for f in [
        "train_log.csv",
        "model.dmmc",
        "unified_flow.dmmf",
        "checkpoints/latest.dmmc",
        "checkpoints/step-000004.dmmc",
        "train.cfg",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(
        log.lines().next(),
        Some("step,epoch,l_diff,l_mph,l_sup,l_hybrid")
    );
    assert_eq!(log.lines().count(), 7);

    ok(ws.run("synthesize"));
    for id in 0..4 {
        let dir = out.join(format!("synth/pair-{id:03}"));
        let pgms = files_under(&dir)
            .into_iter()
            .filter(|p| p.extension().unwrap() == "pgm")
            .count();
        assert_eq!(pgms, 5);
        let source = std::fs::read(out.join(format!("data/pair-{id:03}/source.pgm"))).unwrap();
        assert_eq!(std::fs::read(dir.join("eta-0.pgm")).unwrap(), source);
    }
    let source_only = ws.with_extra("source.cfg", "mode = source-only\n");
    ok(dmm(&["synthesize"], &source_only, &out));
    for i in 0..2 {
        assert!(out.join(format!("synth/source-{i:03}/eta-1.png")).exists());
    }

    ok(ws.run("evaluate"));
    let records = std::fs::read_to_string(out.join("eval_records.csv")).unwrap();
    assert_eq!(records.lines().count(), 1 + 4 * 3);
    let summary = std::fs::read_to_string(out.join("eval_summary.csv")).unwrap();
    assert_eq!(summary.lines().next(), Some("eta,metric,median,q1,q3,mean"));

    ok(ws.run("sweep"));
    let sweep = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 5);
    assert!(sweep.lines().any(|l| l.starts_with("0.1,0.01,")));

    // interrupted after step 3 (last checkpoint at step 2), then resumed
    let split = ws.dir.path().join("split");
    std::fs::create_dir_all(&split).unwrap();
    std::fs::copy(out.join("supervisor.dmmc"), split.join("supervisor.dmmc")).unwrap();
    let stop = ws.with_extra(
        "stop.cfg",
        &format!(
            "data_dir = {}\nstop_at_step = 3\n",
            out.join("data").display()
        ),
    );
    ok(dmm(&["train"], &stop, &split));
    assert_eq!(
        std::fs::read_to_string(split.join("train_log.csv"))
            .unwrap()
            .lines()
            .count(),
        4
    );
    let resume = ws.with_extra(
        "resume.cfg",
        &format!("data_dir = {}\nresume = true\n", out.join("data").display()),
    );
    ok(dmm(&["train"], &resume, &split));
    assert_eq!(
        std::fs::read_to_string(split.join("train_log.csv")).unwrap(),
        log,
        "resumed log differs from the uninterrupted one"
    );
    assert_eq!(
        std::fs::read(split.join("model.dmmc")).unwrap(),
        std::fs::read(out.join("model.dmmc")).unwrap()
    );
}

#[test]
fn corrupt_checkpoint_is_an_io_error() {
    let ws = Workspace::new("");
    ok(ws.run("phantom-gen"));
    std::fs::write(ws.out().join("supervisor.dmmc"), b"DMMC junk").unwrap();
    assert_eq!(ws.run("train").status.code(), Some(2));
}

#[test]
fn diverging_training_exits_with_three() {
    let ws = Workspace::new("lr_denoiser = 1e300\nlr_regnet = 1e300\n");
    ok(ws.run("phantom-gen"));
    ok(ws.run("pretrain-supervisor"));
    let o = ws.run("train");
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}
