use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vitp_cli::manifest::RunManifest;

const TINY: &str = "\
# small enough for a test
image_size=16
vit_dim=16
vit_depth=1
vit_heads=2
projector_hidden=16
lm_dim=16
lm_depth=1
lm_heads=2
batch_size=4
base_lr=1e-3
total_steps=8
checkpoint_every=4
ft_steps=5
ft_train_size=16
ft_test_size=8
ft_batch_size=4
";

fn vitp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitp"))
        .args(args)
        .env("VITP_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    o
}

struct Sandbox {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("tiny.cfg");
        std::fs::write(&config, TINY).unwrap();
        let out = dir.path().join("runs");
        Sandbox { _dir: dir, config, out }
    }

    fn args<'a>(&'a self, cmd: &'a str, seed: &'a str) -> Vec<&'a str> {
        vec![cmd, "--config", self.config.to_str().unwrap(), "--seed", seed, "--out", self.out.to_str().unwrap()]
    }

    fn run(&self, cmd: &str, seed: &str, extra: &[&str]) -> Output {
        let mut a = self.args(cmd, seed);
        a.extend_from_slice(extra);
        vitp(&a)
    }

    /// The single run directory under `out`.
    fn run_dir(&self) -> PathBuf {
        let dirs: Vec<PathBuf> = std::fs::read_dir(&self.out).unwrap().map(|e| e.unwrap().path()).collect();
        assert_eq!(dirs.len(), 1, "{dirs:?}");
        dirs[0].clone()
    }
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn seed_is_required() {
    let o = vitp(&["pretrain"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--seed"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_with_2() {
    let s = Sandbox::new();
    let o = s.run("pretrain", "0", &["--set", "drop_ratio=1.0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("drop_ratio"), "{}", stderr(&o));
    let o = s.run("pretrain", "0", &["--set", "colour=red"]);
    assert_eq!(o.status.code(), Some(2));
    let o = s.run("pretrain", "0", &["--set", "recipe=desk:wo_everything_missing.txt"]);
    assert_ne!(o.status.code(), Some(0));
    let o = vitp(&["pretrain", "--seed", "0", "--preset", "huge"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!s.out.exists(), "nothing may be written for a rejected config");
}

#[test]
fn missing_files_fail() {
    let s = Sandbox::new();
    let o = s.run("finetune", "0", &["--backbone", "/nonexistent/backbone.bin"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = s.run("export", "0", &[]);
    assert_eq!(o.status.code(), Some(1));
    let o = vitp(&["pretrain", "--seed", "0", "--config", "/nonexistent.cfg"]);
    assert_ne!(o.status.code(), Some(0));
}

#[test]
fn workflow_writes_listed_outputs_and_is_idempotent() {
    let s = Sandbox::new();
    ok(s.run("pretrain", "3", &[]));
    let dir = s.run_dir();
    let m = RunManifest::load(&dir, "pretrain").unwrap();
    assert_eq!((m.command.as_str(), m.seed), ("pretrain", 3));
    assert_eq!(dir.file_name().unwrap().to_str().unwrap(), m.config_digest);
    assert!(m.finished.is_some_and(|f| f >= m.started));
    for o in &m.outputs {
        assert!(dir.join(o).is_file(), "{} missing", o.display());
    }
    for f in ["ckpt/step000004.ckpt", "ckpt/step000008.ckpt", "ckpt/final.ckpt", "curves/loss.csv"] {
        assert!(m.outputs.contains(&PathBuf::from(f)), "{f} not listed");
    }
    let curve = String::from_utf8(read(&dir.join("curves/loss.csv"))).unwrap();
    assert_eq!(curve.lines().count(), 9);

    ok(s.run("export", "3", &[]));
    ok(s.run("finetune", "3", &[]));
    ok(s.run("finetune", "3", &["--random"]));
    let e = ok(s.run("eval", "3", &[]));
    assert!(stdout(&e).contains("matches the finetune report"), "{}", stdout(&e));
    let e = ok(s.run("eval", "3", &["--label", "random"]));
    assert!(stdout(&e).contains("matches the finetune report"), "{}", stdout(&e));
    let robust = String::from_utf8(read(&dir.join("reports/robustness_pretrained.csv"))).unwrap();
    assert!(robust.contains("delta_tp,"));
    for cmd in ["export", "finetune_pretrained", "finetune_random", "eval_pretrained", "eval_random"] {
        let m = RunManifest::load(&dir, cmd).unwrap();
        assert!(m.outputs.iter().all(|o| dir.join(o).is_file()), "{cmd}");
    }

    let snapshot = |names: &[&str]| -> Vec<Vec<u8>> { names.iter().map(|n| read(&dir.join(n))).collect() };
    let files = [
        "ckpt/final.ckpt",
        "curves/loss.csv",
        "ckpt/backbone.bin",
        "ckpt/head_pretrained.bin",
        "reports/finetune_pretrained.txt",
        "reports/eval_pretrained.txt",
    ];
    let before = snapshot(&files);
    ok(s.run("pretrain", "3", &[]));
    ok(s.run("export", "3", &[]));
    ok(s.run("finetune", "3", &[]));
    ok(s.run("eval", "3", &[]));
    assert_eq!(snapshot(&files), before);
}

#[test]
fn resume_continues_the_curve() {
    let whole = Sandbox::new();
    ok(whole.run("pretrain", "1", &[]));
    let wd = whole.run_dir();

    let split = Sandbox::new();
    ok(split.run("pretrain", "1", &[]));
    let sd = split.run_dir();
    let mid = sd.join("ckpt/step000004.ckpt");
    std::fs::remove_file(sd.join("ckpt/final.ckpt")).unwrap();
    ok(split.run("pretrain", "1", &["--resume", mid.to_str().unwrap()]));
    assert_eq!(read(&sd.join("curves/loss.csv")), read(&wd.join("curves/loss.csv")));
    assert_eq!(read(&sd.join("ckpt/final.ckpt")), read(&wd.join("ckpt/final.ckpt")));

    let o = split.run("pretrain", "2", &["--resume", mid.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn vrl_sweep_writes_five_rows() {
    let s = Sandbox::new();
    ok(s.run("sweep", "0", &["--kind", "vrl", "--seeds", "1", "--set", "total_steps=2"]));
    let dir = s.run_dir();
    let csv = String::from_utf8(read(&dir.join("reports/sweep_vrl.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 6, "{csv}");
    assert!(dir.join("reports/sweep_vrl.svg").is_file());
    let m = RunManifest::load(&dir, "sweep").unwrap();
    assert!(m.outputs.iter().all(|o| dir.join(o).is_file()));
    let o = s.run("sweep", "0", &["--kind", "colour"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_prints_every_op() {
    let s = Sandbox::new();
    let o = ok(s.run("gradcheck", "0", &["--shapes", "1"]));
    let table = stdout(&o);
    for op in vitp_autodiff::gradcheck::SUITE_OPS {
        assert!(table.lines().any(|l| l.split_whitespace().next() == Some(op)), "{op} missing:\n{table}");
    }
    assert!(!table.contains("FAIL"));
    assert!(s.run_dir().join("reports/gradcheck.csv").is_file());
    let strict = s.run("gradcheck", "0", &["--shapes", "1", "--tolerance", "0"]);
    assert_eq!(strict.status.code(), Some(1));
}
