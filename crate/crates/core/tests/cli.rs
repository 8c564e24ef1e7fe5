use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use molguide::graphdata::Vocab;
use molguide::smiles::graph_to_smiles;
use molguide::synth::random_molecule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_molguide"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_corpus(path: &Path, count: usize, seed: u64) {
    let vocab = Vocab::qm9();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lines: String = (0..count)
        .map(|_| {
            let n = rng.gen_range(1..=6);
            graph_to_smiles(&random_molecule(&mut rng, n, &vocab), &vocab) + "\n"
        })
        .collect();
    fs::write(path, lines).unwrap();
}

const SMALL: &str = "denoiser.layers = 1
denoiser.d_node = 8
denoiser.d_edge = 4
denoiser.d_global = 4
denoiser.heads = 2
denoiser.d_guide = 4
schedule.steps = 10
train.epochs = 2
train.batch_size = 16
nodecount.epochs = 10
seed = 3
";

struct Trained {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

/// One small training run shared by the tests below.
fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        write_corpus(&root.join("data.smi"), 120, 11);
        fs::write(root.join("run.cfg"), format!("data.path = data.smi\noutput.dir = out\n{SMALL}")).unwrap();
        let o = run(&["train", root.join("run.cfg").to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        Trained { _dir: dir, root }
    })
}

fn ckpt() -> String {
    trained().root.join("out/model.ckpt").display().to_string()
}

#[test]
fn train_writes_checkpoint_log_and_echo() {
    let root = &trained().root;
    let log = fs::read_to_string(root.join("out/loss.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.starts_with("1\t"));
    let echo = fs::read_to_string(root.join("out/config.txt")).unwrap();
    assert!(echo.contains("train.epochs = 2"));
    assert!(echo.contains(&root.join("data.smi").display().to_string()));
}

#[test]
fn sample_writes_one_line_per_molecule() {
    let out = trained().root.join("samples.tsv");
    let o = run(&["sample", &ckpt(), "--guide", "4,0.25", "--count", "6", "--s", "2", "--seed", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out).unwrap();
    assert_eq!(text.lines().count(), 6);
    for line in text.lines() {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 3, "{line}");
        assert_eq!(cols[1].split(',').count(), 2);
        assert!(cols[2] == "0" || cols[2] == "1");
    }
}

#[test]
fn zero_scale_matches_placeholder_only_sampling() {
    let root = &trained().root;
    let a = root.join("s0.tsv");
    let b = root.join("uncond.tsv");
    let common = ["--guide", "5,0.4", "--count", "8", "--seed", "9", "--size", "marginal"];
    let o = run(&[&["sample", &ckpt(), "--s", "0", "--out", a.to_str().unwrap()][..], &common].concat());
    assert_eq!(code(&o), 0);
    let o = run(&[&["sample", &ckpt(), "--unconditional", "--out", b.to_str().unwrap()][..], &common].concat());
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
}

#[test]
fn eval_writes_report_and_records() {
    let root = &trained().root;
    let out = root.join("eval");
    let data = root.join("data.smi");
    let o = run(&["eval", &ckpt(), data.to_str().unwrap(), "--k", "3", "--r", "2", "--s", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("validity"));
    assert_eq!(fs::read_to_string(out.join("records.tsv")).unwrap().lines().count(), 6);
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "data.path = x.smi\ndenoiser.rho = 2\n").unwrap();
    let o = run(&["train", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("denoiser.rho"));
    assert_eq!(code(&run(&["train", dir.path().join("missing.cfg").to_str().unwrap()])), 1);
    assert_eq!(code(&run(&["sample"])), 1);
}

#[test]
fn dataset_errors_exit_2_and_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("data.path = gone.smi\n{SMALL}")).unwrap();
    let o = run(&["train", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("gone.smi"));

    fs::write(dir.path().join("bad.smi"), "CCO\nC1CC\n").unwrap();
    fs::write(&cfg, format!("data.path = bad.smi\n{SMALL}")).unwrap();
    let o = run(&["train", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.smi:2"));

    // given property values must agree with the computed ones
    fs::write(dir.path().join("bad.smi"), "CCO\t3,0.5\n").unwrap();
    let o = run(&["train", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(&dir.path().join("d.smi"), 40, 2);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, format!("data.path = d.smi\ntrain.lr = 1e300\nnodecount.enabled = false\nsample.size = marginal\n{SMALL}")).unwrap();
    let o = run(&["train", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("run/model.ckpt").exists());
}

#[test]
fn corrupt_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let bytes = fs::read(ckpt()).unwrap();
    let cut = dir.path().join("cut.ckpt");
    fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let out = dir.path().join("o.tsv");
    for path in [cut, dir.path().join("absent.ckpt")] {
        let o = run(&["sample", path.to_str().unwrap(), "--guide", "4,0.2", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 4);
    }
}

#[test]
fn guide_dimension_mismatch_exits_5() {
    let out = trained().root.join("never.tsv");
    let o = run(&["sample", &ckpt(), "--guide", "4,0.2,7", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 5);
    assert!(!out.exists());
}

#[test]
fn too_many_references_exits_6() {
    let root = &trained().root;
    let data = root.join("data.smi");
    let out = root.join("eval_big");
    let o = run(&["eval", &ckpt(), data.to_str().unwrap(), "--k", "1000", "--r", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 6);
}
