use std::path::Path;
use std::process::{Command, Output};

const SYNTHETIC: &str = "\
data.dataset = synthetic
data.synthetic.per_class = 20
data.synthetic.size = 16
train.epochs = 4
train.warmup_epochs = 1
train.batch_size = 32
curation.calibration_epoch = 2
";

fn curate(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_curate"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CURATE_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("syn.conf"), SYNTHETIC).unwrap();
    dir
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn pretrain_writes_artifacts_and_reruns_identically() {
    let dir = setup();
    let p = dir.path();
    let a = curate(&["pretrain", "--config", "syn.conf", "--out", "a"], p);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    for f in ["manifest.json", "metrics.csv", "model.ckpt"] {
        assert!(p.join("a").join(f).exists(), "missing {f}");
    }
    let b = curate(&["pretrain", "--manifest", "a/manifest.json", "--out", "b"], p);
    assert!(b.status.success());
    for f in ["metrics.csv", "model.ckpt"] {
        let x = std::fs::read(p.join("a").join(f)).unwrap();
        let y = std::fs::read(p.join("b").join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between runs");
    }
    let metrics = std::fs::read_to_string(p.join("a/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,batch_index,lr,"));
}

#[test]
fn probe_score_and_export() {
    let dir = setup();
    let p = dir.path();
    assert!(curate(&["pretrain", "--config", "syn.conf", "--out", "r"], p)
        .status
        .success());

    let probe = curate(
        &["probe", "--checkpoint", "r/model.ckpt", "--probe", "knn", "--k", "3"],
        p,
    );
    assert!(probe.status.success());
    let acc: f64 = stdout(&probe).trim().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!(p.join("r/model.probe-knn-h.json").exists());

    let clean = curate(&["score", "--checkpoint", "r/model.ckpt", "--batches", "2"], p);
    assert!(clean.status.success());
    let out = stdout(&clean);
    assert!(out.starts_with("batch\tfrd\taccepted"));
    assert!(out.contains("\nmean\t"));

    let dark = curate(
        &[
            "score",
            "--checkpoint",
            "r/model.ckpt",
            "--batches",
            "2",
            "--corrupt",
            "blackout",
        ],
        p,
    );
    assert!(dark.status.success());
    let mean = |s: &str| -> f64 {
        s.lines()
            .find_map(|l| l.strip_prefix("mean\t"))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert!(mean(&stdout(&dark)) > mean(&out));

    let exp = curate(
        &[
            "export",
            "--checkpoint",
            "r/model.ckpt",
            "--out",
            "e.emb",
            "--source",
            "z",
        ],
        p,
    );
    assert!(exp.status.success());
    let bytes = std::fs::read(p.join("e.emb")).unwrap();
    assert_eq!(&bytes[..4], b"EMB1");
}

#[test]
fn init_writes_a_probeable_checkpoint() {
    let dir = setup();
    let p = dir.path();
    assert!(curate(&["init", "--config", "syn.conf", "--out", "i"], p)
        .status
        .success());
    let probe = curate(&["probe", "--checkpoint", "i/model.ckpt", "--probe", "knn"], p);
    assert!(probe.status.success(), "{}", String::from_utf8_lossy(&probe.stderr));
}

#[test]
fn exit_codes() {
    let dir = setup();
    let p = dir.path();
    std::fs::write(p.join("bad.conf"), "bogus.key = 1\n").unwrap();
    let o = curate(&["pretrain", "--config", "bad.conf", "--out", "x"], p);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus.key"));

    std::fs::write(p.join("neg.conf"), "train.epochs = 0\n").unwrap();
    assert_eq!(
        curate(&["pretrain", "--config", "neg.conf", "--out", "x"], p)
            .status
            .code(),
        Some(2)
    );

    assert_eq!(curate(&["frobnicate"], p).status.code(), Some(2));
    assert_eq!(
        curate(&["probe", "--checkpoint", "missing.ckpt"], p).status.code(),
        Some(3)
    );

    std::fs::write(p.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(
        curate(&["probe", "--checkpoint", "junk.ckpt"], p).status.code(),
        Some(3)
    );

    // MNIST requested without a data root
    std::fs::write(p.join("mnist.conf"), "data.dataset = mnist\n").unwrap();
    assert_eq!(
        curate(&["pretrain", "--config", "mnist.conf", "--out", "x"], p)
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn ablation_table_has_one_row_per_cell_and_seed() {
    let dir = setup();
    let p = dir.path();
    let conf = format!("{SYNTHETIC}train.epochs = 3\nablation.regularizers = huber,none\nablation.seeds = 0,1\n");
    std::fs::write(p.join("abl.conf"), conf).unwrap();
    let o = curate(&["ablation", "--config", "abl.conf", "--out", "abl", "--jobs", "2"], p);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(p.join("abl/ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2 * 2 * 2);
}
