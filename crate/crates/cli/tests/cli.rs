use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use avrnn::data::load_dataset;
use avrnn::nn::Checkpoint;
use tempfile::TempDir;

fn avrnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avrnn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn avrnn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "\
# small model so the tests run quickly
data.path = d.seq
model.z_dim = 2
model.h_dim = 6
critic.state_dim = 6
critic.width = 5
train.batch_size = 8
train.iterations = 10
train.eval_every = 1
train.eval_batches = 2
train.seed = 11
";

/// Temp dir holding a 40 × 6 × 3 lgssm dataset `d.seq` and `tiny.conf`.
fn workspace() -> TempDir {
    let dir = TempDir::new().unwrap();
    let o = avrnn(
        dir.path(),
        &[
            "gendata", "--family", "lgssm", "--n", "40", "--t", "6", "--x-dim", "3", "--seed", "1",
            "--out", "d.seq",
        ],
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    std::fs::write(dir.path().join("tiny.conf"), TINY).unwrap();
    dir
}

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", "tiny.conf"];
    args.extend_from_slice(extra);
    avrnn(dir, &args)
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn gendata_writes_header_and_provenance_deterministically() {
    let dir = TempDir::new().unwrap();
    let args = [
        "gendata", "--family", "lgssm", "--n", "512", "--t", "40", "--seed", "7", "--out", "d.seq",
    ];
    assert_eq!(code(&avrnn(dir.path(), &args)), 0);
    let first = read(dir.path(), "d.seq");
    let header = first.split(|b| *b == b'\n').next().unwrap();
    assert_eq!(header, b"seqdata v1 512 40 4");
    let d = load_dataset(dir.path().join("d.seq")).unwrap();
    assert_eq!((d.n_seq(), d.steps(), d.x_dim()), (512, 40, 4));
    let prov = String::from_utf8(read(dir.path(), "d.seq.provenance")).unwrap();
    assert!(
        prov.contains("family = lgssm") && prov.contains("seed = 7"),
        "{prov}"
    );
    assert!(
        prov.lines()
            .any(|l| l.starts_with("kalman_loglik_mean = -")),
        "{prov}"
    );

    let args2 = [
        "gendata", "--family", "lgssm", "--n", "512", "--t", "40", "--seed", "7", "--out", "e.seq",
    ];
    assert_eq!(code(&avrnn(dir.path(), &args2)), 0);
    assert_eq!(first, read(dir.path(), "e.seq"));

    let sine = [
        "gendata", "--family", "sine", "--n", "3", "--t", "5", "--out", "s.seq",
    ];
    assert_eq!(code(&avrnn(dir.path(), &sine)), 0);
    assert_eq!(load_dataset(dir.path().join("s.seq")).unwrap().x_dim(), 1);
}

#[test]
fn gendata_errors_use_usage_and_io_codes() {
    let dir = TempDir::new().unwrap();
    let bogus = avrnn(
        dir.path(),
        &[
            "gendata", "--family", "bogus", "--n", "1", "--t", "1", "--out", "x.seq",
        ],
    );
    assert_eq!(code(&bogus), 2);
    let bad = avrnn(
        dir.path(),
        &[
            "gendata", "--family", "lgssm", "--n", "4", "--t", "4", "--q", "-1", "--out", "x.seq",
        ],
    );
    assert_eq!(code(&bad), 2, "{}", stderr(&bad));
    let mixed = avrnn(
        dir.path(),
        &[
            "gendata", "--family", "sine", "--n", "4", "--t", "4", "--a", "0.5", "--out", "x.seq",
        ],
    );
    assert_eq!(code(&mixed), 2);
    let unwritable = avrnn(
        dir.path(),
        &[
            "gendata",
            "--family",
            "sine",
            "--n",
            "4",
            "--t",
            "4",
            "--out",
            "no/such/dir/x.seq",
        ],
    );
    assert_eq!(code(&unwritable), 1, "{}", stderr(&unwritable));
}

#[test]
fn train_writes_one_row_per_eval_point_and_is_repeatable() {
    let dir = workspace();
    let o = train(dir.path(), &["--out.dir", "a"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = String::from_utf8(read(dir.path(), "a/metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "iter,l_rec,elbo,l_dis,em_estimate,wallclock_s");
    assert_eq!(lines.len(), 11);
    for (i, row) in lines[1..].iter().enumerate() {
        let fields: Vec<f64> = row.split(',').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields[0] as usize, i + 1);
        assert!(fields.iter().all(|v| v.is_finite()), "{row}");
    }
    assert!(Checkpoint::load(dir.path().join("a/model.ckpt")).is_ok());
    assert!(Checkpoint::load(dir.path().join("a/critic.ckpt")).is_ok());

    assert!(!dir.path().join("a/history.csv").exists());
    assert_eq!(
        code(&train(
            dir.path(),
            &["--out.dir", "b", "--out.history", "history.csv"]
        )),
        0
    );
    let history = String::from_utf8(read(dir.path(), "b/history.csv")).unwrap();
    assert_eq!(
        history.lines().next(),
        Some("iter,l_rec,l_dis,adv_loss,em_estimate")
    );
    assert_eq!(history.lines().count(), 11);
    assert_eq!(csv.as_bytes(), read(dir.path(), "b/metrics.csv"));
    assert_eq!(
        read(dir.path(), "a/model.ckpt"),
        read(dir.path(), "b/model.ckpt")
    );

    assert_eq!(
        code(&train(
            dir.path(),
            &["--out.dir=c", "--train.prefetch", "3"]
        )),
        0
    );
    assert_eq!(csv.as_bytes(), read(dir.path(), "c/metrics.csv"));

    assert_eq!(
        code(&train(
            dir.path(),
            &["--out.dir", "d", "--train.eval_every", "3"]
        )),
        0
    );
    let rows = String::from_utf8(read(dir.path(), "d/metrics.csv")).unwrap();
    let iters: Vec<&str> = rows
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(iters, ["3", "6", "9", "10"]);
}

#[test]
fn train_config_errors_exit_2_and_name_the_key() {
    let dir = workspace();
    let o = train(dir.path(), &["--train.iterationz", "3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.iterationz"), "{}", stderr(&o));

    std::fs::write(
        dir.path().join("bad.conf"),
        "data.path = d.seq\nadv.clip = wide\n",
    )
    .unwrap();
    let o = avrnn(dir.path(), &["train", "--config", "bad.conf"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("adv.clip"), "{}", stderr(&o));

    let o = train(dir.path(), &["--data.path", "missing.seq"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = avrnn(dir.path(), &["train", "--config", "nope.conf"]);
    assert_eq!(code(&o), 2);
    let o = avrnn(
        dir.path(),
        &[
            "eval",
            "--train.seed",
            "1",
            "--model",
            "m",
            "--data",
            "d.seq",
        ],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn divergence_exits_3_and_keeps_last_good_checkpoints() {
    let dir = workspace();
    let o = train(dir.path(), &["--out.dir", "nan", "--train.lr_rec", "1e9"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("divergence"), "{}", stderr(&o));
    let model = Checkpoint::load(dir.path().join("nan/model.ckpt")).unwrap();
    assert!(model
        .tensors
        .iter()
        .all(|t| t.value.data().iter().all(|v| v.is_finite())));
    assert!(Checkpoint::load(dir.path().join("nan/critic.ckpt")).is_ok());
}

fn trained(dir: &Path) {
    let o = train(dir, &["--out.dir", "run", "--train.iterations", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn eval_prints_a_finite_repeatable_row() {
    let dir = workspace();
    trained(dir.path());
    let args = [
        "eval",
        "--model",
        "run/model.ckpt",
        "--critic",
        "run/critic.ckpt",
        "--data",
        "d.seq",
        "--batch-size",
        "8",
        "--seed",
        "5",
    ];
    let first = avrnn(dir.path(), &args);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let out = stdout(&first);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 2);
    let header: Vec<&str> = lines[0].split(',').collect();
    let em = header
        .iter()
        .position(|h| *h == "em_estimate")
        .expect("em_estimate column");
    let row: Vec<f64> = lines[1].split(',').map(|f| f.parse().unwrap()).collect();
    assert!(row.iter().all(|v| v.is_finite()));
    assert!(row[em].is_finite());
    assert_eq!(out, stdout(&avrnn(dir.path(), &args)));
}

#[test]
fn eval_rejects_mismatched_inputs() {
    let dir = workspace();
    trained(dir.path());
    let sine = avrnn(
        dir.path(),
        &[
            "gendata", "--family", "sine", "--n", "8", "--t", "6", "--out", "s.seq",
        ],
    );
    assert_eq!(code(&sine), 0);
    let o = avrnn(
        dir.path(),
        &["eval", "--model", "run/model.ckpt", "--data", "s.seq"],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = train(
        dir.path(),
        &[
            "--out.dir",
            "z3",
            "--train.iterations",
            "1",
            "--model.z_dim",
            "3",
        ],
    );
    assert_eq!(code(&o), 0);
    let o = avrnn(
        dir.path(),
        &[
            "eval",
            "--model",
            "run/model.ckpt",
            "--critic",
            "z3/critic.ckpt",
            "--data",
            "d.seq",
        ],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let o = avrnn(
        dir.path(),
        &["eval", "--model", "run/critic.ckpt", "--data", "d.seq"],
    );
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = avrnn(dir.path(), &["eval", "--model", "d.seq", "--data", "d.seq"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn generate_is_deterministic_and_loadable() {
    let dir = workspace();
    trained(dir.path());
    let gen = |t: &str, seed: &str, out: &str| {
        let o = avrnn(
            dir.path(),
            &[
                "generate",
                "--model",
                "run/model.ckpt",
                "--t",
                t,
                "--n",
                "5",
                "--seed",
                seed,
                "--out",
                out,
            ],
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        PathBuf::from(out)
    };
    gen("0", "1", "empty.seq");
    let bytes = read(dir.path(), "empty.seq");
    assert!(bytes.starts_with(b"seqdata v1 5 0 3\n"));
    assert_eq!(
        load_dataset(dir.path().join("empty.seq")).unwrap().steps(),
        0
    );

    gen("7", "2", "a.seq");
    gen("7", "2", "b.seq");
    gen("7", "3", "c.seq");
    assert_eq!(read(dir.path(), "a.seq"), read(dir.path(), "b.seq"));
    assert_ne!(read(dir.path(), "a.seq"), read(dir.path(), "c.seq"));
    let d = load_dataset(dir.path().join("a.seq")).unwrap();
    assert_eq!((d.n_seq(), d.steps(), d.x_dim()), (5, 7, 3));
    assert!(d.values().iter().all(|v| v.is_finite()));
}

#[test]
fn gradcheck_passes_reports_all_tags_and_catches_faults() {
    let dir = TempDir::new().unwrap();
    let o = avrnn(dir.path(), &["gradcheck", "--tiny"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = stdout(&o);
    for tag in ["θ", "ω", "φ", "τ", "η"] {
        let line = out
            .lines()
            .find(|l| l.starts_with(tag))
            .unwrap_or_else(|| panic!("no {tag} in {out}"));
        let err: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!(err < 1e-5, "{line}");
    }

    let o = avrnn(
        dir.path(),
        &["gradcheck", "--tiny", "--inject-fault", "tanh"],
    );
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("exceed tolerance"), "{}", stderr(&o));
    assert!(stderr(&o).contains("critic."), "{}", stderr(&o));

    assert_eq!(code(&avrnn(dir.path(), &["gradcheck"])), 2);
    assert_eq!(
        code(&avrnn(
            dir.path(),
            &["gradcheck", "--tiny", "--inject-fault", "nope"]
        )),
        2
    );
}
