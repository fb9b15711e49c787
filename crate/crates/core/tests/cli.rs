use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_adapedit");

fn adapedit(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("ADAPEDIT_OUT")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn job(dir: &Path, extra: &str) -> String {
    let path = dir.join("job.txt");
    fs::write(
        &path,
        format!(
            "# test job\nprompt = a dog standing on the grass\nedit = a dog sitting on the grass\nsteps = 8\nout_dir = {}\n{extra}",
            dir.join("run").display()
        ),
    )
    .unwrap();
    path.display().to_string()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

const RUN_FILES: [&str; 5] = ["x.png", "x_star.png", "scales.csv", "spatial.png", "schedule.csv"];

#[test]
fn edit_writes_a_self_describing_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = adapedit(&["--config", &job(dir.path(), ""), "edit"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = dir.path().join("run");
    for f in RUN_FILES.iter().chain(&["manifest.txt", "record.bin"]) {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let manifest = fs::read_to_string(run.join("manifest.txt")).unwrap();
    assert!(manifest.lines().any(|l| l.replace(' ', "") == "alpha_m=0.03"));
    assert!(manifest.lines().any(|l| l.replace(' ', "") == "guidance=7.5"));

    let again = dir.path().join("again");
    let o = adapedit(&[
        "--config",
        run.join("manifest.txt").to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
        "edit",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in RUN_FILES {
        assert_eq!(read(run.join(f)), read(again.join(f)), "{f} differs on rerun");
    }
}

#[test]
fn flags_override_the_job_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("flags");
    let o = adapedit(&[
        "--config",
        &job(dir.path(), ""),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "9",
        "edit",
        "--lambda-s",
        "0.5",
        "--steps",
        "4",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = fs::read_to_string(out.join("manifest.txt")).unwrap();
    for want in ["seed=9", "lambda_s=0.5", "steps=4"] {
        assert!(m.lines().any(|l| l.replace(' ', "") == want), "{want} not in\n{m}");
    }
}

#[test]
fn same_prompt_is_a_warned_noop() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("same");
    let o = adapedit(&[
        "--out",
        out.to_str().unwrap(),
        "edit",
        "--prompt",
        "a cat on a mat",
        "--edit",
        "a cat on a mat",
        "--steps",
        "5",
    ]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).to_lowercase().contains("warn"));
    assert_eq!(read(out.join("x.png")), read(out.join("x_star.png")));
}

#[test]
fn invalid_jobs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.txt");
    fs::write(&path, "edit = a dog sitting\n").unwrap();
    assert_eq!(code(&adapedit(&["--config", path.to_str().unwrap(), "edit"])), 2);
    fs::write(&path, "prompt = a\nedit = b\nlambda_s = 7\n").unwrap();
    assert_eq!(code(&adapedit(&["--config", path.to_str().unwrap(), "edit"])), 2);
    assert_eq!(code(&adapedit(&["--config", "/nonexistent/job.txt", "edit"])), 2);
    assert_eq!(code(&adapedit(&["edit", "--steps", "lots"])), 2);
}

#[test]
fn unreachable_backend_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap();
    let o = adapedit(&[
        "--config",
        &job(dir.path(), ""),
        "--backend",
        &format!("remote:{port}"),
        "edit",
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn inspect_attention_dumps_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let job = job(dir.path(), "");
    assert_eq!(code(&adapedit(&["--config", &job, "edit"])), 0);
    let run = dir.path().join("run");

    let o = adapedit(&["--config", &job, "inspect-attn", "--word", "sitting", "--step", "1"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let raw = image::open(run.join("attn_sitting_t1.png")).unwrap().to_luma8();
    let masked = image::open(run.join("attn_sitting_t1_masked.png")).unwrap().to_luma8();
    assert_eq!(raw.dimensions(), (32, 32));
    let floor = 0.03 * 255.0;
    assert!(masked.pixels().all(|p| p.0[0] == 0 || f32::from(p.0[0]) >= floor));

    let o = adapedit(&[
        "inspect-attn",
        "--run",
        run.to_str().unwrap(),
        "--branch",
        "original",
        "--step",
        "8",
    ]);
    assert_eq!(code(&o), 0);
    assert!(run.join("attn_standing_t8.png").exists());
    assert!(run.join("attn_a_t8.png").exists());

    assert_eq!(
        code(&adapedit(&[
            "inspect-attn",
            "--run",
            run.to_str().unwrap(),
            "--word",
            "zebra"
        ])),
        2
    );
    assert_eq!(
        code(&adapedit(&[
            "inspect-attn",
            "--run",
            run.to_str().unwrap(),
            "--step",
            "9"
        ])),
        2
    );
    let empty = dir.path().join("empty");
    assert_eq!(code(&adapedit(&["inspect-attn", "--run", empty.to_str().unwrap()])), 4);
}

fn summary(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        [
            "lambda_tau",
            "lambda_sv",
            "lambda_s",
            "map_divergence",
            "image_l2",
            "preserve_steps",
            "status"
        ]
    );
    r.records().map(Result::unwrap).collect()
}

#[test]
fn sweep_over_lambda_s_is_linear() {
    let dir = tempfile::tempdir().unwrap();
    let grid = job(dir.path(), "lambda_s = 0, 0.5, 1.0\n");
    let o = adapedit(&["--jobs", "2", "sweep", &grid]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = summary(&dir.path().join("run/summary.csv"));
    assert_eq!(rows.len(), 3);
    let d: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert_eq!(d[0], 0.0);
    assert!(d[1] > 0.0);
    assert!((d[2] - 2.0 * d[1]).abs() <= 1e-5 * d[2]);
    for name in ["tau1_sv1_s0", "tau1_sv1_s0.5", "tau1_sv1_s1"] {
        assert!(dir.path().join("run").join(name).join("x_star.png").exists());
    }
}

#[test]
fn sweep_over_lambda_tau_preserves_more_with_larger_lambda() {
    let dir = tempfile::tempdir().unwrap();
    let grid = job(dir.path(), "lambda_tau = 0.2, 1.0\n");
    assert_eq!(code(&adapedit(&["sweep", &grid])), 0);
    let rows = summary(&dir.path().join("run/summary.csv"));
    let preserve: Vec<u64> = rows.iter().map(|r| r[5].parse().unwrap()).collect();
    assert!(preserve[0] <= preserve[1]);
    assert!(rows.iter().all(|r| &r[6] == "ok"));
}

#[test]
fn single_point_sweep_matches_edit() {
    let dir = tempfile::tempdir().unwrap();
    let job = job(dir.path(), "");
    assert_eq!(code(&adapedit(&["--config", &job, "edit"])), 0);
    let sweep_root = dir.path().join("sweep");
    assert_eq!(
        code(&adapedit(&["--out", sweep_root.to_str().unwrap(), "sweep", &job])),
        0
    );
    let point = sweep_root.join("tau1_sv1_s0.9");
    for f in RUN_FILES {
        assert_eq!(read(dir.path().join("run").join(f)), read(point.join(f)), "{f}");
    }
}

#[test]
fn sweep_with_every_job_failing_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let grid = job(dir.path(), "lambda_s = 0.25, 0.75\n");
    let root = dir.path().join("run");
    fs::create_dir_all(&root).unwrap();
    // plain files where the job directories should go
    fs::write(root.join("tau1_sv1_s0.25"), "").unwrap();
    fs::write(root.join("tau1_sv1_s0.75"), "").unwrap();
    assert_eq!(code(&adapedit(&["sweep", &grid])), 1);
    let rows = summary(&root.join("summary.csv"));
    assert!(rows.iter().all(|r| r[6].starts_with("error")));

    fs::remove_file(root.join("tau1_sv1_s0.25")).unwrap();
    assert_eq!(code(&adapedit(&["sweep", &grid])), 0);
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(BIN)
        .args(["--seed", "3", "toy-demo"])
        .env("ADAPEDIT_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    for f in ["x.png", "x_star.png", "scales.csv", "spatial.png", "manifest.txt"] {
        assert!(dir.path().join("toy-demo").join(f).exists(), "{f}");
    }
}
