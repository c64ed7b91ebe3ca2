use std::process::Command;

fn halolab(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_halolab")).args(args).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

#[test]
fn test_halo_subcommand_passes() {
    let (code, out) = halolab(&["test-halo", "--set", "proc_dims=2,2,1", "--set", "local_dims=3,3,2"]);
    assert_eq!(code, 0, "{out}");
    assert_eq!(out.matches("PASS").count(), 2);
}

#[test]
fn regression_subcommand_passes() {
    let (code, out) = halolab(&["regression", "--set", "proc_dims=2,1,1", "--set", "local_dims=3,3,3", "--set", "steps=3"]);
    assert_eq!(code, 0, "{out}");
    assert!(out.contains("max |diff| = 0e0"), "{out}");
}

#[test]
fn configuration_errors_exit_with_two() {
    assert_eq!(halolab(&["bench", "--set", "tau=0.4"]).0, 2);
    assert_eq!(halolab(&["bench", "--set", "no.such.key=1"]).0, 2);
    assert_eq!(halolab(&["bench", "--preset", "huge"]).0, 2);
    assert_eq!(halolab(&["test-halo", "--set", "global_dims=7,8,8", "--set", "proc_dims=2,2,2"]).0, 2);
    assert_eq!(halolab(&["bench", "--config", "/definitely/missing.cfg"]).0, 2);
}

#[test]
fn bench_then_verify_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    let out_dir = dir.path().join("out");
    std::fs::write(
        &cfg,
        format!(
            "proc_dims = 2,1,1\nlocal_dims = 3,3,3\niterations = 4\nrepetitions = 2\nwarmup = 1\noutput = {}\n",
            out_dir.display()
        ),
    )
    .unwrap();
    let (code, out) = halolab(&["bench", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code, 0, "{out}");
    let (code, out) = halolab(&["verify", out_dir.to_str().unwrap()]);
    assert_eq!(code, 0, "{out}");

    // Tamper with one derived value: the verifier must fail with exit 1.
    let raw = out_dir.join("raw.csv");
    let text = std::fs::read_to_string(&raw).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut cols: Vec<String> = lines[1].split(',').map(String::from).collect();
    let n = cols.len();
    cols[n - 2] = "1.5".into();
    lines[1] = cols.join(",");
    std::fs::write(&raw, lines.join("\n") + "\n").unwrap();
    let (code, out) = halolab(&["verify", out_dir.to_str().unwrap()]);
    assert_eq!(code, 1, "{out}");
}

#[test]
fn model_prints_both_tables() {
    let (code, out) = halolab(&["model", "--max-l", "8"]);
    assert_eq!(code, 0);
    assert!(out.lines().any(|l| l.starts_with("2 56 7.000000")), "{out}");
    assert!(out.contains("# non-cubic"));
}
