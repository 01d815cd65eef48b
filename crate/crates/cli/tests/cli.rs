use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rbx(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rbx"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("rbx runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A tiny config on the bundled twin level so runs finish quickly.
fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.conf");
    fs::write(
        &path,
        "level = twin\nbudget = 3000\npretrain_steps = 500\nclusters_per_iteration = 5\n\
         novel_rollouts = 3\nmax_rollout_steps = 50\nsim_encoder_hidden = 8\n\
         sim_embedding_dim = 8\nsim_head_hidden = 8\nrnd_hidden = 8\nrnd_output = 4\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_map_and_summarize() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    for (algo, seed) in [("rbexplore", "1"), ("rbexplore-oracle", "1"), ("random", "2")] {
        let out = dir.path().join(format!("{algo}-{seed}"));
        let o = rbx(
            &["run", "--config", &config, "--algo", algo, "--seed", seed, "--out", out.to_str().unwrap()],
            dir.path(),
        );
        assert!(o.status.success(), "{algo}: {}", stderr(&o));
        assert!(out.join("metrics.csv").is_file() && out.join("run.json").is_file());
        assert_eq!(out.join("graph.json").is_file(), algo != "random");
    }

    let run = dir.path().join("rbexplore-1");
    let o = rbx(&["map", "--run", run.to_str().unwrap(), "--block", "2"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let pgm = fs::read(run.join("coverage.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n"));

    // Runs with the same seed and budget can be summarized together.
    let oracle = dir.path().join("rbexplore-oracle-1");
    let summary = dir.path().join("summary.csv");
    let o = rbx(
        &["summarize", "--runs", run.to_str().unwrap(), oracle.to_str().unwrap(), "--out", summary.to_str().unwrap()],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(&summary).unwrap();
    assert_eq!(table.lines().count(), 21, "{table}");
}

#[test]
fn default_output_directory_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let o = rbx(
        &["run", "--config", &config, "--seed", "4", "--no-merge", "--theta-merge", "0.3", "--set", "budget=1500"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let run = fs::read_to_string(dir.path().join("runs/rbexplore-seed4/run.json")).unwrap();
    assert!(run.contains("\"no_merge\": true"), "{run}");
    assert!(run.contains("\"theta_merge\": 0.3"), "{run}");
    assert!(run.contains("\"budget\": 1500"), "{run}");
}

#[test]
fn unknown_config_keys_fail_with_the_valid_list() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let o = rbx(&["run", "--config", &config, "--set", "thetta_sim=0.4"], dir.path());
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("thetta_sim") && err.contains("theta_sim"), "{err}");

    fs::write(dir.path().join("bad.conf"), "level = L1\nbogus = 1\n").unwrap();
    let o = rbx(&["run", "--config", "bad.conf"], dir.path());
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn bad_inputs_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    for args in [
        vec!["run", "--config", "missing.conf"],
        vec!["run", "--config", config.as_str(), "--algo", "icm"],
        vec!["run", "--config", config.as_str(), "--set", "theta_sim=2"],
        vec!["run", "--config", config.as_str(), "--set", "no-equals-sign"],
        vec!["map", "--run", "nowhere"],
        vec!["summarize", "--runs", "nowhere"],
    ] {
        let o = rbx(&args, dir.path());
        assert!(!o.status.success(), "{args:?} succeeded");
        assert!(!stderr(&o).is_empty(), "{args:?} printed no error");
    }
}

#[test]
fn summarize_refuses_runs_with_different_budgets() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    for budget in ["1000", "2000"] {
        let out = format!("b{budget}");
        let o = rbx(
            &["run", "--config", &config, "--algo", "random", "--set", &format!("budget={budget}"), "--out", &out],
            dir.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = rbx(&["summarize", "--runs", "b1000", "b2000"], dir.path());
    assert!(!o.status.success());
}
