use std::path::Path;
use std::process::{Command, Output};

fn aet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aet")).args(args).current_dir(dir).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const SMALL: &str = "noise_levels = [0.08]\n[mesh]\nh_coarse = 0.125\nh_fine = 0.125\n";

#[test]
fn run_writes_artifacts_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "ok.toml", &format!("output_dir = \"out\"\n{SMALL}"));
    let out = aet(&["run", "ok.toml"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("out/noise_0.08");
    for f in ["summary.json", "residuals.csv", "sweeps.csv", "sigma_rec.vtk", "sigma_true.vtk", "power_density_3.vtk"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/summary.json")).unwrap()).unwrap();
    let sweeps = summary["runs"][0]["sweeps"].as_u64().unwrap() as usize;
    let csv = std::fs::read_to_string(run.join("residuals.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("sweep,substep,residual,lambda,mu"));
    assert_eq!(lines.count(), sweeps * 4);
    assert_eq!(summary["config"]["algorithm"]["tau"], 1.05);
}

#[test]
fn sweep_budget_exhaustion_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "short.toml", &format!("output_dir = \"out\"\n{SMALL}[algorithm]\nmax_sweeps = 2\n"));
    let out = aet(&["run", "short.toml"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("not converged"));
    assert!(dir.path().join("out/summary.json").is_file());
}

#[test]
fn malformed_configs_exit_one_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("unknown.toml", format!("output_dir = \"out\"\nbogus = 1\n{SMALL}")),
        ("syntax.toml", "output_dir = \"out\"\nnoise_levels = [0.08,\n".to_string()),
        ("invalid.toml", format!("output_dir = \"out\"\n{SMALL}[algorithm]\ntau = 0.5\n")),
        (
            "phantom.toml",
            format!("output_dir = \"out\"\n{SMALL}[phantom]\nkind = \"geometry\"\nbackground = -1.0\nshapes = []\n"),
        ),
    ];
    for (name, text) in &cases {
        write(dir.path(), name, text);
        let out = aet(&["run", name], dir.path());
        assert_eq!(out.status.code(), Some(1), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!dir.path().join("out").exists(), "{name} left outputs");
        assert!(String::from_utf8_lossy(&out.stderr).contains("config error"), "{name}");
    }
    let out = aet(&["run", "missing.toml"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = aet(&["frobnicate"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_thread_cap_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "ok.toml", &format!("output_dir = \"out\"\n{SMALL}"));
    let out = Command::new(env!("CARGO_BIN_EXE_aet"))
        .args(["run", "ok.toml"])
        .current_dir(dir.path())
        .env("AET_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = Command::new(env!("CARGO_BIN_EXE_aet"))
        .args(["run", "ok.toml"])
        .current_dir(dir.path())
        .env("AET_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn mesh_and_phantom_commands() {
    let dir = tempfile::tempdir().unwrap();
    let out = aet(&["mesh", "--radius", "0.5", "--h", "1/16", "-o", "disk.aetmesh"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("631 nodes, 1176 triangles"));
    let text = std::fs::read_to_string(dir.path().join("disk.aetmesh")).unwrap();
    assert!(text.starts_with("aetmesh 1"));

    let out = aet(&["mesh", "--h", "-3", "-o", "x.aetmesh"], dir.path());
    assert_eq!(out.status.code(), Some(1));

    let out = aet(
        &["phantom", "--spec", "default", "--h", "1/16", "-o", "p.vtk", "--pgm", "p.pgm", "--size", "32"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::read_to_string(dir.path().join("p.vtk")).unwrap().contains("POINT_DATA 631"));
    assert!(std::fs::read_to_string(dir.path().join("p.pgm")).unwrap().starts_with("P2"));

    write(
        dir.path(),
        "shapes.toml",
        "kind = \"geometry\"\nbackground = 2.0\nshapes = [{ kind = \"disk\", center = [0.0, 0.0], radius = 0.1, value = 4.0 }]\n",
    );
    let out = aet(&["phantom", "--spec", "shapes.toml", "--h", "0.1", "-o", "s.vtk"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("values in [2, 4]"));

    write(
        dir.path(),
        "outside.toml",
        "kind = \"geometry\"\nbackground = 1.0\nshapes = [{ kind = \"disk\", center = [0.45, 0.0], radius = 0.2, value = 4.0 }]\n",
    );
    let out = aet(&["phantom", "--spec", "outside.toml", "-o", "o.vtk"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("outside the disk"));
    assert!(!dir.path().join("o.vtk").exists());
}

#[test]
fn compare_tabulates_both_modes() {
    let dir = tempfile::tempdir().unwrap();
    let same = "noise_levels = [0.08, 0.04]\n[mesh]\nh_coarse = 0.0625\nh_fine = 0.0625\n";
    write(dir.path(), "tpg.toml", &format!("output_dir = \"tpg\"\n{same}"));
    write(dir.path(), "lw.toml", &format!("output_dir = \"lw\"\n{same}[algorithm]\nmode = \"landweber\"\n"));
    let out = aet(&["compare", "tpg.toml", "lw.toml", "-o", "cmp.json"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let cmp: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("cmp.json")).unwrap()).unwrap();
    let rows = cmp["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert!(row["n_delta"][0].as_u64() <= row["n_delta"][1].as_u64());
    }
    assert!(String::from_utf8_lossy(&out.stdout).contains("n_A"));
}
