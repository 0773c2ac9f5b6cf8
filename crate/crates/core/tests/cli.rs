use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BASE: &str = r#"
[experiment]
name = "cli"
output_dir = "out"
rounds = 120
seeds = [1, 2]
algorithms = ["OPS", "DOL_SYMM", "DOL_ASYMM", "COL", "LOCAL_OGD"]

[dataset]
source = "synthetic"
samples = 800
dim = 4

[split]
stochastic_fraction = 0.5

[topology]
nodes = 10
max_extra_out_degree = 2

[gamma]
value = 0.1
"#;

fn opsim(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opsim"))
        .args(args)
        .current_dir(dir)
        .env_remove("OPSIM_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn run_writes_metrics_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "cfg.toml", BASE);
    let out = opsim(tmp.path(), &["run", "cfg.toml"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let dir = tmp.path().join("out");
    let files = csv_bytes(&dir);
    assert_eq!(files.len(), 10);
    let ops = String::from_utf8(fs::read(dir.join("OPS_seed1.csv")).unwrap()).unwrap();
    assert!(ops.starts_with("round,algo,seed,avg_loss,cum_regret,consensus_error\n1,OPS,1,"));
    assert_eq!(ops.lines().count(), 121);

    let manifest = fs::read_to_string(dir.join("manifest.toml")).unwrap();
    let parsed: toml::Value = toml::from_str(&manifest).unwrap();
    assert_eq!(parsed["manifest"]["fingerprint"].as_str().unwrap().len(), 64);
    let runs = parsed["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 10);
    for r in runs {
        let augmented = r["augmented_edges"].as_integer().unwrap();
        if r["algorithm"].as_str() != Some("DOL_SYMM") {
            assert_eq!(augmented, 0);
        }
    }
}

#[test]
fn manifest_reproduces_byte_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "cfg.toml", BASE);
    assert_eq!(opsim(tmp.path(), &["run", "cfg.toml"]).status.code(), Some(0));
    fs::copy(tmp.path().join("out/manifest.toml"), tmp.path().join("again.toml")).unwrap();
    let out = opsim(tmp.path(), &["run", "again.toml", "--output-dir", "replay"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(csv_bytes(&tmp.path().join("out")), csv_bytes(&tmp.path().join("replay")));
    let a = fs::read_to_string(tmp.path().join("out/manifest.toml")).unwrap();
    let b = fs::read_to_string(tmp.path().join("replay/manifest.toml")).unwrap();
    let fingerprint = |m: &str| toml::from_str::<toml::Value>(m).unwrap()["manifest"]["fingerprint"].clone();
    assert_eq!(fingerprint(&a), fingerprint(&b));
}

#[test]
fn sparse_topology_records_dol_symm_augmentation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = BASE
        .replace("max_extra_out_degree = 2", "max_extra_out_degree = 0")
        .replace("\"OPS\", \"DOL_SYMM\", \"DOL_ASYMM\", \"COL\", \"LOCAL_OGD\"", "\"DOL_SYMM\"");
    write(tmp.path(), "cfg.toml", &cfg);
    let out = opsim(tmp.path(), &["run", "cfg.toml"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let manifest: toml::Value = toml::from_str(&fs::read_to_string(tmp.path().join("out/manifest.toml")).unwrap()).unwrap();
    // A bare directed 10-cycle has no mutual edges; both cycle directions are added.
    for r in manifest["runs"].as_array().unwrap() {
        assert_eq!(r["augmented_edges"].as_integer(), Some(20));
    }
}

#[test]
fn config_problems_are_reported_together_with_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("rounds = 120", "rounds = 0").replace("nodes = 10", "nodes = 0").replace("value = 0.1", "value = -2.0");
    write(tmp.path(), "bad.toml", &cfg);
    let out = opsim(tmp.path(), &["run", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    for needle in ["rounds", "nodes", "gamma.value"] {
        assert!(err.contains(needle), "missing {needle}: {err}");
    }
    let missing = opsim(tmp.path(), &["run", "nope.toml"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "empty.svm", "");
    let cfg = BASE.replace(
        "source = \"synthetic\"\nsamples = 800\ndim = 4",
        "source = \"libsvm\"\npath = \"empty.svm\"",
    );
    write(tmp.path(), "cfg.toml", &cfg);
    let out = opsim(tmp.path(), &["run", "cfg.toml"]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("empty"), "{}", stderr(&out));
}

#[test]
fn dataset_paths_resolve_against_the_config_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let data_dir = tmp.path().join("data");
    fs::create_dir(&data_dir).unwrap();
    let mut rows = String::from("\"date\",\"Temperature\",\"Light\",\"Occupancy\"\n");
    for k in 0..200 {
        let occupied = k % 3 == 0;
        rows.push_str(&format!(
            "\"{k}\",\"2015-02-04 17:{:02}:00\",{},{},{}\n",
            k % 60,
            20.0 + (k % 7) as f64 * 0.3,
            if occupied { 400.0 + k as f64 } else { (k % 11) as f64 },
            u8::from(occupied)
        ));
    }
    write(&data_dir, "occupancy.csv", &rows);
    let cfg = BASE
        .replace(
            "source = \"synthetic\"\nsamples = 800\ndim = 4",
            "source = \"csv\"\npath = \"occupancy.csv\"\nlabel_column = \"Occupancy\"",
        )
        .replace("output_dir = \"out\"", &format!("output_dir = \"{}\"", tmp.path().join("out").display()));
    write(&data_dir, "cfg.toml", &cfg);
    let out = opsim(tmp.path(), &["run", "data/cfg.toml"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(csv_bytes(&tmp.path().join("out")).len(), 10);
}

#[test]
fn output_root_env_applies_to_relative_output_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    write(tmp.path(), "cfg.toml", &BASE.replace("seeds = [1, 2]", "seeds = [3]"));
    let out = Command::new(env!("CARGO_BIN_EXE_opsim"))
        .args(["run", "cfg.toml"])
        .current_dir(tmp.path())
        .env("OPSIM_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert!(root.join("out/OPS_seed3.csv").exists());
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn sweep_writes_combined_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("seeds = [1, 2]", "seeds = [1]") + "\n[sweep]\ndensity = [0.2, 1.0]\n";
    write(tmp.path(), "cfg.toml", &cfg);
    let out = opsim(tmp.path(), &["sweep", "cfg.toml", "--axis", "density"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let combined = fs::read_to_string(tmp.path().join("out/sweep_density.csv")).unwrap();
    let mut lines = combined.lines();
    assert_eq!(lines.next(), Some("axis,value,round,algo,seed,avg_loss,cum_regret,consensus_error"));
    assert_eq!(lines.count(), 2 * 5 * 120);
    assert!(tmp.path().join("out/density_0.2/manifest.toml").exists());
    assert!(tmp.path().join("out/density_1/manifest.toml").exists());

    let bad = opsim(tmp.path(), &["sweep", "cfg.toml", "--axis", "width"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn tune_selects_from_the_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let single = BASE.replace("value = 0.1", "grid = [0.05]");
    write(tmp.path(), "one.toml", &single);
    let out = opsim(tmp.path(), &["tune", "one.toml"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = fs::read_to_string(tmp.path().join("out/tuning.csv")).unwrap();
    assert!(table.starts_with("algo,gamma,horizon,mean_avg_loss,selected\n"));
    assert_eq!(table.lines().filter(|l| l.ends_with(",true")).count(), 5);
    assert!(table.lines().skip(1).all(|l| l.contains(",0.05,12,")));
    // The winners were launched for the full horizon.
    assert_eq!(fs::read_to_string(tmp.path().join("out/OPS_seed1.csv")).unwrap().lines().count(), 121);

    let grid = BASE.replace("value = 0.1", "grid = [0.01, 0.1, 1.0]\nlaunch = false");
    write(tmp.path(), "grid.toml", &grid);
    let out = opsim(tmp.path(), &["tune", "grid.toml", "--output-dir", "grid"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = fs::read_to_string(tmp.path().join("grid/tuning.csv")).unwrap();
    for algo in ["OPS", "DOL_SYMM", "DOL_ASYMM", "COL", "LOCAL_OGD"] {
        let rows: Vec<Vec<&str>> =
            table.lines().skip(1).map(|l| l.split(',').collect::<Vec<_>>()).filter(|r| r[0] == algo).collect();
        assert_eq!(rows.len(), 3);
        let best = rows.iter().map(|r| r[3].parse::<f64>().unwrap()).fold(f64::INFINITY, f64::min);
        let winner = rows.iter().find(|r| r[4] == "true").unwrap();
        assert_eq!(winner[3].parse::<f64>().unwrap(), best);
    }
    assert!(!tmp.path().join("grid/OPS_seed1.csv").exists());
}

#[test]
fn run_without_step_size_tunes_first() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("[gamma]\nvalue = 0.1\n", "").replace("seeds = [1, 2]", "seeds = [1]");
    write(tmp.path(), "cfg.toml", &cfg);
    let out = opsim(tmp.path(), &["run", "cfg.toml"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let table = fs::read_to_string(tmp.path().join("out/tuning.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 12 * 5);
    assert!(tmp.path().join("out/COL_seed1.csv").exists());
}

#[test]
fn diagnose_reports_and_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let trivial = opsim(tmp.path(), &["diagnose", "n=1"]);
    assert_eq!(trivial.status.code(), Some(0), "{}", stderr(&trivial));

    write(tmp.path(), "cycle3.txt", "3\n0.5 0.5 0\n0 0.5 0.5\n0.5 0 0.5\n");
    let cycle = opsim(tmp.path(), &["diagnose", "cycle3.txt", "--horizon", "50"]);
    assert_eq!(cycle.status.code(), Some(0), "{}", stderr(&cycle));
    let table = String::from_utf8(cycle.stdout).unwrap();
    assert!(table.contains("lag\tmax_deviation\tbound\tmin_column_sum"));
    assert!(table.lines().any(|l| l.starts_with("50\t")));
    assert!(table.contains("all bounds hold"));

    write(tmp.path(), "swap.txt", "2\n0 1\n1 0\n");
    let swap = opsim(tmp.path(), &["diagnose", "swap.txt"]);
    assert_eq!(swap.status.code(), Some(2));
    assert!(String::from_utf8(swap.stdout).unwrap().contains("precondition violated"));

    let inline = opsim(tmp.path(), &["diagnose", "n=5,bound=2,seed=9", "--horizon", "20"]);
    assert_eq!(inline.status.code(), Some(0), "{}", stderr(&inline));
    assert_eq!(opsim(tmp.path(), &["diagnose", "n=0"]).status.code(), Some(2));
}
