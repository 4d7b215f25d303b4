use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use lagsid::identify::FitReport;
use tempfile::TempDir;

/// Temporary directory holding `exp.toml` (with `out` set inside it).
struct Run {
    dir: TempDir,
}

impl Run {
    fn new(body: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let toml = format!("out = {:?}\n{body}", out.to_str().unwrap());
        fs::write(dir.path().join("exp.toml"), toml).unwrap();
        Run { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn run(&self, sub: &str, flags: &[&str]) -> i32 {
        let config = self.dir.path().join("exp.toml");
        let output = Command::new(env!("CARGO_BIN_EXE_lagsid"))
            .arg(sub)
            .arg("--config")
            .arg(&config)
            .args(flags)
            .output()
            .unwrap();
        output.status.code().unwrap()
    }

    fn read(&self, rel: &str) -> String {
        fs::read_to_string(self.out().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }
}

const SHORT: &str =
    "systems = [\"single_pendulum\"]\nnoise = [0.0]\nseeds = [0]\n[sampling]\nt_end = 5.0\n";

fn ledger(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap()).collect()
}

#[test]
fn generate_is_deterministic_and_records_metadata() {
    let run = Run::new("systems = [\"single_pendulum\"]\nnoise = [0.1]\nseeds = [3]\n");
    assert_eq!(run.run("generate", &[]), 0);
    let stem = "data/single_pendulum_noise0.1_seed3";
    let csv1 = run.read(&format!("{stem}.csv"));
    let json1 = run.read(&format!("{stem}.json"));
    assert_eq!(csv1.lines().count(), 2001 + 1);
    let meta: serde_json::Value = serde_json::from_str(&json1).unwrap();
    assert_eq!(meta["noise_level"], 0.1);
    assert_eq!(meta["seed"], 3);

    assert_eq!(run.run("generate", &[]), 0);
    assert_eq!(run.read(&format!("{stem}.csv")), csv1);
    assert_eq!(run.read(&format!("{stem}.json")), json1);
}

#[test]
fn flags_override_the_config_file() {
    let run = Run::new(&format!("{SHORT}\n").replace("noise = [0.0]", "noise = [0.05]"));
    assert_eq!(run.run("generate", &["--noise", "0", "--seeds", "1..3"]), 0);
    let mut files: Vec<String> = fs::read_dir(run.out().join("data"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    files.sort();
    assert_eq!(
        files,
        [
            "single_pendulum_noise0_seed1.csv",
            "single_pendulum_noise0_seed2.csv"
        ]
    );
}

#[test]
fn configuration_errors_exit_with_one() {
    let run = Run::new(SHORT);
    assert_eq!(run.run("generate", &["--system", "triple_pendulum"]), 1);
    assert_eq!(run.run("generate", &["--seeds", "3..1"]), 1);
    let bad = Run::new(&format!("{SHORT}\nwidgets = 3\n"));
    assert_eq!(bad.run("generate", &[]), 1);
}

#[test]
fn empty_dataset_is_a_per_cell_failure() {
    let run = Run::new(&SHORT.replace("seeds = [0]", "seeds = [0, 1]"));
    assert_eq!(run.run("generate", &[]), 0);
    fs::write(run.out().join("data/single_pendulum_noise0_seed1.csv"), "").unwrap();
    assert_eq!(run.run("identify", &[]), 2);

    assert!(run
        .out()
        .join("reports/single_pendulum_noise0_seed0.json")
        .exists());
    assert!(run
        .out()
        .join("reports/single_pendulum_noise0_seed1.error")
        .exists());
    assert!(!run
        .out()
        .join("reports/single_pendulum_noise0_seed1.json")
        .exists());
    let timings = ledger(&run.out().join("timings.csv"));
    let status: Vec<&str> = timings.iter().map(|r| &r[1]).collect();
    assert_eq!(status, ["ok", "failed"]);
}

#[test]
fn clean_single_pendulum_keeps_two_terms() {
    let run = Run::new("systems = [\"single_pendulum\"]\nnoise = [0.0]\nseeds = [0]\n");
    assert_eq!(run.run("identify", &[]), 0);
    let report =
        FitReport::from_json(&run.read("reports/single_pendulum_noise0_seed0.json")).unwrap();
    assert_eq!(report.surviving_terms(), vec!["qd1^2", "cos(q1)"]);
    let text = run.read("reports/single_pendulum_noise0_seed0.txt");
    assert!(text.contains("qd1^2") && text.contains("cos(q1)"));
}

#[test]
fn five_seeds_give_five_reports_and_an_averaged_row() {
    let run = Run::new(
        &SHORT
            .replace("seeds = [0]", "seeds = [0, 1, 2, 3, 4]")
            .replace("noise = [0.0]", "noise = [0.01]"),
    );
    assert_eq!(run.run("identify", &[]), 0);
    assert_eq!(run.run("evaluate", &[]), 0);
    let reports = fs::read_dir(run.out().join("reports"))
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "json")
        })
        .count();
    assert_eq!(reports, 5);

    let path = run.out().join("ledger.csv");
    let header = fs::read_to_string(&path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert_eq!(
        header,
        "system,noise,missing,seed,status,l2_x100,l2_raw_x100,precision_pct,recall_pct,surviving_terms"
    );
    let rows = ledger(&path);
    assert_eq!(rows.len(), 6);
    let (cells, mean) = rows.split_at(5);
    assert_eq!((&mean[0][3], &mean[0][4]), ("mean", "5/5"));
    for col in 5..9 {
        let hand: f64 = cells
            .iter()
            .map(|r| r[col].parse::<f64>().unwrap())
            .sum::<f64>()
            / 5.0;
        let got: f64 = mean[0][col].parse().unwrap();
        assert!(
            (got - hand).abs() <= 1e-12 * hand.abs().max(1.0),
            "column {col}"
        );
    }
    for r in cells {
        assert_eq!(&r[4], "ok");
        assert_eq!(&r[9], "qd1^2 + cos(q1)");
    }
    assert!(run.read("summary.txt").contains("single_pendulum"));
}

#[test]
fn missing_reports_are_listed_and_excluded() {
    let run = Run::new(&SHORT.replace("seeds = [0]", "seeds = [0, 1]"));
    assert_eq!(run.run("identify", &[]), 0);
    fs::remove_file(run.out().join("reports/single_pendulum_noise0_seed1.json")).unwrap();
    assert_eq!(run.run("evaluate", &[]), 2);
    let rows = ledger(&run.out().join("ledger.csv"));
    assert_eq!(&rows[1][4], "missing");
    assert_eq!(&rows[2][4], "1/2");
    assert_eq!(&rows[2][5], &rows[0][5]);
    let summary = run.read("summary.txt");
    assert!(summary.contains("excluded cells:"));
    assert!(summary.contains("single_pendulum_noise0_seed1"));
}

#[test]
fn ablation_curves_have_the_plotting_columns() {
    let run = Run::new(SHORT);
    assert_eq!(run.run("ablate", &[]), 0);
    for g in ["seed0_A", "miss0.05_seed0_B", "seed0_C"] {
        let name = format!("ablate/curves/single_pendulum_noise0_{g}_q1.csv");
        let text = run.read(&name);
        assert_eq!(
            text.lines().next().unwrap(),
            "t,q_true,q_fit,qd_true,qd_fit,qdd_true,qdd_fit"
        );
        assert_eq!(text.lines().count(), 501 + 1);
    }
    let rows = ledger(&run.out().join("ablate/ablation.csv"));
    let groups: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(groups, ["A", "A", "B", "B", "C", "C"]);
}

#[test]
fn basin_grids_match_the_resolution() {
    let run = Run::new(&format!("{SHORT}\n[basin.grid]\nresolution = 5\n"));
    assert_eq!(run.run("basin", &[]), 0);
    for f in ["basin/true.csv", "basin/identified.csv"] {
        let text = run.read(f);
        let rows: Vec<&str> = text.lines().collect();
        assert_eq!(rows.len(), 5);
        for r in rows {
            let labels: Vec<u8> = r.split(',').map(|x| x.parse().unwrap()).collect();
            assert_eq!(labels.len(), 5);
            assert!(labels.iter().all(|&l| l <= 3));
        }
    }
    let summary: serde_json::Value = serde_json::from_str(&run.read("basin/basin.json")).unwrap();
    assert_eq!(summary["resolution"], 5);
    let a = summary["agreement"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&a));
}

#[test]
fn ledgers_are_reproducible() {
    let run = Run::new(&SHORT.replace("noise = [0.0]", "noise = [0.0, 0.05]"));
    assert_eq!(run.run("identify", &[]), 0);
    assert_eq!(run.run("evaluate", &[]), 0);
    let first = run.read("ledger.csv");
    fs::remove_dir_all(run.out()).unwrap();
    assert_eq!(run.run("identify", &["--workers", "1"]), 0);
    assert_eq!(run.run("evaluate", &[]), 0);
    assert_eq!(run.read("ledger.csv"), first);
}

/// Clean chaos pendulum over five seeds: the curvature penalty should give a
/// lower coefficient error than dropping it.
#[test]
#[ignore = "fails: on clean data beta = 0 gives the lower error (mean l2 x100 0.020 vs 0.098)"]
fn curvature_penalty_helps_on_clean_chaos_pendulum() {
    let run = Run::new("systems = [\"chaos_pendulum\"]\nnoise = [0.0]\nseeds = [0, 1, 2, 3, 4]\n");
    assert_eq!(run.run("ablate", &[]), 0);
    let rows = ledger(&run.out().join("ablate/ablation.csv"));
    let mean = |g: &str| -> f64 {
        rows.iter().find(|r| &r[0] == g && &r[4] == "mean").unwrap()[6]
            .parse()
            .unwrap()
    };
    assert!(mean("C") > mean("A"), "A {} C {}", mean("A"), mean("C"));
}
