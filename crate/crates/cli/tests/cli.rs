use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn meanteach(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meanteach"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = meanteach(args);
    assert!(
        out.status.success(),
        "meanteach {:?} failed: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// 48×48 scenes with a narrow model; `extra` is appended verbatim.
fn small_config(dir: &Path, n_labeled: usize, n_unlabeled: usize, extra: &str) -> std::path::PathBuf {
    let text = format!(
        "schema_version = 1\n\
         [dataset]\nn_labeled = {n_labeled}\nn_unlabeled = {n_unlabeled}\nn_validation = 2\nroot_seed = 3\n\
         [dataset.generator]\nheight = 48\nwidth = 48\n\
         cell_count = {{ min = 1, max = 3 }}\n\
         cytoplasm_axes = {{ min = 7.0, max = 10.0 }}\n\
         nucleus_axes = {{ min = 2.0, max = 3.5 }}\n\
         {extra}"
    );
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn generate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 3, 2, "");
    for name in ["a", "b"] {
        let printed = ok(&["generate", "--config", p(&cfg), "--out-dir", p(&tmp.path().join(name))]);
        assert!(printed.trim_end().ends_with("manifest.json"));
    }
    let (a, b) = (dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")));
    assert!(a.iter().any(|(n, _)| n == "manifest.json"));
    assert_eq!(a, b);
}

#[test]
fn invalid_generator_config_leaves_no_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 2, 0, "");
    let text = fs::read_to_string(&cfg).unwrap().replace(
        "nucleus_axes = { min = 2.0, max = 3.5 }",
        "nucleus_axes = { min = 12.0, max = 14.0 }",
    );
    fs::write(&cfg, text).unwrap();
    let out_dir = tmp.path().join("data");
    let out = meanteach(&["generate", "--config", p(&cfg), "--out-dir", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out_dir.join("manifest.json").exists());
}

#[test]
fn config_and_data_errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "schema_version = 1\n[train]\nlearning_rate = 3\n").unwrap();
    let out = meanteach(&[
        "sweep",
        "--config",
        p(&bad),
        "--data",
        p(tmp.path()),
        "--out-dir",
        p(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let missing = tmp.path().join("nowhere");
    let out = meanteach(&["sweep", "--data", p(&missing), "--out-dir", p(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));

    let out = meanteach(&["sweep", "--out-dir", p(tmp.path()), "--fractions", "0.1,x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn supervised_sweep_uses_the_requested_subset_size() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(
        tmp.path(),
        20,
        0,
        "[train]\ntotal_iters = 5\n[train.model]\nhidden = 16\n",
    );
    let data = tmp.path().join("data");
    ok(&["generate", "--config", p(&cfg), "--out-dir", p(&data)]);
    let out = tmp.path().join("out");
    let args = [
        "sweep",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out-dir",
        p(&out),
        "--fractions",
        "0.1",
        "--mode",
        "supervised_only",
    ];
    let table = ok(&args);
    assert!(table.contains("supervised_only"));

    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "fraction,method,ablation,seed,n_labeled,aji_cyto,aji_nuc,aji_avg,map_cyto,map_nuc,map_avg,status"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    for (seed, row) in rows.iter().enumerate() {
        assert_eq!(row[..5], ["0.1", "supervised_only", "full", &seed.to_string(), "2"]);
        assert_eq!(row[11], "ok");
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(json["cells"].as_array().unwrap().len(), 3);

    // evaluating a saved checkpoint is repeatable
    let ckpt = out.join("runs/supervised_only-full-f0.1-s0/final.ckpt");
    let eval = |dir: &str| {
        ok(&[
            "eval",
            "--checkpoint",
            p(&ckpt),
            "--data",
            p(&data),
            "--out-dir",
            p(&tmp.path().join(dir)),
        ])
    };
    assert_eq!(eval("e1"), eval("e2"));
    assert_eq!(
        fs::read(tmp.path().join("e1/eval.csv")).unwrap(),
        fs::read(tmp.path().join("e2/eval.csv")).unwrap()
    );

    let oracle: serde_json::Value = serde_json::from_str(&ok(&["eval", "--oracle", "--data", p(&data)])).unwrap();
    for key in ["aji_cyto", "aji_nuc", "aji_avg", "map_cyto", "map_nuc", "map_avg"] {
        assert_eq!(oracle[key], 1.0, "{key}");
    }
}

#[test]
fn full_fraction_sweep_matches_the_full_ablation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(
        tmp.path(),
        4,
        6,
        "[train]\ntotal_iters = 1500\n[train.model]\nhidden = 16\n\
         [experiment]\nlabeled_fractions = [1.0]\nreplicate_seeds = [4]\n",
    );
    let data = tmp.path().join("data");
    ok(&["generate", "--config", p(&cfg), "--out-dir", p(&data)]);
    let (sweep, ablate) = (tmp.path().join("sweep"), tmp.path().join("ablate"));
    ok(&["sweep", "--config", p(&cfg), "--data", p(&data), "--out-dir", p(&sweep)]);
    ok(&[
        "ablate",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out-dir",
        p(&ablate),
        "--ablation",
        "full",
    ]);

    let sweep_csv = fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep_csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("1,supervised_only,full,4,4,"));
    assert!(rows[1].starts_with("1,mmt_psm,full,4,4,"));
    let ablate_csv = fs::read_to_string(ablate.join("ablate.csv")).unwrap();
    assert_eq!(ablate_csv.lines().nth(1), Some(rows[1]));
    assert_eq!(ablate_csv.lines().count(), 2);
}

#[test]
fn audit_reports_every_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let printed = ok(&["audit", "--coordinates", "20", "--out-dir", p(tmp.path())]);
    let report: serde_json::Value = serde_json::from_str(&printed).unwrap();
    let losses: Vec<&str> = report["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["loss"].as_str().unwrap())
        .collect();
    assert_eq!(losses, ["cls", "reg", "seg", "rpn", "psm", "mgd"]);
    assert!(tmp.path().join("audit.json").exists());
}
