use std::path::Path;
use std::process::{Command, Output};

use bitbench_core::bittensor::{pack_signs, write_bittensor};
use bitbench_core::Tensor;

fn bitbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bitbench"))
        .args(args)
        .env_remove("BITBENCH_OUT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn bitbench")
}

fn ok(args: &[&str]) -> Output {
    let o = bitbench(args);
    assert!(
        o.status.success(),
        "bitbench {args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn records(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .records()
        .map(Result::unwrap)
        .collect()
}

fn headers(path: &Path) -> csv::StringRecord {
    csv::Reader::from_path(path).unwrap().headers().unwrap().clone()
}

fn col(path: &Path, name: &str) -> usize {
    headers(path).iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn metrics_recomputes_om_task() {
    let dir = tempfile::tempdir().unwrap();
    let t1 = dir.path().join("t1.csv");
    std::fs::write(&t1, bitbench_core::metrics::TABLE1_CSV).unwrap();
    let out = dir.path().join("m");
    ok(&["metrics", "--table1", s(&t1), "--out", s(&out)]);
    let csv = out.join("om.csv");
    let (f, a, v, e) = (col(&csv, "formula"), col(&csv, "algorithm"), col(&csv, "value"), col(&csv, "abs_error"));
    let rows = records(&csv);
    let bnn = rows.iter().find(|r| &r[f] == "om_task" && &r[a] == "bnn").unwrap();
    let val: f64 = bnn[v].parse().unwrap();
    assert!((val - 70.82).abs() <= 0.05, "{val}");
    let worst = rows.iter().filter_map(|r| r[e].parse::<f64>().ok()).fold(0.0, f64::max);
    assert!(worst <= 0.05, "{worst}");
    assert!(out.join("om.txt").is_file());
}

#[test]
fn deploy_grid_from_shipped_data() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["deploy-check", "--out", s(dir.path())]);
    let csv = dir.path().join("deploy.csv");
    let rows = records(&csv);
    assert_eq!(rows.len(), 16);
    for algo in ["BNN", "XNOR", "DoReFa", "Bi-Real", "XNOR++", "ReActNet", "ReCU", "FDA"] {
        assert_eq!(rows.iter().filter(|r| &r[0] == algo).count(), 2, "{algo}");
        let any = rows.iter().any(|r| &r[0] == algo && &r[2] == "true");
        let blocked = matches!(algo, "XNOR" | "XNOR++");
        assert_eq!(any, !blocked, "{algo}");
    }
}

#[test]
fn missing_dataset_path_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[dataset]\nsource = \"csv\"\n").unwrap();
    let o = bitbench(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("dataset.path"), "{err}");
    assert!(err.contains("train") && err.contains("run.toml"), "{err}");

    std::fs::write(&cfg, "[dataset]\nsource = \"csv\"\npath = \"nowhere.csv\"\n").unwrap();
    let o = bitbench(&["train", "--config", s(&cfg)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset.path"));
}

#[test]
fn unknown_config_key_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[training]\nepoch = 3\n").unwrap();
    let o = bitbench(&["train", "--config", s(&cfg)]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.toml") && err.contains("epoch"), "{err}");
}

#[test]
fn kernel_bench_small_size_and_reps() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "kernel-bench", "--sizes", "16", "--reps", "21", "--warmup", "5", "--m", "8", "--k", "8", "--out",
        s(dir.path()),
    ]);
    let rows = records(&dir.path().join("bench.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][2], "16");
    assert_eq!(&rows[0][4], "21");
    assert_eq!(records(&dir.path().join("samples.csv")).len(), 2 * 21);
    assert!(dir.path().join("machine.toml").is_file());

    let o = bitbench(&["kernel-bench", "--sizes", "16", "--reps", "3", "--out", s(dir.path())]);
    assert!(!o.status.success());
}

#[test]
fn kernel_bench_on_bbt1_operands() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, rows: usize| {
        let t = Tensor::from_fn(vec![rows, 100], |i: usize| if (i * 7) % 3 == 0 { -1.0f32 } else { 1.0 });
        let p = dir.path().join(name);
        write_bittensor(&pack_signs(&t, 100).unwrap(), std::fs::File::create(&p).unwrap()).unwrap();
        p
    };
    let (a, w) = (write("a.bbt", 4), write("w.bbt", 6));
    let out = dir.path().join("o");
    ok(&["kernel-bench", "--a", s(&a), "--w", s(&w), "--out", s(&out)]);
    let rows = records(&out.join("bench.csv"));
    assert_eq!((&rows[0][0], &rows[0][1], &rows[0][2]), ("4", "6", "100"));
}

fn strip_timing(path: &Path) -> Vec<Vec<String>> {
    let h = headers(path);
    records(path)
        .iter()
        .map(|r| {
            r.iter()
                .zip(h.iter())
                .filter(|(_, h)| *h != "seconds")
                .map(|(v, _)| v.to_owned())
                .collect()
        })
        .collect()
}

#[test]
fn train_report_regenerates_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    ok(&[
        "train", "--epochs", "2", "--points", "200", "--algorithms", "bnn,recu", "--seed", "5", "--out",
        s(&first),
    ]);
    let summary = first.join("summary.csv");
    let rows = records(&summary);
    let ids: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(ids, ["fp", "bnn", "recu"]);
    assert_eq!(records(&first.join("epochs.csv")).len(), 6);

    let manifest = std::fs::read_to_string(first.join("manifest.toml")).unwrap();
    let m: toml::Table = toml::from_str(&manifest).unwrap();
    assert_eq!(m["version"].as_str(), Some(env!("CARGO_PKG_VERSION")));
    assert_eq!(m["status"].as_str(), Some("ok"));
    assert_eq!(m["config"]["training"]["epochs"].as_integer(), Some(2));
    assert_eq!(m["config"]["seed"].as_integer(), Some(5));

    let second = dir.path().join("second");
    ok(&["train", "--config", s(&first.join("manifest.toml")), "--out", s(&second)]);
    for f in ["summary.csv", "epochs.csv"] {
        assert_eq!(strip_timing(&first.join(f)), strip_timing(&second.join(f)), "{f}");
    }
}

#[test]
fn failed_run_exits_nonzero_and_keeps_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("conv.toml");
    std::fs::write(
        &cfg,
        "[model]\nhidden = [{ type = \"conv\", out = 4, kernel = 3 }]\n[dataset]\nn = 100\n[training]\nepochs = 1\n",
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = bitbench(&["train", "--config", s(&cfg), "--algorithms", "bnn", "--out", s(&out)]);
    assert!(!o.status.success());
    let rows = records(&out.join("summary.csv"));
    let e = col(&out.join("summary.csv"), "error");
    assert!(rows.iter().all(|r| !r[e].is_empty()));
    assert!(std::fs::read_to_string(out.join("manifest.toml")).unwrap().contains("status = \"failed\""));
}

#[test]
fn sweep_and_robust_small() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("s.toml");
    std::fs::write(
        &cfg,
        "[dataset]\nn = 200\n[training]\nepochs = 2\n[sweep]\nlearning_rates = [1e-3, 1e-2]\nseeds = [0, 1]\n\
         [binarizer]\nalgorithms = [\"dorefa\"]\n",
    )
    .unwrap();
    let sw = dir.path().join("sweep");
    ok(&["sweep", "--config", s(&cfg), "--out", s(&sw)]);
    assert_eq!(records(&sw.join("cells.csv")).len(), 8);
    let summary = records(&sw.join("summary.csv"));
    assert_eq!(summary.len(), 2);
    assert!(summary.iter().all(|r| &r[1] == "4" && &r[2] == "4"));

    let rb = dir.path().join("robust");
    ok(&["robust", "--config", s(&cfg), "--out", s(&rb)]);
    assert_eq!(records(&rb.join("gaps.csv")).len(), 10);
    assert_eq!(records(&rb.join("summary.csv")).len(), 2);
}

#[test]
fn complexity_default_resnet18() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["complexity", "--algorithms", "bnn,xnorpp", "--out", s(dir.path())]);
    let csv = dir.path().join("complexity.csv");
    let rows = records(&csv);
    let rc = col(&csv, "r_c");
    let bnn: f64 = rows[0][rc].parse().unwrap();
    let xpp: f64 = rows[1][rc].parse().unwrap();
    assert!((bnn - 13.27).abs() <= 0.3, "{bnn}");
    assert!(xpp < bnn);
}

#[test]
fn probe_small_grid() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("p.toml");
    std::fs::write(&cfg, "[probe]\nkinds = [\"mlp\", \"cnn\"]\ndims = [64]\nsizes = [14]\nseeds = 2\n").unwrap();
    let out = dir.path().join("o");
    ok(&["probe", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(records(&out.join("probe.csv")).len(), 2);
    assert!(out.join("probe.md").is_file());
}

#[test]
fn output_root_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_bitbench"))
        .args(["deploy-check"])
        .env("BITBENCH_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("runs/deploy-check/deploy.csv").is_file());
}
