use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use esm::synthetic::{self, SyntheticSpec};
use esm::tensorstore;
use tempfile::TempDir;

fn esm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esm")).args(args).output().expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

struct Fixture {
    dir: TempDir,
    tasks: usize,
}

impl Fixture {
    fn new() -> Self {
        let spec = SyntheticSpec::default();
        let set = synthetic::generate(&spec);
        let dir = tempfile::tempdir().unwrap();
        tensorstore::save_tensor_map(&set.base, dir.path().join("base.safetensors")).unwrap();
        for (t, (e, p)) in set.experts.iter().zip(&set.proxies).enumerate() {
            tensorstore::save_tensor_map(e, dir.path().join(format!("expert{t}.safetensors"))).unwrap();
            tensorstore::save_tensor_map(p, dir.path().join(format!("proxy{t}.safetensors"))).unwrap();
        }
        Self { dir, tasks: spec.tasks }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn merge_args(&self, out: &str, with_proxies: bool) -> Vec<String> {
        let mut args = vec!["merge".into(), "--base".into(), self.s("base.safetensors"), "--out".into(), self.s(out)];
        for t in 0..self.tasks {
            args.push("--expert".into());
            args.push(self.s(&format!("expert{t}.safetensors")));
            if with_proxies {
                args.push("--proxy".into());
                args.push(self.s(&format!("proxy{t}.safetensors")));
            }
        }
        args
    }
}

fn run(args: &[String]) -> Output {
    esm(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn help_exits_zero() {
    for args in [vec!["--help"], vec!["merge", "--help"], vec!["verify", "--help"]] {
        let out = esm(&args);
        assert_eq!(out.status.code(), Some(0), "{args:?}");
        assert!(text(&out.stdout).contains("Usage"));
    }
}

#[test]
fn unknown_flag_exits_one() {
    let out = esm(&["merge", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn merge_writes_a_loadable_checkpoint_and_a_summary() {
    let fx = Fixture::new();
    let mut args = fx.merge_args("merged.safetensors", true);
    args.extend(["--alpha".into(), "0.9".into()]);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let summary = text(&out.stdout);
    assert!(summary.starts_with("alpha\t0.900000\n"), "{summary}");
    assert!(summary.contains("blocks.0.attn.qkv.weight\tAttnQKV\t"), "{summary}");
    assert!(summary.contains("blocks.1.mlp.c_proj.weight\tMlpDown\t"), "{summary}");
    let merged = tensorstore::load_tensor_map(fx.path("merged.safetensors")).unwrap();
    let base = tensorstore::load_tensor_map(fx.path("base.safetensors")).unwrap();
    assert_eq!(merged.len(), base.len());
}

#[test]
fn esd_merge_without_proxies_names_the_flag() {
    let fx = Fixture::new();
    let mut args = fx.merge_args("m.safetensors", false);
    args.extend(["--alpha".into(), "1".into()]);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("--proxy"), "{}", text(&out.stderr));
    assert!(!fx.path("m.safetensors").exists());
}

#[test]
fn svd_merge_runs_without_proxies() {
    let fx = Fixture::new();
    let mut args = fx.merge_args("m.safetensors", false);
    args.extend(["--alpha", "1", "--decomp", "svd", "--rank", "2", "--scaling", "task,dim"].map(String::from));
    let out = run(&args);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
}

#[test]
fn bad_option_values_exit_one() {
    let fx = Fixture::new();
    for extra in [
        vec!["--alpha", "1", "--scaling", "task,bogus"],
        vec!["--alpha", "1", "--rank", "0"],
        vec!["--alpha", "1", "--rank-ratio", "5"],
        vec!["--alpha", "1", "--variant", "loud"],
        vec!["--alpha-search", "0", "1"],
        vec![],
    ] {
        let mut args = fx.merge_args("m.safetensors", true);
        args.extend(extra.iter().map(|s| s.to_string()));
        let out = run(&args);
        assert_eq!(out.status.code(), Some(1), "{extra:?}: {}", text(&out.stderr));
    }
}

#[test]
fn missing_input_file_exits_two() {
    let fx = Fixture::new();
    let mut args = fx.merge_args("m.safetensors", true);
    args[2] = fx.s("absent.safetensors");
    args.extend(["--alpha".into(), "1".into()]);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out.stderr));
    assert_eq!(esm(&["inspect", &fx.s("absent.safetensors")]).status.code(), Some(2));
}

fn write_script(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, format!("#!/bin/sh\n{body}\n")).unwrap();
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    }
    path.display().to_string()
}

#[cfg(unix)]
#[test]
fn alpha_search_calls_the_scorer_with_a_candidate_path() {
    let fx = Fixture::new();
    let log = fx.s("calls.log");
    // Flat score: every candidate ties, so the smallest α wins.
    let scorer = write_script(fx.dir.path(), "score.sh", &format!("test -s \"$1\" && echo \"$1\" >> {log}\necho 0.5"));
    let mut args = fx.merge_args("m.safetensors", true);
    args.extend(["--alpha-search".into(), "0.2".into(), "1.0".into(), "--scorer-cmd".into(), scorer]);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).starts_with("alpha\t0.200000\n"), "{}", text(&out.stdout));
    let calls = std::fs::read_to_string(&log).unwrap();
    assert!(calls.lines().count() >= 17, "{calls}");
}

#[cfg(unix)]
#[test]
fn scorer_with_garbage_output_exits_one() {
    let fx = Fixture::new();
    let scorer = write_script(fx.dir.path(), "bad.sh", "echo not-a-number");
    let mut args = fx.merge_args("m.safetensors", true);
    args.extend(["--alpha-search".into(), "0".into(), "1".into(), "--scorer-cmd".into(), scorer]);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("not-a-number"), "{}", text(&out.stderr));
}

#[test]
fn verify_reports_and_exit_code() {
    let fx = Fixture::new();
    let report = fx.s("report.jsonl");
    let out = esm(&["verify", "--trials", "10", "--dim-max", "12", "--report", &report]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let lines = text(&out.stdout);
    assert_eq!(lines.lines().count(), 4);
    assert!(lines.lines().all(|l| l.contains("PASS")), "{lines}");
    for line in std::fs::read_to_string(&report).unwrap().lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["pass"], true);
        assert_eq!(v["trials"], 10);
    }
}

#[test]
fn verify_json_and_single_suite() {
    let out = esm(&["verify", "--suite", "procrustes", "--trials", "5", "--json", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(text(&out.stdout).trim()).unwrap();
    assert_eq!(v["seed"], 3);
    assert_eq!(esm(&["verify", "--suite", "nope"]).status.code(), Some(1));
    assert_eq!(esm(&["verify", "--dim-min", "9", "--dim-max", "3"]).status.code(), Some(1));
}

#[test]
fn energy_csv() {
    let fx = Fixture::new();
    let out = esm(&[
        "energy",
        "--base",
        &fx.s("base.safetensors"),
        "--expert",
        &fx.s("expert0.safetensors"),
        "--proxy",
        &fx.s("proxy0.safetensors"),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let csv = text(&out.stdout);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("layer,fraction_retained,energy"));
    let qkv: Vec<f64> = csv
        .lines()
        .filter(|l| l.starts_with("blocks.0.attn.qkv.weight,"))
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(qkv.len(), 24);
    assert!(qkv.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(*qkv.last().unwrap(), 1.0);
    // Rank-2 updates: the ESD curve saturates after two components.
    assert!(qkv[1] > 1.0 - 1e-9, "{qkv:?}");
}

#[test]
fn energy_flags_unchanged_layers_and_requires_proxy_for_esd() {
    let fx = Fixture::new();
    let out = esm(&["energy", "--base", &fx.s("base.safetensors"), "--expert", &fx.s("base.safetensors"), "--mode", "svd"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(text(&out.stdout).contains("blocks.0.attn.qkv.weight,error,zero-update"));
    let out = esm(&["energy", "--base", &fx.s("base.safetensors"), "--expert", &fx.s("expert0.safetensors")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("--proxy"));
}

#[test]
fn inspect_lists_types_and_orders_by_norm() {
    let fx = Fixture::new();
    let out = esm(&["inspect", &fx.s("base.safetensors")]);
    assert_eq!(out.status.code(), Some(0));
    let listing = text(&out.stdout);
    assert!(listing.contains("blocks.0.mlp.c_fc.weight\t32x8\tMlpUp\t"), "{listing}");
    assert!(listing.contains("blocks.0.ln_1.weight\t8\t-\t"), "{listing}");

    let out = esm(&["inspect", &fx.s("expert1.safetensors"), "--base", &fx.s("base.safetensors"), "--order", "descending"]);
    assert_eq!(out.status.code(), Some(0));
    let norms: Vec<f64> = text(&out.stdout)
        .lines()
        .map(|l| l.rsplit('\t').next().unwrap().parse().unwrap())
        .collect();
    assert!(norms.windows(2).all(|w| w[0] >= w[1]), "{norms:?}");

    let a = esm(&["inspect", &fx.s("base.safetensors"), "--order", "random", "--seed", "9"]);
    let b = esm(&["inspect", &fx.s("base.safetensors"), "--order", "random", "--seed", "9"]);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn rules_file_changes_classification() {
    let fx = Fixture::new();
    let rules = fx.path("rules.txt");
    std::fs::write(&rules, "# everything in blocks.0 is an output projection\nblocks\\.0\\.\tAttnOut\n").unwrap();
    let out = esm(&["inspect", &fx.s("base.safetensors"), "--rules", &rules.display().to_string()]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("blocks.0.mlp.c_fc.weight\t32x8\tAttnOut\t"));
    std::fs::write(&rules, "no tab here\n").unwrap();
    let out = esm(&["inspect", &fx.s("base.safetensors"), "--rules", &rules.display().to_string()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn in_process_run_matches_the_binary() {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = esm::cli::run(["esm", "verify", "--suite", "svd", "--trials", "4"], &mut out, &mut err);
    assert_eq!(code, 0);
    let binary = esm(&["verify", "--suite", "svd", "--trials", "4"]);
    assert_eq!(out, binary.stdout);
}
