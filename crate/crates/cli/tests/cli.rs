use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spectra-filter"));
    c.env("RUST_LOG", "info");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

const SCAN: &str = "[run]\nmode = trace-scan\n\n[model]\nN = 10\n\n[filter]\nscan = -1:1:21\ndelta = sqrtN\n";

#[test]
fn help_documents_defaults() {
    let o = run(&["run", "--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("dt = 0.02") && text.contains("x = 3"), "{text}");
}

#[test]
fn unknown_key_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.ini", &SCAN.replace("delta", "deltta"));
    let o = run(&["run", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("deltta"), "{}", stderr(&o));
}

#[test]
fn unresolvable_rule_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "bad.ini", &SCAN.replace("sqrtN", "sqrtM"));
    assert_eq!(run(&["run", &cfg]).status.code(), Some(2));
}

#[test]
fn ed_check_passes_at_eight_sites() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "ed.ini", "[run]\nmode = ed-check\n[model]\nN = 8\n");
    let o = run(&["ed-check", &cfg]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{out}{}", stderr(&o));
    assert!(out.lines().count() >= 8);
    assert!(out.lines().skip(1).all(|l| l.ends_with(",pass")), "{out}");
}

#[test]
fn trace_scan_peaks_at_zero_energy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "scan.ini", SCAN);
    let out = tmp.path().join("out");
    let o = run(&["run", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("trace-scan.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "dos_weight").unwrap();
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 21);
    let peak = rows.iter().max_by(|a, b| a[col].total_cmp(&b[col])).unwrap();
    assert_eq!(peak[0], 0.0);
    let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("result.json")).unwrap()).unwrap();
    assert_eq!(record["config"]["evolution"]["dt"], 0.02);
    assert_eq!(record["results"].as_array().unwrap().len(), 21);
}

fn without_wall_clock(text: &str) -> String {
    text.lines().filter(|l| !l.contains("\"wall_clock_s\"")).collect::<Vec<_>>().join("\n")
}

#[test]
fn monte_carlo_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(
        tmp.path(),
        "mc.ini",
        "[run]\nmode = mc\n[model]\nN = 6\n[filter]\nenergy_per_site = -0.3, 0.0\ndelta = 2\n[evolution]\nbackend = exact\n[sampler]\nn_samples = 3000\nburn_in = 100\nn_chains = 3\n",
    );
    let outs: Vec<_> = [("a", "1"), ("b", "3")]
        .iter()
        .map(|(name, workers)| {
            let dir = tmp.path().join(name);
            let o = run(&["run", &cfg, "--out", dir.to_str().unwrap(), "--seed", "42", "--workers", workers]);
            assert!(o.status.success(), "{}", stderr(&o));
            (fs::read(dir.join("mc.csv")).unwrap(), fs::read_to_string(dir.join("result.json")).unwrap())
        })
        .collect();
    assert_eq!(outs[0].0, outs[1].0);
    assert_eq!(without_wall_clock(&outs[0].1), without_wall_clock(&outs[1].1));
    let record: serde_json::Value = serde_json::from_str(&outs[0].1).unwrap();
    assert_eq!(record["config"]["rng_seed"], 42);
    assert!(record["results"][0]["stderr"].as_f64().unwrap() > 0.0);
}

#[test]
fn operator_cache_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cache = tmp.path().join("cache");
    let text = format!("{}\n[evolution]\ncache_dir = {}\n", SCAN.replace("N = 10", "N = 6"), cache.display());
    let cfg = write(tmp.path(), "scan.ini", &text);
    let out = tmp.path().join("out");
    let go = || run(&["run", &cfg, "--out", out.to_str().unwrap()]);

    let first = go();
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stderr(&first).contains("cache miss"));
    let csv1 = fs::read(out.join("trace-scan.csv")).unwrap();
    let second = go();
    assert!(stderr(&second).contains("cache hit: "), "{}", stderr(&second));
    assert_eq!(fs::read(out.join("trace-scan.csv")).unwrap(), csv1);

    let ls = run(&["cache", "ls", cache.to_str().unwrap()]);
    let listing = String::from_utf8_lossy(&ls.stdout).into_owned();
    assert_eq!(listing.lines().count(), 1, "{listing}");
    let entry = Path::new(listing.split('\t').next().unwrap()).to_path_buf();

    let manifest = entry.join("manifest.txt");
    let edited: String = fs::read_to_string(&manifest)
        .unwrap()
        .lines()
        .map(|l| if l.starts_with("dt =") { "dt = 5e-2".to_string() } else { l.to_string() })
        .collect::<Vec<_>>()
        .join("\n");
    fs::write(&manifest, edited + "\n").unwrap();
    let rebuilt = go();
    assert!(rebuilt.status.success());
    assert!(stderr(&rebuilt).contains("mismatch"), "{}", stderr(&rebuilt));
    assert!(stderr(&go()).contains("cache hit: "));

    let victim = entry.join("U_000001.fett");
    let bytes = fs::read(&victim).unwrap();
    fs::write(&victim, &bytes[..bytes.len() / 2]).unwrap();
    let corrupt = go();
    assert_eq!(corrupt.status.code(), Some(4));
    assert!(stderr(&corrupt).contains("U_000001.fett"), "{}", stderr(&corrupt));

    let rm = run(&["cache", "rm", cache.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&rm.stdout).contains("removed 1"));
    assert!(String::from_utf8_lossy(&run(&["cache", "ls", cache.to_str().unwrap()]).stdout).is_empty());
}
