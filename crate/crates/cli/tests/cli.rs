use std::path::Path;
use std::process::{Command, Output};

fn cfn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfn"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

const SMALL: &str = r#"{"tree": {"newick": "((A,B),(C,D));"}, "m": [500, 5000], "trials": 3, "seed": 4}"#;

#[test]
fn every_subcommand_writes_its_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "c.json", SMALL);
    let cases: [(&str, &[&str]); 6] = [
        ("error-scaling", &["error_scaling.csv", "error_scaling_summary.csv", "error_scaling_fit.csv"]),
        ("convergence", &["convergence.csv", "convergence_summary.csv"]),
        ("landscape", &["landscape_summary.csv", "landscape_population.csv", "landscape_fisher.csv", "landscape_empirical_m500.csv"]),
        ("steel-demo", &["steel_demo.csv", "steel_slice.csv", "steel_witness.json"]),
        ("bernstein", &["bernstein.csv", "bernstein_deviations.csv", "bernstein_params.csv"]),
        ("simulate", &["samples.csv"]),
    ];
    for (cmd, files) in cases {
        let out_dir = format!("out-{cmd}");
        let o = cfn(&[cmd, "--config", "c.json", "--out", &out_dir], d);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert_eq!(summary["kind"], cmd);
        for f in files {
            assert!(d.join(&out_dir).join(f).exists(), "{cmd}: missing {f}");
        }
    }
}

#[test]
fn csv_preamble_and_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "c.json", SMALL);
    assert!(cfn(&["error-scaling", "--config", "c.json", "--out", "o"], d).status.success());
    let text = read(&d.join("o"), "error_scaling.csv");
    let lines: Vec<&str> = text.lines().collect();
    for key in ["# config_sha256: ", "# seed: 4", "# tree: ((A,B),(C,D));", "# delta: ", "# box_constants: ", "# versions: "] {
        assert!(lines.iter().any(|l| l.starts_with(key)), "missing {key}");
    }
    let header = lines.iter().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(*header, "m,trial,error,converged");
    let row = lines.last().unwrap().split(',').collect::<Vec<_>>();
    // 17 significant digits
    assert_eq!(row[2].split('e').next().unwrap().replace(['.', '-'], "").len(), 17);
}

#[test]
fn identical_configs_give_identical_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "c.json", SMALL);
    for cmd in ["error-scaling", "convergence", "landscape", "bernstein", "steel-demo"] {
        assert!(cfn(&[cmd, "--config", "c.json", "--out", "a"], d).status.success());
        assert!(cfn(&[cmd, "--config", "c.json", "--out", "b"], d).status.success());
    }
    let mut names: Vec<_> = std::fs::read_dir(d.join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 10);
    for n in names {
        let n = n.to_str().unwrap();
        assert_eq!(read(&d.join("a"), n), read(&d.join("b"), n), "{n} differs");
    }
}

#[test]
fn seed_and_tree_flags_override_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "c.json", SMALL);
    write(d, "tree.nwk", "((A,B),(C,(D,E)));\n");
    assert!(cfn(&["simulate", "--config", "c.json", "--out", "s4"], d).status.success());
    assert!(cfn(&["simulate", "--config", "c.json", "--seed", "5", "--out", "s5"], d).status.success());
    assert_ne!(read(&d.join("s4"), "samples.csv"), read(&d.join("s5"), "samples.csv"));
    assert!(read(&d.join("s5"), "samples.csv").contains("# seed: 5"));
    assert!(cfn(&["simulate", "--config", "c.json", "--tree", "tree.nwk", "--out", "t"], d).status.success());
    let text = read(&d.join("t"), "samples.csv");
    assert!(text.contains("# tree: ((A,B),(C,(D,E)));"));
    let row = text.lines().last().unwrap();
    assert_eq!(row.split(',').next().unwrap().len(), 5);
}

#[test]
fn simulate_then_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "c.json", r#"{"tree": {"newick": "((A,B),(C,D));"}, "m": [20000], "seed": 1}"#);
    assert!(cfn(&["simulate", "--config", "c.json", "--out", "o"], d).status.success());
    let o = cfn(&["fit", "--config", "c.json", "--samples", "o/samples.csv", "--out", "o"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["termination"], "converged");
    for x in v["theta"].as_array().unwrap() {
        assert!((x.as_f64().unwrap() - 0.875).abs() < 0.05);
    }
    assert!(read(&d.join("o"), "fit_trace.csv").lines().any(|l| l.starts_with("sweep,objective,max_coord_change,theta_0")));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    write(d, "s.csv", "pattern,count\n++++,3\n+-++,1\n");
    write(d, "unknown.json", r#"{"bogus": 1}"#);
    write(d, "badbox.json", r#"{"box_constants": {"c_hat_lower": 1, "c_lower": 1, "c_upper": 2, "c_hat_upper": 3}}"#);
    write(d, "kind.json", r#"{"kind": "landscape"}"#);
    write(d, "edge.json", r#"{"tree": {"newick": "((A,B),(C,D));"}, "theta0": [1, 1, 1, 1, 1]}"#);
    let code = |args: &[&str]| cfn(args, d).status.code().unwrap();
    assert_eq!(code(&["fit", "--config", "unknown.json", "--samples", "s.csv"]), 2);
    assert_eq!(code(&["landscape", "--config", "badbox.json"]), 2);
    assert_eq!(code(&["convergence", "--config", "kind.json"]), 2);
    assert_eq!(code(&["fit", "--config", "missing.json", "--samples", "s.csv"]), 2);
    assert_eq!(code(&["fit", "--config", "edge.json", "--samples", "s.csv", "--out", "o"]), 3);
    assert_eq!(code(&["steel-demo"]), 0);
}
