use std::path::Path;
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coherence-lab")).args(args).output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_train_eval_plot_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    let o = bin(&["gen-data", "--output", p(&data), "--identities", "4", "--frames", "6", "--image-size", "16", "--seed", "2"]);
    assert!(o.status.success(), "{}", text(&o));

    // The file sets the widths and a learning rate; the flag overrides the rate.
    let cfg = tmp.path().join("train.cfg");
    std::fs::write(&cfg, "# tiny run\nwidths=4,8\naudio_dim=8\nestimator_hidden=8\nlr_generator=0.5\nablation=amie-da\n").unwrap();
    let o = bin(&[
        "train", "--config", p(&cfg), "--lr-generator", "0.001", "--image-size", "16", "--batch-size", "4", "--epochs", "2",
        "--steps-per-epoch", "3", "--dataset", p(&data), "--output", p(&run),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("lmd_px="));
    let resolved = std::fs::read_to_string(run.join("config")).unwrap();
    assert!(resolved.contains("lr_generator=0.001\n"), "{resolved}");
    assert!(resolved.contains("widths=4,8\n"), "{resolved}");
    assert!(resolved.contains("da_enabled=true\n"), "{resolved}");

    let o = bin(&["eval", "--run", p(&run)]);
    assert!(o.status.success(), "{}", text(&o));
    let report = std::fs::read_to_string(run.join("report.kv")).unwrap();
    let lmd_line = report.lines().find(|l| l.starts_with("lmd_px=")).unwrap();
    let lmd: f64 = lmd_line["lmd_px=".len()..].parse().unwrap();
    assert!(text(&o).contains(&format!("lmd_px={lmd:.4}")), "{}", text(&o));

    std::fs::remove_dir_all(run.join("plots")).unwrap();
    let o = bin(&["plot", "--run", p(&run)]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 4);
    assert!(run.join("plots/pca.png").is_file());

    let o = bin(&["estimate-mi", "--dataset", p(&data), "--steps", "50", "--batch-size", "32", "--window", "10"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("binned_plugin_16="));
}

#[test]
fn gaussian_estimate_prints_analytic_value() {
    let o = bin(&["estimate-mi", "--representation", "js", "--rho", "0.5", "--steps", "30", "--batch-size", "64"]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("analytic=0.143841"), "{}", text(&o));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    // Validation failures exit with 1.
    let o = bin(&["train", "--lr-generator", "-1", "--dataset", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(1), "{}", text(&o));
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "no_such_field=3\n").unwrap();
    assert_eq!(bin(&["train", "--config", p(&cfg)]).status.code(), Some(1));
    assert_eq!(bin(&["estimate-mi", "--rho", "1.5"]).status.code(), Some(1));
    assert_eq!(bin(&["ablate", "--modes", "nonsense"]).status.code(), Some(1));
    assert_eq!(bin(&["no-such-command"]).status.code(), Some(1));
    // Missing artifacts are runtime failures.
    let o = bin(&["eval", "--run", p(&tmp.path().join("none"))]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = bin(&["train", "--dataset", p(&tmp.path().join("none")), "--output", p(&tmp.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}
