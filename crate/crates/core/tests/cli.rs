mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::{intercept_panel, mod6_scenario};
use ratekit::{generate_panel, ConditionalLaw, MixingDist};
use serde_json::Value;

fn ratekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ratekit")).args(args).output().unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn scenario_csv(dir: &Path, name: &str, s: &ratekit::Scenario, rep: u64) -> String {
    write(dir, name, &generate_panel(s, rep).unwrap().to_csv_string())
}

fn alt3(k: usize) -> ratekit::Scenario {
    mod6_scenario(k, 5, MixingDist::degenerate(), MixingDist::gamma(0.5).unwrap(), ConditionalLaw::Poisson, 90)
}

#[test]
fn poisson_fit_of_toy_panel() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "toy.csv", &intercept_panel(&[vec![2, 4]]).to_csv_string());
    let out = ratekit(&["fit", "--model", "poisson", "--input", &input]);
    assert_eq!(out.status.code(), Some(0));
    let beta = json(&out)["beta"][0].as_f64().unwrap();
    assert!((beta - 3f64.ln()).abs() < 1e-10);
    // manifest goes to the diagnostic stream, stdout stays parseable
    let manifest: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(manifest["input_digests"].as_object().unwrap().contains_key(&input));
}

#[test]
fn random_effect_fit_reports_both_variance_scales() {
    let dir = tempfile::tempdir().unwrap();
    let s = mod6_scenario(60, 5, MixingDist::lognormal(0.3).unwrap(), MixingDist::degenerate(), ConditionalLaw::Poisson, 91);
    let input = scenario_csv(dir.path(), "sim.csv", &s, 0);
    let out = ratekit(&["fit", "--model", "nb-re", "--re-dist", "lognormal", "--input", &input]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert!(v["sigma2"].is_number() && v["var_theta"].is_number());
}

#[test]
fn missing_mixing_law_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "toy.csv", &intercept_panel(&[vec![2, 4]]).to_csv_string());
    let out = ratekit(&["fit", "--model", "poisson-re", "--input", &input]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--re-dist"));
    let out = ratekit(&["fit", "--model", "tweedie", "--input", &input]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_row_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "bad.csv", "policy_id,period,count,intercept\nA,1,2,1\nA,2,-1,1\n");
    let out = ratekit(&["fit", "--model", "poisson", "--input", &input]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 3") && err.contains("count"), "{err}");
}

#[test]
fn level_changes_only_the_decision() {
    let dir = tempfile::tempdir().unwrap();
    let input = scenario_csv(dir.path(), "alt3.csv", &alt3(60), 0);
    let a = json(&ratekit(&["test", "--type", "pinquet", "--input", &input, "--level", "0.05"]));
    let b = json(&ratekit(&["test", "--type", "pinquet", "--input", &input, "--level", "0.01"]));
    assert_eq!(a["statistic"], b["statistic"]);
    assert_eq!(a["p_value_one_sided"], b["p_value_one_sided"]);
    let p = a["p_value_one_sided"].as_f64().unwrap();
    assert_eq!(a["reject"].as_bool().unwrap(), p <= 0.05);
    assert_eq!(b["reject"].as_bool().unwrap(), p <= 0.01);
}

#[test]
fn pinquet_rarely_rejects_model1_data() {
    let dir = tempfile::tempdir().unwrap();
    let s = mod6_scenario(100, 5, MixingDist::degenerate(), MixingDist::degenerate(), ConditionalLaw::Poisson, 92);
    let kept = (0..20)
        .filter(|&rep| {
            let input = scenario_csv(dir.path(), "m1.csv", &s, rep);
            !json(&ratekit(&["test", "--type", "pinquet", "--input", &input]))["reject"].as_bool().unwrap()
        })
        .count();
    assert!(kept >= 16, "{kept}/20 runs did not reject");
}

#[test]
fn both_tests_disagree_on_saturated_data() {
    let dir = tempfile::tempdir().unwrap();
    let input = scenario_csv(dir.path(), "alt3.csv", &alt3(480), 0);
    let v = json(&ratekit(&["test", "--type", "both", "--input", &input]));
    assert_eq!(v["disagreement"], Value::Bool(true), "{v}");
}

fn fit_json(dir: &Path, sigma2: f64, alpha: f64) -> String {
    let fit = serde_json::json!({
        "conditional": "negbin",
        "re_dist": "lognormal-mean-one",
        "covariate_names": ["intercept"],
        "beta": [0.0],
        "alpha": alpha,
        "sigma2": sigma2,
        "var_theta": sigma2.exp_m1(),
        "loglik": 0.0,
        "iterations": 0,
        "converged": true,
        "status": "converged",
        "quadrature_nodes": 32,
    });
    write(dir, "fit.json", &fit.to_string())
}

fn rows(out: &Output) -> Vec<csv::StringRecord> {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    csv::Reader::from_reader(body.as_bytes()).records().map(|r| r.unwrap()).collect()
}

#[test]
fn credibility_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "p.csv", &intercept_panel(&[vec![1, 0, 2, 0, 1], vec![0; 5]]).to_csv_string());
    let fit = fit_json(dir.path(), 2f64.ln(), 0.5);
    let out = ratekit(&["credibility", "--fit", &fit, "--input", &input]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = rows(&out);
    assert_eq!(rows.len(), 2);
    for row in rows {
        let z: f64 = row[6].parse().unwrap();
        assert!((z - 5.0 / 7.0).abs() < 1e-6, "z = {z}");
    }
}

#[test]
fn zero_variance_fit_predicts_prior_rate() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "p.csv", &intercept_panel(&[vec![3, 0, 2], vec![0, 0, 1]]).to_csv_string());
    let fit = fit_json(dir.path(), 0.0, 0.5);
    let out = ratekit(&["credibility", "--fit", &fit, "--input", &input]);
    let rows = rows(&out);
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert_eq!(&row[6], "0");
        assert_eq!(row[7].parse::<f64>().unwrap(), row[3].parse::<f64>().unwrap());
    }
}

#[test]
fn holdout_needs_two_periods_and_adds_a_footer() {
    let dir = tempfile::tempdir().unwrap();
    let fit = fit_json(dir.path(), 0.3, 0.5);
    let single = write(dir.path(), "single.csv", &intercept_panel(&[vec![1], vec![0, 2]]).to_csv_string());
    let out = ratekit(&["credibility", "--fit", &fit, "--input", &single, "--holdout-last"]);
    assert_eq!(out.status.code(), Some(1));

    let s = mod6_scenario(40, 5, MixingDist::lognormal(0.3).unwrap(), MixingDist::degenerate(), ConditionalLaw::Poisson, 93);
    let input = scenario_csv(dir.path(), "sim.csv", &s, 0);
    let fitted = ratekit(&["fit", "--model", "nb-re", "--re-dist", "lognormal", "--input", &input]);
    let fit = write(dir.path(), "fitted.json", &String::from_utf8(fitted.stdout).unwrap());
    let out = ratekit(&["credibility", "--fit", &fit, "--input", &input, "--holdout-last"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let footer = text.lines().last().unwrap().strip_prefix("# ").unwrap();
    let v: Value = serde_json::from_str(footer).unwrap();
    assert!(v["predictive_mse"].as_f64().unwrap() > 0.0);
}

#[test]
fn glm_fit_is_not_a_credibility_input() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "toy.csv", &intercept_panel(&[vec![2, 4]]).to_csv_string());
    let glm = ratekit(&["fit", "--model", "poisson", "--input", &input]);
    let fit = write(dir.path(), "glm.json", &String::from_utf8(glm.stdout).unwrap());
    let out = ratekit(&["credibility", "--fit", &fit, "--input", &input]);
    assert_eq!(out.status.code(), Some(1));
}

fn simulate_to(dir: &Path, name: &str, extra: &[&str]) -> (Output, PathBuf) {
    let path = dir.join(name);
    let mut args = vec!["simulate", "--output", path.to_str().unwrap()];
    args.extend_from_slice(extra);
    (ratekit(&args), path)
}

#[test]
fn table1_summary_has_one_row_per_cell_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--scenario", "table1", "--reps", "20", "--seed", "7"];
    let (out, a) = simulate_to(dir.path(), "a.csv", &args);
    assert_eq!(out.status.code(), Some(0));
    let (_, b) = simulate_to(dir.path(), "b.csv", &args);
    let text = std::fs::read(&a).unwrap();
    assert_eq!(text, std::fs::read(&b).unwrap());
    assert_eq!(String::from_utf8(text.clone()).unwrap().lines().count(), 5);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    let digest: String = {
        use sha2::Digest;
        sha2::Sha256::digest(&text).iter().map(|b| format!("{b:02x}")).collect()
    };
    assert_eq!(manifest["output_sha256"], Value::String(digest));
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--scenario", "sim1", "--reps", "4", "--seed", "3", "--sigma2", "0.2"];
    let (_, a) = simulate_to(dir.path(), "a.csv", &[&args[..], &["--threads", "1"]].concat());
    let (_, b) = simulate_to(dir.path(), "b.csv", &[&args[..], &["--threads", "3"]].concat());
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn power_curve_has_eleven_points() {
    let dir = tempfile::tempdir().unwrap();
    let (out, p) = simulate_to(dir.path(), "p.csv", &["--scenario", "power", "--reps", "20", "--seed", "1", "--alpha", "0.5"]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(p).unwrap();
    let sigmas: Vec<&str> = text.lines().filter(|l| l.contains(",reject,")).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(sigmas.len(), 11);
    assert_eq!(sigmas.first(), Some(&"0"));
    assert_eq!(sigmas.last(), Some(&"1"));
}

#[test]
fn unknown_scenario_lists_the_valid_ones() {
    let out = ratekit(&["simulate", "--scenario", "table9"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["table1", "sim1", "sim2", "power", "buhlmann1", "buhlmann2", "theorem1"] {
        assert!(err.contains(name), "{err}");
    }
}
