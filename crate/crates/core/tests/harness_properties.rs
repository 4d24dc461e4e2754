mod common;

use serde_json::json;
use stratkit::cli::cmd_simulate;
use stratkit::config::{LoadedConfig, Overrides};

fn ratio_for(rho: f64) -> f64 {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(
        dir.path(),
        &json!({
            "seed": 12,
            "simulation": {
                "reps": 3000,
                "n": 200,
                "methods": [{"method": "simple"}, {"method": "sorted-pair"}],
                "synthetic": {
                    "dgp": {"dim": 2, "beta": [1.0, 1.0], "noise_sd": 1.0},
                    "pool_size": 50000,
                    "scores": {"kind": "correlated", "rho": rho}
                }
            }
        }),
    );
    let summary = cmd_simulate(&LoadedConfig::load(&cfg, &Overrides::default()).unwrap()).unwrap();
    let mse = |m: &str| {
        summary["methods"].as_array().unwrap().iter().find(|r| r["method"] == m).unwrap()["mse"].as_f64().unwrap()
    };
    mse("sorted-pair") / mse("simple")
}

#[test]
fn better_scores_never_raise_the_mse_ratio() {
    let ratios: Vec<f64> = [0.0, 0.5, 1.0].iter().map(|&r| ratio_for(r)).collect();
    assert!(ratios.windows(2).all(|w| w[1] <= w[0]), "{ratios:?}");
    assert!((ratios[2] - 1.0 / 3.0).abs() < 0.05, "{ratios:?}");
}
