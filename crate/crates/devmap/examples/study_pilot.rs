//! Small-scale study run printing the aggregated table for one scenario.
//!
//! Usage: study_pilot [scenario] [n_replicates] [abnormal_fraction]

use std::time::Instant;

use devmap::simulate::Scenario;
use devmap::study::{metric_series, run_study, summarize, StudyConfig, MODEL_NAMES};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scenario = args
        .get(1)
        .map(|s| Scenario::parse(s).expect("unknown scenario"))
        .unwrap_or(Scenario::Moderate);
    let n_replicates: usize = args
        .get(2)
        .map(|s| s.parse().expect("bad replicate count"))
        .unwrap_or(4);
    let abnormal_fraction: f64 = args
        .get(3)
        .map(|s| s.parse().expect("bad fraction"))
        .unwrap_or(0.2);

    let config = StudyConfig {
        scenario,
        n_subjects: 40,
        n_regions: 10,
        n_replicates,
        seed: 7,
        abnormal_fraction,
        n_chains: 2,
        n_warmup: 500,
        n_samples: 500,
        ..StudyConfig::default()
    };

    let start = Instant::now();
    let outcomes = run_study(&config, None).expect("study failed");
    let elapsed = start.elapsed();
    println!(
        "{scenario} x {n_replicates} replicates in {:.1}s ({:.1}s per replicate)",
        elapsed.as_secs_f64(),
        elapsed.as_secs_f64() / n_replicates as f64
    );

    for model in MODEL_NAMES {
        print!("{model:>16}");
        for metric in ["map_mse", "mse", "z_mean", "z_var", "tail_prob", "auc"] {
            let series = metric_series(&outcomes, model, metric);
            let mean = series.iter().sum::<f64>() / series.len().max(1) as f64;
            print!("  {metric}={mean:7.4}");
        }
        println!();
    }
    println!();
    for row in summarize(&outcomes).expect("summary") {
        if row.metric == "map_mse" {
            println!(
                "{:>16} map_mse = {:.4} (se {:.4}, n {})",
                row.model, row.mean, row.se, row.n
            );
        }
    }

    for o in &outcomes {
        let (s, b, t, r) = o.scale_means;
        let zv = o.reports["spatial"].calibration.z_var;
        println!(
            "rep {}: sigma {s:.3} sigma_b {b:.3} tau_u {t:.3} rho {r:.3} (ci {:.2}..{:.2}, true {:.2})  spatial z_var {zv:.3}",
            o.replicate, o.rho_ci90.0, o.rho_ci90.1, o.rho_true
        );
    }
}
