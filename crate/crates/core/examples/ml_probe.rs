// Scratch probe: full-scale dataset, forest timing and Table-I-style MAPE.
use rayon::prelude::*;
use std::time::Instant;
use todqos::featureset::{apply_config, build_dataset, metrics, split, FeatureConfig};
use todqos::rforest::{fit, ForestHyperparams};
use todqos::simkit::{run, ScenarioConfig, TraceManifest};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mult: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(40.0);
    let n_trees: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(40);
    let duration: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(600.0);
    let sigma: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(4.0);
    let levels = [0u32, 5, 15, 30, 40, 50, 70, 80, 100, 130, 160];

    let t0 = Instant::now();
    let jobs: Vec<(u32, u64)> =
        levels.iter().flat_map(|&l| (1..=3u64).map(move |s| (l, s))).collect();
    let traces: Vec<_> = jobs
        .par_iter()
        .map(|&(level, seed)| {
            let cfg = ScenarioConfig {
                n_ntod: level,
                seed: seed * 1000 + level as u64,
                duration,
                ntod_load_multiplier: mult,
                shadowing_sigma_db: sigma,
                ..Default::default()
            };
            let log = run(&cfg).unwrap();
            let manifest = TraceManifest {
                scenario_id: log.scenario_id.clone(),
                config_sha256: log.config_sha256.clone(),
                num_cells: log.num_cells,
                n_windows: log.windows.len(),
                config: cfg,
            };
            (log, manifest)
        })
        .collect();
    println!("simulated {} traces in {:.1} s", traces.len(), t0.elapsed().as_secs_f64());

    let ds = build_dataset(&traces).unwrap();
    println!("dataset: {} rows x {} features", ds.len(), ds.width());
    let label_stats = {
        let mut y = ds.y.clone();
        y.sort_by(f64::total_cmp);
        (y[0], y[y.len() / 2], y[y.len() - 1], y.iter().filter(|v| **v < 5e5).count())
    };
    println!(
        "labels: min {:.0} median {:.0} max {:.0}; sub-500kbps windows: {}",
        label_stats.0, label_stats.1, label_stats.2, label_stats.3
    );

    let (train, test) = split(&ds, 2.0 / 3.0, 7).unwrap();
    for name in ["T1", "T2", "T3", "T4", "T5", "T6"] {
        let cfg = FeatureConfig::preset(name, ds.layout).unwrap();
        let tr = apply_config(&train, &cfg).unwrap();
        let te = apply_config(&test, &cfg).unwrap();
        let hp = ForestHyperparams { n_trees, seed: 11, ..Default::default() };
        let t1 = Instant::now();
        let forest = fit(&tr, &hp).unwrap();
        let fit_s = t1.elapsed().as_secs_f64();
        let preds = forest.predict_batch(&te).unwrap();
        let report = metrics(&te.y, &preds).unwrap();
        println!(
            "{name}: fit {:.1} s, mae {:.1} kbps, std {:.1} kbps, mape {:.4}, oob_mae {:?}",
            fit_s,
            report.mae / 1e3,
            report.std_abs_err / 1e3,
            report.mape,
            forest.manifest.oob_mae.map(|v| (v / 1e3).round())
        );
    }
    println!("total {:.1} s", t0.elapsed().as_secs_f64());
}
