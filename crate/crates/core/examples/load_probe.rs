// Scratch probe: sweep load levels x multipliers, print goodput band stats.
use todqos::simkit::{run, ScenarioConfig};

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mult: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(40.0);
    let duration: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(120.0);
    let sigma: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(4.0);
    let levels = [0u32, 5, 15, 30, 40, 50, 70, 80, 100, 130, 160];
    println!("multiplier={mult} duration={duration}");
    println!("level median mean min p05 p95 runtime_s");
    for &n in &levels {
        let t0 = std::time::Instant::now();
        let mut all: Vec<f64> = Vec::new();
        for seed in 1..=3u64 {
            let cfg = ScenarioConfig {
                n_ntod: n,
                seed,
                duration,
                ntod_load_multiplier: mult,
                shadowing_sigma_db: sigma,
                ..Default::default()
            };
            let log = run(&cfg).unwrap();
            all.extend(log.windows.iter().map(|w| w.tod_goodput_bps));
        }
        all.sort_by(|a, b| a.total_cmp(b));
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        println!(
            "{n:5} {:8.3} {:8.3} {:8.3} {:8.3} {:8.3} {:6.2}",
            quantile(&all, 0.5) / 1e6,
            mean / 1e6,
            all[0] / 1e6,
            quantile(&all, 0.05) / 1e6,
            quantile(&all, 0.95) / 1e6,
            t0.elapsed().as_secs_f64()
        );
    }
}
