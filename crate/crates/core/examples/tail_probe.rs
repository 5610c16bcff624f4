// Scratch probe: dump the deepest-goodput windows with their context.
use todqos::simkit::{run, ScenarioConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mult: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000.0);
    let level: u32 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(130);
    let sigma: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2.0);
    let cfg = ScenarioConfig {
        n_ntod: level,
        seed: 1001,
        duration: 600.0,
        ntod_load_multiplier: mult,
        shadowing_sigma_db: sigma,
        ..Default::default()
    };
    let log = run(&cfg).unwrap();
    let mut idx: Vec<usize> = (0..log.windows.len()).collect();
    idx.sort_by(|&a, &b| log.windows[a].tod_goodput_bps.total_cmp(&log.windows[b].tod_goodput_bps));
    println!("worst 20 of {} windows (level {level}, m {mult}, sigma {sigma}):", idx.len());
    println!("t_s goodput_kbps sinr_db serving v_serving pos share_est_kbps");
    for &i in idx.iter().take(20) {
        let w = &log.windows[i];
        let v = w.counts[w.serving_cell as usize];
        let share = 100 / v.max(1); // PRBs if all attached were backlogged
        let cap = share as f64 * 4.8 * 0.9 * 200_000.0 / 1e3;
        println!(
            "{:7.1} {:9.1} {:7.2} c{} v{} ({:5.1},{:5.1}) {:8.0}",
            w.t_s,
            w.tod_goodput_bps / 1e3,
            w.tod_sinr_db,
            w.serving_cell,
            v,
            w.pos_x_m,
            w.pos_y_m,
            cap
        );
    }
    let sub: usize = log.windows.iter().filter(|w| w.tod_goodput_bps < 5e5).count();
    println!("sub-500k windows: {sub}");
}
