//! Small-scale cohort dry run: prints success/intervention rates per attack
//! under a chosen safety setting. Development aid while tuning the loop.

use accsim_core::attack::AttackKind;
use accsim_core::config::RunConfig;
use accsim_core::harness::run_single;
use accsim_core::metrics::Outcome;
use accsim_core::safety::AebsSetting;
use accsim_core::world::ScenarioId;
use rayon::prelude::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let aebs = match args.get(2).map(|s| s.as_str()) {
        Some("independent") => AebsSetting::Independent,
        Some("shared") => AebsSetting::SharedCamera,
        _ => AebsSetting::Disabled,
    };
    let driver = args.get(3).map(|s| s == "driver").unwrap_or(false);

    let attacks = [
        AttackKind::None,
        AttackKind::CaOpt,
        AttackKind::CaApgd,
        AttackKind::CaRandom,
        AttackKind::RandomOpt,
        AttackKind::MaxOut,
        AttackKind::StrategicOut,
    ];
    let scenarios = [
        ScenarioId::Sc1,
        ScenarioId::Sc2,
        ScenarioId::Sc3,
        ScenarioId::Sc4,
    ];
    for attack in attacks {
        let cells: Vec<(ScenarioId, u64)> = scenarios
            .iter()
            .flat_map(|s| (0..seeds).map(move |k| (*s, k)))
            .collect();
        let t0 = std::time::Instant::now();
        let results: Vec<_> = cells
            .par_iter()
            .map(|(sc, seed)| {
                let mut cfg = RunConfig::new(*sc, *seed);
                cfg.attack = attack;
                cfg.aebs = aebs;
                cfg.driver_enabled = driver;
                cfg.log_rows = false;
                cfg.stealth_every = 0;
                run_single(&cfg).expect("run failed")
            })
            .collect();
        let n = results.len();
        let hazards = results
            .iter()
            .filter(|a| a.record.outcome == Outcome::Hazard)
            .count();
        let interventions = results.iter().filter(|a| a.record.intervened()).count();
        let driver_acts: u64 = results.iter().map(|a| a.record.driver_activations).sum();
        let fcw = results.iter().filter(|a| a.record.fcw_fired).count();
        let min_rd = results
            .iter()
            .map(|a| a.record.min_rd_true)
            .fold(f64::INFINITY, f64::min);
        let mean_patch: f64 = results
            .iter()
            .map(|a| a.record.mean_patch_typical)
            .sum::<f64>()
            / n as f64;
        let ms: f64 = results.iter().map(|a| a.attack_ms_mean).sum::<f64>() / n as f64;
        let per_sc: Vec<String> = scenarios
            .iter()
            .map(|sc| {
                let subset: Vec<_> = cells
                    .iter()
                    .zip(&results)
                    .filter(|((s, _), _)| s == sc)
                    .map(|(_, a)| a)
                    .collect();
                let h = subset
                    .iter()
                    .filter(|a| a.record.outcome == Outcome::Hazard)
                    .count();
                format!("{}:{}/{}", sc.name(), h, subset.len())
            })
            .collect();
        println!(
            "{:13} success {:5.1}%  intervened {:5.1}%  fcw {:2}  driver_acts {:3}  min_rd {:6.2}  mean|patch| {:.4}  attack_ms {:.2}  ({:.1}s)",
            attack.name(),
            100.0 * hazards as f64 / n as f64,
            100.0 * interventions as f64 / n as f64,
            fcw,
            driver_acts,
            min_rd,
            mean_patch,
            ms,
            t0.elapsed().as_secs_f64(),
        );
        println!("              per-scenario hazards: {}", per_sc.join(" "));
    }
}
