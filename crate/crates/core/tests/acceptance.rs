//! Acceptance suite: every criterion runs at its stated tolerance and
//! prints one pass/fail line. Run with
//! `cargo test -p accsim-core --test acceptance -- --nocapture`.
//!
//! Several criteria share cohorts; those are built once and cached.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use accsim_core::attack::AttackKind;
use accsim_core::config::RunConfig;
use accsim_core::defense::DefenseKind;
use accsim_core::harness::{run_single, RunArtifacts};
use accsim_core::metrics::Outcome;
use accsim_core::perception::{integrated_gradients, PerceptionModel};
use accsim_core::safety::AebsSetting;
use accsim_core::sensor::{render_frame, RenderParams};
use accsim_core::world::{ScenarioId, WorldState};

const SCENARIOS: [ScenarioId; 4] = [
    ScenarioId::Sc1,
    ScenarioId::Sc2,
    ScenarioId::Sc3,
    ScenarioId::Sc4,
];

fn verdict(name: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPTANCE {name}: {} - {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "{name} failed: {detail}");
}

fn run_cells(cells: Vec<RunConfig>) -> Vec<RunArtifacts> {
    cells
        .par_iter()
        .map(|cfg| run_single(cfg).expect("run failed"))
        .collect()
}

fn cohort(
    attacks: &[AttackKind],
    aebs: AebsSetting,
    driver: bool,
    threshold: f64,
    seeds: u64,
) -> Vec<RunArtifacts> {
    let mut cells = Vec::new();
    for attack in attacks {
        for sc in SCENARIOS {
            for seed in 0..seeds {
                let mut cfg = RunConfig::new(sc, seed);
                cfg.attack = *attack;
                cfg.aebs = aebs;
                cfg.driver_enabled = driver;
                cfg.driver_threshold = threshold;
                cfg.log_rows = true;
                cells.push(cfg);
            }
        }
    }
    run_cells(cells)
}

fn success_rate(runs: &[&RunArtifacts]) -> f64 {
    let hazards = runs
        .iter()
        .filter(|a| a.record.outcome == Outcome::Hazard)
        .count();
    hazards as f64 / runs.len().max(1) as f64
}

fn by_attack<'a>(runs: &'a [RunArtifacts], kind: AttackKind) -> Vec<&'a RunArtifacts> {
    runs.iter()
        .filter(|a| a.record.attack == kind.name())
        .collect()
}

/// A3/A7/A9/A10 cohort: four patch attacks, no safety, 40 seeds.
fn a3_cohort() -> &'static Vec<RunArtifacts> {
    static CELL: OnceLock<Vec<RunArtifacts>> = OnceLock::new();
    CELL.get_or_init(|| {
        cohort(
            &[
                AttackKind::CaOpt,
                AttackKind::CaApgd,
                AttackKind::CaRandom,
                AttackKind::RandomOpt,
            ],
            AebsSetting::Disabled,
            false,
            0.15,
            40,
        )
    })
}

/// A4/A8/A9 cohort: safety-intervention table, driver at default threshold.
fn a4_cohort() -> &'static Vec<RunArtifacts> {
    static CELL: OnceLock<Vec<RunArtifacts>> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut all = Vec::new();
        for aebs in [
            AebsSetting::Independent,
            AebsSetting::SharedCamera,
            AebsSetting::Disabled,
        ] {
            all.extend(cohort(
                &[AttackKind::CaOpt, AttackKind::CaApgd, AttackKind::CaRandom],
                aebs,
                true,
                0.15,
                10,
            ));
        }
        all
    })
}

#[test]
fn a1_gradient_oracle() {
    let t0 = std::time::Instant::now();
    let render = RenderParams {
        sigma_img: 0.0,
        ..RenderParams::default()
    };
    let model = PerceptionModel::calibrated(&render);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for k in 0..20 {
        let rd = 12.0 + 4.4 * k as f64;
        let world = WorldState::new(rd, 25.0, 20.0);
        let frame = render_frame(&world, &render, k as u64, &mut rng.clone());
        let pass = model.forward(&frame);
        let grad = model.gradient_raw(&frame, &pass);
        let gmax = grad.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        let body = render.project(rd).pixel_box(frame.h, frame.w);
        for _ in 0..100 {
            let r = body.y0.saturating_sub(2) + rng.gen_range(0..body.h + 4);
            let c = body.x0.saturating_sub(2) + rng.gen_range(0..body.w + 4);
            if r >= frame.h || c >= frame.w {
                continue;
            }
            let idx = r * frame.w + c;
            let h = 1e-4;
            let mut fp = frame.clone();
            fp.px[idx] += h;
            let mut fm = frame.clone();
            fm.px[idx] -= h;
            let num = (model.forward(&fp).rd_raw - model.forward(&fm).rd_raw) / (2.0 * h);
            let denom = grad[idx].abs().max(num.abs()).max(1e-4 * gmax);
            worst = worst.max((grad[idx] - num).abs() / denom);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        "A1",
        worst <= 1e-4 && secs < 60.0,
        &format!("max relative gradient error {worst:.3e} over 20 frames x 100 pixels in {secs:.1} s"),
    );
}

#[test]
fn a2_ig_completeness() {
    // Completeness checked against a baseline that keeps the whole path in
    // the gate's responsive band: the box filled at the body peak level.
    let render = RenderParams {
        sigma_img: 0.0,
        ..RenderParams::default()
    };
    let model = PerceptionModel::calibrated(&render);
    let mut worst: f64 = 0.0;
    for k in 0..10 {
        let rd = 18.0 + 8.0 * k as f64;
        let world = WorldState::new(rd, 25.0, 20.0);
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let frame = render_frame(&world, &render, k as u64, &mut rng);
        let bbox = render.project(rd).pixel_box(frame.h, frame.w);
        let mut baseline = frame.clone();
        for r in bbox.y0..(bbox.y0 + bbox.h).min(frame.h) {
            for c in bbox.x0..(bbox.x0 + bbox.w).min(frame.w) {
                baseline.set(r, c, render.body_peak);
            }
        }
        let ig = integrated_gradients(&model, &frame, &baseline, 32);
        let total: f64 = ig.iter().sum();
        let f_x = model.forward(&frame).rd_raw;
        let f_x0 = model.forward(&baseline).rd_raw;
        let gap = (total - (f_x - f_x0)).abs();
        let rel = gap / (f_x - f_x0).abs().max(1e-9);
        worst = worst.max(rel);
    }
    verdict(
        "A2",
        worst <= 0.01,
        &format!("worst completeness gap {:.3}% of F(x)-F(x0) at M=32 over 10 frames", 100.0 * worst),
    );
}

#[test]
fn a3_no_safety_effectiveness_ordering() {
    let t0 = std::time::Instant::now();
    let runs = a3_cohort();
    let opt = success_rate(&by_attack(runs, AttackKind::CaOpt));
    let apgd = success_rate(&by_attack(runs, AttackKind::CaApgd));
    let random = success_rate(&by_attack(runs, AttackKind::CaRandom));
    let ropt = success_rate(&by_attack(runs, AttackKind::RandomOpt));
    let mins = t0.elapsed().as_secs_f64() / 60.0;
    let pass = opt >= 0.90 && random <= 0.10 && ropt <= opt / 3.0 && apgd > random && apgd < opt;
    verdict(
        "A3",
        pass,
        &format!(
            "success: ca-opt {:.1}% ca-apgd {:.1}% ca-random {:.1}% random-opt {:.1}% ({mins:.1} min)",
            100.0 * opt,
            100.0 * apgd,
            100.0 * random,
            100.0 * ropt
        ),
    );
}

#[test]
fn a4_safety_intervention_table() {
    let runs = a4_cohort();
    let sub = |kind: AttackKind, aebs: &str| -> Vec<&RunArtifacts> {
        runs.iter()
            .filter(|a| a.record.attack == kind.name() && a.record.safety == aebs)
            .collect()
    };
    let mut pass = true;
    let mut notes = Vec::new();
    for aebs in ["independent", "shared", "disabled"] {
        for kind in [AttackKind::CaRandom, AttackKind::CaApgd] {
            let rate = success_rate(&sub(kind, aebs));
            if rate > 0.0 {
                pass = false;
            }
            notes.push(format!("{}@{aebs} {:.1}%", kind.name(), 100.0 * rate));
        }
    }
    let opt_disabled = sub(AttackKind::CaOpt, "disabled");
    let opt_disabled_rate = success_rate(&opt_disabled);
    let perturb_acts: u64 = opt_disabled
        .iter()
        .map(|a| a.record.driver_perturbation_activations)
        .sum();
    let opt_shared = success_rate(&sub(AttackKind::CaOpt, "shared"));
    let opt_indep = success_rate(&sub(AttackKind::CaOpt, "independent"));
    if opt_disabled_rate < 0.90 || perturb_acts != 0 || opt_shared <= opt_indep {
        pass = false;
    }
    verdict(
        "A4",
        pass,
        &format!(
            "ca-opt: disabled {:.1}% (perturb-activations {perturb_acts}), shared {:.1}% > independent {:.1}%; baselines zero: [{}]",
            100.0 * opt_disabled_rate,
            100.0 * opt_shared,
            100.0 * opt_indep,
            notes.join(", ")
        ),
    );
}

#[test]
fn a5_driver_sensitivity_sweep() {
    // Full sweep for the report, assertions at the 0.005 and 0.015 levels.
    let thresholds = [0.15, 0.10, 0.05, 0.02, 0.015, 0.01, 0.005];
    let mut lines = Vec::new();
    let mut pass = true;
    let mut mean_patch_all = Vec::new();
    for &th in &thresholds {
        let runs = cohort(&[AttackKind::CaOpt], AebsSetting::Disabled, true, th, 10);
        let activation = runs.iter().filter(|a| a.record.driver_activations > 0).count() as f64
            / runs.len() as f64;
        let success = success_rate(&runs.iter().collect::<Vec<_>>());
        for a in &runs {
            if a.record.mean_patch_typical > 0.0 {
                mean_patch_all.push(a.record.mean_patch_typical);
            }
        }
        lines.push(format!(
            "thr {th}: activation {:.1}% success {:.1}%",
            100.0 * activation,
            100.0 * success
        ));
        if (th - 0.005f64).abs() < 1e-12 && !(activation >= 0.80 && success <= 0.20) {
            pass = false;
        }
        if (th - 0.015f64).abs() < 1e-12 && !(activation == 0.0 && success >= 0.90) {
            pass = false;
        }
    }
    mean_patch_all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = mean_patch_all
        .get(mean_patch_all.len() / 2)
        .copied()
        .unwrap_or(0.0);
    let lo = mean_patch_all.first().copied().unwrap_or(0.0);
    let hi = mean_patch_all.last().copied().unwrap_or(0.0);
    verdict(
        "A5",
        pass,
        &format!(
            "{}; realized mean|patch| median {med:.4} range [{lo:.4}, {hi:.4}], crossover between 0.005 and 0.015",
            lines.join("; ")
        ),
    );
}

#[test]
fn a6_aebs_calibration() {
    let mut cells = Vec::new();
    for n in 1..=5u8 {
        for seed in 0..20 {
            let mut cfg = RunConfig::new(ScenarioId::Un152(n), seed);
            cfg.aebs = AebsSetting::Independent;
            cfg.driver_enabled = true;
            cfg.log_rows = false;
            cells.push(cfg);
        }
    }
    let runs = run_cells(cells);
    let collisions = runs
        .iter()
        .filter(|a| a.record.outcome == Outcome::Hazard)
        .count();
    let activated = runs
        .iter()
        .filter(|a| a.record.fcw_fired && a.record.aeb_fired)
        .count();
    let mut stops = Vec::new();
    for a in &runs {
        if let (Some(fb), Some(stop)) = (a.record.fb_engaged_cycle, a.record.standstill_cycle) {
            if stop >= fb {
                stops.push((stop - fb) as f64 * 0.01);
            }
        }
    }
    let mean_stop = stops.iter().sum::<f64>() / stops.len().max(1) as f64;
    // Full-brake stop time is an average figure: the mean over runs that
    // braked to standstill must fall within 1.68 +- 1.0 s.
    let pass = collisions == 0
        && activated == runs.len()
        && !stops.is_empty()
        && (mean_stop - 1.68).abs() <= 1.0;
    verdict(
        "A6",
        pass,
        &format!(
            "{} runs: {collisions} collisions, warning+brake {activated}/{}, mean full-brake stop {mean_stop:.2} s over {} stopping runs",
            runs.len(),
            runs.len(),
            stops.len()
        ),
    );
}

#[test]
fn a7_stealth_bounds() {
    let runs = a3_cohort();
    let opt = by_attack(runs, AttackKind::CaOpt);
    let sigma = accsim_core::fusion::NoiseModel::default().sigma;
    let mut max_patch: f64 = 0.0;
    let mut uiq_sum = 0.0;
    let mut uiq_n = 0usize;
    for a in &opt {
        max_patch = max_patch.max(a.record.max_patch_run);
        if let Some(s) = &a.record.stealth {
            uiq_sum += s.uiq;
            uiq_n += 1;
        }
    }
    // Support containment is asserted inside the engine on every frame; a
    // violation panics the run, so reaching here means it held.
    let uiq = uiq_sum / uiq_n.max(1) as f64;
    let pass = max_patch <= sigma + 1e-12 && uiq >= 0.99 && uiq_n > 0;
    verdict(
        "A7",
        pass,
        &format!("max|patch| {max_patch:.4} <= sigma {sigma}; mean UIQ {uiq:.4} over {uiq_n} runs"),
    );
}

#[test]
fn a8_output_attack_contrast() {
    let runs = a4_cohort();
    let opt_shared: Vec<&RunArtifacts> = runs
        .iter()
        .filter(|a| a.record.attack == "ca-opt" && a.record.safety == "shared")
        .collect();
    let opt_shared_rate = success_rate(&opt_shared);

    let strat = cohort(
        &[AttackKind::StrategicOut],
        AebsSetting::SharedCamera,
        true,
        0.15,
        10,
    );
    let strat_rate = success_rate(&strat.iter().collect::<Vec<_>>());

    let maxout = cohort(&[AttackKind::MaxOut], AebsSetting::SharedCamera, true, 0.15, 10);
    let maxout_driver = maxout
        .iter()
        .filter(|a| a.record.driver_activations > 0)
        .count() as f64
        / maxout.len() as f64;

    let pass = strat_rate <= 0.5 * opt_shared_rate && maxout_driver >= 0.90;
    verdict(
        "A8",
        pass,
        &format!(
            "strategicout@shared {:.1}% <= half of ca-opt@shared {:.1}%; maxout driver intervention {:.1}%",
            100.0 * strat_rate,
            100.0 * opt_shared_rate,
            100.0 * maxout_driver
        ),
    );
}

#[test]
fn a9_context_trigger_soundness() {
    // Exhaustive re-evaluation of the trigger rule on every logged cycle of
    // the shared cohorts: active implies (hwt <= 2.5 and rs > 0) on the
    // trigger's own logged inputs, and critical context inside the window
    // implies active.
    let mut checked = 0u64;
    let mut violations = 0u64;
    for a in a3_cohort().iter().chain(a4_cohort().iter()) {
        let patch_attack = matches!(
            a.record.attack.as_str(),
            "ca-opt" | "ca-apgd" | "ca-random"
        );
        if !patch_attack {
            continue;
        }
        for row in &a.record.rows {
            checked += 1;
            if row.attack_active {
                let sound = match (row.ctx_hwt, row.ctx_rs) {
                    (Some(hwt), Some(rs)) => hwt <= 2.5 && rs > 0.0,
                    _ => false,
                };
                if !sound {
                    violations += 1;
                }
            } else if let (Some(hwt), Some(rs)) = (row.ctx_hwt, row.ctx_rs) {
                // Context-aware attacks must be active whenever their own
                // trigger inputs satisfy the rule.
                if hwt <= 2.5 && rs > 0.0 {
                    violations += 1;
                }
            }
        }
    }
    verdict(
        "A9",
        violations == 0 && checked > 0,
        &format!("{violations} violations over {checked} logged cycles"),
    );
}

#[test]
fn a10_real_time_budget() {
    let runs = a3_cohort();
    let mut ms = Vec::new();
    for a in runs {
        if a.attack_ms_mean > 0.0 {
            ms.push(a.attack_ms_mean);
        }
    }
    let mean = ms.iter().sum::<f64>() / ms.len().max(1) as f64;
    verdict(
        "A10",
        mean <= 50.0 && !ms.is_empty(),
        &format!("mean attack computation {mean:.2} ms per perception cycle over {} runs", ms.len()),
    );
}

#[test]
fn a11_defense_trends() {
    // Benign sweeps over bit-depth and gaussian noise must expose at least
    // one parameter point where the benign loop itself becomes hazardous;
    // median smoothing must leave the optimized attack effective.
    let benign_scenarios: Vec<(ScenarioId, bool)> = vec![
        (ScenarioId::Sc1, false),
        (ScenarioId::Sc3, false),
        (ScenarioId::Un152(3), true), // cruise approach to a stationary target
    ];
    let defense_grid: Vec<DefenseKind> = vec![
        DefenseKind::BitDepth { bits: 2 },
        DefenseKind::BitDepth { bits: 3 },
        DefenseKind::BitDepth { bits: 4 },
        DefenseKind::BitDepth { bits: 5 },
        DefenseKind::GaussianNoise { sigma: 0.01 },
        DefenseKind::GaussianNoise { sigma: 0.02 },
        DefenseKind::GaussianNoise { sigma: 0.05 },
        DefenseKind::GaussianNoise { sigma: 0.1 },
        DefenseKind::GaussianNoise { sigma: 0.2 },
    ];
    let mut cells = Vec::new();
    for d in &defense_grid {
        for (sc, force_acc) in &benign_scenarios {
            for seed in 0..3 {
                let mut cfg = RunConfig::new(*sc, seed);
                cfg.defense = *d;
                cfg.force_acc = *force_acc;
                cfg.log_rows = false;
                cells.push(cfg);
            }
        }
    }
    let benign_runs = run_cells(cells);
    let hazard_point = |prefix: &str| -> Option<String> {
        benign_runs
            .iter()
            .find(|a| a.record.outcome == Outcome::Hazard && a.record.defense.starts_with(prefix))
            .map(|a| format!("{} on {}", a.record.defense, a.record.scenario))
    };
    let bit_depth_point = hazard_point("bit_depth");
    let gaussian_point = hazard_point("gaussian");

    // Median smoothing leaves the optimized attack effective.
    let mut cells = Vec::new();
    for sc in SCENARIOS {
        for seed in 0..5 {
            let mut cfg = RunConfig::new(sc, seed);
            cfg.attack = AttackKind::CaOpt;
            cfg.defense = DefenseKind::Median { k: 3 };
            cfg.log_rows = false;
            cells.push(cfg);
        }
    }
    let median_runs = run_cells(cells);
    let median_success = success_rate(&median_runs.iter().collect::<Vec<_>>());

    let pass = bit_depth_point.is_some() && gaussian_point.is_some() && median_success >= 0.90;
    verdict(
        "A11",
        pass,
        &format!(
            "benign-hazard points: bit-depth {:?}, gaussian {:?}; ca-opt success under median:3 {:.1}%",
            bit_depth_point,
            gaussian_point,
            100.0 * median_success
        ),
    );
}

#[test]
fn a12_determinism() {
    let mut cfg = RunConfig::new(ScenarioId::Sc1, 11);
    cfg.attack = AttackKind::CaOpt;
    cfg.aebs = AebsSetting::SharedCamera;
    cfg.driver_enabled = true;
    let dir = std::env::temp_dir().join(format!("accsim-determinism-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let mut bodies = Vec::new();
    for pass in 0..2 {
        let art = run_single(&cfg).unwrap();
        let path = dir.join(format!("pass{pass}.jsonl"));
        accsim_core::harness::write_run_jsonl(&art.record, &path).unwrap();
        bodies.push(std::fs::read(&path).unwrap());
    }
    std::fs::remove_dir_all(&dir).ok();
    verdict(
        "A12",
        bodies[0] == bodies[1],
        &format!("two runs of the same cell produced identical {} byte logs", bodies[0].len()),
    );
}
