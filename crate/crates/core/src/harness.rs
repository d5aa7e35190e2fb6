//! Closed-loop run execution (100 Hz control, 20 Hz perception) and the
//! parallel experiment sweep with aggregation.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{AttackEngine, AttackKind, FrameContext};
use crate::config::{RunConfig, CONFIG_FORMAT_VERSION};
use crate::control::{constraint_check, plan_acceleration, CheckOutcome, CommandSource, PidState};
use crate::defense::{apply_defense, DefenseKind};
use crate::error::{Result, SimError};
use crate::fusion::{FusionState, R_CAM, R_RADAR};
use crate:: metrics::{
    aggregate, prevention_rate, stealth_metrics, LogRow, Outcome, RunRecord, StealthStats,
};
use crate::perception::{PerceptionModel, PerceptionOutput};
use crate::safety::{
    acc_suppressed, dispatch, AebsSetting, AebsState, DriverObservables, DriverState, SafetyEvent,
    SafetyEventKind,
};
use crate::sensor::{dbscan_reduce, radar_scan, render_frame, RenderParams};
use crate::world::{lead_profile, step_world, ScenarioConfig, CYCLES_PER_FRAME, DT};

/// Sub-stream seeds so each noise source has an independent deterministic
/// stream derived from the run seed.
fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(stream))
}

/// A finished run plus wall-clock accounting that stays out of the
/// deterministic record.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub record: RunRecord,
    /// Mean attack computation per active perception cycle (ms).
    pub attack_ms_mean: f64,
}

/// Executes one closed-loop run.
pub fn run_single(cfg: &RunConfig) -> Result<RunArtifacts> {
    let mut scenario: ScenarioConfig = cfg.scenario_config()?;
    if cfg.force_acc {
        scenario.cruise_only = false;
    }
    let mut world = scenario.initial_state();

    let model = PerceptionModel::calibrated(&RenderParams::default());
    let mut render_rng = stream_rng(cfg.seed, 1);
    let mut radar_rng = stream_rng(cfg.seed, 2);
    let mut defense_rng = stream_rng(cfg.seed, 3);
    let mut lead_rng = stream_rng(cfg.seed, 4);
    // A moving lead does not hold speed perfectly: small correlated wobble
    // around the profile (parked targets stay parked).
    let mut lead_wobble = 0.0f64;
    const WOBBLE_SD: f64 = 0.25;
    const WOBBLE_TAU: f64 = 2.0;

    let mut engine = AttackEngine::new(cfg.attack, cfg.optimizer.clone(), cfg.noise, cfg.seed);
    let mut pid = PidState::default();
    let mut fusion_acc = FusionState::default();
    let mut fusion_aebs = FusionState::default();
    let mut aebs = AebsState::new(cfg.aebs);
    let mut driver = DriverState::new(cfg.driver_enabled, cfg.driver_threshold);

    let mut displayed_prev: Option<PerceptionOutput> = None;
    let mut indep_prev: Option<PerceptionOutput> = None;
    let mut events: Vec<SafetyEvent> = Vec::new();
    let mut rows: Vec<LogRow> = Vec::new();
    let mut clamp_seen = false;
    let mut stealth_acc: Option<StealthStats> = None;
    let mut attack_ms_total = 0.0f64;
    let mut attack_ms_cycles = 0u64;
    let mut mean_patch_sum = 0.0;
    let mut mean_patch_frames = 0u64;
    let mut attacked_frames_seen = 0u64;
    let mut min_rd = world.rd_true;
    let mut collision_cycle = None;
    let mut standstill_cycle: Option<u64> = None;
    let mut prev_dispatched_a = 0.0f64;
    let mut prev_dispatched_src = CommandSource::Acc;
    let mut frame_index = 0u64;
    let mut last_row_data: Option<LogRow> = None;

    let total = scenario.total_cycles;
    let mut cycle = 0u64;
    while cycle < total {
        let t = cycle as f64 * DT;

        // ---- Perception cadence ------------------------------------------
        if cycle % CYCLES_PER_FRAME == 0 {
            let clean = render_frame(&world, &cfg.render, frame_index, &mut render_rng);
            let clean_pass = model.forward(&clean);

            let fctx = FrameContext {
                cycle,
                t,
                model: &model,
                render: &cfg.render,
                world: &world,
                clean_frame: &clean,
                clean_pass: &clean_pass,
                v_set: scenario.v_set,
            };
            let attack_started = Instant::now();
            let composed = engine.process_frame(&fctx);
            if engine.telemetry.active {
                attack_ms_total += attack_started.elapsed().as_secs_f64() * 1e3;
                attack_ms_cycles += 1;
            }

            // Stealth sampling against the displayed (pre-defense) frame.
            if let Some(adv) = &composed {
                attacked_frames_seen += 1;
                if cfg.stealth_every > 0 && attacked_frames_seen % cfg.stealth_every == 1 {
                    let s = stealth_metrics(&clean, adv)?;
                    stealth_acc
                        .get_or_insert_with(StealthStats::zero)
                        .accumulate(&s);
                }
                mean_patch_sum += engine.telemetry.mean_patch;
                mean_patch_frames += 1;
            }

            // Defense sits at the model input, after the attack composes.
            let mut model_input = composed.unwrap_or_else(|| clean.clone());
            if cfg.defense != DefenseKind::None {
                apply_defense(&cfg.defense, &mut model_input, &mut defense_rng);
            }

            let displayed_pass = model.forward(&model_input);
            let mut displayed_out =
                model.output_from_pass(&displayed_pass, frame_index, displayed_prev.as_ref());
            displayed_out = engine.output_override(displayed_out);
            engine.observe_delivered(t, displayed_out.as_ref());

            // Primary (cruise-control) fusion feed: camera, radar optional.
            if let Some(o) = displayed_out {
                fusion_acc.update(Some(o.rd), Some(o.rs), R_CAM);
            }
            if cfg.radar_for_acc {
                let ret = radar_scan(&world, &cfg.radar, &mut radar_rng);
                if let Some((r, v)) = dbscan_reduce(&ret, cfg.radar.eps, cfg.radar.min_pts) {
                    fusion_acc.update(Some(r), Some(v), R_RADAR);
                }
            }

            // Emergency-braking feed per its camera setting, always with radar.
            match cfg.aebs {
                AebsSetting::Independent => {
                    let own =
                        model.output_from_pass(&clean_pass, frame_index, indep_prev.as_ref());
                    if let Some(o) = own {
                        fusion_aebs.update(Some(o.rd), Some(o.rs), R_CAM);
                    }
                    indep_prev = own;
                    let ret = radar_scan(&world, &cfg.radar, &mut radar_rng);
                    if let Some((r, v)) = dbscan_reduce(&ret, cfg.radar.eps, cfg.radar.min_pts) {
                        fusion_aebs.update(Some(r), Some(v), R_RADAR);
                    }
                }
                AebsSetting::SharedCamera => {
                    if let Some(o) = displayed_out {
                        fusion_aebs.update(Some(o.rd), Some(o.rs), R_CAM);
                    }
                    let ret = radar_scan(&world, &cfg.radar, &mut radar_rng);
                    if let Some((r, v)) = dbscan_reduce(&ret, cfg.radar.eps, cfg.radar.min_pts) {
                        fusion_aebs.update(Some(r), Some(v), R_RADAR);
                    }
                }
                AebsSetting::Disabled => {}
            }

            displayed_prev = displayed_out;

            last_row_data = Some(LogRow {
                t_step: cycle,
                rd_true: world.rd_true,
                rs_true: world.rs_true(),
                v_ego: world.v_ego,
                v_lead: world.v_lead,
                rd_pred: displayed_out.map(|o| o.rd),
                rs_pred: displayed_out.map(|o| o.rs),
                rd_fused: fusion_acc.estimate().map(|e| e.0),
                rs_fused: fusion_acc.estimate().map(|e| e.1),
                a_acc: 0.0,
                a_dispatched: 0.0,
                dispatch_source: String::new(),
                attack_active: engine.telemetry.active
                    || (engine.is_active() && !cfg.attack.is_patch() && cfg.attack != AttackKind::None),
                ctx_hwt: finite_opt(engine.telemetry.ctx_hwt),
                ctx_rs: finite_opt(engine.telemetry.ctx_rs),
                j: finite_opt(engine.telemetry.j),
                max_patch: engine.telemetry.max_patch,
                mean_patch: engine.telemetry.mean_patch,
            });
            frame_index += 1;
        }

        // ---- Control cadence ---------------------------------------------
        fusion_acc.predict(DT);
        fusion_aebs.predict(DT);

        let lead_for_planner = if scenario.cruise_only {
            None
        } else {
            fusion_acc.estimate()
        };
        let desired =
            plan_acceleration(&cfg.controller, world.v_ego, scenario.v_set, lead_for_planner);
        let mut acc_cmd = pid.track(&cfg.controller, desired, world.a_ego_actual, DT, cycle);
        if let Some(ovr) = engine.command_override(cycle, world.v_ego, scenario.v_set) {
            acc_cmd = ovr;
        }
        let (acc_cmd, check) = constraint_check(acc_cmd);
        if check == CheckOutcome::Clamped && !clamp_seen {
            clamp_seen = true;
            events.push(SafetyEvent {
                cycle,
                kind: SafetyEventKind::Clamp,
            });
        }

        let aeb_cmd = aebs.step(cycle, fusion_aebs.estimate(), world.v_ego, &mut events);

        let displayed_est = fusion_acc.estimate();
        let obs = DriverObservables {
            fcw_raised: events
                .iter()
                .rev()
                .take_while(|e| e.cycle + 2 >= cycle)
                .any(|e| e.kind == SafetyEventKind::Fcw),
            a_dispatched: prev_dispatched_a,
            dispatched_source: prev_dispatched_src,
            v_ego: world.v_ego,
            v_set: scenario.v_set,
            mean_patch: if engine.is_active() {
                engine.telemetry.mean_patch
            } else {
                0.0
            },
            displayed_ttc: displayed_est.and_then(|(rd, rs)| (rs > 0.05).then(|| rd / rs)),
            t_fcw: crate::safety::aebs_thresholds(world.v_ego).t_fcw,
        };
        let driver_cmd = driver.step(cycle, &obs, &mut events);

        let mut candidates: Vec<crate::control::ControlCommand> = vec![acc_cmd];
        if let Some(c) = driver_cmd {
            candidates.push(c);
        }
        if let Some(c) = aeb_cmd {
            candidates.push(c);
        }
        let chosen = dispatch(&candidates, cycle);
        if acc_suppressed(&chosen) {
            pid.reset();
        }
        prev_dispatched_a = chosen.a_cmd;
        prev_dispatched_src = chosen.source;

        if let Some(row) = &mut last_row_data {
            if row.t_step == cycle {
                row.a_acc = acc_cmd.a_cmd;
                row.a_dispatched = chosen.a_cmd;
                row.dispatch_source = source_name(chosen.source).into();
                if cfg.log_rows {
                    rows.push(row.clone());
                }
            }
        }

        let lead_base = lead_profile(&scenario, t + DT);
        let lead_speed = if lead_base > 1.0 {
            lead_wobble += -lead_wobble * DT / WOBBLE_TAU
                + WOBBLE_SD * (2.0 * DT / WOBBLE_TAU).sqrt()
                    * crate::sensor::gaussian(&mut lead_rng);
            (lead_base + lead_wobble).max(0.0)
        } else {
            lead_base
        };
        world = step_world(&world, &chosen, lead_speed, DT)?;
        min_rd = min_rd.min(world.rd_true);
        if standstill_cycle.is_none() && world.v_ego <= 1e-6 {
            standstill_cycle = Some(world.t_step);
        }
        cycle += 1;
        if world.collided {
            collision_cycle = Some(world.t_step);
            break;
        }
    }

    let intervened = events
        .iter()
        .any(|e| e.kind != SafetyEventKind::Clamp)
        || driver.activations > 0;
    let outcome = if collision_cycle.is_some() {
        Outcome::Hazard
    } else if intervened {
        Outcome::Prevented
    } else {
        Outcome::Safe
    };

    let record = RunRecord {
        scenario: cfg.scenario.name(),
        attack: cfg.attack.name().into(),
        safety: match cfg.aebs {
            AebsSetting::Independent => "independent".into(),
            AebsSetting::SharedCamera => "shared".into(),
            AebsSetting::Disabled => "disabled".into(),
        },
        driver_enabled: cfg.driver_enabled,
        driver_threshold: cfg.driver_threshold,
        defense: cfg.defense.name(),
        seed: cfg.seed,
        config_hash: cfg.config_hash,
        outcome,
        collision_cycle,
        cycles_run: cycle,
        min_rd_true: min_rd,
        events,
        driver_activations: driver.activations,
        driver_perturbation_activations: driver.perturbation_activations,
        fcw_fired: aebs.fcw_ever,
        aeb_fired: aebs.brake_ever,
        fb_engaged_cycle: aebs.fb_engaged_cycle,
        standstill_cycle,
        stealth: stealth_acc,
        max_patch_run: engine.max_patch_run,
        mean_patch_typical: if mean_patch_frames > 0 {
            mean_patch_sum / mean_patch_frames as f64
        } else {
            0.0
        },
        attack_frames: engine.active_frames,
        rows,
    };
    Ok(RunArtifacts {
        record,
        attack_ms_mean: if attack_ms_cycles > 0 {
            attack_ms_total / attack_ms_cycles as f64
        } else {
            0.0
        },
    })
}

fn finite_opt(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn source_name(src: CommandSource) -> &'static str {
    match src {
        CommandSource::Acc => "ACC",
        CommandSource::Driver => "DRIVER",
        CommandSource::Aeb => "AEB",
    }
}

/// Writes one run record as a JSONL file: a header line, one line per
/// logged row, and a summary line.
pub fn write_run_jsonl(record: &RunRecord, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let header = serde_json::json!({
        "kind": "header",
        "format_version": CONFIG_FORMAT_VERSION,
        "scenario": record.scenario,
        "attack": record.attack,
        "safety": record.safety,
        "driver_enabled": record.driver_enabled,
        "driver_threshold": record.driver_threshold,
        "defense": record.defense,
        "seed": record.seed,
        "config_hash": record.config_hash,
    });
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for row in &record.rows {
        writeln!(out, "{}", serde_json::to_string(row)?)?;
    }
    let mut summary = record.clone();
    summary.rows = Vec::new();
    let tail = serde_json::json!({ "kind": "summary", "record": summary });
    writeln!(out, "{}", serde_json::to_string(&tail)?)?;
    Ok(())
}

impl From<serde_json::Error> for SimError {
    fn from(e: serde_json::Error) -> Self {
        SimError::Other(format!("json: {e}"))
    }
}

/// One aggregated row of the sweep summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub attack: String,
    pub safety: String,
    pub driver: String,
    pub defense: String,
    pub runs: usize,
    pub success_rate: f64,
    pub activation_rate: f64,
    pub prevention_rate: Option<f64>,
    pub prevented_pairs: usize,
    pub hazardous_off_pairs: usize,
    pub l2: Option<f64>,
    pub linf: Option<f64>,
    pub rmse: Option<f64>,
    pub uiq: Option<f64>,
    pub benign_hazard: bool,
}

#[derive(Debug)]
pub struct SweepOutput {
    pub rows: Vec<SummaryRow>,
    pub records: Vec<RunRecord>,
    pub failures: Vec<String>,
    pub mean_attack_ms: f64,
}

/// Runs every cell of the expanded matrix in parallel (runs are fully
/// independent), writes per-run logs and the summary CSV, and aggregates.
/// A panicking run is recorded as a failure without poisoning the sweep.
pub fn run_sweep(configs: &[RunConfig], out_dir: Option<&Path>) -> Result<SweepOutput> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let results: Vec<(String, std::result::Result<RunArtifacts, String>)> = configs
        .par_iter()
        .map(|cfg| {
            let label = format!("{} seed {}", cfg.cell_label(), cfg.seed);
            let run = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run_single(cfg)));
            let flat = match run {
                Ok(Ok(a)) => Ok(a),
                Ok(Err(e)) => Err(e.to_string()),
                Err(p) => Err(match p.downcast_ref::<String>() {
                    Some(s) => format!("panic: {s}"),
                    None => "panic".into(),
                }),
            };
            (label, flat)
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    let mut ms_sum = 0.0;
    let mut ms_n = 0usize;
    for (cfg, (label, result)) in configs.iter().zip(results) {
        match result {
            Ok(art) => {
                if art.attack_ms_mean > 0.0 {
                    ms_sum += art.attack_ms_mean;
                    ms_n += 1;
                }
                if let Some(dir) = out_dir {
                    write_run_jsonl(&art.record, &dir.join(cfg.run_file_name()))?;
                }
                records.push(art.record);
            }
            Err(e) => failures.push(format!("{label}: {e}")),
        }
    }

    let rows = summarize(&records);
    if let Some(dir) = out_dir {
        write_summary_csv(&rows, &dir.join("summary.csv"))?;
        let mean_ms = if ms_n > 0 { ms_sum / ms_n as f64 } else { 0.0 };
        std::fs::write(
            dir.join("timings.txt"),
            format!("mean_attack_ms_per_perception_cycle,{mean_ms:.4}\n"),
        )?;
    }
    Ok(SweepOutput {
        rows,
        records,
        failures,
        mean_attack_ms: if ms_n > 0 { ms_sum / ms_n as f64 } else { 0.0 },
    })
}

/// Groups records into (scenario, attack, safety, driver, defense) cells,
/// computing paired prevention rates against the matching no-safety cell
/// when one exists.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    use std::collections::BTreeMap;
    let driver_label = |r: &RunRecord| {
        if r.driver_enabled {
            format!("driver{:.3}", r.driver_threshold)
        } else {
            "nodriver".into()
        }
    };
    let mut cells: BTreeMap<(String, String, String, String, String), Vec<&RunRecord>> =
        BTreeMap::new();
    for r in records {
        cells
            .entry((
                r.scenario.clone(),
                r.attack.clone(),
                r.safety.clone(),
                driver_label(r),
                r.defense.clone(),
            ))
            .or_default()
            .push(r);
    }
    let mut rows = Vec::new();
    for ((scenario, attack, safety, driver, defense), runs) in &cells {
        let stats = aggregate(runs);
        // Paired prevention against the same cell with all safety off.
        let baseline_key = (
            scenario.clone(),
            attack.clone(),
            "disabled".to_string(),
            "nodriver".to_string(),
            defense.clone(),
        );
        let is_baseline = *safety == "disabled" && driver == "nodriver";
        let prevention = if !is_baseline {
            cells
                .get(&baseline_key)
                .and_then(|off| prevention_rate(off, runs).ok())
        } else {
            None
        };
        let benign_hazard = attack == "none" && stats.success_rate > 0.0;
        rows.push(SummaryRow {
            scenario: scenario.clone(),
            attack: attack.clone(),
            safety: safety.clone(),
            driver: driver.clone(),
            defense: defense.clone(),
            runs: stats.runs,
            success_rate: stats.success_rate,
            activation_rate: stats.intervention_activation_rate,
            prevention_rate: prevention.map(|p| p.0),
            prevented_pairs: prevention.map(|p| p.1).unwrap_or(0),
            hazardous_off_pairs: prevention.map(|p| p.2).unwrap_or(0),
            l2: stats.stealth.map(|s| s.l2),
            linf: stats.stealth.map(|s| s.linf),
            rmse: stats.stealth.map(|s| s.rmse),
            uiq: stats.stealth.map(|s| s.uiq),
            benign_hazard,
        });
    }
    rows
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        out,
        "scenario,attack,safety,driver,defense,runs,success_rate,activation_rate,\
         prevention_rate,prevented_pairs,hazardous_off_pairs,l2,linf,rmse,uiq,benign_hazard"
    )?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{:.6},{:.6},{},{},{},{},{},{},{},{}",
            r.scenario,
            r.attack,
            r.safety,
            r.driver,
            r.defense,
            r.runs,
            r.success_rate,
            r.activation_rate,
            fmt(r.prevention_rate),
            r.prevented_pairs,
            r.hazardous_off_pairs,
            fmt(r.l2),
            fmt(r.linf),
            fmt(r.rmse),
            fmt(r.uiq),
            r.benign_hazard,
        )?;
    }
    Ok(())
}
