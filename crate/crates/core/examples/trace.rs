//! Dumps the trajectory of a single run for debugging.

use accsim_core::attack::AttackKind;
use accsim_core::config::RunConfig;
use accsim_core::harness::run_single;
use accsim_core::safety::AebsSetting;
use accsim_core::world::ScenarioId;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scenario = ScenarioId::parse(args.get(1).map(|s| s.as_str()).unwrap_or("SC2")).unwrap();
    let attack = AttackKind::parse(args.get(2).map(|s| s.as_str()).unwrap_or("ca-opt")).unwrap();
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0);
    let aebs = args
        .get(4)
        .map(|s| AebsSetting::parse(s).unwrap())
        .unwrap_or(AebsSetting::Disabled);
    let driver = args.get(5).map(|s| s == "driver").unwrap_or(false);
    let thr: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(0.15);
    let defense = args
        .get(6)
        .map(|s| accsim_core::defense::DefenseKind::parse(s).unwrap())
        .unwrap_or(accsim_core::defense::DefenseKind::None);

    let mut cfg = RunConfig::new(scenario, seed);
    cfg.attack = attack;
    cfg.aebs = aebs;
    cfg.driver_enabled = driver;
    cfg.driver_threshold = thr;
    cfg.defense = defense;
    cfg.force_acc = args.get(7).map(|s| s == "acc").unwrap_or(false);
    cfg.stealth_every = 5;
    let art = run_single(&cfg).unwrap();
    let r = &art.record;
    println!(
        "outcome {:?}  cycles {}  min_rd {:.2}  fcw {}  aeb {}  driver_acts {}",
        r.outcome, r.cycles_run, r.min_rd_true, r.fcw_fired, r.aeb_fired, r.driver_activations
    );
    println!(
        "fb_engaged {:?}  standstill {:?}  stop_delay_s {:?}",
        r.fb_engaged_cycle,
        r.standstill_cycle,
        r.fb_engaged_cycle
            .zip(r.standstill_cycle)
            .map(|(f, s)| (s as f64 - f as f64) * 0.01)
    );
    for row in r.rows.iter().step_by(20) {
        println!(
            "t={:6.2} rd={:7.2} v_e={:5.2} v_l={:5.2} rd^={} rs^={} fus=({},{}) a_acc={:+5.2} a_disp={:+5.2} {:6} act={} hwt={} ctx_rs={}",
            row.t_step as f64 * 0.01,
            row.rd_true,
            row.v_ego,
            row.v_lead,
            row.rd_pred.map(|v| format!("{v:7.1}")).unwrap_or("   none".into()),
            row.rs_pred.map(|v| format!("{v:+6.1}")).unwrap_or("  none".into()),
            row.rd_fused.map(|v| format!("{v:7.1}")).unwrap_or("   none".into()),
            row.rs_fused.map(|v| format!("{v:+5.1}")).unwrap_or(" none".into()),
            row.a_acc,
            row.a_dispatched,
            row.dispatch_source,
            row.attack_active as u8,
            row.ctx_hwt.map(|v| format!("{v:5.2}")).unwrap_or(" none".into()),
            row.ctx_rs.map(|v| format!("{v:+5.2}")).unwrap_or(" none".into()),
        );
    }
    if let Some(st) = &r.stealth {
        println!(
            "stealth: l2 {:.4} linf {:.4} rmse {:.6} uiq {:.5} samples {}  max_patch_run {:.4} mean_patch {:.4}",
            st.l2, st.linf, st.rmse, st.uiq, st.samples, r.max_patch_run, r.mean_patch_typical
        );
    }
    for e in r.events.iter().take(30) {
        println!("event {:?} at cycle {}", e.kind, e.cycle);
    }
}
