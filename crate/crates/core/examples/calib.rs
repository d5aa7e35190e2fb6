//! Prints the benign distance curve and a perturbation-authority probe for
//! the current perception constants. Development aid for calibration.

use accsim_core::perception::PerceptionModel;
use accsim_core::sensor::{render_frame, RenderParams};
use accsim_core::world::WorldState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut render = RenderParams::default();
    render.sigma_img = 0.0;
    let model = PerceptionModel::calibrated(&render);
    println!("calibrated f_px = {:.3}", model.f_px);
    println!("rd_true  rd_pred  rel_err   w_app       m     lead");
    for rd in [
        8.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0,
        120.0, 150.0,
    ] {
        let world = WorldState::new(rd, 25.0, 20.0);
        let frame = render_frame(&world, &render, 0, &mut ChaCha8Rng::seed_from_u64(1));
        let pass = model.forward(&frame);
        println!(
            "{rd:7.1} {:8.2} {:+8.3} {:8.3} {:8.5} {}",
            pass.rd_raw,
            (pass.rd_raw - rd) / rd,
            pass.w_app,
            pass.m,
            pass.lead
        );
    }


    // Column-level diagnostic at 60 m.
    println!("\ncolumns at rd=60:");
    {
        let world = WorldState::new(60.0, 25.0, 20.0);
        let frame = render_frame(&world, &render, 0, &mut ChaCha8Rng::seed_from_u64(1));
        let pass = model.forward(&frame);
        let m_gate = pass.m.max(model.m_gate_floor);
        for j in 118..139 {
            let c = pass.col_mass[j];
            let z = (c / m_gate - 0.5) / model.tau_c;
            let g = accsim_core::perception::logistic(z);
            if c > 1e-6 {
                println!("col {j:3}  c={c:.5}  ratio={:.3}  gate={g:.3}", c / m_gate);
            }
        }
        println!("m={:.5} w_app={:.3}", pass.m, pass.w_app);
    }

    // Long slow-closing probe, one line per cycle.
    {
        use accsim_core::attack::{AttackEngine, AttackKind, FrameContext, OptimizerConfig};
        use accsim_core::fusion::NoiseModel;
        println!("\nslow-closing probe (4.5 m/s from 45 m, with render noise):");
        let mut noisy = render.clone();
        noisy.sigma_img = 0.005;
        let _ = &noisy;
        let mut engine = AttackEngine::new(
            AttackKind::CaOpt,
            OptimizerConfig::default(),
            NoiseModel::default(),
            7,
        );
        for k in 0..170u64 {
            let rd = 45.0 - 0.225 * k as f64;
            if rd < 5.0 { break; }
            let world = WorldState::new(rd, 26.8, 22.3);
            let frame = render_frame(&world, &noisy, k, &mut ChaCha8Rng::seed_from_u64(k));
            let pass = model.forward(&frame);
            let fctx = FrameContext {
                cycle: k * 5,
                t: k as f64 * 0.05,
                model: &model,
                render: &noisy,
                world: &world,
                clean_frame: &frame,
                clean_pass: &pass,
                v_set: 26.8,
            };
            let composed = engine.process_frame(&fctx);
            let (rd_seen, w_seen) = match &composed {
                Some(adv) => { let p = model.forward(adv); (p.rd_raw, p.w_app) }
                None => (pass.rd_raw, pass.w_app),
            };
            engine.observe_delivered(k as f64 * 0.05, Some(&accsim_core::perception::PerceptionOutput {
                rd: rd_seen, rs: 0.0, frame_index: k,
            }));
            if k % 8 == 0 {
                let (npos, nneg, maxpos) = engine
                    .patch_stats()
                    .unwrap_or((0, 0, 0.0));
                println!(
                    "k={k:3} rd={rd:5.1} rd^={rd_seen:7.1} W={w_seen:6.3} Wclean={:6.3} mean={:.4} +cells={npos} -cells={nneg} maxpos={maxpos:.3}",
                    pass.w_app,
                    engine.telemetry.mean_patch,
                );
            }
        }
    }
    // Authority probe with the real machinery: run the optimizer engine
    // against a static scene for a few perception cycles and watch the
    // delivered prediction climb.
    use accsim_core::attack::{AttackEngine, AttackKind, FrameContext, OptimizerConfig};
    use accsim_core::fusion::NoiseModel;
    println!("\nengine probe (closing scene, real IG mask + PGD steps):");
    for rd in [20.0, 30.0, 40.0, 50.0, 60.0] {
        let mut engine = AttackEngine::new(
            AttackKind::CaOpt,
            OptimizerConfig::default(),
            NoiseModel::default(),
            7,
        );
        let mut delivered = Vec::new();
        for k in 0..20u64 {
            // Ego closes at 5 m/s so the clean chain sees a closing gap.
            let world = WorldState::new(rd - 0.25 * k as f64, 26.8, 21.8);
            let frame = render_frame(&world, &render, k, &mut ChaCha8Rng::seed_from_u64(k));
            let pass = model.forward(&frame);
            let fctx = FrameContext {
                cycle: k * 5,
                t: k as f64 * 0.05,
                model: &model,
                render: &render,
                world: &world,
                clean_frame: &frame,
                clean_pass: &pass,
                v_set: 26.8,
            };
            let composed = engine.process_frame(&fctx);
            let rd_seen = match &composed {
                Some(adv) => model.forward(adv).rd_raw,
                None => pass.rd_raw,
            };
            engine.observe_delivered(k as f64 * 0.05, Some(&accsim_core::perception::PerceptionOutput {
                rd: rd_seen,
                rs: 0.0,
                frame_index: k,
            }));
            delivered.push(rd_seen);
        }
        println!(
            "rd={rd:5.1}  start={:7.2}  cycle5={:7.2}  cycle10={:7.2}  cycle19={:7.2}  kappa_now={:4.2}  mean|patch|={:.4}",
            delivered[0],
            delivered[5],
            delivered[10],
            delivered[19],
            delivered[19] / (rd - 0.25 * 19.0),
            engine.telemetry.mean_patch,
        );
    }
}

#[allow(dead_code)]
fn unused() {}
