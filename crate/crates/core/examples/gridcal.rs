//! Parameter grid search for the perception gate: reports the best-f
//! max relative error over the working range plus an authority probe.

use accsim_core::perception::PerceptionModel;
use accsim_core::sensor::{render_frame, RenderParams};
use accsim_core::world::WorldState;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let ranges: Vec<f64> = vec![
        8.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0, 45.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0,
    ];
    let mut best: Vec<(f64, String)> = Vec::new();
    for theta_v in [0.82, 0.84, 0.86] {
        for tau in [0.04, 0.05, 0.06] {
            for tau_c in [0.04, 0.05, 0.065] {
                for body_mid in [0.70, 0.72] {
                    let mut render = RenderParams::default();
                    render.sigma_img = 0.0;
                    render.body_mid = body_mid;
                    let mut model = PerceptionModel::default();
                    model.theta_v = theta_v;
                    model.tau = tau;
                    model.tau_c = tau_c;
                    model.tau_m = 0.0015;
                    // Collect W(rd), fit f by log-mean, report max rel err.
                    let mut ws = Vec::new();
                    let mut ok = true;
                    for &rd in &ranges {
                        let world = WorldState::new(rd, 25.0, 20.0);
                        let f = render_frame(&world, &render, 0, &mut ChaCha8Rng::seed_from_u64(1));
                        let pass = model.forward(&f);
                        if !pass.lead && rd <= 100.0 {
                            ok = false;
                        }
                        ws.push(pass.w_app);
                    }
                    if !ok {
                        continue;
                    }
                    let logs: Vec<f64> = ranges
                        .iter()
                        .zip(&ws)
                        .map(|(rd, w)| (rd * w).ln())
                        .collect();
                    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
                    let maxerr = logs
                        .iter()
                        .map(|l| (l - mean).abs())
                        .fold(0.0f64, f64::max);
                    // Authority: carve everything but the peak column pair
                    // at -sigma and +sigma on the peak, at rd = 30.
                    let world = WorldState::new(30.0, 25.0, 20.0);
                    let frame =
                        render_frame(&world, &render, 0, &mut ChaCha8Rng::seed_from_u64(1));
                    let pass = model.forward(&frame);
                    let body = render.project(30.0);
                    let bbox = body.pixel_box(frame.h, frame.w);
                    let mut adv = frame.clone();
                    let cx = body.cx.round() as usize;
                    for c in bbox.x0..bbox.x0 + bbox.w {
                        let delta = if c + 1 >= cx && c <= cx + 1 { 0.05 } else { -0.05 };
                        for r in bbox.y0..bbox.y0 + bbox.h {
                            let v = adv.get(r, c);
                            adv.set(r, c, (v + delta).clamp(0.0, 1.0));
                        }
                    }
                    let kappa = model.forward(&adv).rd_raw / pass.rd_raw;
                    best.push((
                        (maxerr.exp() - 1.0) * 100.0,
                        format!(
                            "theta={theta_v} tau={tau} tau_c={tau_c} mid={body_mid}: err {:.1}% kappa {:.1}",
                            (maxerr.exp() - 1.0) * 100.0,
                            kappa
                        ),
                    ));
                }
            }
        }
    }
    best.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for (_, line) in best.iter().take(14) {
        println!("{line}");
    }
}
