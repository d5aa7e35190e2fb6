//! Outcome and stealthiness metrics, the per-run log record, and cohort
//! aggregation.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Result, SimError};
use crate::safety::SafetyEvent;
use crate::sensor::Frame;

/// Terminal outcome of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    /// Forward collision: ground-truth gap reached zero.
    Hazard,
    /// No hazard and no safety intervention fired.
    Safe,
    /// No hazard, with at least one intervention along the way.
    Prevented,
}

/// One logged row. Rows are written at perception cadence (every fifth
/// control cycle), which is where every upstream state changes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogRow {
    pub t_step: u64,
    pub rd_true: f64,
    pub rs_true: f64,
    pub v_ego: f64,
    pub v_lead: f64,
    /// Camera-only prediction on the displayed (possibly attacked) frame.
    pub rd_pred: Option<f64>,
    pub rs_pred: Option<f64>,
    pub rd_fused: Option<f64>,
    pub rs_fused: Option<f64>,
    pub a_acc: f64,
    pub a_dispatched: f64,
    pub dispatch_source: String,
    pub attack_active: bool,
    pub ctx_hwt: Option<f64>,
    pub ctx_rs: Option<f64>,
    pub j: Option<f64>,
    pub max_patch: f64,
    pub mean_patch: f64,
}

/// Full log of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: String,
    pub attack: String,
    pub safety: String,
    pub driver_enabled: bool,
    pub driver_threshold: f64,
    pub defense: String,
    pub seed: u64,
    pub config_hash: u64,
    pub outcome: Outcome,
    pub collision_cycle: Option<u64>,
    pub cycles_run: u64,
    pub min_rd_true: f64,
    pub events: Vec<SafetyEvent>,
    pub driver_activations: u64,
    pub driver_perturbation_activations: u64,
    pub fcw_fired: bool,
    pub aeb_fired: bool,
    pub fb_engaged_cycle: Option<u64>,
    pub standstill_cycle: Option<u64>,
    /// Stealth metrics averaged over sampled attacked frames.
    pub stealth: Option<StealthStats>,
    pub max_patch_run: f64,
    pub mean_patch_typical: f64,
    pub attack_frames: u64,
    pub rows: Vec<LogRow>,
}

impl RunRecord {
    /// Whether any warning, braking phase, or driver reaction fired.
    /// Command clamping is bookkeeping, not an intervention.
    pub fn intervened(&self) -> bool {
        self.events
            .iter()
            .any(|e| e.kind != crate::safety::SafetyEventKind::Clamp)
            || self.driver_activations > 0
    }
}

/// Image-space stealth metrics between a benign and an adversarial frame.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StealthStats {
    pub l2: f64,
    pub linf: f64,
    pub rmse: f64,
    pub uiq: f64,
    pub samples: u64,
}

impl StealthStats {
    pub fn zero() -> Self {
        StealthStats {
            l2: 0.0,
            linf: 0.0,
            rmse: 0.0,
            uiq: 1.0,
            samples: 0,
        }
    }

    pub fn accumulate(&mut self, other: &StealthStats) {
        let n = self.samples as f64;
        let m = other.samples as f64;
        if m == 0.0 {
            return;
        }
        let total = n + m;
        self.l2 = (self.l2 * n + other.l2 * m) / total;
        self.rmse = (self.rmse * n + other.rmse * m) / total;
        self.uiq = (self.uiq * n + other.uiq * m) / total;
        self.linf = self.linf.max(other.linf);
        self.samples = total as u64;
    }
}

/// L2 / L-infinity on the normalized difference, RMSE over all pixels, and
/// the universal image quality index over sliding 8x8 windows (stride 4).
pub fn stealth_metrics(frame: &Frame, frame_adv: &Frame) -> Result<StealthStats> {
    if frame.h != frame_adv.h || frame.w != frame_adv.w {
        return Err(SimError::Shape(format!(
            "stealth metrics on {}x{} vs {}x{}",
            frame.h, frame.w, frame_adv.h, frame_adv.w
        )));
    }
    let n = frame.px.len() as f64;
    let mut sq = 0.0;
    let mut linf: f64 = 0.0;
    for (a, b) in frame.px.iter().zip(&frame_adv.px) {
        let d = b - a;
        sq += d * d;
        linf = linf.max(d.abs());
    }
    let l2 = sq.sqrt();
    let rmse = (sq / n).sqrt();
    let uiq = uiq_index(frame, frame_adv, 8, 4);
    Ok(StealthStats {
        l2,
        linf,
        rmse,
        uiq,
        samples: 1,
    })
}

/// Universal image quality index: mean over windows of
/// 4*cov*mx*my / ((vx+vy)(mx^2+my^2)), with the original degenerate-
/// denominator conventions.
pub fn uiq_index(x: &Frame, y: &Frame, win: usize, stride: usize) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    let h = x.h;
    let w = x.w;
    if h < win || w < win {
        return 1.0;
    }
    let mut r = 0;
    while r + win <= h {
        let mut c = 0;
        while c + win <= w {
            let n = (win * win) as f64;
            let (mut sx, mut sy) = (0.0, 0.0);
            for dr in 0..win {
                for dc in 0..win {
                    sx += x.get(r + dr, c + dc);
                    sy += y.get(r + dr, c + dc);
                }
            }
            let mx = sx / n;
            let my = sy / n;
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for dr in 0..win {
                for dc in 0..win {
                    let a = x.get(r + dr, c + dc) - mx;
                    let b = y.get(r + dr, c + dc) - my;
                    vx += a * a;
                    vy += b * b;
                    cov += a * b;
                }
            }
            vx /= n - 1.0;
            vy /= n - 1.0;
            cov /= n - 1.0;

            let mean_term = mx * mx + my * my;
            let var_term = vx + vy;
            let q = if mean_term == 0.0 {
                1.0
            } else if var_term == 0.0 {
                2.0 * mx * my / mean_term
            } else {
                4.0 * cov * mx * my / (var_term * mean_term)
            };
            total += q;
            count += 1;
            c += stride;
        }
        r += stride;
    }
    if count == 0 {
        1.0
    } else {
        total / count as f64
    }
}

/// Aggregated rates over one cohort cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryStats {
    pub runs: usize,
    pub success_rate: f64,
    pub intervention_activation_rate: f64,
    /// None unless computed from seed-paired safety-on/off runs.
    pub hazard_prevention_rate: Option<f64>,
    pub prevented_pairs: usize,
    pub hazardous_off_pairs: usize,
    pub stealth: Option<StealthStats>,
}

/// Success and activation rates over a cohort.
pub fn aggregate(runs: &[&RunRecord]) -> SummaryStats {
    let n = runs.len().max(1);
    let hazards = runs.iter().filter(|r| r.outcome == Outcome::Hazard).count();
    let activated = runs.iter().filter(|r| r.intervened()).count();
    let mut stealth: Option<StealthStats> = None;
    for r in runs {
        if let Some(s) = &r.stealth {
            stealth.get_or_insert_with(StealthStats::zero).accumulate(s);
        }
    }
    SummaryStats {
        runs: runs.len(),
        success_rate: hazards as f64 / n as f64,
        intervention_activation_rate: activated as f64 / n as f64,
        hazard_prevention_rate: None,
        prevented_pairs: 0,
        hazardous_off_pairs: 0,
        stealth,
    }
}

/// Prevention rate from seed-paired cohorts: of the seeds that are
/// hazardous with safety off, the fraction that are non-hazardous with
/// safety on.
pub fn prevention_rate(
    safety_off: &[&RunRecord],
    safety_on: &[&RunRecord],
) -> Result<(f64, usize, usize)> {
    let mut off: BTreeMap<(String, u64), Outcome> = BTreeMap::new();
    for r in safety_off {
        off.insert((r.scenario.clone(), r.seed), r.outcome);
    }
    let mut hazardous_off = 0usize;
    let mut prevented = 0usize;
    for r in safety_on {
        let key = (r.scenario.clone(), r.seed);
        match off.get(&key) {
            Some(Outcome::Hazard) => {
                hazardous_off += 1;
                if r.outcome != Outcome::Hazard {
                    prevented += 1;
                }
            }
            Some(_) => {}
            None => {
                return Err(SimError::Config(format!(
                    "prevention rate requested but seed pair missing for {key:?}"
                )))
            }
        }
    }
    let rate = if hazardous_off == 0 {
        0.0
    } else {
        prevented as f64 / hazardous_off as f64
    };
    Ok((rate, prevented, hazardous_off))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(scenario: &str, seed: u64, outcome: Outcome, events: bool) -> RunRecord {
        RunRecord {
            scenario: scenario.into(),
            attack: "ca-opt".into(),
            safety: "disabled".into(),
            driver_enabled: false,
            driver_threshold: 0.15,
            defense: "none".into(),
            seed,
            config_hash: 0,
            outcome,
            collision_cycle: None,
            cycles_run: 5000,
            min_rd_true: 10.0,
            events: if events {
                vec![SafetyEvent {
                    cycle: 1,
                    kind: crate::safety::SafetyEventKind::Fcw,
                }]
            } else {
                vec![]
            },
            driver_activations: 0,
            driver_perturbation_activations: 0,
            fcw_fired: events,
            aeb_fired: false,
            fb_engaged_cycle: None,
            standstill_cycle: None,
            stealth: None,
            max_patch_run: 0.0,
            mean_patch_typical: 0.0,
            attack_frames: 0,
            rows: vec![],
        }
    }

    #[test]
    fn identical_frames_identity_metrics() {
        let f = Frame::filled(64, 64, 0.4);
        let s = stealth_metrics(&f, &f).unwrap();
        assert_eq!(s.l2, 0.0);
        assert_eq!(s.linf, 0.0);
        assert_eq!(s.rmse, 0.0);
        assert!((s.uiq - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_pixel_linf() {
        let f = Frame::filled(32, 32, 0.4);
        let mut g = f.clone();
        g.set(10, 10, 0.4 + 0.015);
        let s = stealth_metrics(&f, &g).unwrap();
        assert!((s.linf - 0.015).abs() < 1e-12);
    }

    #[test]
    fn uiq_symmetric_and_unit_on_self() {
        let mut f = Frame::filled(32, 32, 0.4);
        for (i, v) in f.px.iter_mut().enumerate() {
            *v = 0.3 + 0.4 * ((i % 17) as f64 / 17.0);
        }
        let mut g = f.clone();
        for (i, v) in g.px.iter_mut().enumerate() {
            *v = (*v + 0.01 * ((i % 5) as f64 - 2.0) / 2.0).clamp(0.0, 1.0);
        }
        assert!((uiq_index(&f, &f, 8, 4) - 1.0).abs() < 1e-12);
        let a = uiq_index(&f, &g, 8, 4);
        let b = uiq_index(&g, &f, 8, 4);
        assert!((a - b).abs() < 1e-12);
        assert!(a < 1.0);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let f = Frame::filled(8, 8, 0.1);
        let g = Frame::filled(8, 9, 0.1);
        assert!(stealth_metrics(&f, &g).is_err());
    }

    #[test]
    fn success_rate_counting() {
        let runs: Vec<RunRecord> = (0..4)
            .map(|i| {
                record(
                    "SC1",
                    i,
                    if i < 3 { Outcome::Hazard } else { Outcome::Safe },
                    false,
                )
            })
            .collect();
        let refs: Vec<&RunRecord> = runs.iter().collect();
        let s = aggregate(&refs);
        assert!((s.success_rate - 0.75).abs() < 1e-12);
    }

    #[test]
    fn prevention_rate_pairing() {
        // 10 hazardous with safety off; 6 of them become non-hazardous with
        // safety on -> prevention 0.6.
        let off: Vec<RunRecord> = (0..10)
            .map(|i| record("SC1", i, Outcome::Hazard, false))
            .collect();
        let on: Vec<RunRecord> = (0..10)
            .map(|i| {
                record(
                    "SC1",
                    i,
                    if i < 6 { Outcome::Prevented } else { Outcome::Hazard },
                    true,
                )
            })
            .collect();
        let off_refs: Vec<&RunRecord> = off.iter().collect();
        let on_refs: Vec<&RunRecord> = on.iter().collect();
        let (rate, prevented, hazardous) = prevention_rate(&off_refs, &on_refs).unwrap();
        assert!((rate - 0.6).abs() < 1e-12);
        assert_eq!(prevented, 6);
        assert_eq!(hazardous, 10);
    }

    #[test]
    fn prevention_unpaired_is_error() {
        let off: Vec<RunRecord> = (0..2).map(|i| record("SC1", i, Outcome::Hazard, false)).collect();
        let on = [record("SC1", 5, Outcome::Safe, true)];
        let off_refs: Vec<&RunRecord> = off.iter().collect();
        let on_refs: Vec<&RunRecord> = on.iter().collect();
        assert!(prevention_rate(&off_refs, &on_refs).is_err());
    }

    #[test]
    fn prevention_invariant_under_reordering() {
        let off: Vec<RunRecord> = (0..6).map(|i| record("SC1", i, Outcome::Hazard, false)).collect();
        let on: Vec<RunRecord> = (0..6)
            .map(|i| {
                record(
                    "SC1",
                    i,
                    if i % 2 == 0 { Outcome::Prevented } else { Outcome::Hazard },
                    true,
                )
            })
            .collect();
        let mut off_refs: Vec<&RunRecord> = off.iter().collect();
        let mut on_refs: Vec<&RunRecord> = on.iter().collect();
        let (r1, _, _) = prevention_rate(&off_refs, &on_refs).unwrap();
        off_refs.reverse();
        on_refs.rotate_left(2);
        let (r2, _, _) = prevention_rate(&off_refs, &on_refs).unwrap();
        assert_eq!(r1, r2);
    }
}
