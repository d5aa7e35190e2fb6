//! Emergency-braking stack (forward-collision warning plus phased braking),
//! the driver-reaction simulator, and the priority command dispatcher.

use serde::{Deserialize, Serialize};

use crate::control::{CommandSource, ControlCommand};
use crate::world::DT;

/// Deceleration available to the emergency brake actuator (m/s^2). Brake
/// phases apply 90 / 95 / 100 % of this. It deliberately exceeds the
/// cruise-command envelope: the brake actuator is not the cruise planner.
pub const FULL_BRAKE_DECEL: f64 = 8.0;

/// Which camera feed the braking stack consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AebsSetting {
    /// Own, uncompromised camera fused with radar.
    Independent,
    /// Shares the (possibly attacked) primary camera, fused with radar.
    SharedCamera,
    Disabled,
}

impl AebsSetting {
    pub fn parse(s: &str) -> crate::Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "independent" => Ok(AebsSetting::Independent),
            "shared" => Ok(AebsSetting::SharedCamera),
            "disabled" => Ok(AebsSetting::Disabled),
            other => Err(crate::SimError::Config(format!(
                "unknown safety setting `{other}` (expected independent|shared|disabled)"
            ))),
        }
    }
}

/// Braking-phase thresholds (computed per cycle from ego speed).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AebsThresholds {
    pub t_fcw: f64,
    pub t_pb1: f64,
    pub t_pb2: f64,
    pub t_fb: f64,
}

/// Reaction-time constant used in the warning threshold (s).
pub const T_REACT: f64 = 2.5;

pub fn aebs_thresholds(v_ego: f64) -> AebsThresholds {
    AebsThresholds {
        t_fcw: T_REACT + v_ego / 4.5,
        t_pb1: v_ego / 2.8,
        t_pb2: v_ego / 5.8,
        t_fb: v_ego / 9.8,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BrakePhase {
    None,
    Pb1,
    Pb2,
    Fb,
}

impl BrakePhase {
    pub fn decel(self) -> f64 {
        match self {
            BrakePhase::None => 0.0,
            BrakePhase::Pb1 => -0.90 * FULL_BRAKE_DECEL,
            BrakePhase::Pb2 => -0.95 * FULL_BRAKE_DECEL,
            BrakePhase::Fb => -FULL_BRAKE_DECEL,
        }
    }

    fn next(self) -> Self {
        match self {
            BrakePhase::None => BrakePhase::Pb1,
            BrakePhase::Pb1 => BrakePhase::Pb2,
            _ => BrakePhase::Fb,
        }
    }
}

/// Safety events recorded in the run log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SafetyEventKind {
    Fcw,
    Pb1,
    Pb2,
    Fb,
    DriverBrake,
    DriverRelease,
    Clamp,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SafetyEvent {
    pub cycle: u64,
    pub kind: SafetyEventKind,
}

/// Phase-controlled emergency braking. A triggered phase escalates on a
/// timer while the approach continues, so a closing encounter walks up
/// through partial braking to the full brake rather than riding a single
/// partial phase; everything releases once the gap stops closing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AebsState {
    pub setting: AebsSetting,
    /// Cycles before the stack arms after run start (track confirmation).
    pub arming_cycles: u64,
    /// Cycles a partial phase holds before escalating.
    pub phase_hold_cycles: u64,
    phase: BrakePhase,
    phase_since: u64,
    fcw_active: bool,
    pub fcw_ever: bool,
    pub brake_ever: bool,
    pub fb_engaged_cycle: Option<u64>,
}

impl AebsState {
    pub fn new(setting: AebsSetting) -> Self {
        AebsState {
            setting,
            arming_cycles: 300,
            phase_hold_cycles: 35,
            phase: BrakePhase::None,
            phase_since: 0,
            fcw_active: false,
            fcw_ever: false,
            brake_ever: false,
            fb_engaged_cycle: None,
        }
    }

    pub fn phase(&self) -> BrakePhase {
        self.phase
    }

    /// One cycle of the braking stack against the fused (rd, rs) of its feed.
    pub fn step(
        &mut self,
        cycle: u64,
        feed: Option<(f64, f64)>,
        v_ego: f64,
        events: &mut Vec<SafetyEvent>,
    ) -> Option<ControlCommand> {
        if self.setting == AebsSetting::Disabled || cycle < self.arming_cycles {
            return None;
        }
        let (rd, rs) = feed?;
        let closing = rs > 1e-6 && v_ego > 0.1;
        if !closing {
            // Gap no longer closing (or standstill): release everything.
            self.phase = BrakePhase::None;
            self.fcw_active = false;
            return None;
        }
        let ttc = rd / rs;
        let th = aebs_thresholds(v_ego);

        if ttc < th.t_fcw {
            if !self.fcw_active {
                events.push(SafetyEvent {
                    cycle,
                    kind: SafetyEventKind::Fcw,
                });
                self.fcw_active = true;
                self.fcw_ever = true;
            }
        } else {
            self.fcw_active = false;
        }

        // Threshold-satisfied phase this cycle (most severe applies).
        let satisfied = if ttc < th.t_fb {
            BrakePhase::Fb
        } else if ttc < th.t_pb2 {
            BrakePhase::Pb2
        } else if ttc < th.t_pb1 {
            BrakePhase::Pb1
        } else {
            BrakePhase::None
        };

        let mut new_phase = self.phase.max(satisfied);
        // Timed escalation: partial braking that has not resolved the
        // approach steps up to the next phase.
        if self.phase > BrakePhase::None
            && self.phase < BrakePhase::Fb
            && cycle.saturating_sub(self.phase_since) >= self.phase_hold_cycles
        {
            new_phase = new_phase.max(self.phase.next());
        }

        if new_phase > self.phase {
            self.phase = new_phase;
            self.phase_since = cycle;
            let kind = match new_phase {
                BrakePhase::Pb1 => SafetyEventKind::Pb1,
                BrakePhase::Pb2 => SafetyEventKind::Pb2,
                BrakePhase::Fb => SafetyEventKind::Fb,
                BrakePhase::None => unreachable!(),
            };
            if new_phase == BrakePhase::Fb && self.fb_engaged_cycle.is_none() {
                self.fb_engaged_cycle = Some(cycle);
            }
            events.push(SafetyEvent { cycle, kind });
            self.brake_ever = true;
        }

        (self.phase > BrakePhase::None).then(|| ControlCommand {
            a_cmd: self.phase.decel(),
            source: CommandSource::Aeb,
            issue_cycle: cycle,
        })
    }
}

/// What the simulated driver can observe in one cycle.
#[derive(Debug, Clone, Copy, Default)]
pub struct DriverObservables {
    pub fcw_raised: bool,
    /// Dispatched longitudinal command this cycle.
    pub a_dispatched: f64,
    pub dispatched_source: CommandSource,
    pub v_ego: f64,
    pub v_set: f64,
    /// Mean absolute patch value over the displayed patch area.
    pub mean_patch: f64,
    /// Time-to-collision and warning threshold as shown by the primary
    /// (possibly compromised) pipeline; None when no lead is displayed.
    pub displayed_ttc: Option<f64>,
    pub t_fcw: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DriverReaction {
    EmergencyBrake,
    StopBrake,
}

/// Alert-driver model: notices anomalies instantly, acts 2.5 s later.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriverState {
    pub enabled: bool,
    /// Noticeability threshold on the mean displayed perturbation.
    pub patch_threshold: f64,
    /// Reaction delay in control cycles (2.5 s).
    pub delay_cycles: u64,
    /// Brake ramp duration in cycles (0.5 s).
    pub ramp_cycles: u64,
    pending: Option<(DriverReaction, u64)>,
    active: Option<(DriverReaction, u64)>,
    pub activations: u64,
    pub perturbation_activations: u64,
}

impl Default for DriverState {
    fn default() -> Self {
        DriverState {
            enabled: true,
            patch_threshold: 0.15,
            delay_cycles: 250,
            ramp_cycles: 50,
            pending: None,
            active: None,
            activations: 0,
            perturbation_activations: 0,
        }
    }
}

impl DriverState {
    pub fn new(enabled: bool, patch_threshold: f64) -> Self {
        DriverState {
            enabled,
            patch_threshold,
            ..DriverState::default()
        }
    }

    pub fn intervened(&self) -> bool {
        self.activations > 0
    }

    /// One cycle: trigger checks, the delayed reaction, and the brake ramp.
    pub fn step(
        &mut self,
        cycle: u64,
        obs: &DriverObservables,
        events: &mut Vec<SafetyEvent>,
    ) -> Option<ControlCommand> {
        if !self.enabled {
            return None;
        }

        if self.pending.is_none() && self.active.is_none() {
            // Activation conditions, checked every cycle.
            let alert = obs.fcw_raised;
            let unsafe_speed = obs.v_ego > 1.1 * obs.v_set;
            let perturbation = obs.mean_patch > self.patch_threshold;
            // Sustained acceleration while the display shows an imminent
            // collision; brief tracking jitter does not count.
            let unexpected_accel = obs.a_dispatched > 0.5
                && obs
                    .displayed_ttc
                    .map(|ttc| ttc < 0.5 * obs.t_fcw)
                    .unwrap_or(false);
            // Hard braking with no displayed reason to brake.
            let phantom_brake = obs.a_dispatched <= -0.9 * FULL_BRAKE_DECEL
                && obs
                    .displayed_ttc
                    .map(|ttc| ttc > 1.5 * obs.t_fcw)
                    .unwrap_or(true);

            if alert || unsafe_speed || perturbation || unexpected_accel {
                self.pending = Some((DriverReaction::EmergencyBrake, cycle + self.delay_cycles));
                self.activations += 1;
                if perturbation && !(alert || unsafe_speed || unexpected_accel) {
                    self.perturbation_activations += 1;
                }
            } else if phantom_brake {
                self.pending = Some((DriverReaction::StopBrake, cycle + self.delay_cycles));
                self.activations += 1;
            }
        }

        if let Some((reaction, due)) = self.pending {
            if cycle >= due {
                self.pending = None;
                self.active = Some((reaction, cycle));
                events.push(SafetyEvent {
                    cycle,
                    kind: match reaction {
                        DriverReaction::EmergencyBrake => SafetyEventKind::DriverBrake,
                        DriverReaction::StopBrake => SafetyEventKind::DriverRelease,
                    },
                });
            }
        }

        match self.active {
            Some((DriverReaction::EmergencyBrake, since)) => {
                // Linear ramp to full deceleration, then hold.
                let frac =
                    ((cycle - since) as f64 / self.ramp_cycles as f64).clamp(0.0, 1.0);
                Some(ControlCommand {
                    a_cmd: -3.5 * frac,
                    source: CommandSource::Driver,
                    issue_cycle: cycle,
                })
            }
            Some((DriverReaction::StopBrake, _)) => Some(ControlCommand {
                a_cmd: 0.0,
                source: CommandSource::Driver,
                issue_cycle: cycle,
            }),
            None => None,
        }
    }
}

/// Picks the command that reaches the plant: emergency brake over driver
/// over cruise control; zero-acceleration coast if nothing is offered.
pub fn dispatch(candidates: &[ControlCommand], cycle: u64) -> ControlCommand {
    candidates
        .iter()
        .max_by_key(|c| c.source)
        .copied()
        .unwrap_or(ControlCommand {
            a_cmd: 0.0,
            source: CommandSource::Acc,
            issue_cycle: cycle,
        })
}

/// True while a source other than cruise control is in charge; the cruise
/// controller disengages (and holds its integrator) during that time.
pub fn acc_suppressed(dispatched: &ControlCommand) -> bool {
    dispatched.source != CommandSource::Acc
}

/// Convenience: exact event-latency assertion helper used in tests and the
/// acceptance suite.
pub fn driver_delay_cycles() -> u64 {
    (T_REACT / DT).round() as u64
}
