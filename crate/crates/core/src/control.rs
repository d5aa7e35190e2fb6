//! Longitudinal planner and PI tracker producing acceleration commands,
//! plus the firmware-style constraint checker that clamps them.

use serde::{Deserialize, Serialize};

/// Hard acceleration envelope enforced on cruise-control commands.
pub const A_MIN: f64 = -3.5;
pub const A_MAX: f64 = 2.0;

/// Who issued a longitudinal command. Priority rises left to right.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CommandSource {
    #[default]
    Acc,
    Driver,
    Aeb,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ControlCommand {
    pub a_cmd: f64,
    pub source: CommandSource,
    pub issue_cycle: u64,
}

/// Gap/cruise planner and PI gains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControllerConfig {
    /// Desired headway time (s).
    pub tau_hw: f64,
    /// Standstill gap (m).
    pub d0: f64,
    /// Gap gain.
    pub k1: f64,
    /// Closing-speed gain.
    pub k2: f64,
    /// Cruise gain.
    pub kv: f64,
    pub pid_kp: f64,
    pub pid_ki: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            tau_hw: 1.6,
            d0: 4.0,
            k1: 0.1,
            // Stronger closing-speed response than the gap term; bleeds off
            // approach speed fast enough that a fresh encounter does not
            // look collision-imminent to the emergency-braking stack.
            k2: 0.8,
            kv: 0.5,
            pid_kp: 1.0,
            pid_ki: 0.1,
        }
    }
}

/// Desired acceleration: the more conservative of the gap law and the
/// cruise law; cruise-only when no lead is tracked.
pub fn plan_acceleration(
    cfg: &ControllerConfig,
    v_ego: f64,
    v_set: f64,
    lead: Option<(f64, f64)>,
) -> f64 {
    let a_cruise = cfg.kv * (v_set - v_ego);
    match lead {
        None => a_cruise,
        Some((rd, rs)) => {
            let a_gap = cfg.k1 * (rd - (cfg.d0 + cfg.tau_hw * v_ego)) - cfg.k2 * rs;
            a_gap.min(a_cruise)
        }
    }
}

/// PI tracker on the planned acceleration, with integrator clamping.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PidState {
    pub integral: f64,
}

impl PidState {
    pub fn track(
        &mut self,
        cfg: &ControllerConfig,
        desired: f64,
        a_actual: f64,
        dt: f64,
        cycle: u64,
    ) -> ControlCommand {
        let err = desired - a_actual;
        let raw = desired + cfg.pid_kp * err + self.integral;
        // Anti-windup: freeze the integrator while the output is saturated
        // in the direction of the error.
        let saturated_hi = raw >= A_MAX && err > 0.0;
        let saturated_lo = raw <= A_MIN && err < 0.0;
        if !saturated_hi && !saturated_lo {
            self.integral += cfg.pid_ki * err * dt;
            self.integral = self.integral.clamp(-1.0, 1.0);
        }
        ControlCommand {
            a_cmd: desired + cfg.pid_kp * err + self.integral,
            source: CommandSource::Acc,
            issue_cycle: cycle,
        }
    }

    pub fn reset(&mut self) {
        self.integral = 0.0;
    }
}

/// Outcome of the constraint check, for event logging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckOutcome {
    Passed,
    Clamped,
    Dropped,
}

/// Clamp cruise-control commands to the safety envelope. Driver and
/// emergency-brake commands bypass this by dispatcher rule.
pub fn constraint_check(mut cmd: ControlCommand) -> (ControlCommand, CheckOutcome) {
    if cmd.source != CommandSource::Acc {
        return (cmd, CheckOutcome::Passed);
    }
    if !cmd.a_cmd.is_finite() {
        cmd.a_cmd = 0.0;
        return (cmd, CheckOutcome::Dropped);
    }
    if cmd.a_cmd > A_MAX {
        cmd.a_cmd = A_MAX;
        (cmd, CheckOutcome::Clamped)
    } else if cmd.a_cmd < A_MIN {
        cmd.a_cmd = A_MIN;
        (cmd, CheckOutcome::Clamped)
    } else {
        (cmd, CheckOutcome::Passed)
    }
}
