//! Ground-truth longitudinal kinematics for the Ego and Lead vehicles,
//! scenario definitions, and the fixed-rate simulation clock.
//!
//! One control cycle is 10 ms (100 Hz). All internal units are SI; scenario
//! files may give speeds in mph or km/h and are converted at parse time.

use serde::{Deserialize, Serialize};

use crate::control::ControlCommand;
use crate::error::{Result, SimError};

/// Control cycle length in seconds (100 Hz).
pub const DT: f64 = 0.01;
/// Control cycles per perception frame (20 Hz camera).
pub const CYCLES_PER_FRAME: u64 = 5;
/// Bumper-to-bumper correction: distance between vehicle reference points
/// that is occupied by the vehicles themselves.
pub const VEHICLE_LENGTH_OFFSET: f64 = 4.5;
/// First-order actuator lag (s).
pub const TAU_ACTUATOR: f64 = 0.2;

pub const MPH_TO_MS: f64 = 0.44704;
pub const KMH_TO_MS: f64 = 1.0 / 3.6;

pub fn mph(v: f64) -> f64 {
    v * MPH_TO_MS
}

pub fn kmh(v: f64) -> f64 {
    v * KMH_TO_MS
}

/// Ground-truth state of the two-vehicle corridor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WorldState {
    /// Cycle index; one cycle is 10 ms.
    pub t_step: u64,
    pub x_ego: f64,
    pub x_lead: f64,
    pub v_ego: f64,
    pub v_lead: f64,
    /// Realized Ego acceleration after actuator lag.
    pub a_ego_actual: f64,
    /// Bumper-to-bumper relative distance (m).
    pub rd_true: f64,
    pub collided: bool,
}

impl WorldState {
    pub fn new(initial_distance: f64, v_ego: f64, v_lead: f64) -> Self {
        let x_ego = 0.0;
        let x_lead = initial_distance + VEHICLE_LENGTH_OFFSET;
        WorldState {
            t_step: 0,
            x_ego,
            x_lead,
            v_ego,
            v_lead,
            a_ego_actual: 0.0,
            rd_true: initial_distance,
            collided: false,
        }
    }

    /// Simulation time in seconds.
    pub fn time(&self) -> f64 {
        self.t_step as f64 * DT
    }

    /// Ground-truth closing speed, positive when the gap shrinks.
    pub fn rs_true(&self) -> f64 {
        self.v_ego - self.v_lead
    }
}

/// Piecewise lead-speed profile: constant before `t0`, linear ramp on
/// `[t0, t1]`, constant after.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SpeedRamp {
    pub v_start: f64,
    pub v_end: f64,
    pub t_start: f64,
    pub t_end: f64,
}

impl SpeedRamp {
    pub fn constant(v: f64) -> Self {
        SpeedRamp {
            v_start: v,
            v_end: v,
            t_start: 0.0,
            t_end: 0.0,
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        if t <= self.t_start || self.t_end <= self.t_start {
            self.v_start
        } else if t >= self.t_end {
            self.v_end
        } else {
            let frac = (t - self.t_start) / (self.t_end - self.t_start);
            self.v_start + frac * (self.v_end - self.v_start)
        }
    }
}

/// Which predefined driving scenario a run uses.
///
/// SC1-SC4 are the high-risk highway encounters (Ego cruises at 60 mph,
/// lead 75 m ahead); Un152-1..5 are the low-speed emergency-braking
/// calibration scenarios with a stationary or slow lead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioId {
    Sc1,
    Sc2,
    Sc3,
    Sc4,
    Un152(u8),
}

impl ScenarioId {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "SC1" => Ok(ScenarioId::Sc1),
            "SC2" => Ok(ScenarioId::Sc2),
            "SC3" => Ok(ScenarioId::Sc3),
            "SC4" => Ok(ScenarioId::Sc4),
            "UN152-1" => Ok(ScenarioId::Un152(1)),
            "UN152-2" => Ok(ScenarioId::Un152(2)),
            "UN152-3" => Ok(ScenarioId::Un152(3)),
            "UN152-4" => Ok(ScenarioId::Un152(4)),
            "UN152-5" => Ok(ScenarioId::Un152(5)),
            other => Err(SimError::Config(format!("unknown scenario id `{other}`"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            ScenarioId::Sc1 => "SC1".into(),
            ScenarioId::Sc2 => "SC2".into(),
            ScenarioId::Sc3 => "SC3".into(),
            ScenarioId::Sc4 => "SC4".into(),
            ScenarioId::Un152(n) => format!("UN152-{n}"),
        }
    }
}

/// Concrete initial conditions and lead behavior for one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub id: ScenarioId,
    pub initial_distance: f64,
    /// Ego cruise set-speed (m/s).
    pub v_set: f64,
    /// Ego initial speed (m/s).
    pub v_ego0: f64,
    pub lead_profile: SpeedRamp,
    pub total_cycles: u64,
    pub seed: u64,
    /// Holds the gap law out of the planner so the emergency-braking stack
    /// is what gets exercised (braking-regulation test protocol).
    pub cruise_only: bool,
}

impl ScenarioConfig {
    pub fn build(id: ScenarioId, seed: u64) -> Result<Self> {
        let sc = |lead: SpeedRamp| ScenarioConfig {
            id,
            initial_distance: 75.0,
            v_set: mph(60.0),
            v_ego0: mph(60.0),
            lead_profile: lead,
            total_cycles: 5000,
            seed,
            cruise_only: false,
        };
        // Lead ramps happen over t in [10, 20] s at constant acceleration.
        let cfg = match id {
            ScenarioId::Sc1 => sc(SpeedRamp::constant(mph(35.0))),
            ScenarioId::Sc2 => sc(SpeedRamp::constant(mph(50.0))),
            ScenarioId::Sc3 => sc(SpeedRamp {
                v_start: mph(50.0),
                v_end: mph(35.0),
                t_start: 10.0,
                t_end: 20.0,
            }),
            ScenarioId::Sc4 => sc(SpeedRamp {
                v_start: mph(35.0),
                v_end: mph(50.0),
                t_start: 10.0,
                t_end: 20.0,
            }),
            ScenarioId::Un152(n) => {
                let (dist, ve, vl) = match n {
                    1 => (100.0, kmh(20.0), 0.0),
                    2 => (100.0, kmh(42.0), 0.0),
                    3 => (150.0, kmh(58.0), 0.0),
                    4 => (100.0, kmh(30.0), kmh(20.0)),
                    5 => (150.0, kmh(58.0), kmh(20.0)),
                    _ => {
                        return Err(SimError::Config(format!(
                            "unknown calibration scenario UN152-{n}"
                        )))
                    }
                };
                ScenarioConfig {
                    id,
                    initial_distance: dist,
                    v_set: ve,
                    v_ego0: ve,
                    lead_profile: SpeedRamp::constant(vl),
                    total_cycles: 5000,
                    seed,
                    cruise_only: true,
                }
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_distance <= 0.0 {
            return Err(SimError::Config("initial distance must be > 0".into()));
        }
        if self.total_cycles == 0 {
            return Err(SimError::Config("total cycles must be > 0".into()));
        }
        if self.lead_profile.v_start < 0.0 || self.lead_profile.v_end < 0.0 {
            return Err(SimError::Config("lead profile speeds must be >= 0".into()));
        }
        Ok(())
    }

    pub fn initial_state(&self) -> WorldState {
        WorldState::new(self.initial_distance, self.v_ego0, self.lead_profile.at(0.0))
    }
}

/// Lead speed at time `t` for the given scenario.
pub fn lead_profile(scenario: &ScenarioConfig, t: f64) -> f64 {
    scenario.lead_profile.at(t).max(0.0)
}

/// Advance the world one control cycle under the dispatched command.
///
/// The realized acceleration relaxes toward the command with a first-order
/// lag, positions integrate forward-Euler, and speeds are floored at zero.
/// Returns an error on a non-finite command, which signals an upstream
/// numeric failure and aborts the run.
pub fn step_world(
    state: &WorldState,
    cmd: &ControlCommand,
    lead_speed: f64,
    dt: f64,
) -> Result<WorldState> {
    if !cmd.a_cmd.is_finite() {
        return Err(SimError::Numeric(format!(
            "non-finite acceleration command at cycle {}",
            state.t_step
        )));
    }
    let mut next = *state;
    next.t_step += 1;

    next.a_ego_actual += (cmd.a_cmd - next.a_ego_actual) * dt / TAU_ACTUATOR;
    next.x_ego += next.v_ego * dt;
    next.v_ego = (next.v_ego + next.a_ego_actual * dt).max(0.0);
    if next.v_ego == 0.0 && next.a_ego_actual < 0.0 {
        // Standstill: braking does not push the vehicle backwards.
        next.a_ego_actual = 0.0;
    }

    next.x_lead += next.v_lead * dt;
    next.v_lead = lead_speed.max(0.0);

    next.rd_true = next.x_lead - next.x_ego - VEHICLE_LENGTH_OFFSET;
    if next.rd_true <= 0.0 {
        next.collided = true;
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::CommandSource;

    fn cmd(a: f64) -> ControlCommand {
        ControlCommand {
            a_cmd: a,
            source: CommandSource::Acc,
            issue_cycle: 0,
        }
    }

    #[test]
    fn zero_acceleration_advances_position_only() {
        let s = WorldState::new(75.0, 25.0, 25.0);
        let n = step_world(&s, &cmd(0.0), 25.0, DT).unwrap();
        assert!((n.x_ego - 0.25).abs() < 1e-12);
        assert!((n.v_ego - 25.0).abs() < 1e-12);
    }

    #[test]
    fn speed_floors_at_zero() {
        let mut s = WorldState::new(50.0, 0.0, 10.0);
        s.a_ego_actual = -3.5;
        let n = step_world(&s, &cmd(-3.5), 10.0, DT).unwrap();
        assert_eq!(n.v_ego, 0.0);
    }

    #[test]
    fn actuator_lag_first_order() {
        let s = WorldState::new(50.0, 20.0, 20.0);
        // a += (a_cmd - a) * dt / tau = 2.0 * 0.01 / 0.2 = 0.1
        let n = step_world(&s, &cmd(2.0), 20.0, DT).unwrap();
        assert!((n.a_ego_actual - 0.1).abs() < 1e-12);
    }

    #[test]
    fn non_finite_command_aborts() {
        let s = WorldState::new(50.0, 20.0, 20.0);
        assert!(step_world(&s, &cmd(f64::NAN), 20.0, DT).is_err());
    }

    #[test]
    fn collision_flag_fires_at_zero_gap() {
        let mut s = WorldState::new(0.05, 30.0, 0.0);
        s.v_lead = 0.0;
        let n = step_world(&s, &cmd(0.0), 0.0, DT).unwrap();
        assert!(n.rd_true <= 0.0 && n.collided);
    }

    #[test]
    fn unit_conversions() {
        assert!((mph(35.0) - 15.6464).abs() < 1e-4);
        assert!((mph(50.0) - 22.352).abs() < 1e-4);
        assert!((mph(60.0) - 26.8224).abs() < 1e-4);
    }

    #[test]
    fn sc_profiles() {
        let sc1 = ScenarioConfig::build(ScenarioId::Sc1, 0).unwrap();
        assert!((lead_profile(&sc1, 12.0) - 15.6464).abs() < 1e-3);
        let sc2 = ScenarioConfig::build(ScenarioId::Sc2, 0).unwrap();
        assert!((lead_profile(&sc2, 40.0) - 22.352).abs() < 1e-3);
        let sc3 = ScenarioConfig::build(ScenarioId::Sc3, 0).unwrap();
        assert!((lead_profile(&sc3, 5.0) - 22.352).abs() < 1e-3);
        assert!((lead_profile(&sc3, 15.0) - 0.5 * (22.352 + 15.6464)).abs() < 1e-3);
        assert!((lead_profile(&sc3, 25.0) - 15.6464).abs() < 1e-3);
        let sc4 = ScenarioConfig::build(ScenarioId::Sc4, 0).unwrap();
        assert!(lead_profile(&sc4, 25.0) > lead_profile(&sc4, 5.0));
    }

    #[test]
    fn unknown_scenario_is_config_error() {
        assert!(ScenarioId::parse("SC9").is_err());
    }

    #[test]
    fn equal_speeds_zero_command_keeps_gap_constant() {
        let sc = ScenarioConfig {
            id: ScenarioId::Sc1,
            initial_distance: 75.0,
            v_set: 20.0,
            v_ego0: 20.0,
            lead_profile: SpeedRamp::constant(20.0),
            total_cycles: 5000,
            seed: 0,
            cruise_only: false,
        };
        let mut s = sc.initial_state();
        for _ in 0..5000 {
            s = step_world(&s, &cmd(0.0), 20.0, DT).unwrap();
        }
        assert!((s.rd_true - 75.0).abs() < 1e-9);
    }
}
