//! Context-aware attack trigger: acceleration is hazardous exactly when the
//! headway time is short and the gap is closing.

use serde::{Deserialize, Serialize};

pub const HWT_SAFE_DEFAULT: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContextDecision {
    Critical,
    NotCritical,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SystemContext {
    /// Headway time rd / v_ego (s); infinite when stationary.
    pub hwt: f64,
    /// Relative speed v_ego - v_lead, positive when closing.
    pub rs: f64,
    pub hwt_safe: f64,
    pub decision: ContextDecision,
}

pub fn infer_context(rd: f64, v_ego: f64, v_lead: f64, hwt_safe: f64) -> SystemContext {
    let rs = v_ego - v_lead;
    let hwt = if v_ego > 0.0 { rd / v_ego } else { f64::INFINITY };
    let decision = if hwt <= hwt_safe && rs > 0.0 {
        ContextDecision::Critical
    } else {
        ContextDecision::NotCritical
    };
    SystemContext {
        hwt,
        rs,
        hwt_safe,
        decision,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_headway_closing_is_critical() {
        let ctx = infer_context(50.0, 25.0, 20.0, 2.5);
        assert!((ctx.hwt - 2.0).abs() < 1e-12);
        assert!((ctx.rs - 5.0).abs() < 1e-12);
        assert_eq!(ctx.decision, ContextDecision::Critical);
    }

    #[test]
    fn opening_gap_never_critical() {
        for hwt_rd in [10.0, 30.0, 100.0] {
            let ctx = infer_context(hwt_rd, 20.0, 25.0, 2.5);
            assert_eq!(ctx.decision, ContextDecision::NotCritical);
        }
    }

    #[test]
    fn long_headway_not_critical() {
        let ctx = infer_context(100.0, 25.0, 20.0, 2.5);
        assert!((ctx.hwt - 4.0).abs() < 1e-12);
        assert_eq!(ctx.decision, ContextDecision::NotCritical);
    }

    #[test]
    fn stationary_ego_not_critical() {
        let ctx = infer_context(10.0, 0.0, 0.0, 2.5);
        assert_eq!(ctx.decision, ContextDecision::NotCritical);
    }
}
