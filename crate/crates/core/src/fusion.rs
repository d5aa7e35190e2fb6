//! Kalman-filter fusion of camera and radar distance/speed estimates, and
//! the camera noise model whose parameters bound attack perturbations.

use serde::{Deserialize, Serialize};

/// Mean/std of camera measurement noise. `sigma` doubles as the adversarial
/// patch amplitude bound in normalized pixel units.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseModel {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            mu: 0.0,
            sigma: 0.05,
        }
    }
}

/// Per-sensor measurement variances for the (rd, rs) channels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SensorNoise {
    pub r_rd: f64,
    pub r_rs: f64,
}

/// Two-state (RD, RS) filter with a constant-closing-speed model.
///
/// There is deliberately no innovation gating: per-cycle shifts below the
/// measurement noise pass straight through, which is the property the
/// bounded patch exploits.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FusionState {
    pub rd: f64,
    pub rs: f64,
    /// Covariance [[p00, p01], [p01, p11]].
    pub p00: f64,
    pub p01: f64,
    pub p11: f64,
    pub q_rd: f64,
    pub q_rs: f64,
    pub initialized: bool,
}

impl Default for FusionState {
    fn default() -> Self {
        FusionState {
            rd: 0.0,
            rs: 0.0,
            p00: 400.0,
            p01: 0.0,
            p11: 25.0,
            q_rd: 0.02,
            q_rs: 0.8,
            initialized: false,
        }
    }
}

/// Default camera channel variances: rd ~ (1.5 m)^2; the camera's own speed
/// estimate is a frame difference and is weighted accordingly.
pub const R_CAM: SensorNoise = SensorNoise {
    r_rd: 2.25,
    r_rs: 16.0,
};
/// Radar carries less weight than the camera on distance, but its
/// range-rate is a direct measurement and is trusted accordingly.
pub const R_RADAR: SensorNoise = SensorNoise {
    r_rd: 9.0,
    r_rs: 9.0,
};

impl FusionState {
    /// Propagate: rd shrinks by rs*dt, rs holds, covariance grows by Q.
    pub fn predict(&mut self, dt: f64) {
        if !self.initialized {
            return;
        }
        self.rd -= self.rs * dt;
        // P <- F P F' + Q dt with F = [[1, -dt], [0, 1]].
        let p00 = self.p00 - dt * (2.0 * self.p01 - dt * self.p11);
        let p01 = self.p01 - dt * self.p11;
        self.p00 = p00 + self.q_rd * dt;
        self.p01 = p01;
        self.p11 += self.q_rs * dt;
    }

    /// Sequential scalar updates for the rd and rs channels.
    /// Non-finite measurements are skipped; the caller logs the event.
    pub fn update(&mut self, rd: Option<f64>, rs: Option<f64>, r: SensorNoise) -> bool {
        let mut applied = false;
        if let Some(z) = rd {
            if z.is_finite() {
                if !self.initialized {
                    self.rd = z;
                    self.rs = 0.0;
                    self.initialized = true;
                }
                let s = self.p00 + r.r_rd;
                let k0 = self.p00 / s;
                let k1 = self.p01 / s;
                let innov = z - self.rd;
                self.rd += k0 * innov;
                self.rs += k1 * innov;
                let p00 = (1.0 - k0) * self.p00;
                let p01 = (1.0 - k0) * self.p01;
                let p11 = self.p11 - k1 * self.p01;
                self.p00 = p00;
                self.p01 = p01;
                self.p11 = p11;
                applied = true;
            }
        }
        if let Some(z) = rs {
            if z.is_finite() && self.initialized {
                let s = self.p11 + r.r_rs;
                let k1 = self.p11 / s;
                let k0 = self.p01 / s;
                let innov = z - self.rs;
                self.rd += k0 * innov;
                self.rs += k1 * innov;
                let p11 = (1.0 - k1) * self.p11;
                let p01 = (1.0 - k1) * self.p01;
                let p00 = self.p00 - k0 * self.p01;
                self.p00 = p00;
                self.p01 = p01;
                self.p11 = p11;
                applied = true;
            }
        }
        applied
    }

    /// Smallest covariance eigenvalue, for the PSD invariant.
    pub fn min_eigenvalue(&self) -> f64 {
        let tr = self.p00 + self.p11;
        let det = self.p00 * self.p11 - self.p01 * self.p01;
        let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
        tr / 2.0 - disc
    }

    pub fn estimate(&self) -> Option<(f64, f64)> {
        self.initialized.then_some((self.rd, self.rs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded() -> FusionState {
        let mut f = FusionState::default();
        f.update(Some(50.0), None, SensorNoise { r_rd: 2.25, r_rs: 4.0 });
        f.rd = 50.0;
        f.rs = 5.0;
        f
    }

    #[test]
    fn predict_moves_distance() {
        let mut f = seeded();
        f.predict(0.05);
        assert!((f.rd - 49.75).abs() < 1e-12);
        assert!((f.rs - 5.0).abs() < 1e-12);
    }

    #[test]
    fn predict_stationary() {
        let mut f = seeded();
        f.rs = 0.0;
        f.predict(0.05);
        assert!((f.rd - 50.0).abs() < 1e-12);
    }

    #[test]
    fn zero_process_noise_adds_nothing_beyond_transition() {
        let mut f = seeded();
        f.q_rd = 0.0;
        f.q_rs = 0.0;
        f.p00 = 1.0;
        f.p01 = 0.0;
        f.p11 = 0.0; // rs known exactly
        f.predict(0.1);
        assert!((f.p00 - 1.0).abs() < 1e-12);
        assert!((f.p11 - 0.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_update_hand_check() {
        // Prior rd = 50 with var 4, measurement 52 with var 4:
        // K = 4/(4+4) = 0.5, posterior 51 with var 2.
        let mut f = FusionState::default();
        f.rd = 50.0;
        f.rs = 0.0;
        f.p00 = 4.0;
        f.p01 = 0.0;
        f.p11 = 1.0;
        f.initialized = true;
        f.update(Some(52.0), None, SensorNoise { r_rd: 4.0, r_rs: 1.0 });
        assert!((f.rd - 51.0).abs() < 1e-12);
        assert!((f.p00 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_innovation_keeps_state_shrinks_variance() {
        let mut f = seeded();
        let (rd0, rs0, p000) = (f.rd, f.rs, f.p00);
        f.update(Some(rd0), Some(rs0), SensorNoise { r_rd: 2.0, r_rs: 2.0 });
        assert!((f.rd - rd0).abs() < 1e-12);
        assert!((f.rs - rs0).abs() < 1e-12);
        assert!(f.p00 < p000);
    }

    #[test]
    fn uninformative_measurement_is_ignored() {
        let mut f = seeded();
        let rd0 = f.rd;
        f.update(Some(90.0), None, SensorNoise { r_rd: 1e12, r_rs: 1e12 });
        assert!((f.rd - rd0).abs() < 1e-6);
    }

    #[test]
    fn non_finite_measurement_skipped() {
        let mut f = seeded();
        let rd0 = f.rd;
        let applied = f.update(Some(f64::NAN), None, R_CAM);
        assert!(!applied);
        assert!((f.rd - rd0).abs() < 1e-12);
    }

    #[test]
    fn covariance_stays_psd_over_long_runs() {
        let mut f = FusionState::default();
        for k in 0..5000 {
            f.predict(0.01);
            if k % 5 == 0 {
                let z = 50.0 - 0.001 * k as f64;
                f.update(Some(z), Some(0.1), R_CAM);
            }
            assert!(
                f.min_eigenvalue() >= -1e-9,
                "covariance lost PSD at step {k}"
            );
        }
    }
}
