//! Differentiable lead-vehicle detector: maps a camera frame to relative
//! distance and relative speed with exact pixel gradients.
//!
//! The forward pass is a stack of smooth stages: a per-pixel logistic body
//! mask, per-column mass, a soft peak over columns, a soft count of columns
//! above half the peak, and a pinhole inversion of the counted width. Every
//! stage is logistic/log-sum-exp, so the output is C-infinity in the pixels
//! and the reverse-mode gradient is exact.

use serde::{Deserialize, Serialize};

use crate::sensor::{Frame, PixelBox, RenderParams};
use crate::world::WorldState;

/// Model parameters. `f_px` is the perception's own calibrated focal
/// constant; it differs from the renderer intrinsics because the soft width
/// count sees the body narrower than its full projected extent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerceptionModel {
    /// Midpoint of the per-pixel body logistic.
    pub theta_v: f64,
    /// Temperature of the per-pixel logistic.
    pub tau: f64,
    /// Log-sum-exp temperature for the soft column peak.
    pub tau_m: f64,
    /// Relative temperature of the column-count gate.
    pub tau_c: f64,
    /// Calibrated focal constant (px).
    pub f_px: f64,
    /// Assumed true lead width (m).
    pub w_real: f64,
    /// Relative-speed smoothing factor, in (0, 1].
    pub alpha: f64,
    /// Width floor in the pinhole inversion.
    pub eps: f64,
    /// Minimum soft count for a detection.
    pub w_floor: f64,
    /// Minimum column peak for a detection; an all-background frame sits
    /// below this.
    pub m_floor: f64,
    /// Floor on the peak used to scale the gate, so empty frames do not
    /// produce zero-width gates.
    pub m_gate_floor: f64,
    /// Seconds between perception frames (20 Hz).
    pub dt_frame: f64,
}

impl Default for PerceptionModel {
    fn default() -> Self {
        PerceptionModel {
            theta_v: 0.86,
            tau: 0.060,
            tau_m: 0.0015,
            tau_c: 0.05,
            f_px: 155.0,
            w_real: 1.8,
            alpha: 0.3,
            eps: 1.0,
            w_floor: 1.2,
            m_floor: 0.0098,
            m_gate_floor: 0.004,
            dt_frame: 0.05,
        }
    }
}

impl PerceptionModel {
    /// Calibrates the focal constant against the renderer: a log-mean fit
    /// of distance times soft count over the working range.
    pub fn calibrated(render: &RenderParams) -> Self {
        let mut model = PerceptionModel::default();
        let mut clean = render.clone();
        clean.sigma_img = 0.0;
        let mut acc = 0.0;
        let mut n = 0;
        for rd in [10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0] {
            let world = WorldState::new(rd, 0.0, 0.0);
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
            let frame = crate::sensor::render_frame(&world, &clean, 0, &mut rng);
            let pass = model.forward(&frame);
            if pass.w_app > model.eps {
                acc += (rd * pass.w_app).ln();
                n += 1;
            }
        }
        model.f_px = (acc / n as f64).exp() / model.w_real;
        model
    }
}

#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Cached per-frame intermediates of the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// Column mass c_j (mean body-mask weight per column).
    pub col_mass: Vec<f64>,
    /// Soft peak over columns.
    pub m: f64,
    /// Soft count of columns above half the peak.
    pub w_app: f64,
    /// Raw distance from the pinhole inversion, before detection gating.
    pub rd_raw: f64,
    /// Whether the frame contains a detectable lead.
    pub lead: bool,
}

/// Distance/speed estimate for one frame.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PerceptionOutput {
    pub rd: f64,
    /// Positive when closing.
    pub rs: f64,
    pub frame_index: u64,
}

impl PerceptionModel {
    fn column_mass(&self, frame: &Frame, col: usize) -> f64 {
        let mut acc = 0.0;
        let w = frame.w;
        for r in 0..frame.h {
            acc += logistic((frame.px[r * w + col] - self.theta_v) / self.tau);
        }
        acc / frame.h as f64
    }

    fn finish(&self, col_mass: Vec<f64>) -> ForwardPass {
        // Stable log-sum-exp soft peak.
        let c_max = col_mass.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = col_mass
            .iter()
            .map(|&c| ((c - c_max) / self.tau_m).exp())
            .sum();
        let m = c_max + self.tau_m * sum_exp.ln();

        let m_gate = m.max(self.m_gate_floor);
        let mut w_app = 0.0;
        for &c in &col_mass {
            w_app += logistic((c / m_gate - 0.5) / self.tau_c);
        }
        let rd_raw = self.f_px * self.w_real / w_app.max(self.eps);
        let lead = m >= self.m_floor && w_app >= self.w_floor;
        ForwardPass {
            col_mass,
            m,
            w_app,
            rd_raw,
            lead,
        }
    }

    /// Full forward pass over a frame.
    pub fn forward(&self, frame: &Frame) -> ForwardPass {
        let col_mass: Vec<f64> = (0..frame.w).map(|j| self.column_mass(frame, j)).collect();
        self.finish(col_mass)
    }

    /// Re-evaluates after changes restricted to `cols`, reusing the cached
    /// column masses everywhere else.
    pub fn forward_cols(
        &self,
        base: &ForwardPass,
        frame: &Frame,
        cols: std::ops::Range<usize>,
    ) -> ForwardPass {
        let mut col_mass = base.col_mass.clone();
        for j in cols {
            if j < frame.w {
                col_mass[j] = self.column_mass(frame, j);
            }
        }
        self.finish(col_mass)
    }

    /// Distance and smoothed closing speed for one frame. `None` when no
    /// lead is detectable (the planner then falls back to the cruise law).
    pub fn lvd_forward(
        &self,
        frame: &Frame,
        prev: Option<&PerceptionOutput>,
    ) -> Option<PerceptionOutput> {
        let pass = self.forward(frame);
        self.output_from_pass(&pass, frame.index, prev)
    }

    pub fn output_from_pass(
        &self,
        pass: &ForwardPass,
        frame_index: u64,
        prev: Option<&PerceptionOutput>,
    ) -> Option<PerceptionOutput> {
        if !pass.lead {
            return None;
        }
        let rd = pass.rd_raw;
        let rs = match prev {
            Some(p) => self.alpha * (p.rd - rd) / self.dt_frame + (1.0 - self.alpha) * p.rs,
            None => 0.0,
        };
        Some(PerceptionOutput {
            rd,
            rs,
            frame_index,
        })
    }

    /// Per-column downstream factor D_j = d(rd_raw)/d(c_j).
    fn column_grad_factors(&self, pass: &ForwardPass) -> Vec<f64> {
        let n = pass.col_mass.len();
        if pass.w_app <= self.eps {
            return vec![0.0; n];
        }
        let m_gate = pass.m.max(self.m_gate_floor);
        let drd_dw = -self.f_px * self.w_real / (pass.w_app * pass.w_app);

        // Softmax weights of the soft peak (zero if the gate floor binds).
        let peak_active = pass.m > self.m_gate_floor;
        let c_max = pass
            .col_mass
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = pass
            .col_mass
            .iter()
            .map(|&c| ((c - c_max) / self.tau_m).exp())
            .collect();
        let exp_sum: f64 = exps.iter().sum();

        // Gate derivatives and the peak-coupling sum S2 = sum g'_j c_j.
        let mut gp = vec![0.0; n];
        let mut s2 = 0.0;
        for (j, &c) in pass.col_mass.iter().enumerate() {
            let g = logistic((c / m_gate - 0.5) / self.tau_c);
            gp[j] = g * (1.0 - g);
            s2 += gp[j] * c;
        }

        (0..n)
            .map(|k| {
                let mut dw_dc = gp[k] / (m_gate * self.tau_c);
                if peak_active {
                    let softmax_k = exps[k] / exp_sum;
                    dw_dc -= s2 * softmax_k / (m_gate * m_gate * self.tau_c);
                }
                drd_dw * dw_dc
            })
            .collect()
    }

    /// Exact gradient of `rd_raw` w.r.t. every pixel of the frame.
    pub fn gradient_raw(&self, frame: &Frame, pass: &ForwardPass) -> Vec<f64> {
        let factors = self.column_grad_factors(pass);
        let mut grad = vec![0.0; frame.px.len()];
        let h = frame.h as f64;
        for r in 0..frame.h {
            for j in 0..frame.w {
                let idx = r * frame.w + j;
                let s = logistic((frame.px[idx] - self.theta_v) / self.tau);
                grad[idx] = factors[j] * s * (1.0 - s) / (self.tau * h);
            }
        }
        grad
    }

    /// Gradient restricted to a pixel box; entries are row-major over the box.
    pub fn gradient_in_box(&self, frame: &Frame, pass: &ForwardPass, bbox: &PixelBox) -> Vec<f64> {
        let factors = self.column_grad_factors(pass);
        let h = frame.h as f64;
        let mut grad = vec![0.0; bbox.area()];
        for br in 0..bbox.h {
            let r = bbox.y0 + br;
            for bc in 0..bbox.w {
                let c = bbox.x0 + bc;
                if r >= frame.h || c >= frame.w {
                    continue;
                }
                let s = logistic((frame.px[r * frame.w + c] - self.theta_v) / self.tau);
                grad[br * bbox.w + bc] = factors[c] * s * (1.0 - s) / (self.tau * h);
            }
        }
        grad
    }

    /// Gradient of the detected distance: zero on no-lead frames.
    pub fn lvd_gradient(&self, frame: &Frame) -> Vec<f64> {
        let pass = self.forward(frame);
        if !pass.lead {
            return vec![0.0; frame.px.len()];
        }
        self.gradient_raw(frame, &pass)
    }
}

/// Path-integral attribution of `rd_raw` over the straight line from
/// `baseline` to `frame`, right-endpoint Riemann sum with `m_steps` points.
pub fn integrated_gradients(
    model: &PerceptionModel,
    frame: &Frame,
    baseline: &Frame,
    m_steps: usize,
) -> Vec<f64> {
    assert_eq!(frame.px.len(), baseline.px.len(), "shape mismatch");
    let n = frame.px.len();
    let mut acc = vec![0.0; n];
    let mut point = baseline.clone();
    for k in 1..=m_steps {
        let a = k as f64 / m_steps as f64;
        for i in 0..n {
            point.px[i] = baseline.px[i] + a * (frame.px[i] - baseline.px[i]);
        }
        let pass = model.forward(&point);
        let g = model.gradient_raw(&point, &pass);
        for i in 0..n {
            acc[i] += g[i];
        }
    }
    let scale = 1.0 / m_steps as f64;
    for i in 0..n {
        acc[i] = (frame.px[i] - baseline.px[i]) * acc[i] * scale;
    }
    acc
}

/// IG attributions restricted to a box (the only region where `frame` and
/// `baseline` may differ, which keeps the forward passes incremental).
pub fn integrated_gradients_in_box(
    model: &PerceptionModel,
    frame: &Frame,
    baseline: &Frame,
    m_steps: usize,
    bbox: &PixelBox,
) -> Vec<f64> {
    let mut acc = vec![0.0; bbox.area()];
    let base_pass = model.forward(baseline);
    let mut point = baseline.clone();
    let col_range = bbox.x0..(bbox.x0 + bbox.w).min(frame.w);
    for k in 1..=m_steps {
        let a = k as f64 / m_steps as f64;
        for br in 0..bbox.h {
            let r = bbox.y0 + br;
            for bc in 0..bbox.w {
                let c = bbox.x0 + bc;
                if r >= frame.h || c >= frame.w {
                    continue;
                }
                let idx = r * frame.w + c;
                point.px[idx] = baseline.px[idx] + a * (frame.px[idx] - baseline.px[idx]);
            }
        }
        let pass = model.forward_cols(&base_pass, &point, col_range.clone());
        let g = model.gradient_in_box(&point, &pass, bbox);
        for i in 0..acc.len() {
            acc[i] += g[i];
        }
    }
    let scale = 1.0 / m_steps as f64;
    for br in 0..bbox.h {
        let r = bbox.y0 + br;
        for bc in 0..bbox.w {
            let c = bbox.x0 + bc;
            let i = br * bbox.w + bc;
            if r >= frame.h || c >= frame.w {
                acc[i] = 0.0;
                continue;
            }
            let idx = r * frame.w + c;
            acc[i] = (frame.px[idx] - baseline.px[idx]) * acc[i] * scale;
        }
    }
    acc
}

/// Generic IG over a scalar function with a caller-supplied gradient, used
/// by tests to check the closed form on simple models.
pub fn ig_with_gradient<G>(grad_fn: G, x: &[f64], x0: &[f64], m_steps: usize) -> Vec<f64>
where
    G: Fn(&[f64]) -> Vec<f64>,
{
    assert_eq!(x.len(), x0.len());
    let n = x.len();
    let mut acc = vec![0.0; n];
    let mut point = vec![0.0; n];
    for k in 1..=m_steps {
        let a = k as f64 / m_steps as f64;
        for i in 0..n {
            point[i] = x0[i] + a * (x[i] - x0[i]);
        }
        let g = grad_fn(&point);
        for i in 0..n {
            acc[i] += g[i];
        }
    }
    for i in 0..n {
        acc[i] = (x[i] - x0[i]) * acc[i] / m_steps as f64;
    }
    acc
}
