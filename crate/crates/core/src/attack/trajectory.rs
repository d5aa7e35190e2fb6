//! Least-squares polynomial fit over the recent predicted-distance samples
//! and its analytic end-slope, which the patch objective differentiates
//! through.

/// Ring buffer of (t, rd) samples with a polynomial trend fit.
#[derive(Debug, Clone)]
pub struct TrajectoryBuffer {
    pub capacity: usize,
    pub samples: Vec<(f64, f64)>,
}

/// End-slope of the fitted trend, split so the dependence on a candidate
/// newest sample stays explicit: slope(y_new) = base + weight * y_new.
#[derive(Debug, Clone, Copy)]
pub struct SlopeSensitivity {
    pub base: f64,
    pub weight: f64,
}

impl TrajectoryBuffer {
    pub fn new(capacity: usize) -> Self {
        TrajectoryBuffer {
            capacity,
            samples: Vec::with_capacity(capacity + 1),
        }
    }

    pub fn push(&mut self, t: f64, rd: f64) {
        self.samples.push((t, rd));
        if self.samples.len() > self.capacity {
            self.samples.remove(0);
        }
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Derivative of the fitted polynomial at the newest timestamp.
    pub fn end_slope(&self) -> Option<f64> {
        fit_end_slope(&self.samples)
    }

    /// Sensitivity of the end-slope to a hypothetical newest sample at
    /// `t_new`, fitted over the buffered history plus that sample.
    pub fn slope_with_candidate(&self, t_new: f64) -> Option<SlopeSensitivity> {
        let mut pts = self.samples.clone();
        pts.push((t_new, 0.0));
        let base = fit_end_slope(&pts)?;
        for p in pts.iter_mut() {
            p.1 = 0.0;
        }
        pts.last_mut().unwrap().1 = 1.0;
        let weight = fit_end_slope(&pts)?;
        Some(SlopeSensitivity { base, weight })
    }
}

/// Least-squares polynomial of degree min(2, n-1) through `pts`, returning
/// the analytic derivative at the latest timestamp. Falls back to a finite
/// difference when the design matrix is singular (duplicate timestamps).
pub fn fit_end_slope(pts: &[(f64, f64)]) -> Option<f64> {
    let n = pts.len();
    if n < 2 {
        return None;
    }
    let deg = 2.min(n - 1);
    let t_last = pts[n - 1].0;
    // Center on the latest timestamp: the derivative there is coefficient 1.
    let xs: Vec<f64> = pts.iter().map(|p| p.0 - t_last).collect();
    let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();

    let dim = deg + 1;
    let mut ata = [[0.0f64; 3]; 3];
    let mut aty = [0.0f64; 3];
    for (x, y) in xs.iter().zip(&ys) {
        let mut pow = [1.0, *x, x * x];
        if dim < 3 {
            pow[2] = 0.0;
        }
        for i in 0..dim {
            aty[i] += pow[i] * y;
            for j in 0..dim {
                ata[i][j] += pow[i] * pow[j];
            }
        }
    }
    match solve3(&mut ata, &mut aty, dim) {
        Some(coef) => Some(coef[1]),
        None => {
            // Finite-difference fallback over the last distinct pair.
            for k in (0..n - 1).rev() {
                let dt = pts[n - 1].0 - pts[k].0;
                if dt.abs() > 1e-12 {
                    return Some((pts[n - 1].1 - pts[k].1) / dt);
                }
            }
            Some(0.0)
        }
    }
}

/// Gaussian elimination with partial pivoting on an up-to-3x3 system.
fn solve3(a: &mut [[f64; 3]; 3], b: &mut [f64; 3], dim: usize) -> Option<[f64; 3]> {
    let mut idx = [0usize, 1, 2];
    for col in 0..dim {
        let piv = (col..dim).max_by(|&i, &j| {
            a[idx[i]][col]
                .abs()
                .partial_cmp(&a[idx[j]][col].abs())
                .unwrap()
        })?;
        idx.swap(col, piv);
        let p = a[idx[col]][col];
        if p.abs() < 1e-12 {
            return None;
        }
        for row in col + 1..dim {
            let f = a[idx[row]][col] / p;
            for k in col..dim {
                a[idx[row]][k] -= f * a[idx[col]][k];
            }
            b[idx[row]] -= f * b[idx[col]];
        }
    }
    let mut x = [0.0f64; 3];
    for col in (0..dim).rev() {
        let mut acc = b[idx[col]];
        for k in col + 1..dim {
            acc -= a[idx[col]][k] * x[k];
        }
        x[col] = acc / a[idx[col]][col];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_sequence_zero_slope() {
        let mut buf = TrajectoryBuffer::new(10);
        for k in 0..3 {
            buf.push(k as f64 * 0.05, 50.0);
        }
        assert!(buf.end_slope().unwrap().abs() < 1e-9);
    }

    #[test]
    fn collinear_points_exact_slope() {
        let pts = [(0.0, 50.0), (0.05, 49.0), (0.10, 48.0)];
        let slope = fit_end_slope(&pts).unwrap();
        assert!((slope - (-20.0)).abs() < 1e-9, "slope = {slope}");
    }

    #[test]
    fn quadratic_is_interpolated_exactly() {
        // y = 2 + 3t - 4t^2, derivative at t=0.3: 3 - 8*0.3 = 0.6
        let f = |t: f64| 2.0 + 3.0 * t - 4.0 * t * t;
        let pts: Vec<(f64, f64)> = [0.0, 0.1, 0.2, 0.3].iter().map(|&t| (t, f(t))).collect();
        let slope = fit_end_slope(&pts).unwrap();
        assert!((slope - 0.6).abs() < 1e-9);
    }

    #[test]
    fn duplicate_timestamps_fall_back() {
        let pts = [(1.0, 50.0), (1.0, 50.0), (1.0, 50.0), (1.05, 49.0)];
        let slope = fit_end_slope(&pts).unwrap();
        assert!(slope.is_finite());
    }

    #[test]
    fn candidate_sensitivity_is_linear() {
        let mut buf = TrajectoryBuffer::new(10);
        for k in 0..6 {
            buf.push(k as f64 * 0.05, 60.0 - 0.9 * k as f64);
        }
        let s = buf.slope_with_candidate(0.30).unwrap();
        assert!(s.weight > 0.0, "raising the newest sample raises the slope");
        // Check linear decomposition against direct fits.
        for y in [40.0, 55.0, 70.0] {
            let mut pts = buf.samples.clone();
            pts.push((0.30, y));
            let direct = fit_end_slope(&pts).unwrap();
            assert!((direct - (s.base + s.weight * y)).abs() < 1e-9);
        }
    }

    #[test]
    fn ring_buffer_evicts_oldest() {
        let mut buf = TrajectoryBuffer::new(3);
        for k in 0..5 {
            buf.push(k as f64, k as f64);
        }
        assert_eq!(buf.len(), 3);
        assert!((buf.samples[0].0 - 2.0).abs() < 1e-12);
    }
}
