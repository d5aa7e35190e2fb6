//! Camera frame synthesis (pinhole projection of the lead vehicle) and the
//! radar model with its DBSCAN point-cluster reduction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::world::WorldState;

/// Grayscale image with intensities in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub h: usize,
    pub w: usize,
    pub px: Vec<f64>,
    pub index: u64,
}

impl Frame {
    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Frame {
            h,
            w,
            px: vec![v; h * w],
            index: 0,
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.px[r * self.w + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.px[r * self.w + c] = v;
    }

    /// Writes the frame as a binary PGM (P5) image.
    pub fn write_pgm(&self, path: &std::path::Path) -> std::io::Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P5\n{} {}\n255\n", self.w, self.h)?;
        let bytes: Vec<u8> = self
            .px
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        f.write_all(&bytes)?;
        Ok(())
    }
}

/// Integer pixel bounding box, clamped to frame bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl PixelBox {
    pub fn center(&self) -> (f64, f64) {
        (
            self.x0 as f64 + self.w as f64 / 2.0,
            self.y0 as f64 + self.h as f64 / 2.0,
        )
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        c >= self.x0 && c < self.x0 + self.w && r >= self.y0 && r < self.y0 + self.h
    }

    pub fn area(&self) -> usize {
        self.w * self.h
    }
}

/// Scene geometry and photometric parameters for the synthetic camera.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderParams {
    pub frame_h: usize,
    pub frame_w: usize,
    /// Focal length in pixels.
    pub f_px: f64,
    /// Camera mount height (m).
    pub cam_height: f64,
    /// True lead vehicle width / height (m).
    pub lead_width: f64,
    pub lead_height: f64,
    /// Background and body intensities. The body is brightest along a
    /// narrow central ridge and falls off toward the sides like a curved
    /// car body under overhead light: a shallow shoulder from `body_peak`
    /// to `body_mid` out to `mid_frac` of the half-width, then a fast
    /// roll-off to `body_edge` at the outermost body column.
    pub background: f64,
    pub body_peak: f64,
    pub body_mid: f64,
    pub body_edge: f64,
    /// Fraction of the half-width occupied by the bright ridge.
    pub plateau_frac: f64,
    /// Fraction of the half-width where the fast roll-off begins.
    pub mid_frac: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub sigma_img: f64,
    /// Lateral offset of the lead (m), models road curvature.
    pub lateral_offset: f64,
}

impl Default for RenderParams {
    fn default() -> Self {
        RenderParams {
            frame_h: 128,
            frame_w: 256,
            f_px: 400.0,
            cam_height: 1.5,
            lead_width: 1.8,
            lead_height: 1.4,
            background: 0.2,
            body_peak: 0.8,
            body_mid: 0.72,
            body_edge: 0.45,
            plateau_frac: 0.02,
            mid_frac: 0.70,
            brightness: 0.0,
            contrast: 1.0,
            sigma_img: 0.005,
            lateral_offset: 0.0,
        }
    }
}

impl RenderParams {
    pub fn with_weather(mut self, preset: &str) -> crate::error::Result<Self> {
        let (b, c, s) = match preset {
            "clear" => (0.0, 1.0, 0.005),
            "rain" => (-0.05, 0.9, 0.02),
            "sunset" => (0.05, 0.8, 0.01),
            other => {
                return Err(crate::error::SimError::Config(format!(
                    "unknown weather preset `{other}`"
                )))
            }
        };
        self.brightness = b;
        self.contrast = c;
        self.sigma_img = s;
        Ok(self)
    }

    /// Apparent body width in pixels at ground-truth distance `rd`.
    pub fn apparent_width(&self, rd: f64) -> f64 {
        self.f_px * self.lead_width / rd
    }

    /// Projected body rectangle (float bounds) at distance `rd`.
    pub fn project(&self, rd: f64) -> ProjectedBody {
        let w_px = self.apparent_width(rd);
        let h_px = w_px * self.lead_height / self.lead_width;
        let cx = self.frame_w as f64 / 2.0 + self.f_px * self.lateral_offset / rd;
        // Body center sits at half the lead height above the road.
        let cy = self.frame_h as f64 / 2.0
            + self.f_px * (self.cam_height - self.lead_height / 2.0) / rd;
        ProjectedBody { cx, cy, w_px, h_px }
    }
}

/// Projected lead-vehicle rectangle in image coordinates.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedBody {
    pub cx: f64,
    pub cy: f64,
    pub w_px: f64,
    pub h_px: f64,
}

impl ProjectedBody {
    /// Tight integer box around the body, clamped to the frame.
    pub fn pixel_box(&self, frame_h: usize, frame_w: usize) -> PixelBox {
        let x0 = ((self.cx - self.w_px / 2.0).floor().max(0.0)) as usize;
        let x1 = ((self.cx + self.w_px / 2.0).ceil()).min(frame_w as f64) as usize;
        let y0 = ((self.cy - self.h_px / 2.0).floor().max(0.0)) as usize;
        let y1 = ((self.cy + self.h_px / 2.0).ceil()).min(frame_h as f64) as usize;
        PixelBox {
            x0: x0.min(frame_w.saturating_sub(1)),
            y0: y0.min(frame_h.saturating_sub(1)),
            w: x1.saturating_sub(x0).max(1),
            h: y1.saturating_sub(y0).max(1),
        }
    }
}

fn overlap(lo: f64, hi: f64, a: f64, b: f64) -> f64 {
    (hi.min(b) - lo.max(a)).clamp(0.0, 1.0)
}

/// Rasterizes the scene: shaded lead body on a flat background, sub-pixel
/// coverage at all four edges, then photometrics and clamping.
/// Deterministic given the RNG state.
pub fn render_frame(
    world: &WorldState,
    params: &RenderParams,
    frame_index: u64,
    rng: &mut ChaCha8Rng,
) -> Frame {
    let mut frame = Frame::filled(params.frame_h, params.frame_w, params.background);
    frame.index = frame_index;

    if world.rd_true > 0.0 {
        let body = params.project(world.rd_true);
        let left = body.cx - body.w_px / 2.0;
        let right = body.cx + body.w_px / 2.0;
        let top = body.cy - body.h_px / 2.0;
        let bottom = body.cy + body.h_px / 2.0;
        let half_w = body.w_px / 2.0;

        let c0 = left.floor().max(0.0) as usize;
        let c1 = (right.ceil() as usize).min(params.frame_w);
        let r0 = top.floor().max(0.0) as usize;
        let r1 = (bottom.ceil() as usize).min(params.frame_h);

        let profile = |xi: f64| -> f64 {
            let xi = xi.abs().min(1.0);
            if xi <= params.plateau_frac {
                params.body_peak
            } else if xi <= params.mid_frac {
                let t = (xi - params.plateau_frac) / (params.mid_frac - params.plateau_frac);
                params.body_peak + t * (params.body_mid - params.body_peak)
            } else {
                let t = (xi - params.mid_frac) / (1.0 - params.mid_frac);
                params.body_mid + t * (params.body_edge - params.body_mid)
            }
        };
        for c in c0..c1 {
            let cov_x = overlap(c as f64, c as f64 + 1.0, left, right);
            if cov_x <= 0.0 {
                continue;
            }
            // Shading averaged over the column's horizontal span so the
            // rendered profile stays scale-consistent at small widths.
            let lo = (c as f64).max(left);
            let hi = (c as f64 + 1.0).min(right);
            let mut intensity = 0.0;
            let sub = 16;
            for k in 0..sub {
                let x = lo + (k as f64 + 0.5) / sub as f64 * (hi - lo);
                intensity += profile((x - body.cx) / half_w);
            }
            intensity /= sub as f64;
            for r in r0..r1 {
                let cov = cov_x * overlap(r as f64, r as f64 + 1.0, top, bottom);
                if cov > 0.0 {
                    let v = frame.get(r, c);
                    frame.set(r, c, v + (intensity - v) * cov);
                }
            }
        }
    }

    // Photometrics, then additive noise, then clamp.
    for v in frame.px.iter_mut() {
        let mut x = params.contrast * (*v - 0.5) + 0.5 + params.brightness;
        if params.sigma_img > 0.0 {
            x += params.sigma_img * gaussian(rng);
        }
        *v = x.clamp(0.0, 1.0);
    }
    frame
}

/// Standard normal via Box-Muller. Two uniforms per sample keeps the RNG
/// stream position independent of internal caching.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// One radar sweep: noisy (range, range-rate) points around the true lead.
#[derive(Debug, Clone, Default)]
pub struct RadarReturn {
    pub points: Vec<(f64, f64)>,
}

/// Radar noise and clustering parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RadarParams {
    pub sigma_range: f64,
    pub sigma_rate: f64,
    pub n_points: usize,
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for RadarParams {
    fn default() -> Self {
        RadarParams {
            sigma_range: 0.3,
            sigma_rate: 0.2,
            n_points: 16,
            eps: 1.0,
            min_pts: 4,
        }
    }
}

/// Samples `n_points` radar returns around the true range and closing rate.
pub fn radar_scan(world: &WorldState, params: &RadarParams, rng: &mut ChaCha8Rng) -> RadarReturn {
    let mut ret = RadarReturn::default();
    if world.rd_true <= 0.0 {
        return ret;
    }
    let rs = world.rs_true();
    for _ in 0..params.n_points {
        let r = (world.rd_true + params.sigma_range * gaussian(rng)).max(1e-3);
        let v = rs + params.sigma_rate * gaussian(rng);
        ret.points.push((r, v));
    }
    ret
}

/// Density-based clustering over the 2D radar points; returns the mean of
/// the largest cluster, or `None` when no cluster forms (no radar lead).
pub fn dbscan_reduce(ret: &RadarReturn, eps: f64, min_pts: usize) -> Option<(f64, f64)> {
    let labels = dbscan_labels(&ret.points, eps, min_pts);
    let n_clusters = labels.iter().filter_map(|l| *l).max().map_or(0, |m| m + 1);
    if n_clusters == 0 {
        return None;
    }
    let mut best: Option<(usize, usize)> = None; // (cluster id, size)
    for cid in 0..n_clusters {
        let size = labels.iter().filter(|l| **l == Some(cid)).count();
        if best.map_or(true, |(_, s)| size > s) {
            best = Some((cid, size));
        }
    }
    let (cid, size) = best?;
    let (mut sr, mut sv) = (0.0, 0.0);
    for (p, l) in ret.points.iter().zip(&labels) {
        if *l == Some(cid) {
            sr += p.0;
            sv += p.1;
        }
    }
    Some((sr / size as f64, sv / size as f64))
}

/// Standard DBSCAN over 2D points with Euclidean distance. `None` marks
/// noise points. Cluster ids are assigned in first-seen order, which keeps
/// the labeling deterministic.
pub fn dbscan_labels(points: &[(f64, f64)], eps: f64, min_pts: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut visited = vec![false; n];
    let eps2 = eps * eps;

    let neighbors = |i: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| {
                let dx = points[i].0 - points[j].0;
                let dy = points[i].1 - points[j].1;
                dx * dx + dy * dy <= eps2
            })
            .collect()
    };

    let mut next_cluster = 0usize;
    for i in 0..n {
        if visited[i] {
            continue;
        }
        visited[i] = true;
        let nbrs = neighbors(i);
        if nbrs.len() < min_pts {
            continue; // noise unless later absorbed as a border point
        }
        let cid = next_cluster;
        next_cluster += 1;
        labels[i] = Some(cid);
        let mut queue: Vec<usize> = nbrs;
        let mut qi = 0;
        while qi < queue.len() {
            let j = queue[qi];
            qi += 1;
            if !visited[j] {
                visited[j] = true;
                let jn = neighbors(j);
                if jn.len() >= min_pts {
                    queue.extend(jn);
                }
            }
            if labels[j].is_none() {
                labels[j] = Some(cid);
            }
        }
    }
    labels
}
