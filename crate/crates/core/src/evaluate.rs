//! Flow metrics, the evaluation report and flow visualization.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{FlowField, Image, Mask};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Fl-all thresholds: absolute pixels and fraction of the true magnitude.
pub const FL_ABS: f64 = 3.0;
pub const FL_REL: f64 = 0.05;
/// Sobel response (normalized to px/px) above which a pixel is a motion edge.
pub const EDGE_THRESHOLD: f64 = 1.0;
pub const BAND_RADIUS: usize = 2;

fn check(flow: &FlowField, gt: &FlowField, valid: &Mask) -> Result<usize> {
    if (flow.height(), flow.width()) != (gt.height(), gt.width())
        || (valid.height(), valid.width()) != (gt.height(), gt.width())
    {
        return Err(Error::arg("flow, ground truth and mask sizes differ"));
    }
    let n = valid.count();
    if n == 0 {
        return Err(Error::degenerate("no valid pixels to evaluate"));
    }
    Ok(n)
}

fn endpoint(flow: &FlowField, gt: &FlowField, i: usize) -> f64 {
    (flow.u()[i] - gt.u()[i]).hypot(flow.v()[i] - gt.v()[i])
}

/// Mean endpoint error over valid pixels.
pub fn epe(flow: &FlowField, gt: &FlowField, valid: &Mask) -> Result<f64> {
    let n = check(flow, gt, valid)?;
    let s: f64 = (0..valid.data().len())
        .filter(|i| valid.data()[*i] == 1)
        .map(|i| endpoint(flow, gt, i))
        .sum();
    Ok(s / n as f64)
}

/// Percentage of valid pixels with error above 3 px and above 5% of `|gt|`.
pub fn fl_all(flow: &FlowField, gt: &FlowField, valid: &Mask) -> Result<f64> {
    let n = check(flow, gt, valid)?;
    let bad = (0..valid.data().len())
        .filter(|i| valid.data()[*i] == 1)
        .filter(|&i| {
            let e = endpoint(flow, gt, i);
            e > FL_ABS && e > FL_REL * gt.u()[i].hypot(gt.v()[i])
        })
        .count();
    Ok(100.0 * bad as f64 / n as f64)
}

/// Motion-boundary band: pixels within 2 px of a ground-truth flow edge.
///
/// An edge is a pixel where the Sobel gradient norm of `(u, v)`, divided by
/// 8 to read in px/px, exceeds 1.
pub fn boundary_band(gt: &FlowField) -> Mask {
    let (h, w) = (gt.height(), gt.width());
    let at = |p: &[f64], y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        p[yy * w + xx]
    };
    let sobel = |p: &[f64], y: isize, x: isize| -> (f64, f64) {
        let gx = (at(p, y - 1, x + 1) + 2.0 * at(p, y, x + 1) + at(p, y + 1, x + 1))
            - (at(p, y - 1, x - 1) + 2.0 * at(p, y, x - 1) + at(p, y + 1, x - 1));
        let gy = (at(p, y + 1, x - 1) + 2.0 * at(p, y + 1, x) + at(p, y + 1, x + 1))
            - (at(p, y - 1, x - 1) + 2.0 * at(p, y - 1, x) + at(p, y - 1, x + 1));
        (gx / 8.0, gy / 8.0)
    };
    let edges = Mask::from_fn(h, w, |x, y| {
        let (ux, uy) = sobel(gt.u(), y as isize, x as isize);
        let (vx, vy) = sobel(gt.v(), y as isize, x as isize);
        (ux * ux + uy * uy + vx * vx + vy * vy).sqrt() > EDGE_THRESHOLD
    });
    let r = BAND_RADIUS as isize;
    Mask::from_fn(h, w, |x, y| {
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && edges.get(yy as usize, xx as usize) {
                    return true;
                }
            }
        }
        false
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub epe: f64,
    pub fl_all: f64,
    /// `None` when the sample has no motion edges.
    pub boundary_epe: Option<f64>,
    pub boundary_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub model: String,
    pub domain: String,
    pub sample_count: usize,
    pub mean_epe: f64,
    pub mean_fl_all: f64,
    /// EPE pooled over all boundary-band pixels of all samples.
    pub boundary_epe: Option<f64>,
    pub samples: Vec<SampleMetrics>,
}

/// Scores one prediction against ground truth on all pixels.
pub fn score_sample(id: &str, flow: &FlowField, gt: &FlowField) -> Result<(SampleMetrics, f64)> {
    let all = Mask::filled(gt.height(), gt.width(), true);
    let band = boundary_band(gt);
    let band_n = band.count();
    let band_sum = if band_n > 0 { epe(flow, gt, &band)? * band_n as f64 } else { 0.0 };
    Ok((
        SampleMetrics {
            id: id.to_string(),
            epe: epe(flow, gt, &all)?,
            fl_all: fl_all(flow, gt, &all)?,
            boundary_epe: (band_n > 0).then(|| band_sum / band_n as f64),
            boundary_pixels: band_n,
        },
        band_sum,
    ))
}

/// Builds a report from `(id, prediction, ground truth)` triples.
pub fn build_report(model: &str, domain: &str, items: &[(String, FlowField, FlowField)]) -> Result<EvalReport> {
    if items.is_empty() {
        return Err(Error::arg("evaluation needs at least one sample"));
    }
    let mut samples = Vec::with_capacity(items.len());
    let mut band_sum = 0.0;
    let mut band_n = 0;
    for (id, flow, gt) in items {
        let (m, s) = score_sample(id, flow, gt)?;
        band_sum += s;
        band_n += m.boundary_pixels;
        samples.push(m);
    }
    let n = samples.len() as f64;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        model: model.to_string(),
        domain: domain.to_string(),
        sample_count: samples.len(),
        mean_epe: samples.iter().map(|s| s.epe).sum::<f64>() / n,
        mean_fl_all: samples.iter().map(|s| s.fl_all).sum::<f64>() / n,
        boundary_epe: (band_n > 0).then(|| band_sum / band_n as f64),
        samples,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,epe,fl_all,boundary_epe,boundary_pixels\n");
        for s in &self.samples {
            let b = s.boundary_epe.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{},{}", s.id, s.epe, s.fl_all, b, s.boundary_pixels).expect("string write");
        }
        out
    }
}

// ---- color wheel --------------------------------------------------------

/// The Middlebury color wheel: 55 hues from red through yellow, green,
/// cyan, blue and magenta.
pub fn color_wheel() -> Vec<[f64; 3]> {
    let segments: [(usize, [f64; 3], [f64; 3]); 6] = [
        (15, [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]),
        (6, [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]),
        (4, [0.0, 1.0, 0.0], [0.0, 1.0, 1.0]),
        (11, [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]),
        (13, [0.0, 0.0, 1.0], [1.0, 0.0, 1.0]),
        (6, [1.0, 0.0, 1.0], [1.0, 0.0, 0.0]),
    ];
    let mut wheel = Vec::with_capacity(55);
    for (n, a, b) in segments {
        for i in 0..n {
            let t = i as f64 / n as f64;
            wheel.push([0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * t));
        }
    }
    wheel
}

/// Fractional wheel index of a flow direction.
pub fn wheel_position(u: f64, v: f64, ncols: usize) -> f64 {
    let a = (-v).atan2(-u) / PI;
    (a + 1.0) / 2.0 * (ncols - 1) as f64
}

/// Renders flow with the color wheel; magnitude is normalized by its
/// 99th percentile and saturates outside the unit disc.
pub fn flow_to_color(flow: &FlowField) -> Result<Image> {
    let (h, w) = (flow.height(), flow.width());
    let hw = h * w;
    let mut mags: Vec<f64> = (0..hw).map(|i| flow.u()[i].hypot(flow.v()[i])).collect();
    if mags.iter().any(|m| !m.is_finite()) {
        return Err(Error::arg("flow visualization needs finite flow"));
    }
    let mut sorted = mags.clone();
    sorted.sort_by(f64::total_cmp);
    let p99 = sorted[((hw as f64 * 0.99).ceil() as usize).clamp(1, hw) - 1];
    let scale = if p99 > 0.0 { p99 } else { 1.0 };
    let wheel = color_wheel();
    let ncols = wheel.len();
    let mut data = vec![0.0; 3 * hw];
    for (i, m) in mags.iter_mut().enumerate() {
        let rad = *m / scale;
        let fk = wheel_position(flow.u()[i], flow.v()[i], ncols);
        let k0 = (fk.floor() as usize) % ncols;
        let k1 = (k0 + 1) % ncols;
        let f = fk - fk.floor();
        for c in 0..3 {
            let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
            let v = if rad <= 1.0 { 1.0 - rad * (1.0 - col) } else { col * 0.75 };
            data[c * hw + i] = v.clamp(0.0, 1.0);
        }
    }
    Image::new(h, w, 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        let gt = FlowField::constant(16, 16, 1.0, -2.0).unwrap();
        let f = FlowField::constant(16, 16, 4.0, 2.0).unwrap();
        let all = Mask::filled(16, 16, true);
        assert!((epe(&f, &gt, &all).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(epe(&gt, &gt, &all).unwrap(), 0.0);
        assert!(matches!(epe(&f, &gt, &Mask::filled(16, 16, false)), Err(Error::Degenerate(_))));
    }

    #[test]
    fn fl_all_rule() {
        let all = Mask::filled(16, 16, true);
        let gt = FlowField::constant(16, 16, 100.0, 0.0);
        // 100 px exceeds the width sanity bound of a 16 px field.
        assert!(gt.is_err());
        let gt = FlowField::constant(128, 128, 100.0, 0.0).unwrap();
        let f = FlowField::constant(128, 128, 96.0, 0.0).unwrap();
        assert_eq!(fl_all(&f, &gt, &Mask::filled(128, 128, true)).unwrap(), 0.0);
        let gt = FlowField::constant(16, 16, 10.0, 0.0).unwrap();
        let f = FlowField::constant(16, 16, 6.0, 0.0).unwrap();
        assert_eq!(fl_all(&f, &gt, &all).unwrap(), 100.0);
    }

    #[test]
    fn zero_flow_renders_white() {
        let img = flow_to_color(&FlowField::zeros(16, 16)).unwrap();
        assert!(img.data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn constant_flow_is_one_hue() {
        let img = flow_to_color(&FlowField::constant(16, 16, 2.0, 0.0).unwrap()).unwrap();
        let first = [img.get(0, 0, 0), img.get(1, 0, 0), img.get(2, 0, 0)];
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!([img.get(0, y, x), img.get(1, y, x), img.get(2, y, x)], first);
            }
        }
    }

    #[test]
    fn opposite_flows_are_half_a_wheel_apart() {
        let n = color_wheel().len();
        assert_eq!(n, 55);
        for (u, v) in [(1.0, 0.3), (-0.2, 2.0), (0.7, -0.7)] {
            let a = wheel_position(u, v, n);
            let b = wheel_position(-u, -v, n);
            assert!(((a - b).abs() - (n - 1) as f64 / 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn band_around_translating_edge() {
        let u: Vec<f64> = (0..32 * 32).map(|i| if i % 32 >= 16 { 3.0 } else { 0.0 }).collect();
        let gt = FlowField::new(32, 32, u, vec![0.0; 1024]).unwrap();
        let band = boundary_band(&gt);
        for x in 0..32 {
            assert_eq!(band.get(10, x), (13..=18).contains(&x), "x = {x}");
        }
    }
}
