//! Integrate-and-fire event simulation on log intensity.

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::tensor::Tensor;

/// Floor added before taking the log of an intensity.
pub const LOG_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub x: u32,
    pub y: u32,
    /// Seconds.
    pub t: f64,
    /// `+1` for brightening, `-1` for darkening.
    pub p: i8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    events: Vec<Event>,
    height: usize,
    width: usize,
    contrast: f64,
}

impl EventStream {
    /// Validates ordering, bounds and polarity.
    pub fn new(events: Vec<Event>, height: usize, width: usize, contrast: f64) -> Result<Self> {
        if !(contrast > 0.0 && contrast.is_finite()) {
            return Err(Error::arg(format!("contrast threshold must be positive, got {contrast}")));
        }
        for pair in events.windows(2) {
            if pair[1].t < pair[0].t {
                return Err(Error::arg("event timestamps must be non-decreasing"));
            }
        }
        if let Some(e) = events
            .iter()
            .find(|e| e.x as usize >= width || e.y as usize >= height || (e.p != 1 && e.p != -1) || !e.t.is_finite())
        {
            return Err(Error::arg(format!("invalid event {e:?} for {height}x{width} sensor")));
        }
        Ok(EventStream {
            events,
            height,
            width,
            contrast,
        })
    }

    pub fn empty(height: usize, width: usize, contrast: f64) -> Result<Self> {
        Self::new(Vec::new(), height, width, contrast)
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn contrast(&self) -> f64 {
        self.contrast
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventSimConfig {
    pub contrast: f64,
    pub substeps: usize,
}

impl Default for EventSimConfig {
    fn default() -> Self {
        EventSimConfig {
            contrast: 0.15,
            substeps: 10,
        }
    }
}

/// Emits an event each time `log(I + eps)` moves a full `contrast` away
/// from the level of the previous event at that pixel.
///
/// Log intensity is interpolated linearly between frames and sampled at
/// `substeps` points per interval; crossing times are interpolated within
/// each substep and rounded to nanoseconds.
pub fn simulate_events(frames: &[Image], timestamps: &[f64], cfg: EventSimConfig) -> Result<EventStream> {
    if frames.len() < 2 {
        return Err(Error::arg("event simulation needs at least two frames"));
    }
    if timestamps.len() != frames.len() {
        return Err(Error::arg("one timestamp per frame is required"));
    }
    if timestamps.windows(2).any(|p| !(p[1] > p[0])) {
        return Err(Error::arg("frame timestamps must increase"));
    }
    if cfg.substeps == 0 {
        return Err(Error::arg("substeps must be at least 1"));
    }
    if !(cfg.contrast > 0.0) {
        return Err(Error::arg("contrast threshold must be positive"));
    }
    let (h, w) = (frames[0].height(), frames[0].width());
    if frames.iter().any(|f| f.height() != h || f.width() != w) {
        return Err(Error::arg("all frames must share one size"));
    }
    let logs: Vec<Vec<f64>> = frames
        .iter()
        .map(|f| f.to_gray().data().iter().map(|v| (v + LOG_EPS).ln()).collect())
        .collect();
    let c = cfg.contrast;
    let mut events = Vec::new();
    for i in 0..h * w {
        let base = logs[0][i];
        let mut level: i64 = 0;
        for k in 0..frames.len() - 1 {
            let (la, lb) = (logs[k][i], logs[k + 1][i]);
            let (ta, tb) = (timestamps[k], timestamps[k + 1]);
            let mut prev = la;
            for s in 1..=cfg.substeps {
                let frac_prev = (s - 1) as f64 / cfg.substeps as f64;
                let frac = s as f64 / cfg.substeps as f64;
                let cur = la + (lb - la) * frac;
                let (t_prev, t_cur) = (ta + (tb - ta) * frac_prev, ta + (tb - ta) * frac);
                let crossing = |target: f64| -> f64 {
                    let a = if cur != prev { ((target - prev) / (cur - prev)).clamp(0.0, 1.0) } else { 1.0 };
                    ((t_prev + a * (t_cur - t_prev)) * 1e9).round() / 1e9
                };
                while cur >= base + (level + 1) as f64 * c {
                    level += 1;
                    events.push(pixel_event(i, w, crossing(base + level as f64 * c), 1));
                }
                while cur <= base + (level - 1) as f64 * c {
                    level -= 1;
                    events.push(pixel_event(i, w, crossing(base + level as f64 * c), -1));
                }
                prev = cur;
            }
        }
    }
    events.sort_by(|a, b| a.t.total_cmp(&b.t).then(a.y.cmp(&b.y)).then(a.x.cmp(&b.x)));
    EventStream::new(events, h, w, c)
}

fn pixel_event(i: usize, w: usize, t: f64, p: i8) -> Event {
    Event {
        x: (i % w) as u32,
        y: (i / w) as u32,
        t,
        p,
    }
}

/// `C * sum(p)` per pixel over events with `t0 <= t < t1`, as `[1,H,W]`.
pub fn accumulate_events(stream: &EventStream, t0: f64, t1: f64) -> Result<Tensor> {
    if !(t0 < t1) {
        return Err(Error::arg(format!("accumulation window [{t0}, {t1}) is empty")));
    }
    let (h, w) = (stream.height, stream.width);
    let mut map = vec![0.0; h * w];
    for e in stream.events.iter().filter(|e| e.t >= t0 && e.t < t1) {
        map[e.y as usize * w + e.x as usize] += e.p as f64 * stream.contrast;
    }
    Tensor::new(vec![1, h, w], map)
}

/// Splits `[t0, t1]` into `bins` equal slices, each a `[2,H,W]` map of
/// positive and negative event counts scaled by the contrast threshold.
/// The final slice includes `t1`.
pub fn event_slices(stream: &EventStream, t0: f64, t1: f64, bins: usize) -> Result<Vec<Tensor>> {
    if !(t0 < t1) || bins == 0 {
        return Err(Error::arg("event slicing needs a non-empty window and at least one bin"));
    }
    let (h, w) = (stream.height, stream.width);
    let hw = h * w;
    let mut slices = vec![vec![0.0; 2 * hw]; bins];
    let span = t1 - t0;
    for e in &stream.events {
        if e.t < t0 || e.t > t1 {
            continue;
        }
        let b = (((e.t - t0) / span * bins as f64).floor() as usize).min(bins - 1);
        let ch = if e.p > 0 { 0 } else { 1 };
        slices[b][ch * hw + e.y as usize * w + e.x as usize] += stream.contrast;
    }
    slices.into_iter().map(|d| Tensor::new(vec![2, h, w], d)).collect()
}
