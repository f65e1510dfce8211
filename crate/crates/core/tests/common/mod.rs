//! Brute-force oracles and property sweeps shared by the integration tests
//! and the acceptance target.

#![allow(dead_code)]

use nightflow::appearance;
use nightflow::boundary;
use nightflow::evaluate;
use nightflow::flowcore;
use nightflow::synthdata::{self, EventSimConfig, NoiseSpec, SampleConfig, LOG_EPS};
use nightflow::{FlowField, Image, Mask, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn random_flow(rng: &mut ChaCha8Rng, h: usize, w: usize, mag: f64) -> FlowField {
    let u = (0..h * w).map(|_| rng.random_range(-mag..mag)).collect();
    let v = (0..h * w).map(|_| rng.random_range(-mag..mag)).collect();
    FlowField::new(h, w, u, v).unwrap()
}

/// Random mask with at least one set pixel.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
    let mut data: Vec<u8> = (0..h * w).map(|_| rng.random_bool(p) as u8).collect();
    let i = rng.random_range(0..h * w);
    data[i] = 1;
    Mask::new(h, w, data).unwrap()
}

fn unit_features(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
    let mut t = random_tensor(rng, &[c, h, w], -1.0, 1.0);
    let hw = h * w;
    let d = t.data_mut();
    for i in 0..hw {
        let n = (0..c).map(|k| d[k * hw + i].powi(2)).sum::<f64>().sqrt();
        for k in 0..c {
            d[k * hw + i] /= n;
        }
    }
    t
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- oracles --------------------------------------------------------------

/// Triple-loop correlation; out-of-frame displacements are -1.
pub fn cost_volume_oracle(a: &Tensor, b: &Tensor, r: usize) -> Vec<f64> {
    let (c, h, w) = a.chw();
    let side = 2 * r + 1;
    let mut out = Vec::with_capacity(side * side * h * w);
    for dy in -(r as i64)..=r as i64 {
        for dx in -(r as i64)..=r as i64 {
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let (yy, xx) = (y + dy, x + dx);
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        out.push(-1.0);
                        continue;
                    }
                    let mut s = 0.0;
                    for k in 0..c {
                        s += a.data()[(k * h + y as usize) * w + x as usize] * b.data()[(k * h + yy as usize) * w + xx as usize];
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

/// Tent-weight bilinear sampling at clamped source coordinates.
pub fn warp_oracle(map: &Tensor, flow: &FlowField) -> Vec<f64> {
    let (c, h, w) = map.chw();
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.at(y, x);
            let sx = (x as f64 + u).clamp(0.0, (w - 1) as f64);
            let sy = (y as f64 + v).clamp(0.0, (h - 1) as f64);
            for k in 0..c {
                let mut acc = 0.0;
                for yy in 0..h {
                    let wy = (1.0 - (sy - yy as f64).abs()).max(0.0);
                    if wy == 0.0 {
                        continue;
                    }
                    for xx in 0..w {
                        let wx = (1.0 - (sx - xx as f64).abs()).max(0.0);
                        acc += wy * wx * map.data()[(k * h + yy) * w + xx];
                    }
                }
                out[(k * h + y) * w + x] = acc;
            }
        }
    }
    out
}

pub fn epe_oracle(f: &FlowField, g: &FlowField, m: &Mask) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for y in 0..f.height() {
        for x in 0..f.width() {
            if m.get(y, x) {
                let (a, b) = (f.at(y, x), g.at(y, x));
                s += ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                n += 1.0;
            }
        }
    }
    s / n
}

pub fn fl_all_oracle(f: &FlowField, g: &FlowField, m: &Mask) -> f64 {
    let (mut bad, mut n) = (0.0, 0.0);
    for y in 0..f.height() {
        for x in 0..f.width() {
            if m.get(y, x) {
                let (a, b) = (f.at(y, x), g.at(y, x));
                let err = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                let mag = (b.0 * b.0 + b.1 * b.1).sqrt();
                if err > 3.0 && err > 0.05 * mag {
                    bad += 1.0;
                }
                n += 1.0;
            }
        }
    }
    100.0 * bad / n
}

pub fn masked_l1_oracle(a: &FlowField, b: &FlowField, m: &Mask) -> f64 {
    let (mut s, mut n) = (0.0, 0.0);
    for y in 0..a.height() {
        for x in 0..a.width() {
            if m.get(y, x) {
                let (p, q) = (a.at(y, x), b.at(y, x));
                s += (p.0 - q.0).abs() + (p.1 - q.1).abs();
                n += 1.0;
            }
        }
    }
    s / n
}

fn softmax_column(t: &Tensor, i: usize) -> Vec<f64> {
    let (c, h, w) = t.chw();
    let col: Vec<f64> = (0..c).map(|k| t.data()[k * h * w + i]).collect();
    let z: f64 = col.iter().map(|v| v.exp()).sum();
    col.iter().map(|v| v.exp() / z).collect()
}

/// Pixel-mean of `sum_c p log(p / q)` with direct exp / sum softmaxes.
pub fn kl_oracle(p: &Tensor, q: &Tensor) -> f64 {
    let (_, h, w) = p.chw();
    let mut s = 0.0;
    for i in 0..h * w {
        let (a, b) = (softmax_column(p, i), softmax_column(q, i));
        s += a.iter().zip(&b).map(|(x, y)| x * (x / y).ln()).sum::<f64>();
    }
    s / (h * w) as f64
}

pub fn histogram_oracle(values: &[f64], bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    for &v in values {
        let v = v.clamp(0.0, 1.0);
        let b = (0..bins)
            .find(|&b| {
                let (lo, hi) = (b as f64 / bins as f64, (b + 1) as f64 / bins as f64);
                v >= lo && (v < hi || b == bins - 1)
            })
            .unwrap();
        counts[b] += 1;
    }
    counts
}

/// Largest absolute deviation of each library routine from its oracle over
/// `seeds` random instances.
pub fn oracle_suite(seeds: std::ops::Range<u64>) -> Vec<(&'static str, f64)> {
    let mut worst = [0.0f64; 8];
    for seed in seeds {
        let mut r = rng(seed);
        let (h, w) = (r.random_range(2..9), r.random_range(2..9));

        let c = r.random_range(1..5);
        let radius = r.random_range(1..4);
        let (a, b) = (unit_features(&mut r, c, h, w), unit_features(&mut r, c, h, w));
        let cv = flowcore::cost_volume(&a, &b, None, radius).unwrap();
        worst[0] = worst[0].max(max_abs_diff(cv.data(), &cost_volume_oracle(&a, &b, radius)));

        let map = random_tensor(&mut r, &[c, h, w], 0.0, 1.0);
        let mag = h.min(w) as f64;
        let flow = random_flow(&mut r, h, w, mag);
        let (warped, _) = flowcore::warp(&map, &flow).unwrap();
        worst[1] = worst[1].max(max_abs_diff(warped.data(), &warp_oracle(&map, &flow)));

        let f = random_flow(&mut r, h, w, mag);
        let gt = random_flow(&mut r, h, w, mag);
        let m = random_mask(&mut r, h, w, 0.6);
        worst[2] = worst[2].max((evaluate::epe(&f, &gt, &m).unwrap() - epe_oracle(&f, &gt, &m)).abs());
        worst[3] = worst[3].max((evaluate::fl_all(&f, &gt, &m).unwrap() - fl_all_oracle(&f, &gt, &m)).abs());
        worst[4] = worst[4].max((boundary::motion_consistency_loss(&f, &gt, &m).unwrap() - masked_l1_oracle(&f, &gt, &m)).abs());

        let d = r.random_range(2..10);
        let p = random_tensor(&mut r, &[d, h, w], -3.0, 3.0);
        let q = random_tensor(&mut r, &[d, h, w], -3.0, 3.0);
        worst[5] = worst[5].max((appearance::kl_cost_loss(&p, &q).unwrap() - kl_oracle(&p, &q)).abs());
        let (p2, q2) = (random_tensor(&mut r, &[d, h, w], -3.0, 3.0), random_tensor(&mut r, &[d, h, w], -3.0, 3.0));
        let rn: Vec<f64> = p.data().iter().zip(p2.data()).map(|(x, y)| x - y).collect();
        let rd: Vec<f64> = q.data().iter().zip(q2.data()).map(|(x, y)| x - y).collect();
        let inter = appearance::inter_align_loss(&q, &q2, &p, &p2).unwrap();
        let inter_oracle = kl_oracle(&Tensor::new(vec![d, h, w], rn).unwrap(), &Tensor::new(vec![d, h, w], rd).unwrap());
        worst[6] = worst[6].max((inter - inter_oracle).abs());

        let bins = r.random_range(2..12);
        let mut corr = random_tensor(&mut r, &[1, h, w], 0.0, 1.0);
        corr.data_mut()[0] = 1.0;
        corr.data_mut()[h * w - 1] = 0.0;
        let (edges, counts) = boundary::correlation_histogram(&corr, bins).unwrap();
        let expect = histogram_oracle(corr.data(), bins);
        let edge_err = edges.iter().enumerate().map(|(i, e)| (e - i as f64 / bins as f64).abs()).fold(0.0, f64::max);
        let count_err = counts.iter().zip(&expect).map(|(a, b)| (*a as f64 - *b as f64).abs()).fold(0.0, f64::max);
        worst[7] = worst[7].max(edge_err.max(count_err));
    }
    let names = ["cost volume", "warp", "EPE", "Fl-all", "masked L1", "KL cost", "KL residual", "histogram"];
    names.into_iter().zip(worst).collect()
}

// ---- events -----------------------------------------------------------------

/// Random positive frames forming a short sequence.
pub fn random_sequence(rng: &mut ChaCha8Rng, h: usize, w: usize, frames: usize) -> Vec<Image> {
    (0..frames)
        .map(|_| Image::from_fn(h, w, |_, _| rng.random_range(0.0..1.0)).unwrap())
        .collect()
}

/// Largest `|C * count - dlog| - C` over all pixels (non-positive when every
/// pixel is within one threshold) and the fraction of pixels within bound.
pub fn event_round_trip(frames: &[Image], contrast: f64, substeps: usize) -> (f64, f64) {
    let ts: Vec<f64> = (0..frames.len()).map(|i| i as f64 * 0.01).collect();
    let stream = synthdata::simulate_events(frames, &ts, EventSimConfig { contrast, substeps }).unwrap();
    let end = *ts.last().unwrap();
    let acc = synthdata::accumulate_events(&stream, 0.0, end + 1.0).unwrap();
    let first = frames[0].to_gray();
    let last = frames[frames.len() - 1].to_gray();
    let mut excess = f64::NEG_INFINITY;
    let mut ok = 0usize;
    for (i, a) in acc.data().iter().enumerate() {
        let dlog = (last.data()[i] + LOG_EPS).ln() - (first.data()[i] + LOG_EPS).ln();
        let e = (a - dlog).abs() - contrast;
        excess = excess.max(e);
        if e <= 1e-12 {
            ok += 1;
        }
    }
    (excess, ok as f64 / acc.len() as f64)
}

/// Noise-free synthetic sample with displacements bounded by `max_disp`.
pub fn clean_sample(seed: u64, size: usize, max_disp: f64) -> synthdata::SceneSample {
    let cfg = SampleConfig {
        height: size,
        width: size,
        max_displacement: max_disp,
        noise: NoiseSpec { sigma: 0.0 },
        ..SampleConfig::default()
    };
    synthdata::generate_sample(seed, &cfg).unwrap()
}

/// Mean `|dL_ev - (-grad log I . U)|` of a noise-free sample's night frames.
pub fn st_gradient_gap(sample: &synthdata::SceneSample) -> f64 {
    let ev = sample.event_map();
    let st = boundary::image_st_gradient(&sample.night_t, &sample.gt_flow).unwrap();
    ev.data().iter().zip(st.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / ev.len() as f64
}

// ---- KL properties ----------------------------------------------------------

pub struct KlProperties {
    pub min_value: f64,
    pub max_identical: f64,
    pub max_shift_softmax: f64,
    pub max_shift_kl: f64,
}

pub fn kl_properties(instances: u64) -> KlProperties {
    let mut out = KlProperties {
        min_value: f64::INFINITY,
        max_identical: 0.0,
        max_shift_softmax: 0.0,
        max_shift_kl: 0.0,
    };
    for seed in 0..instances {
        let mut r = rng(10_000 + seed);
        let (d, h, w) = (r.random_range(2..12), r.random_range(1..6), r.random_range(1..6));
        let scale = r.random_range(0.1..20.0);
        let p = random_tensor(&mut r, &[d, h, w], -scale, scale);
        let q = random_tensor(&mut r, &[d, h, w], -scale, scale);
        let p2 = random_tensor(&mut r, &[d, h, w], -scale, scale);
        let q2 = random_tensor(&mut r, &[d, h, w], -scale, scale);
        let kl = appearance::kl_cost_loss(&p, &q).unwrap();
        let inter = appearance::inter_align_loss(&q, &q2, &p, &p2).unwrap();
        out.min_value = out.min_value.min(kl).min(inter);
        let same = appearance::kl_cost_loss(&p, &p).unwrap().abs();
        let same_inter = appearance::inter_align_loss(&q, &q2, &q, &q2).unwrap().abs();
        out.max_identical = out.max_identical.max(same).max(same_inter);

        // Per-pixel shift added to every channel.
        let shifts: Vec<f64> = (0..h * w).map(|_| r.random_range(-50.0..50.0)).collect();
        let shift = |t: &Tensor| {
            let mut s = t.clone();
            for (i, v) in s.data_mut().iter_mut().enumerate() {
                *v += shifts[i % (h * w)];
            }
            s
        };
        let sm = appearance::softmax_dist(&p);
        let sm_shift = appearance::softmax_dist(&shift(&p));
        out.max_shift_softmax = out.max_shift_softmax.max(max_abs_diff(sm.data(), sm_shift.data()));
        let kl_shift = appearance::kl_cost_loss(&shift(&p), &shift(&q)).unwrap();
        out.max_shift_kl = out.max_shift_kl.max((kl - kl_shift).abs());
    }
    out
}
