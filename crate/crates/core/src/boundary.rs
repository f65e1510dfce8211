//! Boundary adaptation: the spatiotemporal-gradient common space shared by
//! events and images, correlation maps and their histogram, attention-based
//! motion classes, contrastive transfer and masked flow consistency.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flowcore::{self, FlowPass};
use crate::graph::{Graph, Var};
use crate::nn::{init_conv, Binder, ParamStore};
use crate::raster::{FlowField, Image, Mask};
use crate::synthdata::{EventStream, LOG_EPS};
use crate::tensor::Tensor;

pub const ATTN_PREFIX: &str = "attn";
/// Probability floor inside the classification log.
pub const CLS_FLOOR: f64 = 1e-8;
/// Number of equal sub-windows in the event tensor.
pub const EVENT_BINS: usize = 5;

fn log_plane(img: &Image) -> Vec<f64> {
    img.to_gray().data().iter().map(|v| (v + LOG_EPS).ln()).collect()
}

/// `-(d/dx log I * u + d/dy log I * v)` as `[1,H,W]`.
///
/// Central differences inside, one-sided differences on the border.
pub fn image_st_gradient(image: &Image, flow: &FlowField) -> Result<Tensor> {
    let (h, w) = (image.height(), image.width());
    if flow.height() != h || flow.width() != w {
        return Err(Error::arg("spatiotemporal gradient: flow size differs from image"));
    }
    if h < 2 || w < 2 {
        return Err(Error::arg("spatiotemporal gradient needs at least 2x2 pixels"));
    }
    let l = log_plane(image);
    let at = |y: usize, x: usize| l[y * w + x];
    let deriv = |i: usize, n: usize, f: &dyn Fn(usize) -> f64| -> f64 {
        if i == 0 {
            f(1) - f(0)
        } else if i == n - 1 {
            f(n - 1) - f(n - 2)
        } else {
            0.5 * (f(i + 1) - f(i - 1))
        }
    };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let gx = deriv(x, w, &|xx| at(y, xx));
            let gy = deriv(y, h, &|yy| at(yy, x));
            let (u, v) = flow.at(y, x);
            out[y * w + x] = -(gx * u + gy * v);
        }
    }
    Tensor::new(vec![1, h, w], out)
}

/// Euclidean distance of `a - b` over a `patch x patch` window (clipped at
/// the border), min-max normalized to `[0, 1]`. Constant distances give zeros.
pub fn correlation_map(dl_ev: &Tensor, st_grad: &Tensor, patch: usize) -> Result<Tensor> {
    if dl_ev.shape() != st_grad.shape() {
        return Err(Error::arg(format!(
            "correlation map: shapes {:?} and {:?} differ",
            dl_ev.shape(),
            st_grad.shape()
        )));
    }
    if dl_ev.shape().len() != 3 || dl_ev.shape()[0] != 1 {
        return Err(Error::arg("correlation map inputs must be [1,H,W]"));
    }
    if patch % 2 == 0 {
        return Err(Error::arg("correlation patch size must be odd"));
    }
    let (_, h, w) = dl_ev.chw();
    let sq: Vec<f64> = dl_ev.data().iter().zip(st_grad.data()).map(|(a, b)| (a - b).powi(2)).collect();
    let r = (patch / 2) as isize;
    let mut dist = vec![0.0; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut s = 0.0;
            for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    s += sq[yy as usize * w + xx as usize];
                }
            }
            dist[y as usize * w + x as usize] = s.sqrt();
        }
    }
    let lo = dist.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = dist.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Numeric {
            term: "correlation map".into(),
        });
    }
    let span = hi - lo;
    let data = if span > 0.0 {
        dist.iter().map(|d| ((d - lo) / span).clamp(0.0, 1.0)).collect()
    } else {
        vec![0.0; h * w]
    };
    Tensor::new(vec![1, h, w], data)
}

/// Uniform histogram on `[0, 1]`; returns `bins + 1` edges and the counts.
/// The value 1 falls into the last bin.
pub fn correlation_histogram(corr: &Tensor, bins: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if bins < 2 {
        return Err(Error::arg(format!("histogram needs at least 2 bins, got {bins}")));
    }
    let edges = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut counts = vec![0; bins];
    for v in corr.data() {
        let b = ((v.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1);
        counts[b] += 1;
    }
    Ok((edges, counts))
}

/// Quantile classes of a correlation map: class 0 holds the lowest values.
///
/// With sorted values `s` and `n` pixels, the thresholds are
/// `q_k = s[floor(k n / K) - 1]` for `k = 1..K-1`, and a pixel's label is the
/// number of thresholds it exceeds. Ties share a label, so a constant map is
/// all class 0.
pub fn class_labels(corr: &Tensor, k: usize) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::arg(format!("need at least 2 motion classes, got {k}")));
    }
    let n = corr.len();
    if n == 0 {
        return Err(Error::arg("empty correlation map"));
    }
    let mut sorted = corr.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let thresholds: Vec<f64> = (1..k)
        .map(|c| {
            let idx = (c * n / k).max(1) - 1;
            sorted[idx]
        })
        .collect();
    Ok(corr
        .data()
        .iter()
        .map(|v| thresholds.iter().filter(|q| v > q).count())
        .collect())
}

pub fn init_attention(store: &mut ParamStore, rng: &mut ChaCha8Rng, classes: usize) {
    init_conv(store, rng, &format!("{ATTN_PREFIX}.c1"), 1, 16, 3);
    init_conv(store, rng, &format!("{ATTN_PREFIX}.c2"), 16, classes, 1);
}

/// Attention map `[K,H,W]` (softmax over classes) from a `[1,H,W]` correlation map.
pub fn attention_var(g: &mut Graph, b: Binder, corr: Var) -> Result<Var> {
    let h = b.conv_lrelu(g, &format!("{ATTN_PREFIX}.c1"), corr, 1)?;
    let logits = b.conv(g, &format!("{ATTN_PREFIX}.c2"), h, 1)?;
    Ok(g.softmax(logits, 0))
}

pub fn attention_net(store: &ParamStore, corr: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let c = g.constant(corr.clone());
    let a = attention_var(&mut g, Binder::frozen(store), c)?;
    Ok(g.value(a).clone())
}

fn one_hot(labels: &[usize], k: usize, h: usize, w: usize) -> Result<Tensor> {
    if labels.len() != h * w {
        return Err(Error::arg("label map size differs from attention map"));
    }
    let mut t = Tensor::zeros(&[k, h, w]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::arg(format!("label {y} outside [0, {k})")));
        }
        t.data_mut()[y * h * w + i] = 1.0;
    }
    Ok(t)
}

/// Pixel-mean of `-log A[y]`.
pub fn cls_loss_var(g: &mut Graph, a: Var, labels: &[usize]) -> Result<Var> {
    let (k, h, w) = g.value(a).chw();
    let y = g.constant(one_hot(labels, k, h, w)?);
    let la = g.log_floor(a, CLS_FLOOR);
    let picked = g.mul(la, y)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / (h * w) as f64))
}

pub fn cls_loss(a: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let l = cls_loss_var(&mut g, av, labels)?;
    Ok(g.scalar(l))
}

/// `V = (argmax_k A = 0) and (A_0 >= p0)`.
pub fn valid_mask(a: &Tensor, p0: f64) -> Result<Mask> {
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::arg(format!("threshold p0 = {p0} must lie in (0, 1)")));
    }
    let (k, h, w) = a.chw();
    let hw = h * w;
    let data = (0..hw)
        .map(|i| {
            let a0 = a.data()[i];
            let best = (1..k).all(|c| a.data()[c * hw + i] <= a0);
            (best && a0 >= p0) as u8
        })
        .collect();
    Mask::new(h, w, data)
}

/// Pixel indices drawn for one contrastive step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleIndices {
    /// Label-0 pixels, shared by night and event positives.
    pub positives: Vec<usize>,
    /// Pixels with a non-zero label.
    pub negatives: Vec<usize>,
}

/// Draws `n` class-0 and `n` non-zero-class pixels without replacement.
pub fn sample_indices(labels: &[usize], n: usize, rng: &mut ChaCha8Rng) -> Result<SampleIndices> {
    if n == 0 {
        return Err(Error::arg("sample count must be at least 1"));
    }
    let zero: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] == 0).collect();
    let other: Vec<usize> = (0..labels.len()).filter(|i| labels[*i] != 0).collect();
    if zero.len() < n {
        return Err(Error::degenerate(format!(
            "class 0 has {} pixels, {n} positives requested",
            zero.len()
        )));
    }
    if other.len() < n {
        return Err(Error::degenerate(format!(
            "classes 1..K have {} pixels, {n} negatives requested",
            other.len()
        )));
    }
    let pick = |pool: &[usize], rng: &mut ChaCha8Rng| -> Vec<usize> {
        sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect()
    };
    let positives = pick(&zero, rng);
    let negatives = pick(&other, rng);
    Ok(SampleIndices { positives, negatives })
}

/// Sampled feature rows on the tape, each `[N, D]` and row-normalized.
#[derive(Debug, Clone, Copy)]
pub struct SampleVars {
    pub positives_night: Var,
    pub positives_event: Var,
    pub negatives_night: Var,
}

/// Weights the cost volumes by the attention map and gathers normalized rows.
///
/// Positives use `A_0`, negatives `1 - A_0`.
pub fn sample_feature_vars(g: &mut Graph, cv_n: Var, cv_ev: Var, a: Var, idx: &SampleIndices) -> Result<SampleVars> {
    if g.value(cv_n).shape() != g.value(cv_ev).shape() {
        return Err(Error::arg("night and event cost volumes differ in shape"));
    }
    let a0 = g.select_channels(a, 0, 1)?;
    let neg_a0 = g.scale(a0, -1.0);
    let a_rest = g.add_const(neg_a0, 1.0);
    let wn = g.mul_broadcast(cv_n, a0)?;
    let we = g.mul_broadcast(cv_ev, a0)?;
    let wneg = g.mul_broadcast(cv_n, a_rest)?;
    let pn = g.gather_pixels(wn, &idx.positives)?;
    let pe = g.gather_pixels(we, &idx.positives)?;
    let nn = g.gather_pixels(wneg, &idx.negatives)?;
    Ok(SampleVars {
        positives_night: g.l2_normalize(pn, 1),
        positives_event: g.l2_normalize(pe, 1),
        negatives_night: g.l2_normalize(nn, 1),
    })
}

/// Value-level sample set.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub positives_night: Tensor,
    pub positives_event: Tensor,
    pub negatives_night: Tensor,
    pub indices: SampleIndices,
}

pub fn sample_features(
    cv_n: &Tensor,
    cv_ev: &Tensor,
    a: &Tensor,
    labels: &[usize],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SampleSet> {
    let idx = sample_indices(labels, n, rng)?;
    let mut g = Graph::new();
    let (cn, ce, av) = (g.constant(cv_n.clone()), g.constant(cv_ev.clone()), g.constant(a.clone()));
    let s = sample_feature_vars(&mut g, cn, ce, av, &idx)?;
    Ok(SampleSet {
        positives_night: g.value(s.positives_night).clone(),
        positives_event: g.value(s.positives_event).clone(),
        negatives_night: g.value(s.negatives_night).clone(),
        indices: idx,
    })
}

pub fn contrastive_var(g: &mut Graph, s: &SampleVars, tau: f64) -> Result<Var> {
    g.info_nce(s.positives_night, s.positives_event, s.negatives_night, tau)
}

pub fn contrastive_loss(s: &SampleSet, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let v = SampleVars {
        positives_night: g.constant(s.positives_night.clone()),
        positives_event: g.constant(s.positives_event.clone()),
        negatives_night: g.constant(s.negatives_night.clone()),
    };
    let l = contrastive_var(&mut g, &v, tau)?;
    Ok(g.scalar(l))
}

/// `sum |F_n - F_ev|_1 V / sum V` with the L1 norm over both flow channels.
pub fn motion_consistency_var(g: &mut Graph, f_n: Var, f_ev: Var, valid: &Mask) -> Result<Var> {
    let count = valid.count();
    if count == 0 {
        return Err(Error::degenerate("motion consistency: valid mask is empty"));
    }
    let (_, h, w) = g.value(f_n).chw();
    if g.value(f_ev).shape() != g.value(f_n).shape() || (valid.height(), valid.width()) != (h, w) {
        return Err(Error::arg("motion consistency: flow or mask sizes differ"));
    }
    let d = g.sub(f_n, f_ev)?;
    let a = g.abs(d);
    let v = g.constant(valid.to_tensor());
    let m = g.mul_broadcast(a, v)?;
    let s = g.sum(m);
    Ok(g.scale(s, 1.0 / count as f64))
}

pub fn motion_consistency_loss(f_n: &FlowField, f_ev: &FlowField, valid: &Mask) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(f_n.to_tensor());
    let b = g.constant(f_ev.to_tensor());
    let l = motion_consistency_var(&mut g, a, b, valid)?;
    Ok(g.scalar(l))
}

/// Splits event slices into the two inputs of the event flow network: the
/// mean of the first `n/2` slices and the mean of the last `n/2`. Returns the
/// pair and the factor rescaling their centre-to-centre motion to the full
/// window.
pub fn event_inputs(slices: &[Tensor]) -> Result<(Tensor, Tensor, f64)> {
    let n = slices.len();
    if n < 2 {
        return Err(Error::arg(format!("event flow needs at least 2 slices, got {n}")));
    }
    let shape = slices[0].shape().to_vec();
    if slices.iter().any(|s| s.shape() != shape.as_slice()) {
        return Err(Error::arg("event slices differ in shape"));
    }
    let k = n / 2;
    let avg = |range: std::ops::Range<usize>| {
        let mut acc = Tensor::zeros(&shape);
        for s in &slices[range] {
            acc.add_assign(s);
        }
        acc.scale(1.0 / k as f64);
        acc
    };
    Ok((avg(0..k), avg(n - k..n), n as f64 / (n - k) as f64))
}

/// Event flow pass on the tape; the returned flow is already rescaled.
pub fn event_flow_var(g: &mut Graph, b: Binder, prefix: &str, slices: &[Tensor], radius: usize) -> Result<(FlowPass, Var)> {
    let (ea, eb, factor) = event_inputs(slices)?;
    let a = g.constant(ea);
    let bb = g.constant(eb);
    let pass = flowcore::flow_pass(g, b, prefix, a, bb, radius)?;
    let flow = g.scale(pass.flow, factor);
    Ok((pass, flow))
}

pub fn event_flow_forward(store: &ParamStore, prefix: &str, slices: &[Tensor], radius: usize) -> Result<FlowField> {
    let mut g = Graph::new();
    let (_, flow) = event_flow_var(&mut g, Binder::frozen(store), prefix, slices, radius)?;
    FlowField::from_tensor(g.value(flow))
}

/// Event accumulation with each event moved back along `flow` to the start
/// of the window before binning.
pub fn accumulate_compensated(stream: &EventStream, t0: f64, t1: f64, flow: &FlowField) -> Result<Tensor> {
    if !(t0 < t1) {
        return Err(Error::arg(format!("accumulation window [{t0}, {t1}) is empty")));
    }
    let (h, w) = (stream.height(), stream.width());
    if flow.height() != h || flow.width() != w {
        return Err(Error::arg("compensation flow does not match the sensor size"));
    }
    let mut map = vec![0.0; h * w];
    for e in stream.events().iter().filter(|e| e.t >= t0 && e.t < t1) {
        let frac = (e.t - t0) / (t1 - t0);
        let (u, v) = flow.at(e.y as usize, e.x as usize);
        let x = (e.x as f64 - u * frac).round().clamp(0.0, (w - 1) as f64) as usize;
        let y = (e.y as f64 - v * frac).round().clamp(0.0, (h - 1) as f64) as usize;
        map[y * w + x] += e.p as f64 * stream.contrast();
    }
    Tensor::new(vec![1, h, w], map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn st_gradient_on_log_ramp() {
        let g = 0.05;
        let img = Image::from_fn(16, 16, |x, _| (0.1 * (g * x as f64).exp()) - LOG_EPS).unwrap();
        let st = image_st_gradient(&img, &FlowField::constant(16, 16, 1.5, 0.0).unwrap()).unwrap();
        assert!(st.data().iter().all(|v| (v + g * 1.5).abs() < 1e-9));
        let zero = image_st_gradient(&img, &FlowField::zeros(16, 16)).unwrap();
        assert!(zero.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn correlation_single_spike() {
        let a = Tensor::zeros(&[1, 8, 8]);
        let mut b = Tensor::zeros(&[1, 8, 8]);
        b.data_mut()[3 * 8 + 4] = 2.0;
        let c = correlation_map(&a, &b, 3).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let near = (y as i32 - 3).abs() <= 1 && (x as i32 - 4).abs() <= 1;
                assert_eq!(c.data()[y * 8 + x], if near { 1.0 } else { 0.0 });
            }
        }
        assert!(correlation_map(&b, &b, 3).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn labels_on_ramp_and_constant() {
        let ramp = Tensor::new(vec![1, 10, 10], (0..100).map(|i| i as f64 / 99.0).collect()).unwrap();
        let l = class_labels(&ramp, 10).unwrap();
        for c in 0..10 {
            assert_eq!(l.iter().filter(|v| **v == c).count(), 10);
        }
        assert!(class_labels(&Tensor::zeros(&[1, 4, 4]), 10).unwrap().iter().all(|v| *v == 0));
    }

    #[test]
    fn uniform_attention_loss_is_log_k() {
        let a = Tensor::full(&[10, 4, 4], 0.1);
        let l = cls_loss(&a, &[3; 16]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!(cls_loss(&a, &[10; 16]).is_err());
    }

    #[test]
    fn valid_mask_cases() {
        let mut a = Tensor::zeros(&[4, 2, 2]);
        a.data_mut()[..4].fill(1.0);
        assert_eq!(valid_mask(&a, 0.25).unwrap().count(), 4);
        let mut b = Tensor::zeros(&[4, 2, 2]);
        b.data_mut()[12..16].fill(1.0);
        assert_eq!(valid_mask(&b, 0.25).unwrap().count(), 0);
    }

    #[test]
    fn sampling_bookkeeping() {
        let labels: Vec<usize> = (0..64).map(|i| (i >= 32) as usize * 3).collect();
        let cv = Tensor::new(vec![9, 8, 8], (0..576).map(|i| ((i * 7) % 11) as f64 - 5.0).collect()).unwrap();
        let a = Tensor::full(&[4, 8, 8], 0.25);
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let s = sample_features(&cv, &cv, &a, &labels, 4, &mut r1).unwrap();
        for t in [&s.positives_night, &s.positives_event, &s.negatives_night] {
            assert_eq!(t.shape(), &[4, 9]);
            for row in t.data().chunks(9) {
                assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(sample_features(&cv, &cv, &a, &labels, 4, &mut r2).unwrap().indices, s.indices);
        let mut r3 = ChaCha8Rng::seed_from_u64(4);
        let err = sample_indices(&[0; 64], 4, &mut r3).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn consistency_constant_offset() {
        let a = FlowField::constant(8, 8, 1.0, 1.0).unwrap();
        let b = FlowField::zeros(8, 8);
        let v = Mask::filled(8, 8, true);
        assert!((motion_consistency_loss(&a, &b, &v).unwrap() - 2.0).abs() < 1e-12);
        assert!(motion_consistency_loss(&a, &b, &Mask::filled(8, 8, false)).is_err());
    }

    #[test]
    fn tied_contrastive_is_log_one_plus_n() {
        let row = Tensor::new(vec![3, 2], vec![0.6, 0.8, 0.6, 0.8, 0.6, 0.8]).unwrap();
        let s = SampleSet {
            positives_night: row.clone(),
            positives_event: row.clone(),
            negatives_night: row,
            indices: SampleIndices {
                positives: vec![],
                negatives: vec![],
            },
        };
        assert!((contrastive_loss(&s, 0.07).unwrap() - 4f64.ln()).abs() < 1e-9);
        assert!(contrastive_loss(&s, 0.0).is_err());
    }
}
