//! Toy optical-flow estimator: encoder, warp, cost volume, decoder,
//! forward-backward occlusion and the sparse photometric loss.
//!
//! The encoder is a three-level pyramid (16, 32, 32 channels; the last two
//! levels stride 2). Correlation happens once at 1/4 resolution with radius
//! `d`. The decoder regresses flow from the cost volume, the context
//! features and the cost volume's soft-argmax, bounds it to `d` with `tanh`,
//! and upsamples bilinearly. Its last layer starts at zero.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{warp_in_bounds, Graph, Var};
use crate::nn::{init_conv, init_conv_scaled, Binder, ParamStore};
use crate::raster::{FlowField, Image, Mask};
use crate::tensor::Tensor;

/// Per-pixel unit-norm features at correlation scale, `[F,h,w]`.
pub type FeatureMap = Tensor;
/// Correlation volume `[(2d+1)^2, h, w]`.
pub type CostVolume = Tensor;

pub const ENCODER_CHANNELS: [usize; 3] = [16, 32, 32];
pub const FEATURE_STRIDE: usize = 4;
pub const DECODER_CHANNELS: usize = 32;
pub const OCC_ALPHA1: f64 = 0.01;
pub const OCC_ALPHA2: f64 = 0.5;
pub const PSI_P: f64 = 0.4;
pub const PSI_EPS: f64 = 0.01;
/// Initial inverse temperature of the soft-argmax over the cost volume.
pub const BETA_INIT: f64 = 10.0;

pub fn cost_channels(radius: usize) -> usize {
    (2 * radius + 1) * (2 * radius + 1)
}

pub fn init_encoder(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, in_channels: usize) {
    let [c1, c2, c3] = ENCODER_CHANNELS;
    init_conv(store, rng, &format!("{prefix}.enc1"), in_channels, c1, 3);
    init_conv(store, rng, &format!("{prefix}.enc2"), c1, c2, 3);
    init_conv(store, rng, &format!("{prefix}.enc3"), c2, c3, 3);
}

pub fn init_decoder(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, radius: usize) {
    let ctx = ENCODER_CHANNELS[2];
    init_conv(store, rng, &format!("{prefix}.dec1"), cost_channels(radius) + ctx + 2, DECODER_CHANNELS, 3);
    init_conv(store, rng, &format!("{prefix}.dec2"), DECODER_CHANNELS, DECODER_CHANNELS, 3);
    init_conv_scaled(store, rng, &format!("{prefix}.dec3"), DECODER_CHANNELS, 2, 3, 0.0);
    store.insert(format!("{prefix}.beta"), Tensor::new(vec![1], vec![BETA_INIT]).expect("scalar"));
}

/// Encoder plus decoder under one prefix.
pub fn init_flow_net(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, in_channels: usize, radius: usize) {
    init_encoder(store, rng, prefix, in_channels);
    init_decoder(store, rng, prefix, radius);
}

/// Encoder outputs on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// Unit-norm correlation features.
    pub features: Var,
    /// Un-normalized activations fed to the decoder.
    pub context: Var,
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h % FEATURE_STRIDE != 0 || w % FEATURE_STRIDE != 0 || h < FEATURE_STRIDE || w < FEATURE_STRIDE {
        return Err(Error::arg(format!(
            "flow network input {h}x{w} must be a positive multiple of {FEATURE_STRIDE}"
        )));
    }
    Ok(())
}

pub fn encode_var(g: &mut Graph, b: Binder, prefix: &str, x: Var) -> Result<Encoded> {
    let (_, h, w) = g.value(x).chw();
    check_divisible(h, w)?;
    let e1 = b.conv_lrelu(g, &format!("{prefix}.enc1"), x, 1)?;
    let e2 = b.conv_lrelu(g, &format!("{prefix}.enc2"), e1, 2)?;
    let e3 = b.conv(g, &format!("{prefix}.enc3"), e2, 2)?;
    let features = g.l2_normalize(e3, 0);
    let context = g.leaky_relu(e3, crate::nn::LEAKY_SLOPE);
    Ok(Encoded { features, context })
}

/// Soft-argmax displacement `[2,h,w]` of `softmax(beta * cv)` over channels.
fn soft_argmax(g: &mut Graph, cv: Var, beta: Var, radius: usize) -> Result<Var> {
    let d = cost_channels(radius);
    let side = 2 * radius + 1;
    let mut w = Tensor::zeros(&[2, d, 1, 1]);
    for ch in 0..d {
        let (dy, dx) = ((ch / side) as f64 - radius as f64, (ch % side) as f64 - radius as f64);
        w.data_mut()[ch] = dx;
        w.data_mut()[d + ch] = dy;
    }
    let scaled = g.mul_scalar_var(cv, beta)?;
    let p = g.softmax(scaled, 0);
    let wv = g.constant(w);
    g.conv2d(p, wv, None, 1)
}

/// Flow at full resolution, regressed from the cost volume, the context
/// features and the soft-argmax displacement.
pub fn decode_var(g: &mut Graph, b: Binder, prefix: &str, cv: Var, context: Var, radius: usize) -> Result<Var> {
    let (dc, h, w) = g.value(cv).chw();
    let (_, ch, cw) = g.value(context).chw();
    if dc != cost_channels(radius) || (ch, cw) != (h, w) {
        return Err(Error::arg("decode: cost volume and context sizes disagree"));
    }
    let beta = b.var(g, &format!("{prefix}.beta"))?;
    let sa = soft_argmax(g, cv, beta, radius)?;
    let x = g.concat(&[cv, context, sa])?;
    let d1 = b.conv_lrelu(g, &format!("{prefix}.dec1"), x, 1)?;
    let d2 = b.conv_lrelu(g, &format!("{prefix}.dec2"), d1, 1)?;
    let res = b.conv(g, &format!("{prefix}.dec3"), d2, 1)?;
    let r = radius as f64;
    let squashed = g.scale(res, 1.0 / r);
    let t = g.tanh(squashed);
    let bounded = g.scale(t, r);
    let up = g.upsample_bilinear(bounded, FEATURE_STRIDE)?;
    Ok(g.scale(up, FEATURE_STRIDE as f64))
}

/// Everything one forward/backward flow pass leaves on the tape.
#[derive(Debug, Clone, Copy)]
pub struct FlowPass {
    pub enc_t: Encoded,
    pub enc_t1: Encoded,
    /// `cv(f_t, f_t1)`.
    pub cost: Var,
    /// Flow `t -> t+1`, `[2,H,W]`.
    pub flow: Var,
}

pub fn flow_pass(g: &mut Graph, b: Binder, prefix: &str, xt: Var, xt1: Var, radius: usize) -> Result<FlowPass> {
    let enc_t = encode_var(g, b, prefix, xt)?;
    let enc_t1 = encode_var(g, b, prefix, xt1)?;
    let cost = g.cost_volume(enc_t.features, enc_t1.features, radius)?;
    let flow = decode_var(g, b, prefix, cost, enc_t.context, radius)?;
    Ok(FlowPass {
        enc_t,
        enc_t1,
        cost,
        flow,
    })
}

/// Reverse direction flow `t+1 -> t` reusing the encodings of `pass`.
pub fn backward_flow(g: &mut Graph, b: Binder, prefix: &str, pass: &FlowPass, radius: usize) -> Result<Var> {
    let cost = g.cost_volume(pass.enc_t1.features, pass.enc_t.features, radius)?;
    decode_var(g, b, prefix, cost, pass.enc_t1.context, radius)
}

/// Sparse photometric loss on the tape; `keep` is `1 - O` as `[1,H,W]`.
pub fn photometric_var(g: &mut Graph, it: Var, it1: Var, flow: Var, keep: &Tensor) -> Result<Var> {
    let kept = keep.sum();
    if kept <= 0.0 {
        return Err(Error::degenerate("photometric loss: every pixel is occluded"));
    }
    let c = g.value(it).shape()[0];
    let warped = g.warp(it1, flow)?;
    let diff = g.sub(it, warped)?;
    let psi = g.pow_abs_eps(diff, PSI_P, PSI_EPS);
    let kv = g.constant(keep.clone());
    let masked = g.mul_broadcast(psi, kv)?;
    let s = g.sum(masked);
    Ok(g.scale(s, 1.0 / (c as f64 * kept)))
}

// ---- value-level API ----------------------------------------------------

/// Unit-norm features of an image under the `prefix.*` encoder.
pub fn encode(store: &ParamStore, prefix: &str, image: &Image) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let x = g.constant(image.to_tensor());
    let e = encode_var(&mut g, Binder::frozen(store), prefix, x)?;
    Ok(g.value(e.features).clone())
}

/// Bilinear backward warp with border clamping.
///
/// Returns the warped `[C,H,W]` map and a mask of samples that stayed inside
/// the frame.
pub fn warp(map: &Tensor, flow: &FlowField) -> Result<(Tensor, Mask)> {
    let (_, h, w) = check_map(map)?;
    if flow.height() != h || flow.width() != w {
        return Err(Error::arg(format!(
            "warp: flow {}x{} does not match map {h}x{w}",
            flow.height(),
            flow.width()
        )));
    }
    let mut g = Graph::new();
    let m = g.constant(map.clone());
    let f = g.constant(flow.to_tensor());
    let out = g.warp(m, f)?;
    Ok((g.value(out).clone(), valid_mask(flow)))
}

fn check_map(t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.shape().len() != 3 {
        return Err(Error::arg("expected a [C,H,W] map"));
    }
    Ok(t.chw())
}

/// Pixels whose backward-warp source lies inside the frame.
pub fn valid_mask(flow: &FlowField) -> Mask {
    let (h, w) = (flow.height(), flow.width());
    Mask::from_fn(h, w, |x, y| {
        let (u, v) = flow.at(y, x);
        warp_in_bounds(x as f64 + u, y as f64 + v, h, w)
    })
}

/// Correlation of `f_t` with `f_t1` warped by `init_flow` (feature resolution).
pub fn cost_volume(f_t: &FeatureMap, f_t1: &FeatureMap, init_flow: Option<&FlowField>, radius: usize) -> Result<CostVolume> {
    if f_t.shape() != f_t1.shape() {
        return Err(Error::arg(format!(
            "cost volume: feature shapes {:?} and {:?} differ",
            f_t.shape(),
            f_t1.shape()
        )));
    }
    check_map(f_t)?;
    let mut g = Graph::new();
    let a = g.constant(f_t.clone());
    let mut b = g.constant(f_t1.clone());
    if let Some(fl) = init_flow {
        let fv = g.constant(fl.to_tensor());
        b = g.warp(b, fv)?;
    }
    let cv = g.cost_volume(a, b, radius)?;
    Ok(g.value(cv).clone())
}

/// Runs the `prefix.*` decoder on a cost volume and context features.
pub fn decode_flow(store: &ParamStore, prefix: &str, cost: &CostVolume, context: &Tensor, radius: usize) -> Result<FlowField> {
    check_map(cost)?;
    check_map(context)?;
    let mut g = Graph::new();
    let cv = g.constant(cost.clone());
    let ctx = g.constant(context.clone());
    let f = decode_var(&mut g, Binder::frozen(store), prefix, cv, ctx, radius)?;
    FlowField::from_tensor(g.value(f))
}

/// Flow `t -> t+1` from two frames (or any two `[C,H,W]` inputs).
pub fn estimate_flow(store: &ParamStore, prefix: &str, xt: &Tensor, xt1: &Tensor, radius: usize) -> Result<FlowField> {
    if xt.shape() != xt1.shape() {
        return Err(Error::arg("flow inputs differ in shape"));
    }
    let mut g = Graph::new();
    let a = g.constant(xt.clone());
    let b = g.constant(xt1.clone());
    let pass = flow_pass(&mut g, Binder::frozen(store), prefix, a, b, radius)?;
    FlowField::from_tensor(g.value(pass.flow))
}

/// Forward-backward consistency check; `1` marks occluded pixels.
pub fn occlusion_mask(flow_fw: &FlowField, flow_bw: &FlowField) -> Result<Mask> {
    let (h, w) = (flow_fw.height(), flow_fw.width());
    if flow_bw.height() != h || flow_bw.width() != w {
        return Err(Error::arg("occlusion check: flow sizes differ"));
    }
    let (bw, _) = warp(&flow_bw.to_tensor(), flow_fw)?;
    let hw = h * w;
    let data = (0..hw)
        .map(|i| {
            let (fu, fv) = (flow_fw.u()[i], flow_fw.v()[i]);
            let (bu, bv) = (bw.data()[i], bw.data()[hw + i]);
            let lhs = (fu + bu).powi(2) + (fv + bv).powi(2);
            let rhs = OCC_ALPHA1 * (fu * fu + fv * fv + bu * bu + bv * bv) + OCC_ALPHA2;
            (lhs > rhs) as u8
        })
        .collect();
    Mask::new(h, w, data)
}

/// `sum psi(I_t - w(I_t1)) (1-O) / sum (1-O)` with `psi(x) = (|x| + 0.01)^0.4`.
pub fn photometric_loss(it: &Image, it1: &Image, flow: &FlowField, occ: &Mask) -> Result<f64> {
    if it.height() != it1.height() || it.width() != it1.width() || it.channels() != it1.channels() {
        return Err(Error::arg("photometric loss: frames differ in size"));
    }
    if flow.height() != it.height() || flow.width() != it.width() || occ.height() != it.height() || occ.width() != it.width() {
        return Err(Error::arg("photometric loss: flow or mask size differs from frames"));
    }
    let mut g = Graph::new();
    let a = g.constant(it.to_tensor());
    let b = g.constant(it1.to_tensor());
    let f = g.constant(flow.to_tensor());
    let keep = occ.inverted().to_tensor();
    let l = photometric_var(&mut g, a, b, f, &keep)?;
    Ok(g.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn net(seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_flow_net(&mut s, &mut rng, "f", 1, 4);
        s
    }

    fn ramp() -> Image {
        Image::from_fn(16, 16, |x, y| (x as f64 + 0.5 * y as f64) / 24.0).unwrap()
    }

    #[test]
    fn features_have_unit_norm() {
        let f = encode(&net(0), "f", &ramp()).unwrap();
        let (c, h, w) = f.chw();
        assert_eq!((h, w), (4, 4));
        for i in 0..h * w {
            let n: f64 = (0..c).map(|k| f.data()[k * h * w + i].powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn integer_shift_warp() {
        let img = ramp().to_tensor();
        let (out, valid) = warp(&img, &FlowField::constant(16, 16, 1.0, 0.0).unwrap()).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let src = (x + 1).min(15);
                assert!((out.data()[y * 16 + x] - img.data()[y * 16 + src]).abs() < 1e-12);
                assert_eq!(valid.get(y, x), x < 15);
            }
        }
        let (id, _) = warp(&img, &FlowField::zeros(16, 16)).unwrap();
        assert_eq!(id, img);
    }

    #[test]
    fn self_correlation_center_is_one() {
        let f = encode(&net(1), "f", &ramp()).unwrap();
        let cv = cost_volume(&f, &f, None, 2).unwrap();
        let center = 12;
        assert!(cv.channel(center).iter().all(|v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn fb_consistency_cases() {
        let fw = FlowField::constant(16, 16, 2.0, -1.0).unwrap();
        assert_eq!(occlusion_mask(&fw, &fw.negated()).unwrap().count(), 0);
        let big = FlowField::constant(16, 16, 10.0, 0.0).unwrap();
        assert_eq!(occlusion_mask(&big, &FlowField::zeros(16, 16)).unwrap().count(), 256);
    }

    #[test]
    fn photometric_floor_on_identical_frames() {
        let img = ramp();
        let l = photometric_loss(&img, &img, &FlowField::zeros(16, 16), &Mask::filled(16, 16, false)).unwrap();
        assert!((l - 0.01f64.powf(0.4)).abs() < 1e-12);
        let all = Mask::filled(16, 16, true);
        assert!(matches!(
            photometric_loss(&img, &img, &FlowField::zeros(16, 16), &all),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn untrained_flow_is_reproducible_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Image::from_fn(32, 32, |_, _| rng.random::<f64>()).unwrap();
        let b = Image::from_fn(32, 32, |x, y| a.get(0, y, (x + 1) % 32)).unwrap();
        let f1 = estimate_flow(&net(2), "f", &a.to_tensor(), &b.to_tensor(), 4).unwrap();
        let f2 = estimate_flow(&net(2), "f", &a.to_tensor(), &b.to_tensor(), 4).unwrap();
        assert_eq!(f1, f2);
        assert!(f1.max_magnitude() <= 16.0 * 2f64.sqrt() + 1e-9);
    }

    #[test]
    fn rejects_sizes_not_divisible_by_stride() {
        let img = Image::filled(18, 16, 0.5).unwrap();
        assert!(encode(&net(0), "f", &img).is_err());
    }
}
