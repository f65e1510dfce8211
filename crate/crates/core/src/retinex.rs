//! Reflectance/illumination decomposition `I = R * L`.
//!
//! A four-layer convolutional network predicts a reflectance head (sigmoid)
//! and an illumination head (softplus plus a floor). It is trained on
//! day/night pairs with reconstruction, illumination smoothness and
//! cross-illumination reflectance consistency.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{init_conv, parallel_grads, Adam, AdamConfig, Binder, ParamStore};
use crate::raster::Image;
use crate::synthdata::IllumMap;
use crate::tensor::Tensor;

pub const PREFIX: &str = "decomp";
/// Smallest illumination value the network can emit.
pub const L_FLOOR: f64 = 1e-3;
const HIDDEN: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub reflectance: Image,
    pub illumination: IllumMap,
}

impl Decomposition {
    /// `mean |R * L - I|` over pixels and channels.
    pub fn reconstruction_error(&self, image: &Image) -> f64 {
        let hw = image.height() * image.width();
        let l = self.illumination.data();
        image
            .data()
            .iter()
            .zip(self.reflectance.data())
            .enumerate()
            .map(|(i, (v, r))| (r * l[i % hw] - v).abs())
            .sum::<f64>()
            / image.data().len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecomposerConfig {
    pub channels: usize,
    pub recon_weight: f64,
    pub smooth_weight: f64,
    pub consistency_weight: f64,
    /// Per-pixel mean reconstruction error accepted after training.
    pub recon_tolerance: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DecomposerConfig {
    fn default() -> Self {
        DecomposerConfig {
            channels: 1,
            recon_weight: 1.0,
            smooth_weight: 0.1,
            consistency_weight: 0.5,
            recon_tolerance: 0.05,
            epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

pub fn init_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, channels: usize) {
    init_conv(store, rng, &format!("{PREFIX}.c1"), channels, HIDDEN, 3);
    init_conv(store, rng, &format!("{PREFIX}.c2"), HIDDEN, HIDDEN, 3);
    init_conv(store, rng, &format!("{PREFIX}.c3"), HIDDEN, HIDDEN, 3);
    init_conv(store, rng, &format!("{PREFIX}.c4"), HIDDEN + channels, channels + 1, 3);
}

/// Returns `(R, L)` as `[C,H,W]` and `[1,H,W]` nodes.
pub fn forward(g: &mut Graph, b: Binder, x: Var) -> Result<(Var, Var)> {
    let c = g.value(x).shape()[0];
    let h1 = b.conv_lrelu(g, &format!("{PREFIX}.c1"), x, 1)?;
    let h2 = b.conv_lrelu(g, &format!("{PREFIX}.c2"), h1, 1)?;
    let h3 = b.conv_lrelu(g, &format!("{PREFIX}.c3"), h2, 1)?;
    let skip = g.concat(&[h3, x])?;
    let out = b.conv(g, &format!("{PREFIX}.c4"), skip, 1)?;
    let r_raw = g.select_channels(out, 0, c)?;
    let r = g.sigmoid(r_raw);
    let l_raw = g.select_channels(out, c, 1)?;
    let l_soft = g.softplus(l_raw);
    let l = g.add_const(l_soft, L_FLOOR);
    Ok((r, l))
}

/// Mean absolute horizontal plus vertical difference of a `[C,H,W]` node.
pub fn total_variation(g: &mut Graph, x: Var) -> Result<Var> {
    let c = g.value(x).shape()[0];
    let mut kx = Tensor::zeros(&[c, c, 3, 3]);
    let mut ky = Tensor::zeros(&[c, c, 3, 3]);
    for ci in 0..c {
        let base = (ci * c + ci) * 9;
        kx.data_mut()[base + 4] = -1.0;
        kx.data_mut()[base + 5] = 1.0;
        ky.data_mut()[base + 4] = -1.0;
        ky.data_mut()[base + 7] = 1.0;
    }
    let kx = g.constant(kx);
    let ky = g.constant(ky);
    let dx = g.conv2d(x, kx, None, 1)?;
    let dy = g.conv2d(x, ky, None, 1)?;
    let ax = g.abs(dx);
    let ay = g.abs(dy);
    let mx = g.mean(ax);
    let my = g.mean(ay);
    g.add(mx, my)
}

/// `mean |R * L - I|`.
pub fn reconstruction_loss(g: &mut Graph, r: Var, l: Var, image: Var) -> Result<Var> {
    let rl = g.mul_broadcast(r, l)?;
    let d = g.sub(rl, image)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// The three decomposer objectives on one day/night pair.
pub struct PairObjectives {
    pub recon: Var,
    pub smooth: Var,
    pub consistency: Var,
    pub total: Var,
}

pub fn pair_objectives(g: &mut Graph, b: Binder, day: Var, night: Var, cfg: &DecomposerConfig) -> Result<PairObjectives> {
    let (rd, ld) = forward(g, b, day)?;
    let (rn, ln) = forward(g, b, night)?;
    let rec_d = reconstruction_loss(g, rd, ld, day)?;
    let rec_n = reconstruction_loss(g, rn, ln, night)?;
    let recon = g.add(rec_d, rec_n)?;
    let tv_d = total_variation(g, ld)?;
    let tv_n = total_variation(g, ln)?;
    let smooth = g.add(tv_d, tv_n)?;
    let dr = g.sub(rn, rd)?;
    let adr = g.abs(dr);
    let consistency = g.mean(adr);
    let a = g.scale(recon, cfg.recon_weight);
    let s = g.scale(smooth, cfg.smooth_weight);
    let c = g.scale(consistency, cfg.consistency_weight);
    let as_ = g.add(a, s)?;
    let total = g.add(as_, c)?;
    Ok(PairObjectives {
        recon,
        smooth,
        consistency,
        total,
    })
}

/// Decomposes with the `decomp.*` parameters of `store`.
pub fn decompose_with(store: &ParamStore, image: &Image) -> Result<Decomposition> {
    let (h, w) = (image.height(), image.width());
    if image.data().iter().all(|v| *v == 0.0) {
        // All-black input carries no reflectance information.
        return Ok(Decomposition {
            reflectance: Image::new(h, w, image.channels(), vec![0.0; image.data().len()])?,
            illumination: IllumMap::new(h, w, vec![L_FLOOR; h * w])?,
        });
    }
    let expected = store.get(&format!("{PREFIX}.c1.w"))?.shape()[1];
    if image.channels() != expected {
        return Err(Error::arg(format!(
            "decomposer expects {expected} channels, got {}",
            image.channels()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(image.to_tensor());
    let (r, l) = forward(&mut g, Binder::frozen(store), x)?;
    if !g.value(r).all_finite() || !g.value(l).all_finite() {
        return Err(Error::Numeric {
            term: "decomposition".into(),
        });
    }
    Ok(Decomposition {
        reflectance: Image::from_tensor_clamped(g.value(r))?,
        illumination: IllumMap::new(h, w, g.value(l).data().to_vec())?,
    })
}

/// A standalone trained decomposer.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposer {
    pub params: ParamStore,
}

impl Decomposer {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_params(&mut params, &mut rng, channels);
        Decomposer { params }
    }

    pub fn decompose(&self, image: &Image) -> Result<Decomposition> {
        decompose_with(&self.params, image)
    }
}

/// Training result: the network and the per-epoch mean reconstruction loss.
#[derive(Debug, Clone)]
pub struct TrainedDecomposer {
    pub decomposer: Decomposer,
    pub recon_curve: Vec<f64>,
}

/// One optimization epoch over `pairs` on the `decomp.*` entries of `store`.
///
/// Returns the mean `(recon, smooth, consistency)` values seen during the epoch.
pub fn train_epoch(
    store: &mut ParamStore,
    opt: &mut Adam,
    pairs: &[(Tensor, Tensor)],
    cfg: &DecomposerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<[f64; 3]> {
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(rng);
    let mut sums = [0.0; 3];
    for batch in order.chunks(cfg.batch_size.max(1)) {
        let snapshot = &*store;
        let (losses, grads) = parallel_grads(batch, |&i| {
            let mut g = Graph::new();
            let day = g.constant(pairs[i].0.clone());
            let night = g.constant(pairs[i].1.clone());
            let o = pair_objectives(&mut g, Binder::trainable(snapshot), day, night, cfg)?;
            let gr = g.backward(o.total);
            let pg: BTreeMap<String, Tensor> = g.param_grads(&gr);
            Ok((vec![g.scalar(o.recon), g.scalar(o.smooth), g.scalar(o.consistency)], pg))
        })?;
        opt.step(store, &grads)?;
        for (s, l) in sums.iter_mut().zip(&losses) {
            *s += l * batch.len() as f64;
        }
    }
    Ok(sums.map(|s| s / pairs.len() as f64))
}

/// Trains a fresh decomposer on day/night pairs.
pub fn train_decomposer(pairs: &[(Image, Image)], cfg: &DecomposerConfig) -> Result<TrainedDecomposer> {
    if pairs.is_empty() {
        return Err(Error::arg("decomposer training needs at least one pair"));
    }
    if pairs
        .iter()
        .any(|(d, n)| d.channels() != cfg.channels || n.channels() != cfg.channels || d.height() != n.height() || d.width() != n.width())
    {
        return Err(Error::arg("decomposer pairs must match in size and channel count"));
    }
    let mut dec = Decomposer::new(cfg.channels, cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    });
    let tensors: Vec<(Tensor, Tensor)> = pairs.iter().map(|(d, n)| (d.to_tensor(), n.to_tensor())).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let [recon, _, _] = train_epoch(&mut dec.params, &mut opt, &tensors, cfg, &mut rng)?;
        curve.push(recon);
    }
    Ok(TrainedDecomposer {
        decomposer: dec,
        recon_curve: curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_input_is_degenerate_not_an_error() {
        let d = Decomposer::new(1, 0);
        let out = d.decompose(&Image::filled(16, 16, 0.0).unwrap()).unwrap();
        assert!(out.reflectance.data().iter().all(|v| *v == 0.0));
        assert!(out.illumination.data().iter().all(|v| *v == L_FLOOR));
    }

    #[test]
    fn untrained_outputs_respect_ranges() {
        let d = Decomposer::new(1, 3);
        let img = Image::from_fn(16, 16, |x, y| ((x * 3 + y) % 7) as f64 / 7.0).unwrap();
        let out = d.decompose(&img).unwrap();
        assert!(out.reflectance.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(out.illumination.data().iter().all(|v| *v >= L_FLOOR));
    }

    #[test]
    fn empty_training_set_rejected() {
        assert!(train_decomposer(&[], &DecomposerConfig::default()).is_err());
    }

    #[test]
    fn channel_mismatch_rejected() {
        let d = Decomposer::new(1, 0);
        let rgb = Image::new(16, 16, 3, vec![0.5; 768]).unwrap();
        assert!(d.decompose(&rgb).is_err());
    }
}
