//! Appearance adaptation: adversarial reflectance alignment, KL alignment of
//! reflectance cost volumes, and intra/inter-domain motion alignment.
//!
//! In both KL terms the daytime side is a detached target, so gradients
//! only ever reach the nighttime branch.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{init_conv, Binder, ParamStore};
use crate::raster::Image;
use crate::tensor::Tensor;

pub const DISC_PREFIX: &str = "disc";
/// Probabilities are floored here before taking logs.
pub const PROB_FLOOR: f64 = 1e-6;

pub fn init_discriminator(store: &mut ParamStore, rng: &mut ChaCha8Rng, channels: usize) {
    init_conv(store, rng, &format!("{DISC_PREFIX}.c1"), channels, 16, 3);
    init_conv(store, rng, &format!("{DISC_PREFIX}.c2"), 16, 16, 3);
    init_conv(store, rng, &format!("{DISC_PREFIX}.c3"), 16, 32, 3);
    init_conv(store, rng, &format!("{DISC_PREFIX}.c4"), 32, 1, 3);
}

/// Real-probability logit of one reflectance map: strided convs, global mean.
pub fn disc_logit(g: &mut Graph, b: Binder, r: Var) -> Result<Var> {
    let h1 = b.conv_lrelu(g, &format!("{DISC_PREFIX}.c1"), r, 2)?;
    let h2 = b.conv_lrelu(g, &format!("{DISC_PREFIX}.c2"), h1, 2)?;
    let h3 = b.conv_lrelu(g, &format!("{DISC_PREFIX}.c3"), h2, 2)?;
    let h4 = b.conv(g, &format!("{DISC_PREFIX}.c4"), h3, 1)?;
    Ok(g.mean(h4))
}

/// `(loss_D, loss_G)` from discriminator logits of day and night reflectances.
///
/// `loss_D = E log D(R_d) + E log(1 - D(R_n))` is maximized by the
/// discriminator; `loss_G = -E log D(R_n)` is minimized by the generator.
pub fn adversarial_from_logits(g: &mut Graph, day: &[Var], night: &[Var]) -> Result<(Var, Var)> {
    if day.is_empty() || night.is_empty() {
        return Err(Error::arg("adversarial loss needs non-empty day and night batches"));
    }
    let mut log_real = Vec::new();
    for &z in day {
        let p = g.sigmoid(z);
        log_real.push(g.log_floor(p, PROB_FLOOR));
    }
    let mut log_fake = Vec::new();
    let mut log_fooled = Vec::new();
    for &z in night {
        let neg = g.scale(z, -1.0);
        let q = g.sigmoid(neg);
        log_fake.push(g.log_floor(q, PROB_FLOOR));
        let p = g.sigmoid(z);
        log_fooled.push(g.log_floor(p, PROB_FLOOR));
    }
    let er = mean_of(g, &log_real)?;
    let ef = mean_of(g, &log_fake)?;
    let loss_d = g.add(er, ef)?;
    let eg = mean_of(g, &log_fooled)?;
    let loss_g = g.scale(eg, -1.0);
    Ok((loss_d, loss_g))
}

fn mean_of(g: &mut Graph, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(g.scale(acc, 1.0 / xs.len() as f64))
}

/// Value-level adversarial losses for a discriminator in `store`.
pub fn adversarial_losses(r_d: &[Image], r_n: &[Image], store: &ParamStore) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let b = Binder::frozen(store);
    let mut day = Vec::new();
    for r in r_d {
        let v = g.constant(r.to_tensor());
        day.push(disc_logit(&mut g, b, v)?);
    }
    let mut night = Vec::new();
    for r in r_n {
        let v = g.constant(r.to_tensor());
        night.push(disc_logit(&mut g, b, v)?);
    }
    let (ld, lg) = adversarial_from_logits(&mut g, &day, &night)?;
    Ok((g.scalar(ld), g.scalar(lg)))
}

/// Per-pixel softmax over the displacement channels (temperature 1).
pub fn softmax_dist(cv: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(cv.clone());
    let p = g.softmax(v, 0);
    g.value(p).clone()
}

fn check_pair(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.value(a).shape() != g.value(b).shape() {
        return Err(Error::arg(format!(
            "{what}: cost volume shapes {:?} and {:?} differ",
            g.value(a).shape(),
            g.value(b).shape()
        )));
    }
    if g.value(a).shape().len() != 3 {
        return Err(Error::arg(format!("{what}: cost volumes must be [D,H,W]")));
    }
    Ok(())
}

/// Pixel-mean of `sum_c p log(p / q)` with `p = softmax(source)` and
/// `q = softmax(target)`; `target` is detached.
fn kl_detached(g: &mut Graph, source: Var, target: Var) -> Result<Var> {
    let (_, h, w) = g.value(source).chw();
    let t = g.detach(target);
    let p = g.softmax(source, 0);
    let lp = g.log_softmax(source, 0);
    let lq = g.log_softmax(t, 0);
    let d = g.sub(lp, lq)?;
    let terms = g.mul(p, d)?;
    let s = g.sum(terms);
    Ok(g.scale(s, 1.0 / (h * w) as f64))
}

/// KL alignment of the night reflectance cost volume to the day one.
pub fn kl_cost_var(g: &mut Graph, cv_n_r: Var, cv_d_r: Var) -> Result<Var> {
    check_pair(g, cv_n_r, cv_d_r, "kl_cost_loss")?;
    kl_detached(g, cv_n_r, cv_d_r)
}

/// `mean|cv_d - cv_d^r| + mean|cv_n - cv_n^r|`.
pub fn intra_align_var(g: &mut Graph, cv_d: Var, cv_d_r: Var, cv_n: Var, cv_n_r: Var) -> Result<Var> {
    check_pair(g, cv_d, cv_d_r, "intra_align_loss")?;
    check_pair(g, cv_n, cv_n_r, "intra_align_loss")?;
    check_pair(g, cv_d, cv_n, "intra_align_loss")?;
    let dd = g.sub(cv_d, cv_d_r)?;
    let ad = g.abs(dd);
    let md = g.mean(ad);
    let dn = g.sub(cv_n, cv_n_r)?;
    let an = g.abs(dn);
    let mn = g.mean(an);
    g.add(md, mn)
}

/// `KL(softmax(cv_n - cv_n^r) || softmax(cv_d - cv_d^r))`, day residual detached.
pub fn inter_align_var(g: &mut Graph, cv_d: Var, cv_d_r: Var, cv_n: Var, cv_n_r: Var) -> Result<Var> {
    check_pair(g, cv_d, cv_d_r, "inter_align_loss")?;
    check_pair(g, cv_n, cv_n_r, "inter_align_loss")?;
    check_pair(g, cv_d, cv_n, "inter_align_loss")?;
    let rn = g.sub(cv_n, cv_n_r)?;
    let rd = g.sub(cv_d, cv_d_r)?;
    kl_detached(g, rn, rd)
}

fn eval2(a: &Tensor, b: &Tensor, f: impl Fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(a.clone());
    let y = g.constant(b.clone());
    let l = f(&mut g, x, y)?;
    Ok(g.scalar(l))
}

fn eval4(ts: [&Tensor; 4], f: impl Fn(&mut Graph, Var, Var, Var, Var) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let v: Vec<Var> = ts.iter().map(|t| g.constant((*t).clone())).collect();
    let l = f(&mut g, v[0], v[1], v[2], v[3])?;
    Ok(g.scalar(l))
}

pub fn kl_cost_loss(cv_n_r: &Tensor, cv_d_r: &Tensor) -> Result<f64> {
    eval2(cv_n_r, cv_d_r, kl_cost_var)
}

pub fn intra_align_loss(cv_d: &Tensor, cv_d_r: &Tensor, cv_n: &Tensor, cv_n_r: &Tensor) -> Result<f64> {
    eval4([cv_d, cv_d_r, cv_n, cv_n_r], intra_align_var)
}

pub fn inter_align_loss(cv_d: &Tensor, cv_d_r: &Tensor, cv_n: &Tensor, cv_n_r: &Tensor) -> Result<f64> {
    eval4([cv_d, cv_d_r, cv_n, cv_n_r], inter_align_var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn two(a: f64, b: f64) -> Tensor {
        Tensor::new(vec![2, 1, 1], vec![a, b]).unwrap()
    }

    #[test]
    fn hand_kl_value() {
        // softmax(ln 9, 0) = (0.9, 0.1)
        let n = two(9f64.ln(), 0.0);
        let d = two(0.0, 0.0);
        let expect = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((kl_cost_loss(&n, &d).unwrap() - expect).abs() < 1e-12);
        let zero = two(0.0, 0.0);
        let inter = inter_align_loss(&d, &zero, &n, &zero).unwrap();
        assert!((inter - expect).abs() < 1e-12);
    }

    #[test]
    fn intra_constant_offset() {
        let a = Tensor::full(&[9, 3, 3], 0.2);
        let b = Tensor::full(&[9, 3, 3], -0.3);
        assert!((intra_align_loss(&a, &b, &a, &a).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(intra_align_loss(&a, &a, &b, &b).unwrap(), 0.0);
    }

    #[test]
    fn uninformative_discriminator() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        init_discriminator(&mut s, &mut rng, 1);
        let names: Vec<String> = s.iter().map(|(k, _)| k.clone()).collect();
        for n in names {
            s.get_mut(&n).unwrap().data_mut().fill(0.0);
        }
        let r = Image::filled(16, 16, 0.4).unwrap();
        let (ld, lg) = adversarial_losses(&[r.clone()], &[r], &s).unwrap();
        assert!((ld - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((lg + 0.5f64.ln()).abs() < 1e-12);
        assert!(adversarial_losses(&[], &[], &s).is_err());
    }

    #[test]
    fn saturated_discriminator_is_floored() {
        let mut g = Graph::new();
        let real = g.constant(Tensor::scalar(50.0));
        let fake = g.constant(Tensor::scalar(-50.0));
        let (ld, lg) = adversarial_from_logits(&mut g, &[real], &[fake]).unwrap();
        assert!(g.scalar(ld) <= 0.0 && g.scalar(ld) > -1e-9);
        assert!((g.scalar(lg) + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn softmax_of_uniform_cost() {
        let p = softmax_dist(&Tensor::full(&[25, 2, 2], 0.3));
        assert!(p.data().iter().all(|v| (v - 0.04).abs() < 1e-15));
    }
}
