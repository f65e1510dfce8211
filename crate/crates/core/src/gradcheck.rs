//! Central finite-difference checks of every training loss on small
//! random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::appearance;
use crate::boundary::{self, SampleIndices};
use crate::error::Result;
use crate::flowcore;
use crate::graph::{Graph, Var};
use crate::nn::{Binder, ParamStore};
use crate::raster::Mask;
use crate::retinex::{self, DecomposerConfig};
use crate::tensor::Tensor;

/// Finite-difference step of the fourth-order central stencil.
pub const STEP: f64 = 1e-5;
/// Absolute floor of the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-5;
/// Largest number of entries probed per tensor.
pub const MAX_PROBES: usize = 48;

/// Agreement required between the stencils at `h` and `h/2`; probes that
/// miss it sit on a kink (abs, leaky ReLU, warp cell edge) and are skipped.
pub const SMOOTHNESS_TOL: f64 = 1e-4;
/// Largest tolerated fraction of skipped probes.
pub const MAX_SKIPPED_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub probes: usize,
    pub skipped: usize,
}

impl GradCheck {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance && (self.skipped as f64) <= MAX_SKIPPED_FRACTION * self.probes as f64
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn probe_indices(len: usize) -> Vec<usize> {
    if len <= MAX_PROBES {
        return (0..len).collect();
    }
    // Evenly spread with an odd stride so channels are not aliased.
    let stride = (len / MAX_PROBES) | 1;
    (0..MAX_PROBES).map(|k| (k * stride) % len).collect()
}

/// One loss instance: tensors fed as inputs, which of them are checked,
/// parameters (all checked) and the loss builder.
struct Case<'a> {
    name: &'a str,
    inputs: Vec<Tensor>,
    checked: Vec<usize>,
    params: ParamStore,
    build: Box<dyn Fn(&mut Graph, &[Var], Binder) -> Result<Var> + 'a>,
}

/// `(-f(2h) + 8 f(h) - 8 f(-h) + f(-2h)) / 12h` at `h` and `h/2`; `None`
/// when the two disagree.
fn stencil(f: impl Fn(f64) -> Result<f64>) -> Result<Option<f64>> {
    let at = |h: f64| -> Result<f64> { Ok((-f(2.0 * h)? + 8.0 * f(h)? - 8.0 * f(-h)? + f(-2.0 * h)?) / (12.0 * h)) };
    let coarse = at(STEP)?;
    let fine = at(0.5 * STEP)?;
    Ok((rel_error(coarse, fine) <= SMOOTHNESS_TOL).then_some(fine))
}

fn eval(case: &Case, inputs: &[Tensor], params: &ParamStore) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let l = (case.build)(&mut g, &vars, Binder::frozen(params))?;
    Ok(g.scalar(l))
}

fn run(case: Case) -> Result<GradCheck> {
    let mut g = Graph::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.input(t.clone())).collect();
    let l = (case.build)(&mut g, &vars, Binder::trainable(&case.params))?;
    let grads = g.backward(l);
    let pgrads = g.param_grads(&grads);

    let mut worst = 0.0f64;
    let mut probes = 0;
    let mut skipped = 0;
    for &k in &case.checked {
        let zero = Tensor::zeros(case.inputs[k].shape());
        let analytic = grads.wrt(vars[k]).unwrap_or(&zero).clone();
        for i in probe_indices(case.inputs[k].len()) {
            let numeric = stencil(|dx| {
                let mut x = case.inputs.clone();
                x[k].data_mut()[i] += dx;
                eval(&case, &x, &case.params)
            })?;
            probes += 1;
            match numeric {
                Some(n) => worst = worst.max(rel_error(analytic.data()[i], n)),
                None => skipped += 1,
            }
        }
    }
    for (name, t) in case.params.iter() {
        let zero = Tensor::zeros(t.shape());
        let analytic = pgrads.get(name).unwrap_or(&zero).clone();
        for i in probe_indices(t.len()) {
            let numeric = stencil(|dx| {
                let mut p = case.params.clone();
                p.get_mut(name).expect("present").data_mut()[i] += dx;
                eval(&case, &case.inputs, &p)
            })?;
            probes += 1;
            match numeric {
                Some(n) => worst = worst.max(rel_error(analytic.data()[i], n)),
                None => skipped += 1,
            }
        }
    }
    Ok(GradCheck {
        name: case.name.to_string(),
        max_rel_error: worst,
        probes,
        skipped,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
    let data = (0..h * w).map(|i| (i == 0 || rng.random_bool(p)) as u8).collect();
    Mask::new(h, w, data).expect("mask size")
}

const N: usize = 8;
const RADIUS: usize = 1;

/// Runs every loss check with instances drawn from `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = flowcore::cost_channels(RADIUS);
    let mut out = Vec::new();

    // Photometric loss through the bilinear warp.
    let keep = random_mask(&mut rng, N, N, 0.7).to_tensor();
    out.push(run(Case {
        name: "photometric",
        inputs: vec![
            uniform(&mut rng, &[1, N, N], 0.0, 1.0),
            uniform(&mut rng, &[1, N, N], 0.0, 1.0),
            uniform(&mut rng, &[2, N, N], -2.0, 2.0),
        ],
        checked: vec![0, 1, 2],
        params: ParamStore::new(),
        build: Box::new(move |g, v, _| flowcore::photometric_var(g, v[0], v[1], v[2], &keep)),
    })?);

    // Photometric loss through a whole flow network.
    let mut net = ParamStore::new();
    flowcore::init_flow_net(&mut net, &mut rng, "net", 1, RADIUS);
    perturb(&mut net, &mut rng, 0.05);
    let keep = random_mask(&mut rng, N, N, 0.8).to_tensor();
    out.push(run(Case {
        name: "photometric_network",
        inputs: vec![uniform(&mut rng, &[1, N, N], 0.0, 1.0), uniform(&mut rng, &[1, N, N], 0.0, 1.0)],
        checked: vec![],
        params: net,
        build: Box::new(move |g, v, b| {
            let pass = flowcore::flow_pass(g, b, "net", v[0], v[1], RADIUS)?;
            flowcore::photometric_var(g, v[0], v[1], pass.flow, &keep)
        }),
    })?);

    // Adversarial losses, both players.
    let mut disc = ParamStore::new();
    appearance::init_discriminator(&mut disc, &mut rng, 1);
    perturb(&mut disc, &mut rng, 0.05);
    let refl: Vec<Tensor> = (0..4).map(|_| uniform(&mut rng, &[1, N, N], 0.0, 1.0)).collect();
    for (name, player) in [("adversarial_d", 0usize), ("adversarial_g", 1)] {
        out.push(run(Case {
            name,
            inputs: refl.clone(),
            checked: vec![0, 1, 2, 3],
            params: disc.clone(),
            build: Box::new(move |g, v, b| {
                let day = [appearance::disc_logit(g, b, v[0])?, appearance::disc_logit(g, b, v[1])?];
                let night = [appearance::disc_logit(g, b, v[2])?, appearance::disc_logit(g, b, v[3])?];
                let (ld, lg) = appearance::adversarial_from_logits(g, &day, &night)?;
                Ok(if player == 0 { ld } else { lg })
            }),
        })?);
    }

    // KL alignment: only the night side receives gradients.
    out.push(run(Case {
        name: "kl_cost",
        inputs: vec![uniform(&mut rng, &[d, 4, 4], -1.0, 1.0), uniform(&mut rng, &[d, 4, 4], -1.0, 1.0)],
        checked: vec![0],
        params: ParamStore::new(),
        build: Box::new(|g, v, _| appearance::kl_cost_var(g, v[0], v[1])),
    })?);
    let cvs: Vec<Tensor> = (0..4).map(|_| uniform(&mut rng, &[d, 4, 4], -1.0, 1.0)).collect();
    out.push(run(Case {
        name: "intra_align",
        inputs: cvs.clone(),
        checked: vec![0, 1, 2, 3],
        params: ParamStore::new(),
        build: Box::new(|g, v, _| appearance::intra_align_var(g, v[0], v[1], v[2], v[3])),
    })?);
    out.push(run(Case {
        name: "inter_align",
        inputs: cvs,
        checked: vec![2, 3],
        params: ParamStore::new(),
        build: Box::new(|g, v, _| appearance::inter_align_var(g, v[0], v[1], v[2], v[3])),
    })?);

    // Motion-class cross-entropy through the attention network.
    let k = 4;
    let mut attn = ParamStore::new();
    boundary::init_attention(&mut attn, &mut rng, k);
    perturb(&mut attn, &mut rng, 0.05);
    let corr = uniform(&mut rng, &[1, N, N], 0.0, 1.0);
    let labels = boundary::class_labels(&corr, k)?;
    out.push(run(Case {
        name: "cls",
        inputs: vec![corr],
        checked: vec![0],
        params: attn,
        build: Box::new(move |g, v, b| {
            let a = boundary::attention_var(g, b, v[0])?;
            boundary::cls_loss_var(g, a, &labels)
        }),
    })?);

    // Contrastive transfer with attention weighting.
    let mut logits = uniform(&mut rng, &[k, N, N], -1.0, 1.0);
    logits.data_mut().iter_mut().for_each(|x| *x *= 2.0);
    let idx = SampleIndices {
        positives: (0..6).map(|i| i * 7 % (N * N)).collect(),
        negatives: (0..6).map(|i| (i * 11 + 3) % (N * N)).collect(),
    };
    out.push(run(Case {
        name: "contrastive",
        inputs: vec![
            uniform(&mut rng, &[d, N, N], -1.0, 1.0),
            uniform(&mut rng, &[d, N, N], -1.0, 1.0),
            logits,
        ],
        checked: vec![0, 1, 2],
        params: ParamStore::new(),
        build: Box::new(move |g, v, _| {
            let a = g.softmax(v[2], 0);
            let s = boundary::sample_feature_vars(g, v[0], v[1], a, &idx)?;
            boundary::contrastive_var(g, &s, 0.07)
        }),
    })?);

    // Masked event/night flow consistency.
    let valid = random_mask(&mut rng, N, N, 0.5);
    out.push(run(Case {
        name: "self_flow",
        inputs: vec![uniform(&mut rng, &[2, N, N], -3.0, 3.0), uniform(&mut rng, &[2, N, N], -3.0, 3.0)],
        checked: vec![0, 1],
        params: ParamStore::new(),
        build: Box::new(move |g, v, _| boundary::motion_consistency_var(g, v[0], v[1], &valid)),
    })?);

    // Decomposer objectives.
    let mut dec = ParamStore::new();
    retinex::init_params(&mut dec, &mut rng, 1);
    perturb(&mut dec, &mut rng, 0.05);
    let dcfg = DecomposerConfig::default();
    out.push(run(Case {
        name: "decomposer",
        inputs: vec![uniform(&mut rng, &[1, N, N], 0.1, 1.0), uniform(&mut rng, &[1, N, N], 0.01, 0.3)],
        checked: vec![0, 1],
        params: dec,
        build: Box::new(move |g, v, b| Ok(retinex::pair_objectives(g, b, v[0], v[1], &dcfg)?.total)),
    })?);

    Ok(out)
}

/// Moves zero-initialized weights and biases off their kinks.
fn perturb(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let names: Vec<String> = store.iter().map(|(k, _)| k.clone()).collect();
    for n in names {
        for x in store.get_mut(&n).expect("present").data_mut() {
            *x += scale * rng.random_range(-1.0..1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1.0, 1.0 + 1e-5) - 1e-5 / (1.0 + 1e-5)).abs() < 1e-15);
        assert!(rel_error(1e-9, 2e-9) < 1e-3);
    }

    #[test]
    fn probes_cover_small_tensors() {
        assert_eq!(probe_indices(5), vec![0, 1, 2, 3, 4]);
        let p = probe_indices(1000);
        assert_eq!(p.len(), MAX_PROBES);
        assert!(p.iter().all(|i| *i < 1000));
    }

    #[test]
    fn suite_passes() {
        let all: Vec<GradCheck> = (1..4).flat_map(|s| run_suite(s).unwrap()).collect();
        for c in &all {
            eprintln!("{} {} {} {}", c.name, c.max_rel_error, c.probes, c.skipped);
        }
        for c in &all {
            assert!(c.passed(1e-4), "{} max rel error {}", c.name, c.max_rel_error);
        }
    }
}
