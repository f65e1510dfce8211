//! The three-stage schedule, the weighted total objective, evaluation of
//! trained models and per-epoch training logs.
//!
//! Parameter prefixes in the shared store:
//! `day` (day flow net), `event` (event flow net), `decomp` (decomposer),
//! `dayref`/`nightref` (reflectance encoders), `night` (night flow net),
//! `disc` (discriminator), `attn` (attention net).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::appearance;
use crate::boundary;
use crate::checkpoint::{Checkpoint, Stage};
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::evaluate::{self, EvalReport};
use crate::flowcore::{self, FlowPass};
use crate::graph::{Graph, Var};
use crate::nn::{parallel_grads, Adam, AdamConfig, Binder, ParamStore};
use crate::raster::{FlowField, Mask};
use crate::retinex;
use crate::synthdata::{event_slices, sample_id, SceneSample};
use crate::tensor::Tensor;

pub const DAY: &str = "day";
pub const EVENT: &str = "event";
pub const NIGHT: &str = "night";
pub const DAYREF: &str = "dayref";
pub const NIGHTREF: &str = "nightref";

/// Names of the eight terms of the total objective, in order.
pub const TERM_NAMES: [&str; 8] = ["pho", "adv", "kl_cost", "intra", "inter", "cls", "contra", "self_flow"];

/// Raw values of every loss term.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub pho: f64,
    pub adv: f64,
    pub kl_cost: f64,
    pub intra: f64,
    pub inter: f64,
    pub cls: f64,
    pub contra: f64,
    pub self_flow: f64,
}

impl LossTerms {
    pub fn as_array(&self) -> [f64; 8] {
        [
            self.pho,
            self.adv,
            self.kl_cost,
            self.intra,
            self.inter,
            self.cls,
            self.contra,
            self.self_flow,
        ]
    }
}

/// Which terms contribute in a given stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveTerms {
    All,
    Stage1,
    Stage2,
    Stage3,
}

impl ActiveTerms {
    fn mask(self) -> [bool; 8] {
        match self {
            ActiveTerms::All => [true; 8],
            ActiveTerms::Stage1 => [true, false, false, false, false, false, false, false],
            ActiveTerms::Stage2 => [true, true, true, true, true, false, false, false],
            ActiveTerms::Stage3 => [true, false, false, false, false, true, true, true],
        }
    }
}

/// `pho + sum_i lambda_i * term_i` over the active terms.
pub fn total_loss(terms: &LossTerms, cfg: &TrainConfig, active: ActiveTerms) -> Result<f64> {
    let values = terms.as_array();
    let mask = active.mask();
    let l = cfg.lambdas();
    let mut total = 0.0;
    for (i, v) in values.iter().enumerate() {
        if !mask[i] {
            continue;
        }
        if !v.is_finite() {
            return Err(Error::Numeric {
                term: TERM_NAMES[i].into(),
            });
        }
        let w = if i == 0 { 1.0 } else { l[i - 1] };
        total += w * v;
    }
    Ok(total)
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub values: Vec<f64>,
    pub holdout_epe: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub stage: Stage,
    pub columns: Vec<String>,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    fn new(stage: Stage, columns: &[&str]) -> Self {
        TrainLog {
            stage,
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r.values[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("epoch,{},holdout_epe\n", self.columns.join(","));
        for r in &self.rows {
            let vals: Vec<String> = r.values.iter().map(|v| v.to_string()).collect();
            let epe = r.holdout_epe.map(|v| v.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{}", r.epoch, vals.join(","), epe).expect("string write");
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Which network and which frames a prediction uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowModel {
    /// Day network on day frames.
    Day,
    /// Day network applied directly to night frames.
    DayOnNight,
    /// Night network on night frames.
    Night,
    /// Event network on the event stream.
    Event,
}

impl FlowModel {
    pub fn name(self) -> &'static str {
        match self {
            FlowModel::Day => "day",
            FlowModel::DayOnNight => "day_on_night",
            FlowModel::Night => "night",
            FlowModel::Event => "event",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "day" => FlowModel::Day,
            "day_on_night" => FlowModel::DayOnNight,
            "night" => FlowModel::Night,
            "event" => FlowModel::Event,
            other => return Err(Error::arg(format!("unknown model '{other}'"))),
        })
    }

    fn prefix(self) -> &'static str {
        match self {
            FlowModel::Day | FlowModel::DayOnNight => DAY,
            FlowModel::Night => NIGHT,
            FlowModel::Event => EVENT,
        }
    }

    fn domain(self) -> &'static str {
        match self {
            FlowModel::Day => "day",
            FlowModel::DayOnNight | FlowModel::Night => "night",
            FlowModel::Event => "event",
        }
    }
}

// ---- data preparation ---------------------------------------------------

struct Prepared<'a> {
    sample: &'a SceneSample,
    day_t: Tensor,
    day_t1: Tensor,
    night_t: Tensor,
    night_t1: Tensor,
    slices: Vec<Tensor>,
}

fn check_dataset(samples: &[SceneSample]) -> Result<()> {
    let Some(first) = samples.first() else {
        return Err(Error::arg("training set is empty"));
    };
    let (h, w) = (first.height(), first.width());
    if samples.iter().any(|s| s.height() != h || s.width() != w) {
        return Err(Error::arg("all samples must share one frame size"));
    }
    if h % flowcore::FEATURE_STRIDE != 0 || w % flowcore::FEATURE_STRIDE != 0 {
        return Err(Error::arg(format!(
            "frame size {h}x{w} must be a multiple of {}",
            flowcore::FEATURE_STRIDE
        )));
    }
    Ok(())
}

fn slices_of(s: &SceneSample, bins: usize) -> Result<Vec<Tensor>> {
    event_slices(&s.events, 0.0, s.frame_interval, bins)
}

fn prepare<'a>(samples: &'a [SceneSample], cfg: &TrainConfig) -> Result<Vec<Prepared<'a>>> {
    samples
        .iter()
        .map(|s| {
            Ok(Prepared {
                sample: s,
                day_t: s.frame_t.to_gray().to_tensor(),
                day_t1: s.frame_t1.to_gray().to_tensor(),
                night_t: s.night_t.to_gray().to_tensor(),
                night_t1: s.night_t1.to_gray().to_tensor(),
                slices: slices_of(s, cfg.event_bins)?,
            })
        })
        .collect()
}

// ---- shared pieces ------------------------------------------------------

/// Below this kept fraction the occlusion estimate is treated as unreliable
/// and every pixel is used.
pub const MIN_KEEP_FRACTION: f64 = 0.5;

/// Pixels passing the forward-backward check. Out-of-frame sources stay in:
/// the warp clamps at the border, and masking them lets flows escape the
/// frame with zero loss.
fn keep_mask(fw: &Tensor, bw: &Tensor) -> Result<Tensor> {
    let f = FlowField::from_tensor(fw)?;
    let b = FlowField::from_tensor(bw)?;
    let keep = flowcore::occlusion_mask(&f, &b)?.inverted();
    if (keep.count() as f64) < MIN_KEEP_FRACTION * (f.height() * f.width()) as f64 {
        return Ok(Tensor::full(&[1, f.height(), f.width()], 1.0));
    }
    Ok(keep.to_tensor())
}

fn zero(g: &mut Graph) -> Var {
    g.constant(Tensor::scalar(0.0))
}

/// Photometric loss in both directions, averaged. Fully occluded
/// directions contribute zero.
fn symmetric_photometric(
    g: &mut Graph,
    b: Binder,
    prefix: &str,
    xt: Var,
    xt1: Var,
    radius: usize,
) -> Result<(FlowPass, Var, Tensor)> {
    let pass = flowcore::flow_pass(g, b, prefix, xt, xt1, radius)?;
    let bw = flowcore::backward_flow(g, b, prefix, &pass, radius)?;
    let keep_fw = keep_mask(g.value(pass.flow), g.value(bw))?;
    let keep_bw = keep_mask(g.value(bw), g.value(pass.flow))?;
    let mut parts = Vec::new();
    if keep_fw.sum() > 0.0 {
        parts.push(flowcore::photometric_var(g, xt, xt1, pass.flow, &keep_fw)?);
    }
    if keep_bw.sum() > 0.0 {
        parts.push(flowcore::photometric_var(g, xt1, xt, bw, &keep_bw)?);
    }
    let loss = match parts.as_slice() {
        [] => zero(g),
        [a] => *a,
        [a, c] => {
            let s = g.add(*a, *c)?;
            g.scale(s, 0.5)
        }
        _ => unreachable!(),
    };
    Ok((pass, loss, keep_fw))
}

fn cost_of(g: &mut Graph, b: Binder, prefix: &str, xt: Var, xt1: Var, radius: usize) -> Result<Var> {
    let et = flowcore::encode_var(g, b, prefix, xt)?;
    let et1 = flowcore::encode_var(g, b, prefix, xt1)?;
    g.cost_volume(et.features, et1.features, radius)
}

fn weighted(g: &mut Graph, acc: Var, term: Var, w: f64) -> Result<Var> {
    let t = g.scale(term, w);
    g.add(acc, t)
}

fn step_seed(seed: u64, stage: u64, epoch: usize, index: usize) -> u64 {
    crate::synthdata::sample_seed(seed ^ (stage << 56) ^ ((epoch as u64) << 32), index)
}

fn adam(cfg: &TrainConfig) -> Adam {
    Adam::new(AdamConfig {
        lr: cfg.lr,
        ..Default::default()
    })
}

/// Cosine decay from `lr` to `lr * lr_final` over `epochs`.
pub fn epoch_lr(cfg: &TrainConfig, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return cfg.lr;
    }
    let t = epoch as f64 / (epochs - 1) as f64;
    let floor = cfg.lr * cfg.lr_final;
    floor + 0.5 * (cfg.lr - floor) * (1.0 + (std::f64::consts::PI * t).cos())
}

fn check_finite(values: &[f64], names: &[&str]) -> Result<()> {
    for (v, n) in values.iter().zip(names) {
        if !v.is_finite() {
            return Err(Error::Numeric { term: n.to_string() });
        }
    }
    Ok(())
}

/// Runs `epochs` passes over shuffled batches, calling `step` per sample.
#[allow(clippy::too_many_arguments)]
fn run_epochs<F>(
    cfg: &TrainConfig,
    stage_id: u64,
    epochs: usize,
    data: &[Prepared],
    store: &mut ParamStore,
    columns: &[&str],
    holdout: &[SceneSample],
    model: FlowModel,
    stage: Stage,
    step: F,
) -> Result<TrainLog>
where
    F: Fn(&ParamStore, &Prepared, u64) -> Result<(Vec<f64>, BTreeMap<String, Tensor>)> + Sync,
{
    let mut log = TrainLog::new(stage, columns);
    let mut order_rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, stage_id, usize::MAX >> 32, 0));
    let mut opt_main = adam(cfg);
    let mut opt_disc = adam(cfg);
    let indexed: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..epochs {
        let lr = epoch_lr(cfg, epoch, epochs);
        opt_main.set_lr(lr);
        opt_disc.set_lr(lr);
        let mut order = indexed.clone();
        order.shuffle(&mut order_rng);
        let mut sums = vec![0.0; columns.len()];
        for batch in order.chunks(cfg.batch_size) {
            let snapshot = &*store;
            let (losses, grads) = parallel_grads(batch, |&i| step(snapshot, &data[i], step_seed(cfg.seed, stage_id, epoch, i)))?;
            check_finite(&losses, columns)?;
            let (disc, main): (BTreeMap<_, _>, BTreeMap<_, _>) = grads
                .into_iter()
                .partition(|(k, _)| k.starts_with(&format!("{}.", appearance::DISC_PREFIX)));
            opt_main.step(store, &main)?;
            opt_disc.step(store, &disc)?;
            for (s, l) in sums.iter_mut().zip(&losses) {
                *s += l * batch.len() as f64;
            }
        }
        let values = sums.iter().map(|s| s / data.len() as f64).collect();
        let holdout_epe = if holdout.is_empty() {
            None
        } else {
            Some(evaluate_model(store, model, holdout, cfg)?.mean_epe)
        };
        log.rows.push(LogRow {
            epoch: epoch + 1,
            values,
            holdout_epe,
        });
    }
    Ok(log)
}

// ---- stage 1 ------------------------------------------------------------

/// Freshly initialized day, event and decomposer networks.
pub fn init_params(cfg: &TrainConfig) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    flowcore::init_flow_net(&mut store, &mut rng, DAY, 1, cfg.radius);
    flowcore::init_flow_net(&mut store, &mut rng, EVENT, 2, cfg.radius);
    retinex::init_params(&mut store, &mut rng, 1);
    store
}

pub const STAGE1_COLUMNS: [&str; 5] = ["pho_day", "pho_event", "decomp_recon", "decomp_smooth", "decomp_consistency"];

/// Trains the day flow, event flow and decomposer networks.
pub fn stage1(train: &[SceneSample], holdout: &[SceneSample], cfg: &TrainConfig) -> Result<StageOutput> {
    cfg.validate_hyper()?;
    check_dataset(train)?;
    let data = prepare(train, cfg)?;
    let mut store = init_params(cfg);
    let dcfg = cfg.decomposer();
    let r = cfg.radius;
    let log = run_epochs(
        cfg,
        1,
        cfg.epochs_stage1,
        &data,
        &mut store,
        &STAGE1_COLUMNS,
        holdout,
        FlowModel::Day,
        Stage::Stage1,
        |store, p, _| {
            let mut g = Graph::new();
            let b = Binder::trainable(store);
            let xt = g.constant(p.day_t.clone());
            let xt1 = g.constant(p.day_t1.clone());
            let (_, pho_day, keep) = symmetric_photometric(&mut g, b, DAY, xt, xt1, r)?;
            let (_, fev) = boundary::event_flow_var(&mut g, b, EVENT, &p.slices, r)?;
            let pho_ev = if keep.sum() > 0.0 {
                flowcore::photometric_var(&mut g, xt, xt1, fev, &keep)?
            } else {
                zero(&mut g)
            };
            let nt = g.constant(p.night_t.clone());
            let nt1 = g.constant(p.night_t1.clone());
            let d0 = retinex::pair_objectives(&mut g, b, xt, nt, &dcfg)?;
            let d1 = retinex::pair_objectives(&mut g, b, xt1, nt1, &dcfg)?;
            let dsum = g.add(d0.total, d1.total)?;
            let dec = g.scale(dsum, 0.5);
            let a = g.add(pho_day, pho_ev)?;
            let total = g.add(a, dec)?;
            let grads = g.backward(total);
            let avg = |g: &Graph, x: Var, y: Var| 0.5 * (g.scalar(x) + g.scalar(y));
            Ok((
                vec![
                    g.scalar(pho_day),
                    g.scalar(pho_ev),
                    avg(&g, d0.recon, d1.recon),
                    avg(&g, d0.smooth, d1.smooth),
                    avg(&g, d0.consistency, d1.consistency),
                ],
                g.param_grads(&grads),
            ))
        },
    )?;
    Ok(StageOutput {
        checkpoint: Checkpoint::new(Stage::Stage1, cfg.to_toml(), store),
        log,
    })
}

// ---- stage 2 ------------------------------------------------------------

fn require(store: &ParamStore, prefixes: &[&str]) -> Result<()> {
    for p in prefixes {
        if store.names_with_prefix(p).is_empty() {
            return Err(Error::Version(format!("checkpoint lacks the '{p}' network")));
        }
    }
    Ok(())
}

fn copy_encoder(store: &mut ParamStore, from: &str, to: &str) {
    for layer in ["enc1", "enc2", "enc3"] {
        store.copy_prefix(&format!("{from}.{layer}"), &format!("{to}.{layer}"));
    }
}

/// Stage-2 parameters: night and reflectance networks start from the day net.
pub fn init_stage2(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<ParamStore> {
    ckpt.expect_stage(Stage::Stage1)?;
    let mut store = ckpt.params.clone();
    require(&store, &[DAY, EVENT, retinex::PREFIX])?;
    copy_encoder(&mut store, DAY, DAYREF);
    copy_encoder(&mut store, DAY, NIGHTREF);
    store.copy_prefix(DAY, NIGHT);
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, 2, 0, usize::MAX >> 8));
    appearance::init_discriminator(&mut store, &mut rng, 1);
    Ok(store)
}

pub const STAGE2_COLUMNS: [&str; 7] = ["pho_day", "adv", "kl_cost", "intra", "inter", "adv_d", "total"];

/// Appearance adaptation of the night network.
pub fn stage2(train: &[SceneSample], holdout: &[SceneSample], ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<StageOutput> {
    cfg.validate_hyper()?;
    check_dataset(train)?;
    let mut store = init_stage2(ckpt, cfg)?;
    let data = prepare(train, cfg)?;
    let r = cfg.radius;
    let [l1, l2, l3, l4, ..] = cfg.lambdas();
    let need_cv = l2 > 0.0 || l3 > 0.0 || l4 > 0.0;
    let log = run_epochs(
        cfg,
        2,
        cfg.epochs_stage2,
        &data,
        &mut store,
        &STAGE2_COLUMNS,
        holdout,
        FlowModel::Night,
        Stage::Stage2,
        |store, p, _| {
            let mut g = Graph::new();
            let b = Binder::trainable(store);
            let b_dec = b.with_trainable(cfg.finetune_decomposer);
            let dt = g.constant(p.day_t.clone());
            let dt1 = g.constant(p.day_t1.clone());
            let nt = g.constant(p.night_t.clone());
            let nt1 = g.constant(p.night_t1.clone());
            let (pass, pho, _) = symmetric_photometric(&mut g, b, DAY, dt, dt1, r)?;
            let mut total = pho;
            let mut vals = [g.scalar(pho), 0.0, 0.0, 0.0, 0.0, 0.0];
            let mut disc_grads = BTreeMap::new();
            if l1 > 0.0 || need_cv {
                let (rdt, _) = retinex::forward(&mut g, b_dec, dt)?;
                let (rdt1, _) = retinex::forward(&mut g, b_dec, dt1)?;
                let (rnt, _) = retinex::forward(&mut g, b_dec, nt)?;
                let (rnt1, _) = retinex::forward(&mut g, b_dec, nt1)?;
                if l1 > 0.0 {
                    let bd = Binder::frozen(store);
                    let day = vec![appearance::disc_logit(&mut g, bd, rdt)?, appearance::disc_logit(&mut g, bd, rdt1)?];
                    let night = vec![appearance::disc_logit(&mut g, bd, rnt)?, appearance::disc_logit(&mut g, bd, rnt1)?];
                    let (_, loss_g) = appearance::adversarial_from_logits(&mut g, &day, &night)?;
                    total = weighted(&mut g, total, loss_g, l1)?;
                    vals[1] = l1 * g.scalar(loss_g);
                    // Discriminator step on detached reflectances.
                    let mut gd = Graph::new();
                    let bdt = Binder::trainable(store);
                    let mut day_d = Vec::new();
                    let mut night_d = Vec::new();
                    for (x, is_day) in [(rdt, true), (rdt1, true), (rnt, false), (rnt1, false)] {
                        let c = gd.constant(g.value(x).clone());
                        let z = appearance::disc_logit(&mut gd, bdt, c)?;
                        if is_day { day_d.push(z) } else { night_d.push(z) }
                    }
                    let (loss_d, _) = appearance::adversarial_from_logits(&mut gd, &day_d, &night_d)?;
                    vals[5] = gd.scalar(loss_d);
                    let neg = gd.scale(loss_d, -1.0);
                    let gr = gd.backward(neg);
                    disc_grads = gd.param_grads(&gr);
                }
                if need_cv {
                    let cv_d = pass.cost;
                    let cv_dr = cost_of(&mut g, b, DAYREF, rdt, rdt1, r)?;
                    let cv_nr = cost_of(&mut g, b, NIGHTREF, rnt, rnt1, r)?;
                    let cv_n = cost_of(&mut g, b, NIGHT, nt, nt1, r)?;
                    if l2 > 0.0 {
                        let kl = appearance::kl_cost_var(&mut g, cv_nr, cv_dr)?;
                        total = weighted(&mut g, total, kl, l2)?;
                        vals[2] = l2 * g.scalar(kl);
                    }
                    if l3 > 0.0 {
                        // Each reflectance cost volume is pulled toward its image counterpart.
                        let cv_d_target = g.detach(cv_d);
                        let cv_n_target = g.detach(cv_n);
                        let intra = appearance::intra_align_var(&mut g, cv_d_target, cv_dr, cv_n_target, cv_nr)?;
                        total = weighted(&mut g, total, intra, l3)?;
                        vals[3] = l3 * g.scalar(intra);
                    }
                    if l4 > 0.0 {
                        let inter = appearance::inter_align_var(&mut g, cv_d, cv_dr, cv_n, cv_nr)?;
                        total = weighted(&mut g, total, inter, l4)?;
                        vals[4] = l4 * g.scalar(inter);
                    }
                }
            }
            let gr = g.backward(total);
            let mut grads = g.param_grads(&gr);
            grads.retain(|k, _| !k.starts_with(&format!("{}.", appearance::DISC_PREFIX)));
            grads.extend(disc_grads);
            let tot = g.scalar(total);
            Ok((vec![vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], tot], grads))
        },
    )?;
    Ok(StageOutput {
        checkpoint: Checkpoint::new(Stage::Stage2, cfg.to_toml(), store),
        log,
    })
}

// ---- stage 3 ------------------------------------------------------------

pub fn init_stage3(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<ParamStore> {
    ckpt.expect_stage(Stage::Stage2)?;
    let mut store = ckpt.params.clone();
    require(&store, &[NIGHT, EVENT])?;
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, 3, 0, usize::MAX >> 8));
    boundary::init_attention(&mut store, &mut rng, cfg.classes);
    Ok(store)
}

pub const STAGE3_COLUMNS: [&str; 7] = ["pho_night", "cls", "contra", "self_flow", "samples_used", "valid_fraction", "total"];

/// Correlation map of a sample given the current night flow.
pub fn sample_correlation(sample: &SceneSample, night_flow: &FlowField, cfg: &TrainConfig) -> Result<Tensor> {
    let dl = if cfg.motion_compensated {
        boundary::accumulate_compensated(&sample.events, 0.0, sample.frame_interval * (1.0 + 1e-9) + 1e-12, night_flow)?
    } else {
        sample.event_map()
    };
    let st = boundary::image_st_gradient(&sample.night_t, night_flow)?;
    boundary::correlation_map(&dl, &st, cfg.corr_patch)
}

/// Boundary adaptation of the night network against the frozen event network.
pub fn stage3(train: &[SceneSample], holdout: &[SceneSample], ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<StageOutput> {
    cfg.validate_hyper()?;
    check_dataset(train)?;
    if train.iter().all(|s| s.events.is_empty()) {
        return Err(Error::arg("stage 3 needs event data, but every sample has an empty event stream"));
    }
    let mut store = init_stage3(ckpt, cfg)?;
    let data = prepare(train, cfg)?;
    let r = cfg.radius;
    let [_, _, _, _, l5, l6, l7] = cfg.lambdas();
    let w_pho = cfg.stage3_photometric;
    let flow_active = w_pho > 0.0 || l6 > 0.0 || l7 > 0.0;
    let log = run_epochs(
        cfg,
        3,
        cfg.epochs_stage3,
        &data,
        &mut store,
        &STAGE3_COLUMNS,
        holdout,
        FlowModel::Night,
        Stage::Stage3,
        |store, p, seed| {
            let mut g = Graph::new();
            let b = Binder::trainable(store);
            let b_night = b.with_trainable(flow_active);
            let frozen = Binder::frozen(store);
            let nt = g.constant(p.night_t.clone());
            let nt1 = g.constant(p.night_t1.clone());
            let mut vals = [0.0; 7];
            let (pass, mut total) = if w_pho > 0.0 {
                let (pass, pho, _) = symmetric_photometric(&mut g, b_night, NIGHT, nt, nt1, r)?;
                let t = g.scale(pho, w_pho);
                vals[0] = g.scalar(t);
                (pass, t)
            } else {
                let pass = flowcore::flow_pass(&mut g, b_night, NIGHT, nt, nt1, r)?;
                (pass, zero(&mut g))
            };
            let f_n = FlowField::from_tensor(g.value(pass.flow))?;
            let corr = sample_correlation(p.sample, &f_n, cfg)?;
            let labels = boundary::class_labels(&corr, cfg.classes)?;
            let cv = g.constant(corr);
            let a = boundary::attention_var(&mut g, b, cv)?;
            let cls = boundary::cls_loss_var(&mut g, a, &labels)?;
            total = weighted(&mut g, total, cls, l5)?;
            vals[1] = l5 * g.scalar(cls);
            if l6 > 0.0 || l7 > 0.0 {
                let (ev_pass, f_ev) = boundary::event_flow_var(&mut g, frozen, EVENT, &p.slices, r)?;
                if l6 > 0.0 {
                    let n0 = labels.iter().filter(|l| **l == 0).count();
                    let n_eff = cfg.samples.min(n0).min(labels.len() - n0);
                    vals[4] = n_eff as f64;
                    if n_eff > 0 {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        let idx = boundary::sample_indices(&labels, n_eff, &mut rng)?;
                        let cv_n = g.upsample_nearest(pass.cost, flowcore::FEATURE_STRIDE)?;
                        let cv_ev = g.upsample_nearest(ev_pass.cost, flowcore::FEATURE_STRIDE)?;
                        let s = boundary::sample_feature_vars(&mut g, cv_n, cv_ev, a, &idx)?;
                        let contra = boundary::contrastive_var(&mut g, &s, cfg.tau)?;
                        total = weighted(&mut g, total, contra, l6)?;
                        vals[2] = l6 * g.scalar(contra);
                    }
                }
                if l7 > 0.0 {
                    let valid = boundary::valid_mask(g.value(a), cfg.p0())?;
                    vals[5] = valid.count() as f64 / labels.len() as f64;
                    if valid.count() > 0 {
                        let sf = boundary::motion_consistency_var(&mut g, pass.flow, f_ev, &valid)?;
                        total = weighted(&mut g, total, sf, l7)?;
                        vals[3] = l7 * g.scalar(sf);
                    }
                }
            }
            vals[6] = g.scalar(total);
            let gr = g.backward(total);
            Ok((vals.to_vec(), g.param_grads(&gr)))
        },
    )?;
    Ok(StageOutput {
        checkpoint: Checkpoint::new(Stage::Stage3, cfg.to_toml(), store),
        log,
    })
}

/// Runs the stage matching `stage` from the previous checkpoint.
pub fn run_stage(
    stage: u8,
    train: &[SceneSample],
    holdout: &[SceneSample],
    prev: Option<&Checkpoint>,
    cfg: &TrainConfig,
) -> Result<StageOutput> {
    let need = || Error::arg(format!("stage {stage} needs the previous stage's checkpoint"));
    match stage {
        1 => stage1(train, holdout, cfg),
        2 => stage2(train, holdout, prev.ok_or_else(need)?, cfg),
        3 => stage3(train, holdout, prev.ok_or_else(need)?, cfg),
        other => Err(Error::arg(format!("stage must be 1, 2 or 3, got {other}"))),
    }
}

// ---- evaluation ---------------------------------------------------------

pub fn predict(store: &ParamStore, model: FlowModel, sample: &SceneSample, cfg: &TrainConfig) -> Result<FlowField> {
    let r = cfg.radius;
    match model {
        FlowModel::Day => flowcore::estimate_flow(store, DAY, &sample.frame_t.to_gray().to_tensor(), &sample.frame_t1.to_gray().to_tensor(), r),
        FlowModel::DayOnNight | FlowModel::Night => flowcore::estimate_flow(
            store,
            model.prefix(),
            &sample.night_t.to_gray().to_tensor(),
            &sample.night_t1.to_gray().to_tensor(),
            r,
        ),
        FlowModel::Event => boundary::event_flow_forward(store, EVENT, &slices_of(sample, cfg.event_bins)?, r),
    }
}

/// EPE, Fl-all and boundary-band EPE of `model` over `samples`.
pub fn evaluate_model(store: &ParamStore, model: FlowModel, samples: &[SceneSample], cfg: &TrainConfig) -> Result<EvalReport> {
    require(store, &[model.prefix()])?;
    let items: Vec<(String, FlowField, FlowField)> = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| Ok((sample_id(i), predict(store, model, s, cfg)?, s.gt_flow.clone())))
        .collect::<Result<_>>()?;
    evaluate::build_report(model.name(), model.domain(), &items)
}

/// Occlusion estimate of a trained network on a sample's frames.
pub fn estimate_occlusion(store: &ParamStore, model: FlowModel, sample: &SceneSample, cfg: &TrainConfig) -> Result<Mask> {
    let (a, b) = match model {
        FlowModel::Day => (&sample.frame_t, &sample.frame_t1),
        _ => (&sample.night_t, &sample.night_t1),
    };
    let fw = flowcore::estimate_flow(store, model.prefix(), &a.to_gray().to_tensor(), &b.to_gray().to_tensor(), cfg.radius)?;
    let bw = flowcore::estimate_flow(store, model.prefix(), &b.to_gray().to_tensor(), &a.to_gray().to_tensor(), cfg.radius)?;
    Ok(flowcore::occlusion_mask(&fw, &bw)?.or(&flowcore::valid_mask(&fw).inverted()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_terms_sum_to_eight() {
        let t = LossTerms {
            pho: 1.0,
            adv: 1.0,
            kl_cost: 1.0,
            intra: 1.0,
            inter: 1.0,
            cls: 1.0,
            contra: 1.0,
            self_flow: 1.0,
        };
        let mut cfg = TrainConfig::default();
        for i in 1..=7 {
            cfg.set(&format!("lambda{i}=1.0")).unwrap();
        }
        assert_eq!(total_loss(&t, &cfg, ActiveTerms::All).unwrap(), 8.0);
        for i in 1..=7 {
            cfg.set(&format!("lambda{i}=0.0")).unwrap();
        }
        assert_eq!(total_loss(&t, &cfg, ActiveTerms::All).unwrap(), 1.0);
        assert_eq!(total_loss(&t, &TrainConfig::default(), ActiveTerms::Stage1).unwrap(), 1.0);
    }

    #[test]
    fn nan_term_is_named() {
        let t = LossTerms {
            kl_cost: f64::NAN,
            ..Default::default()
        };
        match total_loss(&t, &TrainConfig::default(), ActiveTerms::All) {
            Err(Error::Numeric { term }) => assert_eq!(term, "kl_cost"),
            other => panic!("unexpected {other:?}"),
        }
        // Inactive terms are not inspected.
        assert!(total_loss(&t, &TrainConfig::default(), ActiveTerms::Stage3).is_ok());
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(stage1(&[], &[], &TrainConfig::default()).is_err());
    }
}
