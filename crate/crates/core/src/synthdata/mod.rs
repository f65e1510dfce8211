//! Synthetic day/night/event samples and their on-disk dataset layout.

pub mod events;
pub mod night;
pub mod scene;

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats;
use crate::raster::{FlowField, Image, Mask, MIN_FRAME_SIDE};

pub use events::{accumulate_events, event_slices, simulate_events, Event, EventSimConfig, EventStream, LOG_EPS};
pub use night::{apply_illumination, darken, IllumMap, IllumSpec, NoiseSpec};
pub use scene::{gen_scene, gen_sequence, Motion, MotionSpec, Scene};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// One training/evaluation example: a day pair, its night rendering, and events.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub seed: u64,
    pub frame_t: Image,
    pub frame_t1: Image,
    pub night_t: Image,
    pub night_t1: Image,
    pub gt_flow: FlowField,
    pub gt_occlusion: Mask,
    pub gt_illumination: IllumMap,
    pub events: EventStream,
    /// Seconds between `frame_t` and `frame_t1`.
    pub frame_interval: f64,
}

impl SceneSample {
    pub fn height(&self) -> usize {
        self.frame_t.height()
    }

    pub fn width(&self) -> usize {
        self.frame_t.width()
    }

    /// Accumulated events over the whole inter-frame window.
    pub fn event_map(&self) -> crate::tensor::Tensor {
        accumulate_events(&self.events, 0.0, self.frame_interval * (1.0 + 1e-9) + 1e-12).expect("positive interval")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleConfig {
    pub height: usize,
    pub width: usize,
    pub max_displacement: f64,
    pub affine: bool,
    pub illumination: IllumSpec,
    pub noise: NoiseSpec,
    pub events: EventSimConfig,
    pub frame_interval: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            height: 48,
            width: 48,
            max_displacement: 4.0,
            affine: true,
            illumination: IllumSpec::default(),
            noise: NoiseSpec::default(),
            events: EventSimConfig::default(),
            frame_interval: 0.05,
        }
    }
}

/// Rendered frames per interval fed to the event simulator.
pub const EVENT_SUBFRAMES: usize = 10;

/// Derives the seed of sample `index` in a set generated from `base`.
pub fn sample_seed(base: u64, index: usize) -> u64 {
    let mut z = base ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Builds a full sample from one seed.
///
/// Frames are snapped to the 16-bit grid and flow/illumination to `f32` so
/// that the dataset files reproduce the sample exactly. Events come from the
/// noise-free night frames rendered at `EVENT_SUBFRAMES` steps along the
/// motion.
pub fn generate_sample(seed: u64, cfg: &SampleConfig) -> Result<SceneSample> {
    if !(cfg.frame_interval > 0.0) {
        return Err(Error::arg("frame interval must be positive"));
    }
    let mut spec = MotionSpec::random(cfg.max_displacement);
    spec.affine = cfg.affine;
    let (scene, inner) = gen_sequence(seed, cfg.height, cfg.width, &spec, EVENT_SUBFRAMES)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5A5A_0F0F_3C3C_9696);
    let illum = cfg.illumination.sample(cfg.height, cfg.width, &mut rng)?.quantized_f32();
    let night_t = apply_illumination(&scene.frame_t, &illum, cfg.noise, &mut rng)?;
    let night_t1 = apply_illumination(&scene.frame_t1, &illum, cfg.noise, &mut rng)?;
    let clean = NoiseSpec { sigma: 0.0 };
    let clean_t = apply_illumination(&scene.frame_t, &illum, clean, &mut rng)?;
    let clean_t1 = apply_illumination(&scene.frame_t1, &illum, clean, &mut rng)?;
    let mut frames = vec![clean_t];
    for f in &inner {
        frames.push(apply_illumination(f, &illum, clean, &mut rng)?);
    }
    frames.push(clean_t1);
    let times: Vec<f64> = (0..frames.len())
        .map(|k| cfg.frame_interval * k as f64 / EVENT_SUBFRAMES as f64)
        .collect();
    let events = simulate_events(&frames, &times, cfg.events)?;
    let flow = &scene.gt_flow;
    let gt_flow = FlowField::new(
        flow.height(),
        flow.width(),
        flow.u().iter().map(|v| *v as f32 as f64).collect(),
        flow.v().iter().map(|v| *v as f32 as f64).collect(),
    )?;
    Ok(SceneSample {
        seed,
        frame_t: scene.frame_t.quantized_u16(),
        frame_t1: scene.frame_t1.quantized_u16(),
        night_t: night_t.quantized_u16(),
        night_t1: night_t1.quantized_u16(),
        gt_flow,
        gt_occlusion: scene.gt_occlusion,
        gt_illumination: illum,
        events,
        frame_interval: cfg.frame_interval,
    })
}

/// Generates `count` samples in parallel from seeds derived from `base_seed`.
pub fn generate_dataset(base_seed: u64, count: usize, cfg: &SampleConfig) -> Result<Vec<SceneSample>> {
    (0..count)
        .into_par_iter()
        .map(|i| generate_sample(sample_seed(base_seed, i), cfg))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub id: String,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub contrast: f64,
    pub frame_interval: f64,
    pub events: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format_version: u32,
    pub samples: Vec<IndexEntry>,
}

pub fn sample_id(index: usize) -> String {
    format!("sample_{index:05}")
}

/// Writes samples as `index.json` plus one directory per sample.
pub fn write_dataset(samples: &[SceneSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        if s.height() < MIN_FRAME_SIDE || s.width() < MIN_FRAME_SIDE {
            return Err(Error::arg(format!("sample {i} is smaller than {MIN_FRAME_SIDE} pixels")));
        }
        let id = sample_id(i);
        let sd = dir.join(&id);
        fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        formats::write_png16(&sd.join("frame_t.png"), &s.frame_t)?;
        formats::write_png16(&sd.join("frame_t1.png"), &s.frame_t1)?;
        formats::write_png16(&sd.join("night_t.png"), &s.night_t)?;
        formats::write_png16(&sd.join("night_t1.png"), &s.night_t1)?;
        formats::write_flo(&sd.join("flow.flo"), &s.gt_flow)?;
        formats::write_mask_png(&sd.join("occ.png"), &s.gt_occlusion)?;
        formats::write_illum(&sd.join("illum.bin"), &s.gt_illumination)?;
        formats::write_events_csv(&sd.join("events.csv"), &s.events)?;
        entries.push(IndexEntry {
            id,
            seed: s.seed,
            height: s.height(),
            width: s.width(),
            contrast: s.events.contrast(),
            frame_interval: s.frame_interval,
            events: s.events.len(),
        });
    }
    let index = DatasetIndex {
        format_version: DATASET_FORMAT_VERSION,
        samples: entries,
    };
    let path = dir.join("index.json");
    let text = serde_json::to_string_pretty(&index).expect("index serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: DatasetIndex = serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e.to_string()))?;
    if index.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version(format!(
            "dataset format {} (expected {DATASET_FORMAT_VERSION})",
            index.format_version
        )));
    }
    Ok(index)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<SceneSample>> {
    let index = read_index(dir)?;
    index.samples.iter().map(|e| read_sample(dir, e)).collect()
}

fn read_sample(dir: &Path, e: &IndexEntry) -> Result<SceneSample> {
    let sd = dir.join(&e.id);
    let check = |img: Image, name: &str| -> Result<Image> {
        if img.height() != e.height || img.width() != e.width {
            return Err(Error::corrupt(sd.join(name), "size differs from index"));
        }
        Ok(img)
    };
    let frame_t = check(formats::read_png16(&sd.join("frame_t.png"))?, "frame_t.png")?;
    let frame_t1 = check(formats::read_png16(&sd.join("frame_t1.png"))?, "frame_t1.png")?;
    let night_t = check(formats::read_png16(&sd.join("night_t.png"))?, "night_t.png")?;
    let night_t1 = check(formats::read_png16(&sd.join("night_t1.png"))?, "night_t1.png")?;
    let gt_flow = formats::read_flo(&sd.join("flow.flo"))?;
    let gt_occlusion = formats::read_mask_png(&sd.join("occ.png"))?;
    let gt_illumination = formats::read_illum(&sd.join("illum.bin"))?;
    if (gt_flow.height(), gt_flow.width()) != (e.height, e.width)
        || (gt_occlusion.height(), gt_occlusion.width()) != (e.height, e.width)
        || (gt_illumination.height(), gt_illumination.width()) != (e.height, e.width)
    {
        return Err(Error::corrupt(&sd, "ground-truth sizes differ from index"));
    }
    let events = formats::read_events_csv(&sd.join("events.csv"), e.height, e.width, e.contrast)?;
    Ok(SceneSample {
        seed: e.seed,
        frame_t,
        frame_t1,
        night_t,
        night_t1,
        gt_flow,
        gt_occlusion,
        gt_illumination,
        events,
        frame_interval: e.frame_interval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SampleConfig {
        SampleConfig {
            height: 32,
            width: 32,
            max_displacement: 3.0,
            ..Default::default()
        }
    }

    #[test]
    fn night_frames_follow_the_illumination_model() {
        let s = generate_sample(11, &small()).unwrap();
        let sigma = small().noise.sigma;
        for (i, n) in s.night_t.data().iter().enumerate() {
            let r = s.frame_t.data()[i] * s.gt_illumination.data()[i];
            assert!((n - r).abs() <= 3.0 * sigma + 2e-5);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_sample(5, &small()).unwrap(), generate_sample(5, &small()).unwrap());
        assert_ne!(sample_seed(0, 1), sample_seed(1, 0));
    }

    #[test]
    fn missing_dataset_is_io_error() {
        let err = read_dataset(Path::new("/nonexistent/nightflow")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }
}
