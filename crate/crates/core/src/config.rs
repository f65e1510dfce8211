//! Training configuration: one flat TOML table plus per-key overrides.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retinex::DecomposerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Adversarial reflectance alignment.
    pub lambda1: f64,
    /// KL alignment of reflectance cost volumes.
    pub lambda2: f64,
    /// Intra-domain cost consistency.
    pub lambda3: f64,
    /// Inter-domain residual alignment.
    pub lambda4: f64,
    /// Motion-class cross-entropy.
    pub lambda5: f64,
    /// Contrastive transfer.
    pub lambda6: f64,
    /// Masked event/night flow consistency.
    pub lambda7: f64,
    pub tau: f64,
    /// Motion classes K.
    pub classes: usize,
    /// Contrastive samples N per class group.
    pub samples: usize,
    /// Event contrast threshold C.
    pub contrast: f64,
    /// Cost-volume radius d.
    pub radius: usize,
    /// Valid-mask threshold; defaults to `1 / classes`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p0: Option<f64>,
    pub lr: f64,
    /// Fraction of `lr` reached at the end of each stage (cosine decay).
    pub lr_final: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub epochs_stage3: usize,
    pub finetune_decomposer: bool,
    /// Weight of the night photometric term kept active in stage 3.
    pub stage3_photometric: f64,
    pub corr_patch: usize,
    pub event_bins: usize,
    pub motion_compensated: bool,
    pub decomp_recon: f64,
    pub decomp_smooth: f64,
    pub decomp_consistency: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            lambda1: 0.1,
            lambda2: 1.0,
            lambda3: 1.0,
            lambda4: 1.0,
            lambda5: 0.1,
            lambda6: 0.1,
            lambda7: 1.0,
            tau: 0.07,
            classes: 10,
            samples: 1000,
            contrast: 0.15,
            radius: 4,
            p0: None,
            lr: 1e-3,
            lr_final: 0.1,
            batch_size: 8,
            epochs_stage1: 30,
            epochs_stage2: 10,
            epochs_stage3: 5,
            finetune_decomposer: false,
            stage3_photometric: 1.0,
            corr_patch: 3,
            event_bins: 5,
            motion_compensated: false,
            decomp_recon: 1.0,
            decomp_smooth: 0.1,
            decomp_consistency: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn p0(&self) -> f64 {
        self.p0.unwrap_or(1.0 / self.classes as f64)
    }

    pub fn lambdas(&self) -> [f64; 7] {
        [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda4,
            self.lambda5,
            self.lambda6,
            self.lambda7,
        ]
    }

    pub fn decomposer(&self) -> DecomposerConfig {
        DecomposerConfig {
            recon_weight: self.decomp_recon,
            smooth_weight: self.decomp_smooth,
            consistency_weight: self.decomp_consistency,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            ..Default::default()
        }
    }

    /// Checks every field except the epoch counts.
    pub fn validate_hyper(&self) -> Result<()> {
        for (i, l) in self.lambdas().iter().enumerate() {
            if !(l.is_finite() && *l >= 0.0) {
                return Err(Error::arg(format!("lambda{} = {l} must be finite and >= 0", i + 1)));
            }
        }
        let positive = [
            ("tau", self.tau),
            ("contrast", self.contrast),
            ("lr", self.lr),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::arg(format!("{name} = {v} must be positive")));
            }
        }
        let non_negative = [
            ("stage3_photometric", self.stage3_photometric),
            ("decomp_recon", self.decomp_recon),
            ("decomp_smooth", self.decomp_smooth),
            ("decomp_consistency", self.decomp_consistency),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::arg(format!("{name} = {v} must be >= 0")));
            }
        }
        if !(self.lr_final > 0.0 && self.lr_final <= 1.0) {
            return Err(Error::arg(format!("lr_final = {} must lie in (0, 1]", self.lr_final)));
        }
        if self.classes < 2 {
            return Err(Error::arg("classes (K) must be at least 2"));
        }
        if self.samples < 1 {
            return Err(Error::arg("samples (N) must be at least 1"));
        }
        if self.radius < 1 {
            return Err(Error::arg("radius must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::arg("batch_size must be at least 1"));
        }
        if self.event_bins < 2 {
            return Err(Error::arg("event_bins must be at least 2"));
        }
        if self.corr_patch % 2 == 0 {
            return Err(Error::arg("corr_patch must be odd"));
        }
        let p0 = self.p0();
        if !(p0 > 0.0 && p0 < 1.0) {
            return Err(Error::arg(format!("p0 = {p0} must lie in (0, 1)")));
        }
        Ok(())
    }

    /// Full validation, including at least one epoch per stage.
    pub fn validate(&self) -> Result<()> {
        self.validate_hyper()?;
        for (s, e) in [(1, self.epochs_stage1), (2, self.epochs_stage2), (3, self.epochs_stage3)] {
            if e < 1 {
                return Err(Error::arg(format!("epochs_stage{s} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::arg(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::corrupt(path, e.to_string()))
    }

    /// Applies one `key=value` override; the value is parsed as a TOML value.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::arg(format!("override '{assignment}' is not key=value")))?;
        let key = key.trim();
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("own output parses");
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
            .map(|mut t| t.remove("v").expect("key present"))
            .map_err(|e| Error::arg(format!("override value for {key}: {e}")))?;
        table.insert(key.to_string(), value);
        let text = toml::to_string(&table).expect("table serializes");
        *self = Self::from_toml(&text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_defaults() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(c.lambdas(), [0.1, 1.0, 1.0, 1.0, 0.1, 0.1, 1.0]);
        assert_eq!(c.p0(), 0.1);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn overrides_and_validation() {
        let mut c = TrainConfig::default();
        c.set("lambda3=0.5").unwrap();
        c.set("classes = 4").unwrap();
        c.set("motion_compensated=true").unwrap();
        assert_eq!((c.lambda3, c.classes, c.motion_compensated), (0.5, 4, true));
        assert_eq!(c.p0(), 0.25);
        assert!(c.set("no_such_key=1").is_err());
        c.set("lambda2=-1").unwrap();
        assert!(c.validate().is_err());
        let mut z = TrainConfig::default();
        z.epochs_stage2 = 0;
        assert!(z.validate().is_err());
        assert!(z.validate_hyper().is_ok());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = TrainConfig::from_toml("seed = 7\ntau = 0.1\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.lambda7, 1.0);
    }
}
