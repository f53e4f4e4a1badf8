//! Experiment configuration, presets, and config digests.
//!
//! A config file is flat TOML mirroring [`ExperimentConfig`]; unknown keys
//! are errors. The digest is the SHA-256 of the canonical JSON serialization
//! and identifies a run cell together with `(target_domain, seed)`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::synth::ShiftSpec;
use crate::error::{Error, Result};
use crate::model::{Backbone, LatentMode, ModelConfig};
use crate::nn::OptimizerKind;

/// Pixel count of the full-scale reference images (224 x 224 x 3); the
/// objective weights were tuned against reconstruction magnitudes at this
/// size.
pub const REFERENCE_PIXELS: f64 = 224.0 * 224.0 * 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Joint reconstruction + KL + classification objective.
    VaeDg,
    /// Pooled-source cross-entropy only.
    Erm,
    /// ERM plus the gradient-variance alignment penalty.
    Fishr,
    /// ERM plus dense weight averaging.
    Swad,
    /// ERM plus Fishr penalty plus dense weight averaging.
    Drgen,
    /// The joint objective plus dense weight averaging.
    VaeDgSwad,
}

impl Algorithm {
    pub fn uses_vae(self) -> bool {
        matches!(self, Algorithm::VaeDg | Algorithm::VaeDgSwad)
    }

    pub fn uses_fishr(self) -> bool {
        matches!(self, Algorithm::Fishr | Algorithm::Drgen)
    }

    pub fn uses_swad(self) -> bool {
        matches!(self, Algorithm::Swad | Algorithm::Drgen | Algorithm::VaeDgSwad)
    }

    pub fn all() -> [Algorithm; 6] {
        [
            Algorithm::VaeDg,
            Algorithm::Erm,
            Algorithm::Fishr,
            Algorithm::Swad,
            Algorithm::Drgen,
            Algorithm::VaeDgSwad,
        ]
    }

    /// Published default learning rate: the combined method was proposed with
    /// 5e-4 while everything else runs at 1e-4.
    pub fn default_learning_rate(self) -> f64 {
        match self {
            Algorithm::Drgen => 5e-4,
            _ => 1e-4,
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Algorithm::VaeDg => "vae_dg",
            Algorithm::Erm => "erm",
            Algorithm::Fishr => "fishr",
            Algorithm::Swad => "swad",
            Algorithm::Drgen => "drgen",
            Algorithm::VaeDgSwad => "vae_dg_swad",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vae_dg" | "vae-dg" => Ok(Algorithm::VaeDg),
            "erm" => Ok(Algorithm::Erm),
            "fishr" => Ok(Algorithm::Fishr),
            "swad" | "erm_swad" | "erm-swad" => Ok(Algorithm::Swad),
            "drgen" => Ok(Algorithm::Drgen),
            "vae_dg_swad" | "vae-dg-swad" => Ok(Algorithm::VaeDgSwad),
            other => Err(Error::Config(format!("unknown algorithm '{other}'"))),
        }
    }
}

/// One run cell's full configuration. Serializes to flat TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    /// Reporting label: "main" or an ablation preset name.
    pub variant: String,
    pub target_domain: usize,
    pub seed: u64,

    pub steps: u64,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Examples drawn from each source domain per batch; three sources at
    /// the default 22 give the batch size of 66.
    pub per_domain: usize,
    /// Strict alternation: even update indices touch the encoder, odd ones
    /// the decoder and head.
    pub alternate_optimization: bool,

    /// Nominal KL weight (before image-size rescaling).
    pub beta: f64,
    /// Nominal classification weight (before image-size rescaling).
    pub alpha: f64,
    /// Reconstruction term gate: 1 keeps it, 0 is the no-recon ablation.
    pub recon_weight: f64,
    /// Scale beta and alpha by `pixels / REFERENCE_PIXELS` so the term
    /// balance carries over to small images.
    pub rescale_weights_to_image: bool,

    pub latent_dim: usize,
    pub image_side: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub conv_channels: Vec<usize>,
    pub latent_mode: LatentMode,
    /// Reuse one noise draw for every sample and step instead of resampling
    /// (the alternative reading of a fixed latent space).
    pub frozen_noise: bool,

    pub val_fraction: f64,
    pub eval_every: u64,

    pub num_domains: usize,
    pub per_domain_count: usize,
    pub shift_strength: f64,
    /// Seed of the synthetic data itself, shared across the protocol grid.
    pub data_seed: u64,

    pub fishr_lambda: f64,
    pub fishr_decay: f64,
    pub fishr_warmup: u64,
    /// The averaging window covers the last `1 - swad_start_frac` of
    /// training, absorbing one snapshot per evaluation point.
    pub swad_start_frac: f64,

    pub resample: crate::data::sampler::ResampleMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::VaeDg,
            variant: "main".into(),
            target_domain: 0,
            seed: 0,
            steps: 15_000,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            per_domain: 22,
            alternate_optimization: false,
            beta: 50_000.0,
            alpha: 50_000.0,
            recon_weight: 1.0,
            rescale_weights_to_image: true,
            latent_dim: 256,
            image_side: 32,
            channels: 3,
            num_classes: 5,
            conv_channels: vec![8, 16, 32],
            latent_mode: LatentMode::Sampled,
            frozen_noise: false,
            val_fraction: 0.2,
            eval_every: 100,
            num_domains: 4,
            per_domain_count: 150,
            shift_strength: 1.0,
            data_seed: 0,
            fishr_lambda: 1000.0,
            fishr_decay: 0.95,
            fishr_warmup: 1500,
            swad_start_frac: 0.5,
            resample: crate::data::sampler::ResampleMode::UniformClass,
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale preset: small latent, short schedule, quick grids.
    pub fn desk() -> Self {
        Self {
            steps: 2_000,
            latent_dim: 32,
            fishr_warmup: 200,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.val_fraction && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.per_domain == 0 {
            return Err(Error::Config("per_domain must be positive".into()));
        }
        if self.beta < 0.0 || self.alpha < 0.0 || self.recon_weight < 0.0 {
            return Err(Error::Config("objective weights must be nonnegative".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.swad_start_frac) {
            return Err(Error::Config("swad_start_frac must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.fishr_decay) {
            return Err(Error::Config("fishr_decay must lie in [0, 1)".into()));
        }
        if self.num_domains < 2 {
            return Err(Error::Config("need at least 2 domains".into()));
        }
        if self.target_domain >= self.num_domains {
            return Err(Error::Config(format!(
                "target_domain {} outside the {} configured domains",
                self.target_domain, self.num_domains
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        self.model_config().validate()?;
        Ok(())
    }

    pub fn pixel_count(&self) -> f64 {
        (self.image_side * self.image_side * self.channels) as f64
    }

    /// KL weight after optional image-size rescaling.
    pub fn effective_beta(&self) -> f64 {
        if self.rescale_weights_to_image {
            self.beta * self.pixel_count() / REFERENCE_PIXELS
        } else {
            self.beta
        }
    }

    /// Classification weight after optional image-size rescaling.
    pub fn effective_alpha(&self) -> f64 {
        if self.rescale_weights_to_image {
            self.alpha * self.pixel_count() / REFERENCE_PIXELS
        } else {
            self.alpha
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            latent_dim: self.latent_dim,
            image_side: self.image_side,
            channels: self.channels,
            num_classes: self.num_classes,
            conv_channels: self.conv_channels.clone(),
            backbone: Backbone::SmallCnn,
        }
    }

    pub fn shift_spec(&self) -> ShiftSpec {
        let mut spec = ShiftSpec::default_desk(self.num_domains, self.shift_strength);
        spec.image_side = self.image_side;
        spec
    }

    /// First step inside the weight-averaging window.
    pub fn swad_start_step(&self) -> u64 {
        ((self.steps as f64) * self.swad_start_frac).ceil() as u64
    }

    /// SHA-256 digest of the canonical serialization.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let hash = Sha256::digest(json.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Cell identity used in file names: `algorithm_variant_tN_sM`.
    pub fn cell_name(&self) -> String {
        format!(
            "{}_{}_t{}_s{}",
            self.algorithm, self.variant, self.target_domain, self.seed
        )
    }
}

/// Load a config file (flat TOML). Unknown keys are rejected.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let config: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn write_config(config: &ExperimentConfig, path: &Path) -> Result<()> {
    let text = toml::to_string_pretty(config).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// The ablation grid: each preset is one intended delta against a base
/// config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationPreset {
    LatentDim64,
    LatentDim128,
    LatentDim256,
    FixedLatent,
    BetaAlpha10k,
    BetaAlpha50k,
    BetaAlpha100k,
    NoRecon,
    NoKl,
    Swad,
    ErmSwad,
}

impl AblationPreset {
    pub fn all() -> [AblationPreset; 11] {
        use AblationPreset::*;
        [
            LatentDim64,
            LatentDim128,
            LatentDim256,
            FixedLatent,
            BetaAlpha10k,
            BetaAlpha50k,
            BetaAlpha100k,
            NoRecon,
            NoKl,
            Swad,
            ErmSwad,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationPreset::LatentDim64 => "latent-dim-64",
            AblationPreset::LatentDim128 => "latent-dim-128",
            AblationPreset::LatentDim256 => "latent-dim-256",
            AblationPreset::FixedLatent => "fixed-latent",
            AblationPreset::BetaAlpha10k => "beta-alpha-10000",
            AblationPreset::BetaAlpha50k => "beta-alpha-50000",
            AblationPreset::BetaAlpha100k => "beta-alpha-100000",
            AblationPreset::NoRecon => "no-recon",
            AblationPreset::NoKl => "no-kl",
            AblationPreset::Swad => "swad",
            AblationPreset::ErmSwad => "erm-swad",
        }
    }

    /// Apply the preset's delta to a base config and label the variant.
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut config = base.clone();
        config.variant = self.name().into();
        match self {
            AblationPreset::LatentDim64 => config.latent_dim = 64,
            AblationPreset::LatentDim128 => config.latent_dim = 128,
            AblationPreset::LatentDim256 => config.latent_dim = 256,
            AblationPreset::FixedLatent => config.latent_mode = LatentMode::FixedMu,
            AblationPreset::BetaAlpha10k => {
                config.beta = 10_000.0;
                config.alpha = 10_000.0;
            }
            AblationPreset::BetaAlpha50k => {
                config.beta = 50_000.0;
                config.alpha = 50_000.0;
            }
            AblationPreset::BetaAlpha100k => {
                config.beta = 100_000.0;
                config.alpha = 100_000.0;
            }
            AblationPreset::NoRecon => config.recon_weight = 0.0,
            AblationPreset::NoKl => config.beta = 0.0,
            AblationPreset::Swad => config.algorithm = Algorithm::VaeDgSwad,
            AblationPreset::ErmSwad => config.algorithm = Algorithm::Swad,
        }
        config
    }
}

impl std::str::FromStr for AblationPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AblationPreset::all()
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = AblationPreset::all().iter().map(|p| p.name()).collect();
                Error::Config(format!(
                    "unknown preset '{s}'; expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_pass_validation_and_digest_is_stable() {
        let a = ExperimentConfig::default();
        a.validate().unwrap();
        let b = ExperimentConfig::default();
        assert_eq!(a.digest(), b.digest());
        let desk = ExperimentConfig::desk();
        desk.validate().unwrap();
        assert_ne!(a.digest(), desk.digest());
    }

    #[test]
    fn effective_weights_rescale_with_pixels() {
        let c = ExperimentConfig::desk();
        let scale = (32.0 * 32.0 * 3.0) / REFERENCE_PIXELS;
        assert!((c.effective_beta() - 50_000.0 * scale).abs() < 1e-9);
        let mut raw = c.clone();
        raw.rescale_weights_to_image = false;
        assert_eq!(raw.effective_beta(), 50_000.0);
        // full-scale images leave the nominal weights untouched
        let mut full = ExperimentConfig::default();
        full.image_side = 224;
        full.conv_channels = vec![16, 32, 64, 64, 128];
        assert!((full.effective_alpha() - 50_000.0).abs() < 1e-9);
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = ExperimentConfig::desk();
        let text = toml::to_string_pretty(&c).unwrap();
        let parsed = parse_config(&text).unwrap();
        assert_eq!(c, parsed);

        let bad = format!("{text}\nnot_a_field = 3\n");
        let err = parse_config(&bad).unwrap_err();
        assert!(err.to_string().contains("not_a_field"), "{err}");
    }

    #[test]
    fn rejects_bad_fields() {
        let mut c = ExperimentConfig::desk();
        c.val_fraction = 1.5;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::desk();
        c.target_domain = 9;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::desk();
        c.image_side = 30; // not divisible by 2^3
        assert!(c.validate().is_err());
    }

    #[test]
    fn presets_change_exactly_their_fields() {
        let base = ExperimentConfig::desk();
        for preset in AblationPreset::all() {
            let applied = preset.apply(&base);
            assert_eq!(applied.variant, preset.name());
            assert_ne!(applied.digest(), base.digest());
            // neutralizing the intended delta restores the base
            let mut undo = applied.clone();
            undo.variant = base.variant.clone();
            undo.latent_dim = base.latent_dim;
            undo.latent_mode = base.latent_mode;
            undo.beta = base.beta;
            undo.alpha = base.alpha;
            undo.recon_weight = base.recon_weight;
            undo.algorithm = base.algorithm;
            assert_eq!(undo, base, "preset {} touched unexpected fields", preset.name());
        }
    }

    #[test]
    fn algorithm_parsing_and_lr_presets() {
        use std::str::FromStr;
        assert_eq!(Algorithm::from_str("vae_dg").unwrap(), Algorithm::VaeDg);
        assert_eq!(Algorithm::from_str("erm-swad").unwrap(), Algorithm::Swad);
        assert!(Algorithm::from_str("nope").is_err());
        assert_eq!(Algorithm::Drgen.default_learning_rate(), 5e-4);
        assert_eq!(Algorithm::VaeDg.default_learning_rate(), 1e-4);
    }
}
