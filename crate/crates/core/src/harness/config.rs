//! Experiment configuration: a flat key-value file (TOML syntax, no tables)
//! mirroring one experiment cell. Unknown keys are errors; every field has a
//! desk-scale default.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::latent::{
    random_causal_link, random_correlation, Block, LatentSpec, SamplingMode,
};
use crate::mixing::{sample_mixer_with_rng, InvertibleMixer};
use crate::nets::AdamHyper;
use crate::objective::{ObjectiveConfig, Similarity};
use crate::rng::{stream_rng, Stream};

/// Crate version stamped into every emitted report row.
pub fn artifact_version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// Resource scale of a run. Scaling changes only batch size and iteration
/// count, never the generative process or the evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// Batch 1024, 50k iterations.
    Desk,
    /// Batch 6144, 300k iterations (the reference protocol; expensive).
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    // generative process
    pub n_c: usize,
    pub n_s: usize,
    pub n_m1: usize,
    pub n_m2: usize,
    pub perturb_prob: f64,
    pub statistical_dependence: bool,
    pub causal_dependence: bool,
    /// Std of the additive style perturbation; covariance is eps_sigma^2 I.
    pub eps_sigma: f64,
    /// "asymmetric" or "symmetric".
    pub sampling_mode: String,
    /// Class counts for discrete blocks; 0 keeps a block continuous. The
    /// modality setting applies to both m1 and m2.
    pub discrete_content: usize,
    pub discrete_style: usize,
    pub discrete_modality: usize,

    // mixing functions
    pub mixer_layers: usize,
    pub cond_threshold: f64,
    pub mixer_alpha: f64,
    /// Reproduces the single-mechanism setting f1 = f2.
    pub shared_mixer: bool,

    // encoders
    pub encoder_layers: usize,
    /// Hidden width; 0 selects 10x the encoder input dimension.
    pub encoder_hidden: usize,
    /// Output dimension; 0 selects n_c.
    pub encoding_size: usize,
    pub encoder_alpha: f64,
    pub sigmoid_output: bool,
    /// One encoder for both sides (pairs with shared_mixer).
    pub shared_encoder: bool,
    /// Fold per-dimension observation statistics into the first-layer
    /// initialization, so raw mixer outputs (whose scales span orders of
    /// magnitude) enter the net conditioned. Initialization-time only; the
    /// trained weights are unconstrained.
    pub normalize_inputs: bool,

    // objective
    pub temperature: f64,
    /// "neg_euclidean", "neg_sq_euclidean", or "cosine".
    pub similarity: String,
    pub batch_size: usize,
    /// Train with the symmetrized objective (both contrast directions).
    pub symmetrized: bool,

    // optimizer
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub clip_norm: f64,

    // budget
    pub iterations: usize,
    /// Iterations for discrete-factor runs; 0 selects 3x `iterations`.
    pub discrete_iterations: usize,
    pub log_every: usize,
    pub n_train_eval: usize,
    pub n_test_eval: usize,

    pub seeds: Vec<u64>,
    pub out_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_c: 5,
            n_s: 5,
            n_m1: 5,
            n_m2: 5,
            perturb_prob: 0.75,
            statistical_dependence: false,
            causal_dependence: false,
            eps_sigma: 1.0,
            sampling_mode: "asymmetric".into(),
            discrete_content: 0,
            discrete_style: 0,
            discrete_modality: 0,
            mixer_layers: 3,
            cond_threshold: 1e-3,
            mixer_alpha: 0.2,
            shared_mixer: false,
            encoder_layers: 7,
            encoder_hidden: 0,
            encoding_size: 0,
            encoder_alpha: 0.2,
            sigmoid_output: false,
            shared_encoder: false,
            normalize_inputs: true,
            temperature: 1.0,
            similarity: "neg_euclidean".into(),
            batch_size: 1024,
            symmetrized: true,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            clip_norm: 2.0,
            iterations: 50_000,
            discrete_iterations: 0,
            log_every: 1000,
            n_train_eval: 5000,
            n_test_eval: 2000,
            seeds: vec![0, 1, 2],
            out_dir: String::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &std::path::Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn at_scale(mut self, scale: Scale) -> ExperimentConfig {
        match scale {
            Scale::Desk => {
                self.batch_size = 1024;
                self.iterations = 50_000;
            }
            Scale::Paper => {
                self.batch_size = 6144;
                self.iterations = 300_000;
            }
        }
        self
    }

    pub fn mode(&self) -> Result<SamplingMode> {
        match self.sampling_mode.as_str() {
            "asymmetric" => Ok(SamplingMode::Asymmetric),
            "symmetric" => Ok(SamplingMode::Symmetric),
            other => Err(Error::ConfigParse(format!(
                "unknown sampling_mode '{other}' (expected asymmetric or symmetric)"
            ))),
        }
    }

    pub fn similarity(&self) -> Result<Similarity> {
        self.similarity.parse()
    }

    pub fn objective(&self) -> Result<ObjectiveConfig> {
        ObjectiveConfig::new(self.temperature, self.similarity()?, self.batch_size)
    }

    pub fn adam_hyper(&self) -> AdamHyper {
        AdamHyper {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }

    /// Encoder input dimensions per side.
    pub fn input_dims(&self) -> (usize, usize) {
        (
            self.n_c + self.n_s + self.n_m1,
            self.n_c + self.n_s + self.n_m2,
        )
    }

    pub fn resolved_encoding_size(&self) -> usize {
        if self.encoding_size == 0 {
            self.n_c
        } else {
            self.encoding_size
        }
    }

    pub fn resolved_hidden(&self, in_dim: usize) -> usize {
        if self.encoder_hidden == 0 {
            10 * in_dim
        } else {
            self.encoder_hidden
        }
    }

    pub fn resolved_discrete_iterations(&self) -> usize {
        if self.discrete_iterations == 0 {
            self.iterations.saturating_mul(3)
        } else {
            self.discrete_iterations
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_c == 0 {
            return Err(Error::InvalidConfig("n_c must be at least 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds must be non-empty".into()));
        }
        if self.encoder_layers == 0 {
            return Err(Error::InvalidConfig("encoder_layers must be at least 1".into()));
        }
        if self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be >= 0".into()));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::InvalidConfig("clip_norm must be positive".into()));
        }
        if self.eps_sigma <= 0.0 {
            return Err(Error::InvalidConfig("eps_sigma must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidConfig("log_every must be at least 1".into()));
        }
        if self.n_train_eval < 10 || self.n_test_eval < 10 {
            return Err(Error::InvalidConfig("evaluation splits are too small".into()));
        }
        for (name, k) in [
            ("discrete_content", self.discrete_content),
            ("discrete_style", self.discrete_style),
            ("discrete_modality", self.discrete_modality),
        ] {
            if k == 1 {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be 0 (continuous) or at least 2 classes"
                )));
            }
        }
        if self.shared_encoder && self.n_m1 != self.n_m2 {
            return Err(Error::InvalidConfig(
                "shared_encoder requires equal input dimensions (n_m1 == n_m2)".into(),
            ));
        }
        self.mode()?;
        self.similarity()?;
        ObjectiveConfig::new(self.temperature, self.similarity()?, self.batch_size)?;
        Ok(())
    }

    /// Frozen ground-truth structure for one run seed: within-block
    /// correlations and causal coefficients are drawn once from the
    /// structure stream and embedded in the spec.
    pub fn latent_spec(&self, seed: u64) -> Result<LatentSpec> {
        let mut rng = stream_rng(seed, Stream::Structure);
        let mut spec = LatentSpec::independent(self.n_c, self.n_s, self.n_m1, self.n_m2, self.perturb_prob);
        spec.mode = self.mode()?;
        if self.statistical_dependence {
            spec.cov_c = random_correlation(self.n_c, &mut rng);
            spec.cov_s = random_correlation(self.n_s, &mut rng);
            spec.cov_m1 = random_correlation(self.n_m1, &mut rng);
            spec.cov_m2 = random_correlation(self.n_m2, &mut rng);
        }
        if self.causal_dependence {
            let (a, b) = random_causal_link(self.n_s, self.n_c, &mut rng);
            spec.causal_a = a;
            spec.causal_b = b;
        }
        if self.eps_sigma != 1.0 {
            spec.cov_eps = ndarray::Array2::eye(self.n_s) * (self.eps_sigma * self.eps_sigma);
        }
        if self.discrete_content >= 2 {
            spec.discrete_blocks.insert(Block::Content, self.discrete_content);
        }
        if self.discrete_style >= 2 {
            spec.discrete_blocks.insert(Block::Style, self.discrete_style);
        }
        if self.discrete_modality >= 2 {
            spec.discrete_blocks.insert(Block::Modality1, self.discrete_modality);
            spec.discrete_blocks.insert(Block::Modality2, self.discrete_modality);
        }
        spec.validate_assumptions()?;
        Ok(spec)
    }

    /// Ground-truth mixers for one run seed. The two modalities use
    /// independent seed streams unless `shared_mixer` replicates f1 = f2.
    pub fn mixers(&self, seed: u64) -> Result<(InvertibleMixer, InvertibleMixer)> {
        let (d1, d2) = self.input_dims();
        let mut rng1 = stream_rng(seed, Stream::Mixer1);
        let mixer_1 = sample_mixer_with_rng(
            d1,
            self.mixer_layers,
            self.cond_threshold,
            self.mixer_alpha,
            &mut rng1,
        )?;
        let mixer_2 = if self.shared_mixer {
            if d1 != d2 {
                return Err(Error::InvalidConfig(
                    "shared_mixer requires equal input dimensions (n_m1 == n_m2)".into(),
                ));
            }
            mixer_1.clone()
        } else {
            let mut rng2 = stream_rng(seed, Stream::Mixer2);
            sample_mixer_with_rng(
                d2,
                self.mixer_layers,
                self.cond_threshold,
                self.mixer_alpha,
                &mut rng2,
            )?
        };
        Ok((mixer_1, mixer_2))
    }

    /// Hash of the canonical (key-sorted) serialization; stable under field
    /// reordering in the config file.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(12);
        for byte in digest.iter().take(6) {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_desk_scale_and_paper_scale_is_declared() {
        let config = ExperimentConfig::default();
        assert_eq!(config.batch_size, 1024);
        assert_eq!(config.iterations, 50_000);
        assert_eq!(config.seeds.len(), 3);
        let paper = config.clone().at_scale(Scale::Paper);
        assert_eq!(paper.batch_size, 6144);
        assert_eq!(paper.iterations, 300_000);
        assert_eq!(paper.learning_rate, 1e-4);
        assert_eq!(paper.temperature, 1.0);
        assert_eq!(paper.clip_norm, 2.0);
        assert_eq!(paper.mixer_layers, 3);
        assert_eq!(paper.encoder_layers, 7);
        assert_eq!(paper.cond_threshold, 1e-3);
        // scaling touched nothing else
        let mut desk_again = paper.at_scale(Scale::Desk);
        desk_again.out_dir = config.out_dir.clone();
        assert_eq!(desk_again, config);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("nonexistent_key = 3").unwrap_err();
        assert!(matches!(err, Error::ConfigParse(_)), "{err}");
    }

    #[test]
    fn hash_is_stable_under_key_reordering() {
        let a = ExperimentConfig::from_toml_str("n_c = 4\nbatch_size = 64\nseeds = [7]").unwrap();
        let b = ExperimentConfig::from_toml_str("seeds = [7]\nbatch_size = 64\nn_c = 4").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig::from_toml_str("n_c = 5\nbatch_size = 64\nseeds = [7]").unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn toml_round_trip_preserves_config() {
        let mut config = ExperimentConfig::default();
        config.discrete_style = 4;
        config.similarity = "cosine".into();
        config.seeds = vec![3, 5];
        let text = config.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn validation_rejects_inconsistent_fields() {
        let mut config = ExperimentConfig::default();
        config.discrete_style = 1;
        assert!(config.validate().is_err());
        let mut config = ExperimentConfig::default();
        config.seeds.clear();
        assert!(config.validate().is_err());
        let mut config = ExperimentConfig::default();
        config.similarity = "dot".into();
        assert!(config.validate().is_err());
        let mut config = ExperimentConfig::default();
        config.shared_encoder = true;
        config.n_m2 = 3;
        assert!(config.validate().is_err());
    }

    #[test]
    fn latent_spec_reflects_dependence_flags() {
        let mut config = ExperimentConfig::default();
        config.statistical_dependence = true;
        config.causal_dependence = true;
        let spec = config.latent_spec(0).unwrap();
        assert!(spec.causal_a.iter().any(|v| *v != 0.0));
        assert!(spec.causal_b.iter().any(|v| *v != 0.0));
        let off_diag = (0..5)
            .flat_map(|i| (0..5).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| spec.cov_c[[i, j]].abs())
            .fold(0.0f64, f64::max);
        assert!(off_diag > 0.0);
        // frozen per seed
        let again = config.latent_spec(0).unwrap();
        assert_eq!(spec.causal_a, again.causal_a);
        assert_eq!(spec.cov_s, again.cov_s);
        let other = config.latent_spec(1).unwrap();
        assert_ne!(spec.causal_a, other.causal_a);
    }

    #[test]
    fn mixers_are_distinct_unless_shared() {
        let config = ExperimentConfig::default();
        let (m1, m2) = config.mixers(0).unwrap();
        assert!(m1.weights()[0] != m2.weights()[0]);
        let mut shared = config.clone();
        shared.shared_mixer = true;
        let (s1, s2) = shared.mixers(0).unwrap();
        assert_eq!(s1.weights()[0], s2.weights()[0]);
    }

    #[test]
    fn perturb_prob_zero_with_style_is_rejected_at_setup() {
        let mut config = ExperimentConfig::default();
        config.perturb_prob = 0.0;
        assert!(matches!(config.latent_spec(0), Err(Error::InvalidConfig(_))));
    }
}
