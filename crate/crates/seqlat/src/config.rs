//! Run configuration: a single TOML document that fully determines a model
//! and a training run. Unknown keys are rejected; parsing the serialized
//! form reproduces the configuration exactly.

use crate::alignment::AlignmentLattice;
use crate::context::ContextDependency;
use crate::oracle::LatticeMode;
use crate::weights::{Encoder, Model, Normalization, WeightFunction};
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatticeVariant {
    Frame,
    LabelFrame,
    Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightVariant {
    Unshared,
    SharedEmb,
    SharedRnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationKind {
    Global,
    LocalSoftmax,
    LocalHat,
}

impl From<NormalizationKind> for Normalization {
    fn from(k: NormalizationKind) -> Normalization {
        match k {
            NormalizationKind::Global => Normalization::Global,
            NormalizationKind::LocalSoftmax => Normalization::LocalSoftmax,
            NormalizationKind::LocalHat => Normalization::LocalHat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderVariant {
    CausalRnn,
    BidirRnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Easy,
    LateEvidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextSection {
    /// Maximum label-history length remembered by the context automaton.
    pub order: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatticeSection {
    pub variant: LatticeVariant,
    /// Frame count for frame-indexed variants (training tasks and
    /// benchmarks; decoding uses the actual input length).
    #[serde(default = "default_frames")]
    pub frames: usize,
    /// Label bound for the label-dependent variant.
    #[serde(default)]
    pub max_labels: usize,
    /// Per-frame label cap for the label-frame variant.
    #[serde(default = "default_one")]
    pub labels_per_frame: usize,
    /// Whether frame lattices have epsilon arcs.
    #[serde(default = "default_true")]
    pub epsilon: bool,
    /// CTC-style collapsing of repeated labels.
    #[serde(default)]
    pub dedup: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    pub variant: WeightVariant,
    pub normalization: NormalizationKind,
    /// Activation width the weight function consumes.
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// Hidden width of the history RNN (shared_rnn only).
    #[serde(default = "default_dim")]
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    pub variant: EncoderVariant,
    pub input_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_task")]
    pub task: TaskKind,
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Additive feature noise amplitude in the synthetic tasks.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Held-out items used for the label-error-rate evaluation.
    #[serde(default = "default_eval_items")]
    pub eval_items: usize,
    /// Loss curve sampling period.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            task: default_task(),
            step_size: default_step_size(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_adam_epsilon(),
            batch_size: default_batch_size(),
            steps: default_steps(),
            noise: default_noise(),
            eval_items: default_eval_items(),
            log_every: default_log_every(),
        }
    }
}

fn default_frames() -> usize {
    8
}
fn default_one() -> usize {
    1
}
fn default_true() -> bool {
    true
}
fn default_dim() -> usize {
    16
}
fn default_task() -> TaskKind {
    TaskKind::Easy
}
fn default_step_size() -> f64 {
    0.02
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_adam_epsilon() -> f64 {
    1e-9
}
fn default_batch_size() -> usize {
    32
}
fn default_steps() -> usize {
    500
}
fn default_noise() -> f64 {
    0.05
}
fn default_eval_items() -> usize {
    200
}
fn default_log_every() -> usize {
    50
}

/// The complete run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output alphabet size.
    pub vocab: usize,
    pub context: ContextSection,
    pub lattice: LatticeSection,
    pub weights: WeightsSection,
    pub encoder: EncoderSection,
    #[serde(default)]
    pub train: TrainSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("{e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 {
            return Err(Error::Config("vocab must be at least 1".into()));
        }
        if self.weights.dim == 0 || self.weights.hidden == 0 {
            return Err(Error::Config(
                "weights.dim and weights.hidden must be positive".into(),
            ));
        }
        if self.encoder.input_dim == 0 {
            return Err(Error::Config("encoder.input_dim must be positive".into()));
        }
        match self.lattice.variant {
            LatticeVariant::LabelFrame if self.lattice.labels_per_frame == 0 => {
                return Err(Error::Config(
                    "lattice.labels_per_frame must be at least 1".into(),
                ));
            }
            _ => {}
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        // Keep the context state space at desk scale.
        let states = crate::context::num_states(self.context.order, self.vocab)?;
        if states > 200_000 {
            return Err(Error::SizeGuard(format!(
                "context would have {states} states"
            )));
        }
        Ok(())
    }

    pub fn build_context(&self) -> Result<ContextDependency> {
        ContextDependency::new(self.context.order, self.vocab)
    }

    /// Lattice for a sequence of `frames` input frames.
    pub fn build_lattice(&self, frames: usize) -> Result<AlignmentLattice> {
        Ok(match self.lattice.variant {
            LatticeVariant::Frame => AlignmentLattice::Frame {
                frames,
                epsilon: self.lattice.epsilon,
            },
            LatticeVariant::LabelFrame => {
                AlignmentLattice::label_frame(frames, self.lattice.labels_per_frame)?
            }
            LatticeVariant::Label => AlignmentLattice::label(self.lattice.max_labels),
        })
    }

    pub fn mode(&self) -> LatticeMode {
        if self.lattice.dedup {
            LatticeMode::Dedup
        } else {
            LatticeMode::Plain
        }
    }

    pub fn normalization(&self) -> Normalization {
        self.weights.normalization.into()
    }

    /// Fresh model with seeded uniform initialization.
    pub fn build_model(&self) -> Result<Model> {
        let ctx = self.build_context()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let encoder = match self.encoder.variant {
            EncoderVariant::CausalRnn => {
                Encoder::causal(&mut rng, self.encoder.input_dim, self.weights.dim)
            }
            EncoderVariant::BidirRnn => {
                Encoder::bidir(&mut rng, self.encoder.input_dim, self.weights.dim)
            }
        };
        let wf = match self.weights.variant {
            WeightVariant::Unshared => {
                WeightFunction::unshared(&mut rng, ctx.num_states(), self.vocab, self.weights.dim)
            }
            WeightVariant::SharedEmb => {
                WeightFunction::shared_emb(&mut rng, ctx.num_states(), self.vocab, self.weights.dim)
            }
            WeightVariant::SharedRnn => WeightFunction::shared_rnn(
                &mut rng,
                self.vocab,
                self.weights.dim,
                self.weights.hidden,
            ),
        };
        Ok(Model { encoder, wf })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RunConfig {
        RunConfig {
            seed: 7,
            vocab: 4,
            context: ContextSection { order: 2 },
            lattice: LatticeSection {
                variant: LatticeVariant::Frame,
                frames: 8,
                max_labels: 0,
                labels_per_frame: 1,
                epsilon: true,
                dedup: false,
            },
            weights: WeightsSection {
                variant: WeightVariant::Unshared,
                normalization: NormalizationKind::Global,
                dim: 16,
                hidden: 16,
            },
            encoder: EncoderSection {
                variant: EncoderVariant::CausalRnn,
                input_dim: 6,
            },
            train: TrainSection::default(),
        }
    }

    #[test]
    fn roundtrip_is_a_fixed_point() {
        let config = sample();
        let text = config.to_toml();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed, config);
        assert_eq!(parsed.to_toml(), text);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = sample().to_toml();
        text.push_str("\n[mystery]\nvalue = 3\n");
        assert!(matches!(RunConfig::parse(&text), Err(Error::Config(_))));
        let bad_field = text.replace("[mystery]\nvalue = 3", "");
        let bad_field = bad_field.replace("order = 2", "order = 2\ntypo_key = 1");
        assert!(matches!(
            RunConfig::parse(&bad_field),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn defaults_fill_in() {
        let text = r#"
seed = 1
vocab = 2

[context]
order = 0

[lattice]
variant = "frame"

[weights]
variant = "shared_emb"
normalization = "local_softmax"

[encoder]
variant = "bidir_rnn"
input_dim = 4
"#;
        let config = RunConfig::parse(text).unwrap();
        assert_eq!(config.lattice.frames, 8);
        assert!(config.lattice.epsilon);
        assert_eq!(config.train.batch_size, 32);
        assert_eq!(config.train.beta1, 0.9);
    }

    #[test]
    fn validation_catches_bad_sizes() {
        let mut config = sample();
        config.vocab = 0;
        assert!(config.validate().is_err());
        let mut config = sample();
        config.context.order = 9;
        config.vocab = 32;
        assert!(matches!(config.validate(), Err(Error::SizeGuard(_))));
    }

    #[test]
    fn model_construction_is_seeded() {
        let config = sample();
        let a = config.build_model().unwrap().flatten();
        let b = config.build_model().unwrap().flatten();
        assert_eq!(a, b);
    }
}
