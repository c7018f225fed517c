//! Debiasing for style-based generative models by direct style-space edits.
//!
//! The toolkit discovers which style channels control target attributes,
//! optimizes sparse "fairstyle" bias tensors so generated batches have
//! uniform marginal or joint attribute distributions, and audits fairness as
//! KL divergence to uniform. Generators and classifiers are driven through
//! adapter contracts; a deterministic synthetic generator with planted,
//! analytically known biases backs the test suite.

pub mod adapter;
pub mod audit;
pub mod debias;
pub mod discovery;
pub mod error;
pub mod math;
pub mod persist;
pub mod style;
pub mod synthgen;
pub mod tensor;
pub mod textclip;

pub use adapter::{generate_batch, ClassifierAdapter, GeneratedBatch, GeneratorAdapter};
pub use audit::{
    audit, empirical_distribution, kl_to_uniform, label_batch, AttributeDistribution,
    AuditReport, DistributionCell, DistributionReport, LabelMatrix,
};
pub use debias::{
    compute_channel_stats, fairness_loss, fairness_loss_soft, fd_gradient, multi_bias,
    optimize_multi, optimize_single, optimize_text_direction, pair_bias, IterationRecord,
    OptimizationTrace, OptimizerConfig, PairParams, SeedPolicy, TerminalStatus,
};
pub use discovery::{
    find_controlling_channel, score_channel, ChannelScore, DiscoveryConfig, DiscoveryOutcome,
};
pub use error::{Error, Result};
pub use persist::{load_tensor, save_tensor, TensorFile};
pub use style::{ChannelId, Image, LayerInfo, LayerKind, StyleCode, StyleLayout};
pub use synthgen::{
    make_synthetic, AttributeRule, CouplingRule, Oracle, PixelLogisticClassifier, SpuriousEffect,
    SyntheticBundle, SyntheticGenerator, SyntheticSpec,
};
pub use tensor::{apply_fairstyle, AffineTarget, ChannelStats, Coupling, FairStyleTensor};
pub use textclip::{
    as_classifier_adapter, clip_label, ClipClassifier, ClipDecision, EmbeddingBackend,
    MockEmbeddingBackend, PromptPair,
};
