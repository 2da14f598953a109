//! The style encoder `E` and its Stage-1 metric-learning pre-training.

pub mod encoder;
pub mod gram;
pub mod mining;
pub mod pretrain;

pub use self::encoder::{EncoderArch, StyleCode, StyleEncoder};
pub use self::gram::{gram_matrix, GramMatrix};
pub use self::mining::{batch_triplet_loss, mine_ephn, triplet_hinge_loss, triplet_loss, TripletIndices};
pub use self::pretrain::{
    cluster_quality, encoder_checkpoint, pretrain_on_images, pretrain_style_encoder, ClusterQuality,
    EpochStats, PretrainReport, PretrainStatus,
};
