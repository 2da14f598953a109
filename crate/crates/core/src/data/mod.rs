//! Dataset discovery, splitting, augmentation and pixel normalization.

pub mod augment;
pub mod image;
pub mod manifest;

pub use self::augment::{augment, AugmentConfig, AugmentParams, ElasticConfig};
pub use self::image::{load_domains, normalize, save_png, DomainImages};
pub use self::manifest::{
    load_manifest, sample_split, sample_split_with_quota, DatasetManifest, DomainLabel, LoadReport,
    QuotaOptions, Record, Split, SyntheticOrigin, MANIFEST_FILE,
};
