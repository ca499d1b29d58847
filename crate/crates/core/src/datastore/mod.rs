//! Feature files, manifests, listener-disjoint splits and synthetic data.

pub mod feature_file;
pub mod manifest;
pub mod registry;
pub mod split;
pub mod synth;

pub use feature_file::{read_feature_file, write_feature_file, LayerFeatureTensor};
pub use manifest::{Audiogram, Dataset, Manifest, Sample, SfmAttributes, SfmDescriptor};
pub use split::{make_splits, split_violations, Fold, FoldSplit};
pub use synth::{dataset_hash, synth_dataset, synth_family, FamilyMember, SynthOutput, SynthSpec};
