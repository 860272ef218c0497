//! Multimodal graphs: the data model, a synthetic generator, client
//! partitions, missingness and mask algebra, and graph files.

pub mod graph;
pub mod io;
pub mod missing;
pub mod partition;
pub mod sbm;

pub use graph::{adjacency, Mask, Modality, MultimodalGraph};
pub use io::{load_graph, save_graph};
pub use missing::{
    apply_natural_missingness, apply_natural_missingness_keyed, epoch_mask_seed, missing_fraction, missing_ratios, node_missing_ratios,
    ratio_column, sample_artificial_mask, sample_artificial_mask_keyed, MaskSet, MissingMode, MissingnessConfig,
};
pub use partition::{partition_dirichlet, ClientPartition};
pub use sbm::{generate_sbm_multimodal, SbmConfig};
