//! Synthetic multi-center data: stained class patterns per center, a pseudo
//! image sampler that never reproduces a real image, patch-swap corruption,
//! dihedral augmentation, stratified folds and the on-disk archive format.

pub mod archive;
mod generate;
mod pseudo;
mod split;
mod transform;

pub use archive::{Archive, Record};
pub use generate::{
    channel_means, default_centers, default_prototypes, generate_center_dataset, CenterDataset,
    CenterSpec, ClassPrototype, Sample, StainTransform,
};
pub use pseudo::{count_collisions, generate_pseudo_images, PseudoSample, MIN_PIXEL_STD};
pub use split::{kfold_split, Fold};
pub use transform::{augment, augment_variant, corrupt, flip_horizontal, rotate90};
