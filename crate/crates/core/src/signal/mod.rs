//! Synthetic cohort generation, preprocessing and spectral estimation.

mod cohort;
pub mod filter;
mod preprocess;
mod trial;
pub mod trialset;
mod welch;

#[cfg(test)]
mod tests;

pub use cohort::{generate_cohort, lateral_groups, CohortSpec, Nuisance};
pub use preprocess::{
    bandpass, bandpass_with_order, downsample, laplacian_reference, ring_neighbors,
    segment_baseline, BANDPASS_ORDER, DEFAULT_BAND,
};
pub use trial::{Trial, NUM_CLASSES};
pub use welch::{hann, welch_psd, welch_psd_overlap, Psd, MIN_SEGMENT};
