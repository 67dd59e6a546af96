//! Differential privacy: the two noise mechanisms and the privacy
//! accountant.

pub mod accountant;
pub mod mechanisms;

pub use accountant::{
    accumulate, laplace_validation_rho, rdp_to_dp, subsampled_gaussian_rdp, Accountant,
    BudgetDecision, CompositionMode, PrivacyLedger, RdpOrderGrid, ValidationBound,
};
pub use mechanisms::{add_gaussian_noise, perturb_score, GaussianParams, LaplaceParams};
