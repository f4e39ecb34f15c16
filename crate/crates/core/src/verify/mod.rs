//! Numerical oracles and the self-verification battery.

mod battery;
mod oracle;

pub use oracle::{
    gaussian_kl_standard, gaussian_logpdf, grid_integral_2d, log_abs_det, max_upper_entry, numerical_jacobian,
    LinearGaussianChain,
};
pub use battery::{
    density_mass_error, full_loss_gradcheck, gradcheck_fixture, iwae_monotonicity, kl_unbiasedness,
    linear_gaussian_nll_error, logdet_error, made_mask_leak, round_trip_error, run_battery, CheckRow, KlCheck, LinearGaussianToy,
    Monotonicity, TOY_NOISE_VAR,
};
