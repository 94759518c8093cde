//! Amortized normalizing-flow posteriors for a toy photon detector, with coverage
//! calibration, systematics marginalization and posterior-predictive goodness of fit.

pub mod calib;
pub mod condmodel;
pub mod flows;
pub mod gradcore;
pub mod losses;
pub mod oracle;
pub mod specfun;
pub mod stats;
pub mod toymc;
