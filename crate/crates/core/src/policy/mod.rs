//! Input-adaptive policies and their compute-attack losses.

pub mod adavit;
pub mod ats;
pub mod avit;
