//! Command-line front end: scenario runs, sweeps, topology checks, plots and
//! the live annotation service.

pub mod commands;
pub mod plot;
pub mod serve;
