//! Command line front end: manager, agents, adapter packing and the
//! reference node binary.

pub mod cli;
