//! Command-line front end: settings resolution, image IO, plotting, and the
//! subcommand implementations. Split out as a library so integration tests
//! can call the pieces directly.

pub mod commands;
pub mod imageio;
pub mod plot;
pub mod settings;
