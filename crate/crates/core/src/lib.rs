pub mod agent;
pub mod critic;
pub mod env;
pub mod eval;
pub mod expert;
pub mod io;
pub mod nn;
pub mod pipeline;
pub mod reward;
pub mod service;
pub mod trajectory;
