pub mod agents;
pub mod broker;
pub mod hil;
pub mod kernel;
pub mod model;
pub mod persistence;
pub mod service;
pub mod sim;
