pub mod dynamics;
pub mod error_prop;
pub mod horizon;
pub mod observer;
pub mod controller;
pub mod harness;
