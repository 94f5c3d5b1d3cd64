#![no_std]

extern crate alloc;

pub mod bounds;
pub mod crypto;
pub mod device;
pub mod elligator;
pub mod endpoints;
pub mod error;
mod field;
pub mod group;
pub mod handshake;
pub mod ppet;
pub mod witness;

pub use error::{Error, Result};
