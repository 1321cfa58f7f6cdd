//! Synthetic metaorder reconstruction from public trade-and-quote data,
//! stylised-fact impact analytics, and order-splitting (LMF) inference with
//! a ground-truth order-flow simulator.

pub mod assignment;
pub mod binning;
pub mod corpus;
pub mod error;
pub mod impact;
pub mod lmf;
pub mod market_data;
pub mod metaorder;
pub mod nls;
pub mod pipeline;
pub mod powerlaw;
pub mod rng;
pub mod simulator;

pub use error::{Error, Result};
