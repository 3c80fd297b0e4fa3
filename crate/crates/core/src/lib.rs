//! Procedural warm-up toolkit: grammar corpora, a compact transformer with
//! hand-written gradients, two-stage training and checkpoint surgery.

pub mod atomic;
pub mod corpus;
pub mod exec;
pub mod grammar;
pub mod images;
pub mod kv;
pub mod model;
pub mod rng;
pub mod surgery;
pub mod trainer;
