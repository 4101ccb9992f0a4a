//! Network building blocks with explicit backward passes.

pub mod attention;
pub mod conv;
pub mod fusion;
pub mod idf;
pub mod rdn;
