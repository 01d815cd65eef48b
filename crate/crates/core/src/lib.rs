//! Reachability-based exploration of persistent environments.

pub mod checkpoint;
pub mod explore;
pub mod graph;
pub mod graph_io;
pub mod harness;
pub mod nn;
pub mod persia;
pub mod pmdp;
pub mod rnd;
pub mod similarity;
pub mod trajectory;
