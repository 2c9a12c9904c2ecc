//! The replicated service hosted on every ring node.

pub mod consensus;
pub mod explore;
pub mod service;
pub mod store;
