#![allow(dead_code)]

pub mod eer;
pub mod gradcheck;
pub mod oracle;
pub mod stats;
pub mod structure;
