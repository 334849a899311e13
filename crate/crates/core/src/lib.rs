pub mod grid;
pub mod io;
pub mod oracle;
pub mod par;
pub mod patterns;
pub mod rng;
pub mod stats;
pub mod sweep;
pub mod trainer;
pub mod wnet;
