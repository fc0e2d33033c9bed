pub mod augment;
pub mod cli;
pub mod corpus;
pub mod drstore;
pub mod losses;
pub mod models;
pub mod numerics;
pub mod trainer;
pub(crate) mod util;
