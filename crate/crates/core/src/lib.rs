pub mod config;
pub mod conv;
pub mod corpus;
pub mod decode;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod seed;
pub mod synthetic;
pub mod train;
