pub mod checkpoint;
pub mod commands;
pub mod corpus;
pub mod curriculum;
pub mod model;
pub mod rng;
pub mod synthetic;
pub mod trainer;
pub mod vocab;
