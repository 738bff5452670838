pub mod baselines;
pub mod beliefs;
pub mod bvl;
pub mod controllers;
pub mod episode;
pub mod experiment;
pub mod firm;
pub mod models;
pub mod oracle;
pub mod search;
pub mod simulation;
pub mod world;
