pub mod analytics;
pub mod cli;
pub mod client;
pub mod compare;
pub mod corpus;
pub mod evaluator;
pub mod sandbox;
pub mod template;
