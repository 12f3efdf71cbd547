pub mod annotate;
pub mod corpus;
pub mod embedspace;
pub mod filtering;
pub mod hnnce;
pub mod jsonl;
pub mod mtg;
pub mod pairminer;
pub mod pipeline;
pub mod retrieval;
pub mod tripletset;
pub mod synth;
