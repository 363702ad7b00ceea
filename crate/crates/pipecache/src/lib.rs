pub mod caching;
pub mod cli;
pub mod dsl;
pub mod experiment;
pub mod frame;
pub mod pipeline;
pub mod retrieval;
pub mod storage;
