pub mod annotate;
pub mod develop;
pub mod evaluate;
pub mod export;
pub mod ingest;
pub mod serve;
pub mod synth;
