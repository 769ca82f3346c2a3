//! Hierarchical BiLSTM max-pooling sentence encoders for natural language
//! inference, with the training, evaluation and diagnostics around them.

pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod encoders;
pub mod model;
pub mod nli_head;
pub mod recurrent;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod workflow;
