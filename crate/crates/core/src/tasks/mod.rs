//! TacBench downstream tasks T1-T5: labelers, probe heads, training loops
//! over frozen/partially-tuned/fully-tuned encoders, and metrics.

pub mod labels;
