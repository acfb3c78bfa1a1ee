//! Transfer of parameter-efficient fine-tuning modules (bottleneck adapters and
//! LoRA) from a teacher transformer to a shallower and/or narrower student.
//!
//! The pipeline is: pick teacher layers for each student layer
//! ([`plan_layers`]), capture matched hidden states, correlate them
//! ([`pearson_correlation`]), solve a linear assignment ([`solve_lsa`]) and
//! prune the teacher modules with the resulting maps ([`transfer`]).

pub mod align;
pub mod container;
pub mod error;
pub mod layer_map;
pub mod lsa;
pub mod parallel;
pub mod peft;
pub mod report;
pub mod tensor;
pub mod toy;

pub use align::{
    align_batch, align_layer, alignment_report, transfer, transfer_detailed, AlignmentReport, LayerAlignment,
    LayerSummary, SampleBatch, SamplePair, TransferOutcome,
};
pub use container::{read_container, write_container, DType, TensorContainer, TensorEntry};
pub use error::{ContainerError, Error, Result};
pub use layer_map::{default_skip_offset, plan_layers, realize_plan, LayerMapPlan, LayerStrategy};
pub use lsa::{brute_force_lsa, solve_lsa, AssignmentSolution};
pub use peft::{
    adapter_forward, apply_alignment, lora_delta, AdapterParams, LayerModules, LoraParams, PeftKind, PeftModuleSet,
};
pub use tensor::{column_stats, pearson_correlation, ColumnStats, Matrix};
