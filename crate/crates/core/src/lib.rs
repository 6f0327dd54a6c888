//! Case-based learning engine for LLM agents.
//!
//! Completed tasks are distilled by an explicit update function into four
//! memory stores (facts, constraints, skills, cases). The stores are
//! retrieved into prompt contexts for later tasks, exported as hashed
//! bundles for other agents, and evaluated by a replayable protocol harness.

pub mod context;
pub mod curriculum;
pub mod harness;
pub mod memory;
pub mod par;
pub mod runtime;
pub mod suite;
#[cfg(feature = "testkit")]
pub mod testkit;
pub mod text;
pub mod transfer;
pub mod update;

pub use context::{assemble, render, PromptContext, Strategy};
pub use harness::{
    eval_all, run_ablation, run_protocol, score_sample, AblationReport, EvalReport, HarnessOptions,
    SampleScore, TaskMetrics,
};
pub use memory::{MemoryBank, ModuleKind};
pub use runtime::{execute_sample, run_case_loop, Backend, BackendPool, FixtureSet};
pub use suite::{Suite, TaskDefinition, TaskSample};
pub use transfer::{export_bundle, import_bundle, BundleManifest};
pub use update::{apply_phi, classify_failures, ExecutionTrace, ExperienceUpdater, FailureKind};
