#![allow(dead_code)]

use std::path::Path;

use divgen_core::assembler::{assemble, AssembleOptions, InMemoryRecords};
use divgen_core::backend::{generate_plan, MemorySink, MockBackend, RunOptions};
use divgen_core::prompt::{expand, ExpandOptions};
use divgen_core::{
    ClassificationTask, DatasetManifest, DomainStyle, GenerationRequest, ImageSize, PlanRng,
    TrickKind,
};

pub fn toy_task(name: &str, labels: &[&str], side: u32, per_class: u32) -> ClassificationTask {
    ClassificationTask {
        name: name.into(),
        class_labels: labels.iter().map(|s| s.to_string()).collect(),
        native_image_size: ImageSize::square(side),
        per_class_count: per_class,
        test_set_ref: None,
        style: DomainStyle::GenericObjects,
    }
}

pub fn small_plan(task: &ClassificationTask, trick: TrickKind, master_seed: u64, gen_side: u32) -> Vec<GenerationRequest> {
    let opts = ExpandOptions {
        generation_width: gen_side,
        generation_height: gen_side,
        ..Default::default()
    };
    expand(task, trick, &PlanRng::new(master_seed, &task.name, trick), &opts).unwrap()
}

/// Generate with the mock backend and assemble under `root`.
pub fn mock_dataset(
    task: &ClassificationTask,
    trick: TrickKind,
    master_seed: u64,
    gen_side: u32,
    root: &Path,
) -> (Vec<GenerationRequest>, DatasetManifest) {
    let plan = small_plan(task, trick, master_seed, gen_side);
    let mut sink = MemorySink::default();
    let opts = RunOptions {
        max_in_flight: 8,
        ..Default::default()
    };
    generate_plan(&plan, &MockBackend::new("test"), &mut sink, &opts).unwrap();
    let mut aopts = AssembleOptions::new(root, true);
    aopts.master_seed = master_seed;
    aopts.trick_composition = trick.as_str().into();
    let manifest = assemble(&plan, &InMemoryRecords::new(sink.records), task, &aopts).unwrap();
    (plan, manifest)
}
