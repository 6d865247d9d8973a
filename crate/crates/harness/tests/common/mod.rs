use cmtr_harness::spec::{Axis, ExperimentSpec, SweepSpec};

/// A spec small enough to train a cell in well under a second.
pub fn small_spec() -> ExperimentSpec {
    let mut spec = ExperimentSpec::default();
    spec.name = "small".into();
    spec.seeds = vec![1, 2];
    spec.benchmark.train_ids = 6;
    spec.benchmark.test_ids = 4;
    spec.benchmark.per_modality = 4;
    spec.benchmark.img_h = 32;
    spec.benchmark.img_w = 16;
    let m = &mut spec.train.model;
    m.patch.patch_size = 8;
    m.patch.stride = 8;
    m.patch.embed_dim = 16;
    m.depth = 1;
    m.heads = 2;
    spec.train.batch.q = 3;
    spec.train.batch.k = 4;
    spec.train.schedule.epochs = 2;
    spec.train.schedule.decay_epochs = vec![1];
    spec.sweep = SweepSpec { axis: Axis::Ablation, values: vec!["base".into(), "me+mac+maid".into()] };
    spec
}
