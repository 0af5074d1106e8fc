//! Shared fixtures for the criterion benches.

use cdl_core::data::{Dataset, DatasetSpec};
use cdl_core::vit::{Backbone, ViTConfig};
use cdl_core::{ParamStore, SeededRng};

pub fn bench_dataset() -> Dataset {
    Dataset::generate(&DatasetSpec {
        train_per_class: 4,
        test_per_class: 1,
        ..DatasetSpec::default()
    })
    .expect("bench dataset generates")
}

pub fn bench_backbone(cfg: ViTConfig, seed: u64) -> (Backbone, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = SeededRng::new(seed);
    let bb = Backbone::init(cfg, &mut store, &mut rng).expect("backbone init");
    (bb, store)
}
