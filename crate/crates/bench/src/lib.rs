//! Shared fixtures for the criterion benches.

use taco_core::eval::{generate_world, SyntheticScorer, WorldSpec};
use taco_core::search::select_query_set;
use taco_core::training::TrainItem;
use taco_core::{DemoLibrary, ModelConfig, QuerySample, Rng, TacoModel, Tensor};

pub struct Fixture {
    pub library: DemoLibrary,
    pub queries: Vec<QuerySample>,
    pub scorer: SyntheticScorer,
    pub model: TacoModel,
    pub lib_fused: Tensor,
}

/// Default-width world with a 300-demo library and an untrained default model.
pub fn fixture() -> Fixture {
    let spec = WorldSpec { n_demos: 340, n_queries: 20, ..WorldSpec::generalized() };
    let (_, full, _) = generate_world(&spec, &mut Rng::new(0)).expect("world");
    let split = select_query_set(&full, 10, 4, &mut Rng::new(1)).expect("query split");
    let model = TacoModel::new(ModelConfig::default(), &mut Rng::new(2)).expect("model");
    let lib_fused = model.library_embeddings(&split.library).expect("library embeddings");
    Fixture { library: split.library, queries: split.queries, scorer: SyntheticScorer::default(), model, lib_fused }
}

/// Training items with random 4-shot targets.
pub fn train_items(f: &Fixture, count: usize) -> Vec<TrainItem> {
    let mut rng = Rng::new(3);
    (0..count)
        .map(|i| {
            let mut pos: Vec<usize> = (0..f.library.len()).collect();
            rng.shuffle(&mut pos);
            pos.truncate(4);
            TrainItem { query: f.queries[i % f.queries.len()].clone(), positions: pos }
        })
        .collect()
}
