//! Shared fixtures for the benchmarks in `benches/`.

use flowaug_core::flow::{AttentionPlacement, FlowConfig};
use flowaug_core::rng::SeededRng;
use flowaug_core::{FlowModel, Tensor};

/// A data-initialized flow on `side × side × 1` inputs and a batch for it.
pub fn initialized_flow(side: usize, batch: usize, attention: AttentionPlacement) -> (FlowModel, Tensor) {
    let cfg = FlowConfig {
        levels: 3,
        steps_per_level: 2,
        hidden: 8,
        attention,
        ..FlowConfig::default()
    };
    let mut rng = SeededRng::new(0);
    let x = Tensor::randn(&[batch, side, side, 1], 1.0, &mut rng);
    let mut model = FlowModel::new(cfg, [side, side, 1]).expect("valid config");
    model.initialize(&x).expect("batch of at least two");
    (model, x)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut SeededRng::new(seed))
}
