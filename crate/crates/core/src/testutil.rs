use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::numerics::Tensor;

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        image_size: 8,
        patch_size: 2,
        channels: 1,
        hidden_dim: 16,
        n_heads: 2,
        n_blocks: 4,
        n_classes: 3,
        timesteps: 100,
        beta_min: 1e-4,
        beta_max: 0.02,
    }
}

/// Backbone whose zero-initialized parameters are replaced with noise, so
/// every block and the head are non-trivial.
pub(crate) fn random_backbone(config: BackboneConfig, seed: u64) -> Backbone {
    let mut r = rng(seed);
    let mut bb = Backbone::new(config, &mut r).unwrap();
    for (_, p) in bb.named_params_mut() {
        let noise = Tensor::randn(p.shape(), 0.1, &mut r);
        for (v, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    bb
}
