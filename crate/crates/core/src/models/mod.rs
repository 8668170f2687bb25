//! Network definitions, weight containers and the embedder snapshot pool.

mod nets;
mod pool;
mod weights;

pub use nets::{logits_with, Arch, Classifier, Discriminator, Embedder, Generator, ImageSpec, CLASS_EMBED_DIM, EMBEDDER_BLOCKS};
pub use pool::{pool_build, pool_draw, pool_sample, EmbedderSource, PoolConfig, Snapshot, SnapshotPool};
pub use weights::{ModelWeights, WEIGHTS_MAGIC, WEIGHTS_VERSION};
