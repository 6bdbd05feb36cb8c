//! Knowledge triples injected into a small byte-level decoder as
//! knowledge tokens through rectangular attention.

pub mod adapters;
pub mod checkpoint;
pub mod embed;
pub mod eval;
pub mod kb;
pub mod model;
pub mod tensor;
pub mod train;

pub use adapters::{AdapterError, AdapterSet, KnowledgeToken, PackedTokens, TokenStore};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use embed::{BackendConfig, BaseEmbeddingPair, EmbedError, EmbeddingBackend, HashNgram};
pub use eval::{EvalError, RefusalResult, RetrievalResult};
pub use kb::{InstructionSample, KbError, KnowledgeBase, KnowledgeTriple, QuestionKind, SynthesisConfig};
pub use model::{KnowledgeContext, Model, ModelConfig, ModelError, TransformerWeights};
pub use tensor::{Tensor, TensorError};
pub use train::{BatchSpec, Mixture, OptimizerConfig, TrainConfig, TrainError};
