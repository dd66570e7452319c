//! Alpha-aware dual encoder: prompted text and image towers scored by cosine similarity.

mod model;
mod tokenizer;
mod train;
mod vocab;

pub use model::{
    argmax, classify, is_prompt_param, similarity, AlphaKind, AlphaMask, DualEncConfig, DualEncoder, DualNet, EmbeddingBundle,
    PromptSet, TextEncoder, VisionEncoder, FULL_EMBED_DIM, PROMPT_PREFIX,
};
pub use tokenizer::{prompt_sentence, Tokenizer};
pub use train::{
    accuracy, batch_loss, clip_tune_step, draw_alpha, pretrain, sample_loss, tune_prompts, EvalAlpha, PretrainConfig,
    StepOutcome, TrainLog, TuneConfig, MAX_LOGIT_SCALE,
};
pub use vocab::Vocabulary;
