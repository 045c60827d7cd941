//! Conversations, chat templates, tokenization with label masking, image
//! preprocessing, batching and synthetic VQA data.

pub mod collate;
pub mod conversation;
pub mod image;
pub mod sample;
pub mod synth;
pub mod template;
pub mod tokenizer;

pub use collate::{collate, truncate, Batch};
pub use conversation::{load_dataset, parse_dataset, Conversation, RawRecord, Role, Turn};
pub use image::{load_image, preprocess_image, write_image, AspectMode, Normalization};
pub use sample::{tokenize_and_label, tokenize_prompt, LabelMode, TokenizedSample};
pub use synth::{synth_vqa_generate, write_synth, Category, Question, Split, SynthSample};
pub use template::ChatTemplate;
pub use tokenizer::Tokenizer;
