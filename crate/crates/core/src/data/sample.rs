use serde::{Deserialize, Serialize};

use super::conversation::Conversation;
use super::template::{ChatTemplate, Segment};
use super::tokenizer::{Tokenizer, IMAGE};
use crate::error::{Error, Result};
use crate::numerics::IGNORE_INDEX;

/// Which conversations a stage accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Conversations without an answer are allowed and contribute no loss.
    Pretrain,
    /// Every conversation must contain at least one assistant answer.
    Finetune,
}

/// Token ids with next-token supervision labels (`-100` = ignored).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSample {
    pub input_ids: Vec<u32>,
    pub labels: Vec<i64>,
    pub image_token_index: Option<usize>,
}

impl TokenizedSample {
    pub fn len(&self) -> usize {
        self.input_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.input_ids.is_empty()
    }

    pub fn supervised_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_INDEX).count()
    }
}

/// Tokenizes the rendered conversation segment by segment and labels the
/// assistant answers (with their terminators); everything else is ignored.
pub fn tokenize_and_label(
    conv: &Conversation,
    tpl: &ChatTemplate,
    tok: &Tokenizer,
    mode: LabelMode,
) -> Result<TokenizedSample> {
    if mode == LabelMode::Finetune && !conv.has_assistant_turn() {
        return Err(Error::Validation(format!(
            "conversation `{}` has no assistant turn",
            conv.id
        )));
    }
    encode_segments(&tpl.segments(conv, true), tok)
}

/// Token ids of a generation prompt (no labels needed).
pub fn tokenize_prompt(conv: &Conversation, tpl: &ChatTemplate, tok: &Tokenizer) -> Result<TokenizedSample> {
    encode_segments(&tpl.segments(conv, false), tok)
}

fn encode_segments(segments: &[Segment], tok: &Tokenizer) -> Result<TokenizedSample> {
    let mut input_ids = Vec::new();
    let mut labels = Vec::new();
    for seg in segments {
        let (ids, supervised) = match seg {
            Segment::Text { text, supervised } => (tok.encode(text), *supervised),
            Segment::Token { id, supervised } => (vec![*id], *supervised),
        };
        labels.extend(ids.iter().map(|&id| if supervised { id as i64 } else { IGNORE_INDEX }));
        input_ids.extend(ids);
    }
    let mut images = input_ids.iter().enumerate().filter(|(_, &id)| id == IMAGE);
    let image_token_index = images.next().map(|(i, _)| i);
    if images.next().is_some() {
        return Err(Error::Validation("more than one image token in sample".into()));
    }
    if let Some(i) = image_token_index {
        // An image token may only come from user text.
        labels[i] = IGNORE_INDEX;
    }
    Ok(TokenizedSample {
        input_ids,
        labels,
        image_token_index,
    })
}
