use serde::{Deserialize, Serialize};

use super::conversation::{Conversation, Role};
use super::tokenizer::{BOS, EOS, EOS_LITERAL};
use crate::error::{Error, Result};

/// String scaffolding wrapped around conversation turns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTemplate {
    pub name: String,
    pub system_message: String,
    pub user_prefix: String,
    pub user_suffix: String,
    pub assistant_prefix: String,
    pub assistant_suffix: String,
    pub add_bos: bool,
    pub add_eos_after_assistant: bool,
}

/// A run of prompt text (or one special token) and whether it is supervised.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Text { text: String, supervised: bool },
    Token { id: u32, supervised: bool },
}

impl ChatTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Validation("template name is empty".into()));
        }
        if !self.add_eos_after_assistant && self.assistant_suffix.is_empty() {
            return Err(Error::Validation(format!(
                "template `{}` has neither an assistant suffix nor an EOS terminator",
                self.name
            )));
        }
        Ok(())
    }

    /// Empty markers and no system message; used for caption-style alignment.
    pub fn plain() -> Self {
        Self {
            name: "plain".into(),
            system_message: String::new(),
            user_prefix: String::new(),
            user_suffix: String::new(),
            assistant_prefix: String::new(),
            assistant_suffix: String::new(),
            add_bos: false,
            add_eos_after_assistant: true,
        }
    }

    /// USER/ASSISTANT markers after a one-sentence system message.
    pub fn llava_v1() -> Self {
        Self {
            name: "llava_v1".into(),
            system_message:
                "A chat between a curious user and an artificial intelligence assistant.".into(),
            user_prefix: " USER: ".into(),
            user_suffix: String::new(),
            assistant_prefix: " ASSISTANT: ".into(),
            assistant_suffix: String::new(),
            add_bos: true,
            add_eos_after_assistant: true,
        }
    }

    /// Turn-delimited markers; answers end with the turn delimiter, not EOS.
    pub fn gemma_like() -> Self {
        Self {
            name: "gemma_like".into(),
            system_message: String::new(),
            user_prefix: "<start_of_turn>user\n".into(),
            user_suffix: "<end_of_turn>\n".into(),
            assistant_prefix: "<start_of_turn>model\n".into(),
            assistant_suffix: "<end_of_turn>\n".into(),
            add_bos: true,
            add_eos_after_assistant: false,
        }
    }

    pub fn builtins() -> Vec<Self> {
        vec![Self::plain(), Self::llava_v1(), Self::gemma_like()]
    }

    /// Prompt segments in order. With `include_last_assistant = false` the
    /// final assistant answer and its terminator are dropped, keeping its
    /// prefix; a conversation ending on a human turn gets a trailing
    /// assistant prefix so the result is always a generation prompt.
    pub fn segments(&self, conv: &Conversation, include_last_assistant: bool) -> Vec<Segment> {
        let text = |s: &str, supervised| Segment::Text {
            text: s.to_string(),
            supervised,
        };
        let mut out = Vec::new();
        if self.add_bos {
            out.push(Segment::Token {
                id: BOS,
                supervised: false,
            });
        }
        out.push(text(&self.system_message, false));
        let last = conv.turns.len().saturating_sub(1);
        for (i, turn) in conv.turns.iter().enumerate() {
            match turn.role {
                Role::Human => {
                    out.push(text(&self.user_prefix, false));
                    out.push(text(&turn.text, false));
                    out.push(text(&self.user_suffix, false));
                }
                Role::Assistant => {
                    out.push(text(&self.assistant_prefix, false));
                    if i == last && !include_last_assistant {
                        continue;
                    }
                    out.push(text(&turn.text, true));
                    out.push(text(&self.assistant_suffix, true));
                    if self.add_eos_after_assistant {
                        out.push(Segment::Token {
                            id: EOS,
                            supervised: true,
                        });
                    }
                }
            }
        }
        if !include_last_assistant && conv.turns.last().is_some_and(|t| t.role == Role::Human) {
            out.push(text(&self.assistant_prefix, false));
        }
        out.retain(|s| !matches!(s, Segment::Text { text, .. } if text.is_empty()));
        out
    }

    /// The prompt as a string. EOS appears as its literal; BOS is token-level
    /// only and does not appear.
    pub fn render_prompt(&self, conv: &Conversation, include_last_assistant: bool) -> String {
        self.segments(conv, include_last_assistant)
            .into_iter()
            .map(|s| match s {
                Segment::Text { text, .. } => text,
                Segment::Token { id: EOS, .. } => EOS_LITERAL.to_string(),
                Segment::Token { .. } => String::new(),
            })
            .collect()
    }
}
