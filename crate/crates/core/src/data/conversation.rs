use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenizer::IMAGE_LITERAL;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Human,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn human(text: impl Into<String>) -> Self {
        Self {
            role: Role::Human,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            text: text.into(),
        }
    }
}

/// A dialogue in LLaVA form, optionally grounded on one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub id: String,
    pub image_path: Option<String>,
    pub turns: Vec<Turn>,
}

impl Conversation {
    /// Builds and validates a conversation.
    pub fn new(id: impl Into<String>, image_path: Option<String>, turns: Vec<Turn>) -> Result<Self> {
        let conv = Self {
            id: id.into(),
            image_path,
            turns,
        };
        conv.validate()?;
        Ok(conv)
    }

    /// Checks role alternation and placeholder placement.
    pub fn validate(&self) -> Result<()> {
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::Human } else { Role::Assistant };
            if turn.role != expected {
                return Err(Error::Validation(format!(
                    "turn {i} has role {:?}, expected {expected:?}",
                    turn.role
                )));
            }
            let count = turn.text.matches(IMAGE_LITERAL).count();
            if count > 0 && i != 0 {
                return Err(Error::Validation(format!(
                    "turn {i} contains {IMAGE_LITERAL}; only the first human turn may"
                )));
            }
            if count > 1 {
                return Err(Error::Validation(format!(
                    "{IMAGE_LITERAL} appears {count} times in the first turn"
                )));
            }
        }
        match (self.has_placeholder(), self.image_path.is_some()) {
            (true, false) => Err(Error::Validation(format!(
                "{IMAGE_LITERAL} placeholder without an image"
            ))),
            (false, true) => Err(Error::Validation(format!(
                "image given but no {IMAGE_LITERAL} placeholder"
            ))),
            _ => Ok(()),
        }
    }

    pub fn has_placeholder(&self) -> bool {
        self.turns
            .first()
            .is_some_and(|t| t.text.contains(IMAGE_LITERAL))
    }

    pub fn has_assistant_turn(&self) -> bool {
        self.turns.iter().any(|t| t.role == Role::Assistant)
    }

    /// Assistant texts in order.
    pub fn answers(&self) -> impl Iterator<Item = &str> {
        self.turns
            .iter()
            .filter(|t| t.role == Role::Assistant)
            .map(|t| t.text.as_str())
    }

    /// The same conversation with a trailing assistant turn removed.
    pub fn without_final_answer(&self) -> Self {
        let mut c = self.clone();
        if c.turns.last().is_some_and(|t| t.role == Role::Assistant) {
            c.turns.pop();
        }
        c
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawTurn {
    pub from: String,
    pub value: String,
}

/// One record of a dataset file. Benchmark files add `gold` and `category`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub conversations: Vec<RawTurn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl RawRecord {
    pub fn to_conversation(&self) -> Result<Conversation> {
        let turns = self
            .conversations
            .iter()
            .map(|t| match t.from.as_str() {
                "human" => Ok(Turn::human(t.value.clone())),
                "gpt" => Ok(Turn::assistant(t.value.clone())),
                other => Err(Error::Validation(format!("unknown speaker `{other}`"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Conversation::new(self.id.clone(), self.image.clone(), turns)
    }

    pub fn from_conversation(conv: &Conversation) -> Self {
        Self {
            id: conv.id.clone(),
            image: conv.image_path.clone(),
            conversations: conv
                .turns
                .iter()
                .map(|t| RawTurn {
                    from: match t.role {
                        Role::Human => "human".into(),
                        Role::Assistant => "gpt".into(),
                    },
                    value: t.text.clone(),
                })
                .collect(),
            gold: None,
            category: None,
        }
    }
}

pub fn read_records(path: &Path) -> Result<Vec<RawRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Parses a records array; invalid records are reported with their index.
pub fn parse_dataset(json: &str) -> Result<Vec<Conversation>> {
    let records: Vec<RawRecord> = serde_json::from_str(json)?;
    conversations_from_records(&records)
}

pub fn conversations_from_records(records: &[RawRecord]) -> Result<Vec<Conversation>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.to_conversation()
                .map_err(|e| Error::Validation(format!("record {i} (`{}`): {e}", r.id)))
        })
        .collect()
}

/// Loads a LLaVA-format dataset, preserving file order.
pub fn load_dataset(path: &Path) -> Result<Vec<Conversation>> {
    conversations_from_records(&read_records(path)?)
}

pub fn write_records(path: &Path, records: &[RawRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
