//! Conversation traces: ShareGPT-style JSON and token-count synthetic specs.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KvSimError, Result};
use crate::model::TokenId;

/// Generation budget for a human turn with no assistant reply to size it.
pub const DEFAULT_MAX_NEW_TOKENS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub user_tokens: Vec<TokenId>,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationTrace {
    pub id: String,
    pub turns: Vec<Turn>,
}

impl ConversationTrace {
    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(KvSimError::InvalidInput(format!(
                "conversation `{}` has no turns",
                self.id
            )));
        }
        for (i, t) in self.turns.iter().enumerate() {
            if t.user_tokens.is_empty() || t.max_new_tokens == 0 {
                return Err(KvSimError::InvalidInput(format!(
                    "conversation `{}` turn {} is empty",
                    self.id,
                    i + 1
                )));
            }
        }
        Ok(())
    }

    /// Total user plus maximum generated tokens.
    #[must_use]
    pub fn max_total_tokens(&self) -> usize {
        self.turns.iter().map(|t| t.user_tokens.len() + t.max_new_tokens).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    ShareGpt,
    Synthetic,
}

impl FromStr for TraceFormat {
    type Err = KvSimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sharegpt" | "sharegpt-json" => Ok(Self::ShareGpt),
            "synthetic" | "token-count-synthetic" => Ok(Self::Synthetic),
            _ => Err(KvSimError::InvalidArgument(format!("unknown trace format `{s}`"))),
        }
    }
}

/// Byte-level toy tokenizer: each UTF-8 byte becomes `byte mod vocab_size`.
#[must_use]
pub fn byte_tokenize(text: &str, vocab_size: usize) -> Vec<TokenId> {
    text.bytes().map(|b| (b as usize % vocab_size) as TokenId).collect()
}

#[derive(Debug, Deserialize)]
struct ShareGptItem {
    id: String,
    conversations: Vec<ShareGptMessage>,
}

#[derive(Debug, Deserialize)]
struct ShareGptMessage {
    from: String,
    value: String,
}

/// Token-count description of one synthetic conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTrace {
    pub id: String,
    pub turns: Vec<SyntheticTurn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticTurn {
    pub user: usize,
    pub gen: usize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    Many(Vec<T>),
    One(T),
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| KvSimError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

/// Maps ShareGPT items to traces. Each human message opens a turn; the
/// assistant message after it sets that turn's `max_new_tokens` to its
/// token length. Other roles are skipped.
pub fn parse_sharegpt(text: &str, path: &Path, vocab_size: usize) -> Result<Vec<ConversationTrace>> {
    let items: Vec<ShareGptItem> = parse_json(text, path)?;
    let mut traces = Vec::with_capacity(items.len());
    for item in items {
        let mut turns: Vec<Turn> = Vec::new();
        let mut awaiting_reply = false;
        for msg in &item.conversations {
            match msg.from.as_str() {
                "human" | "user" => {
                    turns.push(Turn {
                        user_tokens: byte_tokenize(&msg.value, vocab_size),
                        max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
                    });
                    awaiting_reply = true;
                }
                "gpt" | "assistant" | "chatgpt" if awaiting_reply => {
                    let len = msg.value.len();
                    if let Some(t) = turns.last_mut() {
                        t.max_new_tokens = if len == 0 { DEFAULT_MAX_NEW_TOKENS } else { len };
                    }
                    awaiting_reply = false;
                }
                _ => {}
            }
        }
        let trace = ConversationTrace { id: item.id, turns };
        trace.validate()?;
        traces.push(trace);
    }
    if traces.is_empty() {
        return Err(KvSimError::InvalidInput(format!(
            "{} holds no conversations",
            path.display()
        )));
    }
    Ok(traces)
}

/// Expands synthetic specs into token streams drawn from `seed`. Tokens are
/// uniform over the vocabulary minus the end-of-sequence id.
pub fn parse_synthetic(text: &str, path: &Path, vocab_size: usize, seed: u64) -> Result<Vec<ConversationTrace>> {
    let specs = match parse_json::<OneOrMany<SyntheticTrace>>(text, path)? {
        OneOrMany::Many(v) => v,
        OneOrMany::One(s) => vec![s],
    };
    if specs.is_empty() {
        return Err(KvSimError::InvalidInput(format!(
            "{} holds no conversations",
            path.display()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_token = vocab_size.saturating_sub(1).max(1) as TokenId;
    specs
        .into_iter()
        .map(|spec| {
            let turns = spec
                .turns
                .iter()
                .map(|t| Turn {
                    user_tokens: (0..t.user).map(|_| rng.gen_range(0..max_token)).collect(),
                    max_new_tokens: t.gen,
                })
                .collect();
            let trace = ConversationTrace { id: spec.id, turns };
            trace.validate()?;
            Ok(trace)
        })
        .collect()
}

/// Reads every conversation in `path`.
pub fn load_traces(path: &Path, format: TraceFormat, vocab_size: usize, seed: u64) -> Result<Vec<ConversationTrace>> {
    let text = fs::read_to_string(path).map_err(|e| KvSimError::io(path, e))?;
    match format {
        TraceFormat::ShareGpt => parse_sharegpt(&text, path, vocab_size),
        TraceFormat::Synthetic => parse_synthetic(&text, path, vocab_size, seed),
    }
}

// ── Synthetic trace generation ─────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceShape {
    /// Medium opening turns, large inputs on turns 3–4, a medium turn 5,
    /// then geometrically shrinking exchanges.
    PaperLike,
    /// Every turn around 200 user / 100 generated tokens.
    Uniform,
}

impl FromStr for TraceShape {
    type Err = KvSimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-like" => Ok(Self::PaperLike),
            "uniform" => Ok(Self::Uniform),
            _ => Err(KvSimError::InvalidArgument(format!("unknown trace shape `{s}`"))),
        }
    }
}

impl TraceShape {
    #[must_use]
    pub const fn name(self) -> &'static str {
        match self {
            Self::PaperLike => "paper-like",
            Self::Uniform => "uniform",
        }
    }

    /// Un-jittered (user, gen) counts for 1-based `turn`.
    #[must_use]
    pub fn base_counts(self, turn: usize) -> (usize, usize) {
        match self {
            Self::Uniform => (200, 100),
            Self::PaperLike => match turn {
                1 => (1200, 300),
                2 => (900, 250),
                3 => (1800, 300),
                4 => (1900, 300),
                5 => (1000, 200),
                _ => {
                    let decay = 0.8f64.powi((turn - 6) as i32);
                    (
                        ((40.0 * decay).round() as usize).max(4),
                        ((20.0 * decay).round() as usize).max(2),
                    )
                }
            },
        }
    }
}

/// Relative jitter applied to generated counts.
const JITTER: f64 = 0.03;

/// Builds a synthetic spec; counts get ±3% seeded jitter.
pub fn generate_synthetic(turns: usize, shape: TraceShape, seed: u64) -> Result<SyntheticTrace> {
    if turns == 0 {
        return Err(KvSimError::InvalidArgument("turns must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut jitter = |n: usize| ((n as f64 * (1.0 + rng.gen_range(-JITTER..=JITTER))).round() as usize).max(1);
    let turns = (1..=turns)
        .map(|t| {
            let (user, gen) = shape.base_counts(t);
            SyntheticTurn {
                user: jitter(user),
                gen: jitter(gen),
            }
        })
        .collect();
    Ok(SyntheticTrace {
        id: format!("synthetic-{}-{seed}", shape.name()),
        turns,
    })
}
