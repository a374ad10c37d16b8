//! Seeded synthetic relevance world, datasets and persistence.

mod dataset;
pub mod vocab;
pub mod world;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use dataset::{
    gen_dataset, randomize_reasons, read_jsonl, strip_reasons, write_jsonl, ReasonMode,
    RelevanceExample, DEFAULT_LABEL_MIX,
};
pub use vocab::{TokenId, Vocabulary, CLS, PAD, SEP};
pub use world::{label_token, Decision, Rule, Surface, World, WorldConfig};

use crate::error::Error;

/// 3-way relevance grade.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Label {
    Irrelevant = 0,
    Moderate = 1,
    Relevant = 2,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Irrelevant, Label::Moderate, Label::Relevant];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl TryFrom<u8> for Label {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self, Error> {
        match v {
            0 => Ok(Label::Irrelevant),
            1 => Ok(Label::Moderate),
            2 => Ok(Label::Relevant),
            _ => Err(Error::Data(format!("label {v} outside 0..=2"))),
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

/// Independent sub-seed for a named random stream.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
