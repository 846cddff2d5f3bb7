use serde::{Deserialize, Serialize};

use crate::{AlignError, Result};

pub const LONGCOT_SYSTEM: &str = "Let's think step by step. Please ensure that the reasoning process are enclosed within <think> </think> tags, i.e., <think> reasoning process here </think>. And put your final answer within \\boxed{}.";

const OPEN: &str = "<think>";
const CLOSE: &str = "</think>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChatMode {
    LongCot,
    General,
}

/// Prompt text up to and including the assistant marker.
pub fn render_template(mode: ChatMode, query: &str) -> Result<String> {
    if query.is_empty() {
        return Err(AlignError::Input("query is empty".into()));
    }
    Ok(match mode {
        ChatMode::LongCot => format!("<System>: {LONGCOT_SYSTEM}\n\n<Human>: {query}\n\n<AI>: "),
        ChatMode::General => format!("<Human>: {query}\n\n<AI>: "),
    })
}

pub fn wrap_think(thought: &str, answer: &str) -> String {
    format!("{OPEN}{thought}{CLOSE}{answer}")
}

/// Full exchange text. LongCoT responses carry `thought` in a think block;
/// general ones ignore it.
pub fn render_exchange(mode: ChatMode, query: &str, thought: &str, answer: &str) -> Result<String> {
    let prompt = render_template(mode, query)?;
    Ok(match mode {
        ChatMode::LongCot => prompt + &wrap_think(thought, answer),
        ChatMode::General => prompt + answer,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThinkParse {
    pub thought: Option<String>,
    /// Everything outside the first think block.
    pub answer: String,
}

pub fn parse_think(response: &str) -> Result<ThinkParse> {
    let Some(open) = response.find(OPEN) else {
        if response.contains(CLOSE) {
            return Err(AlignError::Malformed("closing think tag without an opening one".into()));
        }
        return Ok(ThinkParse {
            thought: None,
            answer: response.to_string(),
        });
    };
    let body_start = open + OPEN.len();
    let Some(close) = response[body_start..].find(CLOSE).map(|c| c + body_start) else {
        return Err(AlignError::Malformed("unclosed think tag".into()));
    };
    if response[body_start..close].contains(OPEN) {
        return Err(AlignError::Malformed("nested think tag".into()));
    }
    if response[..open].contains(CLOSE) {
        return Err(AlignError::Malformed("closing think tag before the opening one".into()));
    }
    Ok(ThinkParse {
        thought: Some(response[body_start..close].to_string()),
        answer: format!("{}{}", &response[..open], &response[close + CLOSE.len()..]),
    })
}
