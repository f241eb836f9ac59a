use crate::data::SEP;
use crate::error::{Error, Result};

use super::ModelConfig;

/// One encoder input: persona tokens, `[s]`, query tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelInput {
    pub ids: Vec<usize>,
    /// 0 over the persona segment and the separator, 1 over the query.
    pub type_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    /// `true` at padding positions. All false for a single unpadded input.
    pub padding_mask: Vec<bool>,
    /// Persona tokens kept, excluding the separator.
    pub persona_len: usize,
    /// Persona tokens dropped from the left to fit `max_len`.
    pub truncated: usize,
}

impl ModelInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Persona tokens followed by the separator.
    pub fn persona_segment(&self) -> &[usize] {
        &self.ids[..=self.persona_len]
    }
}

/// Lay out `personas ++ [s] ++ query`. When the result exceeds
/// `config.max_len`, the oldest persona tokens are dropped first; the query
/// is never cut, and a query that cannot fit on its own is an error.
pub fn build_input(personas: &[Vec<usize>], query: &[usize], config: &ModelConfig) -> Result<ModelInput> {
    if query.len() + 1 > config.max_len {
        return Err(Error::Data {
            record: "input".into(),
            message: format!(
                "query of {} tokens does not fit max_len {}",
                query.len(),
                config.max_len
            ),
        });
    }
    let persona: Vec<usize> = personas.iter().flatten().copied().collect();
    let room = config.max_len - query.len() - 1;
    let truncated = persona.len().saturating_sub(room);
    let persona = &persona[truncated..];

    let mut ids = Vec::with_capacity(persona.len() + 1 + query.len());
    ids.extend_from_slice(persona);
    ids.push(SEP);
    ids.extend_from_slice(query);
    let mut type_ids = vec![0; persona.len() + 1];
    type_ids.resize(ids.len(), 1);
    Ok(ModelInput {
        position_ids: (0..ids.len()).collect(),
        padding_mask: vec![false; ids.len()],
        type_ids,
        persona_len: persona.len(),
        truncated,
        ids,
    })
}


/// Encoder-only masked-token input: `persona ++ [s] ++ query ++ [s] ++
/// prefix ++ [mask]`, asking for the response token at `prefix.len()`.
/// Persona tokens are dropped from the left as in [`build_input`].
pub fn build_masked_input(input: &ModelInput, prefix: &[usize], config: &ModelConfig) -> Result<ModelInput> {
    let persona = input.ids[..input.persona_len].to_vec();
    let mut query = input.ids[input.persona_len + 1..].to_vec();
    query.push(SEP);
    query.extend_from_slice(prefix);
    query.push(crate::data::MASK);
    build_input(&[persona], &query, config)
}
