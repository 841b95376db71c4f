//! Builds text-encoder inputs from templates and splices learned embeddings
//! into the slot rows before the encoder runs.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::attribute::AttributeValue;
use crate::backbone::{DiffusionBackbone, TokenId};
use crate::error::{Error, Result};
use crate::template::{PromptTemplate, Segment};
use crate::words::{WordModel, WordTrace};

pub const DEFAULT_IDENTITY_TOKEN: &str = "sks";
pub const NEGATIVE_IDENTITY_PROMPT: &str = "a photo of <obj>";

/// Learned embedding standing in for the training object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityToken {
    pub token_string: String,
    pub embedding: Array1<f64>,
}

impl IdentityToken {
    /// Starts from the backbone's own embedding of `token_string`.
    pub fn new<B: DiffusionBackbone + ?Sized>(backbone: &B, token_string: &str) -> Result<Self> {
        let id = single_token(backbone, token_string)?;
        let embedding = backbone.embed(&[id])?.row(0).to_owned();
        Ok(Self {
            token_string: token_string.to_string(),
            embedding,
        })
    }

    pub fn validate<B: DiffusionBackbone + ?Sized>(&self, backbone: &B) -> Result<()> {
        single_token(backbone, &self.token_string)?;
        if self.embedding.len() != backbone.embedding_width() {
            return Err(Error::ShapeMismatch {
                expected: vec![backbone.embedding_width()],
                actual: vec![self.embedding.len()],
            });
        }
        if !self.embedding.iter().all(|v| v.is_finite()) {
            return Err(Error::Precondition("identity embedding is not finite".into()));
        }
        Ok(())
    }
}

fn single_token<B: DiffusionBackbone + ?Sized>(backbone: &B, text: &str) -> Result<TokenId> {
    match backbone.tokenize(text).as_slice() {
        [id] => Ok(*id),
        ids => Err(Error::Config(format!(
            "identity token `{text}` must tokenize to one id, got {}",
            ids.len()
        ))),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    NullText,
    #[default]
    Identity,
}

impl std::str::FromStr for NegativeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "null_text" => Ok(Self::NullText),
            "identity" => Ok(Self::Identity),
            other => Err(Error::Config(format!(
                "unknown negative mode `{other}` (expected null_text or identity)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub positive: Array2<f64>,
    pub negative: Array2<f64>,
    /// Rows of the positive input sequence that were injected.
    pub slot_positions: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotSource {
    Identity,
    /// Index into the word-model list.
    Word(usize),
}

#[derive(Debug, Clone)]
pub struct Slot {
    pub position: usize,
    pub source: SlotSource,
    /// Forward trace of the word model that filled this slot.
    pub trace: Option<WordTrace>,
}

/// A text-encoder input sequence after injection.
#[derive(Debug, Clone)]
pub struct PreparedInput {
    /// Plain token ids: attribute slots hold the placeholder id and the
    /// object slot holds the identity token's id.
    pub ids: Vec<TokenId>,
    /// `max_sequence_length × width`
    pub embeddings: Array2<f64>,
    pub slots: Vec<Slot>,
}

impl PreparedInput {
    pub fn slot_positions(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.position).collect()
    }
}

/// Wraps ids in BOS/EOS and pads to the backbone's maximum length.
pub fn frame_ids<B: DiffusionBackbone + ?Sized>(backbone: &B, body: &[TokenId]) -> Result<Vec<TokenId>> {
    let special = backbone.special_tokens();
    let max = backbone.max_sequence_length();
    let len = body.len() + 2;
    if len > max {
        return Err(Error::SequenceTooLong { len, max });
    }
    let mut ids = Vec::with_capacity(max);
    ids.push(special.bos);
    ids.extend_from_slice(body);
    ids.push(special.eos);
    ids.resize(max, special.pad);
    Ok(ids)
}

/// Plain token ids of a template and the `(position, segment)` of each slot.
pub fn template_ids<B: DiffusionBackbone + ?Sized>(
    backbone: &B,
    template: &PromptTemplate,
    identity_string: &str,
) -> Result<(Vec<TokenId>, Vec<(usize, Segment)>)> {
    let placeholder = backbone.special_tokens().placeholder;
    let mut body = Vec::new();
    let mut slots = Vec::new();
    for seg in template.segments() {
        match seg {
            Segment::Literal(text) => body.extend(backbone.tokenize(text)),
            Segment::Obj => {
                slots.push((body.len() + 1, seg.clone()));
                body.push(single_token(backbone, identity_string)?);
            }
            Segment::Attr(_) => {
                slots.push((body.len() + 1, seg.clone()));
                body.push(placeholder);
            }
        }
    }
    Ok((frame_ids(backbone, &body)?, slots))
}

/// Tokenizes, embeds, and overwrites slot rows with the identity embedding
/// or the word-model outputs. Every other row is the backbone's embedding of
/// the plain ids.
pub fn prepare_input<B: DiffusionBackbone + ?Sized>(
    backbone: &B,
    template: &PromptTemplate,
    identity: Option<&IdentityToken>,
    values: &AttributeValue,
    words: &[WordModel],
) -> Result<PreparedInput> {
    if template.has_obj() && identity.is_none() {
        return Err(Error::Precondition(
            "template has an <obj> slot but no identity token was given".into(),
        ));
    }
    let identity_string = identity.map_or(DEFAULT_IDENTITY_TOKEN, |i| i.token_string.as_str());
    let (ids, raw_slots) = template_ids(backbone, template, identity_string)?;
    let mut embeddings = backbone.embed(&ids)?;
    let mut slots = Vec::with_capacity(raw_slots.len());
    for (position, seg) in raw_slots {
        let (source, trace, row) = match seg {
            Segment::Obj => {
                let identity = identity.expect("checked above");
                (SlotSource::Identity, None, identity.embedding.clone())
            }
            Segment::Attr(name) => {
                let index = words
                    .iter()
                    .position(|w| w.slot() == name)
                    .ok_or_else(|| Error::UnknownAttribute(name.clone()))?;
                let trace = words[index].forward(values)?;
                let row = trace.output().clone();
                (SlotSource::Word(index), Some(trace), row)
            }
            Segment::Literal(_) => unreachable!("literals are not slots"),
        };
        if row.len() != embeddings.ncols() {
            return Err(Error::ShapeMismatch {
                expected: vec![embeddings.ncols()],
                actual: vec![row.len()],
            });
        }
        embeddings.row_mut(position).assign(&row);
        slots.push(Slot {
            position,
            source,
            trace,
        });
    }
    Ok(PreparedInput {
        ids,
        embeddings,
        slots,
    })
}

/// Encoder output of plain text with no injections.
pub fn encode_text<B: DiffusionBackbone + ?Sized>(backbone: &B, text: &str) -> Result<Array2<f64>> {
    let ids = frame_ids(backbone, &backbone.tokenize(text))?;
    backbone.encode(&backbone.embed(&ids)?)
}

pub fn negative_conditioning<B: DiffusionBackbone + ?Sized>(
    mode: NegativeMode,
    identity: Option<&IdentityToken>,
    backbone: &B,
) -> Result<Array2<f64>> {
    match mode {
        NegativeMode::NullText => encode_text(backbone, ""),
        NegativeMode::Identity => {
            let identity = identity.ok_or_else(|| {
                Error::Config("identity negative mode requires an identity token".into())
            })?;
            let template = PromptTemplate::parse_syntax(NEGATIVE_IDENTITY_PROMPT)?;
            let input = prepare_input(backbone, &template, Some(identity), &AttributeValue::new(), &[])?;
            backbone.encode(&input.embeddings)
        }
    }
}

pub fn assemble_conditioning<B: DiffusionBackbone + ?Sized>(
    template: &PromptTemplate,
    identity: Option<&IdentityToken>,
    values: &AttributeValue,
    words: &[WordModel],
    backbone: &B,
    negative_mode: NegativeMode,
) -> Result<ConditioningBundle> {
    let input = prepare_input(backbone, template, identity, values, words)?;
    let positive = backbone.encode(&input.embeddings)?;
    let negative = negative_conditioning(negative_mode, identity, backbone)?;
    Ok(ConditioningBundle {
        positive,
        negative,
        slot_positions: input.slot_positions(),
    })
}
