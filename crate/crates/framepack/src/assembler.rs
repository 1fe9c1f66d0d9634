//! Interleaving text and visual tokens into one model-ready sequence.
//!
//! The grammar is fixed: `<s>[INST]`, then for every frame an `<Img>` marker
//! followed by that frame's 64 projected embedding rows, a `<Sub>` marker
//! plus subtitle tokens when the frame has a subtitle, and finally the
//! instruction tokens and `[/INST]`. Every token id and every embedding row
//! occupies one position against the budget plan's input capacity.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::budget::BudgetPlan;
use crate::subtitles::FrameSubtitles;
use crate::tokenizer::Vocab;
use crate::vision::{Stage, VisualTokens};

#[derive(Debug, Error, PartialEq)]
pub enum AssembleError {
    #[error("frame {frame_index} exceeds the plan's limit of {max_frames} frames")]
    TooManyFrames { frame_index: usize, max_frames: usize },
    #[error("{frames} frames but {subtitles} subtitle slots")]
    FrameSubtitleMismatch { frames: usize, subtitles: usize },
    #[error("frame {frame_index} carries {got} embedding rows, expected {expected}")]
    FrameRows { frame_index: usize, got: usize, expected: usize },
    #[error("frame {frame_index} is not projected-stage tokens")]
    NotProjected { frame_index: usize },
    #[error(
        "frame {frame_index} pushes the sequence to {would_reach} positions, over the input capacity {capacity}"
    )]
    BudgetExceeded { frame_index: usize, would_reach: usize, capacity: usize },
    #[error("trailing text pushes the sequence to {would_reach} positions, over the input capacity {capacity}")]
    TrailingOverflow { would_reach: usize, capacity: usize },
    #[error("instruction set is empty")]
    EmptyInstructionSet,
}

/// One run of the interleaved sequence: either a span of text token ids or
/// one frame's block of embedding rows.
#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Text { ids: Vec<u32> },
    Visual { embeddings: Array2<f64>, frame_index: usize },
}

impl Segment {
    /// Token positions this segment occupies: id count or embedding rows.
    pub fn positions(&self) -> usize {
        match self {
            Segment::Text { ids } => ids.len(),
            Segment::Visual { embeddings, .. } => embeddings.nrows(),
        }
    }
}

/// A fully assembled model input. `total_token_positions` counts text ids
/// plus embedding rows and never exceeds the plan's input capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct InterleavedSequence {
    pub segments: Vec<Segment>,
    pub total_token_positions: usize,
    pub budget: BudgetPlan,
}

/// Build the interleaved sequence for already-projected frames.
///
/// `frame_subs` must hold one entry per frame (empty string for frames with
/// no subtitle; those omit the `<Sub>` marker entirely). The instruction may
/// be empty, in which case no instruction segment is emitted. Frames beyond
/// `plan.max_frames` or positions beyond `plan` input capacity are errors
/// naming the offending frame.
pub fn assemble(
    frames: &[VisualTokens],
    frame_subs: &FrameSubtitles,
    instruction: &str,
    plan: &BudgetPlan,
) -> Result<InterleavedSequence, AssembleError> {
    if frames.len() != frame_subs.per_frame.len() {
        return Err(AssembleError::FrameSubtitleMismatch {
            frames: frames.len(),
            subtitles: frame_subs.per_frame.len(),
        });
    }
    if frames.len() > plan.max_frames {
        return Err(AssembleError::TooManyFrames {
            frame_index: plan.max_frames,
            max_frames: plan.max_frames,
        });
    }
    for (i, frame) in frames.iter().enumerate() {
        if frame.stage != Stage::Projected {
            return Err(AssembleError::NotProjected { frame_index: i });
        }
        if frame.count() != plan.tokens_per_frame {
            return Err(AssembleError::FrameRows {
                frame_index: i,
                got: frame.count(),
                expected: plan.tokens_per_frame,
            });
        }
    }

    let vocab = Vocab::new();
    let bos = vocab.special_id("<s>").expect("fixed vocab");
    let inst_open = vocab.special_id("[INST]").expect("fixed vocab");
    let inst_close = vocab.special_id("[/INST]").expect("fixed vocab");
    let img = vocab.special_id("<Img>").expect("fixed vocab");
    let sub = vocab.special_id("<Sub>").expect("fixed vocab");

    let capacity = plan.input_capacity();
    let mut segments = Vec::new();
    let mut total = 0usize;
    let push_text = |segments: &mut Vec<Segment>, total: &mut usize, ids: Vec<u32>| {
        *total += ids.len();
        segments.push(Segment::Text { ids });
    };

    push_text(&mut segments, &mut total, vec![bos, inst_open]);
    for (i, frame) in frames.iter().enumerate() {
        let mut frame_positions = 1 + frame.count();
        let mut sub_ids = Vec::new();
        let sub_text = &frame_subs.per_frame[i];
        if !sub_text.is_empty() {
            sub_ids.push(sub);
            sub_ids.extend(vocab.tokenize(sub_text));
            frame_positions += sub_ids.len();
        }
        if total + frame_positions > capacity {
            return Err(AssembleError::BudgetExceeded {
                frame_index: i,
                would_reach: total + frame_positions,
                capacity,
            });
        }
        push_text(&mut segments, &mut total, vec![img]);
        total += frame.count();
        segments.push(Segment::Visual { embeddings: frame.tokens.clone(), frame_index: i });
        if !sub_ids.is_empty() {
            push_text(&mut segments, &mut total, sub_ids);
        }
    }

    let instruction_ids = vocab.tokenize(instruction);
    let trailing = instruction_ids.len() + 1;
    if total + trailing > capacity {
        return Err(AssembleError::TrailingOverflow { would_reach: total + trailing, capacity });
    }
    if !instruction_ids.is_empty() {
        push_text(&mut segments, &mut total, instruction_ids);
    }
    push_text(&mut segments, &mut total, vec![inst_close]);

    Ok(InterleavedSequence { segments, total_token_positions: total, budget: plan.clone() })
}

/// A pool of instruction strings with reproducible sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionSet {
    pub instructions: Vec<String>,
    pub rng_seed: u64,
}

impl InstructionSet {
    pub fn new(instructions: Vec<String>, rng_seed: u64) -> Result<Self, AssembleError> {
        if instructions.is_empty() {
            return Err(AssembleError::EmptyInstructionSet);
        }
        Ok(InstructionSet { instructions, rng_seed })
    }

    /// The built-in pool of four generic video prompts.
    pub fn default_set(rng_seed: u64) -> Self {
        InstructionSet {
            instructions: vec![
                "Briefly describe these video".to_string(),
                "Describe what happens in this video".to_string(),
                "Summarize the main events of the video".to_string(),
                "What is shown in this video?".to_string(),
            ],
            rng_seed,
        }
    }
}

/// Uniform draw from the set, deterministic in `(rng_seed, draw_index)`.
/// Separate draw indices are independent streams, so draw 7 gives the same
/// instruction whether or not draws 0 through 6 ever happened.
pub fn sample_instruction(set: &InstructionSet, draw_index: u64) -> &str {
    let mut rng = ChaCha8Rng::seed_from_u64(set.rng_seed);
    rng.set_stream(draw_index);
    &set.instructions[rng.gen_range(0..set.instructions.len())]
}

/// Which training stage a template skeleton is rendered for. Both stages
/// share one grammar; they differ only in what fills the final slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingStage {
    /// Captioning pretraining: the slot holds a sampled general instruction.
    PretrainCaption,
    /// Instruction finetuning: the slot holds the dataset question.
    VqaFinetune,
}

/// Human-readable skeleton of the sequence grammar with numbered
/// placeholders, e.g. for one frame:
/// `<s>[INST]<Img><FrameFeature_1><Sub><Subtitle text_1><Instruction>[/INST]`.
///
/// The skeleton always shows a `<Sub>` slot per frame; at assembly time the
/// marker is omitted for frames with no subtitle.
pub fn render_stage_template(stage: TrainingStage, n_frames: usize) -> String {
    let mut out = String::from("<s>[INST]");
    for i in 1..=n_frames {
        out.push_str(&format!("<Img><FrameFeature_{i}><Sub><Subtitle text_{i}>"));
    }
    out.push_str(match stage {
        TrainingStage::PretrainCaption => "<Instruction>",
        TrainingStage::VqaFinetune => "<Question>",
    });
    out.push_str("[/INST]");
    out
}

/// Per-segment summary: text segments carry their ids and decoded string,
/// visual segments their shape and a checksum of the raw embedding bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub kind: String,
    pub length: usize,
    pub frame_index: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ids: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checksum: Option<String>,
}

/// JSON-friendly description of an assembled sequence. Embedding values are
/// represented only by shape and checksum, which keeps manifests small and
/// diffable while still pinning the numbers bit-for-bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub budget: BudgetPlan,
    pub total_token_positions: usize,
    pub segments: Vec<SegmentSummary>,
}

/// Summarize a sequence for serialization or golden-file comparison.
pub fn sequence_manifest(seq: &InterleavedSequence) -> SequenceManifest {
    let vocab = Vocab::new();
    let segments = seq
        .segments
        .iter()
        .map(|segment| match segment {
            Segment::Text { ids } => SegmentSummary {
                kind: "text".to_string(),
                length: ids.len(),
                frame_index: None,
                text: Some(vocab.detokenize(ids).expect("assembled ids are valid")),
                ids: Some(ids.clone()),
                shape: None,
                checksum: None,
            },
            Segment::Visual { embeddings, frame_index } => SegmentSummary {
                kind: "visual".to_string(),
                length: embeddings.nrows(),
                frame_index: Some(*frame_index),
                text: None,
                ids: None,
                shape: Some([embeddings.nrows(), embeddings.ncols()]),
                checksum: Some(embedding_checksum(embeddings)),
            },
        })
        .collect();
    SequenceManifest {
        budget: seq.budget.clone(),
        total_token_positions: seq.total_token_positions,
        segments,
    }
}

/// Pretty JSON with a trailing newline; the exact bytes golden files pin.
pub fn manifest_json(manifest: &SequenceManifest) -> String {
    let mut out = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    out.push('\n');
    out
}

/// SHA-256 over the row-major little-endian f64 bytes of the embeddings.
fn embedding_checksum(embeddings: &Array2<f64>) -> String {
    let mut hasher = Sha256::new();
    for row in embeddings.rows() {
        for &value in row {
            hasher.update(value.to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    let mut out = String::with_capacity(7 + 64);
    out.push_str("sha256:");
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}
