//! Task instances as token sequences.

use crate::error::Result;
use crate::model::SequenceLayout;
use crate::taskgen::TaskInstance;
use crate::vocab::Vocabulary;

/// Token-id views of one task's question, plan, and boxed answer.
#[derive(Debug, Clone)]
pub struct EncodedTask {
    pub question: Vec<u32>,
    pub plan: Vec<u32>,
    /// `\boxed{` ... `}` followed by `<eos>`.
    pub answer: Vec<u32>,
}

pub fn encode_task(vocab: &Vocabulary, inst: &TaskInstance) -> Result<EncodedTask> {
    let question = vocab.encode(&inst.question.join(" "))?;
    let plan = vocab.encode(&inst.plan.join(" "))?;
    let mut answer = vocab.encode(&format!("\\boxed{{{}}}", inst.answer))?;
    answer.push(vocab.eos());
    Ok(EncodedTask {
        question,
        plan,
        answer,
    })
}

/// Assemble the teacher-forced token stream and its layout.
///
/// `k_latent = Some(k)` inserts a well-formed latent block between plan and
/// answer; `with_answer = false` stops after the latent block (stage-1
/// style inputs). `prefix_len` positions the layout behind an image prefix
/// without adding tokens.
pub fn assemble_sequence(
    enc: &EncodedTask,
    vocab: &Vocabulary,
    prefix_len: usize,
    k_latent: Option<usize>,
    with_answer: bool,
) -> (Vec<u32>, SequenceLayout) {
    let mut tokens = Vec::with_capacity(enc.question.len() + enc.plan.len() + 16);
    tokens.extend_from_slice(&enc.question);
    tokens.extend_from_slice(&enc.plan);
    if let Some(k) = k_latent {
        tokens.push(vocab.latent_start());
        tokens.extend(std::iter::repeat(vocab.latent_pad()).take(k));
        tokens.push(vocab.latent_end());
    }
    let answer_len = if with_answer {
        tokens.extend_from_slice(&enc.answer);
        enc.answer.len()
    } else {
        0
    };
    let layout = SequenceLayout::build(
        prefix_len,
        enc.question.len(),
        enc.plan.len(),
        k_latent,
        answer_len,
    );
    (tokens, layout)
}
