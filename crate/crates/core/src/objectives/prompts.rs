//! Student and teacher prompt templates.
//!
//! The student sees only the query. The teacher additionally sees a
//! reference solution: one `Step:` line per subtask naming its tool token,
//! followed by the full gold tool sequence.

use crate::datagen::TaskSample;
use crate::error::{Error, Result};
use crate::vocab::{TokenId, ToolVocabulary};

pub const TEMPLATE_VERSION: &str = "v1";
pub const STUDENT_TEMPLATE: &str = include_str!("../../assets/student_prompt_v1.txt");
pub const TEACHER_TEMPLATE: &str = include_str!("../../assets/teacher_prompt_v1.txt");

pub fn student_prompt_text(query: &str) -> String {
    STUDENT_TEMPLATE.replace("{query}", query)
}

/// Reference-solution block for the teacher prompt.
pub fn reference_solution(sample: &TaskSample, vocab: &ToolVocabulary) -> Result<String> {
    if sample.subtasks.is_empty() {
        return Err(Error::Data(format!(
            "sample {}: teacher prompt needs subtasks",
            sample.id
        )));
    }
    if sample.subtasks.len() != sample.trajectory.len() {
        return Err(Error::Data(format!(
            "sample {}: {} subtasks for {} tools",
            sample.id,
            sample.subtasks.len(),
            sample.trajectory.len()
        )));
    }
    let mut out = String::new();
    for (k, (subtask, &tool)) in sample.subtasks.iter().zip(&sample.trajectory).enumerate() {
        let surface = vocab.render_tools(&[tool])?;
        out.push_str(&format!("Step: {} {} Use tool: {}\n", k + 1, subtask, surface));
    }
    out.push_str("Correct tool sequence:\n");
    out.push_str(&vocab.render_tools(&sample.trajectory)?);
    out.push('\n');
    Ok(out)
}

pub fn teacher_prompt_text(sample: &TaskSample, vocab: &ToolVocabulary) -> Result<String> {
    let reference = reference_solution(sample, vocab)?;
    Ok(TEACHER_TEMPLATE
        .replace("{query}", &sample.query)
        .replace("{reference_solution}", &reference))
}

pub fn build_student_prompt(vocab: &ToolVocabulary, sample: &TaskSample) -> Vec<TokenId> {
    vocab.encode_text(&student_prompt_text(&sample.query))
}

pub fn build_teacher_prompt(vocab: &ToolVocabulary, sample: &TaskSample) -> Result<Vec<TokenId>> {
    Ok(vocab.encode_text(&teacher_prompt_text(sample, vocab)?))
}

/// Fixed template text, for building a base lexicon that covers it.
pub fn template_texts() -> [&'static str; 3] {
    [
        STUDENT_TEMPLATE,
        TEACHER_TEMPLATE,
        "Step: Use tool: Correct tool sequence: 0 1 2 3 4 5 6 7 8 9 10 11 12 13 14 15 16 17 18 19 20",
    ]
}
