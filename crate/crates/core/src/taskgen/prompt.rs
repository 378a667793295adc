//! Prompt templates.

use crate::error::{Error, Result};

use super::TaskKind;

/// Basic system prompt, attached when a conversation is serialised.
pub const SYSTEM_PROMPT: &str = "A conversation between User and Assistant. The user asks a \
question, and the Assistant solves it. The assistant first thinks about the reasoning process in \
the mind and then provides the user with the answer. The reasoning process and answer are \
enclosed within <reasoning> </reasoning> and <answer> </answer> tags, respectively, i.e., \
<reasoning> reasoning process here </reasoning><answer> answer here </answer>";

/// Long-form alternative system prompt with per-task instructions.
pub const DETAILED_SYSTEM_PROMPT: &str = "You are an expert to analyze the image and provide \
useful information for users. Imitate a chain of thought reasoning process like a human brain \
with as detail as possible. Use expressions like oh wait, let me think etc. Then reach to the \
conclusion and provide an answer. If question starts with VQA with brackets, final answer needs \
be one word only as yes or no, rural or urban etc. If question stars with CLS, you need to answer \
with one of the given classes, nothing else. If question starts with VG then mentions an object, \
you need to locate the object on the image and give the output [[x_min, y_min, x_max, y_max]], \
nothing else. Keep the values between 0 and 1000. If none of the abbreviations with brackets are \
given at the beginning, you will answer the question with one or two sentences. The reasoning \
process and answer are enclosed within <reasoning> </reasoning> and <answer> </answer> tags, \
respectively, i.e., <reasoning>...your reasoning here...</reasoning> <answer>...your answer \
here...</answer>";

/// Closed-ended (CLS/VQA) suffix asking for reasoning first.
pub const QA_SUFFIX: &str =
    "Make your chain of thought reasoning and then answer the question using a single word or phrase.";
/// Grounding suffix asking for reasoning first.
pub const VG_SUFFIX: &str = "Make your chain of thought reasoning and then output the bounding box of the following object in the image.";

/// Plain closed-ended suffix that invites a bare one-word reply.
pub const QA_SUFFIX_PLAIN: &str = "Answer the question using a single word or phrase.";
pub const VG_SUFFIX_PLAIN: &str = "Output the bounding box of the following object in the image.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    /// Asks for reasoning before the answer; used for RL and evaluation.
    Reasoning,
    /// The unmodified phrasing that elicits bare answers.
    Plain,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemPrompt {
    #[default]
    Basic,
    Detailed,
}

impl SystemPrompt {
    pub fn text(self) -> &'static str {
        match self {
            SystemPrompt::Basic => SYSTEM_PROMPT,
            SystemPrompt::Detailed => DETAILED_SYSTEM_PROMPT,
        }
    }
}

pub fn suffix(kind: TaskKind, style: PromptStyle) -> &'static str {
    match (kind, style) {
        (TaskKind::Vg, PromptStyle::Reasoning) => VG_SUFFIX,
        (TaskKind::Vg, PromptStyle::Plain) => VG_SUFFIX_PLAIN,
        (_, PromptStyle::Reasoning) => QA_SUFFIX,
        (_, PromptStyle::Plain) => QA_SUFFIX_PLAIN,
    }
}

/// User prompt: the question core followed by the kind's reasoning suffix.
pub fn make_prompt(kind: TaskKind, core: &str) -> Result<String> {
    make_prompt_styled(kind, core, PromptStyle::Reasoning)
}

pub fn make_prompt_styled(kind: TaskKind, core: &str, style: PromptStyle) -> Result<String> {
    let core = core.trim();
    if core.is_empty() {
        return Err(Error::contract("question core must not be empty"));
    }
    Ok(format!("{core} {}", suffix(kind, style)))
}

/// Full conversation text with the system prompt attached.
pub fn render_conversation(system: SystemPrompt, prompt_text: &str) -> String {
    format!("System: {}\nUser: {prompt_text}\nAssistant:", system.text())
}
