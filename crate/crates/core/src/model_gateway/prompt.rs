//! Prompt envelope shared by callers and offline stubs.
//!
//! A prompt is a free-text instruction followed by a delimited input block.
//! Live models read the whole thing; offline stubs only look at the block.

const BEGIN: &str = "<<<INPUT>>>";
const END: &str = "<<<END INPUT>>>";

pub fn wrap(instruction: &str, payload: &str) -> String {
    format!("{instruction}\n\n{BEGIN}\n{payload}\n{END}")
}

/// The delimited input block of `prompt`, or the whole prompt when it has none.
pub fn payload(prompt: &str) -> &str {
    match (prompt.find(BEGIN), prompt.rfind(END)) {
        (Some(b), Some(e)) if b + BEGIN.len() <= e => {
            let inner = &prompt[b + BEGIN.len()..e];
            let inner = inner.strip_prefix('\n').unwrap_or(inner);
            inner.strip_suffix('\n').unwrap_or(inner)
        }
        _ => prompt,
    }
}
