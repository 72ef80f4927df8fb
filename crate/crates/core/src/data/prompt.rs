use serde::{Deserialize, Serialize};

use super::types::{DemoLibrary, IclSequence};
use crate::error::Result;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstPosition {
    #[default]
    Beginning,
    /// After the ICDs, before the query.
    Middle,
    /// After the query block.
    End,
}

/// Render a sequence as prompt text. The query's response is never rendered.
pub fn assemble_prompt(seq: &IclSequence, library: &DemoLibrary, pos: InstPosition) -> Result<String> {
    let icds = seq.icds(library)?;
    let mut out = String::new();
    let inst = |out: &mut String| {
        out.push_str(&seq.instruction);
        out.push('\n');
    };
    if pos == InstPosition::Beginning {
        inst(&mut out);
    }
    for d in icds {
        out.push_str("Query: ");
        out.push_str(&d.text_q);
        out.push_str("\nResponse: ");
        out.push_str(&d.text_r);
        out.push('\n');
    }
    if pos == InstPosition::Middle {
        inst(&mut out);
    }
    out.push_str("Query: ");
    out.push_str(&seq.query.text_q);
    out.push_str("\nResponse:");
    if pos == InstPosition::End {
        out.push('\n');
        out.push_str(&seq.instruction);
    }
    Ok(out)
}
