//! Reference solution scripts with rule tags.
//!
//! Each line of a catalog script may carry a trailing tag comment:
//! `# needs: knife, hands_free` keeps the line only when all listed rules are
//! known, `# unless: toaster` drops it once the rule is known. Dropping an
//! `if` line drops its indented block as well. The script with every rule
//! known is the expert solution.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptLine {
    pub code: String,
    pub indented: bool,
    pub needs: Vec<String>,
    pub unless: Vec<String>,
}

impl ScriptLine {
    pub fn is_conditional(&self) -> bool {
        self.code.trim_start().starts_with("if ")
    }

    fn keep(&self, known: &BTreeSet<String>) -> bool {
        self.needs.iter().all(|r| known.contains(r)) && !self.unless.iter().any(|r| known.contains(r))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ReferenceScript {
    source: String,
    lines: Vec<ScriptLine>,
}

impl ReferenceScript {
    pub fn parse(source: &str) -> Result<Self, String> {
        let mut lines = Vec::new();
        for (no, raw) in source.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let (code, tags) = match raw.find('#') {
                Some(i) => (&raw[..i], Some(&raw[i + 1..])),
                None => (raw, None),
            };
            let code_trim = code.trim_end();
            if code_trim.trim().is_empty() {
                continue;
            }
            let mut line = ScriptLine {
                code: code_trim.trim_start().to_string(),
                indented: code_trim.starts_with(char::is_whitespace),
                needs: Vec::new(),
                unless: Vec::new(),
            };
            if let Some(tags) = tags {
                for part in tags.split(';') {
                    let part = part.trim();
                    if part.is_empty() {
                        continue;
                    }
                    let (key, list) =
                        part.split_once(':').ok_or_else(|| format!("line {}: malformed tag {part:?}", no + 1))?;
                    let items = list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty());
                    match key.trim() {
                        "needs" => line.needs.extend(items),
                        "unless" => line.unless.extend(items),
                        other => return Err(format!("line {}: unknown tag {other:?}", no + 1)),
                    }
                }
            }
            lines.push(line);
        }
        Ok(Self { source: source.to_string(), lines })
    }

    pub fn lines(&self) -> &[ScriptLine] {
        &self.lines
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Every rule id mentioned in a tag.
    pub fn rules(&self) -> BTreeSet<String> {
        self.lines.iter().flat_map(|l| l.needs.iter().chain(l.unless.iter()).cloned()).collect()
    }

    /// Program text an agent that knows exactly `known` would write.
    pub fn render(&self, known: &BTreeSet<String>) -> String {
        let mut out = String::new();
        let mut skipping_block = false;
        for l in &self.lines {
            if l.indented && skipping_block {
                continue;
            }
            if !l.indented {
                skipping_block = false;
            }
            if !l.keep(known) {
                if l.is_conditional() {
                    skipping_block = true;
                }
                continue;
            }
            if l.indented {
                out.push_str("    ");
            }
            out.push_str(&l.code);
            out.push('\n');
        }
        out
    }

    /// The solution with every rule known.
    pub fn expert(&self) -> String {
        self.render(&self.rules())
    }
}

impl TryFrom<String> for ReferenceScript {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        ReferenceScript::parse(&s)
    }
}

impl From<ReferenceScript> for String {
    fn from(r: ReferenceScript) -> String {
        r.source
    }
}
