use std::path::Path;

/// Replayable host activity signal: a list of `(offset_ms, active)`
/// transitions relative to the start of a run. Before the first entry the
/// host counts as active.
///
/// Text form, one transition per line: `<offset_ms> active|idle`. Blank
/// lines and lines starting with `#` are ignored.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ActivityTrace {
    transitions: Vec<(i64, bool)>,
}

impl ActivityTrace {
    pub fn new(mut transitions: Vec<(i64, bool)>) -> Self {
        transitions.sort_by_key(|(t, _)| *t);
        ActivityTrace { transitions }
    }

    pub fn always(active: bool) -> Self {
        ActivityTrace::new(vec![(0, active)])
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(t), Some(state), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(format!(
                    "line {}: expected `<offset_ms> active|idle`",
                    n + 1
                ));
            };
            let t: i64 = t
                .parse()
                .map_err(|_| format!("line {}: bad offset `{t}`", n + 1))?;
            let active = match state {
                "active" => true,
                "idle" => false,
                other => return Err(format!("line {}: unknown state `{other}`", n + 1)),
            };
            out.push((t, active));
        }
        Ok(ActivityTrace::new(out))
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        ActivityTrace::parse(&text)
    }

    pub fn is_active(&self, offset_ms: i64) -> bool {
        self.transitions
            .iter()
            .take_while(|(t, _)| *t <= offset_ms)
            .last()
            .is_none_or(|(_, a)| *a)
    }

    /// First transition strictly after `offset_ms`.
    pub fn next_transition(&self, offset_ms: i64) -> Option<i64> {
        self.transitions
            .iter()
            .map(|(t, _)| *t)
            .find(|t| *t > offset_ms)
    }
}
