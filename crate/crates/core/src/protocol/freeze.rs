use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Bit-exact copy of named parameter sections, taken before a phase in which
/// they must not change.
#[derive(Clone, Debug)]
pub struct FreezeGuard {
    phase: String,
    sections: Vec<(String, Tensor)>,
}

impl FreezeGuard {
    pub fn capture<'a>(
        phase: impl Into<String>,
        sections: impl IntoIterator<Item = (String, &'a Tensor)>,
    ) -> Self {
        Self {
            phase: phase.into(),
            sections: sections.into_iter().map(|(n, t)| (n, t.clone())).collect(),
        }
    }

    pub fn phase(&self) -> &str {
        &self.phase
    }

    pub fn len(&self) -> usize {
        self.sections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }

    /// Errors naming the first section that is missing or not bit-identical.
    pub fn verify<'a>(&self, sections: impl IntoIterator<Item = (String, &'a Tensor)>) -> Result<()> {
        let now: Vec<(String, &Tensor)> = sections.into_iter().collect();
        if now.len() != self.sections.len() {
            return contract(format!(
                "freeze contract violated in {}: {} sections before, {} after",
                self.phase,
                self.sections.len(),
                now.len()
            ));
        }
        for ((name, before), (name_now, after)) in self.sections.iter().zip(&now) {
            if name != name_now || !before.bit_eq(after) {
                return contract(format!(
                    "freeze contract violated in {}: section {name} changed",
                    self.phase
                ));
            }
        }
        Ok(())
    }
}
