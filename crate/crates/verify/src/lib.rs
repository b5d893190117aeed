//! Reference oracles and acceptance suites for `mms-core`.
//!
//! [`oracles`] evaluates every objective and the Dice score with plain scalar loops;
//! [`suites`] runs the nine acceptance checks against the library and returns one
//! [`CriterionOutcome`] each.

pub mod gradcheck;
pub mod oracles;
pub mod suites;

use std::fmt;
use std::time::Duration;

#[derive(Clone, Debug, PartialEq)]
pub struct CriterionOutcome {
    pub id: u32,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for CriterionOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "criterion {} [{}] {}: {} ({:.1}s)",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}
