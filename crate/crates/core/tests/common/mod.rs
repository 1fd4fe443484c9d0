//! Checks shared by the test targets. Each check returns a one-line detail on
//! success and a diagnostic on failure so that both ordinary tests and the
//! acceptance report can use it.
#![allow(dead_code)]

pub mod cli;
pub mod gradients;
pub mod oracles;
pub mod synthetic;

pub type Check = Result<String, String>;

/// Fails with `msg` unless `cond` holds.
pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}
