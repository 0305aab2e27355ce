pub mod cli;
pub mod config;
pub mod dbme;
pub mod dgme;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod neural;
pub mod ode;
pub mod optim;
pub mod simplex;

pub use error::{Error, Result};

// The guide's code blocks run as doctests, one module per chapter.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/oracle.md")]
    mod oracle {}
    #[doc = include_str!("../../../book/src/dgme.md")]
    mod dgme {}
    #[doc = include_str!("../../../book/src/dbme.md")]
    mod dbme {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
