//! ADL: a declarative language for multi-agent customer-service chatbots.
//!
//! The crate covers the whole pipeline: [`parser`] turns YAML source into a
//! [`model::Program`], [`validate`] and [`analyzer`] check it, and
//! [`runtime`] executes sessions against an LLM [`provider`] and an optional
//! out-of-process [`tools`] host.

pub mod analyzer;
pub mod kb;
pub mod model;
pub mod parser;
pub mod provider;
pub mod runtime;
pub mod tools;
pub mod validate;
pub mod yaml;

pub use model::*;
pub use parser::{check_source, load_program, parse_condition, parse_program, ParseResult};
pub use validate::validate_program;
