//! Reduced SQL dialect: syntax tree, parser and renderer.

pub mod ast;
mod parse;
mod render;

use std::collections::BTreeSet;

pub use ast::*;
pub use parse::{parse_sql, ParsedSql};
pub use render::render_sql;

use crate::corpus::DatabaseSchema;
use crate::error::Result;

/// Schema items (tables then columns) named anywhere in `gold_sql`.
pub fn extract_gold_mentions(gold_sql: &str, schema: &DatabaseSchema) -> Result<BTreeSet<usize>> {
    Ok(parse_sql(gold_sql, schema)?.mentions)
}
