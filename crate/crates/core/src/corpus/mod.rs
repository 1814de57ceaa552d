//! Spider-format ingestion, graph skeletons and gold supervision.

mod example;
mod graph;
mod linking;
mod relation;
mod schema;

pub use example::{load_corpus, load_examples, load_schemas, Corpus, Example, RawExample};
pub use graph::{build_static_edges, HeteroGraph};
pub use linking::{exact_match_linking, LinkingMatrix};
pub use relation::Relation;
pub use schema::{Column, ColumnType, DatabaseSchema, PrimaryKey, RawSchema, SchemaItem, Table};
