use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatabaseSchema, RawSchema};
use crate::error::{Error, Result};
use crate::sql::{parse_sql, SqlAst};
use crate::text::tokenize;

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub db_id: String,
    pub question_tokens: Vec<String>,
    pub gold_sql: String,
    pub gold_ast: SqlAst,
    /// `S_SQL`: schema indices (tables first, then columns).
    pub gold_mentions: BTreeSet<usize>,
    /// Hand-annotated `(token, schema index)` links, when the corpus has them.
    pub links: Option<Vec<(usize, usize)>>,
}

/// `examples.json` record. `id` and `links` are optional extensions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawExample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub db_id: String,
    pub question: String,
    pub query: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub links: Option<Vec<(usize, String)>>,
}

impl RawExample {
    pub fn into_example(self, default_id: &str, schema: &DatabaseSchema) -> Result<Example> {
        let question_tokens = tokenize(&self.question);
        if question_tokens.is_empty() {
            return Err(Error::Internal("empty question".into()));
        }
        let parsed = parse_sql(&self.query, schema)?;
        let links = match self.links {
            None => None,
            Some(raw) => {
                let mut out = Vec::with_capacity(raw.len());
                for (tok, name) in raw {
                    if tok >= question_tokens.len() {
                        return Err(Error::Internal(format!("link token {tok} out of range")));
                    }
                    let j = schema.find_item(&name).ok_or_else(|| Error::Lookup(format!("schema item `{name}`")))?;
                    out.push((tok, j));
                }
                Some(out)
            }
        };
        Ok(Example {
            id: self.id.unwrap_or_else(|| default_id.to_string()),
            db_id: self.db_id,
            question_tokens,
            gold_sql: self.query,
            gold_ast: parsed.ast,
            gold_mentions: parsed.mentions,
            links,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub schemas: Vec<DatabaseSchema>,
    pub examples: Vec<Example>,
}

impl Corpus {
    pub fn schema(&self, db_id: &str) -> Option<&DatabaseSchema> {
        self.schemas.iter().find(|s| s.db_id == db_id)
    }

    pub fn schema_of(&self, example: &Example) -> &DatabaseSchema {
        self.schema(&example.db_id).expect("examples are validated against their schemas on load")
    }

    pub fn example(&self, id: &str) -> Result<&Example> {
        self.examples.iter().find(|e| e.id == id).ok_or_else(|| Error::Lookup(format!("example `{id}`")))
    }

    /// Same schemas, different examples.
    pub fn with_examples(&self, examples: Vec<Example>) -> Corpus {
        Corpus { schemas: self.schemas.clone(), examples }
    }
}

fn read_records(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        file: path.display().to_string(),
        record: None,
        message: e.to_string(),
    })
}

pub fn load_schemas(path: &Path) -> Result<Vec<DatabaseSchema>> {
    let file = path.display().to_string();
    let mut out = Vec::new();
    for (k, value) in read_records(path)?.into_iter().enumerate() {
        let raw: RawSchema = serde_json::from_value(value).map_err(|e| Error::Format {
            file: file.clone(),
            record: Some(k),
            message: e.to_string(),
        })?;
        out.push(raw.into_schema()?);
    }
    Ok(out)
}

pub fn load_examples(path: &Path, schemas: &[DatabaseSchema]) -> Result<Vec<Example>> {
    let file = path.display().to_string();
    let stem = path.file_stem().map_or("example".into(), |s| s.to_string_lossy().into_owned());
    let mut out = Vec::new();
    for (k, value) in read_records(path)?.into_iter().enumerate() {
        let format = |message: String| Error::Format { file: file.clone(), record: Some(k), message };
        let raw: RawExample = serde_json::from_value(value).map_err(|e| format(e.to_string()))?;
        let default_id = format!("{stem}-{k}");
        let schema = schemas.iter().find(|s| s.db_id == raw.db_id).ok_or_else(|| Error::Reference {
            example: raw.id.clone().unwrap_or_else(|| default_id.clone()),
            db_id: raw.db_id.clone(),
        })?;
        out.push(raw.into_example(&default_id, schema).map_err(|e| format(e.to_string()))?);
    }
    Ok(out)
}

/// Reads `tables.json` and `examples.json` from `dir`.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let schemas = load_schemas(&dir.join("tables.json"))?;
    let examples = load_examples(&dir.join("examples.json"), &schemas)?;
    Ok(Corpus { schemas, examples })
}
