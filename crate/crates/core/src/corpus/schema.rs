use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::split_identifier;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Text,
    Number,
    Time,
    Boolean,
    Others,
}

impl ColumnType {
    pub fn parse(s: &str) -> Self {
        match s.to_lowercase().as_str() {
            "text" => ColumnType::Text,
            "number" => ColumnType::Number,
            "time" => ColumnType::Time,
            "boolean" => ColumnType::Boolean,
            _ => ColumnType::Others,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ColumnType::Text => "text",
            ColumnType::Number => "number",
            ColumnType::Time => "time",
            ColumnType::Boolean => "boolean",
            ColumnType::Others => "others",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub original: String,
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Column {
    /// `None` only for the wildcard column `*`.
    pub table: Option<usize>,
    pub original: String,
    pub tokens: Vec<String>,
    pub ty: ColumnType,
}

/// A schema item addressed in node order: tables first, then columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchemaItem {
    Table(usize),
    Column(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatabaseSchema {
    pub db_id: String,
    pub tables: Vec<Table>,
    pub columns: Vec<Column>,
    pub primary_keys: BTreeSet<usize>,
    pub foreign_keys: BTreeSet<(usize, usize)>,
}

impl DatabaseSchema {
    pub fn num_tables(&self) -> usize {
        self.tables.len()
    }

    pub fn num_columns(&self) -> usize {
        self.columns.len()
    }

    /// `|S| = |T| + |C|`.
    pub fn num_items(&self) -> usize {
        self.tables.len() + self.columns.len()
    }

    pub fn wildcard(&self) -> Option<usize> {
        self.columns.iter().position(|c| c.table.is_none())
    }

    pub fn table_item(&self, table: usize) -> usize {
        table
    }

    pub fn column_item(&self, column: usize) -> usize {
        self.tables.len() + column
    }

    pub fn item(&self, index: usize) -> SchemaItem {
        if index < self.tables.len() {
            SchemaItem::Table(index)
        } else {
            SchemaItem::Column(index - self.tables.len())
        }
    }

    pub fn is_wildcard_item(&self, index: usize) -> bool {
        matches!(self.item(index), SchemaItem::Column(c) if self.columns[c].table.is_none())
    }

    pub fn item_tokens(&self, index: usize) -> &[String] {
        match self.item(index) {
            SchemaItem::Table(t) => &self.tables[t].tokens,
            SchemaItem::Column(c) => &self.columns[c].tokens,
        }
    }

    /// `table` or `table.column` using original identifiers, lowercased.
    pub fn item_name(&self, index: usize) -> String {
        match self.item(index) {
            SchemaItem::Table(t) => self.tables[t].original.to_lowercase(),
            SchemaItem::Column(c) => self.column_name(c),
        }
    }

    pub fn column_name(&self, c: usize) -> String {
        let col = &self.columns[c];
        match col.table {
            Some(t) => format!("{}.{}", self.tables[t].original.to_lowercase(), col.original.to_lowercase()),
            None => "*".to_string(),
        }
    }

    /// Resolves `table` or `table.column` (case-insensitive) to a schema index.
    pub fn find_item(&self, name: &str) -> Option<usize> {
        let name = name.to_lowercase();
        if let Some(t) = self.find_table(&name) {
            return Some(self.table_item(t));
        }
        (0..self.columns.len()).find(|&c| self.column_name(c) == name).map(|c| self.column_item(c))
    }

    pub fn find_table(&self, name: &str) -> Option<usize> {
        self.tables.iter().position(|t| t.original.eq_ignore_ascii_case(name))
    }

    /// Column of `table` whose original name matches `name`.
    pub fn find_column(&self, table: usize, name: &str) -> Option<usize> {
        self.columns
            .iter()
            .position(|c| c.table == Some(table) && c.original.eq_ignore_ascii_case(name))
    }

    pub fn columns_of(&self, table: usize) -> impl Iterator<Item = usize> + '_ {
        self.columns.iter().enumerate().filter(move |(_, c)| c.table == Some(table)).map(|(i, _)| i)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |message: String| Err(Error::Schema { db_id: self.db_id.clone(), message });
        let wildcards = self.columns.iter().filter(|c| c.table.is_none()).count();
        if wildcards > 1 {
            return err(format!("{wildcards} columns without a table; only `*` may have none"));
        }
        for (i, c) in self.columns.iter().enumerate() {
            match c.table {
                Some(t) if t >= self.tables.len() => {
                    return err(format!("column {i} refers to missing table {t}"));
                }
                None if c.original != "*" => return err(format!("column {i} has no table but is not `*`")),
                _ => {}
            }
        }
        for &pk in &self.primary_keys {
            if pk >= self.columns.len() {
                return err(format!("primary key {pk} out of range"));
            }
        }
        for &(a, b) in &self.foreign_keys {
            if a >= self.columns.len() || b >= self.columns.len() {
                return err(format!("foreign key ({a}, {b}) out of range"));
            }
            if a == b {
                return err(format!("foreign key ({a}, {b}) references itself"));
            }
        }
        Ok(())
    }
}

/// `tables.json` record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RawSchema {
    pub db_id: String,
    pub table_names_original: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table_names: Option<Vec<String>>,
    pub column_names_original: Vec<(i64, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column_names: Option<Vec<(i64, String)>>,
    pub column_types: Vec<String>,
    #[serde(default)]
    pub primary_keys: Vec<PrimaryKey>,
    #[serde(default)]
    pub foreign_keys: Vec<(usize, usize)>,
}

/// Spider lists composite primary keys as nested arrays.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PrimaryKey {
    Single(usize),
    Composite(Vec<usize>),
}

impl RawSchema {
    pub fn into_schema(self) -> Result<DatabaseSchema> {
        let db_id = self.db_id.clone();
        let bad = |message: String| Error::Schema { db_id: db_id.clone(), message };
        if self.column_types.len() != self.column_names_original.len() {
            return Err(bad(format!(
                "{} column types for {} columns",
                self.column_types.len(),
                self.column_names_original.len()
            )));
        }
        let table_words = |i: usize| -> Vec<String> {
            match &self.table_names {
                Some(names) if names.len() == self.table_names_original.len() => split_identifier(&names[i]),
                _ => split_identifier(&self.table_names_original[i]),
            }
        };
        let tables = (0..self.table_names_original.len())
            .map(|i| Table { original: self.table_names_original[i].clone(), tokens: table_words(i) })
            .collect();
        let natural = self.column_names.as_ref().filter(|n| n.len() == self.column_names_original.len());
        let mut columns = Vec::with_capacity(self.column_names_original.len());
        for (i, (t, name)) in self.column_names_original.iter().enumerate() {
            let table = if *t < 0 { None } else { Some(*t as usize) };
            let tokens = if name == "*" {
                vec!["*".to_string()]
            } else {
                split_identifier(natural.map_or(name, |n| &n[i].1))
            };
            columns.push(Column { table, original: name.clone(), tokens, ty: ColumnType::parse(&self.column_types[i]) });
        }
        let primary_keys = self
            .primary_keys
            .iter()
            .flat_map(|pk| match pk {
                PrimaryKey::Single(c) => vec![*c],
                PrimaryKey::Composite(cs) => cs.clone(),
            })
            .collect();
        let schema = DatabaseSchema {
            db_id: self.db_id,
            tables,
            columns,
            primary_keys,
            foreign_keys: self.foreign_keys.into_iter().collect(),
        };
        schema.validate()?;
        Ok(schema)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw() -> RawSchema {
        serde_json::from_str(
            r#"{"db_id":"school","table_names_original":["department","teacher"],
                "column_names_original":[[-1,"*"],[0,"dept_id"],[0,"name"],[1,"teacher_id"],[1,"name"],[1,"dept_id"]],
                "column_types":["text","number","text","number","text","number"],
                "primary_keys":[1,3],"foreign_keys":[[5,1]]}"#,
        )
        .unwrap()
    }

    #[test]
    fn converts_and_indexes_items() {
        let s = raw().into_schema().unwrap();
        assert_eq!(s.num_items(), 2 + 6);
        assert_eq!(s.wildcard(), Some(0));
        assert_eq!(s.item(1), SchemaItem::Table(1));
        assert_eq!(s.item(2), SchemaItem::Column(0));
        assert_eq!(s.item_name(s.column_item(4)), "teacher.name");
        assert_eq!(s.find_item("TEACHER.dept_id"), Some(s.column_item(5)));
        assert_eq!(s.item_tokens(s.column_item(1)), ["dept", "id"]);
    }

    #[test]
    fn rejects_dangling_table_reference() {
        let mut r = raw();
        r.column_names_original[2].0 = 7;
        assert!(matches!(r.into_schema(), Err(Error::Schema { .. })));
    }

    #[test]
    fn rejects_self_foreign_key() {
        let mut r = raw();
        r.foreign_keys.push((2, 2));
        assert!(r.into_schema().is_err());
    }
}
