use super::{DatabaseSchema, Example, Relation, SchemaItem};

/// Node list `question ∪ tables ∪ columns` with a dense typed edge matrix.
/// The question/schema block starts as [`Relation::NoLink`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeteroGraph {
    pub num_question: usize,
    pub num_tables: usize,
    pub num_columns: usize,
    edges: Vec<Relation>,
}

impl HeteroGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_question + self.num_tables + self.num_columns
    }

    pub fn num_schema(&self) -> usize {
        self.num_tables + self.num_columns
    }

    /// Node index of schema item `j`.
    pub fn schema_node(&self, j: usize) -> usize {
        self.num_question + j
    }

    pub fn edge(&self, i: usize, j: usize) -> Relation {
        self.edges[i * self.num_nodes() + j]
    }

    pub fn set_edge(&mut self, i: usize, j: usize, r: Relation) {
        let n = self.num_nodes();
        self.edges[i * n + j] = r;
    }

    pub fn is_question_schema(&self, i: usize, j: usize) -> bool {
        (i < self.num_question) != (j < self.num_question)
    }

    /// Relation ids in row-major order.
    pub fn type_ids(&self) -> Vec<usize> {
        self.edges.iter().map(|r| r.id()).collect()
    }

    pub fn count(&self, r: Relation) -> usize {
        self.edges.iter().filter(|&&e| e == r).count()
    }
}

pub fn build_static_edges(example: &Example, schema: &DatabaseSchema) -> HeteroGraph {
    let q = example.question_tokens.len();
    let mut g = HeteroGraph {
        num_question: q,
        num_tables: schema.num_tables(),
        num_columns: schema.num_columns(),
        edges: Vec::new(),
    };
    let n = g.num_nodes();
    g.edges = vec![Relation::NoLink; n * n];

    for i in 0..q {
        for j in 0..q {
            let r = if i == j {
                Relation::QuestionSelf
            } else if j == i + 1 {
                Relation::QuestionForward
            } else if i == j + 1 {
                Relation::QuestionBackward
            } else {
                Relation::QuestionOther
            };
            g.set_edge(i, j, r);
        }
    }

    let s = schema.num_items();
    for a in 0..s {
        for b in 0..s {
            let r = if a == b { Relation::SchemaSelf } else { schema_relation(schema, a, b) };
            g.set_edge(g.schema_node(a), g.schema_node(b), r);
        }
    }
    g
}

fn schema_relation(schema: &DatabaseSchema, a: usize, b: usize) -> Relation {
    match (schema.item(a), schema.item(b)) {
        (SchemaItem::Column(c), SchemaItem::Table(t)) if schema.columns[c].table == Some(t) => {
            if schema.primary_keys.contains(&c) {
                Relation::PrimaryKeyOf
            } else {
                Relation::ColumnOfTable
            }
        }
        (SchemaItem::Table(t), SchemaItem::Column(c)) if schema.columns[c].table == Some(t) => Relation::TableOfColumn,
        (SchemaItem::Column(x), SchemaItem::Column(y)) => {
            if schema.foreign_keys.contains(&(x, y)) {
                Relation::ForeignKeyForward
            } else if schema.foreign_keys.contains(&(y, x)) {
                Relation::ForeignKeyBackward
            } else if schema.columns[x].table.is_some() && schema.columns[x].table == schema.columns[y].table {
                Relation::SameTableColumn
            } else {
                Relation::SchemaOther
            }
        }
        _ => Relation::SchemaOther,
    }
}
