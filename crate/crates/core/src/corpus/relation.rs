use serde::{Deserialize, Serialize};

/// Edge types of the joint question/schema graph. Discriminants are the
/// stable integer ids used in edge matrices and embedding tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Relation {
    QuestionForward = 0,
    QuestionBackward = 1,
    QuestionSelf = 2,
    ColumnOfTable = 3,
    TableOfColumn = 4,
    SameTableColumn = 5,
    PrimaryKeyOf = 6,
    ForeignKeyForward = 7,
    ForeignKeyBackward = 8,
    SchemaSelf = 9,
    Semantic = 10,
    NoLink = 11,
    /// Non-adjacent question token pair.
    QuestionOther = 12,
    /// Schema pair with no metadata relation.
    SchemaOther = 13,
}

impl Relation {
    pub const COUNT: usize = 14;

    pub const ALL: [Relation; Relation::COUNT] = [
        Relation::QuestionForward,
        Relation::QuestionBackward,
        Relation::QuestionSelf,
        Relation::ColumnOfTable,
        Relation::TableOfColumn,
        Relation::SameTableColumn,
        Relation::PrimaryKeyOf,
        Relation::ForeignKeyForward,
        Relation::ForeignKeyBackward,
        Relation::SchemaSelf,
        Relation::Semantic,
        Relation::NoLink,
        Relation::QuestionOther,
        Relation::SchemaOther,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Relation> {
        Relation::ALL.get(id).copied()
    }

    pub fn is_question_schema(self) -> bool {
        matches!(self, Relation::Semantic | Relation::NoLink)
    }
}
