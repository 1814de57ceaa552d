//! Abstract syntax of the reduced SQL dialect.
//!
//! Column references are global column indices into
//! [`DatabaseSchema::columns`](crate::corpus::DatabaseSchema) (so `*` is the
//! wildcard column), tables are table indices. Literal values are not part of
//! the tree.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SqlAst {
    Single(Query),
    Intersect(Query, Query),
    Union(Query, Query),
    Except(Query, Query),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Query {
    pub select: Select,
    pub from: Vec<usize>,
    pub filter: Option<Cond>,
    pub group_by: Option<GroupBy>,
    pub order_by: Option<OrderBy>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Select {
    pub distinct: bool,
    pub items: Vec<AggColumn>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Agg {
    None,
    Max,
    Min,
    Count,
    Sum,
    Avg,
    CountDistinct,
}

impl Agg {
    pub const ALL: [Agg; 7] = [Agg::None, Agg::Max, Agg::Min, Agg::Count, Agg::Sum, Agg::Avg, Agg::CountDistinct];

    pub fn keyword(self) -> Option<&'static str> {
        match self {
            Agg::None => None,
            Agg::Max => Some("MAX"),
            Agg::Min => Some("MIN"),
            Agg::Count | Agg::CountDistinct => Some("COUNT"),
            Agg::Sum => Some("SUM"),
            Agg::Avg => Some("AVG"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AggColumn {
    pub agg: Agg,
    pub column: usize,
}

impl AggColumn {
    pub fn plain(column: usize) -> Self {
        AggColumn { agg: Agg::None, column }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cond {
    And(Box<Cond>, Box<Cond>),
    Or(Box<Cond>, Box<Cond>),
    Pred(Predicate),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Gt,
    Le,
    Ge,
    Like,
    NotLike,
    In,
    NotIn,
}

impl CmpOp {
    pub const ALL: [CmpOp; 10] = [
        CmpOp::Eq,
        CmpOp::Ne,
        CmpOp::Lt,
        CmpOp::Gt,
        CmpOp::Le,
        CmpOp::Ge,
        CmpOp::Like,
        CmpOp::NotLike,
        CmpOp::In,
        CmpOp::NotIn,
    ];

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Gt => ">",
            CmpOp::Le => "<=",
            CmpOp::Ge => ">=",
            CmpOp::Like => "LIKE",
            CmpOp::NotLike => "NOT LIKE",
            CmpOp::In => "IN",
            CmpOp::NotIn => "NOT IN",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Predicate {
    Cmp(CmpOp, AggColumn, Value),
    Between(AggColumn, Value, Value),
}

impl Predicate {
    pub fn lhs(&self) -> AggColumn {
        match self {
            Predicate::Cmp(_, c, _) | Predicate::Between(c, _, _) => *c,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Value {
    Literal,
    Nested(Box<Query>),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupBy {
    pub columns: Vec<usize>,
    pub having: Option<Cond>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Asc,
    Desc,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OrderBy {
    pub direction: Direction,
    pub items: Vec<AggColumn>,
    pub limit: bool,
}

impl SqlAst {
    pub fn queries(&self) -> Vec<&Query> {
        match self {
            SqlAst::Single(q) => vec![q],
            SqlAst::Intersect(a, b) | SqlAst::Union(a, b) | SqlAst::Except(a, b) => vec![a, b],
        }
    }
}

impl Cond {
    pub fn and(a: Cond, b: Cond) -> Cond {
        Cond::And(Box::new(a), Box::new(b))
    }

    pub fn or(a: Cond, b: Cond) -> Cond {
        Cond::Or(Box::new(a), Box::new(b))
    }

    /// Predicates in left-to-right order.
    pub fn predicates(&self) -> Vec<&Predicate> {
        let mut out = Vec::new();
        fn walk<'a>(c: &'a Cond, out: &mut Vec<&'a Predicate>) {
            match c {
                Cond::And(a, b) | Cond::Or(a, b) => {
                    walk(a, out);
                    walk(b, out);
                }
                Cond::Pred(p) => out.push(p),
            }
        }
        walk(self, &mut out);
        out
    }
}
