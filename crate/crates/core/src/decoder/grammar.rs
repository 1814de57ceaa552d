//! Reduced SQL abstract grammar and depth-first action serialization.

use std::collections::HashMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sql::{Agg, AggColumn, CmpOp, Cond, Direction, GroupBy, OrderBy, Predicate, Query, Select, SqlAst, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NonTerminal {
    Sql,
    Query,
    Select,
    ItemList,
    Item,
    TableList,
    OptWhere,
    Cond,
    Value,
    OptGroup,
    ColList,
    OptHaving,
    OptOrder,
    OptLimit,
}

impl NonTerminal {
    pub const ALL: [NonTerminal; 14] = [
        NonTerminal::Sql,
        NonTerminal::Query,
        NonTerminal::Select,
        NonTerminal::ItemList,
        NonTerminal::Item,
        NonTerminal::TableList,
        NonTerminal::OptWhere,
        NonTerminal::Cond,
        NonTerminal::Value,
        NonTerminal::OptGroup,
        NonTerminal::ColList,
        NonTerminal::OptHaving,
        NonTerminal::OptOrder,
        NonTerminal::OptLimit,
    ];
}

/// Frontier symbol: a non-terminal, or a schema slot filled by a selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Symbol {
    Nt(NonTerminal),
    Column,
    Table,
}

impl Symbol {
    pub const COUNT: usize = NonTerminal::ALL.len() + 2;

    /// Dense id for type embeddings.
    pub fn id(self) -> usize {
        match self {
            Symbol::Nt(nt) => nt as usize,
            Symbol::Column => NonTerminal::ALL.len(),
            Symbol::Table => NonTerminal::ALL.len() + 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Production {
    SqlSingle,
    SqlIntersect,
    SqlUnion,
    SqlExcept,
    Query,
    Select,
    SelectDistinct,
    ItemsLast,
    ItemsMore,
    Item(Agg),
    TablesLast,
    TablesMore,
    NoWhere,
    Where,
    And,
    Or,
    Cmp(CmpOp),
    Between,
    Literal,
    Nested,
    NoGroup,
    Group,
    ColsLast,
    ColsMore,
    NoHaving,
    Having,
    NoOrder,
    Order(Direction),
    NoLimit,
    Limit,
}

impl Production {
    pub fn lhs(self) -> NonTerminal {
        use Production::*;
        match self {
            SqlSingle | SqlIntersect | SqlUnion | SqlExcept => NonTerminal::Sql,
            Query => NonTerminal::Query,
            Select | SelectDistinct => NonTerminal::Select,
            ItemsLast | ItemsMore => NonTerminal::ItemList,
            Item(_) => NonTerminal::Item,
            TablesLast | TablesMore => NonTerminal::TableList,
            NoWhere | Where => NonTerminal::OptWhere,
            And | Or | Cmp(_) | Between => NonTerminal::Cond,
            Literal | Nested => NonTerminal::Value,
            NoGroup | Group => NonTerminal::OptGroup,
            ColsLast | ColsMore => NonTerminal::ColList,
            NoHaving | Having => NonTerminal::OptHaving,
            NoOrder | Order(_) => NonTerminal::OptOrder,
            NoLimit | Limit => NonTerminal::OptLimit,
        }
    }

    pub fn rhs(self) -> Vec<Symbol> {
        use NonTerminal as N;
        use Production::*;
        let nt = Symbol::Nt;
        match self {
            SqlSingle => vec![nt(N::Query)],
            SqlIntersect | SqlUnion | SqlExcept => vec![nt(N::Query), nt(N::Query)],
            Query => vec![nt(N::Select), nt(N::TableList), nt(N::OptWhere), nt(N::OptGroup), nt(N::OptOrder)],
            Select | SelectDistinct => vec![nt(N::ItemList)],
            ItemsLast => vec![nt(N::Item)],
            ItemsMore => vec![nt(N::Item), nt(N::ItemList)],
            Item(_) => vec![Symbol::Column],
            TablesLast => vec![Symbol::Table],
            TablesMore => vec![Symbol::Table, nt(N::TableList)],
            NoWhere | NoGroup | NoHaving | NoOrder | NoLimit | Limit | Literal => vec![],
            Where | Having => vec![nt(N::Cond)],
            And | Or => vec![nt(N::Cond), nt(N::Cond)],
            Cmp(_) => vec![nt(N::Item), nt(N::Value)],
            Between => vec![nt(N::Item), nt(N::Value), nt(N::Value)],
            Nested => vec![nt(N::Query)],
            Group => vec![nt(N::ColList), nt(N::OptHaving)],
            ColsLast => vec![Symbol::Column],
            ColsMore => vec![Symbol::Column, nt(N::ColList)],
            Order(_) => vec![nt(N::ItemList), nt(N::OptLimit)],
        }
    }
}

/// The closed rule set with stable ids.
pub struct SqlGrammar {
    rules: Vec<Production>,
    ids: HashMap<Production, usize>,
    by_lhs: HashMap<NonTerminal, Vec<usize>>,
}

impl SqlGrammar {
    fn build() -> Self {
        use Production::*;
        let mut rules = vec![SqlSingle, SqlIntersect, SqlUnion, SqlExcept, Query, Select, SelectDistinct, ItemsLast, ItemsMore];
        rules.extend(Agg::ALL.map(Item));
        rules.extend([TablesLast, TablesMore, NoWhere, Where, And, Or]);
        rules.extend(CmpOp::ALL.map(Cmp));
        rules.extend([Between, Literal, Nested, NoGroup, Group, ColsLast, ColsMore, NoHaving, Having, NoOrder]);
        rules.extend([Order(Direction::Asc), Order(Direction::Desc), NoLimit, Limit]);
        let ids = rules.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        let mut by_lhs: HashMap<NonTerminal, Vec<usize>> = HashMap::new();
        for (i, p) in rules.iter().enumerate() {
            by_lhs.entry(p.lhs()).or_default().push(i);
        }
        SqlGrammar { rules, ids, by_lhs }
    }

    pub fn get() -> &'static SqlGrammar {
        static G: OnceLock<SqlGrammar> = OnceLock::new();
        G.get_or_init(SqlGrammar::build)
    }

    pub fn num_rules(&self) -> usize {
        self.rules.len()
    }

    pub fn rule(&self, id: usize) -> Production {
        self.rules[id]
    }

    pub fn id(&self, p: Production) -> usize {
        self.ids[&p]
    }

    /// Rule ids whose left-hand side is `nt`.
    pub fn rules_for(&self, nt: NonTerminal) -> &[usize] {
        &self.by_lhs[&nt]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    ApplyRule(usize),
    SelectTable(usize),
    SelectColumn(usize),
}

/// Open symbols awaiting expansion, with the step index that created each.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frontier {
    stack: Vec<(Symbol, Option<usize>)>,
}

impl Default for Frontier {
    fn default() -> Self {
        Frontier { stack: vec![(Symbol::Nt(NonTerminal::Sql), None)] }
    }
}

impl Frontier {
    pub fn is_done(&self) -> bool {
        self.stack.is_empty()
    }

    /// Next symbol to expand and its parent step.
    pub fn peek(&self) -> Option<(Symbol, Option<usize>)> {
        self.stack.last().copied()
    }

    /// Whether `action` may be taken at the current frontier.
    pub fn is_legal(&self, action: Action) -> bool {
        match (self.peek(), action) {
            (Some((Symbol::Nt(nt), _)), Action::ApplyRule(r)) => {
                r < SqlGrammar::get().num_rules() && SqlGrammar::get().rule(r).lhs() == nt
            }
            (Some((Symbol::Table, _)), Action::SelectTable(_)) => true,
            (Some((Symbol::Column, _)), Action::SelectColumn(_)) => true,
            _ => false,
        }
    }

    /// Consumes the top symbol with `action`, taken at decoding step `step`.
    pub fn apply(&mut self, action: Action, step: usize) -> Result<()> {
        if !self.is_legal(action) {
            return Err(Error::grammar(format!("illegal action {action:?} for frontier {:?}", self.peek()), 0..0));
        }
        self.stack.pop();
        if let Action::ApplyRule(r) = action {
            for sym in SqlGrammar::get().rule(r).rhs().into_iter().rev() {
                self.stack.push((sym, Some(step)));
            }
        }
        Ok(())
    }
}

struct Emitter {
    out: Vec<Action>,
}

impl Emitter {
    fn rule(&mut self, p: Production) {
        self.out.push(Action::ApplyRule(SqlGrammar::get().id(p)));
    }

    fn query(&mut self, q: &Query) -> Result<()> {
        self.rule(Production::Query);
        self.rule(if q.select.distinct { Production::SelectDistinct } else { Production::Select });
        self.items(&q.select.items)?;
        if q.from.is_empty() {
            return Err(Error::grammar("query without tables", 0..0));
        }
        for (k, &t) in q.from.iter().enumerate() {
            self.rule(if k + 1 == q.from.len() { Production::TablesLast } else { Production::TablesMore });
            self.out.push(Action::SelectTable(t));
        }
        match &q.filter {
            None => self.rule(Production::NoWhere),
            Some(c) => {
                self.rule(Production::Where);
                self.cond(c)?;
            }
        }
        match &q.group_by {
            None => self.rule(Production::NoGroup),
            Some(g) => {
                self.rule(Production::Group);
                if g.columns.is_empty() {
                    return Err(Error::grammar("GROUP BY without columns", 0..0));
                }
                for (k, &c) in g.columns.iter().enumerate() {
                    self.rule(if k + 1 == g.columns.len() { Production::ColsLast } else { Production::ColsMore });
                    self.out.push(Action::SelectColumn(c));
                }
                match &g.having {
                    None => self.rule(Production::NoHaving),
                    Some(h) => {
                        self.rule(Production::Having);
                        self.cond(h)?;
                    }
                }
            }
        }
        match &q.order_by {
            None => self.rule(Production::NoOrder),
            Some(o) => {
                self.rule(Production::Order(o.direction));
                self.items(&o.items)?;
                self.rule(if o.limit { Production::Limit } else { Production::NoLimit });
            }
        }
        Ok(())
    }

    fn items(&mut self, items: &[AggColumn]) -> Result<()> {
        if items.is_empty() {
            return Err(Error::grammar("empty item list", 0..0));
        }
        for (k, item) in items.iter().enumerate() {
            self.rule(if k + 1 == items.len() { Production::ItemsLast } else { Production::ItemsMore });
            self.item(item);
        }
        Ok(())
    }

    fn item(&mut self, item: &AggColumn) {
        self.rule(Production::Item(item.agg));
        self.out.push(Action::SelectColumn(item.column));
    }

    fn cond(&mut self, c: &Cond) -> Result<()> {
        match c {
            Cond::And(a, b) | Cond::Or(a, b) => {
                self.rule(if matches!(c, Cond::And(..)) { Production::And } else { Production::Or });
                self.cond(a)?;
                self.cond(b)
            }
            Cond::Pred(Predicate::Cmp(op, lhs, v)) => {
                self.rule(Production::Cmp(*op));
                self.item(lhs);
                self.value(v)
            }
            Cond::Pred(Predicate::Between(lhs, lo, hi)) => {
                self.rule(Production::Between);
                self.item(lhs);
                self.value(lo)?;
                self.value(hi)
            }
        }
    }

    fn value(&mut self, v: &Value) -> Result<()> {
        match v {
            Value::Literal => {
                self.rule(Production::Literal);
                Ok(())
            }
            Value::Nested(q) => {
                self.rule(Production::Nested);
                self.query(q)
            }
        }
    }
}

/// Depth-first serialization of `ast`.
pub fn ast_to_actions(ast: &SqlAst) -> Result<Vec<Action>> {
    let mut e = Emitter { out: Vec::new() };
    match ast {
        SqlAst::Single(q) => {
            e.rule(Production::SqlSingle);
            e.query(q)?;
        }
        SqlAst::Intersect(a, b) | SqlAst::Union(a, b) | SqlAst::Except(a, b) => {
            e.rule(match ast {
                SqlAst::Intersect(..) => Production::SqlIntersect,
                SqlAst::Union(..) => Production::SqlUnion,
                _ => Production::SqlExcept,
            });
            e.query(a)?;
            e.query(b)?;
        }
    }
    Ok(e.out)
}

struct Reader<'a> {
    actions: &'a [Action],
    pos: usize,
}

impl Reader<'_> {
    fn next(&mut self) -> Result<Action> {
        let a = self.actions.get(self.pos).copied().ok_or_else(|| Error::grammar("action sequence ended early", self.pos..self.pos))?;
        self.pos += 1;
        Ok(a)
    }

    fn rule(&mut self, nt: NonTerminal) -> Result<Production> {
        let at = self.pos;
        match self.next()? {
            Action::ApplyRule(r) if r < SqlGrammar::get().num_rules() && SqlGrammar::get().rule(r).lhs() == nt => {
                Ok(SqlGrammar::get().rule(r))
            }
            other => Err(Error::grammar(format!("expected a {nt:?} rule, found {other:?}"), at..at + 1)),
        }
    }

    fn column(&mut self) -> Result<usize> {
        let at = self.pos;
        match self.next()? {
            Action::SelectColumn(c) => Ok(c),
            other => Err(Error::grammar(format!("expected a column, found {other:?}"), at..at + 1)),
        }
    }

    fn table(&mut self) -> Result<usize> {
        let at = self.pos;
        match self.next()? {
            Action::SelectTable(t) => Ok(t),
            other => Err(Error::grammar(format!("expected a table, found {other:?}"), at..at + 1)),
        }
    }

    fn query(&mut self) -> Result<Query> {
        self.rule(NonTerminal::Query)?;
        let distinct = self.rule(NonTerminal::Select)? == Production::SelectDistinct;
        let items = self.items()?;
        let mut from = Vec::new();
        loop {
            let more = self.rule(NonTerminal::TableList)? == Production::TablesMore;
            from.push(self.table()?);
            if !more {
                break;
            }
        }
        let filter = match self.rule(NonTerminal::OptWhere)? {
            Production::Where => Some(self.cond()?),
            _ => None,
        };
        let group_by = match self.rule(NonTerminal::OptGroup)? {
            Production::Group => {
                let mut columns = Vec::new();
                loop {
                    let more = self.rule(NonTerminal::ColList)? == Production::ColsMore;
                    columns.push(self.column()?);
                    if !more {
                        break;
                    }
                }
                let having = match self.rule(NonTerminal::OptHaving)? {
                    Production::Having => Some(self.cond()?),
                    _ => None,
                };
                Some(GroupBy { columns, having })
            }
            _ => None,
        };
        let order_by = match self.rule(NonTerminal::OptOrder)? {
            Production::Order(direction) => {
                let items = self.items()?;
                let limit = self.rule(NonTerminal::OptLimit)? == Production::Limit;
                Some(OrderBy { direction, items, limit })
            }
            _ => None,
        };
        Ok(Query { select: Select { distinct, items }, from, filter, group_by, order_by })
    }

    fn items(&mut self) -> Result<Vec<AggColumn>> {
        let mut items = Vec::new();
        loop {
            let more = self.rule(NonTerminal::ItemList)? == Production::ItemsMore;
            items.push(self.item()?);
            if !more {
                return Ok(items);
            }
        }
    }

    fn item(&mut self) -> Result<AggColumn> {
        let Production::Item(agg) = self.rule(NonTerminal::Item)? else { unreachable!("Item rules carry an aggregator") };
        Ok(AggColumn { agg, column: self.column()? })
    }

    fn cond(&mut self) -> Result<Cond> {
        Ok(match self.rule(NonTerminal::Cond)? {
            Production::And => Cond::and(self.cond()?, self.cond()?),
            Production::Or => Cond::or(self.cond()?, self.cond()?),
            Production::Cmp(op) => {
                let lhs = self.item()?;
                Cond::Pred(Predicate::Cmp(op, lhs, self.value()?))
            }
            Production::Between => {
                let lhs = self.item()?;
                let lo = self.value()?;
                Cond::Pred(Predicate::Between(lhs, lo, self.value()?))
            }
            p => unreachable!("{p:?} is not a Cond rule"),
        })
    }

    fn value(&mut self) -> Result<Value> {
        Ok(match self.rule(NonTerminal::Value)? {
            Production::Nested => Value::Nested(Box::new(self.query()?)),
            _ => Value::Literal,
        })
    }
}

/// Inverse of [`ast_to_actions`].
pub fn actions_to_ast(actions: &[Action]) -> Result<SqlAst> {
    let mut r = Reader { actions, pos: 0 };
    let ast = match r.rule(NonTerminal::Sql)? {
        Production::SqlSingle => SqlAst::Single(r.query()?),
        Production::SqlIntersect => SqlAst::Intersect(r.query()?, r.query()?),
        Production::SqlUnion => SqlAst::Union(r.query()?, r.query()?),
        _ => SqlAst::Except(r.query()?, r.query()?),
    };
    if r.pos != actions.len() {
        return Err(Error::grammar("trailing actions after a complete tree", r.pos..actions.len()));
    }
    Ok(ast)
}
