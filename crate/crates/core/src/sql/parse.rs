//! Recursive-descent parser for the reduced SQL dialect.
//!
//! Identifiers are resolved against a [`DatabaseSchema`]; the parser also
//! records every schema item that appears syntactically in the query,
//! including join conditions that the tree itself does not keep.

use std::collections::BTreeSet;
use std::ops::Range;

use crate::corpus::DatabaseSchema;
use crate::error::{Error, Result};
use crate::sql::ast::*;

#[derive(Clone, Debug, PartialEq)]
enum Kind {
    Ident(String),
    Number,
    Str,
    Sym(&'static str),
}

#[derive(Clone, Debug)]
struct Tok {
    kind: Kind,
    span: Range<usize>,
}

const SYMBOLS: [&str; 12] = ["<>", "!=", "<=", ">=", "(", ")", ",", "=", "<", ">", "*", ";"];

const KEYWORDS: [&str; 27] = [
    "select", "from", "where", "group", "by", "having", "order", "limit", "asc", "desc", "distinct", "join", "on",
    "as", "and", "or", "not", "in", "like", "between", "intersect", "union", "except", "max", "min", "count", "sum",
];

fn lex(sql: &str) -> Result<Vec<Tok>> {
    let bytes = sql.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c == '\'' || c == '"' {
            i += 1;
            while i < bytes.len() && bytes[i] as char != c {
                i += 1;
            }
            if i >= bytes.len() {
                return Err(Error::grammar("unterminated string literal", start..bytes.len()));
            }
            i += 1;
            out.push(Tok { kind: Kind::Str, span: start..i });
            continue;
        }
        let negative_number = c == '-' && bytes.get(i + 1).is_some_and(|b| b.is_ascii_digit());
        if c.is_ascii_digit() || negative_number {
            i += 1;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            out.push(Tok { kind: Kind::Number, span: start..i });
            continue;
        }
        if c.is_alphabetic() || c == '_' {
            while i < bytes.len() && ((bytes[i] as char).is_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'.') {
                i += 1;
            }
            out.push(Tok { kind: Kind::Ident(sql[start..i].to_lowercase()), span: start..i });
            continue;
        }
        match SYMBOLS.iter().find(|s| sql[i..].starts_with(**s)) {
            Some(s) => {
                i += s.len();
                out.push(Tok { kind: Kind::Sym(s), span: start..i });
            }
            None => return Err(Error::grammar(format!("unexpected character `{c}`"), start..start + c.len_utf8())),
        }
    }
    Ok(out)
}

/// Result of parsing one SQL string.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedSql {
    pub ast: SqlAst,
    /// Schema indices (tables then columns) appearing anywhere in the text.
    pub mentions: BTreeSet<usize>,
}

pub fn parse_sql(sql: &str, schema: &DatabaseSchema) -> Result<ParsedSql> {
    let toks = lex(sql)?;
    let mut p = Parser { toks, pos: 0, schema, mentions: BTreeSet::new(), len: sql.len() };
    let ast = p.parse_sql()?;
    Ok(ParsedSql { ast, mentions: p.mentions })
}

struct Parser<'a> {
    toks: Vec<Tok>,
    pos: usize,
    schema: &'a DatabaseSchema,
    mentions: BTreeSet<usize>,
    len: usize,
}

/// Tables visible in one query: `(alias, table index)`.
type Scope = Vec<(Option<String>, usize)>;

impl<'a> Parser<'a> {
    fn span(&self) -> Range<usize> {
        self.toks.get(self.pos).map_or(self.len..self.len, |t| t.span.clone())
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::grammar(message, self.span()))
    }

    fn peek(&self) -> Option<&Kind> {
        self.toks.get(self.pos).map(|t| &t.kind)
    }

    fn peek_at(&self, offset: usize) -> Option<&Kind> {
        self.toks.get(self.pos + offset).map(|t| &t.kind)
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Kind::Ident(s)) if s == kw)
    }

    fn is_sym(&self, sym: &str) -> bool {
        matches!(self.peek(), Some(Kind::Sym(s)) if *s == sym)
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.is_kw(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_sym(&mut self, sym: &str) -> bool {
        if self.is_sym(sym) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<()> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            self.err(format!("expected `{}`", kw.to_uppercase()))
        }
    }

    fn expect_sym(&mut self, sym: &str) -> Result<()> {
        if self.eat_sym(sym) {
            Ok(())
        } else {
            self.err(format!("expected `{sym}`"))
        }
    }

    fn parse_sql(&mut self) -> Result<SqlAst> {
        let left = self.parse_query()?;
        let ast = if self.eat_kw("intersect") {
            SqlAst::Intersect(left, self.parse_query()?)
        } else if self.eat_kw("union") {
            SqlAst::Union(left, self.parse_query()?)
        } else if self.eat_kw("except") {
            SqlAst::Except(left, self.parse_query()?)
        } else {
            SqlAst::Single(left)
        };
        self.eat_sym(";");
        if self.pos < self.toks.len() {
            return self.err("unexpected trailing input");
        }
        Ok(ast)
    }

    fn parse_query(&mut self) -> Result<Query> {
        self.expect_kw("select")?;
        let select_start = self.pos;
        let from_pos = self.find_from()?;
        self.pos = from_pos + 1;
        let scope = self.parse_from()?;
        let after_from = self.pos;

        self.pos = select_start;
        let select = self.parse_select(&scope)?;
        if self.pos != from_pos {
            return self.err("expected `FROM`");
        }
        self.pos = after_from;

        let filter = if self.eat_kw("where") { Some(self.parse_cond(&scope)?) } else { None };
        let group_by = if self.eat_kw("group") {
            self.expect_kw("by")?;
            let mut columns = vec![self.parse_column(&scope)?];
            while self.eat_sym(",") {
                columns.push(self.parse_column(&scope)?);
            }
            let having = if self.eat_kw("having") { Some(self.parse_cond(&scope)?) } else { None };
            Some(GroupBy { columns, having })
        } else {
            None
        };
        let mut order_by = if self.eat_kw("order") {
            self.expect_kw("by")?;
            let mut items = Vec::new();
            let mut direction = None;
            loop {
                items.push(self.parse_item(&scope)?);
                let d = if self.eat_kw("desc") {
                    Some(Direction::Desc)
                } else if self.eat_kw("asc") {
                    Some(Direction::Asc)
                } else {
                    None
                };
                if let Some(d) = d {
                    if direction.is_some_and(|prev| prev != d) {
                        return self.err("mixed ORDER BY directions are not supported");
                    }
                    direction = Some(d);
                }
                if !self.eat_sym(",") {
                    break;
                }
            }
            Some(OrderBy { direction: direction.unwrap_or(Direction::Asc), items, limit: false })
        } else {
            None
        };
        if self.eat_kw("limit") {
            match (&mut order_by, self.peek()) {
                (Some(o), Some(Kind::Number)) => {
                    o.limit = true;
                    self.pos += 1;
                }
                (None, _) => return self.err("LIMIT without ORDER BY is not supported"),
                _ => return self.err("expected a number after LIMIT"),
            }
        }
        Ok(Query { select, from: scope.iter().map(|(_, t)| *t).collect(), filter, group_by, order_by })
    }

    /// Position of the `FROM` belonging to the current query.
    fn find_from(&self) -> Result<usize> {
        let mut depth = 0usize;
        for (k, t) in self.toks.iter().enumerate().skip(self.pos) {
            match &t.kind {
                Kind::Sym("(") => depth += 1,
                Kind::Sym(")") => {
                    if depth == 0 {
                        break;
                    }
                    depth -= 1;
                }
                Kind::Ident(s) if s == "from" && depth == 0 => return Ok(k),
                _ => {}
            }
        }
        self.err("query has no FROM clause")
    }

    fn parse_from(&mut self) -> Result<Scope> {
        let mut scope = Scope::new();
        let mut join_refs: Vec<(String, Range<usize>)> = Vec::new();
        scope.push(self.parse_table_ref()?);
        loop {
            if self.eat_kw("join") || self.eat_sym(",") {
                scope.push(self.parse_table_ref()?);
                if self.eat_kw("on") {
                    loop {
                        join_refs.push(self.raw_ident()?);
                        self.expect_sym("=")?;
                        join_refs.push(self.raw_ident()?);
                        if !(self.is_kw("and") && self.join_condition_follows()) {
                            break;
                        }
                        self.pos += 1;
                    }
                }
            } else {
                break;
            }
        }
        for &(_, t) in &scope {
            self.mentions.insert(self.schema.table_item(t));
        }
        for (name, span) in join_refs {
            let c = self.resolve_column(&name, &scope).map_err(|m| Error::grammar(m, span))?;
            self.mentions.insert(self.schema.column_item(c));
        }
        Ok(scope)
    }

    /// `AND ident = ident` continues an ON clause; anything else ends it.
    fn join_condition_follows(&self) -> bool {
        matches!(self.peek_at(1), Some(Kind::Ident(_)))
            && matches!(self.peek_at(2), Some(Kind::Sym("=")))
            && matches!(self.peek_at(3), Some(Kind::Ident(_)))
    }

    fn raw_ident(&mut self) -> Result<(String, Range<usize>)> {
        match self.peek() {
            Some(Kind::Ident(s)) if !KEYWORDS.contains(&s.as_str()) || s.contains('.') => {
                let out = (s.clone(), self.span());
                self.pos += 1;
                Ok(out)
            }
            _ => self.err("expected an identifier"),
        }
    }

    fn parse_table_ref(&mut self) -> Result<(Option<String>, usize)> {
        if self.is_sym("(") {
            return self.err("subqueries in FROM are not supported");
        }
        let (name, span) = self.raw_ident()?;
        let table = self
            .schema
            .find_table(&name)
            .ok_or_else(|| Error::grammar(format!("unknown table `{name}`"), span))?;
        let alias = if self.eat_kw("as") {
            Some(self.raw_ident()?.0)
        } else {
            match self.peek() {
                Some(Kind::Ident(s)) if !KEYWORDS.contains(&s.as_str()) && !self.is_kw("join") => {
                    let a = s.clone();
                    self.pos += 1;
                    Some(a)
                }
                _ => None,
            }
        };
        Ok((alias, table))
    }

    fn resolve_column(&self, name: &str, scope: &Scope) -> std::result::Result<usize, String> {
        if let Some((qualifier, col)) = name.split_once('.') {
            let table = scope
                .iter()
                .find(|(alias, t)| {
                    alias.as_deref() == Some(qualifier)
                        || self.schema.tables[*t].original.eq_ignore_ascii_case(qualifier)
                })
                .map(|&(_, t)| t)
                .or_else(|| self.schema.find_table(qualifier))
                .ok_or_else(|| format!("unknown table or alias `{qualifier}`"))?;
            return self.schema.find_column(table, col).ok_or_else(|| format!("unknown column `{name}`"));
        }
        scope
            .iter()
            .find_map(|&(_, t)| self.schema.find_column(t, name))
            .ok_or_else(|| format!("unknown column `{name}`"))
    }

    fn parse_column(&mut self, scope: &Scope) -> Result<usize> {
        if self.eat_sym("*") {
            let w = self.schema.wildcard().ok_or_else(|| Error::grammar("schema has no `*` column", self.span()))?;
            self.mentions.insert(self.schema.column_item(w));
            return Ok(w);
        }
        let (name, span) = self.raw_ident()?;
        let c = self.resolve_column(&name, scope).map_err(|m| Error::grammar(m, span))?;
        self.mentions.insert(self.schema.column_item(c));
        Ok(c)
    }

    fn parse_select(&mut self, scope: &Scope) -> Result<Select> {
        let distinct = self.eat_kw("distinct");
        let mut items = vec![self.parse_item(scope)?];
        while self.eat_sym(",") {
            items.push(self.parse_item(scope)?);
        }
        Ok(Select { distinct, items })
    }

    fn parse_item(&mut self, scope: &Scope) -> Result<AggColumn> {
        let agg = match self.peek() {
            Some(Kind::Ident(s)) if matches!(self.peek_at(1), Some(Kind::Sym("("))) => match s.as_str() {
                "max" => Some(Agg::Max),
                "min" => Some(Agg::Min),
                "count" => Some(Agg::Count),
                "sum" => Some(Agg::Sum),
                "avg" => Some(Agg::Avg),
                other => return self.err(format!("unsupported function `{other}`")),
            },
            _ => None,
        };
        match agg {
            None => Ok(AggColumn::plain(self.parse_column(scope)?)),
            Some(mut agg) => {
                self.pos += 2;
                if self.eat_kw("distinct") {
                    if agg != Agg::Count {
                        return self.err("DISTINCT is only supported inside COUNT");
                    }
                    agg = Agg::CountDistinct;
                }
                let column = self.parse_column(scope)?;
                self.expect_sym(")")?;
                Ok(AggColumn { agg, column })
            }
        }
    }

    fn parse_cond(&mut self, scope: &Scope) -> Result<Cond> {
        let mut left = self.parse_conjunction(scope)?;
        while self.eat_kw("or") {
            let right = self.parse_conjunction(scope)?;
            left = Cond::or(left, right);
        }
        Ok(left)
    }

    fn parse_conjunction(&mut self, scope: &Scope) -> Result<Cond> {
        let mut left = self.parse_atom(scope)?;
        while self.eat_kw("and") {
            let right = self.parse_atom(scope)?;
            left = Cond::and(left, right);
        }
        Ok(left)
    }

    fn parse_atom(&mut self, scope: &Scope) -> Result<Cond> {
        if self.is_sym("(") && !matches!(self.peek_at(1), Some(Kind::Ident(s)) if s == "select") {
            self.pos += 1;
            let c = self.parse_cond(scope)?;
            self.expect_sym(")")?;
            return Ok(c);
        }
        let lhs = self.parse_item(scope)?;
        let negated = self.eat_kw("not");
        let pred = if self.eat_kw("between") {
            if negated {
                return self.err("NOT BETWEEN is not supported");
            }
            let lo = self.parse_value()?;
            self.expect_kw("and")?;
            let hi = self.parse_value()?;
            Predicate::Between(lhs, lo, hi)
        } else if self.eat_kw("in") {
            let op = if negated { CmpOp::NotIn } else { CmpOp::In };
            Predicate::Cmp(op, lhs, self.parse_value()?)
        } else if self.eat_kw("like") {
            let op = if negated { CmpOp::NotLike } else { CmpOp::Like };
            Predicate::Cmp(op, lhs, self.parse_value()?)
        } else {
            if negated {
                return self.err("expected IN, LIKE after NOT");
            }
            let op = match self.peek() {
                Some(Kind::Sym("=")) => CmpOp::Eq,
                Some(Kind::Sym("!=")) | Some(Kind::Sym("<>")) => CmpOp::Ne,
                Some(Kind::Sym("<")) => CmpOp::Lt,
                Some(Kind::Sym(">")) => CmpOp::Gt,
                Some(Kind::Sym("<=")) => CmpOp::Le,
                Some(Kind::Sym(">=")) => CmpOp::Ge,
                _ => return self.err("expected a comparison operator"),
            };
            self.pos += 1;
            Predicate::Cmp(op, lhs, self.parse_value()?)
        };
        Ok(Cond::Pred(pred))
    }

    fn parse_value(&mut self) -> Result<Value> {
        match self.peek() {
            Some(Kind::Number) | Some(Kind::Str) => {
                self.pos += 1;
                Ok(Value::Literal)
            }
            Some(Kind::Sym("(")) => {
                self.pos += 1;
                if self.is_kw("select") {
                    let q = self.parse_query()?;
                    if self.is_kw("intersect") || self.is_kw("union") || self.is_kw("except") {
                        return self.err("set operations inside a nested query are not supported");
                    }
                    self.expect_sym(")")?;
                    Ok(Value::Nested(Box::new(q)))
                } else {
                    // literal list: (1, 2, 3)
                    loop {
                        match self.peek() {
                            Some(Kind::Number) | Some(Kind::Str) => self.pos += 1,
                            _ => return self.err("expected a literal"),
                        }
                        if !self.eat_sym(",") {
                            break;
                        }
                    }
                    self.expect_sym(")")?;
                    Ok(Value::Literal)
                }
            }
            _ => self.err("expected a literal value or nested query"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::test_fixtures::concert_singer;

    fn mention_names(sql: &str) -> Vec<String> {
        let s = concert_singer();
        let p = parse_sql(sql, &s).unwrap();
        p.mentions.iter().map(|&i| s.item_name(i)).collect()
    }

    #[test]
    fn simple_select() {
        let s = concert_singer();
        let p = parse_sql("SELECT name FROM singer", &s).unwrap();
        let q = match &p.ast {
            SqlAst::Single(q) => q,
            _ => panic!(),
        };
        assert_eq!(q.from, vec![1]);
        assert_eq!(q.select.items, vec![AggColumn::plain(9)]);
        assert_eq!(mention_names("SELECT name FROM singer"), vec!["singer", "singer.name"]);
    }

    #[test]
    fn wildcard_and_keyword_case() {
        assert_eq!(mention_names("select COUNT(*) from concert"), vec!["concert", "*"]);
    }

    #[test]
    fn join_conditions_are_mentions() {
        let names = mention_names(
            "SELECT T2.name, count(*) FROM concert AS T1 JOIN stadium AS T2 ON T1.stadium_id = T2.stadium_id GROUP BY T1.stadium_id",
        );
        assert_eq!(
            names,
            vec!["stadium", "concert", "*", "stadium.stadium_id", "stadium.name", "concert.stadium_id"]
        );
    }

    #[test]
    fn precedence_and_between() {
        let s = concert_singer();
        let p = parse_sql("SELECT name FROM stadium WHERE capacity BETWEEN 1 AND 5 OR average > 3 AND lowest < 2", &s)
            .unwrap();
        let SqlAst::Single(q) = p.ast else { panic!() };
        match q.filter.unwrap() {
            Cond::Or(a, b) => {
                assert!(matches!(*a, Cond::Pred(Predicate::Between(..))));
                assert!(matches!(*b, Cond::And(..)));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nested_and_set_operations() {
        let s = concert_singer();
        let p = parse_sql(
            "SELECT name FROM stadium WHERE stadium_id NOT IN (SELECT stadium_id FROM concert) EXCEPT SELECT name FROM stadium WHERE capacity > 10",
            &s,
        )
        .unwrap();
        let SqlAst::Except(a, _) = p.ast else { panic!() };
        match a.filter.unwrap() {
            Cond::Pred(Predicate::Cmp(CmpOp::NotIn, _, Value::Nested(inner))) => assert_eq!(inner.from, vec![2]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn errors_carry_spans() {
        let s = concert_singer();
        match parse_sql("SELECT nam FROM singer", &s) {
            Err(Error::Grammar { span, .. }) => assert_eq!(span, 7..10),
            other => panic!("{other:?}"),
        }
        assert!(parse_sql("SELECT name singer", &s).is_err());
        assert!(parse_sql("SELECT name FROM singer WHERE", &s).is_err());
        assert!(parse_sql("SELECT name FROM singer LIMIT 3", &s).is_err());
    }
}
