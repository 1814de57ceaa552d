use crate::corpus::DatabaseSchema;
use crate::sql::ast::*;

/// Renders a tree as normalized SQL: uppercase keywords, `table.column`
/// names, single spaces. Literals become `'value'` and `LIMIT 1`.
pub fn render_sql(ast: &SqlAst, schema: &DatabaseSchema) -> String {
    let r = Renderer { schema };
    match ast {
        SqlAst::Single(q) => r.query(q),
        SqlAst::Intersect(a, b) => format!("{} INTERSECT {}", r.query(a), r.query(b)),
        SqlAst::Union(a, b) => format!("{} UNION {}", r.query(a), r.query(b)),
        SqlAst::Except(a, b) => format!("{} EXCEPT {}", r.query(a), r.query(b)),
    }
}

struct Renderer<'a> {
    schema: &'a DatabaseSchema,
}

impl Renderer<'_> {
    fn column(&self, c: usize) -> String {
        self.schema.column_name(c)
    }

    fn item(&self, item: &AggColumn) -> String {
        let col = self.column(item.column);
        match (item.agg, item.agg.keyword()) {
            (Agg::CountDistinct, _) => format!("COUNT(DISTINCT {col})"),
            (_, Some(kw)) => format!("{kw}({col})"),
            (_, None) => col,
        }
    }

    fn items(&self, items: &[AggColumn]) -> String {
        items.iter().map(|i| self.item(i)).collect::<Vec<_>>().join(", ")
    }

    fn table(&self, t: usize) -> String {
        self.schema.tables[t].original.to_lowercase()
    }

    fn from(&self, tables: &[usize]) -> String {
        let mut out = "FROM ".to_string();
        for (k, &t) in tables.iter().enumerate() {
            if k == 0 {
                out.push_str(&self.table(t));
                continue;
            }
            out.push_str(" JOIN ");
            out.push_str(&self.table(t));
            let link = self.schema.foreign_keys.iter().find(|&&(a, b)| {
                let (ta, tb) = (self.schema.columns[a].table, self.schema.columns[b].table);
                (ta == Some(t) && tb.is_some_and(|x| tables[..k].contains(&x)))
                    || (tb == Some(t) && ta.is_some_and(|x| tables[..k].contains(&x)))
            });
            if let Some(&(a, b)) = link {
                out.push_str(&format!(" ON {} = {}", self.column(a), self.column(b)));
            }
        }
        out
    }

    fn value(&self, v: &Value) -> String {
        match v {
            Value::Literal => "'value'".to_string(),
            Value::Nested(q) => format!("({})", self.query(q)),
        }
    }

    fn cond(&self, c: &Cond) -> String {
        match c {
            Cond::And(a, b) => {
                let left = if matches!(**a, Cond::Or(..)) { self.paren(a) } else { self.cond(a) };
                let right = if matches!(**b, Cond::Pred(_)) { self.cond(b) } else { self.paren(b) };
                format!("{left} AND {right}")
            }
            Cond::Or(a, b) => {
                let right = if matches!(**b, Cond::Or(..)) { self.paren(b) } else { self.cond(b) };
                format!("{} OR {right}", self.cond(a))
            }
            Cond::Pred(Predicate::Cmp(op, lhs, v)) => format!("{} {} {}", self.item(lhs), op.symbol(), self.value(v)),
            Cond::Pred(Predicate::Between(lhs, lo, hi)) => {
                format!("{} BETWEEN {} AND {}", self.item(lhs), self.value(lo), self.value(hi))
            }
        }
    }

    fn paren(&self, c: &Cond) -> String {
        format!("({})", self.cond(c))
    }

    fn query(&self, q: &Query) -> String {
        let mut parts = vec![format!(
            "SELECT {}{}",
            if q.select.distinct { "DISTINCT " } else { "" },
            self.items(&q.select.items)
        )];
        parts.push(self.from(&q.from));
        if let Some(c) = &q.filter {
            parts.push(format!("WHERE {}", self.cond(c)));
        }
        if let Some(g) = &q.group_by {
            let cols: Vec<_> = g.columns.iter().map(|&c| self.column(c)).collect();
            parts.push(format!("GROUP BY {}", cols.join(", ")));
            if let Some(h) = &g.having {
                parts.push(format!("HAVING {}", self.cond(h)));
            }
        }
        if let Some(o) = &q.order_by {
            let dir = match o.direction {
                Direction::Asc => "ASC",
                Direction::Desc => "DESC",
            };
            parts.push(format!("ORDER BY {} {dir}", self.items(&o.items)));
            if o.limit {
                parts.push("LIMIT 1".to_string());
            }
        }
        parts.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::test_fixtures::concert_singer;
    use crate::sql::parse_sql;

    #[test]
    fn render_then_parse_is_identity() {
        let s = concert_singer();
        for sql in [
            "SELECT count(*) FROM singer",
            "SELECT T2.name, count(*) FROM concert AS T1 JOIN stadium AS T2 ON T1.stadium_id = T2.stadium_id GROUP BY T1.stadium_id",
            "SELECT name FROM stadium WHERE (capacity > 1 OR average < 2) AND lowest = 3",
            "SELECT name FROM stadium WHERE capacity > 1 OR (average < 2 OR lowest = 3)",
            "SELECT DISTINCT country FROM singer WHERE age > 20 ORDER BY age DESC LIMIT 3",
        ] {
            let ast = parse_sql(sql, &s).unwrap().ast;
            let text = render_sql(&ast, &s);
            assert_eq!(parse_sql(&text, &s).unwrap().ast, ast, "{text}");
        }
    }

    #[test]
    fn normalized_text() {
        let s = concert_singer();
        let ast = parse_sql("select max(age) from singer where name like '%a%'", &s).unwrap().ast;
        assert_eq!(render_sql(&ast, &s), "SELECT MAX(singer.age) FROM singer WHERE singer.name LIKE 'value'");
    }
}
