//! Exact set match, component matching, schema-linking metrics and report
//! artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatabaseSchema, LinkingMatrix};
use crate::error::{Error, Result};
use crate::model::{LinkMode, Model, PreparedExample};
use crate::scalar::Scalar;
use crate::sql::{AggColumn, Cond, Direction, Predicate, Query, SqlAst, Value};
use crate::training::{schema_for, EpochMetrics, Snapshot};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum CValue {
    Literal,
    Nested(Box<CQuery>),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum CPred {
    Cmp(crate::sql::CmpOp, AggColumn, CValue),
    Between(AggColumn, CValue, CValue),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum CCond {
    Pred(CPred),
    And(Vec<CCond>),
    Or(Vec<CCond>),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct CQuery {
    distinct: bool,
    select: Vec<AggColumn>,
    from: Vec<usize>,
    filter: Option<CCond>,
    group: Option<(Vec<usize>, Option<CCond>)>,
    order: Option<(bool, Vec<AggColumn>, bool)>,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum CSql {
    Single(CQuery),
    Set(u8, CQuery, CQuery),
}

fn sorted<T: Ord + Clone>(v: &[T]) -> Vec<T> {
    let mut v = v.to_vec();
    v.sort();
    v
}

fn canon_value(v: &Value) -> CValue {
    match v {
        Value::Literal => CValue::Literal,
        Value::Nested(q) => CValue::Nested(Box::new(canon_query(q))),
    }
}

fn canon_pred(p: &Predicate) -> CPred {
    match p {
        Predicate::Cmp(op, c, v) => CPred::Cmp(*op, *c, canon_value(v)),
        Predicate::Between(c, a, b) => CPred::Between(*c, canon_value(a), canon_value(b)),
    }
}

/// Flattens same-connective chains and sorts their operands.
fn canon_cond(c: &Cond) -> CCond {
    fn collect(c: &Cond, and: bool, out: &mut Vec<CCond>) {
        match (c, and) {
            (Cond::And(a, b), true) | (Cond::Or(a, b), false) => {
                collect(a, and, out);
                collect(b, and, out);
            }
            _ => out.push(canon_cond(c)),
        }
    }
    match c {
        Cond::Pred(p) => CCond::Pred(canon_pred(p)),
        Cond::And(..) | Cond::Or(..) => {
            let and = matches!(c, Cond::And(..));
            let mut parts = Vec::new();
            collect(c, and, &mut parts);
            parts.sort();
            if and {
                CCond::And(parts)
            } else {
                CCond::Or(parts)
            }
        }
    }
}

fn canon_query(q: &Query) -> CQuery {
    let mut from = sorted(&q.from);
    from.dedup();
    CQuery {
        distinct: q.select.distinct,
        select: sorted(&q.select.items),
        from,
        filter: q.filter.as_ref().map(canon_cond),
        group: q.group_by.as_ref().map(|g| (sorted(&g.columns), g.having.as_ref().map(canon_cond))),
        order: q.order_by.as_ref().map(|o| (o.direction == Direction::Desc, o.items.clone(), o.limit)),
    }
}

fn canon_sql(ast: &SqlAst) -> CSql {
    match ast {
        SqlAst::Single(q) => CSql::Single(canon_query(q)),
        SqlAst::Intersect(a, b) => CSql::Set(0, canon_query(a), canon_query(b)),
        SqlAst::Union(a, b) => CSql::Set(1, canon_query(a), canon_query(b)),
        SqlAst::Except(a, b) => CSql::Set(2, canon_query(a), canon_query(b)),
    }
}

/// Equality after sorting select items, FROM tables and the operands of
/// each AND/OR chain. Literal values are never part of the tree.
pub fn exact_set_match(pred: &SqlAst, gold: &SqlAst) -> bool {
    canon_sql(pred) == canon_sql(gold)
}

pub const COMPONENTS: [&str; 10] = [
    "select",
    "select_no_agg",
    "where",
    "where_no_op",
    "group_by",
    "group_by_no_having",
    "order_by",
    "and_or",
    "iue",
    "keywords",
];

/// Comparable form of every component, `None` when the query lacks it.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Components(Vec<Option<String>>);

fn connectives(c: &Cond, out: &mut Vec<&'static str>) {
    match c {
        Cond::And(a, b) | Cond::Or(a, b) => {
            out.push(if matches!(c, Cond::And(..)) { "and" } else { "or" });
            connectives(a, out);
            connectives(b, out);
        }
        Cond::Pred(_) => {}
    }
}

fn keywords(ast: &SqlAst) -> BTreeSet<&'static str> {
    let mut k = BTreeSet::new();
    match ast {
        SqlAst::Single(_) => {}
        SqlAst::Intersect(..) => {
            k.insert("intersect");
        }
        SqlAst::Union(..) => {
            k.insert("union");
        }
        SqlAst::Except(..) => {
            k.insert("except");
        }
    }
    let q = ast.queries()[0];
    if let Some(f) = &q.filter {
        k.insert("where");
        let mut conn = Vec::new();
        connectives(f, &mut conn);
        if conn.contains(&"or") {
            k.insert("or");
        }
        for p in f.predicates() {
            if let Predicate::Cmp(op, _, _) = p {
                use crate::sql::CmpOp::*;
                match op {
                    Like => {
                        k.insert("like");
                    }
                    NotLike => {
                        k.insert("like");
                        k.insert("not");
                    }
                    In => {
                        k.insert("in");
                    }
                    NotIn => {
                        k.insert("in");
                        k.insert("not");
                    }
                    _ => {}
                }
            }
        }
    }
    if let Some(g) = &q.group_by {
        k.insert("group");
        if g.having.is_some() {
            k.insert("having");
        }
    }
    if let Some(o) = &q.order_by {
        k.insert("order");
        if o.limit {
            k.insert("limit");
        }
    }
    if q.select.distinct {
        k.insert("distinct");
    }
    k
}

fn components(ast: &SqlAst) -> Components {
    let q = ast.queries()[0];
    let cq = canon_query(q);
    let mut cols: Vec<usize> = q.select.items.iter().map(|i| i.column).collect();
    cols.sort();
    let where_no_op = q.filter.as_ref().map(|f| {
        let mut parts: Vec<String> = f
            .predicates()
            .into_iter()
            .map(|p| match canon_pred(p) {
                CPred::Cmp(_, c, v) => format!("{c:?} {v:?}"),
                CPred::Between(c, a, b) => format!("{c:?} {a:?} {b:?}"),
            })
            .collect();
        parts.sort();
        parts
    });
    let and_or = q.filter.as_ref().and_then(|f| {
        let mut conn = Vec::new();
        connectives(f, &mut conn);
        conn.sort();
        (!conn.is_empty()).then_some(conn)
    });
    let iue = match canon_sql(ast) {
        CSql::Single(_) => None,
        CSql::Set(kind, _, b) => Some(format!("{kind} {b:?}")),
    };
    let kw = keywords(ast);
    Components(vec![
        Some(format!("{} {:?}", cq.distinct, cq.select)),
        Some(format!("{cols:?}")),
        cq.filter.as_ref().map(|f| format!("{f:?}")),
        where_no_op.map(|w| format!("{w:?}")),
        cq.group.as_ref().map(|g| format!("{g:?}")),
        cq.group.as_ref().map(|g| format!("{:?}", g.0)),
        cq.order.as_ref().map(|o| format!("{o:?}")),
        and_or.map(|c| format!("{c:?}")),
        iue,
        (!kw.is_empty()).then(|| format!("{kw:?}")),
    ])
}

/// Per-component agreement of one prediction with its gold query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ComponentMatch {
    /// Equal, or absent from both sides.
    pub matches: [bool; 10],
    pub pred_present: [bool; 10],
    pub gold_present: [bool; 10],
}

impl ComponentMatch {
    pub fn get(&self, name: &str) -> Option<bool> {
        COMPONENTS.iter().position(|&c| c == name).map(|k| self.matches[k])
    }
}

pub fn component_match(pred: Option<&SqlAst>, gold: &SqlAst) -> ComponentMatch {
    let g = components(gold);
    let p = pred.map(components).unwrap_or(Components(vec![None; 10]));
    let mut m = ComponentMatch { matches: [false; 10], pred_present: [false; 10], gold_present: [false; 10] };
    for k in 0..10 {
        m.matches[k] = p.0[k] == g.0[k];
        m.pred_present[k] = p.0[k].is_some();
        m.gold_present[k] = g.0[k].is_some();
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub exact_match: f64,
    /// Micro F1 per component.
    pub components: BTreeMap<String, f64>,
}

fn f1(correct: usize, predicted: usize, gold: usize) -> (f64, f64, f64) {
    let p = if predicted > 0 { correct as f64 / predicted as f64 } else { 0.0 };
    let r = if gold > 0 { correct as f64 / gold as f64 } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (p, r, f)
}

/// Component F1 counts a component as predicted (gold) when present in the
/// prediction (gold) and as correct when present in both and equal. A
/// component absent from every query scores 1.
pub fn match_report(pairs: &[(Option<&SqlAst>, &SqlAst)]) -> MatchReport {
    let n = pairs.len().max(1) as f64;
    let exact = pairs.iter().filter(|(p, g)| p.is_some_and(|p| exact_set_match(p, g))).count();
    let matches: Vec<ComponentMatch> = pairs.iter().map(|(p, g)| component_match(*p, g)).collect();
    let mut components = BTreeMap::new();
    for (k, name) in COMPONENTS.iter().enumerate() {
        let predicted = matches.iter().filter(|m| m.pred_present[k]).count();
        let gold = matches.iter().filter(|m| m.gold_present[k]).count();
        let correct = matches.iter().filter(|m| m.pred_present[k] && m.gold_present[k] && m.matches[k]).count();
        let score = if predicted == 0 && gold == 0 { 1.0 } else { f1(correct, predicted, gold).2 };
        components.insert(name.to_string(), score);
    }
    MatchReport { exact_match: exact as f64 / n, components }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub p: f64,
    pub r: f64,
    pub f: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkingMetrics {
    pub col_p: f64,
    pub col_r: f64,
    pub col_f: f64,
    pub tab_p: f64,
    pub tab_r: f64,
    pub tab_f: f64,
}

impl LinkingMetrics {
    pub fn col(&self) -> Prf {
        Prf { p: self.col_p, r: self.col_r, f: self.col_f }
    }

    pub fn tab(&self) -> Prf {
        Prf { p: self.tab_p, r: self.tab_r, f: self.tab_f }
    }
}

/// Micro-averaged precision, recall and F1 over schema items, columns and
/// tables separately. The wildcard never counts.
pub fn schema_linking_metrics(
    predicted: &[BTreeSet<usize>],
    gold: &[BTreeSet<usize>],
    schemas: &[&DatabaseSchema],
) -> LinkingMetrics {
    // [column, table] x [tp, predicted, gold]
    let mut counts = [[0usize; 3]; 2];
    for ((p, g), s) in predicted.iter().zip(gold).zip(schemas) {
        let kind = |j: usize| usize::from(j < s.num_tables());
        for &j in p.iter().filter(|&&j| !s.is_wildcard_item(j)) {
            counts[kind(j)][1] += 1;
            if g.contains(&j) {
                counts[kind(j)][0] += 1;
            }
        }
        for &j in g.iter().filter(|&&j| !s.is_wildcard_item(j)) {
            counts[kind(j)][2] += 1;
        }
    }
    let (col_p, col_r, col_f) = f1(counts[0][0], counts[0][1], counts[0][2]);
    let (tab_p, tab_r, tab_f) = f1(counts[1][0], counts[1][1], counts[1][2]);
    LinkingMetrics { col_p, col_r, col_f, tab_p, tab_r, tab_f }
}

/// Items whose largest `Ã` entry exceeds `threshold`, wildcard excluded.
pub fn predicted_mentions<T: Scalar>(a_tilde: &LinkingMatrix<T>, schema: &DatabaseSchema, threshold: f64) -> BTreeSet<usize> {
    (0..a_tilde.cols())
        .filter(|&j| !schema.is_wildcard_item(j))
        .filter(|&j| (0..a_tilde.rows()).any(|i| a_tilde.get(i, j).as_f64() > threshold))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub gold: String,
    /// `None` when decoding was truncated.
    pub predicted: Option<String>,
    pub exact: bool,
    pub predicted_mentions: Vec<String>,
}

pub struct EvalOutcome {
    pub report: MatchReport,
    pub linking: LinkingMetrics,
    pub predictions: Vec<PredictionRecord>,
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    examples: &[PreparedExample<T>],
    schemas: &[DatabaseSchema],
    mode: LinkMode,
    beam: usize,
    threshold: f64,
) -> Result<EvalOutcome> {
    type Row = (Option<SqlAst>, BTreeSet<usize>);
    let rows: Vec<Result<Row>> = examples
        .par_iter()
        .map(|prep| {
            let schema = schema_for(schemas, &prep.example.db_id)?;
            let pred = model.predict(prep, schema, mode, beam)?;
            Ok((pred.decoded.map(|d| d.ast), predicted_mentions(&pred.a_tilde, schema, threshold)))
        })
        .collect();
    let rows: Vec<Row> = rows.into_iter().collect::<Result<_>>()?;
    let pairs: Vec<(Option<&SqlAst>, &SqlAst)> =
        rows.iter().zip(examples).map(|((p, _), e)| (p.as_ref(), &e.example.gold_ast)).collect();
    let report = match_report(&pairs);
    let used: Vec<&DatabaseSchema> = examples.iter().map(|e| schema_for(schemas, &e.example.db_id)).collect::<Result<_>>()?;
    let predicted: Vec<BTreeSet<usize>> = rows.iter().map(|(_, m)| m.clone()).collect();
    let gold: Vec<BTreeSet<usize>> = examples.iter().map(|e| e.example.gold_mentions.clone()).collect();
    let linking = schema_linking_metrics(&predicted, &gold, &used);
    let predictions = rows
        .iter()
        .zip(examples)
        .zip(&used)
        .map(|(((p, m), e), s)| PredictionRecord {
            id: e.example.id.clone(),
            gold: e.example.gold_sql.clone(),
            predicted: p.as_ref().map(|a| crate::sql::render_sql(a, s)),
            exact: p.as_ref().is_some_and(|a| exact_set_match(a, &e.example.gold_ast)),
            predicted_mentions: m.iter().map(|&j| s.item_name(j)).collect(),
        })
        .collect();
    Ok(EvalOutcome { report, linking, predictions })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkingReport {
    pub col: Prf,
    pub tab: Prf,
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub exact_match: f64,
    pub components: BTreeMap<String, f64>,
    pub linking: LinkingReport,
    pub config_hash: String,
    pub num_examples: usize,
}

impl Report {
    pub fn new(outcome: &EvalOutcome, config_hash: &str) -> Self {
        Report {
            exact_match: outcome.report.exact_match,
            components: outcome.report.components.clone(),
            linking: LinkingReport { col: outcome.linking.col(), tab: outcome.linking.tab() },
            config_hash: config_hash.to_string(),
            num_examples: outcome.predictions.len(),
        }
    }
}

pub fn write_report_json(report: &Report, out_dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("report.json");
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// RGB raster.
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    fn new(width: usize, height: usize) -> Self {
        Image { width, height, pixels: vec![255; width * height * 3] }
    }

    fn put(&mut self, x: i64, y: i64, rgb: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let k = (y as usize * self.width + x as usize) * 3;
            self.pixels[k..k + 3].copy_from_slice(&rgb);
        }
    }

    fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), rgb: [u8; 3]) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for s in 0..=steps {
            let x = x0 + (x1 - x0) * s / steps;
            let y = y0 + (y1 - y0) * s / steps;
            self.put(x, y, rgb);
        }
    }

    fn dot(&mut self, (x, y): (i64, i64), rgb: [u8; 3]) {
        for dx in -2..=2 {
            for dy in -2..=2 {
                self.put(x + dx, y + dy, rgb);
            }
        }
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
        let mut w = enc.write_header().map_err(to_io)?;
        w.write_image_data(&self.pixels).map_err(to_io)
    }
}

pub const HEATMAP_CELL: usize = 12;

/// One `cell x cell` block per matrix entry, white at 0 and dark blue at the
/// matrix maximum (or 1 if larger).
pub fn heatmap(m: &LinkingMatrix, cell: usize) -> Image {
    let mut img = Image::new(m.cols() * cell, m.rows() * cell);
    let top = m.data().iter().copied().fold(1.0, f64::max);
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            let v = (m.get(i, j) / top).clamp(0.0, 1.0);
            let shade = |full: f64| (255.0 - v * (255.0 - full)).round() as u8;
            let rgb = [shade(8.0), shade(48.0), shade(107.0)];
            for y in 0..cell {
                for x in 0..cell {
                    img.put((j * cell + x) as i64, (i * cell + y) as i64, rgb);
                }
            }
        }
    }
    img
}

/// Column and table linking F1 against epoch, both on a `[0, 1]` axis.
pub fn linking_curve(history: &[EpochMetrics]) -> Image {
    let (w, h, pad) = (480i64, 320i64, 30i64);
    let mut img = Image::new(w as usize, h as usize);
    let axis = [0, 0, 0];
    img.line((pad, h - pad), (w - pad, h - pad), axis);
    img.line((pad, pad), (pad, h - pad), axis);
    let first = history.first().map_or(0, |m| m.epoch) as f64;
    let last = history.last().map_or(1, |m| m.epoch) as f64;
    let span = (last - first).max(1.0);
    let at = |epoch: usize, v: f64| {
        let x = pad + ((epoch as f64 - first) / span * (w - 2 * pad) as f64).round() as i64;
        let y = h - pad - (v.clamp(0.0, 1.0) * (h - 2 * pad) as f64).round() as i64;
        (x, y)
    };
    for (series, rgb) in [(0, [31, 119, 180]), (1, [214, 39, 40])] {
        let pts: Vec<(i64, i64)> =
            history.iter().map(|m| at(m.epoch, if series == 0 { m.col_f1 } else { m.tab_f1 })).collect();
        for pair in pts.windows(2) {
            img.line(pair[0], pair[1], rgb);
        }
        for &p in &pts {
            img.dot(p, rgb);
        }
    }
    img
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Writes `report.json`, `linking_f1.png` and one heatmap per snapshot.
pub fn emit_report(report: &Report, history: &[EpochMetrics], snapshots: &[Snapshot], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if history.is_empty() {
        return Err(Error::Config("cannot emit a report without training history".into()));
    }
    let mut written = vec![write_report_json(report, out_dir)?];
    let curve = out_dir.join("linking_f1.png");
    linking_curve(history).write_png(&curve)?;
    written.push(curve);
    written.extend(write_heatmaps(snapshots, &out_dir.join("heatmaps"))?);
    Ok(written)
}

pub fn write_heatmaps(snapshots: &[Snapshot], dir: &Path) -> Result<Vec<PathBuf>> {
    if snapshots.is_empty() {
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::with_capacity(snapshots.len());
    for s in snapshots {
        let path = dir.join(format!("{}-epoch-{}.png", file_safe(&s.example_id), s.epoch));
        heatmap(&s.matrix(), HEATMAP_CELL).write_png(&path)?;
        written.push(path);
    }
    Ok(written)
}
