//! Word-level text normalisation shared by the linkers and the encoder.

/// Lowercases and splits on whitespace, detaching leading/trailing
/// punctuation into separate tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let start = lower.find(|c: char| c.is_alphanumeric()).unwrap_or(lower.len());
        let end = lower.rfind(|c: char| c.is_alphanumeric()).map_or(start, |i| i + 1);
        for c in lower[..start].chars() {
            out.push(c.to_string());
        }
        if start < end {
            out.push(lower[start..end].to_string());
        }
        for c in lower[end.max(start)..].chars() {
            out.push(c.to_string());
        }
    }
    out
}

/// Splits a schema identifier such as `Song_release_year` into lowercase
/// words.
pub fn split_identifier(name: &str) -> Vec<String> {
    name.split(|c: char| c == '_' || c.is_whitespace())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Strips a plural suffix: `ies -> y`, `(s|x|ch|sh)es -> $1`, `s -> ''`.
/// Words of three letters or fewer and `ss` endings are left alone.
pub fn singularize(word: &str) -> String {
    let w = word.to_lowercase();
    if w.len() <= 3 || w.ends_with("ss") {
        return w;
    }
    if let Some(stem) = w.strip_suffix("ies") {
        return format!("{stem}y");
    }
    for suffix in ["ses", "xes", "ches", "shes"] {
        if w.ends_with(suffix) {
            return w[..w.len() - 2].to_string();
        }
    }
    match w.strip_suffix('s') {
        Some(stem) => stem.to_string(),
        None => w,
    }
}
