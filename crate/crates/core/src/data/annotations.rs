//! Tab-separated annotation and prediction files.
//!
//! Each file starts with a fixed header row. Category names come from a
//! [`Vocabulary`]; unknown names are rejected with their line number.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::Modality;

/// The 25 event categories of the LLP benchmark.
pub const LLP_CATEGORIES: [&str; 25] = [
    "Speech",
    "Car",
    "Cheering",
    "Dog",
    "Cat",
    "Frying_(food)",
    "Basketball_bounce",
    "Fire_alarm",
    "Chainsaw",
    "Cello",
    "Banjo",
    "Singing",
    "Chicken_rooster",
    "Violin_fiddle",
    "Vacuum_cleaner",
    "Baby_laughter",
    "Accordion",
    "Lawn_mower",
    "Motorcycle",
    "Helicopter",
    "Acoustic_guitar",
    "Telephone_bell_ringing",
    "Baby_cry_infant_cry",
    "Blender",
    "Clapping",
];

pub const WEAK_HEADER: &str = "video_id\tevents";
pub const FULL_HEADER: &str = "video_id\tcategory\tmodality\tstart\tend";
pub const PREDICTION_HEADER: &str = "video_id\tmodality\tcategory\tstart\tend";

/// Ordered category names; a category's index is its position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut index = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains(['\t', ',', '\n', '\r']) {
                return Err(Error::invalid(format!("invalid category name {n:?}")));
            }
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate category name `{n}`")));
            }
        }
        if names.is_empty() {
            return Err(Error::invalid("empty category vocabulary"));
        }
        Ok(Vocabulary { names, index })
    }

    /// The first `n` LLP categories.
    pub fn llp(n: usize) -> Result<Self> {
        if n == 0 || n > LLP_CATEGORIES.len() {
            return Err(Error::invalid(format!(
                "number of categories must be in 1..={}, got {n}",
                LLP_CATEGORIES.len()
            )));
        }
        Vocabulary::new(LLP_CATEGORIES[..n].iter().copied())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Reads one name per line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::new(text.lines().filter(|l| !l.trim().is_empty()).map(str::trim)).map_err(|e| {
            Error::Format {
                path: path.to_path_buf(),
                detail: e.to_string(),
            }
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.names.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Video-level bag of event categories.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeakAnnotation {
    pub video_id: String,
    pub events: BTreeSet<usize>,
}

/// One temporally localized event in one modality.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct FullAnnotation {
    pub video_id: String,
    pub category: usize,
    /// Audio or visual; audio-visual spans are derived, never annotated.
    pub modality: Modality,
    pub start: usize,
    pub end: usize,
}

/// One predicted event.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct PredictionRow {
    pub video_id: String,
    pub modality: Modality,
    pub category: usize,
    pub start: usize,
    pub end: usize,
}

struct Lines<'a> {
    path: &'a Path,
}

impl Lines<'_> {
    fn err(&self, line: usize, detail: impl Into<String>) -> Error {
        Error::Annotation {
            path: self.path.to_path_buf(),
            line,
            detail: detail.into(),
        }
    }

    /// Data rows as `(line_number, fields)`, after checking the header.
    fn rows<'t>(&self, text: &'t str, header: &str, width: usize) -> Result<Vec<(usize, Vec<&'t str>)>> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end_matches('\r') == header => {}
            Some((_, h)) => return Err(self.err(1, format!("expected header {header:?}, found {h:?}"))),
            None => return Err(self.err(1, "missing header row")),
        }
        let mut out = Vec::new();
        for (i, line) in lines {
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != width {
                return Err(self.err(i + 1, format!("expected {width} fields, found {}", fields.len())));
            }
            if fields[0].is_empty() {
                return Err(self.err(i + 1, "empty video id"));
            }
            out.push((i + 1, fields));
        }
        Ok(out)
    }

    fn category(&self, line: usize, vocab: &Vocabulary, name: &str) -> Result<usize> {
        vocab
            .index_of(name)
            .ok_or_else(|| self.err(line, format!("unknown category `{name}`")))
    }

    fn span(&self, line: usize, start: &str, end: &str, snippets: usize) -> Result<(usize, usize)> {
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| self.err(line, format!("invalid snippet index `{s}`")))
        };
        let (s, e) = (parse(start)?, parse(end)?);
        if s > e || e >= snippets {
            return Err(self.err(line, format!("span {s}..={e} outside 0..{snippets}")));
        }
        Ok((s, e))
    }
}

pub fn parse_weak_str(text: &str, vocab: &Vocabulary, path: &Path) -> Result<Vec<WeakAnnotation>> {
    let l = Lines { path };
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (line, f) in l.rows(text, WEAK_HEADER, 2)? {
        if !seen.insert(f[0]) {
            return Err(l.err(line, format!("duplicate video id `{}`", f[0])));
        }
        let mut events = BTreeSet::new();
        for name in f[1].split(',').map(str::trim).filter(|n| !n.is_empty()) {
            events.insert(l.category(line, vocab, name)?);
        }
        out.push(WeakAnnotation {
            video_id: f[0].to_string(),
            events,
        });
    }
    Ok(out)
}

pub fn parse_full_str(text: &str, vocab: &Vocabulary, snippets: usize, path: &Path) -> Result<Vec<FullAnnotation>> {
    let l = Lines { path };
    let mut out = Vec::new();
    for (line, f) in l.rows(text, FULL_HEADER, 5)? {
        let modality = match f[2] {
            "a" => Modality::Audio,
            "v" => Modality::Visual,
            other => return Err(l.err(line, format!("modality must be a or v, found `{other}`"))),
        };
        let (start, end) = l.span(line, f[3], f[4], snippets)?;
        out.push(FullAnnotation {
            video_id: f[0].to_string(),
            category: l.category(line, vocab, f[1])?,
            modality,
            start,
            end,
        });
    }
    Ok(out)
}

pub fn parse_predictions_str(
    text: &str,
    vocab: &Vocabulary,
    snippets: usize,
    path: &Path,
) -> Result<Vec<PredictionRow>> {
    let l = Lines { path };
    let mut out = Vec::new();
    for (line, f) in l.rows(text, PREDICTION_HEADER, 5)? {
        let modality: Modality = f[1].parse().map_err(|e: Error| l.err(line, e.to_string()))?;
        let (start, end) = l.span(line, f[3], f[4], snippets)?;
        out.push(PredictionRow {
            video_id: f[0].to_string(),
            modality,
            category: l.category(line, vocab, f[2])?,
            start,
            end,
        });
    }
    Ok(out)
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_weak(path: &Path, vocab: &Vocabulary) -> Result<Vec<WeakAnnotation>> {
    parse_weak_str(&read(path)?, vocab, path)
}

pub fn parse_full(path: &Path, vocab: &Vocabulary, snippets: usize) -> Result<Vec<FullAnnotation>> {
    parse_full_str(&read(path)?, vocab, snippets, path)
}

pub fn parse_predictions(path: &Path, vocab: &Vocabulary, snippets: usize) -> Result<Vec<PredictionRow>> {
    parse_predictions_str(&read(path)?, vocab, snippets, path)
}

pub fn format_weak(rows: &[WeakAnnotation], vocab: &Vocabulary) -> String {
    let mut out = format!("{WEAK_HEADER}\n");
    for r in rows {
        let names: Vec<&str> = r.events.iter().map(|&c| vocab.name(c)).collect();
        out.push_str(&format!("{}\t{}\n", r.video_id, names.join(",")));
    }
    out
}

pub fn format_full(rows: &[FullAnnotation], vocab: &Vocabulary) -> String {
    let mut out = format!("{FULL_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.video_id,
            vocab.name(r.category),
            r.modality,
            r.start,
            r.end
        ));
    }
    out
}

pub fn format_predictions(rows: &[PredictionRow], vocab: &Vocabulary) -> String {
    let mut out = format!("{PREDICTION_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.video_id,
            r.modality,
            vocab.name(r.category),
            r.start,
            r.end
        ));
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::llp(25).unwrap()
    }

    #[test]
    fn weak_row() {
        let rows = parse_weak_str("video_id\tevents\nv1\tSpeech,Dog\nv2\t\n", &vocab(), Path::new("w")).unwrap();
        assert_eq!(rows[0].events, BTreeSet::from([0, 3]));
        assert!(rows[1].events.is_empty());
    }

    #[test]
    fn full_row() {
        let rows = parse_full_str(
            "video_id\tcategory\tmodality\tstart\tend\nv1\tSpeech\ta\t2\t4\n",
            &vocab(),
            10,
            Path::new("f"),
        )
        .unwrap();
        assert_eq!((rows[0].start, rows[0].end, rows[0].modality), (2, 4, Modality::Audio));
    }

    #[test]
    fn unknown_category_reports_line() {
        let err = parse_weak_str("video_id\tevents\nv1\tSpeech\nv2\tKazoo\n", &vocab(), Path::new("w")).unwrap_err();
        match err {
            Error::Annotation { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn out_of_range_span() {
        let text = "video_id\tcategory\tmodality\tstart\tend\nv1\tDog\tv\t8\t10\n";
        assert!(parse_full_str(text, &vocab(), 10, Path::new("f")).is_err());
    }

    #[test]
    fn av_is_not_an_annotation_modality() {
        let text = "video_id\tcategory\tmodality\tstart\tend\nv1\tDog\tav\t1\t2\n";
        assert!(parse_full_str(text, &vocab(), 10, Path::new("f")).is_err());
    }
}
