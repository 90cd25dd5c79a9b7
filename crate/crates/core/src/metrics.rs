//! Segment- and event-level AVVP evaluation.
//!
//! Snippet decisions are `T×S` boolean grids (`grid[t][c]`). Every score is
//! computed per video and then averaged over videos; corpus-pooled scores are
//! reported alongside as a secondary reduction.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `T×S` binary snippet decisions, indexed `[t][category]`.
pub type Grid = Vec<Vec<bool>>;

/// Default temporal IoU needed for an event match.
pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Audio,
    Visual,
    AudioVisual,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Visual, Modality::AudioVisual];

    /// Short code used in annotation and prediction files.
    pub fn code(self) -> &'static str {
        match self {
            Modality::Audio => "a",
            Modality::Visual => "v",
            Modality::AudioVisual => "av",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Modality::Audio),
            "v" => Ok(Modality::Visual),
            "av" => Ok(Modality::AudioVisual),
            other => Err(Error::invalid(format!("unknown modality `{other}` (expected a, v or av)"))),
        }
    }
}

/// A maximal run of positive snippets, `start..=end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EventSegment {
    pub category: usize,
    pub modality: Modality,
    pub start: usize,
    pub end: usize,
}

impl EventSegment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, other: &EventSegment) -> bool {
        self.category == other.category && self.start <= other.start && other.end <= self.end
    }
}

/// Maximal runs of `true` in `row` as inclusive `(start, end)` pairs.
pub fn runs(row: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    for (i, &on) in row.iter().enumerate() {
        match (on, open) {
            (true, None) => open = Some(i),
            (false, Some(s)) => {
                out.push((s, i - 1));
                open = None;
            }
            _ => {}
        }
    }
    if let Some(s) = open {
        out.push((s, row.len() - 1));
    }
    out
}

/// Events of every category in `grid`, ordered by category then start.
pub fn extract_events(grid: &Grid, modality: Modality) -> Vec<EventSegment> {
    let categories = grid.first().map_or(0, Vec::len);
    let mut events = Vec::new();
    for c in 0..categories {
        let column: Vec<bool> = grid.iter().map(|row| row[c]).collect();
        events.extend(runs(&column).into_iter().map(|(start, end)| EventSegment {
            category: c,
            modality,
            start,
            end,
        }));
    }
    events
}

/// Intersection over union of two inclusive snippet ranges.
pub fn temporal_iou(a: &EventSegment, b: &EventSegment) -> f64 {
    let lo = a.start.max(b.start);
    let hi = a.end.min(b.end);
    let inter = if lo <= hi { hi - lo + 1 } else { 0 };
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// True/false positive and false negative counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    /// `2TP / (2TP + FP + FN)`, or 1 when nothing was expected or predicted.
    pub fn f_score(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

impl std::ops::Add for Counts {
    type Output = Counts;

    fn add(self, o: Counts) -> Counts {
        Counts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        *self = *self + o;
    }
}

fn check_aligned(pred: &Grid, truth: &Grid) -> Result<()> {
    let dims = |g: &Grid| (g.len(), g.first().map_or(0, Vec::len));
    let ragged = |g: &Grid| g.iter().any(|r| r.len() != dims(g).1);
    if dims(pred) != dims(truth) || ragged(pred) || ragged(truth) {
        return Err(Error::shape(
            "segment_counts",
            format!("prediction {:?} vs truth {:?}", dims(pred), dims(truth)),
        ));
    }
    Ok(())
}

/// Cell-wise counts over all `(t, category)` positions.
pub fn segment_counts(pred: &Grid, truth: &Grid) -> Result<Counts> {
    check_aligned(pred, truth)?;
    let mut c = Counts::default();
    for (pr, tr) in pred.iter().zip(truth) {
        for (&p, &t) in pr.iter().zip(tr) {
            match (p, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(c)
}

/// Greedy one-to-one matching of same-category events by descending IoU.
///
/// Returns the matched `(pred, truth)` index pairs.
pub fn match_events(pred: &[EventSegment], truth: &[EventSegment], iou_threshold: f64) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in pred.iter().enumerate() {
        for (j, t) in truth.iter().enumerate() {
            if p.category != t.category {
                continue;
            }
            let iou = temporal_iou(p, t);
            if iou >= iou_threshold {
                candidates.push((iou, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(pred[a.1].start.cmp(&pred[b.1].start))
            .then(pred[a.1].category.cmp(&pred[b.1].category))
            .then(truth[a.2].start.cmp(&truth[b.2].start))
            .then(a.1.cmp(&b.1))
    });
    let mut used_pred = vec![false; pred.len()];
    let mut used_truth = vec![false; truth.len()];
    let mut matches = Vec::new();
    for (_, i, j) in candidates {
        if !used_pred[i] && !used_truth[j] {
            used_pred[i] = true;
            used_truth[j] = true;
            matches.push((i, j));
        }
    }
    matches
}

/// Event-level counts after greedy matching.
pub fn event_counts(pred: &[EventSegment], truth: &[EventSegment], iou_threshold: f64) -> Counts {
    let tp = match_events(pred, truth, iou_threshold).len();
    Counts {
        tp,
        fp: pred.len() - tp,
        fn_: truth.len() - tp,
    }
}

/// Macro mean of the audio, visual and audio-visual F-scores.
pub fn type_at_av(f_audio: f64, f_visual: f64, f_av: f64) -> f64 {
    (f_audio + f_visual + f_av) / 3.0
}

/// Fraction to percent, rounded to one decimal.
pub fn round_percent(x: f64) -> f64 {
    (x * 1000.0).round() / 10.0
}

/// Snippet decisions of one video for all three modalities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoParse {
    pub audio: Grid,
    pub visual: Grid,
    pub audio_visual: Grid,
}

impl VideoParse {
    /// Builds a parse whose audio-visual grid is the conjunction of the
    /// audio and visual grids.
    pub fn from_modalities(audio: Grid, visual: Grid) -> Result<Self> {
        check_aligned(&audio, &visual)?;
        let audio_visual = audio
            .iter()
            .zip(&visual)
            .map(|(a, v)| a.iter().zip(v).map(|(&x, &y)| x && y).collect())
            .collect();
        Ok(VideoParse {
            audio,
            visual,
            audio_visual,
        })
    }

    pub fn empty(snippets: usize, categories: usize) -> Self {
        let g = vec![vec![false; categories]; snippets];
        VideoParse {
            audio: g.clone(),
            visual: g.clone(),
            audio_visual: g,
        }
    }

    pub fn grid(&self, m: Modality) -> &Grid {
        match m {
            Modality::Audio => &self.audio,
            Modality::Visual => &self.visual,
            Modality::AudioVisual => &self.audio_visual,
        }
    }

    pub fn grid_mut(&mut self, m: Modality) -> &mut Grid {
        match m {
            Modality::Audio => &mut self.audio,
            Modality::Visual => &mut self.visual,
            Modality::AudioVisual => &mut self.audio_visual,
        }
    }

    pub fn events(&self, m: Modality) -> Vec<EventSegment> {
        extract_events(self.grid(m), m)
    }
}

/// Raw counts for one video: `[audio, visual, av]` at each level.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VideoCounts {
    pub segment: [Counts; 3],
    pub event: [Counts; 3],
}

impl VideoCounts {
    pub fn compute(pred: &VideoParse, truth: &VideoParse, iou_threshold: f64) -> Result<Self> {
        let mut out = VideoCounts::default();
        for m in Modality::ALL {
            out.segment[m.index()] = segment_counts(pred.grid(m), truth.grid(m))?;
            out.event[m.index()] = event_counts(&pred.events(m), &truth.events(m), iou_threshold);
        }
        Ok(out)
    }

    fn level(counts: &[Counts; 3]) -> LevelScores {
        let f = counts.map(|c| c.f_score());
        LevelScores {
            audio: f[0],
            visual: f[1],
            av: f[2],
            type_at_av: type_at_av(f[0], f[1], f[2]),
            event_at_av: (counts[0] + counts[1]).f_score(),
        }
    }

    pub fn scores(&self) -> MetricsReport {
        MetricsReport {
            segment: Self::level(&self.segment),
            event: Self::level(&self.event),
        }
    }
}

/// The five scores at one level, as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelScores {
    pub audio: f64,
    pub visual: f64,
    pub av: f64,
    pub type_at_av: f64,
    pub event_at_av: f64,
}

impl LevelScores {
    fn as_percent(&self) -> LevelScores {
        LevelScores {
            audio: round_percent(self.audio),
            visual: round_percent(self.visual),
            av: round_percent(self.av),
            type_at_av: round_percent(self.type_at_av),
            event_at_av: round_percent(self.event_at_av),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub segment: LevelScores,
    pub event: LevelScores,
}

impl MetricsReport {
    /// The report with every score as a percentage rounded to one decimal.
    pub fn as_percent(&self) -> MetricsReport {
        MetricsReport {
            segment: self.segment.as_percent(),
            event: self.event.as_percent(),
        }
    }
}

/// Corpus evaluation: sample-averaged scores, pooled scores and the
/// per-video counts both were derived from.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub pooled: MetricsReport,
    pub per_video: Vec<VideoCounts>,
}

/// Reduces per-video counts. Sample-level scores average each video's F;
/// `type_at_av` is always the mean of the three averaged F-scores.
pub fn reduce(per_video: Vec<VideoCounts>) -> Evaluation {
    let n = per_video.len();
    let mut report = MetricsReport::default();
    let mut total = VideoCounts::default();
    for v in &per_video {
        let s = v.scores();
        for (acc, x) in [(&mut report.segment, s.segment), (&mut report.event, s.event)] {
            acc.audio += x.audio;
            acc.visual += x.visual;
            acc.av += x.av;
            acc.event_at_av += x.event_at_av;
        }
        for m in 0..3 {
            total.segment[m] += v.segment[m];
            total.event[m] += v.event[m];
        }
    }
    if n > 0 {
        let k = 1.0 / n as f64;
        for acc in [&mut report.segment, &mut report.event] {
            acc.audio *= k;
            acc.visual *= k;
            acc.av *= k;
            acc.event_at_av *= k;
        }
    } else {
        report = VideoCounts::default().scores();
    }
    for acc in [&mut report.segment, &mut report.event] {
        acc.type_at_av = type_at_av(acc.audio, acc.visual, acc.av);
    }
    Evaluation {
        report,
        pooled: total.scores(),
        per_video,
    }
}

/// Scores aligned prediction and truth parses.
pub fn evaluate(pred: &[VideoParse], truth: &[VideoParse], iou_threshold: f64) -> Result<Evaluation> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predicted videos but {} ground-truth videos",
            pred.len(),
            truth.len()
        )));
    }
    let per_video = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| VideoCounts::compute(p, t, iou_threshold))
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(per_video))
}

/// Pooled per-category F at both levels.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoryScores {
    pub category: usize,
    pub modality: Modality,
    pub segment_f: f64,
    pub event_f: f64,
}

pub fn category_scores(pred: &[VideoParse], truth: &[VideoParse], iou_threshold: f64) -> Result<Vec<CategoryScores>> {
    let categories = truth
        .iter()
        .chain(pred)
        .find_map(|v| v.audio.first().map(Vec::len))
        .unwrap_or(0);
    let mut out = Vec::new();
    for c in 0..categories {
        for m in Modality::ALL {
            let mut seg = Counts::default();
            let mut ev = Counts::default();
            for (p, t) in pred.iter().zip(truth) {
                let column = |g: &Grid| -> Grid { g.iter().map(|r| vec![r[c]]).collect() };
                seg += segment_counts(&column(p.grid(m)), &column(t.grid(m)))?;
                let pe: Vec<_> = p.events(m).into_iter().filter(|e| e.category == c).collect();
                let te: Vec<_> = t.events(m).into_iter().filter(|e| e.category == c).collect();
                ev += event_counts(&pe, &te, iou_threshold);
            }
            out.push(CategoryScores {
                category: c,
                modality: m,
                segment_f: seg.f_score(),
                event_f: ev.f_score(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(start: usize, end: usize) -> EventSegment {
        EventSegment {
            category: 0,
            modality: Modality::Audio,
            start,
            end,
        }
    }

    #[test]
    fn run_extraction() {
        let row = [false, true, true, true, false, false, true, false, false, false];
        assert_eq!(runs(&row), vec![(1, 3), (6, 6)]);
        assert!(runs(&[false; 10]).is_empty());
        assert_eq!(runs(&[true; 10]), vec![(0, 9)]);
    }

    #[test]
    fn iou_cases() {
        assert_eq!(temporal_iou(&ev(1, 3), &ev(1, 3)), 1.0);
        assert_eq!(temporal_iou(&ev(1, 3), &ev(2, 5)), 0.4);
        assert_eq!(temporal_iou(&ev(0, 1), &ev(3, 4)), 0.0);
    }

    #[test]
    fn below_threshold_is_miss() {
        let c = event_counts(&[ev(1, 3)], &[ev(2, 5)], IOU_THRESHOLD);
        assert_eq!(c, Counts { tp: 0, fp: 1, fn_: 1 });
        assert_eq!(c.f_score(), 0.0);
    }

    #[test]
    fn empty_counts_are_perfect() {
        assert_eq!(Counts::default().f_score(), 1.0);
    }

    #[test]
    fn reference_row_mean() {
        assert_eq!(round_percent(type_at_av(0.601, 0.529, 0.489)), 54.0);
    }

    #[test]
    fn modality_codes_roundtrip() {
        for m in Modality::ALL {
            assert_eq!(m.code().parse::<Modality>().unwrap(), m);
        }
        assert!("x".parse::<Modality>().is_err());
    }
}
