//! Frame labels, task descriptions, clip segmentation and video-level folds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_AU: usize = 12;
pub const N_EXPR: usize = 8;
pub const N_VA: usize = 2;

/// Column names of the twelve action units, in label-file order.
pub const AU_NAMES: [&str; N_AU] = [
    "AU1", "AU2", "AU4", "AU6", "AU7", "AU10", "AU12", "AU15", "AU23", "AU24", "AU25", "AU26",
];

pub const EXPR_NAMES: [&str; N_EXPR] = [
    "Neutral",
    "Anger",
    "Disgust",
    "Fear",
    "Happiness",
    "Sadness",
    "Surprise",
    "Other",
];

/// Label value marking an unannotated frame.
pub const SENTINEL: i64 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Au,
    Expr,
    Va,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Au, Task::Expr, Task::Va];

    pub fn n_outputs(self) -> usize {
        match self {
            Task::Au => N_AU,
            Task::Expr => N_EXPR,
            Task::Va => N_VA,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Au => "au",
            Task::Expr => "expr",
            Task::Va => "va",
        }
    }

    /// Names of the label columns following `video_id,frame_index`.
    pub fn label_columns(self) -> Vec<String> {
        match self {
            Task::Au => AU_NAMES.iter().map(|s| s.to_string()).collect(),
            Task::Expr => vec!["expr".to_string()],
            Task::Va => vec!["valence".to_string(), "arousal".to_string()],
        }
    }

    /// Names of the per-frame output columns written to prediction files.
    pub fn output_columns(self) -> Vec<String> {
        match self {
            Task::Au => self.label_columns(),
            Task::Expr => EXPR_NAMES.iter().map(|s| s.to_string()).collect(),
            Task::Va => self.label_columns(),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "au" => Ok(Task::Au),
            "expr" | "exp" => Ok(Task::Expr),
            "va" => Ok(Task::Va),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SmoothingKind {
    None,
    Gaussian,
    Median,
    Average,
}

impl FromStr for SmoothingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(SmoothingKind::None),
            "gaussian" => Ok(SmoothingKind::Gaussian),
            "median" => Ok(SmoothingKind::Median),
            "average" | "mean" | "uniform" => Ok(SmoothingKind::Average),
            other => Err(Error::Config(format!("unknown smoothing kind `{other}`"))),
        }
    }
}

/// Post-processing filter applied to a task's frame-wise predictions.
///
/// `sigma` is read only by the Gaussian filter and `window` only by the
/// median and average filters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSpec {
    pub kind: SmoothingKind,
    pub window: usize,
    pub sigma: f64,
}

impl SmoothingSpec {
    /// Per-task defaults: Gaussian sigma 5 / 25 / 25 and sliding window
    /// 10 / 25 / 50 for AU / EXPR / VA.
    pub fn for_task(task: Task, kind: SmoothingKind) -> Self {
        let (sigma, window) = match task {
            Task::Au => (5.0, 10),
            Task::Expr => (25.0, 25),
            Task::Va => (25.0, 50),
        };
        SmoothingSpec {
            kind,
            window,
            sigma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Config("smoothing window must be positive".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config("smoothing sigma must be positive".into()));
        }
        Ok(())
    }
}

/// A task together with its loss weighting and post-processing policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task: Task,
    pub n_outputs: usize,
    pub class_weights: Option<Vec<f64>>,
    pub smoothing: SmoothingSpec,
}

impl TaskSpec {
    /// Uniform class weights (for AU/EXPR) and Gaussian smoothing with the
    /// task's default sigma.
    pub fn new(task: Task) -> Self {
        let class_weights = match task {
            Task::Va => None,
            _ => Some(vec![1.0; task.n_outputs()]),
        };
        TaskSpec {
            task,
            n_outputs: task.n_outputs(),
            class_weights,
            smoothing: SmoothingSpec::for_task(task, SmoothingKind::Gaussian),
        }
    }

    pub fn with_smoothing(mut self, kind: SmoothingKind) -> Self {
        self.smoothing = SmoothingSpec::for_task(self.task, kind);
        self
    }

    pub fn with_class_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        self.class_weights = Some(weights);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_outputs != self.task.n_outputs() {
            return Err(Error::Validation(format!(
                "task {} has {} outputs, not {}",
                self.task,
                self.task.n_outputs(),
                self.n_outputs
            )));
        }
        match (&self.class_weights, self.task) {
            (Some(_), Task::Va) => {
                return Err(Error::Validation("VA task takes no class weights".into()))
            }
            (None, Task::Au | Task::Expr) => {
                return Err(Error::Validation(format!(
                    "task {} requires class weights",
                    self.task
                )))
            }
            (Some(w), _) => {
                if w.len() != self.n_outputs {
                    return Err(Error::Validation(format!(
                        "expected {} class weights, got {}",
                        self.n_outputs,
                        w.len()
                    )));
                }
                if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
                    return Err(Error::Validation("class weights must be non-negative".into()));
                }
            }
            (None, Task::Va) => {}
        }
        self.smoothing.validate()
    }
}

/// Labels of one video frame. Only the fields of the task a label file
/// describes are populated when loading.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub video_id: String,
    pub frame_index: usize,
    pub face_present: bool,
    pub au: Option<[u8; N_AU]>,
    pub expr: Option<u8>,
    pub valence: Option<f64>,
    pub arousal: Option<f64>,
}

impl FrameRecord {
    pub fn unlabeled(video_id: impl Into<String>, frame_index: usize) -> Self {
        FrameRecord {
            video_id: video_id.into(),
            frame_index,
            face_present: true,
            au: None,
            expr: None,
            valence: None,
            arousal: None,
        }
    }

    pub fn has_label(&self, task: Task) -> bool {
        match task {
            Task::Au => self.au.is_some(),
            Task::Expr => self.expr.is_some(),
            Task::Va => self.valence.is_some() && self.arousal.is_some(),
        }
    }

    /// Label as a dense target row: AU 0/1 vector, EXPR one-hot, VA pair.
    pub fn target_row(&self, task: Task) -> Option<Vec<f64>> {
        match task {
            Task::Au => self.au.map(|a| a.iter().map(|&v| v as f64).collect()),
            Task::Expr => self.expr.map(|c| {
                let mut row = vec![0.0; N_EXPR];
                row[c as usize] = 1.0;
                row
            }),
            Task::Va => match (self.valence, self.arousal) {
                (Some(v), Some(a)) => Some(vec![v, a]),
                _ => None,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.valence.is_some() != self.arousal.is_some() {
            return Err(Error::Validation(format!(
                "{}#{}: valence and arousal must be present together",
                self.video_id, self.frame_index
            )));
        }
        if let Some(au) = &self.au {
            if au.iter().any(|&v| v > 1) {
                return Err(Error::Validation(format!(
                    "{}#{}: AU labels must be 0 or 1",
                    self.video_id, self.frame_index
                )));
            }
        }
        if let Some(c) = self.expr {
            if c as usize >= N_EXPR {
                return Err(Error::Validation(format!(
                    "{}#{}: expression class {c} out of range",
                    self.video_id, self.frame_index
                )));
            }
        }
        for v in [self.valence, self.arousal].into_iter().flatten() {
            if !(-1.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!(
                    "{}#{}: VA value {v} outside [-1, 1]",
                    self.video_id, self.frame_index
                )));
            }
        }
        Ok(())
    }
}

fn parse_field<T: FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T> {
    field.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("cannot parse {what} from `{field}`"),
    })
}

/// Reads a per-task label CSV. Rows come back sorted by `(video_id, frame_index)`.
pub fn load_labels(path: impl AsRef<Path>, task: &TaskSpec) -> Result<Vec<FrameRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, path, task.task)
}

pub(crate) fn parse_labels(text: &str, path: &Path, task: Task) -> Result<Vec<FrameRecord>> {
    let n_label_cols = task.label_columns().len();
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: "missing header row".into(),
    })?;
    let header: Vec<&str> = header.split(',').map(str::trim).collect();
    if header.len() != 2 + n_label_cols || header[0] != "video_id" || header[1] != "frame_index" {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!(
                "expected header `video_id,frame_index` plus {n_label_cols} {task} label columns"
            ),
        });
    }

    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, raw) in lines {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 2 + n_label_cols {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected {} fields, found {}", 2 + n_label_cols, fields.len()),
            });
        }
        let video_id = fields[0].trim().to_string();
        if video_id.is_empty() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: "empty video_id".into(),
            });
        }
        let frame_index: usize = parse_field(path, line, fields[1], "frame_index")?;
        let mut rec = FrameRecord::unlabeled(video_id, frame_index);
        let labels = &fields[2..];
        let out_of_range =
            |msg: String| Error::Validation(format!("{}:{line}: {msg}", path.display()));
        match task {
            Task::Au => {
                let vals: Vec<i64> = labels
                    .iter()
                    .map(|f| parse_field(path, line, f, "AU label"))
                    .collect::<Result<_>>()?;
                if vals.iter().all(|&v| v == SENTINEL) {
                    rec.au = None;
                } else {
                    let mut au = [0u8; N_AU];
                    for (j, &v) in vals.iter().enumerate() {
                        if v != 0 && v != 1 {
                            return Err(out_of_range(format!(
                                "AU label {v} in column {} not in {{0,1}}",
                                AU_NAMES[j]
                            )));
                        }
                        au[j] = v as u8;
                    }
                    rec.au = Some(au);
                }
            }
            Task::Expr => {
                let v: i64 = parse_field(path, line, labels[0], "expression label")?;
                if v == SENTINEL {
                    rec.expr = None;
                } else if (0..N_EXPR as i64).contains(&v) {
                    rec.expr = Some(v as u8);
                } else {
                    return Err(out_of_range(format!("expression class {v} not in [0,7]")));
                }
            }
            Task::Va => {
                let v: f64 = parse_field(path, line, labels[0], "valence")?;
                let a: f64 = parse_field(path, line, labels[1], "arousal")?;
                if v == SENTINEL as f64 && a == SENTINEL as f64 {
                    rec.valence = None;
                    rec.arousal = None;
                } else {
                    for (name, x) in [("valence", v), ("arousal", a)] {
                        if !(-1.0..=1.0).contains(&x) {
                            return Err(out_of_range(format!("{name} {x} outside [-1,1]")));
                        }
                    }
                    rec.valence = Some(v);
                    rec.arousal = Some(a);
                }
            }
        }
        if !seen.insert((rec.video_id.clone(), rec.frame_index)) {
            return Err(out_of_range(format!(
                "duplicate frame {}#{}",
                rec.video_id, rec.frame_index
            )));
        }
        records.push(rec);
    }
    records.sort_by(|a, b| {
        a.video_id
            .cmp(&b.video_id)
            .then(a.frame_index.cmp(&b.frame_index))
    });
    Ok(records)
}

/// Writes the label CSV for `task`; absent labels become the `-1` sentinel.
pub fn save_labels(path: impl AsRef<Path>, records: &[FrameRecord], task: Task) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str("video_id,frame_index,");
    out.push_str(&task.label_columns().join(","));
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{}", r.video_id, r.frame_index));
        match task {
            Task::Au => match &r.au {
                Some(au) => au.iter().for_each(|v| out.push_str(&format!(",{v}"))),
                None => (0..N_AU).for_each(|_| out.push_str(",-1")),
            },
            Task::Expr => match r.expr {
                Some(c) => out.push_str(&format!(",{c}")),
                None => out.push_str(",-1"),
            },
            Task::Va => match (r.valence, r.arousal) {
                (Some(v), Some(a)) => out.push_str(&format!(",{v},{a}")),
                _ => out.push_str(",-1,-1"),
            },
        }
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Groups records by video, preserving the input order within each video.
pub fn group_by_video(frames: &[FrameRecord]) -> BTreeMap<String, Vec<&FrameRecord>> {
    let mut map: BTreeMap<String, Vec<&FrameRecord>> = BTreeMap::new();
    for f in frames {
        map.entry(f.video_id.clone()).or_default().push(f);
    }
    map
}

/// A window of `length` consecutive frame positions of one video.
///
/// Positions past the end of the video are padding: `frame_valid` is false
/// there and `frame_indices` only lists the valid positions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoClip {
    pub video_id: String,
    /// Offset of the first position within the video's frame sequence.
    pub start: usize,
    pub length: usize,
    pub frame_valid: Vec<bool>,
    pub frame_indices: Vec<usize>,
}

impl VideoClip {
    pub fn n_valid(&self) -> usize {
        self.frame_valid.iter().filter(|v| **v).count()
    }
}

/// `(start, n_valid)` for each stride-`k` window over `n` rows.
pub fn clip_windows(n: usize, k: usize) -> Result<Vec<(usize, usize)>> {
    if k == 0 {
        return Err(Error::arg("clip length K must be at least 1"));
    }
    Ok((0..n.div_ceil(k))
        .map(|c| {
            let start = c * k;
            (start, k.min(n - start))
        })
        .collect())
}

/// Splits each video into non-overlapping clips of `k` frames; the final
/// clip of a video is padded to length `k`.
pub fn segment_clips(frames: &[FrameRecord], k: usize) -> Result<Vec<VideoClip>> {
    if k == 0 {
        return Err(Error::arg("clip length K must be at least 1"));
    }
    let mut clips = Vec::new();
    for (video_id, vframes) in group_by_video(frames) {
        for (start, n_valid) in clip_windows(vframes.len(), k)? {
            let mut frame_valid = vec![false; k];
            frame_valid[..n_valid].iter_mut().for_each(|v| *v = true);
            clips.push(VideoClip {
                video_id: video_id.clone(),
                start,
                length: k,
                frame_valid,
                frame_indices: vframes[start..start + n_valid]
                    .iter()
                    .map(|f| f.frame_index)
                    .collect(),
            });
        }
    }
    Ok(clips)
}

/// Assignment of every video to one of `n_folds` folds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub n_folds: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn fold_of(&self, video_id: &str) -> Option<usize> {
        self.assignment.get(video_id).copied()
    }

    pub fn videos_in(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, f)| **f == fold)
            .map(|(v, _)| v.clone())
            .collect()
    }

    pub fn videos_not_in(&self, fold: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, f)| **f != fold)
            .map(|(v, _)| v.clone())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        self.assignment.values().for_each(|&f| sizes[f] += 1);
        sizes
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        write_file(path.as_ref(), json.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let split: FoldSplit = serde_json::from_str(&text)?;
        if split.assignment.values().any(|&f| f >= split.n_folds) {
            return Err(Error::Validation("fold index out of range".into()));
        }
        Ok(split)
    }
}

/// Seeded video-level split: shuffle the sorted ids, then deal round-robin.
pub fn make_folds<S: AsRef<str>>(video_ids: &[S], n_folds: usize, seed: u64) -> Result<FoldSplit> {
    if n_folds < 2 {
        return Err(Error::arg("need at least 2 folds"));
    }
    let unique: BTreeSet<&str> = video_ids.iter().map(|s| s.as_ref()).collect();
    if unique.len() < n_folds {
        return Err(Error::arg(format!(
            "{} videos cannot fill {n_folds} folds",
            unique.len()
        )));
    }
    let mut ids: Vec<&str> = unique.into_iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignment = ids
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % n_folds))
        .collect();
    Ok(FoldSplit {
        n_folds,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn p() -> PathBuf {
        PathBuf::from("labels.csv")
    }

    #[test]
    fn au_row_maps_fields_directly() {
        let text = format!(
            "video_id,frame_index,{}\nvidA,0,1,0,1,0,0,0,0,0,0,0,0,1\n",
            AU_NAMES.join(",")
        );
        let recs = parse_labels(&text, &p(), Task::Au).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].au, Some([1, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1]));
        assert!(recs[0].face_present);
    }

    #[test]
    fn va_sentinel_row_is_unlabeled() {
        let text = "video_id,frame_index,valence,arousal\nvidA,5,-1,-1\nvidA,6,-1,0.25\n";
        let recs = parse_labels(text, &p(), Task::Va).unwrap();
        assert_eq!(recs[0].valence, None);
        assert_eq!(recs[0].arousal, None);
        assert_eq!(recs[1].valence, Some(-1.0));
        assert_eq!(recs[1].arousal, Some(0.25));
    }

    #[test]
    fn shuffled_rows_come_back_sorted() {
        let text = "video_id,frame_index,expr\nv,2,1\nv,0,3\nv,1,-1\n";
        let recs = parse_labels(text, &p(), Task::Expr).unwrap();
        let mut oracle: Vec<(String, usize)> = vec![
            ("v".into(), 2),
            ("v".into(), 0),
            ("v".into(), 1),
        ];
        oracle.sort();
        let got: Vec<(String, usize)> =
            recs.iter().map(|r| (r.video_id.clone(), r.frame_index)).collect();
        assert_eq!(got, oracle);
        assert_eq!(recs[0].expr, Some(3));
        assert_eq!(recs[1].expr, None);
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let text = "video_id,frame_index,expr\nv,0,1\nv,zero,1\n";
        match parse_labels(text, &p(), Task::Expr) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let short = "video_id,frame_index,expr\nv,0\n";
        assert!(matches!(
            parse_labels(short, &p(), Task::Expr),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn out_of_range_expression_is_rejected() {
        let text = "video_id,frame_index,expr\nv,0,9\n";
        assert!(matches!(
            parse_labels(text, &p(), Task::Expr),
            Err(Error::Validation(_))
        ));
        let va = "video_id,frame_index,valence,arousal\nv,0,1.5,0\n";
        assert!(matches!(
            parse_labels(va, &p(), Task::Va),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn duplicate_frames_are_rejected() {
        let text = "video_id,frame_index,expr\nv,0,1\nv,0,2\n";
        assert!(parse_labels(text, &p(), Task::Expr).is_err());
    }

    #[test]
    fn segment_250_frames_into_three_clips() {
        let frames: Vec<_> = (0..250).map(|i| FrameRecord::unlabeled("v", i)).collect();
        let clips = segment_clips(&frames, 100).unwrap();
        assert_eq!(clips.len(), 3);
        assert_eq!(clips[2].n_valid(), 50);
        assert_eq!(clips[2].start, 200);
        assert!(!clips[2].frame_valid[50]);
    }

    #[test]
    fn segment_exact_fit_and_minimal_video() {
        let frames: Vec<_> = (0..100).map(|i| FrameRecord::unlabeled("v", i)).collect();
        let clips = segment_clips(&frames, 100).unwrap();
        assert_eq!(clips.len(), 1);
        assert!(clips[0].frame_valid.iter().all(|v| *v));

        let one = vec![FrameRecord::unlabeled("w", 0)];
        let clips = segment_clips(&one, 100).unwrap();
        assert_eq!(clips.len(), 1);
        let mut expected = vec![false; 100];
        expected[0] = true;
        assert_eq!(clips[0].frame_valid, expected);
    }

    #[test]
    fn segment_rejects_zero_k() {
        assert!(matches!(
            segment_clips(&[FrameRecord::unlabeled("v", 0)], 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn folds_ten_videos_five_folds() {
        let ids: Vec<String> = (0..10).map(|i| format!("v{i}")).collect();
        let split = make_folds(&ids, 5, 42).unwrap();
        assert_eq!(split.fold_sizes(), vec![2; 5]);
        assert_eq!(split, make_folds(&ids, 5, 42).unwrap());
    }

    #[test]
    fn folds_eleven_videos_are_balanced() {
        let ids: Vec<String> = (0..11).map(|i| format!("v{i}")).collect();
        let split = make_folds(&ids, 5, 3).unwrap();
        let mut sizes = split.fold_sizes();
        sizes.sort_unstable_by(|a, b| b.cmp(a));
        // Balanced partition of 11 into 5: q = 2, r = 1.
        let (q, r) = (11 / 5, 11 % 5);
        let mut oracle: Vec<usize> = (0..5).map(|i| q + usize::from(i < r)).collect();
        oracle.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(sizes, oracle);
    }

    #[test]
    fn folds_need_enough_videos() {
        assert!(matches!(make_folds(&["a", "b"], 5, 0), Err(Error::Argument(_))));
        assert!(make_folds(&["a", "b"], 1, 0).is_err());
    }

    #[test]
    fn task_spec_invariants() {
        for t in Task::ALL {
            TaskSpec::new(t).validate().unwrap();
        }
        let mut bad = TaskSpec::new(Task::Va);
        bad.class_weights = Some(vec![1.0, 1.0]);
        assert!(bad.validate().is_err());
        let mut bad = TaskSpec::new(Task::Au);
        bad.n_outputs = 8;
        assert!(bad.validate().is_err());
        assert!(TaskSpec::new(Task::Expr).with_class_weights(vec![1.0; 3]).is_err());
    }
}
