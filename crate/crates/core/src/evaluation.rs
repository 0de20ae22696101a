//! Instance-level scoring of predicted masks against ground truth.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{decode_rle, AnnotationSet, Class, DatasetError, Task};
use crate::representation::Channel;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("frame {gt} annotations scored against predictions for frame {pred}")]
    FrameMismatch { gt: u32, pred: u32 },
    #[error("score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedInstance {
    pub class: Class,
    pub score: f64,
    pub mask: Array2<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub frame_id: u32,
    pub instances: Vec<PredictedInstance>,
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub frame_id: u32,
    pub class: Class,
    pub score: f64,
    pub rle: Vec<u32>,
}

/// Parses JSON-lines predictions. Blank lines are skipped.
pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRecord>, EvalError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let rec: PredictionRecord = serde_json::from_str(l).map_err(|e| EvalError::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            if !(0.0..=1.0).contains(&rec.score) {
                return Err(EvalError::InvalidScore(rec.score));
            }
            Ok(rec)
        })
        .collect()
}

impl PredictionSet {
    /// Collects the records of `frame_id`, decoding masks at `height × width`.
    pub fn from_records(
        frame_id: u32,
        records: &[PredictionRecord],
        height: usize,
        width: usize,
    ) -> Result<Self, EvalError> {
        let instances = records
            .iter()
            .filter(|r| r.frame_id == frame_id)
            .map(|r| {
                Ok(PredictedInstance {
                    class: r.class,
                    score: r.score,
                    mask: decode_rle(&r.rle, height, width)?,
                })
            })
            .collect::<Result<_, EvalError>>()?;
        Ok(Self {
            frame_id,
            instances,
        })
    }
}

pub fn iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub iou_threshold: f64,
    pub score_threshold: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            score_threshold: DEFAULT_SCORE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn support(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn metrics(&self) -> Metrics {
        let ratio = |n: u64, d: u64| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        Metrics {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub type FrameCounts = BTreeMap<Class, Counts>;

/// Greedy matching in descending score order (ties by prediction index).
/// Each surviving prediction takes the unmatched same-class ground-truth
/// instance of highest IoU (ties by index) when that IoU reaches the
/// threshold.
pub fn match_instances(
    gt: &AnnotationSet,
    pred: &PredictionSet,
    params: MatchParams,
) -> Result<FrameCounts, EvalError> {
    if gt.frame_id != pred.frame_id {
        return Err(EvalError::FrameMismatch {
            gt: gt.frame_id,
            pred: pred.frame_id,
        });
    }
    let dims = (gt.height, gt.width);
    for m in gt
        .instances
        .iter()
        .map(|i| &i.mask)
        .chain(pred.instances.iter().map(|p| &p.mask))
    {
        if m.dim() != dims {
            return Err(EvalError::DimensionMismatch(format!(
                "mask {:?} in a {}×{} frame",
                m.dim(),
                gt.height,
                gt.width
            )));
        }
    }
    if let Some(p) = pred
        .instances
        .iter()
        .find(|p| !(0.0..=1.0).contains(&p.score))
    {
        return Err(EvalError::InvalidScore(p.score));
    }

    let mut order: Vec<usize> = (0..pred.instances.len())
        .filter(|&k| pred.instances[k].score >= params.score_threshold)
        .collect();
    order.sort_by(|&a, &b| {
        pred.instances[b]
            .score
            .total_cmp(&pred.instances[a].score)
            .then(a.cmp(&b))
    });

    let mut counts = FrameCounts::new();
    let mut taken = vec![false; gt.instances.len()];
    for k in order {
        let p = &pred.instances[k];
        let mut best: Option<(usize, f64)> = None;
        for (g, inst) in gt.instances.iter().enumerate() {
            if taken[g] || inst.class != p.class {
                continue;
            }
            let v = iou(&inst.mask, &p.mask);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        let c = counts.entry(p.class).or_default();
        match best {
            Some((g, v)) if v >= params.iou_threshold => {
                taken[g] = true;
                c.tp += 1;
            }
            _ => c.fp += 1,
        }
    }
    for (g, inst) in gt.instances.iter().enumerate() {
        if !taken[g] {
            counts.entry(inst.class).or_default().fn_ += 1;
        }
    }
    Ok(counts)
}

/// Matches every frame in parallel and sums the counts per class.
pub fn match_all(
    frames: &[(AnnotationSet, PredictionSet)],
    params: MatchParams,
) -> Result<FrameCounts, EvalError> {
    frames
        .par_iter()
        .map(|(gt, pred)| match_instances(gt, pred, params))
        .try_reduce(FrameCounts::new, |mut a, b| {
            for (class, c) in b {
                *a.entry(class).or_default() += c;
            }
            Ok(a)
        })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class: Class,
    #[serde(flatten)]
    pub counts: Counts,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub weighted: Metrics,
    pub params: MatchParams,
}

/// Mean of `values` weighted by `weights`; 0 when the weights sum to 0.
pub fn weighted_average(values: &[f64], weights: &[u64]) -> f64 {
    let total: u64 = weights.iter().sum();
    if total == 0 {
        return 0.0;
    }
    values
        .iter()
        .zip(weights)
        .map(|(v, &w)| v * w as f64)
        .sum::<f64>()
        / total as f64
}

/// Builds the report from split-level counts. Rows cover the task's
/// vocabulary (or only the classes seen when `task` is `None`); the weighted
/// row weights each class by its ground-truth instance count.
pub fn report(counts: &FrameCounts, task: Option<Task>, params: MatchParams) -> EvalReport {
    let classes: Vec<Class> = match task {
        Some(t) => t.vocabulary().to_vec(),
        None => counts.keys().copied().collect(),
    };
    let rows: Vec<ClassReport> = classes
        .into_iter()
        .map(|class| {
            let c = counts.get(&class).copied().unwrap_or_default();
            ClassReport {
                class,
                counts: c,
                metrics: c.metrics(),
            }
        })
        .collect();
    let weights: Vec<u64> = rows.iter().map(|r| r.counts.support()).collect();
    let pick = |f: fn(&Metrics) -> f64| {
        weighted_average(
            &rows.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>(),
            &weights,
        )
    };
    let weighted = Metrics {
        precision: pick(|m| m.precision),
        recall: pick(|m| m.recall),
        f1: pick(|m| m.f1),
    };
    EvalReport {
        classes: rows,
        weighted,
        params,
    }
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>6} {:>6} {:>9} {:>6} {:>8}",
            "class", "TP", "FP", "FN", "precision", "recall", "F1"
        );
        for r in &self.classes {
            let _ = writeln!(
                out,
                "{:<10} {:>6} {:>6} {:>6} {:>9.2} {:>6.2} {:>8.2}",
                r.class.name(),
                r.counts.tp,
                r.counts.fp,
                r.counts.fn_,
                r.metrics.precision,
                r.metrics.recall,
                r.metrics.f1
            );
        }
        let _ = writeln!(
            out,
            "{:<10} {:>6} {:>6} {:>6} {:>9.2} {:>6.2} {:>8.2}",
            "w. avg", "", "", "", self.weighted.precision, self.weighted.recall, self.weighted.f1
        );
        let _ = write!(
            out,
            "(IoU ≥ {}, score ≥ {})",
            self.params.iou_threshold, self.params.score_threshold
        );
        out
    }
}

/// One ablation configuration: the excluded base channel (if any) and
/// whether positional channels were present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationKey {
    pub excluded: Option<Channel>,
    pub positional: bool,
}

impl AblationKey {
    /// Table position: without positional channels first, then none, NIR,
    /// reflectivity, signal, range.
    fn rank(&self) -> (bool, usize) {
        let ch = match self.excluded {
            None => 0,
            Some(c) => 1 + Channel::BASE.iter().position(|&b| b == c).unwrap_or(4),
        };
        (self.positional, ch)
    }

    fn label(&self) -> &'static str {
        match self.excluded {
            None => "-",
            Some(Channel::Nir) => "NIR",
            Some(Channel::Reflectivity) => "Reflectivity",
            Some(Channel::Signal) => "Signal",
            Some(Channel::RevRange) => "Range",
            Some(c) => c.name(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub key: AblationKey,
    pub metrics: Metrics,
}

/// Sorts rows into table order.
pub fn ablation_rows(rows: impl IntoIterator<Item = (AblationKey, Metrics)>) -> Vec<AblationRow> {
    let mut out: Vec<AblationRow> = rows
        .into_iter()
        .map(|(key, metrics)| AblationRow { key, metrics })
        .collect();
    out.sort_by_key(|r| r.key.rank());
    out
}

/// Renders the channel-ablation comparison with two decimals.
pub fn ablation_table(rows: impl IntoIterator<Item = (AblationKey, Metrics)>) -> String {
    let mut out = format!(
        "{:<16} {:<10} {:>9} {:>6} {:>8}\n",
        "Excluded", "Pos. enc.", "Precision", "Recall", "F1-score"
    );
    for r in ablation_rows(rows) {
        let _ = writeln!(
            out,
            "{:<16} {:<10} {:>9.2} {:>6.2} {:>8.2}",
            r.key.label(),
            if r.key.positional { "yes" } else { "no" },
            r.metrics.precision,
            r.metrics.recall,
            r.metrics.f1
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Instance;
    use proptest::prelude::*;

    fn strip(width: usize, lo: usize, hi: usize) -> Array2<bool> {
        Array2::from_shape_fn((1, width), |(_, c)| (lo..hi).contains(&c))
    }

    fn frame(
        gt: Vec<(Class, Array2<bool>)>,
        pred: Vec<(Class, f64, Array2<bool>)>,
    ) -> (AnnotationSet, PredictionSet) {
        let (h, w) = gt
            .first()
            .map(|g| g.1.dim())
            .or(pred.first().map(|p| p.2.dim()))
            .unwrap_or((1, 1));
        let mut a = AnnotationSet::new(0, h, w);
        a.instances = gt
            .into_iter()
            .map(|(class, mask)| Instance { class, mask })
            .collect();
        let p = PredictionSet {
            frame_id: 0,
            instances: pred
                .into_iter()
                .map(|(class, score, mask)| PredictedInstance { class, score, mask })
                .collect(),
        };
        (a, p)
    }

    #[test]
    fn overlap_examples() {
        // 100-pixel masks overlapping by 80 then by 60
        let (g, p) = frame(
            vec![(Class::Person, strip(200, 0, 100))],
            vec![(Class::Person, 0.9, strip(200, 20, 120))],
        );
        assert!((iou(&g.instances[0].mask, &p.instances[0].mask) - 80.0 / 120.0).abs() < 1e-15);
        let c = match_instances(&g, &p, MatchParams::default()).unwrap();
        assert_eq!(
            c[&Class::Person],
            Counts {
                tp: 1,
                fp: 0,
                fn_: 0
            }
        );

        let (g, p) = frame(
            vec![(Class::Person, strip(200, 0, 100))],
            vec![(Class::Person, 0.9, strip(200, 40, 140))],
        );
        assert!((iou(&g.instances[0].mask, &p.instances[0].mask) - 60.0 / 140.0).abs() < 1e-15);
        let c = match_instances(&g, &p, MatchParams::default()).unwrap();
        assert_eq!(
            c[&Class::Person],
            Counts {
                tp: 0,
                fp: 1,
                fn_: 1
            }
        );

        let (g, p) = frame(vec![], vec![]);
        assert!(match_instances(&g, &p, MatchParams::default())
            .unwrap()
            .is_empty());
    }

    #[test]
    fn score_threshold_and_class_gate() {
        let (g, p) = frame(
            vec![(Class::Walking, strip(10, 0, 5))],
            vec![
                (Class::Walking, 0.4, strip(10, 0, 5)),
                (Class::Waving, 0.9, strip(10, 0, 5)),
            ],
        );
        let c = match_instances(&g, &p, MatchParams::default()).unwrap();
        assert_eq!(
            c[&Class::Walking],
            Counts {
                tp: 0,
                fp: 0,
                fn_: 1
            }
        );
        assert_eq!(
            c[&Class::Waving],
            Counts {
                tp: 0,
                fp: 1,
                fn_: 0
            }
        );
    }

    #[test]
    fn dimension_and_score_errors() {
        let (g, mut p) = frame(
            vec![(Class::Person, strip(10, 0, 5))],
            vec![(Class::Person, 0.9, strip(11, 0, 5))],
        );
        assert!(matches!(
            match_instances(&g, &p, MatchParams::default()),
            Err(EvalError::DimensionMismatch(_))
        ));
        p.instances[0].mask = strip(10, 0, 5);
        p.instances[0].score = 1.5;
        assert!(matches!(
            match_instances(&g, &p, MatchParams::default()),
            Err(EvalError::InvalidScore(_))
        ));
        assert!(matches!(
            parse_predictions("{\"frame_id\":1,\"class\":\"person\",\"score\":-0.1,\"rle\":[4]}"),
            Err(EvalError::InvalidScore(_))
        ));
        assert!(matches!(
            parse_predictions("\n{oops"),
            Err(EvalError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn report_conventions() {
        let mut counts = FrameCounts::new();
        counts.insert(
            Class::Person,
            Counts {
                tp: 1,
                fp: 0,
                fn_: 0,
            },
        );
        let r = report(&counts, Some(Task::Person), MatchParams::default());
        assert_eq!(
            r.classes[0].metrics,
            Metrics {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0
            }
        );

        counts.insert(
            Class::Person,
            Counts {
                tp: 0,
                fp: 0,
                fn_: 5,
            },
        );
        let r = report(&counts, Some(Task::Person), MatchParams::default());
        assert_eq!(r.classes[0].metrics, Metrics::default());

        assert_eq!(
            weighted_average(&[1.0, 0.8, 0.6], &[2, 3, 5]),
            (2.0 * 1.0 + 3.0 * 0.8 + 5.0 * 0.6) / 10.0
        );
        assert!((weighted_average(&[1.0, 0.8, 0.6], &[2, 3, 5]) - 0.74).abs() < 1e-15);
    }

    #[test]
    fn report_includes_unseen_vocabulary_classes() {
        let r = report(
            &FrameCounts::new(),
            Some(Task::Action),
            MatchParams::default(),
        );
        assert_eq!(r.classes.len(), 3);
        assert!(r.to_table().contains("w. avg"));
    }

    #[test]
    fn predictions_decode_per_frame() {
        let text = "{\"frame_id\":3,\"class\":\"waving\",\"score\":0.7,\"rle\":[1,2,3]}\n\n\
                    {\"frame_id\":4,\"class\":\"waving\",\"score\":0.7,\"rle\":[6]}\n";
        let recs = parse_predictions(text).unwrap();
        let set = PredictionSet::from_records(3, &recs, 2, 3).unwrap();
        assert_eq!(set.instances.len(), 1);
        assert!(set.instances[0].mask[(0, 1)] && !set.instances[0].mask[(0, 0)]);
        assert!(PredictionSet::from_records(3, &recs, 2, 2).is_err());
    }

    #[test]
    fn ablation_rows_sorted_into_table_order() {
        let m = Metrics {
            precision: 0.5,
            recall: 0.5,
            f1: 0.5,
        };
        let keys = [
            AblationKey {
                excluded: Some(Channel::RevRange),
                positional: true,
            },
            AblationKey {
                excluded: None,
                positional: false,
            },
            AblationKey {
                excluded: Some(Channel::Nir),
                positional: false,
            },
        ];
        let rows = ablation_rows(keys.iter().map(|&k| (k, m)));
        assert_eq!(rows[0].key, keys[1]);
        assert_eq!(rows[1].key, keys[2]);
        assert_eq!(rows[2].key, keys[0]);
    }

    fn masks(h: usize, w: usize) -> impl Strategy<Value = Array2<bool>> {
        prop::collection::vec(any::<bool>(), h * w)
            .prop_map(move |v| Array2::from_shape_vec((h, w), v).unwrap())
    }

    proptest! {
        #[test]
        fn prediction_order_does_not_matter(
            gts in prop::collection::vec(masks(4, 4), 0..4),
            preds in prop::collection::vec(masks(4, 4), 0..5),
            rot in 0usize..5,
        ) {
            let (mut g, p) = frame(
                gts.into_iter().map(|m| (Class::Person, m)).collect(),
                // distinct scores make the processing order total
                preds.into_iter().enumerate().map(|(k, m)| (Class::Person, 0.5 + k as f64 / 16.0, m)).collect(),
            );
            g.height = 4;
            g.width = 4;
            let base = match_instances(&g, &p, MatchParams::default()).unwrap();
            let mut r = p.clone();
            if !r.instances.is_empty() {
                let k = rot % r.instances.len();
                r.instances.rotate_left(k);
            }
            prop_assert_eq!(&base, &match_instances(&g, &r, MatchParams::default()).unwrap());
            let c = base.get(&Class::Person).copied().unwrap_or_default();
            prop_assert_eq!((c.tp + c.fn_) as usize, g.instances.len());
            prop_assert_eq!((c.tp + c.fp) as usize, p.instances.len());
        }

        #[test]
        fn weighted_average_is_bounded(vals in prop::collection::vec((0.0f64..1.0, 0u64..20), 1..6)) {
            let (v, w): (Vec<f64>, Vec<u64>) = vals.into_iter().unzip();
            let avg = weighted_average(&v, &w);
            if w.iter().sum::<u64>() > 0 {
                let lo = v.iter().zip(&w).filter(|(_, &w)| w > 0).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
                let hi = v.iter().zip(&w).filter(|(_, &w)| w > 0).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(avg >= lo - 1e-12 && avg <= hi + 1e-12);
            } else {
                prop_assert_eq!(avg, 0.0);
            }
        }
    }
}
