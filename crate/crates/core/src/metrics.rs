//! Pixel confusion counts, overlap metrics and dataset reports.
//!
//! Dice is averaged over images; precision, recall and F1 are computed from
//! counts pooled over the whole dataset.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::network::Network;
use crate::ops::sigmoid_scalar;
use crate::tensor::Tensor;
use crate::training::data::Dataset;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// `1` where `prob >= threshold`, else `0`.
pub fn binarize(prob: &Tensor, threshold: f64) -> Result<Tensor> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(config_err!(
            "threshold must be in (0, 1), got {}",
            threshold
        ));
    }
    Ok(prob.map(|p| if p >= threshold { 1.0 } else { 0.0 }))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

fn is_binary(v: f64) -> bool {
    v == 0.0 || v == 1.0
}

pub fn confusion(pred: &Tensor, gt: &Tensor) -> Result<ConfusionCounts> {
    pred.expect_same_dims(gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if !is_binary(p) || !is_binary(g) {
            return Err(Error::InvalidTarget(format!(
                "masks must be 0 or 1, found prediction {} and truth {}",
                p, g
            )));
        }
        match (p == 1.0, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Overlap metrics. A `0/0` ratio is 1 when both masks are empty
/// (`tp = fp = fn = 0`) and 0 otherwise.
pub fn metrics_from_counts(c: &ConfusionCounts) -> Scores {
    let agree_empty = c.tp == 0 && c.fp == 0 && c.fn_ == 0;
    let ratio = |num: f64, den: f64| {
        if den == 0.0 {
            if agree_empty {
                1.0
            } else {
                0.0
            }
        } else {
            num / den
        }
    };
    let tp = c.tp as f64;
    let precision = ratio(tp, tp + c.fp as f64);
    let recall = ratio(tp, tp + c.fn_ as f64);
    Scores {
        dice: ratio(2.0 * tp, 2.0 * tp + c.fp as f64 + c.fn_ as f64),
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub id: String,
    pub dice: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_image: Vec<ImageReport>,
    pub aggregate: Aggregate,
    pub threshold: f64,
}

impl MetricsReport {
    pub fn from_counts(items: &[(String, ConfusionCounts)], threshold: f64) -> Result<Self> {
        if items.is_empty() {
            return Err(config_err!("cannot report on an empty dataset"));
        }
        let mut pooled = ConfusionCounts::default();
        let mut per_image = Vec::with_capacity(items.len());
        for (id, c) in items {
            pooled += *c;
            per_image.push(ImageReport {
                id: id.clone(),
                dice: metrics_from_counts(c).dice,
                tp: c.tp,
                fp: c.fp,
                fn_: c.fn_,
                tn: c.tn,
            });
        }
        let mean_dice = per_image.iter().map(|r| r.dice).sum::<f64>() / per_image.len() as f64;
        let s = metrics_from_counts(&pooled);
        Ok(Self {
            per_image,
            aggregate: Aggregate {
                precision: s.precision,
                recall: s.recall,
                f1: s.f1,
                mean_dice,
            },
            threshold,
        })
    }
}

/// Images evaluated per forward pass; eval mode makes samples independent.
const EVAL_BATCH: usize = 8;

pub fn evaluate_dataset(net: &Network, data: &Dataset, threshold: f64) -> Result<MetricsReport> {
    binarize(&Tensor::zeros(&[0]), threshold)?;
    let mut items = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, masks) = data.batch(chunk)?;
        let probs = net.predict(&images)?.map(sigmoid_scalar);
        for (k, &i) in chunk.iter().enumerate() {
            let pred = binarize(&probs.index_outer(k)?, threshold)?;
            let c = confusion(&pred, &masks.index_outer(k)?)?;
            items.push((data.ids[i].clone(), c));
        }
    }
    MetricsReport::from_counts(&items, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: &[usize], ones: &[usize]) -> Tensor {
        let mut t = Tensor::zeros(dims);
        for &i in ones {
            t.data_mut()[i] = 1.0;
        }
        t
    }

    #[test]
    fn binarize_rules() {
        let p = Tensor::new(vec![3], vec![0.5, 0.0, 0.6]).unwrap();
        assert_eq!(binarize(&p, 0.5).unwrap().data(), &[1.0, 0.0, 1.0]);
        assert_eq!(binarize(&p, 0.9).unwrap().data(), &[0.0, 0.0, 0.0]);
        assert!(binarize(&p, 0.0).is_err());
        assert!(binarize(&p, 1.0).is_err());
    }

    #[test]
    fn confusion_examples() {
        let checker = Tensor::from_fn(&[4, 4], |i| ((i / 4 + i % 4) % 2) as f64);
        let c = confusion(&checker, &checker).unwrap();
        assert_eq!((c.tp, c.tn, c.fp, c.fn_), (8, 8, 0, 0));
        let inv = checker.map(|v| 1.0 - v);
        let c = confusion(&inv, &checker).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert_eq!(c.total(), 16);

        let pred = mask(&[2, 2], &[0, 1, 2]);
        let gt = mask(&[2, 2], &[0, 1, 3]);
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (2, 1, 1, 0));

        assert!(matches!(
            confusion(&Tensor::full(&[2], 0.5), &Tensor::zeros(&[2])),
            Err(Error::InvalidTarget(_))
        ));
        assert!(matches!(
            confusion(&Tensor::zeros(&[2]), &Tensor::zeros(&[3])),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn hand_case_is_two_thirds() {
        let s = metrics_from_counts(&ConfusionCounts {
            tp: 2,
            fp: 1,
            fn_: 1,
            tn: 0,
        });
        for v in [s.dice, s.precision, s.recall, s.f1] {
            assert!((v - 2.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_counts() {
        let all = |s: Scores| [s.dice, s.precision, s.recall, s.f1];
        assert_eq!(
            all(metrics_from_counts(&ConfusionCounts {
                tp: 0,
                fp: 0,
                fn_: 0,
                tn: 9
            })),
            [1.0; 4]
        );
        assert_eq!(
            all(metrics_from_counts(&ConfusionCounts {
                tp: 5,
                fp: 0,
                fn_: 0,
                tn: 4
            })),
            [1.0; 4]
        );
        assert_eq!(
            all(metrics_from_counts(&ConfusionCounts {
                tp: 0,
                fp: 3,
                fn_: 0,
                tn: 1
            })),
            [0.0; 4]
        );
        assert_eq!(
            all(metrics_from_counts(&ConfusionCounts {
                tp: 0,
                fp: 0,
                fn_: 2,
                tn: 1
            })),
            [0.0; 4]
        );
    }

    #[test]
    fn report_policies() {
        let perfect = ConfusionCounts {
            tp: 4,
            fp: 0,
            fn_: 0,
            tn: 12,
        };
        let half = ConfusionCounts {
            tp: 1,
            fp: 1,
            fn_: 1,
            tn: 13,
        };
        let r = MetricsReport::from_counts(&[("a".into(), perfect)], 0.5).unwrap();
        assert_eq!(r.aggregate.mean_dice, 1.0);
        assert_eq!(r.aggregate.f1, 1.0);

        let r =
            MetricsReport::from_counts(&[("a".into(), perfect), ("b".into(), half)], 0.5).unwrap();
        assert_eq!(r.aggregate.mean_dice, 0.75);
        // pooled: tp 5, fp 1, fn 1
        assert!((r.aggregate.f1 - 10.0 / 12.0).abs() < 1e-15);

        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains(r#""fn":1"#));
        assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);
        assert!(MetricsReport::from_counts(&[], 0.5).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn counts() -> impl Strategy<Value = ConfusionCounts> {
            (0u64..500, 0u64..500, 0u64..500, 0u64..500)
                .prop_map(|(tp, fp, fn_, tn)| ConfusionCounts { tp, fp, fn_, tn })
        }

        proptest! {
            #[test]
            fn f1_equals_dice(c in counts()) {
                let s = metrics_from_counts(&c);
                prop_assert!((s.f1 - s.dice).abs() < 1e-12);
                for v in [s.dice, s.precision, s.recall, s.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }

            #[test]
            fn extra_true_positive_never_lowers_dice(c in counts()) {
                let more = ConfusionCounts { tp: c.tp + 1, ..c };
                prop_assert!(metrics_from_counts(&more).dice >= metrics_from_counts(&c).dice);
            }

            #[test]
            fn confusion_totals_pixel_count(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..64)) {
                let n = bits.len();
                let pred = Tensor::from_fn(&[n], |i| bits[i].0 as u8 as f64);
                let gt = Tensor::from_fn(&[n], |i| bits[i].1 as u8 as f64);
                prop_assert_eq!(confusion(&pred, &gt).unwrap().total(), n as u64);
            }
        }
    }
}
