//! Classification metrics shared by evaluation and ablation: confusion
//! matrix, accuracy, and class-averaged precision/F1.

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("prediction and truth lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("confusion matrix holds no samples")]
    EmptyMatrix,
}

/// Counts indexed `[true class][predicted class]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<usize>,
    classes: usize,
}

impl ConfusionMatrix {
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> usize {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Averaging policy for the per-class scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Average {
    #[default]
    Macro,
    Weighted,
}

/// Headline scores of one evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub accuracy: f64,
    pub precision: f64,
    pub f1: f64,
}

pub fn confusion(y_true: &[usize], y_pred: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(MetricsError::LengthMismatch(y_true.len(), y_pred.len()));
    }
    let mut counts = vec![0usize; classes * classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        for label in [t, p] {
            if label >= classes {
                return Err(MetricsError::LabelOutOfRange { label, classes });
            }
        }
        counts[t * classes + p] += 1;
    }
    Ok(ConfusionMatrix { counts, classes })
}

/// Accuracy plus unweighted class means of precision and F1. Classes with a
/// zero denominator contribute 0 to the mean rather than being skipped.
pub fn macro_scores(cm: &ConfusionMatrix) -> Result<Scores> {
    averaged_scores(cm, Average::Macro)
}

/// Same scores under the chosen averaging policy; `Weighted` weighs each
/// class by its support.
pub fn averaged_scores(cm: &ConfusionMatrix, average: Average) -> Result<Scores> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let c = cm.classes();
    let mut correct = 0usize;
    let mut precision_sum = 0.0;
    let mut f1_sum = 0.0;
    let mut weight_total = 0.0;
    for class in 0..c {
        let tp = cm.count(class, class);
        correct += tp;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for other in 0..c {
            if other != class {
                fp += cm.count(other, class);
                fn_ += cm.count(class, other);
            }
        }
        let precision = ratio_or_zero(tp, tp + fp);
        let recall = ratio_or_zero(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        let weight = match average {
            Average::Macro => 1.0,
            Average::Weighted => (tp + fn_) as f64,
        };
        precision_sum += weight * precision;
        f1_sum += weight * f1;
        weight_total += weight;
    }
    Ok(Scores {
        accuracy: correct as f64 / total as f64,
        precision: precision_sum / weight_total,
        f1: f1_sum / weight_total,
    })
}

fn ratio_or_zero(num: usize, denom: usize) -> f64 {
    if denom == 0 {
        0.0
    } else {
        num as f64 / denom as f64
    }
}
