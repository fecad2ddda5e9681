use std::fmt::Write as _;

use super::{confusion, metrics_from_counts, AucAccumulator, ConfusionCounts, EvalError, Metrics, Score};
use crate::data::{pad_to_multiple, Sample, SampleSource};
use crate::model::{argmax_channels, Model};
use crate::tensor::Float;

/// Model output for one sample, cropped back to its original geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Foreground (class 1) probability per pixel.
    pub foreground: Vec<f64>,
    /// Argmax class per pixel.
    pub label: Vec<u8>,
}

pub fn predict_sample<T: Float>(model: &Model<T>, sample: &Sample) -> Result<Prediction, EvalError> {
    let classes = model.config().num_classes;
    if classes != 2 {
        return Err(EvalError::Classes(classes));
    }
    let (padded, crop) = pad_to_multiple(sample, model.config().size_multiple());
    let probs = model.predict(&padded.to_tensor::<T>())?;
    let plane = crop.padded_height * crop.padded_width;
    let fg: Vec<f64> = probs.data()[plane..2 * plane].iter().map(|v| v.as_f64()).collect();
    let label = argmax_channels(&probs).map_err(crate::model::ModelError::from)?;
    Ok(Prediction {
        id: sample.id().to_string(),
        height: sample.height(),
        width: sample.width(),
        foreground: crop.crop_plane(&fg),
        label: crop.crop_plane(&label),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageReport {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    pub auc: Score,
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub dataset: String,
    pub model: String,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    pub auc: Score,
    pub params: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "dataset,model,se,sp,acc,auc,f1,jaccard,params";

    pub fn csv_row(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{}",
            self.dataset, self.model, m.se, m.sp, m.acc, self.auc, m.f1, m.jaccard, self.params
        )
    }
}

pub fn reports_csv(reports: &[MetricsReport]) -> String {
    let mut s = format!("{}\n", MetricsReport::CSV_HEADER);
    for r in reports {
        let _ = writeln!(s, "{}", r.csv_row());
    }
    s
}

/// Plain-text table with one row per report.
pub fn render_table(reports: &[MetricsReport]) -> String {
    let header = ["Dataset", "Model", "Se", "Sp", "Acc", "AUC", "F1", "Jacc", "Params (M)"];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let m = &r.metrics;
            vec![
                r.dataset.clone(),
                r.model.clone(),
                format!("{:.4}", m.se),
                format!("{:.4}", m.sp),
                format!("{:.4}", m.acc),
                format!("{:.4}", r.auc),
                format!("{:.4}", m.f1),
                format!("{:.4}", m.jaccard),
                format!("{:.3}", r.params as f64 / 1e6),
            ]
        })
        .collect();
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[&str]| {
        cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i < 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(&header);
    out.push('\n');
    out.push_str(&"-".repeat(out.len() - 1));
    out.push('\n');
    for r in &rows {
        let cells: Vec<&str> = r.iter().map(String::as_str).collect();
        out.push_str(&line(&cells));
        out.push('\n');
    }
    out
}

/// Per-metric mean over images where the metric is defined.
pub fn macro_average(images: &[ImageReport]) -> (Metrics, Score) {
    fn mean(values: impl Iterator<Item = Score>) -> Score {
        let defined: Vec<f64> = values.filter_map(Score::value).collect();
        if defined.is_empty() {
            Score::Undefined("undefined for every image")
        } else {
            Score::Defined(defined.iter().sum::<f64>() / defined.len() as f64)
        }
    }
    let m = |f: fn(&Metrics) -> Score| mean(images.iter().map(|r| f(&r.metrics)));
    (
        Metrics {
            se: m(|x| x.se),
            sp: m(|x| x.sp),
            acc: m(|x| x.acc),
            f1: m(|x| x.f1),
            jaccard: m(|x| x.jaccard),
        },
        mean(images.iter().map(|r| r.auc)),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEvaluation {
    /// Metrics from counts pooled over every image.
    pub pooled: MetricsReport,
    /// Mean of the per-image metrics.
    pub macro_metrics: Metrics,
    pub macro_auc: Score,
    /// Sorted by sample id.
    pub per_image: Vec<ImageReport>,
}

impl DatasetEvaluation {
    pub fn per_image_csv(&self) -> String {
        let mut s = String::from("id,tp,tn,fp,fn,se,sp,acc,auc,f1,jaccard\n");
        for r in &self.per_image {
            let (c, m) = (&r.counts, &r.metrics);
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                r.id, c.tp, c.tn, c.fp, c.fn_, m.se, m.sp, m.acc, r.auc, m.f1, m.jaccard
            );
        }
        s
    }
}

/// Accumulates per-image results into a pooled evaluation.
pub struct Evaluator {
    dataset: String,
    model: String,
    params: usize,
    counts: ConfusionCounts,
    auc: AucAccumulator,
    images: Vec<ImageReport>,
}

impl Evaluator {
    pub fn new(dataset: impl Into<String>, model: impl Into<String>, params: usize) -> Self {
        Evaluator {
            dataset: dataset.into(),
            model: model.into(),
            params,
            counts: ConfusionCounts::default(),
            auc: AucAccumulator::default(),
            images: Vec::new(),
        }
    }

    pub fn add(&mut self, sample: &Sample, prediction: &Prediction) -> Result<&ImageReport, EvalError> {
        let wrap = |e: EvalError| EvalError::Sample {
            id: sample.id().to_string(),
            source: Box::new(e),
        };
        let mask = sample.fov_mask();
        let counts = confusion(&prediction.label, sample.label(), mask).map_err(wrap)?;
        let metrics = metrics_from_counts(&counts).map_err(wrap)?;
        let mut auc = AucAccumulator::default();
        auc.add(&prediction.foreground, sample.label(), mask).map_err(wrap)?;
        self.auc.add(&prediction.foreground, sample.label(), mask).map_err(wrap)?;
        self.counts.merge(&counts);
        self.images.push(ImageReport {
            id: sample.id().to_string(),
            counts,
            metrics,
            auc: auc.auc(),
        });
        Ok(self.images.last().expect("just pushed"))
    }

    pub fn finish(mut self) -> Result<DatasetEvaluation, EvalError> {
        let metrics = metrics_from_counts(&self.counts)?;
        self.images.sort_by(|a, b| a.id.cmp(&b.id));
        let (macro_metrics, macro_auc) = macro_average(&self.images);
        Ok(DatasetEvaluation {
            pooled: MetricsReport {
                dataset: self.dataset,
                model: self.model,
                counts: self.counts,
                metrics,
                auc: self.auc.auc(),
                params: self.params,
            },
            macro_metrics,
            macro_auc,
            per_image: self.images,
        })
    }
}

/// Runs the model over a test set and pools the results (micro-average).
pub fn evaluate_dataset<T: Float, S: SampleSource + ?Sized>(
    model: &Model<T>,
    test_set: &S,
    dataset: &str,
    model_name: &str,
) -> Result<DatasetEvaluation, EvalError> {
    if test_set.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut ev = Evaluator::new(dataset, model_name, model.num_parameters());
    for i in 0..test_set.len() {
        let sample = test_set.get(i)?;
        let pred = predict_sample(model, &sample).map_err(|e| EvalError::Sample {
            id: sample.id().to_string(),
            source: Box::new(e),
        })?;
        ev.add(&sample, &pred)?;
    }
    ev.finish()
}
