//! Confusion matrices, IoU reports, ablation tables and palette renderings.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::synth::{Group, Taxonomy};
use crate::tensor::{LabelMap, Tensor, IGNORE};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// Rows are ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tallies every pixel whose ground truth is not 255.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::Shape {
                op: "accumulate",
                lhs: pred.shape().to_vec(),
                rhs: gt.shape().to_vec(),
            });
        }
        let k = self.k;
        if let Some((&g, &p)) = gt
            .data()
            .iter()
            .zip(pred.data())
            .find(|(&g, &p)| g != IGNORE && (g as usize >= k || p as usize >= k))
        {
            return Err(Error::invalid(
                "accumulate",
                format!("class id out of range for {k} classes (gt {g}, pred {p})"),
            ));
        }
        for (&g, &p) in gt.data().iter().zip(pred.data()) {
            if g != IGNORE {
                self.counts[g as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::invalid(
                "merge",
                format!("{} vs {} classes", self.k, other.k),
            ));
        }
        self.counts
            .iter_mut()
            .zip(&other.counts)
            .for_each(|(a, b)| *a += b);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// `None` for classes absent from both prediction and ground truth.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub static_miou: f64,
    pub dynamic_miou: f64,
    /// Ground-truth pixels per class.
    pub pixels: Vec<u64>,
}

fn mean_of(vals: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = vals.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Per-class IoU, mIoU and the static / dynamic-and-small group means.
pub fn iou(cm: &ConfusionMatrix, taxonomy: &Taxonomy) -> Result<EvalReport> {
    let k = cm.num_classes();
    if k != taxonomy.num_classes() {
        return Err(Error::invalid(
            "iou",
            format!(
                "matrix has {k} classes, taxonomy {}",
                taxonomy.num_classes()
            ),
        ));
    }
    if cm.total() == 0 {
        return Err(Error::invalid("iou", "empty confusion matrix"));
    }
    let mut iou = Vec::with_capacity(k);
    let mut pixels = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.get(c, c);
        let gt: u64 = (0..k).map(|p| cm.get(c, p)).sum();
        let pred: u64 = (0..k).map(|g| cm.get(g, c)).sum();
        let denom = gt + pred - tp;
        iou.push((denom > 0).then(|| tp as f64 / denom as f64));
        pixels.push(gt);
    }
    let group_mean = |g: Group| {
        mean_of(
            taxonomy
                .classes()
                .iter()
                .filter(|c| c.group() == g)
                .filter_map(|c| iou[c.id as usize]),
        )
    };
    Ok(EvalReport {
        class_names: taxonomy
            .classes()
            .iter()
            .map(|c| c.name.to_string())
            .collect(),
        miou: mean_of(iou.iter().flatten().copied()),
        static_miou: group_mean(Group::Static),
        dynamic_miou: group_mean(Group::DynamicSmall),
        iou,
        pixels,
    })
}

impl EvalReport {
    /// `class,iou` rows followed by the summary rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,iou\n");
        for (name, v) in self.class_names.iter().zip(&self.iou) {
            match v {
                Some(v) => writeln!(s, "{name},{v:.6}").unwrap(),
                None => writeln!(s, "{name},").unwrap(),
            }
        }
        writeln!(s, "miou,{:.6}", self.miou).unwrap();
        writeln!(s, "static,{:.6}", self.static_miou).unwrap();
        writeln!(s, "dynamic_small,{:.6}", self.dynamic_miou).unwrap();
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| class | IoU | pixels |\n|---|---:|---:|\n");
        for ((name, v), px) in self.class_names.iter().zip(&self.iou).zip(&self.pixels) {
            let v = v.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
            writeln!(s, "| {name} | {v} | {px} |").unwrap();
        }
        writeln!(s, "\n| mIoU | static | dynamic+small |\n|---:|---:|---:|").unwrap();
        writeln!(
            s,
            "| {:.2} | {:.2} | {:.2} |",
            100.0 * self.miou,
            100.0 * self.static_miou,
            100.0 * self.dynamic_miou
        )
        .unwrap();
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("report.csv", self.to_csv()),
            ("report.md", self.to_markdown()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Student inference on each image; returns the per-image argmax maps.
pub fn predict_all<T: Scalar>(
    params: &ModelParams<T>,
    images: &[&Tensor<f32>],
) -> Result<Vec<LabelMap>> {
    images
        .iter()
        .map(|img| params.forward(&img.cast()).map(|o| o.argmax()))
        .collect()
}

pub fn evaluate_predictions(
    preds: &[LabelMap],
    gts: &[&LabelMap],
    taxonomy: &Taxonomy,
) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(
            "evaluate",
            format!("{} predictions for {} labels", preds.len(), gts.len()),
        ));
    }
    let mut cm = ConfusionMatrix::new(taxonomy.num_classes());
    for (p, g) in preds.iter().zip(gts) {
        cm.accumulate(p, g)?;
    }
    iou(&cm, taxonomy)
}

/// Evaluates a model on `(image, label)` pairs.
pub fn evaluate_model<T: Scalar>(
    params: &ModelParams<T>,
    samples: &[(Tensor<f32>, LabelMap)],
    taxonomy: &Taxonomy,
) -> Result<(EvalReport, Vec<LabelMap>)> {
    let images: Vec<_> = samples.iter().map(|s| &s.0).collect();
    let gts: Vec<_> = samples.iter().map(|s| &s.1).collect();
    let preds = predict_all(params, &images)?;
    Ok((evaluate_predictions(&preds, &gts, taxonomy)?, preds))
}

/// Binary PPM (P6) with the class palette; 255 and unknown ids are black.
pub fn encode_ppm(pred: &LabelMap, taxonomy: &Taxonomy) -> Result<Vec<u8>> {
    if pred.rank() != 2 {
        return Err(Error::invalid(
            "render_prediction",
            format!("expected [H,W], got {:?}", pred.shape()),
        ));
    }
    let (h, w) = (pred.shape()[0], pred.shape()[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for &v in pred.data() {
        let rgb = if (v as usize) < taxonomy.num_classes() {
            taxonomy.class(v).palette
        } else {
            [0, 0, 0]
        };
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

pub fn render_prediction(pred: &LabelMap, taxonomy: &Taxonomy, path: &Path) -> Result<()> {
    let bytes = encode_ppm(pred, taxonomy)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a P6 image back into class ids; black maps to 255.
pub fn decode_ppm(bytes: &[u8], taxonomy: &Taxonomy) -> Result<LabelMap> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos,
                msg: "truncated PPM header".into(),
            });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(Error::Format {
            offset: 0,
            msg: format!("unsupported PPM header {fields:?}"),
        });
    }
    let dim = |s: &str| {
        s.parse::<usize>().map_err(|_| Error::Format {
            offset: 0,
            msg: format!("bad dimension {s:?}"),
        })
    };
    let (w, h) = (dim(&fields[1])?, dim(&fields[2])?);
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != w * h * 3 {
        return Err(Error::Format {
            offset: pos,
            msg: format!("expected {} pixel bytes, found {}", w * h * 3, body.len()),
        });
    }
    let data = body
        .chunks_exact(3)
        .enumerate()
        .map(|(i, px)| {
            let rgb = [px[0], px[1], px[2]];
            if rgb == [0, 0, 0] {
                return Ok(IGNORE);
            }
            taxonomy.palette_lookup(rgb).ok_or_else(|| Error::Format {
                offset: pos + 3 * i,
                msg: format!("colour {rgb:?} is not in the palette"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(vec![h, w], data)
}

pub fn read_prediction(path: &Path, taxonomy: &Taxonomy) -> Result<LabelMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, taxonomy)
}

/// All seeds of one ablation variant.
#[derive(Debug, Clone)]
pub struct VariantResult {
    pub name: String,
    pub reports: Vec<EvalReport>,
}

impl VariantResult {
    pub fn mean(&self, f: impl Fn(&EvalReport) -> f64) -> f64 {
        mean_of(self.reports.iter().map(f))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub name: String,
    pub per_seed: Vec<f64>,
    pub miou: f64,
    pub static_miou: f64,
    pub dynamic_miou: f64,
    pub delta_miou: f64,
    pub delta_static: f64,
    pub delta_dynamic: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub markdown: String,
    pub csv: String,
}

/// Seed-averaged table with deltas against the first variant.
pub fn compare_runs(variants: &[VariantResult]) -> Result<Comparison> {
    if variants.len() < 2 {
        return Err(Error::invalid("compare_runs", "need at least two variants"));
    }
    let names = &variants[0]
        .reports
        .first()
        .ok_or_else(|| {
            Error::invalid(
                "compare_runs",
                format!("variant {} has no reports", variants[0].name),
            )
        })?
        .class_names;
    for v in variants {
        if v.reports.is_empty() {
            return Err(Error::invalid(
                "compare_runs",
                format!("variant {} has no reports", v.name),
            ));
        }
        if v.reports.iter().any(|r| &r.class_names != names) {
            return Err(Error::invalid(
                "compare_runs",
                format!("taxonomy mismatch in variant {}", v.name),
            ));
        }
    }
    let base = &variants[0];
    let (bm, bs, bd) = (
        base.mean(|r| r.miou),
        base.mean(|r| r.static_miou),
        base.mean(|r| r.dynamic_miou),
    );
    let rows: Vec<ComparisonRow> = variants
        .iter()
        .map(|v| {
            let (m, s, d) = (
                v.mean(|r| r.miou),
                v.mean(|r| r.static_miou),
                v.mean(|r| r.dynamic_miou),
            );
            ComparisonRow {
                name: v.name.clone(),
                per_seed: v.reports.iter().map(|r| r.miou).collect(),
                miou: m,
                static_miou: s,
                dynamic_miou: d,
                delta_miou: m - bm,
                delta_static: s - bs,
                delta_dynamic: d - bd,
            }
        })
        .collect();
    let seeds = rows.iter().map(|r| r.per_seed.len()).max().unwrap_or(0);
    let seed_cols: Vec<String> = (0..seeds).map(|i| format!("seed{i}")).collect();

    let mut md = format!(
        "| variant | {} | mIoU | static | dyn+small | Δ mIoU | Δ static | Δ dyn+small |\n",
        seed_cols.join(" | ")
    );
    md.push_str(&format!(
        "|---|{}---:|---:|---:|---:|---:|---:|\n",
        "---:|".repeat(seeds)
    ));
    let mut csv = format!(
        "variant,{},miou,static,dynamic_small,delta_miou,delta_static,delta_dynamic_small\n",
        seed_cols.join(",")
    );
    for r in &rows {
        let cell = |i: usize| r.per_seed.get(i).copied();
        let md_seeds: Vec<String> = (0..seeds)
            .map(|i| cell(i).map_or("-".into(), |v| format!("{:.2}", 100.0 * v)))
            .collect();
        let csv_seeds: Vec<String> = (0..seeds)
            .map(|i| cell(i).map_or(String::new(), |v| format!("{v:.6}")))
            .collect();
        writeln!(
            md,
            "| {} | {} | {:.2} | {:.2} | {:.2} | {:+.2} | {:+.2} | {:+.2} |",
            r.name,
            md_seeds.join(" | "),
            100.0 * r.miou,
            100.0 * r.static_miou,
            100.0 * r.dynamic_miou,
            100.0 * r.delta_miou,
            100.0 * r.delta_static,
            100.0 * r.delta_dynamic
        )
        .unwrap();
        writeln!(
            csv,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.name,
            csv_seeds.join(","),
            r.miou,
            r.static_miou,
            r.dynamic_miou,
            r.delta_miou,
            r.delta_static,
            r.delta_dynamic
        )
        .unwrap();
    }
    Ok(Comparison {
        rows,
        markdown: md,
        csv,
    })
}
