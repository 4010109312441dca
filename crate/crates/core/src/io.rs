//! File formats.
//!
//! Datasets and predictions are JSONL: a header object naming the class
//! vocabulary, then one object per image. Every JSON document is written with
//! sorted keys and floats in `%.17g` form, so equal values always produce
//! equal bytes and reading back recovers every `f64` exactly.
//!
//! Dataset header and record:
//!
//! ```text
//! {"classes":[..],"feature_dim":16,"kind":"adpd-dataset","n_regions":8,"version":1}
//! {"anatomy_labels":{"3":["c"]},"gt":{"boxes":[{"box":[x1,y1,x2,y2],"class":"c"}],"image_labels":["c"]},
//!  "image_id":"img-0","regions":[{"box":[..],"features":[..],"pathology_probs":{"c":0.5},"presence":1,"region_id":0}]}
//! ```
//!
//! Predictions header and record:
//!
//! ```text
//! {"classes":[..],"kind":"adpd-predictions","version":1}
//! {"boxes":[{"box":[..],"class":"c","score":0.9}],"image_id":"img-0"}
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample, SampleGt};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, GroundTruth, ImagePredictions};
use crate::geometry::BBox;
use crate::head::HistoryRow;
use crate::inference::{ClassMapping, Combiner, PathologyBox};

pub const FORMAT_VERSION: u32 = 1;
const DATASET_KIND: &str = "adpd-dataset";
const PREDICTIONS_KIND: &str = "adpd-predictions";

/// `%.17g`: 17 significant digits, trailing zeros removed, exponent form
/// outside `[1e-4, 1e17)`.
pub fn format_f64(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..17).contains(&exp) {
        trim(&format!("{v:.*}", (16 - exp) as usize))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    }
}

struct G17;

impl serde_json::ser::Formatter for G17 {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> std::io::Result<()> {
        w.write_all(format_f64(v).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, v: f32) -> std::io::Result<()> {
        self.write_f64(w, v as f64)
    }
}

/// Compact JSON with sorted keys and `%.17g` floats.
pub fn to_json_line<T: Serialize>(value: &T) -> Result<String> {
    // going through `Value` sorts object keys
    let value = serde_json::to_value(value)?;
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, G17);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
}

/// Indented variant of [`to_json_line`] for reports.
pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    let compact = to_json_line(value)?;
    let value: serde_json::Value = serde_json::from_str(&compact)?;
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, PrettyG17::default());
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(String::from_utf8(out).expect("serde_json emits UTF-8"))
}

#[derive(Default)]
struct PrettyG17(serde_json::ser::PrettyFormatter<'static>);

impl serde_json::ser::Formatter for PrettyG17 {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, v: f64) -> std::io::Result<()> {
        w.write_all(format_f64(v).as_bytes())
    }
    fn begin_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_array(w)
    }
    fn end_array<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array(w)
    }
    fn begin_array_value<W: ?Sized + Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        self.0.begin_array_value(w, first)
    }
    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array_value(w)
    }
    fn begin_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object(w)
    }
    fn end_object<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object(w)
    }
    fn begin_object_key<W: ?Sized + Write>(
        &mut self,
        w: &mut W,
        first: bool,
    ) -> std::io::Result<()> {
        self.0.begin_object_key(w, first)
    }
    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object_value(w)
    }
    fn end_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_object_value(w)
    }
}

// ---------------------------------------------------------------- records

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    kind: String,
    version: u32,
    classes: Vec<String>,
    n_regions: usize,
    #[serde(default)]
    feature_dim: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionRecord {
    region_id: usize,
    #[serde(rename = "box")]
    bbox: BBox,
    presence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pathology_probs: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GtBoxRecord {
    class: String,
    #[serde(rename = "box")]
    bbox: BBox,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GtRecord {
    boxes: Vec<GtBoxRecord>,
    image_labels: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRecord {
    image_id: String,
    regions: Vec<RegionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt: Option<GtRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    anatomy_labels: Option<BTreeMap<String, Vec<String>>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionsHeader {
    kind: String,
    version: u32,
    classes: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredBoxRecord {
    class: String,
    #[serde(rename = "box")]
    bbox: BBox,
    score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionsRecord {
    image_id: String,
    boxes: Vec<PredBoxRecord>,
}

// ---------------------------------------------------------------- reading

/// Error context for one line of an input file.
struct LineCtx<'a> {
    file: &'a Path,
    line: usize,
}

impl LineCtx<'_> {
    fn err(&self, field: impl Into<String>, message: impl Into<String>) -> Error {
        Error::Data {
            file: self.file.to_path_buf(),
            line: self.line,
            field: field.into(),
            message: message.into(),
        }
    }

    fn parse<T: DeserializeOwned>(&self, text: &str) -> Result<T> {
        let mut de = serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let path = e.path().to_string();
            self.err(
                if path == "." { "<record>".into() } else { path },
                e.into_inner().to_string(),
            )
        })
    }

    fn class(&self, classes: &[String], name: &str, field: String) -> Result<usize> {
        classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| self.err(field, format!("unknown class `{name}`")))
    }

    fn probability(&self, v: f64, field: impl Into<String>) -> Result<f64> {
        if (0.0..=1.0).contains(&v) {
            Ok(v)
        } else {
            Err(self.err(field, format!("{v} is not a probability")))
        }
    }
}

/// Non-blank lines with their 1-based line numbers.
fn numbered_lines<'a, R: Read + 'a>(
    r: R,
    file: &'a Path,
) -> impl Iterator<Item = Result<(usize, String)>> + 'a {
    BufReader::new(r)
        .lines()
        .enumerate()
        .filter_map(move |(i, line)| match line {
            Ok(l) if l.trim().is_empty() => None,
            Ok(l) => Some(Ok((i + 1, l))),
            Err(e) => Some(Err(Error::Data {
                file: file.to_path_buf(),
                line: i + 1,
                field: "<line>".into(),
                message: e.to_string(),
            })),
        })
}

fn check_header(ctx: &LineCtx, kind: &str, expected: &str, version: u32) -> Result<()> {
    if kind != expected {
        return Err(ctx.err("kind", format!("expected `{expected}`, found `{kind}`")));
    }
    if version != FORMAT_VERSION {
        return Err(ctx.err("version", format!("unsupported version {version}")));
    }
    Ok(())
}

fn check_vocabulary(ctx: &LineCtx, classes: &[String]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for (i, c) in classes.iter().enumerate() {
        if !seen.insert(c) {
            return Err(ctx.err(format!("classes[{i}]"), format!("duplicate class `{c}`")));
        }
    }
    Ok(())
}

pub fn read_dataset(r: impl Read, file: &Path) -> Result<Dataset> {
    let mut lines = numbered_lines(r, file);
    let (line, text) = lines.next().transpose()?.ok_or_else(|| Error::Data {
        file: file.to_path_buf(),
        line: 0,
        field: "<header>".into(),
        message: "empty file".into(),
    })?;
    let ctx = LineCtx { file, line };
    let header: DatasetHeader = ctx.parse(&text)?;
    check_header(&ctx, &header.kind, DATASET_KIND, header.version)?;
    check_vocabulary(&ctx, &header.classes)?;
    if header.n_regions == 0 {
        return Err(ctx.err("n_regions", "must be positive"));
    }

    let mut ds = Dataset {
        classes: header.classes,
        n_regions: header.n_regions,
        feature_dim: header.feature_dim,
        samples: Vec::new(),
    };
    let mut ids = std::collections::HashSet::new();
    for item in lines {
        let (line, text) = item?;
        let ctx = LineCtx { file, line };
        let record: DatasetRecord = ctx.parse(&text)?;
        if !ids.insert(record.image_id.clone()) {
            return Err(ctx.err(
                "image_id",
                format!("duplicate image id `{}`", record.image_id),
            ));
        }
        let sample = sample_from_record(&ctx, record, &mut ds)?;
        ds.samples.push(sample);
    }
    Ok(ds)
}

fn sample_from_record(ctx: &LineCtx, rec: DatasetRecord, ds: &mut Dataset) -> Result<Sample> {
    let (nr, nc) = (ds.n_regions, ds.classes.len());
    let has_features = rec.regions.first().is_some_and(|r| r.features.is_some());
    let has_probs = rec
        .regions
        .first()
        .is_some_and(|r| r.pathology_probs.is_some());

    let placeholder = BBox::clamped(0.0, 0.0, 0.0, 0.0);
    let mut region_boxes = vec![placeholder; nr];
    let mut presence = vec![0.0; nr];
    let mut listed = vec![false; nr];
    let mut features: Option<Array2<f64>> = None;
    let mut probs = has_probs.then(|| Array2::zeros((nr, nc)));

    for (i, reg) in rec.regions.into_iter().enumerate() {
        let field = |name: &str| format!("regions[{i}].{name}");
        let r = reg.region_id;
        if r >= nr {
            return Err(ctx.err(field("region_id"), format!("{r} outside 0..{nr}")));
        }
        if std::mem::replace(&mut listed[r], true) {
            return Err(ctx.err(field("region_id"), format!("region {r} listed twice")));
        }
        region_boxes[r] = reg.bbox;
        presence[r] = ctx.probability(reg.presence, field("presence"))?;

        match (reg.features, has_features) {
            (Some(f), true) => {
                if let Some(v) = f.iter().find(|v| !v.is_finite()) {
                    return Err(ctx.err(field("features"), format!("non-finite value {v}")));
                }
                let dim = *ds.feature_dim.get_or_insert(f.len());
                if f.len() != dim {
                    return Err(ctx.err(
                        field("features"),
                        format!("expected {dim} values, found {}", f.len()),
                    ));
                }
                features
                    .get_or_insert_with(|| Array2::zeros((nr, dim)))
                    .row_mut(r)
                    .assign(&ndarray::ArrayView1::from(&f));
            }
            (None, false) => {}
            _ => return Err(ctx.err(field("features"), "must be given for all regions or none")),
        }

        match (reg.pathology_probs, probs.as_mut()) {
            (Some(map), Some(p)) => {
                if map.len() != nc {
                    return Err(ctx.err(
                        field("pathology_probs"),
                        format!("expected {nc} classes, found {}", map.len()),
                    ));
                }
                for (name, v) in map {
                    let f = field(&format!("pathology_probs.{name}"));
                    let c = ctx.class(&ds.classes, &name, f.clone())?;
                    p[(r, c)] = ctx.probability(v, f)?;
                }
            }
            (None, None) => {}
            _ => {
                return Err(ctx.err(
                    field("pathology_probs"),
                    "must be given for all regions or none",
                ))
            }
        }
    }

    let gt = rec
        .gt
        .map(|g| {
            let mut labels = vec![false; nc];
            for (i, name) in g.image_labels.iter().enumerate() {
                labels[ctx.class(&ds.classes, name, format!("gt.image_labels[{i}]"))?] = true;
            }
            let mut boxes = Vec::with_capacity(g.boxes.len());
            for (i, b) in g.boxes.iter().enumerate() {
                let c = ctx.class(&ds.classes, &b.class, format!("gt.boxes[{i}].class"))?;
                if boxes.iter().any(|&(k, _)| k == c) {
                    return Err(ctx.err(
                        format!("gt.boxes[{i}].class"),
                        format!("second box for class `{}`", b.class),
                    ));
                }
                if !labels[c] {
                    return Err(ctx.err(
                        format!("gt.boxes[{i}].class"),
                        format!("class `{}` has a box but no image label", b.class),
                    ));
                }
                boxes.push((c, b.bbox));
            }
            Ok(SampleGt {
                boxes,
                image_labels: labels,
            })
        })
        .transpose()?;

    let anatomy_labels = rec
        .anatomy_labels
        .map(|map| {
            let mut l = Array2::from_elem((nr, nc), false);
            for (key, names) in map {
                let field = format!("anatomy_labels.{key}");
                let r: usize = key
                    .parse()
                    .ok()
                    .filter(|&r| r < nr)
                    .ok_or_else(|| ctx.err(field.clone(), "not a region id"))?;
                for name in &names {
                    l[(r, ctx.class(&ds.classes, name, field.clone())?)] = true;
                }
            }
            Ok::<_, Error>(l)
        })
        .transpose()?;

    Ok(Sample {
        image_id: rec.image_id,
        region_boxes,
        presence,
        listed,
        features,
        pathology_probs: probs,
        anatomy_labels,
        gt,
    })
}

// ---------------------------------------------------------------- writing

fn finite_or_err(values: impl IntoIterator<Item = f64>, what: &str, id: &str) -> Result<()> {
    match values.into_iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::NonFinite(format!("{what} of image `{id}`: {v}"))),
        None => Ok(()),
    }
}

fn dataset_record(ds: &Dataset, s: &Sample) -> Result<DatasetRecord> {
    let names = |flags: &mut dyn Iterator<Item = bool>| -> Vec<String> {
        flags
            .zip(&ds.classes)
            .filter(|(f, _)| *f)
            .map(|(_, c)| c.clone())
            .collect()
    };
    let mut regions = Vec::new();
    for r in (0..s.n_regions()).filter(|&r| s.listed[r]) {
        let features = s.features.as_ref().map(|f| f.row(r).to_vec());
        if let Some(f) = &features {
            finite_or_err(f.iter().copied(), "features", &s.image_id)?;
        }
        let pathology_probs = s.pathology_probs.as_ref().map(|p| {
            ds.classes
                .iter()
                .cloned()
                .zip(p.row(r).iter().copied())
                .collect()
        });
        regions.push(RegionRecord {
            region_id: r,
            bbox: s.region_boxes[r],
            presence: s.presence[r],
            features,
            pathology_probs,
        });
    }
    let gt = s.gt.as_ref().map(|g| GtRecord {
        boxes: g
            .boxes
            .iter()
            .map(|&(c, b)| GtBoxRecord {
                class: ds.classes[c].clone(),
                bbox: b,
            })
            .collect(),
        image_labels: names(&mut g.image_labels.iter().copied()),
    });
    let anatomy_labels = s.anatomy_labels.as_ref().map(|l| {
        l.rows()
            .into_iter()
            .enumerate()
            .filter(|(_, row)| row.iter().any(|&v| v))
            .map(|(r, row)| (r.to_string(), names(&mut row.iter().copied())))
            .collect()
    });
    Ok(DatasetRecord {
        image_id: s.image_id.clone(),
        regions,
        gt,
        anatomy_labels,
    })
}

pub fn write_dataset(w: &mut impl Write, ds: &Dataset) -> Result<()> {
    ds.validate()?;
    let header = DatasetHeader {
        kind: DATASET_KIND.into(),
        version: FORMAT_VERSION,
        classes: ds.classes.clone(),
        n_regions: ds.n_regions,
        feature_dim: ds.feature_dim,
    };
    writeln!(w, "{}", to_json_line(&header)?)?;
    for s in &ds.samples {
        writeln!(w, "{}", to_json_line(&dataset_record(ds, s)?)?)?;
    }
    Ok(())
}

/// Predictions of a set of images over a named class vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionsFile {
    pub classes: Vec<String>,
    pub images: Vec<ImagePredictions>,
}

pub fn write_predictions(w: &mut impl Write, p: &PredictionsFile) -> Result<()> {
    let header = PredictionsHeader {
        kind: PREDICTIONS_KIND.into(),
        version: FORMAT_VERSION,
        classes: p.classes.clone(),
    };
    writeln!(w, "{}", to_json_line(&header)?)?;
    for img in &p.images {
        finite_or_err(img.boxes.iter().map(|b| b.score), "scores", &img.image_id)?;
        let boxes = img
            .boxes
            .iter()
            .map(|b| {
                let class = p.classes.get(b.class_id).cloned().ok_or_else(|| {
                    Error::arg(format!("class id {} outside vocabulary", b.class_id))
                })?;
                Ok(PredBoxRecord {
                    class,
                    bbox: b.bbox,
                    score: b.score,
                })
            })
            .collect::<Result<_>>()?;
        let rec = PredictionsRecord {
            image_id: img.image_id.clone(),
            boxes,
        };
        writeln!(w, "{}", to_json_line(&rec)?)?;
    }
    Ok(())
}

pub fn read_predictions(r: impl Read, file: &Path) -> Result<PredictionsFile> {
    let mut lines = numbered_lines(r, file);
    let (line, text) = lines.next().transpose()?.ok_or_else(|| Error::Data {
        file: file.to_path_buf(),
        line: 0,
        field: "<header>".into(),
        message: "empty file".into(),
    })?;
    let ctx = LineCtx { file, line };
    let header: PredictionsHeader = ctx.parse(&text)?;
    check_header(&ctx, &header.kind, PREDICTIONS_KIND, header.version)?;
    check_vocabulary(&ctx, &header.classes)?;
    let mut images = Vec::new();
    for item in lines {
        let (line, text) = item?;
        let ctx = LineCtx { file, line };
        let rec: PredictionsRecord = ctx.parse(&text)?;
        let boxes = rec
            .boxes
            .iter()
            .enumerate()
            .map(|(i, b)| {
                Ok(PathologyBox {
                    class_id: ctx.class(&header.classes, &b.class, format!("boxes[{i}].class"))?,
                    bbox: b.bbox,
                    score: ctx.probability(b.score, format!("boxes[{i}].score"))?,
                })
            })
            .collect::<Result<_>>()?;
        images.push(ImagePredictions {
            image_id: rec.image_id,
            boxes,
        });
    }
    Ok(PredictionsFile {
        classes: header.classes,
        images,
    })
}

impl PredictionsFile {
    /// Re-indexes predictions onto the ground-truth vocabulary by name.
    pub fn align_to(&self, gt: &GroundTruth) -> Result<Vec<ImagePredictions>> {
        let index: Vec<usize> = self
            .classes
            .iter()
            .map(|c| {
                gt.classes.iter().position(|g| g == c).ok_or_else(|| {
                    Error::config(format!("predicted class `{c}` is not in the ground truth"))
                })
            })
            .collect::<Result<_>>()?;
        Ok(self
            .images
            .iter()
            .map(|img| ImagePredictions {
                image_id: img.image_id.clone(),
                boxes: img
                    .boxes
                    .iter()
                    .map(|b| PathologyBox {
                        class_id: index[b.class_id],
                        ..*b
                    })
                    .collect(),
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingEntry {
    pub sources: Vec<String>,
    pub combiner: Combiner,
}

/// Parses a mapping file: `{eval class: {"sources": [..], "combiner": "mean"|"max"}}`.
/// Evaluation classes are ordered by name.
pub fn parse_mapping(text: &str, file: &Path, training_classes: &[String]) -> Result<ClassMapping> {
    let ctx = LineCtx { file, line: 1 };
    let entries: BTreeMap<String, MappingEntry> = ctx.parse(text)?;
    for (name, e) in &entries {
        if e.sources.is_empty() {
            return Err(ctx.err(format!("{name}.sources"), "must not be empty"));
        }
        for (i, s) in e.sources.iter().enumerate() {
            ctx.class(training_classes, s, format!("{name}.sources[{i}]"))?;
        }
    }
    ClassMapping::from_names(
        entries
            .iter()
            .map(|(n, e)| (n.as_str(), e.sources.as_slice(), e.combiner)),
        training_classes,
    )
}

pub fn mapping_to_json(m: &ClassMapping, training_classes: &[String]) -> Result<String> {
    let entries: BTreeMap<&str, MappingEntry> = m
        .classes()
        .iter()
        .map(|c| {
            (
                c.name.as_str(),
                MappingEntry {
                    sources: c
                        .sources
                        .iter()
                        .map(|&i| training_classes[i].clone())
                        .collect(),
                    combiner: c.combiner,
                },
            )
        })
        .collect();
    to_json_pretty(&entries)
}

pub fn report_json(report: &EvalReport) -> Result<String> {
    to_json_pretty(&report.to_json())
}

/// Loss history with columns `step,total,detr,presence,l1,giou,loc,mil`.
pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut out = String::from("step,total,detr,presence,l1,giou,loc,mil\n");
    for h in history {
        let l = &h.loss;
        let cols = [
            l.total,
            l.detr.total,
            l.detr.presence,
            l.detr.l1,
            l.detr.giou,
            l.loc,
            l.mil,
        ];
        out.push_str(&h.step.to_string());
        for v in cols {
            out.push(',');
            out.push_str(&format_f64(v));
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------- paths

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Data {
        file: path.to_path_buf(),
        line: 0,
        field: "<file>".into(),
        message: e.to_string(),
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let ds = read_dataset(open(path)?, path)?;
    ds.validate()?;
    Ok(ds)
}

pub fn load_predictions(path: &Path) -> Result<PredictionsFile> {
    read_predictions(open(path)?, path)
}

pub fn load_mapping(path: &Path, training_classes: &[String]) -> Result<ClassMapping> {
    let mut text = String::new();
    open(path)?.read_to_string(&mut text)?;
    parse_mapping(&text, path, training_classes)
}

/// Writes through a buffer and flushes, surfacing write errors.
pub fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_file(path, |w| write_dataset(w, ds))
}

pub fn save_predictions(path: &Path, p: &PredictionsFile) -> Result<()> {
    write_file(path, |w| write_predictions(w, p))
}

pub fn save_text(path: &Path, text: &str) -> Result<()> {
    write_file(path, |w| Ok(w.write_all(text.as_bytes())?))
}

/// Path used in error messages for in-memory input.
pub fn memory_path() -> PathBuf {
    PathBuf::from("<memory>")
}
