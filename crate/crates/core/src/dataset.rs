//! CSV dump format for training sets: a `# nnorder-training v1 ...` line
//! with the model, seed and stream, then columns `x1..xd,label`.
//! Coordinates use the shortest representation that parses back exactly.

use thiserror::Error;

use crate::emit::FORMAT_VERSION;
use crate::sampling::{Label, SampleModel, TrainingSet};

pub const TRAINING_FORMAT: &str = "nnorder-training";

#[derive(Debug, Error, PartialEq)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("training set has no rows")]
    Empty,
}

fn parse_err(line: usize, message: impl ToString) -> DatasetError {
    DatasetError::Parse {
        line,
        message: message.to_string(),
    }
}

pub fn training_to_csv(set: &TrainingSet) -> String {
    let model = match set.model() {
        SampleModel::Poisson => "poisson",
        SampleModel::Binomial => "binomial",
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (1..=set.dim()).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).expect("in-memory write");
    for i in 0..set.len() {
        let mut rec: Vec<String> = set.point(i).iter().map(|v| v.to_string()).collect();
        rec.push(set.labels()[i].as_str().to_string());
        w.write_record(&rec).expect("in-memory write");
    }
    let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8");
    format!(
        "# {TRAINING_FORMAT} v{FORMAT_VERSION} model={model} seed={} stream={}\n{body}",
        set.seed(),
        set.stream()
    )
}

pub fn training_from_csv(text: &str) -> Result<TrainingSet, DatasetError> {
    let mut parts = text.splitn(2, '\n');
    let tag = parts.next().unwrap_or_default().trim();
    let mut fields = tag.split_whitespace();
    if fields.next() != Some("#") || fields.next() != Some(TRAINING_FORMAT) {
        return Err(parse_err(1, format!("expected '# {TRAINING_FORMAT} v{FORMAT_VERSION}'")));
    }
    if fields.next() != Some(&format!("v{FORMAT_VERSION}")) {
        return Err(parse_err(1, "unsupported format version"));
    }
    let (mut model, mut seed, mut stream) = (SampleModel::Poisson, 0u64, 0u64);
    for kv in fields {
        match kv.split_once('=') {
            Some(("model", "poisson")) => model = SampleModel::Poisson,
            Some(("model", "binomial")) => model = SampleModel::Binomial,
            Some(("seed", v)) => seed = v.parse().map_err(|e| parse_err(1, e))?,
            Some(("stream", v)) => stream = v.parse().map_err(|e| parse_err(1, e))?,
            _ => return Err(parse_err(1, format!("unknown field {kv:?}"))),
        }
    }
    let mut r = csv::Reader::from_reader(parts.next().unwrap_or_default().as_bytes());
    let headers = r.headers().map_err(|e| parse_err(2, e))?.clone();
    let dim = headers.len().saturating_sub(1);
    let expected: Vec<String> = (1..=dim).map(|j| format!("x{j}")).chain(["label".into()]).collect();
    if dim == 0 || headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse_err(2, "header must be x1..xd,label"));
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i + 3;
        let rec = rec.map_err(|e| parse_err(line, e))?;
        for v in rec.iter().take(dim) {
            points.push(v.parse::<f64>().map_err(|e| parse_err(line, e))?);
        }
        labels.push(rec[dim].parse::<Label>().map_err(|e| parse_err(line, e))?);
    }
    if labels.is_empty() {
        return Err(DatasetError::Empty);
    }
    TrainingSet::new(points, dim, labels, model, seed, stream).map_err(|e| parse_err(0, e))
}
