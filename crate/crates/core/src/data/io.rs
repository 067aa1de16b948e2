// Dataset directory: meta.json + train.csv + test.csv, one sample per row
// as `label, v_1, ..., v_{C*L}` (channel-major).

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TimeSeriesSample;
use crate::error::{io_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub channels: usize,
    pub length: usize,
    pub classes: usize,
}

/// Reads every sample of `train.csv` and `test.csv` (in that order).
pub fn load_dataset(dir: &Path) -> Result<(Vec<TimeSeriesSample>, DatasetMeta)> {
    let meta_path = dir.join("meta.json");
    let meta: DatasetMeta =
        serde_json::from_str(&fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?)?;
    if meta.channels == 0 || meta.length == 0 || meta.classes == 0 {
        return Err(Error::Validation(format!(
            "meta.json extents must be positive: {meta:?}"
        )));
    }
    let mut samples = read_split(&dir.join("train.csv"), &meta)?;
    samples.extend(read_split(&dir.join("test.csv"), &meta)?);

    let seen: BTreeSet<usize> = samples.iter().map(|s| s.label).collect();
    if let Some(&bad) = seen.iter().find(|&&l| l >= meta.classes) {
        return Err(Error::Validation(format!(
            "label {bad} outside declared {} classes",
            meta.classes
        )));
    }
    if let Some(missing) = (0..meta.classes).find(|c| !seen.contains(c)) {
        return Err(Error::Validation(format!(
            "labels must cover 0..{}; class {missing} has no samples",
            meta.classes
        )));
    }
    Ok((samples, meta))
}

fn read_split(path: &Path, meta: &DatasetMeta) -> Result<Vec<TimeSeriesSample>> {
    let file_name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            other => Error::Format {
                file: file_name.clone(),
                row: 0,
                msg: format!("{other:?}"),
            },
        })?;
    let width = meta.channels * meta.length;
    let mut out = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let fmt = |msg: String| Error::Format {
            file: file_name.clone(),
            row,
            msg,
        };
        let record = record.map_err(|e| fmt(e.to_string()))?;
        if record.len() != width + 1 {
            return Err(fmt(format!(
                "expected {} fields (label + {width} values), found {}",
                width + 1,
                record.len()
            )));
        }
        let label: usize = record[0]
            .parse()
            .map_err(|_| fmt(format!("bad label {:?}", &record[0])))?;
        let values = record
            .iter()
            .skip(1)
            .map(|f| {
                f.parse::<f32>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| fmt(format!("bad value {f:?}")))
            })
            .collect::<Result<Vec<f32>>>()?;
        let values = Tensor::new(vec![meta.channels, meta.length], values)?;
        out.push(TimeSeriesSample::new(values, label)?);
    }
    Ok(out)
}

/// Writes a dataset directory readable by [`load_dataset`].
pub fn write_dataset(
    dir: &Path,
    meta: &DatasetMeta,
    train: &[TimeSeriesSample],
    test: &[TimeSeriesSample],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(meta)?).map_err(io_err(&meta_path))?;
    for (name, samples) in [("train.csv", train), ("test.csv", test)] {
        let path = dir.join(name);
        let mut text = String::new();
        for s in samples {
            text.push_str(&s.label.to_string());
            for v in s.values.data() {
                text.push(',');
                text.push_str(&v.to_string());
            }
            text.push('\n');
        }
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}
