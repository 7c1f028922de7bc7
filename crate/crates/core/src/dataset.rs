//! Newline-delimited dataset files.
//!
//! Line 0 is a header object carrying the series length, env widths, and the
//! normalization constants; every following line is one sample with its env
//! flattened row-major. Writing and re-parsing a file reproduces it byte for
//! byte (floats are printed in shortest round-trip form).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{
    DataKind, EnvFeature, SeriesSample, APP_ENV_DIM, BS_ENV_DIM, RSRP_ENV_DIM, RSRP_MAX_DBM,
    RSRP_MIN_DBM,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;
const MAX_SERIES_LEN: usize = 16_384;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub l: usize,
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub rsrp_min_dbm: f64,
    pub rsrp_max_dbm: f64,
}

impl DatasetHeader {
    pub fn new(l: usize) -> Self {
        DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            l,
            c1: BS_ENV_DIM,
            c2: APP_ENV_DIM,
            c3: RSRP_ENV_DIM,
            rsrp_min_dbm: RSRP_MIN_DBM,
            rsrp_max_dbm: RSRP_MAX_DBM,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RecordDto {
    sample_id: u64,
    kind: u8,
    values: Vec<f64>,
    env: Vec<f64>,
    env_shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<SeriesSample>,
}

impl Dataset {
    pub fn new(l: usize) -> Self {
        Dataset { header: DatasetHeader::new(l), samples: Vec::new() }
    }

    /// Combine per-kind sample lists into one dataset with sequential ids.
    pub fn from_parts(l: usize, parts: Vec<Vec<SeriesSample>>) -> Result<Dataset> {
        let mut ds = Dataset::new(l);
        let mut id = 0u64;
        for part in parts {
            for mut s in part {
                s.sample_id = id;
                id += 1;
                s.validate(l)?;
                ds.samples.push(s);
            }
        }
        Ok(ds)
    }

    pub fn of_kind(&self, kind: DataKind) -> Vec<&SeriesSample> {
        self.samples.iter().filter(|s| s.kind == kind).collect()
    }

    pub fn kinds_present(&self) -> Vec<DataKind> {
        DataKind::all().into_iter().filter(|k| self.samples.iter().any(|s| s.kind == *k)).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        out.push_str(&serde_json::to_string(&self.header).expect("header serialization"));
        out.push('\n');
        for s in &self.samples {
            let (rows, cols) = s.env.wire_shape();
            let dto = RecordDto {
                sample_id: s.sample_id,
                kind: s.kind.code(),
                values: s.values.clone(),
                env: s.env.tensor().data().to_vec(),
                env_shape: [rows, cols],
            };
            out.push_str(&serde_json::to_string(&dto).expect("record serialization"));
            out.push('\n');
        }
        out
    }

    /// Strict parser for the JSONL format; never panics on malformed input.
    pub fn parse_jsonl(text: &str) -> Result<Dataset> {
        let mut lines = text.lines();
        let header_line = lines.next().ok_or_else(|| Error::parse("empty dataset file".to_string()))?;
        let header: DatasetHeader =
            serde_json::from_str(header_line).map_err(|e| Error::parse(format!("header: {e}")))?;
        if header.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::parse(format!("unsupported dataset version {}", header.format_version)));
        }
        if header.l < crate::datagen::MIN_SERIES_LEN || header.l > MAX_SERIES_LEN {
            return Err(Error::parse(format!("unreasonable series length {}", header.l)));
        }
        if header.c1 != BS_ENV_DIM || header.c2 != APP_ENV_DIM || header.c3 != RSRP_ENV_DIM {
            return Err(Error::parse("env widths do not match this build".to_string()));
        }
        let mut ds = Dataset { header, samples: Vec::new() };
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let dto: RecordDto = serde_json::from_str(line)
                .map_err(|e| Error::parse(format!("line {}: {e}", ln + 2)))?;
            let sample = record_to_sample(dto, ds.header.l)
                .map_err(|e| Error::parse(format!("line {}: {e}", ln + 2)))?;
            ds.samples.push(sample);
        }
        Ok(ds)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_jsonl())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_jsonl(&text)
    }
}

fn record_to_sample(dto: RecordDto, l: usize) -> Result<SeriesSample> {
    let kind = DataKind::from_code(dto.kind)?;
    let [rows, cols] = dto.env_shape;
    let expected = match kind {
        DataKind::BsTraffic => (1, BS_ENV_DIM),
        DataKind::AppTraffic => (l, APP_ENV_DIM),
        DataKind::Rsrp => (l, RSRP_ENV_DIM),
    };
    if (rows, cols) != expected {
        return Err(Error::shape(format!("env shape [{rows}, {cols}] for kind {}", kind.name())));
    }
    if dto.env.len() != rows * cols {
        return Err(Error::shape(format!("env has {} entries, shape says {}", dto.env.len(), rows * cols)));
    }
    let env = match kind {
        DataKind::BsTraffic => EnvFeature::Bs(Tensor::new(vec![cols], dto.env)),
        DataKind::AppTraffic => EnvFeature::App(Tensor::new(vec![rows, cols], dto.env)),
        DataKind::Rsrp => EnvFeature::Rsrp(Tensor::new(vec![rows, cols], dto.env)),
    };
    let sample = SeriesSample { sample_id: dto.sample_id, kind, values: dto.values, env };
    sample.validate(l)?;
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_app_traffic, gen_bs_traffic, gen_rsrp};

    fn tiny() -> Dataset {
        Dataset::from_parts(
            64,
            vec![
                gen_bs_traffic(1, 2, 64).unwrap(),
                gen_app_traffic(1, 2, 64).unwrap(),
                gen_rsrp(1, 2, 64).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn jsonl_roundtrip_is_byte_exact() {
        let ds = tiny();
        let text = ds.to_jsonl();
        let back = Dataset::parse_jsonl(&text).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_jsonl(), text);
    }

    #[test]
    fn parser_rejects_garbage() {
        assert!(Dataset::parse_jsonl("").is_err());
        assert!(Dataset::parse_jsonl("{\"nope\": 1}").is_err());
        let ds = tiny();
        let mut text = ds.to_jsonl();
        text.push_str("{\"sample_id\":9,\"kind\":7,\"values\":[],\"env\":[],\"env_shape\":[0,0]}\n");
        assert!(Dataset::parse_jsonl(&text).is_err());
    }

    #[test]
    fn parser_rejects_out_of_range_values() {
        let mut ds = tiny();
        ds.samples[0].values[3] = 1.5;
        assert!(Dataset::parse_jsonl(&ds.to_jsonl()).is_err());
    }

    #[test]
    fn ids_are_sequential_across_kinds() {
        let ds = tiny();
        let ids: Vec<u64> = ds.samples.iter().map(|s| s.sample_id).collect();
        assert_eq!(ids, (0..6).collect::<Vec<u64>>());
    }
}
