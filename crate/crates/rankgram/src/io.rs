//! Model file format.
//!
//! A model is a single JSON document: `format_version`, `kind`, `dims`,
//! `vocab`, and `params` holding named row-major arrays of natural-log
//! probabilities. Log zero (`-inf`) is stored as JSON `null` since JSON has
//! no infinity literal; numbers round-trip losslessly through serde_json's
//! shortest-representation float encoding.

use crate::error::{Error, Result};
use crate::logspace::{LogMat, LogTensor3};
use crate::model::{
    CpdHmm, CpdPcfg, DenseHmm, DensePcfg, ValidateModel, Vocab, LOAD_TOL,
};
use serde::de::Error as _;
use serde::ser::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

/// Log-probability array; `-inf` encodes as `null`.
#[derive(Debug, Clone, PartialEq)]
struct LogArray(Vec<f64>);

impl Serialize for LogArray {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let encoded: std::result::Result<Vec<Option<f64>>, S::Error> = self
            .0
            .iter()
            .map(|&x| {
                if x == f64::NEG_INFINITY {
                    Ok(None)
                } else if x.is_finite() {
                    Ok(Some(x))
                } else {
                    Err(S::Error::custom(format!("non-encodable value {x}")))
                }
            })
            .collect();
        encoded?.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for LogArray {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<Option<f64>>::deserialize(deserializer)?;
        let mut out = Vec::with_capacity(raw.len());
        for x in raw {
            match x {
                None => out.push(f64::NEG_INFINITY),
                Some(v) if v.is_finite() => out.push(v),
                Some(v) => return Err(D::Error::custom(format!("non-decodable value {v}"))),
            }
        }
        Ok(LogArray(out))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
struct Dims {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_nt: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_pt: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r: Option<usize>,
    o: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
struct Params {
    start: Option<LogArray>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    state_to_rank: Option<LogArray>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rank_to_state: Option<LogArray>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rank_emit: Option<LogArray>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent_to_rank: Option<LogArray>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rank_to_left: Option<LogArray>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rank_to_right: Option<LogArray>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    preterm_emit: Option<LogArray>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    trans_emit: Option<LogArray>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    binary: Option<LogArray>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    kind: String,
    dims: Dims,
    vocab: Vec<String>,
    params: Params,
}

/// Any serializable model, tagged by kind.
#[derive(Debug, Clone)]
pub enum Model {
    CpdHmm(CpdHmm),
    DenseHmm(DenseHmm),
    CpdPcfg(CpdPcfg),
    DensePcfg(DensePcfg),
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::CpdHmm(_) => "cpd_hmm",
            Model::DenseHmm(_) => "dense_hmm",
            Model::CpdPcfg(_) => "cpd_pcfg",
            Model::DensePcfg(_) => "dense_pcfg",
        }
    }

    pub fn vocab(&self) -> &Vocab {
        match self {
            Model::CpdHmm(m) => &m.vocab,
            Model::DenseHmm(m) => &m.vocab,
            Model::CpdPcfg(m) => &m.vocab,
            Model::DensePcfg(m) => &m.vocab,
        }
    }

    pub fn violations_with_tol(&self, tol: f64) -> Vec<crate::model::Violation> {
        match self {
            Model::CpdHmm(m) => m.violations_with_tol(tol),
            Model::DenseHmm(m) => m.violations_with_tol(tol),
            Model::CpdPcfg(m) => m.violations_with_tol(tol),
            Model::DensePcfg(m) => m.violations_with_tol(tol),
        }
    }

    fn to_file(&self) -> ModelFile {
        let (dims, params) = match self {
            Model::CpdHmm(m) => (
                Dims {
                    m: Some(m.m()),
                    r: Some(m.r()),
                    o: m.o(),
                    ..Dims::default()
                },
                Params {
                    start: Some(LogArray(m.start.clone())),
                    state_to_rank: Some(LogArray(m.state_to_rank.data().to_vec())),
                    rank_to_state: Some(LogArray(m.rank_to_state.data().to_vec())),
                    rank_emit: Some(LogArray(m.rank_emit.data().to_vec())),
                    ..Params::default()
                },
            ),
            Model::DenseHmm(m) => (
                Dims {
                    m: Some(m.m()),
                    o: m.o(),
                    ..Dims::default()
                },
                Params {
                    start: Some(LogArray(m.start.clone())),
                    trans_emit: Some(LogArray(m.trans_emit.data().to_vec())),
                    ..Params::default()
                },
            ),
            Model::CpdPcfg(m) => (
                Dims {
                    num_nt: Some(m.num_nt),
                    num_pt: Some(m.num_pt),
                    r: Some(m.r()),
                    o: m.o(),
                    ..Dims::default()
                },
                Params {
                    start: Some(LogArray(m.start.clone())),
                    parent_to_rank: Some(LogArray(m.parent_to_rank.data().to_vec())),
                    rank_to_left: Some(LogArray(m.rank_to_left.data().to_vec())),
                    rank_to_right: Some(LogArray(m.rank_to_right.data().to_vec())),
                    preterm_emit: Some(LogArray(m.preterm_emit.data().to_vec())),
                    ..Params::default()
                },
            ),
            Model::DensePcfg(m) => (
                Dims {
                    num_nt: Some(m.num_nt),
                    num_pt: Some(m.num_pt),
                    o: m.o(),
                    ..Dims::default()
                },
                Params {
                    start: Some(LogArray(m.start.clone())),
                    binary: Some(LogArray(m.binary.data().to_vec())),
                    preterm_emit: Some(LogArray(m.preterm_emit.data().to_vec())),
                    ..Params::default()
                },
            ),
        };
        ModelFile {
            format_version: FORMAT_VERSION,
            kind: self.kind().to_string(),
            dims,
            vocab: self.vocab().tokens().to_vec(),
            params,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(&self.to_file())?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Parse without the validity re-check; used by diagnostics that want
    /// to report violations rather than refuse the file.
    pub fn from_json_unvalidated(text: &str) -> Result<Model> {
        let file: ModelFile = serde_json::from_str(text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::ModelFile(format!(
                "unsupported format_version {}",
                file.format_version
            )));
        }
        let vocab = Vocab::new(file.vocab.clone())?;
        let o = vocab.size();
        if file.dims.o != o {
            return Err(Error::ModelFile(format!(
                "dims.o = {} does not match vocabulary size {o}",
                file.dims.o
            )));
        }
        let need = |p: &Option<LogArray>, name: &str| -> Result<Vec<f64>> {
            p.as_ref()
                .map(|a| a.0.clone())
                .ok_or_else(|| Error::ModelFile(format!("missing params.{name}")))
        };
        let dim = |d: Option<usize>, name: &str| -> Result<usize> {
            d.ok_or_else(|| Error::ModelFile(format!("missing dims.{name}")))
        };
        let mat = |data: Vec<f64>, rows: usize, cols: usize, name: &str| -> Result<LogMat> {
            LogMat::new(rows, cols, data)
                .map_err(|e| Error::ModelFile(format!("params.{name}: {e}")))
        };
        let model = match file.kind.as_str() {
            "cpd_hmm" => {
                let m = dim(file.dims.m, "m")?;
                let r = dim(file.dims.r, "r")?;
                Model::CpdHmm(CpdHmm::new(
                    vocab,
                    need(&file.params.start, "start")?,
                    mat(need(&file.params.state_to_rank, "state_to_rank")?, m, r, "state_to_rank")?,
                    mat(need(&file.params.rank_to_state, "rank_to_state")?, r, m, "rank_to_state")?,
                    mat(need(&file.params.rank_emit, "rank_emit")?, r, o, "rank_emit")?,
                )?)
            }
            "dense_hmm" => {
                let m = dim(file.dims.m, "m")?;
                let data = need(&file.params.trans_emit, "trans_emit")?;
                let tensor = LogTensor3::new(m, m, o, data)
                    .map_err(|e| Error::ModelFile(format!("params.trans_emit: {e}")))?;
                Model::DenseHmm(DenseHmm::new(vocab, need(&file.params.start, "start")?, tensor)?)
            }
            "cpd_pcfg" => {
                let nt = dim(file.dims.num_nt, "num_nt")?;
                let pt = dim(file.dims.num_pt, "num_pt")?;
                let r = dim(file.dims.r, "r")?;
                let m = nt + pt;
                Model::CpdPcfg(CpdPcfg::new(
                    vocab,
                    nt,
                    pt,
                    need(&file.params.start, "start")?,
                    mat(need(&file.params.parent_to_rank, "parent_to_rank")?, nt, r, "parent_to_rank")?,
                    mat(need(&file.params.rank_to_left, "rank_to_left")?, r, m, "rank_to_left")?,
                    mat(need(&file.params.rank_to_right, "rank_to_right")?, r, m, "rank_to_right")?,
                    mat(need(&file.params.preterm_emit, "preterm_emit")?, pt, o, "preterm_emit")?,
                )?)
            }
            "dense_pcfg" => {
                let nt = dim(file.dims.num_nt, "num_nt")?;
                let pt = dim(file.dims.num_pt, "num_pt")?;
                let m = nt + pt;
                let binary = LogTensor3::new(nt, m, m, need(&file.params.binary, "binary")?)
                    .map_err(|e| Error::ModelFile(format!("params.binary: {e}")))?;
                Model::DensePcfg(DensePcfg::new(
                    vocab,
                    nt,
                    pt,
                    need(&file.params.start, "start")?,
                    binary,
                    mat(need(&file.params.preterm_emit, "preterm_emit")?, pt, o, "preterm_emit")?,
                )?)
            }
            other => return Err(Error::ModelFile(format!("unknown kind {other:?}"))),
        };
        Ok(model)
    }

    /// Parse and re-check validity. Load tolerance is looser than the
    /// construction tolerance to absorb decimal round-trips.
    pub fn from_json(text: &str) -> Result<Model> {
        let model = Self::from_json_unvalidated(text)?;
        let violations = model.violations_with_tol(LOAD_TOL);
        if violations.is_empty() {
            Ok(model)
        } else {
            Err(Error::InvalidModel(violations))
        }
    }

    pub fn load(path: &Path) -> Result<Model> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn load_unvalidated(path: &Path) -> Result<Model> {
        Self::from_json_unvalidated(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_cpd_hmm, random_cpd_pcfg};

    #[test]
    fn cpd_hmm_round_trip_is_bit_exact() {
        let model = random_cpd_hmm(3, 2, 5, 41, 1.0).unwrap();
        let json = Model::CpdHmm(model.clone()).to_json().unwrap();
        let back = match Model::from_json(&json).unwrap() {
            Model::CpdHmm(m) => m,
            other => panic!("wrong kind {}", other.kind()),
        };
        assert_eq!(model.start, back.start);
        assert_eq!(model.state_to_rank, back.state_to_rank);
        assert_eq!(model.rank_to_state, back.rank_to_state);
        assert_eq!(model.rank_emit, back.rank_emit);
        // And the serialized form itself is stable.
        assert_eq!(json, Model::CpdHmm(back).to_json().unwrap());
    }

    #[test]
    fn cpd_pcfg_round_trip_is_bit_exact() {
        let model = random_cpd_pcfg(2, 3, 2, 4, 42, 0.5).unwrap();
        let json = Model::CpdPcfg(model.clone()).to_json().unwrap();
        let back = match Model::from_json(&json).unwrap() {
            Model::CpdPcfg(m) => m,
            other => panic!("wrong kind {}", other.kind()),
        };
        assert_eq!(model.rank_to_left, back.rank_to_left);
        assert_eq!(model.preterm_emit, back.preterm_emit);
    }

    #[test]
    fn log_zero_round_trips_through_null() {
        let dense = random_cpd_hmm(2, 1, 3, 7, 1.0).unwrap().reconstruct();
        let mut model = dense.clone();
        // Introduce a structural zero and renormalize that plane away from it.
        let mut data = model.trans_emit.data().to_vec();
        let plane: f64 = data[..6].iter().map(|x| x.exp()).sum();
        data[0] = f64::NEG_INFINITY;
        let rest: f64 = data[1..6].iter().map(|x| x.exp()).sum();
        for x in &mut data[1..6] {
            *x += (plane / rest).ln();
        }
        let tensor = crate::logspace::LogTensor3::new(2, 2, 3, data).unwrap();
        model = crate::model::DenseHmm::new(model.vocab.clone(), model.start.clone(), tensor).unwrap();
        let json = Model::DenseHmm(model.clone()).to_json().unwrap();
        assert!(json.contains("null"));
        let back = match Model::from_json(&json).unwrap() {
            Model::DenseHmm(m) => m,
            _ => unreachable!(),
        };
        assert_eq!(back.trans_emit.at(0, 0, 0), f64::NEG_INFINITY);
        assert_eq!(model.trans_emit, back.trans_emit);
    }

    #[test]
    fn load_rejects_denormalized_models() {
        let mut model = random_cpd_hmm(2, 2, 3, 3, 1.0).unwrap();
        for x in model.state_to_rank.row_mut(0) {
            *x += 0.01; // ~1% mass error: past the 1e-6 load tolerance
        }
        let json = Model::CpdHmm(model).to_json().unwrap();
        match Model::from_json(&json) {
            Err(Error::InvalidModel(vs)) => {
                assert!(vs.iter().any(|v| v.param == "state_to_rank"));
            }
            other => panic!("expected InvalidModel, got {other:?}"),
        }
        // The unvalidated path still parses it.
        assert!(Model::from_json_unvalidated(
            &Model::CpdHmm(random_cpd_hmm(2, 2, 3, 3, 1.0).unwrap())
                .to_json()
                .unwrap()
        )
        .is_ok());
    }

    #[test]
    fn dims_must_match_params() {
        let model = random_cpd_hmm(2, 2, 3, 3, 1.0).unwrap();
        let json = Model::CpdHmm(model).to_json().unwrap();
        let tampered = json.replace("\"m\":2", "\"m\":3");
        assert!(Model::from_json(&tampered).is_err());
    }

    #[test]
    fn dense_pcfg_round_trip() {
        let dense = random_cpd_pcfg(1, 2, 2, 3, 5, 1.0).unwrap().reconstruct();
        let json = Model::DensePcfg(dense.clone()).to_json().unwrap();
        let back = match Model::from_json(&json).unwrap() {
            Model::DensePcfg(m) => m,
            _ => unreachable!(),
        };
        assert_eq!(dense.binary, back.binary);
    }
}
