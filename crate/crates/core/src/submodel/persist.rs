//! Self-describing model files.
//!
//! A model file is one JSON document: a header (format tag, kind, d, K,
//! training hyperparameters, lineage) followed by named parameter blocks
//! stored row-major. Reals are written as shortest round-trip decimals, so
//! a save/load cycle reproduces every parameter bit-for-bit.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dp::DpHyper;

use super::{
    Lineage, LogisticModel, ModelError, ModelKind, NcmModel, Result, RidgeModel, SubModel,
    TrainSpec,
};

pub const MODEL_FORMAT: &str = "disgorge-model/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub values: Vec<f64>,
}

impl ParamBlock {
    fn from_matrix(name: &str, m: &DMatrix<f64>) -> Self {
        let mut values = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            values.extend(m.row(r).iter());
        }
        ParamBlock {
            name: name.to_string(),
            rows: m.nrows(),
            cols: m.ncols(),
            values,
        }
    }

    fn from_rows(name: &str, rows: &[Vec<f64>], cols: usize) -> Self {
        ParamBlock {
            name: name.to_string(),
            rows: rows.len(),
            cols,
            values: rows.iter().flatten().copied().collect(),
        }
    }

    fn column(name: &str, values: Vec<f64>) -> Self {
        ParamBlock {
            name: name.to_string(),
            rows: values.len(),
            cols: 1,
            values,
        }
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub kind: ModelKind,
    pub dim: usize,
    pub num_classes: usize,
    pub train: TrainSpec,
    pub lineage: Lineage,
    pub params: Vec<ParamBlock>,
}

pub(super) fn param_blocks(model: &SubModel) -> Vec<ParamBlock> {
    match model {
        SubModel::Ncm(m) => vec![
            ParamBlock::from_rows("class_means", &m.class_means, m.dim()),
            ParamBlock::column(
                "class_counts",
                m.class_counts.iter().map(|&c| c as f64).collect(),
            ),
        ],
        SubModel::Ridge(m) => vec![
            ParamBlock::from_matrix("weights", &m.weights),
            ParamBlock::from_matrix("inverse_gram", &m.inverse_gram),
            ParamBlock::from_matrix("xty", &m.xty),
        ],
        SubModel::Logistic(m) => vec![
            ParamBlock::from_matrix("weights", &m.weights),
            ParamBlock::column("bias", m.bias.iter().copied().collect()),
        ],
    }
}

impl SubModel {
    /// The spec that retrains this model from scratch.
    pub fn train_spec(&self) -> TrainSpec {
        match self {
            SubModel::Logistic(m) => match &m.lineage.privacy {
                Some(acct) => TrainSpec::DpLogistic {
                    hyper: DpHyper {
                        learning_rate: m.hyper.learning_rate,
                        l2: m.hyper.l2,
                    },
                    config: acct.config,
                },
                None => TrainSpec::Logistic(m.hyper),
            },
            other => other.stored_spec(),
        }
    }

    fn stored_spec(&self) -> TrainSpec {
        match self {
            SubModel::Ncm(_) => TrainSpec::Ncm,
            SubModel::Ridge(m) => TrainSpec::Ridge { lambda: m.lambda },
            SubModel::Logistic(m) => TrainSpec::Logistic(m.hyper),
        }
    }

    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            format: MODEL_FORMAT.to_string(),
            kind: self.kind(),
            dim: self.dim(),
            num_classes: self.num_classes(),
            train: self.stored_spec(),
            lineage: self.lineage().clone(),
            params: self.param_blocks(),
        }
    }

    pub fn from_file(file: ModelFile) -> std::result::Result<SubModel, String> {
        if file.format != MODEL_FORMAT {
            return Err(format!("unsupported format `{}`", file.format));
        }
        if file.train.kind() != file.kind {
            return Err("kind does not match training spec".into());
        }
        let (d, k) = (file.dim, file.num_classes);
        let block = |name: &str, rows: usize, cols: usize| -> std::result::Result<&ParamBlock, String> {
            let b = file
                .params
                .iter()
                .find(|b| b.name == name)
                .ok_or_else(|| format!("missing parameter block `{name}`"))?;
            if b.rows != rows || b.cols != cols || b.values.len() != rows * cols {
                return Err(format!(
                    "block `{name}` is {}x{} with {} values, expected {rows}x{cols}",
                    b.rows,
                    b.cols,
                    b.values.len()
                ));
            }
            Ok(b)
        };
        let lineage: Lineage = file.lineage.clone();
        Ok(match &file.train {
            TrainSpec::Ncm => {
                let means = block("class_means", k, d)?;
                let counts = block("class_counts", k, 1)?;
                SubModel::Ncm(NcmModel {
                    class_means: means.values.chunks(d.max(1)).take(k).map(<[f64]>::to_vec).collect(),
                    class_counts: counts.values.iter().map(|&c| c as u64).collect(),
                    lineage,
                })
            }
            TrainSpec::Ridge { lambda } => SubModel::Ridge(RidgeModel {
                weights: block("weights", d, k)?.to_matrix(),
                inverse_gram: block("inverse_gram", d, d)?.to_matrix(),
                xty: block("xty", d, k)?.to_matrix(),
                lambda: *lambda,
                lineage,
            }),
            TrainSpec::DpLogistic { .. } => {
                return Err("DP spec in model header; expected stored hyperparameters".into())
            }
            TrainSpec::Logistic(hyper) => SubModel::Logistic(LogisticModel {
                weights: block("weights", d, k)?.to_matrix(),
                bias: DVector::from_vec(block("bias", k, 1)?.values.clone()),
                hyper: *hyper,
                lineage,
            }),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file()).expect("model serializes") + "\n";
        fs::write(path, text).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<SubModel> {
        let format_err = |reason: String| ModelError::Format {
            path: path.to_path_buf(),
            reason,
        };
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| format_err(e.to_string()))?;
        SubModel::from_file(file).map_err(format_err)
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::blobs;
    use super::super::{train_logistic_sgd, train_ncm, train_ridge, LogisticHyper};
    use super::*;

    #[test]
    fn every_kind_round_trips_bit_exactly() {
        let data = blobs(30, 3, 3, 1.3, 77);
        let models = vec![
            SubModel::Ncm(train_ncm(&data, 1).unwrap()),
            SubModel::Ridge(train_ridge(&data, 0.7, 2).unwrap()),
            SubModel::Logistic(train_logistic_sgd(&data, &LogisticHyper::default(), 3, None).unwrap()),
        ];
        let dir = tempfile::tempdir().unwrap();
        for (i, m) in models.into_iter().enumerate() {
            let path = dir.path().join(format!("m{i}.json"));
            m.save(&path).unwrap();
            let back = SubModel::load(&path).unwrap();
            assert_eq!(back.param_digest(), m.param_digest());
            assert_eq!(back, m);
        }
    }

    #[test]
    fn rejects_wrong_shapes() {
        let data = blobs(6, 2, 2, 1.0, 0);
        let mut file = SubModel::Ncm(train_ncm(&data, 0).unwrap()).to_file();
        file.params[0].values.pop();
        assert!(SubModel::from_file(file.clone()).is_err());
        file.format = "other".into();
        assert!(SubModel::from_file(file).is_err());
    }
}
