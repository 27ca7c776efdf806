//! Frozen-representation probes and embedding export.

use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;

use crate::augment::{prepare_eval, TransformSpec};
use crate::autodiff::{Tensor, NORM_FLOOR};
use crate::curation::FeatureSource;
use crate::data::ImageDataset;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rng::rng_from;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    /// `[count, dim]`.
    pub vectors: Tensor,
    pub labels: Vec<u32>,
    pub source: FeatureSource,
    /// Identifier of the checkpoint the vectors came from.
    pub model_checkpoint: String,
}

impl EmbeddingSet {
    pub fn new(
        vectors: Tensor,
        labels: Vec<u32>,
        source: FeatureSource,
        model_checkpoint: impl Into<String>,
    ) -> Result<Self> {
        if vectors.ndim() != 2 {
            return Err(Error::Contract(format!(
                "embeddings must be [count, dim], got {:?}",
                vectors.shape()
            )));
        }
        if vectors.rows() != labels.len() {
            return Err(Error::dim("embedding labels", vectors.rows(), labels.len()));
        }
        if !vectors.all_finite() {
            return Err(Error::Numerical("embedding set contains non-finite values".into()));
        }
        Ok(Self {
            vectors,
            labels,
            source,
            model_checkpoint: model_checkpoint.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.len(), self.dim(), self.vectors.data())
    }
}

const EXTRACT_BATCH: usize = 256;

/// Inference-mode embeddings of every image in `ds`, without random
/// augmentation (resize and standardization only).
pub fn extract_embeddings(
    params: &ModelParams,
    ds: &ImageDataset,
    spec: &TransformSpec,
    source: FeatureSource,
    checkpoint_id: &str,
) -> Result<EmbeddingSet> {
    let dim = match source {
        FeatureSource::Encoder => params.config.hidden_dim,
        FeatureSource::Projection => params.config.projection_dim,
    };
    let mut data = Vec::with_capacity(ds.len() * dim);
    let indices: Vec<usize> = (0..ds.len()).collect();
    for chunk in indices.chunks(EXTRACT_BATCH) {
        let x = prepare_eval(ds, chunk, spec)?;
        let (h, z) = params.embed(&x)?;
        for (name, t) in [("encoder output h", &h), ("projection output z", &z)] {
            if !t.all_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite activation in {name} for images {}..{}",
                    chunk[0],
                    chunk[chunk.len() - 1] + 1
                )));
            }
        }
        data.extend_from_slice(match source {
            FeatureSource::Encoder => h.data(),
            FeatureSource::Projection => z.data(),
        });
    }
    EmbeddingSet::new(
        Tensor::new(vec![ds.len(), dim], data)?,
        ds.labels().to_vec(),
        source,
        checkpoint_id,
    )
}

fn check_pair(train: &EmbeddingSet, test: &EmbeddingSet) -> Result<usize> {
    if train.dim() != test.dim() {
        return Err(Error::dim("embedding dimension", train.dim(), test.dim()));
    }
    if train.is_empty() {
        return Err(Error::Contract("probe needs at least one training embedding".into()));
    }
    let classes = *train.labels.iter().max().expect("nonempty") as usize + 1;
    if let Some(&bad) = test.labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Contract(format!(
            "test label {bad} outside the training class space 0..{classes}"
        )));
    }
    Ok(classes)
}

fn accuracy(pred: &[u32], labels: &[u32]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

fn unit_rows(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for mut row in m.row_iter_mut() {
        let n = row.norm().max(NORM_FLOOR);
        row /= n;
    }
    m
}

/// k-NN predictions under cosine distance. Votes are tallied per class;
/// ties go to the smaller summed distance, then to the lower class id.
pub fn knn_predict(train: &EmbeddingSet, test: &EmbeddingSet, k: usize) -> Result<Vec<u32>> {
    if k < 1 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    let classes = check_pair(train, test)?;
    if k > train.len() {
        return Err(Error::Contract(format!(
            "k = {k} exceeds {} training embeddings",
            train.len()
        )));
    }
    let a = unit_rows(train.matrix());
    let b = unit_rows(test.matrix());
    let sim = &b * a.transpose();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut pred = Vec::with_capacity(test.len());
    for row in sim.row_iter() {
        let dist = |j: usize| 1.0 - row[j];
        order.sort_unstable_by(|&x, &y| dist(x).total_cmp(&dist(y)).then(x.cmp(&y)));
        let mut votes = vec![(0usize, 0.0f64); classes];
        for &j in &order[..k] {
            let v = &mut votes[train.labels[j] as usize];
            v.0 += 1;
            v.1 += dist(j);
        }
        let best = (0..classes)
            .filter(|&c| votes[c].0 > 0)
            .min_by(|&x, &y| {
                votes[y]
                    .0
                    .cmp(&votes[x].0)
                    .then(votes[x].1.total_cmp(&votes[y].1))
                    .then(x.cmp(&y))
            })
            .expect("k >= 1 votes");
        pred.push(best as u32);
    }
    Ok(pred)
}

/// Top-1 accuracy of [`knn_predict`].
pub fn knn_probe(train: &EmbeddingSet, test: &EmbeddingSet, k: usize) -> Result<f64> {
    Ok(accuracy(&knn_predict(train, test, k)?, &test.labels))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            batch_size: 256,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Softmax regression on frozen embeddings, trained with seeded mini-batch
/// SGD on features standardized with training-set statistics. Returns the
/// test top-1 accuracy.
pub fn linear_probe(train: &EmbeddingSet, test: &EmbeddingSet, config: &LinearProbeConfig) -> Result<f64> {
    let classes = check_pair(train, test)?;
    if config.batch_size == 0 || !(config.lr > 0.0) {
        return Err(Error::Config(
            "linear probe needs a positive batch size and learning rate".into(),
        ));
    }
    let d = train.dim();
    let mut x = train.matrix();
    let mut xt = test.matrix();
    let n = x.nrows();
    for c in 0..d {
        let mean = x.column(c).mean();
        let var = x.column(c).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let std = if var.sqrt() > 1e-8 { var.sqrt() } else { 1.0 };
        x.column_mut(c).apply(|v| *v = (*v - mean) / std);
        xt.column_mut(c).apply(|v| *v = (*v - mean) / std);
    }
    let mut w = DMatrix::<f64>::zeros(d, classes);
    let mut b = DMatrix::<f64>::zeros(1, classes);
    let mut rng = rng_from(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let xb = x.select_rows(chunk);
            let mut logits = &xb * &w;
            for mut row in logits.row_iter_mut() {
                row += &b;
            }
            for (r, mut row) in logits.row_iter_mut().enumerate() {
                let max = row.max();
                row.apply(|v| *v = (*v - max).exp());
                let s = row.sum();
                row /= s;
                row[train.labels[chunk[r]] as usize] -= 1.0;
            }
            let scale = 1.0 / chunk.len() as f64;
            let gw = xb.transpose() * &logits * scale + &w * config.weight_decay;
            let gb = logits.row_sum() * scale;
            w -= gw * config.lr;
            b -= gb * config.lr;
        }
    }
    let mut logits = &xt * &w;
    for mut row in logits.row_iter_mut() {
        row += &b;
    }
    let pred: Vec<u32> = logits.row_iter().map(|r| r.transpose().argmax().0 as u32).collect();
    Ok(accuracy(&pred, &test.labels))
}

const EMB_MAGIC: &[u8; 4] = b"EMB1";

/// `"EMB1" | u32 count | u32 dim | u8 has_labels | f32 values | [u32 labels]`,
/// little-endian.
pub fn embedding_bytes(set: &EmbeddingSet, with_labels: bool) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * set.vectors.len() + 4 * set.len());
    out.extend_from_slice(EMB_MAGIC);
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    out.extend_from_slice(&(set.dim() as u32).to_le_bytes());
    out.push(u8::from(with_labels));
    for v in set.vectors.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    if with_labels {
        for l in &set.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    out
}

pub fn export_embeddings(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&embedding_bytes(set, true)).map_err(|e| Error::io(path, e))
}

/// Parses an EMB1 file. Labels default to 0 when the file has none.
pub fn parse_embeddings(bytes: &[u8], source: FeatureSource) -> Result<EmbeddingSet> {
    if bytes.len() < 13 {
        return Err(Error::format(bytes.len() as u64, "EMB1 header needs 13 bytes"));
    }
    if &bytes[..4] != EMB_MAGIC {
        return Err(Error::format(0, "bad embedding magic (expected EMB1)"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (count, dim, has_labels) = (u32_at(4), u32_at(8), bytes[12]);
    if has_labels > 1 {
        return Err(Error::format(
            12,
            format!("has_labels must be 0 or 1, found {has_labels}"),
        ));
    }
    let want = 13 + 4 * count * dim + 4 * count * has_labels as usize;
    if bytes.len() != want {
        return Err(Error::format(
            bytes.len().min(want) as u64,
            format!(
                "length error: expected {want} bytes for {count}x{dim}, found {}",
                bytes.len()
            ),
        ));
    }
    let values = bytes[13..13 + 4 * count * dim]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let labels = if has_labels == 1 {
        bytes[13 + 4 * count * dim..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect()
    } else {
        vec![0; count]
    };
    EmbeddingSet::new(Tensor::new(vec![count, dim], values)?, labels, source, "")
}

pub fn import_embeddings(path: impl AsRef<Path>, source: FeatureSource) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&bytes, source)
}
