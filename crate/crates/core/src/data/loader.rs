//! Batching with optional background prefetch.
//!
//! Images of one batch are decoded in parallel; batches are delivered in
//! plan order regardless of how many decoder threads run.

use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::manifest::{Manifest, Split};
use crate::data::preprocess::{load_preprocessed, Preprocess};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, 3, crop, crop]`
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Manifest positions of the samples.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoaderConfig {
    pub batch_size: usize,
    pub shuffle: bool,
    pub seed: u64,
    pub epoch: u64,
    /// Batches decoded ahead on a background thread; 0 decodes inline.
    pub prefetch: usize,
}

/// Manifest positions of `split` for one epoch: manifest order, or a
/// permutation drawn from stream `epoch` of the generator seeded by `seed`.
pub fn epoch_order(
    manifest: &Manifest,
    split: Split,
    shuffle: bool,
    seed: u64,
    epoch: u64,
) -> Vec<usize> {
    let mut idx = manifest.indices(split);
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        idx.shuffle(&mut rng);
    }
    idx
}

pub fn load_batch(manifest: &Manifest, prep: &Preprocess, indices: &[usize]) -> Result<Batch> {
    let tensors: Vec<Tensor<f32>> = indices
        .par_iter()
        .map(|&i| load_preprocessed(&manifest.full_path(&manifest.records[i]), prep))
        .collect::<Result<_>>()?;
    let per = 3 * prep.crop * prep.crop;
    let mut data = Vec::with_capacity(per * tensors.len());
    for t in &tensors {
        data.extend_from_slice(t.data());
    }
    Ok(Batch {
        images: Tensor::new(vec![indices.len(), 3, prep.crop, prep.crop], data)?,
        labels: indices.iter().map(|&i| manifest.records[i].label).collect(),
        indices: indices.to_vec(),
    })
}

enum Source {
    Inline {
        manifest: Arc<Manifest>,
        prep: Preprocess,
        plan: std::vec::IntoIter<Vec<usize>>,
    },
    Prefetch {
        rx: Option<Receiver<Result<Batch>>>,
        worker: Option<JoinHandle<()>>,
    },
}

/// Iterator over the batches of one epoch.
pub struct BatchStream {
    source: Source,
    batches: usize,
}

impl BatchStream {
    pub fn num_batches(&self) -> usize {
        self.batches
    }
}

impl Iterator for BatchStream {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        match &mut self.source {
            Source::Inline {
                manifest,
                prep,
                plan,
            } => plan.next().map(|ix| load_batch(manifest, prep, &ix)),
            Source::Prefetch { rx, .. } => rx.as_ref().and_then(|rx| rx.recv().ok()),
        }
    }
}

impl Drop for BatchStream {
    fn drop(&mut self) {
        if let Source::Prefetch { rx, worker } = &mut self.source {
            // closing the channel makes the worker's next send fail
            drop(rx.take());
            if let Some(w) = worker.take() {
                let _ = w.join();
            }
        }
    }
}

pub fn batches(
    manifest: Arc<Manifest>,
    split: Split,
    prep: Preprocess,
    cfg: LoaderConfig,
) -> Result<BatchStream> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let order = epoch_order(&manifest, split, cfg.shuffle, cfg.seed, cfg.epoch);
    if order.is_empty() {
        return Err(Error::Data(format!(
            "the {} split is empty",
            split.as_str()
        )));
    }
    let plan: Vec<Vec<usize>> = order
        .chunks(cfg.batch_size)
        .map(<[usize]>::to_vec)
        .collect();
    let count = plan.len();
    let source = if cfg.prefetch == 0 {
        Source::Inline {
            manifest,
            prep,
            plan: plan.into_iter(),
        }
    } else {
        let (tx, rx) = sync_channel(cfg.prefetch);
        let worker = std::thread::spawn(move || {
            for ix in plan {
                let b = load_batch(&manifest, &prep, &ix);
                let failed = b.is_err();
                if tx.send(b).is_err() || failed {
                    break;
                }
            }
        });
        Source::Prefetch {
            rx: Some(rx),
            worker: Some(worker),
        }
    };
    Ok(BatchStream {
        source,
        batches: count,
    })
}
