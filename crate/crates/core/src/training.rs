//! Mini-batch training loop, epoch logging and checkpoint files.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "NPTC" | version u32 | tensor count u32 |
//!   per tensor: rank u32 | dims u64 x rank | values f64 x prod(dims)
//! ```
//!
//! Tensors are stored as: radius (rank 0), then weight and bias of every
//! layer in order, then the raw proxy matrix.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::diagnostics::{
    class_means, dn_dk, gamma_and_variance, mean_npt_loss, proxy_mean_cosine,
};
use crate::error::{NptError, Result};
use crate::evaluation::embed_all;
use crate::losses::{loss_dispatch, LabeledBatch, LossKind, MarginConfig, ProxyBank};
use crate::matrix::Matrix;
use crate::model::{Dense, EmbedderModel, Sgd};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NPTC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T> {
    pub loss: LossKind,
    pub margin: MarginConfig<T>,
    pub radius: T,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: T,
    pub momentum: T,
    pub weight_decay: T,
    /// 1-based epochs at which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: T,
    pub seed: u64,
    /// Observer callback interval in epochs; 0 disables it.
    pub log_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    /// Apply weight decay to the raw proxy matrix.
    pub proxy_weight_decay: bool,
    /// Record D_n/D_k, gamma and proxy alignment after every epoch.
    pub track_geometry: bool,
    pub min_samples: usize,
}

impl<T: Scalar> TrainConfig<T> {
    /// Defaults for a given radius: NPT loss with delta = r^2/2, 30 epochs of
    /// batch 64, lr 0.1 decayed tenfold at epochs 20 and 27.
    pub fn new(radius: T) -> Self {
        Self {
            loss: LossKind::Npt,
            margin: MarginConfig::for_radius(radius),
            radius,
            epochs: 30,
            batch_size: 64,
            lr: T::lit(0.1),
            momentum: T::lit(0.9),
            weight_decay: T::lit(1e-4),
            decay_epochs: vec![20, 27],
            decay_factor: T::lit(0.1),
            seed: 0,
            log_every: 1,
            checkpoint_path: None,
            hidden: vec![64, 64],
            embedding_dim: 8,
            proxy_weight_decay: true,
            track_geometry: false,
            min_samples: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(NptError::InvalidArgument(
                "epochs must be at least 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(NptError::InvalidArgument(
                "batch size must be at least 1".into(),
            ));
        }
        if !(self.radius > T::zero() && self.radius.is_finite()) {
            return Err(NptError::InvalidArgument(format!(
                "radius must be positive, got {}",
                self.radius
            )));
        }
        if self.embedding_dim < 2 {
            return Err(NptError::InvalidArgument(
                "embedding dimension must be at least 2".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(NptError::InvalidArgument(
                "hidden widths must be positive".into(),
            ));
        }
        self.margin.validate(self.radius)?;
        self.optimizer().map(|_| ())
    }

    fn optimizer(&self) -> Result<Sgd<T>> {
        Sgd::new(
            self.lr,
            self.momentum,
            self.weight_decay,
            self.decay_epochs.clone(),
            self.decay_factor,
        )
    }
}

impl Default for TrainConfig<f64> {
    fn default() -> Self {
        Self::new(1.0)
    }
}

/// Geometry snapshot over the whole training set at the end of an epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochGeometry {
    pub d_n: f64,
    pub d_k: f64,
    pub gamma_bar: f64,
    pub proxy_mean_cosine: f64,
    /// Mean NPT loss of the end-of-epoch snapshot.
    pub snapshot_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Running mean of the batch losses seen during the epoch.
    pub mean_loss: f64,
    pub min_pairwise_proxy_distance: f64,
    pub wallclock_seconds: f64,
    pub geometry: Option<EpochGeometry>,
}

impl EpochLog {
    /// Equality ignoring wall-clock time.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.mean_loss.to_bits() == other.mean_loss.to_bits()
            && self.min_pairwise_proxy_distance.to_bits()
                == other.min_pairwise_proxy_distance.to_bits()
            && match (&self.geometry, &other.geometry) {
                (None, None) => true,
                (Some(a), Some(b)) => [
                    a.d_n,
                    a.d_k,
                    a.gamma_bar,
                    a.proxy_mean_cosine,
                    a.snapshot_loss,
                ]
                .iter()
                .zip([
                    b.d_n,
                    b.d_k,
                    b.gamma_bar,
                    b.proxy_mean_cosine,
                    b.snapshot_loss,
                ])
                .all(|(x, y)| x.to_bits() == y.to_bits()),
                _ => false,
            }
    }
}

/// Epoch log as CSV. Geometry columns are appended when the first row has them.
pub fn epoch_log_csv(logs: &[EpochLog]) -> String {
    let geometry = logs.first().is_some_and(|l| l.geometry.is_some());
    let mut s = String::from("epoch,mean_loss,min_proxy_dist,seconds");
    if geometry {
        s.push_str(",d_n,d_k,gamma_bar,proxy_mean_cosine,snapshot_loss");
    }
    s.push('\n');
    for l in logs {
        let _ = write!(
            s,
            "{},{:?},{:?},{:.6}",
            l.epoch, l.mean_loss, l.min_pairwise_proxy_distance, l.wallclock_seconds
        );
        if let (true, Some(g)) = (geometry, &l.geometry) {
            let _ = write!(
                s,
                ",{:?},{:?},{:?},{:?},{:?}",
                g.d_n, g.d_k, g.gamma_bar, g.proxy_mean_cosine, g.snapshot_loss
            );
        }
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: EmbedderModel<T>,
    pub bank: ProxyBank<T>,
    pub logs: Vec<EpochLog>,
}

/// Seeded initial parameters: the model is drawn first, then the proxies.
pub fn initialize<T: Scalar>(
    config: &TrainConfig<T>,
    input_dim: usize,
    classes: usize,
) -> Result<(EmbedderModel<T>, ProxyBank<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dims = vec![input_dim];
    dims.extend_from_slice(&config.hidden);
    dims.push(config.embedding_dim);
    let model = EmbedderModel::new(&dims, &mut rng)?;
    let bank = ProxyBank::random(classes, config.embedding_dim, config.radius, &mut rng)?;
    Ok((model, bank))
}

pub fn train<T: Scalar>(config: &TrainConfig<T>, dataset: &Dataset<T>) -> Result<TrainOutcome<T>> {
    train_with(config, dataset, |_| {})
}

/// [`train`] with an observer called every `log_every` epochs and after the last one.
pub fn train_with<T: Scalar, F: FnMut(&EpochLog)>(
    config: &TrainConfig<T>,
    dataset: &Dataset<T>,
    observer: F,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let (model, bank) = initialize(config, dataset.input_dim(), dataset.class_count)?;
    train_from(config, dataset, model, bank, observer)
}

/// Trains starting from the given parameters.
pub fn train_from<T: Scalar, F: FnMut(&EpochLog)>(
    config: &TrainConfig<T>,
    dataset: &Dataset<T>,
    mut model: EmbedderModel<T>,
    mut bank: ProxyBank<T>,
    mut observer: F,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if bank.class_count() != dataset.class_count {
        return Err(NptError::DimensionMismatch {
            expected: dataset.class_count,
            got: bank.class_count(),
        });
    }
    if model.input_dim() != dataset.input_dim() {
        return Err(NptError::DimensionMismatch {
            expected: model.input_dim(),
            got: dataset.input_dim(),
        });
    }
    if model.output_dim() != bank.dim() {
        return Err(NptError::DimensionMismatch {
            expected: bank.dim(),
            got: model.output_dim(),
        });
    }
    if bank.radius() != config.radius {
        return Err(NptError::RadiusMismatch {
            left: config.radius.as_f64(),
            right: bank.radius().as_f64(),
        });
    }

    let mut sgd = config.optimizer()?;
    let proxy_slot = model.params().len();
    if !config.proxy_weight_decay {
        sgd.exempt_from_decay(proxy_slot);
    }
    let update_proxies = config.loss.uses_proxies();
    let mut logs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut counted = 0usize;
        for (b, (inputs, labels)) in dataset
            .batches(config.batch_size, config.seed, epoch)?
            .into_iter()
            .enumerate()
        {
            let (features, tape) = model.forward(&inputs)?;
            let batch = LabeledBatch::new(features, labels)?;
            let result = match loss_dispatch(config.loss, &batch, &bank, &config.margin) {
                Ok(r) => r,
                Err(NptError::NoValidTriplet) => continue,
                Err(NptError::ZeroVector { .. }) => {
                    return Err(NptError::NonFiniteLoss { epoch, batch: b })
                }
                Err(e) => return Err(e),
            };
            if !result.all_finite() {
                return Err(NptError::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += result.loss.as_f64() * batch.len() as f64;
            counted += batch.len();

            let grads = model.backward(&tape, &result.grad_features)?;
            let proxy_grad = result.dense_proxy_grad(bank.class_count(), bank.dim());
            let mut grad_slices = grads.slices();
            let mut params = model.params_mut();
            if update_proxies {
                grad_slices.push(proxy_grad.as_slice());
                params.push(bank.raw_mut().as_mut_slice());
            }
            sgd.step(&mut params, &grad_slices, epoch)?;
        }
        if !model.is_finite() || !bank.raw().is_finite() {
            return Err(NptError::NonFiniteLoss { epoch, batch: 0 });
        }
        let mean_loss = if counted == 0 {
            0.0
        } else {
            loss_sum / counted as f64
        };
        let min_dist = bank.min_pairwise_distance()?.as_f64();
        let geometry = if config.track_geometry {
            Some(epoch_geometry(config, dataset, &model, &bank)?)
        } else {
            None
        };
        let log = EpochLog {
            epoch,
            mean_loss,
            min_pairwise_proxy_distance: min_dist,
            wallclock_seconds: started.elapsed().as_secs_f64(),
            geometry,
        };
        if config.log_every > 0 && (epoch % config.log_every == 0 || epoch == config.epochs) {
            observer(&log);
        }
        logs.push(log);
    }

    if let Some(path) = &config.checkpoint_path {
        save_checkpoint(&model, &bank, path)?;
    }
    Ok(TrainOutcome { model, bank, logs })
}

fn epoch_geometry<T: Scalar>(
    config: &TrainConfig<T>,
    dataset: &Dataset<T>,
    model: &EmbedderModel<T>,
    bank: &ProxyBank<T>,
) -> Result<EpochGeometry> {
    let emb = embed_all(model, &dataset.inputs, config.radius)?;
    let means = class_means(&emb, &dataset.labels, config.min_samples)?;
    let (gamma_bar, _) = gamma_and_variance(&means, config.radius)?;
    let (d_n, d_k) = dn_dk(&emb, &dataset.labels, bank)?;
    Ok(EpochGeometry {
        d_n: d_n.as_f64(),
        d_k: d_k.as_f64(),
        gamma_bar: gamma_bar.as_f64(),
        proxy_mean_cosine: proxy_mean_cosine(bank, &means)?.as_f64(),
        snapshot_loss: mean_npt_loss(&emb, &dataset.labels, bank, config.margin.delta)?.as_f64(),
    })
}

fn put_tensor(out: &mut Vec<u8>, dims: &[usize], values: impl Iterator<Item = f64>) {
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes model and proxies into checkpoint bytes.
pub fn checkpoint_bytes<T: Scalar>(model: &EmbedderModel<T>, bank: &ProxyBank<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = 2 + 2 * model.layers().len();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    put_tensor(&mut out, &[], std::iter::once(bank.radius().as_f64()));
    for layer in model.layers() {
        let w = &layer.weight;
        put_tensor(
            &mut out,
            &[w.rows(), w.cols()],
            w.as_slice().iter().map(|v| v.as_f64()),
        );
        put_tensor(
            &mut out,
            &[layer.bias.len()],
            layer.bias.iter().map(|v| v.as_f64()),
        );
    }
    let raw = bank.raw();
    put_tensor(
        &mut out,
        &[raw.rows(), raw.cols()],
        raw.as_slice().iter().map(|v| v.as_f64()),
    );
    out
}

pub fn save_checkpoint<T: Scalar>(
    model: &EmbedderModel<T>,
    bank: &ProxyBank<T>,
    path: &Path,
) -> Result<()> {
    fs::write(path, checkpoint_bytes(model, bank))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(NptError::CorruptTensor(format!(
                "truncated while reading {what}"
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self, index: usize) -> Result<(Vec<usize>, Vec<f64>)> {
        let what = format!("tensor {index}");
        let rank = self.u32(&what)? as usize;
        if rank > 2 {
            return Err(NptError::CorruptTensor(format!("{what} has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(self.take(8, &what)?.try_into().unwrap());
            dims.push(usize::try_from(d).map_err(|_| {
                NptError::CorruptTensor(format!("{what} dimension {d} is too large"))
            })?);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| NptError::CorruptTensor(format!("{what} is too large")))?;
        let values = self
            .take(len, &what)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((dims, values))
    }
}

fn to_matrix<T: Scalar>(dims: &[usize], values: Vec<f64>, what: &str) -> Result<Matrix<T>> {
    let [rows, cols] = dims else {
        return Err(NptError::CorruptTensor(format!("{what} must have rank 2")));
    };
    Matrix::from_vec(*rows, *cols, values.into_iter().map(T::lit).collect())
        .map_err(|e| NptError::CorruptTensor(format!("{what}: {e}")))
}

/// Parses checkpoint bytes.
pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(EmbedderModel<T>, ProxyBank<T>)> {
    if bytes.len() < 4 {
        return Err(NptError::CorruptTensor("missing header".into()));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(NptError::BadMagic {
            expected: u32::from_be_bytes(*CHECKPOINT_MAGIC),
            found: u32::from_be_bytes(bytes[..4].try_into().unwrap()),
        });
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(NptError::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let count = r.u32("tensor count")? as usize;
    if count < 4 || !count.is_multiple_of(2) {
        return Err(NptError::CorruptTensor(format!(
            "unexpected tensor count {count}"
        )));
    }
    let (dims, radius) = r.tensor(0)?;
    if !dims.is_empty() {
        return Err(NptError::CorruptTensor("radius must be a scalar".into()));
    }
    let radius = T::lit(radius[0]);

    let mut layers = Vec::with_capacity((count - 2) / 2);
    for l in 0..(count - 2) / 2 {
        let (wd, wv) = r.tensor(1 + 2 * l)?;
        let weight = to_matrix(&wd, wv, &format!("layer {l} weight"))?;
        let (bd, bv) = r.tensor(2 + 2 * l)?;
        if bd.len() != 1 {
            return Err(NptError::CorruptTensor(format!(
                "layer {l} bias must have rank 1"
            )));
        }
        let bias = bv.into_iter().map(T::lit).collect();
        layers.push(
            Dense::new(weight, bias)
                .map_err(|e| NptError::CorruptTensor(format!("layer {l}: {e}")))?,
        );
    }
    let model =
        EmbedderModel::from_layers(layers).map_err(|e| NptError::CorruptTensor(e.to_string()))?;
    let (pd, pv) = r.tensor(count - 1)?;
    let bank = ProxyBank::new(to_matrix(&pd, pv, "proxies")?, radius)
        .map_err(|e| NptError::CorruptTensor(format!("proxies: {e}")))?;
    if r.pos != bytes.len() {
        return Err(NptError::CorruptTensor(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    if model.output_dim() != bank.dim() {
        return Err(NptError::CorruptTensor(format!(
            "model emits {} features but proxies have {}",
            model.output_dim(),
            bank.dim()
        )));
    }
    Ok((model, bank))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(EmbedderModel<T>, ProxyBank<T>)> {
    checkpoint_from_bytes(&fs::read(path)?)
}
