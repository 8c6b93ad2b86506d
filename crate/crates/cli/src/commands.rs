use std::fs;
use std::path::PathBuf;

use npt_core::data::{gen_synthetic, load_idx_pair, SyntheticSpec};
use npt_core::diagnostics::diagnose as run_diagnostics;
use npt_core::evaluation::{distractor_embeddings, embed_all, evaluate, EvalConfig};
use npt_core::experiment::{run_cell, sweep_csv};
use npt_core::gradcheck::{gradcheck as run_gradcheck, GradcheckConfig};
use npt_core::training::{epoch_log_csv, load_checkpoint, train_with, TrainConfig};
use npt_core::{Dataset, LossKind, MarginConfig};

use crate::config::{List, PathArg, Resolver, RunManifest};
use crate::error::CliError;
use crate::{
    Common, DatasetArgs, DiagnoseArgs, EvalArgs, GenDataArgs, GradcheckArgs, HyperArgs, SweepArgs,
    TrainArgs,
};

const DEFAULT_OUT: &str = "npt-out";

struct Run {
    resolver: Resolver,
    command: &'static str,
    out: PathBuf,
    artifacts: Vec<PathBuf>,
}

impl Run {
    fn start(command: &'static str, common: &Common) -> Result<Self, CliError> {
        let mut resolver = Resolver::load(common.config.as_deref())?;
        let out = resolver
            .get("out", common.out.clone(), PathArg(DEFAULT_OUT.into()))?
            .0;
        fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        Ok(Self {
            resolver,
            command,
            out,
            artifacts: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf, CliError> {
        let path = self.out.join(name);
        fs::write(&path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        self.artifacts.push(path.clone());
        Ok(path)
    }

    fn finish(self) -> Result<(), CliError> {
        let mut manifest = RunManifest {
            command: self.command.to_string(),
            config: self.resolver.resolved().to_vec(),
            out_dir: self.out,
            artifacts: self.artifacts,
        };
        let path = manifest.write()?;
        eprintln!("manifest: {}", path.display());
        Ok(())
    }
}

fn load_dataset(r: &mut Resolver, args: &DatasetArgs) -> Result<Dataset, CliError> {
    let path = r.require("dataset", args.dataset.clone())?.0;
    let labels = r.optional("idx-labels", args.idx_labels.clone())?;
    if !path.exists() {
        return Err(CliError::Io(format!("{}: no such file", path.display())));
    }
    Ok(match labels {
        Some(labels) => load_idx_pair(&path, &labels.0)?,
        None => Dataset::read_csv(&path)?,
    })
}

fn load_model(
    r: &mut Resolver,
    flag: Option<PathArg>,
) -> Result<(npt_core::Model, npt_core::Bank), CliError> {
    let path = r.require("checkpoint", flag)?.0;
    load_checkpoint(&path).map_err(|e| match e {
        npt_core::NptError::Io(io) => CliError::Io(format!("{}: {io}", path.display())),
        other => other.into(),
    })
}

fn train_config(r: &mut Resolver, h: &HyperArgs) -> Result<TrainConfig<f64>, CliError> {
    let d = TrainConfig::<f64>::default();
    let radius = r.get("radius", h.radius, d.radius)?;
    let margin = MarginConfig::for_radius(radius);
    Ok(TrainConfig {
        loss: r.get("loss", h.loss, d.loss)?,
        margin: MarginConfig {
            scale: r.get("scale", h.scale, margin.scale)?,
            angular_margin: r.get("angular-margin", h.angular_margin, margin.angular_margin)?,
            negative_proxy_grad: r.get(
                "negative-proxy-grad",
                h.negative_proxy_grad,
                margin.negative_proxy_grad,
            )?,
            ..margin
        },
        radius,
        epochs: r.get("epochs", h.epochs, d.epochs)?,
        batch_size: r.get("batch-size", h.batch_size, d.batch_size)?,
        lr: r.get("lr", h.lr, d.lr)?,
        momentum: r.get("momentum", h.momentum, d.momentum)?,
        weight_decay: r.get("weight-decay", h.weight_decay, d.weight_decay)?,
        decay_epochs: r
            .get("decay-epochs", h.decay_epochs.clone(), List(d.decay_epochs))?
            .0,
        decay_factor: r.get("decay-factor", h.decay_factor, d.decay_factor)?,
        hidden: r.get("hidden", h.hidden.clone(), List(d.hidden))?.0,
        embedding_dim: r.get("embedding-dim", h.embedding_dim, d.embedding_dim)?,
        proxy_weight_decay: r.get(
            "proxy-weight-decay",
            h.proxy_weight_decay,
            d.proxy_weight_decay,
        )?,
        track_geometry: r.get("track-geometry", h.track_geometry, d.track_geometry)?,
        log_every: r.get("log-every", h.log_every, d.log_every)?,
        min_samples: r.get("min-samples", h.min_samples, d.min_samples)?,
        seed: d.seed,
        checkpoint_path: None,
    })
}

pub fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    let mut run = Run::start("gen-data", &a.common)?;
    let r = &mut run.resolver;
    let spec = SyntheticSpec {
        class_count: r.get("classes", a.classes, 10)?,
        input_dim: r.get("input-dim", a.input_dim, 16)?,
        samples_per_class: r.get("samples-per-class", a.samples_per_class, 100)?,
        noise_sigma: r.get("sigma", a.sigma, 0.1)?,
        seed: r.get("seed", a.common.seed, 0)?,
    };
    let ds = gen_synthetic::<f64>(&spec)?;
    let path = run.out.join("dataset.csv");
    ds.write_csv(&path)?;
    run.artifacts.push(path.clone());
    println!(
        "{} samples, {} classes -> {}",
        ds.len(),
        ds.class_count,
        path.display()
    );
    run.finish()
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut run = Run::start("train", &a.common)?;
    let r = &mut run.resolver;
    let ds = load_dataset(r, &a.data)?;
    let mut config = train_config(r, &a.hyper)?;
    config.seed = r.get("seed", a.common.seed, 0)?;
    let default_delta = config.margin.delta;
    config.margin.delta = r.get("delta", a.delta, default_delta)?;
    let checkpoint = r
        .get(
            "checkpoint",
            a.checkpoint,
            PathArg(run.out.join("checkpoint.nptc")),
        )?
        .0;
    config.checkpoint_path = Some(checkpoint.clone());

    let outcome = train_with(&config, &ds, |log| {
        eprintln!(
            "epoch {:>3}  loss {:.6}  min proxy dist {:.4}  {:.2}s",
            log.epoch, log.mean_loss, log.min_pairwise_proxy_distance, log.wallclock_seconds
        );
    })?;
    run.artifacts.push(checkpoint.clone());
    run.write("epochs.csv", &epoch_log_csv(&outcome.logs))?;
    let last = outcome.logs.last().expect("at least one epoch");
    println!(
        "final loss {:?}, min proxy distance {:?}, checkpoint {}",
        last.mean_loss,
        last.min_pairwise_proxy_distance,
        checkpoint.display()
    );
    run.finish()
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    let mut run = Run::start("eval", &a.common)?;
    let r = &mut run.resolver;
    let (model, bank) = load_model(r, a.checkpoint)?;
    let ds = load_dataset(r, &a.data)?;
    let seed = r.get("seed", a.common.seed, 0)?;
    let n_distractors = r.get("distractors", a.distractors, 0)?;
    let pairs = r.get("pairs", a.pairs, 5000)?;
    let radius = bank.radius();
    let distractors = distractor_embeddings(n_distractors, model.output_dim(), radius, seed);
    let report = evaluate(
        &model,
        radius,
        &ds.inputs,
        &ds.labels,
        &distractors,
        &EvalConfig {
            pairs_per_kind: pairs,
            seed,
        },
    )?;
    run.write("roc.csv", &report.roc_csv())?;
    let text = report.report_csv();
    run.write("report.csv", &text)?;
    print!("{text}");
    run.finish()
}

pub fn diagnose(a: DiagnoseArgs) -> Result<(), CliError> {
    let mut run = Run::start("diagnose", &a.common)?;
    let r = &mut run.resolver;
    let (model, bank) = load_model(r, a.checkpoint)?;
    let ds = load_dataset(r, &a.data)?;
    let radius = bank.radius();
    let delta = r.get("delta", a.delta, radius * radius / 2.0)?;
    let min_samples = r.get("min-samples", a.min_samples, 20)?;
    let emb = embed_all(&model, &ds.inputs, radius)?;
    let report = run_diagnostics(&emb, &ds.labels, &bank, delta, min_samples)?;
    let text = report.to_csv();
    run.write("diagnostics.csv", &text)?;
    print!("{text}");
    run.finish()
}

pub fn sweep_delta(a: SweepArgs) -> Result<(), CliError> {
    let mut run = Run::start("sweep-delta", &a.common)?;
    let r = &mut run.resolver;
    let base = train_config(r, &a.hyper)?;
    let r2 = base.radius * base.radius;
    let deltas = r
        .get("deltas", a.deltas, List(vec![0.0, 0.5 * r2, r2, 1.5 * r2]))?
        .0;
    let seeds = r.get("seeds", a.seeds, List(vec![0, 1, 2]))?.0;
    let distractors = r.get("distractors", a.distractors, 1000)?;
    let pairs = r.get("pairs", a.pairs, 5000)?;
    if deltas.is_empty() || seeds.is_empty() {
        return Err(CliError::Usage(
            "need at least one delta and one seed".into(),
        ));
    }

    let mut rows = Vec::with_capacity(deltas.len() * seeds.len());
    for &delta in &deltas {
        for &seed in &seeds {
            let mut config = base.clone();
            config.seed = seed;
            config.margin.delta = delta;
            let cell = run_cell(&config, distractors, pairs)?;
            println!("{}", cell.row.csv_line());
            rows.push(cell.row);
        }
    }
    run.write("sweep.csv", &sweep_csv(&rows))?;
    run.finish()
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let mut run = Run::start("gradcheck", &a.common)?;
    let r = &mut run.resolver;
    let defaults = GradcheckConfig::default();
    let gc = GradcheckConfig {
        trials: r.get("trials", a.trials, defaults.trials)?,
        seed: r.get("seed", a.common.seed, defaults.seed)?,
        ..defaults
    };
    let kinds = match r.optional::<LossKind>("loss", a.loss)? {
        Some(k) => vec![k],
        None => LossKind::ALL.to_vec(),
    };
    let mut table = String::from("loss,trials,rejected,coordinates,max_relative_error,result\n");
    let mut failed = Vec::new();
    for kind in kinds {
        let o = run_gradcheck(kind, &gc)?;
        let line = format!(
            "{},{},{},{},{:e},{}",
            kind,
            o.trials,
            o.rejected,
            o.coordinates,
            o.max_relative_error,
            if o.passed { "pass" } else { "FAIL" }
        );
        println!("{line}");
        table.push_str(&line);
        table.push('\n');
        if !o.passed {
            failed.push(kind.name());
        }
    }
    run.write("gradcheck.csv", &table)?;
    run.finish()?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}
