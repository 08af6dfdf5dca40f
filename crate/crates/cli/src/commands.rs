use std::path::{Path, PathBuf};

use dermresnet::checkpoint::{self, CheckpointError};
use dermresnet::data::{load_manifest, load_samples, split, synth_dataset, write_dataset, DataError, Manifest, PreprocessConfig};
use dermresnet::gradcam::{gradcam, overlay, GradcamError};
use dermresnet::model::{argmax_rows, Model, ModelConfig, ModelError, SkipMode};
use dermresnet::train::{
    best_checkpoint_path, evaluate, fit_with, history_path, inverse_frequency_weights, Dataset, TrainConfig,
    TrainError,
};
use dermresnet_service::{decode_and_resize, predict_bytes, PredictError, ServiceConfig, ServiceError, OVERLAY_ALPHA};
use serde_json::json;
use thiserror::Error;

use crate::{DataArgs, EvalArgs, PredictArgs, ServeArgs, SynthArgs, TrainArgs};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Gradcam(#[from] GradcamError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Service(#[from] ServiceError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

type Result<T = ()> = std::result::Result<T, CliError>;

/// `(manifest csv, image directory)` for a `--data` argument.
fn manifest_location(args: &DataArgs) -> (PathBuf, PathBuf) {
    let (csv, dir) = if args.data.is_dir() {
        (args.data.join("manifest.csv"), args.data.clone())
    } else {
        let parent = args.data.parent().map(Path::to_path_buf).unwrap_or_default();
        (args.data.clone(), parent)
    };
    (csv, args.images.clone().unwrap_or(dir))
}

fn open_manifest(args: &DataArgs) -> Result<Manifest> {
    let (csv, dir) = manifest_location(args);
    Ok(load_manifest(&csv, &dir)?)
}

fn print_json(value: serde_json::Value) {
    println!("{value}");
}

fn parse_class_weights(spec: Option<&str>, train: &Dataset) -> Result<Option<[f32; 2]>> {
    let Some(spec) = spec else { return Ok(None) };
    if spec.eq_ignore_ascii_case("inverse") {
        return Ok(Some(inverse_frequency_weights(&train.labels)?));
    }
    let parts: Vec<f32> = spec
        .split(',')
        .map(|p| p.trim().parse::<f32>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--class-weights expects `inverse` or `w0,w1`, got {spec:?}")))?;
    match parts[..] {
        [a, b] => Ok(Some([a, b])),
        _ => Err(CliError::Usage(format!("--class-weights expects two values, got {spec:?}"))),
    }
}

pub fn synth(args: SynthArgs) -> Result {
    let samples = synth_dataset(args.n, args.size, args.seed)?;
    let manifest = write_dataset(&samples, &args.out)?;
    let counts = manifest.counts();
    eprintln!(
        "wrote {} images ({} with lesions) to {}",
        manifest.len(),
        counts.positives(),
        args.out.display()
    );
    print_json(json!({
        "command": "synth",
        "n": manifest.len(),
        "positives": counts.positives(),
        "size": args.size,
        "seed": args.seed,
        "manifest": args.out.join("manifest.csv"),
    }));
    Ok(())
}

pub fn train(args: TrainArgs) -> Result {
    let manifest = open_manifest(&args.data)?;
    let (train_rows, val_rows) = match &args.val_data {
        Some(val) => {
            let val_args = DataArgs {
                data: val.clone(),
                images: None,
            };
            (manifest, open_manifest(&val_args)?)
        }
        None => split(&manifest, args.train_fraction, args.seed)?,
    };
    let channels: [usize; 3] = args
        .channels
        .clone()
        .try_into()
        .map_err(|_| CliError::Usage("--channels expects three values".into()))?;
    let mut config = ModelConfig::default()
        .with_input_size(args.input_size)
        .with_layer_channels(channels);
    if args.dense_skips {
        config = config.with_skip_mode(SkipMode::Dense);
    }
    config.validate()?;

    eprintln!("loading {} training and {} validation images", train_rows.len(), val_rows.len());
    let train_set = Dataset::with_own_means(&load_samples(&train_rows)?, args.input_size)?;
    let val_set = Dataset::from_samples(&load_samples(&val_rows)?, train_set.preprocess)?;
    let cfg = TrainConfig {
        learning_rate: args.lr,
        epochs: args.epochs,
        batch_size: args.batch,
        seed: args.seed,
        class_weights: parse_class_weights(args.class_weights.as_deref(), &train_set)?,
        weight_decay: args.weight_decay,
        augment: !args.no_augment,
    };
    cfg.validate()?;
    let model = Model::build(config, args.seed)?;
    let result = fit_with(model, &train_set, &val_set, &cfg, |r| {
        eprintln!(
            "epoch {:>4}  train loss {:.4} acc {:.3}  val loss {:.4} acc {:.3}",
            r.epoch, r.train_loss, r.train_accuracy, r.val_loss, r.val_accuracy
        );
    })?;

    if let Some(parent) = args.out_checkpoint.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|source| CliError::Io {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    let bytes = checkpoint::save(&result.model, &args.out_checkpoint)?;
    let best_path = best_checkpoint_path(&args.out_checkpoint);
    let best = match &result.best {
        Some(best) => {
            checkpoint::save(&best.model, &best_path)?;
            Some(best.epoch)
        }
        None => None,
    };
    let hist_path = history_path(&args.out_checkpoint);
    result.history.write_csv(&hist_path)?;
    let last = result.history.last();
    if let Some(r) = last {
        eprintln!(
            "final: train accuracy {:.3}, val accuracy {:.3}; checkpoint {} ({bytes} bytes)",
            r.train_accuracy,
            r.val_accuracy,
            args.out_checkpoint.display()
        );
    }
    print_json(json!({
        "command": "train",
        "epochs": result.history.len(),
        "train_loss": last.map(|r| r.train_loss),
        "train_accuracy": last.map(|r| r.train_accuracy),
        "val_loss": last.map(|r| r.val_loss),
        "val_accuracy": last.map(|r| r.val_accuracy),
        "n_train": train_set.len(),
        "n_val": val_set.len(),
        "channel_means": result.model.channel_means,
        "checkpoint": args.out_checkpoint,
        "checkpoint_bytes": bytes,
        "best_checkpoint": best.map(|_| best_path),
        "best_epoch": best,
        "history": hist_path,
    }));
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result {
    let (model, crc) = checkpoint::load_with_crc(&args.checkpoint)?;
    let manifest = open_manifest(&args.data)?;
    let preprocess = PreprocessConfig::new(model.config.input_size, model.channel_means)?;
    let set = Dataset::from_samples(&load_samples(&manifest)?, preprocess)?;
    let m = evaluate(&model, &set)?;
    eprintln!("{} samples: loss {:.4}, accuracy {:.3}", set.len(), m.loss, m.accuracy);
    print_json(json!({
        "command": "eval",
        "n": set.len(),
        "positives": manifest.counts().positives(),
        "loss": m.loss,
        "accuracy": m.accuracy,
        "model_version": checkpoint::model_version(crc),
    }));
    Ok(())
}

pub fn predict(args: PredictArgs) -> Result {
    let (model, crc) = checkpoint::load_with_crc(&args.checkpoint)?;
    let bytes = std::fs::read(&args.image).map_err(|source| CliError::Io {
        path: args.image.clone(),
        source,
    })?;
    let version = checkpoint::model_version(crc);
    let resp = predict_bytes(&model, &version, &bytes, false)?;
    let mut out = json!({
        "command": "predict",
        "probability_melanoma": resp.probability_melanoma,
        "label": resp.label,
        "model_version": resp.model_version,
    });
    if args.cam || args.out_overlay.is_some() || args.out_heatmap.is_some() {
        let resized = decode_and_resize(&model, &bytes)?;
        let preprocess = PreprocessConfig::new(model.config.input_size, model.channel_means)?;
        let input = dermresnet::data::normalize(&resized, &preprocess)?;
        let s = preprocess.target_size;
        let proba = model.predict_proba(&input.reshape(&[1, 3, s, s]).map_err(ModelError::from)?)?;
        let target = argmax_rows(&proba)[0];
        let heat = gradcam(&model, &input, target)?;
        out["target_class"] = json!(target);
        out["raw_max"] = json!(heat.raw_max);
        if let Some(path) = &args.out_overlay {
            let img = overlay(&resized, &heat, OVERLAY_ALPHA)?;
            img.save(path).map_err(|e| CliError::Io {
                path: path.clone(),
                source: std::io::Error::other(e),
            })?;
            out["overlay"] = json!(path);
        }
        if let Some(path) = &args.out_heatmap {
            heat.write_text(path)?;
            out["heatmap"] = json!(path);
        }
    }
    eprintln!("{}: melanoma probability {:.4} ({})", args.image.display(), resp.probability_melanoma, resp.label);
    print_json(out);
    Ok(())
}

pub fn serve(args: ServeArgs) -> Result {
    let cfg = ServiceConfig::from_env()?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|source| CliError::Io {
            path: PathBuf::from("<runtime>"),
            source,
        })?;
    let ready = |addr: std::net::SocketAddr, version: &str| {
        eprintln!("serving model {version} on http://{addr}");
        print_json(json!({ "command": "serve", "address": addr.to_string(), "model_version": version }));
    };
    runtime.block_on(dermresnet_service::serve(&args.checkpoint, &args.bind, cfg, ready))?;
    Ok(())
}
