use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use icrl_core::airn::AirnInit;
use icrl_core::data::{gen_blobs, gen_outlier_blobs, load_container, save_container, DatasetContainer, SyntheticSpec};
use icrl_core::episodes::{
    backbone_checkpoint, eval_episode, evaluate, infer_episode, load_pretrained, meta_train_with, model_checkpoint,
    model_from_checkpoint, pretrain as run_pretrain, Checkpoint, ClassPool, EvalSpec, METRICS_HEADER,
};
use icrl_core::model::IcrlModel;
use icrl_core::{Error, Result};
use log::info;

use crate::config::RunConfig;
use crate::{InspectArgs, RunArgs, SynthArgs};

fn load_dataset(path: &Path) -> Result<DatasetContainer> {
    if !path.exists() {
        return Err(Error::Config(format!("dataset {} does not exist", path.display())));
    }
    let data = load_container(path)?;
    info!(
        "loaded {} classes of {:?} images from {}",
        data.num_classes(),
        data.instance_shape(),
        path.display()
    );
    Ok(data)
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let path = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("no checkpoint given (use --checkpoint)".into()))?;
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)?;
    info!("wrote {}", path.display());
    Ok(())
}

pub fn pretrain(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve(RunConfig::default(), "episodes", "pretrain_epochs")?;
    let data = load_dataset(cfg.dataset()?)?;
    let out = cfg.out()?;
    let split = cfg.split_spec(data.num_classes())?;
    let outcome = run_pretrain(&data, &split.train, &cfg.model.backbone, &cfg.train)?;
    backbone_checkpoint(
        &outcome.backbone,
        &cfg.model.backbone,
        &cfg.train,
        outcome.selected_epoch,
    )
    .save(out)?;
    info!("wrote {}", out.display());
    write_file(&cfg.metrics_path()?, &outcome.metrics_csv())?;
    match outcome.selected_epoch {
        Some(e) => println!(
            "selected epoch {} (validation 1-shot accuracy {:.4})",
            e,
            outcome.history[e - 1].val_acc
        ),
        None => println!("no epochs run; wrote the initial backbone"),
    }
    Ok(())
}

pub fn meta_train(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve(RunConfig::default(), "episodes", "epochs")?;
    let data = load_dataset(cfg.dataset()?)?;
    let out = cfg.out()?;
    let split = cfg.split_spec(data.num_classes())?;
    let mut model = IcrlModel::new(cfg.model.clone(), cfg.train.seed, AirnInit::Random)?;
    if args.from_scratch {
        if cfg.checkpoint.is_some() {
            return Err(Error::Config(
                "--from-scratch and --checkpoint are mutually exclusive".into(),
            ));
        }
    } else {
        if cfg.checkpoint.is_none() {
            return Err(Error::Config(
                "meta-training needs a pre-trained --checkpoint or --from-scratch".into(),
            ));
        }
        let ck = load_checkpoint(&cfg)?;
        if ck.kind() == Some("model") {
            let (loaded, _) = model_from_checkpoint(&ck)?;
            loaded.check_shots(cfg.train.shots)?;
            model = loaded;
        } else {
            load_pretrained(&mut model, &ck)?;
        }
    }
    let metrics = cfg.metrics_path()?;
    let mut w = BufWriter::new(File::create(&metrics)?);
    writeln!(w, "{}", METRICS_HEADER)?;
    let mut window = Vec::new();
    meta_train_with(&data, &split.train, &mut model, &cfg.train, &mut |row| {
        writeln!(w, "{}", row.csv_line())?;
        window.push(row.query_acc);
        Ok(())
    })?;
    w.flush()?;
    model_checkpoint(&model, &cfg.train).save(out)?;
    info!("wrote {} and {}", out.display(), metrics.display());
    let tail = &window[window.len().saturating_sub(50)..];
    if !tail.is_empty() {
        println!(
            "mean query accuracy over the last {} episodes: {:.4}",
            tail.len(),
            tail.iter().sum::<f64>() / tail.len() as f64
        );
    }
    Ok(())
}

/// Loads the model checkpoint and re-resolves the config on top of the
/// settings it was trained with.
fn trained_model(args: &RunArgs) -> Result<(RunConfig, IcrlModel)> {
    let first = args.resolve(RunConfig::default(), "eval_episodes", "epochs")?;
    let ck = load_checkpoint(&first)?;
    let (mut model, _) = model_from_checkpoint(&ck)?;
    let mut base = RunConfig::default();
    base.apply_checkpoint_meta(&ck.meta)?;
    let cfg = args.resolve(base, "eval_episodes", "epochs")?;
    let (have, want) = (&model.config, &cfg.model);
    if have.backbone != want.backbone
        || have.pooling != want.pooling
        || have.airn != want.airn
        || have.hidden != want.hidden
    {
        return Err(Error::Config(
            "architecture flags conflict with the checkpoint; drop --airn/--pooling or retrain".into(),
        ));
    }
    model.config.tau = want.tau;
    Ok((cfg, model))
}

fn eval_spec(cfg: &RunConfig) -> EvalSpec {
    EvalSpec {
        episodes: cfg.train.eval_episodes,
        ways: cfg.train.ways,
        shots: cfg.train.shots,
        queries: cfg.train.queries,
        seed: cfg.train.seed,
    }
}

pub fn eval(args: &RunArgs) -> Result<()> {
    let (cfg, model) = trained_model(args)?;
    let data = load_dataset(cfg.dataset()?)?;
    let split = cfg.split_spec(data.num_classes())?;
    let report = evaluate(&model, &data, split.part(&cfg.eval_split)?, &eval_spec(&cfg))?;
    println!("{}", report.to_text());
    match &cfg.out {
        Some(p) => write_file(p, &report.to_json())?,
        None => print!("{}", report.to_json()),
    }
    Ok(())
}

pub fn inspect(args: &InspectArgs) -> Result<()> {
    let (cfg, model) = trained_model(&args.run)?;
    let data = load_dataset(cfg.dataset()?)?;
    let split = cfg.split_spec(data.num_classes())?;
    let pool = ClassPool::all(&data, split.part(&cfg.eval_split)?)?;
    let episode = eval_episode(&pool, &eval_spec(&cfg), args.episode)?;
    let inference = infer_episode(&model, &data, &episode)?;
    let weights = inference.significance.ok_or_else(|| {
        Error::Contract("the model averages support instances (airn off); there are no weights to inspect".into())
    })?;
    if episode.shots() == 1 {
        eprintln!("note: K = 1, so each class has a single support instance and one weight");
    }
    let mut csv = String::from("episode,class,instance,weight\n");
    for (slot, sig) in weights.iter().enumerate() {
        let mut rows: Vec<(usize, f32)> = episode.support[slot]
            .iter()
            .copied()
            .zip(sig.0.iter().copied())
            .collect();
        rows.sort_by(|a, b| b.1.total_cmp(&a.1));
        for (instance, w) in rows {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                args.episode, episode.classes[slot], instance, w
            ));
        }
    }
    match &cfg.out {
        Some(p) => write_file(p, &csv),
        None => {
            print!("{}", csv);
            Ok(())
        }
    }
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        classes: args.classes,
        instances_per_class: args.per_class,
        channels: args.channels,
        size: args.size,
        separation: args.separation,
        noise: args.noise,
        outlier_fraction: args.outlier_fraction,
        outlier_rule: args.outlier_rule.parse()?,
        seed: args.seed,
    };
    if spec.outlier_fraction > 0.0 {
        let (data, flags) = gen_outlier_blobs(&spec)?;
        save_container(&data, &args.out)?;
        let mut sidecar = args.out.as_os_str().to_owned();
        sidecar.push(".flags.csv");
        flags.save(&sidecar)?;
        println!(
            "wrote {} ({} classes, {} outliers; flags in {})",
            args.out.display(),
            data.num_classes(),
            flags.count(),
            Path::new(&sidecar).display()
        );
    } else {
        let data = gen_blobs(&spec)?;
        save_container(&data, &args.out)?;
        println!("wrote {} ({} classes)", args.out.display(), data.num_classes());
    }
    Ok(())
}
