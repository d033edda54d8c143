//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cafegan::checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, save_classifier};
use cafegan::data::{make_synthetic_dataset, tensor_to_image, write_image_folder, ImageSource, SyntheticSpec};
use cafegan::evaluation::{
    compute_fid, eval_attribute_accuracy, run_ablation, train_eval_classifier, write_heatmaps, ClassifierConfig,
    EvalClassifier, Variant, CLASSIFIER_CAVEAT,
};
use cafegan::training::{open_datasets, MetricLog, TrainConfig, TrainState};
use ndarray::{s, Array2, Axis};

use crate::model::{apply_overrides, parse_attribute_spec, Model};

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Globals {
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Globals {
    fn checkpoint(&self) -> anyhow::Result<&Path> {
        self.checkpoint.as_deref().context("--checkpoint is required for this command")
    }

    fn config(&self) -> anyhow::Result<TrainConfig> {
        let path = self.config.as_deref().context("--config is required for this command")?;
        let mut cfg = TrainConfig::load(path)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

fn classifier_config(cfg: &TrainConfig) -> ClassifierConfig {
    ClassifierConfig {
        resolution: cfg.resolution,
        attributes: cfg.attributes.clone(),
        seed: cfg.seed,
        ..ClassifierConfig::default()
    }
}

pub struct TrainArgs {
    pub ablation: Option<Variant>,
    pub epochs: Option<usize>,
    pub output: Option<PathBuf>,
    pub resume: bool,
    pub no_classifier: bool,
}

pub fn cmd_train(g: &Globals, args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = g.config()?;
    if let Some(v) = args.ablation {
        cfg = v.apply(&cfg);
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(o) = &args.output {
        cfg.output_dir = o.display().to_string();
    }
    cfg.validate()?;
    let out = PathBuf::from(&cfg.output_dir);
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml_string())?;

    let data = open_datasets(&cfg)?;
    let classifier = if args.no_classifier {
        None
    } else {
        let c = train_eval_classifier(classifier_config(&cfg), data.classifier_train.as_ref(), &data.test)?;
        println!("evaluation classifier held-out accuracy {:.4}", c.heldout_accuracy);
        save_classifier(&c, &out.join("classifier.ckpt"))?;
        Some(c)
    };

    let metrics_path = out.join("metrics.csv");
    let (mut state, mut log) = if args.resume {
        let path = g.checkpoint()?;
        let ck = load_checkpoint_for(path, &cfg.attributes)?;
        let log = match fs::read_to_string(&metrics_path) {
            Ok(text) => MetricLog::parse_csv(&text)?,
            Err(_) => MetricLog::default(),
        };
        let mut state = ck.state;
        state.config.epochs = cfg.epochs;
        println!("resuming at epoch {} batch {}", state.epoch, state.batch);
        (state, log)
    } else {
        (TrainState::new(cfg.clone())?, MetricLog::default())
    };

    let n_val = data.test.len().min(64);
    let mut best = f64::NEG_INFINITY;
    let every = cfg.checkpoint_every;
    state.run(data.train.as_ref(), &mut log, None, &mut |s, log| {
        fs::write(&metrics_path, log.to_csv()).map_err(|e| cafegan::Error::io(&metrics_path, e))?;
        if every > 0 && s.epoch % every == 0 {
            save_checkpoint(s, classifier.as_ref(), &out.join("last.ckpt"))?;
            if let Some(c) = &classifier {
                let rep = eval_attribute_accuracy(&s.generator, c, &data.test, n_val, "validation")?;
                if rep.average > best {
                    best = rep.average;
                    save_checkpoint(s, Some(c), &out.join("best.ckpt"))?;
                }
            }
        }
        let last = |t: &str| log.series(t).last().copied().unwrap_or(f64::NAN);
        eprintln!(
            "epoch {:>4}  d_total {:>9.4}  g_total {:>9.4}  g_rec {:.4}",
            s.epoch,
            last("d_total"),
            last("g_total"),
            last("g_rec")
        );
        Ok(())
    })?;
    fs::write(&metrics_path, log.to_csv())?;
    let final_path = out.join("final.ckpt");
    save_checkpoint(&state, classifier.as_ref(), &final_path)?;
    println!("wrote {} and {}", final_path.display(), metrics_path.display());
    Ok(())
}

fn image_inputs(input: &Path) -> anyhow::Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
            })
            .collect();
        files.sort();
        Ok(files)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        bail!("input {} does not exist", input.display())
    }
}

fn output_for(input: &Path, file: &Path, output: &Path) -> PathBuf {
    if input.is_dir() {
        output.join(file.file_stem().unwrap_or_default()).with_extension("png")
    } else {
        output.to_path_buf()
    }
}

fn parse_bits(s: &str, k: usize) -> anyhow::Result<Vec<u8>> {
    let bits: Vec<u8> = s
        .split(',')
        .map(|b| match b.trim() {
            "0" => Ok(0),
            "1" => Ok(1),
            other => bail!("source bit `{other}` is not 0 or 1"),
        })
        .collect::<anyhow::Result<_>>()?;
    if bits.len() != k {
        bail!("expected {k} source bits, got {}", bits.len());
    }
    Ok(bits)
}

pub fn cmd_edit(g: &Globals, input: &Path, output: &Path, set: &str, source: Option<&str>) -> anyhow::Result<()> {
    let model = Model::load(g.checkpoint()?)?;
    let overrides = parse_attribute_spec(set, &model.names)?;
    let files = image_inputs(input)?;
    if input.is_dir() {
        fs::create_dir_all(output)?;
    } else if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    for file in &files {
        let img = image::open(file).with_context(|| format!("reading {}", file.display()))?;
        let x = model.prepare(&img)?;
        let v_s = match source {
            Some(bits) => parse_bits(bits, model.k())?,
            None => model.estimate_source(&x)?,
        };
        let v_t = apply_overrides(&v_s, &overrides);
        let (y, v_d) = model.edit(&x, &v_s, &v_t)?;
        let dest = output_for(input, file, output);
        tensor_to_image(&y).save(&dest).with_context(|| format!("writing {}", dest.display()))?;
        println!("{}: v_s={v_s:?} v_t={v_t:?} v_d={v_d:?} -> {}", file.display(), dest.display());
    }
    Ok(())
}

pub fn cmd_visualize(g: &Globals, input: &Path, output: &Path, attributes: Option<&str>) -> anyhow::Result<()> {
    let model = Model::load(g.checkpoint()?)?;
    let wanted: Option<Vec<String>> = attributes.map(|a| {
        a.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect()
    });
    if let Some(w) = &wanted {
        for name in w {
            if !model.names.contains(name) {
                return Err(cafegan::Error::UnknownAttribute { name: name.clone(), valid: model.names.clone() }.into());
            }
        }
    }
    for file in image_inputs(input)? {
        let img = image::open(&file).with_context(|| format!("reading {}", file.display()))?;
        let x = model.prepare(&img)?;
        let mut maps = model.attention(&x)?;
        if let Some(w) = &wanted {
            maps.af.retain(|o| w.contains(&o.attribute));
            if let Some(c) = &mut maps.cafe {
                c.retain(|o| w.contains(&o.attribute));
            }
        }
        let stem = file.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let base = x.index_axis(Axis(0), 0).to_owned();
        let written = write_heatmaps(&maps, &base, &stem, output)?;
        for p in &written {
            println!("{}", p.display());
        }
        if maps.cafe.is_none() {
            println!("{stem}: CAFE maps unavailable (checkpoint trained without CAB)");
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Accuracy,
    Fid,
    Ablation,
}

fn bundled_classifier(ck: Option<EvalClassifier>) -> anyhow::Result<EvalClassifier> {
    ck.context("checkpoint has no bundled evaluation classifier; train without --no-classifier")
}

pub fn cmd_evaluate(g: &Globals, mode: EvalMode, n: Option<usize>, output: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(output)?;
    match mode {
        EvalMode::Accuracy => {
            let path = g.checkpoint()?;
            let ck = load_checkpoint(path)?;
            let cfg = match &g.config {
                Some(_) => g.config()?,
                None => ck.state.config.clone(),
            };
            let data = open_datasets(&cfg)?;
            let c = bundled_classifier(ck.classifier)?;
            let n = n.unwrap_or(data.test.len()).min(data.test.len());
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let rep = eval_attribute_accuracy(&ck.state.generator, &c, &data.test, n, &id)?;
            fs::write(output.join("accuracy.csv"), rep.to_csv())?;
            fs::write(output.join("accuracy.json"), rep.to_json())?;
            println!("{}", rep.summary());
            println!("note: {CLASSIFIER_CAVEAT}");
        }
        EvalMode::Fid => {
            let ck = load_checkpoint(g.checkpoint()?)?;
            let cfg = match &g.config {
                Some(_) => g.config()?,
                None => ck.state.config.clone(),
            };
            let data = open_datasets(&cfg)?;
            let c = bundled_classifier(ck.classifier)?;
            let half = data.test.len() / 2;
            let a = data.test.images.slice(s![..half, .., .., ..]).to_owned();
            let b = data.test.images.slice(s![half..2 * half, .., .., ..]).to_owned();
            let labels = data.test.labels_f32();
            let k = cfg.attributes.len();
            let mut v_d = Array2::zeros((half, k));
            for i in 0..half {
                let attr = i % k;
                v_d[[i, attr]] = 1.0 - 2.0 * labels[[i, attr]];
            }
            let edited = ck.state.generator.run(&a, &v_d)?;
            let fid_edit = compute_fid(&edited, &b, &c)?;
            let fid_real = compute_fid(&a, &b, &c)?;
            let fid_self = compute_fid(&b, &b, &c)?;
            let body = serde_json::json!({
                "fid_edited_vs_real": fid_edit,
                "fid_real_vs_real": fid_real,
                "fid_identical": fid_self,
                "images_per_set": half,
                "embedder": "evaluation classifier penultimate features",
            });
            fs::write(output.join("fid.json"), serde_json::to_string_pretty(&body)?)?;
            println!("FID edited vs real {fid_edit:.4}  real floor {fid_real:.4}  identical sets {fid_self:.2e}");
        }
        EvalMode::Ablation => {
            let (cfg, classifier) = match (&g.config, &g.checkpoint) {
                (Some(_), _) => (g.config()?, None),
                (None, Some(p)) => {
                    let ck = load_checkpoint(p)?;
                    (ck.state.config, ck.classifier)
                }
                (None, None) => bail!("ablation needs --config or --checkpoint"),
            };
            let data = open_datasets(&cfg)?;
            let c = match classifier {
                Some(c) => c,
                None => train_eval_classifier(classifier_config(&cfg), data.classifier_train.as_ref(), &data.test)?,
            };
            let n = n.unwrap_or(data.test.len()).min(data.test.len());
            let variants = [Variant::Full, Variant::NoCm, Variant::NoCab];
            let table = run_ablation(&cfg, &variants, data.train.as_ref(), &data.test, &c, n)?;
            fs::write(output.join("ablation.csv"), table.to_csv())?;
            for (_, r) in &table.rows {
                println!("{}", r.summary());
            }
            println!("ordering: {}", table.ordering().join(" > "));
            println!("note: {CLASSIFIER_CAVEAT}");
        }
    }
    Ok(())
}

/// Writes a synthetic image folder with an annotation file.
pub fn cmd_synth(g: &Globals, output: &Path, n: usize) -> anyhow::Result<()> {
    let spec = SyntheticSpec::desk(n, g.seed.unwrap_or(0));
    let ds = make_synthetic_dataset(&spec)?;
    let ann = write_image_folder(&ds.data, output)?;
    println!("wrote {n} images and {}", ann.display());
    Ok(())
}
