use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use foodgan_core::augment::{
    build_experiment, comparison_csv, entanglement_probe, train_classifier, train_oracle, AccuracyReport, Arm,
    ArmSizes, ClassifierConfig, Conditional, ImageBank, PerClass,
};
use foodgan_core::data::{build_manifest, from_model_domain, DatasetManifest, ManifestOptions, Source, SourceDir};
use foodgan_core::metrics::{fid_images, pfid, GeneratorRenderer, MetricReport, RandomConvExtractor};
use foodgan_core::model::Generator;
use foodgan_core::tensor::Tensor;
use foodgan_core::toy::ToyDatasetSpec;
use foodgan_core::train::{global_reals, train_stage1, train_stage2, JsonlLog, TrainConfig, TrainData, TrainState, Trainer};
use foodgan_survey::{DeckConfig, ImagePool, SurveyService};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use toml::Value;

use crate::args::*;
use crate::config::{apply_sets, into_config, load_table, set_path};
use crate::error::{CliError, Result};

fn write_json<T: Serialize>(path: Option<&Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            fs::write(p, text).map_err(|e| CliError::io(p, e))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    if !path.is_file() {
        return Err(CliError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found")));
    }
    Ok(DatasetManifest::read_jsonl(path)?)
}

fn load_checkpoint(path: &Path) -> Result<TrainState> {
    if !path.is_file() {
        return Err(CliError::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found")));
    }
    Ok(TrainState::load(path)?)
}

fn pick_generator(state: &TrainState, latest: bool) -> Result<Generator> {
    Ok(if latest {
        state.latest_generator()?
    } else {
        state.selected_generator()?
    })
}

fn class_index(names: &[String], num_classes: usize, class: Option<&str>) -> Result<usize> {
    match class {
        None if num_classes == 1 => Ok(0),
        None => Err(CliError::Usage("--class is required for a multi-class checkpoint".into())),
        Some(c) => names
            .iter()
            .position(|n| n == c)
            .or_else(|| c.parse::<usize>().ok().filter(|&i| i < num_classes))
            .ok_or_else(|| CliError::Usage(format!("unknown class `{c}`; known: {}", names.join(", ")))),
    }
}

pub fn make_toy(a: &MakeToyArgs) -> Result<()> {
    let spec = match a.kind {
        ToyKind::TwoShapes => ToyDatasetSpec::two_shapes(a.per_class, a.lr_size),
        ToyKind::FineTexture => ToyDatasetSpec::fine_texture(a.per_class, a.hr_per_class, a.lr_size),
        ToyKind::ThreeFoods => ToyDatasetSpec::three_foods(a.per_class, a.hr_per_class, a.lr_size),
    };
    spec.write(&a.out, a.seed)?;
    let build = build_manifest(&a.out, &spec.class_names(), &spec.manifest_options(a.seed))?;
    let path = a.out.join("manifest.jsonl");
    build.manifest.write_jsonl(&path)?;
    println!("{} images, classes {} -> {}", build.manifest.records.len(), spec.class_names().join(","), path.display());
    Ok(())
}

fn parse_layout(spec: &str) -> Result<SourceDir> {
    let (dir, src) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--layout expects SUBDIR=SOURCE, got `{spec}`")))?;
    let source = match src.to_ascii_uppercase().as_str() {
        "LR" => Source::Lr,
        "HR" => Source::Hr,
        "SYNTHETIC" => Source::Synthetic,
        other => return Err(CliError::Usage(format!("unknown source `{other}`"))),
    };
    Ok(SourceDir {
        subdir: PathBuf::from(dir),
        source,
    })
}

#[derive(Serialize)]
struct PrepareSummary {
    records: usize,
    lr: usize,
    hr: usize,
    synthetic: usize,
    skipped_undecodable: usize,
    rejected_too_small: usize,
    manifest: PathBuf,
}

pub fn prepare_data(a: &PrepareDataArgs) -> Result<()> {
    let mut opts = ManifestOptions::flat(a.lr_size);
    opts.hr_min_side = a.hr_min_side;
    opts.seed = a.seed;
    if !a.layout.is_empty() {
        opts.layout = a.layout.iter().map(|s| parse_layout(s)).collect::<Result<_>>()?;
    }
    let build = build_manifest(&a.root, &a.classes, &opts)?;
    build.manifest.write_jsonl(&a.out)?;
    let count = |s| build.manifest.records.iter().filter(|r| r.source == s).count();
    write_json(
        None,
        &PrepareSummary {
            records: build.manifest.records.len(),
            lr: count(Source::Lr),
            hr: count(Source::Hr),
            synthetic: count(Source::Synthetic),
            skipped_undecodable: build.skipped_undecodable,
            rejected_too_small: build.rejected_too_small,
            manifest: a.out.clone(),
        },
    )
}

#[derive(Serialize)]
struct TrainSummary {
    config_digest: String,
    checkpoint_digest: String,
    iteration: u64,
    best_score: Option<f64>,
    best_iteration: Option<u64>,
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let manifest = read_manifest(&a.manifest)?;
    let origin = a.config.clone().unwrap_or_else(|| PathBuf::from("<flags>"));
    let mut table = load_table(a.config.as_deref())?;
    apply_sets(&mut table, &a.sets)?;

    let stage = match a.stage {
        StageArg::Global => "GLOBAL",
        StageArg::Patch => "PATCH",
    };
    set_path(&mut table, "stage", Value::String(stage.into()))?;
    let mode = match a.mode {
        ModeArg::Multi => "MULTI_CLASS",
        ModeArg::Single => "SINGLE_CLASS",
    };
    set_path(&mut table, "mode", Value::String(mode.into()))?;
    if let Some(seed) = a.seed {
        let as_int = |v: u64| -> Result<Value> {
            i64::try_from(v)
                .map(Value::Integer)
                .map_err(|_| CliError::Usage("--seed must be below 2^63".into()))
        };
        set_path(&mut table, "seed", as_int(seed)?)?;
        set_path(&mut table, "generator.seed", as_int(seed)?)?;
        set_path(&mut table, "discriminator.seed", as_int(seed.wrapping_add(1) & (i64::MAX as u64))?)?;
    }
    if let Some(n) = a.iterations {
        set_path(&mut table, "total_iterations", Value::Integer(n as i64))?;
    }
    if let Some(t) = &a.teacher {
        set_path(&mut table, "teacher_checkpoint", Value::String(t.to_string_lossy().into_owned()))?;
    }

    let (mut data_manifest, classes) = match a.mode {
        ModeArg::Multi => {
            if a.class.is_some() {
                return Err(CliError::Usage("--class only applies to --mode single".into()));
            }
            (manifest.clone(), manifest.classes.clone())
        }
        ModeArg::Single => {
            let name = a
                .class
                .as_deref()
                .ok_or_else(|| CliError::Usage("--mode single needs --class".into()))?;
            let idx = manifest
                .class_index(name)
                .ok_or_else(|| CliError::Usage(format!("class `{name}` not in manifest")))?;
            (manifest.single_class(idx), vec![name.to_string()])
        }
    };
    if a.stage == StageArg::Global {
        data_manifest = data_manifest.only_source(Source::Lr);
    }
    let k = Value::Integer(classes.len() as i64);
    set_path(&mut table, "generator.num_classes", k.clone())?;
    set_path(&mut table, "discriminator.num_classes", k)?;
    set_path(&mut table, "classes", Value::Array(classes.into_iter().map(Value::String).collect()))?;

    let mut config: TrainConfig = into_config(table, &origin)?;
    if a.stage == StageArg::Patch {
        // Architecture and init seeds come from the teacher; the student starts from its weights.
        let path = a
            .teacher
            .as_deref()
            .ok_or_else(|| CliError::Usage("--stage patch needs --teacher".into()))?;
        let teacher = load_checkpoint(path)?;
        if teacher.config.generator.num_classes != config.generator.num_classes {
            return Err(CliError::Usage(format!(
                "teacher has {} classes, manifest selection has {}",
                teacher.config.generator.num_classes, config.generator.num_classes
            )));
        }
        config.generator = teacher.config.generator.clone();
        config.discriminator = teacher.config.discriminator.clone();
    }
    config.validate()?;
    let digest = config.digest();

    create_dir(&a.out)?;
    let resolved = toml::to_string(&config).map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg_path = a.out.join("config.toml");
    fs::write(&cfg_path, format!("# config_digest = \"{digest}\"\n{resolved}")).map_err(|e| CliError::io(&cfg_path, e))?;

    let log_path = a.out.join("train_log.jsonl");
    let mut file = BufWriter::new(File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?);
    writeln!(file, "{}", serde_json::json!({ "config_digest": digest })).map_err(|e| CliError::io(&log_path, e))?;
    let mut log = JsonlLog::new(file);

    let data = TrainData::load(data_manifest)?;
    let on_entry = |e: &foodgan_core::train::LogEntry| {
        if let Some(f) = e.fid {
            log::info!("iteration {} fid {f:.5} pfid {:?}", e.iteration, e.pfid);
        }
        log.append(e)
    };
    let state = match a.stage {
        StageArg::Global => train_stage1(&data, config, on_entry)?,
        StageArg::Patch => train_stage2(&data, config, on_entry)?,
    };
    drop(log);
    let ckpt = a.out.join("checkpoint.ckpt");
    state.save(&ckpt)?;
    let summary = TrainSummary {
        config_digest: digest,
        checkpoint_digest: state.digest()?,
        iteration: state.iteration,
        best_score: state.best_fid,
        best_iteration: state.best_iteration,
    };
    write_json(Some(&a.out.join("summary.json")), &summary)?;
    write_json(None, &summary)
}

/// `seed`-driven latents, fixed class label, batches of 64.
fn class_samples(gen: &Generator, class: usize, n: usize, seed: u64) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = gen.config.out_size;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let m = (n - out.len()).min(64);
        let z = Tensor::randn(&[m, gen.config.z_dim], 1.0, &mut rng);
        let imgs = gen.render(&z, &vec![class; m], &vec![gen.global_spec(); m])?;
        out.extend((0..m).map(|i| Tensor::from_vec(&[3, s, s], imgs.row(i).to_vec())));
    }
    Ok(out)
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let state = load_checkpoint(&a.ckpt)?;
    let gen = pick_generator(&state, a.latest)?;
    let idx = class_index(&state.config.classes, gen.config.num_classes, a.class.as_deref())?;
    let name = state.config.classes.get(idx).cloned().unwrap_or_else(|| format!("class{idx}"));
    create_dir(&a.out)?;
    for (i, img) in class_samples(&gen, idx, a.n, a.seed)?.iter().enumerate() {
        let path = a.out.join(format!("s{}_i{i:05}_{name}.png", a.seed));
        from_model_domain(img)
            .save(&path)
            .map_err(|e| CliError::io(&path, std::io::Error::other(e)))?;
    }
    println!("{} images -> {}", a.n, a.out.display());
    Ok(())
}

fn parse_extractor(spec: &str) -> Result<RandomConvExtractor> {
    let seed = spec
        .strip_prefix("random-conv:")
        .or_else(|| spec.strip_prefix("random-conv-d64-seed").and_then(|s| s.strip_suffix("-v1")))
        .and_then(|s| s.parse::<u64>().ok())
        .ok_or_else(|| CliError::Usage(format!("unknown extractor `{spec}`; use random-conv:SEED")))?;
    Ok(RandomConvExtractor::new(seed))
}

/// The manifest restricted to what the checkpoint models: one class for a
/// single-class checkpoint, all classes (checked by name) otherwise.
fn eval_manifest(state: &TrainState, manifest: DatasetManifest) -> Result<DatasetManifest> {
    let names = &state.config.classes;
    if state.config.generator.num_classes == 1 && manifest.num_classes() > 1 {
        let name = names
            .first()
            .ok_or_else(|| CliError::Usage("checkpoint has no class name to select from the manifest".into()))?;
        let idx = manifest
            .class_index(name)
            .ok_or_else(|| CliError::Usage(format!("class `{name}` not in manifest")))?;
        return Ok(manifest.single_class(idx));
    }
    if !names.is_empty() && names != &manifest.classes {
        return Err(CliError::Usage(format!(
            "manifest classes {:?} differ from checkpoint classes {:?}",
            manifest.classes, names
        )));
    }
    Ok(manifest)
}

pub fn eval_fid(a: &EvalFidArgs) -> Result<()> {
    let c = &a.common;
    let state = load_checkpoint(&c.ckpt)?;
    let gen = pick_generator(&state, c.latest)?;
    let extractor = parse_extractor(&c.extractor)?;
    let manifest = eval_manifest(&state, read_manifest(&c.manifest)?)?;
    let data = TrainData::load(manifest)?;
    let real = global_reals(&data, gen.config.out_size)?;
    let fake = Trainer::global_samples(&gen, a.n, c.seed)?;
    let mut report: MetricReport = fid_images(&real, &fake, &extractor, c.seed)?;
    report.config_digest = Some(state.config.digest());
    write_json(c.out.as_deref(), &report)
}

pub fn eval_pfid(a: &EvalPfidArgs) -> Result<()> {
    let c = &a.common;
    let state = load_checkpoint(&c.ckpt)?;
    let gen = pick_generator(&state, c.latest)?;
    let extractor = parse_extractor(&c.extractor)?;
    let manifest = eval_manifest(&state, read_manifest(&c.manifest)?)?;
    let data = TrainData::load(manifest)?;
    let run = pfid(
        &data.manifest,
        &data.store,
        &GeneratorRenderer::new(&gen),
        &extractor,
        a.patches,
        gen.config.out_size as u32,
        c.seed,
    )?;
    let mut report = run.report;
    report.config_digest = Some(state.config.digest());
    write_json(c.out.as_deref(), &report)
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct AugmentConfig {
    classifier: ClassifierConfig,
    sizes: ArmSizes,
}

pub fn augment(a: &AugmentArgs) -> Result<()> {
    if let Some(AugmentCommand::Compare { reports, out }) = &a.command {
        let mut parsed = Vec::with_capacity(reports.len());
        for p in reports {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            parsed.push(serde_json::from_str::<AccuracyReport>(&text)?);
        }
        parsed.sort_by_key(|r| r.arm);
        let csv = comparison_csv(&parsed);
        return match out {
            Some(p) => fs::write(p, csv).map_err(|e| CliError::io(p, e)),
            None => {
                print!("{csv}");
                Ok(())
            }
        };
    }
    let r = &a.run;
    let arm = match r.arm {
        Some(1) => Arm::Real,
        Some(2) => Arm::RealPlusSynthetic,
        Some(3) => Arm::DoubleReal,
        _ => return Err(CliError::Usage("augment needs --arm 1|2|3 or the compare subcommand".into())),
    };
    let manifest_path = r
        .manifest
        .as_deref()
        .ok_or_else(|| CliError::Usage("augment needs --manifest".into()))?;
    let origin = r.config.clone().unwrap_or_else(|| PathBuf::from("<flags>"));
    let mut table = load_table(r.config.as_deref())?;
    apply_sets(&mut table, &r.sets)?;
    let mut cfg: AugmentConfig = into_config(table, &origin)?;
    cfg.classifier.seed = r.seed;
    cfg.classifier.shuffle_labels = r.shuffle_labels;
    cfg.classifier.validate()?;

    let real = read_manifest(manifest_path)?;
    let synthetic = r.synthetic.as_deref().map(read_manifest).transpose()?;
    let setup = build_experiment(arm, &real, synthetic.as_ref(), cfg.sizes, r.seed)?;
    let bank = ImageBank::load(&real, synthetic.as_ref(), cfg.classifier.input_size)?;
    let (report, _) = train_classifier(&setup, &bank, &cfg.classifier)?;
    let name = format!(
        "report_arm{}_seed{}{}.json",
        r.arm.unwrap_or_default(),
        r.seed,
        if r.shuffle_labels { "_shuffled" } else { "" }
    );
    match &r.out {
        Some(dir) => {
            create_dir(dir)?;
            write_json(Some(&dir.join(name)), &report)?;
            println!("{} test accuracy {:.4}", arm.label(), report.test_acc);
            Ok(())
        }
        None => write_json(None, &report),
    }
}

pub fn survey_serve(a: &ServeArgs) -> Result<()> {
    let pool = ImagePool::from_dir(&a.images)?;
    let deck = match &a.deck {
        Some(p) => into_config::<DeckConfig>(load_table(Some(p))?, p)?,
        None => DeckConfig::standard(),
    };
    let service = Arc::new(SurveyService::open(pool, deck, a.salt.clone(), &a.log)?);
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| CliError::Usage(format!("bad listen address: {e}")))?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::io("tokio runtime", e))?;
    println!("survey service on http://{addr}");
    runtime
        .block_on(foodgan_survey::api::serve(service, addr))
        .map_err(|e| CliError::io(addr.to_string(), e))
}

#[derive(Serialize)]
struct ProbeReport {
    oracle_heldout_accuracy: f64,
    n: usize,
    seed: u64,
    multi: BTreeMap<String, f64>,
    single: BTreeMap<String, f64>,
}

pub fn probe_entanglement(a: &ProbeArgs) -> Result<()> {
    let multi_state = load_checkpoint(&a.multi)?;
    let multi = multi_state.selected_generator()?;
    let oracle_manifest = read_manifest(&a.oracle_manifest)?;
    let classes = if multi_state.config.classes.is_empty() {
        oracle_manifest.classes.clone()
    } else {
        multi_state.config.classes.clone()
    };
    if classes.len() != multi.config.num_classes || a.single.len() != classes.len() {
        return Err(CliError::Usage(format!(
            "need one single-class checkpoint per class ({} classes, {} given)",
            classes.len(),
            a.single.len()
        )));
    }
    let mut singles: Vec<Option<Generator>> = vec![None; classes.len()];
    for (k, p) in a.single.iter().enumerate() {
        let st = load_checkpoint(p)?;
        if st.config.generator.num_classes != 1 {
            return Err(CliError::Usage(format!("{} is not a single-class checkpoint", p.display())));
        }
        let slot = match st.config.classes.first() {
            Some(name) => classes
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| CliError::Usage(format!("class `{name}` of {} is unknown", p.display())))?,
            None => k,
        };
        singles[slot] = Some(st.selected_generator()?);
    }
    let singles: Vec<Generator> = singles
        .into_iter()
        .collect::<Option<_>>()
        .ok_or_else(|| CliError::Usage("single-class checkpoints do not cover every class".into()))?;
    let oracle_cfg = ClassifierConfig {
        width: a.oracle_width,
        input_size: multi.config.out_size,
        epochs: a.oracle_epochs,
        seed: a.seed,
        ..ClassifierConfig::default()
    };
    let oracle = train_oracle(&oracle_manifest, &oracle_cfg, 0.2)?;
    let report = ProbeReport {
        oracle_heldout_accuracy: oracle.heldout_accuracy,
        n: a.n,
        seed: a.seed,
        multi: entanglement_probe(&Conditional(&multi), &classes, &oracle, a.n, a.seed)?,
        single: entanglement_probe(&PerClass(singles.iter().collect()), &classes, &oracle, a.n, a.seed)?,
    };
    write_json(a.out.as_deref(), &report)
}
