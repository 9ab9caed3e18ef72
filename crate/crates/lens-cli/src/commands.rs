//! Implementations behind the CLI subcommands.

use std::path::{Path, PathBuf};

use lens_core::backbone::{
    patchify_batch, vit_forward_graph, ForwardMode, LoadedParams, Method, Model, ModelConfig,
    count_parameters, backbone_param_count,
};
use lens_core::checkpoint::atomic_write;
use lens_core::data::{
    corrupt, gen_ood, gen_synthetic, read_dataset, write_dataset, CorruptionKind, CorruptionSpec,
    Dataset, Split, SyntheticSpec,
};
use lens_core::diversity::{
    disagreement_matrix, diversity_score, export_function_space, jsd_matrix,
    svd_intruder_analysis, value_projection_updates, weight_cosine_matrix, DiversityError,
    DiversitySummary,
};
use lens_core::ensemble::{effective_weight, predict};
use lens_core::metrics::{calibration_report, ood_scores, PredictionSet};
use lens_core::rng::{derive, SplitMix64};
use lens_core::tensor::{op_probes, Tape};
use lens_core::train::{history_to_jsonl, train_run};

use crate::config::RunConfig;
use crate::{
    AnalyzeDiversityArgs, CliError, EvalArgs, GenDataArgs, GradcheckArgs, OodEvalArgs,
    ParamCountArgs, TrainArgs,
};

const EVAL_BATCH: usize = 64;
const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn configure_jobs(jobs: usize) {
    if jobs > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    atomic_write(path, text.as_bytes())
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", path.display())))
}

fn check_geometry(config: &ModelConfig, data: &Dataset, what: &str) -> Result<(), CliError> {
    if data.image_size != config.image_size
        || data.channels != config.channels
        || data.num_classes != config.num_classes
    {
        return Err(CliError::usage(format!(
            "{what} geometry {}x{}x{} with {} classes does not match model {}x{}x{} with {}",
            data.image_size,
            data.image_size,
            data.channels,
            data.num_classes,
            config.image_size,
            config.image_size,
            config.channels,
            config.num_classes,
        )));
    }
    Ok(())
}

fn load_dataset(path: &Path, what: &str) -> Result<Dataset, CliError> {
    read_dataset(path)
        .map_err(|e| CliError::usage(format!("cannot load {what} {}: {e}", path.display())))
}

/// Finds the run configuration for a checkpoint: an explicit --config wins,
/// otherwise resolved.json next to the checkpoint file.
fn sidecar_config(checkpoint: &Path, explicit: Option<&Path>) -> Result<RunConfig, CliError> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => checkpoint
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("resolved.json"),
    };
    RunConfig::load(&path)
}

pub fn cmd_gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        num_classes: args.classes,
        image_size: args.image_size,
        channels: args.channels,
        train_samples: args.train_samples,
        test_samples: args.test_samples,
        template_seed: args.template_seed,
        noise_std: args.noise_std,
        ood_template_seed: args.ood_template_seed,
    };
    spec.validate().map_err(|e| CliError::usage(e.to_string()))?;
    let train = gen_synthetic(&spec, Split::Train, args.seed).map_err(CliError::from_data)?;
    let test = gen_synthetic(&spec, Split::Test, args.seed).map_err(CliError::from_data)?;
    let ood = gen_ood(&spec, args.seed).map_err(CliError::from_data)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", args.out.display())))?;
    for (name, data) in [("train.lds", &train), ("test.lds", &test), ("ood.lds", &ood)] {
        let path = args.out.join(name);
        write_dataset(&path, data).map_err(CliError::from_data)?;
        println!("wrote {} ({} samples)", path.display(), data.len());
    }
    let spec_json =
        serde_json::to_string_pretty(&spec).expect("spec serializes");
    write_text(&args.out.join("spec.json"), &spec_json)?;
    Ok(())
}

fn apply_overrides(config: &mut RunConfig, args: &TrainArgs) {
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    if let Some(jobs) = args.jobs {
        config.jobs = jobs;
    }
    if let Some(members) = args.members {
        config.members = members;
    }
    if let Some(rank) = args.rank {
        config.rank = rank;
    }
    if let Some(gain) = args.gain {
        config.adapter_gain = gain;
    }
    if let Some(t) = args.temperature {
        config.temperature = t;
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let mut config = RunConfig::load(&args.config)?;
    apply_overrides(&mut config, args);
    let model_config = config.model_config()?;
    let train_config = config.train_config()?;
    if config.train_data.is_empty() {
        return Err(CliError::usage("config has no train_data path".into()));
    }
    let data = load_dataset(Path::new(&config.train_data), "training data")?;
    check_geometry(&model_config, &data, "training data")?;
    configure_jobs(config.jobs);

    let outcome = train_run(&model_config, &train_config, &data.images, &data.labels, config.seed)?;

    let out_dir = PathBuf::from(&config.out_dir);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::usage(format!("cannot create {}: {e}", out_dir.display())))?;
    let checkpoint = out_dir.join("checkpoint.lens");
    outcome
        .model
        .save(&checkpoint)
        .map_err(|e| CliError::usage(format!("cannot write checkpoint: {e}")))?;
    let mut history = history_to_jsonl(&outcome.history);
    if !history.is_empty() {
        history.push('\n');
    }
    write_text(&out_dir.join("history.jsonl"), &history)?;
    write_text(&out_dir.join("resolved.json"), &config.to_json())?;

    if let Some(last) = outcome.history.iter().rev().find(|r| r.member.is_none()) {
        println!(
            "trained {} for {} epochs: loss {:.4}, accuracy {:.4}",
            config.method, config.epochs, last.loss, last.acc
        );
    } else {
        println!("trained {} for 0 epochs: checkpoint is the initialization", config.method);
    }
    println!("wrote {}", checkpoint.display());
    Ok(())
}

fn maybe_corrupt(
    data: Dataset,
    kind: Option<&str>,
    severity: u8,
    seed: u64,
) -> Result<Dataset, CliError> {
    match kind {
        None => {
            if severity != 0 {
                return Err(CliError::usage(
                    "--severity requires --corruption to name a kind".into(),
                ));
            }
            Ok(data)
        }
        Some(name) => {
            let kind = CorruptionKind::parse(name).map_err(CliError::from_data)?;
            let spec = CorruptionSpec { kind, severity };
            corrupt(&data, &spec, seed).map_err(CliError::from_data)
        }
    }
}

struct LoadedRun {
    config: RunConfig,
    model_config: ModelConfig,
    model: Model,
}

fn load_run_from_checkpoint(
    checkpoint: &Path,
    explicit_config: Option<&Path>,
) -> Result<LoadedRun, CliError> {
    let config = sidecar_config(checkpoint, explicit_config)?;
    let model_config = config.model_config()?;
    let model = Model::load(model_config.clone(), checkpoint)
        .map_err(|e| CliError::usage(format!("cannot load {}: {e}", checkpoint.display())))?;
    Ok(LoadedRun { config, model_config, model })
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let run = load_run_from_checkpoint(&args.checkpoint, args.config.as_deref())?;
    let data = load_dataset(&args.dataset, "dataset")?;
    check_geometry(&run.model_config, &data, "dataset")?;
    if let Some(jobs) = args.jobs {
        configure_jobs(jobs);
    }
    let data = maybe_corrupt(data, args.corruption.as_deref(), args.severity, args.seed)?;
    let temperature = args.temperature.unwrap_or(run.config.temperature);

    let preds = predict(&run.model, &data.images, &data.labels, EVAL_BATCH, args.seed, temperature)?;
    let agg = preds.aggregate();
    let report = calibration_report(&agg.mean, data.num_classes, &data.labels, temperature)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(out) = &args.out {
        write_text(out, &json)?;
    }
    Ok(())
}

pub fn cmd_ood_eval(args: &OodEvalArgs) -> Result<(), CliError> {
    let run = load_run_from_checkpoint(&args.checkpoint, args.config.as_deref())?;
    let in_data = load_dataset(&args.dataset, "in-distribution dataset")?;
    let ood_data = load_dataset(&args.ood, "OOD dataset")?;
    check_geometry(&run.model_config, &in_data, "in-distribution dataset")?;
    if in_data.pixels() != ood_data.pixels() {
        return Err(CliError::usage(format!(
            "OOD geometry {}x{}x{} does not match in-distribution {}x{}x{}",
            ood_data.image_size,
            ood_data.image_size,
            ood_data.channels,
            in_data.image_size,
            in_data.image_size,
            in_data.channels,
        )));
    }
    let temperature = args.temperature.unwrap_or(run.config.temperature);
    let preds_in =
        predict(&run.model, &in_data.images, &in_data.labels, EVAL_BATCH, args.seed, temperature)?;
    let ood_labels = vec![0usize; ood_data.len()];
    let preds_out =
        predict(&run.model, &ood_data.images, &ood_labels, EVAL_BATCH, args.seed, temperature)?;
    let agg_in = preds_in.aggregate();
    let agg_out = preds_out.aggregate();
    let scores = ood_scores(&agg_in.mean, &agg_out.mean, in_data.num_classes)
        .map_err(|e| CliError::usage(e.to_string()))?;
    let report = calibration_report(&agg_in.mean, in_data.num_classes, &in_data.labels, temperature)
        .map_err(|e| CliError::usage(e.to_string()))?
        .with_ood(scores);
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{json}");
    if let Some(out) = &args.out {
        write_text(out, &json)?;
    }
    Ok(())
}

pub fn cmd_param_count(args: &ParamCountArgs) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)?.model_config()?,
        None => {
            let method = Method::ALL
                .iter()
                .copied()
                .find(|m| m.name() == args.method)
                .ok_or_else(|| CliError::usage(format!("unknown method '{}'", args.method)))?;
            match args.profile.as_str() {
                "micro" => ModelConfig::micro(method),
                "vit_base_32" => ModelConfig::vit_base_32(method, 1, 8),
                other => {
                    return Err(CliError::usage(format!(
                        "unknown profile '{other}', expected micro or vit_base_32"
                    )))
                }
            }
        }
    };
    if let Some(members) = args.members {
        config.members = members;
        if matches!(config.method, Method::Single | Method::McDropout) && members != 1 {
            return Err(CliError::usage(format!(
                "{} uses exactly 1 member",
                config.method.name()
            )));
        }
    }
    if let Some(rank) = args.rank {
        config.rank = rank;
    }
    let counts = count_parameters(&config).map_err(|e| CliError::usage(e.to_string()))?;
    let backbone = backbone_param_count(&config);
    println!("method              {}", config.method.name());
    println!("members             {}", config.members);
    println!("rank                {}", config.rank);
    println!("backbone            {backbone}");
    println!("total               {}", counts.total);
    println!("trainable           {}", counts.trainable);
    println!("per_member_overhead {}", counts.per_member_overhead);
    println!("total_vs_backbone   {:.3}", counts.total as f64 / backbone as f64);
    Ok(())
}

/// Samples trainable coordinates of a micro model at a generic point (all
/// trainables jittered away from structured initializations) and compares
/// tape gradients of the multi-member mean batch loss against central
/// differences computed by full re-evaluation in f64.
fn model_grad_check(method: Method, seed: u64, coords: usize) -> Result<f64, CliError> {
    let config = ModelConfig::micro(method);
    let mut model =
        Model::init(config.clone(), seed).map_err(|e| CliError::usage(e.to_string()))?;
    let mut rng = SplitMix64::new(derive(seed, 0xFD));
    let trainable: Vec<String> = model.params.trainable().map(|p| p.name.clone()).collect();
    for name in &trainable {
        let tensor = model.params.get_mut(name).expect("trainable exists");
        for x in tensor.data_mut() {
            *x += rng.uniform(-0.05, 0.05) as f32;
        }
    }
    let batch = 2usize;
    let per_image = config.image_size * config.image_size * config.channels;
    let images: Vec<f32> =
        (0..batch * per_image).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
    let labels: Vec<usize> = (0..batch).map(|_| rng.next_below(config.num_classes)).collect();
    let weights = vec![1.0f64; config.num_classes];

    let mean_loss = |tape: &mut Tape<f64>,
                     loaded: &LoadedParams<f64>|
     -> Result<lens_core::tensor::ValueId, CliError> {
        let patches = patchify_batch(tape, &images, batch, &config)
            .map_err(|e| CliError::usage(e.to_string()))?;
        let mut total = None;
        for member in 0..config.members {
            let mut mode = ForwardMode::Deterministic;
            let out = vit_forward_graph(tape, loaded, &config, patches, batch, member, &mut mode)
                .map_err(|e| CliError::usage(e.to_string()))?;
            let loss = tape
                .weighted_ce(out.logits, &labels, &weights)
                .map_err(|e| CliError::usage(e.to_string()))?;
            total = Some(match total {
                None => loss,
                Some(t) => tape.add(t, loss).map_err(|e| CliError::usage(e.to_string()))?,
            });
        }
        Ok(tape.scale(total.expect("at least one member"), 1.0 / config.members as f64))
    };
    let loss_of = |params: &lens_core::checkpoint::ParamSet| -> Result<f64, CliError> {
        let mut tape: Tape<f64> = Tape::new();
        let loaded = LoadedParams::load(&mut tape, params);
        let loss = mean_loss(&mut tape, &loaded)?;
        Ok(tape.value(loss)[0])
    };

    let mut tape: Tape<f64> = Tape::new();
    let loaded = LoadedParams::load(&mut tape, &model.params);
    let loss = mean_loss(&mut tape, &loaded)?;
    tape.backward(loss).map_err(|e| CliError::usage(e.to_string()))?;

    let mut max_rel = 0.0f64;
    for _ in 0..coords {
        let name = &trainable[rng.next_below(trainable.len())];
        let numel = model.params.get(name).expect("trainable exists").numel();
        let j = rng.next_below(numel);
        let analytic = tape
            .grad(loaded.id(name))
            .map(|g| g[j])
            .unwrap_or(0.0);

        let h = 1e-3f32;
        let mut plus = model.params.clone();
        let tensor = plus.get_mut(name).expect("trainable exists");
        let base = tensor.data()[j];
        tensor.data_mut()[j] = base + h;
        let x_plus = plus.get(name).expect("trainable exists").data()[j];
        let f_plus = loss_of(&plus)?;
        let mut minus = model.params.clone();
        let tensor = minus.get_mut(name).expect("trainable exists");
        tensor.data_mut()[j] = base - h;
        let x_minus = minus.get(name).expect("trainable exists").data()[j];
        let f_minus = loss_of(&minus)?;

        let delta = x_plus as f64 - x_minus as f64;
        if delta == 0.0 {
            continue;
        }
        let numeric = (f_plus - f_minus) / delta;
        let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<(), CliError> {
    let probes = op_probes();
    let rounds = args.probes.div_ceil(probes.len()).max(1);
    let mut failures: Vec<String> = Vec::new();
    let mut total = 0usize;
    for probe in &probes {
        let mut worst = 0.0f64;
        for round in 0..rounds {
            let seed = derive(args.seed, (round as u64) << 8);
            total += 1;
            match (probe.run)(seed) {
                Ok(report) => worst = worst.max(report.max_rel_err),
                Err(e) => {
                    failures.push(format!("{}: {e}", probe.name));
                    worst = f64::INFINITY;
                    break;
                }
            }
        }
        let status = if worst < GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
        println!("op {:<14} {status} (max rel err {worst:.2e}, {rounds} probes)", probe.name);
        if worst >= GRADCHECK_TOLERANCE {
            failures.push(format!("{}: max rel err {worst:.2e}", probe.name));
        }
    }

    for method in [Method::Lora, Method::BatchPp, Method::Epinet] {
        let coords = 12;
        total += coords;
        let worst = model_grad_check(method, args.seed, coords)?;
        let status = if worst < GRADCHECK_TOLERANCE { "ok" } else { "FAIL" };
        println!(
            "model {:<11} {status} (max rel err {worst:.2e}, {coords} coordinates)",
            method.name()
        );
        if worst >= GRADCHECK_TOLERANCE {
            failures.push(format!("micro model {}: max rel err {worst:.2e}", method.name()));
        }
    }

    println!("checked {total} gradient probes");
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::verify(format!("gradient check failed: {}", failures.join("; "))))
    }
}

fn load_run_dir(dir: &Path) -> Result<LoadedRun, CliError> {
    load_run_from_checkpoint(&dir.join("checkpoint.lens"), None)
}

pub fn cmd_analyze_diversity(args: &AnalyzeDiversityArgs) -> Result<(), CliError> {
    if args.run.is_empty() {
        return Err(CliError::usage("pass at least one --run directory".into()));
    }
    let runs: Vec<LoadedRun> =
        args.run.iter().map(|dir| load_run_dir(dir)).collect::<Result<_, _>>()?;
    for run in &runs[1..] {
        if run.model_config != runs[0].model_config {
            return Err(CliError::usage(
                "all runs must share one model configuration".into(),
            ));
        }
    }
    let data = load_dataset(&args.dataset, "dataset")?;
    check_geometry(&runs[0].model_config, &data, "dataset")?;

    let mut all_probs: Vec<f32> = Vec::new();
    let mut total_members = 0usize;
    for run in &runs {
        let preds = predict(
            &run.model,
            &data.images,
            &data.labels,
            EVAL_BATCH,
            args.seed,
            args.temperature,
        )?;
        total_members += preds.members();
        all_probs.extend_from_slice(preds.probs());
    }
    if total_members < 2 {
        return Err(CliError::usage(format!(
            "diversity analysis needs at least 2 prediction members, got {total_members}"
        )));
    }
    let combined = PredictionSet::new(
        total_members,
        data.len(),
        data.num_classes,
        all_probs,
        data.labels.clone(),
    )
    .map_err(|e| CliError::usage(e.to_string()))?;

    let disagreement = disagreement_matrix(&combined).map_err(CliError::from_diversity)?;
    let jsd = jsd_matrix(&combined).map_err(CliError::from_diversity)?;

    let layers = runs[0].model_config.depth;
    let mut intruder_counts = vec![0usize; layers];
    let mut updates = Vec::new();
    for run in &runs {
        let init = Model::init(run.model_config.clone(), run.config.seed)
            .map_err(|e| CliError::usage(e.to_string()))?;
        for l in 0..layers {
            for m in 0..run.model_config.members {
                let w0 = effective_weight(&init, m, l, "v")
                    .map_err(|e| CliError::usage(e.to_string()))?;
                let w1 = effective_weight(&run.model, m, l, "v")
                    .map_err(|e| CliError::usage(e.to_string()))?;
                let report = svd_intruder_analysis(&w0, &w1, args.top_k, args.threshold)
                    .map_err(CliError::from_diversity)?;
                intruder_counts[l] += report.count();
            }
        }
        updates.extend(
            value_projection_updates(&init, &run.model)
                .map_err(|e| CliError::usage(e.to_string()))?,
        );
    }

    let (score, weight_cosine) = if updates.len() >= 2 {
        let score = match diversity_score(&updates) {
            Ok(s) => Some(s),
            Err(DiversityError::Invalid { .. }) => None,
            Err(e) => return Err(CliError::from_diversity(e)),
        };
        (score, weight_cosine_matrix(&updates).map_err(CliError::from_diversity)?)
    } else {
        (None, vec![vec![1.0]])
    };

    let summary = DiversitySummary {
        disagreement,
        jsd,
        intruder_counts,
        diversity_score: score,
        weight_cosine,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    println!("{json}");
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)
            .map_err(|e| CliError::usage(format!("cannot create {}: {e}", out.display())))?;
        write_text(&out.join("diversity.json"), &json)?;
        let rows = export_function_space(&combined);
        let rows_json = serde_json::to_string(&rows).expect("rows serialize");
        write_text(&out.join("function_space.json"), &rows_json)?;
    }
    Ok(())
}
