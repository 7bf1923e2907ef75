use std::collections::BTreeSet;
use std::path::Path;

use echodiff_core::cascade::{downsample_video, upsample_video, CascadeGenerator, CascadeStage};
use echodiff_core::dataset::{self, camus, load_dataset, patient_split, resample_frames, PatientRecord};
use echodiff_core::io::{read_label_png, save_sample, write_json, SampleManifest};
use echodiff_core::metrics::{
    evaluate_suite, results_table, CommandExtractor, EvalItem, FrameExtractor, SuiteConfig, ToyFrameExtractor,
    ToyVideoExtractor, VideoExtractor,
};
use echodiff_core::sampler::{batch_sample, DdpmGenerator, VideoGenerator};
use echodiff_core::trainer::{latest_checkpoint, load_checkpoint, prepare_examples, run_training, Checkpoint, ModelVariant};
use echodiff_core::{ConditionMode, Denoiser, DenoiserParameters, SemanticCondition, VideoTensor};

use crate::config::{check, prefixed, require_exists, write_provenance, ExtractorKind, RunConfig, ScheduleConfig};
use crate::{EvaluateArgs, Failure, MakeToyArgs, SampleArgs, TrainArgs};

type CmdResult = Result<(), Failure>;

pub fn make_toy_data(a: MakeToyArgs) -> CmdResult {
    let mut cfg = RunConfig::load(a.config.config.as_deref())?;
    let toy = &mut cfg.data.toy;
    toy.patients = a.patients.unwrap_or(toy.patients);
    toy.frames = a.frames.unwrap_or(toy.frames);
    toy.hw = a.size.unwrap_or(toy.hw);
    toy.seed = a.seed.unwrap_or(toy.seed);
    check(prefixed("data.toy", cfg.data.toy.problems()))?;
    let dirs = dataset::toy_generate(&cfg.data.toy, &a.out)?;
    write_provenance(&a.out, &cfg, "make-toy-data")?;
    let t = &cfg.data.toy;
    println!("wrote {} patients (K={}, {}x{}) to {}", dirs.len(), t.frames, t.hw, t.hw, a.out.display());
    Ok(())
}

pub fn convert_camus(a: super::ConvertArgs) -> CmdResult {
    let mut cfg = RunConfig::load(a.config.config.as_deref())?;
    cfg.data.camus_size = a.size.unwrap_or(cfg.data.camus_size);
    require_exists("CAMUS directory", &a.src)?;
    if cfg.data.camus_size < 16 {
        return Err(Failure::Invalid(vec![format!("size {} is too small", cfg.data.camus_size)]));
    }
    let n = camus::convert_camus(&a.src, &a.out, cfg.data.camus_size)?;
    write_provenance(&a.out, &cfg, "convert-camus")?;
    println!("converted {n} patients to {}", a.out.display());
    Ok(())
}

fn split_records(records: Vec<PatientRecord>, cfg: &RunConfig, part: &str) -> Result<Vec<PatientRecord>, Failure> {
    if part == "all" {
        return Ok(records);
    }
    if records.len() < 3 {
        log::warn!("only {} patients; using all of them instead of the {part} split", records.len());
        return Ok(records);
    }
    let ids: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    let split = patient_split(&ids, cfg.data.split, cfg.data.split_seed)?;
    let keep: BTreeSet<&String> = match part {
        "train" => split.train.iter().collect(),
        "val" => split.val.iter().collect(),
        _ => split.test.iter().collect(),
    };
    let out: Vec<PatientRecord> = records.iter().filter(|r| keep.contains(&r.patient_id)).cloned().collect();
    if out.is_empty() {
        return Err(Failure::Invalid(vec![format!("the {part} split of {} patients is empty", records.len())]));
    }
    Ok(out)
}

pub fn train(a: TrainArgs) -> CmdResult {
    let mut cfg = RunConfig::load(a.config.config.as_deref())?;
    let t = &mut cfg.train;
    t.variant = a.variant.unwrap_or(t.variant);
    t.frames = a.frames.unwrap_or(t.frames);
    t.max_steps = a.max_steps.unwrap_or(t.max_steps);
    t.learning_rate = a.learning_rate.unwrap_or(t.learning_rate);
    t.batch_size = a.batch_size.unwrap_or(t.batch_size);
    t.micro_batch = a.micro_batch.unwrap_or(t.micro_batch);
    t.seed = a.seed.unwrap_or(t.seed);
    t.checkpoint_every = a.checkpoint_every.unwrap_or(t.checkpoint_every);
    cfg.schedule.steps = a.steps.unwrap_or(cfg.schedule.steps);
    cfg.model.condition_mode = a.condition_mode.unwrap_or(cfg.model.condition_mode);
    if cfg.train.variant == ModelVariant::CascadeSr && cfg.model.extra_input_channels == 0 {
        cfg.model.extra_input_channels = cfg.model.in_channels;
    }
    let mut problems = cfg.train_problems();
    if cfg.train.variant != ModelVariant::CascadeSr && cfg.model.extra_input_channels != 0 {
        problems.push("model: extra_input_channels is only used by the cascade_sr variant".into());
    }
    if !a.data.exists() {
        problems.push(format!("dataset root {} does not exist", a.data.display()));
    }
    check(problems)?;
    let schedule = cfg.schedule.build()?;
    let final_alpha_bar = schedule.alpha_bars().last().copied().unwrap_or(0.0);
    if final_alpha_bar > 0.01 {
        log::warn!(
            "alpha_bar at T={} is {final_alpha_bar:.3}; the last step is far from pure noise \
             (set schedule.scale_with_steps = true for short schedules)",
            schedule.steps()
        );
    }
    let net = Denoiser::new(cfg.model.clone())?;
    println!(
        "training {} ({}): T={} lr={:e} batch={} K={} max_steps={}",
        cfg.train.variant,
        cfg.model.condition_mode,
        schedule.steps(),
        cfg.train.learning_rate,
        cfg.train.batch_size,
        cfg.train.frames,
        cfg.train.max_steps
    );
    let records = split_records(load_dataset(&a.data)?, &cfg, "train")?;
    let examples = prepare_examples(&records, &cfg.train)?;
    let clip = &examples[0].clip;
    net.check_spatial(clip.height(), clip.width())?;
    write_provenance(&a.out, &cfg, "train")?;
    let ids: Vec<&str> = records.iter().map(|r| r.patient_id.as_str()).collect();
    write_json(&a.out.join("train_patients.json"), &ids)?;
    let ck = run_training(&net, &schedule, &cfg.train, &examples, &a.out, a.resume)?;
    println!(
        "finished at step {}; checkpoint {} (fingerprint {})",
        ck.step,
        latest_checkpoint(&a.out).display(),
        &ck.fingerprint()[..16]
    );
    Ok(())
}

/// Echoes a checkpoint's settings into the run config so the resolved
/// config describes what actually ran.
fn adopt_checkpoint(cfg: &mut RunConfig, ck: &Checkpoint) {
    cfg.model = ck.net.clone();
    cfg.train = ck.train.clone();
    let b = ck.schedule.betas();
    cfg.schedule = ScheduleConfig {
        steps: b.len(),
        beta_start: b[0],
        beta_end: b[b.len() - 1],
        scale_with_steps: false,
    };
}

struct Loaded {
    base: Checkpoint,
    base_net: Denoiser,
    sr: Option<(Checkpoint, Denoiser)>,
}

fn load_models(checkpoint: &Path, sr_checkpoint: Option<&Path>, cascade: bool) -> Result<Loaded, Failure> {
    require_exists("checkpoint", checkpoint)?;
    let sr_path = match (cascade, sr_checkpoint) {
        (true, None) => return Err(Failure::Invalid(vec!["--cascade needs --sr-checkpoint".into()])),
        (false, Some(_)) => return Err(Failure::Invalid(vec!["--sr-checkpoint is only used with --cascade".into()])),
        (_, p) => p,
    };
    let base = load_checkpoint(checkpoint)?;
    let base_net = base.denoiser()?;
    let sr = match sr_path {
        Some(p) => {
            require_exists("super-resolution checkpoint", p)?;
            let ck = load_checkpoint(p)?;
            let net = ck.denoiser()?;
            Some((ck, net))
        }
        None => None,
    };
    Ok(Loaded { base, base_net, sr })
}

fn weights(ck: &Checkpoint, raw: bool) -> &DenoiserParameters<f32> {
    if raw {
        &ck.params
    } else {
        ck.sampling_params()
    }
}

/// Builds the generator and returns it with its output size and stage labels.
fn with_generator<T>(
    m: &Loaded,
    cfg: &RunConfig,
    raw: bool,
    f: impl FnOnce(&dyn VideoGenerator, usize, Vec<String>) -> Result<T, Failure>,
) -> Result<T, Failure> {
    let sampler = cfg.sample.sampler();
    let frames = m.base.train.frames;
    match &m.sr {
        None => {
            let g = DdpmGenerator {
                net: &m.base_net,
                params: weights(&m.base, raw),
                schedule: &m.base.schedule,
                config: sampler,
                frames,
            };
            f(&g, 0, vec!["ddpm".into()])
        }
        Some((sr, sr_net)) => {
            let config = sr.train.cascade.clone();
            let g = CascadeGenerator {
                base: CascadeStage {
                    net: &m.base_net,
                    params: weights(&m.base, raw),
                    schedule: &m.base.schedule,
                    sampler: sampler.clone(),
                },
                sr: CascadeStage { net: sr_net, params: weights(sr, raw), schedule: &sr.schedule, sampler },
                frames,
                config: config.clone(),
            };
            f(&g, config.target_hw, vec!["base".into(), "super-resolution".into()])
        }
    }
}

pub fn sample(a: SampleArgs) -> CmdResult {
    let mut cfg = RunConfig::load(a.config.config.as_deref())?;
    let s = &mut cfg.sample;
    s.n = a.n.unwrap_or(s.n);
    s.seed = a.seed.unwrap_or(s.seed);
    s.guidance_scale = a.guidance_scale.unwrap_or(s.guidance_scale);
    s.use_ema &= !a.raw_weights;
    s.preview &= !a.no_preview;
    let mut problems = prefixed("sample", cfg.sample.problems());
    if !a.label_map.exists() {
        problems.push(format!("label map {} does not exist", a.label_map.display()));
    }
    check(problems)?;
    let models = load_models(&a.checkpoint, a.sr_checkpoint.as_deref(), a.cascade)?;
    adopt_checkpoint(&mut cfg, &models.base);
    let map = read_label_png(&a.label_map)?;
    if models.sr.is_none() {
        models.base_net.check_spatial(map.height(), map.width())?;
    }
    let x = SemanticCondition::from_labels(&map);
    let map_id = a.label_map.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    println!("sampling {} clip(s) for {map_id} with guidance scale s = {:.1}", cfg.sample.n, cfg.sample.guidance_scale);
    let fingerprint = models.base.fingerprint();
    let steps = models.base.schedule.steps();
    with_generator(&models, &cfg, !cfg.sample.use_ema, |g, _, stages| {
        let videos = batch_sample(g, std::slice::from_ref(&x), cfg.sample.n, cfg.sample.seed)?;
        for v in &videos {
            let dir = a.out.join(format!("sample_{:03}", v.replicate_index));
            let manifest = SampleManifest {
                seed: v.seed,
                map_id: map_id.clone(),
                guidance_scale: cfg.sample.guidance_scale,
                steps,
                frames: v.video.frames(),
                checkpoint_fingerprint: fingerprint.clone(),
                stages: stages.clone(),
            };
            save_sample(&dir, &v.video, &manifest, cfg.sample.preview)?;
            write_provenance(&dir, &cfg, "sample")?;
        }
        Ok(())
    })?;
    write_provenance(&a.out, &cfg, "sample")?;
    println!("wrote {} clip(s) to {}", cfg.sample.n, a.out.display());
    Ok(())
}

fn resize_to(v: VideoTensor<f32>, hw: usize) -> echodiff_core::Result<VideoTensor<f32>> {
    if hw == 0 || (v.height() == hw && v.width() == hw) {
        Ok(v)
    } else if hw < v.height() {
        downsample_video(&v, hw)
    } else {
        upsample_video(&v, hw)
    }
}

pub fn evaluate(a: EvaluateArgs) -> CmdResult {
    let mut cfg = RunConfig::load(a.config.config.as_deref())?;
    let m = &mut cfg.metrics;
    m.n_per_map = a.n_per_map.unwrap_or(m.n_per_map);
    m.seed = a.seed.unwrap_or(m.seed);
    m.extractor = a.extractor.unwrap_or(m.extractor);
    m.split = a.split.clone().unwrap_or(m.split.clone());
    m.max_maps = a.max_maps.unwrap_or(m.max_maps);
    cfg.sample.guidance_scale = a.guidance_scale.unwrap_or(cfg.sample.guidance_scale);
    cfg.sample.use_ema &= !a.raw_weights;
    let mut problems = prefixed("metrics", cfg.metrics.problems());
    problems.extend(prefixed("sample", cfg.sample.problems()));
    if !a.data.exists() {
        problems.push(format!("dataset root {} does not exist", a.data.display()));
    }
    check(problems)?;
    let models = load_models(&a.checkpoint, a.sr_checkpoint.as_deref(), a.cascade)?;
    adopt_checkpoint(&mut cfg, &models.base);
    let mut records = split_records(load_dataset(&a.data)?, &cfg, &cfg.metrics.split)?;
    if cfg.metrics.max_maps > 0 {
        records.truncate(cfg.metrics.max_maps);
    }
    let frames = models.base.train.frames;
    let (fe, ve): (Box<dyn FrameExtractor>, Box<dyn VideoExtractor>) = match cfg.metrics.extractor {
        ExtractorKind::Toy => (Box::new(ToyFrameExtractor::default()), Box::new(ToyVideoExtractor::default())),
        ExtractorKind::Standard => {
            let s = &cfg.metrics.standard;
            let cmd = |c: &[String], dim, name: &str| CommandExtractor {
                name: name.into(),
                program: c[0].clone().into(),
                args: c[1..].to_vec(),
                dim,
            };
            (
                Box::new(cmd(&s.frame_command, s.frame_dim, "frame")),
                Box::new(cmd(&s.video_command, s.video_dim, "video")),
            )
        }
    };
    let model_label = match (&models.sr, models.base.net.condition_mode) {
        (Some(_), _) => "Cascade+SPADE".to_string(),
        (None, ConditionMode::Spade) => "DDPM+SPADE".to_string(),
        (None, ConditionMode::Concat) => "DDPM+Concat".to_string(),
    };
    let suite = SuiteConfig {
        n_per_map: cfg.metrics.n_per_map,
        base_seed: cfg.metrics.seed,
        condition_label: "Seg. map".into(),
        model_label,
        config_fingerprint: cfg.fingerprint(),
    };
    println!(
        "evaluating {} maps x {} clips (K={frames}, s={:.1}, extractor {:?})",
        records.len(),
        suite.n_per_map,
        cfg.sample.guidance_scale,
        cfg.metrics.extractor
    );
    let out = with_generator(&models, &cfg, !cfg.sample.use_ema, |g, out_hw, _| {
        let items = records
            .iter()
            .map(|r| {
                let real = resize_to(resample_frames(r, frames)?, out_hw)?;
                Ok(EvalItem { map_id: r.patient_id.clone(), condition: r.condition(), real })
            })
            .collect::<echodiff_core::Result<Vec<_>>>()?;
        if out_hw == 0 {
            let c = &items[0].condition;
            models.base_net.check_spatial(c.height(), c.width())?;
        }
        Ok(evaluate_suite(g, &items, &suite, fe.as_ref(), ve.as_ref())?)
    })?;
    write_provenance(&a.out, &cfg, "evaluate")?;
    write_json(&a.out.join("metrics_report.json"), &out.report)?;
    let table = results_table(std::slice::from_ref(&out.report));
    echodiff_core::io::atomic_write(&a.out.join("table.txt"), table.as_bytes())?;
    if a.save_videos {
        for v in &out.videos {
            let dir = a.out.join("videos").join(format!("{}_{:02}", records[v.condition_index].patient_id, v.replicate_index));
            echodiff_core::io::write_frames(&dir, &v.video)?;
        }
    }
    print!("{table}");
    Ok(())
}
