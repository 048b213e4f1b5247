use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use latent_iqa::data::{
    build_corpus, read_stage1, read_stage2, write_stage1, write_stage2, CorpusConfig, ForgeConfig, ImageStorage,
    TaskClass, QUALITY_PROMPTS,
};
use latent_iqa::grpo::{train_stage2, write_reward_trace, GrpoConfig};
use latent_iqa::image::Image;
use latent_iqa::metrics::{decode_records, infer_record, write_items_csv, EvalConfig, EvalReport};
use latent_iqa::model::{
    load_checkpoint, save_checkpoint, Checkpoint, DecodeConfig, Model, ModelConfig, OptimizerState, TrainingState,
};
use latent_iqa::sft::{train_stage1, write_loss_trace, SftConfig, TrainState};
use latent_iqa::tokenizer::Vocab;

use crate::config::{ConfigError, List, Settings};
use crate::{EvalArgs, GrpoArgs, InferArgs, SftArgs, SynthArgs};

fn announce(settings: &Settings) {
    print!("{}", settings.render());
    for key in settings.unused_keys() {
        warn!("config key `{key}` is not used by this command");
    }
}

fn load_stage_checkpoint(path: &Path, stages: &[&str]) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if !stages.contains(&ckpt.training.stage.as_str()) {
        return Err(latent_iqa::Error::Checkpoint(format!(
            "{} holds a {:?} checkpoint, expected one of {stages:?}",
            path.display(),
            ckpt.training.stage
        ))
        .into());
    }
    Ok(ckpt)
}

fn save(path: &Path, model: &Model, stage: &str, state: &TrainState) -> Result<()> {
    let training = TrainingState {
        stage: stage.into(),
        step: state.step as u64,
        frozen_seed: model.config.seed,
    };
    let optimizer = OptimizerState::capture(&state.optimizer, model.params.len());
    save_checkpoint(path, &Checkpoint::from_model(model, training, Some(optimizer)))
        .with_context(|| format!("writing {}", path.display()))
}

fn severities(list: List<u8>) -> Result<Vec<u8>> {
    if list.0.is_empty() || list.0.iter().any(|s| !(1..=5).contains(s)) {
        return Err(ConfigError(format!("severities must lie in 1..=5, got {list}")).into());
    }
    Ok(list.0)
}

pub fn synth_data(s: &mut Settings, seed: u64, a: SynthArgs) -> Result<()> {
    let d = CorpusConfig::default();
    let out = PathBuf::from(s.require::<String>("out", a.out)?);
    let n_stage1 = s.get("n-stage1", a.n_stage1, d.n_stage1)?;
    let n_stage2 = s.get("n-stage2", a.n_stage2, d.n_stage2)?;
    let n_heldout = s.get("n-heldout", a.n_heldout, d.n_heldout)?;
    let mix = s.get("mix", a.mix, List(d.mix.iter().map(|w| w * 100.0).collect()))?;
    let storage = s.get("storage", a.storage, ImageStorage::Path)?;
    let train_sev = severities(s.get("severities", a.severities, List(d.forge.severities.clone()))?)?;
    let heldout_sev = s.get_opt("heldout-severities", a.heldout_severities)?.map(severities).transpose()?;
    announce(s);

    let mix: [f64; 3] = mix
        .0
        .try_into()
        .map_err(|v: Vec<f64>| ConfigError(format!("mix needs three weights, got {}", v.len())))?;
    let cfg = CorpusConfig {
        n_stage1,
        n_stage2,
        n_heldout,
        mix,
        seed,
        forge: ForgeConfig {
            severities: train_sev,
            ..ForgeConfig::default()
        },
        heldout_severities: heldout_sev,
    };
    let corpus = build_corpus(&cfg)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_stage1(&out.join("stage1.jsonl"), &corpus.stage1, storage)?;
    write_stage2(&out.join("stage2.jsonl"), &corpus.stage2, storage)?;
    write_stage2(&out.join("heldout.jsonl"), &corpus.heldout, storage)?;

    let per_task: Vec<String> = TaskClass::ALL
        .iter()
        .map(|t| format!("{t:?}={}", corpus.stage1.iter().filter(|e| e.task == *t).count()))
        .collect();
    println!("stage1: {} examples ({})", corpus.stage1.len(), per_task.join(", "));
    for (name, records) in [("stage2", &corpus.stage2), ("heldout", &corpus.heldout)] {
        let mean = records.iter().map(|r| r.mos).sum::<f64>() / records.len().max(1) as f64;
        println!("{name}: {} records, mean score {mean:.3}", records.len());
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn train_sft(s: &mut Settings, seed: u64, a: SftArgs) -> Result<()> {
    let md = ModelConfig::default();
    let sd = SftConfig::default();
    let data = PathBuf::from(s.require::<String>("data", a.data)?);
    let out = PathBuf::from(s.require::<String>("out", a.out)?);
    let resume = s.get_opt::<String>("resume", a.resume)?.map(PathBuf::from);
    let model_cfg = ModelConfig {
        vocab_size: Vocab::new().len(),
        embed_dim: s.get("embed-dim", a.model.embed_dim, md.embed_dim)?,
        num_layers: s.get("layers", a.model.layers, md.num_layers)?,
        num_heads: s.get("heads", a.model.heads, md.num_heads)?,
        mlp_dim: s.get("mlp-dim", a.model.mlp_dim, md.mlp_dim)?,
        visual_dim: s.get("visual-dim", a.model.visual_dim, md.visual_dim)?,
        max_seq_len: s.get("max-seq-len", a.model.max_seq_len, md.max_seq_len)?,
        latent_budget: s.get("latent-budget", a.latent_budget, md.latent_budget)?,
        seed,
        ..md
    };
    let cfg = SftConfig {
        lambda_lvr: s.get("lambda-lvr", a.lambda_lvr, sd.lambda_lvr)?,
        learning_rate: s.get("lr", a.lr, sd.learning_rate)?,
        weight_decay: s.get("weight-decay", a.weight_decay, sd.weight_decay)?,
        epochs: s.get("epochs", a.epochs, sd.epochs)?,
        batch_size: s.get("batch-size", a.batch_size, sd.batch_size)?,
        max_steps: s.get_opt("max-steps", a.max_steps)?,
        include_prompt_loss: s.get("include-prompt-loss", a.include_prompt_loss, sd.include_prompt_loss)?,
        supervise_stop: s.get("supervise-stop", a.supervise_stop, sd.supervise_stop)?,
        latent_feed: s.get("latent-feed", a.latent_feed, sd.latent_feed)?,
        final_lr_fraction: s.get("final-lr-fraction", a.final_lr_fraction, sd.final_lr_fraction)?,
        seed,
        ..sd
    };
    announce(s);
    cfg.validate()?;

    let vocab = Vocab::new();
    let mut state = TrainState::new(cfg.adamw());
    let mut model = match &resume {
        Some(path) => {
            let ckpt = load_stage_checkpoint(path, &["sft"])?;
            if ckpt.config != model_cfg {
                warn!("resuming: model shape and frozen seed come from {}", path.display());
            }
            if let Some(opt) = &ckpt.optimizer {
                opt.apply(&mut state.optimizer);
            }
            state.step = ckpt.training.step as usize;
            info!("resuming Stage I at step {}", state.step);
            ckpt.into_model()?
        }
        None => Model::new(model_cfg)?,
    };
    let corpus = read_stage1(&data, model.config.image_size)?;
    info!(
        "Stage I: {} examples, {} trainable parameters",
        corpus.len(),
        model.params.num_trainable()
    );
    let trace = train_stage1(&mut model, &vocab, &corpus, &cfg, &mut state)?;

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let trace_path = out.join("sft_trace.csv");
    write_loss_trace(&trace_path, &trace, resume.is_some())?;
    let ckpt_path = out.join("sft.ckpt");
    save(&ckpt_path, &model, "sft", &state)?;
    if let Some(last) = trace.last() {
        println!(
            "step {}: L_NTP={:.4} L_LVR={:.4} L_SFT={:.4}",
            last.step, last.l_ntp, last.l_lvr, last.l_sft
        );
    }
    println!("wrote {} and {}", ckpt_path.display(), trace_path.display());
    Ok(())
}

pub fn train_grpo(s: &mut Settings, seed: u64, a: GrpoArgs) -> Result<()> {
    let gd = GrpoConfig::default();
    let data = PathBuf::from(s.require::<String>("data", a.data)?);
    let init = PathBuf::from(s.require::<String>("init", a.init)?);
    let resume = s.get_opt::<String>("resume", a.resume)?.map(PathBuf::from);
    let out = PathBuf::from(s.require::<String>("out", a.out)?);
    let cfg = GrpoConfig {
        group_size: s.get("group-size", a.group_size, gd.group_size)?,
        clip_epsilon: s.get("clip-epsilon", a.clip_epsilon, gd.clip_epsilon)?,
        kl_beta: s.get("kl-beta", a.kl_beta, gd.kl_beta)?,
        sigma: s.get("sigma", a.sigma, gd.sigma)?,
        tau: s.get("tau", a.tau, gd.tau)?,
        latent_budget: s.get("latent-budget", a.latent_budget, gd.latent_budget)?,
        temperature: s.get("temperature", a.temperature, gd.temperature)?,
        max_new_tokens: s.get("max-new-tokens", a.max_new_tokens, gd.max_new_tokens)?,
        learning_rate: s.get("lr", a.lr, gd.learning_rate)?,
        epochs: s.get("epochs", a.epochs, gd.epochs)?,
        records_per_iteration: s.get("records-per-iteration", a.records_per_iteration, gd.records_per_iteration)?,
        updates_per_phase: s.get("updates-per-phase", a.updates_per_phase, gd.updates_per_phase)?,
        normalize_advantages: s.get("normalize-advantages", a.normalize_advantages, gd.normalize_advantages)?,
        kl_group_mean: s.get("kl-group-mean", a.kl_group_mean, gd.kl_group_mean)?,
        seed,
        ..gd
    };
    announce(s);
    cfg.validate()?;

    let vocab = Vocab::new();
    let reference = load_stage_checkpoint(&init, &["sft"])?.into_model()?;
    let mut state = TrainState::new(cfg.adamw());
    let mut model = match &resume {
        Some(path) => {
            let ckpt = load_stage_checkpoint(path, &["grpo"])?;
            if ckpt.config != reference.config {
                bail!(latent_iqa::Error::Checkpoint(format!(
                    "{} does not match the model in {}",
                    path.display(),
                    init.display()
                )));
            }
            if let Some(opt) = &ckpt.optimizer {
                opt.apply(&mut state.optimizer);
            }
            state.step = ckpt.training.step as usize;
            info!("resuming Stage II at step {}", state.step);
            ckpt.into_model()?
        }
        None => reference.clone(),
    };
    let records = read_stage2(&data, model.config.image_size)?;
    info!("Stage II: {} records, group size {}", records.len(), cfg.group_size);
    let trace = train_stage2(&mut model, &reference, &vocab, &records, &cfg, &mut state)?;

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let trace_path = out.join("grpo_trace.csv");
    write_reward_trace(&trace_path, &trace, resume.is_some())?;
    let ckpt_path = out.join("grpo.ckpt");
    save(&ckpt_path, &model, "grpo", &state)?;
    if !trace.is_empty() {
        let tail = &trace[trace.len().saturating_sub(25)..];
        let mean = |f: fn(&latent_iqa::grpo::RewardRecord) -> f64| tail.iter().map(f).sum::<f64>() / tail.len() as f64;
        println!(
            "last {} iterations: r_total={:.3} format={:.3} |err|={:.3} kl={:.5}",
            tail.len(),
            mean(|r| r.mean_r_total),
            mean(|r| r.format_rate),
            mean(|r| r.mean_abs_err),
            mean(|r| r.mean_kl)
        );
    }
    println!("wrote {} and {}", ckpt_path.display(), trace_path.display());
    Ok(())
}

fn decode_settings(s: &mut Settings, budget: Option<usize>, temperature: Option<f64>) -> Result<DecodeConfig> {
    let d = EvalConfig::default().decode;
    Ok(DecodeConfig {
        latent_budget: s.get("latent-budget", budget, d.latent_budget)?,
        temperature: s.get("temperature", temperature, d.temperature)?,
        ..d
    })
}

pub fn eval(s: &mut Settings, seed: u64, a: EvalArgs) -> Result<()> {
    let checkpoint = PathBuf::from(s.require::<String>("checkpoint", a.checkpoint)?);
    let data = PathBuf::from(s.require::<String>("data", a.data)?);
    let out = PathBuf::from(s.require::<String>("out", a.out)?);
    let stem = data.file_stem().map_or("data".into(), |x| x.to_string_lossy().into_owned());
    let dataset = s.get("dataset", a.dataset, stem)?;
    let ed = EvalConfig::default();
    let probe_attention = s.get("probe-attention", a.probe_attention, ed.probe_attention)?;
    let logistic_plcc = s.get("logistic-plcc", a.logistic_plcc, ed.logistic_plcc)?;
    let decode = decode_settings(s, a.latent_budget, a.temperature)?;
    announce(s);

    let model = load_stage_checkpoint(&checkpoint, &["init", "sft", "grpo"])?.into_model()?;
    let records = read_stage2(&data, model.config.image_size)?;
    let cfg = EvalConfig {
        decode,
        probe_attention,
        logistic_plcc,
        seed,
    };
    let items = decode_records(&model, &Vocab::new(), &records, &cfg)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_items_csv(&out.join(format!("{dataset}_items.csv")), &items)?;
    let report = EvalReport::from_items(&dataset, items, logistic_plcc)?;
    report.write_summary_csv(&out.join(format!("{dataset}_summary.csv")))?;

    println!("{}", EvalReport::SUMMARY_HEADER);
    println!("{}", report.summary_line());
    println!(
        "format-valid {:.4} ({} of {} parsed), max visible tokens {}, max latent steps {}",
        report.format_valid_rate, report.n, report.n_total, report.max_visible_tokens, report.max_latent_steps
    );
    if probe_attention {
        let shares: Vec<(f64, f64)> = report.per_item.iter().filter_map(|i| i.attention).collect();
        if !shares.is_empty() {
            let n = shares.len() as f64;
            println!(
                "answer attention: image {:.4}, reasoning {:.4}",
                shares.iter().map(|x| x.0).sum::<f64>() / n,
                shares.iter().map(|x| x.1).sum::<f64>() / n
            );
        }
    }
    Ok(())
}

pub fn infer(s: &mut Settings, seed: u64, a: InferArgs) -> Result<()> {
    let checkpoint = PathBuf::from(s.require::<String>("checkpoint", a.checkpoint)?);
    let image = PathBuf::from(s.require::<String>("image", a.image)?);
    let prompt = s.get("prompt", a.prompt, QUALITY_PROMPTS[0].to_string())?;
    let decode = decode_settings(s, a.latent_budget, a.temperature)?;
    announce(s);

    let model = load_stage_checkpoint(&checkpoint, &["init", "sft", "grpo"])?.into_model()?;
    let vocab = Vocab::new();
    let img = Image::load(&image, model.config.image_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let resp = infer_record(&model, &vocab, &img, &vocab.encode(&prompt), &decode, &mut rng)?;
    println!("response: {}", vocab.render(&resp.tokens));
    println!("latent steps: {}", resp.num_latent_steps());
    match resp.parsed_score {
        Some(score) => println!("score: {score}"),
        None => println!("score: none (format-valid: {})", resp.format_valid),
    }
    Ok(())
}
