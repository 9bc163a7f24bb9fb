//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

use bitbreaker_core::{
    exhaustive_min_flipset, fixtures, genbfa, load_checkpoint, load_dataset, load_flipset,
    mask_weights, optimize, prune, rank_layers, save_checkpoint, save_dataset, save_flipset,
    select_subset, subsetsel, Dataset, QuantFormat, SensitivityProfile, ToyModel,
};

use crate::config::RunConfig;
use crate::report::{
    AttackReport, FinalFlipSet, Metrics, OptimizeStage, ProfileRow, PruneStage, SelectStage,
    Stages, Timings, REPORT_VERSION,
};

/// Exit status for a command; `main` maps these to process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    BelowThreshold,
}

fn load_pair(cfg: &RunConfig) -> Result<(ToyModel, Dataset)> {
    cfg.validate_paths()?;
    let model = load_checkpoint(&cfg.checkpoint)
        .with_context(|| format!("loading checkpoint {}", cfg.checkpoint.display()))?;
    let data = load_dataset(&cfg.dataset)
        .with_context(|| format!("loading dataset {}", cfg.dataset.display()))?;
    Ok((model, data))
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn profile_rows(profile: &SensitivityProfile) -> Vec<ProfileRow> {
    profile
        .entries()
        .iter()
        .map(|e| ProfileRow {
            layer: e.layer.clone(),
            k: e.k_used,
            loss: e.loss,
        })
        .collect()
}

fn print_profile(profile: &SensitivityProfile) {
    println!("{:<16} {:>8} {:>14}", "layer", "k", "loss");
    for e in profile.entries() {
        println!("{:<16} {:>8} {:>14.6}", e.layer, e.k_used, e.loss);
    }
}

/// `rank`: write the sensitivity profile CSV and print it.
pub fn cmd_rank(cfg: &RunConfig) -> Result<Outcome> {
    let (model, data) = load_pair(cfg)?;
    let profile = rank_layers(&model, &data, &cfg.sensitivity_config())?;
    ensure_out_dir(&cfg.output_dir)?;
    let csv_path = cfg.output_dir.join("profile.csv");
    std::fs::write(&csv_path, profile.to_csv())
        .with_context(|| format!("writing {}", csv_path.display()))?;
    print_profile(&profile);
    println!("profile written to {}", csv_path.display());
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct SelectionFailure {
    version: u32,
    failed_stage: &'static str,
    error: String,
    threshold: f64,
    per_layer_max_loss: Vec<(String, f64)>,
}

/// `select`: rank, then sweep for the smallest qualifying subset.
pub fn cmd_select(cfg: &RunConfig) -> Result<Outcome> {
    let (model, data) = load_pair(cfg)?;
    let clean_loss = bitbreaker_core::forward_loss(&model, &data, None)?;
    let profile = rank_layers(&model, &data, &cfg.sensitivity_config())?;
    ensure_out_dir(&cfg.output_dir)?;
    let sub_cfg = cfg.subset_config(clean_loss);
    match select_subset(&model, &data, &profile, &sub_cfg) {
        Ok(sel) => {
            std::fs::write(
                cfg.output_dir.join("subset_sweep.csv"),
                subsetsel::sweep_log_csv(&sel.sweep_log),
            )?;
            save_flipset(&sel.flipset, &cfg.output_dir.join("w_sub.json"))?;
            println!(
                "selected layer {:?}: k={} at r={}% (loss {:.6} >= threshold {:.6})",
                sel.record.layer, sel.record.k, sel.record.rate, sel.record.loss,
                sub_cfg.loss_threshold
            );
            println!("subset written to {}", cfg.output_dir.join("w_sub.json").display());
            Ok(Outcome::Ok)
        }
        Err(bitbreaker_core::Error::ThresholdNotReached {
            threshold,
            per_layer_max,
        }) => {
            let failure = SelectionFailure {
                version: REPORT_VERSION,
                failed_stage: "select",
                error: "no sweep point reached the loss threshold".into(),
                threshold,
                per_layer_max_loss: per_layer_max,
            };
            write_json(&failure, &cfg.output_dir.join("selection_failure.json"))?;
            eprintln!("select: threshold {threshold} not reached by any sweep point");
            Ok(Outcome::BelowThreshold)
        }
        Err(e) => Err(e.into()),
    }
}

/// `optimize`: evolutionary minimization over a previously selected subset.
pub fn cmd_optimize(cfg: &RunConfig, flipset_path: &Path) -> Result<Outcome> {
    let (model, data) = load_pair(cfg)?;
    let w_sub = load_flipset(flipset_path)?;
    let clean_loss = bitbreaker_core::forward_loss(&model, &data, None)?;
    let threshold = cfg.subset.threshold.resolve(clean_loss);
    let outcome = optimize(&model, &data, &w_sub, &cfg.ga_config(threshold))?;
    ensure_out_dir(&cfg.output_dir)?;
    std::fs::write(
        cfg.output_dir.join("ga_history.csv"),
        genbfa::history_csv(&outcome.history),
    )?;
    save_flipset(&outcome.flipset, &cfg.output_dir.join("w_opt.json"))?;
    println!(
        "optimized {} -> {} indices over {} generations (best loss {:.6}, fitness {:.6})",
        w_sub.len(),
        outcome.flipset.len(),
        outcome.generations_run,
        outcome.best_loss,
        outcome.best_fitness
    );
    if outcome.meets_threshold {
        Ok(Outcome::Ok)
    } else {
        eprintln!("optimize: best solution stayed below threshold {threshold}");
        Ok(Outcome::BelowThreshold)
    }
}

/// `prune`: iterative removal of inert indices from a flip set.
pub fn cmd_prune(cfg: &RunConfig, flipset_path: &Path) -> Result<Outcome> {
    let (model, data) = load_pair(cfg)?;
    let best = load_flipset(flipset_path)?;
    let reference = bitbreaker_core::bflip_loss(&model, &best, &data)?;
    let pruned = prune(&model, &data, &best, &cfg.prune_config(reference))?;
    ensure_out_dir(&cfg.output_dir)?;
    save_flipset(&pruned, &cfg.output_dir.join("pruned.json"))?;
    let loss = bitbreaker_core::bflip_loss(&model, &pruned, &data)?;
    println!(
        "pruned {} -> {} indices (loss {:.6}, reference {:.6})",
        best.len(),
        pruned.len(),
        loss,
        reference
    );
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct AttackFailure<'a> {
    version: u32,
    config: &'a RunConfig,
    clean: Metrics,
    failed_stage: &'static str,
    error: String,
}

/// `attack`: the full pipeline, emitting every stage artifact plus the
/// self-contained report.
pub fn cmd_attack(cfg: &RunConfig, normalize_timings: bool) -> Result<Outcome> {
    let total_start = Instant::now();
    let (model, data) = load_pair(cfg)?;
    ensure_out_dir(&cfg.output_dir)?;
    let clean = Metrics::compute(&model, &data, None)?;

    let rank_start = Instant::now();
    let profile = rank_layers(&model, &data, &cfg.sensitivity_config())?;
    let rank_s = rank_start.elapsed().as_secs_f64();
    std::fs::write(cfg.output_dir.join("profile.csv"), profile.to_csv())?;

    let sub_cfg = cfg.subset_config(clean.loss);
    let select_start = Instant::now();
    let selection = match select_subset(&model, &data, &profile, &sub_cfg) {
        Ok(sel) => sel,
        Err(bitbreaker_core::Error::ThresholdNotReached { threshold, per_layer_max }) => {
            let failure = AttackFailure {
                version: REPORT_VERSION,
                config: cfg,
                clean,
                failed_stage: "select",
                error: format!(
                    "threshold {threshold} unreached; per-layer max loss: {per_layer_max:?}"
                ),
            };
            write_json(&failure, &cfg.output_dir.join("report.json"))?;
            eprintln!("attack: selection never reached threshold {threshold}");
            return Ok(Outcome::BelowThreshold);
        }
        Err(e) => return Err(e.into()),
    };
    let select_s = select_start.elapsed().as_secs_f64();
    std::fs::write(
        cfg.output_dir.join("subset_sweep.csv"),
        subsetsel::sweep_log_csv(&selection.sweep_log),
    )?;
    save_flipset(&selection.flipset, &cfg.output_dir.join("w_sub.json"))?;

    let optimize_start = Instant::now();
    let ga = optimize(
        &model,
        &data,
        &selection.flipset,
        &cfg.ga_config(sub_cfg.loss_threshold),
    )?;
    let optimize_s = optimize_start.elapsed().as_secs_f64();
    std::fs::write(
        cfg.output_dir.join("ga_history.csv"),
        genbfa::history_csv(&ga.history),
    )?;
    save_flipset(&ga.flipset, &cfg.output_dir.join("w_opt.json"))?;

    let prune_start = Instant::now();
    let (final_set, prune_stage) = if cfg.prune.enabled {
        let pruned = prune(&model, &data, &ga.flipset, &cfg.prune_config(ga.best_loss))?;
        save_flipset(&pruned, &cfg.output_dir.join("pruned.json"))?;
        let loss = bitbreaker_core::bflip_loss(&model, &pruned, &data)?;
        let stage = PruneStage {
            cardinality: pruned.len(),
            loss,
            epsilon: cfg.prune_config(ga.best_loss).epsilon,
        };
        (pruned, Some(stage))
    } else {
        (ga.flipset.clone(), None)
    };
    let prune_s = prune_start.elapsed().as_secs_f64();

    let post_attack = Metrics::compute(&model, &data, Some(&final_set))?;
    let flip_rate = final_set.len() as f64 / model.total_weight_bits() as f64;
    let success = post_attack.loss >= sub_cfg.loss_threshold;

    let timings = if normalize_timings {
        Timings::normalized()
    } else {
        Timings {
            rank_s,
            select_s,
            optimize_s,
            prune_s,
            total_s: total_start.elapsed().as_secs_f64(),
        }
    };

    let report = AttackReport {
        version: REPORT_VERSION,
        config: cfg.clone(),
        clean,
        stages: Stages {
            rank: profile_rows(&profile),
            select: SelectStage {
                layer: selection.record.layer.clone(),
                rate: selection.record.rate,
                k: selection.record.k,
                loss: selection.record.loss,
                resolved_threshold: sub_cfg.loss_threshold,
                subset_size: selection.flipset.len(),
            },
            optimize: OptimizeStage {
                best_fitness: ga.best_fitness,
                best_loss: ga.best_loss,
                cardinality: ga.flipset.len(),
                generations_run: ga.generations_run,
                meets_threshold: ga.meets_threshold,
            },
            prune: prune_stage,
        },
        final_flipset: FinalFlipSet::from(&final_set),
        post_attack,
        flip_rate,
        success,
        timings,
    };
    write_json(&report, &cfg.output_dir.join("report.json"))?;

    println!(
        "attack: {} -> {} -> {} flips on layer {:?} (loss {:.6} -> {:.6}, accuracy {:.4} -> {:.4})",
        selection.flipset.len(),
        ga.flipset.len(),
        final_set.len(),
        final_set.layer,
        clean.loss,
        post_attack.loss,
        clean.accuracy,
        post_attack.accuracy
    );
    println!("flip rate {:.3e}; report at {}", flip_rate, cfg.output_dir.join("report.json").display());

    if success {
        Ok(Outcome::Ok)
    } else {
        eprintln!(
            "attack: final loss {:.6} below threshold {:.6}",
            post_attack.loss, sub_cfg.loss_threshold
        );
        Ok(Outcome::BelowThreshold)
    }
}

#[derive(Serialize)]
struct EvalOutput {
    loss: f64,
    perplexity: f64,
    accuracy: f64,
    flipset: Option<PathBuf>,
    masked: bool,
}

/// `eval`: metrics for a checkpoint/dataset pair, optionally under a flip
/// overlay or with the attacked weights masked to zero.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset: &Path,
    flipset_path: Option<&Path>,
    mask: bool,
    out: Option<&Path>,
) -> Result<Outcome> {
    let model = load_checkpoint(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let data = load_dataset(dataset)
        .with_context(|| format!("loading dataset {}", dataset.display()))?;

    let metrics = match (flipset_path, mask) {
        (None, _) => Metrics::compute(&model, &data, None)?,
        (Some(p), false) => {
            let fs = load_flipset(p)?;
            Metrics::compute(&model, &data, Some(&fs))?
        }
        (Some(p), true) => {
            let fs = load_flipset(p)?;
            let masked = mask_weights(&model, &fs)?;
            Metrics::compute(&masked, &data, None)?
        }
    };

    let output = EvalOutput {
        loss: metrics.loss,
        perplexity: metrics.perplexity,
        accuracy: metrics.accuracy,
        flipset: flipset_path.map(Path::to_path_buf),
        masked: mask && flipset_path.is_some(),
    };
    let text = serde_json::to_string_pretty(&output).expect("metrics serialize");
    println!("{text}");
    if let Some(path) = out {
        std::fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(Outcome::Ok)
}

#[derive(Serialize)]
struct OracleOutput {
    min_cardinality: Option<usize>,
    witness: Option<FinalFlipSet>,
    subsets_examined: u64,
    threshold: f64,
    space_size: usize,
}

/// `oracle`: exhaustive minimal-subset search over the selected subset (or
/// an explicit flip-set file).
pub fn cmd_oracle(
    cfg: &RunConfig,
    max_size: usize,
    flipset_path: Option<&Path>,
) -> Result<Outcome> {
    let (model, data) = load_pair(cfg)?;
    let clean_loss = bitbreaker_core::forward_loss(&model, &data, None)?;
    let threshold = cfg.subset.threshold.resolve(clean_loss);

    let space = match flipset_path {
        Some(p) => load_flipset(p)?,
        None => {
            let profile = rank_layers(&model, &data, &cfg.sensitivity_config())?;
            select_subset(&model, &data, &profile, &cfg.subset_config(clean_loss))?.flipset
        }
    };

    let result = exhaustive_min_flipset(&model, &data, &space, threshold, max_size)?;
    let output = OracleOutput {
        min_cardinality: result.min_cardinality,
        witness: result.witness.as_ref().map(FinalFlipSet::from),
        subsets_examined: result.subsets_examined,
        threshold,
        space_size: space.len(),
    };
    ensure_out_dir(&cfg.output_dir)?;
    write_json(&output, &cfg.output_dir.join("oracle.json"))?;
    println!("{}", serde_json::to_string_pretty(&output).unwrap());
    Ok(Outcome::Ok)
}

/// `gen-fixtures`: regenerate the committed reference checkpoints and
/// dataset, deterministically.
pub fn cmd_gen_fixtures(out_dir: &Path) -> Result<Outcome> {
    ensure_out_dir(out_dir)?;
    let seed = 42;

    let (mlp, data) = fixtures::train_reference_mlp(seed, QuantFormat::Int8)?;
    let acc = fixtures::assert_reference_quality(&mlp, &data)?;
    save_checkpoint(&mlp, &out_dir.join("toymlp_int8.json"))?;
    println!("toymlp_int8.json      clean accuracy {acc:.4}");

    let (attn, _) = fixtures::train_reference_attn(seed, QuantFormat::Int8)?;
    let acc = fixtures::assert_reference_quality(&attn, &data)?;
    save_checkpoint(&attn, &out_dir.join("toyattn_int8.json"))?;
    println!("toyattn_int8.json     clean accuracy {acc:.4}");

    let (nf4, _) = fixtures::train_reference_mlp(seed, QuantFormat::Nf4)?;
    let acc = bitbreaker_core::accuracy(&nf4, &data, None)?;
    save_checkpoint(&nf4, &out_dir.join("toymlp_nf4.json"))?;
    println!("toymlp_nf4.json       clean accuracy {acc:.4}");

    let (tern, _) = fixtures::train_reference_mlp(seed, QuantFormat::Ternary)?;
    let acc = bitbreaker_core::accuracy(&tern, &data, None)?;
    save_checkpoint(&tern, &out_dir.join("toymlp_ternary.json"))?;
    println!("toymlp_ternary.json   clean accuracy {acc:.4}");

    save_dataset(&data, &out_dir.join("dataset_seed42.json"))?;
    println!("dataset_seed42.json   {} samples", data.n_samples());
    Ok(Outcome::Ok)
}
