//! Subcommand implementations. Every artifact embeds the invocation's config
//! hash and seed, is written atomically, and can be regenerated from those
//! fields alone.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use serde_json::json;

use fairstyle_core::math::{derive_seed, fnv1a};
use fairstyle_core::persist::{atomic_write, atomic_write_json};
use fairstyle_core::{
    audit, find_controlling_channel, generate_batch, load_tensor, optimize_multi,
    optimize_single, optimize_text_direction, AuditReport, ChannelId, ClassifierAdapter,
    DiscoveryConfig, DiscoveryOutcome, FairStyleTensor, GeneratorAdapter, OptimizationTrace,
    OptimizerConfig, SeedPolicy,
};

use crate::config::{AttributeSource, PipelineConfig, PromptConfig};
use crate::source::{
    clip_classifier, config_hash, load_generator, parse_channels, LoadedGenerator,
    ResolvedClassifier,
};
use crate::{
    AuditArgs, DebiasArgs, DiscoverArgs, GeneratorOpts, LabelOpts, PipelineArgs, SampleArgs,
    SynthArgs,
};

fn open_generator(opts: &GeneratorOpts) -> Result<LoadedGenerator> {
    load_generator(&opts.generator, &opts.adapter)
}

/// Applies the CLI labeling flags for one attribute name: an explicit
/// `name=path` classifier wins, then a prompt pair, then the generator's
/// planted classifier of that name.
fn resolve_from_flags(
    loaded: &LoadedGenerator,
    name: &str,
    label: &LabelOpts,
    attribute_count: usize,
) -> Result<ResolvedClassifier> {
    for entry in &label.classifiers {
        let (entry_name, path) = entry
            .split_once('=')
            .ok_or_else(|| anyhow!("--classifier expects NAME=PATH, got '{entry}'"))?;
        if entry_name == name {
            return crate::source::resolve_classifier(
                loaded,
                name,
                &AttributeSource::Classifier(PathBuf::from(path)),
            );
        }
    }
    match (&label.text_positive, &label.text_negative) {
        (Some(pos), Some(neg)) => {
            if attribute_count > 1 {
                bail!("--text-positive/--text-negative apply to a single attribute");
            }
            return clip_classifier(
                name,
                &PromptConfig {
                    positive: pos.clone(),
                    negative: neg.clone(),
                    embedding_backend: "hash".to_string(),
                    embedding_dim: label.embedding_dim,
                    embedding_seed: label.embedding_seed,
                },
            );
        }
        (None, None) => {}
        _ => bail!("--text-positive and --text-negative must be given together"),
    }
    crate::source::resolve_classifier(loaded, name, &AttributeSource::Synthetic)
}

fn prompts_json(resolved: &ResolvedClassifier) -> serde_json::Value {
    match resolved.prompts() {
        Some(p) => json!({ "positive": p.positive(), "negative": p.negative() }),
        None => serde_json::Value::Null,
    }
}

pub fn run_discover(args: &DiscoverArgs) -> Result<()> {
    let loaded = open_generator(&args.generator)?;
    let resolved = resolve_from_flags(&loaded, &args.attribute, &args.label, 1)?;
    let config = DiscoveryConfig {
        batch_size: args.batch_size,
        perturbation: args.perturbation,
        exclude_last_blocks: args.exclude_last_blocks,
        seed: args.seed,
    };
    let outcome =
        find_controlling_channel(&loaded.bundle.generator, resolved.as_adapter(), &config)?;

    let fingerprint = loaded.bundle.generator.layout().fingerprint();
    let effective = json!({
        "command": "discover",
        "generator": args.generator.generator.display().to_string(),
        "adapter": args.generator.adapter,
        "attribute": args.attribute,
        "batch_size": args.batch_size,
        "perturbation": args.perturbation,
        "exclude_last_blocks": args.exclude_last_blocks,
        "seed": args.seed,
        "generator_fingerprint": fingerprint,
    });
    let artifact = json!({
        "command": "discover",
        "config_hash": config_hash(&effective),
        "seed": args.seed,
        "generator_fingerprint": fingerprint,
        "attribute": args.attribute,
        "prompts": prompts_json(&resolved),
        "batch_size": args.batch_size,
        "perturbation": args.perturbation,
        "exclude_last_blocks": args.exclude_last_blocks,
        "best": outcome.best,
        "ranking": outcome.ranking,
    });
    atomic_write_json(&args.out, &artifact)?;
    eprintln!(
        "discovered channel ({}, {}) for '{}' -> {}",
        outcome.best.layer,
        outcome.best.channel,
        args.attribute,
        args.out.display()
    );
    Ok(())
}

fn load_direction(path: &Path) -> Result<std::collections::BTreeMap<ChannelId, f64>> {
    #[derive(serde::Deserialize)]
    struct Entry {
        layer: usize,
        channel: usize,
        value: f64,
    }
    let bytes =
        std::fs::read(path).with_context(|| format!("reading direction {}", path.display()))?;
    let entries: Vec<Entry> = serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing direction {}", path.display()))?;
    if entries.is_empty() {
        bail!("direction file {} is empty", path.display());
    }
    Ok(entries
        .into_iter()
        .map(|e| (ChannelId::new(e.layer, e.channel), e.value))
        .collect())
}

#[derive(Serialize)]
struct TraceArtifact<'a> {
    command: &'a str,
    config_hash: &'a str,
    seed: u64,
    generator_fingerprint: String,
    attributes: Vec<String>,
    prompts: serde_json::Value,
    optimizer: &'a OptimizerConfig,
    trace: &'a OptimizationTrace,
}

/// Prompt pairs recorded verbatim, keyed by attribute name.
fn prompt_provenance(names: &[String], resolved: &[ResolvedClassifier]) -> serde_json::Value {
    let map: serde_json::Map<String, serde_json::Value> = names
        .iter()
        .zip(resolved)
        .filter_map(|(n, r)| {
            r.prompts().map(|p| {
                (n.clone(), json!({ "positive": p.positive(), "negative": p.negative() }))
            })
        })
        .collect();
    serde_json::Value::Object(map)
}

pub fn run_debias(args: &DebiasArgs) -> Result<()> {
    let loaded = open_generator(&args.generator)?;
    let layout = loaded.bundle.generator.layout();
    let names: Vec<String> = args
        .attributes
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        bail!("--attributes must name at least one attribute");
    }
    let resolved: Vec<ResolvedClassifier> = names
        .iter()
        .map(|n| resolve_from_flags(&loaded, n, &args.label, names.len()))
        .collect::<Result<_>>()?;
    let adapters: Vec<&dyn ClassifierAdapter> =
        resolved.iter().map(|r| r.as_adapter()).collect();

    let optimizer = OptimizerConfig {
        batch_size: args.n,
        max_iterations: args.max_iters,
        tolerance: args.tol,
        fd_step: args.fd_step,
        learning_rate: args.lr,
        seed_policy: if args.fixed_batch {
            SeedPolicy::FixedBatch
        } else {
            SeedPolicy::FreshBatchPerIteration
        },
        stats_samples: args.stats_n,
        seed: args.seed,
    };

    let direction = args.direction.as_deref().map(load_direction).transpose()?;
    let (tensor, trace): (FairStyleTensor, OptimizationTrace) = match &direction {
        Some(direction) => {
            if names.len() != 1 {
                bail!("--direction debiasing takes exactly one attribute");
            }
            optimize_text_direction(&loaded.bundle.generator, adapters[0], direction, &optimizer)?
        }
        None => {
            let channels = match parse_channels(&args.channels)? {
                Some(explicit) => {
                    if explicit.len() != names.len() {
                        bail!(
                            "{} channels given for {} attributes",
                            explicit.len(),
                            names.len()
                        );
                    }
                    explicit
                }
                None => {
                    // Auto-discovery per attribute, one derived seed each.
                    names
                        .iter()
                        .zip(&adapters)
                        .enumerate()
                        .map(|(i, (name, adapter))| {
                            let config = DiscoveryConfig {
                                seed: derive_seed(args.seed, "discover", i as u64),
                                ..Default::default()
                            };
                            let outcome = find_controlling_channel(
                                &loaded.bundle.generator,
                                *adapter,
                                &config,
                            )?;
                            eprintln!(
                                "discovered ({}, {}) for '{name}'",
                                outcome.best.layer, outcome.best.channel
                            );
                            Ok(outcome.best)
                        })
                        .collect::<Result<Vec<_>>>()?
                }
            };
            if channels.len() == 1 {
                optimize_single(&loaded.bundle.generator, adapters[0], channels[0], &optimizer)?
            } else {
                optimize_multi(&loaded.bundle.generator, &adapters, &channels, &optimizer)?
            }
        }
    };

    let effective = json!({
        "command": "debias",
        "generator": args.generator.generator.display().to_string(),
        "adapter": args.generator.adapter,
        "attributes": names,
        "channels": args.channels,
        "direction": args.direction.as_ref().map(|p| p.display().to_string()),
        "optimizer": optimizer,
        "generator_fingerprint": layout.fingerprint(),
    });
    let hash = config_hash(&effective);
    let file = fairstyle_core::TensorFile::pack(&tensor, &layout, names.clone())?
        .with_provenance(hash.clone(), args.seed);
    atomic_write_json(&args.out, &file)?;
    if let Some(trace_path) = &args.trace {
        atomic_write_json(
            trace_path,
            &TraceArtifact {
                command: "debias",
                config_hash: &hash,
                seed: args.seed,
                generator_fingerprint: layout.fingerprint(),
                attributes: names.clone(),
                prompts: prompt_provenance(&names, &resolved),
                optimizer: &optimizer,
                trace: &trace,
            },
        )?;
    }
    eprintln!(
        "debias finished: status={:?}, best KL {:.3e} at iteration {} -> {}",
        trace.status,
        trace.best_kl,
        trace.best_iteration,
        args.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct AuditArtifact<'a> {
    command: &'a str,
    config_hash: String,
    tensor: Option<String>,
    tensor_hash: Option<String>,
    prompts: serde_json::Value,
    #[serde(flatten)]
    report: &'a AuditReport,
}

pub fn run_audit(args: &AuditArgs) -> Result<()> {
    let loaded = open_generator(&args.generator)?;
    let layout = loaded.bundle.generator.layout();
    let names: Vec<String> = args
        .attributes
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if names.is_empty() {
        bail!("--attributes must name at least one attribute");
    }
    let resolved: Vec<ResolvedClassifier> = names
        .iter()
        .map(|n| resolve_from_flags(&loaded, n, &args.label, names.len()))
        .collect::<Result<_>>()?;
    let adapters: Vec<&dyn ClassifierAdapter> =
        resolved.iter().map(|r| r.as_adapter()).collect();

    let joints: Vec<Vec<String>> = args
        .joint
        .iter()
        .map(|spec| {
            let parts: Vec<String> = spec.split('+').map(|s| s.trim().to_string()).collect();
            if parts.len() < 2 {
                bail!("--joint expects at least two attributes joined by '+', got '{spec}'");
            }
            for p in &parts {
                if !names.contains(p) {
                    bail!("--joint names unknown attribute '{p}'");
                }
            }
            Ok(parts)
        })
        .collect::<Result<_>>()?;

    let (tensor, tensor_hash) = match &args.tensor {
        Some(path) => {
            let (tensor, _) = load_tensor(path, &layout)?;
            let bytes = std::fs::read(path)?;
            (Some(tensor), Some(format!("{:016x}", fnv1a(&bytes))))
        }
        None => (None, None),
    };

    let report = audit(
        &loaded.bundle.generator,
        &adapters,
        args.n,
        tensor.as_ref(),
        &joints,
        args.seed,
    )?;

    let effective = json!({
        "command": "audit",
        "generator": args.generator.generator.display().to_string(),
        "adapter": args.generator.adapter,
        "attributes": names,
        "joints": joints,
        "n": args.n,
        "seed": args.seed,
        "tensor": args.tensor.as_ref().map(|p| p.display().to_string()),
        "tensor_hash": tensor_hash,
        "generator_fingerprint": layout.fingerprint(),
    });
    let artifact = AuditArtifact {
        command: "audit",
        config_hash: config_hash(&effective),
        tensor: args.tensor.as_ref().map(|p| p.display().to_string()),
        tensor_hash,
        prompts: prompt_provenance(&names, &resolved),
        report: &report,
    };

    if let Some(out) = &args.out {
        atomic_write_json(out, &artifact)?;
    }
    let csv = fairstyle_core::audit::report_csv(&report);
    if let Some(csv_path) = &args.csv {
        atomic_write(csv_path, csv.as_bytes())?;
    }
    match args.format.as_str() {
        "json" => println!("{}", serde_json::to_string_pretty(&artifact)?),
        "csv" => print!("{csv}"),
        other => bail!("unknown format '{other}' (expected json or csv)"),
    }
    Ok(())
}

pub fn run_sample(args: &SampleArgs) -> Result<()> {
    let loaded = open_generator(&args.generator)?;
    let layout = loaded.bundle.generator.layout();
    let (tensor, tensor_hash) = match &args.tensor {
        Some(path) => {
            // Refuses on fingerprint mismatch.
            let (tensor, _) = load_tensor(path, &layout)?;
            let bytes = std::fs::read(path)?;
            (Some(tensor), Some(format!("{:016x}", fnv1a(&bytes))))
        }
        None => (None, None),
    };

    let batch = generate_batch(&loaded.bundle.generator, args.n, tensor.as_ref(), args.seed)?;
    std::fs::create_dir_all(&args.out_dir)?;

    let mut images = Vec::with_capacity(args.n);
    for (i, image) in batch.images.iter().enumerate() {
        let file = format!("sample_{i:06}.{}", image.pnm_extension());
        atomic_write(&args.out_dir.join(&file), &image.to_pnm()?)?;
        images.push(json!({ "file": file, "latent_seed": batch.latent_seeds[i] }));
    }

    let effective = json!({
        "command": "sample",
        "generator": args.generator.generator.display().to_string(),
        "adapter": args.generator.adapter,
        "n": args.n,
        "seed": args.seed,
        "tensor_hash": tensor_hash,
        "generator_fingerprint": layout.fingerprint(),
    });
    let manifest = json!({
        "command": "sample",
        "config_hash": config_hash(&effective),
        "seed": args.seed,
        "generator_fingerprint": layout.fingerprint(),
        "tensor": args.tensor.as_ref().map(|p| p.display().to_string()),
        "tensor_hash": tensor_hash,
        "images": images,
    });
    atomic_write_json(&args.out_dir.join("manifest.json"), &manifest)?;
    eprintln!("wrote {} images to {}", args.n, args.out_dir.display());
    Ok(())
}

pub fn run_synth(args: &SynthArgs) -> Result<()> {
    let loaded = load_generator(&args.spec, "synthetic")?;
    let oracle = &loaded.bundle.oracle;
    let layout = loaded.bundle.generator.layout();

    let attributes: Vec<serde_json::Value> = loaded
        .spec
        .attributes
        .iter()
        .enumerate()
        .map(|(i, attr)| {
            json!({
                "name": attr.name,
                "base_rate": attr.base_rate,
                "causal_channel": attr.causal_channel,
                "balancing_offset": oracle.balancing_offset(i),
                "threshold": oracle.threshold(i),
                "pre_activation_sigma": oracle.pre_activation_sigma(i),
                "initial_marginal_kl": oracle.initial_marginal_kl(i),
            })
        })
        .collect();
    let decorrelating = oracle.decorrelating_params().map(|(targets, params)| {
        json!({ "targets": targets, "params": params })
    });
    let artifact = json!({
        "command": "synth",
        "generator_fingerprint": layout.fingerprint(),
        "layer_count": layout.layer_count(),
        "block_count": layout.block_count(),
        "image_size": loaded.spec.image_size,
        "attributes": attributes,
        "coupling": loaded.spec.coupling,
        "expected_joint_cells": oracle.expected_joint_cells(),
        "decorrelating_params": decorrelating,
    });
    atomic_write_json(&args.out, &artifact)?;
    eprintln!(
        "materialized synthetic oracle ({} attributes) -> {}",
        attributes.len(),
        args.out.display()
    );
    Ok(())
}

pub fn run_pipeline(args: &PipelineArgs) -> Result<()> {
    // ValidationError stays downcastable so main can emit the structured
    // error document.
    let (config, raw) = PipelineConfig::load(&args.config)?;
    run_pipeline_validated(config, raw)
}

fn run_pipeline_validated(config: PipelineConfig, raw: serde_json::Value) -> Result<()> {
    let hash = config_hash(&raw);
    let generator_source = &config.generator;
    let loaded = if let Some(spec) = &generator_source.synthetic_spec {
        load_generator(spec, "synthetic")?
    } else {
        let checkpoint = generator_source.checkpoint.as_ref().expect("validated");
        let adapter = generator_source.adapter.as_deref().expect("validated");
        load_generator(checkpoint, adapter)?
    };
    let layout = loaded.bundle.generator.layout();
    let names: Vec<String> = config.attributes.iter().map(|a| a.name.clone()).collect();
    let resolved: Vec<ResolvedClassifier> = config
        .attributes
        .iter()
        .map(|a| crate::source::resolve_classifier(&loaded, &a.name, &a.source))
        .collect::<Result<_>>()?;
    let adapters: Vec<&dyn ClassifierAdapter> =
        resolved.iter().map(|r| r.as_adapter()).collect();

    std::fs::create_dir_all(&config.output_dir)?;
    let out = |name: &str| config.output_dir.join(name);

    // Stage seeds all derive from the one global seed.
    let seed = config.seed;

    let before = audit(
        &loaded.bundle.generator,
        &adapters,
        config.audit.samples,
        None,
        &config.audit.joints,
        derive_seed(seed, "audit-before", 0),
    )?;
    atomic_write_json(
        &out("report_before.json"),
        &AuditArtifact {
            command: "pipeline.audit-before",
            config_hash: hash.clone(),
            tensor: None,
            tensor_hash: None,
            prompts: prompt_provenance(&names, &resolved),
            report: &before,
        },
    )?;
    eprintln!("audit (before): {} samples", config.audit.samples);

    let mut channels = Vec::with_capacity(names.len());
    let mut discovery_artifacts = Vec::new();
    for (i, attr) in config.attributes.iter().enumerate() {
        if let Some([layer, channel]) = config.channels.get(&attr.name) {
            let ch = ChannelId::new(*layer, *channel);
            layout.check_editable(ch).map_err(|e| anyhow!(e))?;
            channels.push(ch);
            discovery_artifacts.push(json!({
                "attribute": attr.name,
                "source": "explicit",
                "channel": ch,
            }));
        } else {
            let dconfig = DiscoveryConfig {
                seed: derive_seed(seed, "discover", i as u64),
                ..config.discovery.clone()
            };
            let outcome: DiscoveryOutcome =
                find_controlling_channel(&loaded.bundle.generator, adapters[i], &dconfig)?;
            eprintln!(
                "discover '{}': ({}, {})",
                attr.name, outcome.best.layer, outcome.best.channel
            );
            channels.push(outcome.best);
            discovery_artifacts.push(json!({
                "attribute": attr.name,
                "source": "discovered",
                "seed": dconfig.seed,
                "channel": outcome.best,
                "ranking": outcome.ranking.iter().take(16).collect::<Vec<_>>(),
            }));
        }
    }
    atomic_write_json(
        &out("channels.json"),
        &json!({
            "command": "pipeline.discover",
            "config_hash": hash,
            "seed": seed,
            "generator_fingerprint": layout.fingerprint(),
            "attributes": discovery_artifacts,
        }),
    )?;

    let optimizer = OptimizerConfig {
        seed: derive_seed(seed, "debias", 0),
        ..config.optimizer.clone()
    };
    let (tensor, trace) = if channels.len() == 1 {
        optimize_single(&loaded.bundle.generator, adapters[0], channels[0], &optimizer)?
    } else {
        optimize_multi(&loaded.bundle.generator, &adapters, &channels, &optimizer)?
    };
    eprintln!(
        "debias: status={:?}, best KL {:.3e} at iteration {}",
        trace.status, trace.best_kl, trace.best_iteration
    );
    let tensor_file = fairstyle_core::TensorFile::pack(&tensor, &layout, names.clone())?
        .with_provenance(hash.clone(), seed);
    atomic_write_json(&out("tensor.json"), &tensor_file)?;
    atomic_write_json(
        &out("trace.json"),
        &TraceArtifact {
            command: "pipeline.debias",
            config_hash: &hash,
            seed,
            generator_fingerprint: layout.fingerprint(),
            attributes: names.clone(),
            prompts: prompt_provenance(&names, &resolved),
            optimizer: &optimizer,
            trace: &trace,
        },
    )?;

    let after = audit(
        &loaded.bundle.generator,
        &adapters,
        config.audit.samples,
        Some(&tensor),
        &config.audit.joints,
        derive_seed(seed, "audit-after", 0),
    )?;
    atomic_write_json(
        &out("report_after.json"),
        &AuditArtifact {
            command: "pipeline.audit-after",
            config_hash: hash.clone(),
            tensor: Some("tensor.json".to_string()),
            tensor_hash: None,
            prompts: prompt_provenance(&names, &resolved),
            report: &after,
        },
    )?;

    let kl_line = |r: &AuditReport| -> String {
        r.marginals
            .iter()
            .chain(r.joints.iter())
            .map(|d| {
                format!(
                    "{}={:.3e}",
                    d.distribution.attribute_names().join("+"),
                    d.kl_to_uniform
                )
            })
            .collect::<Vec<_>>()
            .join(", ")
    };
    eprintln!("audit (after): KL {}", kl_line(&after));
    eprintln!("pipeline artifacts in {}", config.output_dir.display());
    Ok(())
}
