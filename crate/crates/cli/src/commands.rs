//! The five pipeline commands. Each one resolves its config, writes a
//! manifest before finalizing outputs, and emits machine-readable artifacts
//! into the chosen output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use xform_core::data::{
    self, generate_synthetic_dataset, idx, params_from_csv, params_to_csv,
    select_reference_subset, LabeledImageSet,
};
use xform_core::distribution::{
    build_policy, complement_histogram, histograms_from_csv, histograms_to_csv, PolicyKind,
    PolicyMode, PolicySpec,
};
use xform_core::estimator::{
    discriminator_checkpoint_entries, train_estimator, Estimator, TrainError,
};
use xform_core::networks::{checkpoint, PretextEncoder};
use xform_core::pretext::{build_pretext_task, linear_probe, train_pretext, ProbeResult};

use crate::config::{load_config, resolve_estimator, ConfigFile, Preset};
use crate::digest::{file_digest, hex_digest, json_digest};
use crate::manifest::RunManifest;
use crate::{config_err, runtime_err, CliError, Result};

fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| runtime_err(format!("creating {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| runtime_err(format!("writing {}: {e}", path.display())))
}

/// Load an IDX dataset directory (images.idx + labels.idx, plus params.csv
/// ground truth when present).
pub fn load_dataset(dir: &Path) -> Result<LabeledImageSet> {
    let images = dir.join("images.idx");
    let labels = dir.join("labels.idx");
    let mut set = idx::load_idx(&images, &labels).map_err(config_err)?;
    let params = dir.join("params.csv");
    if params.exists() {
        let text = std::fs::read_to_string(&params)
            .map_err(|e| config_err(format!("reading {}: {e}", params.display())))?;
        let gt = params_from_csv(&text).map_err(config_err)?;
        if gt.values.len() / gt.kinds.len().max(1) == set.len() {
            set.gt_params = Some(gt);
        }
    }
    Ok(set)
}

// ---- synth ---------------------------------------------------------------------

pub struct SynthArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let start = Instant::now();
    let cfg = load_config(&args.config)?;
    let section = cfg
        .dataset
        .as_ref()
        .ok_or_else(|| config_err("config has no [dataset] section"))?;
    let spec = section.to_spec(args.seed)?;
    spec.validate().map_err(CliError::from)?;
    ensure_out_dir(&args.out)?;

    let images_path = args.out.join("images.idx");
    let labels_path = args.out.join("labels.idx");
    let params_path = args.out.join("params.csv");
    let mut manifest = RunManifest::new(
        "synth",
        spec.seed,
        serde_json::to_value(&spec).map_err(runtime_err)?,
    );
    manifest.record_input(&args.config)?;
    manifest.declare_output(&images_path);
    manifest.declare_output(&labels_path);
    manifest.declare_output(&params_path);
    manifest.wall_secs = start.elapsed().as_secs_f64();
    manifest.write(&args.out.join("manifest.json"))?;

    let set = generate_synthetic_dataset(&spec)?;
    idx::write_idx(&set, &images_path, &labels_path).map_err(runtime_err)?;
    let gt = set.gt_params.as_ref().expect("synthetic sets carry ground truth");
    write_text(&params_path, &params_to_csv(gt))?;
    Ok(())
}

// ---- estimate -------------------------------------------------------------------

pub struct EstimateArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub preset: Option<Preset>,
}

pub fn cmd_estimate(args: &EstimateArgs) -> Result<()> {
    let start = Instant::now();
    let file = match &args.config {
        Some(p) => load_config(p)?,
        None => ConfigFile::default(),
    };
    let cfg = resolve_estimator(&file, args.preset, args.seed, args.iterations);
    cfg.validate().map_err(CliError::from)?;
    let dataset = load_dataset(&args.data)?;
    let reference = select_reference_subset(&dataset, cfg.ref_per_class, cfg.seed)?;
    ensure_out_dir(&args.out)?;

    let ckpt_path = args.out.join("checkpoint.ckpt");
    let hist_path = args.out.join("histogram.csv");
    let history_path = args.out.join("history.csv");
    let arch_path = args.out.join("architecture.txt");
    let mut manifest = RunManifest::new(
        "estimate",
        cfg.seed,
        serde_json::to_value(&cfg).map_err(runtime_err)?,
    );
    if let Some(p) = &args.config {
        manifest.record_input(p)?;
    }
    manifest.record_input(&args.data.join("images.idx"))?;
    manifest.record_input(&args.data.join("labels.idx"))?;
    manifest.declare_output(&ckpt_path);
    manifest.declare_output(&hist_path);
    manifest.declare_output(&history_path);
    manifest.declare_output(&arch_path);
    manifest.wall_secs = start.elapsed().as_secs_f64();
    manifest.write(&args.out.join("manifest.json"))?;

    let out_dir = args.out.clone();
    let save_nets = |path: &Path, est: &Estimator| -> std::result::Result<(), String> {
        let mut entries: Vec<(String, &xform_core::Tensor)> = est.gens.checkpoint_entries();
        entries.extend(discriminator_checkpoint_entries(&est.disc));
        checkpoint::save(path, &entries).map_err(|e| e.to_string())
    };
    let result = train_estimator(cfg.clone(), &dataset, &reference, |iteration, est| {
        save_nets(&out_dir.join(format!("checkpoint_{iteration:07}.ckpt")), est)
    });
    let (est, history) = match result {
        Ok(pair) => pair,
        Err(e @ TrainError::NonFinite { .. }) => {
            // Periodic checkpoints stay on disk for post-mortem use.
            return Err(CliError::Runtime(e.to_string()));
        }
        Err(e) => return Err(e.into()),
    };

    save_nets(&ckpt_path, &est).map_err(runtime_err)?;
    checkpoint::save_manifest(
        &arch_path,
        &[
            ("kind", cfg.kind.name().to_string()),
            ("single_generator", cfg.single_generator.to_string()),
            ("latent_dim", xform_core::networks::LATENT_DIM.to_string()),
            ("mapping_hidden", xform_core::networks::MAPPING_HIDDEN.to_string()),
            ("discriminator_hidden", format!("{:?}", xform_core::networks::DISC_HIDDEN)),
            ("crop", est.crop_side().to_string()),
            ("image_channels", dataset.channels.to_string()),
            ("image_size", format!("{}x{}", dataset.height, dataset.width)),
        ],
    )
    .map_err(runtime_err)?;
    let hists = est
        .gens
        .estimate_histograms(cfg.hist_samples, cfg.hist_bins, cfg.seed)?;
    write_text(&hist_path, &histograms_to_csv(&hists))?;
    write_text(&history_path, &history.to_csv())?;
    Ok(())
}

// ---- complement -----------------------------------------------------------------

pub fn cmd_complement(input: &Path, output: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input)
        .map_err(|e| config_err(format!("reading {}: {e}", input.display())))?;
    let hists = histograms_from_csv(&text).map_err(CliError::from)?;
    if hists.is_empty() {
        return Err(config_err("histogram CSV holds no rows"));
    }
    let complements: Vec<_> = hists.iter().map(complement_histogram).collect();
    if let Some(dir) = output.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_out_dir(dir)?;
        }
    }
    write_text(output, &histograms_to_csv(&complements))?;
    Ok(())
}

// ---- policy ----------------------------------------------------------------------

pub struct PolicyArgs {
    pub complement: PathBuf,
    pub kind: String,
    pub k: usize,
    pub mode: String,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn cmd_policy(args: &PolicyArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.complement)
        .map_err(|e| config_err(format!("reading {}: {e}", args.complement.display())))?;
    let q_set = histograms_from_csv(&text).map_err(CliError::from)?;
    let kind = PolicyKind::parse(&args.kind)
        .ok_or_else(|| config_err(format!("unknown policy kind `{}`", args.kind)))?;
    let mode = PolicyMode::parse(&args.mode)
        .ok_or_else(|| config_err(format!("unknown policy mode `{}`", args.mode)))?;
    let source = hex_digest(text.as_bytes());
    let spec = build_policy(&q_set, kind, args.k, mode, args.seed, &source)?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            ensure_out_dir(dir)?;
        }
    }
    let json = serde_json::to_string_pretty(&spec).map_err(runtime_err)?;
    write_text(&args.out, &json)?;
    Ok(())
}

// ---- eval -------------------------------------------------------------------------

pub struct EvalArgs {
    pub policy: PathBuf,
    pub data: PathBuf,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub config: Option<PathBuf>,
}

/// Stable short identifier of a policy document.
pub fn policy_id(spec: &PolicySpec) -> String {
    let value = serde_json::to_value(spec).expect("policy serialization");
    json_digest(&value)[..12].to_string()
}

fn format_instances(spec: &PolicySpec) -> String {
    spec.instances
        .iter()
        .map(|inst| {
            inst.iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(":")
        })
        .collect::<Vec<_>>()
        .join(";")
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let start = Instant::now();
    let policy_text = std::fs::read_to_string(&args.policy)
        .map_err(|e| config_err(format!("reading {}: {e}", args.policy.display())))?;
    let policy: PolicySpec = serde_json::from_str(&policy_text)
        .map_err(|e| config_err(format!("{}: {e}", args.policy.display())))?;
    policy.validate().map_err(CliError::from)?;
    if args.seeds.is_empty() {
        return Err(config_err("no seeds given"));
    }
    let file = match &args.config {
        Some(p) => load_config(p)?,
        None => ConfigFile::default(),
    };
    let proto = file.eval.clone().unwrap_or_default();
    let dataset = load_dataset(&args.data)?;
    ensure_out_dir(&args.out)?;

    let pid = policy_id(&policy);
    let results_path = args.out.join("results.csv");
    // The fairness hash covers everything shared across compared policies:
    // the protocol, the dataset, and the encoder family. Policies and seeds
    // are deliberately excluded.
    let fairness = serde_json::json!({
        "protocol": serde_json::to_value(&proto).map_err(runtime_err)?,
        "images": file_digest(&args.data.join("images.idx")).map_err(runtime_err)?,
        "labels": file_digest(&args.data.join("labels.idx")).map_err(runtime_err)?,
    });
    let mut manifest = RunManifest::new(
        "eval",
        args.seeds[0],
        serde_json::json!({
            "protocol": serde_json::to_value(&proto).map_err(runtime_err)?,
            "policy": serde_json::to_value(&policy).map_err(runtime_err)?,
            "seeds": args.seeds,
            "fairness_hash": json_digest(&fairness),
        }),
    );
    manifest.record_input(&args.policy)?;
    manifest.record_input(&args.data.join("images.idx"))?;
    manifest.record_input(&args.data.join("labels.idx"))?;
    manifest.declare_output(&results_path);
    manifest.wall_secs = start.elapsed().as_secs_f64();
    manifest.write(&args.out.join(format!("manifest_eval_{pid}.json")))?;

    let task = build_pretext_task(&policy, &dataset)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(eval_workers(args.seeds.len()))
        .build()
        .map_err(runtime_err)?;
    let runs: Vec<(u64, std::result::Result<ProbeResult, String>)> = pool.install(|| {
        use rayon::prelude::*;
        args.seeds
            .par_iter()
            .map(|&seed| {
                let mut encoder = PretextEncoder::new(
                    task.channels,
                    proto.encoder_widths,
                    task.classes,
                    seed,
                    41,
                );
                let outcome = train_pretext(&mut encoder, &task, &proto, seed)
                    .and_then(|pretext_acc| {
                        linear_probe(&encoder, &dataset, &proto, seed).map(|probe_acc| ProbeResult {
                            policy_id: pid.clone(),
                            seed,
                            pretext_acc,
                            probe_acc,
                        })
                    })
                    .map_err(|e| e.to_string());
                (seed, outcome)
            })
            .collect()
    });

    // Flush whatever succeeded, in seed order, then fail if anything broke.
    let mut rows = String::new();
    if !results_path.exists() {
        rows.push_str("policy_id,kind,instances,seed,pretext_acc,probe_acc\n");
    }
    let instances = format_instances(&policy);
    let mut first_error: Option<String> = None;
    for (seed, outcome) in &runs {
        match outcome {
            Ok(r) => rows.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.policy_id,
                policy.kind.name(),
                instances,
                seed,
                r.pretext_acc,
                r.probe_acc
            )),
            Err(e) => {
                if first_error.is_none() {
                    first_error = Some(format!("seed {seed}: {e}"));
                }
            }
        }
    }
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&results_path)
        .map_err(|e| runtime_err(format!("opening {}: {e}", results_path.display())))?;
    f.write_all(rows.as_bytes())
        .map_err(|e| runtime_err(format!("writing {}: {e}", results_path.display())))?;
    if let Some(e) = first_error {
        return Err(CliError::Runtime(e));
    }
    Ok(())
}

/// Worker-pool bound for eval fan-out: XFORM_NUM_WORKERS when set,
/// otherwise min(runs, available parallelism).
pub fn eval_workers(runs: usize) -> usize {
    if let Ok(v) = std::env::var("XFORM_NUM_WORKERS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    runs.clamp(1, cores)
}

/// Convenience for tests and the acceptance suite: digest every declared
/// output artifact of a run directory (manifests excluded — they carry
/// wall-clock).
pub fn output_digests(dir: &Path) -> Result<Vec<(String, String)>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| runtime_err(format!("reading {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| !n.starts_with("manifest") && !n.ends_with(".tmp"))
        .collect();
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for n in names {
        let digest = file_digest(&dir.join(&n)).map_err(runtime_err)?;
        out.push((n, digest));
    }
    Ok(out)
}

// Re-exported so integration tests can build datasets in place.
pub use data::SyntheticSpec;
