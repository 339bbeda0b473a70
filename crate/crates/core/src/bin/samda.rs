use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use samda_core::adapter::{
    adapter_layer_param_count, adapter_param_count, method_param_counts, registry_adapter_count, AdapterConfig,
};
use samda_core::data::{generate_dataset, DataConfig, Dataset};
use samda_core::engine::config::{load_json, save_json, ExperimentConfig, TrainConfig, TtdaConfig, CONFIG_VERSION};
use samda_core::engine::experiment::{run_ablation, AblationAxis, EvalReport, Splits};
use samda_core::engine::report::{emit_report, format_table, RunFragment};
use samda_core::engine::train::{evaluate, load_model, meta_for, model_from_base, save_model, train_supervised};
use samda_core::engine::ttda::{prepare_for_ttda, run_ttda};
use samda_core::{Error, Result};

/// Reference learnable-parameter figure for the full-scale decoder adapter.
const REFERENCE_ADAPTER_PARAMS_M: f64 = 0.66;

#[derive(Parser)]
#[command(name = "samda", version, about = "Zero-gated decoder adapters for a toy promptable segmenter")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic source and target domains.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised training on the source train split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one domain split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report: PathBuf,
    },
    /// Per-sample test-time adaptation.
    Ttda {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Adapter size or placement ablation over all configured seeds.
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate the fragments of a run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Parameter accounting for a training configuration.
    Paramcount {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { config, out } => {
            let cfg: DataConfig = load_json(&config)?;
            let m = generate_dataset(&cfg, &out)?;
            for d in &m.domains {
                let counts: Vec<String> = d.splits.iter().map(|(k, v)| format!("{k}={}", v.count)).collect();
                println!("{} ({}): {}", d.config.name, d.role, counts.join(" "));
            }
            Ok(())
        }
        Cmd::Train { config, data, out } => train(&config, &data, &out),
        Cmd::Eval {
            checkpoint,
            data,
            domain,
            split,
            report,
        } => {
            let ds = Dataset::open(&data)?;
            let samples = ds.load(&domain, &split)?;
            let (model, meta) = load_model(&checkpoint)?;
            let result = evaluate(&model, &samples)?;
            println!("{domain}/{split}: IoU {:.4} ± {:.4} over {} images", result.mean, result.std, result.ious.len());
            save_json(
                &report,
                &EvalReport {
                    version: CONFIG_VERSION,
                    checkpoint,
                    method: meta.method,
                    domain,
                    split,
                    trainable_params: model.store.param_count(true),
                    total_params: model.store.param_count(false),
                    result,
                },
            )
        }
        Cmd::Ttda {
            checkpoint,
            data,
            config,
            report,
        } => {
            let cfg: TtdaConfig = load_json(&config)?;
            cfg.validate()?;
            let ds = Dataset::open(&data)?;
            let samples = ds.load(&cfg.domain, &cfg.split)?;
            let (mut model, _) = load_model(&checkpoint)?;
            prepare_for_ttda(&mut model, &cfg)?;
            let r = run_ttda(&mut model, &samples, &cfg)?;
            println!(
                "IoU before {:.4} ± {:.4}, after {:.4} ± {:.4}; entropy decreased on {:.1}% of {} samples",
                r.mean_iou_before,
                r.std_iou_before,
                r.mean_iou_after,
                r.std_iou_after,
                100.0 * r.entropy_decreased_fraction,
                r.samples.len()
            );
            save_json(&report, &serde_json::json!({ "version": CONFIG_VERSION, "config": cfg, "result": r }))
        }
        Cmd::Ablate { axis, config, out } => {
            let axis: AblationAxis = axis.parse()?;
            let cfg: ExperimentConfig = load_json(&config)?;
            let r = run_ablation(&cfg, axis, &out)?;
            print!("{}", format_table(&r));
            Ok(())
        }
        Cmd::Report { run, format } => {
            let r = emit_report(&run)?;
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&r)?),
                Format::Table => print!("{}", format_table(&r)),
            }
            Ok(())
        }
        Cmd::Paramcount { config } => {
            let cfg: TrainConfig = load_json(&config)?;
            cfg.model.validate()?;
            cfg.adapter.validate()?;
            paramcount(&cfg)
        }
    }
}

fn train(config: &Path, data: &Path, out: &Path) -> Result<()> {
    let cfg: TrainConfig = load_json(config)?;
    cfg.validate()?;
    if let Some(b) = &cfg.base_checkpoint {
        if !b.exists() {
            return Err(Error::Validation(format!("base checkpoint {} not found", b.display())));
        }
    }
    let ds = Dataset::open(data)?;
    let splits = Splits::load(&ds)?;
    let mut model = model_from_base(&cfg.model, cfg.base_checkpoint.as_deref(), cfg.method, &cfg.adapter, &cfg.lora)?;
    let outcome = train_supervised(&mut model, &splits.source_train, &splits.source_val, &cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    save_model(&model, &meta_for(&cfg), &out.join("model.sdck"))?;
    save_json(&out.join("config.json"), &cfg)?;
    let mut domains = std::collections::BTreeMap::new();
    domains.insert(splits.source_name.clone(), evaluate(&model, &splits.source_test)?);
    domains.insert(splits.target_name.clone(), evaluate(&model, &splits.target_test)?);
    RunFragment {
        version: CONFIG_VERSION,
        label: cfg.method.as_str().into(),
        method: cfg.method,
        seed: cfg.seed,
        trainable_params: model.store.param_count(true),
        total_params: model.store.param_count(false),
        train: Some(outcome),
        domains,
    }
    .save(out)?;
    print!("{}", format_table(&emit_report(out)?));
    Ok(())
}

fn paramcount(cfg: &TrainConfig) -> Result<()> {
    let counts = method_param_counts(&cfg.model, &cfg.adapter, &cfg.lora)?;
    println!("{:<12} {:>12} {:>12} {:>9}", "method", "trainable", "total", "frac %");
    for (m, t, n) in &counts {
        println!("{:<12} {:>12} {:>12} {:>9.3}", m.as_str(), t, n, 100.0 * *t as f64 / *n as f64);
    }
    let (d_t, layers) = cfg.adapter.target(&cfg.model)?;
    println!(
        "\nadapter on this model: {} closed form, {} registry ({} layers, D_t = {d_t})",
        adapter_param_count(&cfg.adapter, &cfg.model)?,
        registry_adapter_count(&cfg.adapter, d_t, layers)?,
        layers
    );

    let full = AdapterConfig::full_scale();
    let closed = adapter_layer_param_count(&full, 256) * 2;
    let registry = registry_adapter_count(&full, 256, 2)?;
    println!(
        "full-scale decoder adapter (N = {}, D_a = {}, D_k = D_v = {}, D_t = 256, 2 layers): \
         {closed} closed form, {registry} registry, reference figure {REFERENCE_ADAPTER_PARAMS_M:.2}M",
        full.n_prompts, full.d_a, full.d_k
    );
    println!(
        "note: the reference figure {REFERENCE_ADAPTER_PARAMS_M:.2}M does not match the {:.2}M that the stated \
         dimensions give; it is not stated which tensors it left out (W_t, biases or \
         shared projections would each explain part of the gap), so both numbers are reported.",
        closed as f64 / 1e6
    );
    Ok(())
}
