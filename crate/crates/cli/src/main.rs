//! Experiment runner for adapter-based fine-tuning of spectrogram
//! transformers.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aat_core::check::{gradcheck_model, identity_check, model_gradient_check};
use aat_core::data::generate_dataset;
use aat_core::peft::{count_params, specialize_config, ParamReport, PeftStrategy};
use aat_core::training::{evaluate, train, TrainSettings};
use aat_core::transformer::{Model, ModelConfig, Variant};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "aat", version, about = "Adapter fine-tuning experiments on synthetic spectrogram tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured (strategy, seed) pair and write reports
    Run {
        /// Experiment configuration (flat JSON)
        config: PathBuf,
    },
    /// Print the parameter budget of every configured strategy as CSV
    Count {
        /// Experiment configuration (flat JSON)
        config: Option<PathBuf>,
        /// Use a built-in model preset (tiny | ast-base) instead
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
    },
    /// Finite-difference check of the gradients of a small adapted model
    Gradcheck {
        /// Model dimensions L,d,h,r,P,T,F,C,dhat (at most 5000 parameters)
        #[arg(long, default_value = "2,8,2,2,2,8,8,3,2")]
        dims: String,
        #[arg(long, hide = true)]
        corrupt_backward: bool,
    },
    /// Compare vanilla and adapted logits from one backbone seed
    Identity {
        /// Experiment configuration (flat JSON)
        config: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn check(message: impl Into<String>) -> Self {
        Failure {
            code: 1,
            message: message.into(),
        }
    }
}

impl From<aat_core::Error> for Failure {
    fn from(e: aat_core::Error) -> Self {
        Failure::check(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => cmd_run(&config),
        Command::Count { config, preset } => cmd_count(config.as_deref(), preset.as_deref()),
        Command::Gradcheck {
            dims,
            corrupt_backward,
        } => cmd_gradcheck(&dims, corrupt_backward),
        Command::Identity { config } => cmd_identity(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

const PROMPT_FOOTER: &str = "# note: prompt budgets use exact token arithmetic \
(depth x tokens x width + head); on the ast-base preset this gives 0.151M rather \
than the often-quoted 0.128M";

// ── count ───────────────────────────────────────────────────────────────

fn reports_for(base: &ModelConfig, strategies: &[PeftStrategy]) -> Result<Vec<ParamReport>, Failure> {
    strategies
        .iter()
        .map(|&s| count_params(base, s).map_err(Failure::from))
        .collect()
}

fn cmd_count(config: Option<&Path>, preset: Option<&str>) -> Result<(), Failure> {
    let (base, strategies) = match (config, preset) {
        (Some(path), None) => {
            let config = ExperimentConfig::load(path).map_err(Failure::usage)?;
            let strategies = config.parsed_strategies().map_err(Failure::usage)?;
            (config.model_config(), strategies)
        }
        (None, Some(name)) => (
            config::preset(name).map_err(Failure::usage)?,
            PeftStrategy::all().to_vec(),
        ),
        _ => return Err(Failure::usage("pass a config file or --preset")),
    };
    println!("{}", ParamReport::csv_header());
    let reports = reports_for(&base, &strategies)?;
    for report in &reports {
        println!("{}", report.csv_row());
    }
    if strategies.iter().any(|s| s.uses_prompts()) {
        println!("{PROMPT_FOOTER}");
    }
    Ok(())
}

// ── run ─────────────────────────────────────────────────────────────────

struct RunOutcome {
    strategy: PeftStrategy,
    report: ParamReport,
    metrics: Vec<f64>,
    epoch_seconds: Vec<f64>,
}

impl RunOutcome {
    fn metric_mean(&self) -> f64 {
        self.metrics.iter().sum::<f64>() / self.metrics.len() as f64
    }

    /// Sample standard deviation over seeds; zero for a single seed.
    fn metric_sd(&self) -> f64 {
        let n = self.metrics.len();
        if n < 2 {
            return 0.0;
        }
        let mean = self.metric_mean();
        let var = self
            .metrics
            .iter()
            .map(|m| (m - mean) * (m - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        var.sqrt()
    }

    fn mean_epoch_seconds(&self) -> f64 {
        if self.epoch_seconds.is_empty() {
            return 0.0;
        }
        self.epoch_seconds.iter().sum::<f64>() / self.epoch_seconds.len() as f64
    }
}

fn output_dir(config: &ExperimentConfig) -> PathBuf {
    match std::env::var("AAT_OUTPUT_DIR") {
        Ok(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(&config.output_dir),
    }
}

fn cmd_run(path: &Path) -> Result<(), Failure> {
    let config = ExperimentConfig::load(path).map_err(Failure::usage)?;
    let strategies = config.parsed_strategies().map_err(Failure::usage)?;
    let out_dir = output_dir(&config);
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| Failure::check(format!("cannot create {}: {e}", out_dir.display())))?;

    let task = config.task_spec();
    let (train_set, test_set) =
        generate_dataset::<f64>(&task, config.n_train, config.n_test)?;
    let base = config.model_config();

    let mut outcomes = Vec::new();
    for &strategy in &strategies {
        let model_config = specialize_config(&base, strategy)?;
        let mut outcome = RunOutcome {
            strategy,
            report: count_params(&base, strategy)?,
            metrics: Vec::new(),
            epoch_seconds: Vec::new(),
        };
        for &seed in &config.seeds {
            let mut model = Model::<f64>::new(model_config.clone(), seed)?;
            let history = train(
                &mut model,
                strategy,
                &train_set,
                &test_set,
                &TrainSettings {
                    epochs: config.epochs,
                    lr: config.lr,
                    batch_size: config.batch_size,
                    seed,
                },
            )?;
            let metric = evaluate(&model, &test_set)?;
            outcome.metrics.push(metric);
            outcome
                .epoch_seconds
                .extend(history.records.iter().map(|r| r.seconds));
            let history_path = out_dir.join(format!("history_{strategy}_seed{seed}.csv"));
            std::fs::write(&history_path, history.to_csv())
                .map_err(|e| Failure::check(format!("cannot write history: {e}")))?;
            println!("{strategy} seed {seed}: metric {metric:.4}");
        }
        outcomes.push(outcome);
    }

    let has_prompts = strategies.iter().any(|s| s.uses_prompts());
    let summary_csv = summary_csv(&outcomes, has_prompts);
    std::fs::write(out_dir.join("summary.csv"), &summary_csv)
        .map_err(|e| Failure::check(format!("cannot write summary: {e}")))?;
    let table = summary_table(&outcomes, has_prompts);
    std::fs::write(out_dir.join("summary.txt"), &table)
        .map_err(|e| Failure::check(format!("cannot write summary: {e}")))?;
    std::fs::write(out_dir.join("tradeoff.csv"), tradeoff_csv(&outcomes))
        .map_err(|e| Failure::check(format!("cannot write tradeoff: {e}")))?;
    print!("{table}");
    Ok(())
}

fn summary_csv(outcomes: &[RunOutcome], footer: bool) -> String {
    let mut out = String::from(
        "strategy,tuning_params,total_params,percentage,metric_mean,metric_sd,mean_epoch_seconds\n",
    );
    for o in outcomes {
        out.push_str(&format!(
            "{},{},{},{:.4},{},{},{}\n",
            o.strategy,
            o.report.tuning,
            o.report.total,
            o.report.percentage(),
            o.metric_mean(),
            o.metric_sd(),
            o.mean_epoch_seconds(),
        ));
    }
    if footer {
        out.push_str(PROMPT_FOOTER);
        out.push('\n');
    }
    out
}

fn tradeoff_csv(outcomes: &[RunOutcome]) -> String {
    let mut out = String::from("strategy,tuning_params,metric_mean\n");
    for o in outcomes {
        out.push_str(&format!(
            "{},{},{}\n",
            o.strategy,
            o.report.tuning,
            o.metric_mean()
        ));
    }
    out
}

fn summary_table(outcomes: &[RunOutcome], footer: bool) -> String {
    let mut out = format!(
        "{:<10} {:>14} {:>10} {:>12} {:>10} {:>14}\n",
        "strategy", "tuning_params", "percent", "metric_mean", "metric_sd", "sec_per_epoch"
    );
    for o in outcomes {
        out.push_str(&format!(
            "{:<10} {:>14} {:>10.4} {:>12.4} {:>10.4} {:>14.2}\n",
            o.strategy.to_string(),
            o.report.tuning,
            o.report.percentage(),
            o.metric_mean(),
            o.metric_sd(),
            o.mean_epoch_seconds(),
        ));
    }
    if footer {
        out.push_str(PROMPT_FOOTER);
        out.push('\n');
    }
    out
}

// ── gradcheck ───────────────────────────────────────────────────────────

fn parse_dims(dims: &str) -> Result<ModelConfig, Failure> {
    let parts: Vec<usize> = dims
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::usage(format!("cannot parse --dims '{dims}'")))?;
    if parts.len() != 9 {
        return Err(Failure::usage(
            "--dims expects 9 integers: L,d,h,r,P,T,F,C,dhat",
        ));
    }
    Ok(ModelConfig {
        depth: parts[0],
        embed_dim: parts[1],
        heads: parts[2],
        mlp_ratio: parts[3],
        patch_size: parts[4],
        input_time: parts[5],
        input_freq: parts[6],
        num_classes: parts[7],
        adapter_dim: parts[8],
        prompt_len: 0,
        variant: Variant::Vanilla,
        layernorm_eps: 1e-6,
        tune_backbone_ln: false,
    })
}

fn cmd_gradcheck(dims: &str, corrupt_backward: bool) -> Result<(), Failure> {
    const PARAM_CAP: u64 = 5000;
    const TOLERANCE: f64 = 1e-4;
    let base = parse_dims(dims)?;
    base.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let budget = count_params(&base, PeftStrategy::AatMs).map_err(|e| Failure::usage(e.to_string()))?;
    if budget.total > PARAM_CAP {
        return Err(Failure::usage(format!(
            "model has {} parameters; finite differences are capped at {PARAM_CAP}",
            budget.total
        )));
    }
    let model = gradcheck_model(&base, 12)?;
    let spec = aat_core::rng::uniform_tensor(
        &mut aat_core::rng::stream(12, "gradcheck-input"),
        vec![base.input_time, base.input_freq],
        1.0,
    );
    let report = model_gradient_check(&model, &spec, 1, 1e-6, corrupt_backward)?;
    println!(
        "checked {} parameters, max relative error {:.3e} at {}",
        report.params_checked, report.worst_rel_err, report.worst_param
    );
    if report.worst_rel_err < TOLERANCE {
        Ok(())
    } else {
        Err(Failure::check(format!(
            "gradient check failed: {:.3e} >= {TOLERANCE:e} at {}",
            report.worst_rel_err, report.worst_param
        )))
    }
}

// ── identity ────────────────────────────────────────────────────────────

fn cmd_identity(path: &Path) -> Result<(), Failure> {
    const TOLERANCE: f64 = 1e-10;
    let config = ExperimentConfig::load(path).map_err(Failure::usage)?;
    let base = config.model_config();
    let seed = config.seeds[0];
    // prompt strategies are excluded here: prompt tokens change the
    // function at initialization by construction
    let diff = identity_check(&base, seed, 16)?;
    println!("max abs logit diff over 16 inputs: {diff:.3e}");
    if diff < TOLERANCE {
        Ok(())
    } else {
        Err(Failure::check(format!(
            "identity check failed: {diff:.3e} >= {TOLERANCE:e}"
        )))
    }
}
