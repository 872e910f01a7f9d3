//! Command-line entry points: dataset generation, training, evaluation,
//! decoding, and numeric verification.
//!
//! Every subcommand reads one TOML config (all fields optional, see
//! [`RunConfig`]) plus a few override flags, prints machine-readable
//! results on stdout, and maps failures to stable exit codes:
//! 0 success, 1 verification/acceptance failure, 2 usage or
//! configuration error, 3 IO error.

use crate::config::{Dtype, RunConfig};
use crate::data::{gen_dataset, Manifest};
use crate::error::{Error, Result};
use crate::model::init_model;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Element;
use crate::train::{decode_split, load_model_params, load_split, train, BEST_CHECKPOINT};
use crate::verify::verify;
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(
    name = "cslr",
    version,
    about = "Continuous sign language recognition at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Configuration file (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the config's RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Override the config's dataset directory.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Override the config's run directory.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset described by the config.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the recognizer; logs and checkpoints go to the run directory.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on one dataset split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to load; defaults to the run directory's best.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset split to score.
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Print one decoded hypothesis per sample of a split.
    Decode {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint to load; defaults to the run directory's best.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset split to decode.
        #[arg(long, default_value = "dev")]
        split: String,
    },
    /// Run the finite-difference verification suites.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Module to verify: tensor, backbone, tape, mstcn, tlp, bilstm,
        /// ctc, objective, or all.
        #[arg(long, default_value = "all")]
        module: String,
    },
}

impl CommonArgs {
    /// Effective config: file (or defaults) with the flag overrides
    /// applied, validated. The echoed copy a run writes contains these
    /// effective values.
    fn effective(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.data_dir {
            cfg.data_dir = dir.clone();
        }
        if let Some(dir) = &self.run_dir {
            cfg.run_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `args` and runs the selected command, returning the process
/// exit code. Results go to stdout, errors to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(output) => {
            if !output.is_empty() {
                println!("{output}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Runs one parsed command and returns what it prints on success.
pub fn execute(cli: Cli) -> Result<String> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = common.effective()?;
            gen_dataset(&cfg.data, &cfg.data_dir)?;
            Ok(cfg.data_dir.join("manifest").display().to_string())
        }
        Command::Train { common, resume } => {
            let cfg = common.effective()?;
            let outcome = match cfg.dtype {
                Dtype::F32 => train::<f32>(&cfg, resume)?,
                Dtype::F64 => train::<f64>(&cfg, resume)?,
            };
            Ok(serde_json::json!({
                "epochs": outcome.epochs_run,
                "best_epoch": outcome.best_epoch,
                "best_dev_wer": outcome.best_dev_wer,
                "run_dir": outcome.run_dir.display().to_string(),
            })
            .to_string())
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let cfg = common.effective()?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.run_dir.join(BEST_CHECKPOINT));
            match cfg.dtype {
                Dtype::F32 => eval_cmd::<f32>(&cfg, &ckpt, &split),
                Dtype::F64 => eval_cmd::<f64>(&cfg, &ckpt, &split),
            }
        }
        Command::Decode {
            common,
            checkpoint,
            split,
        } => {
            let cfg = common.effective()?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.run_dir.join(BEST_CHECKPOINT));
            let pairs = match cfg.dtype {
                Dtype::F32 => decode_cmd::<f32>(&cfg, &ckpt, &split)?,
                Dtype::F64 => decode_cmd::<f64>(&cfg, &ckpt, &split)?,
            };
            Ok(render_decodes(&pairs))
        }
        Command::Gradcheck { common, module } => {
            // The config participates only through validation: the
            // suites build their own toy weights.
            common.effective()?;
            let reports = verify(&module)?;
            let lines: Vec<String> = reports
                .iter()
                .map(|r| {
                    serde_json::to_string(r)
                        .map_err(|e| Error::Contract(format!("report serialization failed: {e}")))
                })
                .collect::<Result<_>>()?;
            Ok(lines.join("\n"))
        }
    }
}

/// One decode line per sample: the id, a tab, and the hypothesis
/// glosses separated by single spaces.
fn render_decodes(pairs: &[(String, Vec<usize>)]) -> String {
    pairs
        .iter()
        .map(|(id, hyp)| {
            let glosses: Vec<String> = hyp.iter().map(|g| g.to_string()).collect();
            format!("{id}\t{}", glosses.join(" "))
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Loads the checkpoint into a fresh model, checking the vocabulary
/// against the dataset before touching any tensor.
fn restore_model<E: Element>(
    cfg: &RunConfig,
    ckpt: &Path,
    manifest: &Manifest,
) -> Result<ParamStore<E>> {
    let mut store = ParamStore::<E>::new();
    init_model(&mut store, &Rng::new(cfg.seed).derive("init"), &cfg.model())?;
    let extra = load_model_params(ckpt, &mut store)?;
    if let Some(v) = extra.get("vocab_size").and_then(|v| v.as_u64()) {
        if v as usize != manifest.spec.vocab_size {
            return Err(Error::Config(format!(
                "checkpoint was trained with vocabulary {v} but the dataset has {}",
                manifest.spec.vocab_size
            )));
        }
    }
    Ok(store)
}

fn check_dataset(cfg: &RunConfig) -> Result<Manifest> {
    let manifest = Manifest::load(&cfg.data_dir)?;
    if manifest.spec.vocab_size != cfg.data.vocab_size {
        return Err(Error::Config(format!(
            "dataset on disk has vocabulary {} but the config says {}",
            manifest.spec.vocab_size, cfg.data.vocab_size
        )));
    }
    Ok(manifest)
}

fn eval_cmd<E: Element>(cfg: &RunConfig, ckpt: &Path, split: &str) -> Result<String> {
    let manifest = check_dataset(cfg)?;
    let store = restore_model::<E>(cfg, ckpt, &manifest)?;
    let samples = load_split(&manifest, &cfg.data_dir, split)?;
    let (report, pairs) = decode_split(&store, &cfg.model(), &samples)?;

    // A run directory keeps the decode outputs next to its logs so
    // every reported number can be re-derived from files.
    std::fs::create_dir_all(&cfg.run_dir)
        .map_err(|e| Error::io(cfg.run_dir.display().to_string(), e))?;
    let decode_path = cfg.run_dir.join(format!("decode-{split}.txt"));
    let mut body = render_decodes(&pairs);
    body.push('\n');
    std::fs::write(&decode_path, body)
        .map_err(|e| Error::io(decode_path.display().to_string(), e))?;

    let mut value = serde_json::to_value(&report)
        .map_err(|e| Error::Contract(format!("report serialization failed: {e}")))?;
    value["n_samples"] = serde_json::json!(samples.len());
    Ok(value.to_string())
}

fn decode_cmd<E: Element>(
    cfg: &RunConfig,
    ckpt: &Path,
    split: &str,
) -> Result<Vec<(String, Vec<usize>)>> {
    let manifest = check_dataset(cfg)?;
    let store = restore_model::<E>(cfg, ckpt, &manifest)?;
    let samples = load_split(&manifest, &cfg.data_dir, split)?;
    let (_, pairs) = decode_split(&store, &cfg.model(), &samples)?;
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::data::SyntheticSpec;
    use crate::temporal::{BilstmConfig, MstcnConfig};

    fn tiny_config(root: &Path) -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.epochs = 1;
        cfg.batch_size = 2;
        cfg.data_dir = root.join("data");
        cfg.run_dir = root.join("run");
        cfg.data = SyntheticSpec {
            vocab_size: 4,
            frame_size: 16,
            train_count: 3,
            dev_count: 2,
            test_count: 2,
            t_max: 48,
            ..SyntheticSpec::default()
        };
        cfg.backbone = BackboneConfig {
            image_size: 16,
            patch_size: 2,
            stage_depths: vec![1, 1],
            stage_dims: vec![8, 16],
            stage_heads: vec![2, 2],
            window_size: 4,
            t_max: 48,
            ..BackboneConfig::default()
        };
        cfg.mstcn = MstcnConfig {
            in_dim: 16,
            ms_dim: 12,
            ..MstcnConfig::default()
        };
        cfg.bilstm = BilstmConfig {
            hidden: 6,
            layers: 1,
        };
        cfg
    }

    fn write_config(root: &Path) -> PathBuf {
        let cfg = tiny_config(root);
        cfg.save(&root.join("cfg")).unwrap()
    }

    fn run_ok(args: &[&str]) -> String {
        let cli = Cli::try_parse_from(args).unwrap();
        execute(cli).unwrap()
    }

    fn run_err(args: &[&str]) -> Error {
        let cli = Cli::try_parse_from(args).unwrap();
        execute(cli).unwrap_err()
    }

    #[test]
    fn gen_data_prints_manifest_path_and_is_rerunnable_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = write_config(dir.path());
        let args = ["cslr", "gen-data", "--config", cfg_path.to_str().unwrap()];
        let out = run_ok(&args);
        assert!(out.ends_with("manifest"), "{out}");
        let manifest_path = PathBuf::from(&out);
        assert!(manifest_path.exists());
        let first = std::fs::read(&manifest_path).unwrap();
        let sample = dir.path().join("data/train/train-0000.f32raw");
        let first_sample = std::fs::read(&sample).unwrap();

        run_ok(&args);
        assert_eq!(std::fs::read(&manifest_path).unwrap(), first);
        assert_eq!(std::fs::read(&sample).unwrap(), first_sample);
    }

    #[test]
    fn train_then_eval_reproduces_the_logged_best_dev_wer() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = write_config(dir.path());
        let c = cfg_path.to_str().unwrap();
        run_ok(&["cslr", "gen-data", "--config", c]);
        let out = run_ok(&["cslr", "train", "--config", c]);
        let summary: serde_json::Value = serde_json::from_str(&out).unwrap();
        let logged = summary["best_dev_wer"].as_f64().unwrap();

        let eval = run_ok(&["cslr", "eval", "--config", c, "--split", "dev"]);
        let scored: serde_json::Value = serde_json::from_str(&eval).unwrap();
        assert_eq!(scored["wer"].as_f64().unwrap(), logged);
        assert_eq!(scored["n_samples"], 2);
        for key in ["sub", "del", "ins", "ref_len"] {
            assert!(scored[key].is_u64(), "missing {key}");
        }
        // The decode file sits in the run directory, one line per sample.
        let decode = dir.path().join("run/decode-dev.txt");
        let text = std::fs::read_to_string(decode).unwrap();
        assert_eq!(text.trim_end().lines().count(), 2);
        assert!(text.starts_with("dev-0000\t"));
    }

    #[test]
    fn decode_prints_one_line_per_sample_with_in_vocabulary_glosses() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = write_config(dir.path());
        let c = cfg_path.to_str().unwrap();
        run_ok(&["cslr", "gen-data", "--config", c]);
        run_ok(&["cslr", "train", "--config", c]);
        let out = run_ok(&["cslr", "decode", "--config", c, "--split", "test"]);
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 2);
        for line in lines {
            let (id, hyp) = line.split_once('\t').unwrap();
            assert!(id.starts_with("test-"));
            for tok in hyp.split_whitespace() {
                assert!(tok.parse::<usize>().unwrap() < 4);
            }
        }
    }

    #[test]
    fn eval_on_an_empty_split_is_a_contract_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.data.test_count = 0;
        let cfg_path = cfg.save(&dir.path().join("cfg")).unwrap();
        let c = cfg_path.to_str().unwrap();
        run_ok(&["cslr", "gen-data", "--config", c]);
        run_ok(&["cslr", "train", "--config", c]);
        let err = run_err(&["cslr", "eval", "--config", c, "--split", "test"]);
        assert!(matches!(err, Error::Contract(_)), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn eval_rejects_a_checkpoint_with_a_different_vocabulary() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = write_config(dir.path());
        let c = cfg_path.to_str().unwrap();
        run_ok(&["cslr", "gen-data", "--config", c]);
        run_ok(&["cslr", "train", "--config", c]);

        // Same architecture, larger vocabulary: regenerate the dataset
        // elsewhere and point the old checkpoint at it.
        let mut cfg5 = tiny_config(dir.path());
        cfg5.data.vocab_size = 5;
        cfg5.data_dir = dir.path().join("data5");
        cfg5.run_dir = dir.path().join("run5");
        let cfg5_path = cfg5.save(&dir.path().join("cfg5")).unwrap();
        let c5 = cfg5_path.to_str().unwrap();
        run_ok(&["cslr", "gen-data", "--config", c5]);
        let old_ckpt = dir.path().join("run").join(BEST_CHECKPOINT);
        let err = run_err(&[
            "cslr",
            "eval",
            "--config",
            c5,
            "--checkpoint",
            old_ckpt.to_str().unwrap(),
        ]);
        assert_eq!(err.exit_code(), 2, "{err}");
    }

    #[test]
    fn gradcheck_prints_a_report_and_rejects_unknown_selectors() {
        let out = run_ok(&["cslr", "gradcheck", "--module", "ctc"]);
        let report: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(report["module"], "ctc");
        assert!(report["max_rel_err"].as_f64().unwrap() < 1e-6);

        let err = run_err(&["cslr", "gradcheck", "--module", "swim"]);
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn seed_flag_overrides_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = write_config(dir.path());
        let c = cfg_path.to_str().unwrap();
        run_ok(&["cslr", "gen-data", "--config", c]);
        run_ok(&["cslr", "train", "--config", c, "--seed", "123"]);
        // The echoed config carries the effective seed.
        let echoed = RunConfig::load(&dir.path().join("run/config.toml")).unwrap();
        assert_eq!(echoed.seed, 123);
    }

    #[test]
    fn unknown_subcommands_and_flags_are_usage_errors() {
        assert!(Cli::try_parse_from(["cslr", "frobnicate"]).is_err());
        assert!(Cli::try_parse_from(["cslr", "train", "--bogus"]).is_err());
        let code = run(["cslr", "frobnicate"]);
        assert_eq!(code, 2);
        let help = run(["cslr", "--help"]);
        assert_eq!(help, 0);
    }
}
