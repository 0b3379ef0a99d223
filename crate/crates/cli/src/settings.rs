//! Effective run settings assembled from defaults, a config file and flags.

use std::fmt::Write as _;
use std::path::Path;

use tfmt_core::{Ablations, SynthConfig, TrainConfig};

use crate::config::{merge, parse_list, ConfigFile};
use crate::error::{CliError, CliResult};
use crate::{HyperArgs, SeedArgs};

fn load(path: Option<&Path>) -> CliResult<ConfigFile> {
    match path {
        Some(p) => ConfigFile::load(p),
        None => Ok(ConfigFile::default()),
    }
}

pub fn synth_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<SynthConfig> {
    let mut file = load(path)?;
    let mut c = SynthConfig::default();
    merge(&mut file, "seed", seed, &mut c.seed)?;
    merge(&mut file, "num_source", None, &mut c.num_source)?;
    merge(&mut file, "num_dev", None, &mut c.num_dev)?;
    merge(&mut file, "num_target", None, &mut c.num_target)?;
    merge(&mut file, "num_test", None, &mut c.num_test)?;
    merge(&mut file, "source_domain", None, &mut c.source_domain)?;
    merge(&mut file, "target_domain", None, &mut c.target_domain)?;
    merge(&mut file, "num_heads", None, &mut c.num_heads)?;
    merge(&mut file, "num_modifiers", None, &mut c.num_modifiers)?;
    merge(&mut file, "opinions_per_polarity", None, &mut c.opinions_per_polarity)?;
    merge(&mut file, "max_len", None, &mut c.max_len)?;
    merge(&mut file, "two_triplet_rate", None, &mut c.two_triplet_rate)?;
    merge(&mut file, "modifier_rate", None, &mut c.modifier_rate)?;
    merge(&mut file, "cue_rate", None, &mut c.cue_rate)?;
    file.finish()?;
    c.validate()?;
    Ok(c)
}

pub fn synth_config_text(c: &SynthConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "seed = {}", c.seed);
    let _ = writeln!(s, "num_source = {}", c.num_source);
    let _ = writeln!(s, "num_dev = {}", c.num_dev);
    let _ = writeln!(s, "num_target = {}", c.num_target);
    let _ = writeln!(s, "num_test = {}", c.num_test);
    let _ = writeln!(s, "source_domain = {}", c.source_domain.name());
    let _ = writeln!(s, "target_domain = {}", c.target_domain.name());
    let _ = writeln!(s, "num_heads = {}", c.num_heads);
    let _ = writeln!(s, "num_modifiers = {}", c.num_modifiers);
    let _ = writeln!(s, "opinions_per_polarity = {}", c.opinions_per_polarity);
    let _ = writeln!(s, "max_len = {}", c.max_len);
    let _ = writeln!(s, "two_triplet_rate = {}", c.two_triplet_rate);
    let _ = writeln!(s, "modifier_rate = {}", c.modifier_rate);
    let _ = writeln!(s, "cue_rate = {}", c.cue_rate);
    s
}

/// Training settings shared by `train` and `ablate`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSettings {
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

pub fn run_settings(
    path: Option<&Path>,
    hyper: &HyperArgs,
    seeds: &SeedArgs,
    ablate: Option<&str>,
) -> CliResult<(RunSettings, ConfigFile)> {
    let mut file = load(path)?;
    let mut c = TrainConfig::default();
    let h = hyper.clone();
    merge(&mut file, "variant", h.variant, &mut c.variant)?;
    merge(&mut file, "mode", h.mode, &mut c.mode)?;
    merge(&mut file, "alpha", h.alpha, &mut c.alpha)?;
    merge(&mut file, "beta", h.beta, &mut c.beta)?;
    merge(&mut file, "lambda", h.lambda, &mut c.lambda)?;
    merge(&mut file, "ema", h.ema, &mut c.ema)?;
    merge(&mut file, "eta", h.eta, &mut c.eta)?;
    merge(&mut file, "kappa", h.kappa, &mut c.kappa)?;
    merge(&mut file, "aug_rate", h.aug_rate, &mut c.aug_rate)?;
    merge(&mut file, "epochs", h.epochs, &mut c.epochs)?;
    merge(&mut file, "batch", h.batch, &mut c.batch)?;
    merge(&mut file, "lr", h.lr, &mut c.lr)?;
    let flag_ablate = ablate
        .map(str::parse::<Ablations>)
        .transpose()
        .map_err(|e| CliError::usage(e.to_string()))?;
    merge(&mut file, "ablate", flag_ablate, &mut c.ablations)?;
    merge(&mut file, "d", None, &mut c.encoder.d)?;
    merge(&mut file, "layers", None, &mut c.encoder.layers)?;
    merge(&mut file, "vocab_buckets", None, &mut c.encoder.vocab_buckets)?;
    merge(&mut file, "window", None, &mut c.encoder.window)?;
    merge(&mut file, "max_n", None, &mut c.encoder.max_n)?;
    merge(&mut file, "mmd_fallback_bandwidth", None, &mut c.mmd.fallback_bandwidth)?;
    if let Some(bw) = file.take::<f64>("mmd_bandwidth")? {
        c.mmd.fixed_bandwidth = Some(bw);
    }

    let from_file: Option<String> = file.take("seeds")?;
    let file_seed: Option<u64> = file.take("seed")?;
    let list = match (seeds.seed, &seeds.seeds) {
        (Some(s), _) => vec![s],
        (None, Some(list)) => parse_list(list).map_err(CliError::usage)?,
        (None, None) => match (from_file, file_seed) {
            (Some(list), _) => parse_list(&list).map_err(CliError::usage)?,
            (None, Some(s)) => vec![s],
            (None, None) => vec![c.seed],
        },
    };
    if list.is_empty() {
        return Err(CliError::usage("empty seed list"));
    }
    let mut dedup = list.clone();
    dedup.sort_unstable();
    dedup.dedup();
    if dedup.len() != list.len() {
        return Err(CliError::usage("duplicate seeds"));
    }
    c.seed = list[0];
    c.validate()?;
    Ok((RunSettings { train: c, seeds: list }, file))
}

/// Flat config text that reproduces `c` when passed back via `--config`.
pub fn train_config_text(c: &TrainConfig, seeds: &[u64]) -> String {
    let mut s = String::new();
    let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(s, "seeds = {}", list.join(","));
    let _ = writeln!(s, "variant = {}", c.variant.name());
    let _ = writeln!(s, "mode = {}", c.mode.name());
    let _ = writeln!(s, "ablate = {}", c.ablations.label());
    let _ = writeln!(s, "alpha = {}", c.alpha);
    let _ = writeln!(s, "beta = {}", c.beta);
    let _ = writeln!(s, "lambda = {}", c.lambda);
    let _ = writeln!(s, "ema = {}", c.ema);
    let _ = writeln!(s, "eta = {}", c.eta);
    let _ = writeln!(s, "kappa = {}", c.kappa);
    let _ = writeln!(s, "aug_rate = {}", c.aug_rate);
    let _ = writeln!(s, "epochs = {}", c.epochs);
    let _ = writeln!(s, "batch = {}", c.batch);
    let _ = writeln!(s, "lr = {}", c.lr);
    let _ = writeln!(s, "d = {}", c.encoder.d);
    let _ = writeln!(s, "layers = {}", c.encoder.layers);
    let _ = writeln!(s, "vocab_buckets = {}", c.encoder.vocab_buckets);
    let _ = writeln!(s, "window = {}", c.encoder.window);
    let _ = writeln!(s, "max_n = {}", c.encoder.max_n);
    let _ = writeln!(s, "mmd_fallback_bandwidth = {}", c.mmd.fallback_bandwidth);
    if let Some(bw) = c.mmd.fixed_bandwidth {
        let _ = writeln!(s, "mmd_bandwidth = {bw}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        let mut c = TrainConfig::default();
        c.beta = 0.25;
        c.ema = tfmt_core::EmaCadence::Epoch;
        c.ablations = "no_aug+no_mmd".parse().unwrap();
        c.encoder.d = 8;
        c.seed = 3;
        std::fs::write(&path, train_config_text(&c, &[3, 4])).unwrap();
        let (got, file) = run_settings(Some(&path), &HyperArgs::default(), &SeedArgs::default(), None).unwrap();
        file.finish().unwrap();
        assert_eq!(got.train, c);
        assert_eq!(got.seeds, vec![3, 4]);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "alpha = 0.5\nseeds = 1,2\n").unwrap();
        let hyper = HyperArgs {
            alpha: Some(2.0),
            ..HyperArgs::default()
        };
        let seeds = SeedArgs {
            seed: Some(9),
            seeds: None,
        };
        let (got, _) = run_settings(Some(&path), &hyper, &seeds, Some("no_uns")).unwrap();
        assert_eq!(got.train.alpha, 2.0);
        assert_eq!(got.seeds, vec![9]);
        assert!(got.train.ablations.no_uns);
    }

    #[test]
    fn invalid_values_are_usage_errors() {
        let hyper = HyperArgs {
            lambda: Some(1.5),
            ..HyperArgs::default()
        };
        let err = run_settings(None, &hyper, &SeedArgs::default(), None).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let seeds = SeedArgs {
            seed: None,
            seeds: Some("1,1".into()),
        };
        assert_eq!(run_settings(None, &HyperArgs::default(), &seeds, None).unwrap_err().exit_code(), 1);
    }
}
