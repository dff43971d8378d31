//! Plain-text `key = value` run configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::numeric::OptimizerKind;
use crate::rec_id::TokenVariant;
use crate::recommender::PosEncoding;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("{0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub seed: u64,
    /// Representation width `D`.
    pub dim: usize,
    /// Quantizer latent width.
    pub latent_dim: usize,
    /// Rec-ID length `M`: `M - 1` semantic tokens plus the popularity token.
    pub id_len: usize,
    /// Entries per codebook `L`.
    pub codebook_size: usize,
    pub beta: f64,
    pub lr: f64,
    pub l2: f64,
    pub batch_size: usize,
    /// Encoder input length `N`.
    pub max_len: usize,
    /// Encoder and decoder depth.
    pub layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub gcn_layers: usize,
    pub k: usize,
    pub patience: usize,
    pub epochs: usize,
    pub pos_encoding: PosEncoding,
    pub token_variant: TokenVariant,
    pub optimizer: OptimizerKind,
    /// Popularity-token capacity per semantic group.
    pub max_group: usize,
    pub reseed_dead_codes: bool,
    pub mf_lr: f64,
    pub synth_users: usize,
    pub synth_items: usize,
    pub synth_density: f64,
    pub synth_rank: usize,
    pub synth_noise: f64,
    pub bench_items: usize,
    pub bench_users: usize,
    pub bench_repetitions: usize,
    pub threads: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            dim: 64,
            latent_dim: 32,
            id_len: 4,
            codebook_size: 128,
            beta: 0.25,
            lr: 0.001,
            l2: 1e-5,
            batch_size: 1000,
            max_len: 20,
            layers: 2,
            heads: 4,
            ff_mult: 4,
            gcn_layers: 2,
            k: 10,
            patience: 20,
            epochs: 200,
            pos_encoding: PosEncoding::Relation,
            token_variant: TokenVariant::Popularity,
            optimizer: OptimizerKind::Sgd,
            max_group: 64,
            reseed_dead_codes: true,
            mf_lr: 0.05,
            synth_users: 200,
            synth_items: 400,
            synth_density: 0.05,
            synth_rank: 8,
            synth_noise: 0.3,
            bench_items: 1 << 18,
            bench_users: 16,
            bench_repetitions: 5,
            threads: 1,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "dim",
    "latent_dim",
    "id_len",
    "codebook_size",
    "beta",
    "lr",
    "l2",
    "batch_size",
    "max_len",
    "layers",
    "heads",
    "ff_mult",
    "gcn_layers",
    "k",
    "patience",
    "epochs",
    "pos_encoding",
    "token_variant",
    "optimizer",
    "max_group",
    "reseed_dead_codes",
    "mf_lr",
    "synth_users",
    "synth_items",
    "synth_density",
    "synth_rank",
    "synth_noise",
    "bench_items",
    "bench_users",
    "bench_repetitions",
    "threads",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

impl Config {
    pub fn get(&self, key: &str) -> Result<String, ConfigError> {
        Ok(match key {
            "seed" => self.seed.to_string(),
            "dim" => self.dim.to_string(),
            "latent_dim" => self.latent_dim.to_string(),
            "id_len" => self.id_len.to_string(),
            "codebook_size" => self.codebook_size.to_string(),
            "beta" => self.beta.to_string(),
            "lr" => self.lr.to_string(),
            "l2" => self.l2.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_len" => self.max_len.to_string(),
            "layers" => self.layers.to_string(),
            "heads" => self.heads.to_string(),
            "ff_mult" => self.ff_mult.to_string(),
            "gcn_layers" => self.gcn_layers.to_string(),
            "k" => self.k.to_string(),
            "patience" => self.patience.to_string(),
            "epochs" => self.epochs.to_string(),
            "pos_encoding" => self.pos_encoding.to_string(),
            "token_variant" => self.token_variant.to_string(),
            "optimizer" => self.optimizer.to_string(),
            "max_group" => self.max_group.to_string(),
            "reseed_dead_codes" => self.reseed_dead_codes.to_string(),
            "mf_lr" => self.mf_lr.to_string(),
            "synth_users" => self.synth_users.to_string(),
            "synth_items" => self.synth_items.to_string(),
            "synth_density" => self.synth_density.to_string(),
            "synth_rank" => self.synth_rank.to_string(),
            "synth_noise" => self.synth_noise.to_string(),
            "bench_items" => self.bench_items.to_string(),
            "bench_users" => self.bench_users.to_string(),
            "bench_repetitions" => self.bench_repetitions.to_string(),
            "threads" => self.threads.to_string(),
            _ => return Err(ConfigError::UnknownKey(key.into())),
        })
    }

    /// Sets one key from its text form without range checks.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "id_len" => self.id_len = parse(key, v)?,
            "codebook_size" => self.codebook_size = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "l2" => self.l2 = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_len" => self.max_len = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "ff_mult" => self.ff_mult = parse(key, v)?,
            "gcn_layers" => self.gcn_layers = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "pos_encoding" => self.pos_encoding = parse(key, v)?,
            "token_variant" => self.token_variant = parse(key, v)?,
            "optimizer" => self.optimizer = parse(key, v)?,
            "max_group" => self.max_group = parse(key, v)?,
            "reseed_dead_codes" => self.reseed_dead_codes = parse(key, v)?,
            "mf_lr" => self.mf_lr = parse(key, v)?,
            "synth_users" => self.synth_users = parse(key, v)?,
            "synth_items" => self.synth_items = parse(key, v)?,
            "synth_density" => self.synth_density = parse(key, v)?,
            "synth_rank" => self.synth_rank = parse(key, v)?,
            "synth_noise" => self.synth_noise = parse(key, v)?,
            "bench_items" => self.bench_items = parse(key, v)?,
            "bench_users" => self.bench_users = parse(key, v)?,
            "bench_repetitions" => self.bench_repetitions = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<(), ConfigError> {
        for o in overrides {
            let (k, v) = o.as_ref().split_once('=').ok_or(ConfigError::Syntax { line: 0 })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Parses a config file body over the defaults. Blank lines and `#`
    /// comments are ignored; unknown keys are an error.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: n + 1 })?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Every key in a fixed order, one `key = value` per line.
    pub fn serialize(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("listed key")))
            .collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: &str| {
            Err(ConfigError::Value {
                key: key.into(),
                value: self.get(key).unwrap_or_default(),
                reason: reason.into(),
            })
        };
        let positive = [
            ("dim", self.dim),
            ("latent_dim", self.latent_dim),
            ("batch_size", self.batch_size),
            ("max_len", self.max_len),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ff_mult", self.ff_mult),
            ("gcn_layers", self.gcn_layers),
            ("k", self.k),
            ("max_group", self.max_group),
            ("synth_users", self.synth_users),
            ("synth_items", self.synth_items),
            ("synth_rank", self.synth_rank),
            ("bench_items", self.bench_items),
            ("threads", self.threads),
        ];
        for (key, v) in positive {
            if v == 0 {
                return bad(key, "must be positive");
            }
        }
        if self.id_len < 2 {
            return bad("id_len", "needs at least one semantic token");
        }
        if !(2..=4096).contains(&self.codebook_size) {
            return bad("codebook_size", "must be in 2..=4096");
        }
        if self.dim % self.heads != 0 {
            return bad("heads", "must divide dim");
        }
        for (key, v) in [("lr", self.lr), ("mf_lr", self.mf_lr)] {
            if !(v.is_finite() && v > 0.0) {
                return bad(key, "must be a positive number");
            }
        }
        for (key, v) in [("l2", self.l2), ("beta", self.beta), ("synth_noise", self.synth_noise)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(key, "must be a non-negative number");
            }
        }
        if !(self.synth_density > 0.0 && self.synth_density <= 1.0) {
            return bad("synth_density", "must be in (0, 1]");
        }
        Ok(())
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.serialize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = Config::default();
        c.validate().unwrap();
        assert_eq!(Config::parse(&c.serialize()).unwrap(), c);
        assert_eq!(c.serialize().lines().count(), KEYS.len());
    }

    #[test]
    fn comments_blanks_and_overrides() {
        let mut c = Config::parse("# run\n\nlr = 0.01  # tuned\nheads=2\n").unwrap();
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.heads, 2);
        c.apply_overrides(&["pos_encoding=none", "token_variant = random"]).unwrap();
        assert_eq!(c.pos_encoding, PosEncoding::None);
        assert_eq!(c.token_variant, TokenVariant::Random);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert_eq!(Config::parse("colour = 3"), Err(ConfigError::UnknownKey("colour".into())));
        assert!(matches!(Config::parse("lr"), Err(ConfigError::Syntax { line: 1 })));
        assert!(matches!(Config::parse("dim = -4"), Err(ConfigError::Value { .. })));
        assert!(matches!(Config::parse("heads = 3"), Err(ConfigError::Value { .. })));
        assert!(matches!(Config::parse("id_len = 1"), Err(ConfigError::Value { .. })));
        assert!(matches!(Config::parse("pos_encoding = learned"), Err(ConfigError::Value { .. })));
    }

    proptest! {
        #[test]
        fn random_configs_round_trip(
            seed in any::<u64>(),
            lr in 1e-6f64..1.0,
            l2 in 0.0f64..1.0,
            heads in prop::sample::select(vec![1usize, 2, 4, 8]),
            pos in 0usize..3,
            variant in any::<bool>(),
            density in 0.001f64..1.0,
        ) {
            let mut c = Config { seed, lr, l2, heads, synth_density: density, ..Config::default() };
            c.pos_encoding = [PosEncoding::Relation, PosEncoding::Sinusoid, PosEncoding::None][pos];
            c.token_variant = if variant { TokenVariant::Random } else { TokenVariant::Popularity };
            let once = Config::parse(&c.serialize()).unwrap();
            prop_assert_eq!(&once, &c);
            prop_assert_eq!(Config::parse(&once.serialize()).unwrap(), once);
        }
    }
}
