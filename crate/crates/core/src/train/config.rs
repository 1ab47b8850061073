//! Flat `key = value` run configuration.
//!
//! ```text
//! seed = 7
//! d_lstm = 300
//! dataset.ncbi.train = ncbi/train.tsv
//! dataset.ncbi.type = disease
//! dataset.ncbi.dev_size = 500
//! ```
//!
//! `#` starts a comment. Unknown keys are errors. Datasets keep the order in
//! which their first key appears.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::optim::LrSchedule;
use crate::corpus::{
    bio_to_bioes, bioes_to_spans, parse_conll, split_dev, BioMode, Corpus, DatasetBundle, EntityType, LabeledSentence,
    ParseOptions, DEFAULT_MAX_SENTENCE_LEN,
};
use crate::embedding::EmbeddingDims;
use crate::{Error, Result};

/// Which collaborator encoder states are shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalKind {
    /// `[h_f, h_b]`, width 2·d_lstm.
    Bidirectional,
    /// `h_f` only, width d_lstm.
    Forward,
}

impl FromStr for SignalKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bidirectional" => Ok(Self::Bidirectional),
            "forward" => Ok(Self::Forward),
            _ => Err(Error::Config(format!("signal must be bidirectional or forward, got {s:?}"))),
        }
    }
}

impl SignalKind {
    fn as_str(self) -> &'static str {
        match self {
            Self::Bidirectional => "bidirectional",
            Self::Forward => "forward",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TagScheme {
    Bio,
    Bioes,
}

impl FromStr for TagScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bio" | "iob" => Ok(Self::Bio),
            "bioes" | "iobes" => Ok(Self::Bioes),
            _ => Err(Error::Config(format!("scheme must be bio or bioes, got {s:?}"))),
        }
    }
}

impl TagScheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Bio => "bio",
            Self::Bioes => "bioes",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub name: String,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub entity_type: EntityType,
    /// Sentences moved from the end of train to dev when no dev file is given.
    pub dev_size: Option<usize>,
    pub scheme: TagScheme,
}

impl DatasetSpec {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            train: None,
            dev: None,
            test: None,
            entity_type: EntityType::Other,
            dev_size: None,
            scheme: TagScheme::Bioes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub dropout_clwe: f64,
    pub dropout_bilstm: f64,
    pub d_word: usize,
    pub d_char: usize,
    pub d_clwe: usize,
    pub d_lstm: usize,
    pub char_windows: Vec<usize>,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub adagrad_epsilon: f64,
    /// Epoch cap of the preparation phase.
    pub max_epochs: usize,
    pub prep_patience: usize,
    pub max_phases: usize,
    pub phase_patience: usize,
    pub freeze_embeddings: bool,
    pub constrained_viterbi: bool,
    pub signal: SignalKind,
    pub token_loss_in_phases: bool,
    pub max_sentence_len: usize,
    pub embeddings: Option<PathBuf>,
    pub datasets: Vec<DatasetSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 10,
            dropout_clwe: 0.5,
            dropout_bilstm: 0.3,
            d_word: 200,
            d_char: 30,
            d_clwe: 600,
            d_lstm: 300,
            char_windows: vec![3, 5, 7],
            learning_rate: 0.01,
            lr_decay: 0.95,
            adagrad_epsilon: 1e-8,
            max_epochs: 100,
            prep_patience: 10,
            max_phases: 10,
            phase_patience: 3,
            freeze_embeddings: false,
            constrained_viterbi: false,
            signal: SignalKind::Bidirectional,
            token_loss_in_phases: true,
            max_sentence_len: DEFAULT_MAX_SENTENCE_LEN,
            embeddings: None,
            datasets: Vec::new(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    /// Parses config text. Relative paths are kept as written.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(e))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, resolving relative paths against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.embeddings);
        for d in &mut self.datasets {
            fix(&mut d.train);
            fix(&mut d.dev);
            fix(&mut d.test);
        }
    }

    /// Sets one key; used by the parser and for command-line overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "dropout_clwe" => self.dropout_clwe = parse_value(key, value)?,
            "dropout_bilstm" => self.dropout_bilstm = parse_value(key, value)?,
            "d_word" => self.d_word = parse_value(key, value)?,
            "d_char" => self.d_char = parse_value(key, value)?,
            "d_clwe" => self.d_clwe = parse_value(key, value)?,
            "d_lstm" => self.d_lstm = parse_value(key, value)?,
            "char_windows" => {
                self.char_windows = value
                    .split(',')
                    .map(|v| parse_value(key, v.trim()))
                    .collect::<Result<_>>()?
            }
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "lr_decay" => self.lr_decay = parse_value(key, value)?,
            "adagrad_epsilon" => self.adagrad_epsilon = parse_value(key, value)?,
            "max_epochs" => self.max_epochs = parse_value(key, value)?,
            "prep_patience" => self.prep_patience = parse_value(key, value)?,
            "max_phases" => self.max_phases = parse_value(key, value)?,
            "phase_patience" => self.phase_patience = parse_value(key, value)?,
            "freeze_embeddings" => self.freeze_embeddings = parse_bool(key, value)?,
            "constrained_viterbi" => self.constrained_viterbi = parse_bool(key, value)?,
            "signal" => self.signal = value.parse()?,
            "token_loss_in_phases" => self.token_loss_in_phases = parse_bool(key, value)?,
            "max_sentence_len" => self.max_sentence_len = parse_value(key, value)?,
            "embeddings" => self.embeddings = (!value.is_empty()).then(|| PathBuf::from(value)),
            _ => {
                let Some(rest) = key.strip_prefix("dataset.") else {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                };
                let (name, field) = rest
                    .rsplit_once('.')
                    .filter(|(n, _)| !n.is_empty())
                    .ok_or_else(|| Error::Config(format!("expected dataset.<name>.<field>, got {key:?}")))?;
                let idx = match self.datasets.iter().position(|d| d.name == name) {
                    Some(i) => i,
                    None => {
                        self.datasets.push(DatasetSpec::new(name));
                        self.datasets.len() - 1
                    }
                };
                let d = &mut self.datasets[idx];
                match field {
                    "train" => d.train = Some(PathBuf::from(value)),
                    "dev" => d.dev = Some(PathBuf::from(value)),
                    "test" => d.test = Some(PathBuf::from(value)),
                    "type" => d.entity_type = value.parse().map_err(|e: Error| Error::Config(strip_prefix(e)))?,
                    "dev_size" => d.dev_size = Some(parse_value(key, value)?),
                    "scheme" => d.scheme = value.parse()?,
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("d_word", self.d_word),
            ("d_char", self.d_char),
            ("d_clwe", self.d_clwe),
            ("d_lstm", self.d_lstm),
            ("max_sentence_len", self.max_sentence_len),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        for (k, v) in [("dropout_clwe", self.dropout_clwe), ("dropout_bilstm", self.dropout_bilstm)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{k} must be in [0, 1), got {v}")));
            }
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) || !(self.adagrad_epsilon > 0.0) {
            return Err(Error::Config("learning_rate, lr_decay and adagrad_epsilon must be positive".into()));
        }
        if self.char_windows.is_empty() || self.d_clwe % self.char_windows.len() != 0 {
            return Err(Error::Config(format!(
                "d_clwe {} must split evenly over the char windows {:?}",
                self.d_clwe, self.char_windows
            )));
        }
        self.embedding_dims().validate()?;
        for d in &self.datasets {
            if d.dev.is_some() && d.dev_size.is_some() {
                return Err(Error::Config(format!("dataset {}: give either dev or dev_size, not both", d.name)));
            }
        }
        Ok(())
    }

    pub fn embedding_dims(&self) -> EmbeddingDims {
        EmbeddingDims {
            d_word: self.d_word,
            d_char: self.d_char,
            windows: self.char_windows.clone(),
            filters: self.d_clwe / self.char_windows.len().max(1),
        }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.learning_rate,
            decay: self.lr_decay,
        }
    }

    /// Canonical text: every key with its effective value, datasets last.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let windows: Vec<String> = self.char_windows.iter().map(ToString::to_string).collect();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "dropout_clwe = {:?}", self.dropout_clwe);
        let _ = writeln!(s, "dropout_bilstm = {:?}", self.dropout_bilstm);
        let _ = writeln!(s, "d_word = {}", self.d_word);
        let _ = writeln!(s, "d_char = {}", self.d_char);
        let _ = writeln!(s, "d_clwe = {}", self.d_clwe);
        let _ = writeln!(s, "d_lstm = {}", self.d_lstm);
        let _ = writeln!(s, "char_windows = {}", windows.join(","));
        let _ = writeln!(s, "learning_rate = {:?}", self.learning_rate);
        let _ = writeln!(s, "lr_decay = {:?}", self.lr_decay);
        let _ = writeln!(s, "adagrad_epsilon = {:?}", self.adagrad_epsilon);
        let _ = writeln!(s, "max_epochs = {}", self.max_epochs);
        let _ = writeln!(s, "prep_patience = {}", self.prep_patience);
        let _ = writeln!(s, "max_phases = {}", self.max_phases);
        let _ = writeln!(s, "phase_patience = {}", self.phase_patience);
        let _ = writeln!(s, "freeze_embeddings = {}", self.freeze_embeddings);
        let _ = writeln!(s, "constrained_viterbi = {}", self.constrained_viterbi);
        let _ = writeln!(s, "signal = {}", self.signal.as_str());
        let _ = writeln!(s, "token_loss_in_phases = {}", self.token_loss_in_phases);
        let _ = writeln!(s, "max_sentence_len = {}", self.max_sentence_len);
        if let Some(p) = &self.embeddings {
            let _ = writeln!(s, "embeddings = {}", p.display());
        }
        for d in &self.datasets {
            let n = &d.name;
            for (field, path) in [("train", &d.train), ("dev", &d.dev), ("test", &d.test)] {
                if let Some(p) = path {
                    let _ = writeln!(s, "dataset.{n}.{field} = {}", p.display());
                }
            }
            let _ = writeln!(s, "dataset.{n}.type = {}", d.entity_type);
            if let Some(k) = d.dev_size {
                let _ = writeln!(s, "dataset.{n}.dev_size = {k}");
            }
            let _ = writeln!(s, "dataset.{n}.scheme = {}", d.scheme.as_str());
        }
        s
    }

    /// Hex SHA-256 of [`RunConfig::to_text`].
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Loads every configured dataset, converting BIO input to BIOES.
    pub fn load_datasets(&self) -> Result<Vec<DatasetBundle>> {
        if self.datasets.is_empty() {
            return Err(Error::Config("no datasets configured".into()));
        }
        self.datasets.iter().map(|d| self.load_dataset(d)).collect()
    }

    fn load_dataset(&self, spec: &DatasetSpec) -> Result<DatasetBundle> {
        let train_path = spec
            .train
            .as_ref()
            .ok_or_else(|| Error::Config(format!("dataset {} has no train file", spec.name)))?;
        let train = self.read_split(spec, train_path)?;
        let suffix = train.entity_suffix.clone();
        let (train, dev) = match (&spec.dev, spec.dev_size) {
            (Some(p), _) => (train.sentences, self.read_split(spec, p)?.sentences),
            (None, Some(k)) => split_dev(train.sentences, k)?,
            (None, None) => {
                return Err(Error::Config(format!("dataset {} needs a dev file or dev_size", spec.name)));
            }
        };
        let test = match &spec.test {
            Some(p) => self.read_split(spec, p)?.sentences,
            None => Vec::new(),
        };
        let bundle = DatasetBundle {
            name: spec.name.clone(),
            entity_type: spec.entity_type,
            entity_suffix: suffix,
            train,
            dev,
            test,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    fn read_split(&self, spec: &DatasetSpec, path: &Path) -> Result<Corpus> {
        let opts = ParseOptions {
            dataset: spec.name.clone(),
            max_sentence_len: self.max_sentence_len,
        };
        let file = File::open(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        let mut corpus = parse_conll(BufReader::new(file), &path.display().to_string(), &opts)?;
        for s in &mut corpus.sentences {
            normalize_scheme(s, spec.scheme).map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?;
        }
        Ok(corpus)
    }
}

fn normalize_scheme(s: &mut LabeledSentence, scheme: TagScheme) -> Result<()> {
    match scheme {
        TagScheme::Bio => s.tags = bio_to_bioes(&s.tags, BioMode::Lenient)?,
        TagScheme::Bioes => {
            bioes_to_spans(&s.tags)?;
        }
    }
    Ok(())
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        e => e.to_string(),
    }
}
