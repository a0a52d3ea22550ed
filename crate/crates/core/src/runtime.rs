//! Configuration, seeding, metrics sinks and checkpoints.
//!
//! # Checkpoint layout
//!
//! All integers little-endian:
//!
//! ```text
//! offset  size  content
//! 0       8     magic "DSQNCKPT"
//! 8       4     format version (u32)
//! 12      8     header length N in bytes (u64)
//! 20      N     UTF-8 JSON header
//! 20+N    ...   f32 tensor payloads, in the header's `tensors` order
//! ```
//!
//! The header carries the network description, the tensor table (name and
//! shape of every payload) and a free-form `state` object with counters and
//! RNG stream positions. Tensors are always stored as 32-bit floats.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::attack::AttackConfig;
use crate::envs::{EnvConfig, EnvKind, Preprocessor};
use crate::error::{Error, Result};
use crate::network::{parse_architecture, DecoderKind, QNetwork, DEFAULT_SIM_STEPS};
use crate::neuron::NeuronConfig;
use crate::qlearn::{Adam, HyperParams, Progress, ReplayBuffer, TargetPair, TrainSchedule, Trainer, Transition};

// ---------------------------------------------------------------------------
// Seeding

/// Independent RNG stream `name` under `root`. Streams with different names
/// never share state, so adding draws to one stream leaves the others
/// untouched.
pub fn rng_stream(root: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a of the stream name selects the ChaCha stream.
    let stream = name.bytes().fold(0xcbf2_9ce4_8422_2325_u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream);
    rng
}

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> std::result::Result<ChaCha8Rng, CheckpointError> {
        let bad = || CheckpointError::Malformed("invalid RNG state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Layer notation, see [`parse_architecture`].
    pub arch: String,
    pub decoder: DecoderKind,
    pub sim_steps: usize,
    pub neuron: NeuronConfig,
    /// Spiking-layer weights start uniform in `±init_gain/sqrt(fan_in)`.
    pub init_gain: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            arch: "16C3S1-LIF-Flatten-128-LIF-NA-LI".into(),
            decoder: DecoderKind::MaxMem,
            sim_steps: DEFAULT_SIM_STEPS,
            neuron: NeuronConfig::default(),
            init_gain: 1.0,
        }
    }
}

impl NetworkConfig {
    /// Freshly initialized network for the given environment geometry.
    pub fn build<R: rand::Rng + ?Sized>(
        &self,
        input_shape: &[usize],
        num_actions: usize,
        rng: &mut R,
    ) -> Result<QNetwork<f32>> {
        if !(self.init_gain.is_finite() && self.init_gain > 0.0) {
            return Err(Error::Config(format!("init_gain must be positive, got {}", self.init_gain)));
        }
        self.neuron.validate()?;
        let specs = parse_architecture(&self.arch)?;
        let mut net = QNetwork::<f32>::from_specs(
            &specs,
            input_shape,
            num_actions,
            self.sim_steps,
            self.decoder,
            self.neuron,
            rng,
        )?;
        net.scale_spiking_weights(self.init_gain as f32);
        Ok(net)
    }
}

/// A full run description, read from TOML.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory; the CLI's `--out` overrides it.
    pub out_dir: Option<PathBuf>,
    pub env: EnvConfig,
    pub network: NetworkConfig,
    pub hyper: HyperParams,
    pub train: TrainSchedule,
    pub attack: AttackConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks the config against the registries and builds the network once
    /// to catch shape errors early.
    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.hyper.validate()?;
        self.attack.validate()?;
        let env = crate::envs::make_env(&self.env)?;
        self.network.build(
            &self.env.input_shape()?,
            crate::envs::Environment::num_actions(&env),
            &mut rng_stream(0, "validate"),
        )?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Metrics

/// One metrics record. Episode rows carry `ret`; evaluation rows carry
/// `eval_mean`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub episode: u64,
    #[serde(rename = "return")]
    pub ret: Option<f64>,
    pub loss: Option<f64>,
    pub epsilon: f64,
    pub eval_mean: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,episode,return,loss,epsilon,eval_mean";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.step,
            self.episode,
            opt(self.ret),
            opt(self.loss),
            self.epsilon,
            opt(self.eval_mean)
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed metrics row {line:?}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad())
            }
        };
        Ok(Self {
            step: f[0].parse().map_err(|_| bad())?,
            episode: f[1].parse().map_err(|_| bad())?,
            ret: opt(f[2])?,
            loss: opt(f[3])?,
            epsilon: f[4].parse().map_err(|_| bad())?,
            eval_mean: opt(f[5])?,
        })
    }
}

struct SinkFiles {
    csv: BufWriter<File>,
    jsonl: BufWriter<File>,
}

/// Writes `metrics.csv` and `metrics.jsonl` side by side. Rows from several
/// threads are serialized through one lock; both files are flushed after
/// every evaluation row and on [`MetricsSink::flush`].
pub struct MetricsSink {
    files: Mutex<SinkFiles>,
}

impl MetricsSink {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut csv = BufWriter::new(File::create(dir.join("metrics.csv"))?);
        writeln!(csv, "{METRICS_HEADER}")?;
        csv.flush()?;
        let jsonl = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
        Ok(Self { files: Mutex::new(SinkFiles { csv, jsonl }) })
    }

    pub fn record(&self, row: &MetricsRow) -> Result<()> {
        let mut files = self.files.lock().expect("metrics lock poisoned");
        writeln!(files.csv, "{}", row.to_csv())?;
        let json = serde_json::to_string(row).map_err(std::io::Error::other)?;
        writeln!(files.jsonl, "{json}")?;
        if row.eval_mean.is_some() {
            files.csv.flush()?;
            files.jsonl.flush()?;
        }
        Ok(())
    }

    pub fn flush(&self) -> Result<()> {
        let mut files = self.files.lock().expect("metrics lock poisoned");
        files.csv.flush()?;
        files.jsonl.flush()?;
        Ok(())
    }
}

impl Drop for MetricsSink {
    fn drop(&mut self) {
        if let Ok(mut files) = self.files.lock() {
            let _ = files.csv.flush();
            let _ = files.jsonl.flush();
        }
    }
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSQNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated: needed {needed} bytes, found {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

type CkptResult<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Network description echoed into every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkEcho {
    pub arch: String,
    pub input_shape: Vec<usize>,
    pub num_actions: usize,
    pub sim_steps: usize,
    pub decoder: DecoderKind,
    pub neuron: NeuronConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub network: NetworkEcho,
    pub tensors: Vec<TensorEntry>,
    /// Counters, RNG streams and anything else that is not a tensor.
    pub state: Value,
}

/// A decoded checkpoint file: header plus named f32 tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> CkptResult<&[f32]> {
        self.header
            .tensors
            .iter()
            .position(|t| t.name == name)
            .map(|i| self.tensors[i].as_slice())
            .ok_or_else(|| CheckpointError::Malformed(format!("missing tensor {name:?}")))
    }

    fn shape(&self, name: &str) -> CkptResult<&[usize]> {
        self.header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.shape.as_slice())
            .ok_or_else(|| CheckpointError::Malformed(format!("missing tensor {name:?}")))
    }

    pub fn to_bytes(&self) -> CkptResult<Vec<u8>> {
        if self.header.tensors.len() != self.tensors.len() {
            return Err(CheckpointError::ShapeMismatch("tensor table and payload count differ".into()));
        }
        for (entry, data) in self.header.tensors.iter().zip(&self.tensors) {
            if entry.shape.iter().product::<usize>() != data.len() {
                return Err(CheckpointError::ShapeMismatch(format!("tensor {} length", entry.name)));
            }
        }
        let header = serde_json::to_vec(&self.header).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let payload: usize = self.tensors.iter().map(Vec::len).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 4 * payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> CkptResult<Self> {
        let available = bytes.len() as u64;
        let need = |needed: u64| {
            if available < needed {
                Err(CheckpointError::Truncated { needed, available })
            } else {
                Ok(())
            }
        };
        need(8)?;
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        need(12)?;
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
        }
        need(20)?;
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let header_end =
            20u64.checked_add(header_len).ok_or_else(|| CheckpointError::Malformed("header length".into()))?;
        need(header_end)?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[20..header_end as usize])
            .map_err(|e| CheckpointError::Malformed(format!("header: {e}")))?;
        if header.format_version != version {
            return Err(CheckpointError::Malformed("header version disagrees with preamble".into()));
        }
        let floats: u64 = header.tensors.iter().map(|t| t.shape.iter().map(|&d| d as u64).product::<u64>()).sum();
        let end = header_end + 4 * floats;
        need(end)?;
        if available > end {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", available - end)));
        }
        let mut offset = header_end as usize;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            let data = bytes[offset..offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += 4 * n;
            tensors.push(data);
        }
        Ok(Self { header, tensors })
    }

    /// Writes atomically: a temporary sibling file is renamed into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(CheckpointError::Io)?;
        Ok(Self::from_bytes(&bytes)?)
    }

    /// Rebuilds a network from its echo and the tensors `prefix.0`,
    /// `prefix.1`, ... (one per synaptic layer).
    pub fn network(&self, prefix: &str) -> CkptResult<QNetwork<f32>> {
        let echo = &self.header.network;
        let specs = parse_architecture(&echo.arch).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let mut net = QNetwork::<f32>::from_specs(
            &specs,
            &echo.input_shape,
            echo.num_actions,
            echo.sim_steps,
            echo.decoder,
            echo.neuron,
            &mut rng_stream(0, "checkpoint"),
        )
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let shapes = net.param_shapes();
        for (k, w) in net.params_mut().enumerate() {
            let name = format!("{prefix}.{k}");
            if self.shape(&name)? != shapes[k].as_slice() {
                return Err(CheckpointError::ShapeMismatch(format!(
                    "{name}: stored {:?}, network needs {:?}",
                    self.shape(&name)?,
                    shapes[k]
                )));
            }
            w.copy_from_slice(self.tensor(&name)?);
        }
        Ok(net)
    }
}

fn echo_of(net: &QNetwork<f32>, arch: &str) -> NetworkEcho {
    NetworkEcho {
        arch: arch.to_string(),
        input_shape: net.input_shape.clone(),
        num_actions: net.num_actions(),
        sim_steps: net.sim_steps,
        decoder: net.decoder,
        neuron: net.neuron,
    }
}

/// Non-tensor training state stored in the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerState {
    config: RunConfig,
    progress: Progress,
    steps_since_sync: u64,
    adam_t: u64,
    env: EnvKind,
    eval_env: EnvKind,
    frame_len: usize,
    frames: usize,
    stacked: usize,
    replay_capacity: usize,
    replay_len: usize,
    rngs: TrainerRngs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainerRngs {
    env: RngState,
    policy: RngState,
    eval: RngState,
    replay: RngState,
}

struct TensorTable {
    entries: Vec<TensorEntry>,
    data: Vec<Vec<f32>>,
}

impl TensorTable {
    fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.entries.push(TensorEntry { name: name.into(), shape });
        self.data.push(data);
    }
}

/// Captures everything needed to resume `trainer` bit-exactly: both
/// parameter sets, Adam moments, the replay contents, environment and frame
/// stack state, counters and every RNG stream.
pub fn trainer_checkpoint(trainer: &Trainer) -> Checkpoint {
    let mut table = TensorTable { entries: Vec::new(), data: Vec::new() };
    let shapes = trainer.nets.online.param_shapes();
    for (prefix, net) in [("online", &trainer.nets.online), ("target", &trainer.nets.target)] {
        for (k, w) in net.params().enumerate() {
            table.push(format!("{prefix}.{k}"), shapes[k].clone(), w.clone());
        }
    }
    for (k, (m, v)) in trainer.adam.m.iter().zip(&trainer.adam.v).enumerate() {
        table.push(format!("adam.m.{k}"), shapes[k].clone(), m.clone());
        table.push(format!("adam.v.{k}"), shapes[k].clone(), v.clone());
    }
    let obs_len = trainer.state.len();
    let items: Vec<&Transition> = trainer.replay.iter().collect();
    let n = items.len();
    table.push("replay.s", vec![n, obs_len], items.iter().flat_map(|t| t.s.iter().copied()).collect());
    table.push("replay.s_next", vec![n, obs_len], items.iter().flat_map(|t| t.s_next.iter().copied()).collect());
    table.push("replay.a", vec![n], items.iter().map(|t| t.a as f32).collect());
    table.push("replay.r", vec![n], items.iter().map(|t| t.r).collect());
    table.push("replay.done", vec![n], items.iter().map(|t| f32::from(u8::from(t.done))).collect());
    table.push("state", vec![obs_len], trainer.state.clone());
    let frame_len = trainer.pre.frame_len;
    let stacked = trainer.pre.stack.len();
    table.push("frame_stack", vec![stacked, frame_len], trainer.pre.stack.iter().flatten().copied().collect());

    let state = TrainerState {
        config: trainer.config.clone(),
        progress: trainer.progress.clone(),
        steps_since_sync: trainer.nets.steps_since_sync,
        adam_t: trainer.adam.t,
        env: trainer.env.clone(),
        eval_env: trainer.eval_env.clone(),
        frame_len,
        frames: trainer.pre.frames,
        stacked,
        replay_capacity: trainer.replay.capacity(),
        replay_len: n,
        rngs: TrainerRngs {
            env: RngState::capture(&trainer.env_rng),
            policy: RngState::capture(&trainer.policy_rng),
            eval: RngState::capture(&trainer.eval_rng),
            replay: RngState::capture(trainer.replay.rng()),
        },
    };
    Checkpoint {
        header: CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            network: echo_of(&trainer.nets.online, &trainer.config.network.arch),
            tensors: table.entries,
            state: serde_json::to_value(state).expect("trainer state serializes"),
        },
        tensors: table.data,
    }
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    trainer_checkpoint(trainer).save(path)
}

/// Restores a trainer saved by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    Ok(trainer_from_checkpoint(&Checkpoint::load(path)?)?)
}

pub fn trainer_from_checkpoint(ckpt: &Checkpoint) -> CkptResult<Trainer> {
    let state: TrainerState = serde_json::from_value(ckpt.header.state.clone())
        .map_err(|e| CheckpointError::Malformed(format!("trainer state: {e}")))?;
    let online = ckpt.network("online")?;
    let target = ckpt.network("target")?;
    let shapes = online.param_shapes();
    let mut adam = Adam::new(&online);
    for k in 0..shapes.len() {
        for (name, dst) in [(format!("adam.m.{k}"), &mut adam.m[k]), (format!("adam.v.{k}"), &mut adam.v[k])] {
            if ckpt.shape(&name)? != shapes[k].as_slice() {
                return Err(CheckpointError::ShapeMismatch(name));
            }
            dst.copy_from_slice(ckpt.tensor(&name)?);
        }
    }
    adam.t = state.adam_t;

    let obs_len = online.input_len();
    let n = state.replay_len;
    let expect = |name: &str, shape: Vec<usize>| -> CkptResult<&[f32]> {
        if ckpt.shape(name)? != shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch(format!("{name}: expected {shape:?}")));
        }
        ckpt.tensor(name)
    };
    let s = expect("replay.s", vec![n, obs_len])?;
    let s_next = expect("replay.s_next", vec![n, obs_len])?;
    let a = expect("replay.a", vec![n])?;
    let r = expect("replay.r", vec![n])?;
    let done = expect("replay.done", vec![n])?;
    let items = (0..n)
        .map(|i| Transition {
            s: s[i * obs_len..(i + 1) * obs_len].to_vec(),
            a: a[i] as usize,
            r: r[i],
            s_next: s_next[i * obs_len..(i + 1) * obs_len].to_vec(),
            done: done[i] != 0.0,
        })
        .collect();
    let replay = ReplayBuffer::restore(state.replay_capacity, items, state.rngs.replay.restore()?)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;

    let current = expect("state", vec![obs_len])?.to_vec();
    let stack = expect("frame_stack", vec![state.stacked, state.frame_len])?;
    let mut pre = Preprocessor::new(state.frame_len, state.frames);
    pre.stack = stack.chunks(state.frame_len.max(1)).map(<[f32]>::to_vec).collect();

    Ok(Trainer {
        env: state.env,
        eval_env: state.eval_env,
        pre,
        state: current,
        nets: TargetPair { online, target, steps_since_sync: state.steps_since_sync },
        adam,
        replay,
        env_rng: state.rngs.env.restore()?,
        policy_rng: state.rngs.policy.restore()?,
        eval_rng: state.rngs.eval.restore()?,
        progress: state.progress,
        config: state.config,
    })
}

/// Saves just a network (for evaluation and attacks).
pub fn network_checkpoint(net: &QNetwork<f32>, arch: &str, extra: Value) -> Checkpoint {
    let shapes = net.param_shapes();
    let mut table = TensorTable { entries: Vec::new(), data: Vec::new() };
    for (k, w) in net.params().enumerate() {
        table.push(format!("online.{k}"), shapes[k].clone(), w.clone());
    }
    Checkpoint {
        header: CheckpointHeader {
            format_version: CHECKPOINT_VERSION,
            network: echo_of(net, arch),
            tensors: table.entries,
            state: extra,
        },
        tensors: table.data,
    }
}

/// Run configuration stored in a trainer checkpoint, if any.
pub fn checkpoint_config(ckpt: &Checkpoint) -> Option<RunConfig> {
    ckpt.header.state.get("config").and_then(|v| serde_json::from_value(v.clone()).ok())
}
