//! Round protocol: clients train and encode, a trusted shuffler mixes the two
//! message channels, and the server decodes the cohort average.
//!
//! In `UnaryQuant` mode every client turns its clipped local model into `r·λ`
//! unary bits and `λ` quantized residuals, each message tagged only with its
//! parameter index. The shuffler pools the messages of the whole cohort per
//! channel and releases them in uniformly random order; the server sees
//! nothing else. In `Standard` mode the server receives every client's model
//! directly, which is the baseline the attacks are compared against.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::codec::{self, CodecError, EncodingMode, UnaryCode};
use crate::data::{ClientDataset, Dataset};
use crate::nn::{self, NnError, ParamVector};
use crate::rng::{self, Stream};

/// Bits used to account for one quantized residual on the wire.
pub const RESIDUAL_VALUE_BITS: u64 = 64;

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("invalid federation config: {0}")]
    Config(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("protocol error at param {param_id}: {detail}")]
    Protocol { param_id: usize, detail: String },
    #[error("transcript is in {found} mode, expected {expected}")]
    WrongMode { expected: Mode, found: Mode },
    #[error("update {index} has {found} parameters, expected {expected}")]
    LengthMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("no updates to aggregate")]
    EmptyCohort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Standard,
    UnaryQuant,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Standard => "standard",
            Mode::UnaryQuant => "unary_quant",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(Mode::Standard),
            "unary_quant" => Ok(Mode::UnaryQuant),
            other => Err(format!(
                "unknown mode `{other}` (expected `standard` or `unary_quant`)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlConfig {
    pub rounds: usize,
    pub clients: usize,
    /// Clients selected per round.
    pub cohort: usize,
    /// Decimal places carried by the unary channel.
    pub k: u32,
    /// Unary code length.
    pub r: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mode: Mode,
    pub encoding: EncodingMode,
    pub seed: u64,
}

impl Default for FlConfig {
    fn default() -> Self {
        FlConfig {
            rounds: 15,
            clients: 10,
            cohort: 10,
            k: 3,
            r: 1000,
            learning_rate: 0.05,
            epochs: 1,
            batch_size: 32,
            mode: Mode::UnaryQuant,
            encoding: EncodingMode::General,
            seed: 0,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<(), FederationError> {
        let fail = |msg: String| Err(FederationError::Config(msg));
        if self.clients == 0 {
            return fail("clients must be positive".into());
        }
        if self.cohort == 0 || self.cohort > self.clients {
            return fail(format!(
                "cohort must be in 1..={}, got {}",
                self.clients, self.cohort
            ));
        }
        if self.r == 0 {
            return fail("r must be at least 1".into());
        }
        if !(1..=codec::MAX_SPLIT_DEPTH).contains(&self.k) {
            return fail(format!("k must be in 1..=9, got {}", self.k));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return fail("epochs and batch size must be positive".into());
        }
        Ok(())
    }
}

/// One bit of one parameter's unary code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct UnaryMessage {
    pub param_id: u32,
    pub bit: bool,
}

/// One quantized residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantMessage {
    pub param_id: u32,
    pub value: f64,
}

/// Everything one client hands to the shuffler in a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload {
    codes: Vec<UnaryCode>,
    quant: Vec<QuantMessage>,
}

impl ClientUpload {
    /// The U-channel messages: `r` per parameter.
    pub fn unary_messages(&self) -> impl Iterator<Item = UnaryMessage> + '_ {
        self.codes.iter().flat_map(|c| {
            let id = c.param_id() as u32;
            c.bits()
                .iter()
                .by_vals()
                .map(move |bit| UnaryMessage { param_id: id, bit })
        })
    }

    pub fn unary_len(&self) -> usize {
        self.codes.iter().map(UnaryCode::len).sum()
    }

    pub fn codes(&self) -> &[UnaryCode] {
        &self.codes
    }

    pub fn quant_messages(&self) -> &[QuantMessage] {
        &self.quant
    }

    pub fn into_messages(self) -> (Vec<UnaryMessage>, Vec<QuantMessage>) {
        let unary = self.unary_messages().collect();
        (unary, self.quant)
    }
}

/// Encode an already trained and clipped local model.
pub fn encode_update<R: Rng + ?Sized>(
    local: &ParamVector,
    cfg: &FlConfig,
    rng: &mut R,
) -> Result<ClientUpload, FederationError> {
    let out = codec::unary_quant(local.values(), cfg.r, cfg.k, cfg.encoding, rng)?;
    let quant = out
        .residuals
        .values
        .iter()
        .enumerate()
        .map(|(i, &value)| QuantMessage {
            param_id: i as u32,
            value,
        })
        .collect();
    Ok(ClientUpload {
        codes: out.codes,
        quant,
    })
}

/// Local training followed by encoding. Training and encoding draw from
/// separate streams derived from `rng`.
pub fn client_step(
    global: &ParamVector,
    data: &ClientDataset,
    cfg: &FlConfig,
    train_rng: &mut Stream,
    encode_rng: &mut Stream,
) -> Result<ClientUpload, FederationError> {
    let local = nn::local_train(
        global,
        data,
        cfg.learning_rate,
        cfg.epochs,
        cfg.batch_size,
        train_rng,
    )?;
    encode_update(&local, cfg, encode_rng)
}

/// Uniformly random permutation of a channel.
pub fn shuffle_channel<T, R: Rng + ?Sized>(mut messages: Vec<T>, rng: &mut R) -> Vec<T> {
    messages.shuffle(rng);
    messages
}

/// The U channel as a multiset: for each parameter, how many of its messages
/// carry a one and how many there are in total.
///
/// U messages have no content besides `(param_id, bit)`, so the counts are
/// the whole multiset; any arrival order is an independent uniform
/// permutation of it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnaryChannel {
    ones: Vec<u64>,
    total: Vec<u64>,
}

impl UnaryChannel {
    pub fn new(params: usize) -> Self {
        UnaryChannel {
            ones: vec![0; params],
            total: vec![0; params],
        }
    }

    pub fn from_counts(ones: Vec<u64>, total: Vec<u64>) -> Result<Self, FederationError> {
        if ones.len() != total.len() {
            return Err(FederationError::LengthMismatch {
                index: 0,
                expected: total.len(),
                found: ones.len(),
            });
        }
        if let Some(id) = (0..ones.len()).find(|&i| ones[i] > total[i]) {
            return Err(FederationError::Protocol {
                param_id: id,
                detail: format!("{} ones among {} messages", ones[id], total[id]),
            });
        }
        Ok(UnaryChannel { ones, total })
    }

    pub fn from_messages<I>(params: usize, messages: I) -> Result<Self, FederationError>
    where
        I: IntoIterator<Item = UnaryMessage>,
    {
        let mut channel = Self::new(params);
        for m in messages {
            channel.push(m)?;
        }
        Ok(channel)
    }

    pub fn push(&mut self, m: UnaryMessage) -> Result<(), FederationError> {
        let id = m.param_id as usize;
        if id >= self.total.len() {
            return Err(unknown_param(id, self.total.len()));
        }
        self.total[id] += 1;
        self.ones[id] += m.bit as u64;
        Ok(())
    }

    pub fn absorb_code(&mut self, code: &UnaryCode) -> Result<(), FederationError> {
        let id = code.param_id();
        if id >= self.total.len() {
            return Err(unknown_param(id, self.total.len()));
        }
        self.total[id] += code.len() as u64;
        self.ones[id] += code.ones() as u64;
        Ok(())
    }

    pub fn params(&self) -> usize {
        self.total.len()
    }

    pub fn ones(&self, param_id: usize) -> u64 {
        self.ones[param_id]
    }

    pub fn count(&self, param_id: usize) -> u64 {
        self.total[param_id]
    }

    pub fn message_count(&self) -> u64 {
        self.total.iter().sum()
    }

    /// Materialize the multiset in a uniformly random order.
    pub fn shuffled_messages<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<UnaryMessage> {
        let mut out = Vec::with_capacity(self.message_count() as usize);
        for id in 0..self.params() {
            let param_id = id as u32;
            let ones = self.ones[id] as usize;
            let zeros = (self.total[id] - self.ones[id]) as usize;
            out.extend(std::iter::repeat_n(
                UnaryMessage {
                    param_id,
                    bit: true,
                },
                ones,
            ));
            out.extend(std::iter::repeat_n(
                UnaryMessage {
                    param_id,
                    bit: false,
                },
                zeros,
            ));
        }
        shuffle_channel(out, rng)
    }
}

fn unknown_param(id: usize, params: usize) -> FederationError {
    FederationError::Protocol {
        param_id: id,
        detail: format!("model has only {params} parameters"),
    }
}

/// Trusted shuffler for one round. Clients submit their uploads; on release
/// the pooled U and H channels leave with no sender information.
#[derive(Debug)]
pub struct Shuffler {
    u_channel: UnaryChannel,
    h_channel: Vec<QuantMessage>,
}

impl Shuffler {
    pub fn new(params: usize) -> Self {
        Shuffler {
            u_channel: UnaryChannel::new(params),
            h_channel: Vec::new(),
        }
    }

    pub fn submit(&mut self, upload: ClientUpload) -> Result<(), FederationError> {
        for code in &upload.codes {
            self.u_channel.absorb_code(code)?;
        }
        for m in &upload.quant {
            if m.param_id as usize >= self.u_channel.params() {
                return Err(unknown_param(m.param_id as usize, self.u_channel.params()));
            }
        }
        self.h_channel.extend(upload.quant);
        Ok(())
    }

    pub fn release<R: Rng + ?Sized>(self, rng: &mut R) -> (UnaryChannel, Vec<QuantMessage>) {
        (self.u_channel, shuffle_channel(self.h_channel, rng))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    pub params: ParamVector,
}

/// What the server observes in one round.
#[derive(Debug, Clone, PartialEq)]
pub enum ServerView {
    /// Per-client models, each labelled with its sender.
    Standard { updates: Vec<ClientUpdate> },
    /// The two shuffled channels only.
    UnaryQuant {
        u_channel: UnaryChannel,
        h_channel: Vec<QuantMessage>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundTranscript {
    /// 1-based round index.
    pub round: usize,
    /// The global model broadcast at the start of the round.
    pub broadcast: ParamVector,
    /// Clients the server selected, ascending. Known to the server by
    /// construction; it does not link any message to a client.
    pub cohort: Vec<usize>,
    pub view: ServerView,
}

impl RoundTranscript {
    pub fn mode(&self) -> Mode {
        match self.view {
            ServerView::Standard { .. } => Mode::Standard,
            ServerView::UnaryQuant { .. } => Mode::UnaryQuant,
        }
    }

    pub fn per_client_updates(&self) -> Option<&[ClientUpdate]> {
        match &self.view {
            ServerView::Standard { updates } => Some(updates),
            ServerView::UnaryQuant { .. } => None,
        }
    }

    pub fn channels(&self) -> Option<(&UnaryChannel, &[QuantMessage])> {
        match &self.view {
            ServerView::UnaryQuant {
                u_channel,
                h_channel,
            } => Some((u_channel, h_channel)),
            ServerView::Standard { .. } => None,
        }
    }
}

/// Decode the shuffled channels into the new global model.
///
/// For every parameter: `unary_decode(ones, n, r)` plus the mean of its `n`
/// residuals, then clipping. Residuals are summed in sorted order so the
/// result does not depend on arrival order.
pub fn server_aggregate_unary_quant(
    t: &RoundTranscript,
    n: usize,
    r: usize,
    k: u32,
) -> Result<ParamVector, FederationError> {
    let (u, h) = t.channels().ok_or(FederationError::WrongMode {
        expected: Mode::UnaryQuant,
        found: t.mode(),
    })?;
    let params = t.broadcast.len();
    if u.params() != params {
        return Err(FederationError::LengthMismatch {
            index: 0,
            expected: params,
            found: u.params(),
        });
    }
    if n == 0 {
        return Err(FederationError::EmptyCohort);
    }
    let residual_bound = 10f64.powi(-(k as i32));
    let mut residuals: Vec<(u32, f64)> = h.iter().map(|m| (m.param_id, m.value)).collect();
    residuals.sort_unstable_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let mut out = vec![0.0; params];
    let mut cursor = 0;
    for (id, slot) in out.iter_mut().enumerate() {
        let expected = (n * r) as u64;
        if u.count(id) != expected {
            return Err(FederationError::Protocol {
                param_id: id,
                detail: format!("{} unary messages, expected {expected}", u.count(id)),
            });
        }
        let head = codec::unary_decode(u.ones(id), n as u64, r as u64)?;
        let start = cursor;
        let mut sum = 0.0;
        while cursor < residuals.len() && residuals[cursor].0 as usize == id {
            let v = residuals[cursor].1;
            if !(0.0..=residual_bound).contains(&v) {
                return Err(FederationError::Protocol {
                    param_id: id,
                    detail: format!("residual {v} outside [0, {residual_bound}]"),
                });
            }
            sum += v;
            cursor += 1;
        }
        if cursor - start != n {
            return Err(FederationError::Protocol {
                param_id: id,
                detail: format!("{} residual messages, expected {n}", cursor - start),
            });
        }
        *slot = head + sum / n as f64;
    }
    if let Some(&(id, _)) = residuals.get(cursor) {
        return Err(unknown_param(id as usize, params));
    }
    nn::clip_in_place(&mut out);
    Ok(t.broadcast.with_values(out)?)
}

/// Plain FedAvg: the elementwise mean of the cohort's models.
pub fn server_aggregate_standard(updates: &[ParamVector]) -> Result<ParamVector, FederationError> {
    let first = updates.first().ok_or(FederationError::EmptyCohort)?;
    let mut sum = vec![0.0; first.len()];
    for (index, u) in updates.iter().enumerate() {
        if u.len() != first.len() {
            return Err(FederationError::LengthMismatch {
                index,
                expected: first.len(),
                found: u.len(),
            });
        }
        for (s, v) in sum.iter_mut().zip(u.values()) {
            *s += v;
        }
    }
    let n = updates.len() as f64;
    for s in &mut sum {
        *s /= n;
    }
    Ok(first.with_values(sum)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub mode: Mode,
    /// Loss of the new global model on the pooled client training data.
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_acc: f64,
    /// U-channel bits sent by the whole cohort (0 in standard mode).
    pub u_bits: u64,
    /// H-channel payload bits sent by the whole cohort (0 in standard mode).
    pub h_bits: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub initial: ParamVector,
    pub final_model: ParamVector,
    pub rounds: Vec<(RoundMetrics, RoundTranscript)>,
}

/// Execute `cfg.rounds` rounds starting from `initial`.
///
/// `train` is the pooled training data used for the reported training loss.
pub fn run_rounds(
    cfg: &FlConfig,
    initial: ParamVector,
    partition: &[ClientDataset],
    train: &Dataset,
    test: &Dataset,
) -> Result<RunOutput, FederationError> {
    cfg.validate()?;
    if partition.len() != cfg.clients {
        return Err(FederationError::Config(format!(
            "partition has {} clients, config says {}",
            partition.len(),
            cfg.clients
        )));
    }
    let params = initial.len();
    let mut global = initial.clone();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for t in 1..=cfg.rounds {
        let t64 = t as u64;
        let mut cohort_rng = rng::derive(cfg.seed, &[rng::COHORT, t64]);
        let mut cohort =
            rand::seq::index::sample(&mut cohort_rng, cfg.clients, cfg.cohort).into_vec();
        cohort.sort_unstable();

        let (next, view) = match cfg.mode {
            Mode::Standard => {
                let mut updates = Vec::with_capacity(cohort.len());
                for &c in &cohort {
                    let mut train_rng = rng::derive(cfg.seed, &[rng::TRAIN, t64, c as u64]);
                    let local = nn::local_train(
                        &global,
                        &partition[c],
                        cfg.learning_rate,
                        cfg.epochs,
                        cfg.batch_size,
                        &mut train_rng,
                    )?;
                    updates.push(ClientUpdate {
                        client: c,
                        params: local,
                    });
                }
                let models: Vec<ParamVector> = updates.iter().map(|u| u.params.clone()).collect();
                (
                    server_aggregate_standard(&models)?,
                    ServerView::Standard { updates },
                )
            }
            Mode::UnaryQuant => {
                let mut shuffler = Shuffler::new(params);
                for &c in &cohort {
                    let mut train_rng = rng::derive(cfg.seed, &[rng::TRAIN, t64, c as u64]);
                    let mut encode_rng = rng::derive(cfg.seed, &[rng::ENCODE, t64, c as u64]);
                    let upload =
                        client_step(&global, &partition[c], cfg, &mut train_rng, &mut encode_rng)?;
                    shuffler.submit(upload)?;
                }
                let mut shuffle_rng = rng::derive(cfg.seed, &[rng::SHUFFLE, t64]);
                let (u_channel, h_channel) = shuffler.release(&mut shuffle_rng);
                let transcript = RoundTranscript {
                    round: t,
                    broadcast: global.clone(),
                    cohort: cohort.clone(),
                    view: ServerView::UnaryQuant {
                        u_channel,
                        h_channel,
                    },
                };
                let next = server_aggregate_unary_quant(&transcript, cohort.len(), cfg.r, cfg.k)?;
                (next, transcript.view)
            }
        };

        let transcript = RoundTranscript {
            round: t,
            broadcast: std::mem::replace(&mut global, next),
            cohort: cohort.clone(),
            view,
        };
        let train_eval = nn::evaluate(&global, train)?;
        let test_eval = nn::evaluate(&global, test)?;
        let n = cohort.len() as u64;
        let (u_bits, h_bits) = match cfg.mode {
            Mode::Standard => (0, 0),
            Mode::UnaryQuant => (
                n * cfg.r as u64 * params as u64,
                n * params as u64 * RESIDUAL_VALUE_BITS,
            ),
        };
        let metrics = RoundMetrics {
            round: t,
            mode: cfg.mode,
            train_loss: train_eval.loss,
            test_loss: test_eval.loss,
            test_acc: test_eval.accuracy,
            u_bits,
            h_bits,
        };
        rounds.push((metrics, transcript));
    }
    Ok(RunOutput {
        initial,
        final_model: global,
        rounds,
    })
}
