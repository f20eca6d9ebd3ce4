//! Source inference: an honest-but-curious server guessing which client owns
//! a given training record.
//!
//! Against standard FL the server holds every client's model and predicts the
//! client whose model has the smallest loss on the record. Against the
//! shuffled channels the only per-client structure left is in the H channel:
//! each client's residuals take at most two distinct values, so equal values
//! can be pooled into pseudonymous groups. The attack reconstructs those
//! groups, rebuilds one candidate model per group and then runs the same
//! smallest-loss rule, mapping groups to clients with the adversary's prior
//! knowledge of client class distributions if it has any.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::codec;
use crate::data::ClientDataset;
use crate::federation::{self, Mode, QuantMessage, RoundTranscript};
use crate::nn::{self, NnError, ParamVector};

/// Default cap on enumerated candidate groupings.
pub const DEFAULT_PAIRING_BUDGET: usize = 1 << 12;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("attack needs a {expected} transcript, got {found}")]
    WrongMode { expected: Mode, found: Mode },
    #[error("the number of clients must be positive")]
    NoClients,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("runs are not comparable: {0}")]
    Mismatch(String),
}

/// A record whose owner the adversary tries to name.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackTarget {
    pub features: Vec<f32>,
    pub label: usize,
    pub true_source: usize,
}

/// Draw `per_client` records uniformly (with replacement) from every
/// client's data, so that each client owns the same number of targets.
pub fn draw_targets<R: Rng + ?Sized>(
    partition: &[ClientDataset],
    per_client: usize,
    rng: &mut R,
) -> Vec<AttackTarget> {
    let mut targets = Vec::with_capacity(partition.len() * per_client);
    for (client, data) in partition.iter().enumerate() {
        if data.is_empty() {
            continue;
        }
        for _ in 0..per_client {
            let i = rng.random_range(0..data.len());
            targets.push(AttackTarget {
                features: data.data.feature(i).to_vec(),
                label: data.data.label(i),
                true_source: client,
            });
        }
    }
    targets
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AttackSetting {
    Standard,
    UnaryQuant,
    RandomGuess,
}

impl fmt::Display for AttackSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackSetting::Standard => "standard",
            AttackSetting::UnaryQuant => "unary_quant",
            AttackSetting::RandomGuess => "random_guess",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackReport {
    pub setting: AttackSetting,
    pub n_targets: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// `1/N` for a uniform prior over `N` clients.
    pub random_baseline: f64,
    pub note: String,
}

impl AttackReport {
    fn new(
        setting: AttackSetting,
        correct: usize,
        n_targets: usize,
        n_clients: usize,
        note: String,
    ) -> Self {
        AttackReport {
            setting,
            n_targets,
            correct,
            accuracy: if n_targets == 0 {
                0.0
            } else {
                correct as f64 / n_targets as f64
            },
            random_baseline: 1.0 / n_clients as f64,
            note,
        }
    }
}

fn score(predictions: &[usize], targets: &[AttackTarget]) -> usize {
    predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| **p == t.true_source)
        .count()
}

/// Index of the smallest loss; ties go to the lowest index.
fn argmin(losses: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[best] {
            best = i;
        }
    }
    best
}

/// Loss of every model on every target: `losses[target][model]`.
fn loss_table(models: &[&ParamVector], targets: &[AttackTarget]) -> Result<Vec<Vec<f64>>, NnError> {
    targets
        .iter()
        .map(|t| {
            models
                .iter()
                .map(|m| nn::example_loss(m, &t.features, t.label))
                .collect()
        })
        .collect()
}

/// Smallest-local-loss source inference on a standard-FL transcript.
pub fn sia_loss_based(
    transcript: &RoundTranscript,
    targets: &[AttackTarget],
    n_clients: usize,
) -> Result<AttackReport, AttackError> {
    if n_clients == 0 {
        return Err(AttackError::NoClients);
    }
    let updates = transcript
        .per_client_updates()
        .ok_or(AttackError::WrongMode {
            expected: Mode::Standard,
            found: transcript.mode(),
        })?;
    let mut updates: Vec<_> = updates.iter().collect();
    updates.sort_by_key(|u| u.client);
    let models: Vec<&ParamVector> = updates.iter().map(|u| &u.params).collect();
    let predictions: Vec<usize> = loss_table(&models, targets)?
        .iter()
        .map(|row| updates[argmin(row)].client)
        .collect();
    let correct = score(&predictions, targets);
    Ok(AttackReport::new(
        AttackSetting::Standard,
        correct,
        targets.len(),
        n_clients,
        format!("{} client models", updates.len()),
    ))
}

/// Uniform guessing among `n_clients`.
pub fn sia_random_baseline<R: Rng + ?Sized>(
    n_clients: usize,
    targets: &[AttackTarget],
    rng: &mut R,
) -> Result<AttackReport, AttackError> {
    if n_clients == 0 {
        return Err(AttackError::NoClients);
    }
    let predictions: Vec<usize> = targets
        .iter()
        .map(|_| rng.random_range(0..n_clients))
        .collect();
    Ok(AttackReport::new(
        AttackSetting::RandomGuess,
        score(&predictions, targets),
        targets.len(),
        n_clients,
        String::new(),
    ))
}

/// A block of one or two distinct residual values attributed to one client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Block {
    Single(usize),
    Pair(usize, usize),
}

impl Block {
    fn members(self) -> impl Iterator<Item = usize> {
        let (a, b) = match self {
            Block::Single(a) => (a, None),
            Block::Pair(a, b) => (a, Some(b)),
        };
        std::iter::once(a).chain(b)
    }
}

/// Result of pooling the H channel by value.
#[derive(Debug, Clone, PartialEq)]
pub enum Grouping {
    /// Every consistent way to split the distinct values into one block per
    /// client. `values[i]` is the residual value with index `i`.
    Candidates {
        values: Vec<f64>,
        groupings: Vec<Vec<Block>>,
    },
    /// No split into per-client blocks explains the channel.
    Inconsistent,
    /// More consistent splits than the search budget allows.
    OverBudget,
}

impl Grouping {
    /// Residual vector of `block` over `params` parameters.
    pub fn residuals(
        values: &[f64],
        h_channel: &[QuantMessage],
        params: usize,
        block: Block,
    ) -> Vec<f64> {
        let mut out = vec![0.0; params];
        for m in h_channel {
            if block
                .members()
                .any(|v| values[v].to_bits() == m.value.to_bits())
            {
                out[m.param_id as usize] = m.value;
            }
        }
        out
    }
}

/// Split the distinct H-channel values into `n` blocks such that every
/// parameter receives exactly one message from each block.
///
/// A client emits its own `h_min` or `h_max` for every parameter, so the true
/// assignment is always among the candidates when clients' values are
/// distinct. Enumeration stops once `budget` candidates have been exceeded.
pub fn group_residuals(
    h_channel: &[QuantMessage],
    params: usize,
    n: usize,
    budget: usize,
) -> Grouping {
    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut values = Vec::new();
    let mut tagged = Vec::with_capacity(h_channel.len());
    for m in h_channel {
        if m.param_id as usize >= params {
            return Grouping::Inconsistent;
        }
        let next = values.len();
        let v = *index.entry(m.value.to_bits()).or_insert_with(|| {
            values.push(m.value);
            next
        });
        tagged.push((m.param_id as usize, v));
    }
    let d = values.len();
    if n == 0 || d < n || d > 2 * n {
        return Grouping::Inconsistent;
    }
    // counts[v][p]: messages with value v at parameter p.
    let mut counts = vec![vec![0u32; params]; d];
    for &(p, v) in &tagged {
        counts[v][p] += 1;
    }
    let single_ok: Vec<bool> = counts.iter().map(|c| c.iter().all(|&x| x == 1)).collect();
    let mut pair_ok = vec![vec![false; d]; d];
    for a in 0..d {
        for b in a + 1..d {
            let ok = counts[a].iter().zip(&counts[b]).all(|(x, y)| x + y == 1);
            pair_ok[a][b] = ok;
            pair_ok[b][a] = ok;
        }
    }

    struct Search<'a> {
        single_ok: &'a [bool],
        pair_ok: &'a [Vec<bool>],
        n: usize,
        budget: usize,
        used: Vec<bool>,
        current: Vec<Block>,
        found: Vec<Vec<Block>>,
        nodes: usize,
        exhausted: bool,
    }

    impl Search<'_> {
        fn run(&mut self) {
            if self.exhausted {
                return;
            }
            self.nodes += 1;
            if self.found.len() > self.budget || self.nodes > self.budget.saturating_mul(64) {
                self.exhausted = true;
                return;
            }
            let Some(a) = self.used.iter().position(|u| !u) else {
                if self.current.len() == self.n {
                    self.found.push(self.current.clone());
                }
                return;
            };
            if self.current.len() == self.n {
                return;
            }
            self.used[a] = true;
            if self.single_ok[a] {
                self.current.push(Block::Single(a));
                self.run();
                self.current.pop();
            }
            for b in a + 1..self.used.len() {
                if !self.used[b] && self.pair_ok[a][b] {
                    self.used[b] = true;
                    self.current.push(Block::Pair(a, b));
                    self.run();
                    self.current.pop();
                    self.used[b] = false;
                }
            }
            self.used[a] = false;
        }
    }

    let mut search = Search {
        single_ok: &single_ok,
        pair_ok: &pair_ok,
        n,
        budget,
        used: vec![false; d],
        current: Vec::with_capacity(n),
        found: Vec::new(),
        nodes: 0,
        exhausted: false,
    };
    search.run();
    if search.exhausted || search.found.len() > budget {
        Grouping::OverBudget
    } else if search.found.is_empty() {
        Grouping::Inconsistent
    } else {
        Grouping::Candidates {
            values,
            groupings: search.found,
        }
    }
}

/// Settings of the attack on the shuffled channels.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryQuantAttack {
    /// Code length and split depth of the attacked run.
    pub r: usize,
    pub k: u32,
    pub pairing_budget: usize,
    /// Class histograms of every client, indexed by client id.
    pub known_stats: Option<Vec<Vec<usize>>>,
}

/// Source inference against a Unary-Quant transcript.
///
/// Candidate model for a group: the decoded global model truncated to `k`
/// decimals, plus the group's residual vector. Each target is attributed to
/// the group whose candidate has the smallest loss. Groups are matched to
/// cohort clients greedily by how well their per-class losses fit each
/// client's known class mix, or by a random permutation without prior
/// knowledge. Whenever grouping fails, every prediction is a uniform guess.
pub fn sia_on_unary_quant<R: Rng + ?Sized>(
    transcript: &RoundTranscript,
    targets: &[AttackTarget],
    n_clients: usize,
    attack: &UnaryQuantAttack,
    rng: &mut R,
) -> Result<AttackReport, AttackError> {
    if n_clients == 0 {
        return Err(AttackError::NoClients);
    }
    let (_, h_channel) = transcript.channels().ok_or(AttackError::WrongMode {
        expected: Mode::UnaryQuant,
        found: transcript.mode(),
    })?;
    let cohort = &transcript.cohort;
    let params = transcript.broadcast.len();
    let guess = |rng: &mut R, note: String| -> AttackReport {
        let predictions: Vec<usize> = targets
            .iter()
            .map(|_| rng.random_range(0..n_clients))
            .collect();
        AttackReport::new(
            AttackSetting::UnaryQuant,
            score(&predictions, targets),
            targets.len(),
            n_clients,
            note,
        )
    };

    let aggregate = match federation::server_aggregate_unary_quant(
        transcript,
        cohort.len(),
        attack.r,
        attack.k,
    ) {
        Ok(a) => a,
        Err(e) => {
            return Ok(guess(
                rng,
                format!("aggregate unavailable ({e}); random guess"),
            ))
        }
    };
    let (values, groupings) =
        match group_residuals(h_channel, params, cohort.len(), attack.pairing_budget) {
            Grouping::Candidates { values, groupings } => (values, groupings),
            Grouping::Inconsistent => {
                return Ok(guess(rng, "grouping inconsistent; random guess".into()))
            }
            Grouping::OverBudget => {
                return Ok(guess(rng, "grouping over budget; random guess".into()))
            }
        };
    let heads: Vec<f64> = aggregate
        .values()
        .iter()
        .map(|&p| codec::decompose(p, attack.k).map(|d| d.head).unwrap_or(p))
        .collect();

    // Losses per distinct block, shared across candidate groupings.
    let mut block_losses: HashMap<Block, Vec<f64>> = HashMap::new();
    for block in groupings.iter().flatten() {
        if block_losses.contains_key(block) {
            continue;
        }
        let residual = Grouping::residuals(&values, h_channel, params, *block);
        let mut candidate: Vec<f64> = heads.iter().zip(&residual).map(|(h, r)| h + r).collect();
        nn::clip_in_place(&mut candidate);
        let model = aggregate.with_values(candidate)?;
        let losses = targets
            .iter()
            .map(|t| nn::example_loss(&model, &t.features, t.label))
            .collect::<Result<Vec<_>, _>>()?;
        block_losses.insert(*block, losses);
    }
    let total_of = |g: &Vec<Block>| -> f64 {
        (0..targets.len())
            .map(|t| {
                g.iter()
                    .map(|b| block_losses[b][t])
                    .fold(f64::INFINITY, f64::min)
            })
            .sum()
    };
    let mut best = 0;
    let mut best_total = total_of(&groupings[0]);
    for (i, g) in groupings.iter().enumerate().skip(1) {
        let total = total_of(g);
        if total < best_total {
            best = i;
            best_total = total;
        }
    }
    let blocks = &groupings[best];
    let losses: Vec<&Vec<f64>> = blocks.iter().map(|b| &block_losses[b]).collect();

    let owner = match &attack.known_stats {
        Some(stats) => match_by_class_mix(&losses, targets, cohort, stats),
        None => {
            let mut owner = cohort.clone();
            owner.shuffle(rng);
            owner
        }
    };
    let predictions: Vec<usize> = (0..targets.len())
        .map(|t| {
            let row: Vec<f64> = losses.iter().map(|l| l[t]).collect();
            owner[argmin(&row)]
        })
        .collect();
    Ok(AttackReport::new(
        AttackSetting::UnaryQuant,
        score(&predictions, targets),
        targets.len(),
        n_clients,
        format!(
            "{} candidate grouping(s) of {} values; {}",
            groupings.len(),
            values.len(),
            if attack.known_stats.is_some() {
                "groups matched by class mix"
            } else {
                "groups matched at random"
            }
        ),
    ))
}

/// Greedy one-to-one matching of groups to cohort clients maximizing how well
/// each group's per-class losses fit the client's class mix.
fn match_by_class_mix(
    losses: &[&Vec<f64>],
    targets: &[AttackTarget],
    cohort: &[usize],
    stats: &[Vec<usize>],
) -> Vec<usize> {
    let classes = stats.iter().map(Vec::len).max().unwrap_or(0);
    // Mean loss of each group on the targets of each class.
    let mut class_loss = vec![vec![0.0; classes]; losses.len()];
    let mut class_count = vec![0usize; classes];
    for (t, target) in targets.iter().enumerate() {
        if target.label >= classes {
            continue;
        }
        class_count[target.label] += 1;
        for (g, l) in losses.iter().enumerate() {
            class_loss[g][target.label] += l[t];
        }
    }
    let affinity = |g: usize, client: usize| -> f64 {
        let hist = stats.get(client).map(Vec::as_slice).unwrap_or(&[]);
        let total: usize = hist.iter().sum();
        if total == 0 {
            return 0.0;
        }
        -(0..classes)
            .filter(|&c| class_count[c] > 0)
            .map(|c| {
                hist.get(c).copied().unwrap_or(0) as f64 / total as f64 * class_loss[g][c]
                    / class_count[c] as f64
            })
            .sum::<f64>()
    };
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for g in 0..losses.len() {
        for (slot, &client) in cohort.iter().enumerate() {
            pairs.push((affinity(g, client), g, slot));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut owner = vec![usize::MAX; losses.len()];
    let mut taken = vec![false; cohort.len()];
    for (_, g, slot) in pairs {
        if owner[g] == usize::MAX && !taken[slot] {
            owner[g] = cohort[slot];
            taken[slot] = true;
        }
    }
    owner
}

/// One row of the model/attack comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    pub model_accuracy: f64,
    pub sia_accuracy: f64,
    pub random_baseline: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub const CSV_HEADER: &'static str = "method,model_accuracy,sia_accuracy,random_baseline";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.method, r.model_accuracy, r.sia_accuracy, r.random_baseline
            ));
        }
        out
    }

    /// Aligned text table with percentages.
    pub fn to_text(&self) -> String {
        let width = self
            .rows
            .iter()
            .map(|r| r.method.len())
            .max()
            .unwrap_or(0)
            .max(6);
        let mut out = format!(
            "{:<width$}  {:>14}  {:>12}  {:>13}\n",
            "Method", "Model accuracy", "SIA accuracy", "Random guess"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>14.1}  {:>12.1}  {:>13.1}\n",
                r.method,
                100.0 * r.model_accuracy,
                100.0 * r.sia_accuracy,
                100.0 * r.random_baseline
            ));
        }
        out
    }
}

/// Inputs describing one finished run for [`evaluate_attacks`].
pub struct AttackedRun<'a> {
    pub label: String,
    pub transcript: &'a RoundTranscript,
    pub model_accuracy: f64,
    /// Code length and split depth, for Unary-Quant runs.
    pub codec: Option<(usize, u32)>,
}

/// Run the matching attack on every run and tabulate the results.
///
/// All runs must come from the same partition; targets are drawn once and
/// shared.
pub fn evaluate_attacks<R: Rng + ?Sized>(
    runs: &[AttackedRun<'_>],
    partition: &[ClientDataset],
    targets_per_client: usize,
    pairing_budget: usize,
    known_stats: bool,
    rng: &mut R,
) -> Result<(ComparisonTable, Vec<AttackReport>), AttackError> {
    let n_clients = partition.len();
    if n_clients == 0 {
        return Err(AttackError::NoClients);
    }
    let params: Vec<usize> = runs.iter().map(|r| r.transcript.broadcast.len()).collect();
    if params.windows(2).any(|w| w[0] != w[1]) {
        return Err(AttackError::Mismatch(format!(
            "model sizes differ: {params:?}"
        )));
    }
    if let Some(bad) = runs
        .iter()
        .find(|r| r.transcript.cohort.iter().any(|&c| c >= n_clients))
    {
        return Err(AttackError::Mismatch(format!(
            "run `{}` names clients outside the partition of {n_clients}",
            bad.label
        )));
    }
    let targets = draw_targets(partition, targets_per_client, rng);
    let stats: Vec<Vec<usize>> = partition
        .iter()
        .map(|c| c.class_histogram.clone())
        .collect();
    let mut table = ComparisonTable::default();
    let mut reports = Vec::new();
    for run in runs {
        let report = match (run.transcript.mode(), run.codec) {
            (Mode::Standard, _) => sia_loss_based(run.transcript, &targets, n_clients)?,
            (Mode::UnaryQuant, Some((r, k))) => sia_on_unary_quant(
                run.transcript,
                &targets,
                n_clients,
                &UnaryQuantAttack {
                    r,
                    k,
                    pairing_budget,
                    known_stats: known_stats.then(|| stats.clone()),
                },
                rng,
            )?,
            (Mode::UnaryQuant, None) => {
                return Err(AttackError::Mismatch(format!(
                    "run `{}` has no codec settings",
                    run.label
                )))
            }
        };
        table.rows.push(ComparisonRow {
            method: run.label.clone(),
            model_accuracy: run.model_accuracy,
            sia_accuracy: report.accuracy,
            random_baseline: report.random_baseline,
        });
        reports.push(report);
    }
    Ok((table, reports))
}
