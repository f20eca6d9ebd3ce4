//! Plain-text transcript files: everything the server saw in one round.
//!
//! One record per line, comma separated, first field names the record:
//!
//! ```text
//! R,round,mode          header, always first
//! C,client              one per cohort member
//! G,param_id,value      broadcast model
//! UC,param_id,ones,total   unary channel as per-parameter counts
//! U,param_id,bit        unary channel, one message per line (full dump)
//! H,param_id,value      quantized residual channel, in shuffled order
//! W,client,param_id,value  standard mode: a client's local model
//! ```
//!
//! Floats are written in Rust's shortest round-trip form, so a transcript
//! reloads bit for bit.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;
use unishuffle::federation::{
    ClientUpdate, Mode, QuantMessage, RoundTranscript, ServerView, UnaryChannel,
};
use unishuffle::nn::{Layout, ParamVector};

/// Largest unary channel written message by message.
pub const MAX_FULL_UNARY_MESSAGES: u64 = 20_000_000;

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },
    #[error("unary channel of {0} messages is too large for a full dump; use counts")]
    TooLarge(u64),
}

pub fn file_name(round: usize) -> String {
    format!("transcript_round{round:03}.csv")
}

/// Write `t` to `path`. With `full_unary`, the unary channel is expanded
/// into individually shuffled messages using `rng`.
pub fn write<R: Rng + ?Sized>(
    path: &Path,
    t: &RoundTranscript,
    full_unary: bool,
    rng: &mut R,
) -> Result<(), TranscriptError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "R,{},{}", t.round, t.mode())?;
    for c in &t.cohort {
        writeln!(w, "C,{c}")?;
    }
    for (i, v) in t.broadcast.values().iter().enumerate() {
        writeln!(w, "G,{i},{v}")?;
    }
    match &t.view {
        ServerView::Standard { updates } => {
            for u in updates {
                for (i, v) in u.params.values().iter().enumerate() {
                    writeln!(w, "W,{},{i},{v}", u.client)?;
                }
            }
        }
        ServerView::UnaryQuant {
            u_channel,
            h_channel,
        } => {
            if full_unary {
                let count = u_channel.message_count();
                if count > MAX_FULL_UNARY_MESSAGES {
                    return Err(TranscriptError::TooLarge(count));
                }
                for m in u_channel.shuffled_messages(rng) {
                    writeln!(w, "U,{},{}", m.param_id, u8::from(m.bit))?;
                }
            } else {
                for p in 0..u_channel.params() {
                    writeln!(w, "UC,{p},{},{}", u_channel.ones(p), u_channel.count(p))?;
                }
            }
            for m in h_channel {
                writeln!(w, "H,{},{}", m.param_id, m.value)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a transcript written by [`write`] for a model with `layout`.
pub fn read(path: &Path, layout: &Arc<Layout>) -> Result<RoundTranscript, TranscriptError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)?;
    let params = layout.len();
    let mut header: Option<(usize, Mode)> = None;
    let mut cohort = Vec::new();
    let mut broadcast = vec![f64::NAN; params];
    let mut ones = vec![0u64; params];
    let mut total = vec![0u64; params];
    let mut h_channel = Vec::new();
    let mut locals: Vec<(usize, Vec<f64>)> = Vec::new();

    let mut record = csv::StringRecord::new();
    while reader.read_record(&mut record)? {
        let line = record.position().map_or(0, |p| p.line());
        let bad = |message: String| TranscriptError::Malformed { line, message };
        let field = |i: usize| {
            record
                .get(i)
                .ok_or_else(|| bad(format!("missing field {i}")))
        };
        let int = |i: usize| -> Result<usize, TranscriptError> {
            field(i)?
                .parse()
                .map_err(|e| bad(format!("field {i}: {e}")))
        };
        let float = |i: usize| -> Result<f64, TranscriptError> {
            field(i)?
                .parse()
                .map_err(|e| bad(format!("field {i}: {e}")))
        };
        let param = |i: usize| -> Result<usize, TranscriptError> {
            let p = int(i)?;
            if p >= params {
                return Err(bad(format!("parameter {p} outside a model of {params}")));
            }
            Ok(p)
        };
        let kind = field(0)?;
        if header.is_none() && kind != "R" {
            return Err(bad("transcript must start with an R record".into()));
        }
        match kind {
            "R" => {
                if header.is_some() {
                    return Err(bad("duplicate R record".into()));
                }
                let mode = field(2)?.parse::<Mode>().map_err(|e| bad(e.to_string()))?;
                header = Some((int(1)?, mode));
            }
            "C" => cohort.push(int(1)?),
            "G" => {
                let p = param(1)?;
                broadcast[p] = float(2)?;
            }
            "UC" => {
                let p = param(1)?;
                let (o, n) = (int(2)? as u64, int(3)? as u64);
                if o > n {
                    return Err(bad(format!("{o} ones out of {n} messages")));
                }
                ones[p] += o;
                total[p] += n;
            }
            "U" => {
                let p = param(1)?;
                match field(2)? {
                    "0" => {}
                    "1" => ones[p] += 1,
                    other => return Err(bad(format!("bit must be 0 or 1, got {other}"))),
                }
                total[p] += 1;
            }
            "H" => h_channel.push(QuantMessage {
                param_id: param(1)? as u32,
                value: float(2)?,
            }),
            "W" => {
                let client = int(1)?;
                let p = param(2)?;
                let v = float(3)?;
                let slot = match locals.iter().position(|(c, _)| *c == client) {
                    Some(s) => s,
                    None => {
                        locals.push((client, vec![f64::NAN; params]));
                        locals.len() - 1
                    }
                };
                locals[slot].1[p] = v;
            }
            other => return Err(bad(format!("unknown record type `{other}`"))),
        }
    }
    let missing = |what: &str| TranscriptError::Malformed {
        line: 0,
        message: format!("{} is incomplete", what),
    };
    let (round, mode) = header.ok_or_else(|| missing("header"))?;
    if broadcast.iter().any(|v| v.is_nan()) {
        return Err(missing("broadcast model"));
    }
    let broadcast =
        ParamVector::new(broadcast, layout.clone()).map_err(|e| TranscriptError::Malformed {
            line: 0,
            message: e.to_string(),
        })?;
    let view = match mode {
        Mode::Standard => {
            let mut updates = Vec::with_capacity(locals.len());
            for (client, values) in locals {
                if values.iter().any(|v| v.is_nan()) {
                    return Err(missing(&format!("local model of client {client}")));
                }
                updates.push(ClientUpdate {
                    client,
                    params: broadcast.with_values(values).expect("length checked above"),
                });
            }
            ServerView::Standard { updates }
        }
        Mode::UnaryQuant => ServerView::UnaryQuant {
            u_channel: UnaryChannel::from_counts(ones, total).map_err(|e| {
                TranscriptError::Malformed {
                    line: 0,
                    message: e.to_string(),
                }
            })?,
            h_channel,
        },
    };
    Ok(RoundTranscript {
        round,
        broadcast,
        cohort,
        view,
    })
}
