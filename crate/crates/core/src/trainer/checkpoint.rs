//! Checkpoint file, little-endian:
//!
//! ```text
//! "MPCK"  u16 version
//! str     config (key = value text)
//! u64     classes, input_dim, completed epochs, step
//! u32     block count, then per block: str name, u64 rows, u64 cols, f64 data
//!         (online parameters, "momentum.*" twin, "velocity.*" SGD buffers)
//! proto   u64 K, u64 dim, f64 momentum, u8 renormalize, K × u8 initialised, K·dim f64
//! queue   u64 capacity, u64 dim, u64 cursor, u64 len, capacity·dim f64
//! rng     2 × (u64 seed, u64 stream, u128 word position): shuffle, augment
//! labels  u64 n, n × u32
//! metrics u64 count, fixed-layout records
//! trace   u64 n, n × u8
//! ```
//!
//! A `str` is a u32 byte length followed by UTF-8.

use std::fs;
use std::path::Path;

use super::{EpochMetrics, Phase, TraceOp, TrainConfig, TrainState};
use crate::codec::{Reader, Writer};
use crate::error::{MoproError, Result};
use crate::memory::{EmbeddingQueue, PrototypeBank};
use crate::noise::{PseudoLabel, RuleCounts};
use crate::numkit::{Rng, RngState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MPCK";
pub const CHECKPOINT_VERSION: u16 = 1;

const OOD_LABEL: u32 = u32::MAX;
const ARGMAX_BIT: u32 = 1 << 31;

const TRACE_OPS: [TraceOp; 11] = [
    TraceOp::AugmentWeak,
    TraceOp::AugmentStrong,
    TraceOp::OnlineForward,
    TraceOp::MomentumForward,
    TraceOp::PrototypeScores,
    TraceOp::CorrectBatch,
    TraceOp::LossTotal,
    TraceOp::SgdStep,
    TraceOp::EmaUpdate,
    TraceOp::PrototypeUpdate,
    TraceOp::Enqueue,
];

fn encode_label(l: PseudoLabel) -> u32 {
    match l {
        PseudoLabel::Ood => OOD_LABEL,
        PseudoLabel::Kept(k) => k as u32,
        PseudoLabel::Argmax(k) => k as u32 | ARGMAX_BIT,
    }
}

fn decode_label(v: u32) -> PseudoLabel {
    if v == OOD_LABEL {
        PseudoLabel::Ood
    } else if v & ARGMAX_BIT != 0 {
        PseudoLabel::Argmax((v & !ARGMAX_BIT) as usize)
    } else {
        PseudoLabel::Kept(v as usize)
    }
}

fn named_blocks(state: &TrainState) -> Vec<(String, &Tensor)> {
    let net_names = state.network.param_names();
    let mut out: Vec<(String, &Tensor)> = net_names
        .iter()
        .cloned()
        .zip(state.network.params())
        .collect();
    out.extend(state.twin.param_names().into_iter().zip(state.twin.params()));
    out.extend(
        net_names
            .iter()
            .map(|n| format!("velocity.{n}"))
            .zip(state.velocity.iter()),
    );
    out
}

fn write_rng(w: &mut Writer, rng: &Rng) {
    let s = rng.state();
    w.u64(s.seed);
    w.u64(s.stream);
    w.u128(s.word_pos);
}

fn read_rng(r: &mut Reader<'_>) -> Result<Rng> {
    Ok(Rng::from_state(RngState {
        seed: r.u64("rng seed")?,
        stream: r.u64("rng stream")?,
        word_pos: r.u128("rng position")?,
    }))
}

fn write_metrics(w: &mut Writer, m: &EpochMetrics) {
    w.u64(m.epoch as u64);
    w.u8(matches!(m.phase, Phase::Main) as u8);
    for v in [m.lr, m.l_ce, m.l_pro, m.l_ins, m.total] {
        w.f64(v);
    }
    for c in [m.rules.argmax, m.rules.kept, m.rules.ood] {
        w.u64(c as u64);
    }
    for v in [m.pseudo_acc, m.in_dist_acc, m.ood_recall, m.ood_precision, m.knn_acc, m.calib_err] {
        w.f64(v);
    }
    w.u64(m.clamped as u64);
}

fn read_metrics(r: &mut Reader<'_>) -> Result<EpochMetrics> {
    let epoch = r.len("metrics epoch")?;
    let phase = match r.u8("metrics phase")? {
        0 => Phase::Warmup,
        1 => Phase::Main,
        v => return Err(r.err(format!("unknown phase tag {v}"))),
    };
    let f = r.f64s(5, "metrics losses")?;
    let rules = RuleCounts {
        argmax: r.len("rule count")?,
        kept: r.len("rule count")?,
        ood: r.len("rule count")?,
    };
    let g = r.f64s(6, "metrics rates")?;
    Ok(EpochMetrics {
        epoch,
        phase,
        lr: f[0],
        l_ce: f[1],
        l_pro: f[2],
        l_ins: f[3],
        total: f[4],
        rules,
        pseudo_acc: g[0],
        in_dist_acc: g[1],
        ood_recall: g[2],
        ood_precision: g[3],
        knn_acc: g[4],
        calib_err: g[5],
        clamped: r.len("clamp count")?,
    })
}

pub fn checkpoint_bytes(state: &TrainState) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    w.str(&state.config.to_settings_text());
    for v in [state.classes, state.input_dim, state.epoch] {
        w.u64(v as u64);
    }
    w.u64(state.step);

    let blocks = named_blocks(state);
    w.u32(blocks.len() as u32);
    for (name, t) in blocks {
        w.str(&name);
        w.u64(t.rows() as u64);
        w.u64(t.cols() as u64);
        w.f64s(t.data());
    }

    let bank = &state.bank;
    w.u64(bank.classes() as u64);
    w.u64(bank.dim() as u64);
    w.f64(bank.momentum());
    w.u8(bank.renormalizes() as u8);
    bank.initialized_flags().iter().for_each(|&b| w.u8(b as u8));
    w.f64s(bank.raw_rows());

    let (buffer, cursor, len) = state.queue.raw_parts();
    w.u64(state.queue.capacity() as u64);
    w.u64(state.queue.dim() as u64);
    w.u64(cursor as u64);
    w.u64(len as u64);
    w.f64s(buffer);

    write_rng(&mut w, &state.shuffle_rng);
    write_rng(&mut w, &state.augment_rng);

    w.u64(state.last_labels.len() as u64);
    state.last_labels.iter().for_each(|&l| w.u32(encode_label(l)));

    w.u64(state.history.len() as u64);
    state.history.iter().for_each(|m| write_metrics(&mut w, m));

    w.u64(state.trace.len() as u64);
    for op in &state.trace {
        let tag = TRACE_OPS.iter().position(|o| o == op).expect("listed op");
        w.u8(tag as u8);
    }
    w.buf
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16("format version")?;
    if version != CHECKPOINT_VERSION {
        return Err(MoproError::Parse {
            offset: 4,
            msg: format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"),
        });
    }
    let config = TrainConfig::from_settings_text(&r.str("config block")?)?;
    let classes = r.len("class count")?;
    let input_dim = r.len("input dimension")?;
    config.validate(classes)?;
    let mut state = TrainState::blank(config, classes, input_dim)?;
    state.epoch = r.len("epoch counter")?;
    state.step = r.u64("step counter")?;

    let count = r.u32("block count")? as usize;
    let mut seen = 0usize;
    {
        let TrainState {
            network,
            twin,
            velocity,
            ..
        } = &mut state;
        let net_names = network.param_names();
        let twin_names = twin.param_names();
        let velocity_names: Vec<String> = net_names.iter().map(|n| format!("velocity.{n}")).collect();
        let mut slots: Vec<(String, &mut Tensor)> = net_names
            .into_iter()
            .zip(network.params_mut())
            .chain(twin_names.into_iter().zip(twin.params_mut()))
            .chain(velocity_names.into_iter().zip(velocity.iter_mut()))
            .collect();
        if count != slots.len() {
            return Err(MoproError::Structural(format!(
                "checkpoint has {count} parameter blocks, the configured model needs {}",
                slots.len()
            )));
        }
        for _ in 0..count {
            let name = r.str("block name")?;
            let rows = r.len("block rows")?;
            let cols = r.len("block cols")?;
            let data = r.f64s(rows * cols, "block data")?;
            let (_, slot) = slots
                .iter_mut()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| MoproError::Structural(format!("unexpected parameter block `{name}`")))?;
            if slot.shape() != [rows, cols] {
                return Err(MoproError::Structural(format!(
                    "parameter `{name}` is {rows}x{cols} in the checkpoint but {:?} in the model",
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(&data);
            seen += 1;
        }
    }
    debug_assert_eq!(seen, count);

    let k = r.len("prototype count")?;
    let dim = r.len("prototype dim")?;
    let momentum = r.f64("prototype momentum")?;
    let renormalize = r.u8("prototype renormalize flag")? != 0;
    let mut flags = Vec::with_capacity(k);
    for _ in 0..k {
        flags.push(r.u8("prototype flag")? != 0);
    }
    let rows = r.f64s(k * dim, "prototype block")?;
    if k != classes || dim != state.config.embed_dim {
        return Err(MoproError::Structural(format!(
            "prototype block is {k}x{dim}, expected {classes}x{}",
            state.config.embed_dim
        )));
    }
    state.bank = PrototypeBank::from_raw_parts(k, dim, momentum, renormalize, rows, flags)?;

    let capacity = r.len("queue capacity")?;
    let qdim = r.len("queue dim")?;
    let cursor = r.len("queue cursor")?;
    let len = r.len("queue length")?;
    let buffer = r.f64s(capacity * qdim, "queue block")?;
    state.queue = EmbeddingQueue::from_raw_parts(capacity, qdim, buffer, cursor, len)?;

    state.shuffle_rng = read_rng(&mut r)?;
    state.augment_rng = read_rng(&mut r)?;

    let n = r.len("label count")?;
    state.last_labels = (0..n)
        .map(|_| r.u32("label").map(decode_label))
        .collect::<Result<_>>()?;

    let m = r.len("metrics count")?;
    state.history = (0..m).map(|_| read_metrics(&mut r)).collect::<Result<_>>()?;

    let t = r.len("trace length")?;
    state.trace = (0..t)
        .map(|_| {
            let tag = r.u8("trace op")? as usize;
            TRACE_OPS
                .get(tag)
                .copied()
                .ok_or_else(|| r.err(format!("unknown trace op {tag}")))
        })
        .collect::<Result<_>>()?;

    if !r.is_at_end() {
        return Err(r.err("trailing bytes after checkpoint"));
    }
    Ok(state)
}

pub fn save_checkpoint(state: &TrainState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_bytes(state)).map_err(|e| MoproError::file(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainState> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MoproError::file(path, e))?;
    checkpoint_from_bytes(&bytes)
}
