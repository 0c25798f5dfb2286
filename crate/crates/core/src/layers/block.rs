//! Task-adaptive block: a shared encoder plus per-task, per-slot APL
//! activations whose basis `β_n` and coordinates `α^t_n` come from two
//! autoregressive LSTMs.

use rand::Rng;

use super::attention::{attention_step_var, AttentionCell, AttentionHistory};
use super::lstm::{lstm_step_var, uniform_matrix, uniform_vector, LstmCell, LstmState};
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{Bound, ParamId, ParamKind, ParamSet};
use crate::tensor::Tensor;

/// Which layer computes the pre-activation `h̃_n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    Lstm,
    Attention,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(Self::Lstm),
            "attention" => Ok(Self::Attention),
            other => Err(Error::Invalid(format!("unknown encoder '{other}' (lstm|attention)"))),
        }
    }
}

impl std::fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Lstm => "lstm",
            Self::Attention => "attention",
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Encoder {
    Lstm(LstmCell),
    Attention(AttentionCell),
}

impl Encoder {
    pub fn scalar_count(kind: EncoderKind, d_in: usize, d_h: usize) -> usize {
        match kind {
            EncoderKind::Lstm => LstmCell::scalar_count(d_in, d_h),
            EncoderKind::Attention => AttentionCell::scalar_count(d_in, d_h),
        }
    }
}

/// An autoregressive LSTM with learned initial state and an output
/// projection to `ℝ^M`.
#[derive(Debug, Clone, Copy)]
pub struct Recurrence {
    pub cell: LstmCell,
    pub h0: ParamId,
    pub c0: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

impl Recurrence {
    fn init<R: Rng>(params: &mut ParamSet, prefix: &str, d_in: usize, aux: usize, m: usize, rng: &mut R) -> Self {
        let cell = LstmCell::init(params, &format!("{prefix}.cell"), d_in, aux, rng);
        let bound = 1.0 / (aux as f64).sqrt();
        let h0 = params.add(format!("{prefix}.h0"), uniform_vector(aux, bound, rng), ParamKind::Euclidean);
        let c0 = params.add(format!("{prefix}.c0"), uniform_vector(aux, bound, rng), ParamKind::Euclidean);
        let proj_w = params.add(
            format!("{prefix}.proj_w"),
            uniform_matrix(m, aux, bound, rng),
            ParamKind::Euclidean,
        );
        let proj_b = params.add(format!("{prefix}.proj_b"), Tensor::zeros(&[m]), ParamKind::Euclidean);
        Self {
            cell,
            h0,
            c0,
            proj_w,
            proj_b,
        }
    }

    fn scalar_count(d_in: usize, aux: usize, m: usize) -> usize {
        LstmCell::scalar_count(d_in, aux) + 2 * aux + m * aux + m
    }

    /// Initial state broadcast to `rows` rows.
    fn initial_state(&self, tape: &mut Tape, bound: &Bound, rows: usize) -> Result<LstmState> {
        let aux = self.cell.d_h;
        let h = tape.reshape(bound[self.h0], &[1, aux])?;
        let c = tape.reshape(bound[self.c0], &[1, aux])?;
        if rows == 1 {
            return Ok(LstmState { h, c });
        }
        Ok(LstmState {
            h: tape.concat(&vec![h; rows], 0)?,
            c: tape.concat(&vec![c; rows], 0)?,
        })
    }

    fn step(&self, tape: &mut Tape, bound: &Bound, x: Var, state: LstmState) -> Result<(Var, LstmState)> {
        let next = lstm_step_var(tape, &self.cell, bound, x, state)?;
        let out = tape.matmul_nt(next.h, bound[self.proj_w])?;
        let out = tape.add_row(out, bound[self.proj_b])?;
        Ok((out, next))
    }
}

/// Parameters of one task-adaptive block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub m: usize,
    pub tasks: usize,
    pub d_in: usize,
    pub d_h: usize,
    pub encoder: Encoder,
    pub beta: Recurrence,
    pub beta0: ParamId,
    pub alpha: Recurrence,
    pub embeddings: Vec<ParamId>,
}

/// Sizes of one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockDims {
    pub d_in: usize,
    pub d_h: usize,
    pub m: usize,
    pub tasks: usize,
    pub aux: usize,
    pub encoder: EncoderKind,
}

impl BlockParams {
    pub fn init<R: Rng>(params: &mut ParamSet, prefix: &str, dims: BlockDims, rng: &mut R) -> Result<Self> {
        let BlockDims {
            d_in,
            d_h,
            m,
            tasks,
            aux,
            encoder,
        } = dims;
        if d_in == 0 || d_h == 0 || m == 0 || tasks == 0 || aux == 0 {
            return Err(Error::Invalid(format!("block dimensions must be positive: {dims:?}")));
        }
        let encoder = match encoder {
            EncoderKind::Lstm => Encoder::Lstm(LstmCell::init(params, &format!("{prefix}.enc"), d_in, d_h, rng)),
            EncoderKind::Attention => {
                Encoder::Attention(AttentionCell::init(params, &format!("{prefix}.enc"), d_in, d_h, rng))
            }
        };
        let beta = Recurrence::init(params, &format!("{prefix}.lstm_beta"), m, aux, m, rng);
        let spread = if m == 1 {
            vec![0.0]
        } else {
            (0..m).map(|i| -1.0 + 2.0 * i as f64 / (m - 1) as f64).collect()
        };
        let beta0 = params.add(format!("{prefix}.beta0"), Tensor::vector(spread), ParamKind::Euclidean);
        let alpha = Recurrence::init(params, &format!("{prefix}.lstm_alpha"), 2 * m, aux, m, rng);
        let embeddings = (0..tasks)
            .map(|t| {
                params.add(
                    format!("{prefix}.embed.{t}"),
                    uniform_vector(m, 0.1, rng),
                    ParamKind::Euclidean,
                )
            })
            .collect();
        Ok(Self {
            m,
            tasks,
            d_in,
            d_h,
            encoder,
            beta,
            beta0,
            alpha,
            embeddings,
        })
    }

    pub fn scalar_count(dims: BlockDims) -> usize {
        let BlockDims {
            d_in,
            d_h,
            m,
            tasks,
            aux,
            encoder,
        } = dims;
        Encoder::scalar_count(encoder, d_in, d_h)
            + Recurrence::scalar_count(m, aux, m)
            + m
            + Recurrence::scalar_count(2 * m, aux, m)
            + tasks * m
    }
}

/// The data-independent part of a block: `β_n` (shape `[M]`) and `α^t_n`
/// (shape `[M]`) for every slot.
#[derive(Debug, Clone)]
pub struct RelationVars {
    pub beta: Vec<Var>,
    /// Indexed `[slot][task]`.
    pub alpha: Vec<Vec<Var>>,
}

/// Unrolls both autoregressive recurrences for `slots` steps.
pub fn relation_forward(tape: &mut Tape, block: &BlockParams, bound: &Bound, slots: usize) -> Result<RelationVars> {
    if slots == 0 {
        return shape_err("block_forward", "empty sequence");
    }
    let (m, tasks) = (block.m, block.tasks);
    let mut beta_state = block.beta.initial_state(tape, bound, 1)?;
    let mut beta_prev = tape.reshape(bound[block.beta0], &[1, m])?;
    let mut alpha_state = block.alpha.initial_state(tape, bound, tasks)?;
    let rows: Vec<Var> = block
        .embeddings
        .iter()
        .map(|&e| tape.reshape(bound[e], &[1, m]))
        .collect::<Result<_>>()?;
    let mut alpha_prev = if tasks == 1 { rows[0] } else { tape.concat(&rows, 0)? };

    let mut out = RelationVars {
        beta: Vec::with_capacity(slots),
        alpha: Vec::with_capacity(slots),
    };
    for _ in 0..slots {
        let (beta_row, next) = block.beta.step(tape, bound, beta_prev, beta_state)?;
        beta_state = next;
        beta_prev = beta_row;
        let beta_rows = if tasks == 1 {
            beta_row
        } else {
            tape.concat(&vec![beta_row; tasks], 0)?
        };
        let input = tape.concat(&[alpha_prev, beta_rows], 1)?;
        let (alpha_rows, next) = block.alpha.step(tape, bound, input, alpha_state)?;
        alpha_state = next;
        alpha_prev = alpha_rows;
        out.beta.push(tape.reshape(beta_row, &[m])?);
        out.alpha
            .push((0..tasks).map(|t| tape.row(alpha_rows, t)).collect::<Result<_>>()?);
    }
    Ok(out)
}

/// Recurrent state of one encoder stream.
#[derive(Debug, Clone)]
pub enum EncoderState {
    Lstm(LstmState),
    Attention(AttentionHistory),
}

impl EncoderState {
    /// Zero state for a batch of `rows` sequences.
    pub fn zeros(tape: &mut Tape, encoder: &Encoder, rows: usize) -> Self {
        match encoder {
            Encoder::Lstm(cell) => Self::Lstm(LstmState {
                h: tape.constant(Tensor::zeros(&[rows, cell.d_h])),
                c: tape.constant(Tensor::zeros(&[rows, cell.d_h])),
            }),
            Encoder::Attention(_) => Self::Attention(AttentionHistory::default()),
        }
    }
}

/// Advances one encoder stream by one slot and returns `h̃_n`.
pub fn encoder_step(
    tape: &mut Tape,
    encoder: &Encoder,
    bound: &Bound,
    x: Var,
    state: &mut EncoderState,
) -> Result<Var> {
    match (encoder, state) {
        (Encoder::Lstm(cell), EncoderState::Lstm(s)) => {
            *s = lstm_step_var(tape, cell, bound, x, *s)?;
            Ok(s.h)
        }
        (Encoder::Attention(cell), EncoderState::Attention(h)) => attention_step_var(tape, cell, bound, x, h),
        _ => Err(Error::Invalid("encoder state does not match encoder kind".into())),
    }
}

/// Per-slot record of one block on concrete values.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTrace {
    pub beta: Vec<Vec<f64>>,
    /// `[slot][task]`.
    pub alpha: Vec<Vec<Vec<f64>>>,
    /// `[slot][stream]`; one stream for a block reading shared input, one per
    /// task otherwise.
    pub pre: Vec<Vec<Tensor>>,
    /// `[slot][task]`.
    pub post: Vec<Vec<Tensor>>,
}

impl BlockTrace {
    pub fn slots(&self) -> usize {
        self.beta.len()
    }

    pub fn is_finite(&self) -> bool {
        self.beta.iter().flatten().all(|x| x.is_finite())
            && self.alpha.iter().flatten().flatten().all(|x| x.is_finite())
            && self.pre.iter().flatten().all(Tensor::is_finite)
            && self.post.iter().flatten().all(Tensor::is_finite)
    }
}

/// Tape handles of one block's trace.
#[derive(Debug, Clone)]
pub struct BlockVars {
    pub relation: RelationVars,
    pub pre: Vec<Vec<Var>>,
    pub post: Vec<Vec<Var>>,
}

impl BlockVars {
    pub fn trace(&self, tape: &Tape) -> BlockTrace {
        let vec = |v: Var| tape.value(v).data().to_vec();
        BlockTrace {
            beta: self.relation.beta.iter().map(|&v| vec(v)).collect(),
            alpha: self
                .relation
                .alpha
                .iter()
                .map(|slot| slot.iter().map(|&v| vec(v)).collect())
                .collect(),
            pre: self
                .pre
                .iter()
                .map(|s| s.iter().map(|&v| tape.value(v).clone()).collect())
                .collect(),
            post: self
                .post
                .iter()
                .map(|s| s.iter().map(|&v| tape.value(v).clone()).collect())
                .collect(),
        }
    }
}

/// Runs a block over per-slot inputs. `streams[n]` holds either one shared
/// input `[B, d_in]` or one input per task.
pub fn block_forward_var(
    tape: &mut Tape,
    block: &BlockParams,
    bound: &Bound,
    relation: RelationVars,
    streams: &[Vec<Var>],
) -> Result<BlockVars> {
    let slots = streams.len();
    if slots == 0 {
        return shape_err("block_forward", "empty sequence");
    }
    if relation.beta.len() != slots {
        return shape_err(
            "block_forward",
            format!("{} relation slots for {slots} input slots", relation.beta.len()),
        );
    }
    let width = streams[0].len();
    if width != 1 && width != block.tasks {
        return shape_err("block_forward", format!("{width} streams for {} tasks", block.tasks));
    }
    let mut states: Vec<EncoderState> = streams[0]
        .iter()
        .map(|&x| {
            let rows = tape.value(x).rows();
            EncoderState::zeros(tape, &block.encoder, rows)
        })
        .collect();
    let mut pre = Vec::with_capacity(slots);
    let mut post = Vec::with_capacity(slots);
    for (n, inputs) in streams.iter().enumerate() {
        if inputs.len() != width {
            return shape_err("block_forward", format!("slot {n} has {} streams", inputs.len()));
        }
        let hidden: Vec<Var> = inputs
            .iter()
            .zip(states.iter_mut())
            .map(|(&x, s)| encoder_step(tape, &block.encoder, bound, x, s))
            .collect::<Result<_>>()?;
        let beta = relation.beta[n];
        let outs: Vec<Var> = (0..block.tasks)
            .map(|t| {
                let h = if width == 1 { hidden[0] } else { hidden[t] };
                tape.apl(h, relation.alpha[n][t], beta)
            })
            .collect::<Result<_>>()?;
        pre.push(hidden);
        post.push(outs);
    }
    Ok(BlockVars { relation, pre, post })
}

/// Runs one block reading a shared input sequence (each `[B, d_in]`) on
/// concrete values.
pub fn block_forward(params: &ParamSet, block: &BlockParams, x_seq: &[Tensor]) -> Result<BlockTrace> {
    if x_seq.is_empty() {
        return shape_err("block_forward", "empty sequence");
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let relation = relation_forward(&mut tape, block, &bound, x_seq.len())?;
    let streams: Vec<Vec<Var>> = x_seq.iter().map(|x| vec![tape.constant(x.clone())]).collect();
    let vars = block_forward_var(&mut tape, block, &bound, relation, &streams)?;
    Ok(vars.trace(&tape))
}
