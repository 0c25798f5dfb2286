//! Stack of task-adaptive blocks with per-task linear heads.

use rand::Rng;

use super::block::{
    block_forward_var, relation_forward, BlockDims, BlockParams, BlockTrace, BlockVars, EncoderKind,
    RelationVars,
};
use super::lstm::{uniform_matrix, uniform_vector};
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::params::{Bound, ParamId, ParamKind, ParamSet};
use crate::tensor::Tensor;

/// Architecture of the network.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HtanConfig {
    pub d_in: usize,
    pub d_h: usize,
    /// Number of APL basis functions.
    pub m: usize,
    pub tasks: usize,
    pub blocks: usize,
    pub classes: usize,
    /// Hidden size of the two autoregressive LSTMs.
    pub aux_hidden: usize,
    pub encoder: EncoderKind,
}

impl HtanConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_in", self.d_in),
            ("d_h", self.d_h),
            ("m", self.m),
            ("tasks", self.tasks),
            ("blocks", self.blocks),
            ("classes", self.classes),
            ("aux_hidden", self.aux_hidden),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn block_dims(&self, l: usize) -> BlockDims {
        BlockDims {
            d_in: if l == 0 { self.d_in } else { self.d_h },
            d_h: self.d_h,
            m: self.m,
            tasks: self.tasks,
            aux: self.aux_hidden,
            encoder: self.encoder,
        }
    }
}

/// Linear classifier `W h + b` with `W: [C, d_h]`.
#[derive(Debug, Clone, Copy)]
pub struct Head {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub struct Htan {
    pub config: HtanConfig,
    pub blocks: Vec<BlockParams>,
    pub heads: Vec<Head>,
}

/// Tape handles of a full forward pass.
#[derive(Debug, Clone)]
pub struct HtanVars {
    /// `[task][slot]`, each `[B, C]`.
    pub logits: Vec<Vec<Var>>,
    pub blocks: Vec<BlockVars>,
}

impl Htan {
    /// Registers all network parameters in `phi`.
    pub fn init<R: Rng>(config: HtanConfig, phi: &mut ParamSet, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let blocks = (0..config.blocks)
            .map(|l| BlockParams::init(phi, &format!("phi.block{l}"), config.block_dims(l), rng))
            .collect::<Result<_>>()?;
        let bound = 1.0 / (config.d_h as f64).sqrt();
        let heads = (0..config.tasks)
            .map(|t| Head {
                w: phi.add(
                    format!("phi.head{t}.w"),
                    uniform_matrix(config.classes, config.d_h, bound, rng),
                    ParamKind::Euclidean,
                ),
                b: phi.add(
                    format!("phi.head{t}.b"),
                    uniform_vector(config.classes, bound, rng),
                    ParamKind::Euclidean,
                ),
            })
            .collect();
        Ok(Self { config, blocks, heads })
    }

    /// Learnable scalars of the network (excluding the metric networks).
    pub fn scalar_count(config: &HtanConfig) -> usize {
        (0..config.blocks)
            .map(|l| BlockParams::scalar_count(config.block_dims(l)))
            .sum::<usize>()
            + config.tasks * (config.classes * config.d_h + config.classes)
    }
}

/// Unrolls the `β`/`α` recurrences of every block.
pub fn relations_forward(tape: &mut Tape, htan: &Htan, bound: &Bound, slots: usize) -> Result<Vec<RelationVars>> {
    htan.blocks
        .iter()
        .map(|b| relation_forward(tape, b, bound, slots))
        .collect()
}

/// Runs the encoders and heads over `inputs` (one `[B, d_in]` per slot),
/// reusing precomputed relations.
pub fn htan_encode(
    tape: &mut Tape,
    htan: &Htan,
    bound: &Bound,
    relations: Vec<RelationVars>,
    inputs: &[Var],
) -> Result<HtanVars> {
    if inputs.is_empty() {
        return shape_err("htan_forward", "empty sequence");
    }
    if relations.len() != htan.blocks.len() {
        return shape_err("htan_forward", format!("{} relations for {} blocks", relations.len(), htan.blocks.len()));
    }
    let mut streams: Vec<Vec<Var>> = inputs.iter().map(|&x| vec![x]).collect();
    let mut blocks = Vec::with_capacity(htan.blocks.len());
    for (block, relation) in htan.blocks.iter().zip(relations) {
        let vars = block_forward_var(tape, block, bound, relation, &streams)?;
        streams = vars.post.clone();
        blocks.push(vars);
    }
    let logits = htan
        .heads
        .iter()
        .enumerate()
        .map(|(t, head)| {
            streams
                .iter()
                .map(|slot| {
                    let z = tape.matmul_nt(slot[t], bound[head.w])?;
                    tape.add_row(z, bound[head.b])
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(HtanVars { logits, blocks })
}

/// Full forward pass on the tape.
pub fn htan_forward_var(tape: &mut Tape, htan: &Htan, bound: &Bound, inputs: &[Var]) -> Result<HtanVars> {
    let relations = relations_forward(tape, htan, bound, inputs.len())?;
    htan_encode(tape, htan, bound, relations, inputs)
}

/// Full forward pass on concrete values. Returns logits `[task][slot]` and
/// one trace per block.
pub fn htan_forward(htan: &Htan, phi: &ParamSet, x_seq: &[Tensor]) -> Result<(Vec<Vec<Tensor>>, Vec<BlockTrace>)> {
    let mut tape = Tape::new();
    let bound = phi.bind(&mut tape, false);
    let inputs: Vec<Var> = x_seq.iter().map(|x| tape.constant(x.clone())).collect();
    let vars = htan_forward_var(&mut tape, htan, &bound, &inputs)?;
    let logits = vars
        .logits
        .iter()
        .map(|task| task.iter().map(|&v| tape.value(v).clone()).collect())
        .collect();
    let traces = vars.blocks.iter().map(|b| b.trace(&tape)).collect();
    Ok((logits, traces))
}
