//! Joint training of the network (Φ) and its per-block metric networks (Θ).

mod losses;
mod optim;
mod trainer;

pub use losses::{
    distance_tables, loss_phi, loss_phi_var, loss_theta, loss_theta_var, regularizer, regularizer_var,
    task_losses_var, DistanceTable,
};
pub use optim::{ascent_step, directional_derivative, Adam};
pub use trainer::{evaluate, EvalReport, MetricsRecord, StepLog, Trainer};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::apl::gaussian_gram_var;
use crate::autodiff::{Tape, Var};
use crate::config::{self, Section};
use crate::data::RegimeSwitchingSpec;
use crate::error::{Error, Result};
use crate::layers::block::EncoderKind;
use crate::layers::htan::{relations_forward, Htan, HtanConfig};
use crate::params::{Bound, ParamSet};
use crate::spd::{spdnet_step_var, SpdNet};
use crate::tensor::Tensor;

/// Starting metric of each block's recurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpdInit {
    /// Gaussian Gram matrix of the first basis vector.
    Gram,
    Identity,
}

impl std::str::FromStr for SpdInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gram" => Ok(Self::Gram),
            "identity" => Ok(Self::Identity),
            other => Err(Error::Invalid(format!("unknown spd_init '{other}' (gram|identity)"))),
        }
    }
}

impl std::fmt::Display for SpdInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gram => "gram",
            Self::Identity => "identity",
        })
    }
}

/// Model and optimisation settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub tasks: usize,
    pub blocks: usize,
    /// Number of APL basis functions `M`.
    pub basis: usize,
    pub hidden: usize,
    pub aux_hidden: usize,
    /// BiMap/ReEig pairs per metric network.
    pub spd_layers: usize,
    pub encoder: EncoderKind,
    pub spd_init: SpdInit,
    pub lambda: f64,
    pub lr_phi: f64,
    /// First-moment decay of the Φ optimiser. At 0 every Φ-step is a descent
    /// direction of its own batch objective.
    pub momentum: f64,
    pub lr_theta: f64,
    /// Θ is updated every this many batches; `None` never updates it.
    pub theta_period: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Cut the gradient path from the penalty into `β` through the metric.
    pub detach_metric: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tasks: 2,
            blocks: 2,
            basis: 8,
            hidden: 64,
            aux_hidden: 8,
            spd_layers: 2,
            encoder: EncoderKind::Lstm,
            spd_init: SpdInit::Gram,
            lambda: 0.01,
            lr_phi: 1e-3,
            momentum: 0.0,
            lr_theta: 1e-3,
            theta_period: Some(1),
            epochs: 5,
            batch_size: 10,
            seed: 1,
            detach_metric: false,
        }
    }
}

impl TrainConfig {
    /// Keys that belong to the `[model]` section; the rest go under `[train]`.
    pub const MODEL_KEYS: [&'static str; 8] = [
        "tasks",
        "blocks",
        "basis",
        "hidden",
        "aux_hidden",
        "spd_layers",
        "encoder",
        "spd_init",
    ];

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("tasks", self.tasks),
            ("blocks", self.blocks),
            ("basis", self.basis),
            ("hidden", self.hidden),
            ("aux_hidden", self.aux_hidden),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be at least 1")));
            }
        }
        if self.theta_period == Some(0) {
            return Err(Error::Invalid("theta_period must be at least 1 (or 'never')".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        for (name, lr) in [("lr_phi", self.lr_phi), ("lr_theta", self.lr_theta)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be positive, got {lr}")));
            }
        }
        Ok(())
    }

    pub fn htan_config(&self, data: &RegimeSwitchingSpec) -> HtanConfig {
        HtanConfig {
            d_in: data.input_dim,
            d_h: self.hidden,
            m: self.basis,
            tasks: self.tasks,
            blocks: self.blocks,
            classes: data.classes,
            aux_hidden: self.aux_hidden,
            encoder: self.encoder,
        }
    }
}

impl Section for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        let err = |e: Error| e.to_string();
        match key {
            "tasks" => self.tasks = config::parse_usize(value)?,
            "blocks" => self.blocks = config::parse_usize(value)?,
            "basis" => self.basis = config::parse_usize(value)?,
            "hidden" => self.hidden = config::parse_usize(value)?,
            "aux_hidden" => self.aux_hidden = config::parse_usize(value)?,
            "spd_layers" => self.spd_layers = config::parse_usize(value)?,
            "encoder" => self.encoder = value.parse().map_err(err)?,
            "spd_init" => self.spd_init = value.parse().map_err(err)?,
            "lambda" => self.lambda = config::parse_f64(value)?,
            "lr_phi" => self.lr_phi = config::parse_f64(value)?,
            "momentum" => self.momentum = config::parse_f64(value)?,
            "lr_theta" => self.lr_theta = config::parse_f64(value)?,
            "theta_period" => {
                self.theta_period = match value {
                    "never" => None,
                    v => Some(config::parse_usize(v)?),
                }
            }
            "epochs" => self.epochs = config::parse_usize(value)?,
            "batch_size" => self.batch_size = config::parse_usize(value)?,
            "seed" => self.seed = config::parse_u64(value)?,
            "detach_metric" => self.detach_metric = config::parse_bool(value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("tasks", self.tasks.to_string()),
            ("blocks", self.blocks.to_string()),
            ("basis", self.basis.to_string()),
            ("hidden", self.hidden.to_string()),
            ("aux_hidden", self.aux_hidden.to_string()),
            ("spd_layers", self.spd_layers.to_string()),
            ("encoder", self.encoder.to_string()),
            ("spd_init", self.spd_init.to_string()),
            ("lambda", self.lambda.to_string()),
            ("lr_phi", self.lr_phi.to_string()),
            ("momentum", self.momentum.to_string()),
            ("lr_theta", self.lr_theta.to_string()),
            (
                "theta_period",
                self.theta_period.map_or("never".to_string(), |p| p.to_string()),
            ),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("detach_metric", self.detach_metric.to_string()),
        ]
    }
}

/// Network, metric networks and their parameter sets.
#[derive(Debug, Clone)]
pub struct Model {
    pub htan: Htan,
    pub phi: ParamSet,
    pub spdnets: Vec<SpdNet>,
    pub theta: ParamSet,
    pub spd_init: SpdInit,
}

/// Basis, coordinates, metric and squared distances at one (block, slot).
#[derive(Debug, Clone)]
pub struct SlotRelation {
    pub beta: Vec<f64>,
    /// One row per task.
    pub alpha: Vec<Vec<f64>>,
    pub metric: Tensor,
    /// `T×T`; `None` for a single task.
    pub distances: Option<Tensor>,
}

impl Model {
    /// Initialises both parameter sets from `config.seed`.
    pub fn new(config: &TrainConfig, data: &RegimeSwitchingSpec) -> Result<Self> {
        config.validate()?;
        if data.tasks != config.tasks {
            return Err(Error::DimMismatch {
                field: "tasks".into(),
                expected: config.tasks,
                found: data.tasks,
            });
        }
        Self::build(config.htan_config(data), config.spd_layers, config.spd_init, config.seed)
    }

    fn build(hc: HtanConfig, k: usize, spd_init: SpdInit, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut phi = ParamSet::new();
        let htan = Htan::init(hc, &mut phi, &mut rng)?;
        let mut theta = ParamSet::new();
        let spdnets = (0..hc.blocks)
            .map(|l| SpdNet::init(&mut theta, &format!("theta.block{l}"), hc.m, k, &mut rng))
            .collect();
        Ok(Self {
            htan,
            phi,
            spdnets,
            theta,
            spd_init,
        })
    }

    pub fn config(&self) -> &HtanConfig {
        &self.htan.config
    }

    pub fn spd_layers(&self) -> usize {
        self.spdnets.first().map_or(0, |s| s.layers.len())
    }

    /// Named tensors for a checkpoint: `meta.*`, then `phi.*`, then `theta.*`.
    pub fn to_tensors(&self) -> Vec<(String, Tensor)> {
        let c = self.config();
        let meta = [
            ("d_in", c.d_in as f64),
            ("d_h", c.d_h as f64),
            ("m", c.m as f64),
            ("tasks", c.tasks as f64),
            ("blocks", c.blocks as f64),
            ("classes", c.classes as f64),
            ("aux_hidden", c.aux_hidden as f64),
            ("spd_layers", self.spd_layers() as f64),
            ("encoder", f64::from(u8::from(c.encoder == EncoderKind::Attention))),
            ("spd_init", f64::from(u8::from(self.spd_init == SpdInit::Identity))),
        ];
        let mut out: Vec<(String, Tensor)> = meta
            .iter()
            .map(|(k, v)| (format!("meta.{k}"), Tensor::scalar(*v)))
            .collect();
        for set in [&self.phi, &self.theta] {
            out.extend(set.iter().map(|(n, t)| {
                let mut t = t.clone();
                t.grad = None;
                (n.to_string(), t)
            }));
        }
        out
    }

    /// Rebuilds a model from [`Self::to_tensors`] output.
    pub fn from_tensors(tensors: &[(String, Tensor)]) -> Result<Self> {
        let meta = |key: &str| -> Result<usize> {
            let name = format!("meta.{key}");
            let t = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks '{name}'")))?;
            let v = t.data()[0];
            if t.numel() != 1 || v < 0.0 || v.fract() != 0.0 {
                return Err(Error::Format(format!("'{name}' is not a count")));
            }
            Ok(v as usize)
        };
        let hc = HtanConfig {
            d_in: meta("d_in")?,
            d_h: meta("d_h")?,
            m: meta("m")?,
            tasks: meta("tasks")?,
            blocks: meta("blocks")?,
            classes: meta("classes")?,
            aux_hidden: meta("aux_hidden")?,
            encoder: if meta("encoder")? == 1 {
                EncoderKind::Attention
            } else {
                EncoderKind::Lstm
            },
        };
        let spd_init = if meta("spd_init")? == 1 {
            SpdInit::Identity
        } else {
            SpdInit::Gram
        };
        let mut model = Self::build(hc, meta("spd_layers")?, spd_init, 0)?;
        for set in [&mut model.phi, &mut model.theta] {
            let ids: Vec<_> = set.ids().collect();
            for id in ids {
                let name = set.name(id).to_string();
                let stored = tensors
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, t)| t)
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks '{name}'")))?;
                let want = set.get(id).shape().to_vec();
                if stored.shape() != want.as_slice() {
                    return Err(Error::DimMismatch {
                        field: name,
                        expected: want.iter().product(),
                        found: stored.numel(),
                    });
                }
                *set.get_mut(id) = stored.clone();
            }
        }
        Ok(model)
    }

    /// Basis, coordinates, metrics and distances for `slots` slots of every
    /// block. The relation graph does not depend on the input sequence.
    pub fn relation_report(&self, slots: usize) -> Result<Vec<Vec<SlotRelation>>> {
        let mut tape = Tape::new();
        let phi = self.phi.bind(&mut tape, false);
        let theta = self.theta.bind(&mut tape, false);
        let relations = relations_forward(&mut tape, &self.htan, &phi, slots)?;
        let betas: Vec<Vec<Var>> = relations.iter().map(|r| r.beta.clone()).collect();
        let metrics = metric_forward(&mut tape, self, &theta, &betas)?;
        let tables = if self.config().tasks >= 2 {
            Some(distance_tables(
                &mut tape,
                &relations.iter().map(|r| r.alpha.clone()).collect::<Vec<_>>(),
                &metrics,
            )?)
        } else {
            None
        };
        let t = self.config().tasks;
        let mut out = Vec::with_capacity(relations.len());
        for (l, r) in relations.iter().enumerate() {
            let mut block = Vec::with_capacity(slots);
            for n in 0..slots {
                let distances = tables.as_ref().map(|tb| {
                    let data = tb[l][n].iter().map(|&v| tape.scalar(v)).collect();
                    Tensor::matrix(t, t, data).expect("square")
                });
                block.push(SlotRelation {
                    beta: tape.value(r.beta[n]).data().to_vec(),
                    alpha: r.alpha[n].iter().map(|&a| tape.value(a).data().to_vec()).collect(),
                    metric: tape.value(metrics[l][n]).clone(),
                    distances,
                });
            }
            out.push(block);
        }
        Ok(out)
    }
}

/// Metric recurrence `M_{l,n}` for every block, given `betas[l][n]`.
pub fn metric_forward(tape: &mut Tape, model: &Model, theta: &Bound, betas: &[Vec<Var>]) -> Result<Vec<Vec<Var>>> {
    model
        .spdnets
        .iter()
        .zip(betas)
        .map(|(net, b)| {
            let first = *b
                .first()
                .ok_or_else(|| Error::Invalid("metric recurrence over zero slots".into()))?;
            let mut m = match model.spd_init {
                SpdInit::Gram => gaussian_gram_var(tape, first)?,
                SpdInit::Identity => tape.constant(Tensor::identity(net.dim)),
            };
            b.iter()
                .map(|&beta| {
                    m = spdnet_step_var(tape, m, beta, net, theta)?;
                    Ok(m)
                })
                .collect()
        })
        .collect()
}
