//! Gradient verification suite: every tape op, every layer and the whole
//! toy model checked against central differences in double precision.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use crate::architecture::patches::{PatchEmbed, PatchExpand, PatchMerge};
use crate::architecture::{DaeFormer, ModelConfig};
use crate::attention::{
    efficient_attention, scca_attend, standard_attention, transpose_attention, AttentionParams, SccaOrder, SccaParams,
};
use crate::blocks::{BlockParams, ChannelResidual, DualStrategy, MixFfn};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear, TokenMap};
use crate::numerics::rng::{normal, rng, uniform, Rng};
use crate::numerics::tape::{BackwardFn, GATHER_ZERO};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, Tape, Tensor, Var};
use crate::params::{Bound, Initializer, ParamId, ParamStore};
use crate::training::loss::{ce_loss, dice_loss, segmentation_loss};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const BLOCK_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Granularity of a gradient check.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Op,
    Block,
    Model,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::Op, Scope::Block, Scope::Model];

    pub fn tolerance(self) -> f64 {
        match self {
            Scope::Op => OP_TOLERANCE,
            Scope::Block => BLOCK_TOLERANCE,
            Scope::Model => MODEL_TOLERANCE,
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Op => "op",
            Scope::Block => "block",
            Scope::Model => "model",
        })
    }
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "block" => Ok(Scope::Block),
            "model" => Ok(Scope::Model),
            other => Err(Error::Parse(format!("unknown scope {other:?}, expected op, block or model"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub scope: Scope,
    pub report: GradCheckReport,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error <= self.scope.tolerance()
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Adds an op whose backward rule is deliberately wrong, to show the
    /// suite can fail.
    pub corrupt: bool,
}

type Objective = Box<dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>>;

struct Case {
    name: String,
    f: Objective,
    inputs: Vec<Tensor<f64>>,
    max_elements: Option<usize>,
}

fn case(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    f: impl for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static,
) -> Case {
    Case { name: name.to_string(), f: Box::new(f), inputs, max_elements: None }
}

/// `sum(out * R)` for a fixed random `R`, so no output direction cancels.
fn weighted_sum<'t>(out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    // magnitudes bounded away from zero so no output is effectively unobserved
    let magnitude = uniform::<f64>(&mut rng(seed ^ 0x5eed), &out.shape(), 0.5, 1.5);
    let sign = uniform::<f64>(&mut rng(seed ^ 0x516e), &out.shape(), -1.0, 1.0);
    let weights = Tensor::from_fn(out.shape(), |i| magnitude.data()[i].copysign(sign.data()[i]))?;
    out.mul(out.tape().constant(weights))?.sum()
}

fn run(cases: Vec<Case>, scope: Scope, seed: u64) -> Result<Vec<CheckResult>> {
    cases
        .into_iter()
        .map(|c| {
            let opts = GradCheckOptions { max_elements_per_input: c.max_elements, seed, ..Default::default() };
            let report = grad_check(|t, v| (c.f)(t, v), &c.inputs, &opts)?;
            Ok(CheckResult { name: c.name, scope, report })
        })
        .collect()
}

pub fn gradient_suite(scope: Scope, options: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let seed = options.seed;
    let mut cases = match scope {
        Scope::Op => op_cases(seed)?,
        Scope::Block => block_cases(seed)?,
        Scope::Model => vec![model_case(seed)?],
    };
    if options.corrupt {
        cases.push(corrupted_case(seed));
    }
    run(cases, scope, seed)
}

fn n(r: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    normal(r, shape, 1.0)
}

fn u(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    uniform(r, shape, lo, hi)
}

fn op_cases(seed: u64) -> Result<Vec<Case>> {
    let mut r = rng(seed);
    let r = &mut r;
    let s = seed;
    let mut cases = vec![
        case("matmul", vec![n(r, &[5, 4]), n(r, &[4, 3])], move |_, v| weighted_sum(v[0].matmul(v[1])?, s)),
        case("matmul_ta", vec![n(r, &[4, 5]), n(r, &[4, 3])], move |_, v| {
            weighted_sum(v[0].matmul_t(v[1], true, false)?, s)
        }),
        case("matmul_tb", vec![n(r, &[5, 4]), n(r, &[3, 4])], move |_, v| {
            weighted_sum(v[0].matmul_t(v[1], false, true)?, s)
        }),
        case("matmul_ta_tb", vec![n(r, &[4, 5]), n(r, &[3, 4])], move |_, v| {
            weighted_sum(v[0].matmul_t(v[1], true, true)?, s)
        }),
        case("add", vec![n(r, &[4, 3]), n(r, &[4, 3])], move |_, v| weighted_sum(v[0].add(v[1])?, s)),
        case("sub", vec![n(r, &[4, 3]), n(r, &[4, 3])], move |_, v| weighted_sum(v[0].sub(v[1])?, s)),
        case("mul", vec![n(r, &[4, 3]), n(r, &[4, 3])], move |_, v| weighted_sum(v[0].mul(v[1])?, s)),
        case("div", vec![n(r, &[4, 3]), u(r, &[4, 3], 0.5, 2.0)], move |_, v| weighted_sum(v[0].div(v[1])?, s)),
        case("add_bias", vec![n(r, &[5, 3]), n(r, &[3])], move |_, v| weighted_sum(v[0].add_bias(v[1])?, s)),
        case("scale", vec![n(r, &[4, 3])], move |_, v| weighted_sum(v[0].scale(1.7)?, s)),
        case("add_scalar", vec![n(r, &[4, 3])], move |_, v| weighted_sum(v[0].add_scalar(0.3)?, s)),
        case("div_scalar", vec![n(r, &[4, 3]), u(r, &[1], 0.5, 2.0)], move |_, v| {
            weighted_sum(v[0].div_scalar(v[1])?, s)
        }),
        case("softmax_rows", vec![n(r, &[4, 5])], move |_, v| weighted_sum(v[0].softmax(1)?, s)),
        case("softmax_cols", vec![n(r, &[4, 5])], move |_, v| weighted_sum(v[0].softmax(0)?, s)),
        case("softmax_middle_axis", vec![n(r, &[2, 3, 4])], move |_, v| weighted_sum(v[0].softmax(1)?, s)),
        case("l2_normalize", vec![n(r, &[6, 3])], move |_, v| weighted_sum(v[0].l2_normalize(0, 1e-12)?, s)),
        case("layer_norm", vec![n(r, &[4, 6]), n(r, &[6]), n(r, &[6])], move |_, v| {
            weighted_sum(v[0].layer_norm(v[1], v[2], 1e-6)?, s)
        }),
        case("gelu", vec![n(r, &[4, 5])], move |_, v| weighted_sum(v[0].gelu()?, s)),
        case("log", vec![u(r, &[4, 3], 0.5, 2.0)], move |_, v| weighted_sum(v[0].log()?, s)),
        case("clamp", vec![u(r, &[4, 3], -1.0, 1.0)], move |_, v| weighted_sum(v[0].clamp(-0.5, 0.5)?, s)),
        case("sum", vec![n(r, &[4, 3])], move |_, v| v[0].sum()?.scale(1.3)),
        case("mean", vec![n(r, &[4, 3])], move |_, v| v[0].mean()?.scale(1.3)),
        case("sum_axis0", vec![n(r, &[4, 3])], move |_, v| weighted_sum(v[0].sum_axis(0)?, s)),
        case("sum_axis1", vec![n(r, &[4, 3])], move |_, v| weighted_sum(v[0].sum_axis(1)?, s)),
        case("concat_cols", vec![n(r, &[4, 2]), n(r, &[4, 3])], move |_, v| {
            weighted_sum(v[0].concat_cols(v[1])?, s)
        }),
        case("reshape", vec![n(r, &[4, 3])], move |_, v| weighted_sum(v[0].reshape(vec![2, 6])?, s)),
        case("transpose", vec![n(r, &[4, 3])], move |_, v| weighted_sum(v[0].transpose()?, s)),
        case("dwconv3x3", vec![n(r, &[12, 5]), n(r, &[3, 3, 5]), n(r, &[5])], move |_, v| {
            weighted_sum(v[0].dwconv3x3(v[1], v[2], 3, 4)?, s)
        }),
    ];
    // repeated sources and zero fill both exercised
    let index: Rc<[u32]> = (0..15u32).map(|i| if i % 4 == 3 { GATHER_ZERO } else { (i * 5) % 12 }).collect();
    cases.push(case("gather", vec![n(r, &[3, 4])], move |_, v| {
        weighted_sum(v[0].gather(index.clone(), vec![5, 3])?, s)
    }));

    let qkv = |r: &mut Rng, dv: usize| vec![n(r, &[6, 4]), n(r, &[6, 4]), n(r, &[6, dv])];
    cases.push(case("standard_attention", qkv(r, 3), move |_, v| {
        weighted_sum(standard_attention(v[0], v[1], v[2])?, s)
    }));
    cases.push(case("efficient_attention", qkv(r, 3), move |_, v| {
        weighted_sum(efficient_attention(v[0], v[1], v[2])?, s)
    }));
    let mut tinputs = qkv(r, 4);
    tinputs.push(u(r, &[1], 0.5, 2.0));
    cases.push(case("transpose_attention", tinputs, move |_, v| {
        weighted_sum(transpose_attention(v[0], v[1], v[2], v[3])?, s)
    }));
    for (name, order) in [("scca_as_printed", SccaOrder::AsPrinted), ("scca_efficient_order", SccaOrder::EfficientOrder)] {
        cases.push(case(name, qkv(r, 4), move |_, v| weighted_sum(scca_attend(v[0], v[1], v[2], order)?, s)));
    }

    let labels: Vec<u32> = (0..16).map(|i| (i * 7 % 3) as u32).collect();
    let onehot = crate::training::loss::one_hot::<f64>(&labels, 3)?;
    let y = onehot.clone();
    // probabilities directly: through a softmax the dice gradient can cancel to ~1e-8
    cases.push(case("dice_loss", vec![u(r, &[16, 3], 0.05, 0.95)], move |t, v| dice_loss(t.constant(y.clone()), v[0])));
    let y = onehot;
    cases.push(case("ce_loss", vec![u(r, &[16, 3], 0.05, 0.95)], move |t, v| ce_loss(t.constant(y.clone()), v[0])));
    cases.push(case("total_loss", vec![n(r, &[4, 4, 3])], move |_, v| Ok(segmentation_loss(v[0], &labels)?.total)));
    Ok(cases)
}

/// `x^2` whose backward forgets the factor 2.
fn corrupted_case(seed: u64) -> Case {
    let x = normal::<f64>(&mut rng(seed ^ 0xbad), &[3, 3], 1.0);
    case("corrupted_square", vec![x], move |_, v| {
        let backward: BackwardFn<f64> = Rc::new(|ins, _out, g| {
            vec![ins[0].data().iter().zip(g).map(|(&x, &g)| g * x).collect()]
        });
        let sq = Var::custom(&[v[0]], |ins| ins[0].map(|x| x * x), backward)?;
        weighted_sum(sq, seed)
    })
}

/// Scale of the random perturbation added to every layer parameter, so
/// checks do not run at the near-linear initial point.
const PARAM_JITTER: f64 = 0.3;

/// A layer checked with respect to its input and all of its parameters.
fn layer_case<M: 'static>(
    name: &str,
    seed: u64,
    x_shape: &[usize],
    build: impl FnOnce(&mut Initializer<'_, f64>) -> Result<M>,
    forward: impl for<'t> Fn(&M, &Bound<'t, f64>, Var<'t, f64>) -> Result<Var<'t, f64>> + 'static,
) -> Result<Case> {
    let mut store = ParamStore::<f64>::new();
    let mut r = rng(seed);
    let module = build(&mut Initializer::new(&mut store, &mut r))?;
    let mut inputs = vec![normal(&mut r, x_shape, 1.0)];
    for (_, p) in store.iter() {
        let jitter = normal::<f64>(&mut r, p.value.shape(), PARAM_JITTER);
        let data = p.value.data().iter().zip(jitter.data()).map(|(a, b)| a + b).collect();
        inputs.push(Tensor::new(p.value.shape().to_vec(), data)?);
    }
    // temperatures must stay positive
    for (i, (name, _)) in store.iter().enumerate() {
        if name.ends_with("tau") {
            inputs[i + 1] = Tensor::new(vec![1], vec![0.8])?;
        }
    }
    Ok(case(name, inputs, move |_, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        weighted_sum(forward(&module, &p, v[0])?, seed)
    }))
}

fn grid_forward<'t>(x: Var<'t, f64>, grid: (usize, usize)) -> Result<TokenMap<'t, f64>> {
    TokenMap::new(x, grid.0, grid.1)
}

fn block_cases(seed: u64) -> Result<Vec<Case>> {
    let grid = (3, 4);
    let tokens = grid.0 * grid.1;
    let d = 4;
    let mut cases = vec![
        layer_case("linear", seed, &[5, 4], |i| Linear::new(i, "fc", 4, 3, true), |m, p, x| m.forward(p, x))?,
        layer_case("layer_norm_module", seed, &[5, 4], |i| LayerNorm::new(i, "ln", 4), |m, p, x| m.forward(p, x))?,
        layer_case("mix_ffn", seed, &[tokens, d], |i| MixFfn::new(i, "ffn", d, 2 * d, d), move |m, p, x| {
            m.forward(p, x, grid)
        })?,
        layer_case("efficient_attention_layer", seed, &[tokens, d], |i| AttentionParams::efficient(i, "e", d), |m, p, x| {
            m.efficient_forward(p, x)
        })?,
        layer_case("transpose_attention_layer", seed, &[tokens, d], |i| AttentionParams::transpose(i, "t", d), |m, p, x| {
            m.transpose_forward(p, x)
        })?,
    ];
    for order in [SccaOrder::AsPrinted, SccaOrder::EfficientOrder] {
        let name = match order {
            SccaOrder::AsPrinted => "scca_layer",
            SccaOrder::EfficientOrder => "scca_layer_efficient_order",
        };
        // the skip feature is registered as an extra parameter
        let build = |i: &mut Initializer<'_, f64>| -> Result<(SccaParams, ParamId)> {
            let scca = SccaParams::new(i, "scca", 2 * d, d)?;
            let skip = i.param("skip", &[tokens, d], crate::params::InitKind::TruncNormal(1.0))?;
            Ok((scca, skip))
        };
        cases.push(layer_case(name, seed, &[tokens, 2 * d], build, move |(m, skip), p, x| {
            m.forward(p, x, p[*skip], order)
        })?);
    }
    for strategy in DualStrategy::ALL {
        let name = format!("dual_block_{}", strategy.name());
        cases.push(layer_case(&name, seed, &[tokens, d], |i| BlockParams::new(i, "block", d, 2, strategy), move |m, p, x| {
            Ok(m.forward(p, grid_forward(x, grid)?)?.tokens())
        })?);
    }
    cases.push(layer_case(
        "dual_block_sequential_mlp_residual",
        seed,
        &[tokens, d],
        |i| {
            let mut b = BlockParams::new(i, "block", d, 2, DualStrategy::Sequential)?;
            b.channel_residual = ChannelResidual::MlpOutput;
            Ok(b)
        },
        move |m, p, x| Ok(m.forward(p, grid_forward(x, grid)?)?.tokens()),
    )?);
    cases.push(layer_case("patch_embed", seed, &[8, 8, 2], |i| PatchEmbed::new(i, "embed", 2, d), |m, p, x| {
        Ok(m.forward(p, x)?.tokens())
    })?);
    cases.push(layer_case("patch_merge", seed, &[16, 3], |i| PatchMerge::new(i, "merge", 3), |m, p, x| {
        Ok(m.forward(p, grid_forward(x, (4, 4))?)?.tokens())
    })?);
    for factor in [2, 4] {
        let name = format!("patch_expand_x{factor}");
        cases.push(layer_case(&name, seed, &[4, 16], |i| PatchExpand::new(i, "expand", 16, factor), |m, p, x| {
            Ok(m.forward(p, grid_forward(x, (2, 2))?)?.tokens())
        })?);
    }
    Ok(cases)
}

/// Side of the image used for the whole-model check.
pub const MODEL_CHECK_SIZE: usize = 16;
/// Elements sampled from each input tensor in the whole-model check.
pub const MODEL_CHECK_ELEMENTS: usize = 3;

/// Mean logit of the toy model on one random image, checked with respect
/// to the image and a sample of every parameter tensor.
fn model_case(seed: u64) -> Result<Case> {
    let config = ModelConfig { image_size: MODEL_CHECK_SIZE, seed, ..ModelConfig::toy() };
    let (model, store) = DaeFormer::build::<f64>(&config)?;
    let mut r = rng(seed ^ 0x40de1);
    let image = normal(&mut r, &[MODEL_CHECK_SIZE, MODEL_CHECK_SIZE, config.in_channels], 1.0);
    let mut inputs = vec![image];
    inputs.extend(store.iter().map(|(_, p)| p.value.clone()));
    let mut c = case("toy_model", inputs, move |_, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        model.forward(&p, v[0])?.mean()
    });
    c.max_elements = Some(MODEL_CHECK_ELEMENTS);
    Ok(c)
}
