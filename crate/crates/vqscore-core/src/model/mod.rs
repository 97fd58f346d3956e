//! Model definition: configuration, the complete trainable parameter set,
//! seeded initialization, and the binding of parameters onto an autodiff
//! tape.
//!
//! The network runs downstream of frozen encoders: frame and cover
//! embeddings pass through a learned projection and a two-layer transformer
//! with a classification token; the text embedding through its own
//! projection; four branch heads and a squeeze-excitation aggregator produce
//! the final score.

mod aggregate;
mod branches;
mod temporal;

pub use aggregate::{forward_record, se_aggregate, RecordForward, SeOut};
pub use branches::{fcab_score, fqab_score, tqab_score, vtmab_score, VtmabScores};
pub use temporal::{encode_video, project_text, VideoRepr};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::MAX_FRAMES;
use crate::tensor::{NodeId, Scalar, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model configuration invalid: {0}")]
    Config(String),
    #[error("input does not fit the model: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which of the four branches feed the aggregator. Disabling a branch for an
/// ablation shrinks the excitation head and the score vector to the enabled
/// set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BranchMask {
    pub video_text: bool,
    pub frame_coherence: bool,
    pub frame_quality: bool,
    pub text_quality: bool,
}

impl Default for BranchMask {
    fn default() -> Self {
        BranchMask {
            video_text: true,
            frame_coherence: true,
            frame_quality: true,
            text_quality: true,
        }
    }
}

impl BranchMask {
    pub fn enabled(self) -> [bool; 4] {
        [
            self.video_text,
            self.frame_coherence,
            self.frame_quality,
            self.text_quality,
        ]
    }

    pub fn enabled_count(self) -> usize {
        self.enabled().iter().filter(|&&e| e).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Text embedding input dimension.
    pub d_t: usize,
    /// Frame embedding input dimension.
    pub d_f: usize,
    /// Model (hidden) dimension.
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    /// Sequence capacity excluding the classification token: frame slots
    /// plus the two dedicated cover slots at the end.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub branches: BranchMask,
    /// Unit-normalize vectors before the matching dot products. Off by
    /// default: the matching scores are raw dot products.
    #[serde(default)]
    pub normalize_dots: bool,
}

fn default_d() -> usize {
    32
}

fn default_heads() -> usize {
    4
}

fn default_max_len() -> usize {
    MAX_FRAMES + 2
}

impl ModelConfig {
    pub fn new(d_t: usize, d_f: usize) -> Self {
        ModelConfig {
            d_t,
            d_f,
            d: default_d(),
            n_heads: default_heads(),
            max_len: default_max_len(),
            branches: BranchMask::default(),
            normalize_dots: false,
        }
    }

    /// Hidden width of the two MLP branch heads.
    pub fn mlp_hidden(&self) -> usize {
        (self.d / 2).max(1)
    }

    /// Feed-forward inner width of the transformer layers.
    pub fn ff_dim(&self) -> usize {
        4 * self.d
    }

    /// Frame capacity: sequence slots minus the two cover slots.
    pub fn frame_capacity(&self) -> usize {
        self.max_len - 2
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_t == 0 || self.d_f == 0 {
            return Err(ModelError::Config("embedding dims must be positive".into()));
        }
        if self.d < 2 {
            return Err(ModelError::Config(format!("d = {} too small", self.d)));
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d = {} not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        if self.max_len < MAX_FRAMES + 2 {
            return Err(ModelError::Config(format!(
                "max_len = {} cannot hold {MAX_FRAMES} frames plus 2 covers",
                self.max_len
            )));
        }
        if self.branches.enabled_count() == 0 {
            return Err(ModelError::Config("at least one branch must be enabled".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<F: Scalar> {
    pub w1: Tensor<F>,
    pub b1: Tensor<F>,
    pub w2: Tensor<F>,
    pub b2: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F: Scalar> {
    pub wq: Tensor<F>,
    pub bq: Tensor<F>,
    pub wk: Tensor<F>,
    pub bk: Tensor<F>,
    pub wv: Tensor<F>,
    pub bv: Tensor<F>,
    pub wo: Tensor<F>,
    pub bo: Tensor<F>,
    pub ff1_w: Tensor<F>,
    pub ff1_b: Tensor<F>,
    pub ff2_w: Tensor<F>,
    pub ff2_b: Tensor<F>,
    pub ln1_gamma: Tensor<F>,
    pub ln1_beta: Tensor<F>,
    pub ln2_gamma: Tensor<F>,
    pub ln2_beta: Tensor<F>,
}

/// Every trainable tensor in the model. Tensor names and iteration order are
/// canonical: initialization draws, optimizer state, and checkpoints all
/// rely on [`ModelParams::visit`] order being stable.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<F: Scalar> {
    pub config: ModelConfig,
    pub frame_proj_w: Tensor<F>,
    pub frame_proj_b: Tensor<F>,
    pub text_proj_w: Tensor<F>,
    pub text_proj_b: Tensor<F>,
    pub cls: Tensor<F>,
    pub pos: Tensor<F>,
    pub layers: Vec<LayerParams<F>>,
    pub w_c: Tensor<F>,
    pub mlp_f: MlpParams<F>,
    pub mlp_t: MlpParams<F>,
    pub w_s: Tensor<F>,
    pub w_e: Tensor<F>,
}

/// Transformer depth. Fixed by the architecture, not configurable.
pub const N_LAYERS: usize = 2;

/// Scale of the classification-token and position initializers.
const TOKEN_INIT_STD: f64 = 0.02;

impl<F: Scalar> ModelParams<F> {
    /// Fresh parameters drawn from `rng`: weights uniform in
    /// `±1/sqrt(fan_in)`, token and position embeddings from a small normal,
    /// biases zero, layer norms at identity. Draw order is `visit` order.
    pub fn init(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d;
        let h = config.mlp_hidden();
        let ff = config.ff_dim();
        let normal = Normal::new(0.0f64, TOKEN_INIT_STD).expect("valid normal");

        let weight = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let limit = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols)
                .map(|_| F::from_f64(rng.gen_range(-limit..limit)))
                .collect();
            Tensor::from_parts(vec![rows, cols], data)
        };
        let token = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            let data = (0..rows * cols)
                .map(|_| F::from_f64(normal.sample(rng)))
                .collect();
            Tensor::from_parts(vec![rows, cols], data)
        };
        let zeros = |n: usize| Tensor::zeros(vec![n]);
        let ones = |n: usize| Tensor::from_parts(vec![n], vec![F::one(); n]);

        let frame_proj_w = weight(config.d_f, d, rng);
        let frame_proj_b = zeros(d);
        let text_proj_w = weight(config.d_t, d, rng);
        let text_proj_b = zeros(d);
        let cls = token(1, d, rng);
        let pos = token(config.max_len + 1, d, rng);
        let mut layers = Vec::with_capacity(N_LAYERS);
        for _ in 0..N_LAYERS {
            layers.push(LayerParams {
                wq: weight(d, d, rng),
                bq: zeros(d),
                wk: weight(d, d, rng),
                bk: zeros(d),
                wv: weight(d, d, rng),
                bv: zeros(d),
                wo: weight(d, d, rng),
                bo: zeros(d),
                ff1_w: weight(d, ff, rng),
                ff1_b: zeros(ff),
                ff2_w: weight(ff, d, rng),
                ff2_b: zeros(d),
                ln1_gamma: ones(d),
                ln1_beta: zeros(d),
                ln2_gamma: ones(d),
                ln2_beta: zeros(d),
            });
        }
        let w_c = weight(d, 1, rng);
        let mlp = |rng: &mut ChaCha8Rng| MlpParams {
            w1: weight(d, h, rng),
            b1: zeros(h),
            w2: weight(h, 1, rng),
            b2: zeros(1),
        };
        let mlp_f = mlp(rng);
        let mlp_t = mlp(rng);
        let w_s = weight(d, 1, rng);
        let w_e = weight(2, config.branches.enabled_count(), rng);

        Ok(ModelParams {
            config,
            frame_proj_w,
            frame_proj_b,
            text_proj_w,
            text_proj_b,
            cls,
            pos,
            layers,
            w_c,
            mlp_f,
            mlp_t,
            w_s,
            w_e,
        })
    }

    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init(config, &mut rng)
    }

    /// All-zero parameters with the shapes `config` dictates, as a shell to
    /// fill from a checkpoint.
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = Self::init(config, &mut rng)?;
        p.visit_mut(|_, t| t.data_mut().fill(F::zero()));
        Ok(p)
    }

    /// Visits every tensor with its canonical name, in canonical order.
    pub fn visit(&self, mut f: impl FnMut(String, &Tensor<F>)) {
        f("frame_proj.w".into(), &self.frame_proj_w);
        f("frame_proj.b".into(), &self.frame_proj_b);
        f("text_proj.w".into(), &self.text_proj_w);
        f("text_proj.b".into(), &self.text_proj_b);
        f("cls".into(), &self.cls);
        f("pos".into(), &self.pos);
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("layers.{i}.attn.wq"), &l.wq);
            f(format!("layers.{i}.attn.bq"), &l.bq);
            f(format!("layers.{i}.attn.wk"), &l.wk);
            f(format!("layers.{i}.attn.bk"), &l.bk);
            f(format!("layers.{i}.attn.wv"), &l.wv);
            f(format!("layers.{i}.attn.bv"), &l.bv);
            f(format!("layers.{i}.attn.wo"), &l.wo);
            f(format!("layers.{i}.attn.bo"), &l.bo);
            f(format!("layers.{i}.ff1.w"), &l.ff1_w);
            f(format!("layers.{i}.ff1.b"), &l.ff1_b);
            f(format!("layers.{i}.ff2.w"), &l.ff2_w);
            f(format!("layers.{i}.ff2.b"), &l.ff2_b);
            f(format!("layers.{i}.ln1.gamma"), &l.ln1_gamma);
            f(format!("layers.{i}.ln1.beta"), &l.ln1_beta);
            f(format!("layers.{i}.ln2.gamma"), &l.ln2_gamma);
            f(format!("layers.{i}.ln2.beta"), &l.ln2_beta);
        }
        f("fcab.w_c".into(), &self.w_c);
        f("fqab.w1".into(), &self.mlp_f.w1);
        f("fqab.b1".into(), &self.mlp_f.b1);
        f("fqab.w2".into(), &self.mlp_f.w2);
        f("fqab.b2".into(), &self.mlp_f.b2);
        f("tqab.w1".into(), &self.mlp_t.w1);
        f("tqab.b1".into(), &self.mlp_t.b1);
        f("tqab.w2".into(), &self.mlp_t.w2);
        f("tqab.b2".into(), &self.mlp_t.b2);
        f("se.w_s".into(), &self.w_s);
        f("se.w_e".into(), &self.w_e);
    }

    /// Mutable twin of [`ModelParams::visit`], same names and order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(String, &mut Tensor<F>)) {
        f("frame_proj.w".into(), &mut self.frame_proj_w);
        f("frame_proj.b".into(), &mut self.frame_proj_b);
        f("text_proj.w".into(), &mut self.text_proj_w);
        f("text_proj.b".into(), &mut self.text_proj_b);
        f("cls".into(), &mut self.cls);
        f("pos".into(), &mut self.pos);
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(format!("layers.{i}.attn.wq"), &mut l.wq);
            f(format!("layers.{i}.attn.bq"), &mut l.bq);
            f(format!("layers.{i}.attn.wk"), &mut l.wk);
            f(format!("layers.{i}.attn.bk"), &mut l.bk);
            f(format!("layers.{i}.attn.wv"), &mut l.wv);
            f(format!("layers.{i}.attn.bv"), &mut l.bv);
            f(format!("layers.{i}.attn.wo"), &mut l.wo);
            f(format!("layers.{i}.attn.bo"), &mut l.bo);
            f(format!("layers.{i}.ff1.w"), &mut l.ff1_w);
            f(format!("layers.{i}.ff1.b"), &mut l.ff1_b);
            f(format!("layers.{i}.ff2.w"), &mut l.ff2_w);
            f(format!("layers.{i}.ff2.b"), &mut l.ff2_b);
            f(format!("layers.{i}.ln1.gamma"), &mut l.ln1_gamma);
            f(format!("layers.{i}.ln1.beta"), &mut l.ln1_beta);
            f(format!("layers.{i}.ln2.gamma"), &mut l.ln2_gamma);
            f(format!("layers.{i}.ln2.beta"), &mut l.ln2_beta);
        }
        f("fcab.w_c".into(), &mut self.w_c);
        f("fqab.w1".into(), &mut self.mlp_f.w1);
        f("fqab.b1".into(), &mut self.mlp_f.b1);
        f("fqab.w2".into(), &mut self.mlp_f.w2);
        f("fqab.b2".into(), &mut self.mlp_f.b2);
        f("tqab.w1".into(), &mut self.mlp_t.w1);
        f("tqab.b1".into(), &mut self.mlp_t.b1);
        f("tqab.w2".into(), &mut self.mlp_t.w2);
        f("tqab.b2".into(), &mut self.mlp_t.b2);
        f("se.w_s".into(), &mut self.w_s);
        f("se.w_e".into(), &mut self.w_e);
    }

    pub fn tensor_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _| n += 1);
        n
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, t| n += t.numel());
        n
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            frame_proj_w: self.frame_proj_w.cast(),
            frame_proj_b: self.frame_proj_b.cast(),
            text_proj_w: self.text_proj_w.cast(),
            text_proj_b: self.text_proj_b.cast(),
            cls: self.cls.cast(),
            pos: self.pos.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    wq: l.wq.cast(),
                    bq: l.bq.cast(),
                    wk: l.wk.cast(),
                    bk: l.bk.cast(),
                    wv: l.wv.cast(),
                    bv: l.bv.cast(),
                    wo: l.wo.cast(),
                    bo: l.bo.cast(),
                    ff1_w: l.ff1_w.cast(),
                    ff1_b: l.ff1_b.cast(),
                    ff2_w: l.ff2_w.cast(),
                    ff2_b: l.ff2_b.cast(),
                    ln1_gamma: l.ln1_gamma.cast(),
                    ln1_beta: l.ln1_beta.cast(),
                    ln2_gamma: l.ln2_gamma.cast(),
                    ln2_beta: l.ln2_beta.cast(),
                })
                .collect(),
            w_c: self.w_c.cast(),
            mlp_f: MlpParams {
                w1: self.mlp_f.w1.cast(),
                b1: self.mlp_f.b1.cast(),
                w2: self.mlp_f.w2.cast(),
                b2: self.mlp_f.b2.cast(),
            },
            mlp_t: MlpParams {
                w1: self.mlp_t.w1.cast(),
                b1: self.mlp_t.b1.cast(),
                w2: self.mlp_t.w2.cast(),
                b2: self.mlp_t.b2.cast(),
            },
            w_s: self.w_s.cast(),
            w_e: self.w_e.cast(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MlpNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ff1_w: NodeId,
    pub ff1_b: NodeId,
    pub ff2_w: NodeId,
    pub ff2_b: NodeId,
    pub ln1_gamma: NodeId,
    pub ln1_beta: NodeId,
    pub ln2_gamma: NodeId,
    pub ln2_beta: NodeId,
}

/// The parameter set bound onto one tape as graph leaves. `ordered` mirrors
/// [`ModelParams::visit`] order, which lets gradients be read back aligned
/// to the optimizer's buffers.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub frame_proj_w: NodeId,
    pub frame_proj_b: NodeId,
    pub text_proj_w: NodeId,
    pub text_proj_b: NodeId,
    pub cls: NodeId,
    pub pos: NodeId,
    pub layers: Vec<LayerNodes>,
    pub w_c: NodeId,
    pub mlp_f: MlpNodes,
    pub mlp_t: MlpNodes,
    pub w_s: NodeId,
    pub w_e: NodeId,
    pub ordered: Vec<NodeId>,
}

/// Binds every parameter tensor as a leaf on `tape`. With `trainable`, the
/// leaves require gradients and [`Tape::backward`] reports them.
pub fn bind_params<F: Scalar>(
    tape: &mut Tape<F>,
    params: &ModelParams<F>,
    trainable: bool,
) -> ParamNodes {
    let mut ordered = Vec::with_capacity(params.tensor_count());
    let mut leaf = |tape: &mut Tape<F>, t: &Tensor<F>| {
        let tensor = if trainable {
            t.clone().with_grad()
        } else {
            t.clone()
        };
        let id = tape.leaf(tensor);
        ordered.push(id);
        id
    };
    let frame_proj_w = leaf(tape, &params.frame_proj_w);
    let frame_proj_b = leaf(tape, &params.frame_proj_b);
    let text_proj_w = leaf(tape, &params.text_proj_w);
    let text_proj_b = leaf(tape, &params.text_proj_b);
    let cls = leaf(tape, &params.cls);
    let pos = leaf(tape, &params.pos);
    let layers = params
        .layers
        .iter()
        .map(|l| LayerNodes {
            wq: leaf(tape, &l.wq),
            bq: leaf(tape, &l.bq),
            wk: leaf(tape, &l.wk),
            bk: leaf(tape, &l.bk),
            wv: leaf(tape, &l.wv),
            bv: leaf(tape, &l.bv),
            wo: leaf(tape, &l.wo),
            bo: leaf(tape, &l.bo),
            ff1_w: leaf(tape, &l.ff1_w),
            ff1_b: leaf(tape, &l.ff1_b),
            ff2_w: leaf(tape, &l.ff2_w),
            ff2_b: leaf(tape, &l.ff2_b),
            ln1_gamma: leaf(tape, &l.ln1_gamma),
            ln1_beta: leaf(tape, &l.ln1_beta),
            ln2_gamma: leaf(tape, &l.ln2_gamma),
            ln2_beta: leaf(tape, &l.ln2_beta),
        })
        .collect();
    let w_c = leaf(tape, &params.w_c);
    let mlp_f = MlpNodes {
        w1: leaf(tape, &params.mlp_f.w1),
        b1: leaf(tape, &params.mlp_f.b1),
        w2: leaf(tape, &params.mlp_f.w2),
        b2: leaf(tape, &params.mlp_f.b2),
    };
    let mlp_t = MlpNodes {
        w1: leaf(tape, &params.mlp_t.w1),
        b1: leaf(tape, &params.mlp_t.b1),
        w2: leaf(tape, &params.mlp_t.w2),
        b2: leaf(tape, &params.mlp_t.b2),
    };
    let w_s = leaf(tape, &params.w_s);
    let w_e = leaf(tape, &params.w_e);
    ParamNodes {
        frame_proj_w,
        frame_proj_b,
        text_proj_w,
        text_proj_b,
        cls,
        pos,
        layers,
        w_c,
        mlp_f,
        mlp_t,
        w_s,
        w_e,
        ordered,
    }
}
