//! Hard-sharing and cross-stitch multitask networks.
//!
//! Both architectures share one convolutional stack layout (see
//! [`TrunkLayout`]): five valid-padding conv blocks (ELU followed by
//! multiplicative and additive gaussian noise, max pooling along frequency
//! after blocks 2 and 3) and a dense ELU layer. The fourth conv spans the
//! remaining frequency axis and the fifth the remaining time axis, so an
//! 11×144 snippet reaches the dense layer as a 1×1 feature map.
//!
//! Hard sharing runs one such stack feeding five task heads. Cross-stitch
//! runs one narrower stack per task and mixes the five activations after
//! every block with a trainable 5×5 matrix (one matrix per block, shared
//! over channels and positions).

mod spec;

use rand::SeedableRng;
use thiserror::Error;

use crate::autodiff::{
    derive_seed, elu_with_noise, glorot_uniform, AutodiffError, BoundParams, Element, Graph,
    ParamStore, RunRng, Tensor, Var,
};
use crate::features::{CONTEXT_FRAMES, N_BINS};

pub use spec::{
    AlphaInit, Architecture, ModelSpec, StitchMode, Task, TrunkLayout, NUM_KEYS, NUM_TASKS,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite activation after {0}")]
    NonFiniteActivation(String),
    #[error("input batch has shape {0:?}, expected [1, N, {CONTEXT_FRAMES}, {N_BINS}]")]
    BadInput(Vec<usize>),
}

const CONV_KERNELS: usize = 5;

/// Graph handles produced by one forward pass.
pub struct ForwardPass {
    /// Prediction node per task, in [`Task::ALL`] order. Shapes are
    /// `[N, 88]` for key-wise tasks and `[N, 1]` for sustain.
    pub outputs: [Var; NUM_TASKS],
    pub params: BoundParams,
}

/// Eval-mode outputs for a batch, row-major `[N, 88]` / `[N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPredictions<T> {
    pub batch: usize,
    pub onset: Vec<T>,
    pub intermediate: Vec<T>,
    pub offset: Vec<T>,
    pub velocity: Vec<T>,
    pub sustain: Vec<T>,
}

impl<T: Element> BatchPredictions<T> {
    pub fn task(&self, task: Task) -> &[T] {
        match task {
            Task::Onset => &self.onset,
            Task::Intermediate => &self.intermediate,
            Task::Offset => &self.offset,
            Task::Velocity => &self.velocity,
            Task::Sustain => &self.sustain,
        }
    }
}

/// Seed of the generator that initialises tower `task` of a cross-stitch
/// network (and the equivalent standalone single-task network).
pub fn tower_seed(seed: u64, task: Task) -> u64 {
    derive_seed(seed, task.index() as u64 + 1)
}

fn conv_shapes(layout: &TrunkLayout) -> [(usize, usize, usize, usize); CONV_KERNELS] {
    // (in_channels, out_channels, kernel_time, kernel_freq)
    let c = layout.conv_channels;
    let (t_rem, f_rem) = layout.extent_before_block4();
    [
        (1, c[0], 3, 3),
        (c[0], c[1], 3, 3),
        (c[1], c[2], 3, 3),
        (c[2], c[3], 3, f_rem),
        (c[3], c[4], t_rem - 2, 1),
    ]
}

fn add_conv<T: Element>(
    store: &mut ParamStore<T>,
    name: &str,
    (cin, cout, kh, kw): (usize, usize, usize, usize),
    rng: &mut RunRng,
) {
    let w = glorot_uniform::<T>(cin * kh * kw, cout * kh * kw, cout * cin * kh * kw, rng);
    store.insert(
        format!("{name}.weight"),
        Tensor::new(vec![cout, cin, kh, kw], w).unwrap(),
    );
    store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
}

fn add_dense<T: Element>(
    store: &mut ParamStore<T>,
    name: &str,
    inp: usize,
    out: usize,
    rng: &mut RunRng,
) {
    let w = glorot_uniform::<T>(inp, out, out * inp, rng);
    store.insert(
        format!("{name}.weight"),
        Tensor::new(vec![out, inp], w).unwrap(),
    );
    store.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
}

/// Parameters of one conv stack + dense layer under `prefix`.
fn init_stack<T: Element>(
    store: &mut ParamStore<T>,
    prefix: &str,
    layout: &TrunkLayout,
    rng: &mut RunRng,
) {
    for (i, shape) in conv_shapes(layout).into_iter().enumerate() {
        add_conv(store, &format!("{prefix}conv{}", i + 1), shape, rng);
    }
    add_dense(
        store,
        &format!("{prefix}dense"),
        layout.conv_channels[4],
        layout.dense_units,
        rng,
    );
}

fn head_name(prefix: &str, task: Task) -> String {
    format!("{prefix}head.{}", task.short_name())
}

/// One stack plus one head: the standalone network for a single task, also
/// used for every tower of a cross-stitch network.
fn init_tower<T: Element>(
    store: &mut ParamStore<T>,
    prefix: &str,
    task: Task,
    layout: &TrunkLayout,
    seed: u64,
) {
    let mut rng = RunRng::seed_from_u64(seed);
    init_stack(store, prefix, layout, &mut rng);
    add_dense(
        store,
        &head_name(prefix, task),
        layout.dense_units,
        task.units(),
        &mut rng,
    );
}

fn check_finite<T: Element>(g: &Graph<T>, v: Var, layer: &str) -> Result<(), ModelError> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFiniteActivation(layer.to_string()))
    }
}

struct BlockCtx<'a> {
    params: &'a BoundParams,
    prefix: &'a str,
    noise_sigma: f64,
}

/// Block `index` (0-based, six blocks) of a stack.
fn run_block<T: Element>(
    g: &mut Graph<T>,
    ctx: &BlockCtx<'_>,
    index: usize,
    x: Var,
    rng: &mut Option<&mut RunRng>,
) -> Result<Var, ModelError> {
    let p = ctx.prefix;
    let layer = if index < CONV_KERNELS {
        format!("{p}conv{}", index + 1)
    } else {
        format!("{p}dense")
    };
    let out = if index < CONV_KERNELS {
        let w = ctx.params.var(&format!("{layer}.weight"));
        let b = ctx.params.var(&format!("{layer}.bias"));
        let y = g.conv2d(x, w, b, (1, 1))?;
        let mut y = match rng.as_deref_mut() {
            Some(r) => elu_with_noise(g, y, ctx.noise_sigma, r)?,
            None => g.elu(y),
        };
        if index == 1 || index == 2 {
            y = g.max_pool2d(y, (1, 2))?;
        }
        y
    } else {
        let flat = g.channels_to_batch(x)?;
        let w = ctx.params.var(&format!("{layer}.weight"));
        let b = ctx.params.var(&format!("{layer}.bias"));
        let y = g.dense(flat, w, b)?;
        g.elu(y)
    };
    check_finite(g, out, &layer)?;
    Ok(out)
}

fn run_head<T: Element>(
    g: &mut Graph<T>,
    params: &BoundParams,
    prefix: &str,
    task: Task,
    features: Var,
) -> Result<Var, ModelError> {
    let name = head_name(prefix, task);
    let y = g.dense(
        features,
        params.var(&format!("{name}.weight")),
        params.var(&format!("{name}.bias")),
    )?;
    let out = if task.is_binary() {
        g.sigmoid(y)
    } else {
        g.relu_straight_through(y)
    };
    check_finite(g, out, &name)?;
    Ok(out)
}

/// A network with its parameters.
#[derive(Clone, Debug)]
pub struct Model<T> {
    spec: ModelSpec,
    params: ParamStore<T>,
}

impl<T: Element> Model<T> {
    /// Glorot-uniform weights, zero biases, alphas per the spec's init
    /// strategy; fully determined by `spec.seed`.
    pub fn build(spec: ModelSpec) -> Self {
        let mut params = ParamStore::new();
        let layout = spec.layout();
        match spec.architecture {
            Architecture::HardSharing => {
                let mut rng = RunRng::seed_from_u64(spec.seed);
                init_stack(&mut params, "trunk.", &layout, &mut rng);
                for task in Task::ALL {
                    add_dense(
                        &mut params,
                        &head_name("", task),
                        layout.dense_units,
                        task.units(),
                        &mut rng,
                    );
                }
            }
            Architecture::CrossStitch => {
                for task in Task::ALL {
                    let prefix = format!("tower.{}.", task.short_name());
                    init_tower(
                        &mut params,
                        &prefix,
                        task,
                        &layout,
                        tower_seed(spec.seed, task),
                    );
                }
                let alpha = spec.alpha_init.matrix::<T>();
                for l in 1..=CONV_KERNELS + 1 {
                    params.insert(format!("stitch{l}.alpha"), alpha.clone());
                }
            }
        }
        Self { spec, params }
    }

    pub fn from_params(spec: ModelSpec, params: ParamStore<T>) -> Result<Self, ModelError> {
        let reference = Self::build(spec.clone());
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(ModelError::Autodiff(AutodiffError::ShapeMismatch(format!(
                        "parameter {name} missing or mis-shaped for {spec:?}"
                    ))))
                }
            }
        }
        if params.len() != reference.params.len() {
            return Err(ModelError::Autodiff(AutodiffError::ShapeMismatch(
                "unexpected extra parameters".into(),
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.cast(),
        }
    }

    /// Records the network on `g`. `input` must be `[1, N, 11, 144]`.
    /// Noise layers are active only when a generator is supplied.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        input: Var,
        mut rng: Option<&mut RunRng>,
    ) -> Result<ForwardPass, ModelError> {
        let s = g.shape(input);
        if s.len() != 4 || s[0] != 1 || s[2] != CONTEXT_FRAMES || s[3] != N_BINS {
            return Err(ModelError::BadInput(s.to_vec()));
        }
        let params = self.params.bind(g);
        let sigma = self.spec.noise_sigma;
        let outputs = match self.spec.architecture {
            Architecture::HardSharing => {
                let ctx = BlockCtx {
                    params: &params,
                    prefix: "trunk.",
                    noise_sigma: sigma,
                };
                let mut z = input;
                for l in 0..=CONV_KERNELS {
                    z = run_block(g, &ctx, l, z, &mut rng)?;
                }
                let mut outs = [z; NUM_TASKS];
                for task in Task::ALL {
                    outs[task.index()] = run_head(g, &params, "", task, z)?;
                }
                outs
            }
            Architecture::CrossStitch => {
                let prefixes: Vec<String> = Task::ALL
                    .iter()
                    .map(|t| format!("tower.{}.", t.short_name()))
                    .collect();
                let mut z = [input; NUM_TASKS];
                for l in 0..=CONV_KERNELS {
                    let mut raw = [input; NUM_TASKS];
                    for m in 0..NUM_TASKS {
                        let ctx = BlockCtx {
                            params: &params,
                            prefix: &prefixes[m],
                            noise_sigma: sigma,
                        };
                        raw[m] = run_block(g, &ctx, l, z[m], &mut rng)?;
                    }
                    let alpha = params.var(&format!("stitch{}.alpha", l + 1));
                    let detached = match self.spec.stitch_mode {
                        StitchMode::Full => None,
                        StitchMode::Detached => {
                            let mut d = raw;
                            for m in 0..NUM_TASKS {
                                d[m] = g.detach(raw[m]);
                            }
                            Some(d)
                        }
                    };
                    for m in 0..NUM_TASKS {
                        let inputs: [Var; NUM_TASKS] = match &detached {
                            None => raw,
                            Some(d) => {
                                let mut row = *d;
                                row[m] = raw[m];
                                row
                            }
                        };
                        z[m] = g.mix(alpha, m, &inputs)?;
                    }
                }
                let mut outs = [input; NUM_TASKS];
                for task in Task::ALL {
                    outs[task.index()] =
                        run_head(g, &params, &prefixes[task.index()], task, z[task.index()])?;
                }
                outs
            }
        };
        Ok(ForwardPass { outputs, params })
    }

    /// Evaluation-mode predictions for a `[N, 11, 144]` batch given as
    /// row-major values.
    pub fn predict(&self, batch: usize, snippets: &[T]) -> Result<BatchPredictions<T>, ModelError> {
        let mut g = Graph::new();
        let input = g.constant(Tensor::new(
            vec![1, batch, CONTEXT_FRAMES, N_BINS],
            snippets.to_vec(),
        )?);
        let pass = self.forward(&mut g, input, None)?;
        let take = |t: Task| g.value(pass.outputs[t.index()]).data().to_vec();
        Ok(BatchPredictions {
            batch,
            onset: take(Task::Onset),
            intermediate: take(Task::Intermediate),
            offset: take(Task::Offset),
            velocity: take(Task::Velocity),
            sustain: take(Task::Sustain),
        })
    }
}

/// Standalone network for one task with the tower layout; its parameters
/// carry no prefix. Built from `tower_seed(seed, task)` it holds exactly the
/// weights of the corresponding cross-stitch tower.
#[derive(Clone, Debug)]
pub struct SingleTaskNet<T> {
    task: Task,
    params: ParamStore<T>,
}

impl<T: Element> SingleTaskNet<T> {
    pub fn build(task: Task, layout: TrunkLayout, seed: u64) -> Self {
        let mut params = ParamStore::new();
        init_tower(&mut params, "", task, &layout, seed);
        Self { task, params }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn forward(&self, g: &mut Graph<T>, input: Var) -> Result<(Var, BoundParams), ModelError> {
        let params = self.params.bind(g);
        let ctx = BlockCtx {
            params: &params,
            prefix: "",
            noise_sigma: 0.0,
        };
        let mut z = input;
        for l in 0..=CONV_KERNELS {
            z = run_block(g, &ctx, l, z, &mut None)?;
        }
        let out = run_head(g, &params, "", self.task, z)?;
        Ok((out, params))
    }
}
