//! Model assembly: patch embedding, four window-attention stages each closed
//! by a channel attention module, patch merging between stages, and a
//! linear classification head on the pooled final tokens.

use std::collections::HashMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::eca::{adaptive_kernel_size, apply_eca, EcaConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::swin::{
    effective_window, patch_embed, patch_merge, swin_block, AttentionParams, BlockParams,
    BlockShape, Dropout, FeatureMap, LN_EPS,
};
use crate::tensor::{Gradients, Tape, Tensor, Var};

pub const NUM_STAGES: usize = 4;
pub const IN_CHANNELS: usize = 3;

/// Architectural hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depths: [usize; NUM_STAGES],
    pub num_heads: [usize; NUM_STAGES],
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub eca_enabled: bool,
    pub eca: EcaConfig,
    pub use_relative_bias: bool,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// 224-pixel configuration: embed 96, depths 2/2/6/2, heads 3/6/12/24,
    /// window 7, nine classes.
    pub fn full() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 4,
            embed_dim: 96,
            depths: [2, 2, 6, 2],
            num_heads: [3, 6, 12, 24],
            window_size: 7,
            mlp_ratio: 4,
            num_classes: 9,
            eca_enabled: true,
            eca: EcaConfig::default(),
            use_relative_bias: true,
            dropout: 0.0,
            seed: 0,
        }
    }

    /// Desk-scale configuration used by tests and the synthetic dataset.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 64,
            embed_dim: 24,
            depths: [1, 1, 2, 1],
            num_heads: [2, 2, 4, 4],
            window_size: 4,
            ..Self::full()
        }
    }

    pub fn stage_dim(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn stage_grid(&self, stage: usize) -> usize {
        (self.image_size / self.patch_size) >> stage
    }

    /// `(window, shift)` used by shifted blocks of `stage`.
    pub fn stage_window(&self, stage: usize) -> (usize, usize) {
        effective_window(self.stage_grid(stage), self.window_size)
    }

    pub fn eca_kernel(&self, stage: usize) -> usize {
        adaptive_kernel_size(self.stage_dim(stage), &self.eca)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0
            || self.image_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        let grid = self.image_size / self.patch_size;
        if !grid.is_multiple_of(1 << (NUM_STAGES - 1)) {
            return fail(format!(
                "patch grid {grid} must be divisible by {} for three patch merges",
                1 << (NUM_STAGES - 1)
            ));
        }
        if self.embed_dim == 0 || self.window_size == 0 || self.mlp_ratio == 0 {
            return fail("embed_dim, window_size and mlp_ratio must be positive".into());
        }
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        for s in 0..NUM_STAGES {
            if self.depths[s] == 0 {
                return fail(format!("stage {} depth must be positive", s + 1));
            }
            let (dim, heads) = (self.stage_dim(s), self.num_heads[s]);
            if heads == 0 || dim % heads != 0 {
                return fail(format!(
                    "stage {} dim {dim} not divisible by {heads} heads",
                    s + 1
                ));
            }
            let (w, _) = self.stage_window(s);
            if !self.stage_grid(s).is_multiple_of(w) {
                return fail(format!(
                    "stage {} grid {} not divisible by window {w}",
                    s + 1,
                    self.stage_grid(s)
                ));
            }
        }
        self.eca.validate()
    }
}

/// Initialisation rule for one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Names, shapes and initialisers of every parameter, in a fixed order.
pub fn param_specs(cfg: &ModelConfig) -> Result<Vec<ParamSpec>> {
    cfg.validate()?;
    let mut specs = Vec::new();
    let mut add =
        |name: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { name, shape, init });
    let proj = Init::TruncNormal(0.02);
    let (d, p) = (cfg.embed_dim, cfg.patch_size);

    add(
        "patch_embed.proj.weight".into(),
        vec![d, IN_CHANNELS, p, p],
        proj,
    );
    add("patch_embed.proj.bias".into(), vec![d], Init::Zeros);
    add("patch_embed.norm.weight".into(), vec![d], Init::Ones);
    add("patch_embed.norm.bias".into(), vec![d], Init::Zeros);

    for s in 0..NUM_STAGES {
        let c = cfg.stage_dim(s);
        let hidden = c * cfg.mlp_ratio;
        let (win, _) = cfg.stage_window(s);
        for b in 0..cfg.depths[s] {
            let pre = format!("stages.{s}.blocks.{b}");
            add(format!("{pre}.norm1.weight"), vec![c], Init::Ones);
            add(format!("{pre}.norm1.bias"), vec![c], Init::Zeros);
            add(format!("{pre}.attn.qkv.weight"), vec![3 * c, c], proj);
            add(format!("{pre}.attn.qkv.bias"), vec![3 * c], Init::Zeros);
            if cfg.use_relative_bias {
                let span = 2 * win - 1;
                add(
                    format!("{pre}.attn.relative_position_bias_table"),
                    vec![span * span, cfg.num_heads[s]],
                    Init::Zeros,
                );
            }
            add(format!("{pre}.attn.proj.weight"), vec![c, c], proj);
            add(format!("{pre}.attn.proj.bias"), vec![c], Init::Zeros);
            add(format!("{pre}.norm2.weight"), vec![c], Init::Ones);
            add(format!("{pre}.norm2.bias"), vec![c], Init::Zeros);
            add(format!("{pre}.mlp.fc1.weight"), vec![hidden, c], proj);
            add(format!("{pre}.mlp.fc1.bias"), vec![hidden], Init::Zeros);
            add(format!("{pre}.mlp.fc2.weight"), vec![c, hidden], proj);
            add(format!("{pre}.mlp.fc2.bias"), vec![c], Init::Zeros);
        }
        if cfg.eca_enabled {
            let k = cfg.eca_kernel(s);
            add(
                format!("stages.{s}.eca.conv.weight"),
                vec![k],
                Init::Uniform(1.0 / (k as f64).sqrt()),
            );
        }
        if s + 1 < NUM_STAGES {
            add(
                format!("stages.{s}.downsample.norm.weight"),
                vec![4 * c],
                Init::Ones,
            );
            add(
                format!("stages.{s}.downsample.norm.bias"),
                vec![4 * c],
                Init::Zeros,
            );
            add(
                format!("stages.{s}.downsample.reduction.weight"),
                vec![2 * c, 4 * c],
                proj,
            );
        }
    }
    let last = cfg.stage_dim(NUM_STAGES - 1);
    add("norm.weight".into(), vec![last], Init::Ones);
    add("norm.bias".into(), vec![last], Init::Zeros);
    add("head.weight".into(), vec![cfg.num_classes, last], proj);
    add("head.bias".into(), vec![cfg.num_classes], Init::Zeros);
    Ok(specs)
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ModelParams<T> {
    fn default() -> Self {
        ModelParams {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ModelParams<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        tensor.set_requires_grad(true);
        self.index.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn total(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Add the parameter gradients of one backward sweep into the grad buffers.
    pub fn accumulate(&mut self, tape: &Tape<T>, grads: &Gradients<T>) -> Result<()> {
        for (i, g) in grads.params(tape) {
            let t = self
                .tensors
                .get_mut(i)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {i}")))?;
            t.accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = ModelParams::new();
        for (n, t) in self.iter() {
            out.insert(n, t.cast()).expect("unique names");
        }
        out
    }

    /// Every name and shape of `specs` is present and nothing else is.
    pub fn check_compatible(&self, specs: &[ParamSpec]) -> Result<()> {
        let mut problems = Vec::new();
        for spec in specs {
            match self.get(&spec.name) {
                None => problems.push(format!("missing tensor {}", spec.name)),
                Some(t) if t.shape() != spec.shape.as_slice() => problems.push(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )),
                Some(_) => {}
            }
        }
        for name in &self.names {
            if !specs.iter().any(|s| &s.name == name) {
                problems.push(format!("unexpected tensor {name}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Compatibility(problems.join("; ")))
        }
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then a splitmix64 finaliser with the run seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn init_tensor<T: Scalar>(spec: &ParamSpec, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &spec.name));
    match spec.init {
        Init::Zeros => Tensor::zeros(spec.shape.clone()),
        Init::Ones => Tensor::full(spec.shape.clone(), T::one()),
        Init::TruncNormal(std) => Tensor::from_fn(spec.shape.clone(), |_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break T::lit(z * std);
            }
        }),
        Init::Uniform(bound) => Tensor::from_fn(spec.shape.clone(), |_| {
            T::lit(rng.random_range(-bound..=bound))
        }),
    }
}

/// Seeded, deterministic parameter initialisation.
///
/// Each tensor draws from its own stream keyed by `(seed, name)`, so the
/// channel-attention-free variant shares every value with the full model.
pub fn build<T: Scalar>(cfg: &ModelConfig) -> Result<ModelParams<T>> {
    let mut params = ModelParams::new();
    for spec in param_specs(cfg)? {
        let t = init_tensor(&spec, cfg.seed);
        params.insert(spec.name, t)?;
    }
    Ok(params)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, masks drawn from `seed`.
    Train {
        seed: u64,
    },
    Eval,
}

/// Parameters registered on a tape, addressable by name.
pub struct Binding<'p, T> {
    params: &'p ModelParams<T>,
    vars: Vec<Var>,
}

impl<'p, T: Scalar> Binding<'p, T> {
    pub fn new(tape: &mut Tape<T>, params: &'p ModelParams<T>) -> Self {
        let vars = params
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| tape.param(t, i))
            .collect();
        Binding { params, vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.params
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Compatibility(format!("missing tensor {name}")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.position(name).is_some()
    }

    pub fn block(&self, stage: usize, block: usize) -> Result<BlockParams> {
        let pre = format!("stages.{stage}.blocks.{block}");
        let v = |suffix: &str| self.var(&format!("{pre}.{suffix}"));
        let table = format!("{pre}.attn.relative_position_bias_table");
        Ok(BlockParams {
            norm1_weight: v("norm1.weight")?,
            norm1_bias: v("norm1.bias")?,
            attn: AttentionParams {
                qkv_weight: v("attn.qkv.weight")?,
                qkv_bias: v("attn.qkv.bias")?,
                proj_weight: v("attn.proj.weight")?,
                proj_bias: v("attn.proj.bias")?,
                bias_table: if self.has(&table) {
                    Some(self.var(&table)?)
                } else {
                    None
                },
            },
            norm2_weight: v("norm2.weight")?,
            norm2_bias: v("norm2.bias")?,
            fc1_weight: v("mlp.fc1.weight")?,
            fc1_bias: v("mlp.fc1.bias")?,
            fc2_weight: v("mlp.fc2.weight")?,
            fc2_bias: v("mlp.fc2.bias")?,
        })
    }
}

pub struct ForwardOutput {
    /// `[batch, num_classes]`
    pub logits: Var,
    /// Output of each stage after its channel attention, before merging.
    pub stages: Vec<FeatureMap>,
}

/// Shape of block `block` within `stage`: plain windows on even positions,
/// shifted windows on odd positions (when the grid allows a shift).
pub fn block_shape(cfg: &ModelConfig, stage: usize, block: usize) -> BlockShape {
    let (window, shift) = cfg.stage_window(stage);
    BlockShape {
        heads: cfg.num_heads[stage],
        window,
        shift: if block % 2 == 1 { shift } else { 0 },
    }
}

/// Run the network on `images: [B, 3, S, S]`.
pub fn forward<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    tape: &mut Tape<T>,
    images: Var,
    mode: Mode,
) -> Result<ForwardOutput> {
    let s = tape.shape(images);
    let want = [IN_CHANNELS, cfg.image_size, cfg.image_size];
    if s.len() != 4 || s[1..] != want {
        return Err(Error::dim("forward images", s, &want));
    }
    let bind = Binding::new(tape, params);
    let mut dropout = match mode {
        Mode::Train { seed } => Dropout::new(cfg.dropout, true, seed),
        Mode::Eval => Dropout::new(cfg.dropout, false, 0),
    };

    let fm = patch_embed(
        tape,
        images,
        bind.var("patch_embed.proj.weight")?,
        bind.var("patch_embed.proj.bias")?,
        cfg.patch_size,
    )?;
    let normed = tape.layer_norm(
        fm.tokens,
        bind.var("patch_embed.norm.weight")?,
        bind.var("patch_embed.norm.bias")?,
        LN_EPS,
    )?;
    let mut fm = FeatureMap {
        tokens: normed,
        ..fm
    };

    let mut stages = Vec::with_capacity(NUM_STAGES);
    for stage in 0..NUM_STAGES {
        for block in 0..cfg.depths[stage] {
            let p = bind.block(stage, block)?;
            fm = swin_block(tape, fm, &p, block_shape(cfg, stage, block), &mut dropout)?;
        }
        if cfg.eca_enabled {
            let kernel = bind.var(&format!("stages.{stage}.eca.conv.weight"))?;
            fm = apply_eca(tape, fm, kernel, &cfg.eca)?;
        }
        stages.push(fm);
        if stage + 1 < NUM_STAGES {
            let pre = format!("stages.{stage}.downsample");
            fm = patch_merge(
                tape,
                fm,
                bind.var(&format!("{pre}.norm.weight"))?,
                bind.var(&format!("{pre}.norm.bias"))?,
                bind.var(&format!("{pre}.reduction.weight"))?,
            )?;
        }
    }

    let normed = tape.layer_norm(
        fm.tokens,
        bind.var("norm.weight")?,
        bind.var("norm.bias")?,
        LN_EPS,
    )?;
    let pooled = tape.mean_axis(normed, 1)?;
    let logits = tape.linear(
        pooled,
        bind.var("head.weight")?,
        Some(bind.var("head.bias")?),
    )?;
    Ok(ForwardOutput { logits, stages })
}

/// A configuration together with its parameters.
#[derive(Clone, Debug)]
pub struct SwinEcat<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
}

impl<T: Scalar> SwinEcat<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let params = build(&config)?;
        Ok(SwinEcat { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        params.check_compatible(&param_specs(&config)?)?;
        Ok(SwinEcat { config, params })
    }

    pub fn forward(&self, tape: &mut Tape<T>, images: Var, mode: Mode) -> Result<ForwardOutput> {
        forward(&self.config, &self.params, tape, images, mode)
    }

    /// Eval-mode logits for a batch of images.
    pub fn logits(&self, images: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(images);
        let out = self.forward(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(out.logits).clone())
    }
}

/// Parameter totals grouped by module path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterAudit {
    pub total: usize,
    /// `(module, count)` in first-seen order.
    pub modules: Vec<(String, usize)>,
}

/// Module key of a parameter name: `stages.i.<part>` for stage members
/// (`blocks`, `eca`, `downsample`), otherwise the first path component.
fn module_of(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    if parts[0] == "stages" && parts.len() > 2 {
        parts[..3].join(".")
    } else {
        parts[0].to_string()
    }
}

impl ParameterAudit {
    pub fn from_counts<'a>(items: impl IntoIterator<Item = (&'a str, usize)>) -> Self {
        let mut modules: Vec<(String, usize)> = Vec::new();
        let mut total = 0;
        for (name, n) in items {
            total += n;
            let key = module_of(name);
            match modules.iter_mut().find(|(m, _)| *m == key) {
                Some((_, c)) => *c += n,
                None => modules.push((key, n)),
            }
        }
        ParameterAudit { total, modules }
    }

    /// Audit computed from shapes alone, without allocating parameters.
    pub fn from_config(cfg: &ModelConfig) -> Result<Self> {
        let specs = param_specs(cfg)?;
        Ok(Self::from_counts(
            specs.iter().map(|s| (s.name.as_str(), s.numel())),
        ))
    }

    pub fn from_params<T: Scalar>(params: &ModelParams<T>) -> Self {
        Self::from_counts(params.iter().map(|(n, t)| (n, t.numel())))
    }

    pub fn module(&self, key: &str) -> usize {
        self.modules
            .iter()
            .filter(|(m, _)| m == key || m.ends_with(&format!(".{key}")))
            .map(|(_, n)| n)
            .sum()
    }

    /// Total in millions, two decimals.
    pub fn millions(&self) -> String {
        format_millions(self.total)
    }
}

pub fn format_millions(n: usize) -> String {
    format!("{:.2}M", n as f64 / 1e6)
}

impl fmt::Display for ParameterAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self
            .modules
            .iter()
            .map(|(m, _)| m.len())
            .max()
            .unwrap_or(5)
            .max(5);
        for (m, n) in &self.modules {
            writeln!(f, "{m:<width$}  {n:>12}")?;
        }
        write!(
            f,
            "{:<width$}  {:>12}  ({})",
            "total",
            self.total,
            self.millions()
        )
    }
}

/// Reference totals for the 224 configuration, in millions.
pub const REFERENCE_BASELINE_M: f64 = 27.53;
pub const REFERENCE_SWINECAT_M: f64 = 28.30;

/// Audits of a configuration with and without ECA, side by side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditComparison {
    pub with_eca: ParameterAudit,
    pub without_eca: ParameterAudit,
    pub kernels: [usize; NUM_STAGES],
    /// Baseline total with a 1000-way head instead of `num_classes`.
    pub wide_head_total: usize,
    /// Architecture equals the 224 reference configuration.
    pub is_reference: bool,
}

impl AuditComparison {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let on = ModelConfig {
            eca_enabled: true,
            ..cfg.clone()
        };
        let off = ModelConfig {
            eca_enabled: false,
            ..cfg.clone()
        };
        let wide = ModelConfig {
            num_classes: 1000,
            ..off.clone()
        };
        Ok(AuditComparison {
            with_eca: ParameterAudit::from_config(&on)?,
            without_eca: ParameterAudit::from_config(&off)?,
            kernels: std::array::from_fn(|s| on.eca_kernel(s)),
            wide_head_total: ParameterAudit::from_config(&wide)?.total,
            is_reference: ModelConfig {
                seed: 0,
                dropout: 0.0,
                ..on
            } == ModelConfig::full(),
        })
    }

    pub fn difference(&self) -> usize {
        self.with_eca.total - self.without_eca.total
    }

    /// Why the 28.30M reference cannot be an ECA-only increase.
    pub fn note(&self) -> String {
        format!(
            "ECA adds {} weights, so SwinECAT stays at {}; the {:.2}M reference is {} above the {:.2}M baseline \
             and matches the same backbone with a 1000-way head ({}, {})",
            self.difference(),
            self.with_eca.millions(),
            REFERENCE_SWINECAT_M,
            format_millions(((REFERENCE_SWINECAT_M - REFERENCE_BASELINE_M) * 1e6).round() as usize),
            REFERENCE_BASELINE_M,
            self.wide_head_total,
            format_millions(self.wide_head_total),
        )
    }
}

impl fmt::Display for AuditComparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.with_eca)?;
        writeln!(f)?;
        writeln!(
            f,
            "with eca     {:>12}  ({})",
            self.with_eca.total,
            self.with_eca.millions()
        )?;
        writeln!(
            f,
            "without eca  {:>12}  ({})",
            self.without_eca.total,
            self.without_eca.millions()
        )?;
        let ks: Vec<String> = self.kernels.iter().map(usize::to_string).collect();
        write!(
            f,
            "difference   {:>12}  (kernel sizes {})",
            self.difference(),
            ks.join("+")
        )?;
        if !self.is_reference {
            return Ok(());
        }
        writeln!(f)?;
        writeln!(
            f,
            "reference    baseline {REFERENCE_BASELINE_M:.2}M, SwinECAT {REFERENCE_SWINECAT_M:.2}M"
        )?;
        write!(f, "note: {}", self.note())
    }
}
