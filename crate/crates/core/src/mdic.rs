//! Threshold convolution and the encoder/decoder MDIC modules.
//!
//! An MDIC module feeds four channel groups ("parts") through a spatial
//! transform, convolves them, undoes the transform and fuses the resulting
//! local feature maps with a global, untransformed convolution branch.
//!
//! Encoder module (`em`), for input `x` with `C_in` channels and `F` filters:
//!
//! ```text
//! g      = BN(ReLU(conv_global(x)))                       F channels
//! l_p    = unflip_p(branch_p(flip_p(x_p)))                F/4 channels each
//! u      = BN(ReLU(conv1x1([l_1, l_2, l_3, l_4, g])))     2F -> F
//! skip   = BN(ReLU(conv1x1(threshold(u))))                F -> F
//! out    = maxpool2(skip)
//! ```
//!
//! Decoder module (`dm`), for a coarse input `x` and an encoder skip map:
//!
//! ```text
//! u      = bilinear_up2(x)
//! r      = conv1x1_retain(u)                              F channels, no activation
//! d_p    = unflip_p(branch_p(flip_p(u_p)))                F/4 channels each
//! out    = BN(ReLU(conv1x1([d_1 + s_1, .., d_4 + s_4, r])))   s = split4(skip)
//! ```
//!
//! `branch_p` is `BN(ReLU(conv_k(.)))` with the part's own kernel size
//! ([`PartScheme::Single`]) or the sum of one such branch per kernel size
//! ([`PartScheme::MultiScale`]).

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Session};
use crate::tape::{Tape, Var};
use crate::tensor::{FlipKind, Real, Tensor};

/// Masking rule of threshold convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ThresholdVariant {
    /// Masked entries become 0.
    Hard,
    /// Masked entries become `epsilon`.
    Epsilon,
}

impl ThresholdVariant {
    pub fn name(self) -> &'static str {
        match self {
            ThresholdVariant::Hard => "hard",
            ThresholdVariant::Epsilon => "eps",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hard" => Ok(ThresholdVariant::Hard),
            "eps" | "epsilon" => Ok(ThresholdVariant::Epsilon),
            _ => Err(Error::Config(format!("unknown threshold variant `{s}` (hard|eps)"))),
        }
    }
}

pub const DEFAULT_THRESHOLD: f64 = 0.1;
pub const DEFAULT_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdSpec {
    pub threshold: f64,
    pub variant: ThresholdVariant,
    pub epsilon: f64,
}

impl Default for ThresholdSpec {
    fn default() -> Self {
        ThresholdSpec { threshold: DEFAULT_THRESHOLD, variant: ThresholdVariant::Epsilon, epsilon: DEFAULT_EPSILON }
    }
}

impl ThresholdSpec {
    pub fn new(threshold: f64, variant: ThresholdVariant) -> Result<Self> {
        let spec = ThresholdSpec { threshold, variant, epsilon: DEFAULT_EPSILON };
        spec.validate()?;
        Ok(spec)
    }

    pub fn hard(threshold: f64) -> Result<Self> {
        Self::new(threshold, ThresholdVariant::Hard)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold >= 0.0) {
            return Err(Error::Config(format!("threshold must be >= 0, got {}", self.threshold)));
        }
        if self.variant == ThresholdVariant::Epsilon && !(self.epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Entries that survive: `relu(x) > T`.
    pub fn keep_mask<T: Real>(&self, x: &Tensor<T>) -> Vec<bool> {
        let t = self.threshold;
        // relu(v) > t with t >= 0 is v > t
        x.data().iter().map(|v| v.as_f64() > t).collect()
    }

    fn fill<T: Real>(&self) -> T {
        match self.variant {
            ThresholdVariant::Hard => T::zero(),
            ThresholdVariant::Epsilon => T::from_f64(self.epsilon),
        }
    }
}

/// Threshold convolution on a plain tensor.
///
/// Entries with `relu(x) > T` pass unchanged; the rest become 0 (hard) or
/// `epsilon`. Multiplying the mask into `x` or into `relu(x)` gives the same
/// result because kept entries are positive.
pub fn threshold_conv<T: Real>(x: &Tensor<T>, spec: &ThresholdSpec) -> Tensor<T> {
    let fill = spec.fill::<T>();
    let t = spec.threshold;
    x.map(|v| if v.as_f64() > t { v } else { fill })
}

/// Threshold convolution recorded on a tape. The mask is treated as a constant.
pub fn threshold_conv_op<T: Real>(tape: &mut Tape<T>, x: Var, spec: &ThresholdSpec) -> Result<Var> {
    let keep = spec.keep_mask(tape.value(x));
    tape.masked_fill(x, keep, spec.fill())
}

/// How the four kernel sizes are distributed over parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartScheme {
    /// Part `p` is convolved with `part_kernels[p]` only.
    Single,
    /// Every part is convolved with all four kernel sizes and the branches are summed.
    MultiScale,
}

impl PartScheme {
    pub fn name(self) -> &'static str {
        match self {
            PartScheme::Single => "single",
            PartScheme::MultiScale => "multiscale",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(PartScheme::Single),
            "multiscale" | "multi" => Ok(PartScheme::MultiScale),
            _ => Err(Error::Config(format!("unknown part scheme `{s}` (single|multiscale)"))),
        }
    }
}

/// What each part branch sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PartInput {
    /// Contiguous channel quarters (requires `in_channels % 4 == 0`).
    Quarter,
    /// Every part sees all input channels. Used for the raw network input
    /// when its channel count is not a multiple of 4, and by the
    /// plain-convolution ablation.
    Replicate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MdicConfig {
    pub part_kernels: [usize; 4],
    pub global_kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub scheme: PartScheme,
    pub part_input: PartInput,
    /// Apply the per-part flips. Disabled together with `Replicate` input
    /// this turns the module into plain multi-branch convolution.
    pub directional: bool,
}

impl MdicConfig {
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        MdicConfig {
            part_kernels: [1, 3, 5, 7],
            global_kernel: 3,
            in_channels,
            out_channels,
            scheme: PartScheme::MultiScale,
            part_input: PartInput::Quarter,
            directional: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.out_channels % 4 != 0 {
            return Err(Error::Config(format!("out_channels {} not divisible by 4", self.out_channels)));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.part_input == PartInput::Quarter && self.in_channels % 4 != 0 {
            return Err(Error::Config(format!("in_channels {} not divisible by 4", self.in_channels)));
        }
        for &k in self.part_kernels.iter().chain([&self.global_kernel]) {
            if k % 2 == 0 {
                return Err(Error::Config(format!("kernel size {k} must be odd")));
            }
        }
        if self.part_kernels.iter().all(|&k| k == self.global_kernel) {
            return Err(Error::Config("global kernel must differ from at least one part kernel".into()));
        }
        Ok(())
    }

    fn part_in_channels(&self) -> usize {
        match self.part_input {
            PartInput::Quarter => self.in_channels / 4,
            PartInput::Replicate => self.in_channels,
        }
    }

    /// Kernel sizes of part `p`'s branches.
    fn branch_kernels(&self, p: usize) -> Vec<usize> {
        match self.scheme {
            PartScheme::Single => vec![self.part_kernels[p]],
            PartScheme::MultiScale => self.part_kernels.to_vec(),
        }
    }

    fn branch_prefix(&self, module: &str, p: usize, s: usize) -> String {
        match self.scheme {
            PartScheme::Single => format!("{module}/part{}", p + 1),
            PartScheme::MultiScale => format!("{module}/part{}/scale{}", p + 1, s + 1),
        }
    }

    fn register_parts<T: Real, R: Rng + ?Sized>(&self, module: &str, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let (cin, f) = (self.part_in_channels(), self.out_channels / 4);
        for p in 0..4 {
            for (s, k) in self.branch_kernels(p).into_iter().enumerate() {
                store.register_conv_bn(&self.branch_prefix(module, p, s), cin, f, k, rng)?;
            }
        }
        Ok(())
    }

    fn part_inputs<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<[Var; 4]> {
        match self.part_input {
            PartInput::Quarter => s.tape.split4(x),
            PartInput::Replicate => Ok([x; 4]),
        }
    }

    /// Local feature map of part `p`: flip, convolve, unflip.
    fn part_forward<T: Real>(&self, s: &mut Session<'_, T>, module: &str, p: usize, xp: Var) -> Result<Var> {
        let kind = if self.directional { FlipKind::PART_ORDER[p] } else { FlipKind::Identity };
        let xf = if kind == FlipKind::Identity { xp } else { s.tape.flip(xp, kind)? };
        let mut acc: Option<Var> = None;
        for s_idx in 0..self.branch_kernels(p).len() {
            let y = s.conv_relu_bn(&self.branch_prefix(module, p, s_idx), xf)?;
            acc = Some(match acc {
                None => y,
                Some(a) => s.tape.add(a, y)?,
            });
        }
        let y = acc.expect("at least one branch");
        if kind == FlipKind::Identity {
            Ok(y)
        } else {
            s.tape.flip(y, kind.inverse())
        }
    }

    fn check_input<T: Real>(&self, op: &'static str, x: &Tensor<T>) -> Result<(usize, usize)> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::shape(op, format!("expected {} input channels, got {c}", self.in_channels)));
        }
        if h != w {
            return Err(Error::shape(op, format!("feature maps must be square, got {h}x{w}")));
        }
        Ok((h, w))
    }
}

/// Encoder MDIC module: parameters live in a [`ParamStore`] under `prefix`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmModule {
    pub prefix: String,
    pub config: MdicConfig,
    /// `None` disables threshold convolution.
    pub threshold: Option<ThresholdSpec>,
}

impl EmModule {
    pub fn new(prefix: impl Into<String>, config: MdicConfig, threshold: Option<ThresholdSpec>) -> Result<Self> {
        config.validate()?;
        if let Some(t) = &threshold {
            t.validate()?;
        }
        Ok(EmModule { prefix: prefix.into(), config, threshold })
    }

    pub fn register<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let c = &self.config;
        let f = c.out_channels;
        store.register_conv_bn(&format!("{}/global", self.prefix), c.in_channels, f, c.global_kernel, rng)?;
        c.register_parts(&self.prefix, store, rng)?;
        store.register_conv_bn(&format!("{}/integrate_a", self.prefix), 2 * f, f, 1, rng)?;
        store.register_conv_bn(&format!("{}/integrate_b", self.prefix), f, f, 1, rng)
    }

    /// Returns `(skip, pooled)`: the pre-pool map at input resolution and its 2×2 max-pool.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<(Var, Var)> {
        let (h, _) = self.config.check_input("em_forward", s.tape.value(x))?;
        if h % 2 != 0 {
            return Err(Error::shape("em_forward", format!("spatial extent {h} must be even")));
        }
        let pre = &self.prefix;
        let g = s.conv_relu_bn(&format!("{pre}/global"), x)?;
        let parts = self.config.part_inputs(s, x)?;
        let mut fused = Vec::with_capacity(5);
        for (p, &xp) in parts.iter().enumerate() {
            let l = self.config.part_forward(s, pre, p, xp)?;
            s.tap(format!("{pre}/part{}/local", p + 1), l);
            fused.push(l);
        }
        fused.push(g);
        let cat = s.tape.concat_channels(&fused)?;
        let u = s.conv_relu_bn(&format!("{pre}/integrate_a"), cat)?;
        let t = match &self.threshold {
            Some(spec) => threshold_conv_op(s.tape, u, spec)?,
            None => u,
        };
        s.tap(format!("{pre}/thresholded"), t);
        let skip = s.conv_relu_bn(&format!("{pre}/integrate_b"), t)?;
        let out = s.tape.maxpool2(skip)?;
        Ok((skip, out))
    }
}

/// Decoder MDIC module.
#[derive(Debug, Clone, PartialEq)]
pub struct DmModule {
    pub prefix: String,
    pub config: MdicConfig,
}

impl DmModule {
    pub fn new(prefix: impl Into<String>, config: MdicConfig) -> Result<Self> {
        config.validate()?;
        Ok(DmModule { prefix: prefix.into(), config })
    }

    pub fn register<T: Real, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, rng: &mut R) -> Result<()> {
        let c = &self.config;
        let f = c.out_channels;
        store.register_conv(&format!("{}/retain/conv", self.prefix), c.in_channels, f, 1, rng)?;
        c.register_parts(&self.prefix, store, rng)?;
        store.register_conv_bn(&format!("{}/fusion", self.prefix), 2 * f, f, 1, rng)
    }

    /// Upsample `x` and fuse with `skip` (`[N, F, 2h, 2w]`). `None` drops the
    /// residual term.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, skip: Option<Var>) -> Result<Var> {
        let (h, w) = self.config.check_input("dm_forward", s.tape.value(x))?;
        let f = self.config.out_channels;
        let (n, _, _, _) = s.tape.value(x).dims4()?;
        if let Some(sk) = skip {
            let shape = s.tape.value(sk).shape();
            if shape != [n, f, 2 * h, 2 * w] {
                return Err(Error::shape(
                    "dm_forward",
                    format!("skip {shape:?} does not match [{n}, {f}, {}, {}]", 2 * h, 2 * w),
                ));
            }
        }
        let pre = &self.prefix;
        let u = s.tape.bilinear_up2(x)?;
        let r = s.conv(&format!("{pre}/retain/conv"), u)?;
        let parts = self.config.part_inputs(s, u)?;
        let skips = match skip {
            Some(sk) => Some(s.tape.split4(sk)?),
            None => None,
        };
        let mut fused = Vec::with_capacity(5);
        for (p, &up) in parts.iter().enumerate() {
            let d = self.config.part_forward(s, pre, p, up)?;
            s.tap(format!("{pre}/part{}/local", p + 1), d);
            let fusedp = match &skips {
                Some(sk) => s.tape.add(d, sk[p])?,
                None => d,
            };
            fused.push(fusedp);
        }
        fused.push(r);
        let cat = s.tape.concat_channels(&fused)?;
        s.conv_relu_bn(&format!("{pre}/fusion"), cat)
    }
}
