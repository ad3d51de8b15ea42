//! DT-Net: five encoder MDIC modules, five decoder MDIC modules and a 1×1 pixel classifier.

use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataio::dtt::{dtt_read, dtt_write};
use crate::error::{Error, Result};
use crate::kv::{join, KvDoc};
use crate::mdic::{DmModule, EmModule, MdicConfig, PartInput, PartScheme, ThresholdSpec, ThresholdVariant};
use crate::nn::{Mode, ParamStore, Session};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Real, Tensor};

pub const DEPTH: usize = 5;
pub const ARCHIVE_HEADER: &str = "dtnet-archive-v1";
pub const ARCHIVE_CONFIG: &str = "config.txt";
/// Total parameter counts reported for the full network and its plain-convolution ablation.
pub const REFERENCE_PARAMS: usize = 5_272_277;
pub const REFERENCE_PARAMS_NO_MDIC: usize = 7_651_541;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Ablations {
    /// Plain multi-branch convolution: no channel split, no flips.
    pub disable_mdic: bool,
    /// Threshold convolution becomes the identity.
    pub disable_threshold: bool,
    /// Decoders receive a zero tensor instead of the encoder skip.
    pub disable_skip: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DtNetConfig {
    pub encoder_filters: [usize; DEPTH],
    pub decoder_filters: [usize; DEPTH],
    pub num_classes: usize,
    pub input_channels: usize,
    pub input_size: usize,
    pub part_kernels: [usize; 4],
    pub global_kernel: usize,
    pub part_scheme: PartScheme,
    pub threshold: ThresholdSpec,
    pub ablations: Ablations,
}

impl Default for DtNetConfig {
    fn default() -> Self {
        let encoder_filters = [24, 48, 96, 192, 192];
        DtNetConfig {
            encoder_filters,
            decoder_filters: reversed(encoder_filters),
            num_classes: 5,
            input_channels: 1,
            input_size: 256,
            part_kernels: [1, 3, 5, 7],
            global_kernel: 3,
            part_scheme: PartScheme::MultiScale,
            threshold: ThresholdSpec::default(),
            ablations: Ablations::default(),
        }
    }
}

fn reversed(f: [usize; DEPTH]) -> [usize; DEPTH] {
    let mut r = f;
    r.reverse();
    r
}

fn array<const N: usize>(v: Vec<usize>, key: &str) -> Result<[usize; N]> {
    let len = v.len();
    v.try_into().map_err(|_| Error::Config(format!("`{key}` needs {N} values, got {len}")))
}

impl DtNetConfig {
    /// Encoder filters as given, decoder filters mirrored.
    pub fn with_filters(mut self, encoder_filters: [usize; DEPTH]) -> Self {
        self.encoder_filters = encoder_filters;
        self.decoder_filters = reversed(encoder_filters);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for &f in self.encoder_filters.iter().chain(&self.decoder_filters) {
            if f == 0 || f % 4 != 0 {
                return Err(Error::Config(format!("filter count {f} is not a positive multiple of 4")));
            }
        }
        if self.decoder_filters != reversed(self.encoder_filters) {
            return Err(Error::Config(format!(
                "decoder filters {:?} must mirror encoder filters {:?}",
                self.decoder_filters, self.encoder_filters
            )));
        }
        if !(2..=256).contains(&self.num_classes) {
            return Err(Error::Config(format!("num_classes {} outside 2..=256", self.num_classes)));
        }
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be positive".into()));
        }
        if self.input_size == 0 || self.input_size % (1 << DEPTH) != 0 {
            return Err(Error::Config(format!("input_size {} is not a positive multiple of 32", self.input_size)));
        }
        self.threshold.validate()?;
        self.module_config(self.input_channels, self.encoder_filters[0]).validate()
    }

    fn module_config(&self, in_channels: usize, out_channels: usize) -> MdicConfig {
        let plain = self.ablations.disable_mdic;
        MdicConfig {
            part_kernels: self.part_kernels,
            global_kernel: self.global_kernel,
            in_channels,
            out_channels,
            scheme: self.part_scheme,
            part_input: if plain || in_channels % 4 != 0 { PartInput::Replicate } else { PartInput::Quarter },
            directional: !plain,
        }
    }

    pub fn to_kv(&self, header: &str) -> KvDoc {
        let mut d = KvDoc::new(header);
        self.write_kv(&mut d);
        d
    }

    /// Append this configuration's keys to `d`.
    pub fn write_kv(&self, d: &mut KvDoc) {
        d.set("encoder_filters", join(&self.encoder_filters))
            .set("decoder_filters", join(&self.decoder_filters))
            .set("num_classes", self.num_classes)
            .set("input_channels", self.input_channels)
            .set("input_size", self.input_size)
            .set("part_kernels", join(&self.part_kernels))
            .set("global_kernel", self.global_kernel)
            .set("part_scheme", self.part_scheme.name())
            .set("threshold", self.threshold.threshold)
            .set("threshold_variant", self.threshold.variant.name())
            .set("threshold_epsilon", self.threshold.epsilon)
            .set("disable_mdic", self.ablations.disable_mdic)
            .set("disable_threshold", self.ablations.disable_threshold)
            .set("disable_skip", self.ablations.disable_skip);
    }

    pub fn from_kv(d: &KvDoc) -> Result<Self> {
        let cfg = DtNetConfig {
            encoder_filters: array(d.parse_list("encoder_filters")?, "encoder_filters")?,
            decoder_filters: array(d.parse_list("decoder_filters")?, "decoder_filters")?,
            num_classes: d.parse("num_classes")?,
            input_channels: d.parse("input_channels")?,
            input_size: d.parse("input_size")?,
            part_kernels: array(d.parse_list("part_kernels")?, "part_kernels")?,
            global_kernel: d.parse("global_kernel")?,
            part_scheme: PartScheme::parse(d.require("part_scheme")?)?,
            threshold: ThresholdSpec {
                threshold: d.parse("threshold")?,
                variant: ThresholdVariant::parse(d.require("threshold_variant")?)?,
                epsilon: d.parse("threshold_epsilon")?,
            },
            ablations: Ablations {
                disable_mdic: d.parse("disable_mdic")?,
                disable_threshold: d.parse("disable_threshold")?,
                disable_skip: d.parse("disable_skip")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hex SHA-256 over the canonical rendering.
    pub fn digest(&self) -> String {
        self.to_kv("dtnet-config").digest()
    }
}

/// Trainable and non-trainable element counts, overall and per top-level module.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub trainable: usize,
    pub non_trainable: usize,
    pub modules: Vec<ModuleCount>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleCount {
    pub name: String,
    pub trainable: usize,
    pub non_trainable: usize,
}

impl ParamCount {
    pub fn of<T: Real>(store: &ParamStore<T>) -> Self {
        let mut modules: IndexMap<&str, (usize, usize)> = IndexMap::new();
        for (name, p) in store.iter() {
            let module = name.split('/').next().unwrap_or(name);
            let e = modules.entry(module).or_default();
            if p.trainable {
                e.0 += p.value.len();
            } else {
                e.1 += p.value.len();
            }
        }
        ParamCount {
            trainable: store.trainable_count(),
            non_trainable: store.non_trainable_count(),
            modules: modules
                .into_iter()
                .map(|(name, (trainable, non_trainable))| ModuleCount { name: name.to_string(), trainable, non_trainable })
                .collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DtNet<T> {
    config: DtNetConfig,
    encoders: Vec<EmModule>,
    decoders: Vec<DmModule>,
    store: ParamStore<T>,
}

impl<T: Real> DtNet<T> {
    /// Registers every parameter in module order from a ChaCha8 stream seeded with `seed`.
    pub fn build(config: DtNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let enc = config.encoder_filters;
        let dec = config.decoder_filters;
        let threshold = (!config.ablations.disable_threshold).then_some(config.threshold);
        let mut encoders = Vec::with_capacity(DEPTH);
        for i in 0..DEPTH {
            let cin = if i == 0 { config.input_channels } else { enc[i - 1] };
            encoders.push(EmModule::new(format!("enc{}", i + 1), config.module_config(cin, enc[i]), threshold)?);
        }
        let mut decoders = Vec::with_capacity(DEPTH);
        for j in 0..DEPTH {
            let cin = if j == 0 { enc[DEPTH - 1] } else { dec[j - 1] };
            decoders.push(DmModule::new(format!("dec{}", j + 1), config.module_config(cin, dec[j]))?);
        }
        check_skip_pairing(&config)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for m in &encoders {
            m.register(&mut store, &mut rng)?;
        }
        for m in &decoders {
            m.register(&mut store, &mut rng)?;
        }
        store.register_conv("head/conv", dec[DEPTH - 1], config.num_classes, 1, &mut rng)?;
        Ok(DtNet { config, encoders, decoders, store })
    }

    pub fn config(&self) -> &DtNetConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn encoders(&self) -> &[EmModule] {
        &self.encoders
    }

    pub fn decoders(&self) -> &[DmModule] {
        &self.decoders
    }

    pub fn count_params(&self) -> ParamCount {
        ParamCount::of(&self.store)
    }

    /// Logits `[N, num_classes, S, S]` for input `[N, input_channels, S, S]`.
    pub fn forward(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (_, c, h, w) = s.tape.value(x).dims4()?;
        let (cin, size) = (self.config.input_channels, self.config.input_size);
        if c != cin || h != size || w != size {
            return Err(Error::shape(
                "dtnet_forward",
                format!("input is [_, {c}, {h}, {w}], model expects [_, {cin}, {size}, {size}]"),
            ));
        }
        let mut skips = Vec::with_capacity(DEPTH);
        let mut h = x;
        for m in &self.encoders {
            let (skip, pooled) = m.forward(s, h)?;
            s.tap(format!("{}/skip", m.prefix), skip);
            s.tap(format!("{}/pooled", m.prefix), pooled);
            skips.push(skip);
            h = pooled;
        }
        for (j, m) in self.decoders.iter().enumerate() {
            let skip = skips[DEPTH - 1 - j];
            let skip = if self.config.ablations.disable_skip {
                let zeros = Tensor::zeros(s.tape.value(skip).shape());
                s.tape.constant(zeros)
            } else {
                skip
            };
            h = m.forward(s, h, Some(skip))?;
            s.tap(format!("{}/out", m.prefix), h);
        }
        s.conv("head/conv", h)
    }

    /// Inference-mode logits for a batch.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let mut s = Session::new(&mut tape, &self.store, Mode::Infer);
        let xv = s.tape.constant(x.clone());
        let y = self.forward(&mut s, xv)?;
        Ok(tape.value(y).clone())
    }
}

/// Skip `skip_{DEPTH-j}` must carry exactly the channels and extent that decoder `j` produces.
fn check_skip_pairing(config: &DtNetConfig) -> Result<()> {
    let s = config.input_size;
    for j in 0..DEPTH {
        let i = DEPTH - 1 - j;
        let skip = (config.encoder_filters[i], s >> i);
        let decoder_in_extent = s >> (DEPTH - j);
        let wanted = (config.decoder_filters[j], 2 * decoder_in_extent);
        if skip != wanted {
            return Err(Error::Config(format!(
                "enc{} skip {:?} does not match dec{} output {:?}",
                i + 1,
                skip,
                j + 1,
                wanted
            )));
        }
    }
    Ok(())
}

fn tensor_file(name: &str) -> String {
    format!("{}.dtt", name.replace('/', "."))
}

impl<T: Real + Element> DtNet<T> {
    /// Writes `config.txt` and one tensor file per parameter into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut doc = KvDoc::new(ARCHIVE_HEADER);
        doc.set("dtype", T::DTYPE.name());
        self.config.write_kv(&mut doc);
        doc.set("param_tensors", self.store.len());
        doc.write(dir.join(ARCHIVE_CONFIG))?;
        for (name, p) in self.store.iter() {
            dtt_write(&p.value, dir.join(tensor_file(name)))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let doc = KvDoc::read(dir.join(ARCHIVE_CONFIG), ARCHIVE_HEADER)?;
        let dtype = doc.require("dtype")?;
        if dtype != T::DTYPE.name() {
            return Err(Error::Config(format!("archive holds {dtype} parameters, expected {}", T::DTYPE.name())));
        }
        let config = DtNetConfig::from_kv(&doc)?;
        let mut model = DtNet::build(config, 0)?;
        let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let path = dir.join(tensor_file(&name));
            if !path.is_file() {
                return Err(Error::MissingTensor(name));
            }
            model.store.set(&name, dtt_read(&path)?)?;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DtNetConfig {
        DtNetConfig { input_size: 32, num_classes: 3, ..Default::default() }.with_filters([4, 8, 8, 16, 16])
    }

    #[test]
    fn validation() {
        assert!(DtNetConfig::default().validate().is_ok());
        assert!(DtNetConfig { input_size: 48, ..small() }.validate().is_err());
        assert!(small().with_filters([4, 8, 8, 16, 18]).validate().is_err());
        let mut c = small();
        c.decoder_filters[0] = 8;
        assert!(c.validate().is_err());
        assert!(DtNetConfig { num_classes: 1, ..small() }.validate().is_err());
    }

    #[test]
    fn forward_shape() {
        let m = DtNet::<f64>::build(small(), 0).unwrap();
        let y = m.infer(&Tensor::ones(&[2, 1, 32, 32])).unwrap();
        assert_eq!(y.shape(), &[2, 3, 32, 32]);
        assert!(m.infer(&Tensor::ones(&[2, 1, 64, 64])).is_err());
        assert!(m.infer(&Tensor::ones(&[2, 2, 32, 32])).is_err());
    }

    #[test]
    fn kv_roundtrip() {
        let mut c = small();
        c.ablations.disable_skip = true;
        c.threshold = ThresholdSpec::hard(0.3).unwrap();
        assert_eq!(DtNetConfig::from_kv(&c.to_kv("x")).unwrap(), c);
        assert_ne!(c.digest(), small().digest());
    }

    #[test]
    fn module_breakdown_sums() {
        let m = DtNet::<f32>::build(small(), 0).unwrap();
        let c = m.count_params();
        assert_eq!(c.modules.len(), 11);
        assert_eq!(c.modules.iter().map(|m| m.trainable).sum::<usize>(), c.trainable);
        assert_eq!(c.modules.last().unwrap().name, "head");
    }
}
