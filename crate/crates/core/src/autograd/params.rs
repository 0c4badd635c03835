use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Real, Result, Tensor};

/// Initial value rule for one entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Trainable, drawn from `N(0, std^2)`.
    Normal { std: f64 },
    /// Trainable, constant.
    Constant(f64),
    /// Non-trainable buffer, constant.
    Buffer(f64),
}

/// Name, shape and initializer of one entry, known before allocation.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn trainable(&self) -> bool {
        !matches!(self.init, Init::Buffer(_))
    }
}

/// Stream for one named entry, so a tensor's initial values depend only on
/// `(seed, name)` and not on which other entries the model has.
fn entry_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

/// Named tensors addressed by dotted paths such as
/// `expert_img.stage3.block1.conv2.weight`.
///
/// Trainable entries have `requires_grad` set; the rest are buffers
/// (batch-norm running statistics) that travel with the model but are never
/// touched by the optimizer. Iteration is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates and initializes every spec.
    pub fn from_specs(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut ps = Self::new();
        for spec in specs {
            let n = spec.numel();
            match spec.init {
                Init::Normal { std } => {
                    let dist = Normal::new(0.0, std)
                        .map_err(|e| Error::Usage(format!("`{}`: {e}", spec.name)))?;
                    let mut rng = entry_rng(seed, &spec.name);
                    let data = (0..n).map(|_| dist.sample(&mut rng) as Real).collect();
                    ps.insert_param(spec.name.clone(), Tensor::new(&spec.shape, data)?)?;
                }
                Init::Constant(v) => {
                    ps.insert_param(spec.name.clone(), Tensor::full(&spec.shape, v as Real))?
                }
                Init::Buffer(v) => {
                    ps.insert_buffer(spec.name.clone(), Tensor::full(&spec.shape, v as Real))?
                }
            }
        }
        Ok(ps)
    }

    /// Checks that names, shapes and trainability match `specs` exactly.
    pub fn check_specs(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.len() {
            return Err(Error::Dimension(format!(
                "expected {} entries, found {}",
                specs.len(),
                self.len()
            )));
        }
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
            if t.requires_grad() != spec.trainable() {
                return Err(Error::Usage(format!("`{}` has the wrong kind", spec.name)));
            }
        }
        Ok(())
    }

    /// Inserts a trainable tensor. Names must be unique.
    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        self.insert(name.into(), value.with_grad())
    }

    /// Inserts a non-trainable buffer. Names must be unique.
    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let mut value = value;
        if value.requires_grad() {
            value = Tensor::from_shared(value.shape().to_vec(), value.shared().clone());
        }
        self.insert(name.into(), value)
    }

    fn insert(&mut self, name: String, value: Tensor) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Usage(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Replaces the values of an existing entry, keeping its kind.
    pub fn set_values(&mut self, name: &str, values: &[Real]) -> Result<()> {
        let t = self.get_mut(name)?;
        if t.len() != values.len() {
            return Err(Error::Dimension(format!(
                "`{name}` has {} elements, got {}",
                t.len(),
                values.len()
            )));
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }

    /// All entries, trainable and buffers, in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Trainable entries only.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(_, t)| t.requires_grad())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.clear_grad();
        }
    }
}
