use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::autodiff::{Graph, NamedTensors, NamedVars, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    /// uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
    Uniform(usize),
    Zeros,
    Ones,
}

/// Name and shape of one parameter section.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl SectionSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn layout_with_init(cfg: &ModelConfig) -> Vec<(SectionSpec, Init)> {
    let mut out = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        out.push((SectionSpec { name, shape }, init));
    };
    let (c, d, f, pd) = (cfg.conv_channels, cfg.model_dim, cfg.ff_dim, cfg.predictor_dim);
    let input = cfg.input_dim();
    let v1 = cfg.vocab_size + 1;

    add("sub.conv1.w".into(), vec![3 * input, c], Init::Uniform(3 * input));
    add("sub.conv1.b".into(), vec![c], Init::Zeros);
    add("sub.conv2.w".into(), vec![3 * c, c], Init::Uniform(3 * c));
    add("sub.conv2.b".into(), vec![c], Init::Zeros);
    add("sub.proj.w".into(), vec![c, d], Init::Uniform(c));
    add("sub.proj.b".into(), vec![d], Init::Zeros);
    add("enc.mask".into(), vec![d], Init::Uniform(d));
    for b in 0..cfg.num_blocks {
        for w in ["wq", "wk", "wv", "wo"] {
            add(format!("enc.{b}.attn.{w}"), vec![d, d], Init::Uniform(d));
        }
        add(format!("enc.{b}.attn.rel"), vec![cfg.num_heads, 2 * cfg.rel_clip + 1], Init::Zeros);
        add(format!("enc.{b}.ln1.g"), vec![d], Init::Ones);
        add(format!("enc.{b}.ln1.b"), vec![d], Init::Zeros);
        add(format!("enc.{b}.ff1.w"), vec![d, f], Init::Uniform(d));
        add(format!("enc.{b}.ff1.b"), vec![f], Init::Zeros);
        add(format!("enc.{b}.ff2.w"), vec![f, d], Init::Uniform(f));
        add(format!("enc.{b}.ff2.b"), vec![d], Init::Zeros);
        add(format!("enc.{b}.ln2.g"), vec![d], Init::Ones);
        add(format!("enc.{b}.ln2.b"), vec![d], Init::Zeros);
    }
    add("ssl.target.w".into(), vec![d, d], Init::Uniform(d));
    add("ssl.target.b".into(), vec![d], Init::Zeros);
    // row `vocab_size` is the blank start symbol
    add("pred.embed".into(), vec![v1, pd], Init::Uniform(1));
    for gate in ["z", "r", "n"] {
        add(format!("pred.w{gate}"), vec![pd, pd], Init::Uniform(pd));
        add(format!("pred.u{gate}"), vec![pd, pd], Init::Uniform(pd));
        add(format!("pred.b{gate}"), vec![pd], Init::Zeros);
    }
    add("joint.enc.w".into(), vec![d, d], Init::Uniform(d));
    add("joint.pred.w".into(), vec![pd, d], Init::Uniform(pd));
    add("joint.b".into(), vec![d], Init::Zeros);
    add("joint.out.w".into(), vec![d, v1], Init::Uniform(d));
    add("joint.out.b".into(), vec![v1], Init::Zeros);
    out
}

/// Section names and shapes in storage order; a pure function of the config.
pub fn layout(cfg: &ModelConfig) -> Vec<SectionSpec> {
    layout_with_init(cfg).into_iter().map(|(s, _)| s).collect()
}

/// All model parameters as one flat vector with named sections.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    sections: Vec<SectionSpec>,
    offsets: Vec<usize>,
    data: Vec<f64>,
}

impl ParamVector {
    /// Seeded uniform(+-1/sqrt(fan_in)) initialization.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = layout_with_init(cfg);
        let mut data = Vec::with_capacity(specs.iter().map(|(s, _)| s.len()).sum());
        for (spec, init) in &specs {
            match *init {
                Init::Uniform(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    data.extend((0..spec.len()).map(|_| rng.random_range(-bound..bound)));
                }
                Init::Zeros => data.extend(std::iter::repeat_n(0.0, spec.len())),
                Init::Ones => data.extend(std::iter::repeat_n(1.0, spec.len())),
            }
        }
        Self::from_sections(specs.into_iter().map(|(s, _)| s).collect(), data)
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let sections = layout(cfg);
        let n = sections.iter().map(SectionSpec::len).sum();
        Self::from_sections(sections, vec![0.0; n])
    }

    /// Rebuilds a parameter vector from flat data for `cfg`.
    pub fn unflatten(cfg: &ModelConfig, data: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        Self::from_sections(layout(cfg), data)
    }

    pub fn from_sections(sections: Vec<SectionSpec>, data: Vec<f64>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(sections.len());
        let mut total = 0;
        for s in &sections {
            offsets.push(total);
            total += s.len();
        }
        if total != data.len() {
            return Err(Error::input(format!("parameter layout needs {total} values, got {}", data.len())));
        }
        Ok(ParamVector { sections, offsets, data })
    }

    pub fn sections(&self) -> &[SectionSpec] {
        &self.sections
    }

    pub fn flatten(&self) -> &[f64] {
        &self.data
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same layout, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::from_sections(self.sections.clone(), data)
    }

    fn index_of(&self, name: &str) -> Result<usize> {
        self.sections
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::input(format!("no parameter section `{name}`")))
    }

    pub fn section(&self, name: &str) -> Result<Tensor> {
        let i = self.index_of(name)?;
        let s = &self.sections[i];
        let start = self.offsets[i];
        Tensor::new(s.shape.clone(), self.data[start..start + s.len()].to_vec())
    }

    pub fn set_section(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let i = self.index_of(name)?;
        let s = &self.sections[i];
        if s.shape != value.shape() {
            return Err(Error::shape("set_section", format!("{name}: {:?} vs {:?}", s.shape, value.shape())));
        }
        let start = self.offsets[i];
        self.data[start..start + s.len()].copy_from_slice(value.data());
        Ok(())
    }

    /// Registers every section on `g`, as differentiable inputs when
    /// `trainable` and as constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let mut vars = HashMap::with_capacity(self.sections.len());
        let mut order = Vec::with_capacity(self.sections.len());
        for (i, s) in self.sections.iter().enumerate() {
            let start = self.offsets[i];
            let t = Tensor::new(s.shape.clone(), self.data[start..start + s.len()].to_vec())
                .expect("section shapes are validated at construction");
            let v = if trainable { g.input(t) } else { g.constant(t) };
            vars.insert(s.name.clone(), v);
            order.push(v);
        }
        Bound { vars, order }
    }

    /// Sections as a name -> tensor map (for [`crate::autodiff::grad_check`]).
    pub fn to_named(&self) -> NamedTensors {
        self.sections.iter().map(|s| (s.name.clone(), self.section(&s.name).expect("own section"))).collect()
    }

    /// Flattens per-node gradients from [`Graph::backward`] into section order.
    pub fn collect_grad(&self, bound: &Bound, grads: &[Option<Tensor>]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.data.len());
        for (s, v) in self.sections.iter().zip(&bound.order) {
            match &grads[v.id()] {
                Some(t) => out.extend_from_slice(t.data()),
                None => out.extend(std::iter::repeat_n(0.0, s.len())),
            }
        }
        out
    }
}

/// Parameter sections registered on a graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
    order: Vec<Var>,
}

impl Bound {
    /// Wraps leaves created by [`crate::autodiff::forward`] from [`ParamVector::to_named`].
    pub fn from_named(vars: &NamedVars) -> Self {
        Bound { vars: vars.iter().map(|(k, &v)| (k.clone(), v)).collect(), order: vars.values().copied().collect() }
    }

    /// Looks up a section; names come from [`layout`] so a miss is a bug.
    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter section `{name}` not bound"))
    }
}
