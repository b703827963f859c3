use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::autodiff::{Element, Tape, Tensor, Var};
use crate::rng;

use super::{Architecture, ModelError, ModelSpec, PARAM_BUDGET};

const MAGIC: &[u8; 8] = b"PBPARAM1";
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamInit {
    /// Truncated normal, σ = 0.02, cut at ±2σ.
    TruncNormal,
    Zeros,
    Ones,
    /// Rectangular identity `[din, dout]`: copies the first `min(din, dout)` features.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: ParamInit,
}

struct Layout(Vec<ParamDef>);

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: ParamInit) {
        self.0.push(ParamDef { name, shape, init });
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize, bias: bool) {
        self.push(format!("{prefix}.weight"), vec![din, dout], ParamInit::TruncNormal);
        if bias {
            self.push(format!("{prefix}.bias"), vec![dout], ParamInit::Zeros);
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.push(format!("{prefix}.weight"), vec![d], ParamInit::Ones);
        self.push(format!("{prefix}.bias"), vec![d], ParamInit::Zeros);
    }

    fn block(&mut self, prefix: &str, din: usize, dout: usize, hidden: usize) {
        self.norm(&format!("{prefix}.norm1"), din);
        for proj in ["q_proj", "k_proj", "v_proj"] {
            self.linear(&format!("{prefix}.attn.{proj}"), din, dout, true);
        }
        self.linear(&format!("{prefix}.attn.out_proj"), dout, dout, true);
        if din != dout {
            self.push(format!("{prefix}.residual_proj.weight"), vec![din, dout], ParamInit::Identity);
        }
        self.norm(&format!("{prefix}.norm2"), dout);
        self.linear(&format!("{prefix}.mlp.fc1"), dout, hidden, true);
        self.linear(&format!("{prefix}.mlp.fc2"), hidden, dout, true);
    }
}

/// Names, shapes and initializers of every parameter of `spec`.
pub fn layout(spec: &ModelSpec) -> Vec<ParamDef> {
    let mut l = Layout(Vec::new());
    let pd = spec.patch_dim();
    let c = spec.num_classes;
    match spec.arch {
        Architecture::ZachVit => {
            let dims = &spec.embed_dims;
            l.linear("patch_embed", pd, dims[0], true);
            let mut din = dims[0];
            for (s, &d) in dims.iter().enumerate() {
                for j in 0..spec.depth {
                    l.block(&format!("blocks.{}", s * spec.depth + j), din, d, spec.mlp_hidden(d));
                    din = d;
                }
            }
            l.norm("norm", din);
            l.linear("head", din, c, true);
        }
        Architecture::MinimalVit => {
            let d = spec.embed_dims[0];
            l.linear("patch_embed", pd, d, true);
            l.push("cls_token".into(), vec![d], ParamInit::TruncNormal);
            l.push("pos_embed".into(), vec![spec.num_patches() + 1, d], ParamInit::TruncNormal);
            for i in 0..spec.depth {
                l.block(&format!("blocks.{i}"), d, d, spec.mlp_hidden(d));
            }
            l.norm("norm", d);
            l.linear("head", d, c, true);
        }
        Architecture::Abmil => {
            let (h1, h2, a) = (spec.embed_dims[0], spec.embed_dims[1], spec.embed_dims[2]);
            l.linear("encoder.fc1", pd, h1, true);
            l.linear("encoder.fc2", h1, h2, true);
            l.linear("attention.v", h2, a, true);
            l.linear("attention.u", h2, a, true);
            l.linear("attention.w", a, 1, false);
            l.linear("head", h2, c, true);
        }
        Architecture::TransMil => {
            let d = spec.embed_dims[0];
            l.linear("embed", pd, d, true);
            l.push("cls_token".into(), vec![d], ParamInit::TruncNormal);
            for i in 0..spec.depth {
                l.block(&format!("blocks.{i}"), d, d, spec.mlp_hidden(d));
            }
            l.norm("norm", d);
            l.linear("head", d, c, true);
        }
    }
    l.0
}

/// Learned weights, keyed by parameter path (e.g. `blocks.2.attn.q_proj.weight`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor<f32>>,
}

/// Sum of element counts over all parameters.
pub fn count_params(params: &ModelParams) -> usize {
    params.tensors.values().map(Tensor::numel).sum()
}

/// Deterministic initialization of every parameter of `spec`.
///
/// Each parameter draws from its own stream keyed by `(init_seed, name)`.
pub fn build(spec: &ModelSpec, init_seed: u64) -> Result<ModelParams, ModelError> {
    spec.validate()?;
    let defs = layout(spec);
    let count: usize = defs.iter().map(|d| d.shape.iter().product::<usize>()).sum();
    if count >= PARAM_BUDGET {
        return Err(ModelError::ParamBudget { count, budget: PARAM_BUDGET });
    }
    let tensors = defs
        .into_iter()
        .map(|def| {
            let numel: usize = def.shape.iter().product();
            let data: Vec<f32> = match def.init {
                ParamInit::Zeros => vec![0.0; numel],
                ParamInit::Ones => vec![1.0; numel],
                ParamInit::Identity => {
                    let (rows, cols) = (def.shape[0], def.shape[1]);
                    let mut w = vec![0.0; numel];
                    (0..rows.min(cols)).for_each(|i| w[i * cols + i] = 1.0);
                    w
                }
                ParamInit::TruncNormal => {
                    let mut r = rng::stream(init_seed, &["init", &def.name]);
                    (0..numel).map(|_| rng::truncated_normal(&mut r, INIT_STD, 2.0) as f32).collect()
                }
            };
            let t = Tensor::new(def.shape, data).expect("layout shapes are positive");
            (def.name, t)
        })
        .collect();
    Ok(ModelParams { tensors })
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Option<Tensor<f32>> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Checks that names and shapes match `spec` exactly.
    pub fn check_against(&self, spec: &ModelSpec) -> Result<(), ModelError> {
        let defs = layout(spec);
        for def in &defs {
            let t = self.tensors.get(&def.name).ok_or_else(|| ModelError::MissingParam(def.name.clone()))?;
            if t.shape() != def.shape.as_slice() {
                return Err(ModelError::ParamShape {
                    name: def.name.clone(),
                    expected: def.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !defs.iter().any(|d| &d.name == *k)) {
            return Err(ModelError::UnexpectedParam(extra.clone()));
        }
        Ok(())
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind<E: Element>(&self, tape: &mut Tape<E>, requires_grad: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.cast::<E>(), requires_grad)))
            .collect();
        BoundParams { vars }
    }

    /// Binary container: magic, record count, then `(name, shape, f32 LE data)` records.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), ModelError> {
        w.write_all(MAGIC)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, ModelError> {
        fn u32_of(r: &mut impl Read) -> Result<u32, ModelError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::Format("bad magic".into()));
        }
        let count = u32_of(&mut r)?;
        let mut params = ModelParams::new();
        for _ in 0..count {
            let len = u32_of(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| ModelError::Format("name is not UTF-8".into()))?;
            let ndim = u32_of(&mut r)? as usize;
            let shape = (0..ndim).map(|_| u32_of(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 4];
            r.read_exact(&mut raw)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            let t = Tensor::new(shape, data).map_err(|e| ModelError::Format(format!("{name}: {e}")))?;
            if params.insert(name.clone(), t).is_some() {
                return Err(ModelError::Format(format!("duplicate parameter `{name}`")));
            }
        }
        Ok(params)
    }
}

/// Parameters placed on a tape, looked up by name during the forward pass.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.vars.get(name).copied().ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
