//! Named parameter storage and binding onto a tape.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Which part of the system a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    /// Frozen backbone.
    Base,
    /// Frozen random codebook of the toy context encoder.
    Encoder,
    Projector,
    Lora,
    Gate,
}

impl Group {
    pub fn of(name: &str) -> Result<Group> {
        let prefix = name.split('.').next().unwrap_or("");
        match prefix {
            "base" => Ok(Group::Base),
            "enc" => Ok(Group::Encoder),
            "proj" => Ok(Group::Projector),
            "lora" => Ok(Group::Lora),
            "gate" => Ok(Group::Gate),
            _ => Err(Error::Checkpoint(format!("parameter `{name}` has no known group"))),
        }
    }
}

pub const LORA_SITES: [&str; 4] = ["q", "v", "ffn_up", "ffn_down"];

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        Group::of(&name)?;
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Turns `requires_grad` on exactly for the listed groups. The backbone
    /// and the encoder codebook can never be enabled.
    pub fn set_trainable(&mut self, groups: &[Group]) -> Result<()> {
        if let Some(g) = groups.iter().find(|g| matches!(g, Group::Base | Group::Encoder)) {
            return Err(Error::contract(format!("{g:?} parameters are frozen")));
        }
        for (name, t) in self.tensors.iter_mut() {
            let g = Group::of(name)?;
            t.set_requires_grad(groups.contains(&g));
        }
        Ok(())
    }

    /// Backbone-only training, used once to produce the frozen backbone
    /// before any adapter stage runs.
    pub(crate) fn set_backbone_trainable(&mut self) -> Result<()> {
        for (name, t) in self.tensors.iter_mut() {
            t.set_requires_grad(Group::of(name)? == Group::Base);
        }
        Ok(())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Deep copy with gradients dropped, for before/after comparisons.
    pub fn snapshot(&self) -> BTreeMap<String, Vec<f32>> {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), t.data().to_vec()))
            .collect()
    }

    pub fn numel_in(&self, group: Group) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| Group::of(k).ok() == Some(group))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

/// Lazily places parameters on a tape, once each.
pub struct Bound<'p> {
    pub store: &'p ParamStore,
    vars: HashMap<&'p str, Var>,
}

impl<'p> Bound<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Bound {
            store,
            vars: HashMap::new(),
        }
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let (key, t) = self
            .store
            .tensors
            .get_key_value(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        let v = tape.leaf(t)?;
        self.vars.insert(key.as_str(), v);
        Ok(v)
    }

    /// Parameter gradients keyed by name, for every bound trainable tensor.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, Vec<f32>> {
        let mut out = BTreeMap::new();
        for (name, v) in &self.vars {
            if !self.store.tensors[*name].requires_grad() {
                continue;
            }
            if let Some(g) = grads.get(*v) {
                out.insert(name.to_string(), g.to_vec());
            }
        }
        out
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::filled(&[1, n], 1.0)
}

fn zeros(r: usize, c: usize) -> Tensor {
    Tensor::zeros(&[r, c])
}

/// Fresh parameters for every group. Each group draws from its own stream
/// so that, for instance, the backbone is unchanged by gate settings.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamStore> {
    cfg.validate()?;
    let mut ps = ParamStore::new();
    init_base(cfg, &mut ps)?;
    init_encoder(cfg, &mut ps)?;
    init_projector(cfg, &mut ps)?;
    init_lora(cfg, &mut ps)?;
    init_gates(cfg, &mut ps)?;
    Ok(ps)
}

fn stream(cfg: &ModelConfig, salt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(salt);
    rng
}

pub fn init_base(cfg: &ModelConfig, ps: &mut ParamStore) -> Result<()> {
    let mut rng = stream(cfg, 1);
    let (d, f, v) = (cfg.d, cfg.ffn_width(), cfg.vocab_size);
    ps.insert("base.tok_emb", Tensor::randn(&[v, d], 0.02, &mut rng))?;
    ps.insert("base.pos_emb", Tensor::randn(&[cfg.max_seq_len, d], 0.02, &mut rng))?;
    for l in 0..cfg.n_layers {
        let p = format!("base.layer{l}");
        ps.insert(format!("{p}.ln1.g"), ones(d))?;
        ps.insert(format!("{p}.ln1.b"), zeros(1, d))?;
        for w in ["q", "k", "v", "o"] {
            ps.insert(format!("{p}.attn.{w}"), Tensor::randn(&[d, d], 0.02, &mut rng))?;
        }
        ps.insert(format!("{p}.ln2.g"), ones(d))?;
        ps.insert(format!("{p}.ln2.b"), zeros(1, d))?;
        ps.insert(format!("{p}.ffn.up"), Tensor::randn(&[d, f], 0.02, &mut rng))?;
        ps.insert(format!("{p}.ffn.up_b"), zeros(1, f))?;
        ps.insert(format!("{p}.ffn.down"), Tensor::randn(&[f, d], 0.02, &mut rng))?;
        ps.insert(format!("{p}.ffn.down_b"), zeros(1, d))?;
    }
    ps.insert("base.ln_f.g", ones(d))?;
    ps.insert("base.ln_f.b", zeros(1, d))?;
    ps.insert("base.out", Tensor::randn(&[d, v], 0.02, &mut rng))?;
    Ok(())
}

pub fn init_encoder(cfg: &ModelConfig, ps: &mut ParamStore) -> Result<()> {
    let mut rng = stream(cfg, 2);
    ps.insert("enc.codebook", Tensor::randn(&[cfg.vocab_size, cfg.d_r], 1.0, &mut rng))
}

/// Projector with a zero final affine, so slots start silent.
pub fn init_projector(cfg: &ModelConfig, ps: &mut ParamStore) -> Result<()> {
    let mut rng = stream(cfg, 3);
    let h = 2 * cfg.d;
    let std = (1.0 / cfg.d_r as f32).sqrt();
    ps.insert("proj.w1", Tensor::randn(&[cfg.d_r, h], std, &mut rng))?;
    ps.insert("proj.b1", zeros(1, h))?;
    ps.insert("proj.w2", zeros(h, cfg.d))?;
    ps.insert("proj.b2", zeros(1, cfg.d))?;
    Ok(())
}

/// A projector with every weight drawn at random, final affine included.
pub fn random_projector(cfg: &ModelConfig, seed: u64, ps: &mut ParamStore) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(33);
    let h = 2 * cfg.d;
    let s1 = (1.0 / cfg.d_r as f32).sqrt();
    let s2 = (1.0 / h as f32).sqrt();
    ps.insert("proj.w1", Tensor::randn(&[cfg.d_r, h], s1, &mut rng))?;
    ps.insert("proj.b1", zeros(1, h))?;
    ps.insert("proj.w2", Tensor::randn(&[h, cfg.d], s2, &mut rng))?;
    ps.insert("proj.b2", zeros(1, cfg.d))?;
    Ok(())
}

pub fn lora_dims(cfg: &ModelConfig, site: &str) -> (usize, usize) {
    match site {
        "ffn_up" => (cfg.d, cfg.ffn_width()),
        "ffn_down" => (cfg.ffn_width(), cfg.d),
        _ => (cfg.d, cfg.d),
    }
}

/// `A` Gaussian (std 0.02), `B` zero: the adapter starts as an exact no-op.
pub fn init_lora(cfg: &ModelConfig, ps: &mut ParamStore) -> Result<()> {
    let mut rng = stream(cfg, 4);
    for l in 0..cfg.n_layers {
        for site in LORA_SITES {
            let (i, o) = lora_dims(cfg, site);
            let p = format!("lora.layer{l}.{site}");
            ps.insert(format!("{p}.A"), Tensor::randn(&[i, cfg.lora_rank], 0.02, &mut rng))?;
            ps.insert(format!("{p}.B"), zeros(cfg.lora_rank, o))?;
        }
    }
    Ok(())
}

pub const GATE_BIAS_INIT: f32 = -1.0;

pub fn init_gates(cfg: &ModelConfig, ps: &mut ParamStore) -> Result<()> {
    let mut rng = stream(cfg, 5);
    let h = cfg.gate_hidden;
    for &l in &cfg.gated_layers {
        let p = format!("gate.layer{l}");
        let std = (1.0 / cfg.d as f32).sqrt();
        ps.insert(format!("{p}.w1"), Tensor::randn(&[cfg.d, h], std, &mut rng))?;
        ps.insert(format!("{p}.b1"), zeros(1, h))?;
        ps.insert(format!("{p}.w2"), Tensor::randn(&[h, 1], 0.02, &mut rng))?;
        ps.insert(format!("{p}.b2"), Tensor::filled(&[1, 1], GATE_BIAS_INIT))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_and_trainable_switch() {
        let cfg = ModelConfig::default();
        let mut ps = init_params(&cfg).unwrap();
        ps.set_trainable(&[Group::Projector, Group::Lora]).unwrap();
        for (name, t) in ps.iter() {
            let g = Group::of(name).unwrap();
            assert_eq!(t.requires_grad(), matches!(g, Group::Projector | Group::Lora), "{name}");
        }
        assert!(ps.set_trainable(&[Group::Base]).is_err());
        assert_eq!(ps.get("lora.layer3.ffn_down.B").unwrap().shape(), &[8, 64]);
        assert!(ps.get("lora.layer0.q.B").unwrap().data().iter().all(|v| *v == 0.0));
        assert!(ps.get("proj.w2").unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        let a = init_params(&cfg).unwrap();
        let b = init_params(&cfg).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
        let mut cfg2 = cfg.clone();
        cfg2.seed = 1;
        assert_ne!(a.snapshot(), init_params(&cfg2).unwrap().snapshot());
    }
}
