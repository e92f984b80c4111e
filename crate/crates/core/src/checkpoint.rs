//! Checkpoint directories: `manifest.json` (layout and metadata) next to
//! `params.bin` (all arrays as little-endian f64, concatenated).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::amp::AmpState;
use crate::error::{Error, Result};
use crate::net::{Adam, AdamConfig, DenseNet, NetManifest};
use crate::policy::{
    ActorParams, CriticParams, Normalizer, Policy, PolicyConfig, PolicyDims, PolicyMode, ResidualModuleParams,
};
use crate::trainer::{CurriculumState, PolicyOptimizer};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub net: Option<NetManifest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub meta: serde_json::Value,
    pub entries: Vec<Entry>,
}

/// Named arrays plus JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    entries: Vec<Entry>,
    data: Vec<f64>,
}

impl Archive {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self {
            kind: kind.to_string(),
            meta,
            entries: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, values: &[f64]) {
        self.entries.push(Entry {
            name: name.into(),
            offset: self.data.len(),
            len: values.len(),
            net: None,
        });
        self.data.extend_from_slice(values);
    }

    pub fn push_net(&mut self, name: impl Into<String>, net: &DenseNet) {
        self.push(name, net.params());
        if let Some(e) = self.entries.last_mut() {
            e.net = Some(net.manifest());
        }
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::CorruptBlob(format!("missing entry {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|e| e.name == name)
    }

    pub fn array(&self, name: &str) -> Result<&[f64]> {
        let e = self.entry(name)?;
        Ok(&self.data[e.offset..e.offset + e.len])
    }

    pub fn net(&self, name: &str) -> Result<DenseNet> {
        let e = self.entry(name)?;
        let m = e
            .net
            .as_ref()
            .ok_or_else(|| Error::CorruptBlob(format!("entry {name} is not a network")))?;
        DenseNet::from_manifest(m, &self.data[e.offset..e.offset + e.len])
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            format_version: CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            entries: self.entries.clone(),
        };
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let ppath = dir.join(PARAMS_FILE);
        fs::write(&ppath, bytes).map_err(|e| Error::io(&ppath, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::FormatVersion {
                found: manifest.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let ppath = dir.join(PARAMS_FILE);
        let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::CorruptBlob(format!("{} is not a whole number of f64", ppath.display())));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        for e in &manifest.entries {
            if e.offset + e.len > data.len() {
                return Err(Error::CorruptBlob(format!("entry {} runs past the end of params.bin", e.name)));
            }
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            entries: manifest.entries,
            data,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PolicyMeta {
    dims: PolicyDims,
    config: PolicyConfig,
    mode: PolicyMode,
    critic_with_gait: bool,
    n_experts: usize,
    actor_norm_count: f64,
    critic_norm_count: f64,
    obs_clip: f64,
}

pub fn write_policy(archive: &mut Archive, prefix: &str, policy: &Policy) -> Result<()> {
    let meta = PolicyMeta {
        dims: policy.dims,
        config: policy.config.clone(),
        mode: policy.mode.clone(),
        critic_with_gait: policy.critic.with_gait,
        n_experts: policy.residual.as_ref().map_or(0, |r| r.experts.len()),
        actor_norm_count: policy.actor_norm.count,
        critic_norm_count: policy.critic_norm.count,
        obs_clip: policy.actor_norm.clip,
    };
    set_meta(archive, &format!("{prefix}policy"), serde_json::to_value(meta)?);
    let a = &policy.actor;
    archive.push_net(format!("{prefix}actor.scan_encoder"), &a.scan_encoder);
    archive.push_net(format!("{prefix}actor.history_encoder"), &a.history_encoder);
    archive.push_net(format!("{prefix}actor.trunk"), &a.trunk);
    archive.push_net(format!("{prefix}actor.head"), &a.head);
    archive.push(format!("{prefix}actor.log_std"), &a.log_std);
    if let Some(r) = &policy.residual {
        for (i, e) in r.experts.iter().enumerate() {
            archive.push_net(format!("{prefix}residual.expert.{i}"), e);
        }
        archive.push_net(format!("{prefix}residual.gate"), &r.gate);
    }
    archive.push_net(format!("{prefix}critic"), &policy.critic.net);
    archive.push(format!("{prefix}norm.actor.mean"), &policy.actor_norm.mean);
    archive.push(format!("{prefix}norm.actor.var"), &policy.actor_norm.var);
    archive.push(format!("{prefix}norm.critic.mean"), &policy.critic_norm.mean);
    archive.push(format!("{prefix}norm.critic.var"), &policy.critic_norm.var);
    Ok(())
}

fn set_meta(archive: &mut Archive, key: &str, value: serde_json::Value) {
    if !archive.meta.is_object() {
        archive.meta = serde_json::json!({});
    }
    archive.meta[key] = value;
}

pub fn read_policy(archive: &Archive, prefix: &str) -> Result<Policy> {
    let meta: PolicyMeta = serde_json::from_value(
        archive
            .meta
            .get(format!("{prefix}policy"))
            .cloned()
            .ok_or_else(|| Error::CorruptBlob("checkpoint has no policy metadata".into()))?,
    )?;
    let actor = ActorParams {
        scan_encoder: archive.net(&format!("{prefix}actor.scan_encoder"))?,
        history_encoder: archive.net(&format!("{prefix}actor.history_encoder"))?,
        trunk: archive.net(&format!("{prefix}actor.trunk"))?,
        head: archive.net(&format!("{prefix}actor.head"))?,
        log_std: archive.array(&format!("{prefix}actor.log_std"))?.to_vec(),
    };
    let residual = if meta.n_experts > 0 {
        let experts = (0..meta.n_experts)
            .map(|i| archive.net(&format!("{prefix}residual.expert.{i}")))
            .collect::<Result<Vec<_>>>()?;
        Some(ResidualModuleParams {
            fusion: meta.mode.fusion,
            experts,
            gate: archive.net(&format!("{prefix}residual.gate"))?,
        })
    } else {
        None
    };
    let norm = |name: &str, count: f64| -> Result<Normalizer> {
        Ok(Normalizer {
            mean: archive.array(&format!("{prefix}norm.{name}.mean"))?.to_vec(),
            var: archive.array(&format!("{prefix}norm.{name}.var"))?.to_vec(),
            count,
            clip: meta.obs_clip,
        })
    };
    let policy = Policy {
        dims: meta.dims,
        config: meta.config.clone(),
        mode: meta.mode.clone(),
        actor,
        residual,
        critic: CriticParams {
            net: archive.net(&format!("{prefix}critic"))?,
            with_gait: meta.critic_with_gait,
        },
        actor_norm: norm("actor", meta.actor_norm_count)?,
        critic_norm: norm("critic", meta.critic_norm_count)?,
    };
    if policy.actor.trunk.output_dim() != policy.config.d_z {
        return Err(Error::DimensionMismatch {
            context: "checkpoint latent width",
            expected: policy.config.d_z,
            got: policy.actor.trunk.output_dim(),
        });
    }
    Ok(policy)
}

pub fn save_policy(dir: impl AsRef<Path>, policy: &Policy) -> Result<()> {
    let mut archive = Archive::new("policy", serde_json::json!({}));
    write_policy(&mut archive, "", policy)?;
    archive.save(dir)
}

pub fn load_policy(dir: impl AsRef<Path>) -> Result<Policy> {
    read_policy(&Archive::load(dir)?, "")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AdamMeta {
    config: AdamConfig,
    step: u64,
}

fn write_adam(archive: &mut Archive, name: &str, adam: &Adam) -> Result<()> {
    set_meta(
        archive,
        &format!("{name}.adam"),
        serde_json::to_value(AdamMeta {
            config: adam.config,
            step: adam.step,
        })?,
    );
    archive.push(format!("{name}.m"), &adam.m);
    archive.push(format!("{name}.v"), &adam.v);
    Ok(())
}

fn read_adam(archive: &Archive, name: &str) -> Result<Adam> {
    let meta: AdamMeta = serde_json::from_value(
        archive
            .meta
            .get(format!("{name}.adam"))
            .cloned()
            .ok_or_else(|| Error::CorruptBlob(format!("missing optimizer {name}")))?,
    )?;
    Ok(Adam {
        config: meta.config,
        m: archive.array(&format!("{name}.m"))?.to_vec(),
        v: archive.array(&format!("{name}.v"))?.to_vec(),
        step: meta.step,
    })
}

pub fn write_optimizer(archive: &mut Archive, opt: &PolicyOptimizer) -> Result<()> {
    set_meta(archive, "optimizer.slices", serde_json::json!(opt.actor.len()));
    set_meta(archive, "optimizer.learning_rate", serde_json::json!(opt.learning_rate));
    for (i, a) in opt.actor.iter().enumerate() {
        write_adam(archive, &format!("opt.actor.{i}"), a)?;
    }
    write_adam(archive, "opt.critic", &opt.critic)
}

pub fn read_optimizer(archive: &Archive) -> Result<PolicyOptimizer> {
    let n = archive.meta["optimizer.slices"]
        .as_u64()
        .ok_or_else(|| Error::CorruptBlob("missing optimizer slice count".into()))? as usize;
    let lr = archive.meta["optimizer.learning_rate"].as_f64().unwrap_or(3e-4);
    Ok(PolicyOptimizer {
        actor: (0..n)
            .map(|i| read_adam(archive, &format!("opt.actor.{i}")))
            .collect::<Result<_>>()?,
        critic: read_adam(archive, "opt.critic")?,
        learning_rate: lr,
    })
}

pub fn write_amp(archive: &mut Archive, amp: &AmpState) -> Result<()> {
    set_meta(archive, "amp.config", serde_json::to_value(&amp.config)?);
    set_meta(archive, "amp.count", serde_json::json!(amp.discriminators.len()));
    for (i, (d, o)) in amp.discriminators.iter().zip(&amp.optimizers).enumerate() {
        archive.push_net(format!("amp.disc.{i}"), d);
        write_adam(archive, &format!("opt.disc.{i}"), o)?;
    }
    Ok(())
}

/// Restores discriminator weights and optimizer state into `amp`.
pub fn read_amp_into(archive: &Archive, amp: &mut AmpState) -> Result<()> {
    let n = archive.meta["amp.count"]
        .as_u64()
        .ok_or_else(|| Error::CorruptBlob("missing discriminator count".into()))? as usize;
    if n != amp.discriminators.len() {
        return Err(Error::DimensionMismatch {
            context: "discriminator count",
            expected: amp.discriminators.len(),
            got: n,
        });
    }
    for i in 0..n {
        amp.discriminators[i] = archive.net(&format!("amp.disc.{i}"))?;
        amp.optimizers[i] = read_adam(archive, &format!("opt.disc.{i}"))?;
    }
    Ok(())
}

pub fn write_curriculum(archive: &mut Archive, c: &CurriculumState) -> Result<()> {
    set_meta(archive, "curriculum", serde_json::to_value(c)?);
    Ok(())
}

pub fn read_curriculum(archive: &Archive) -> Result<Option<CurriculumState>> {
    match archive.meta.get("curriculum") {
        Some(v) => Ok(Some(serde_json::from_value(v.clone())?)),
        None => Ok(None),
    }
}
