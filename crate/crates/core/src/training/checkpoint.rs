//! Binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` version, `u64` header length, a JSON header
//! naming every tensor and its shape, then the tensors as little-endian `f32`
//! in header order. No wall-clock data is stored in the file, so a
//! save → load → save cycle is byte-identical. Creation time lives in the
//! `<path>.json` sidecar.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainState};
use crate::error::{Error, Result};
use crate::losses::MeanLatent;
use crate::model::{LatentPrior, SkipStats};
use crate::nn::{Adam, ParamStore};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"FUNDUSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdamScalars {
    beta1: f32,
    beta2: f32,
    eps: f32,
    t: u64,
    slots: usize,
}

impl AdamScalars {
    fn of(a: &Adam) -> Self {
        AdamScalars {
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            t: a.t,
            slots: a.m.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    config: TrainConfig,
    config_digest: String,
    step: u64,
    adam: AdamScalars,
    ema_decay: f32,
    ema_updates: u64,
    params: usize,
    prior_skips: Option<Vec<usize>>,
    critic: Option<(usize, AdamScalars)>,
    tensors: Vec<TensorEntry>,
}

/// Small human-readable companion written next to each checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub version: u32,
    pub step: u64,
    pub config_digest: String,
    pub created_at: String,
}

/// Full training state plus the fitted prior, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub config_digest: String,
    pub step: u64,
    pub params: ParamStore,
    pub adam: Adam,
    pub mean_latent: MeanLatent,
    pub prior: Option<LatentPrior>,
    pub critic: Option<(ParamStore, Adam)>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, prior: Option<LatentPrior>) -> Result<Self> {
        Ok(Checkpoint {
            config: state.cfg.clone(),
            config_digest: state.cfg.digest()?,
            step: state.step,
            params: state.model.store.clone(),
            adam: state.adam.clone(),
            mean_latent: state.mean_latent.clone(),
            prior,
            critic: state.critic.as_ref().map(|c| (c.store.clone(), c.adam.clone())),
        })
    }

    /// Rebuild the training state; architecture comes from the stored config.
    pub fn into_state(self) -> Result<TrainState> {
        let mut state = TrainState::new(&self.config)?;
        state.model.store.load_from(self.params.names(), self.params.tensors().to_vec())?;
        state.adam = self.adam;
        state.mean_latent = self.mean_latent;
        state.step = self.step;
        match (state.critic.as_mut(), self.critic) {
            (Some(c), Some((store, adam))) => {
                c.store.load_from(store.names(), store.tensors().to_vec())?;
                c.adam = adam;
            }
            (None, None) => {}
            _ => return Err(Error::Checkpoint("critic presence disagrees with the stored config".into())),
        }
        Ok(state)
    }

    pub fn model(&self) -> Result<crate::model::Model> {
        let mut m = crate::model::Model::new(&self.config.model, self.config.seed)?;
        m.store.load_from(self.params.names(), self.params.tensors().to_vec())?;
        Ok(m)
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (n, t) in self.params.names().iter().zip(self.params.tensors()) {
            out.push((format!("param/{n}"), t));
        }
        push_adam(&mut out, "adam", &self.adam);
        out.push(("ema/w_bar".into(), &self.mean_latent.w_bar));
        if let Some(p) = &self.prior {
            out.push(("prior/w_mean".into(), &p.w_mean));
            out.push(("prior/w_var".into(), &p.w_var));
            out.push(("prior/f_mean".into(), &p.f_mean));
            out.push(("prior/f_std".into(), &p.f_std));
            for (k, s) in p.skips.iter().enumerate() {
                out.push((format!("prior/skip{k}/mean"), &s.mean));
                out.push((format!("prior/skip{k}/std"), &s.std));
            }
        }
        if let Some((store, adam)) = &self.critic {
            for (n, t) in store.names().iter().zip(store.tensors()) {
                out.push((format!("critic/{n}"), t));
            }
            push_adam(&mut out, "critic_adam", adam);
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.named_tensors();
        let header = Header {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            config_digest: self.config_digest.clone(),
            step: self.step,
            adam: AdamScalars::of(&self.adam),
            ema_decay: self.mean_latent.decay,
            ema_updates: self.mean_latent.update_count,
            params: self.params.len(),
            prior_skips: self.prior.as_ref().map(|p| p.skips.iter().map(|s| s.resolution).collect()),
            critic: self.critic.as_ref().map(|(s, a)| (s.len(), AdamScalars::of(a))),
            tensors: named
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 20 + 4 * named.iter().map(|(_, t)| t.numel()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated checkpoint"))?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(|_| bad("truncated checkpoint"))?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(|_| bad("truncated checkpoint"))?;
        let hlen = u64::from_le_bytes(b8) as usize;
        if r.len() < hlen {
            return Err(bad("truncated checkpoint header"));
        }
        let header: Header =
            serde_json::from_slice(&r[..hlen]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        r = &r[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if r.len() < 4 * n {
                return Err(Error::Checkpoint(format!("truncated data for {}", e.name)));
            }
            let data = r[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            r = &r[4 * n..];
            tensors.push((e.name.clone(), Tensor::new(&e.shape, data)?));
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes after checkpoint data"));
        }
        let mut it = tensors.into_iter();
        let mut take = |prefix: &str| -> Result<(String, Tensor)> {
            let (n, t) = it.next().ok_or_else(|| bad("missing tensors"))?;
            let rest = n
                .strip_prefix(prefix)
                .ok_or_else(|| Error::Checkpoint(format!("expected {prefix}*, found {n}")))?;
            Ok((rest.to_string(), t))
        };
        let mut params = ParamStore::new();
        for _ in 0..header.params {
            let (n, t) = take("param/")?;
            params.add(n, t);
        }
        let adam = read_adam(&mut take, "adam", &header.adam)?;
        let mean_latent = MeanLatent {
            w_bar: take("ema/w_bar")?.1,
            decay: header.ema_decay,
            update_count: header.ema_updates,
        };
        let prior = match &header.prior_skips {
            Some(res) => {
                let w_mean = take("prior/w_mean")?.1;
                let w_var = take("prior/w_var")?.1;
                let f_mean = take("prior/f_mean")?.1;
                let f_std = take("prior/f_std")?.1;
                let mut skips = Vec::new();
                for (k, &resolution) in res.iter().enumerate() {
                    skips.push(SkipStats {
                        resolution,
                        mean: take(&format!("prior/skip{k}/mean"))?.1,
                        std: take(&format!("prior/skip{k}/std"))?.1,
                    });
                }
                Some(LatentPrior {
                    w_mean,
                    w_var,
                    f_mean,
                    f_std,
                    skips,
                })
            }
            None => None,
        };
        let critic = match &header.critic {
            Some((count, scalars)) => {
                let mut store = ParamStore::new();
                for _ in 0..*count {
                    let (n, t) = take("critic/")?;
                    store.add(n, t);
                }
                Some((store, read_adam(&mut take, "critic_adam", scalars)?))
            }
            None => None,
        };
        Ok(Checkpoint {
            config: header.config,
            config_digest: header.config_digest,
            step: header.step,
            params,
            adam,
            mean_latent,
            prior,
            critic,
        })
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Write the checkpoint atomically and refresh its sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        let side = Sidecar {
            version: CHECKPOINT_VERSION,
            step: self.step,
            config_digest: self.config_digest.clone(),
            created_at: chrono::Utc::now().to_rfc3339(),
        };
        let sp = Self::sidecar_path(path);
        fs::write(&sp, serde_json::to_string_pretty(&side)?).map_err(|e| Error::io(&sp, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn push_adam<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, a: &'a Adam) {
    for (i, t) in a.m.iter().enumerate() {
        out.push((format!("{prefix}/m{i}"), t));
    }
    for (i, t) in a.v.iter().enumerate() {
        out.push((format!("{prefix}/v{i}"), t));
    }
}

fn read_adam(take: &mut dyn FnMut(&str) -> Result<(String, Tensor)>, prefix: &str, s: &AdamScalars) -> Result<Adam> {
    let mut m = Vec::with_capacity(s.slots);
    let mut v = Vec::with_capacity(s.slots);
    for _ in 0..s.slots {
        m.push(take(&format!("{prefix}/m"))?.1);
    }
    for _ in 0..s.slots {
        v.push(take(&format!("{prefix}/v"))?.1);
    }
    Ok(Adam {
        beta1: s.beta1,
        beta2: s.beta2,
        eps: s.eps,
        t: s.t,
        m,
        v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::imaging::{batch, synthesize_toy_fundus};
    use crate::losses::PerceptualExtractor;
    use crate::training::train_step;

    fn trained(adv: f64) -> TrainState {
        let mut cfg = TrainConfig {
            model: ModelConfig::tiny(),
            batch_size: 2,
            total_steps: 4,
            critic_widths: vec![4, 8],
            ..TrainConfig::default()
        };
        cfg.weights.adv = adv;
        let mut s = TrainState::new(&cfg).unwrap();
        let imgs: Vec<_> = (0..2).map(|i| synthesize_toy_fundus(i, 32).unwrap().0).collect();
        let x = batch(&imgs.iter().collect::<Vec<_>>()).unwrap();
        train_step(&mut s, &x, &PerceptualExtractor::test_profile()).unwrap();
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        for adv in [0.0, 0.1] {
            let s = trained(adv);
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("a.bin");
            let ck = Checkpoint::from_state(&s, None).unwrap();
            ck.save(&p).unwrap();
            let loaded = Checkpoint::load(&p).unwrap();
            assert_eq!(loaded, ck);
            let q = dir.path().join("b.bin");
            loaded.save(&q).unwrap();
            assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
            let side: Sidecar = serde_json::from_str(&fs::read_to_string(Checkpoint::sidecar_path(&p)).unwrap()).unwrap();
            assert_eq!(side.step, 1);
            assert_eq!(side.config_digest, s.cfg.digest().unwrap());
            let back = loaded.into_state().unwrap();
            assert_eq!(back.model.store.checksum(), s.model.store.checksum());
            assert_eq!(back.adam, s.adam);
        }
    }

    #[test]
    fn prior_survives_roundtrip() {
        let s = trained(0.0);
        let imgs: Vec<_> = (0..3).map(|i| synthesize_toy_fundus(i, 32).unwrap().0).collect();
        let code = s.model.encode_images(&imgs, 2, 2).unwrap();
        let prior = LatentPrior::fit(&code).unwrap();
        let ck = Checkpoint::from_state(&s, Some(prior.clone())).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.prior, Some(prior));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ck = Checkpoint::from_state(&trained(0.0), None).unwrap();
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        assert!(matches!(Checkpoint::from_bytes(b"garbage!garbage!"), Err(Error::Checkpoint(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Checkpoint(_))));
    }
}
