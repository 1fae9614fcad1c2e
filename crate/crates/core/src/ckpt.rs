//! Binary checkpoint format.
//!
//! Layout (little-endian):
//! ```text
//! offset 0   magic "LISA-CKPT\0"
//! offset 10  u32 version (currently 1)
//! offset 14  u64 step, u64 epoch, u64 pos   -- training cursor
//! offset 38  u64 optimizer step count
//! offset 46  u32 param tensor count, then per tensor:
//!            u16 name length, name bytes, u64 value count, f64 values
//!            u32 buffer tensor count, same encoding
//!            u32 optimizer entry count: name, count, f64 m's, f64 v's
//!            u64 config length, config JSON (TrainConfig)
//! ```
//!
//! Data-order randomness is derived statelessly from (config seed,
//! epoch, position), so the cursor fields ARE the RNG state: restoring
//! them resumes the exact batch schedule of an uninterrupted run.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::GazeModel;
use crate::nn::{AdamW, Params};

const MAGIC: &[u8; 10] = b"LISA-CKPT\0";
const VERSION: u32 = 1;

/// Position of the training loop, sufficient to resume deterministically.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    /// Sample cursor inside the current epoch's shuffled order.
    pub pos: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub state: TrainState,
    pub config: TrainConfig,
    pub params: BTreeMap<String, Vec<f64>>,
    pub buffers: BTreeMap<String, Vec<f64>>,
    pub opt_t: u64,
    pub opt_moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn capture(
        config: &TrainConfig,
        state: TrainState,
        model: &mut GazeModel,
        opt: &AdamW,
    ) -> Checkpoint {
        let mut params = BTreeMap::new();
        model.visit(&mut |name, p, _| {
            params.insert(name.to_string(), p.to_vec());
        });
        let mut buffers = BTreeMap::new();
        model.visit_buffers(&mut |name, b| {
            buffers.insert(name.to_string(), b.to_vec());
        });
        let (opt_t, moments) = opt.export_state();
        Checkpoint {
            version: VERSION,
            state,
            config: config.clone(),
            params,
            buffers,
            opt_t,
            opt_moments: moments.clone(),
        }
    }

    /// Copy stored tensors into an existing model and optimizer. Every
    /// stored tensor must match a model tensor of the same name/size.
    pub fn install(&self, model: &mut GazeModel, opt: &mut AdamW) -> Result<()> {
        let mut missing: Vec<String> = Vec::new();
        let mut seen = 0usize;
        let mut err: Option<Error> = None;
        model.visit(&mut |name, p, _| {
            if err.is_some() {
                return;
            }
            match self.params.get(name) {
                Some(v) if v.len() == p.len() => {
                    p.copy_from_slice(v);
                    seen += 1;
                }
                Some(v) => {
                    err = Some(Error::config(format!(
                        "checkpoint tensor {name} has {} values, model expects {}",
                        v.len(),
                        p.len()
                    )));
                }
                None => missing.push(name.to_string()),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if !missing.is_empty() {
            return Err(Error::config(format!(
                "checkpoint lacks parameter tensors: {}",
                missing.join(", ")
            )));
        }
        if seen != self.params.len() {
            return Err(Error::config(format!(
                "checkpoint has {} parameter tensors, model consumed {seen}",
                self.params.len()
            )));
        }
        model.visit_buffers(&mut |name, b| {
            if let Some(v) = self.buffers.get(name) {
                if v.len() == b.len() {
                    b.copy_from_slice(v);
                }
            }
        });
        opt.import_state(self.opt_t, self.opt_moments.clone());
        Ok(())
    }

    /// Construct a fresh model/optimizer pair from the stored config and
    /// load this checkpoint into it.
    pub fn rebuild(&self) -> Result<(GazeModel, AdamW)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        let mut model = GazeModel::new(&self.config.model, &mut rng)?;
        let mut opt = AdamW::new(self.config.learning_rate, self.config.weight_decay);
        self.install(&mut model, &mut opt)?;
        Ok((model, opt))
    }
}

fn push_tensor(out: &mut Vec<u8>, name: &str, values: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.state.step.to_le_bytes());
    out.extend_from_slice(&ckpt.state.epoch.to_le_bytes());
    out.extend_from_slice(&ckpt.state.pos.to_le_bytes());
    out.extend_from_slice(&ckpt.opt_t.to_le_bytes());

    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (name, v) in &ckpt.params {
        push_tensor(&mut out, name, v);
    }
    out.extend_from_slice(&(ckpt.buffers.len() as u32).to_le_bytes());
    for (name, v) in &ckpt.buffers {
        push_tensor(&mut out, name, v);
    }
    out.extend_from_slice(&(ckpt.opt_moments.len() as u32).to_le_bytes());
    for (name, (m, v)) in &ckpt.opt_moments {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(m.len() as u64).to_le_bytes());
        for x in m {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let cfg = serde_json::to_vec(&ckpt.config).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);

    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn parse_err(&self, at: usize, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: at as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(self.parse_err(
                self.pos,
                format!(
                    "truncated: {what} needs {n} bytes, {} remain",
                    self.data.len() - self.pos
                ),
            ));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let at = self.pos;
        let len = self.u16("name length")? as usize;
        let bytes = self.take(len, "name")?;
        String::from_utf8(bytes.to_vec())
            .map_err(|e| self.parse_err(at, format!("tensor name not UTF-8: {e}")))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take(8 * n, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut cur = Cursor {
        data: &data,
        pos: 0,
    };
    let magic = cur.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:02x?}, expected {MAGIC:02x?}"),
        });
    }
    let ver_at = cur.pos;
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: ver_at as u64,
            message: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let state = TrainState {
        step: cur.u64("step")?,
        epoch: cur.u64("epoch")?,
        pos: cur.u64("pos")?,
    };
    let opt_t = cur.u64("optimizer step count")?;

    let mut params = BTreeMap::new();
    let n_params = cur.u32("param count")?;
    for _ in 0..n_params {
        let name = cur.name()?;
        let count = cur.u64("tensor length")? as usize;
        let values = cur.floats(count, &format!("values of {name}"))?;
        params.insert(name, values);
    }
    let mut buffers = BTreeMap::new();
    let n_buffers = cur.u32("buffer count")?;
    for _ in 0..n_buffers {
        let name = cur.name()?;
        let count = cur.u64("tensor length")? as usize;
        let values = cur.floats(count, &format!("values of {name}"))?;
        buffers.insert(name, values);
    }
    let mut opt_moments = BTreeMap::new();
    let n_opt = cur.u32("optimizer entry count")?;
    for _ in 0..n_opt {
        let name = cur.name()?;
        let count = cur.u64("moment length")? as usize;
        let m = cur.floats(count, &format!("first moments of {name}"))?;
        let v = cur.floats(count, &format!("second moments of {name}"))?;
        opt_moments.insert(name, (m, v));
    }
    let cfg_at = cur.pos;
    let cfg_len = cur.u64("config length")? as usize;
    let cfg_bytes = cur.take(cfg_len, "config JSON")?;
    let config: TrainConfig = serde_json::from_slice(cfg_bytes)
        .map_err(|e| cur.parse_err(cfg_at, format!("config JSON: {e}")))?;
    if cur.pos != data.len() {
        return Err(cur.parse_err(
            cur.pos,
            format!("{} trailing bytes after config", data.len() - cur.pos),
        ));
    }
    Ok(Checkpoint {
        version,
        state,
        config,
        params,
        buffers,
        opt_t,
        opt_moments,
    })
}

#[cfg(test)]
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;
    use crate::config::DataConfig;
    use crate::model::ModelConfig;
    use crate::synth::SceneSpec;
    use ndarray::Array4;

    fn tiny_train_config() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.model = ModelConfig {
            backbone: crate::backbone::BackboneConfig {
                in_channels: 3,
                stage_channels: vec![4, 6],
                detail_stage_index: 0,
                guide_stage_index: 1,
                aligned_channels: 6,
            },
            fusion: crate::fam::FusionParams::for_channels(6),
            head: crate::head::HeadConfig {
                mlp_hidden: vec![5, 4],
                ..crate::head::HeadConfig::default()
            },
            embed_dim: 5,
            use_spectral_injection: true,
            use_saliency_gating: true,
            use_sdm: true,
        };
        cfg.data = DataConfig {
            scene: Some(SceneSpec {
                n_samples: 4,
                image_size: (16, 16),
                ..SceneSpec::default()
            }),
            ..DataConfig::default()
        };
        cfg
    }

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("lisa-ckpt-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    fn build_pair(cfg: &TrainConfig) -> (GazeModel, AdamW) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = GazeModel::new(&cfg.model, &mut rng).unwrap();
        let opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
        (model, opt)
    }

    #[test]
    fn round_trip_restores_model_bitwise() {
        let cfg = tiny_train_config();
        let (mut model, mut opt) = build_pair(&cfg);
        // Take a couple of steps so optimizer moments are non-trivial.
        let images = Array4::from_shape_fn((2, 3, 8, 8), |(n, c, y, x)| {
            ((n + c + y + x) as f64 * 0.37).sin().abs()
        });
        let labels = vec![
            crate::geometry::GazeAngles::new(0.1, -0.1),
            crate::geometry::GazeAngles::new(-0.2, 0.05),
        ];
        let anchors = crate::sdm::build_anchor_set(&crate::sdm::default_prompt_pool(), 5).unwrap();
        for _ in 0..2 {
            model.zero_grad();
            model
                .train_step(&images, &labels, Some(&anchors), &cfg.loss)
                .unwrap();
            opt.step(&mut model);
        }

        let state = TrainState {
            step: 2,
            epoch: 1,
            pos: 0,
        };
        let ckpt = Checkpoint::capture(&cfg, state, &mut model, &opt);
        let path = tmp("round.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.state, state);
        assert_eq!(loaded.config, cfg);

        let (restored, opt2) = loaded.rebuild().unwrap();
        assert_eq!(opt2.step_count(), opt.step_count());
        let probe = model.forward_eval(&images).unwrap();
        let probe2 = restored.forward_eval(&images).unwrap();
        for (a, b) in probe.out.iter().zip(probe2.out.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn save_load_save_is_byte_stable() {
        let cfg = tiny_train_config();
        let (mut model, opt) = build_pair(&cfg);
        let ckpt = Checkpoint::capture(&cfg, TrainState::default(), &mut model, &opt);
        let p1 = tmp("stable1.ckpt");
        let p2 = tmp("stable2.ckpt");
        save_checkpoint(&p1, &ckpt).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&p2, &loaded).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let path = tmp("badmagic.ckpt");
        fs::write(&path, b"NOT-A-CKPT-FILE....").unwrap();
        match load_checkpoint(&path).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 0),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn unsupported_version_reports_offset_ten() {
        let path = tmp("badver.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&9u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            Error::Parse { offset, message } => {
                assert_eq!(offset, 10, "{message}");
                assert!(message.contains("version"));
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let cfg = tiny_train_config();
        let (mut model, opt) = build_pair(&cfg);
        let ckpt = Checkpoint::capture(&cfg, TrainState::default(), &mut model, &opt);
        let path = tmp("trunc.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        let full = fs::read(&path).unwrap();
        fs::write(&path, &full[..full.len() / 2]).unwrap();
        match load_checkpoint(&path).unwrap_err() {
            Error::Parse { offset, .. } => {
                assert!(offset <= (full.len() / 2) as u64);
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn install_rejects_mismatched_architecture() {
        let cfg = tiny_train_config();
        let (mut model, opt) = build_pair(&cfg);
        let ckpt = Checkpoint::capture(&cfg, TrainState::default(), &mut model, &opt);
        let mut other_cfg = cfg.clone();
        other_cfg.model.backbone.stage_channels = vec![8, 12];
        other_cfg.model.backbone.aligned_channels = 12;
        other_cfg.model.fusion = crate::fam::FusionParams::for_channels(12);
        let (mut other, mut opt2) = build_pair(&other_cfg);
        assert!(ckpt.install(&mut other, &mut opt2).is_err());
    }
}
