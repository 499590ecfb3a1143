//! Checkpoint format: a directory holding
//!   - `manifest.json` — version, config, counters, RNG state, simulator
//!     state and the parameter index (names, shapes, optimizer steps);
//!   - `params.bin`    — little-endian f64 payload: for every parameter in
//!     manifest order, its values then both Adam moments;
//!   - `buffer.jsonl`  — one replay transition per line, ring order.
//!
//! Loading rebuilds the whole trainer; a save/load round trip resumes
//! training bit-for-bit. Writes go to a temp directory renamed into place,
//! and loads construct a fresh trainer before touching anything, so a
//! truncated or corrupt checkpoint can never leave partial state behind.

use super::{ReplayBuffer, TrainConfig, Trainer};
use crate::autodiff::params::ParameterSet;
use crate::autodiff::tensor::Tensor;
use crate::envs::{Env, Transition};
use crate::error::{Error, Result};
use crate::gflownet::ConditionalGFlowNet;
use crate::softq::SoftQFunction;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct SetEntry {
    id: String,
    step: u64,
    params: Vec<ParamEntry>,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: TrainConfig,
    epoch: u64,
    global_step: u64,
    episode_index: u64,
    ebm_updates: u64,
    gfn_updates: u64,
    alpha_current: f64,
    last_action: Option<Vec<u8>>,
    env: Env,
    rng: RngState,
    param_sets: Vec<SetEntry>,
    payload_f64_len: usize,
    buffer_len: usize,
    buffer_cursor: usize,
}

fn set_entry(id: &str, ps: &ParameterSet) -> SetEntry {
    SetEntry {
        id: id.to_string(),
        step: ps.step,
        params: ps
            .iter()
            .map(|(name, p)| ParamEntry {
                name: name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
            })
            .collect(),
    }
}

fn push_set_payload(ps: &ParameterSet, out: &mut Vec<f64>) {
    for (_, p) in ps.iter() {
        out.extend_from_slice(p.value.data());
        out.extend_from_slice(p.m.data());
        out.extend_from_slice(p.v.data());
    }
}

fn sets_of(trainer: &Trainer) -> [(&'static str, &ParameterSet); 8] {
    [
        ("q_online", &trainer.q.params),
        ("q_target", &trainer.q.target_params),
        ("gfn_forward", &trainer.gfn.forward_params),
        ("gfn_backward", &trainer.gfn.backward_params),
        ("gfn_logz", &trainer.gfn.logz_params),
        ("gfn_forward_target", &trainer.gfn.target_forward),
        ("gfn_backward_target", &trainer.gfn.target_backward),
        ("gfn_logz_target", &trainer.gfn.target_logz),
    ]
}

pub fn save(trainer: &Trainer, dir: &Path) -> Result<()> {
    let sets = sets_of(trainer);
    let mut payload: Vec<f64> = Vec::new();
    for (_, ps) in &sets {
        push_set_payload(ps, &mut payload);
    }

    let manifest = Manifest {
        version: VERSION,
        config: trainer.config.clone(),
        epoch: trainer.epoch,
        global_step: trainer.global_step,
        episode_index: trainer.episode_index,
        ebm_updates: trainer.ebm_updates,
        gfn_updates: trainer.gfn_updates,
        alpha_current: trainer.q.alpha(),
        last_action: trainer.last_action.as_ref().map(|a| a.values().to_vec()),
        env: trainer.env.clone(),
        rng: RngState {
            seed: trainer.rng.get_seed(),
            stream: trainer.rng.get_stream(),
            word_pos: trainer.rng.get_word_pos().to_string(),
        },
        param_sets: sets.iter().map(|(id, ps)| set_entry(id, ps)).collect(),
        payload_f64_len: payload.len(),
        buffer_len: trainer.buffer.len(),
        buffer_cursor: trainer.buffer.cursor(),
    };

    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;

    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization: {e}")))?;
    fs::write(tmp.join("manifest.json"), manifest_json)?;

    let mut bin = BufWriter::new(fs::File::create(tmp.join("params.bin"))?);
    for v in &payload {
        bin.write_all(&v.to_le_bytes())?;
    }
    bin.flush()?;

    let mut buf = BufWriter::new(fs::File::create(tmp.join("buffer.jsonl"))?);
    for t in trainer.buffer.entries() {
        let line = serde_json::to_string(t)
            .map_err(|e| Error::Checkpoint(format!("transition serialization: {e}")))?;
        writeln!(buf, "{line}")?;
    }
    buf.flush()?;

    if dir.exists() {
        fs::remove_dir_all(dir)?;
    }
    fs::rename(&tmp, dir)?;
    Ok(())
}

fn restore_set(
    entry: &SetEntry,
    ps: &mut ParameterSet,
    payload: &[f64],
    offset: &mut usize,
) -> Result<()> {
    let names: Vec<String> = ps.names().cloned().collect();
    let manifest_names: Vec<&String> = entry.params.iter().map(|p| &p.name).collect();
    if names.iter().collect::<Vec<_>>() != manifest_names {
        return Err(Error::Checkpoint(format!(
            "parameter names of set {} do not match this build",
            entry.id
        )));
    }
    for pe in &entry.params {
        let len = pe.rows * pe.cols;
        let take = |offset: &mut usize| -> Result<Tensor> {
            if *offset + len > payload.len() {
                return Err(Error::Checkpoint("payload shorter than manifest".into()));
            }
            let t = Tensor::new(vec![pe.rows, pe.cols], payload[*offset..*offset + len].to_vec())?;
            *offset += len;
            Ok(t)
        };
        let value = take(offset)?;
        let m = take(offset)?;
        let v = take(offset)?;
        let current = ps
            .get(&pe.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", pe.name)))?;
        if current.rows() != pe.rows || current.cols() != pe.cols {
            return Err(Error::Checkpoint(format!("shape mismatch for {}", pe.name)));
        }
        for (name, p) in ps.iter_mut() {
            if name == &pe.name {
                p.value = value;
                p.m = m;
                p.v = v;
                p.grad.fill(0.0);
                break;
            }
        }
    }
    ps.step = entry.step;
    Ok(())
}

pub fn load(dir: &Path) -> Result<Trainer> {
    let manifest_raw = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::Checkpoint(format!("manifest unreadable: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&manifest_raw)
        .map_err(|e| Error::Checkpoint(format!("manifest malformed: {e}")))?;
    if manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file {} vs supported {}",
            manifest.version, VERSION
        )));
    }
    manifest.config.validate().map_err(|e| Error::Checkpoint(format!("config invalid: {e}")))?;

    let mut bin = fs::File::open(dir.join("params.bin"))
        .map_err(|e| Error::Checkpoint(format!("payload unreadable: {e}")))?;
    let mut bytes = Vec::new();
    bin.read_to_end(&mut bytes)?;
    if bytes.len() != manifest.payload_f64_len * 8 {
        return Err(Error::Checkpoint(format!(
            "corrupt payload: {} bytes, manifest wants {}",
            bytes.len(),
            manifest.payload_f64_len * 8
        )));
    }
    let payload: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let reader = BufReader::new(
        fs::File::open(dir.join("buffer.jsonl"))
            .map_err(|e| Error::Checkpoint(format!("buffer unreadable: {e}")))?,
    );
    let mut transitions: Vec<Transition> = Vec::with_capacity(manifest.buffer_len);
    for line in reader.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        transitions.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Checkpoint(format!("buffer line malformed: {e}")))?,
        );
    }
    if transitions.len() != manifest.buffer_len {
        return Err(Error::Checkpoint(format!(
            "buffer holds {} transitions, manifest wants {}",
            transitions.len(),
            manifest.buffer_len
        )));
    }

    // Build a fresh trainer, then overwrite every piece of state.
    let spec = {
        let mut s = manifest.env.action_spec().clone();
        s.termination_enabled = manifest.config.termination_enabled;
        s
    };
    let obs_width = manifest.env.obs().width();
    let mut q = SoftQFunction::new(
        &spec,
        obs_width,
        manifest.config.softq_config(),
        manifest.config.seed ^ 0x51,
    )?;
    q.set_alpha(manifest.alpha_current)?;
    let gfn = ConditionalGFlowNet::new(
        &spec,
        obs_width,
        manifest.config.gflownet_config(),
        manifest.config.seed ^ 0x6f,
    )?;

    let mut trainer = Trainer {
        config: manifest.config,
        env: manifest.env,
        q,
        gfn,
        buffer: ReplayBuffer::from_parts(
            0, // replaced below
            Vec::new(),
            0,
        )
        .unwrap_or_else(|_| ReplayBuffer::new(1)),
        rng: ChaCha12Rng::seed_from_u64(0),
        epoch: manifest.epoch,
        global_step: manifest.global_step,
        episode_index: manifest.episode_index,
        last_action: manifest
            .last_action
            .map(crate::action_space::StructuredAction::from_values_unchecked),
        ebm_updates: manifest.ebm_updates,
        gfn_updates: manifest.gfn_updates,
        tb_window: VecDeque::new(),
        value_cache: std::collections::HashMap::new(),
    };
    trainer.buffer = ReplayBuffer::from_parts(
        trainer.config.buffer_capacity,
        transitions,
        manifest.buffer_cursor,
    )?;

    let mut offset = 0usize;
    {
        let mut sets: [(&str, &mut ParameterSet); 8] = [
            ("q_online", &mut trainer.q.params),
            ("q_target", &mut trainer.q.target_params),
            ("gfn_forward", &mut trainer.gfn.forward_params),
            ("gfn_backward", &mut trainer.gfn.backward_params),
            ("gfn_logz", &mut trainer.gfn.logz_params),
            ("gfn_forward_target", &mut trainer.gfn.target_forward),
            ("gfn_backward_target", &mut trainer.gfn.target_backward),
            ("gfn_logz_target", &mut trainer.gfn.target_logz),
        ];
        if manifest.param_sets.len() != sets.len() {
            return Err(Error::Checkpoint("unexpected parameter set count".into()));
        }
        for (entry, (id, ps)) in manifest.param_sets.iter().zip(sets.iter_mut()) {
            if entry.id != *id {
                return Err(Error::Checkpoint(format!(
                    "parameter set order mismatch: {} vs {}",
                    entry.id, id
                )));
            }
            restore_set(entry, ps, &payload, &mut offset)?;
        }
    }
    if offset != payload.len() {
        return Err(Error::Checkpoint("payload longer than manifest".into()));
    }

    let mut rng = ChaCha12Rng::from_seed(manifest.rng.seed);
    rng.set_stream(manifest.rng.stream);
    let word_pos: u128 = manifest
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::Checkpoint("rng word position malformed".into()))?;
    rng.set_word_pos(word_pos);
    trainer.rng = rng;

    Ok(trainer)
}
