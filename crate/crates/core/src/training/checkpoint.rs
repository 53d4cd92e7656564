//! Single-file checkpoint: a text header, the config as TOML, then every
//! tensor as little-endian `f32`.

use std::fs;
use std::io::Write;
use std::path::Path;

use edgesynth_tensor::Tensor;

use super::model::Model;
use super::optim::Adam;
use super::step::TrainState;
use crate::config::Config;
use crate::nn::ParamStore;
use crate::{Error, Result};

const MAGIC: &str = "edgesynth-checkpoint 1";

fn groups(state: &TrainState) -> Vec<(&'static str, &ParamStore<f32>)> {
    let m = &state.model;
    vec![
        ("gen", &m.gen),
        ("disc", &m.disc),
        ("spectral", &m.spectral),
        ("proxy", &m.proxy),
        ("perceptual", &m.perceptual),
        ("opt_g.m", &state.opt_g.m),
        ("opt_g.v", &state.opt_g.v),
        ("opt_d.m", &state.opt_d.m),
        ("opt_d.v", &state.opt_d.v),
        ("opt_p.m", &state.opt_p.m),
        ("opt_p.v", &state.opt_p.v),
    ]
}

/// Serialise `state` to bytes.
pub fn encode(state: &TrainState) -> Result<Vec<u8>> {
    let config = state.config.to_toml_string()?;
    let mut header = format!("{MAGIC}\nstep {}\nconfig {}\n", state.step, config.len());
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    for (group, store) in groups(state) {
        for (name, t) in store.iter() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            header.push_str(&format!("tensor {group}/{name} f32 {} {offset} {}\n", shape.join("x"), t.numel()));
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            offset += t.numel();
        }
    }
    for (name, opt) in [("opt_g", &state.opt_g), ("opt_d", &state.opt_d), ("opt_p", &state.opt_p)] {
        header.push_str(&format!("adam {name} {}\n", opt.t));
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&blob);
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split('x').map(|d| d.parse().map_err(|_| bad(format!("bad shape `{s}`")))).collect()
}

/// Rebuild a state from bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<TrainState> {
    let mut pos = 0usize;
    let mut next_line = || -> Result<String> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
        pos += end + 1;
        String::from_utf8(rest[..end].to_vec()).map_err(|_| bad("header is not utf-8"))
    };
    if next_line()? != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let mut step = None;
    let mut config_len = None;
    let mut tensors = Vec::new();
    let mut counters = Vec::new();
    loop {
        let line = next_line()?;
        let f: Vec<&str> = line.split(' ').collect();
        match f.as_slice() {
            ["end"] => break,
            ["step", s] => step = Some(s.parse::<u64>().map_err(|_| bad("bad step"))?),
            ["config", n] => config_len = Some(n.parse::<usize>().map_err(|_| bad("bad config length"))?),
            ["tensor", key, "f32", shape, off, n] => {
                let (group, name) = key.split_once('/').ok_or_else(|| bad(format!("bad key `{key}`")))?;
                let off: usize = off.parse().map_err(|_| bad("bad offset"))?;
                let n: usize = n.parse().map_err(|_| bad("bad length"))?;
                tensors.push((group.to_string(), name.to_string(), parse_shape(shape)?, off, n));
            }
            ["adam", name, t] => counters.push((name.to_string(), t.parse::<u64>().map_err(|_| bad("bad counter"))?)),
            _ => return Err(bad(format!("unexpected header line `{line}`"))),
        }
    }
    let step = step.ok_or_else(|| bad("missing step"))?;
    let config_len = config_len.ok_or_else(|| bad("missing config"))?;
    let config_bytes = bytes.get(pos..pos + config_len).ok_or_else(|| bad("truncated config"))?;
    let config = Config::from_toml_str(std::str::from_utf8(config_bytes).map_err(|_| bad("config is not utf-8"))?)?;
    let blob = &bytes[pos + config_len..];

    let t = &config.train;
    let adam = || Adam::new(t.lr, t.beta1, t.beta2, t.eps);
    let mut state = TrainState {
        model: Model {
            gen: ParamStore::new(),
            disc: ParamStore::new(),
            spectral: ParamStore::new(),
            proxy: ParamStore::new(),
            perceptual: ParamStore::new(),
        },
        opt_g: adam(),
        opt_d: adam(),
        opt_p: adam(),
        step,
        config: config.clone(),
    };
    for (group, name, shape, off, n) in tensors {
        let raw = blob.get(off * 4..(off + n) * 4).ok_or_else(|| bad(format!("truncated tensor `{name}`")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let tensor = Tensor::new(&shape, data)?;
        let store = match group.as_str() {
            "gen" => &mut state.model.gen,
            "disc" => &mut state.model.disc,
            "spectral" => &mut state.model.spectral,
            "proxy" => &mut state.model.proxy,
            "perceptual" => &mut state.model.perceptual,
            "opt_g.m" => &mut state.opt_g.m,
            "opt_g.v" => &mut state.opt_g.v,
            "opt_d.m" => &mut state.opt_d.m,
            "opt_d.v" => &mut state.opt_d.v,
            "opt_p.m" => &mut state.opt_p.m,
            "opt_p.v" => &mut state.opt_p.v,
            other => return Err(bad(format!("unknown group `{other}`"))),
        };
        store.insert(name, tensor);
    }
    for (name, count) in counters {
        match name.as_str() {
            "opt_g" => state.opt_g.t = count,
            "opt_d" => state.opt_d.t = count,
            "opt_p" => state.opt_p.t = count,
            other => return Err(bad(format!("unknown optimiser `{other}`"))),
        }
    }
    if state.model.gen.is_empty() || state.model.disc.is_empty() {
        return Err(bad("missing parameters"));
    }
    Ok(state)
}

pub fn save(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = encode(state)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainState> {
    decode(&fs::read(path)?)
}
