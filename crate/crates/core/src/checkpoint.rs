//! Text checkpoints for the agent and trainer.
//!
//! ```text
//! tspo-checkpoint 1
//! agent.feature_dim 64
//! ...scalar keys...
//! matrix params.w_q 64 64
//! <64 lines of 64 floats>
//! ...
//! end
//! ```
//!
//! Floats are written in shortest round-trip form so a reload reproduces
//! every weight bit for bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{AgentConfig, AgentParameters, NoiseReuse};
use crate::error::{Error, Result};
use crate::numerics::{AttentionParams, Matrix};
use crate::optim::Adam;
use crate::tspo::TrainState;

pub const HEADER: &str = "tspo-checkpoint";
pub const VERSION: u32 = 1;

const SCALAR_KEYS: &[&str] = &[
    "agent.feature_dim",
    "agent.window",
    "agent.temperature",
    "agent.select_count",
    "agent.sim_fusion_weight",
    "agent.noise_reuse",
    "state.step",
    "optim.t",
    "optim.learning_rate",
    "optim.beta1",
    "optim.beta2",
    "optim.epsilon",
    "rng.seed",
    "rng.stream",
    "rng.word_pos",
];

const PARAM_GROUPS: &[&str] = &["params", "old", "reference", "optim.m", "optim.v"];

fn push_matrix(out: &mut String, name: &str, m: &Matrix) {
    let _ = writeln!(out, "matrix {name} {} {}", m.rows(), m.cols());
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

fn push_params(out: &mut String, prefix: &str, p: &AttentionParams) {
    push_matrix(out, &format!("{prefix}.w_q"), &p.w_q);
    push_matrix(out, &format!("{prefix}.w_k"), &p.w_k);
    push_matrix(out, &format!("{prefix}.w_v"), &p.w_v);
}

pub fn encode_checkpoint(agent: &AgentConfig, state: &TrainState) -> String {
    let mut out = format!("{HEADER} {VERSION}\n");
    let seed: String = state
        .rng
        .get_seed()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let opt = &state.optimizer;
    let scalars = [
        agent.feature_dim.to_string(),
        agent.window.to_string(),
        format!("{:?}", agent.temperature),
        agent.select_count.to_string(),
        format!("{:?}", agent.sim_fusion_weight),
        agent.noise_reuse.as_str().to_string(),
        state.step.to_string(),
        opt.t.to_string(),
        format!("{:?}", opt.learning_rate),
        format!("{:?}", opt.beta1),
        format!("{:?}", opt.beta2),
        format!("{:?}", opt.epsilon),
        seed,
        state.rng.get_stream().to_string(),
        state.rng.get_word_pos().to_string(),
    ];
    for (k, v) in SCALAR_KEYS.iter().zip(scalars) {
        let _ = writeln!(out, "{k} {v}");
    }
    push_params(&mut out, "params", &state.params.attn);
    push_params(&mut out, "old", &state.old_params.attn);
    push_params(&mut out, "reference", &state.reference.attn);
    push_params(&mut out, "optim.m", &opt.first_moment);
    push_params(&mut out, "optim.v", &opt.second_moment);
    out.push_str("end\n");
    out
}

/// Parses checkpoint text. Errors carry the 1-based line number.
pub fn decode_checkpoint(text: &str) -> Result<(AgentConfig, TrainState)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::at_line(1, "empty checkpoint"))?;
    let mut head = first.split_whitespace();
    if head.next() != Some(HEADER) {
        return Err(Error::at_line(1, "not a tspo checkpoint"));
    }
    match head.next().map(str::parse::<u32>) {
        Some(Ok(VERSION)) if head.next().is_none() => {}
        _ => {
            return Err(Error::at_line(
                1,
                format!("unsupported checkpoint version line {first:?}"),
            ))
        }
    }

    let mut scalars: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    let mut matrices: BTreeMap<String, Matrix> = BTreeMap::new();
    let mut finished = false;
    let mut last_line = 1;
    while let Some((n, line)) = lines.next() {
        last_line = n;
        if finished {
            if line.trim().is_empty() {
                continue;
            }
            return Err(Error::at_line(n, "content after end marker"));
        }
        if line == "end" {
            finished = true;
            continue;
        }
        let (key, rest) = line
            .split_once(' ')
            .ok_or_else(|| Error::at_line(n, format!("malformed line {line:?}")))?;
        if key == "matrix" {
            let parts: Vec<&str> = rest.split_whitespace().collect();
            let [name, rows, cols] = parts[..] else {
                return Err(Error::at_line(n, "matrix header needs name, rows and cols"));
            };
            let rows: usize = rows
                .parse()
                .map_err(|_| Error::at_line(n, "bad row count"))?;
            let cols: usize = cols
                .parse()
                .map_err(|_| Error::at_line(n, "bad column count"))?;
            if rows > 4096 || cols > 4096 {
                return Err(Error::at_line(n, "matrix too large"));
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (rn, row) = lines
                    .next()
                    .ok_or_else(|| Error::at_line(n, format!("truncated matrix {name}")))?;
                last_line = rn;
                let before = data.len();
                for tok in row.split_whitespace() {
                    let v: f64 = tok
                        .parse()
                        .map_err(|_| Error::at_line(rn, format!("bad float {tok:?}")))?;
                    if !v.is_finite() {
                        return Err(Error::at_line(rn, "non-finite weight"));
                    }
                    data.push(v);
                }
                if data.len() - before != cols {
                    return Err(Error::at_line(rn, format!("expected {cols} values")));
                }
            }
            let m =
                Matrix::from_vec(rows, cols, data).map_err(|e| Error::at_line(n, e.to_string()))?;
            if matrices.insert(name.to_string(), m).is_some() {
                return Err(Error::at_line(n, format!("duplicate matrix {name}")));
            }
        } else {
            if !SCALAR_KEYS.contains(&key) {
                return Err(Error::at_line(n, format!("unknown key {key:?}")));
            }
            if scalars.insert(key, (n, rest.trim())).is_some() {
                return Err(Error::at_line(n, format!("duplicate key {key:?}")));
            }
        }
    }
    if !finished {
        return Err(Error::at_line(
            last_line,
            "truncated checkpoint: missing end marker",
        ));
    }

    let get = |k: &str| -> Result<(usize, &str)> {
        scalars
            .get(k)
            .copied()
            .ok_or_else(|| Error::at_line(last_line, format!("missing key {k}")))
    };
    fn num<T: std::str::FromStr>(v: (usize, &str), what: &str) -> Result<T> {
        v.1.parse()
            .map_err(|_| Error::at_line(v.0, format!("bad value for {what}: {:?}", v.1)))
    }

    let noise = get("agent.noise_reuse")?;
    let agent = AgentConfig {
        feature_dim: num(get("agent.feature_dim")?, "feature_dim")?,
        window: num(get("agent.window")?, "window")?,
        temperature: num(get("agent.temperature")?, "temperature")?,
        select_count: num(get("agent.select_count")?, "select_count")?,
        sim_fusion_weight: num(get("agent.sim_fusion_weight")?, "sim_fusion_weight")?,
        noise_reuse: NoiseReuse::parse(noise.1)
            .ok_or_else(|| Error::at_line(noise.0, format!("bad noise mode {:?}", noise.1)))?,
    };
    let dim_line = get("agent.feature_dim")?.0;
    agent
        .validate()
        .map_err(|e| Error::at_line(dim_line, e.to_string()))?;
    let dim = agent.feature_dim;

    let mut take_params = |prefix: &str| -> Result<AttentionParams> {
        let mut take = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            let m = matrices
                .remove(&name)
                .ok_or_else(|| Error::at_line(last_line, format!("missing matrix {name}")))?;
            if m.shape() != (dim, dim) {
                return Err(Error::at_line(
                    last_line,
                    format!("matrix {name} is {:?}, expected {dim}x{dim}", m.shape()),
                ));
            }
            Ok(m)
        };
        Ok(AttentionParams {
            w_q: take("w_q")?,
            w_k: take("w_k")?,
            w_v: take("w_v")?,
        })
    };
    let mut groups = Vec::with_capacity(PARAM_GROUPS.len());
    for prefix in PARAM_GROUPS {
        groups.push(take_params(prefix)?);
    }
    if let Some(name) = matrices.keys().next() {
        return Err(Error::at_line(
            last_line,
            format!("unexpected matrix {name}"),
        ));
    }
    let [params, old, reference, m, v]: [AttentionParams; 5] =
        groups.try_into().expect("five parameter groups");

    let seed_line = get("rng.seed")?;
    let seed =
        parse_seed(seed_line.1).ok_or_else(|| Error::at_line(seed_line.0, "bad rng seed"))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(num(get("rng.stream")?, "rng.stream")?);
    rng.set_word_pos(num(get("rng.word_pos")?, "rng.word_pos")?);

    let optimizer = Adam {
        learning_rate: num(get("optim.learning_rate")?, "learning_rate")?,
        beta1: num(get("optim.beta1")?, "beta1")?,
        beta2: num(get("optim.beta2")?, "beta2")?,
        epsilon: num(get("optim.epsilon")?, "epsilon")?,
        t: num(get("optim.t")?, "optim.t")?,
        first_moment: m,
        second_moment: v,
    };
    let state = TrainState {
        step: num(get("state.step")?, "step")?,
        params: AgentParameters { attn: params },
        old_params: AgentParameters { attn: old },
        reference: AgentParameters { attn: reference },
        optimizer,
        rng,
    };
    Ok((agent, state))
}

fn parse_seed(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 || !s.is_ascii() {
        return None;
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(seed)
}

/// Writes through a temporary file and renames it into place.
pub fn save_checkpoint(path: &Path, agent: &AgentConfig, state: &TrainState) -> Result<()> {
    let text = encode_checkpoint(agent, state);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(AgentConfig, TrainState)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&text)
}
