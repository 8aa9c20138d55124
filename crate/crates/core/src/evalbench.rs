//! Side-by-side evaluation of frame-sampling policies.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{self, AgentConfig, AgentForward, AgentParameters};
use crate::datapipe::{self, Dataset, SpliceSample};
use crate::error::{Error, Result};
use crate::tspo::{reward_answer, reward_temporal, total_reward};
use crate::worldsim;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    /// The agent's noise-free top-K.
    Tspo,
    Uniform,
    Random,
    /// Greedy cover of the required groups, filled by fused score.
    BestCover,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::Tspo,
        Policy::Uniform,
        Policy::Random,
        Policy::BestCover,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::Tspo => "tspo",
            Policy::Uniform => "uniform",
            Policy::Random => "random",
            Policy::BestCover => "best-cover",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.as_str() == s)
    }

    pub fn needs_agent(self) -> bool {
        matches!(self, Policy::Tspo | Policy::BestCover)
    }
}

/// Averages of one policy over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub policy: Policy,
    pub records: usize,
    pub accuracy: f64,
    /// Mean fraction of selected frames inside the target.
    pub recall: f64,
    pub mean_reward: f64,
    /// Fraction of required groups whose threshold was met.
    pub group_coverage: f64,
}

impl PolicyReport {
    pub const METRICS: [&'static str; 5] = [
        "records",
        "accuracy",
        "recall",
        "mean_reward",
        "group_coverage",
    ];

    fn metric_values(&self) -> [f64; 5] {
        [
            self.records as f64,
            self.accuracy,
            self.recall,
            self.mean_reward,
            self.group_coverage,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// SHA-256 of the dataset's TSDS encoding.
    pub dataset_digest: String,
    pub config: BTreeMap<String, String>,
    pub policies: Vec<PolicyReport>,
}

pub fn dataset_digest(dataset: &Dataset) -> Result<String> {
    let bytes = datapipe::encode_dataset(dataset)?;
    Ok(Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

/// Frames chosen by `policy` for one record.
pub fn select_frames<R: Rng + ?Sized>(
    sample: &SpliceSample,
    policy: Policy,
    params: &AgentParameters,
    agent_cfg: &AgentConfig,
    select_count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let len = sample.candidate_count();
    if select_count == 0 || select_count > len {
        return Err(Error::invalid(format!(
            "cannot select {select_count} of {len} candidate frames"
        )));
    }
    Ok(match policy {
        Policy::Uniform => datapipe::uniform_indices(len, select_count),
        Policy::Random => {
            let mut idx = rand::seq::index::sample(rng, len, select_count).into_vec();
            idx.sort_unstable();
            idx
        }
        Policy::Tspo => {
            let forward =
                AgentForward::run(&sample.frames, &sample.query.embedding, params, agent_cfg)?;
            agent::deterministic_selection(
                forward.fused(),
                &agent_cfg.with_select_count(select_count),
            )?
            .indices
        }
        Policy::BestCover => {
            let forward =
                AgentForward::run(&sample.frames, &sample.query.embedding, params, agent_cfg)?;
            let fused = forward.fused();
            let mut picked = datapipe::greedy_cover(&sample.query).unwrap_or_default();
            picked.truncate(select_count);
            let mut taken = vec![false; len];
            picked.iter().for_each(|&i| taken[i] = true);
            let mut order: Vec<usize> = (0..len).collect();
            order.sort_by(|&a, &b| fused[b].total_cmp(&fused[a]).then(a.cmp(&b)));
            for i in order {
                if picked.len() >= select_count {
                    break;
                }
                if !taken[i] {
                    taken[i] = true;
                    picked.push(i);
                }
            }
            picked.sort_unstable();
            picked
        }
    })
}

/// Scores one policy over every record.
pub fn evaluate<R: Rng + ?Sized>(
    params: &AgentParameters,
    agent_cfg: &AgentConfig,
    dataset: &Dataset,
    policy: Policy,
    select_count: usize,
    rng: &mut R,
) -> Result<PolicyReport> {
    if policy.needs_agent() && dataset.feature_dim != agent_cfg.feature_dim {
        return Err(Error::shape(format!(
            "dataset has dimension {}, agent expects {}",
            dataset.feature_dim, agent_cfg.feature_dim
        )));
    }
    let (mut acc, mut recall, mut reward, mut covered, mut groups) =
        (0.0, 0.0, 0.0, 0usize, 0usize);
    for (r, sample) in dataset.samples.iter().enumerate() {
        let picked = select_frames(sample, policy, params, agent_cfg, select_count, rng)
            .map_err(|e| annotate(e, r))?;
        let answer = worldsim::oracle_answer(&sample.query, &picked, rng);
        let r_a = reward_answer(answer, sample.answer_key());
        let r_t = reward_temporal(&picked, &sample.target_mask)?;
        acc += r_a;
        recall += r_t;
        reward += total_reward(sample.style, r_a, r_t);
        let hits = worldsim::group_hits(&sample.query, &picked);
        covered += hits
            .iter()
            .zip(&sample.query.required_groups)
            .filter(|(&h, g)| h >= g.threshold)
            .count();
        groups += hits.len();
    }
    let n = dataset.len().max(1) as f64;
    Ok(PolicyReport {
        policy,
        records: dataset.len(),
        accuracy: acc / n,
        recall: recall / n,
        mean_reward: reward / n,
        group_coverage: if groups == 0 {
            0.0
        } else {
            covered as f64 / groups as f64
        },
    })
}

fn annotate(e: Error, record: usize) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("record {record}: {m}")),
        Error::DimensionMismatch(m) => Error::DimensionMismatch(format!("record {record}: {m}")),
        other => other,
    }
}

/// Report serialization formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "json" => Some(ReportFormat::Json),
            "csv" => Some(ReportFormat::Csv),
            _ => None,
        }
    }
}

pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s = String::from("policy,metric,value\n");
            for p in &report.policies {
                for (name, value) in PolicyReport::METRICS.iter().zip(p.metric_values()) {
                    s.push_str(&format!("{},{name},{value:?}\n", p.policy.as_str()));
                }
            }
            s
        }
    }
}

pub fn export_report(report: &EvalReport, path: &Path, format: ReportFormat) -> Result<()> {
    fs::write(path, render_report(report, format)).map_err(|e| Error::io(path, e))
}

pub fn parse_report_json(text: &str) -> Result<EvalReport> {
    serde_json::from_str(text).map_err(|e| Error::at_line(e.line(), e.to_string()))
}

/// Reads the per-policy rows of a CSV report. Digest and config echo are
/// only carried by the JSON form.
pub fn parse_report_csv(text: &str) -> Result<Vec<PolicyReport>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, "policy,metric,value")) => {}
        _ => return Err(Error::at_line(1, "missing csv header")),
    }
    let mut out: Vec<(Policy, BTreeMap<&str, f64>)> = Vec::new();
    for (n, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        let [policy, metric, value] = cols[..] else {
            return Err(Error::at_line(n, "expected three columns"));
        };
        let policy = Policy::parse(policy)
            .ok_or_else(|| Error::at_line(n, format!("unknown policy {policy:?}")))?;
        let metric = PolicyReport::METRICS
            .iter()
            .copied()
            .find(|m| *m == metric)
            .ok_or_else(|| Error::at_line(n, format!("unknown metric {metric:?}")))?;
        let value: f64 = value
            .parse()
            .map_err(|_| Error::at_line(n, format!("bad value {value:?}")))?;
        if out.last().is_none_or(|(p, _)| *p != policy) {
            out.push((policy, BTreeMap::new()));
        }
        if out.last_mut().unwrap().1.insert(metric, value).is_some() {
            return Err(Error::at_line(n, format!("duplicate metric {metric}")));
        }
    }
    out.into_iter()
        .map(|(policy, m)| {
            let get = |k: &str| {
                m.get(k).copied().ok_or_else(|| {
                    Error::at_line(0, format!("policy {} lacks {k}", policy.as_str()))
                })
            };
            let records = get("records")?;
            if records < 0.0 || records.fract() != 0.0 || records > u32::MAX as f64 {
                return Err(Error::at_line(0, "record count is not a whole number"));
            }
            Ok(PolicyReport {
                policy,
                records: records as usize,
                accuracy: get("accuracy")?,
                recall: get("recall")?,
                mean_reward: get("mean_reward")?,
                group_coverage: get("group_coverage")?,
            })
        })
        .collect()
}
