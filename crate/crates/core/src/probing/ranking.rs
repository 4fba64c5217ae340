//! Per-resolution rankings of probe scores and their consensus.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ProbeConfig, ProbeDataset, ProbeResult};
use crate::catalog::ActivationId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub id: ActivationId,
    pub score: f64,
    /// 1-based position in the list.
    pub rank: usize,
    /// Shares its score with a neighbour.
    pub tied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRanking {
    pub dataset: String,
    /// Non-increasing scores; equal scores keep forward order.
    pub entries: Vec<RankEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsensusEntry {
    pub id: ActivationId,
    pub mean_rank: f64,
    pub mean_score: f64,
    /// Shares its mean rank with a neighbour.
    pub tied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionRanking {
    /// `up-level1`, `mid` and so on.
    pub resolution: String,
    pub per_dataset: Vec<DatasetRanking>,
    pub consensus: Vec<ConsensusEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub model: String,
    pub datasets: Vec<String>,
    pub probe: ProbeConfig,
    /// Pool order, then dataset order.
    pub results: Vec<ProbeResult>,
    pub resolutions: Vec<ResolutionRanking>,
}

pub fn resolution_of(id: &ActivationId) -> String {
    match id.level() {
        Some(l) => format!("{}-level{l}", id.stage()),
        None => id.stage().to_string(),
    }
}

impl RankingReport {
    /// `results` must hold one entry per `(id, dataset)`.
    pub(crate) fn build(
        model: &str,
        ids: &[ActivationId],
        datasets: &[ProbeDataset],
        probe: &ProbeConfig,
        mut results: Vec<ProbeResult>,
    ) -> Self {
        let order = |id: &ActivationId| ids.iter().position(|x| x == id).unwrap_or(usize::MAX);
        let dorder = |d: &str| datasets.iter().position(|x| x.name == d).unwrap_or(usize::MAX);
        results.sort_by_key(|r| (order(&r.activation), dorder(&r.dataset)));
        let mut groups: Vec<(String, Vec<&ActivationId>)> = Vec::new();
        for id in ids {
            let res = resolution_of(id);
            match groups.iter_mut().find(|(r, _)| *r == res) {
                Some((_, members)) => members.push(id),
                None => groups.push((res, vec![id])),
            }
        }
        let score = |id: &ActivationId, d: &str| {
            results
                .iter()
                .find(|r| &r.activation == id && r.dataset == d)
                .map_or(f64::NAN, |r| r.score)
        };
        let resolutions = groups
            .into_iter()
            .map(|(resolution, members)| {
                let per_dataset: Vec<DatasetRanking> = datasets
                    .iter()
                    .map(|d| {
                        let mut scored: Vec<(&ActivationId, f64)> =
                            members.iter().map(|id| (*id, score(id, &d.name))).collect();
                        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
                        let entries = scored
                            .iter()
                            .enumerate()
                            .map(|(i, (id, s))| RankEntry {
                                id: (*id).clone(),
                                score: *s,
                                rank: i + 1,
                                tied: (i > 0 && scored[i - 1].1 == *s) || scored.get(i + 1).is_some_and(|n| n.1 == *s),
                            })
                            .collect();
                        DatasetRanking {
                            dataset: d.name.clone(),
                            entries,
                        }
                    })
                    .collect();
                let n = per_dataset.len() as f64;
                let mut consensus: Vec<ConsensusEntry> = members
                    .iter()
                    .map(|id| {
                        let (mut rank, mut total) = (0.0, 0.0);
                        for d in &per_dataset {
                            let e = d.entries.iter().find(|e| &e.id == *id).expect("ranked member");
                            rank += e.rank as f64;
                            total += e.score;
                        }
                        ConsensusEntry {
                            id: (*id).clone(),
                            mean_rank: rank / n,
                            mean_score: total / n,
                            tied: false,
                        }
                    })
                    .collect();
                consensus.sort_by(|a, b| {
                    a.mean_rank
                        .total_cmp(&b.mean_rank)
                        .then(b.mean_score.total_cmp(&a.mean_score))
                        .then(order(&a.id).cmp(&order(&b.id)))
                });
                for i in 0..consensus.len() {
                    let r = consensus[i].mean_rank;
                    consensus[i].tied = (i > 0 && consensus[i - 1].mean_rank == r)
                        || consensus.get(i + 1).is_some_and(|n| n.mean_rank == r);
                }
                ResolutionRanking {
                    resolution,
                    per_dataset,
                    consensus,
                }
            })
            .collect();
        Self {
            model: model.to_string(),
            datasets: datasets.iter().map(|d| d.name.clone()).collect(),
            probe: probe.clone(),
            results,
            resolutions,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One table per resolution in consensus order, scores as mIoU × 100.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let p = &self.probe;
        let _ = writeln!(out, "model: {}", self.model);
        let _ = writeln!(out, "datasets: {}", self.datasets.join(" "));
        let hidden: Vec<String> = p.hidden.iter().map(|h| h.to_string()).collect();
        let _ = writeln!(
            out,
            "probe: ensemble={} hidden={} epochs={} batch={} lr={} seed={}",
            p.ensemble_size,
            hidden.join(","),
            p.epochs,
            p.batch_size,
            p.learning_rate,
            p.seed
        );
        let width = self
            .resolutions
            .iter()
            .flat_map(|r| r.consensus.iter().map(|c| c.id.to_string().len()))
            .max()
            .unwrap_or(10)
            .max(10);
        let mut any_tie = false;
        for res in &self.resolutions {
            let _ = writeln!(out, "\n[{}]", res.resolution);
            let _ = write!(out, "{:<5} {:<width$}", "rank", "activation");
            for d in &self.datasets {
                let _ = write!(out, " {:<14}", d);
            }
            let _ = writeln!(out, " {:>9}", "mean-rank");
            for (i, c) in res.consensus.iter().enumerate() {
                let mark = if c.tied { "=" } else { "" };
                any_tie |= c.tied;
                let _ = write!(out, "{:<5} {:<width$}", format!("{}{mark}", i + 1), c.id.to_string());
                for d in &res.per_dataset {
                    let e = d.entries.iter().find(|e| e.id == c.id).expect("ranked member");
                    let cell = format!("{:.2} ({}{})", e.score * 100.0, e.rank, if e.tied { "=" } else { "" });
                    any_tie |= e.tied;
                    let _ = write!(out, " {cell:<14}");
                }
                let _ = writeln!(out, " {:>9.2}", c.mean_rank);
            }
        }
        if any_tie {
            let _ = writeln!(out, "\n= tied with a neighbour");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::parse_activation_id;
    use std::time::Duration;

    fn result(id: &str, dataset: &str, score: f64) -> ProbeResult {
        ProbeResult {
            activation: parse_activation_id(id).unwrap(),
            dataset: dataset.into(),
            score,
            per_class: vec![],
            seed: 0,
            wall_time: Duration::from_millis(7),
        }
    }

    fn dataset(name: &str) -> ProbeDataset {
        ProbeDataset {
            name: name.into(),
            classes: 2,
            ignore_label: None,
            train: vec![],
            test: vec![],
        }
    }

    #[test]
    fn consensus_uses_mean_rank_then_score_then_order() {
        let ids: Vec<ActivationId> = ["up-level1-repeat0-res-out", "up-level1-repeat1-res-out", "up-level1-upsampler-out", "up-level2-repeat0-res-out"]
            .iter()
            .map(|s| parse_activation_id(s).unwrap())
            .collect();
        let results = vec![
            result("up-level1-repeat0-res-out", "a", 0.5),
            result("up-level1-repeat0-res-out", "b", 0.9),
            result("up-level1-repeat1-res-out", "a", 0.6),
            result("up-level1-repeat1-res-out", "b", 0.7),
            result("up-level1-upsampler-out", "a", 0.1),
            result("up-level1-upsampler-out", "b", 0.1),
            result("up-level2-repeat0-res-out", "a", 0.3),
            result("up-level2-repeat0-res-out", "b", 0.3),
        ];
        let r = RankingReport::build("m", &ids, &[dataset("a"), dataset("b")], &ProbeConfig::default(), results);
        assert_eq!(r.resolutions.len(), 2);
        let l1 = &r.resolutions[0];
        assert_eq!(l1.resolution, "up-level1");
        let order: Vec<String> = l1.consensus.iter().map(|c| c.id.to_string()).collect();
        assert_eq!(order, ["up-level1-repeat0-res-out", "up-level1-repeat1-res-out", "up-level1-upsampler-out"]);
        assert!(l1.consensus[0].tied && l1.consensus[1].tied && !l1.consensus[2].tied);
        assert_eq!(r.resolutions[1].consensus[0].mean_rank, 1.0);
        let text = r.render_text();
        assert!(text.contains("90.00 (1)"));
        assert!(!r.to_json().contains("wall_time"));
    }
}
