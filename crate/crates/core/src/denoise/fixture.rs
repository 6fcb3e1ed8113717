//! Toy-distribution definition files (JSON).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CorruptionModel, DataModel, Denoiser, MarkovChain, MarkovDenoiser, MarkovSource, TemplateDenoiser, TemplateMixture};
use crate::error::{DiceError, Result};
use crate::rng::RngStream;
use crate::tokens::{TokenSeq, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FixtureSpec {
    Templates {
        vocab_size: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        token_names: Option<Vec<String>>,
        conditions: Vec<TemplateConditionSpec>,
    },
    Markov {
        vocab_size: usize,
        length: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        token_names: Option<Vec<String>>,
        conditions: Vec<MarkovConditionSpec>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateConditionSpec {
    pub label: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub templates: Vec<WeightedTemplate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedTemplate {
    pub tokens: Vec<usize>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovConditionSpec {
    pub label: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FixtureModel {
    Templates(TemplateMixture),
    Markov(MarkovSource),
}

/// A validated toy distribution with display names.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub model: FixtureModel,
    pub token_names: Option<Vec<String>>,
    pub condition_names: BTreeMap<u32, String>,
}

fn unique_labels<'a>(labels: impl Iterator<Item = &'a u32>) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for l in labels {
        if !seen.insert(*l) {
            return Err(DiceError::InvalidDistribution(format!("duplicate label {l}")));
        }
    }
    Ok(())
}

impl Fixture {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: FixtureSpec =
            serde_json::from_str(text).map_err(|e| DiceError::Parse(format!("fixture: {e}")))?;
        Self::from_spec(spec)
    }

    pub fn from_spec(spec: FixtureSpec) -> Result<Self> {
        match spec {
            FixtureSpec::Templates {
                vocab_size,
                token_names,
                conditions,
            } => {
                let vocab = Vocab::new(vocab_size, false)?;
                check_names(&token_names, vocab_size)?;
                unique_labels(conditions.iter().map(|c| &c.label))?;
                let names = conditions
                    .iter()
                    .filter_map(|c| c.name.clone().map(|n| (c.label, n)))
                    .collect();
                let comps = conditions
                    .into_iter()
                    .map(|c| {
                        let list = c.templates.into_iter().map(|t| (t.tokens, t.weight)).collect();
                        (c.label, list)
                    })
                    .collect();
                Ok(Self {
                    model: FixtureModel::Templates(TemplateMixture::new(vocab, comps)?),
                    token_names,
                    condition_names: names,
                })
            }
            FixtureSpec::Markov {
                vocab_size,
                length,
                token_names,
                conditions,
            } => {
                let vocab = Vocab::new(vocab_size, false)?;
                check_names(&token_names, vocab_size)?;
                unique_labels(conditions.iter().map(|c| &c.label))?;
                let names = conditions
                    .iter()
                    .filter_map(|c| c.name.clone().map(|n| (c.label, n)))
                    .collect();
                let chains = conditions
                    .into_iter()
                    .map(|c| {
                        (
                            c.label,
                            MarkovChain {
                                initial: c.initial,
                                transition: c.transition,
                            },
                        )
                    })
                    .collect();
                Ok(Self {
                    model: FixtureModel::Markov(MarkovSource::new(vocab, length, chains)?),
                    token_names,
                    condition_names: names,
                })
            }
        }
    }

    pub fn data_model(&self) -> &dyn DataModel {
        match &self.model {
            FixtureModel::Templates(m) => m,
            FixtureModel::Markov(m) => m,
        }
    }

    /// Exact Bayes denoiser for this fixture under `corruption`.
    pub fn denoiser(&self, corruption: CorruptionModel) -> Box<dyn Denoiser> {
        match &self.model {
            FixtureModel::Templates(m) => Box::new(TemplateDenoiser::new(m.clone(), corruption)),
            FixtureModel::Markov(m) => Box::new(MarkovDenoiser::new(m.clone(), corruption)),
        }
    }

    pub fn sample(&self, label: u32, rng: &mut RngStream) -> Result<TokenSeq> {
        self.data_model().sample(label, rng)
    }

    /// Space-joined token names, falling back to ids.
    pub fn render(&self, seq: &TokenSeq) -> String {
        seq.tokens()
            .iter()
            .map(|&t| match &self.token_names {
                Some(names) if t < names.len() => names[t].clone(),
                _ if Some(t) == seq.vocab().mask_id() => "[MASK]".to_string(),
                _ => t.to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn check_names(names: &Option<Vec<String>>, k: usize) -> Result<()> {
    match names {
        Some(n) if n.len() != k => Err(DiceError::InvalidDistribution(format!(
            "{} token names for vocabulary of size {k}",
            n.len()
        ))),
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_templates() {
        let json = r#"{"kind":"templates","vocab_size":3,"conditions":[
            {"label":0,"name":"neg","templates":[{"tokens":[0,1],"weight":0.25},{"tokens":[1,1],"weight":0.75}]},
            {"label":1,"templates":[{"tokens":[2,2],"weight":1.0}]}]}"#;
        let f = Fixture::from_json(json).unwrap();
        assert_eq!(f.data_model().labels(), vec![0, 1]);
        assert_eq!(f.condition_names.get(&0).map(String::as_str), Some("neg"));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_rows() {
        let extra = r#"{"kind":"templates","vocab_size":3,"colour":1,"conditions":[]}"#;
        assert!(Fixture::from_json(extra).is_err());
        let bad_markov = r#"{"kind":"markov","vocab_size":2,"length":3,"conditions":[
            {"label":0,"initial":[0.5,0.5],"transition":[[0.9,0.2],[0.5,0.5]]}]}"#;
        assert!(matches!(
            Fixture::from_json(bad_markov),
            Err(DiceError::InvalidDistribution(_))
        ));
        let dup = r#"{"kind":"markov","vocab_size":2,"length":3,"conditions":[
            {"label":0,"initial":[0.5,0.5],"transition":[[0.5,0.5],[0.5,0.5]]},
            {"label":0,"initial":[0.5,0.5],"transition":[[0.5,0.5],[0.5,0.5]]}]}"#;
        assert!(Fixture::from_json(dup).is_err());
    }
}
