use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary};
use super::Label;
use crate::error::{Error, Result};

/// Size and sampling knobs of a synthetic relevance world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub n_intents: usize,
    pub n_attributes: usize,
    pub n_rules: usize,
    /// Extra surface forms per intent concept.
    pub intent_synonyms: usize,
    /// Extra surface forms per attribute concept.
    pub attribute_synonyms: usize,
    pub n_fillers: usize,
    /// Attributes per service.
    pub service_size: usize,
    /// Probability that a query or attribute is rendered with a synonym.
    pub synonym_rate: f64,
    /// Probability that a query carries a filler token.
    pub filler_rate: f64,
    /// Probability that a proposed service is seeded with one rule pattern.
    pub pattern_rate: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            n_intents: 30,
            n_attributes: 60,
            n_rules: 120,
            intent_synonyms: 1,
            attribute_synonyms: 1,
            n_fillers: 10,
            service_size: 3,
            synonym_rate: 0.5,
            filler_rate: 0.5,
            pattern_rate: 0.7,
        }
    }
}

impl WorldConfig {
    /// Distinct (intent, attribute-set) patterns with sets of size 1 or 2.
    pub fn pattern_combinations(&self) -> usize {
        let a = self.n_attributes;
        self.n_intents * (a + a * a.saturating_sub(1) / 2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_intents == 0 || self.n_attributes == 0 || self.n_rules == 0 {
            return bad("world sizes must be positive".into());
        }
        if self.n_rules < self.n_intents {
            return bad(format!(
                "{} rules cannot cover {} intents",
                self.n_rules, self.n_intents
            ));
        }
        if self.n_rules > self.pattern_combinations() {
            return bad(format!(
                "{} rules requested but only {} patterns exist",
                self.n_rules,
                self.pattern_combinations()
            ));
        }
        if self.service_size == 0 || self.service_size > self.n_attributes {
            return bad(format!("service size {} out of range", self.service_size));
        }
        for (name, p) in [
            ("synonym_rate", self.synonym_rate),
            ("filler_rate", self.filler_rate),
            ("pattern_rate", self.pattern_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        Ok(())
    }
}

/// A latent concept and its surface tokens; `surfaces[0]` is canonical.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub surfaces: Vec<String>,
}

impl Concept {
    pub fn canonical(&self) -> &str {
        &self.surfaces[0]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub token: String,
    pub intent: usize,
    /// Attribute concepts that must all be present in the service.
    pub attributes: Vec<usize>,
    pub label: Label,
}

/// Outcome of first-match rule resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Decision {
    /// Index into the rule table; `None` when no rule fired.
    pub rule: Option<usize>,
    pub label: Label,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Intent(usize),
    Attribute(usize),
    Filler,
    Rule(Option<usize>),
    Label(Label),
    Special,
}

pub const NO_RULE_TOKEN: &str = "rule_none";

pub fn label_token(label: Label) -> &'static str {
    match label {
        Label::Irrelevant => "L0",
        Label::Moderate => "L1",
        Label::Relevant => "L2",
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldFile {
    seed: u64,
    config: WorldConfig,
    intents: Vec<Concept>,
    attributes: Vec<Concept>,
    fillers: Vec<String>,
    rules: Vec<Rule>,
    vocabulary: Vocabulary,
}

/// Seeded rule-based relevance world.
///
/// Labels are a pure function of the query's intent concept and the
/// service's attribute concepts: the first rule (in table order) whose intent
/// matches and whose attributes are all present decides; if none fires the
/// pair is irrelevant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorldFile", into = "WorldFile")]
pub struct World {
    pub seed: u64,
    pub config: WorldConfig,
    pub intents: Vec<Concept>,
    pub attributes: Vec<Concept>,
    pub fillers: Vec<String>,
    pub rules: Vec<Rule>,
    pub vocab: Vocabulary,
    surfaces: HashMap<String, Surface>,
    rules_by_intent: Vec<Vec<usize>>,
}

impl TryFrom<WorldFile> for World {
    type Error = Error;

    fn try_from(f: WorldFile) -> Result<Self> {
        World::assemble(f.seed, f.config, f.intents, f.attributes, f.fillers, f.rules, Some(f.vocabulary))
    }
}

impl From<World> for WorldFile {
    fn from(w: World) -> Self {
        WorldFile {
            seed: w.seed,
            config: w.config,
            intents: w.intents,
            attributes: w.attributes,
            fillers: w.fillers,
            rules: w.rules,
            vocabulary: w.vocab,
        }
    }
}

fn concepts(prefix: &str, n: usize, synonyms: usize) -> Vec<Concept> {
    const SUFFIX: &[u8] = b"bcdefghjkmnpqrstuvwxyz";
    (0..n)
        .map(|i| {
            let base = format!("{prefix}{i:02}");
            let mut surfaces = vec![base.clone()];
            surfaces.extend((0..synonyms).map(|s| format!("{base}{}", SUFFIX[s % SUFFIX.len()] as char)));
            Concept { surfaces }
        })
        .collect()
}

impl World {
    /// Deterministic world for `(seed, config)`.
    pub fn generate(seed: u64, config: &WorldConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let intents = concepts("q", config.n_intents, config.intent_synonyms);
        let attributes = concepts("a", config.n_attributes, config.attribute_synonyms);
        let fillers = (0..config.n_fillers).map(|i| format!("w{i:02}")).collect();

        // Rules are drawn round-robin over intents. Round 0 gives every intent
        // a core pattern that makes it relevant; rounds 1-2 add partial-overlap
        // rules on each half of that core; later rounds add fresh patterns.
        let n_attr = config.n_attributes;
        let mut used: Vec<BTreeSet<Vec<usize>>> = vec![BTreeSet::new(); config.n_intents];
        let mut core: Vec<Vec<usize>> = Vec::with_capacity(config.n_intents);
        let mut drafts: Vec<(usize, Vec<usize>, Label)> = Vec::with_capacity(config.n_rules);
        let mut round = 0;
        while drafts.len() < config.n_rules {
            for intent in 0..config.n_intents {
                if drafts.len() == config.n_rules {
                    break;
                }
                let capacity = n_attr + n_attr * (n_attr - 1) / 2;
                if used[intent].len() == capacity {
                    continue;
                }
                let (pattern, label) = match round {
                    0 => {
                        let mut p = sample_distinct(&mut rng, n_attr, n_attr.min(2));
                        p.sort_unstable();
                        core.push(p.clone());
                        (p, Label::Relevant)
                    }
                    1 | 2 if core[intent].len() == 2 => (vec![core[intent][round - 1]], Label::Moderate),
                    _ => loop {
                        let size = if n_attr >= 2 && rng.random_bool(0.5) { 2 } else { 1 };
                        let mut p = sample_distinct(&mut rng, n_attr, size);
                        p.sort_unstable();
                        if !used[intent].contains(&p) {
                            let label = if size == 2 { Label::Relevant } else { Label::Moderate };
                            break (p, label);
                        }
                    },
                };
                if used[intent].insert(pattern.clone()) {
                    drafts.push((intent, pattern, label));
                }
            }
            round += 1;
        }
        // More specific patterns match first.
        drafts.sort_by_key(|(_, p, _)| std::cmp::Reverse(p.len()));
        let rules = drafts
            .into_iter()
            .enumerate()
            .map(|(k, (intent, attributes, label))| Rule {
                token: format!("r{k:03}"),
                intent,
                attributes,
                label,
            })
            .collect();
        Self::assemble(seed, config.clone(), intents, attributes, fillers, rules, None)
    }

    fn assemble(
        seed: u64,
        config: WorldConfig,
        intents: Vec<Concept>,
        attributes: Vec<Concept>,
        fillers: Vec<String>,
        rules: Vec<Rule>,
        vocab: Option<Vocabulary>,
    ) -> Result<Self> {
        let mut surfaces = HashMap::new();
        let mut extra: Vec<String> = Vec::new();
        for l in Label::ALL {
            surfaces.insert(label_token(l).to_string(), Surface::Label(l));
            extra.push(label_token(l).into());
        }
        surfaces.insert(NO_RULE_TOKEN.into(), Surface::Rule(None));
        extra.push(NO_RULE_TOKEN.into());
        for f in &fillers {
            surfaces.insert(f.clone(), Surface::Filler);
            extra.push(f.clone());
        }
        for (i, c) in intents.iter().enumerate() {
            for s in &c.surfaces {
                surfaces.insert(s.clone(), Surface::Intent(i));
                extra.push(s.clone());
            }
        }
        for (i, c) in attributes.iter().enumerate() {
            for s in &c.surfaces {
                surfaces.insert(s.clone(), Surface::Attribute(i));
                extra.push(s.clone());
            }
        }
        let mut rules_by_intent = vec![Vec::new(); intents.len()];
        for (k, r) in rules.iter().enumerate() {
            if r.intent >= intents.len() || r.attributes.iter().any(|&a| a >= attributes.len()) {
                return Err(Error::Data(format!("rule {} references unknown concepts", r.token)));
            }
            surfaces.insert(r.token.clone(), Surface::Rule(Some(k)));
            extra.push(r.token.clone());
            rules_by_intent[r.intent].push(k);
        }
        let built = Vocabulary::new(extra)?;
        if let Some(v) = vocab {
            if v != built {
                return Err(Error::Data("world vocabulary does not match its inventories".into()));
            }
        }
        for t in built.tokens().iter().take(3) {
            surfaces.insert(t.clone(), Surface::Special);
        }
        Ok(Self { seed, config, intents, attributes, fillers, rules, vocab: built, surfaces, rules_by_intent })
    }

    pub fn surface(&self, token: &str) -> Option<Surface> {
        self.surfaces.get(token).copied()
    }

    /// First-match resolution for an intent concept and a set of attribute concepts.
    pub fn decide(&self, intent: usize, attributes: &[usize]) -> Decision {
        for &k in &self.rules_by_intent[intent] {
            let r = &self.rules[k];
            if r.attributes.iter().all(|a| attributes.contains(a)) {
                return Decision { rule: Some(k), label: r.label };
            }
        }
        Decision { rule: None, label: Label::Irrelevant }
    }

    /// Intent concept of a query: the first intent surface token it contains.
    pub fn query_intent<S: AsRef<str>>(&self, query: &[S]) -> Result<usize> {
        query
            .iter()
            .find_map(|t| match self.surface(t.as_ref()) {
                Some(Surface::Intent(i)) => Some(i),
                _ => None,
            })
            .ok_or_else(|| Error::Data("query carries no intent token".into()))
    }

    /// Attribute concepts of a service, in order of appearance.
    pub fn service_attributes<S: AsRef<str>>(&self, service: &[S]) -> Result<Vec<usize>> {
        service
            .iter()
            .map(|t| match self.surface(t.as_ref()) {
                Some(Surface::Attribute(a)) => Ok(a),
                _ => Err(Error::Data(format!("{:?} is not an attribute token", t.as_ref()))),
            })
            .collect()
    }

    pub fn decide_surfaces<S: AsRef<str>>(&self, query: &[S], service: &[S]) -> Result<Decision> {
        Ok(self.decide(self.query_intent(query)?, &self.service_attributes(service)?))
    }

    pub fn deciding_token(&self, d: Decision) -> &str {
        match d.rule {
            Some(k) => &self.rules[k].token,
            None => NO_RULE_TOKEN,
        }
    }

    /// Attribute concepts that justify a decision: the fired rule's pattern,
    /// or every attribute of the service when no rule fired.
    pub fn evidence(&self, d: Decision, service_attributes: &[usize]) -> Vec<usize> {
        match d.rule {
            Some(k) => self.rules[k].attributes.clone(),
            None => service_attributes.to_vec(),
        }
    }

    /// Templated reasoning path: canonical intent, evidence attributes,
    /// deciding rule, label.
    pub fn oracle_reason(&self, intent: usize, service_attributes: &[usize]) -> Vec<String> {
        let d = self.decide(intent, service_attributes);
        let mut r = vec![self.intents[intent].canonical().to_string()];
        r.extend(
            self.evidence(d, service_attributes)
                .into_iter()
                .map(|a| self.attributes[a].canonical().to_string()),
        );
        r.push(self.deciding_token(d).to_string());
        r.push(label_token(d.label).to_string());
        r
    }

    /// Label implied by a rule token (`rule_none` implies irrelevant).
    pub fn rule_label(&self, token: &str) -> Option<Label> {
        match self.surface(token)? {
            Surface::Rule(Some(k)) => Some(self.rules[k].label),
            Surface::Rule(None) => Some(Label::Irrelevant),
            _ => None,
        }
    }

    pub fn answer_ids(&self) -> [TokenId; 3] {
        Label::ALL.map(|l| self.vocab.id(label_token(l)).expect("label tokens are in the vocabulary"))
    }

    /// Label denoted by a token id, if it is an answer token.
    pub fn answer_label(&self, id: TokenId) -> Option<Label> {
        Label::ALL.into_iter().find(|&l| self.vocab.id(label_token(l)) == Some(id))
    }

    /// Samples a (query, service) pair by surface form.
    pub fn propose_pair(&self, rng: &mut impl Rng) -> (Vec<String>, Vec<String>) {
        let c = &self.config;
        let intent = rng.random_range(0..self.intents.len());
        let mut attrs: Vec<usize> = Vec::with_capacity(c.service_size);
        if rng.random_bool(c.pattern_rate) {
            let own = &self.rules_by_intent[intent];
            let rule = &self.rules[own[rng.random_range(0..own.len())]];
            attrs.extend(rule.attributes.iter().take(c.service_size));
        }
        while attrs.len() < c.service_size {
            let a = rng.random_range(0..self.attributes.len());
            if !attrs.contains(&a) {
                attrs.push(a);
            }
        }
        attrs.shuffle(rng);
        let mut query = vec![self.render(&self.intents[intent], rng)];
        if !self.fillers.is_empty() && rng.random_bool(c.filler_rate) {
            let f = self.fillers[rng.random_range(0..self.fillers.len())].clone();
            if rng.random_bool(0.5) {
                query.push(f);
            } else {
                query.insert(0, f);
            }
        }
        let service = attrs.iter().map(|&a| self.render(&self.attributes[a], rng)).collect();
        (query, service)
    }

    fn render(&self, concept: &Concept, rng: &mut impl Rng) -> String {
        if concept.surfaces.len() > 1 && rng.random_bool(self.config.synonym_rate) {
            concept.surfaces[rng.random_range(1..concept.surfaces.len())].clone()
        } else {
            concept.canonical().to_string()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn sample_distinct(rng: &mut impl Rng, n: usize, k: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, k).into_vec()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> WorldConfig {
        WorldConfig { n_intents: 4, n_attributes: 6, n_rules: 12, service_size: 3, ..Default::default() }
    }

    #[test]
    fn same_seed_same_world() {
        let a = World::generate(7, &WorldConfig::default()).unwrap();
        let b = World::generate(7, &WorldConfig::default()).unwrap();
        assert_eq!(a, b);
        let c = World::generate(8, &WorldConfig::default()).unwrap();
        assert_ne!(a.rules, c.rules);
    }

    #[test]
    fn minimal_world_has_one_rule() {
        let cfg = WorldConfig { n_intents: 1, n_attributes: 1, n_rules: 1, service_size: 1, ..Default::default() };
        let w = World::generate(0, &cfg).unwrap();
        assert_eq!(w.rules.len(), 1);
        assert_eq!(w.decide(0, &[0]).label, Label::Relevant);
        assert_eq!(w.decide(0, &[]).label, Label::Irrelevant);
    }

    #[test]
    fn too_many_rules_rejected() {
        let cfg = WorldConfig { n_intents: 1, n_attributes: 2, n_rules: 4, service_size: 1, ..Default::default() };
        assert_eq!(cfg.pattern_combinations(), 3);
        assert!(matches!(World::generate(0, &cfg), Err(Error::Config(_))));
        let cfg = WorldConfig { n_intents: 1, n_attributes: 2, n_rules: 3, service_size: 1, ..Default::default() };
        assert_eq!(World::generate(0, &cfg).unwrap().rules.len(), 3);
    }

    #[test]
    fn every_intent_has_a_rule_and_defaults_are_near_300_tokens() {
        let w = World::generate(3, &WorldConfig::default()).unwrap();
        for i in 0..w.intents.len() {
            assert!(w.rules.iter().any(|r| r.intent == i));
        }
        assert!(w.rules.iter().any(|r| r.label == Label::Moderate));
        assert!((280..=340).contains(&w.vocab.len()), "{}", w.vocab.len());
    }

    fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        (0..n)
            .flat_map(|last| {
                subsets(last, k - 1).into_iter().map(move |mut s| {
                    s.push(last);
                    s
                })
            })
            .collect()
    }

    #[test]
    fn exhaustive_resolution_and_synonym_invariance() {
        let w = World::generate(11, &small()).unwrap();
        let mut seen = BTreeSet::new();
        for intent in 0..w.intents.len() {
            for attrs in subsets(w.attributes.len(), w.config.service_size) {
                let d = w.decide(intent, &attrs);
                // brute force: first rule in table order that matches
                let expected = w
                    .rules
                    .iter()
                    .position(|r| r.intent == intent && r.attributes.iter().all(|a| attrs.contains(a)));
                assert_eq!(d.rule, expected);
                seen.insert(d.label);
                let service: Vec<String> =
                    attrs.iter().map(|&a| w.attributes[a].canonical().to_string()).collect();
                let labels: BTreeSet<Label> = w.intents[intent]
                    .surfaces
                    .iter()
                    .map(|s| w.decide_surfaces(&[s.clone()], &service).unwrap().label)
                    .collect();
                assert_eq!(labels.len(), 1);
            }
        }
        assert_eq!(seen.len(), 3);
    }

    #[test]
    fn json_round_trip() {
        let w = World::generate(5, &small()).unwrap();
        let back = World::from_json(&w.to_json().unwrap()).unwrap();
        assert_eq!(w, back);
        assert_eq!(back.surface("q00"), Some(Surface::Intent(0)));
    }

    #[test]
    fn oracle_reason_structure() {
        let w = World::generate(5, &small()).unwrap();
        let r = &w.rules[0];
        let reason = w.oracle_reason(r.intent, &r.attributes);
        assert_eq!(reason[0], w.intents[r.intent].canonical());
        assert_eq!(reason[reason.len() - 2], r.token);
        assert_eq!(reason.last().unwrap(), label_token(r.label));
    }
}
