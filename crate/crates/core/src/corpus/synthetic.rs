use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CausalStatement, EciRecord, Resource};
use crate::error::{Error, Result};

/// Parameters of the planted-pattern corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Number of distinct surface tokens, punctuation included.
    pub vocab_size: usize,
    pub n_patterns: usize,
    pub n_external_statements: usize,
    pub n_eci_examples: usize,
    /// Fraction of causal examples whose template also appears in the
    /// external statements.
    pub pattern_overlap: f64,
    /// Per-token replacement probability for non-event tokens.
    pub noise_rate: f64,
    pub seed: u64,
    #[serde(default = "default_positive_fraction")]
    pub positive_fraction: f64,
    #[serde(default = "default_n_topics")]
    pub n_topics: usize,
    #[serde(default = "default_docs_per_topic")]
    pub docs_per_topic: usize,
}

fn default_positive_fraction() -> f64 {
    0.3
}
fn default_n_topics() -> usize {
    10
}
fn default_docs_per_topic() -> usize {
    6
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 200,
            n_patterns: 20,
            n_external_statements: 400,
            n_eci_examples: 600,
            pattern_overlap: 0.8,
            noise_rate: 0.05,
            seed: 0,
            positive_fraction: default_positive_fraction(),
            n_topics: default_n_topics(),
            docs_per_topic: default_docs_per_topic(),
        }
    }
}

/// A planted causal pattern: any of its cause verbs followed by any of its
/// effect verbs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub id: usize,
    pub cause_verbs: Vec<String>,
    pub effect_verbs: Vec<String>,
    /// Whether external statements instantiate this template.
    pub external: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpus {
    pub templates: Vec<Template>,
    pub external: Vec<CausalStatement>,
    pub examples: Vec<EciRecord>,
}

impl SyntheticCorpus {
    /// Template owning a verb, if any.
    pub fn template_of(&self, word: &str) -> Option<usize> {
        self.templates
            .iter()
            .find(|t| t.cause_verbs.iter().chain(&t.effect_verbs).any(|v| v == word))
            .map(|t| t.id)
    }
}

const FIXED_TOKENS: usize = 3; // "the", ",", "."

struct Lexicon {
    agents: Vec<String>,
    objects: Vec<String>,
    fillers: Vec<String>,
    all: Vec<String>,
}

/// Deterministic pronounceable pseudo-word for an index.
fn pseudo_word(mut i: usize) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let mut out = String::new();
    // Two syllables cover 4900 words; longer only if needed.
    for _ in 0..2 {
        out.push(C[i % C.len()] as char);
        i /= C.len();
        out.push(V[i % V.len()] as char);
        i /= V.len();
    }
    while i > 0 {
        out.push(C[i % C.len()] as char);
        i /= C.len();
        out.push(V[i % V.len()] as char);
        i /= V.len();
    }
    out
}

impl SyntheticSpec {
    fn verbs_per_slot(&self) -> usize {
        if self.n_patterns * 4 + FIXED_TOKENS + 12 <= self.vocab_size {
            2
        } else {
            1
        }
    }

    pub fn n_positive(&self) -> usize {
        ((self.n_eci_examples as f64 * self.positive_fraction).round() as usize)
            .clamp(1, self.n_eci_examples.saturating_sub(1).max(1))
    }

    pub fn n_documents(&self) -> usize {
        self.n_topics * self.docs_per_topic
    }

    /// Templates `0..n` are seen in external statements.
    pub fn n_external_templates(&self) -> usize {
        (self.n_patterns / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.n_patterns < 2 {
            return bad(format!("n_patterns = {}; need >= 2", self.n_patterns));
        }
        if self.n_external_statements == 0 || self.n_eci_examples < 2 {
            return bad("statement and example counts must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.pattern_overlap) {
            return bad(format!("pattern_overlap = {} outside [0, 1]", self.pattern_overlap));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return bad(format!("noise_rate = {} outside [0, 1]", self.noise_rate));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return bad(format!(
                "positive_fraction = {} outside (0, 1)",
                self.positive_fraction
            ));
        }
        if self.n_topics == 0 || self.docs_per_topic == 0 {
            return bad("need at least one topic and one document per topic".into());
        }
        let verbs = self.n_patterns * 2 * self.verbs_per_slot();
        if verbs + FIXED_TOKENS + 4 > self.vocab_size {
            return bad(format!(
                "vocab_size = {} too small for {} patterns",
                self.vocab_size, self.n_patterns
            ));
        }
        Ok(())
    }

    fn lexicon(&self) -> (Vec<Template>, Lexicon) {
        let per = self.verbs_per_slot();
        let mut next = 0usize;
        let mut take = |n: usize| -> Vec<String> {
            let out = (next..next + n).map(pseudo_word).collect();
            next += n;
            out
        };
        let n_ext = self.n_external_templates();
        let templates: Vec<Template> = (0..self.n_patterns)
            .map(|id| Template {
                id,
                cause_verbs: take(per),
                effect_verbs: take(per),
                external: id < n_ext,
            })
            .collect();
        let rest = self.vocab_size - FIXED_TOKENS - self.n_patterns * 2 * per;
        let n_agents = (rest / 5).max(2);
        let n_objects = (rest * 2 / 5).max(2);
        let n_fillers = rest.saturating_sub(n_agents + n_objects);
        let agents = take(n_agents);
        let objects = take(n_objects);
        let fillers = take(n_fillers);
        let mut all: Vec<String> = templates
            .iter()
            .flat_map(|t| t.cause_verbs.iter().chain(&t.effect_verbs).cloned())
            .collect();
        all.extend(agents.iter().cloned());
        all.extend(objects.iter().cloned());
        all.extend(fillers.iter().cloned());
        all.extend(["the", ",", "."].map(String::from));
        (
            templates,
            Lexicon {
                agents,
                objects,
                fillers,
                all,
            },
        )
    }
}

/// Tokens of one clause plus the position of its verb.
fn clause<R: Rng>(lex: &Lexicon, verb: &str, rng: &mut R) -> (Vec<String>, usize) {
    let agent = lex.agents.choose(rng).unwrap().clone();
    let object = lex.objects.choose(rng).unwrap().clone();
    (vec![agent, verb.to_string(), "the".into(), object], 1)
}

fn filler<R: Rng>(lex: &Lexicon, rng: &mut R) -> String {
    lex.fillers
        .choose(rng)
        .or_else(|| lex.objects.choose(rng))
        .unwrap()
        .clone()
}

/// Builds an example sentence from two clauses, with surrounding context
/// words. Returns tokens and the two verb positions in sentence order.
fn sentence<R: Rng>(
    lex: &Lexicon,
    first: (Vec<String>, usize),
    second: (Vec<String>, usize),
    rng: &mut R,
) -> (Vec<String>, usize, usize) {
    let mut tokens = Vec::new();
    for _ in 0..rng.random_range(0..=2) {
        tokens.push(filler(lex, rng));
    }
    let e1 = tokens.len() + first.1;
    tokens.extend(first.0);
    if rng.random_bool(0.3) {
        tokens.push(filler(lex, rng));
    }
    tokens.push(",".into());
    let e2 = tokens.len() + second.1;
    tokens.extend(second.0);
    if rng.random_bool(0.3) {
        tokens.push(filler(lex, rng));
    }
    tokens.push(".".into());
    (tokens, e1, e2)
}

fn add_noise<R: Rng>(tokens: &mut [String], events: [usize; 2], lex: &Lexicon, rate: f64, rng: &mut R) {
    if rate == 0.0 {
        return;
    }
    for (i, t) in tokens.iter_mut().enumerate() {
        if events.contains(&i) || t == "," || t == "." {
            continue;
        }
        if rng.random_bool(rate) {
            *t = lex.all[..lex.all.len() - FIXED_TOKENS].choose(rng).unwrap().clone();
        }
    }
}

fn other_template<R: Rng>(n: usize, not: usize, rng: &mut R) -> usize {
    let t = rng.random_range(0..n - 1);
    if t >= not {
        t + 1
    } else {
        t
    }
}

/// Generates external causal statements and labelled event-pair examples.
///
/// Positives are `cause-clause , effect-clause` from one template. Half of
/// the negatives join a cause verb and an effect verb of different
/// templates; the rest are hard negatives built like a positive, with one
/// verb replaced by another template's and the clauses in reverse order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (templates, lex) = spec.lexicon();
    let n_ext_t = spec.n_external_templates();

    let mut external = Vec::with_capacity(spec.n_external_statements);
    for _ in 0..spec.n_external_statements {
        let t = &templates[rng.random_range(0..n_ext_t)];
        let (mut a, _) = clause(&lex, t.cause_verbs.choose(&mut rng).unwrap(), &mut rng);
        let (mut b, _) = clause(&lex, t.effect_verbs.choose(&mut rng).unwrap(), &mut rng);
        // Some statements open with a determiner, so the verb is not
        // always the second token.
        for c in [&mut a, &mut b] {
            if rng.random_bool(0.5) {
                c.insert(0, "the".into());
            }
        }
        let original = format!("{} >Causes> {}", a.join(" "), b.join(" "));
        external.push(CausalStatement::new(Resource::Synth, original)?);
    }

    let n_pos = spec.n_positive();
    let n_neg = spec.n_eci_examples - n_pos;
    let n_pos_seen = (n_pos as f64 * spec.pattern_overlap).round() as usize;
    let mut drafts: Vec<(Vec<String>, usize, usize, u8)> = Vec::with_capacity(spec.n_eci_examples);
    for i in 0..n_pos {
        let id = if i < n_pos_seen {
            rng.random_range(0..n_ext_t)
        } else {
            rng.random_range(n_ext_t..spec.n_patterns)
        };
        let t = &templates[id];
        let a = clause(&lex, t.cause_verbs.choose(&mut rng).unwrap(), &mut rng);
        let b = clause(&lex, t.effect_verbs.choose(&mut rng).unwrap(), &mut rng);
        let (tokens, e1, e2) = sentence(&lex, a, b, &mut rng);
        drafts.push((tokens, e1, e2, 1));
    }
    for i in 0..n_neg {
        let ta = rng.random_range(0..spec.n_patterns);
        let tb = other_template(spec.n_patterns, ta, &mut rng);
        let cause = templates[ta].cause_verbs.choose(&mut rng).unwrap();
        let effect = templates[tb].effect_verbs.choose(&mut rng).unwrap();
        let a = clause(&lex, cause, &mut rng);
        let b = clause(&lex, effect, &mut rng);
        let (tokens, e1, e2) = if i % 2 == 0 {
            sentence(&lex, a, b, &mut rng)
        } else {
            sentence(&lex, b, a, &mut rng)
        };
        drafts.push((tokens, e1, e2, 0));
    }
    drafts.shuffle(&mut rng);

    let n_docs = spec.n_documents();
    let mut examples = Vec::with_capacity(drafts.len());
    for (i, (mut tokens, e1, e2, label)) in drafts.into_iter().enumerate() {
        add_noise(&mut tokens, [e1, e2], &lex, spec.noise_rate, &mut rng);
        let doc = i % n_docs;
        examples.push(EciRecord {
            doc_id: format!("t{:02}/d{:03}", doc / spec.docs_per_topic, doc),
            tokens,
            e1: [e1, e1 + 1],
            e2: [e2, e2 + 1],
            label,
        });
    }
    Ok(SyntheticCorpus {
        templates,
        external,
        examples,
    })
}
