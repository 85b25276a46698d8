//! Seeded toy corpora with known gold documents, units and answers.

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::datasynth::{dedupe_keywords, Rewriter, RuleRewriter};
use crate::records::Triple;
use crate::text::Document;

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "st"];
const NUCLEI: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
const CODAS: [&str; 5] = ["", "n", "r", "l", "x"];

/// Pseudo-words drawn without replacement, so every word is used once.
struct WordPool {
    words: Vec<String>,
}

impl WordPool {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let mut words = Vec::new();
        for a in ONSETS {
            for b in NUCLEI {
                for c in ONSETS {
                    for d in NUCLEI {
                        for e in CODAS {
                            words.push(format!("{a}{b}{c}{d}{e}"));
                        }
                    }
                }
            }
        }
        let stop = crate::datasynth::stopwords();
        words.retain(|w| !stop.contains(w));
        words.shuffle(rng);
        Self { words }
    }

    fn take(&mut self) -> String {
        self.words.pop().expect("pseudo-word pool exhausted")
    }

    fn take_n(&mut self, n: usize) -> Vec<String> {
        (0..n).map(|_| self.take()).collect()
    }
}

/// Content words with fixed roles, reused across documents.
struct Lexicon {
    nouns: Vec<String>,
    verbs: Vec<String>,
    adjectives: Vec<String>,
    places: Vec<String>,
}

impl Lexicon {
    fn new(pool: &mut WordPool, per_role: usize) -> Self {
        Self {
            nouns: pool.take_n(per_role),
            verbs: pool.take_n(per_role),
            adjectives: pool.take_n(per_role),
            places: pool.take_n(per_role),
        }
    }
}

fn pick<'a>(rng: &mut ChaCha8Rng, xs: &'a [String], used: &mut HashSet<&'a str>) -> &'a str {
    loop {
        let w = xs.choose(rng).expect("non-empty role list");
        if used.insert(w) {
            return w;
        }
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map(|f| f.to_uppercase().chain(c).collect()).unwrap_or_default()
}

fn rir_sentence<'a>(rng: &mut ChaCha8Rng, topic: &str, lex: &'a Lexicon, used: &mut HashSet<&'a str>) -> String {
    let noun = pick(rng, &lex.nouns, used);
    let verb = pick(rng, &lex.verbs, used);
    let adj = pick(rng, &lex.adjectives, used);
    let obj = pick(rng, &lex.nouns, used);
    let place = pick(rng, &lex.places, used);
    let s = match rng.random_range(0..3) {
        0 => format!("the {topic} {noun} {verb} the {adj} {obj} in {place}."),
        1 => format!("in {place} the {adj} {noun} of {topic} {verb} an {obj}."),
        _ => format!("the {obj} was {verb} by the {topic} {noun} near {adj} {place}."),
    };
    capitalize(&s)
}

/// Documents of 4 to 8 sentences sharing a topic word, three units per
/// document. Each query keeps the topic and two or three keywords of its
/// unit sentence; the target is the unit sentence.
pub fn rir_triples(n: usize, seed: u64) -> Vec<Triple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = WordPool::new(&mut rng);
    let lex = Lexicon::new(&mut pool, 400);
    let mut out = Vec::with_capacity(n);
    let mut d = 0;
    while out.len() < n {
        let topic = pool.take();
        let mut used = HashSet::new();
        let len = rng.random_range(4..=8);
        let sentences: Vec<String> = (0..len).map(|_| rir_sentence(&mut rng, &topic, &lex, &mut used)).collect();
        let doc = Document::new(format!("rir{d:05}"), sentences.join(" "));
        debug_assert_eq!(doc.num_sentences(), len);
        let mut units: Vec<usize> = (0..len).collect();
        units.shuffle(&mut rng);
        for &u in units.iter().take(3.min(n - out.len())) {
            let rewritten = RuleRewriter.rewrite(doc.sentence(u)).expect("rule rewriter is infallible");
            let keywords: Vec<&str> =
                rewritten.split(", ").filter(|k| *k != topic && !matches!(*k, "near" | "an")).collect();
            let keep = rng.random_range(2..=3).min(keywords.len());
            let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, keywords.len(), keep).into_vec();
            chosen.sort_unstable();
            let mut q = vec![topic.as_str()];
            q.extend(chosen.iter().map(|&i| keywords[i]));
            out.push(Triple {
                query: dedupe_keywords(&q.join(", ")),
                doc_id: doc.id.clone(),
                doc_text: doc.text.clone(),
                unit_index: u,
                target: doc.sentence(u).to_string(),
            });
        }
        d += 1;
    }
    out
}

/// One document per triple about a unique entity; the query asks for one
/// attribute and the target is that one-word attribute value.
pub fn qar_triples(n: usize, seed: u64) -> Vec<Triple> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = WordPool::new(&mut rng);
    let people = pool.take_n(48);
    let places = pool.take_n(48);
    let goods = pool.take_n(48);
    let years: Vec<String> = (1800..1990).step_by(7).map(|y: i32| y.to_string()).collect();
    (0..n)
        .map(|i| {
            let entity = pool.take();
            let founder = people.choose(&mut rng).unwrap();
            let place = places.choose(&mut rng).unwrap();
            let good = goods.choose(&mut rng).unwrap();
            let year = years.choose(&mut rng).unwrap();
            let facts = [
                (
                    format!("{} was founded by {founder}.", capitalize(&entity)),
                    format!("who founded {entity}"),
                    founder,
                ),
                (format!("Its main office is in {place}."), format!("where is {entity} based"), place),
                (format!("The company began trading in {year}."), format!("when did {entity} start"), year),
                (format!("Today {entity} mostly sells {good}."), format!("what does {entity} sell"), good),
            ];
            let ask = rng.random_range(0..facts.len());
            let text = facts.iter().map(|f| f.0.as_str()).collect::<Vec<_>>().join(" ");
            Triple {
                query: facts[ask].1.clone(),
                doc_id: format!("qar{i:03}"),
                doc_text: text,
                unit_index: ask,
                target: facts[ask].2.clone(),
            }
        })
        .collect()
}

/// Distinct documents in first-appearance order.
pub fn documents(triples: &[Triple]) -> Vec<Document> {
    let mut seen = HashSet::new();
    triples.iter().filter(|t| seen.insert(t.doc_id.clone())).map(Triple::document).collect()
}

/// All text a vocabulary should cover.
pub fn texts(triples: &[Triple]) -> Vec<&str> {
    triples.iter().flat_map(|t| [t.query.as_str(), t.doc_text.as_str(), t.target.as_str()]).collect()
}
