//! Seeded generator for corpora with planted answer entities.
//!
//! Passages are filler sentences over a small lowercase vocabulary. Every
//! other sentence carries one entity (a capitalised invented name or a year),
//! so consecutive entities are separated by a full filler sentence. Entity
//! strings never repeat across the corpus. Each entity has one gold question.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, GoldQA, Passage};

const FILLER: [&str; 64] = [
    "river", "stone", "quiet", "market", "north", "harbor", "garden", "winter", "silver", "meadow", "lantern", "bridge",
    "tower", "valley", "forest", "copper", "island", "village", "castle", "orchard", "mill", "road", "field", "hill",
    "small", "old", "wide", "narrow", "bright", "distant", "green", "heavy", "built", "opened", "crossed", "held",
    "moved", "carried", "near", "under", "across", "beside", "through", "along", "around", "behind", "was", "became",
    "remained", "served", "stood", "grew", "the", "a", "its", "their", "of", "and", "for", "with", "into", "over",
    "from", "by",
];
const SYLLABLES: [&str; 24] = [
    "ka", "ren", "dor", "mi", "tal", "vo", "sen", "lu", "bra", "quin", "zel", "ot", "ha", "ris", "pel", "gan", "mor",
    "eth", "ul", "nav", "ci", "tro", "bel", "yas",
];

#[derive(Debug, Clone)]
pub struct PlantedCorpus {
    pub corpus: Corpus,
    pub entities: Vec<String>,
}

fn name_word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(2..=3);
    let mut w: String = (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
    w[..1].make_ascii_uppercase();
    w
}

fn fresh_entity(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    loop {
        let e = if rng.gen_bool(0.3) {
            rng.gen_range(1100..2000).to_string()
        } else {
            let k = rng.gen_range(1..=3);
            (0..k).map(|_| name_word(rng)).collect::<Vec<_>>().join(" ")
        };
        if used.insert(e.to_lowercase()) {
            return e;
        }
    }
}

fn filler_words(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    (0..n).map(|_| FILLER.choose(rng).unwrap().to_string()).collect()
}

fn capitalise(mut s: String) -> String {
    if let Some(c) = s.get_mut(..1) {
        c.make_ascii_uppercase();
    }
    s
}

/// Generate `n` passages with ids `<i>-0`, matching the ids a SQuAD reload
/// of the same corpus would assign.
pub fn planted_corpus(n: usize, seed: u64) -> PlantedCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let mut passages = Vec::with_capacity(n);
    let mut qa_pairs = Vec::new();
    let mut entities = Vec::new();
    for i in 0..n {
        let pid = format!("{i}-0");
        let n_sent = rng.gen_range(4..=6);
        let mut text = String::new();
        let mut planted: Vec<(String, usize, String)> = Vec::new();
        for s in 0..n_sent {
            let len = rng.gen_range(11..=15);
            let mut words = filler_words(&mut rng, len);
            let entity = (s % 2 == 0).then(|| fresh_entity(&mut rng, &mut used));
            let at = entity.as_ref().map(|_| rng.gen_range(2..words.len()));
            if let (Some(e), Some(at)) = (&entity, at) {
                words.insert(at, e.clone());
            }
            if !text.is_empty() {
                text.push(' ');
            }
            let sentence_start = text.len();
            let mut offset = sentence_start;
            for (w_i, w) in words.iter().enumerate() {
                let w = if w_i == 0 { capitalise(w.clone()) } else { w.clone() };
                if w_i > 0 {
                    text.push(' ');
                    offset += 1;
                }
                if Some(w_i) == at {
                    let ctx = words[w_i.saturating_sub(3)..w_i].join(" ");
                    planted.push((w.clone(), offset, ctx));
                }
                text.push_str(&w);
                offset += w.len();
            }
            text.push('.');
        }
        let passage = Passage::new(pid.clone(), text);
        for (j, (e, byte, ctx)) in planted.into_iter().enumerate() {
            qa_pairs.push(GoldQA {
                id: format!("{pid}-q{j}"),
                passage_id: pid.clone(),
                question: format!("what comes right after {ctx}?"),
                answer_text: e.clone(),
                answer_char_start: passage.char_index(byte),
                aliases: Vec::new(),
            });
            entities.push(e);
        }
        passages.push(passage);
    }
    let corpus = Corpus::new(passages, qa_pairs, format!("planted-{seed}")).expect("generated corpus is consistent");
    PlantedCorpus { corpus, entities }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_consistent() {
        let a = planted_corpus(20, 5);
        let b = planted_corpus(20, 5);
        assert_eq!(a.corpus.passages.len(), 20);
        assert_eq!(a.entities, b.entities);
        assert_eq!(a.corpus.qa_pairs.len(), a.entities.len());
        let distinct: HashSet<String> = a.entities.iter().map(|e| e.to_lowercase()).collect();
        assert_eq!(distinct.len(), a.entities.len());
        assert_ne!(planted_corpus(20, 6).entities, a.entities);
    }

    #[test]
    fn squad_round_trip_keeps_ids() {
        let pc = planted_corpus(5, 1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        crate::corpus::write_squad(&pc.corpus, &path).unwrap();
        let back = crate::corpus::load_squad(&path).unwrap();
        let ids = |c: &Corpus| c.passages.iter().map(|p| p.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&back), ids(&pc.corpus));
        assert_eq!(back.qa_pairs, pc.corpus.qa_pairs);
    }
}
