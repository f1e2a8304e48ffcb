//! Closed-vocabulary toy tokenizer. Words are lowercased alphanumeric
//! runs; everything else separates. Class labels live in reserved
//! single-token slots so the generator can emit a label in one step,
//! and a handful of marker tokens carry the structured prompt fields.

use crate::prompt::PromptSlots;
use crate::taxonomy::{LabelToken, Task};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const CLS: &str = "<cls>";
pub const SEP: &str = "<sep>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTokenizer {
    vocab: IndexMap<String, u32>,
}

fn words_of(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_lowercase())
}

impl ToyTokenizer {
    /// Builds a vocabulary from a text corpus plus reserved slots for
    /// every label in both task spaces. Corpus words are admitted by
    /// descending frequency until `max_vocab` is reached.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        labels: impl IntoIterator<Item = &'a LabelToken>,
        max_vocab: usize,
    ) -> Self {
        let mut vocab = IndexMap::new();
        let add = |s: String, vocab: &mut IndexMap<String, u32>| {
            let next = vocab.len() as u32;
            vocab.entry(s).or_insert(next);
        };
        for special in [PAD, UNK, CLS, SEP] {
            add(special.to_string(), &mut vocab);
        }
        add(format!("<task:{}>", Task::Mancoll), &mut vocab);
        add(format!("<task:{}>", Task::CrashType), &mut vocab);
        for conf in b'A'..=b'M' {
            add(format!("<conf:{}>", conf as char), &mut vocab);
        }
        for veh in 1..=8u32 {
            add(format!("<veh:{veh}>"), &mut vocab);
        }
        for label in labels {
            add(format!("<label:{}>", label.as_str()), &mut vocab);
        }

        let mut freq: BTreeMap<String, u64> = BTreeMap::new();
        for text in texts {
            for w in words_of(text) {
                *freq.entry(w).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = freq.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (word, _) in ranked {
            if vocab.len() >= max_vocab {
                break;
            }
            add(word, &mut vocab);
        }
        ToyTokenizer { vocab }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id_of(&self, token: &str) -> Option<u32> {
        self.vocab.get(token).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.vocab
            .get_index(id as usize)
            .map(|(k, _)| k.as_str())
    }

    pub fn pad_id(&self) -> u32 {
        self.vocab[PAD]
    }

    pub fn unk_id(&self) -> u32 {
        self.vocab[UNK]
    }

    pub fn cls_id(&self) -> u32 {
        self.vocab[CLS]
    }

    pub fn sep_id(&self) -> u32 {
        self.vocab[SEP]
    }

    /// Reserved slot for a class label. Slots are keyed by the label
    /// string, so the corpus word "4" and the class token 4 stay
    /// distinct ids.
    pub fn label_id(&self, label: &LabelToken) -> Option<u32> {
        self.id_of(&format!("<label:{}>", label.as_str()))
    }

    /// Inverse of [`label_id`](Self::label_id).
    pub fn label_of(&self, id: u32) -> Option<LabelToken> {
        self.token_of(id)
            .and_then(|t| t.strip_prefix("<label:"))
            .and_then(|t| t.strip_suffix('>'))
            .map(LabelToken::new)
    }

    /// Plain word encoding; out-of-vocabulary words become `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        words_of(text)
            .map(|w| self.id_of(&w).unwrap_or_else(|| self.unk_id()))
            .collect()
    }

    fn marker_ids(&self, slots: &PromptSlots) -> Vec<u32> {
        let mut ids = Vec::new();
        if let Some(id) = self.id_of(&format!("<task:{}>", slots.task)) {
            ids.push(id);
        }
        if let Some(conf) = &slots.crashconf {
            if let Some(id) = self.id_of(&format!("<conf:{conf}>")) {
                ids.push(id);
            }
        }
        if let Some(veh) = slots.vehicle_index {
            if let Some(id) = self.id_of(&format!("<veh:{veh}>")) {
                ids.push(id);
            }
        }
        ids
    }

    /// Encodes the structured prompt fields for the generator: marker
    /// tokens, summary words, then `<sep>` as the position whose next
    /// token is the label. The summary is truncated from the end to
    /// honor `max_len`.
    pub fn encode_for_lm(&self, slots: &PromptSlots, max_len: usize) -> Vec<u32> {
        let mut ids = self.marker_ids(slots);
        let mut words = self.encode(&slots.summary);
        let budget = max_len.saturating_sub(ids.len() + 1);
        words.truncate(budget);
        ids.extend(words);
        ids.push(self.sep_id());
        ids
    }

    /// Same fields for the encoder head, led by `<cls>`.
    pub fn encode_for_cls(&self, slots: &PromptSlots, max_len: usize) -> Vec<u32> {
        let mut ids = vec![self.cls_id()];
        ids.extend(self.marker_ids(slots));
        let mut words = self.encode(&slots.summary);
        let budget = max_len.saturating_sub(ids.len() + 1);
        words.truncate(budget);
        ids.extend(words);
        ids.push(self.sep_id());
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::Taxonomy;

    fn tokenizer() -> ToyTokenizer {
        let taxonomy = Taxonomy::builtin();
        let labels: Vec<LabelToken> = taxonomy
            .mancoll_tokens()
            .into_iter()
            .chain(taxonomy.crash_type_tokens())
            .collect();
        ToyTokenizer::build(
            ["a car struck the rear of a truck", "the car ran off the road"],
            labels.iter(),
            512,
        )
    }

    #[test]
    fn label_slots_are_distinct_from_words() {
        let tok = ToyTokenizer::build(
            ["vehicle 4 struck vehicle 2"],
            [LabelToken::from("4"), LabelToken::from("2")].iter(),
            512,
        );
        let word4 = tok.id_of("4").unwrap();
        let label4 = tok.label_id(&LabelToken::from("4")).unwrap();
        assert_ne!(word4, label4);
        assert_eq!(tok.label_of(label4), Some(LabelToken::from("4")));
        assert_eq!(tok.label_of(word4), None);
    }

    #[test]
    fn vocab_cap_is_respected_and_specials_survive() {
        let long: String = (0..2000).map(|i| format!("w{i} ")).collect();
        let tok = ToyTokenizer::build([long.as_str()], [].iter(), 128);
        assert_eq!(tok.vocab_size(), 128);
        assert!(tok.id_of(PAD).is_some());
        assert!(tok.id_of(SEP).is_some());
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let tok = tokenizer();
        let ids = tok.encode("car zeppelin");
        assert_eq!(ids.len(), 2);
        assert_ne!(ids[0], tok.unk_id());
        assert_eq!(ids[1], tok.unk_id());
    }

    #[test]
    fn lm_encoding_ends_with_sep_and_respects_budget() {
        let tok = tokenizer();
        let slots = PromptSlots {
            task: Task::CrashType,
            summary: "the car struck the rear of the truck on the road".into(),
            vehicle_index: Some(2),
            crashconf: Some("D".into()),
        };
        let ids = tok.encode_for_lm(&slots, 8);
        assert_eq!(ids.len(), 8);
        assert_eq!(*ids.last().unwrap(), tok.sep_id());
        assert_eq!(ids[0], tok.id_of("<task:crash_type>").unwrap());
        assert_eq!(ids[1], tok.id_of("<conf:D>").unwrap());
        assert_eq!(ids[2], tok.id_of("<veh:2>").unwrap());
    }

    #[test]
    fn cls_encoding_leads_with_cls() {
        let tok = tokenizer();
        let slots = PromptSlots {
            task: Task::Mancoll,
            summary: "a car struck a truck".into(),
            vehicle_index: None,
            crashconf: None,
        };
        let ids = tok.encode_for_cls(&slots, 64);
        assert_eq!(ids[0], tok.cls_id());
        assert_eq!(ids[1], tok.id_of("<task:mancoll>").unwrap());
    }

    #[test]
    fn serde_round_trip_preserves_ids() {
        let tok = tokenizer();
        let json = serde_json::to_string(&tok).unwrap();
        let back: ToyTokenizer = serde_json::from_str(&json).unwrap();
        assert_eq!(tok, back);
    }
}
