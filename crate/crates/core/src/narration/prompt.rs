use std::collections::BTreeSet;

use crate::dataio::{Vocabulary, BOS, CHAR_SLOT, EOS};
use crate::error::{Error, Result};

/// Target-AD tokens that no context AD of the window contains.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DistinctiveSet {
    tokens: BTreeSet<u32>,
}

impl DistinctiveSet {
    pub fn contains(&self, id: u32) -> bool {
        self.tokens.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.tokens.iter().copied()
    }
}

impl FromIterator<u32> for DistinctiveSet {
    fn from_iter<I: IntoIterator<Item = u32>>(iter: I) -> Self {
        Self {
            tokens: iter.into_iter().collect(),
        }
    }
}

/// `unique(target) − ∪ contexts − stopwords`
pub fn build_distinctive_set(
    target: &[u32],
    contexts: &[Vec<u32>],
    stopwords: &BTreeSet<u32>,
) -> DistinctiveSet {
    let seen: BTreeSet<u32> = contexts.iter().flatten().copied().collect();
    let set: DistinctiveSet = target
        .iter()
        .copied()
        .filter(|t| !seen.contains(t) && !stopwords.contains(t))
        .collect();
    debug_assert!(set.iter().all(|t| !seen.contains(&t)));
    set
}

/// One input position of the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptSlot {
    /// Row of the window's fused visual matrix.
    Visual(usize),
    Token(u32),
}

/// Interleaved visual and name slots ending in `BOS`, plus the target
/// (terminated by `EOS`) when training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSequence {
    pub slots: Vec<PromptSlot>,
    pub target: Vec<u32>,
}

impl PromptSequence {
    pub fn prompt_len(&self) -> usize {
        self.slots.len()
    }

    /// Decoder input length: prompt plus every target token but the last.
    pub fn input_len(&self) -> usize {
        self.slots.len() + self.target.len().saturating_sub(1)
    }

    /// Input positions whose next-token prediction is scored.
    pub fn target_positions(&self) -> std::ops::Range<usize> {
        let p = self.slots.len();
        p - 1..p - 1 + self.target.len()
    }
}

/// Name tokens of each clip, in order of first appearance in its AD.
pub fn clip_names(ad_text: &str, bank: &BTreeSet<String>, vocab: &Vocabulary) -> Vec<u32> {
    let mut out = Vec::new();
    for w in crate::dataio::normalize_words(ad_text) {
        if bank.contains(&w) {
            if let Some(id) = vocab.id(&w) {
                if !out.contains(&id) {
                    out.push(id);
                }
            }
        }
    }
    out
}

/// For each clip `c`: visual rows `c·T′ .. (c+1)·T′`, then `CHAR_SLOT` and
/// its name tokens when it has any; finally `BOS`. With a target, the
/// target tokens and `EOS` follow.
pub fn assemble_prompt(
    latents: usize,
    names: &[Vec<u32>],
    target: Option<&[u32]>,
    context_limit: usize,
) -> Result<PromptSequence> {
    if names.is_empty() || latents == 0 {
        return Err(Error::invalid("a prompt needs at least one clip and one latent"));
    }
    let mut slots = Vec::new();
    for (c, clip_names) in names.iter().enumerate() {
        slots.extend((c * latents..(c + 1) * latents).map(PromptSlot::Visual));
        if !clip_names.is_empty() {
            slots.push(PromptSlot::Token(CHAR_SLOT));
            slots.extend(clip_names.iter().map(|&t| PromptSlot::Token(t)));
        }
        if slots.len() > context_limit {
            return Err(Error::ContextOverflow {
                clip: c,
                len: slots.len(),
                limit: context_limit,
            });
        }
    }
    slots.push(PromptSlot::Token(BOS));
    let target = match target {
        Some(t) => t.iter().copied().chain([EOS]).collect(),
        None => Vec::new(),
    };
    let seq = PromptSequence { slots, target };
    let len = seq.input_len();
    if len > context_limit {
        return Err(Error::ContextOverflow {
            clip: names.len() - 1,
            len,
            limit: context_limit,
        });
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(vocab: &Vocabulary, text: &str) -> Vec<u32> {
        vocab.tokenize(text)
    }

    #[test]
    fn distinctive_set_examples() {
        let v = Vocabulary::from_texts([
            "jack looks at mary",
            "jack smiles at mary",
            "jack opens the old door",
        ]);
        let ctx = vec![ids(&v, "jack looks at mary"), ids(&v, "jack smiles at mary")];
        let target = ids(&v, "jack opens the old door");
        let set = build_distinctive_set(&target, &ctx, &BTreeSet::new());
        let expect: DistinctiveSet = ids(&v, "opens the old door").into_iter().collect();
        assert_eq!(set, expect);

        let inside = ids(&v, "jack looks at mary");
        assert!(build_distinctive_set(&inside, &ctx, &BTreeSet::new()).is_empty());
        assert_eq!(build_distinctive_set(&target, &[], &BTreeSet::new()).len(), 5);

        let stop: BTreeSet<u32> = ids(&v, "the").into_iter().collect();
        assert_eq!(build_distinctive_set(&target, &ctx, &stop).len(), 3);
    }

    #[test]
    fn prompt_layouts() {
        let p = assemble_prompt(3, &[vec![]], Some(&[10, 11]), 256).unwrap();
        assert_eq!(
            p.slots,
            vec![
                PromptSlot::Visual(0),
                PromptSlot::Visual(1),
                PromptSlot::Visual(2),
                PromptSlot::Token(BOS)
            ]
        );
        assert_eq!(p.target, vec![10, 11, EOS]);
        assert_eq!(p.input_len(), 6);
        assert_eq!(p.target_positions(), 3..6);

        let p = assemble_prompt(1, &[vec![20], vec![21, 22]], None, 256).unwrap();
        use PromptSlot::*;
        assert_eq!(
            p.slots,
            vec![
                Visual(0),
                Token(CHAR_SLOT),
                Token(20),
                Visual(1),
                Token(CHAR_SLOT),
                Token(21),
                Token(22),
                Token(BOS)
            ]
        );
        assert!(p.target.is_empty());
        let again = assemble_prompt(1, &[vec![20], vec![21, 22]], None, 256).unwrap();
        assert_eq!(p, again);
        assert_eq!(p.slots.iter().filter(|s| **s == Token(BOS)).count(), 1);
    }

    #[test]
    fn overflow_names_the_clip() {
        let names = vec![vec![5]; 4];
        match assemble_prompt(2, &names, None, 10) {
            Err(Error::ContextOverflow { clip, len, limit }) => {
                assert_eq!((clip, len, limit), (2, 12, 10));
            }
            other => panic!("unexpected {other:?}"),
        }
        match assemble_prompt(2, &[vec![]], Some(&[7, 7, 7]), 5) {
            Err(Error::ContextOverflow { clip: 0, len: 6, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn names_come_from_the_bank() {
        let v = Vocabulary::from_texts(["anna opens the door", "ben waves"]);
        let bank: BTreeSet<String> = ["anna".to_string(), "ben".to_string()].into();
        assert_eq!(clip_names("Anna opens the door", &bank, &v), vec![v.id("anna").unwrap()]);
        assert!(clip_names("the door", &bank, &v).is_empty());
    }
}
