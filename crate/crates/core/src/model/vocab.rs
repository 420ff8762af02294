use core::ops::Range;

use alloc::vec::Vec;

use crate::quantizer::SemanticId;

/// Disjoint token ranges per SID level, followed by BOS and PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocabulary {
    offsets: Vec<usize>,
    sizes: Vec<usize>,
    bos: usize,
}

impl TokenVocabulary {
    pub fn new(level_sizes: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(level_sizes.len());
        let mut next = 0;
        for &s in level_sizes {
            offsets.push(next);
            next += s;
        }
        TokenVocabulary { offsets, sizes: level_sizes.to_vec(), bos: next }
    }

    pub fn levels(&self) -> usize {
        self.sizes.len()
    }

    pub fn level_size(&self, level: usize) -> usize {
        self.sizes[level]
    }

    pub fn token(&self, level: usize, code: usize) -> usize {
        debug_assert!(code < self.sizes[level]);
        self.offsets[level] + code
    }

    pub fn level_range(&self, level: usize) -> Range<usize> {
        self.offsets[level]..self.offsets[level] + self.sizes[level]
    }

    /// `(level, code)` of a level token, `None` for BOS/PAD or out of range.
    pub fn code_of(&self, token: usize) -> Option<(usize, usize)> {
        (0..self.levels()).find(|&q| self.level_range(q).contains(&token)).map(|q| (q, token - self.offsets[q]))
    }

    pub fn bos(&self) -> usize {
        self.bos
    }

    pub fn pad(&self) -> usize {
        self.bos + 1
    }

    pub fn len(&self) -> usize {
        self.bos + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// The three code tokens of an item, used wherever items appear as context.
    pub fn item_tokens(&self, sid: &SemanticId) -> [usize; 3] {
        [self.token(0, sid.codes[0]), self.token(1, sid.codes[1]), self.token(2, sid.codes[2])]
    }

    /// Generation target: the code tokens plus the suffix token when the
    /// vocabulary carries a suffix level.
    pub fn target_tokens(&self, sid: &SemanticId) -> Vec<usize> {
        let mut t = self.item_tokens(sid).to_vec();
        if self.levels() > 3 {
            t.push(self.token(3, sid.suffix));
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_are_disjoint_and_ordered() {
        let v = TokenVocabulary::new(&[4, 8, 8]);
        assert_eq!(v.level_range(0), 0..4);
        assert_eq!(v.level_range(2), 12..20);
        assert_eq!(v.bos(), 20);
        assert_eq!(v.pad(), 21);
        assert_eq!(v.len(), 22);
        assert_eq!(v.code_of(13), Some((2, 1)));
        assert_eq!(v.code_of(20), None);
        let sid = SemanticId { codes: [3, 7, 0], suffix: 2 };
        assert_eq!(v.target_tokens(&sid), alloc::vec![3, 11, 12]);
        let v4 = TokenVocabulary::new(&[4, 8, 8, 3]);
        assert_eq!(v4.target_tokens(&sid), alloc::vec![3, 11, 12, 22]);
    }
}
