use std::collections::HashMap;

/// Running coordinatewise minimum of every context vector seen per word.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PooledMemory {
    memory: HashMap<String, Vec<f64>>,
}

impl PooledMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.memory.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.memory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memory.is_empty()
    }

    pub fn clear(&mut self) {
        self.memory.clear();
    }

    /// Folds `context` into the memory of `word` and returns
    /// `[context, memory]`.
    pub fn pooled_embed(&mut self, word: &str, context: &[f64]) -> Vec<f64> {
        let mem = self.memory.entry(word.to_string()).or_insert_with(|| context.to_vec());
        assert_eq!(mem.len(), context.len(), "context dimension changed for `{word}`");
        mem.iter_mut().zip(context).for_each(|(m, &c)| *m = m.min(c));
        let mut out = Vec::with_capacity(2 * context.len());
        out.extend_from_slice(context);
        out.extend_from_slice(mem);
        out
    }
}
