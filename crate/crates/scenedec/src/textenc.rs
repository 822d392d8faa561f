//! Tokenization, the learnable handle table for concept tokens, and a small
//! trainable per-token text encoder.
//!
//! The encoder applies an independent residual MLP to each token embedding;
//! there is no mixing across positions, so every handle keeps a distinct
//! key/value row for cross-attention.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::gradcore::{Graph, NodeId, Tensor};
use crate::params::{normal_init, Bound, ParamSet};
use crate::{Error, Result};

/// Fixed (padded) token sequence length.
pub const SEQ_LEN: usize = 16;
/// Token embedding width.
pub const D_TEXT: usize = 32;

const PAD_WORD: &str = "<pad>";

/// Fixed base lexicon plus a counter for handle token ids. The base lexicon
/// is immutable after construction; handle ids extend it densely.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    word_to_id: BTreeMap<String, u32>,
    next_id: u32,
}

impl Vocabulary {
    /// Lexicon covering the evaluation prompt templates, the training prompt
    /// grammar, and the default handle initializer words.
    pub fn base() -> Self {
        let mut words: Vec<String> = vec![PAD_WORD.to_string()];
        let mut seen: BTreeMap<String, ()> = BTreeMap::new();
        let mut extra: Vec<String> = Vec::new();
        let mut push = |w: &str, extra: &mut Vec<String>| {
            let w = w.to_lowercase();
            if seen.insert(w.clone(), ()).is_none() {
                extra.push(w);
            }
        };
        for template in crate::eval::PROMPT_TEMPLATES {
            for word in template.split_whitespace() {
                if word != "{tokens}" {
                    push(word, &mut extra);
                }
            }
        }
        for word in ["a", "photo", "of", "and", "object", "background"] {
            push(word, &mut extra);
        }
        extra.sort();
        words.extend(extra);
        Self::from_words(words)
    }

    /// Rebuild from an explicit word list (checkpoint reload). Index order is
    /// the id assignment.
    pub fn from_words(words: Vec<String>) -> Self {
        let word_to_id = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        let next_id = words.len() as u32;
        Vocabulary { words, word_to_id, next_id }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn id_of(&self, word: &str) -> Option<u32> {
        self.word_to_id.get(word).copied()
    }

    pub fn word_of(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    fn alloc_handle_id(&mut self) -> u32 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }
}

/// One concept handle: a dedicated token with its own trainable embedding.
#[derive(Debug, Clone)]
pub struct HandleMeta {
    pub name: String,
    pub token_id: u32,
    pub background: bool,
}

/// The ordered set of handles and their embeddings.
#[derive(Debug, Clone)]
pub struct HandleTable {
    metas: Vec<HandleMeta>,
    pub embeddings: ParamSet,
    d_text: usize,
}

impl HandleTable {
    pub fn new(d_text: usize) -> Self {
        HandleTable {
            metas: Vec::new(),
            embeddings: ParamSet::new(),
            d_text,
        }
    }

    /// Register a new handle initialized from a lexicon word's base
    /// embedding.
    pub fn add_handle(
        &mut self,
        name: &str,
        initializer_word: &str,
        vocab: &mut Vocabulary,
        encoder: &TextEncoder,
    ) -> Result<usize> {
        let name = name.to_lowercase();
        if self.find(&name).is_some() || vocab.id_of(&name).is_some() {
            return Err(Error::DuplicateHandle(name));
        }
        let Some(init_id) = vocab.id_of(&initializer_word.to_lowercase()) else {
            return Err(Error::UnknownInitializer(initializer_word.to_string()));
        };
        let row = encoder.base_row(init_id as usize);
        let token_id = vocab.alloc_handle_id();
        self.embeddings
            .insert(&name, Tensor::from_parts(vec![self.d_text], row));
        self.metas.push(HandleMeta {
            name,
            token_id,
            background: false,
        });
        Ok(self.metas.len() - 1)
    }

    /// Mark a handle as the background handle.
    pub fn set_background(&mut self, idx: usize) {
        self.metas[idx].background = true;
    }

    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    pub fn get(&self, idx: usize) -> &HandleMeta {
        &self.metas[idx]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.metas.iter().position(|m| m.name == name)
    }

    pub fn by_token_id(&self, token_id: u32) -> Option<usize> {
        self.metas.iter().position(|m| m.token_id == token_id)
    }

    pub fn names(&self) -> Vec<String> {
        self.metas.iter().map(|m| m.name.clone()).collect()
    }

    pub fn background_handles(&self) -> Vec<usize> {
        (0..self.metas.len())
            .filter(|&i| self.metas[i].background)
            .collect()
    }

    pub fn embedding(&self, idx: usize) -> &Tensor {
        self.embeddings.get(&self.metas[idx].name)
    }

    pub fn d_text(&self) -> usize {
        self.d_text
    }
}

/// A tokenized prompt: fixed-length padded ids plus positions of every
/// handle occurrence.
#[derive(Debug, Clone)]
pub struct TokenizedPrompt {
    pub ids: Vec<u32>,
    /// (handle index, token position) per occurrence, in position order.
    pub handle_positions: Vec<(usize, usize)>,
}

impl TokenizedPrompt {
    pub fn position_of(&self, handle_idx: usize) -> Option<usize> {
        self.handle_positions
            .iter()
            .find(|(h, _)| *h == handle_idx)
            .map(|(_, p)| *p)
    }

    pub fn is_handle_position(&self, pos: usize) -> bool {
        self.handle_positions.iter().any(|(_, p)| *p == pos)
    }
}

/// Deterministic whitespace tokenizer over the lexicon and declared handles.
pub fn tokenize(
    prompt: &str,
    vocab: &Vocabulary,
    handles: &HandleTable,
) -> Result<TokenizedPrompt> {
    let words: Vec<String> = prompt.split_whitespace().map(str::to_lowercase).collect();
    if words.len() > SEQ_LEN {
        return Err(Error::PromptTooLong {
            needed: words.len(),
            max: SEQ_LEN,
        });
    }
    let mut ids = vec![vocab.pad_id(); SEQ_LEN];
    let mut handle_positions = Vec::new();
    for (pos, word) in words.iter().enumerate() {
        if let Some(h) = handles.find(word) {
            ids[pos] = handles.get(h).token_id;
            handle_positions.push((h, pos));
        } else if let Some(id) = vocab.id_of(word) {
            ids[pos] = id;
        } else {
            return Err(Error::UnknownWord(word.clone()));
        }
    }
    Ok(TokenizedPrompt { ids, handle_positions })
}

/// Inverse of [`tokenize`] up to padding: trailing pad tokens are dropped.
pub fn detokenize(ids: &[u32], vocab: &Vocabulary, handles: &HandleTable) -> String {
    let mut words: Vec<&str> = Vec::new();
    for &id in ids {
        if let Some(h) = handles.by_token_id(id) {
            words.push(&handles.get(h).name);
        } else if let Some(w) = vocab.word_of(id) {
            words.push(w);
        }
    }
    while words.last() == Some(&PAD_WORD) {
        words.pop();
    }
    words.join(" ")
}

/// Base embedding table plus a residual two-layer per-token MLP.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub d_text: usize,
    pub params: ParamSet,
}

impl TextEncoder {
    pub fn new(vocab: &Vocabulary, d_text: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut params = ParamSet::new();
        let std = 1.0 / (d_text as f64).sqrt();
        params.insert("base_table", normal_init(rng, vec![vocab.len(), d_text], std));
        params.insert("mlp.w1", normal_init(rng, vec![d_text, d_text], std));
        params.insert("mlp.b1", Tensor::zeros(vec![d_text]));
        // Residual branch starts at zero so the encoder begins as identity.
        params.insert("mlp.w2", Tensor::zeros(vec![d_text, d_text]));
        params.insert("mlp.b2", Tensor::zeros(vec![d_text]));
        TextEncoder { d_text, params }
    }

    fn base_row(&self, token_id: usize) -> Vec<f64> {
        let table = self.params.get("base_table");
        let d = self.d_text;
        table.data()[token_id * d..(token_id + 1) * d].to_vec()
    }

    /// Build the per-token embedding matrix `[SEQ_LEN, d_text]` in the graph.
    /// Handle rows read from the bound handle embeddings, everything else
    /// from the bound base table; all rows pass through the residual MLP.
    pub fn encode(
        &self,
        g: &mut Graph,
        enc: &Bound,
        handle_bound: &Bound,
        handles: &HandleTable,
        tokens: &TokenizedPrompt,
    ) -> Result<NodeId> {
        let l = tokens.ids.len();
        let vocab_len = self.params.get("base_table").shape()[0];

        // One-hot selector over the base table; handle rows stay zero here.
        let mut sel = vec![0.0; l * vocab_len];
        for (pos, &id) in tokens.ids.iter().enumerate() {
            if (id as usize) < vocab_len && handles.by_token_id(id).is_none() {
                sel[pos * vocab_len + id as usize] = 1.0;
            }
        }
        let sel = g.leaf(Tensor::from_parts(vec![l, vocab_len], sel));
        let mut embs = g.matmul(sel, enc.id("base_table"))?;

        // Scatter each handle embedding into its occurrence positions.
        let mut seen: Vec<usize> = tokens.handle_positions.iter().map(|(h, _)| *h).collect();
        seen.sort_unstable();
        seen.dedup();
        for h in seen {
            let mut col = vec![0.0; l];
            for &(hi, pos) in &tokens.handle_positions {
                if hi == h {
                    col[pos] = 1.0;
                }
            }
            let col = g.leaf(Tensor::from_parts(vec![l, 1], col));
            let emb = handle_bound.id(&handles.get(h).name);
            let row = g.reshape(emb, vec![1, self.d_text])?;
            let contrib = g.matmul(col, row)?;
            embs = g.add(embs, contrib)?;
        }

        // Residual per-token MLP.
        let h1 = g.matmul(embs, enc.id("mlp.w1"))?;
        let h1 = g.broadcast_add(h1, enc.id("mlp.b1"))?;
        let a = g.silu(h1)?;
        let h2 = g.matmul(a, enc.id("mlp.w2"))?;
        let h2 = g.broadcast_add(h2, enc.id("mlp.b2"))?;
        Ok(g.add(embs, h2)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn setup(n_handles: usize) -> (Vocabulary, TextEncoder, HandleTable) {
        let mut vocab = Vocabulary::base();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = TextEncoder::new(&vocab, D_TEXT, &mut rng);
        let mut handles = HandleTable::new(D_TEXT);
        for i in 0..n_handles {
            handles
                .add_handle(&format!("[v{}]", i + 1), "object", &mut vocab, &enc)
                .unwrap();
        }
        (vocab, enc, handles)
    }

    #[test]
    fn tokenize_single_handle() {
        let (vocab, _, handles) = setup(1);
        let t = tokenize("a photo of [v1]", &vocab, &handles).unwrap();
        assert_eq!(t.ids.len(), SEQ_LEN);
        assert_eq!(t.ids[0], vocab.id_of("a").unwrap());
        assert_eq!(t.ids[1], vocab.id_of("photo").unwrap());
        assert_eq!(t.ids[2], vocab.id_of("of").unwrap());
        assert_eq!(t.ids[3], handles.get(0).token_id);
        for pos in 4..SEQ_LEN {
            assert_eq!(t.ids[pos], vocab.pad_id());
        }
        assert_eq!(t.handle_positions, vec![(0, 3)]);
    }

    #[test]
    fn tokenize_empty_prompt_is_padding() {
        let (vocab, _, handles) = setup(0);
        let t = tokenize("", &vocab, &handles).unwrap();
        assert!(t.ids.iter().all(|&id| id == vocab.pad_id()));
        assert!(t.handle_positions.is_empty());
    }

    #[test]
    fn tokenize_two_handles_positions() {
        let (vocab, _, handles) = setup(5);
        let t = tokenize("a photo of [v2] and [v5]", &vocab, &handles).unwrap();
        assert_eq!(t.position_of(1), Some(3));
        assert_eq!(t.position_of(4), Some(5));
    }

    #[test]
    fn tokenize_unknown_word_named() {
        let (vocab, _, handles) = setup(1);
        let err = tokenize("a photo of zeppelin", &vocab, &handles).unwrap_err();
        match err {
            Error::UnknownWord(w) => assert_eq!(w, "zeppelin"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tokenize_overlong_prompt_rejected() {
        let (vocab, _, handles) = setup(0);
        let long = vec!["a"; SEQ_LEN + 1].join(" ");
        assert!(matches!(
            tokenize(&long, &vocab, &handles),
            Err(Error::PromptTooLong { .. })
        ));
    }

    #[test]
    fn detokenize_round_trips_handle_positions() {
        let (vocab, _, handles) = setup(3);
        for prompt in ["a photo of [v1]", "a photo of [v1] and [v3]", "[v2] on the beach"] {
            let t1 = tokenize(prompt, &vocab, &handles).unwrap();
            let text = detokenize(&t1.ids, &vocab, &handles);
            let t2 = tokenize(&text, &vocab, &handles).unwrap();
            assert_eq!(t1.handle_positions, t2.handle_positions, "prompt {prompt:?}");
            assert_eq!(t1.ids, t2.ids);
        }
    }

    #[test]
    fn add_handle_copies_initializer_row() {
        let (_, enc, handles) = setup(1);
        let d = D_TEXT;
        let init_id = Vocabulary::base().id_of("object").unwrap() as usize;
        let base = enc.params.get("base_table");
        let expected = &base.data()[init_id * d..(init_id + 1) * d];
        assert_eq!(handles.embedding(0).data(), expected);
    }

    #[test]
    fn add_handle_rejects_duplicates() {
        let (mut vocab, enc, mut handles) = setup(1);
        let err = handles
            .add_handle("[v1]", "object", &mut vocab, &enc)
            .unwrap_err();
        assert!(matches!(err, Error::DuplicateHandle(_)));
    }

    #[test]
    fn add_handle_rejects_unknown_initializer() {
        let (mut vocab, enc, mut handles) = setup(1);
        let err = handles
            .add_handle("[v9]", "xylophone", &mut vocab, &enc)
            .unwrap_err();
        assert!(matches!(err, Error::UnknownInitializer(_)));
    }

    #[test]
    fn background_flag_round_trip() {
        let (mut vocab, enc, mut handles) = setup(1);
        let bg = handles
            .add_handle("[vbg]", "background", &mut vocab, &enc)
            .unwrap();
        handles.set_background(bg);
        assert_eq!(handles.background_handles(), vec![bg]);
        assert!(!handles.get(0).background);
    }

    fn encode_values(
        enc: &TextEncoder,
        handles: &HandleTable,
        tokens: &TokenizedPrompt,
    ) -> Vec<f64> {
        let mut g = Graph::new();
        let eb = enc.params.bind(&mut g);
        let hb = handles.embeddings.bind(&mut g);
        let out = enc.encode(&mut g, &eb, &hb, handles, tokens).unwrap();
        g.value(out).data().to_vec()
    }

    #[test]
    fn encode_rows_local_to_position() {
        let (vocab, enc, handles) = setup(2);
        let short = tokenize("a photo of [v1]", &vocab, &handles).unwrap();
        let long = tokenize("a photo of [v1] and [v2]", &vocab, &handles).unwrap();
        let vs = encode_values(&enc, &handles, &short);
        let vl = encode_values(&enc, &handles, &long);
        // positions 0..4 are shared between the two prompts
        assert_eq!(vs[..4 * D_TEXT], vl[..4 * D_TEXT]);
    }

    #[test]
    fn encode_zeroed_transform_is_identity() {
        let (vocab, mut enc, handles) = setup(1);
        for name in ["mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"] {
            let shape = enc.params.get(name).shape().to_vec();
            *enc.params.get_mut(name) = Tensor::zeros(shape);
        }
        let tokens = tokenize("a photo of [v1]", &vocab, &handles).unwrap();
        let out = encode_values(&enc, &handles, &tokens);
        let want = handles.embedding(0).data();
        assert_eq!(&out[3 * D_TEXT..4 * D_TEXT], want);
    }

    #[test]
    fn encode_handle_gradient_matches_fd() {
        let (vocab, enc, handles) = setup(2);
        let tokens = tokenize("a photo of [v1] and [v2]", &vocab, &handles).unwrap();
        let mut g = Graph::new();
        let eb = enc.params.bind(&mut g);
        let hb = handles.embeddings.bind(&mut g);
        let out = enc.encode(&mut g, &eb, &hb, &handles, &tokens).unwrap();
        let sq = g.square(out).unwrap();
        let loss = g.mean(sq).unwrap();
        let err = g.fd_check(loss, hb.id("[v1]"), 1e-5).unwrap();
        assert!(err < 1e-4, "handle fd error {err}");
    }
}
