//! Word-level vocabulary, tokenizer and deterministic synthetic corpora.
//!
//! Years are split into a century prefix token (`17_`) and one of 100
//! two-digit tokens `00`..`99`, which occupy a contiguous id range. In text
//! the prefix is glued to a following year token: `17_45`.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";
pub const PAD: &str = "<pad>";
pub const CENTURY: &str = "17_";

const EVENTS: &[&str] = &[
    "war", "siege", "reign", "journey", "drought", "famine", "voyage", "expedition", "dynasty",
    "treaty", "trial", "strike", "plague", "revolt", "survey", "festival",
];
const LASTED: &[&str] = &["lasted", "ran", "continued", "went"];
const PEOPLE: &[&str] = &[
    "king", "queen", "merchant", "sailor", "farmer", "priest", "doctor", "soldier", "painter",
    "poet", "bishop", "captain", "widow", "scholar",
];
const MOVED: &[&str] = &["moved", "sailed", "returned", "walked", "fled", "came"];
const PLACES: &[&str] = &[
    "city", "coast", "island", "village", "harbor", "castle", "market", "abbey", "river", "valley",
    "court", "colony",
];
const ADJECTIVES: &[&str] = &[
    "old", "young", "small", "large", "quiet", "loud", "bright", "dark", "cold", "warm", "green",
    "red", "slow", "quick",
];
const ANIMALS: &[&str] = &["dog", "cat", "horse", "bird", "fox", "goat", "sheep", "cow", "wolf", "owl"];
const VERBS: &[&str] = &["saw", "found", "watched", "ate", "chased", "carried", "liked", "heard"];
const OBJECTS: &[&str] = &[
    "apple", "bread", "stone", "letter", "bell", "rope", "lamp", "coin", "book", "cart", "field",
    "gate",
];
const NAMES: &[&str] = &["Anna", "Thomas", "Maria", "John", "Clara", "Henry", "Sophie", "Peter"];
const OTHER: &[&str] = &[
    "The", "the", "from", "to", "In", "that", "was", "said", "and", ".", ",", "a", "of", "by",
    "after", "before",
];

/// Bijective token-string / id map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
    max_len: usize,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Input(format!("token {i} ({t:?}) is empty or contains whitespace")));
            }
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate token {t:?}")));
            }
        }
        let max_len = tokens.iter().map(String::len).max().unwrap_or(0);
        Ok(Vocab { tokens, ids, max_len })
    }

    /// The built-in vocabulary: specials, the 100 year tokens, the century
    /// prefix, then template words.
    pub fn toy() -> Self {
        let mut tokens = vec![BOS.to_string(), PAD.to_string()];
        tokens.extend((0..100).map(|y| format!("{y:02}")));
        tokens.push(CENTURY.to_string());
        for list in [OTHER, EVENTS, LASTED, PEOPLE, MOVED, PLACES, ADJECTIVES, ANIMALS, VERBS, OBJECTS, NAMES] {
            for w in list {
                if !tokens.iter().any(|t| t == w) {
                    tokens.push(w.to_string());
                }
            }
        }
        Vocab::from_tokens(tokens).expect("built-in vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn require(&self, token: &str) -> Result<usize> {
        self.id(token)
            .ok_or_else(|| Error::Input(format!("vocabulary lacks template token {token:?}")))
    }

    /// Ids of `"00"..="99"` in year order.
    pub fn year_tokens(&self) -> Result<Vec<usize>> {
        (0..100).map(|y| self.require(&format!("{y:02}"))).collect()
    }

    pub fn is_year(&self, id: usize) -> bool {
        self.token(id)
            .is_some_and(|t| t.len() == 2 && t.bytes().all(|b| b.is_ascii_digit()))
    }

    /// Greedy longest match inside each whitespace-separated chunk.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        let mut offset = 0;
        for chunk in text.split(char::is_whitespace) {
            let chunk_start = offset;
            offset += chunk.len() + 1;
            let mut pos = 0;
            while pos < chunk.len() {
                let rest = &chunk[pos..];
                let found = (1..=rest.len().min(self.max_len))
                    .rev()
                    .filter(|&n| rest.is_char_boundary(n))
                    .find_map(|n| self.id(&rest[..n]).map(|id| (id, n)));
                match found {
                    Some((id, n)) => {
                        out.push(id);
                        pos += n;
                    }
                    None => {
                        return Err(Error::UnknownToken {
                            start: chunk_start + pos,
                            end: chunk_start + chunk.len(),
                            span: rest.to_string(),
                        })
                    }
                }
            }
        }
        Ok(out)
    }

    /// Space-joined token strings, with the century prefix glued to a
    /// following year.
    pub fn detokenize(&self, ids: &[usize]) -> Result<String> {
        let mut text = String::new();
        for (i, &id) in ids.iter().enumerate() {
            let tok = self
                .token(id)
                .ok_or_else(|| Error::Input(format!("token id {id} outside vocabulary of {}", self.len())))?;
            let glued = i > 0 && self.token(ids[i - 1]) == Some(CENTURY) && self.is_year(id);
            if i > 0 && !glued {
                text.push(' ');
            }
            text.push_str(tok);
        }
        Ok(text)
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Vocab::from_tokens(text.lines().map(str::to_owned).collect())
    }
}

/// The 100 greater-than prompts "The war lasted from 17_YY to 17_".
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GreaterThanTask {
    pub prompts: Vec<Vec<usize>>,
    /// Year token ids, `00` first.
    pub year_tokens: Vec<usize>,
    /// Index into `year_tokens` of each prompt's start year.
    pub input_years: Vec<usize>,
    /// Position of the start-year token inside every prompt.
    pub yy_position: usize,
}

pub fn gen_greater_than(vocab: &Vocab) -> Result<GreaterThanTask> {
    let year_tokens = vocab.year_tokens()?;
    let head: Vec<usize> = ["The", "war", "lasted", "from", CENTURY]
        .iter()
        .map(|t| vocab.require(t))
        .collect::<Result<_>>()?;
    let tail = [vocab.require("to")?, vocab.require(CENTURY)?];
    let prompts = year_tokens
        .iter()
        .map(|&y| {
            let mut p = head.clone();
            p.push(y);
            p.extend_from_slice(&tail);
            p
        })
        .collect();
    Ok(GreaterThanTask {
        prompts,
        year_tokens,
        input_years: (0..100).collect(),
        yy_position: head.len(),
    })
}

/// Mixture weights of the sentence templates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusDescriptor {
    /// "The {event} {lasted} from 17_AA to 17_BB ." with BB > AA.
    pub span: f64,
    /// "In 17_YY the {person} {moved} to the {place} ."
    pub point: f64,
    /// Year-free filler sentences.
    pub filler: f64,
}

impl Default for CorpusDescriptor {
    fn default() -> Self {
        CorpusDescriptor {
            span: 0.5,
            point: 0.2,
            filler: 0.3,
        }
    }
}

impl fmt::Display for CorpusDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "span={},point={},filler={}", self.span, self.point, self.filler)
    }
}

/// Accepts `toy` (the default mixture) or `span=..,point=..,filler=..`
/// with omitted weights taken as zero.
impl FromStr for CorpusDescriptor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "toy" {
            return Ok(Self::default());
        }
        let mut d = CorpusDescriptor {
            span: 0.0,
            point: 0.0,
            filler: 0.0,
        };
        for part in s.split(',') {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad corpus descriptor part {part:?}")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad weight in {part:?}")))?;
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("weight must be finite and nonnegative: {part:?}")));
            }
            match k.trim() {
                "span" => d.span = v,
                "point" => d.point = v,
                "filler" => d.filler = v,
                other => return Err(Error::Config(format!("unknown template {other:?}"))),
            }
        }
        if d.span + d.point + d.filler <= 0.0 {
            return Err(Error::Config("all template weights are zero".into()));
        }
        Ok(d)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub prompts: Vec<Vec<usize>>,
    pub seed: u64,
    pub descriptor: CorpusDescriptor,
}

impl Corpus {
    pub fn n_tokens(&self) -> usize {
        self.prompts.iter().map(Vec::len).sum()
    }

    /// One prompt per line, token strings separated by single spaces.
    pub fn save(&self, vocab: &Vocab, path: &Path) -> Result<()> {
        save_prompts(&self.prompts, vocab, path)
    }
}

pub fn save_prompts(prompts: &[Vec<usize>], vocab: &Vocab, path: &Path) -> Result<()> {
    let mut s = String::new();
    for p in prompts {
        for (i, &id) in p.iter().enumerate() {
            if i > 0 {
                s.push(' ');
            }
            s.push_str(
                vocab
                    .token(id)
                    .ok_or_else(|| Error::Input(format!("token id {id} outside vocabulary")))?,
            );
        }
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

/// Reads a corpus file; every space-separated field must be a whole token.
pub fn load_prompts(vocab: &Vocab, path: &Path) -> Result<Vec<Vec<usize>>> {
    let text = std::fs::read_to_string(path)?;
    let mut offset = 0;
    let mut prompts = Vec::new();
    for line in text.lines() {
        let mut p = Vec::new();
        let mut col = 0;
        for field in line.split(' ') {
            let id = vocab.id(field).ok_or_else(|| Error::UnknownToken {
                start: offset + col,
                end: offset + col + field.len(),
                span: field.to_string(),
            })?;
            p.push(id);
            col += field.len() + 1;
        }
        offset += line.len() + 1;
        if !line.is_empty() {
            prompts.push(p);
        }
    }
    Ok(prompts)
}

fn pick<'a>(rng: &mut ChaCha8Rng, list: &[&'a str]) -> &'a str {
    list.choose(rng).expect("word lists are non-empty")
}

fn sentence(rng: &mut ChaCha8Rng, d: &CorpusDescriptor) -> Vec<String> {
    let total = d.span + d.point + d.filler;
    let u = rng.random::<f64>() * total;
    let year = |y: usize| format!("{y:02}");
    let words: Vec<String> = if u < d.span {
        let a = rng.random_range(0..99usize);
        let b = rng.random_range(a + 1..100usize);
        vec![
            "The".into(),
            pick(rng, EVENTS).into(),
            pick(rng, LASTED).into(),
            "from".into(),
            CENTURY.into(),
            year(a),
            "to".into(),
            CENTURY.into(),
            year(b),
            ".".into(),
        ]
    } else if u < d.span + d.point {
        vec![
            "In".into(),
            CENTURY.into(),
            year(rng.random_range(0..100)),
            "the".into(),
            pick(rng, PEOPLE).into(),
            pick(rng, MOVED).into(),
            "to".into(),
            "the".into(),
            pick(rng, PLACES).into(),
            ".".into(),
        ]
    } else if rng.random_bool(0.5) {
        vec![
            "the".into(),
            pick(rng, ADJECTIVES).into(),
            pick(rng, ANIMALS).into(),
            pick(rng, VERBS).into(),
            "the".into(),
            pick(rng, OBJECTS).into(),
            ".".into(),
        ]
    } else {
        let joiner = pick(rng, &["and", "after", "before", "by", "of", "a", ","]);
        vec![
            pick(rng, NAMES).into(),
            "said".into(),
            "that".into(),
            "the".into(),
            pick(rng, OBJECTS).into(),
            "was".into(),
            pick(rng, ADJECTIVES).into(),
            joiner.into(),
            pick(rng, ADJECTIVES).into(),
            ".".into(),
        ]
    };
    words
}

/// Whole sentences, one per prompt, until at least `n_tokens` tokens.
pub fn gen_synthetic_corpus(vocab: &Vocab, descriptor: &CorpusDescriptor, seed: u64, n_tokens: usize) -> Result<Corpus> {
    if n_tokens == 0 {
        return Err(Error::Input("n_tokens must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prompts = Vec::new();
    let mut count = 0;
    while count < n_tokens {
        let p: Vec<usize> = sentence(&mut rng, descriptor)
            .iter()
            .map(|w| vocab.require(w))
            .collect::<Result<_>>()?;
        count += p.len();
        prompts.push(p);
    }
    Ok(Corpus {
        prompts,
        seed,
        descriptor: descriptor.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_empty() {
        assert!(Vocab::toy().tokenize("").unwrap().is_empty());
    }

    #[test]
    fn year_tokens_are_contiguous() {
        let v = Vocab::toy();
        let ys = v.year_tokens().unwrap();
        assert!(ys.windows(2).all(|w| w[1] == w[0] + 1));
        assert!(v.len() > 150 && v.len() < 260, "{}", v.len());
    }

    #[test]
    fn century_and_year_split_by_longest_match() {
        let v = Vocab::toy();
        let ids = v.tokenize("from 17_45 to").unwrap();
        assert_eq!(ids, vec![v.id("from").unwrap(), v.id(CENTURY).unwrap(), v.id("45").unwrap(), v.id("to").unwrap()]);
        assert_eq!(v.detokenize(&ids).unwrap(), "from 17_45 to");
    }

    #[test]
    fn unknown_token_reports_span() {
        let v = Vocab::toy();
        match v.tokenize("the zebra ate") {
            Err(Error::UnknownToken { start, end, span }) => {
                assert_eq!((start, end, span.as_str()), (4, 9, "zebra"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_duplicate_tokens() {
        assert!(Vocab::from_tokens(vec!["a".into(), "a".into()]).is_err());
    }

    #[test]
    fn greater_than_prompts() {
        let v = Vocab::toy();
        let task = gen_greater_than(&v).unwrap();
        assert_eq!(task.prompts.len(), 100);
        let set: std::collections::HashSet<_> = task.prompts.iter().collect();
        assert_eq!(set.len(), 100);
        let diff = task.prompts[41].iter().zip(&task.prompts[42]).filter(|(a, b)| a != b).count();
        assert_eq!(diff, 1);
        assert_eq!(v.detokenize(&task.prompts[7]).unwrap(), "The war lasted from 17_07 to 17_");
        for p in &task.prompts {
            assert_eq!(*p.last().unwrap(), v.id(CENTURY).unwrap());
        }
    }

    #[test]
    fn corpus_is_deterministic_and_round_trips() {
        let v = Vocab::toy();
        let d = CorpusDescriptor::default();
        let a = gen_synthetic_corpus(&v, &d, 7, 5000).unwrap();
        let b = gen_synthetic_corpus(&v, &d, 7, 5000).unwrap();
        assert_eq!(a, b);
        assert!(a.n_tokens() >= 5000);
        for p in &a.prompts {
            let text = v.detokenize(p).unwrap();
            assert_eq!(&v.tokenize(&text).unwrap(), p);
        }
    }

    #[test]
    fn spans_always_increase_and_years_all_appear() {
        let v = Vocab::toy();
        let c = gen_synthetic_corpus(&v, &CorpusDescriptor::default(), 1, 100_000).unwrap();
        let years = v.year_tokens().unwrap();
        let century = v.id(CENTURY).unwrap();
        let from = v.id("from").unwrap();
        let mut counts = [0usize; 100];
        let mut spans = 0;
        for p in &c.prompts {
            for &t in p {
                if v.is_year(t) {
                    counts[t - years[0]] += 1;
                }
            }
            if p[3] == from {
                assert_eq!((p[4], p[7]), (century, century));
                assert!(p[8] > p[5]);
                spans += 1;
            }
        }
        assert!(spans > 1000);
        assert!(counts.iter().all(|&c| c > 0));
    }

    #[test]
    fn every_token_appears_in_large_sample() {
        let v = Vocab::toy();
        let c = gen_synthetic_corpus(&v, &CorpusDescriptor::default(), 2, 200_000).unwrap();
        let mut seen = vec![false; v.len()];
        for &t in c.prompts.iter().flatten() {
            seen[t] = true;
        }
        let missing: Vec<&str> = (2..v.len()).filter(|&i| !seen[i]).map(|i| v.token(i).unwrap()).collect();
        assert!(missing.is_empty(), "{missing:?}");
    }

    #[test]
    fn descriptor_parsing() {
        assert_eq!("toy".parse::<CorpusDescriptor>().unwrap(), CorpusDescriptor::default());
        let d: CorpusDescriptor = "span=1".parse().unwrap();
        assert_eq!((d.span, d.point, d.filler), (1.0, 0.0, 0.0));
        assert_eq!(d.to_string().parse::<CorpusDescriptor>().unwrap(), d);
        assert!("span=-1".parse::<CorpusDescriptor>().is_err());
        assert!("bogus=1".parse::<CorpusDescriptor>().is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocab::toy();
        v.save(&dir.path().join("vocab.txt")).unwrap();
        assert_eq!(Vocab::load(&dir.path().join("vocab.txt")).unwrap(), v);
        let c = gen_synthetic_corpus(&v, &CorpusDescriptor::default(), 3, 300).unwrap();
        c.save(&v, &dir.path().join("c.txt")).unwrap();
        assert_eq!(load_prompts(&v, &dir.path().join("c.txt")).unwrap(), c.prompts);
    }
}
