use std::collections::HashMap;
use std::io::Write;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Slot names in canonical order.
pub const SLOTS: [&str; 8] = ["name", "eattype", "food", "price", "rating", "area", "family", "near"];

/// Slots whose value is realized verbatim in the text.
pub fn is_copy_slot(slot: &str) -> bool {
    slot != "family"
}

fn values(slot: &str) -> &'static [&'static str] {
    match slot {
        "name" => &[
            "blue spice", "the mill", "alimentum", "aromi", "bibimbap house", "browns cambridge", "clowns",
            "cocum", "cotto", "fitzbillies", "giraffe", "green man", "loch fyne", "midsummer house", "strada",
            "taste of cambridge", "the eagle", "the phoenix", "the plough", "wildwood",
        ],
        "eattype" => &["pub", "restaurant", "coffee shop"],
        "food" => &["italian", "french", "chinese", "indian", "japanese", "english", "thai", "mexican", "greek", "spanish"],
        "price" => &["cheap", "moderate", "high", "affordable", "expensive"],
        "rating" => &["low", "average", "high", "excellent", "poor", "good"],
        "area" => &["riverside", "centre", "suburbs", "city centre", "harbour"],
        "family" => &["yes", "no"],
        "near" => &[
            "the bakers", "burger king", "cafe rouge", "the sorrento", "all bar one", "avalon", "crowne plaza",
            "ranch", "raja indian", "the rice boat", "yippee noodle bar", "clare hall",
        ],
        _ => &[],
    }
}

/// Phrase templates; `{}` marks the value.
fn templates(slot: &str, value: &str) -> &'static [&'static str] {
    match (slot, value) {
        ("name", _) => &["there is {}", "visit {}", "{}"],
        ("eattype", _) => &["it is a {}", "a {}"],
        ("food", _) => &["it serves {} food", "{} food"],
        ("price", _) => &["prices are {}", "{} prices", "its price range is {}"],
        ("rating", _) => &["rated {}", "its rating is {}", "customers rate it {}"],
        ("area", _) => &["in the {}", "located in the {}"],
        ("family", "yes") => &["it is family friendly", "kids are welcome"],
        ("family", _) => &["it is not family friendly", "no kids allowed"],
        ("near", _) => &["near {}", "close to {}"],
        _ => &[],
    }
}

const CONNECTORS: [&str; 2] = [",", "and"];
const FINAL: &str = ".";

/// Punctuation tokens, for the punctuation-only segment rule.
pub fn is_punct(tok: &str) -> bool {
    tok == "," || tok == "."
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// Record count is drawn uniformly from [k_min, k_max].
    pub k_min: usize,
    pub k_max: usize,
    /// Longest gold segment, in tokens.
    pub max_seg_len: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { k_min: 3, k_max: 8, max_seg_len: 6 }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_min < 1 || self.k_min > self.k_max || self.k_max > SLOTS.len() {
            return Err(Error::Config(format!(
                "record count range [{}, {}] must lie within [1, {}]",
                self.k_min,
                self.k_max,
                SLOTS.len()
            )));
        }
        if self.max_seg_len < 6 {
            return Err(Error::Config("templates need max_seg_len >= 6".into()));
        }
        Ok(())
    }
}

/// One corpus line. `gold_segments` holds `[start, end, record_index]` with
/// `end` exclusive and record indices counted from 1 (0 is the null record).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub records: Vec<(String, String)>,
    pub text: Vec<String>,
    pub gold_segments: Vec<[usize; 3]>,
}

impl Example {
    pub fn num_records(&self) -> usize {
        self.records.len()
    }
}

/// Generates `n` examples. The record count is uniform in [k_min, k_max],
/// `name` is always present and the rest are distinct random slots; the text
/// realizes each record with a random template, in a random order.
pub fn synth_data(spec: &SynthSpec, seed: u64, n: usize) -> Result<Vec<Example>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("synth_data needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| synth_one(spec, &mut rng)).collect())
}

fn synth_one(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Example {
    let k = rng.random_range(spec.k_min..=spec.k_max);
    let mut slot_ids: Vec<usize> = index::sample(rng, SLOTS.len() - 1, k - 1).into_iter().map(|i| i + 1).collect();
    slot_ids.push(0);
    slot_ids.sort_unstable();
    let records: Vec<(String, String)> = slot_ids
        .iter()
        .map(|&s| {
            let vals = values(SLOTS[s]);
            (SLOTS[s].to_string(), vals[rng.random_range(0..vals.len())].to_string())
        })
        .collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(rng);
    let mut text = Vec::new();
    let mut gold = Vec::with_capacity(k);
    for (pos, &r) in order.iter().enumerate() {
        let (slot, value) = &records[r];
        let tpls = templates(slot, value);
        let tpl = tpls[rng.random_range(0..tpls.len())];
        let start = text.len();
        for w in tpl.split_whitespace() {
            if w == "{}" {
                text.extend(value.split_whitespace().map(str::to_string));
            } else {
                text.push(w.to_string());
            }
        }
        let conn = if pos + 1 == k { FINAL } else { CONNECTORS[rng.random_range(0..CONNECTORS.len())] };
        text.push(conn.to_string());
        debug_assert!(text.len() - start <= spec.max_seg_len);
        gold.push([start, text.len(), r + 1]);
    }
    Example { records, text, gold_segments: gold }
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(items: &[T], mut w: impl Write) -> Result<()> {
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a JSON-lines corpus.
pub fn read_jsonl(text: &str) -> Result<Vec<Example>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Whether the realized segment is faithful to its record: copy slots need
/// the value tokens contiguously, `family` needs a negation exactly when the
/// value is `no`.
pub fn segment_faithful(slot: &str, value: &str, segment: &[String]) -> bool {
    if is_copy_slot(slot) {
        let v: Vec<&str> = value.split_whitespace().collect();
        segment.windows(v.len()).any(|w| w.iter().zip(&v).all(|(a, b)| a == b))
    } else {
        let negated = segment.iter().any(|t| t == "not" || t == "no");
        negated == (value == "no")
    }
}

/// Token ↔ id map over the closed synthetic vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Vocab::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

pub const UNK: usize = 0;
/// End-of-segment marker.
pub const SEG_END: usize = 1;
/// End-of-text marker, used by the selective generation path.
pub const EOS: usize = 2;

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 3 || tokens[UNK] != "<unk>" || tokens[SEG_END] != "$" || tokens[EOS] != "</s>" {
            return Err(Error::InvalidArgument("vocabulary must start with <unk>, $, </s>".into()));
        }
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::InvalidArgument("duplicate vocabulary entries".into()));
        }
        Ok(Vocab { tokens, index })
    }

    /// Every token the generator can produce, plus slot markers.
    pub fn synthetic() -> Self {
        let mut words = std::collections::BTreeSet::new();
        for slot in SLOTS {
            for v in values(slot) {
                words.extend(v.split_whitespace().map(str::to_string));
                for t in templates(slot, v) {
                    words.extend(t.split_whitespace().filter(|w| *w != "{}").map(str::to_string));
                }
            }
        }
        words.extend(CONNECTORS.iter().map(|s| s.to_string()));
        words.insert(FINAL.to_string());
        let mut tokens: Vec<String> = vec!["<unk>".into(), "$".into(), "</s>".into()];
        tokens.extend(SLOTS.iter().map(|s| slot_token(s)));
        tokens.extend(words);
        Vocab::from_tokens(tokens).expect("synthetic vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, tok: &str) -> usize {
        self.index.get(tok).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, toks: &[String]) -> Vec<usize> {
        toks.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.tokens[i].clone()).collect()
    }

    pub fn is_punct_id(&self, id: usize) -> bool {
        is_punct(&self.tokens[id])
    }

    /// Builds the model input for an example's records.
    pub fn record_set(&self, records: &[(String, String)]) -> Result<super::RecordSet> {
        super::RecordSet::new(
            records
                .iter()
                .map(|(s, v)| super::Record {
                    slot: s.clone(),
                    slot_id: self.id(&slot_token(s)),
                    value: v.split_whitespace().map(|w| self.id(w)).collect(),
                })
                .collect(),
        )
    }
}

pub fn slot_token(slot: &str) -> String {
    format!("<{slot}>")
}
