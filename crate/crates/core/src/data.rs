//! Corpus records, delexicalization, database-result prefixes, time
//! normalization, subsampling and a synthetic restaurant-domain corpus.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::LazyLock;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::ardm::{Dialog, Turn};
use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::Role;

static SLOT_NAME: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^[a-z][a-z0-9_]*$").unwrap());
static PLACEHOLDER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[([a-z][a-z0-9_]*)\]").unwrap());
static CLOCK: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(\d{1,2})(?::([0-5]\d))?\s?([ap])\.?m\b\.?").unwrap());

/// Surface values per slot for one domain, with optional entity rows for
/// match counting and relexicalization.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EntityDB {
    pub domain: String,
    pub slots: BTreeMap<String, Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rows: Vec<BTreeMap<String, String>>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum DbWire {
    Full {
        domain: String,
        slots: BTreeMap<String, Vec<String>>,
        #[serde(default)]
        rows: Vec<BTreeMap<String, String>>,
    },
    Bare(BTreeMap<String, Vec<String>>),
}

impl<'de> Deserialize<'de> for EntityDB {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(match DbWire::deserialize(d)? {
            DbWire::Full { domain, slots, rows } => EntityDB { domain, slots, rows },
            DbWire::Bare(slots) => EntityDB {
                domain: String::new(),
                slots,
                rows: Vec::new(),
            },
        })
    }
}

impl EntityDB {
    pub fn new(domain: impl Into<String>, slots: BTreeMap<String, Vec<String>>) -> Result<Self> {
        let db = EntityDB {
            domain: domain.into(),
            slots,
            rows: Vec::new(),
        };
        db.validate()?;
        Ok(db)
    }

    /// Builds the slot lists from entity rows (values deduplicated, first
    /// occurrence order).
    pub fn from_rows(domain: impl Into<String>, rows: Vec<BTreeMap<String, String>>) -> Result<Self> {
        let mut slots: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for row in &rows {
            for (slot, value) in row {
                let values = slots.entry(slot.clone()).or_default();
                if !values.contains(value) {
                    values.push(value.clone());
                }
            }
        }
        let db = EntityDB {
            domain: domain.into(),
            slots,
            rows,
        };
        db.validate()?;
        Ok(db)
    }

    pub fn validate(&self) -> Result<()> {
        for (slot, values) in &self.slots {
            if !SLOT_NAME.is_match(slot) {
                return Err(Error::Format(format!("invalid slot name {slot:?}")));
            }
            if values.iter().any(|v| v.is_empty()) {
                return Err(Error::Format(format!("slot {slot} has an empty value")));
            }
        }
        Ok(())
    }

    /// Entity rows whose values agree with every constraint.
    pub fn matching(&self, constraints: &BTreeMap<String, String>) -> Vec<&BTreeMap<String, String>> {
        self.rows
            .iter()
            .filter(|row| constraints.iter().all(|(k, v)| row.get(k) == Some(v)))
            .collect()
    }

    pub fn count_matches(&self, constraints: &BTreeMap<String, String>) -> usize {
        self.matching(constraints).len()
    }

    /// Every (value, slot) pair, longest value first, ties by value then slot.
    fn lexicon(&self) -> Vec<(&str, &str)> {
        let mut all: Vec<(&str, &str)> = self
            .slots
            .iter()
            .flat_map(|(s, vs)| vs.iter().map(move |v| (v.as_str(), s.as_str())))
            .collect();
        all.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.cmp(b)));
        all.dedup_by(|a, b| a.0 == b.0);
        all
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let db: EntityDB = serde_json::from_str(s)?;
        db.validate()?;
        Ok(db)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// One replacement made by [`delexicalize`]; `start..end` is the span of the
/// placeholder in the delexicalized text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replacement {
    pub slot: String,
    pub value: String,
    pub start: usize,
    pub end: usize,
}

pub type SlotMap = Vec<Replacement>;

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_' || b >= 0x80
}

/// A match must not start or end inside a word.
fn on_boundary(text: &[u8], start: usize, end: usize) -> bool {
    let left = start == 0 || !is_word_byte(text[start - 1]) || !is_word_byte(text[start]);
    let right = end == text.len() || !is_word_byte(text[end]) || !is_word_byte(text[end - 1]);
    left && right
}

/// Replaces database values with `[slot]` placeholders, scanning left to
/// right and taking the longest value that matches at each position on word
/// boundaries. A value listed under two slots goes to the first slot by name.
pub fn delexicalize(text: &str, db: &EntityDB) -> (String, SlotMap) {
    let lexicon = db.lexicon();
    let bytes = text.as_bytes();
    let mut out = String::with_capacity(text.len());
    let mut map = Vec::new();
    let mut i = 0;
    let mut copied = 0;
    while i < bytes.len() {
        let hit = lexicon
            .iter()
            .find(|(v, _)| bytes[i..].starts_with(v.as_bytes()) && on_boundary(bytes, i, i + v.len()));
        match hit {
            Some(&(value, slot)) => {
                out.push_str(&text[copied..i]);
                let start = out.len();
                out.push('[');
                out.push_str(slot);
                out.push(']');
                map.push(Replacement {
                    slot: slot.to_string(),
                    value: value.to_string(),
                    start,
                    end: out.len(),
                });
                i += value.len();
                copied = i;
            }
            None => {
                i += 1;
                while i < bytes.len() && !text.is_char_boundary(i) {
                    i += 1;
                }
            }
        }
    }
    out.push_str(&text[copied..]);
    (out, map)
}

/// Fills placeholders from a slot map: each occurrence of `[slot]` takes the
/// next recorded value for that slot.
pub fn relexicalize(text: &str, map: &SlotMap) -> Result<String> {
    let mut queues: BTreeMap<&str, VecDeque<&str>> = BTreeMap::new();
    for r in map {
        queues.entry(&r.slot).or_default().push_back(&r.value);
    }
    fill_placeholders(text, |slot| {
        queues.get_mut(slot).and_then(|q| q.pop_front()).map(str::to_string)
    })
}

/// Fills placeholders from one entity row.
pub fn relexicalize_row(text: &str, row: &BTreeMap<String, String>) -> Result<String> {
    fill_placeholders(text, |slot| row.get(slot).cloned())
}

fn fill_placeholders(text: &str, mut lookup: impl FnMut(&str) -> Option<String>) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut last = 0;
    for c in PLACEHOLDER.captures_iter(text) {
        let whole = c.get(0).unwrap();
        let slot = &c[1];
        let value = lookup(slot).ok_or_else(|| Error::UnresolvedPlaceholder(slot.to_string()))?;
        out.push_str(&text[last..whole.start()]);
        out.push_str(&value);
        last = whole.end();
    }
    out.push_str(&text[last..]);
    Ok(out)
}

/// Slots whose placeholders appear in `text`, in order of appearance.
pub fn placeholders(text: &str) -> Vec<String> {
    PLACEHOLDER.captures_iter(text).map(|c| c[1].to_string()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BookingStatus {
    Succeed,
    Fail,
}

impl BookingStatus {
    fn as_str(self) -> &'static str {
        match self {
            BookingStatus::Succeed => "succeed",
            BookingStatus::Fail => "fail",
        }
    }
}

/// Database lookup summary shown to the system model as a turn prefix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DbResult {
    pub domain: String,
    pub match_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub booking_status: Option<BookingStatus>,
}

impl DbResult {
    pub fn new(domain: impl Into<String>, match_count: usize) -> Self {
        DbResult {
            domain: domain.into(),
            match_count,
            booking_status: None,
        }
    }

    pub fn with_booking(mut self, status: BookingStatus) -> Self {
        self.booking_status = Some(status);
        self
    }

    /// Inverse of the `Display` form `domain;count[;status]`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("not a database result prefix: {s:?}"));
        let parts: Vec<&str> = s.split(';').collect();
        if !(2..=3).contains(&parts.len()) || !SLOT_NAME.is_match(parts[0]) {
            return Err(bad());
        }
        let match_count = parts[1].parse().map_err(|_| bad())?;
        let booking_status = match parts.get(2) {
            None => None,
            Some(&"succeed") => Some(BookingStatus::Succeed),
            Some(&"fail") => Some(BookingStatus::Fail),
            Some(_) => return Err(bad()),
        };
        Ok(DbResult {
            domain: parts[0].to_string(),
            match_count,
            booking_status,
        })
    }
}

impl fmt::Display for DbResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{};{}", self.domain, self.match_count)?;
        if let Some(s) = self.booking_status {
            write!(f, ";{}", s.as_str())?;
        }
        Ok(())
    }
}

/// Prepends `domain;count[;status]` and one space to a system turn.
pub fn attach_db_result(turn: &Turn, result: &DbResult) -> Result<Turn> {
    if turn.role != Role::System {
        return Err(Error::InvalidArgument(
            "database results attach to system turns only".into(),
        ));
    }
    Ok(Turn::new(Role::System, format!("{result} {}", turn.text)))
}

/// Splits a prefixed system turn back into its database result and text.
pub fn split_db_result(text: &str) -> Option<(DbResult, &str)> {
    let (head, rest) = text.split_once(' ').unwrap_or((text, ""));
    DbResult::parse(head).ok().map(|r| (r, rest))
}

/// Rewrites clock times written with am/pm (`5pm`, `5:30 pm`, `12am`) as
/// 24-hour `HH:MM`. Other text is untouched.
pub fn normalize_times(text: &str) -> String {
    CLOCK
        .replace_all(text, |c: &regex::Captures| {
            let hour: u32 = c[1].parse().unwrap_or(0);
            if !(1..=12).contains(&hour) {
                return c[0].to_string();
            }
            let minute: u32 = c.get(2).map_or(0, |m| m.as_str().parse().unwrap_or(0));
            let pm = c[3].eq_ignore_ascii_case("p");
            let h24 = match (hour, pm) {
                (12, false) => 0,
                (12, true) => 12,
                (h, false) => h,
                (h, true) => h + 12,
            };
            format!("{h24:02}:{minute:02}")
        })
        .into_owned()
}

/// A deterministic subset of `⌈fraction · N⌉` items in their original order.
pub fn subsample<T: Clone>(corpus: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} not in (0, 1]")));
    }
    // The slack keeps products like 0.3 · 10 from rounding up past 3.
    let n = ((fraction * corpus.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let n = n.min(corpus.len());
    if n == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut rng::seeded(seed));
    idx.truncate(n);
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| corpus[i].clone()).collect())
}

/// Every database value found in the history under its slot; a later
/// mention of the same slot replaces an earlier one.
pub fn extract_entities(history: &str, db: &EntityDB) -> BTreeMap<String, String> {
    let (_, map) = delexicalize(history, db);
    map.into_iter().map(|r| (r.slot, r.value)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordTurn {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub db_result: Option<DbResult>,
}

/// One corpus dialog, as stored one per line in JSONL files.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogRecord {
    pub id: String,
    pub turns: Vec<RecordTurn>,
    /// Requestable slots the user asked for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requested_slots: Option<Vec<String>>,
    /// Gold entity state: the last value mentioned per slot.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entities: Option<BTreeMap<String, String>>,
}

/// How records become model dialogs.
#[derive(Clone, Copy, Debug)]
pub struct Prepare<'a> {
    pub normalize_times: bool,
    /// Delexicalize against this database.
    pub db: Option<&'a EntityDB>,
    /// Prefix system turns that carry a database result.
    pub db_prefix: bool,
}

impl Default for Prepare<'_> {
    fn default() -> Self {
        Prepare {
            normalize_times: true,
            db: None,
            db_prefix: true,
        }
    }
}

impl DialogRecord {
    pub fn from_dialog(id: impl Into<String>, dialog: &Dialog) -> Self {
        DialogRecord {
            id: id.into(),
            turns: dialog
                .turns
                .iter()
                .map(|t| RecordTurn {
                    role: t.role,
                    text: t.text.clone(),
                    db_result: None,
                })
                .collect(),
            requested_slots: None,
            entities: None,
        }
    }

    /// The record's text, one turn per line, for entity extraction.
    pub fn history(&self) -> String {
        self.turns
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn to_dialog(&self, prep: &Prepare) -> Result<Dialog> {
        let turns = self
            .turns
            .iter()
            .map(|t| {
                let mut text = t.text.clone();
                if prep.normalize_times {
                    text = normalize_times(&text);
                }
                if let Some(db) = prep.db {
                    text = delexicalize(&text, db).0;
                }
                let turn = Turn::new(t.role, text);
                match (&t.db_result, prep.db_prefix) {
                    (Some(r), true) => attach_db_result(&turn, r),
                    _ => Ok(turn),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dialog::new(turns))
    }
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<DialogRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, records: &[DialogRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Shuffled split into (train, validation) with `⌈val_fraction · N⌉`
/// validation dialogs.
pub fn split<T: Clone>(corpus: &[T], val_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction {val_fraction} not in [0, 1)"
        )));
    }
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut rng::seeded(seed));
    let n_val = ((val_fraction * corpus.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let (val, train) = idx.split_at(n_val);
    let pick = |ids: &[usize]| {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.into_iter().map(|i| corpus[i].clone()).collect::<Vec<_>>()
    };
    Ok((pick(train), pick(val)))
}

/// Per-role corpus summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dialogs: usize,
    pub turns: usize,
    pub user_turns: usize,
    pub system_turns: usize,
    pub user_words: usize,
    pub system_words: usize,
    /// Unigram word entropy in nats.
    pub user_entropy: f64,
    pub system_entropy: f64,
}

impl CorpusStats {
    pub fn of(dialogs: &[Dialog]) -> Self {
        let mut counts: [BTreeMap<&str, usize>; 2] = Default::default();
        let mut s = CorpusStats {
            dialogs: dialogs.len(),
            ..Default::default()
        };
        for t in dialogs.iter().flat_map(|d| &d.turns) {
            s.turns += 1;
            let words = t.text.split_whitespace();
            let c = &mut counts[t.role.index()];
            let mut n = 0;
            for w in words {
                *c.entry(w).or_default() += 1;
                n += 1;
            }
            match t.role {
                Role::User => {
                    s.user_turns += 1;
                    s.user_words += n;
                }
                Role::System => {
                    s.system_turns += 1;
                    s.system_words += n;
                }
            }
        }
        let entropy = |c: &BTreeMap<&str, usize>| {
            let total: usize = c.values().sum();
            c.values()
                .map(|&k| {
                    let p = k as f64 / total as f64;
                    -p * p.ln()
                })
                .sum()
        };
        s.user_entropy = entropy(&counts[0]);
        s.system_entropy = entropy(&counts[1]);
        s
    }
}

/// Settings for [`synth_corpus`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_dialogs: usize,
    pub grammar_seed: u64,
}

/// Requestable slots of the synthetic domain.
pub const REQUESTABLE: [&str; 3] = ["restaurant_phone", "restaurant_address", "restaurant_postcode"];

/// Template banks of the synthetic domain. User and system banks share no
/// wording, so role distributions differ by construction.
pub mod banks {
    pub const USER_INFORM: [&str; 6] = [
        "i am looking for a {constraints}",
        "i want to find a {constraints} please",
        "hi , i need a {constraints}",
        "can you help me find a {constraints} ?",
        "hello , we would like a {constraints}",
        "i need a {constraints}",
    ];
    pub const USER_RETRY: [&str; 3] = [
        "ok then how about a {constraints}",
        "fine , try a {constraints} instead",
        "in that case i want a {constraints}",
    ];
    pub const USER_REQUEST: [&str; 4] = [
        "what is the {requests} ?",
        "could you tell me the {requests} ?",
        "may i have the {requests} please",
        "give me the {requests}",
    ];
    pub const USER_BOOK: [&str; 3] = [
        "please book a table for {people} people at {time}",
        "book it for {people} at {time} please",
        "reserve a table for {people} at {time}",
    ];
    pub const USER_BYE: [&str; 4] = [
        "thanks , bye",
        "thank you goodbye",
        "great , cheers",
        "that is all i need , thanks",
    ];

    pub const SYSTEM_NONE: [&str; 3] = [
        "sorry , there is no {constraints} . would you like something else ?",
        "unfortunately no {constraints} matches . shall i look for another option ?",
        "i could not find any {constraints} .",
    ];
    pub const SYSTEM_OFFER: [&str; 4] = [
        "{restaurant_name} serves {food} food in the {area} and is {pricerange} .",
        "how about {restaurant_name} ? it is a {pricerange} {food} restaurant in the {area} .",
        "there are {count} matches . {restaurant_name} is a {food} place in the {area} .",
        "{restaurant_name} is a good choice , it offers {food} cuisine .",
    ];
    pub const SYSTEM_INFORM: [&str; 3] = [
        "sure , {informs} .",
        "of course , {informs} .",
        "{informs} . anything else ?",
    ];
    pub const SYSTEM_BOOKED: [&str; 2] = [
        "done , your table for {people} is booked at {time} .",
        "booking confirmed for {people} guests at {time} .",
    ];
    pub const SYSTEM_BOOK_FAILED: [&str; 2] = [
        "i am afraid {time} is fully booked .",
        "sadly there is no free table at {time} .",
    ];
    pub const SYSTEM_BYE: [&str; 3] = [
        "you are welcome . enjoy your meal !",
        "glad i could help , have a nice day .",
        "goodbye and enjoy !",
    ];
}

const FOODS: [&str; 8] = [
    "chinese", "italian", "indian", "thai", "french", "british", "mexican", "spanish",
];
const AREAS: [&str; 5] = ["north", "south", "east", "west", "centre"];
const PRICES: [&str; 3] = ["cheap", "moderate", "expensive"];
const NAME_FIRST: [&str; 10] = [
    "golden", "lucky", "royal", "little", "silver", "jade", "old", "happy", "grand", "crown",
];
const NAME_SECOND: [&str; 8] = [
    "wok", "star", "garden", "kitchen", "palace", "lantern", "dragon", "spoon",
];
const STREETS: [&str; 7] = ["mill", "regent", "hills", "castle", "station", "bridge", "market"];
const TIMES: [&str; 8] = ["6pm", "6:30pm", "7pm", "7:15 pm", "8pm", "8:45pm", "12pm", "11:30am"];

fn request_phrase(slot: &str) -> (&'static str, &'static str) {
    match slot {
        "restaurant_phone" => ("phone number", "restaurant_phone"),
        "restaurant_address" => ("address", "restaurant_address"),
        _ => ("postcode", "restaurant_postcode"),
    }
}

/// Entity rows of the synthetic restaurant database.
fn synth_rows(r: &mut rng::Rng) -> Vec<BTreeMap<String, String>> {
    let mut names: Vec<String> = NAME_FIRST
        .iter()
        .flat_map(|a| NAME_SECOND.iter().map(move |b| format!("the {a} {b}")))
        .collect();
    names.shuffle(r);
    names.truncate(30);
    names
        .into_iter()
        .enumerate()
        .map(|(i, name)| {
            let mut row = BTreeMap::new();
            row.insert("restaurant_name".into(), name);
            row.insert("food".into(), FOODS[r.random_range(0..FOODS.len())].into());
            row.insert("area".into(), AREAS[r.random_range(0..AREAS.len())].into());
            row.insert("pricerange".into(), PRICES[r.random_range(0..PRICES.len())].into());
            row.insert("restaurant_phone".into(), format!("01223 {:06}", 300_000 + i * 7_919));
            row.insert(
                "restaurant_address".into(),
                format!("{} {} road", i + 1, STREETS[i % STREETS.len()]),
            );
            row.insert(
                "restaurant_postcode".into(),
                format!(
                    "cb{} {}{}{}",
                    1 + i % 5,
                    1 + i % 9,
                    (b'a' + (i % 26) as u8) as char,
                    (b'a' + ((i * 7) % 26) as u8) as char
                ),
            );
            row
        })
        .collect()
}

/// Fills `{name}` fields left to right, recording database-slot values in
/// the order they appear.
fn fill(template: &str, vars: &BTreeMap<&str, String>, mentions: &mut Vec<(String, String)>) -> String {
    let mut out = String::new();
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        let close = open + rest[open..].find('}').expect("closed field");
        out.push_str(&rest[..open]);
        let key = &rest[open + 1..close];
        let value = &vars[key];
        if DB_SLOTS.contains(&key) {
            mentions.push((key.to_string(), value.clone()));
        }
        out.push_str(value);
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    out
}

const DB_SLOTS: [&str; 7] = [
    "restaurant_name",
    "food",
    "area",
    "pricerange",
    "restaurant_phone",
    "restaurant_address",
    "restaurant_postcode",
];

/// "cheap italian restaurant in the north" over the given constraints,
/// with the mentions recorded in text order.
fn constraint_phrase(c: &BTreeMap<String, String>, mentions: &mut Vec<(String, String)>) -> String {
    let mut words = Vec::new();
    for slot in ["pricerange", "food"] {
        if let Some(v) = c.get(slot) {
            words.push(v.as_str());
            mentions.push((slot.into(), v.clone()));
        }
    }
    words.push("restaurant");
    let mut s = words.join(" ");
    if let Some(a) = c.get("area") {
        s.push_str(" in the ");
        s.push_str(a);
        mentions.push(("area".into(), a.clone()));
    }
    s
}

/// A synthetic restaurant-booking corpus and its database. Dialogs are built
/// from role-specific template banks and carry database results, requested
/// slots and the gold entity state.
pub fn synth_corpus(spec: SynthSpec) -> Result<(Vec<DialogRecord>, EntityDB)> {
    if spec.n_dialogs == 0 {
        return Err(Error::InvalidArgument("n_dialogs must be at least 1".into()));
    }
    let rows = synth_rows(&mut rng::derived(spec.grammar_seed, &[0]));
    let db = EntityDB::from_rows("restaurant", rows)?;
    let records = (0..spec.n_dialogs)
        .map(|i| synth_dialog(&db, &mut rng::derived(spec.grammar_seed, &[1, i as u64]), i))
        .collect();
    Ok((records, db))
}

fn synth_dialog(db: &EntityDB, r: &mut rng::Rng, index: usize) -> DialogRecord {
    use banks::*;
    let target = db.rows[r.random_range(0..db.rows.len())].clone();
    let mut goal: BTreeMap<String, String> = BTreeMap::new();
    goal.insert("food".into(), target["food"].clone());
    if r.random_bool(0.7) {
        goal.insert("area".into(), target["area"].clone());
    }
    if r.random_bool(0.6) {
        goal.insert("pricerange".into(), target["pricerange"].clone());
    }
    let mut mentions = Vec::new();
    let mut turns = Vec::new();
    let user = |text: String| RecordTurn {
        role: Role::User,
        text,
        db_result: None,
    };
    let system = |text: String, result: DbResult| RecordTurn {
        role: Role::System,
        text,
        db_result: Some(result),
    };
    let pick = |r: &mut rng::Rng, bank: &[&'static str]| *bank.choose(r).expect("non-empty bank");
    let with = |pairs: &[(&'static str, String)]| pairs.iter().cloned().collect::<BTreeMap<_, _>>();

    // An opening request that may find nothing.
    if r.random_bool(0.25) {
        let mut first = goal.clone();
        first.insert("food".into(), FOODS[r.random_range(0..FOODS.len())].into());
        first.insert("area".into(), AREAS[r.random_range(0..AREAS.len())].into());
        if db.count_matches(&first) == 0 {
            let phrase = constraint_phrase(&first, &mut mentions);
            turns.push(user(fill(
                pick(r, &USER_INFORM),
                &with(&[("constraints", phrase)]),
                &mut mentions,
            )));
            let phrase = constraint_phrase(&first, &mut mentions);
            let t = fill(pick(r, &SYSTEM_NONE), &with(&[("constraints", phrase)]), &mut mentions);
            turns.push(system(t, DbResult::new("restaurant", 0)));
            let phrase = constraint_phrase(&goal, &mut mentions);
            turns.push(user(fill(
                pick(r, &USER_RETRY),
                &with(&[("constraints", phrase)]),
                &mut mentions,
            )));
        }
    }
    if turns.is_empty() {
        let phrase = constraint_phrase(&goal, &mut mentions);
        turns.push(user(fill(
            pick(r, &USER_INFORM),
            &with(&[("constraints", phrase)]),
            &mut mentions,
        )));
    }

    let count = db.count_matches(&goal);
    let mut vars = with(&[("count", count.to_string())]);
    for slot in DB_SLOTS {
        vars.insert(slot, target[slot].clone());
    }
    let offer = fill(pick(r, &SYSTEM_OFFER), &vars, &mut mentions);
    turns.push(system(offer, DbResult::new("restaurant", count)));

    let mut requested: Vec<&str> = REQUESTABLE.iter().copied().filter(|_| r.random_bool(0.5)).collect();
    if requested.is_empty() {
        requested.push(REQUESTABLE[r.random_range(0..REQUESTABLE.len())]);
    }
    let asks: Vec<&str> = requested.iter().map(|s| request_phrase(s).0).collect();
    let t = fill(
        pick(r, &USER_REQUEST),
        &with(&[("requests", join_and(&asks))]),
        &mut mentions,
    );
    turns.push(user(t));
    let informs: Vec<String> = requested
        .iter()
        .map(|s| {
            let (what, slot) = request_phrase(s);
            mentions.push((slot.into(), target[slot].clone()));
            format!("the {what} is {}", target[slot])
        })
        .collect();
    let informs: Vec<&str> = informs.iter().map(String::as_str).collect();
    let t = fill(
        pick(r, &SYSTEM_INFORM),
        &with(&[("informs", join_and(&informs))]),
        &mut mentions,
    );
    turns.push(system(t, DbResult::new("restaurant", 1)));

    if r.random_bool(0.4) {
        let time = TIMES[r.random_range(0..TIMES.len())].to_string();
        let people = r.random_range(2..9).to_string();
        let v = with(&[("people", people), ("time", time)]);
        turns.push(user(fill(pick(r, &USER_BOOK), &v, &mut mentions)));
        let ok = r.random_bool(0.8);
        let (bank, status): (&[&str], _) = if ok {
            (&SYSTEM_BOOKED, BookingStatus::Succeed)
        } else {
            (&SYSTEM_BOOK_FAILED, BookingStatus::Fail)
        };
        let t = fill(pick(r, bank), &v, &mut mentions);
        turns.push(system(t, DbResult::new("restaurant", 1).with_booking(status)));
    }

    turns.push(user(pick(r, &USER_BYE).to_string()));
    let t = pick(r, &SYSTEM_BYE).to_string();
    turns.push(system(t, DbResult::new("restaurant", 1)));

    let entities: BTreeMap<String, String> = mentions.into_iter().collect();
    let requested_slots = requested.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
    DialogRecord {
        id: format!("synth-{index:05}"),
        turns,
        requested_slots: Some(requested_slots.into_iter().collect()),
        entities: Some(entities),
    }
}

fn join_and(items: &[&str]) -> String {
    match items {
        [] => String::new(),
        [one] => one.to_string(),
        [init @ .., last] => format!("{} and {last}", init.join(" , ")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constraint_phrase_records_mentions_in_text_order() {
        let mut m = Vec::new();
        let c: BTreeMap<String, String> = [("food", "thai"), ("area", "north"), ("pricerange", "cheap")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        assert_eq!(constraint_phrase(&c, &mut m), "cheap thai restaurant in the north");
        assert_eq!(
            m.iter().map(|x| x.0.as_str()).collect::<Vec<_>>(),
            ["pricerange", "food", "area"]
        );
    }

    #[test]
    fn join_and_lists() {
        assert_eq!(join_and(&["a"]), "a");
        assert_eq!(join_and(&["a", "b"]), "a and b");
        assert_eq!(join_and(&["a", "b", "c"]), "a , b and c");
    }
}
