//! Deterministic fixtures: a word-class vocabulary, templated corpora and
//! task files, and a small model whose weights are constructed rather than
//! trained.
//!
//! Every word belongs to one class and the corpus generator picks words
//! uniformly within a class, so the generated text is a class-bigram process.
//! The model approximates that process:
//!
//! * embeddings are `β·b_bias + a·code(class) + P·polarity·b_pol + ε·id`, all
//!   orthogonal to the all-ones vector so the parameter-free layer norm only
//!   rescales;
//! * each MLP neuron is keyed on one class code (thresholded through the
//!   shared bias component) and its output weights are fit by ridge
//!   regression so the final residual points at the successor-class logits;
//! * head 0 of layer 0 attends uniformly and carries the polarity channel
//!   forward, which is what lets the sentiment, cause/effect and label
//!   choices depend on the prompt.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{corpus_sequences, perplexity, Category, TaskFile, TaskItem};
use crate::linalg::{matmul, spd_inverse, Matrix};
use crate::model::{forward, weight_name, ModelBundle, ModelSpec, Vocabulary, POS_EMBED, TOK_EMBED};
use crate::nsa::{InfluentialLexicon, Provenance};
use crate::util::{substream_rng, to_json_pretty, write_file};

pub const FIXTURE_SEED: u64 = 7;
pub const MODEL_FILE: &str = "model/tiny-2L.pbw";
pub const VOCAB_FILE: &str = "model/vocab.txt";
pub const CORPORA: [&str; 3] = ["wiki", "reviews", "qa"];
pub const TASKS: [&str; 4] = ["sentiment", "qa", "similarity", "reasoning"];
pub const LEXICON_FILE: &str = "lexicons/sentiment.json";
pub const NSA_SAMPLES_FILE: &str = "nsa/samples.jsonl";

/// Directory holding the shipped fixtures.
pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn corpus_file(name: &str) -> String {
    format!("corpora/{name}.jsonl")
}

pub fn task_file(name: &str) -> String {
    format!("tasks/{name}.jsonl")
}

pub fn fixture_spec() -> ModelSpec {
    ModelSpec {
        n_layers: 2,
        d_model: 64,
        n_heads: 4,
        d_ff: 256,
        vocab_size: 2048,
        max_seq_len: 128,
    }
}

const RESERVED: [&str; 2] = ["<unk>", "<bos>"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum C {
    Bos,
    Period,
    Comma,
    QMark,
    Colon,
    OtherPunct,
    Det,
    Pron,
    Aux,
    AuxDo,
    Degree,
    Conj,
    Prep,
    Wh,
    Connect,
    Meta,
    Label,
    NamePlace,
    NamePerson,
    Rare,
    Adj,
    Adv,
    RVerb,
    ReviewNoun,
    Animal,
    Person,
    PlaceNoun,
    VEat,
    Food,
    VDrink,
    Drink,
    VRead,
    Text,
    VDrive,
    Vehicle,
    VChase,
    VWear,
    Clothes,
    VPlay,
    Instrument,
    VBuild,
    Structure,
    VLive,
    EventSubj,
    EventVerb,
}

const N_CLASSES: usize = C::EventVerb as usize + 1;

impl C {
    /// Layer whose MLP holds this class's memories.
    fn layer(self) -> usize {
        if self <= C::Rare {
            0
        } else {
            1
        }
    }
}

fn ws(words: &str) -> Vec<&str> {
    words.split_whitespace().collect()
}

const POS_ADJ: &str = "good great wonderful excellent lovely friendly fresh delicious perfect pleasant amazing \
    fantastic superb charming tasty clean helpful reliable happy glad proud calm cheerful comfortable warm \
    beautiful brilliant fine nice solid";
const NEG_ADJ: &str = "bad terrible awful damaged broken rude stale dirty poor horrible boring disappointing slow \
    noisy ugly useless sad angry upset afraid miserable cold weak bland greasy cheap faulty unpleasant worried gloomy";
const POS_FEEL: &str = "happy glad proud calm cheerful comfortable warm";
const NEG_FEEL: &str = "sad angry upset afraid miserable worried gloomy";
const POS_ADV: &str = "honestly happily warmly kindly beautifully perfectly gladly carefully gracefully cheerfully \
    generously nicely smoothly wisely gently politely";
const NEG_ADV: &str = "badly poorly sadly rudely terribly barely hardly awfully carelessly roughly slowly coldly \
    harshly sloppily weakly angrily";
const POS_RVERB: &str = "loved enjoyed liked recommend trust praised adored appreciated admire welcomed";
const NEG_RVERB: &str = "hated disliked regret avoided doubted returned distrust dreaded resented ignored";
const POS_EVENT: &str = "saved repaired rebuilt cleaned protected restored blessed improved";
const NEG_EVENT: &str = "destroyed flooded burned ruined wrecked flattened crushed poisoned";

type Forms = (&'static str, &'static str, &'static str);
const V_EAT: [Forms; 1] = [("eat", "eats", "ate")];
const V_DRINK: [Forms; 1] = [("drink", "drinks", "drank")];
const V_READ: [Forms; 2] = [("read", "reads", "read"), ("write", "writes", "wrote")];
const V_DRIVE: [Forms; 2] = [("drive", "drives", "drove"), ("ride", "rides", "rode")];
const V_CHASE: [Forms; 2] = [("chase", "chases", "chased"), ("hunt", "hunts", "hunted")];
const V_WEAR: [Forms; 1] = [("wear", "wears", "wore")];
const V_PLAY: [Forms; 1] = [("play", "plays", "played")];
const V_BUILD: [Forms; 1] = [("build", "builds", "built")];
const V_LIVE: [Forms; 6] = [
    ("live", "lives", "lived"),
    ("grow", "grows", "grew"),
    ("stand", "stands", "stood"),
    ("rest", "rests", "rested"),
    ("sleep", "sleeps", "slept"),
    ("flow", "flows", "flowed"),
];

fn verb_words(forms: &[Forms]) -> Vec<&'static str> {
    let mut out = Vec::new();
    for &(a, b, c) in forms {
        for w in [a, b, c] {
            if !out.contains(&w) {
                out.push(w);
            }
        }
    }
    out
}

fn real_classes() -> Vec<(C, Vec<&'static str>)> {
    let cat = |a: &'static str, b: &'static str| {
        let mut v = ws(a);
        v.extend(ws(b));
        v
    };
    vec![
        (C::Period, vec!["."]),
        (C::Comma, vec![","]),
        (C::QMark, vec!["?"]),
        (C::Colon, vec![":"]),
        (C::OtherPunct, ws("! ; ' - ( ) \" / & %")),
        (C::Det, ws("the a an this that every each some its their his her our my")),
        (C::Pron, ws("it they he she we i you")),
        (C::Aux, ws("is was are were seemed felt looked became remained stayed")),
        (C::AuxDo, ws("does do did")),
        (C::Degree, ws("very quite rather really truly fairly extremely simply pretty incredibly")),
        (C::Conj, ws("and but yet or while")),
        (C::Prep, ws("of in on near from with by at to for across along under over beside as")),
        (C::Wh, ws("what who where which how why")),
        (C::Connect, ws("so because then therefore thus")),
        (C::Meta, ws("review sentiment question answer sentence meaning result overall same summary")),
        (C::Label, ws("positive negative")),
        (C::Adj, cat(POS_ADJ, NEG_ADJ)),
        (C::Adv, cat(POS_ADV, NEG_ADV)),
        (C::RVerb, cat(POS_RVERB, NEG_RVERB)),
        (
            C::ReviewNoun,
            ws("food service staff room movie film book meal hotel product phone screen battery coffee pizza \
                show music story plot waiter price delivery package box chair bed camera laptop shoes jacket \
                seller menu dessert sound ending acting manager kitchen table view"),
        ),
        (
            C::Animal,
            ws("dog cat horse cow fox bird wolf sheep goat mouse rabbit deer bear lion owl hawk duck frog otter \
                badger eagle camel donkey pig hen goose squirrel beaver tiger whale"),
        ),
        (
            C::Person,
            ws("farmer teacher child doctor king queen sailor baker student hunter merchant soldier painter poet \
                priest miner weaver fisher builder driver musician writer nurse judge pilot people villagers \
                children family traveler"),
        ),
        (
            C::PlaceNoun,
            ws("village city river mountain forest valley island lake town coast region province desert harbor \
                hill plain meadow marsh bay kingdom county district capital port"),
        ),
        (C::VEat, verb_words(&V_EAT)),
        (
            C::Food,
            ws("bread grass fish apples rice cheese soup corn seeds meat honey berries nuts eggs carrots insects \
                mice worms leaves fruit"),
        ),
        (C::VDrink, verb_words(&V_DRINK)),
        (C::Drink, ws("water milk tea wine juice beer cider broth cocoa lemonade")),
        (C::VRead, verb_words(&V_READ)),
        (C::Text, ws("books letters poems maps news stories scrolls notes papers records laws")),
        (C::VDrive, verb_words(&V_DRIVE)),
        (C::Vehicle, ws("cars trucks boats carts trains wagons bicycles ships buses sleds")),
        (C::VChase, verb_words(&V_CHASE)),
        (C::VWear, verb_words(&V_WEAR)),
        (C::Clothes, ws("coats hats boots scarves gloves cloaks dresses shirts sandals robes")),
        (C::VPlay, verb_words(&V_PLAY)),
        (C::Instrument, ws("drums flutes pianos guitars violins harps horns bells fiddles trumpets")),
        (C::VBuild, verb_words(&V_BUILD)),
        (
            C::Structure,
            ws("houses bridges walls towers roads temples barns mills castles fences wells churches"),
        ),
        (C::VLive, verb_words(&V_LIVE)),
        (
            C::EventSubj,
            ws("storm flood fire war drought festival harvest market rain wind council army"),
        ),
        (C::EventVerb, cat(POS_EVENT, NEG_EVENT)),
    ]
}

fn polarity_of(word: &str) -> f64 {
    let pos = [POS_ADJ, POS_ADV, POS_RVERB, POS_EVENT];
    let neg = [NEG_ADJ, NEG_ADV, NEG_RVERB, NEG_EVENT];
    if word == "positive" || pos.iter().any(|l| l.split_whitespace().any(|w| w == word)) {
        1.0
    } else if word == "negative" || neg.iter().any(|l| l.split_whitespace().any(|w| w == word)) {
        -1.0
    } else {
        0.0
    }
}

/// Pronounceable made-up words for names and the rare tail of the vocabulary.
fn pseudo_words(n: usize, taken: &[String], rng: &mut ChaCha8Rng) -> Vec<String> {
    const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "th", "br"];
    const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
    const CODAS: [&str; 5] = ["", "n", "r", "l", "s"];
    let mut out: Vec<String> = Vec::with_capacity(n);
    let mut seen: std::collections::HashSet<String> = taken.iter().cloned().collect();
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        }
        w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// The fixture vocabulary with the class of every token.
pub struct ClassVocab {
    pub vocab: Vocabulary,
    classes: Vec<C>,
    members: Vec<Vec<String>>,
}

impl ClassVocab {
    fn words(&self, c: C) -> &[String] {
        &self.members[c as usize]
    }
}

pub fn class_vocab() -> Result<ClassVocab> {
    let spec = fixture_spec();
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    let mut classes = vec![C::Bos; RESERVED.len()];
    for (c, words) in real_classes() {
        for w in words {
            tokens.push(w.to_string());
            classes.push(c);
        }
    }
    let mut rng = substream_rng(FIXTURE_SEED, "fixture-pseudo-words");
    let n_pseudo = spec.vocab_size - tokens.len();
    let pseudo = pseudo_words(n_pseudo, &tokens, &mut rng);
    let n_names = n_pseudo * 2 / 5;
    for (i, w) in pseudo.into_iter().enumerate() {
        let c = if i < n_names {
            C::NamePlace
        } else if i < 2 * n_names {
            C::NamePerson
        } else {
            C::Rare
        };
        tokens.push(w);
        classes.push(c);
    }
    let mut members = vec![Vec::new(); N_CLASSES];
    for (t, &c) in tokens.iter().zip(&classes) {
        members[c as usize].push(t.clone());
    }
    Ok(ClassVocab {
        vocab: Vocabulary::new(tokens)?,
        classes,
        members,
    })
}

struct Gen<'a> {
    cv: &'a ClassVocab,
    rng: ChaCha8Rng,
}

impl Gen<'_> {
    fn pick(&mut self, c: C) -> String {
        let words = self.cv.words(c);
        words[self.rng.random_range(0..words.len())].clone()
    }

    fn pick_str(&mut self, list: &str) -> String {
        let words = ws(list);
        words[self.rng.random_range(0..words.len())].to_string()
    }

    fn pick_polar(&mut self, pos: &str, neg: &str, s: f64) -> String {
        if s > 0.0 {
            self.pick_str(pos)
        } else {
            self.pick_str(neg)
        }
    }

    fn form(&mut self, forms: &[Forms], which: usize) -> String {
        let f = forms[self.rng.random_range(0..forms.len())];
        [f.0, f.1, f.2][which].to_string()
    }

    fn coin(&mut self, p: f64) -> bool {
        self.rng.random_bool(p)
    }

    fn sign(&mut self) -> f64 {
        if self.coin(0.5) {
            1.0
        } else {
            -1.0
        }
    }
}

/// Joins words, attaching punctuation to the preceding word.
fn render(words: &[String]) -> String {
    let mut out = String::new();
    for w in words {
        let attach = matches!(w.as_str(), "." | "," | "?" | "!" | ";" | ":");
        if !out.is_empty() && !attach {
            out.push(' ');
        }
        out.push_str(w);
    }
    out
}

macro_rules! words {
    ($($e:expr),* $(,)?) => { vec![$(String::from($e)),*] };
}

const OBJECT_VERBS: [(C, C, &[Forms]); 7] = [
    (C::VEat, C::Food, &V_EAT),
    (C::VDrink, C::Drink, &V_DRINK),
    (C::VRead, C::Text, &V_READ),
    (C::VDrive, C::Vehicle, &V_DRIVE),
    (C::VWear, C::Clothes, &V_WEAR),
    (C::VPlay, C::Instrument, &V_PLAY),
    (C::VBuild, C::Structure, &V_BUILD),
];

impl Gen<'_> {
    fn wiki_sentence(&mut self) -> Vec<String> {
        match self.rng.random_range(0..12) {
            0 => words!(
                self.pick(C::NamePlace), "is", "a", self.pick(C::PlaceNoun), "in", "the",
                self.pick(C::PlaceNoun), "of", self.pick(C::NamePlace), "."
            ),
            1 => words!(
                "the", self.pick(C::Animal), self.form(&V_LIVE, 1), "near", "the", self.pick(C::PlaceNoun),
                "and", self.form(&V_EAT, 1), self.pick(C::Food), "."
            ),
            2 => words!(
                "the", self.pick(C::Person), "of", self.pick(C::NamePlace), self.form(&V_BUILD, 0),
                self.pick(C::Structure), "and", self.form(&V_DRIVE, 0), self.pick(C::Vehicle), "."
            ),
            3 => words!(
                self.pick(C::NamePerson), "was", "a", self.pick(C::Person), "from", self.pick(C::NamePlace), "."
            ),
            4 => words!(
                "the", self.pick(C::Person), self.form(&V_READ, 1), self.pick(C::Text), "in", "the",
                self.pick(C::PlaceNoun), "."
            ),
            5 => words!(
                "in", "the", self.pick(C::PlaceNoun), ",", "the", self.pick(C::Animal), self.form(&V_CHASE, 1),
                "the", self.pick(C::Animal), "."
            ),
            6 => words!(
                self.pick(C::NamePerson), self.form(&V_PLAY, 2), self.pick(C::Instrument), "and",
                self.form(&V_WEAR, 2), self.pick(C::Clothes), "."
            ),
            7 => words!(
                "the", self.pick(C::Person), self.form(&V_DRINK, 1), self.pick(C::Drink), "with",
                self.pick(C::Food), "."
            ),
            8 => {
                let s = self.sign();
                words!(
                    "the", self.pick(C::EventSubj), self.pick_polar(POS_EVENT, NEG_EVENT, s), "the",
                    self.pick(C::Structure), ",", "so", "the", self.pick(C::Person), "were",
                    self.pick_polar(POS_FEEL, NEG_FEEL, s), "."
                )
            }
            9 => {
                let s = self.sign();
                words!(
                    "the", self.pick(C::EventSubj), self.pick_polar(POS_EVENT, NEG_EVENT, s), "the",
                    self.pick(C::PlaceNoun), ".", "as", "a", "result", ",", "the", self.pick(C::Person), "were",
                    self.pick_polar(POS_FEEL, NEG_FEEL, s), "."
                )
            }
            10 => words!(
                "the", self.pick(C::PlaceNoun), self.form(&V_LIVE, 1), "across", "the", self.pick(C::PlaceNoun),
                "."
            ),
            _ => words!(
                self.pick(C::NamePerson), self.form(&V_LIVE, 2), "in", self.pick(C::NamePlace), "with", "the",
                self.pick(C::Person), "."
            ),
        }
    }

    fn review_sentence(&mut self, s: f64) -> Vec<String> {
        let adj = |g: &mut Self| g.pick_polar(POS_ADJ, NEG_ADJ, s);
        let adv = |g: &mut Self| g.pick_polar(POS_ADV, NEG_ADV, s);
        let verb = |g: &mut Self| g.pick_polar(POS_RVERB, NEG_RVERB, s);
        match self.rng.random_range(0..6) {
            0 => {
                let mut w = words!("the", self.pick(C::ReviewNoun), "was");
                if self.coin(0.5) {
                    w.push(self.pick(C::Degree));
                }
                w.push(adj(self));
                w.push(".".into());
                w
            }
            1 => words!(self.pick(C::Pron), adv(self), verb(self), "the", self.pick(C::ReviewNoun), "."),
            2 => words!("the", self.pick(C::ReviewNoun), "was", adv(self), adj(self), "."),
            3 => words!(
                "the", self.pick(C::ReviewNoun), "was", adj(self), "and", "the", self.pick(C::ReviewNoun), "was",
                adj(self), "."
            ),
            4 => words!(
                self.pick(C::Pron), verb(self), "the", self.pick(C::ReviewNoun), "because", "it", "was", adj(self),
                "."
            ),
            _ => {
                let mut w = words!("overall", ",", "the", self.pick(C::ReviewNoun), "was");
                if self.coin(0.5) {
                    w.push(self.pick(C::Degree));
                }
                w.push(adj(self));
                w.push(".".into());
                w
            }
        }
    }

    /// `review: <sentences>` with an overall polarity `s`; one sentence of the
    /// opposite polarity may appear when there are at least three.
    fn review_body(&mut self, s: f64, n: usize) -> Vec<String> {
        let odd = if n >= 3 && self.coin(0.3) {
            Some(self.rng.random_range(0..n))
        } else {
            None
        };
        let mut w = words!("review", ":");
        for i in 0..n {
            let pol = if Some(i) == odd { -s } else { s };
            w.extend(self.review_sentence(pol));
        }
        w
    }

    fn subject(&mut self, animals_ok: bool) -> String {
        if animals_ok && self.coin(0.5) {
            self.pick(C::Animal)
        } else {
            self.pick(C::Person)
        }
    }

    fn qa_pair(&mut self) -> Vec<String> {
        match self.rng.random_range(0..5) {
            0 | 1 => {
                let (_, obj, forms) = OBJECT_VERBS[self.rng.random_range(0..OBJECT_VERBS.len())];
                let f = forms[self.rng.random_range(0..forms.len())];
                let x = self.subject(obj == C::Food || obj == C::Drink);
                words!(
                    "question", ":", "what", "does", "the", x.clone(), f.0, "?", "answer", ":", "the", x, f.1,
                    self.pick(obj), "."
                )
            }
            2 => {
                let a = self.pick(C::Animal);
                words!(
                    "question", ":", "where", "does", "the", a.clone(), "live", "?", "answer", ":", "the", a,
                    "lives", "in", "the", self.pick(C::PlaceNoun), "."
                )
            }
            3 => {
                let n = self.pick(C::NamePerson);
                words!(
                    "question", ":", "who", "was", n.clone(), "?", "answer", ":", n, "was", "a",
                    self.pick(C::Person), "from", self.pick(C::NamePlace), "."
                )
            }
            _ => {
                let s = self.sign();
                let p = self.pick(C::Person);
                words!(
                    "question", ":", "how", "were", "the", p.clone(), "?", "answer", ":", "the", p, "were",
                    self.pick_polar(POS_FEEL, NEG_FEEL, s), "."
                )
            }
        }
    }
}

fn corpus_lines(cv: &ClassVocab, name: &str, n_lines: usize) -> Vec<String> {
    let mut g = Gen {
        cv,
        rng: substream_rng(FIXTURE_SEED, &format!("fixture-corpus-{name}")),
    };
    (0..n_lines)
        .map(|_| {
            let mut w = Vec::new();
            match name {
                "wiki" => {
                    for _ in 0..g.rng.random_range(8..14) {
                        w.extend(g.wiki_sentence());
                    }
                }
                "reviews" => {
                    for _ in 0..g.rng.random_range(3..6) {
                        let s = g.sign();
                        let n = g.rng.random_range(1..4);
                        w.extend(g.review_body(s, n));
                        w.extend(words!("sentiment", ":", if s > 0.0 { "positive" } else { "negative" }, "."));
                    }
                }
                _ => {
                    for _ in 0..g.rng.random_range(5..9) {
                        w.extend(g.qa_pair());
                    }
                }
            }
            render(&w)
        })
        .collect()
}

fn shuffled_pair(g: &mut Gen, right: String, wrong: String) -> (Vec<String>, usize) {
    if g.coin(0.5) {
        (vec![right, wrong], 0)
    } else {
        (vec![wrong, right], 1)
    }
}

fn task_items(cv: &ClassVocab, name: &str) -> Result<TaskFile> {
    let mut g = Gen {
        cv,
        rng: substream_rng(FIXTURE_SEED, &format!("fixture-task-{name}")),
    };
    let mut items = Vec::new();
    let (task, category) = match name {
        "sentiment" => {
            for i in 0..200 {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                let n = g.rng.random_range(1..4);
                let mut w = g.review_body(s, n);
                w.extend(words!("sentiment", ":"));
                items.push(TaskItem {
                    prompt: render(&w),
                    choices: words!("positive", "negative"),
                    answer_index: if s > 0.0 { 0 } else { 1 },
                });
            }
            ("review-sentiment", Category::Sentiment)
        }
        "qa" => {
            for _ in 0..160 {
                let k = g.rng.random_range(0..OBJECT_VERBS.len());
                let (_, obj, forms) = OBJECT_VERBS[k];
                let f = forms[g.rng.random_range(0..forms.len())];
                let x = g.subject(obj == C::Food || obj == C::Drink);
                let mut other = g.rng.random_range(0..OBJECT_VERBS.len() - 1);
                if other >= k {
                    other += 1;
                }
                let right = g.pick(obj);
                let wrong = g.pick(OBJECT_VERBS[other].1);
                let (choices, answer_index) = shuffled_pair(&mut g, right, wrong);
                let w = words!("question", ":", "what", "does", "the", x.clone(), f.0, "?", "answer", ":", "the", x, f.1);
                items.push(TaskItem {
                    prompt: render(&w),
                    choices,
                    answer_index,
                });
            }
            ("verb-object-qa", Category::Qa)
        }
        "similarity" => {
            for _ in 0..160 {
                let k = g.rng.random_range(0..OBJECT_VERBS.len());
                let (_, obj, forms) = OBJECT_VERBS[k];
                let mut other = g.rng.random_range(0..OBJECT_VERBS.len() - 1);
                if other >= k {
                    other += 1;
                }
                let p = g.pick(C::Person);
                let v = forms[g.rng.random_range(0..forms.len())].1;
                let o1 = g.pick(obj);
                let o2 = g.pick(obj);
                let other_forms = OBJECT_VERBS[other].2;
                let v_wrong = other_forms[g.rng.random_range(0..other_forms.len())].1;
                let w = words!("sentence", ":", "the", p.clone(), v, o1, ".", "same", "meaning", ":");
                let right = render(&words!("the", p.clone(), v, o2.clone(), "."));
                let wrong = render(&words!("the", p, v_wrong, o2, "."));
                let (choices, answer_index) = shuffled_pair(&mut g, right, wrong);
                items.push(TaskItem {
                    prompt: render(&w),
                    choices,
                    answer_index,
                });
            }
            ("paraphrase", Category::Similarity)
        }
        _ => {
            for i in 0..160 {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                let w = words!(
                    "the", g.pick(C::EventSubj), g.pick_polar(POS_EVENT, NEG_EVENT, s), "the", g.pick(C::Structure),
                    ".", "as", "a", "result", ",", "the", g.pick(C::Person), "were"
                );
                let right = g.pick_polar(POS_FEEL, NEG_FEEL, s);
                let wrong = g.pick_polar(POS_FEEL, NEG_FEEL, -s);
                let (choices, answer_index) = shuffled_pair(&mut g, right, wrong);
                items.push(TaskItem {
                    prompt: render(&w),
                    choices,
                    answer_index,
                });
            }
            ("cause-effect", Category::Reasoning)
        }
    };
    TaskFile::new(task, category, items)
}

pub fn sentiment_lexicon() -> InfluentialLexicon {
    InfluentialLexicon::new(
        "sentiment",
        words!("badly", "damaged", "trust", "honestly"),
        Provenance::UserFile,
    )
    .expect("fixed lexicon is valid")
}

pub fn nsa_samples() -> Vec<String> {
    [
        "review: the package was badly damaged and the box was dirty.",
        "review: i honestly loved the food and i trust the staff.",
        "review: the screen was damaged and the battery was very poor.",
        "review: we honestly enjoyed the movie, the acting was superb.",
        "review: the room was badly damaged and the bed was broken.",
        "review: i trust the seller and the delivery was perfect.",
        "review: honestly, the meal was delicious and the price was fine.",
        "review: the laptop was badly damaged. i regret the laptop.",
        "review: i trust this product because it was honestly excellent.",
        "review: the chair was damaged and the table was badly broken.",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Hyper-parameters of the constructed model.
#[derive(Debug, Clone, Copy)]
struct Build {
    bias: f64,
    code: f64,
    polarity: f64,
    identity: f64,
    pos_norm: f64,
    polarity_gain: f64,
    temperature: f64,
    noise: f64,
    on_preact: f64,
}

const BUILD: Build = Build {
    bias: 4.0,
    code: 5.0,
    polarity: 2.0,
    identity: 0.6,
    pos_norm: 0.2,
    polarity_gain: 3.0,
    temperature: 1.0,
    noise: 0.05,
    on_preact: 3.0,
};

const LOGIT_CLIP: f64 = 10.0;
const CLASS_SMOOTHING: f64 = 0.1;
const POLARITY_NEURONS: usize = 8;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Orthonormal basis of R^d whose first vector is the normalized all-ones
/// vector.
fn basis(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = vec![vec![1.0 / (d as f64).sqrt(); d]];
    while out.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        for _ in 0..2 {
            for b in &out {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

fn combo(terms: &[(f64, &[f64])], d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    for (s, b) in terms {
        v.iter_mut().zip(b.iter()).for_each(|(x, y)| *x += s * y);
    }
    v
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Token counts and class-transition counts of the corpora, each line
/// starting after `<bos>`.
struct Counts {
    token: Vec<f64>,
    transition: Vec<Vec<f64>>,
}

fn count(cv: &ClassVocab, corpora: &BTreeMap<String, Vec<String>>) -> Result<Counts> {
    let mut token = vec![0.0; cv.vocab.len()];
    let mut transition = vec![vec![0.0; N_CLASSES]; N_CLASSES];
    let bos = cv.vocab.bos_id();
    for lines in corpora.values() {
        for line in lines {
            let ids = cv.vocab.encode(line, usize::MAX);
            if let Some(&u) = ids.iter().find(|&&i| i == cv.vocab.unk_id()) {
                return Err(Error::Invariant(format!("fixture text has an unknown token ({u}): {line}")));
            }
            let mut prev = bos;
            for &id in &ids {
                token[id as usize] += 1.0;
                transition[cv.classes[prev as usize] as usize][cv.classes[id as usize] as usize] += 1.0;
                prev = id;
            }
        }
    }
    Ok(Counts { token, transition })
}

/// Centered, clipped successor-class logits per class.
fn class_logits(cv: &ClassVocab, counts: &Counts) -> Vec<Vec<f64>> {
    (0..N_CLASSES)
        .map(|c| {
            let row = &counts.transition[c];
            let total: f64 = row.iter().sum::<f64>() + CLASS_SMOOTHING * N_CLASSES as f64;
            let mut l: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(k, n)| ((n + CLASS_SMOOTHING) / total).ln() - (cv.members[k].len() as f64).ln())
                .collect();
            let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            l.iter_mut().for_each(|v| *v = v.max(max - LOGIT_CLIP));
            let mean = l.iter().sum::<f64>() / l.len() as f64;
            l.iter_mut().for_each(|v| *v -= mean);
            l
        })
        .collect()
}

struct Geometry {
    bias: Vec<f64>,
    pol: Vec<f64>,
    codes: Vec<Vec<f64>>,
    id_space: Vec<Vec<f64>>,
}

fn unit_in(space: &[Vec<f64>], rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let coef: Vec<f64> = space.iter().map(|_| gaussian(rng)).collect();
    let n = norm(&coef);
    let terms: Vec<(f64, &[f64])> = coef.iter().zip(space).map(|(c, b)| (c / n, b.as_slice())).collect();
    combo(&terms, d)
}

fn ridge_fit(acts: &Matrix, targets: &Matrix, weights: &[f64]) -> Result<Matrix> {
    let (n, k) = acts.shape();
    let weighted = Matrix::from_fn(n, k, |i, j| acts[(i, j)] * weights[i]);
    let mut gram = matmul(&weighted.transpose(), acts)?;
    let mean_diag = gram.diag().iter().sum::<f64>() / k as f64;
    for j in 0..k {
        gram.data_mut()[j * k + j] += 1e-3 * mean_diag.max(1e-12);
    }
    let rhs = matmul(&weighted.transpose(), targets)?;
    let coef = matmul(&spd_inverse(&gram)?, &rhs)?;
    Ok(coef.transpose())
}

fn build_model(cv: &ClassVocab, counts: &Counts, b: Build) -> Result<ModelBundle> {
    let spec = fixture_spec();
    let d = spec.d_model;
    let dh = spec.head_dim();
    let mut rng = substream_rng(FIXTURE_SEED, "fixture-weights");
    let full = basis(d, &mut rng);
    let geo = Geometry {
        bias: full[1].clone(),
        pol: full[2].clone(),
        codes: full[3..3 + N_CLASSES].to_vec(),
        id_space: full[3 + N_CLASSES..].to_vec(),
    };
    let logits = class_logits(cv, counts);

    let n_vocab = cv.vocab.len();
    let pols: Vec<f64> = cv.vocab.tokens().iter().map(|t| polarity_of(t)).collect();
    let ids: Vec<Vec<f64>> = (0..n_vocab).map(|_| unit_in(&geo.id_space, &mut rng, d)).collect();
    let embed = |t: usize| {
        combo(
            &[
                (b.bias, &geo.bias),
                (b.code, &geo.codes[cv.classes[t] as usize]),
                (b.polarity * pols[t], &geo.pol),
                (b.identity, &ids[t]),
            ],
            d,
        )
    };
    let tok = Matrix::from_rows(&(0..n_vocab).map(embed).collect::<Vec<_>>());
    let pos = Matrix::from_rows(
        &(0..spec.max_seq_len)
            .map(|_| unit_in(&geo.id_space, &mut rng, d).into_iter().map(|x| x * b.pos_norm).collect())
            .collect::<Vec<Vec<f64>>>(),
    );

    // Desired residual change for a token of class c at its own layer.
    let typical_norm = (b.bias * b.bias + b.code * b.code + b.identity * b.identity).sqrt();
    let delta = |t: usize| -> Vec<f64> {
        let c = cv.classes[t] as usize;
        let y: Vec<f64> = logits[c].iter().map(|l| b.temperature * l / (8.0 * b.code)).collect();
        let mut yn = norm(&y);
        let shrink = if yn > 0.9 { 0.9 / yn } else { 1.0 };
        yn *= shrink;
        let rest = (b.bias * b.bias + b.identity * b.identity + (b.polarity * pols[t]).powi(2)).sqrt();
        let r = rest / (1.0 - yn * yn).sqrt();
        let mut terms: Vec<(f64, &[f64])> =
            y.iter().zip(&geo.codes).map(|(v, code)| (r * v * shrink, code.as_slice())).collect();
        terms.push((-b.code, &geo.codes[c]));
        combo(&terms, d)
    };


    let mut tensors: BTreeMap<String, Matrix> = BTreeMap::new();
    tensors.insert(TOK_EMBED.into(), tok);
    tensors.insert(POS_EMBED.into(), pos);
    for layer in 0..spec.n_layers {
        let mut q = Matrix::zeros(d, d);
        let mut k = Matrix::zeros(d, d);
        let mut v = Matrix::zeros(d, d);
        let mut o = Matrix::zeros(d, d);
        for m in [&mut q, &mut k, &mut v] {
            for x in m.data_mut().iter_mut() {
                *x = b.noise * gaussian(&mut rng);
            }
        }
        for x in o.data_mut().iter_mut() {
            *x = b.noise * gaussian(&mut rng);
        }
        if layer == 0 {
            // head 0: uniform causal average of the polarity channel
            for r in 0..dh {
                for j in 0..d {
                    q.data_mut()[r * d + j] = 0.0;
                    k.data_mut()[r * d + j] = 0.0;
                }
            }
            v.row_mut(0).copy_from_slice(&geo.pol);
            for i in 0..d {
                o.data_mut()[i * d] = b.polarity_gain * geo.pol[i];
            }
        }
        let l = format!("layer.{layer}.attn");
        tensors.insert(weight_name(&format!("{l}.q_proj")), q);
        tensors.insert(weight_name(&format!("{l}.k_proj")), k);
        tensors.insert(weight_name(&format!("{l}.v_proj")), v);
        tensors.insert(weight_name(&format!("{l}.o_proj")), o);
        tensors.insert(weight_name(&format!("layer.{layer}.mlp.fc1")), Matrix::zeros(spec.d_ff, d));
        tensors.insert(weight_name(&format!("layer.{layer}.mlp.fc2")), Matrix::zeros(d, spec.d_ff));
    }

    // Allocate neurons to classes in proportion to sqrt(frequency).
    let class_freq: Vec<f64> = (0..N_CLASSES)
        .map(|c| (0..n_vocab).filter(|&t| cv.classes[t] as usize == c).map(|t| counts.token[t]).sum())
        .collect();
    let weights: Vec<f64> = counts.token.iter().map(|n| n + 1.0).collect();
    for layer in 0..spec.n_layers {
        let classes: Vec<usize> = (0..N_CLASSES)
            .filter(|&c| class_of_index(c).layer() == layer)
            .collect();
        let reserve = if layer == 1 { POLARITY_NEURONS } else { 0 } + 16;
        let budget = spec.d_ff - reserve;
        let share: Vec<f64> = classes.iter().map(|&c| class_freq[c].sqrt()).collect();
        let total: f64 = share.iter().sum();
        let mut slots: Vec<Option<usize>> = Vec::with_capacity(spec.d_ff);
        for (&c, s) in classes.iter().zip(&share) {
            let n = ((s / total) * budget as f64).floor().max(2.0) as usize;
            slots.extend(std::iter::repeat_n(Some(c), n));
        }
        let polar_start = slots.len();
        if layer == 1 {
            slots.extend(std::iter::repeat_n(None, POLARITY_NEURONS));
        }
        let n_keyed = slots.len();
        if n_keyed > spec.d_ff {
            return Err(Error::Invariant(format!("neuron budget exceeded in layer {layer}")));
        }
        slots.resize(spec.d_ff, None);
        let mut order: Vec<usize> = (0..spec.d_ff).collect();
        order.shuffle(&mut rng);

        let kappa = b.on_preact * typical_norm / (8.0 * b.code / 2.0);
        let theta = b.code / (2.0 * b.bias);
        let mut fc1 = Matrix::zeros(spec.d_ff, d);
        for (slot, target) in slots.iter().enumerate() {
            let row = order[slot];
            let key = match target {
                Some(c) => {
                    let r = unit_in(&geo.id_space, &mut rng, d);
                    combo(&[(kappa, &geo.codes[*c]), (-kappa * theta, &geo.bias), (kappa, &r)], d)
                }
                None if slot >= polar_start && slot < n_keyed => {
                    // polarity detectors: fire on strongly polar positions
                    let sign = if (slot - polar_start) % 2 == 0 { 1.0 } else { -1.0 };
                    let kp = b.on_preact * typical_norm / (8.0 * b.polarity / 2.0);
                    combo(&[(sign * kp, &geo.pol), (-kp * b.polarity / (2.0 * b.bias), &geo.bias)], d)
                }
                None => (0..d).map(|_| 0.3 * gaussian(&mut rng) / (d as f64).sqrt()).collect(),
            };
            fc1.row_mut(row).copy_from_slice(&key);
        }
        tensors.insert(weight_name(&format!("layer.{layer}.mlp.fc1")), fc1);

        let bundle = ModelBundle::new(spec, tensors.clone(), cv.vocab.clone())?;
        let site = format!("layer.{layer}.mlp.act");
        let mut acts = Matrix::zeros(n_vocab, spec.d_ff);
        let mut targets = Matrix::zeros(n_vocab, d);
        for t in 0..n_vocab {
            let out = forward(&bundle, &[t as u32], &[&site])?;
            acts.row_mut(t).copy_from_slice(out.traces[&site].values.row(0));
            let mut want = vec![0.0; d];
            if cv.classes[t].layer() == layer {
                want = delta(t);
            }
            if layer == 1 && pols[t] != 0.0 {
                for (w, p) in want.iter_mut().zip(&geo.pol) {
                    *w += 0.5 * b.polarity * pols[t] * p;
                }
            }
            targets.row_mut(t).copy_from_slice(&want);
        }
        let fc2 = ridge_fit(&acts, &targets, &weights)?;
        tensors.insert(weight_name(&format!("layer.{layer}.mlp.fc2")), fc2);
    }
    let rounded: BTreeMap<String, Matrix> = tensors.into_iter().map(|(k, m)| (k, m.map(|v| v as f32 as f64))).collect();
    ModelBundle::new(spec, rounded, cv.vocab.clone())
}

fn class_of_index(c: usize) -> C {
    const ALL: [C; N_CLASSES] = [
        C::Bos,
        C::Period,
        C::Comma,
        C::QMark,
        C::Colon,
        C::OtherPunct,
        C::Det,
        C::Pron,
        C::Aux,
        C::AuxDo,
        C::Degree,
        C::Conj,
        C::Prep,
        C::Wh,
        C::Connect,
        C::Meta,
        C::Label,
        C::NamePlace,
        C::NamePerson,
        C::Rare,
        C::Adj,
        C::Adv,
        C::RVerb,
        C::ReviewNoun,
        C::Animal,
        C::Person,
        C::PlaceNoun,
        C::VEat,
        C::Food,
        C::VDrink,
        C::Drink,
        C::VRead,
        C::Text,
        C::VDrive,
        C::Vehicle,
        C::VChase,
        C::VWear,
        C::Clothes,
        C::VPlay,
        C::Instrument,
        C::VBuild,
        C::Structure,
        C::VLive,
        C::EventSubj,
        C::EventVerb,
    ];
    ALL[c]
}

/// Everything that ships in the fixture directory.
pub struct FixtureSet {
    pub bundle: ModelBundle,
    pub corpora: BTreeMap<String, Vec<String>>,
    pub tasks: Vec<TaskFile>,
    pub lexicon: InfluentialLexicon,
    pub nsa_samples: Vec<String>,
    pub temperature: f64,
}

const CORPUS_LINES: usize = 240;
const TEMPERATURES: [f64; 5] = [0.6, 0.8, 1.0, 1.25, 1.5];

pub fn generate() -> Result<FixtureSet> {
    let cv = class_vocab()?;
    let corpora: BTreeMap<String, Vec<String>> = CORPORA
        .iter()
        .map(|n| (n.to_string(), corpus_lines(&cv, n, CORPUS_LINES)))
        .collect();
    let counts = count(&cv, &corpora)?;
    let tune: Vec<String> = corpora["wiki"].iter().take(40).cloned().collect();
    let mut best: Option<(f64, f64, ModelBundle)> = None;
    for &temperature in &TEMPERATURES {
        let bundle = build_model(&cv, &counts, Build { temperature, ..BUILD })?;
        let ppl = perplexity(&bundle, &corpus_sequences(&bundle, &tune))?;
        log::debug!("fixture temperature {temperature}: wiki perplexity {ppl:.3}");
        if best.as_ref().is_none_or(|(p, _, _)| ppl < *p) {
            best = Some((ppl, temperature, bundle));
        }
    }
    let (_, temperature, bundle) = best.expect("at least one temperature");
    let tasks = TASKS.iter().map(|t| task_items(&cv, t)).collect::<Result<Vec<_>>>()?;
    for task in &tasks {
        for it in &task.items {
            for text in std::iter::once(&it.prompt).chain(&it.choices) {
                if cv.vocab.encode(text, usize::MAX).contains(&cv.vocab.unk_id()) {
                    return Err(Error::Invariant(format!("task text has an unknown token: {text}")));
                }
            }
        }
    }
    Ok(FixtureSet {
        bundle,
        corpora,
        tasks,
        lexicon: sentiment_lexicon(),
        nsa_samples: nsa_samples(),
        temperature,
    })
}

#[derive(Serialize)]
struct TextLine<'a> {
    text: &'a str,
}

pub fn jsonl_texts(lines: &[String]) -> String {
    let mut out = String::new();
    for l in lines {
        out.push_str(&serde_json::to_string(&TextLine { text: l }).expect("text line serializes"));
        out.push('\n');
    }
    out
}

impl FixtureSet {
    /// Files as (relative path, bytes), in a fixed order.
    pub fn files(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let mut out = vec![(MODEL_FILE.to_string(), self.bundle.to_bytes())];
        let mut vocab = self.bundle.vocab().tokens().join("\n");
        vocab.push('\n');
        out.push((VOCAB_FILE.to_string(), vocab.into_bytes()));
        for (name, lines) in &self.corpora {
            out.push((corpus_file(name), jsonl_texts(lines).into_bytes()));
        }
        for (name, task) in TASKS.iter().zip(&self.tasks) {
            out.push((task_file(name), task.to_jsonl().into_bytes()));
        }
        out.push((LEXICON_FILE.to_string(), to_json_pretty(&self.lexicon)?.into_bytes()));
        out.push((NSA_SAMPLES_FILE.to_string(), jsonl_texts(&self.nsa_samples).into_bytes()));
        out.extend(crate::pipeline::fixture_configs()?);
        Ok(out)
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for (rel, bytes) in self.files()? {
            let path = dir.join(rel);
            write_file(&path, &bytes)?;
            written.push(path);
        }
        Ok(written)
    }
}

/// A model with small random weights, for tests that need any valid bundle.
pub fn random_bundle(spec: ModelSpec, vocab: Vocabulary, seed: u64, scale: f64) -> Result<ModelBundle> {
    if vocab.len() != spec.vocab_size {
        return Err(Error::invalid(format!(
            "vocabulary has {} tokens but the spec says {}",
            vocab.len(),
            spec.vocab_size
        )));
    }
    let mut rng = substream_rng(seed, "random-bundle");
    let tensors = spec
        .tensor_layout()
        .into_iter()
        .map(|(name, (r, c))| {
            let m = Matrix::from_fn(r, c, |_, _| (scale * gaussian(&mut rng)) as f32 as f64);
            (name, m)
        })
        .collect();
    ModelBundle::new(spec, tensors, vocab)
}

/// Vocabulary of `n` tokens: the reserved tokens followed by `w0`, `w1`, ...
pub fn numbered_vocab(n: usize) -> Result<Vocabulary> {
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend((0..n.saturating_sub(RESERVED.len())).map(|i| format!("w{i}")));
    Vocabulary::new(tokens)
}
