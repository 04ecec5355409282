//! Templated stand-in corpora for exercising the pipeline without the
//! annotated dataset.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Sample, Split};
use crate::taxonomy::{Fallacy, NUM_LABELS};

/// Per-label (train, val, test) counts of the published 2509-sample split.
pub const REFERENCE_SPLIT: [[usize; 3]; NUM_LABELS] = [
    [264, 67, 37],
    [170, 43, 24],
    [222, 56, 31],
    [154, 39, 22],
    [44, 12, 7],
    [48, 13, 7],
    [52, 14, 8],
    [144, 37, 21],
    [151, 38, 22],
    [143, 36, 20],
    [226, 57, 32],
    [178, 45, 25],
];

pub fn reference_totals() -> [usize; NUM_LABELS] {
    REFERENCE_SPLIT.map(|[a, b, c]| a + b + c)
}

/// Labels of one partition of the published split, in canonical label order.
pub fn reference_labels(split: Split) -> Vec<Fallacy> {
    Fallacy::ALL
        .iter()
        .flat_map(|&f| std::iter::repeat_n(f, REFERENCE_SPLIT[f.index()][split as usize]))
        .collect()
}

const GROUPS: &[&str] = &[
    "climate activists",
    "the IPCC",
    "green politicians",
    "climate scientists",
    "environmentalists",
    "the mainstream media",
    "alarmists",
    "UN bureaucrats",
];

const TOPICS: &[&str] = &[
    "global warming",
    "sea level rise",
    "Arctic sea ice",
    "carbon dioxide",
    "extreme weather",
    "the temperature record",
    "renewable energy",
    "ocean acidification",
];

const PLACES: &[&str] = &[
    "Chicago",
    "my home town",
    "Buenos Aires",
    "the Alps",
    "Queensland",
    "northern Canada",
    "Texas",
    "Siberia",
];

fn templates(label: Fallacy) -> &'static [&'static str] {
    match label {
        Fallacy::AdHominem => &[
            "{group} fly around in private jets, so why would anyone listen to what they say about {topic}?",
            "Of course {group} push {topic} scares, they are hypocrites who live in mansions.",
            "Nobody should trust {group} on {topic}; they are paid activists with an agenda.",
        ],
        Fallacy::Anecdote => &[
            "It snowed in {place} this week, so much for {topic}.",
            "My grandfather farmed in {place} for sixty years and never saw any change from {topic}.",
            "Last winter in {place} was the coldest I remember, which tells you {topic} is a myth.",
        ],
        Fallacy::CherryPicking => &[
            "Since 1998 there has been no trend at all in {topic}, look at the data from that year.",
            "{topic} actually went up in {place} last year, which proves the decline claims are wrong.",
            "One station in {place} shows cooling for a decade, so the warming of {topic} is overstated.",
        ],
        Fallacy::ConspiracyTheory => &[
            "{group} are secretly inventing {topic} to impose world government.",
            "The whole story about {topic} is a hoax cooked up by {group} to control our lives.",
            "{group} hide the real numbers on {topic} because the truth would end their funding scheme.",
        ],
        Fallacy::FakeExperts => &[
            "Thousands of scientists and engineers signed a petition rejecting {topic}.",
            "A famous physicist with no climate training says {topic} is nonsense, and he is a Nobel laureate.",
            "A retired weatherman from {place} explains why {topic} is not a problem.",
        ],
        Fallacy::FalseChoice => &[
            "Either we stop using fossil fuels completely or we accept {topic}, there is no middle ground.",
            "We must choose between a strong economy and worrying about {topic}.",
            "It is either natural variation or carbon dioxide behind {topic}, and we know it is natural.",
        ],
        Fallacy::FalseEquivalence => &[
            "Belief in {topic} is just like a religion, with {group} as its priests.",
            "Carbon dioxide is plant food just like water, so worrying about {topic} is like worrying about rain.",
            "Climate models of {topic} are no better than astrology charts.",
        ],
        Fallacy::ImpossibleExpectations => &[
            "Until the models can predict {topic} perfectly we should not spend a cent on policy.",
            "Scientists cannot even forecast next week's weather in {place}, so how can they know about {topic}?",
            "There is still uncertainty about {topic}, so we must wait for complete proof before acting.",
        ],
        Fallacy::Misrepresentation => &[
            "{group} claim we will all be dead in ten years from {topic}.",
            "Carbon dioxide is only a trace gas, so it cannot possibly drive {topic}.",
            "{group} say every storm in {place} is caused by {topic}.",
        ],
        Fallacy::Oversimplification => &[
            "More carbon dioxide means greener plants, so {topic} is good for the planet.",
            "A warmer {place} means fewer cold deaths, so {topic} is a net benefit.",
            "Plants love CO2, which is why {topic} will boost harvests everywhere.",
        ],
        Fallacy::SingleCause => &[
            "The sun drives the climate, so {topic} is simply a solar cycle.",
            "Climate has always changed naturally, so {topic} today is natural too.",
            "Urban heat islands in {place} explain all of {topic}.",
        ],
        Fallacy::SlothfulInduction => &[
            "{topic} has been modest so far, so it will stay modest this century.",
            "Despite all the warnings about {topic}, life in {place} carries on as normal.",
            "The rate of {topic} has been slow, it would take thousands of years to matter.",
        ],
    }
}

const CLAIMS: [&str; NUM_LABELS] = ["5.2", "1.3", "1.1", "5.3", "5.1", "2.3", "5.2", "4.2", "2.3", "3.3", "2.1", "1.6"];

fn fill<R: Rng>(template: &str, rng: &mut R) -> String {
    template
        .replace("{group}", GROUPS.choose(rng).expect("non-empty"))
        .replace("{topic}", TOPICS.choose(rng).expect("non-empty"))
        .replace("{place}", PLACES.choose(rng).expect("non-empty"))
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(first) => first.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// `counts[i]` templated samples for label `i`. Texts carry a serial suffix so
/// ids and texts stay unique; `tag` prefixes the ids.
pub fn templated(counts: &[usize; NUM_LABELS], seed: u64, tag: &str) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for label in Fallacy::ALL {
        for k in 0..counts[label.index()] {
            let template = templates(label).choose(&mut rng).expect("non-empty");
            let text = format!("{} (#{k})", capitalize(&fill(template, &mut rng)));
            samples.push(
                Sample::new(format!("{tag}-{:02}-{k:04}", label.index()), text, label)
                    .with_claim(CLAIMS[label.index()]),
            );
        }
    }
    let mut d = Dataset::new(samples).expect("generated ids are unique");
    d.provenance.push(format!("templated synthetic corpus, seed {seed}"));
    d
}

/// 2509 templated samples with the per-label totals of the published split.
pub fn reference_dataset(seed: u64) -> Dataset {
    templated(&reference_totals(), seed, "synth")
}

/// A class-balanced set of `n` samples (remainder spread over the first labels).
pub fn balanced(n: usize, seed: u64) -> Dataset {
    let mut counts = [n / NUM_LABELS; NUM_LABELS];
    for c in counts.iter_mut().take(n % NUM_LABELS) {
        *c += 1;
    }
    templated(&counts, seed, "bal")
}
