//! Synthetic remote-sensing-style task family: scenes, CLS/VQA/VG samples
//! with verifiable ground truth, few-shot selection and batch duplication.

pub mod io;
pub mod prompt;
pub mod scene;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::BBox;

pub use prompt::{make_prompt, make_prompt_styled, PromptStyle, SystemPrompt};
pub use scene::{Raster, Scene, SceneConfig, COLORS, SCENE_CLASSES, SHAPES};

pub const COUNT_WORDS: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    #[serde(rename = "VQA")]
    Vqa,
    #[serde(rename = "CLS")]
    Cls,
    #[serde(rename = "VG")]
    Vg,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Vqa, TaskKind::Cls, TaskKind::Vg];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Vqa => "VQA",
            TaskKind::Cls => "CLS",
            TaskKind::Vg => "VG",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "VQA" | "vqa" => Ok(TaskKind::Vqa),
            "CLS" | "cls" => Ok(TaskKind::Cls),
            "VG" | "vg" => Ok(TaskKind::Vg),
            _ => Err(Error::config(format!("unknown task kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Truth {
    Label(String),
    Answer(String),
    #[serde(rename = "bbox")]
    BBox(BBox),
}

impl Truth {
    /// The answer string a perfect model would put inside the answer tags.
    pub fn answer_text(&self) -> String {
        match self {
            Truth::Label(s) | Truth::Answer(s) => s.clone(),
            Truth::BBox(b) => b.to_string(),
        }
    }
}

/// A verifiable question about a scene.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Question {
    Classify,
    Presence { shape: usize },
    Count { shape: usize },
    Compare { more: usize, than: usize },
    RuralUrban,
    Ground { shape: usize, color: usize },
}

impl Question {
    pub fn kind(&self) -> TaskKind {
        match self {
            Question::Classify => TaskKind::Cls,
            Question::Ground { .. } => TaskKind::Vg,
            _ => TaskKind::Vqa,
        }
    }

    fn check(&self) -> Result<()> {
        let ok = match *self {
            Question::Presence { shape } | Question::Count { shape } => shape < SHAPES.len(),
            Question::Compare { more, than } => {
                more < SHAPES.len() && than < SHAPES.len() && more != than
            }
            Question::Ground { shape, color } => shape < SHAPES.len() && color < COLORS.len(),
            Question::Classify | Question::RuralUrban => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::contract(format!("invalid question {self:?}")))
        }
    }

    pub fn core_text(&self) -> String {
        match *self {
            Question::Classify => "Classify the scene.".into(),
            Question::Presence { shape } => format!("Is there a {} in the image?", SHAPES[shape]),
            Question::Count { shape } => format!("How many {} objects are there?", SHAPES[shape]),
            Question::Compare { more, than } => format!(
                "Are there more {} cells than {} cells?",
                SHAPES[more], SHAPES[than]
            ),
            Question::RuralUrban => "Is this a rural or urban area?".into(),
            Question::Ground { shape, color } => {
                format!("Locate the {} {}.", COLORS[color], SHAPES[shape])
            }
        }
    }

    /// Every answer of the right type for a closed-ended question; empty for grounding.
    pub fn answer_options(&self) -> Vec<&'static str> {
        match self {
            Question::Classify => SCENE_CLASSES.to_vec(),
            Question::Presence { .. } | Question::Compare { .. } => vec!["yes", "no"],
            Question::Count { .. } => COUNT_WORDS.to_vec(),
            Question::RuralUrban => vec!["rural", "urban"],
            Question::Ground { .. } => Vec::new(),
        }
    }

    /// Ground truth recomputed from the grid.
    pub fn truth(&self, scene: &Scene) -> Result<Truth> {
        self.check()?;
        let yes_no = |b: bool| Truth::Answer(if b { "yes" } else { "no" }.into());
        Ok(match *self {
            Question::Classify => Truth::Label(scene.scene_class_name().into()),
            Question::Presence { shape } => yes_no(scene.shape_cells()[shape] > 0),
            Question::Count { shape } => {
                let n = scene.count_objects(shape);
                Truth::Answer(COUNT_WORDS[n.min(COUNT_WORDS.len() - 1)].into())
            }
            Question::Compare { more, than } => {
                let c = scene.shape_cells();
                yes_no(c[more] > c[than])
            }
            Question::RuralUrban => {
                Truth::Answer(if scene.is_urban() { "urban" } else { "rural" }.into())
            }
            Question::Ground { shape, color } => Truth::BBox(
                scene
                    .tight_box(shape, color)
                    .ok_or_else(|| Error::contract("grounded object absent from scene"))?,
            ),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub kind: TaskKind,
    pub scene: Scene,
    pub question: Question,
    pub prompt_text: String,
    pub truth: Truth,
}

impl Sample {
    pub fn new(id: String, scene: Scene, question: Question) -> Result<Self> {
        let kind = question.kind();
        let truth = question.truth(&scene)?;
        let prompt_text = make_prompt(kind, &question.core_text())?;
        Ok(Sample {
            id,
            kind,
            scene,
            question,
            prompt_text,
            truth,
        })
    }

    pub fn prompt(&self, style: PromptStyle) -> String {
        match style {
            PromptStyle::Reasoning => self.prompt_text.clone(),
            PromptStyle::Plain => make_prompt_styled(self.kind, &self.question.core_text(), style)
                .expect("question cores are never empty"),
        }
    }

    pub fn raster(&self, px_per_cell: usize) -> Raster {
        self.scene.render(px_per_cell)
    }

    /// Checks that the stored prompt and truth agree with the scene.
    pub fn verify(&self) -> Result<()> {
        if self.question.kind() != self.kind {
            return Err(Error::contract("kind does not match question"));
        }
        if self.question.truth(&self.scene)? != self.truth {
            return Err(Error::contract("truth does not match scene"));
        }
        if !self.prompt_text.ends_with(prompt::suffix(self.kind, PromptStyle::Reasoning)) {
            return Err(Error::contract("prompt does not end with the task suffix"));
        }
        Ok(())
    }
}

/// Stateless seed mixing (SplitMix64 finaliser) for independent streams.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(b)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn vqa_question<R: Rng>(rng: &mut R, scene: &Scene) -> Question {
    let counts = scene.shape_cells();
    let present: Vec<usize> = (0..SHAPES.len()).filter(|&s| counts[s] > 0).collect();
    let pick_any = |rng: &mut R| rng.gen_range(0..SHAPES.len());
    let pick_present = |rng: &mut R| present[rng.gen_range(0..present.len())];
    match rng.gen_range(0..4) {
        0 => {
            let shape = if rng.gen_bool(0.5) {
                pick_present(rng)
            } else {
                pick_any(rng)
            };
            Question::Presence { shape }
        }
        1 => {
            let shape = if rng.gen_bool(0.7) {
                pick_present(rng)
            } else {
                pick_any(rng)
            };
            Question::Count { shape }
        }
        2 => {
            let more = pick_present(rng);
            let mut than = pick_any(rng);
            while than == more {
                than = pick_any(rng);
            }
            if rng.gen_bool(0.5) {
                Question::Compare { more, than }
            } else {
                Question::Compare {
                    more: than,
                    than: more,
                }
            }
        }
        _ => Question::RuralUrban,
    }
}

/// Generates one sample of `kind` from its own seeded stream.
pub fn generate_sample(cfg: &SceneConfig, kind: TaskKind, seed: u64, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, index));
    let class = rng.gen_range(0..SCENE_CLASSES.len());
    let scene = Scene::generate(&mut rng, cfg, class);
    let question = match kind {
        TaskKind::Cls => Question::Classify,
        TaskKind::Vqa => vqa_question(&mut rng, &scene),
        TaskKind::Vg => {
            let objs = scene.objects();
            let o = &objs[rng.gen_range(0..objs.len())];
            Question::Ground {
                shape: o.shape,
                color: o.color,
            }
        }
    };
    Sample::new(format!("s{seed}-{index}"), scene, question)
        .expect("generated questions always have a truth")
}

/// A pool balanced across kinds: sample `i` has kind `[VQA, CLS, VG][i % 3]`.
pub fn render_pool(pool_size: usize, seed: u64) -> Result<Vec<Sample>> {
    render_pool_with(&SceneConfig::default(), pool_size, seed)
}

pub fn render_pool_with(cfg: &SceneConfig, pool_size: usize, seed: u64) -> Result<Vec<Sample>> {
    if pool_size < 3 {
        return Err(Error::contract("pool size must be at least 3"));
    }
    cfg.validate()?;
    Ok((0..pool_size)
        .map(|i| generate_sample(cfg, TaskKind::ALL[i % 3], seed, i as u64))
        .collect())
}

/// Samples of a single kind, e.g. a held-out classification set.
pub fn render_kind_set(cfg: &SceneConfig, kind: TaskKind, n: usize, seed: u64) -> Vec<Sample> {
    (0..n)
        .map(|i| generate_sample(cfg, kind, seed, i as u64))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSpec {
    pub n_vqa: usize,
    pub n_cls: usize,
    pub n_vg: usize,
    pub seed: u64,
}

/// Named few-shot mixes: `(name, VQA, CLS, VG)`.
pub const PRESETS: [(&str, usize, usize, usize); 13] = [
    ("pi1V", 1, 0, 0),
    ("pi1C", 0, 1, 0),
    ("pi1G", 0, 0, 1),
    ("pi2VC", 1, 1, 0),
    ("pi2G", 0, 0, 2),
    ("pi4VC", 2, 2, 0),
    ("pi4VCG", 2, 1, 1),
    ("pi8VC", 4, 4, 0),
    ("pi8VCG", 3, 3, 2),
    ("pi16VC", 8, 8, 0),
    ("pi32VCG", 10, 12, 10),
    ("pi64VCG", 20, 22, 22),
    ("pi128VCG", 42, 42, 44),
];

impl FewShotSpec {
    pub fn new(n_vqa: usize, n_cls: usize, n_vg: usize, seed: u64) -> Result<Self> {
        let spec = FewShotSpec {
            n_vqa,
            n_cls,
            n_vg,
            seed,
        };
        if spec.total() == 0 {
            return Err(Error::contract("few-shot spec selects no samples"));
        }
        Ok(spec)
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        let &(_, v, c, g) = PRESETS
            .iter()
            .find(|p| p.0.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::config(format!("unknown preset {name:?}")))?;
        FewShotSpec::new(v, c, g, seed)
    }

    pub fn total(&self) -> usize {
        self.n_vqa + self.n_cls + self.n_vg
    }

    pub fn count(&self, kind: TaskKind) -> usize {
        match kind {
            TaskKind::Vqa => self.n_vqa,
            TaskKind::Cls => self.n_cls,
            TaskKind::Vg => self.n_vg,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub spec: Option<FewShotSpec>,
    pub pool_id: String,
    pub batch_size: Option<usize>,
    /// Pool indices of the selected samples, in selection order.
    pub selected: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub provenance: Provenance,
}

/// Uniform selection without replacement within each kind (VQA, CLS, VG order).
pub fn sample_fewshot(pool: &[Sample], pool_id: &str, spec: &FewShotSpec) -> Result<Dataset> {
    if spec.total() == 0 {
        return Err(Error::contract("few-shot spec selects no samples"));
    }
    let mut selected = Vec::with_capacity(spec.total());
    for kind in TaskKind::ALL {
        let want = spec.count(kind);
        if want == 0 {
            continue;
        }
        let mut idx: Vec<usize> = (0..pool.len()).filter(|&i| pool[i].kind == kind).collect();
        if idx.len() < want {
            return Err(Error::InsufficientPool {
                kind: kind.to_string(),
                available: idx.len(),
                requested: want,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, kind as u64));
        for i in 0..want {
            let j = rng.gen_range(i..idx.len());
            idx.swap(i, j);
        }
        selected.extend_from_slice(&idx[..want]);
    }
    Ok(Dataset {
        samples: selected.iter().map(|&i| pool[i].clone()).collect(),
        provenance: Provenance {
            spec: Some(*spec),
            pool_id: pool_id.to_owned(),
            batch_size: None,
            selected,
        },
    })
}

/// Round-robin duplication to exactly `batch_size` entries.
pub fn duplicate_to_batch(dataset: &Dataset, batch_size: usize) -> Result<Dataset> {
    let n = dataset.samples.len();
    if n == 0 {
        return Err(Error::contract("cannot duplicate an empty dataset"));
    }
    if batch_size < n {
        return Err(Error::contract(format!(
            "batch size {batch_size} smaller than dataset size {n}"
        )));
    }
    let mut provenance = dataset.provenance.clone();
    provenance.batch_size = Some(batch_size);
    Ok(Dataset {
        samples: (0..batch_size)
            .map(|i| dataset.samples[i % n].clone())
            .collect(),
        provenance,
    })
}
