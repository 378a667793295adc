//! Rule-based verifiable rewards: format compliance, exact-match accuracy,
//! box IoU and the quantized IoU reward.
//!
//! Every function here is pure and total over arbitrary UTF-8 input; malformed
//! completions score zero instead of erroring.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::{Sample, TaskKind, Truth};

pub const REASONING_OPEN: &str = "<reasoning>";
pub const REASONING_CLOSE: &str = "</reasoning>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

const TAGS: [&str; 4] = [REASONING_OPEN, REASONING_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

/// Upper bound of the normalised coordinate scale.
pub const COORD_MAX: u32 = 1000;

/// Axis-aligned box on the 0–1000 normalised scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    x_min: u32,
    y_min: u32,
    x_max: u32,
    y_max: u32,
}

impl BBox {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self> {
        if x_min > x_max || y_min > y_max || x_max > COORD_MAX || y_max > COORD_MAX {
            return Err(Error::contract(format!(
                "invalid box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Clamps raw model coordinates into range. Inverted boxes are rejected.
    pub fn from_raw(raw: [i64; 4]) -> Option<Self> {
        let c = |v: i64| v.clamp(0, COORD_MAX as i64) as u32;
        BBox::new(c(raw[0]), c(raw[1]), c(raw[2]), c(raw[3])).ok()
    }

    pub fn coords(&self) -> [u32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) as f64 * (self.y_max - self.y_min) as f64
    }
}

impl TryFrom<[u32; 4]> for BBox {
    type Error = Error;
    fn try_from(c: [u32; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        b.coords()
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[[{}, {}, {}, {}]]",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub iou_hi: f64,
    pub iou_lo: f64,
    pub format_weight: f64,
    pub accuracy_weight: f64,
    pub case_fold: bool,
    pub trim: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            iou_hi: 0.7,
            iou_lo: 0.4,
            format_weight: 1.0,
            accuracy_weight: 1.0,
            case_fold: true,
            trim: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.iou_lo && self.iou_lo < self.iou_hi && self.iou_hi <= 1.0) {
            return Err(Error::config(format!(
                "need 0 <= iou_lo < iou_hi <= 1, got {} / {}",
                self.iou_lo, self.iou_hi
            )));
        }
        let ok = |w: f64| w >= 0.0 && w.is_finite();
        if !(ok(self.format_weight) && ok(self.accuracy_weight)) {
            return Err(Error::config("reward weights must be finite and non-negative"));
        }
        Ok(())
    }

    /// Upper bound of [`RewardBreakdown::total`].
    pub fn max_total(&self) -> f64 {
        self.format_weight + self.accuracy_weight
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("reward config is always representable")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RewardConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("reward config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub accuracy: f64,
    pub total: f64,
    /// IoU of the predicted box, for grounding samples with a parseable box.
    pub iou: Option<f64>,
    /// Whether an answer could be extracted at all.
    pub parsed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedOutput {
    pub reasoning_text: Option<String>,
    pub answer_text: Option<String>,
    pub bbox: Option<BBox>,
}

fn skip_ws(s: &str) -> &str {
    s.trim_start()
}

fn contains_tag(s: &str) -> bool {
    TAGS.iter().any(|t| s.contains(t))
}

/// 1 iff `text` is exactly one reasoning block followed by exactly one answer
/// block, with only whitespace around and between them.
pub fn verify_format(text: &str) -> u8 {
    fn block<'a>(s: &'a str, open: &str, close: &str) -> Option<&'a str> {
        let rest = s.strip_prefix(open)?;
        let end = rest.find(close)?;
        if contains_tag(&rest[..end]) {
            return None;
        }
        Some(&rest[end + close.len()..])
    }
    let ok = block(skip_ws(text), REASONING_OPEN, REASONING_CLOSE)
        .and_then(|rest| block(skip_ws(rest), ANSWER_OPEN, ANSWER_CLOSE))
        .is_some_and(|rest| rest.trim().is_empty());
    ok as u8
}

fn inner<'a>(text: &'a str, open: &str, close: &str) -> Option<&'a str> {
    let start = text.find(open)? + open.len();
    let len = text[start..].find(close)?;
    Some(text[start..start + len].trim())
}

fn parse_bbox(answer: &str) -> Option<BBox> {
    let body = answer.trim().strip_prefix("[[")?.strip_suffix("]]")?;
    let mut coords = [0i64; 4];
    let mut n = 0;
    for part in body.split(|c: char| c == ',' || c.is_whitespace()) {
        if part.is_empty() {
            continue;
        }
        if n == 4 {
            return None;
        }
        coords[n] = part.parse().ok()?;
        n += 1;
    }
    if n != 4 {
        return None;
    }
    BBox::from_raw(coords)
}

/// Extracts the first reasoning and answer blocks and, when the answer is
/// `[[x_min, y_min, x_max, y_max]]`, the box it names.
pub fn parse_answer(text: &str) -> ParsedOutput {
    let answer_text = inner(text, ANSWER_OPEN, ANSWER_CLOSE).map(str::to_owned);
    let bbox = answer_text.as_deref().and_then(parse_bbox);
    ParsedOutput {
        reasoning_text: inner(text, REASONING_OPEN, REASONING_CLOSE).map(str::to_owned),
        answer_text,
        bbox,
    }
}

fn normalize(s: &str, cfg: &RewardConfig) -> String {
    let s = if cfg.trim { s.trim() } else { s };
    if cfg.case_fold {
        s.to_lowercase()
    } else {
        s.to_owned()
    }
}

pub fn exact_match_reward(pred: &str, truth: &str, cfg: &RewardConfig) -> f64 {
    let t = normalize(truth, cfg);
    if t.is_empty() {
        return 0.0;
    }
    if normalize(pred, cfg) == t {
        1.0
    } else {
        0.0
    }
}

/// Intersection over union with continuous areas; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ix = a.x_max.min(b.x_max).saturating_sub(a.x_min.max(b.x_min)) as f64;
    let iy = a.y_max.min(b.y_max).saturating_sub(a.y_min.max(b.y_min)) as f64;
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// 1 at or above `iou_hi`, `v` itself on `[iou_lo, iou_hi)`, 0 below.
pub fn quantized_iou_reward(v: f64, cfg: &RewardConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::contract(format!("IoU value {v} outside [0, 1]")));
    }
    Ok(if v >= cfg.iou_hi {
        1.0
    } else if v >= cfg.iou_lo {
        v
    } else {
        0.0
    })
}

/// Scores a completion for a task with the given ground truth.
pub fn score_truth(kind: TaskKind, truth: &Truth, text: &str, cfg: &RewardConfig) -> RewardBreakdown {
    let format = verify_format(text) as f64;
    let parsed = parse_answer(text);
    let mut iou_value = None;
    let accuracy = match (kind, truth) {
        (TaskKind::Vg, Truth::BBox(gt)) => match parsed.bbox {
            Some(pred) => {
                let v = iou(&pred, gt);
                iou_value = Some(v);
                quantized_iou_reward(v, cfg).unwrap_or(0.0)
            }
            None => 0.0,
        },
        (_, Truth::Label(t) | Truth::Answer(t)) => match &parsed.answer_text {
            // The quantizer is the identity on {0, 1}; applied for uniformity.
            Some(a) => quantized_iou_reward(exact_match_reward(a, t, cfg), cfg).unwrap_or(0.0),
            None => 0.0,
        },
        _ => 0.0,
    };
    RewardBreakdown {
        format,
        accuracy,
        total: cfg.format_weight * format + cfg.accuracy_weight * accuracy,
        iou: iou_value,
        parsed: parsed.answer_text.is_some(),
    }
}

pub fn score(sample: &Sample, completion_text: &str, cfg: &RewardConfig) -> RewardBreakdown {
    score_truth(sample.kind, &sample.truth, completion_text, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> RewardConfig {
        RewardConfig::default()
    }

    /// Structural oracle: lex the text into tag tokens and non-tag runs and
    /// accept exactly `ws? R text /R ws? A text /A ws?`.
    fn format_oracle(text: &str) -> u8 {
        let mut seq: Vec<Result<usize, &str>> = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let next = TAGS
                .iter()
                .enumerate()
                .filter_map(|(i, t)| rest.find(t).map(|p| (p, i)))
                .min();
            match next {
                Some((0, i)) => {
                    seq.push(Ok(i));
                    rest = &rest[TAGS[i].len()..];
                }
                Some((p, _)) => {
                    seq.push(Err(&rest[..p]));
                    rest = &rest[p..];
                }
                None => {
                    seq.push(Err(rest));
                    rest = "";
                }
            }
        }
        let tags: Vec<usize> = seq.iter().filter_map(|t| t.ok()).collect();
        if tags != [0, 1, 2, 3] {
            return 0;
        }
        // whitespace-only outside blocks
        let mut depth_tags = 0;
        for t in &seq {
            match t {
                Ok(_) => depth_tags += 1,
                Err(s) => {
                    let outside = depth_tags == 0 || depth_tags == 2 || depth_tags == 4;
                    if outside && !s.trim().is_empty() {
                        return 0;
                    }
                }
            }
        }
        1
    }

    #[test]
    fn format_examples() {
        assert_eq!(
            verify_format("<reasoning>two fields</reasoning><answer>farmland</answer>"),
            1
        );
        assert_eq!(verify_format("farmland"), 0);
        assert_eq!(verify_format("<answer>yes</answer><reasoning>x</reasoning>"), 0);
        assert_eq!(
            format_oracle("<answer>yes</answer><reasoning>x</reasoning>"),
            0
        );
    }

    #[test]
    fn format_matches_oracle_on_enumerated_tag_sequences() {
        let pieces = [
            REASONING_OPEN,
            REASONING_CLOSE,
            ANSWER_OPEN,
            ANSWER_CLOSE,
            "x",
            " ",
        ];
        // every sequence of up to 6 pieces
        let mut stack: Vec<Vec<usize>> = vec![vec![]];
        while let Some(seq) = stack.pop() {
            let text: String = seq.iter().map(|&i| pieces[i]).collect();
            assert_eq!(verify_format(&text), format_oracle(&text), "{text:?}");
            if seq.len() < 6 {
                for i in 0..pieces.len() {
                    let mut s = seq.clone();
                    s.push(i);
                    stack.push(s);
                }
            }
        }
    }

    #[test]
    fn parse_examples() {
        let p = parse_answer("<reasoning>r</reasoning><answer> Yes </answer>");
        assert_eq!(p.answer_text.as_deref(), Some("Yes"));
        assert_eq!(p.reasoning_text.as_deref(), Some("r"));

        let p = parse_answer("<answer>[[100, 200, 300, 400]]</answer>");
        assert_eq!(p.bbox, Some(BBox::new(100, 200, 300, 400).unwrap()));

        let p = parse_answer("<answer>[[100, 200, 300]]</answer>");
        assert_eq!(p.bbox, None);
        assert_eq!(p.answer_text.as_deref(), Some("[[100, 200, 300]]"));

        let p = parse_answer("<answer> [[ 100 200 300 400 ]] </answer>");
        assert_eq!(p.bbox, Some(BBox::new(100, 200, 300, 400).unwrap()));
    }

    #[test]
    fn out_of_range_coordinates_are_clamped() {
        let p = parse_answer("<answer>[[-20, 5, 1200, 1000]]</answer>");
        assert_eq!(p.bbox, Some(BBox::new(0, 5, 1000, 1000).unwrap()));
        let inverted = parse_answer("<answer>[[500, 5, 100, 10]]</answer>");
        assert_eq!(inverted.bbox, None);
    }

    #[test]
    fn exact_match_examples() {
        assert_eq!(exact_match_reward("farmland", "farmland", &cfg()), 1.0);
        assert_eq!(exact_match_reward("  YES ", "yes", &cfg()), 1.0);
        assert_eq!(exact_match_reward("rural", "urban", &cfg()), 0.0);
        let strict = RewardConfig {
            case_fold: false,
            trim: false,
            ..cfg()
        };
        assert_eq!(exact_match_reward("  YES ", "yes", &strict), 0.0);
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0, 0, 200, 200).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        let far = BBox::new(500, 500, 600, 600).unwrap();
        assert_eq!(iou(&BBox::new(0, 0, 100, 100).unwrap(), &far), 0.0);
        let b = BBox::new(100, 0, 300, 200).unwrap();
        // intersection 100*200, union 2*(200*200) - 100*200
        assert!((iou(&a, &b) - 20000.0 / 60000.0).abs() < 1e-15);
        let point = BBox::new(5, 5, 5, 5).unwrap();
        assert_eq!(iou(&point, &point), 0.0);
    }

    #[test]
    fn quantizer_examples() {
        let c = cfg();
        assert_eq!(quantized_iou_reward(0.75, &c).unwrap(), 1.0);
        assert_eq!(quantized_iou_reward(0.5, &c).unwrap(), 0.5);
        assert_eq!(quantized_iou_reward(0.39, &c).unwrap(), 0.0);
        assert_eq!(quantized_iou_reward(0.4, &c).unwrap(), 0.4);
        assert_eq!(quantized_iou_reward(0.7, &c).unwrap(), 1.0);
        assert!(quantized_iou_reward(1.01, &c).is_err());
        assert!(quantized_iou_reward(f64::NAN, &c).is_err());
    }

    #[test]
    fn config_validation_and_toml() {
        let c = cfg();
        assert_eq!(RewardConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(RewardConfig::from_toml("iou_lo = 0.8\niou_hi = 0.7").is_err());
        assert!(RewardConfig::from_toml("format_weight = -1.0").is_err());
        assert!(RewardConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn score_examples() {
        let c = cfg();
        let gt = BBox::new(100, 100, 300, 300).unwrap();
        let r = score_truth(
            TaskKind::Vg,
            &Truth::BBox(gt),
            "<reasoning>look</reasoning><answer>[[100, 100, 300, 300]]</answer>",
            &c,
        );
        assert_eq!((r.format, r.accuracy, r.total), (1.0, 1.0, 2.0));
        let r = score_truth(TaskKind::Cls, &Truth::Label("harbor".into()), "harbor", &c);
        assert_eq!(r.format, 0.0);
        // no answer block, so nothing to match
        assert_eq!(r.accuracy, 0.0);
        let r = score_truth(
            TaskKind::Cls,
            &Truth::Label("harbor".into()),
            "<answer>harbor</answer>",
            &c,
        );
        assert_eq!((r.format, r.accuracy, r.total), (0.0, 1.0, 1.0));
        let r = score_truth(TaskKind::Vqa, &Truth::Answer("yes".into()), "", &c);
        assert_eq!((r.format, r.accuracy, r.total), (0.0, 0.0, 0.0));
    }

    proptest! {
        #[test]
        fn quantizer_is_monotone_and_idempotent(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let c = cfg();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (qlo, qhi) = (quantized_iou_reward(lo, &c).unwrap(), quantized_iou_reward(hi, &c).unwrap());
            prop_assert!(qlo <= qhi);
            prop_assert_eq!(quantized_iou_reward(qlo, &c).unwrap(), qlo);
        }

        #[test]
        fn iou_is_symmetric(a in proptest::array::uniform4(0u32..=1000), b in proptest::array::uniform4(0u32..=1000)) {
            let mk = |c: [u32; 4]| BBox::new(c[0].min(c[2]), c[1].min(c[3]), c[0].max(c[2]), c[1].max(c[3])).unwrap();
            let (a, b) = (mk(a), mk(b));
            prop_assert_eq!(iou(&a, &b), iou(&b, &a));
            let v = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&v));
            if a.area() > 0.0 {
                prop_assert_eq!(iou(&a, &a), 1.0);
            }
        }

        #[test]
        fn valid_format_implies_answer(r in "[a-z ]{0,8}", a in "[a-z ]{0,8}") {
            let text = format!(" <reasoning>{r}</reasoning>\n<answer>{a}</answer> ");
            prop_assert_eq!(verify_format(&text), 1);
            prop_assert!(parse_answer(&text).answer_text.is_some());
        }

        #[test]
        fn score_never_panics(s in "\\PC*") {
            let c = cfg();
            let _ = score_truth(TaskKind::Cls, &Truth::Label("harbor".into()), &s, &c);
            let gt = BBox::new(0, 0, 10, 10).unwrap();
            let _ = score_truth(TaskKind::Vg, &Truth::BBox(gt), &s, &c);
            prop_assert!(verify_format(&s) <= 1);
        }
    }
}
