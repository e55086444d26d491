use image::imageops::FilterType;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::{ChatRequest, VlmClient};

pub const TWO_AFC_SYSTEM_PROMPT: &str =
    "You will receive an image to evaluate along with an evaluation question. Output A or B.";

pub const TWO_AFC_QUESTION: &str = "The source image set contains shared foreground object(s). In which image set, A or B, are these objects edited more consistently across images?";

const TILE: u32 = 192;
const GAP: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    A,
    B,
    Abstain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoAfcRecord {
    /// Winner in terms of the caller's `gen_a` / `gen_b`.
    pub verdict: Verdict,
    /// Whether `gen_b` was shown as row A.
    pub swapped: bool,
    /// Both generations are byte-identical.
    pub degenerate: bool,
    pub responses: Vec<String>,
}

fn row(images: &[RgbImage]) -> Vec<RgbImage> {
    images
        .iter()
        .map(|im| image::imageops::resize(im, TILE, TILE, FilterType::Triangle))
        .collect()
}

/// Source set on top, then the two presented generations, one row each.
pub fn compose_comparison(source: &[RgbImage], first: &[RgbImage], second: &[RgbImage]) -> RgbImage {
    let n = source.len().max(first.len()).max(second.len()) as u32;
    let width = n * TILE + (n + 1) * GAP;
    let height = 3 * TILE + 4 * GAP;
    let mut canvas = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    for (r, set) in [source, first, second].into_iter().enumerate() {
        for (c, tile) in row(set).iter().enumerate() {
            let x = GAP + c as u32 * (TILE + GAP);
            let y = GAP + r as u32 * (TILE + GAP);
            image::imageops::overlay(&mut canvas, tile, x as i64, y as i64);
        }
    }
    canvas
}

fn parse_verdict(reply: &str) -> Option<Verdict> {
    let cleaned: String = reply.chars().filter(|c| c.is_alphanumeric()).collect();
    match cleaned.to_ascii_uppercase().as_str() {
        "A" => Some(Verdict::A),
        "B" => Some(Verdict::B),
        _ => None,
    }
}

/// Ask a VLM judge which generation edits the shared content more
/// consistently. Row order is drawn from `seed`; the verdict is mapped
/// back to the caller's order. An unparseable reply is retried once and
/// then recorded as an abstention.
pub fn vlm_2afc(
    source: &[RgbImage],
    gen_a: &[RgbImage],
    gen_b: &[RgbImage],
    p_shared: &str,
    judge: &dyn VlmClient,
    seed: u64,
) -> Result<TwoAfcRecord> {
    if gen_a.len() != source.len() || gen_b.len() != source.len() || source.is_empty() {
        return Err(Error::arg(format!(
            "sets differ in size: source {}, A {}, B {}",
            source.len(),
            gen_a.len(),
            gen_b.len()
        )));
    }
    let swapped = ChaCha8Rng::seed_from_u64(seed).random_bool(0.5);
    let (first, second) = if swapped { (gen_b, gen_a) } else { (gen_a, gen_b) };
    let request = ChatRequest {
        system: TWO_AFC_SYSTEM_PROMPT.to_string(),
        text: format!(
            "Top row: source image set. Middle row: image set A. Bottom row: image set B.\nShared content: {p_shared}\n{TWO_AFC_QUESTION}"
        ),
        images: vec![compose_comparison(source, first, second)],
    };
    let degenerate = gen_a == gen_b;
    let mut responses = Vec::new();
    let mut presented = None;
    for _ in 0..2 {
        let reply = judge.complete(&request)?;
        presented = parse_verdict(&reply);
        responses.push(reply);
        if presented.is_some() {
            break;
        }
    }
    let verdict = match (presented, swapped) {
        (Some(Verdict::A), false) | (Some(Verdict::B), true) => Verdict::A,
        (Some(Verdict::B), false) | (Some(Verdict::A), true) => Verdict::B,
        _ => Verdict::Abstain,
    };
    Ok(TwoAfcRecord { verdict, swapped, degenerate, responses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    /// Prefers whichever presented row is redder.
    struct RedJudge;
    impl VlmClient for RedJudge {
        fn complete(&self, req: &ChatRequest) -> Result<String> {
            let img = &req.images[0];
            let y_mid = GAP + TILE + GAP + TILE / 2;
            let y_bot = GAP + 2 * (TILE + GAP) + TILE / 2;
            let red = |y: u32| img.get_pixel(GAP + TILE / 2, y)[0];
            Ok(if red(y_mid) >= red(y_bot) { "A".into() } else { "B".into() })
        }
    }

    struct Scripted(Mutex<Vec<&'static str>>);
    impl VlmClient for Scripted {
        fn complete(&self, _: &ChatRequest) -> Result<String> {
            Ok(self.0.lock().unwrap().remove(0).to_string())
        }
    }

    fn set(c: u8) -> Vec<RgbImage> {
        vec![RgbImage::from_pixel(8, 8, Rgb([c, 0, 0])); 2]
    }

    #[test]
    fn seed_swaps_presentation_not_winner() {
        let mut seen = [false, false];
        for seed in 0..16 {
            let rec = vlm_2afc(&set(0), &set(200), &set(10), "a ball", &RedJudge, seed).unwrap();
            assert_eq!(rec.verdict, Verdict::A);
            seen[rec.swapped as usize] = true;
        }
        assert!(seen[0] && seen[1]);
    }

    #[test]
    fn identical_generations_are_flagged() {
        let rec = vlm_2afc(&set(0), &set(5), &set(5), "x", &RedJudge, 1).unwrap();
        assert!(rec.degenerate);
    }

    #[test]
    fn retry_once_then_abstain() {
        let j = Scripted(Mutex::new(vec!["maybe", "B."]));
        let rec = vlm_2afc(&set(0), &set(1), &set(2), "x", &j, 3).unwrap();
        assert_eq!(rec.responses.len(), 2);
        assert_ne!(rec.verdict, Verdict::Abstain);
        let j = Scripted(Mutex::new(vec!["both", "neither"]));
        let rec = vlm_2afc(&set(0), &set(1), &set(2), "x", &j, 3).unwrap();
        assert_eq!(rec.verdict, Verdict::Abstain);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        assert!(vlm_2afc(&set(0), &set(1)[..1], &set(2), "x", &RedJudge, 0).is_err());
    }
}
