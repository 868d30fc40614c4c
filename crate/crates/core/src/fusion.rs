//! Prompt assembly: renders an [`AnnotationBundle`] into the two fixed
//! prompt templates (the meta-dataset prompt and the shorter caption
//! engine prompt) plus the inverse section extractor.
//!
//! The template text is frozen; the three variable sections (world
//! knowledge, detection boxes, OCR lines) are spliced in byte-exactly,
//! so identical bundles always produce identical prompt bytes. Golden
//! copies of both rendered templates live under tests/golden.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experts::{AnnotationBundle, DetectionBox};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("bundle for {image_id} is invalid: {detail}")]
    BadBundle { image_id: String, detail: String },
    #[error("prompt is structurally invalid: {0}")]
    BadStructure(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    MetaGpt4v,
    Engine,
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptKind::MetaGpt4v => "meta_gpt4v",
            PromptKind::Engine => "engine",
        })
    }
}

impl std::str::FromStr for PromptKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "meta_gpt4v" => Ok(PromptKind::MetaGpt4v),
            "engine" => Ok(PromptKind::Engine),
            other => Err(format!("unknown prompt kind {other:?} (expected meta_gpt4v or engine)")),
        }
    }
}

/// An assembled prompt ready for the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionPrompt {
    pub kind: PromptKind,
    pub text: String,
    pub image_ref: String,
}

/// prompts.jsonl line. Carries the image uri so the caption stage can
/// attach the image without re-reading earlier artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptLine {
    pub image_id: String,
    pub kind: PromptKind,
    pub prompt: String,
    pub uri: String,
}

const META_HEADER: &str = r#"You are the most powerful large multimodal model which is responsible for generating image description to help the blind people to understand the world. Since they cannot see, so you should describe the image as detailed as possible.

The description of image must abide by the following policies:
    1. The generated caption must be comprehensive and detailed plain text, covering as many aspects / content / areas / contents of the image as possible.
    2. You may describe the foreground / background / salient objects.
    3. When describing objects, please endeavor to include as much of the following information:
        3.1. textures / attributes / locations / presence / status / characteristics / numbers of objects
        3.2. relative positions between objects
    4. The composition / color / layout / texture of image should also be considered.
    5. You may describe the elements one by one with details.
    6. If there are common sense or world knowledge, for example, species, celebrities, scenic spots and historical sites, you must state them explicitly instead of using phrases like "a person", "a place", etc.
    7. Other objective and subjective details that can help understand and reproduce the image.
    8. Text contents must be appeared in the caption if there exists. Keep the original language of text content.
    9. The description should be purely factual, with no subjective speculation.
    10. If there are some statement are inferred, just state the conclusion. DO NOT add the evidence or thought chain.
    11. DO NOT add description associated with aspects like mood or atmosphere.
    12. DO NOT including any reasoning description like "probably because" or "appears to be"
    13. DO NOT add any unnecessary speculation about the things that are not part of the image such as "the image is inspiring to viewers" or "seeing this makes you feel joy".
    14. DO NOT add things such as "creates a unique and entertaining visual", as these descriptions are interpretations and not a part of the image itself.
    15. DO NOT analyze the text content in the image, and only tell the content themselves.
    16. DO NOT add any further analysis to the image.
    17. DO NOT use introductory phrases like "The image showcases", "The photo captures", "The image shows" and more.
    18. The caption should NO longer than 192 words.
Besides image, you are also provided with some external information to help you understanding the image including a short caption, detection results, ocr results, attributes, etc. The short caption might contains rich world knowledge which should be considered in the final caption but also may not have any relevance to the image. Besides, there might be some errors in the external information including detail missing or wrong details. If there are mistakes, you may ignore them. Note that external information like bounding box are just a reference information, some details like bounding box should not be presented in the final caption since it's not a common information in caption. If the external information is not used, DO NOT specify the reason of not using them.
"#;

const ENGINE_HEADER: &str = r#"You are a powerful multimodal model and you should generate detailed descriptions of this image, using additional external information such as [Caption], [Detection Box], and [OCR]. [Caption] might contain rich world knowledge which should be considered in the final description but also may not have any relevance to the image. Although this information may contain errors or be incomplete, you should disregard any inaccuracies. External details like detection boxes are just for reference and should not be included in the final description. If external information is not used, do not specify why.
"#;

const EXTERNAL_MARKER: &str = "[External Information]:";
const WK_PREFIX: &str = "    [World Knowledge]: ";
const BOX_HEADER: &str = "    [Detection Box]:";
const OCR_HEADER: &str = "    [OCR]:";
const ITEM_INDENT: &str = "        ";
const SENTINEL: &str = "[IMAGE]:";

/// Renders boxes as `<label>: [x1, y1, x2, y2]` lines. Labels that
/// occur more than once get 1-based ordinal suffixes in output order.
pub fn format_boxes(boxes: &[DetectionBox]) -> Vec<String> {
    let mut total: HashMap<&str, usize> = HashMap::new();
    for b in boxes {
        *total.entry(b.label.as_str()).or_insert(0) += 1;
    }
    let mut seen: HashMap<&str, usize> = HashMap::new();
    boxes
        .iter()
        .map(|b| {
            let [x1, y1, x2, y2] = b.bbox;
            if total[b.label.as_str()] > 1 {
                let n = seen.entry(b.label.as_str()).or_insert(0);
                *n += 1;
                format!("{} {}: [{x1}, {y1}, {x2}, {y2}]", b.label, n)
            } else {
                format!("{}: [{x1}, {y1}, {x2}, {y2}]", b.label)
            }
        })
        .collect()
}

fn check_bundle(bundle: &AnnotationBundle) -> Result<(), FusionError> {
    let bad = |detail: String| FusionError::BadBundle {
        image_id: bundle.image_id.clone(),
        detail,
    };
    for b in &bundle.boxes {
        if b.label.is_empty() || b.label.contains('\n') {
            return Err(bad(format!("box label {:?} breaks line structure", b.label)));
        }
        if b.bbox[2] <= b.bbox[0] || b.bbox[3] <= b.bbox[1] {
            return Err(bad(format!("degenerate box {:?}", b.bbox)));
        }
    }
    for l in &bundle.ocr {
        if l.text.trim().is_empty() || l.text.contains('\n') {
            return Err(bad(format!("ocr text {:?} breaks line structure", l.text)));
        }
    }
    Ok(())
}

fn external_block(bundle: &AnnotationBundle) -> String {
    let mut s = String::new();
    s.push_str(EXTERNAL_MARKER);
    s.push('\n');
    s.push_str(WK_PREFIX);
    s.push_str(&bundle.world_knowledge);
    s.push('\n');
    s.push_str(BOX_HEADER);
    s.push('\n');
    for line in format_boxes(&bundle.boxes) {
        s.push_str(ITEM_INDENT);
        s.push_str(&line);
        s.push('\n');
    }
    s.push_str(OCR_HEADER);
    s.push('\n');
    for l in &bundle.ocr {
        s.push_str(ITEM_INDENT);
        s.push_str(&l.text);
        s.push('\n');
    }
    s
}

/// Assembles the long-form meta prompt (policy list plus external
/// information, blank line before the image sentinel).
pub fn assemble_meta_prompt(bundle: &AnnotationBundle) -> Result<FusionPrompt, FusionError> {
    check_bundle(bundle)?;
    let mut text = String::with_capacity(META_HEADER.len() + 512);
    text.push_str(META_HEADER);
    text.push_str(&external_block(bundle));
    text.push('\n');
    text.push_str(SENTINEL);
    Ok(FusionPrompt {
        kind: PromptKind::MetaGpt4v,
        text,
        image_ref: bundle.image_id.clone(),
    })
}

/// Assembles the short caption-engine prompt; the sentinel follows the
/// OCR section directly.
pub fn assemble_engine_prompt(bundle: &AnnotationBundle) -> Result<FusionPrompt, FusionError> {
    check_bundle(bundle)?;
    let mut text = String::with_capacity(ENGINE_HEADER.len() + 512);
    text.push_str(ENGINE_HEADER);
    text.push_str(&external_block(bundle));
    text.push_str(SENTINEL);
    Ok(FusionPrompt {
        kind: PromptKind::Engine,
        text,
        image_ref: bundle.image_id.clone(),
    })
}

pub fn assemble(bundle: &AnnotationBundle, kind: PromptKind) -> Result<FusionPrompt, FusionError> {
    match kind {
        PromptKind::MetaGpt4v => assemble_meta_prompt(bundle),
        PromptKind::Engine => assemble_engine_prompt(bundle),
    }
}

/// Variable content recovered from an assembled prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedSections {
    pub world_knowledge: String,
    /// Box lines as rendered, indent stripped.
    pub box_lines: Vec<String>,
    /// OCR texts, indent stripped.
    pub ocr_lines: Vec<String>,
}

/// Inverse parser: recovers the three filled sections from a prompt
/// assembled by this module. Relies on the section markers, so content
/// that embeds a marker line verbatim is ambiguous by construction.
pub fn extract_sections(text: &str) -> Result<ExtractedSections, FusionError> {
    let bad = |d: &str| FusionError::BadStructure(d.to_string());
    if text.matches(EXTERNAL_MARKER).count() != 1 {
        return Err(bad("expected exactly one [External Information]: marker"));
    }
    if !text.ends_with(SENTINEL) {
        return Err(bad("prompt does not end with the [IMAGE]: sentinel"));
    }
    let start = text.find(EXTERNAL_MARKER).unwrap();
    let after = &text[start + EXTERNAL_MARKER.len()..];
    let after = after
        .strip_prefix('\n')
        .ok_or_else(|| bad("marker not followed by newline"))?;
    let after = after
        .strip_prefix(WK_PREFIX)
        .ok_or_else(|| bad("missing [World Knowledge] prefix"))?;

    let box_sep = format!("\n{BOX_HEADER}\n");
    let wk_end = after
        .find(&box_sep)
        .ok_or_else(|| bad("missing [Detection Box] header"))?;
    let world_knowledge = after[..wk_end].to_string();
    let rest = &after[wk_end + box_sep.len()..];

    let mut box_lines = Vec::new();
    let mut ocr_lines = Vec::new();
    let mut in_ocr = false;
    let mut tail_state = 0u8;
    for line in rest.split('\n') {
        if tail_state == 2 {
            return Err(bad("content after the [IMAGE]: sentinel"));
        }
        if line == SENTINEL {
            tail_state = 2;
            continue;
        }
        if line.is_empty() {
            if !in_ocr || tail_state != 0 {
                return Err(bad("unexpected blank line"));
            }
            tail_state = 1;
            continue;
        }
        if tail_state == 1 {
            return Err(bad("content after the blank separator line"));
        }
        if line == OCR_HEADER {
            if in_ocr {
                return Err(bad("duplicate [OCR] header"));
            }
            in_ocr = true;
            continue;
        }
        let item = line
            .strip_prefix(ITEM_INDENT)
            .ok_or_else(|| bad("section item lacks item indentation"))?;
        if in_ocr {
            ocr_lines.push(item.to_string());
        } else {
            box_lines.push(item.to_string());
        }
    }
    if !in_ocr {
        return Err(bad("missing [OCR] header"));
    }
    if tail_state != 2 {
        return Err(bad("missing [IMAGE]: sentinel line"));
    }
    Ok(ExtractedSections {
        world_knowledge,
        box_lines,
        ocr_lines,
    })
}

/// Parses one rendered box line back into (display label, coordinates).
pub fn parse_box_line(line: &str) -> Option<(String, [i64; 4])> {
    let (label, coords) = line.rsplit_once(": [")?;
    let coords = coords.strip_suffix(']')?;
    let parts: Vec<&str> = coords.split(", ").collect();
    if parts.len() != 4 || label.is_empty() {
        return None;
    }
    let mut bbox = [0i64; 4];
    for (slot, part) in bbox.iter_mut().zip(&parts) {
        *slot = part.parse().ok()?;
    }
    Some((label.to_string(), bbox))
}
