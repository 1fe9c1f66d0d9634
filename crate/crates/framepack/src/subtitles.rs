//! SRT and WebVTT subtitle parsing, frame alignment, and budget enforcement.
//!
//! Cues come out of either parser in the same normalized shape: sorted by
//! start time, reindexed from zero, text flattened to a single line with
//! angle-bracket tags removed. Alignment assigns each sampled frame the cues
//! active at its timestamp; enforcement trims the result to a token budget.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::Vocab;

/// One timed caption. `text` is always non-empty and single-line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtitleCue {
    pub index: usize,
    pub start_ms: u64,
    pub end_ms: u64,
    pub text: String,
}

/// Per-sampled-frame subtitle strings. Entries may be empty; the length
/// always matches the frame list it was built for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSubtitles {
    pub per_frame: Vec<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SubtitleError {
    #[error("line {line}: malformed timecode `{found}`")]
    MalformedTimecode { line: usize, found: String },
    #[error("line {line}: expected a timecode line")]
    MissingTimecode { line: usize },
    #[error("line {line}: cue ends at {end_ms}ms, not after its start {start_ms}ms")]
    EndNotAfterStart { line: usize, start_ms: u64, end_ms: u64 },
    #[error("missing WEBVTT header")]
    MissingHeader,
}

/// Parse SubRip text. Blocks are blank-line separated: an optional numeric
/// counter, a `HH:MM:SS,mmm --> HH:MM:SS,mmm` timecode line, then text lines.
///
/// Tolerates CRLF line endings, a UTF-8 BOM, `.` as the millisecond
/// separator, and missing counters. File counters are discarded; cues are
/// sorted by start time and reindexed from zero. Multi-line text is joined
/// with single spaces. Blocks whose text is empty after normalization are
/// dropped. Empty input is an empty cue list, not an error.
pub fn parse_srt(content: &str) -> Result<Vec<SubtitleCue>, SubtitleError> {
    let mut cues = Vec::new();
    for block in blocks_of(content) {
        let mut at = 0;
        if block.len() > 1 && is_counter(block[0].1) {
            at = 1;
        } else if block.len() == 1 && is_counter(block[0].1) {
            return Err(SubtitleError::MissingTimecode { line: block[0].0 });
        }
        let (line_no, line) = block[at];
        if !line.contains("-->") {
            return Err(SubtitleError::MissingTimecode { line: line_no });
        }
        let (start_ms, end_ms) = parse_timecode_pair(line, &[',', '.'], false)
            .ok_or_else(|| SubtitleError::MalformedTimecode {
                line: line_no,
                found: line.trim().to_string(),
            })?;
        push_cue(&mut cues, start_ms, end_ms, &block[at + 1..], line_no)?;
    }
    finish(&mut cues);
    Ok(cues)
}

/// Parse WebVTT text. Requires the `WEBVTT` header as the first non-blank
/// line; timecodes use `.` milliseconds and may omit the hour field
/// (`MM:SS.mmm`). NOTE blocks, cue identifiers, cue settings after the end
/// timecode, and other metadata blocks are ignored.
pub fn parse_vtt(content: &str) -> Result<Vec<SubtitleCue>, SubtitleError> {
    let body = content.strip_prefix('\u{feff}').unwrap_or(content);
    let header = body
        .lines()
        .find(|l| !l.trim().is_empty())
        .ok_or(SubtitleError::MissingHeader)?;
    let header = header.trim();
    if header != "WEBVTT" && !header.starts_with("WEBVTT ") && !header.starts_with("WEBVTT\t") {
        return Err(SubtitleError::MissingHeader);
    }

    let mut cues = Vec::new();
    for block in blocks_of(content) {
        let Some(at) = block.iter().position(|(_, l)| l.contains("-->")) else {
            // Header, NOTE, STYLE, or other metadata block.
            continue;
        };
        let (line_no, line) = block[at];
        let (start_ms, end_ms) = parse_timecode_pair(line, &['.'], true).ok_or_else(|| {
            SubtitleError::MalformedTimecode {
                line: line_no,
                found: line.trim().to_string(),
            }
        })?;
        push_cue(&mut cues, start_ms, end_ms, &block[at + 1..], line_no)?;
    }
    finish(&mut cues);
    Ok(cues)
}

/// Serialize cues back to SRT (1-based counters, `,` milliseconds).
pub fn to_srt(cues: &[SubtitleCue]) -> String {
    let mut out = String::new();
    for (i, cue) in cues.iter().enumerate() {
        out.push_str(&format!(
            "{}\n{} --> {}\n{}\n\n",
            i + 1,
            format_srt_timecode(cue.start_ms),
            format_srt_timecode(cue.end_ms),
            cue.text
        ));
    }
    out
}

/// Give each frame the single-space join, in cue order, of every cue whose
/// half-open interval `[start_ms, end_ms)` contains the frame's timestamp.
/// Frames with no active cue get an empty string.
pub fn align_cues_to_frames(cues: &[SubtitleCue], frame_timestamps_ms: &[u64]) -> FrameSubtitles {
    let per_frame = frame_timestamps_ms
        .iter()
        .map(|&t| {
            let mut text = String::new();
            for cue in cues.iter().filter(|c| c.start_ms <= t && t < c.end_ms) {
                if !text.is_empty() {
                    text.push(' ');
                }
                text.push_str(&cue.text);
            }
            text
        })
        .collect();
    FrameSubtitles { per_frame }
}

/// Trim per-frame subtitles to a total token budget, favoring earlier frames.
///
/// Walks frames in order, keeping each string while the running token total
/// stays within `budget`. The first frame that would overflow keeps the
/// longest token prefix that still fits; every later frame becomes empty.
/// The total token count of the result never exceeds `budget`.
pub fn enforce_subtitle_budget(
    frame_subs: &FrameSubtitles,
    vocab: &Vocab,
    budget: usize,
) -> FrameSubtitles {
    let mut per_frame = Vec::with_capacity(frame_subs.per_frame.len());
    let mut used = 0usize;
    let mut exhausted = false;
    for text in &frame_subs.per_frame {
        if exhausted {
            per_frame.push(String::new());
            continue;
        }
        let count = vocab.count_tokens(text);
        if used + count <= budget {
            used += count;
            per_frame.push(text.clone());
        } else {
            let truncated = vocab.truncate_to_tokens(text, budget - used);
            used += vocab.count_tokens(&truncated);
            per_frame.push(truncated);
            exhausted = true;
        }
    }
    FrameSubtitles { per_frame }
}

/// Blank-line-separated groups of (1-based line number, line content).
/// Strips a leading BOM so the first counter or header parses cleanly.
fn blocks_of(content: &str) -> Vec<Vec<(usize, &str)>> {
    let body = content.strip_prefix('\u{feff}').unwrap_or(content);
    let mut blocks = Vec::new();
    let mut current: Vec<(usize, &str)> = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            if !current.is_empty() {
                blocks.push(std::mem::take(&mut current));
            }
        } else {
            current.push((i + 1, line));
        }
    }
    if !current.is_empty() {
        blocks.push(current);
    }
    blocks
}

fn is_counter(line: &str) -> bool {
    let t = line.trim();
    !t.is_empty() && t.bytes().all(|b| b.is_ascii_digit())
}

fn parse_timecode_pair(line: &str, millis_seps: &[char], allow_short: bool) -> Option<(u64, u64)> {
    let (left, right) = line.split_once("-->")?;
    let start = parse_clock(left.trim(), millis_seps, allow_short)?;
    // Anything after the end timecode (VTT cue settings) is ignored.
    let end_token = right.trim().split_whitespace().next()?;
    let end = parse_clock(end_token, millis_seps, allow_short)?;
    Some((start, end))
}

/// `HH:MM:SS` + separator + `mmm`, or `MM:SS` when `allow_short`. Minutes and
/// seconds are two digits below 60; milliseconds exactly three digits.
fn parse_clock(text: &str, millis_seps: &[char], allow_short: bool) -> Option<u64> {
    let sep = text.rfind(|c| millis_seps.contains(&c))?;
    let (clock, millis) = (&text[..sep], &text[sep + 1..]);
    if millis.len() != 3 || !millis.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    let millis: u64 = millis.parse().ok()?;
    let parts: Vec<&str> = clock.split(':').collect();
    let (h_str, m_str, s_str) = match parts.as_slice() {
        [h, m, s] => (*h, *m, *s),
        [m, s] if allow_short => ("0", *m, *s),
        _ => return None,
    };
    let digits = |s: &str, min: usize| s.len() >= min && s.bytes().all(|b| b.is_ascii_digit());
    if !digits(h_str, 1) || !digits(m_str, 2) || m_str.len() != 2 || !digits(s_str, 2) || s_str.len() != 2 {
        return None;
    }
    let (h, m, s): (u64, u64, u64) = (h_str.parse().ok()?, m_str.parse().ok()?, s_str.parse().ok()?);
    if m >= 60 || s >= 60 {
        return None;
    }
    Some(((h * 60 + m) * 60 + s) * 1000 + millis)
}

fn format_srt_timecode(ms: u64) -> String {
    format!(
        "{:02}:{:02}:{:02},{:03}",
        ms / 3_600_000,
        (ms / 60_000) % 60,
        (ms / 1000) % 60,
        ms % 1000
    )
}

fn push_cue(
    cues: &mut Vec<SubtitleCue>,
    start_ms: u64,
    end_ms: u64,
    text_lines: &[(usize, &str)],
    timecode_line: usize,
) -> Result<(), SubtitleError> {
    if end_ms <= start_ms {
        return Err(SubtitleError::EndNotAfterStart {
            line: timecode_line,
            start_ms,
            end_ms,
        });
    }
    let text = normalize_text(text_lines);
    if !text.is_empty() {
        cues.push(SubtitleCue {
            index: 0,
            start_ms,
            end_ms,
            text,
        });
    }
    Ok(())
}

/// Strip tags, trim each line, drop lines left empty, join with one space.
fn normalize_text(lines: &[(usize, &str)]) -> String {
    let mut parts = Vec::new();
    for (_, line) in lines {
        let cleaned = strip_tags(line);
        let trimmed = cleaned.trim();
        if !trimmed.is_empty() {
            parts.push(trimmed.to_string());
        }
    }
    parts.join(" ")
}

/// Remove well-formed `<...>` spans; a `<` with no closing `>` stays literal.
fn strip_tags(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(open) = rest.find('<') {
        match rest[open..].find('>') {
            Some(close) => {
                out.push_str(&rest[..open]);
                rest = &rest[open + close + 1..];
            }
            None => break,
        }
    }
    out.push_str(rest);
    out
}

fn finish(cues: &mut [SubtitleCue]) {
    cues.sort_by_key(|c| c.start_ms);
    for (i, cue) in cues.iter_mut().enumerate() {
        cue.index = i;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn srt_single_block() {
        let cues = parse_srt("1\n00:00:01,000 --> 00:00:03,500\nHello world\n").unwrap();
        assert_eq!(
            cues,
            vec![SubtitleCue {
                index: 0,
                start_ms: 1000,
                end_ms: 3500,
                text: "Hello world".into()
            }]
        );
    }

    #[test]
    fn srt_multiline_text_joined() {
        let cues = parse_srt("1\n00:00:01,000 --> 00:00:02,000\nLine A\nLine B\n").unwrap();
        assert_eq!(cues[0].text, "Line A Line B");
    }

    #[test]
    fn srt_end_before_start_rejected() {
        let err = parse_srt("1\n00:00:05,000 --> 00:00:04,000\nBad\n").unwrap_err();
        assert_eq!(
            err,
            SubtitleError::EndNotAfterStart {
                line: 2,
                start_ms: 5000,
                end_ms: 4000
            }
        );
    }

    #[test]
    fn srt_zero_duration_rejected() {
        assert!(matches!(
            parse_srt("1\n00:00:05,000 --> 00:00:05,000\nFlat\n"),
            Err(SubtitleError::EndNotAfterStart { .. })
        ));
    }

    #[test]
    fn srt_empty_input_is_empty_list() {
        assert_eq!(parse_srt(""), Ok(vec![]));
        assert_eq!(parse_srt("\n\n\n"), Ok(vec![]));
    }

    #[test]
    fn srt_crlf_and_bom_tolerated() {
        let content = "\u{feff}1\r\n00:00:01,000 --> 00:00:02,000\r\nCarriage\r\n\r\n2\r\n00:00:03,000 --> 00:00:04,000\r\nReturn\r\n";
        let cues = parse_srt(content).unwrap();
        assert_eq!(cues.len(), 2);
        assert_eq!(cues[0].text, "Carriage");
        assert_eq!(cues[1].text, "Return");
    }

    #[test]
    fn srt_unordered_blocks_sorted_and_reindexed() {
        let content = "2\n00:00:10,000 --> 00:00:11,000\nLater\n\n1\n00:00:01,000 --> 00:00:02,000\nEarlier\n";
        let cues = parse_srt(content).unwrap();
        assert_eq!(cues[0].text, "Earlier");
        assert_eq!(cues[0].index, 0);
        assert_eq!(cues[1].text, "Later");
        assert_eq!(cues[1].index, 1);
    }

    #[test]
    fn srt_malformed_timecode_names_line() {
        let content = "1\n00:00:01,000 --> 00:00:02,000\nFine\n\n2\n00:00:xx,000 --> 00:00:04,000\nBroken\n";
        assert_eq!(
            parse_srt(content),
            Err(SubtitleError::MalformedTimecode {
                line: 6,
                found: "00:00:xx,000 --> 00:00:04,000".into()
            })
        );
    }

    #[test]
    fn srt_missing_counter_accepted() {
        let cues = parse_srt("00:00:01,000 --> 00:00:02,000\nNo counter\n").unwrap();
        assert_eq!(cues[0].text, "No counter");
    }

    #[test]
    fn srt_dot_millis_tolerated() {
        let cues = parse_srt("1\n00:00:01.000 --> 00:00:02.000\nDotted\n").unwrap();
        assert_eq!(cues[0].start_ms, 1000);
    }

    #[test]
    fn srt_tags_stripped_and_empty_block_dropped() {
        let content = "1\n00:00:01,000 --> 00:00:02,000\n<i>Italic</i> words\n\n2\n00:00:03,000 --> 00:00:04,000\n<i></i>\n";
        let cues = parse_srt(content).unwrap();
        assert_eq!(cues.len(), 1);
        assert_eq!(cues[0].text, "Italic words");
    }

    #[test]
    fn vtt_basic() {
        let cues = parse_vtt("WEBVTT\n\n00:00:01.000 --> 00:00:03.500\nHello\n").unwrap();
        assert_eq!(
            cues,
            vec![SubtitleCue {
                index: 0,
                start_ms: 1000,
                end_ms: 3500,
                text: "Hello".into()
            }]
        );
    }

    #[test]
    fn vtt_requires_header() {
        assert_eq!(
            parse_vtt("00:00:01.000 --> 00:00:02.000\nNope\n"),
            Err(SubtitleError::MissingHeader)
        );
        assert_eq!(parse_vtt(""), Err(SubtitleError::MissingHeader));
    }

    #[test]
    fn vtt_short_timecodes() {
        let cues = parse_vtt("WEBVTT\n\n00:01.000 --> 00:02.000\nShort form\n").unwrap();
        assert_eq!(cues[0].start_ms, 1000);
        assert_eq!(cues[0].end_ms, 2000);
    }

    #[test]
    fn vtt_notes_identifiers_and_settings_ignored() {
        let content = "WEBVTT\n\nNOTE this is a comment\nspanning lines\n\nintro-cue\n00:00:01.000 --> 00:00:02.000 align:start position:0%\n<c.yellow>Styled</c> text\n";
        let cues = parse_vtt(content).unwrap();
        assert_eq!(cues.len(), 1);
        assert_eq!(cues[0].text, "Styled text");
    }

    #[test]
    fn vtt_malformed_timecode_names_line() {
        let content = "WEBVTT\n\n00:00:01.000 --> garbage\nText\n";
        assert_eq!(
            parse_vtt(content),
            Err(SubtitleError::MalformedTimecode {
                line: 3,
                found: "00:00:01.000 --> garbage".into()
            })
        );
    }

    #[test]
    fn vtt_comma_millis_rejected() {
        assert!(matches!(
            parse_vtt("WEBVTT\n\n00:00:01,000 --> 00:00:02,000\nWrong sep\n"),
            Err(SubtitleError::MalformedTimecode { .. })
        ));
    }

    #[test]
    fn align_containment() {
        let cues = vec![SubtitleCue {
            index: 0,
            start_ms: 1000,
            end_ms: 3000,
            text: "A".into(),
        }];
        assert_eq!(align_cues_to_frames(&cues, &[2000]).per_frame, vec!["A"]);
        // Half-open interval: the end timestamp is outside.
        assert_eq!(align_cues_to_frames(&cues, &[3000]).per_frame, vec![""]);
        assert_eq!(align_cues_to_frames(&cues, &[1000]).per_frame, vec!["A"]);
    }

    #[test]
    fn align_overlapping_cues_joined_in_order() {
        let cues = vec![
            SubtitleCue { index: 0, start_ms: 1000, end_ms: 3000, text: "A".into() },
            SubtitleCue { index: 1, start_ms: 2500, end_ms: 4000, text: "B".into() },
        ];
        assert_eq!(align_cues_to_frames(&cues, &[2600]).per_frame, vec!["A B"]);
    }

    #[test]
    fn align_no_cues_gives_empty_strings() {
        assert_eq!(align_cues_to_frames(&[], &[0, 500]).per_frame, vec!["", ""]);
    }

    #[test]
    fn budget_keeps_everything_under_limit() {
        let vocab = Vocab::new();
        let subs = FrameSubtitles { per_frame: vec!["abc".into(), "def".into()] };
        assert_eq!(enforce_subtitle_budget(&subs, &vocab, 1000), subs);
    }

    #[test]
    fn budget_truncates_first_overflow_and_empties_rest() {
        let vocab = Vocab::new();
        let long = "x".repeat(600);
        let subs = FrameSubtitles { per_frame: vec![long.clone(), long.clone(), "tail".into()] };
        let trimmed = enforce_subtitle_budget(&subs, &vocab, 1000);
        assert_eq!(trimmed.per_frame[0], long);
        assert_eq!(trimmed.per_frame[1], "x".repeat(400));
        assert_eq!(trimmed.per_frame[2], "");
    }

    #[test]
    fn budget_zero_empties_all() {
        let vocab = Vocab::new();
        let subs = FrameSubtitles { per_frame: vec!["a".into(), "b".into()] };
        let trimmed = enforce_subtitle_budget(&subs, &vocab, 0);
        assert_eq!(trimmed.per_frame, vec!["", ""]);
    }

    #[test]
    fn srt_round_trip_simple() {
        let content = "1\n00:00:01,000 --> 00:00:03,500\nHello world\n\n2\n01:02:03,456 --> 01:02:04,000\nSecond\n";
        let cues = parse_srt(content).unwrap();
        assert_eq!(parse_srt(&to_srt(&cues)).unwrap(), cues);
    }

    fn cue_list_strategy() -> impl Strategy<Value = Vec<SubtitleCue>> {
        let text = "[a-zA-Z0-9][a-zA-Z0-9 ,.!?']{0,30}[a-zA-Z0-9]|[a-zA-Z0-9]";
        let cue = (0u64..86_400_000, 1u64..600_000, text).prop_map(|(start, dur, text)| {
            SubtitleCue { index: 0, start_ms: start, end_ms: start + dur, text }
        });
        proptest::collection::vec(cue, 0..12).prop_map(|mut cues| {
            cues.sort_by_key(|c| c.start_ms);
            for (i, c) in cues.iter_mut().enumerate() {
                c.index = i;
            }
            cues
        })
    }

    proptest! {
        #[test]
        fn srt_round_trip(cues in cue_list_strategy()) {
            let reparsed = parse_srt(&to_srt(&cues)).unwrap();
            prop_assert_eq!(reparsed, cues);
        }

        #[test]
        fn align_output_length_matches_timestamps(
            cues in cue_list_strategy(),
            timestamps in proptest::collection::vec(0u64..90_000_000, 0..50),
        ) {
            let mut ts = timestamps;
            ts.sort_unstable();
            let subs = align_cues_to_frames(&cues, &ts);
            prop_assert_eq!(subs.per_frame.len(), ts.len());
        }

        #[test]
        fn budget_never_increases_counts_and_total_fits(
            texts in proptest::collection::vec("[a-zA-Z é]{0,50}", 0..20),
            budget in 0usize..200,
        ) {
            let vocab = Vocab::new();
            let subs = FrameSubtitles { per_frame: texts };
            let trimmed = enforce_subtitle_budget(&subs, &vocab, budget);
            prop_assert_eq!(trimmed.per_frame.len(), subs.per_frame.len());
            let mut total = 0;
            for (before, after) in subs.per_frame.iter().zip(&trimmed.per_frame) {
                let nb = vocab.count_tokens(before);
                let na = vocab.count_tokens(after);
                prop_assert!(na <= nb);
                total += na;
            }
            prop_assert!(total <= budget);
        }
    }
}
