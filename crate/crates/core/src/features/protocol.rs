use crate::error::{Error, Result};
use crate::features::Label;

/// One line of an anti-spoofing protocol file:
/// `speaker utterance - attack key`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProtocolRecord {
    pub speaker_id: String,
    pub utt_id: String,
    /// `-` for bona fide utterances.
    pub attack_id: String,
    pub key: Label,
}

pub fn parse_protocol(text: &str) -> Result<Vec<ProtocolRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let line_no = i + 1;
        if fields.len() != 5 {
            return Err(Error::Protocol {
                line: line_no,
                msg: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let key = match fields[4] {
            "bonafide" => Label::Bonafide,
            "spoof" => Label::Spoof,
            other => {
                return Err(Error::Protocol {
                    line: line_no,
                    msg: format!("unknown key `{other}`"),
                })
            }
        };
        out.push(ProtocolRecord {
            speaker_id: fields[0].to_string(),
            utt_id: fields[1].to_string(),
            attack_id: fields[3].to_string(),
            key,
        });
    }
    Ok(out)
}
