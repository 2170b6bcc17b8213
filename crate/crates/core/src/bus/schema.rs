//! Typed bus messages, privacy taint labels, and the egress guard.
//!
//! Raw audio and transcripts are personally identifiable data (PID). The
//! privacy rule for anything leaving a device is: plaintext PID never
//! egresses. PID may travel only inside [`Message::Secure`] chunks over a
//! channel that is actually paired, where it is ciphertext on the wire.

use super::frame::{Frame, FLAG_PID};
use super::secure::SealedChunk;
use super::BusError;

/// Privacy classification of a message's payload as it appears on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaintLabel {
    /// Contains plaintext personally identifiable data.
    Pid,
    /// Safe to transmit in the clear.
    Clean,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    /// Mu-law encoded microphone audio. PID.
    AudioChunk { seq: u32, codes: Vec<u8> },
    /// Recognized user speech. PID.
    Transcript { text: String },
    /// Derived, de-identified intent label.
    Intent { name: String },
    /// Command for an embodiment actuator.
    ActuatorCommand { action: String },
    /// Periodic device health report.
    StatusPing { uptime_ms: u64, battery_mv: u32 },
    /// System-generated prompt for on-device synthesis.
    SpeakText { text: String },
    /// Encrypted container; the only lawful transport for PID.
    Secure(SealedChunk),
    /// Firmware update: announce an image of `image_bytes` with its CRC.
    ReflashBegin { image_bytes: u32, crc: u16 },
    /// Firmware update: one slice of the image.
    ReflashData { offset: u32, data: Vec<u8> },
    /// Firmware update: apply the staged image.
    ReflashCommit,
}

const T_AUDIO: u8 = 0x01;
const T_TRANSCRIPT: u8 = 0x02;
const T_INTENT: u8 = 0x03;
const T_ACTUATOR: u8 = 0x04;
const T_STATUS: u8 = 0x05;
const T_SPEAK: u8 = 0x06;
const T_SECURE: u8 = 0x07;
const T_REFLASH_BEGIN: u8 = 0x08;
const T_REFLASH_DATA: u8 = 0x09;
const T_REFLASH_COMMIT: u8 = 0x0A;

fn put_bytes(out: &mut Vec<u8>, data: &[u8]) {
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    out.extend_from_slice(data);
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8], BusError> {
    if bytes.len() < n {
        return Err(BusError::Truncated { needed: n, have: bytes.len() });
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn take_u16(bytes: &mut &[u8]) -> Result<u16, BusError> {
    let b = take(bytes, 2)?;
    Ok(u16::from_le_bytes([b[0], b[1]]))
}

fn take_u32(bytes: &mut &[u8]) -> Result<u32, BusError> {
    let b = take(bytes, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn take_u64(bytes: &mut &[u8]) -> Result<u64, BusError> {
    let b = take(bytes, 8)?;
    Ok(u64::from_le_bytes(b.try_into().expect("eight bytes")))
}

fn take_bytes(bytes: &mut &[u8]) -> Result<Vec<u8>, BusError> {
    let n = take_u32(bytes)? as usize;
    Ok(take(bytes, n)?.to_vec())
}

fn take_string(bytes: &mut &[u8]) -> Result<String, BusError> {
    let raw = take_bytes(bytes)?;
    String::from_utf8(raw).map_err(|e| BusError::Malformed(format!("bad utf-8: {e}")))
}

impl Message {
    /// Wire-level privacy label. [`Message::Secure`] is ciphertext on the
    /// wire, hence clean, even when PID rides inside.
    pub fn taint(&self) -> TaintLabel {
        match self {
            Message::AudioChunk { .. } | Message::Transcript { .. } => TaintLabel::Pid,
            _ => TaintLabel::Clean,
        }
    }

    pub fn type_byte(&self) -> u8 {
        match self {
            Message::AudioChunk { .. } => T_AUDIO,
            Message::Transcript { .. } => T_TRANSCRIPT,
            Message::Intent { .. } => T_INTENT,
            Message::ActuatorCommand { .. } => T_ACTUATOR,
            Message::StatusPing { .. } => T_STATUS,
            Message::SpeakText { .. } => T_SPEAK,
            Message::Secure(_) => T_SECURE,
            Message::ReflashBegin { .. } => T_REFLASH_BEGIN,
            Message::ReflashData { .. } => T_REFLASH_DATA,
            Message::ReflashCommit => T_REFLASH_COMMIT,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.type_byte()];
        match self {
            Message::AudioChunk { seq, codes } => {
                out.extend_from_slice(&seq.to_le_bytes());
                put_bytes(&mut out, codes);
            }
            Message::Transcript { text } => put_bytes(&mut out, text.as_bytes()),
            Message::Intent { name } => put_bytes(&mut out, name.as_bytes()),
            Message::ActuatorCommand { action } => put_bytes(&mut out, action.as_bytes()),
            Message::StatusPing { uptime_ms, battery_mv } => {
                out.extend_from_slice(&uptime_ms.to_le_bytes());
                out.extend_from_slice(&battery_mv.to_le_bytes());
            }
            Message::SpeakText { text } => put_bytes(&mut out, text.as_bytes()),
            Message::Secure(chunk) => {
                out.extend_from_slice(&chunk.nonce.to_le_bytes());
                out.extend_from_slice(&chunk.tag);
                put_bytes(&mut out, &chunk.ciphertext);
            }
            Message::ReflashBegin { image_bytes, crc } => {
                out.extend_from_slice(&image_bytes.to_le_bytes());
                out.extend_from_slice(&crc.to_le_bytes());
            }
            Message::ReflashData { offset, data } => {
                out.extend_from_slice(&offset.to_le_bytes());
                put_bytes(&mut out, data);
            }
            Message::ReflashCommit => {}
        }
        out
    }

    pub fn decode(payload: &[u8]) -> Result<Message, BusError> {
        let mut rest = payload;
        let ty = take(&mut rest, 1)?[0];
        let msg = match ty {
            T_AUDIO => Message::AudioChunk {
                seq: take_u32(&mut rest)?,
                codes: take_bytes(&mut rest)?,
            },
            T_TRANSCRIPT => Message::Transcript { text: take_string(&mut rest)? },
            T_INTENT => Message::Intent { name: take_string(&mut rest)? },
            T_ACTUATOR => Message::ActuatorCommand { action: take_string(&mut rest)? },
            T_STATUS => Message::StatusPing {
                uptime_ms: take_u64(&mut rest)?,
                battery_mv: take_u32(&mut rest)?,
            },
            T_SPEAK => Message::SpeakText { text: take_string(&mut rest)? },
            T_SECURE => {
                let nonce = take_u64(&mut rest)?;
                let tag: [u8; 16] =
                    take(&mut rest, 16)?.try_into().expect("sixteen bytes");
                let ciphertext = take_bytes(&mut rest)?;
                Message::Secure(SealedChunk { nonce, tag, ciphertext })
            }
            T_REFLASH_BEGIN => Message::ReflashBegin {
                image_bytes: take_u32(&mut rest)?,
                crc: take_u16(&mut rest)?,
            },
            T_REFLASH_DATA => Message::ReflashData {
                offset: take_u32(&mut rest)?,
                data: take_bytes(&mut rest)?,
            },
            T_REFLASH_COMMIT => Message::ReflashCommit,
            other => return Err(BusError::UnknownMessageType(other)),
        };
        if !rest.is_empty() {
            return Err(BusError::Malformed(format!(
                "{} trailing bytes after message",
                rest.len()
            )));
        }
        Ok(msg)
    }

    /// Wraps the message in a frame with an honest PID flag.
    pub fn to_frame(&self) -> Result<Frame, BusError> {
        let flags = match self.taint() {
            TaintLabel::Pid => FLAG_PID,
            TaintLabel::Clean => 0,
        };
        Frame::new(flags, self.encode())
    }
}

/// Why the egress guard refused a frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DenyReason {
    /// Plaintext PID would have left the device, or ciphertext was headed
    /// over a link with no pairing.
    PrivacyViolation(String),
    /// The frame's PID flag contradicts the payload's taint.
    TaintFlagMismatch { flagged: bool, actual: TaintLabel },
}

impl std::fmt::Display for DenyReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DenyReason::PrivacyViolation(why) => write!(f, "privacy violation: {why}"),
            DenyReason::TaintFlagMismatch { flagged, actual } => write!(
                f,
                "taint flag mismatch: frame flag says pid={flagged}, payload is {actual:?}"
            ),
        }
    }
}

/// Egress checkpoint: every frame leaving a device passes through here.
///
/// Rules, in order:
/// 1. The PID flag must match the decoded payload's taint.
/// 2. Plaintext PID never egresses, paired or not.
/// 3. Encrypted chunks require a live pairing on the link.
///
/// Undecodable payloads are refused as privacy violations: a guard that
/// cannot classify a payload must not let it out.
pub fn guard_egress(frame: &Frame, link_paired: bool) -> Result<Message, DenyReason> {
    let msg = Message::decode(&frame.payload).map_err(|e| {
        DenyReason::PrivacyViolation(format!("unclassifiable payload ({e})"))
    })?;
    let taint = msg.taint();
    let flagged = frame.has_pid_flag();
    if flagged != (taint == TaintLabel::Pid) {
        return Err(DenyReason::TaintFlagMismatch { flagged, actual: taint });
    }
    if taint == TaintLabel::Pid {
        return Err(DenyReason::PrivacyViolation(format!(
            "plaintext {} egress",
            match msg {
                Message::AudioChunk { .. } => "audio",
                Message::Transcript { .. } => "transcript",
                _ => "pid",
            }
        )));
    }
    if matches!(msg, Message::Secure(_)) && !link_paired {
        return Err(DenyReason::PrivacyViolation(
            "encrypted chunk on an unpaired link".into(),
        ));
    }
    Ok(msg)
}
