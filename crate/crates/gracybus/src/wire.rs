//! Bit-exact binary codec for the ten protocol messages plus construction and
//! validation of the per-message authentication trailer.
//!
//! Layout rules: all integers big-endian, variable fields length-prefixed, no
//! padding. The 20-byte header is `version(1) ‖ suite(2) ‖ msg_type(1) ‖
//! epoch(8) ‖ sender_leaf(4) ‖ body_length(4)`; the trailer demanded by the
//! message type follows the body. MAC and signature are computed over
//! header ‖ body, which binds the epoch.

use thiserror::Error;

use crate::crypto::{CipherSuiteId, CryptoProvider, SuiteParams, suite_params};
use crate::pki::Certificate;
use crate::tree::NodeIndex;

pub const WIRE_VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 20;
/// `sender_leaf` value used by devices that are not (yet) members.
pub const SENDER_NON_MEMBER: u32 = 0xffff_ffff;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("input truncated")]
    Truncated,
    #[error("bad protocol version {0:#04x}")]
    BadVersion(u8),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("unknown cipher suite {0:#06x}")]
    UnknownSuite(u16),
    #[error("length field mismatch")]
    LengthMismatch,
    #[error("malformed field: {0}")]
    Malformed(&'static str),
    #[error("authentication failure")]
    AuthFailure,
    #[error("epoch mismatch: message {message}, local {local}")]
    EpochMismatch { message: u64, local: u64 },
    #[error("credential required by this message type is missing")]
    MissingCredential,
}

/// Message type codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    JoinRequest = 0x01,
    JoinChallenge = 0x02,
    JoinSendSecret = 0x03,
    JoinSuccessJoiner = 0x04,
    JoinSuccessGka = 0x05,
    JoinSuccessCombined = 0x06,
    JoinFailed = 0x07,
    Update = 0x08,
    LeaveRequest = 0x09,
    LeaveUpdate = 0x0a,
}

impl MsgType {
    pub fn from_code(code: u8) -> Option<MsgType> {
        Some(match code {
            0x01 => MsgType::JoinRequest,
            0x02 => MsgType::JoinChallenge,
            0x03 => MsgType::JoinSendSecret,
            0x04 => MsgType::JoinSuccessJoiner,
            0x05 => MsgType::JoinSuccessGka,
            0x06 => MsgType::JoinSuccessCombined,
            0x07 => MsgType::JoinFailed,
            0x08 => MsgType::Update,
            0x09 => MsgType::LeaveRequest,
            0x0a => MsgType::LeaveUpdate,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            MsgType::JoinRequest => "JoinRequest",
            MsgType::JoinChallenge => "JoinChallenge",
            MsgType::JoinSendSecret => "JoinSendSecret",
            MsgType::JoinSuccessJoiner => "JoinSuccessJoiner",
            MsgType::JoinSuccessGka => "JoinSuccessGka",
            MsgType::JoinSuccessCombined => "JoinSuccessCombined",
            MsgType::JoinFailed => "JoinFailed",
            MsgType::Update => "Update",
            MsgType::LeaveRequest => "LeaveRequest",
            MsgType::LeaveUpdate => "LeaveUpdate",
        }
    }
}

/// Which trailer a message type carries, straight from the protection matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrailerKind {
    None,
    Mac,
    Signature,
    MacAndSignature,
}

pub fn required_trailer(msg_type: MsgType) -> TrailerKind {
    match msg_type {
        MsgType::JoinRequest => TrailerKind::None,
        MsgType::JoinChallenge => TrailerKind::Signature,
        MsgType::JoinSendSecret => TrailerKind::Signature,
        MsgType::JoinSuccessJoiner => TrailerKind::MacAndSignature,
        MsgType::JoinSuccessGka => TrailerKind::MacAndSignature,
        MsgType::JoinSuccessCombined => TrailerKind::MacAndSignature,
        MsgType::JoinFailed => TrailerKind::Signature,
        MsgType::Update => TrailerKind::Mac,
        MsgType::LeaveRequest => TrailerKind::Mac,
        MsgType::LeaveUpdate => TrailerKind::Mac,
    }
}

/// Whether the type's body carries sealed secret material (protection matrix
/// "Encrypted" column).
pub fn carries_encrypted_secrets(msg_type: MsgType) -> bool {
    matches!(
        msg_type,
        MsgType::JoinSendSecret
            | MsgType::JoinSuccessJoiner
            | MsgType::JoinSuccessGka
            | MsgType::JoinSuccessCombined
            | MsgType::Update
            | MsgType::LeaveUpdate
    )
}

fn trailer_len(kind: TrailerKind, params: &SuiteParams) -> usize {
    match kind {
        TrailerKind::None => 0,
        TrailerKind::Mac => params.mac_len,
        TrailerKind::Signature => params.signature_len,
        TrailerKind::MacAndSignature => params.mac_len + params.signature_len,
    }
}

/// Trailer bytes attached to a message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AuthTrailer {
    None,
    Mac(Vec<u8>),
    Signature(Vec<u8>),
    MacAndSignature { mac: Vec<u8>, signature: Vec<u8> },
}

/// One plaintext-published node key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublishPublicKey {
    pub node_index: NodeIndex,
    pub public_key: Vec<u8>,
}

/// One sealed path secret: the secret of `node_index`, encrypted to the key
/// of `recipient_node`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UpdateNodesSecretKey {
    pub node_index: NodeIndex,
    pub recipient_node: NodeIndex,
    pub ciphertext: Vec<u8>,
}

/// The group half of a join success: mirrors an Update along the joiner's
/// path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GkaPart {
    pub joiner_leaf: NodeIndex,
    pub joiner_identity: String,
    pub publish: Vec<PublishPublicKey>,
    pub secrets: Vec<UpdateNodesSecretKey>,
}

/// The joiner half of a join success: one blob sealed to the joiner's
/// certificate key (see [`JoinerWelcome`] for the plaintext layout).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinerPart {
    pub sealed: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MessageBody {
    JoinRequest {
        certificate: Certificate,
        preliminary_public: Vec<u8>,
        joiner_nonce: Vec<u8>,
    },
    JoinChallenge {
        certificate: Certificate,
        sponsor_nonce: Vec<u8>,
        joiner_nonce_echo: Vec<u8>,
    },
    JoinSendSecret {
        sponsor_nonce_echo: Vec<u8>,
        response_nonce: Vec<u8>,
        leaf_public: Vec<u8>,
        sealed_secret: Vec<u8>,
    },
    JoinSuccessJoiner(JoinerPart),
    JoinSuccessGka(GkaPart),
    JoinSuccessCombined {
        gka: GkaPart,
        joiner: JoinerPart,
    },
    JoinFailed {
        rejected_nonces: Vec<Vec<u8>>,
    },
    Update {
        publish: Vec<PublishPublicKey>,
        secrets: Vec<UpdateNodesSecretKey>,
    },
    LeaveRequest {
        leaver_leaf: NodeIndex,
    },
    LeaveUpdate {
        leaver_leaf: NodeIndex,
        publish: Vec<PublishPublicKey>,
        secrets: Vec<UpdateNodesSecretKey>,
    },
}

impl MessageBody {
    pub fn msg_type(&self) -> MsgType {
        match self {
            MessageBody::JoinRequest { .. } => MsgType::JoinRequest,
            MessageBody::JoinChallenge { .. } => MsgType::JoinChallenge,
            MessageBody::JoinSendSecret { .. } => MsgType::JoinSendSecret,
            MessageBody::JoinSuccessJoiner(_) => MsgType::JoinSuccessJoiner,
            MessageBody::JoinSuccessGka(_) => MsgType::JoinSuccessGka,
            MessageBody::JoinSuccessCombined { .. } => MsgType::JoinSuccessCombined,
            MessageBody::JoinFailed { .. } => MsgType::JoinFailed,
            MessageBody::Update { .. } => MsgType::Update,
            MessageBody::LeaveRequest { .. } => MsgType::LeaveRequest,
            MessageBody::LeaveUpdate { .. } => MsgType::LeaveUpdate,
        }
    }
}

/// A full protocol message minus its trailer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub suite: CipherSuiteId,
    pub epoch: u64,
    pub sender_leaf: u32,
    pub body: MessageBody,
}

// ---------------------------------------------------------------------------
// encoding

struct Writer {
    out: Vec<u8>,
}

impl Writer {
    fn new() -> Writer {
        Writer { out: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.out.push(v);
    }

    fn u16(&mut self, v: u16) {
        self.out.extend_from_slice(&v.to_be_bytes());
    }

    fn u32(&mut self, v: u32) {
        self.out.extend_from_slice(&v.to_be_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.out.extend_from_slice(&v.to_be_bytes());
    }

    fn var16(&mut self, bytes: &[u8]) {
        debug_assert!(bytes.len() <= u16::MAX as usize);
        self.u16(bytes.len() as u16);
        self.out.extend_from_slice(bytes);
    }

    fn var32(&mut self, bytes: &[u8]) {
        self.u32(bytes.len() as u32);
        self.out.extend_from_slice(bytes);
    }
}

fn write_certificate(w: &mut Writer, cert: &Certificate) {
    w.var16(cert.identity.as_bytes());
    w.var16(&cert.subject_public);
    w.var16(cert.issuer.as_bytes());
    w.var16(&cert.signature);
}

fn write_publish(w: &mut Writer, entries: &[PublishPublicKey]) {
    w.u16(entries.len() as u16);
    for entry in entries {
        w.u32(entry.node_index);
        w.var16(&entry.public_key);
    }
}

fn write_secrets(w: &mut Writer, entries: &[UpdateNodesSecretKey]) {
    w.u16(entries.len() as u16);
    for entry in entries {
        w.u32(entry.node_index);
        w.u32(entry.recipient_node);
        w.var16(&entry.ciphertext);
    }
}

fn write_gka(w: &mut Writer, gka: &GkaPart) {
    w.u32(gka.joiner_leaf);
    w.var16(gka.joiner_identity.as_bytes());
    write_publish(w, &gka.publish);
    write_secrets(w, &gka.secrets);
}

fn encode_body(body: &MessageBody) -> Vec<u8> {
    let mut w = Writer::new();
    match body {
        MessageBody::JoinRequest {
            certificate,
            preliminary_public,
            joiner_nonce,
        } => {
            write_certificate(&mut w, certificate);
            w.var16(preliminary_public);
            w.var16(joiner_nonce);
        }
        MessageBody::JoinChallenge {
            certificate,
            sponsor_nonce,
            joiner_nonce_echo,
        } => {
            write_certificate(&mut w, certificate);
            w.var16(sponsor_nonce);
            w.var16(joiner_nonce_echo);
        }
        MessageBody::JoinSendSecret {
            sponsor_nonce_echo,
            response_nonce,
            leaf_public,
            sealed_secret,
        } => {
            w.var16(sponsor_nonce_echo);
            w.var16(response_nonce);
            w.var16(leaf_public);
            w.var16(sealed_secret);
        }
        MessageBody::JoinSuccessJoiner(part) => {
            w.var32(&part.sealed);
        }
        MessageBody::JoinSuccessGka(gka) => {
            write_gka(&mut w, gka);
        }
        MessageBody::JoinSuccessCombined { gka, joiner } => {
            let mut inner = Writer::new();
            write_gka(&mut inner, gka);
            w.var32(&inner.out);
            w.var32(&joiner.sealed);
        }
        MessageBody::JoinFailed { rejected_nonces } => {
            w.u16(rejected_nonces.len() as u16);
            for nonce in rejected_nonces {
                w.var16(nonce);
            }
        }
        MessageBody::Update { publish, secrets } => {
            write_publish(&mut w, publish);
            write_secrets(&mut w, secrets);
        }
        MessageBody::LeaveRequest { leaver_leaf } => {
            w.u32(*leaver_leaf);
        }
        MessageBody::LeaveUpdate {
            leaver_leaf,
            publish,
            secrets,
        } => {
            w.u32(*leaver_leaf);
            write_publish(&mut w, publish);
            write_secrets(&mut w, secrets);
        }
    }
    w.out
}

/// Standalone certificate encoding (same length-prefixed layout the message
/// bodies use); the CA tooling reads and writes these as files.
pub fn encode_certificate(cert: &Certificate) -> Vec<u8> {
    let mut w = Writer::new();
    write_certificate(&mut w, cert);
    w.out
}

pub fn decode_certificate(bytes: &[u8]) -> Result<Certificate, WireError> {
    let mut r = Reader::new(bytes);
    let cert = read_certificate(&mut r)?;
    if !r.done() {
        return Err(WireError::LengthMismatch);
    }
    Ok(cert)
}

/// Header ‖ body — the byte region every MAC and signature covers.
pub fn encode_unauthenticated(msg: &WireMessage) -> Vec<u8> {
    let body = encode_body(&msg.body);
    let mut w = Writer::new();
    w.u8(WIRE_VERSION);
    w.u16(msg.suite.0);
    w.u8(msg.body.msg_type() as u8);
    w.u64(msg.epoch);
    w.u32(msg.sender_leaf);
    w.u32(body.len() as u32);
    w.out.extend_from_slice(&body);
    w.out
}

/// Total encoded size including the trailer the type requires.
pub fn message_size(msg: &WireMessage) -> Result<usize, WireError> {
    let params = suite_params(msg.suite).map_err(|_| WireError::UnknownSuite(msg.suite.0))?;
    let body = encode_body(&msg.body);
    Ok(HEADER_LEN + body.len() + trailer_len(required_trailer(msg.body.msg_type()), &params))
}

/// Credentials for sealing a message per its protection row.
#[derive(Default)]
pub struct AuthCredentials<'a> {
    pub epoch_key: Option<&'a [u8]>,
    pub signing_key: Option<&'a [u8]>,
}

/// Encode and attach the trailer the message type requires. MAC and signature
/// both cover header ‖ body.
pub fn seal_auth(
    msg: &WireMessage,
    creds: &AuthCredentials,
    provider: &dyn CryptoProvider,
) -> Result<Vec<u8>, WireError> {
    let mut out = encode_unauthenticated(msg);
    let covered = out.clone();
    match required_trailer(msg.body.msg_type()) {
        TrailerKind::None => {}
        TrailerKind::Mac => {
            let key = creds.epoch_key.ok_or(WireError::MissingCredential)?;
            let tag = provider
                .mac_compute(key, &covered)
                .map_err(|_| WireError::AuthFailure)?;
            out.extend_from_slice(&tag);
        }
        TrailerKind::Signature => {
            let key = creds.signing_key.ok_or(WireError::MissingCredential)?;
            let sig = provider
                .sign(key, &covered)
                .map_err(|_| WireError::AuthFailure)?;
            out.extend_from_slice(&sig);
        }
        TrailerKind::MacAndSignature => {
            let mac_key = creds.epoch_key.ok_or(WireError::MissingCredential)?;
            let sig_key = creds.signing_key.ok_or(WireError::MissingCredential)?;
            let tag = provider
                .mac_compute(mac_key, &covered)
                .map_err(|_| WireError::AuthFailure)?;
            let sig = provider
                .sign(sig_key, &covered)
                .map_err(|_| WireError::AuthFailure)?;
            out.extend_from_slice(&tag);
            out.extend_from_slice(&sig);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// decoding

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Reader<'a> {
        Reader { data, pos: 0 }
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8], WireError> {
        if self.data.len() - self.pos < len {
            return Err(WireError::Truncated);
        }
        let slice = &self.data[self.pos..self.pos + len];
        self.pos += len;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn var16(&mut self) -> Result<Vec<u8>, WireError> {
        let len = self.u16()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    fn var32(&mut self) -> Result<Vec<u8>, WireError> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    fn string16(&mut self) -> Result<String, WireError> {
        String::from_utf8(self.var16()?).map_err(|_| WireError::Malformed("utf-8"))
    }

    fn done(&self) -> bool {
        self.pos == self.data.len()
    }
}

fn read_certificate(r: &mut Reader) -> Result<Certificate, WireError> {
    Ok(Certificate {
        identity: r.string16()?,
        subject_public: r.var16()?,
        issuer: r.string16()?,
        signature: r.var16()?,
    })
}

fn read_publish(r: &mut Reader) -> Result<Vec<PublishPublicKey>, WireError> {
    let count = r.u16()?;
    let mut out = Vec::new();
    for _ in 0..count {
        out.push(PublishPublicKey {
            node_index: r.u32()?,
            public_key: r.var16()?,
        });
    }
    Ok(out)
}

fn read_secrets(r: &mut Reader) -> Result<Vec<UpdateNodesSecretKey>, WireError> {
    let count = r.u16()?;
    let mut out = Vec::new();
    for _ in 0..count {
        out.push(UpdateNodesSecretKey {
            node_index: r.u32()?,
            recipient_node: r.u32()?,
            ciphertext: r.var16()?,
        });
    }
    Ok(out)
}

fn read_gka(r: &mut Reader) -> Result<GkaPart, WireError> {
    Ok(GkaPart {
        joiner_leaf: r.u32()?,
        joiner_identity: r.string16()?,
        publish: read_publish(r)?,
        secrets: read_secrets(r)?,
    })
}

fn decode_body(msg_type: MsgType, body: &[u8]) -> Result<MessageBody, WireError> {
    let mut r = Reader::new(body);
    let decoded = match msg_type {
        MsgType::JoinRequest => MessageBody::JoinRequest {
            certificate: read_certificate(&mut r)?,
            preliminary_public: r.var16()?,
            joiner_nonce: r.var16()?,
        },
        MsgType::JoinChallenge => MessageBody::JoinChallenge {
            certificate: read_certificate(&mut r)?,
            sponsor_nonce: r.var16()?,
            joiner_nonce_echo: r.var16()?,
        },
        MsgType::JoinSendSecret => MessageBody::JoinSendSecret {
            sponsor_nonce_echo: r.var16()?,
            response_nonce: r.var16()?,
            leaf_public: r.var16()?,
            sealed_secret: r.var16()?,
        },
        MsgType::JoinSuccessJoiner => MessageBody::JoinSuccessJoiner(JoinerPart {
            sealed: r.var32()?,
        }),
        MsgType::JoinSuccessGka => MessageBody::JoinSuccessGka(read_gka(&mut r)?),
        MsgType::JoinSuccessCombined => {
            let gka_bytes = r.var32()?;
            let mut gka_reader = Reader::new(&gka_bytes);
            let gka = read_gka(&mut gka_reader)?;
            if !gka_reader.done() {
                return Err(WireError::LengthMismatch);
            }
            MessageBody::JoinSuccessCombined {
                gka,
                joiner: JoinerPart { sealed: r.var32()? },
            }
        }
        MsgType::JoinFailed => {
            let count = r.u16()?;
            let mut rejected_nonces = Vec::new();
            for _ in 0..count {
                rejected_nonces.push(r.var16()?);
            }
            MessageBody::JoinFailed { rejected_nonces }
        }
        MsgType::Update => MessageBody::Update {
            publish: read_publish(&mut r)?,
            secrets: read_secrets(&mut r)?,
        },
        MsgType::LeaveRequest => MessageBody::LeaveRequest {
            leaver_leaf: r.u32()?,
        },
        MsgType::LeaveUpdate => MessageBody::LeaveUpdate {
            leaver_leaf: r.u32()?,
            publish: read_publish(&mut r)?,
            secrets: read_secrets(&mut r)?,
        },
    };
    if !r.done() {
        return Err(WireError::LengthMismatch);
    }
    Ok(decoded)
}

/// A decoded message together with its trailer and the covered byte count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedFrame {
    pub message: WireMessage,
    pub trailer: AuthTrailer,
    /// Length of header ‖ body, i.e. the MAC/signature input.
    pub covered_len: usize,
}

/// Strict decode: rejects truncated and over-long input, unknown types,
/// unknown suites, bad version, and inconsistent length fields.
pub fn decode(bytes: &[u8]) -> Result<DecodedFrame, WireError> {
    let mut r = Reader::new(bytes);
    let version = r.u8()?;
    if version != WIRE_VERSION {
        return Err(WireError::BadVersion(version));
    }
    let suite = CipherSuiteId(r.u16()?);
    let params = suite_params(suite).map_err(|_| WireError::UnknownSuite(suite.0))?;
    let type_code = r.u8()?;
    let msg_type = MsgType::from_code(type_code).ok_or(WireError::UnknownType(type_code))?;
    let epoch = r.u64()?;
    let sender_leaf = r.u32()?;
    let body_len = r.u32()? as usize;

    let body_bytes = r.take(body_len)?;
    let kind = required_trailer(msg_type);
    let t_len = trailer_len(kind, &params);
    let trailer_bytes = r.take(t_len)?;
    if !r.done() {
        return Err(WireError::LengthMismatch);
    }

    let body = decode_body(msg_type, body_bytes)?;
    let trailer = match kind {
        TrailerKind::None => AuthTrailer::None,
        TrailerKind::Mac => AuthTrailer::Mac(trailer_bytes.to_vec()),
        TrailerKind::Signature => AuthTrailer::Signature(trailer_bytes.to_vec()),
        TrailerKind::MacAndSignature => AuthTrailer::MacAndSignature {
            mac: trailer_bytes[..params.mac_len].to_vec(),
            signature: trailer_bytes[params.mac_len..].to_vec(),
        },
    };

    Ok(DecodedFrame {
        message: WireMessage {
            suite,
            epoch,
            sender_leaf,
            body,
        },
        trailer,
        covered_len: HEADER_LEN + body_len,
    })
}

/// What the receiver can check a frame against.
#[derive(Default)]
pub struct CheckContext<'a> {
    /// Required current epoch for MAC'd types.
    pub expected_epoch: Option<u64>,
    pub epoch_key: Option<&'a [u8]>,
    pub signer_public: Option<&'a [u8]>,
}

/// Decode and authenticate. For MAC'd types the epoch must equal the
/// receiver's current epoch and the tag must verify; for signed types the
/// signature must verify under `signer_public`. For combined trailers each
/// supplied credential is checked (a joiner has no epoch key, a member need
/// not know the signer).
pub fn check_auth(
    bytes: &[u8],
    ctx: &CheckContext,
    provider: &dyn CryptoProvider,
) -> Result<WireMessage, WireError> {
    let frame = decode(bytes)?;
    let covered = &bytes[..frame.covered_len];
    let check_mac = |tag: &[u8]| -> Result<(), WireError> {
        let key = ctx.epoch_key.ok_or(WireError::MissingCredential)?;
        if let Some(expected) = ctx.expected_epoch {
            if frame.message.epoch != expected {
                return Err(WireError::EpochMismatch {
                    message: frame.message.epoch,
                    local: expected,
                });
            }
        }
        if provider.mac_verify(key, covered, tag).unwrap_or(false) {
            Ok(())
        } else {
            Err(WireError::AuthFailure)
        }
    };
    let check_sig = |sig: &[u8]| -> Result<(), WireError> {
        let key = ctx.signer_public.ok_or(WireError::MissingCredential)?;
        if provider.verify(key, covered, sig).unwrap_or(false) {
            Ok(())
        } else {
            Err(WireError::AuthFailure)
        }
    };

    match &frame.trailer {
        AuthTrailer::None => {}
        AuthTrailer::Mac(tag) => check_mac(tag)?,
        AuthTrailer::Signature(sig) => check_sig(sig)?,
        AuthTrailer::MacAndSignature { mac, signature } => {
            if ctx.epoch_key.is_none() && ctx.signer_public.is_none() {
                return Err(WireError::MissingCredential);
            }
            if ctx.epoch_key.is_some() {
                check_mac(mac)?;
            }
            if ctx.signer_public.is_some() {
                check_sig(signature)?;
            }
        }
    }
    Ok(frame.message)
}

// ---------------------------------------------------------------------------
// the sealed joiner welcome (plaintext layout inside JoinerPart.sealed)

/// Snapshot handed to the joiner: echoed nonce, current epoch state, and the
/// full public tree image. Travels only inside a sealed blob.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinerWelcome {
    pub response_nonce_echo: Vec<u8>,
    pub joiner_leaf: NodeIndex,
    pub epoch: u64,
    pub epoch_key: Vec<u8>,
    pub tree_height: u32,
    /// One entry per node index 1..=2^(h+1)-1.
    pub nodes: Vec<WelcomeNode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WelcomeNode {
    pub public_key: Option<Vec<u8>>,
    /// Occupied-leaf identity; `None` for blank leaves and interior nodes.
    pub identity: Option<String>,
    /// Mirrors the tree's holder-less-public marker.
    pub ballast: bool,
}

pub fn encode_welcome(welcome: &JoinerWelcome) -> Vec<u8> {
    let mut w = Writer::new();
    w.var16(&welcome.response_nonce_echo);
    w.u32(welcome.joiner_leaf);
    w.u64(welcome.epoch);
    w.var16(&welcome.epoch_key);
    w.u8(welcome.tree_height as u8);
    for node in &welcome.nodes {
        let mut flags = 0u8;
        if node.public_key.is_some() {
            flags |= 0x01;
        }
        if node.identity.is_some() {
            flags |= 0x02;
        }
        if node.ballast {
            flags |= 0x04;
        }
        w.u8(flags);
        if let Some(pk) = &node.public_key {
            w.var16(pk);
        }
        if let Some(identity) = &node.identity {
            w.var16(identity.as_bytes());
        }
    }
    w.out
}

pub fn decode_welcome(bytes: &[u8]) -> Result<JoinerWelcome, WireError> {
    let mut r = Reader::new(bytes);
    let response_nonce_echo = r.var16()?;
    let joiner_leaf = r.u32()?;
    let epoch = r.u64()?;
    let epoch_key = r.var16()?;
    let tree_height = r.u8()? as u32;
    if tree_height > 16 {
        return Err(WireError::Malformed("tree height"));
    }
    let count = (1usize << (tree_height + 1)) - 1;
    let mut nodes = Vec::with_capacity(count);
    for _ in 0..count {
        let flags = r.u8()?;
        if flags & !0x07 != 0 {
            return Err(WireError::Malformed("node flags"));
        }
        let public_key = if flags & 0x01 != 0 {
            Some(r.var16()?)
        } else {
            None
        };
        let identity = if flags & 0x02 != 0 {
            Some(String::from_utf8(r.var16()?).map_err(|_| WireError::Malformed("utf-8"))?)
        } else {
            None
        };
        nodes.push(WelcomeNode {
            public_key,
            identity,
            ballast: flags & 0x04 != 0,
        });
    }
    if !r.done() {
        return Err(WireError::LengthMismatch);
    }
    Ok(JoinerWelcome {
        response_nonce_echo,
        joiner_leaf,
        epoch,
        epoch_key,
        tree_height,
        nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::provider_for;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn cert() -> Certificate {
        Certificate {
            identity: "device-a".into(),
            subject_public: vec![1; 8],
            issuer: "ca".into(),
            signature: vec![2; 16],
        }
    }

    fn sample_messages() -> Vec<WireMessage> {
        let gka = GkaPart {
            joiner_leaf: 15,
            joiner_identity: "device-j".into(),
            publish: vec![PublishPublicKey {
                node_index: 15,
                public_key: vec![3; 8],
            }],
            secrets: vec![UpdateNodesSecretKey {
                node_index: 7,
                recipient_node: 6,
                ciphertext: vec![4; 16],
            }],
        };
        let bodies = vec![
            MessageBody::JoinRequest {
                certificate: cert(),
                preliminary_public: vec![1; 8],
                joiner_nonce: vec![5; 8],
            },
            MessageBody::JoinChallenge {
                certificate: cert(),
                sponsor_nonce: vec![6; 8],
                joiner_nonce_echo: vec![5; 8],
            },
            MessageBody::JoinSendSecret {
                sponsor_nonce_echo: vec![6; 8],
                response_nonce: vec![7; 8],
                leaf_public: vec![8; 8],
                sealed_secret: vec![9; 16],
            },
            MessageBody::JoinSuccessJoiner(JoinerPart {
                sealed: vec![10; 40],
            }),
            MessageBody::JoinSuccessGka(gka.clone()),
            MessageBody::JoinSuccessCombined {
                gka,
                joiner: JoinerPart {
                    sealed: vec![10; 40],
                },
            },
            MessageBody::JoinFailed {
                rejected_nonces: vec![vec![5; 8]],
            },
            MessageBody::Update {
                publish: vec![PublishPublicKey {
                    node_index: 8,
                    public_key: vec![3; 8],
                }],
                secrets: vec![UpdateNodesSecretKey {
                    node_index: 4,
                    recipient_node: 9,
                    ciphertext: vec![4; 16],
                }],
            },
            MessageBody::LeaveRequest { leaver_leaf: 9 },
            MessageBody::LeaveUpdate {
                leaver_leaf: 9,
                publish: vec![],
                secrets: vec![],
            },
        ];
        bodies
            .into_iter()
            .map(|body| WireMessage {
                suite: CipherSuiteId::TOY,
                epoch: 3,
                sender_leaf: if matches!(
                    body,
                    MessageBody::JoinRequest { .. } | MessageBody::JoinSendSecret { .. }
                ) {
                    SENDER_NON_MEMBER
                } else {
                    8
                },
                body,
            })
            .collect()
    }

    fn sealed(msg: &WireMessage) -> Vec<u8> {
        let p = provider_for(CipherSuiteId::TOY).unwrap();
        let creds = AuthCredentials {
            epoch_key: Some(&[7u8; 8]),
            signing_key: Some(b"signkey!"),
        };
        seal_auth(msg, &creds, p.as_ref()).unwrap()
    }

    #[test]
    fn round_trip_all_ten_types() {
        for msg in sample_messages() {
            let bytes = sealed(&msg);
            let frame = decode(&bytes).unwrap();
            assert_eq!(frame.message, msg, "{:?}", msg.body.msg_type());
            // canonical: re-encoding the decoded message is byte-identical
            let again = sealed(&frame.message);
            assert_eq!(again, bytes);
            assert_eq!(message_size(&msg).unwrap(), bytes.len());
        }
    }

    #[test]
    fn truncated_and_overlong_rejected() {
        for msg in sample_messages() {
            let bytes = sealed(&msg);
            let short = &bytes[..bytes.len() - 1];
            assert_eq!(decode(short).err(), Some(WireError::Truncated));
            let mut long = bytes.clone();
            long.push(0);
            assert_eq!(decode(&long).err(), Some(WireError::LengthMismatch));
        }
    }

    #[test]
    fn header_is_twenty_bytes() {
        let msg = &sample_messages()[0];
        let bytes = encode_unauthenticated(msg);
        let body = encode_body(&msg.body);
        assert_eq!(bytes.len(), 20 + body.len());
        assert_eq!(HEADER_LEN, 1 + 2 + 1 + 8 + 4 + 4);
        assert_eq!(bytes[0], 0x01);
        assert_eq!(bytes[3], MsgType::JoinRequest as u8);
    }

    #[test]
    fn unknown_type_and_bad_version_rejected() {
        let msg = &sample_messages()[0];
        let mut bytes = sealed(msg);
        bytes[3] = 0x7f;
        assert_eq!(decode(&bytes).err(), Some(WireError::UnknownType(0x7f)));
        let mut bytes = sealed(msg);
        bytes[0] = 0x02;
        assert_eq!(decode(&bytes).err(), Some(WireError::BadVersion(0x02)));
        let mut bytes = sealed(msg);
        bytes[2] = 0x77;
        assert!(matches!(decode(&bytes), Err(WireError::UnknownSuite(_))));
    }

    #[test]
    fn mac_rejects_any_single_byte_flip() {
        let p = provider_for(CipherSuiteId::TOY).unwrap();
        let msg = WireMessage {
            suite: CipherSuiteId::TOY,
            epoch: 5,
            sender_leaf: 8,
            body: MessageBody::LeaveRequest { leaver_leaf: 8 },
        };
        let key = [7u8; 8];
        let bytes = seal_auth(
            &msg,
            &AuthCredentials {
                epoch_key: Some(&key),
                signing_key: None,
            },
            p.as_ref(),
        )
        .unwrap();
        let ctx = CheckContext {
            expected_epoch: Some(5),
            epoch_key: Some(&key),
            signer_public: None,
        };
        assert!(check_auth(&bytes, &ctx, p.as_ref()).is_ok());
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x01;
            assert!(
                check_auth(&bad, &ctx, p.as_ref()).is_err(),
                "flip at {i} must be rejected"
            );
        }
    }

    #[test]
    fn replay_after_epoch_advance_is_epoch_mismatch() {
        let p = provider_for(CipherSuiteId::TOY).unwrap();
        let msg = WireMessage {
            suite: CipherSuiteId::TOY,
            epoch: 5,
            sender_leaf: 8,
            body: MessageBody::Update {
                publish: vec![],
                secrets: vec![],
            },
        };
        let key = [7u8; 8];
        let bytes = seal_auth(
            &msg,
            &AuthCredentials {
                epoch_key: Some(&key),
                signing_key: None,
            },
            p.as_ref(),
        )
        .unwrap();
        let ctx = CheckContext {
            expected_epoch: Some(6),
            epoch_key: Some(&key),
            signer_public: None,
        };
        assert_eq!(
            check_auth(&bytes, &ctx, p.as_ref()).err(),
            Some(WireError::EpochMismatch {
                message: 5,
                local: 6
            })
        );
    }

    #[test]
    fn missing_credentials_detected() {
        let p = provider_for(CipherSuiteId::TOY).unwrap();
        let msg = WireMessage {
            suite: CipherSuiteId::TOY,
            epoch: 0,
            sender_leaf: 8,
            body: MessageBody::LeaveRequest { leaver_leaf: 8 },
        };
        assert_eq!(
            seal_auth(&msg, &AuthCredentials::default(), p.as_ref()).err(),
            Some(WireError::MissingCredential)
        );
    }

    #[test]
    fn join_request_size_constant_and_update_affine() {
        // JoinRequest has no tree-dependent field at all
        let msg = &sample_messages()[0];
        assert_eq!(message_size(msg).unwrap(), sealed(msg).len());

        // Update bodies: one publish per path node incl. root, one secret per
        // co-path level; affine in h with zero residual
        let update_for_h = |h: u32| {
            let publish = (0..=h)
                .map(|i| PublishPublicKey {
                    node_index: i + 1,
                    public_key: vec![0; 8],
                })
                .collect();
            let secrets = (0..h)
                .map(|i| UpdateNodesSecretKey {
                    node_index: i + 1,
                    recipient_node: i + 2,
                    ciphertext: vec![0; 16],
                })
                .collect();
            WireMessage {
                suite: CipherSuiteId::TOY,
                epoch: 0,
                sender_leaf: 8,
                body: MessageBody::Update { publish, secrets },
            }
        };
        let sizes: Vec<usize> = (2..=5)
            .map(|h| message_size(&update_for_h(h)).unwrap())
            .collect();
        let delta = sizes[1] - sizes[0];
        assert_eq!(sizes[2] - sizes[1], delta);
        assert_eq!(sizes[3] - sizes[2], delta);
    }

    #[test]
    fn join_failed_strictly_increasing_in_rejections() {
        let mut last = 0;
        for k in 1..=5 {
            let msg = WireMessage {
                suite: CipherSuiteId::TOY,
                epoch: 0,
                sender_leaf: 8,
                body: MessageBody::JoinFailed {
                    rejected_nonces: vec![vec![0; 8]; k],
                },
            };
            let size = message_size(&msg).unwrap();
            assert!(size > last);
            last = size;
        }
    }

    #[test]
    fn welcome_round_trip() {
        let welcome = JoinerWelcome {
            response_nonce_echo: vec![7; 8],
            joiner_leaf: 5,
            epoch: 4,
            epoch_key: vec![9; 8],
            tree_height: 1,
            nodes: vec![
                WelcomeNode {
                    public_key: Some(vec![1; 8]),
                    identity: None,
                    ballast: true,
                },
                WelcomeNode {
                    public_key: Some(vec![2; 8]),
                    identity: Some("a".into()),
                    ballast: false,
                },
                WelcomeNode::default(),
            ],
        };
        let bytes = encode_welcome(&welcome);
        assert_eq!(decode_welcome(&bytes).unwrap(), welcome);
        assert_eq!(
            decode_welcome(&bytes[..bytes.len() - 1]).err(),
            Some(WireError::Truncated)
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]
        #[test]
        fn prop_decode_total_on_arbitrary_bytes(data in proptest::collection::vec(any::<u8>(), 0..1024)) {
            // must never panic; errors are fine
            let _ = decode(&data);
            let _ = decode_welcome(&data);
        }

        #[test]
        fn prop_decode_total_on_mutated_frames(flip in 0usize..4096, byte in any::<u8>(), pick in 0usize..10) {
            let msgs = sample_messages();
            let mut bytes = sealed(&msgs[pick % msgs.len()]);
            let idx = flip % bytes.len();
            bytes[idx] ^= byte;
            let _ = decode(&bytes);
        }
    }

    #[test]
    fn fuzz_decode_large_random_inputs() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        use rand::RngCore;
        for _ in 0..200 {
            let len = (rng.next_u32() % (64 * 1024)) as usize;
            let mut data = vec![0u8; len];
            rng.fill_bytes(&mut data);
            let _ = decode(&data);
        }
    }
}
