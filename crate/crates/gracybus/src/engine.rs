//! The per-device protocol state machine: group genesis, the join handshake
//! in both roles, UPDATE, voluntary and unannounced LEAVE, sponsor and
//! executor election, epoch advancement, and stale-member detection.
//!
//! Each engine owns its whole state and processes exactly one message or tick
//! at a time; members communicate only through broadcast bytes. The engine
//! also attributes every elemental crypto operation to a (message row, phase)
//! pair so the cost model can be checked from the outside.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::crypto::{
    CipherSuiteId, CryptoError, CryptoProvider, OpCounters, provider_for,
};
use crate::pki::{Certificate, TrustAnchor, verify_certificate};
use crate::schedule::{EpochState, ScheduleError};
use crate::tree::{NodeIndex, Occupancy, RatchetTree, TreeError};
use crate::wire::{
    AuthCredentials, CheckContext, GkaPart, JoinerPart, JoinerWelcome, MessageBody, MsgType,
    PublishPublicKey, UpdateNodesSecretKey, WelcomeNode, WireError, WireMessage, check_auth,
    decode, encode_welcome, decode_welcome, seal_auth, SENDER_NON_MEMBER,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("device is not a group member")]
    NotInGroup,
    #[error("a handshake is in flight")]
    MidHandshake,
    #[error("certificate does not verify under the trust anchor")]
    BadCertificate,
    #[error("nonce mismatch")]
    NonceMismatch,
    #[error("no ciphertext in this message is addressed to a key we hold")]
    NoDecryptableCiphertext,
    #[error("sender is not entitled to send this message")]
    BadSender,
    #[error("message is inconsistent with the local tree")]
    TreeMismatch,
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Appendix cost-table row a crypto operation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum CostRow {
    JoinRequest,
    JoinChallenge,
    JoinSendSecret,
    JoinSuccessJoiner,
    JoinSuccessOther,
    JoinFailed,
    Update,
    LeaveRequest,
    LeaveUpdate,
}

impl CostRow {
    pub fn name(&self) -> &'static str {
        match self {
            CostRow::JoinRequest => "Join Request",
            CostRow::JoinChallenge => "Join Challenge",
            CostRow::JoinSendSecret => "Join Send Secret",
            CostRow::JoinSuccessJoiner => "Join Success (Joining Node)",
            CostRow::JoinSuccessOther => "Join Success (Other Nodes)",
            CostRow::JoinFailed => "Join Failed",
            CostRow::Update => "Update",
            CostRow::LeaveRequest => "Leave Request",
            CostRow::LeaveUpdate => "Leave Update",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum CostPhase {
    Generation,
    Verification,
    Update,
}

impl CostPhase {
    pub fn name(&self) -> &'static str {
        match self {
            CostPhase::Generation => "Generation",
            CostPhase::Verification => "Verification",
            CostPhase::Update => "Update",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CostRecord {
    pub row: CostRow,
    pub phase: CostPhase,
    pub ops: OpCounters,
}

/// What a delivery did to this engine, for the bus log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Disposition {
    /// State changed or a response was produced.
    Accepted,
    /// Message was not addressed to this engine's current role.
    Ignored(String),
    /// Message was refused; state is unchanged.
    Rejected(String),
}

#[derive(Debug)]
pub struct DeliveryOutcome {
    pub disposition: Disposition,
    pub responses: Vec<Vec<u8>>,
}

impl DeliveryOutcome {
    fn ignored(reason: &str) -> DeliveryOutcome {
        DeliveryOutcome {
            disposition: Disposition::Ignored(reason.to_string()),
            responses: Vec::new(),
        }
    }

    fn rejected(reason: String) -> DeliveryOutcome {
        DeliveryOutcome {
            disposition: Disposition::Rejected(reason),
            responses: Vec::new(),
        }
    }

    fn accepted(responses: Vec<Vec<u8>>) -> DeliveryOutcome {
        DeliveryOutcome {
            disposition: Disposition::Accepted,
            responses,
        }
    }
}

/// Group-membership state; absent while a device is only a joiner.
#[derive(Debug, Clone)]
struct GroupState {
    tree: RatchetTree,
    own_leaf: NodeIndex,
    epoch: EpochState,
    /// Epoch of the last accepted Update per member identity (join epoch as
    /// baseline).
    last_update: BTreeMap<String, u64>,
}

/// Joiner-side handshake progress.
#[derive(Debug, Clone)]
enum Handshake {
    None,
    Requested {
        joiner_nonce: Vec<u8>,
    },
    Responded {
        joiner_nonce: Vec<u8>,
        sponsor_nonce: Vec<u8>,
        response_nonce: Vec<u8>,
        sponsor_public: Vec<u8>,
        leaf_secret: Vec<u8>,
        hashed_secret: Vec<u8>,
        leaf_public: Vec<u8>,
    },
}

/// Sponsor-side pending join (one in flight at a time).
#[derive(Debug, Clone)]
struct SponsorPending {
    joiner_identity: String,
    joiner_nonce: Vec<u8>,
    joiner_cert: Certificate,
    preliminary_public: Vec<u8>,
    sponsor_nonce: Vec<u8>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StorageCounts {
    pub public_keys: usize,
    pub private_keys: usize,
    pub epoch_keys: usize,
}

/// Diagnostic snapshot used by the simulator log and the metrics report.
#[derive(Debug, Clone, Serialize)]
pub struct InspectReport {
    pub identity: String,
    pub role: String,
    pub epoch: Option<u64>,
    #[serde(skip)]
    pub epoch_key: Option<Vec<u8>>,
    pub own_leaf: Option<NodeIndex>,
    pub tree_height: Option<u32>,
    pub tree_fingerprint: Option<String>,
    pub storage: StorageCounts,
    pub counters: OpCounters,
}

pub struct MemberState {
    identity: String,
    suite: CipherSuiteId,
    provider: Box<dyn CryptoProvider>,
    rng: ChaCha20Rng,
    certificate: Certificate,
    certificate_private: Vec<u8>,
    anchor: TrustAnchor,
    group: Option<GroupState>,
    handshake: Handshake,
    pending_sponsor: Option<SponsorPending>,
    departed: bool,
    update_window: u64,
    cost_log: Vec<CostRecord>,
}

impl MemberState {
    /// A device that is not yet in any group.
    pub fn new_device(
        identity: &str,
        suite: CipherSuiteId,
        certificate: Certificate,
        certificate_private: Vec<u8>,
        anchor: TrustAnchor,
        update_window: u64,
        rng_seed: u64,
    ) -> Result<MemberState, EngineError> {
        let provider = provider_for(suite)?;
        Ok(MemberState {
            identity: identity.to_string(),
            suite,
            provider,
            rng: ChaCha20Rng::seed_from_u64(rng_seed),
            certificate,
            certificate_private,
            anchor,
            group: None,
            handshake: Handshake::None,
            pending_sponsor: None,
            departed: false,
            update_window,
            cost_log: Vec::new(),
        })
    }

    /// Found a new group of one: height-0 tree, fresh leaf secret, epoch 0.
    pub fn create_group(
        identity: &str,
        suite: CipherSuiteId,
        certificate: Certificate,
        certificate_private: Vec<u8>,
        anchor: TrustAnchor,
        update_window: u64,
        rng_seed: u64,
    ) -> Result<MemberState, EngineError> {
        let mut state = MemberState::new_device(
            identity,
            suite,
            certificate,
            certificate_private,
            anchor,
            update_window,
            rng_seed,
        )?;
        if !verify_certificate(state.provider.as_ref(), &state.anchor, &state.certificate) {
            return Err(EngineError::BadCertificate);
        }
        let mut tree = RatchetTree::singleton(identity);
        let pair = state.provider.keypair_random(&mut state.rng);
        let root_secret = pair.private.clone();
        {
            let node = tree.node_mut(1)?;
            node.public_key = Some(pair.public);
            node.private_key = Some(pair.private);
        }
        let epoch = EpochState::genesis(state.provider.as_ref(), &root_secret)?;
        let mut last_update = BTreeMap::new();
        last_update.insert(identity.to_string(), 0);
        state.group = Some(GroupState {
            tree,
            own_leaf: 1,
            epoch,
            last_update,
        });
        Ok(state)
    }

    pub fn identity(&self) -> &str {
        &self.identity
    }

    pub fn is_member(&self) -> bool {
        self.group.is_some() && !self.departed
    }

    pub fn is_departed(&self) -> bool {
        self.departed
    }

    pub fn provider(&self) -> &dyn CryptoProvider {
        self.provider.as_ref()
    }

    pub fn drain_cost_records(&mut self) -> Vec<CostRecord> {
        std::mem::take(&mut self.cost_log)
    }

    /// Deep copy, including provider counters and rng state. Used by the
    /// compromise experiments.
    pub fn clone_state(&self) -> MemberState {
        MemberState {
            identity: self.identity.clone(),
            suite: self.suite,
            provider: self.provider.boxed_clone(),
            rng: self.rng.clone(),
            certificate: self.certificate.clone(),
            certificate_private: self.certificate_private.clone(),
            anchor: self.anchor.clone(),
            group: self.group.clone(),
            handshake: self.handshake.clone(),
            pending_sponsor: self.pending_sponsor.clone(),
            departed: self.departed,
            update_window: self.update_window,
            cost_log: Vec::new(),
        }
    }

    fn push_cost(&mut self, row: CostRow, phase: CostPhase, before: OpCounters) {
        let ops = self.provider.counters().since(&before);
        if !ops.is_zero() {
            self.cost_log.push(CostRecord { row, phase, ops });
        }
    }

    fn push_cost_ops(&mut self, row: CostRow, phase: CostPhase, ops: OpCounters) {
        if !ops.is_zero() {
            self.cost_log.push(CostRecord { row, phase, ops });
        }
    }

    // -- elections ----------------------------------------------------------

    /// The sponsor is the member occupying the rightmost occupied leaf.
    pub fn sponsor_leaf(tree: &RatchetTree) -> Option<NodeIndex> {
        tree.occupied_leaves().into_iter().max()
    }

    /// The LEAVE executor: the smallest-index occupied leaf inside the
    /// smallest subtree enclosing the leaver that holds anyone else.
    pub fn executor_leaf(tree: &RatchetTree, leaver: NodeIndex) -> Option<NodeIndex> {
        let mut node = leaver;
        while node > 1 {
            node = RatchetTree::parent(node);
            let (lo, hi) = tree.subtree_leaves(node).ok()?;
            let candidate = (lo..=hi)
                .filter(|&l| l != leaver && tree.node(l).map(|n| n.is_occupied()).unwrap_or(false))
                .min();
            if let Some(leaf) = candidate {
                return Some(leaf);
            }
        }
        None
    }

    // -- message builders ---------------------------------------------------

    fn header(&self, epoch: u64, sender_leaf: u32, body: MessageBody) -> WireMessage {
        WireMessage {
            suite: self.suite,
            epoch,
            sender_leaf,
            body,
        }
    }

    /// Broadcast a join request. Costs one G for the nonce; the preliminary
    /// public key is the certificate key the sponsor will seal the welcome to.
    pub fn request_join(&mut self) -> Result<Vec<u8>, EngineError> {
        if self.group.is_some() || self.departed {
            return Err(EngineError::MidHandshake);
        }
        let before = self.provider.counters();
        let joiner_nonce = self
            .provider
            .random_bytes(&mut self.rng, self.provider.params().nonce_len);
        let msg = self.header(
            0,
            SENDER_NON_MEMBER,
            MessageBody::JoinRequest {
                certificate: self.certificate.clone(),
                preliminary_public: self.certificate.subject_public.clone(),
                joiner_nonce: joiner_nonce.clone(),
            },
        );
        let bytes = seal_auth(&msg, &AuthCredentials::default(), self.provider.as_ref())?;
        self.push_cost(CostRow::JoinRequest, CostPhase::Generation, before);
        self.handshake = Handshake::Requested { joiner_nonce };
        Ok(bytes)
    }

    /// Rotate the own leaf secret and broadcast the refreshed path.
    pub fn make_update(&mut self) -> Result<Vec<u8>, EngineError> {
        if self.pending_sponsor.is_some() {
            return Err(EngineError::MidHandshake);
        }
        if !self.is_member() {
            return Err(EngineError::NotInGroup);
        }
        let before = self.provider.counters();
        let group = self.group.as_mut().expect("member checked");
        let provider = self.provider.as_ref();

        let height = group.tree.height();
        let own_leaf = group.own_leaf;
        let path = group.tree.path(own_leaf)?;

        // fresh leaf pair; its private key doubles as s_0
        let leaf_pair = provider.keypair_random(&mut self.rng);
        let chain = RatchetTree::derive_path_chain(provider, &leaf_pair.private, height)?;

        let mut publish = vec![PublishPublicKey {
            node_index: own_leaf,
            public_key: leaf_pair.public.clone(),
        }];
        let mut derived: Vec<(NodeIndex, crate::crypto::KeyPair)> = Vec::new();
        for level in 1..height {
            let node = path[level as usize];
            let pair = provider.keypair_from_seed(&chain.secrets[level as usize])?;
            publish.push(PublishPublicKey {
                node_index: node,
                public_key: pair.public.clone(),
            });
            derived.push((node, pair));
        }
        if height > 0 {
            // root holds a public key only; the private half is dropped
            let root_pair = provider.keypair_from_seed(&chain.secrets[height as usize])?;
            publish.push(PublishPublicKey {
                node_index: 1,
                public_key: root_pair.public.clone(),
            });
        }

        let mut secrets = Vec::new();
        for (level, &copath_node) in group.tree.copath(own_leaf)?.iter().enumerate() {
            for recipient in group.tree.resolve_recipients(copath_node, &[]) {
                let recipient_pk = group
                    .tree
                    .node(recipient)?
                    .public_key
                    .clone()
                    .ok_or(EngineError::TreeMismatch)?;
                let ct = provider.seal(&recipient_pk, &chain.secrets[level + 1])?;
                secrets.push(UpdateNodesSecretKey {
                    node_index: path[level + 1],
                    recipient_node: recipient,
                    ciphertext: ct,
                });
            }
        }

        // apply locally: new leaf pair, derived intermediate pairs, root public
        group.tree.apply_public_update(
            &publish
                .iter()
                .map(|p| (p.node_index, p.public_key.clone()))
                .collect::<Vec<_>>(),
        )?;
        {
            let node = group.tree.node_mut(own_leaf)?;
            node.private_key = Some(leaf_pair.private.clone());
        }
        for (node_index, pair) in &derived {
            group.tree.node_mut(*node_index)?.private_key = Some(pair.private.clone());
        }

        let old_epoch = group.epoch.epoch();
        let old_key = group.epoch.key().to_vec();
        group
            .epoch
            .advance(provider, &chain.secrets[height as usize])?;
        group
            .last_update
            .insert(self.identity.clone(), group.epoch.epoch());

        let msg = self.header(
            old_epoch,
            own_leaf,
            MessageBody::Update { publish, secrets },
        );
        let bytes = seal_auth(
            &msg,
            &AuthCredentials {
                epoch_key: Some(&old_key),
                signing_key: None,
            },
            self.provider.as_ref(),
        )?;
        self.push_cost(CostRow::Update, CostPhase::Generation, before);
        Ok(bytes)
    }

    /// Announce a voluntary leave. The leaver stops processing afterwards.
    pub fn make_leave_request(&mut self) -> Result<Vec<u8>, EngineError> {
        if !self.is_member() {
            return Err(EngineError::NotInGroup);
        }
        let before = self.provider.counters();
        let group = self.group.as_ref().expect("member checked");
        let msg = self.header(
            group.epoch.epoch(),
            group.own_leaf,
            MessageBody::LeaveRequest {
                leaver_leaf: group.own_leaf,
            },
        );
        let key = group.epoch.key().to_vec();
        let bytes = seal_auth(
            &msg,
            &AuthCredentials {
                epoch_key: Some(&key),
                signing_key: None,
            },
            self.provider.as_ref(),
        )?;
        self.push_cost(CostRow::LeaveRequest, CostPhase::Generation, before);
        self.departed = true;
        Ok(bytes)
    }

    /// Detect unannounced leaves: any member whose last accepted update lags
    /// by more than the window is evicted by its executor, one per tick.
    pub fn tick(&mut self) -> Option<Vec<u8>> {
        if !self.is_member() || self.pending_sponsor.is_some() {
            return None;
        }
        let group = self.group.as_ref()?;
        let current = group.epoch.epoch();
        let mut stale: Vec<NodeIndex> = group
            .tree
            .occupied_leaves()
            .into_iter()
            .filter(|&leaf| {
                let id = group.tree.node(leaf).ok().and_then(|n| n.identity().map(str::to_string));
                match id {
                    Some(id) if id != self.identity => {
                        let last = group.last_update.get(&id).copied().unwrap_or(0);
                        current.saturating_sub(last) > self.update_window
                    }
                    _ => false,
                }
            })
            .collect();
        stale.sort_unstable();
        let target = *stale.first()?;
        let executor = Self::executor_leaf(&group.tree, target)?;
        if executor != group.own_leaf {
            return None;
        }
        self.build_leave_update(target).ok()
    }

    /// Build, self-apply, and return a LeaveUpdate for `leaver_leaf`.
    fn build_leave_update(&mut self, leaver_leaf: NodeIndex) -> Result<Vec<u8>, EngineError> {
        let before = self.provider.counters();
        let group = self.group.as_mut().ok_or(EngineError::NotInGroup)?;
        let provider = self.provider.as_ref();

        let height = group.tree.height();
        let leaver_identity = group
            .tree
            .node(leaver_leaf)?
            .identity()
            .map(str::to_string)
            .ok_or(EngineError::BadSender)?;
        let path = group.tree.path(leaver_leaf)?;
        let copath = group.tree.copath(leaver_leaf)?;

        // blank the leaver first so it never counts as audience
        {
            let node = group.tree.node_mut(leaver_leaf)?;
            node.occupancy = Some(Occupancy::Blank);
            node.public_key = None;
            node.private_key = None;
        }

        // fresh secret for the leaver's former parent; a random pair whose
        // private half is the chain start
        let first_pair = provider.keypair_random(&mut self.rng);
        let chain = RatchetTree::derive_path_chain(provider, &first_pair.private, height - 1)?;
        // chain.secrets[i] is the secret of path[i + 1]

        let mut publish = vec![PublishPublicKey {
            node_index: path[1],
            public_key: first_pair.public.clone(),
        }];
        let mut derived = vec![(path[1], first_pair.clone())];
        for level in 2..height {
            let node = path[level as usize];
            let pair = provider.keypair_from_seed(&chain.secrets[level as usize - 1])?;
            publish.push(PublishPublicKey {
                node_index: node,
                public_key: pair.public.clone(),
            });
            derived.push((node, pair));
        }
        let root_pair = provider.keypair_from_seed(&chain.secrets[height as usize - 1])?;
        publish.push(PublishPublicKey {
            node_index: 1,
            public_key: root_pair.public.clone(),
        });

        let own_leaf = group.own_leaf;
        let mut secrets = Vec::new();
        for (level, &copath_node) in copath.iter().enumerate() {
            for recipient in group.tree.resolve_recipients(copath_node, &[own_leaf]) {
                let recipient_pk = group
                    .tree
                    .node(recipient)?
                    .public_key
                    .clone()
                    .ok_or(EngineError::TreeMismatch)?;
                let ct = provider.seal(&recipient_pk, &chain.secrets[level])?;
                secrets.push(UpdateNodesSecretKey {
                    node_index: path[level + 1],
                    recipient_node: recipient,
                    ciphertext: ct,
                });
            }
        }

        group.tree.apply_public_update(
            &publish
                .iter()
                .map(|p| (p.node_index, p.public_key.clone()))
                .collect::<Vec<_>>(),
        )?;
        for (node_index, pair) in &derived {
            if group.tree.is_ancestor_or_self(*node_index, own_leaf) {
                group.tree.node_mut(*node_index)?.private_key = Some(pair.private.clone());
            }
        }

        let old_epoch = group.epoch.epoch();
        let old_key = group.epoch.key().to_vec();
        group
            .epoch
            .advance(provider, &chain.secrets[height as usize - 1])?;
        group.last_update.remove(&leaver_identity);

        group.tree.truncate_if_possible();
        group.own_leaf = group
            .tree
            .leaf_of_identity(&self.identity)
            .ok_or(EngineError::TreeMismatch)?;

        let msg = self.header(
            old_epoch,
            own_leaf,
            MessageBody::LeaveUpdate {
                leaver_leaf,
                publish,
                secrets,
            },
        );
        let bytes = seal_auth(
            &msg,
            &AuthCredentials {
                epoch_key: Some(&old_key),
                signing_key: None,
            },
            self.provider.as_ref(),
        )?;
        self.push_cost(CostRow::LeaveUpdate, CostPhase::Generation, before);
        Ok(bytes)
    }

    // -- delivery -----------------------------------------------------------

    /// Process one broadcast frame and return any responses to broadcast.
    pub fn deliver(&mut self, bytes: &[u8]) -> DeliveryOutcome {
        if self.departed {
            return DeliveryOutcome::ignored("departed");
        }
        let frame = match decode(bytes) {
            Ok(f) => f,
            Err(e) => return DeliveryOutcome::rejected(format!("decode: {e}")),
        };
        if frame.message.suite != self.suite {
            return DeliveryOutcome::rejected("suite mismatch".to_string());
        }
        // own broadcasts come back on the bus; state was already applied
        if let Some(group) = &self.group {
            if frame.message.sender_leaf == group.own_leaf
                && frame.message.body.msg_type() != MsgType::JoinRequest
                && frame.message.body.msg_type() != MsgType::JoinSendSecret
            {
                return DeliveryOutcome::ignored("own message");
            }
        }

        let msg_type = frame.message.body.msg_type();
        match msg_type {
            MsgType::JoinRequest => self.on_join_request(bytes),
            MsgType::JoinChallenge => self.on_join_challenge(bytes),
            MsgType::JoinSendSecret => self.on_join_send_secret(bytes),
            MsgType::JoinSuccessCombined => {
                if self.group.is_some() {
                    self.on_join_success_member(bytes)
                } else {
                    self.on_join_success_joiner(bytes)
                }
            }
            MsgType::JoinSuccessJoiner | MsgType::JoinSuccessGka => {
                // decodable subset forms; the engine emits and consumes the
                // combined broadcast only
                DeliveryOutcome::ignored("subset join-success form")
            }
            MsgType::JoinFailed => self.on_join_failed(bytes),
            MsgType::Update => self.on_update(bytes),
            MsgType::LeaveRequest => self.on_leave_request(bytes),
            MsgType::LeaveUpdate => self.on_leave_update(bytes),
        }
    }

    fn on_join_request(&mut self, bytes: &[u8]) -> DeliveryOutcome {
        let Some(group) = &self.group else {
            return DeliveryOutcome::ignored("not a member");
        };
        if Self::sponsor_leaf(&group.tree) != Some(group.own_leaf) {
            return DeliveryOutcome::ignored("not the sponsor");
        }
        if self.pending_sponsor.is_some() {
            return DeliveryOutcome::ignored("handshake in flight");
        }
        let frame = decode(bytes).expect("decoded in deliver");
        let MessageBody::JoinRequest {
            certificate,
            preliminary_public,
            joiner_nonce,
        } = frame.message.body
        else {
            unreachable!()
        };
        if self
            .group
            .as_ref()
            .is_some_and(|g| g.tree.leaf_of_identity(&certificate.identity).is_some())
        {
            return DeliveryOutcome::ignored("identity already in group");
        }

        // challenge: fresh nonce, echoed joiner nonce, own certificate, signed
        let before = self.provider.counters();
        let sponsor_nonce = self
            .provider
            .random_bytes(&mut self.rng, self.provider.params().nonce_len);
        let group = self.group.as_ref().expect("member checked");
        let msg = self.header(
            group.epoch.epoch(),
            group.own_leaf,
            MessageBody::JoinChallenge {
                certificate: self.certificate.clone(),
                sponsor_nonce: sponsor_nonce.clone(),
                joiner_nonce_echo: joiner_nonce.clone(),
            },
        );
        let out = seal_auth(
            &msg,
            &AuthCredentials {
                epoch_key: None,
                signing_key: Some(&self.certificate_private),
            },
            self.provider.as_ref(),
        );
        let bytes_out = match out {
            Ok(b) => b,
            Err(e) => return DeliveryOutcome::rejected(format!("challenge build: {e}")),
        };
        self.push_cost(CostRow::JoinChallenge, CostPhase::Generation, before);
        self.pending_sponsor = Some(SponsorPending {
            joiner_identity: certificate.identity.clone(),
            joiner_nonce,
            joiner_cert: certificate,
            preliminary_public,
            sponsor_nonce,
        });
        DeliveryOutcome::accepted(vec![bytes_out])
    }

    fn on_join_challenge(&mut self, bytes: &[u8]) -> DeliveryOutcome {
        let Handshake::Requested { joiner_nonce } = &self.handshake else {
            return DeliveryOutcome::ignored("no join in progress");
        };
        let joiner_nonce = joiner_nonce.clone();
        let frame = decode(bytes).expect("decoded in deliver");
        let MessageBody::JoinChallenge {
            certificate,
            sponsor_nonce,
            joiner_nonce_echo,
        } = &frame.message.body
        else {
            unreachable!()
        };
        // addressing filter before any counted verification
        if *joiner_nonce_echo != joiner_nonce {
            return DeliveryOutcome::ignored("challenge for another joiner");
        }

        // verification: certificate chain, signature, echoed nonce
        let before = self.provider.counters();
        let cert_ok = verify_certificate(self.provider.as_ref(), &self.anchor, certificate);
        let sig_ok = check_auth(
            bytes,
            &CheckContext {
                expected_epoch: None,
                epoch_key: None,
                signer_public: Some(&certificate.subject_public),
            },
            self.provider.as_ref(),
        )
        .is_ok();
        let nonce_ok = self.provider.nonce_equal(joiner_nonce_echo, &joiner_nonce);
        self.push_cost(CostRow::JoinChallenge, CostPhase::Verification, before);
        if !cert_ok || !sig_ok {
            return DeliveryOutcome::rejected("challenge authentication failed".to_string());
        }
        if !nonce_ok {
            return DeliveryOutcome::rejected("nonce mismatch".to_string());
        }

        // response: leaf secret, response nonce, hashed secret sealed to the
        // sponsor's certificate key, signed
        let before = self.provider.counters();
        let params = self.provider.params();
        let leaf_secret = self.provider.random_bytes(&mut self.rng, params.public_key_len);
        let response_nonce = self.provider.random_bytes(&mut self.rng, params.nonce_len);
        let hashed_secret = self.provider.hash(&leaf_secret);
        let leaf_pair = match self.provider.keypair_from_seed(&leaf_secret) {
            Ok(p) => p,
            Err(e) => return DeliveryOutcome::rejected(format!("leaf pair: {e}")),
        };
        let sealed_secret = match self
            .provider
            .seal(&certificate.subject_public, &hashed_secret)
        {
            Ok(ct) => ct,
            Err(e) => return DeliveryOutcome::rejected(format!("seal: {e}")),
        };
        let msg = self.header(
            0,
            SENDER_NON_MEMBER,
            MessageBody::JoinSendSecret {
                sponsor_nonce_echo: sponsor_nonce.clone(),
                response_nonce: response_nonce.clone(),
                leaf_public: leaf_pair.public.clone(),
                sealed_secret,
            },
        );
        let out = seal_auth(
            &msg,
            &AuthCredentials {
                epoch_key: None,
                signing_key: Some(&self.certificate_private),
            },
            self.provider.as_ref(),
        );
        let bytes_out = match out {
            Ok(b) => b,
            Err(e) => return DeliveryOutcome::rejected(format!("send-secret build: {e}")),
        };
        self.push_cost(CostRow::JoinSendSecret, CostPhase::Generation, before);
        self.handshake = Handshake::Responded {
            joiner_nonce,
            sponsor_nonce: sponsor_nonce.clone(),
            response_nonce,
            sponsor_public: certificate.subject_public.clone(),
            leaf_secret,
            hashed_secret,
            leaf_public: leaf_pair.public,
        };
        DeliveryOutcome::accepted(vec![bytes_out])
    }

    fn on_join_send_secret(&mut self, bytes: &[u8]) -> DeliveryOutcome {
        let Some(pending) = self.pending_sponsor.clone() else {
            return DeliveryOutcome::ignored("no pending handshake");
        };
        if self.group.is_none() {
            return DeliveryOutcome::ignored("not a member");
        }
        let frame = decode(bytes).expect("decoded in deliver");
        let MessageBody::JoinSendSecret {
            sponsor_nonce_echo,
            response_nonce,
            leaf_public,
            sealed_secret,
        } = &frame.message.body
        else {
            unreachable!()
        };
        if *sponsor_nonce_echo != pending.sponsor_nonce {
            return DeliveryOutcome::ignored("response for another handshake");
        }

        // verification: joiner certificate, signature, echoed sponsor nonce,
        // and the sealed hashed secret must open under our certificate key
        let before = self.provider.counters();
        let cert_ok =
            verify_certificate(self.provider.as_ref(), &self.anchor, &pending.joiner_cert);
        let sig_ok = check_auth(
            bytes,
            &CheckContext {
                expected_epoch: None,
                epoch_key: None,
                signer_public: Some(&pending.joiner_cert.subject_public),
            },
            self.provider.as_ref(),
        )
        .is_ok();
        let nonce_ok = self
            .provider
            .nonce_equal(sponsor_nonce_echo, &pending.sponsor_nonce);
        let hashed_secret = if cert_ok && sig_ok && nonce_ok {
            self.provider
                .open(&self.certificate_private, sealed_secret)
                .ok()
        } else {
            None
        };
        self.push_cost(CostRow::JoinSendSecret, CostPhase::Verification, before);

        if !cert_ok || !sig_ok || !nonce_ok || hashed_secret.is_none() {
            // signed failure listing the rejected request nonce
            let before = self.provider.counters();
            let group = self.group.as_ref().expect("member checked");
            let msg = self.header(
                group.epoch.epoch(),
                group.own_leaf,
                MessageBody::JoinFailed {
                    rejected_nonces: vec![pending.joiner_nonce.clone()],
                },
            );
            let out = seal_auth(
                &msg,
                &AuthCredentials {
                    epoch_key: None,
                    signing_key: Some(&self.certificate_private),
                },
                self.provider.as_ref(),
            );
            self.push_cost(CostRow::JoinFailed, CostPhase::Generation, before);
            self.pending_sponsor = None;
            return match out {
                Ok(b) => DeliveryOutcome::accepted(vec![b]),
                Err(e) => DeliveryOutcome::rejected(format!("failure build: {e}")),
            };
        }

        let hashed_secret = hashed_secret.expect("checked above");
        match self.build_join_success(&pending, response_nonce, leaf_public, &hashed_secret) {
            Ok(out) => {
                self.pending_sponsor = None;
                DeliveryOutcome::accepted(vec![out])
            }
            Err(e) => DeliveryOutcome::rejected(format!("join success build: {e}")),
        }
    }

    /// Sponsor path: insert the joiner, refresh its path, and emit the
    /// combined success broadcast.
    fn build_join_success(
        &mut self,
        pending: &SponsorPending,
        response_nonce: &[u8],
        joiner_leaf_public: &[u8],
        hashed_secret: &[u8],
    ) -> Result<Vec<u8>, EngineError> {
        let gka_before = self.provider.counters();
        let group = self.group.as_mut().ok_or(EngineError::NotInGroup)?;
        let provider = self.provider.as_ref();

        if group.tree.is_full() {
            group.tree.expand()?;
            group.own_leaf = RatchetTree::expanded_index(group.own_leaf);
        }
        let joiner_leaf = group
            .tree
            .leftmost_unused_leaf()
            .ok_or(EngineError::TreeMismatch)?;
        {
            let node = group.tree.node_mut(joiner_leaf)?;
            node.occupancy = Some(Occupancy::Occupied {
                identity: pending.joiner_identity.clone(),
            });
            node.public_key = Some(joiner_leaf_public.to_vec());
            node.private_key = None;
        }

        let height = group.tree.height();
        let path = group.tree.path(joiner_leaf)?;
        let copath = group.tree.copath(joiner_leaf)?;

        // chain above the joiner's hashed secret: s_1 arrives, s_2..s_h hashed
        let chain = RatchetTree::derive_path_chain(provider, hashed_secret, height - 1)?;
        // chain.secrets[i] is the secret of path[i + 1]

        let mut publish = vec![PublishPublicKey {
            node_index: joiner_leaf,
            public_key: joiner_leaf_public.to_vec(),
        }];
        let mut derived = Vec::new();
        for level in 1..height {
            let node = path[level as usize];
            let pair = provider.keypair_from_seed(&chain.secrets[level as usize - 1])?;
            publish.push(PublishPublicKey {
                node_index: node,
                public_key: pair.public.clone(),
            });
            derived.push((node, pair));
        }
        let root_pair = provider.keypair_from_seed(&chain.secrets[height as usize - 1])?;
        publish.push(PublishPublicKey {
            node_index: 1,
            public_key: root_pair.public.clone(),
        });

        let own_leaf = group.own_leaf;
        let mut secrets = Vec::new();
        for (level, &copath_node) in copath.iter().enumerate() {
            for recipient in group.tree.resolve_recipients(copath_node, &[own_leaf]) {
                let recipient_pk = group
                    .tree
                    .node(recipient)?
                    .public_key
                    .clone()
                    .ok_or(EngineError::TreeMismatch)?;
                let ct = provider.seal(&recipient_pk, &chain.secrets[level])?;
                secrets.push(UpdateNodesSecretKey {
                    node_index: path[level + 1],
                    recipient_node: recipient,
                    ciphertext: ct,
                });
            }
        }

        group.tree.apply_public_update(
            &publish
                .iter()
                .map(|p| (p.node_index, p.public_key.clone()))
                .collect::<Vec<_>>(),
        )?;
        for (node_index, pair) in &derived {
            if group.tree.is_ancestor_or_self(*node_index, own_leaf) {
                group.tree.node_mut(*node_index)?.private_key = Some(pair.private.clone());
            }
        }
        let gka_delta = self.provider.counters().since(&gka_before);
        self.push_cost_ops(CostRow::JoinSuccessOther, CostPhase::Generation, gka_delta);

        // joiner part: advance the epoch, then seal the welcome snapshot to
        // the joiner's preliminary key
        let joiner_before = self.provider.counters();
        let group = self.group.as_mut().expect("member checked");
        let old_epoch = group.epoch.epoch();
        let old_key = group.epoch.key().to_vec();
        group
            .epoch
            .advance(self.provider.as_ref(), &chain.secrets[height as usize - 1])?;
        group
            .last_update
            .insert(pending.joiner_identity.clone(), group.epoch.epoch());

        let welcome = JoinerWelcome {
            response_nonce_echo: response_nonce.to_vec(),
            joiner_leaf,
            epoch: group.epoch.epoch(),
            epoch_key: group.epoch.key().to_vec(),
            tree_height: height,
            nodes: Self::welcome_image(&group.tree),
        };
        let sealed = self
            .provider
            .seal(&pending.preliminary_public, &encode_welcome(&welcome))?;

        let msg = self.header(
            old_epoch,
            own_leaf,
            MessageBody::JoinSuccessCombined {
                gka: GkaPart {
                    joiner_leaf,
                    joiner_identity: pending.joiner_identity.clone(),
                    publish,
                    secrets,
                },
                joiner: JoinerPart { sealed },
            },
        );
        let pre_trailer = self.provider.counters();
        let bytes = seal_auth(
            &msg,
            &AuthCredentials {
                epoch_key: Some(&old_key),
                signing_key: Some(&self.certificate_private),
            },
            self.provider.as_ref(),
        )?;
        // the one trailer call covers both halves: the MAC belongs to the GKA
        // row, the signature to the joiner row
        let trailer_delta = self.provider.counters().since(&pre_trailer);
        let joiner_delta = self
            .provider
            .counters()
            .since(&joiner_before)
            .since(&trailer_delta);
        self.push_cost_ops(
            CostRow::JoinSuccessOther,
            CostPhase::Generation,
            OpCounters {
                m: trailer_delta.m,
                ..OpCounters::default()
            },
        );
        self.push_cost_ops(
            CostRow::JoinSuccessJoiner,
            CostPhase::Generation,
            OpCounters {
                s: trailer_delta.s,
                ..joiner_delta
            },
        );
        Ok(bytes)
    }

    fn on_join_success_joiner(&mut self, bytes: &[u8]) -> DeliveryOutcome {
        let Handshake::Responded {
            response_nonce,
            sponsor_public,
            leaf_secret,
            hashed_secret,
            leaf_public,
            ..
        } = &self.handshake
        else {
            return DeliveryOutcome::ignored("no handshake response outstanding");
        };
        let response_nonce = response_nonce.clone();
        let sponsor_public = sponsor_public.clone();
        let leaf_secret = leaf_secret.clone();
        let hashed_secret = hashed_secret.clone();
        let leaf_public = leaf_public.clone();

        let frame = decode(bytes).expect("decoded in deliver");
        let MessageBody::JoinSuccessCombined { gka, joiner } = &frame.message.body else {
            unreachable!()
        };
        if gka.joiner_identity != self.identity {
            return DeliveryOutcome::ignored("success for another joiner");
        }

        // verification: sponsor signature (certificate checked at challenge)
        let verif_before = self.provider.counters();
        let sig_ok = check_auth(
            bytes,
            &CheckContext {
                expected_epoch: None,
                epoch_key: None,
                signer_public: Some(&sponsor_public),
            },
            self.provider.as_ref(),
        )
        .is_ok();
        self.push_cost(CostRow::JoinSuccessJoiner, CostPhase::Verification, verif_before);
        if !sig_ok {
            return DeliveryOutcome::rejected("join success signature failed".to_string());
        }

        // update: open the welcome, check the echoed nonce, install the tree
        let update_before = self.provider.counters();
        let welcome_bytes = match self.provider.open(&self.certificate_private, &joiner.sealed) {
            Ok(b) => b,
            Err(e) => return DeliveryOutcome::rejected(format!("welcome open: {e}")),
        };
        let welcome = match decode_welcome(&welcome_bytes) {
            Ok(w) => w,
            Err(e) => return DeliveryOutcome::rejected(format!("welcome decode: {e}")),
        };
        let nonce_ok = self
            .provider
            .nonce_equal(&welcome.response_nonce_echo, &response_nonce);
        // the nonce comparison is verification work even though it must
        // follow the open
        let nonce_delta = self.provider.counters().since(&update_before);
        self.push_cost_ops(
            CostRow::JoinSuccessJoiner,
            CostPhase::Verification,
            OpCounters {
                n: nonce_delta.n,
                ..OpCounters::default()
            },
        );
        if !nonce_ok {
            return DeliveryOutcome::rejected("welcome nonce mismatch".to_string());
        }
        if welcome.joiner_leaf != gka.joiner_leaf {
            return DeliveryOutcome::rejected("welcome/gka leaf mismatch".to_string());
        }

        let update_mid = self.provider.counters();
        match self.install_welcome(&welcome, &leaf_secret, &hashed_secret, &leaf_public) {
            Ok(()) => {
                let mut delta = self.provider.counters().since(&update_mid);
                delta.e += nonce_delta.e; // the welcome open
                delta.n = 0;
                self.push_cost_ops(CostRow::JoinSuccessJoiner, CostPhase::Update, delta);
                self.handshake = Handshake::None;
                DeliveryOutcome::accepted(Vec::new())
            }
            Err(e) => DeliveryOutcome::rejected(format!("welcome install: {e}")),
        }
    }

    fn install_welcome(
        &mut self,
        welcome: &JoinerWelcome,
        leaf_secret: &[u8],
        hashed_secret: &[u8],
        leaf_public: &[u8],
    ) -> Result<(), EngineError> {
        let provider = self.provider.as_ref();
        let height = welcome.tree_height;
        let mut tree = RatchetTree::blank(height);
        if welcome.nodes.len() != tree.node_count() as usize {
            return Err(EngineError::TreeMismatch);
        }
        for (i, image) in welcome.nodes.iter().enumerate() {
            let index = (i + 1) as NodeIndex;
            let node = tree.node_mut(index)?;
            node.public_key = image.public_key.clone();
            node.ballast = image.ballast;
            if tree.is_leaf(index) {
                if let Some(identity) = &image.identity {
                    tree.node_mut(index)?.occupancy = Some(Occupancy::Occupied {
                        identity: identity.clone(),
                    });
                }
            } else if image.identity.is_some() {
                return Err(EngineError::TreeMismatch);
            }
        }
        let own_leaf = welcome.joiner_leaf;
        if tree.node(own_leaf)?.identity() != Some(&self.identity)
            || tree.node(own_leaf)?.public_key.as_deref() != Some(leaf_public)
        {
            return Err(EngineError::TreeMismatch);
        }

        // own path: leaf pair from the leaf secret, intermediates from the
        // hashed-secret chain; published keys must agree
        tree.node_mut(own_leaf)?.private_key = Some(leaf_secret.to_vec());
        let path = tree.path(own_leaf)?;
        let chain = RatchetTree::derive_path_chain(provider, hashed_secret, height - 1)?;
        for level in 1..height {
            let node = path[level as usize];
            let pair = provider.keypair_from_seed(&chain.secrets[level as usize - 1])?;
            if tree.node(node)?.public_key.as_deref() != Some(&pair.public[..]) {
                return Err(EngineError::TreeMismatch);
            }
            tree.node_mut(node)?.private_key = Some(pair.private.clone());
        }

        let mut last_update = BTreeMap::new();
        for leaf in tree.occupied_leaves() {
            if let Some(id) = tree.node(leaf)?.identity() {
                last_update.insert(id.to_string(), welcome.epoch);
            }
        }
        self.group = Some(GroupState {
            tree,
            own_leaf,
            epoch: EpochState::install(welcome.epoch, welcome.epoch_key.clone()),
            last_update,
        });
        Ok(())
    }

    fn on_join_success_member(&mut self, bytes: &[u8]) -> DeliveryOutcome {
        let frame = decode(bytes).expect("decoded in deliver");
        let MessageBody::JoinSuccessCombined { gka, .. } = &frame.message.body else {
            unreachable!()
        };
        let group = self.group.as_ref().expect("member path");

        // verification: epoch-bound MAC
        let before = self.provider.counters();
        let key = group.epoch.key().to_vec();
        let auth = check_auth(
            bytes,
            &CheckContext {
                expected_epoch: Some(group.epoch.epoch()),
                epoch_key: Some(&key),
                signer_public: None,
            },
            self.provider.as_ref(),
        );
        self.push_cost(CostRow::JoinSuccessOther, CostPhase::Verification, before);
        if let Err(e) = auth {
            return DeliveryOutcome::rejected(format!("auth: {e}"));
        }

        let before = self.provider.counters();
        match self.apply_join_success(frame.message.sender_leaf, gka) {
            Ok(()) => {
                self.push_cost(CostRow::JoinSuccessOther, CostPhase::Update, before);
                DeliveryOutcome::accepted(Vec::new())
            }
            Err(e) => {
                self.push_cost(CostRow::JoinSuccessOther, CostPhase::Update, before);
                DeliveryOutcome::rejected(format!("apply: {e}"))
            }
        }
    }

    fn apply_join_success(
        &mut self,
        sender_leaf: u32,
        gka: &GkaPart,
    ) -> Result<(), EngineError> {
        let group = self.group.as_mut().ok_or(EngineError::NotInGroup)?;
        let provider = self.provider.as_ref();

        // work on a copy so a rejected message leaves no trace
        let mut tree = group.tree.clone();
        let mut own_leaf = group.own_leaf;

        let expected_leaf = if tree.is_full() {
            3 * tree.leaf_slots()
        } else {
            tree.leftmost_unused_leaf().expect("not full")
        };
        if gka.joiner_leaf != expected_leaf {
            return Err(EngineError::TreeMismatch);
        }
        // the sponsor must be the rightmost occupied leaf of the pre-insert view
        let sponsor = Self::sponsor_leaf(&tree).ok_or(EngineError::BadSender)?;
        let expected_sender = if tree.is_full() {
            RatchetTree::expanded_index(sponsor)
        } else {
            sponsor
        };
        if sender_leaf != expected_sender {
            return Err(EngineError::BadSender);
        }
        if tree.leaf_of_identity(&gka.joiner_identity).is_some() {
            return Err(EngineError::TreeMismatch);
        }

        if tree.is_full() {
            tree.expand()?;
            own_leaf = RatchetTree::expanded_index(own_leaf);
        }
        {
            let node = tree.node_mut(gka.joiner_leaf)?;
            node.occupancy = Some(Occupancy::Occupied {
                identity: gka.joiner_identity.clone(),
            });
        }

        let secret = Self::apply_path_message(
            provider,
            &mut tree,
            own_leaf,
            gka.joiner_leaf,
            &gka.publish,
            &gka.secrets,
            true,
        )?;

        group.tree = tree;
        group.own_leaf = own_leaf;
        group.epoch.advance(provider, &secret)?;
        let epoch_now = group.epoch.epoch();
        group
            .last_update
            .insert(gka.joiner_identity.clone(), epoch_now);
        Ok(())
    }

    /// Shared receive path for Update / LeaveUpdate / the GKA part: validate
    /// the publish set, open the one addressed ciphertext, hash up the chain,
    /// re-derive shared pairs, and return the root secret.
    #[allow(clippy::too_many_arguments)]
    fn apply_path_message(
        provider: &dyn CryptoProvider,
        tree: &mut RatchetTree,
        own_leaf: NodeIndex,
        updated_leaf: NodeIndex,
        publish: &[PublishPublicKey],
        secrets: &[UpdateNodesSecretKey],
        include_leaf: bool,
    ) -> Result<Vec<u8>, EngineError> {
        let height = tree.height();
        let path = tree.path(updated_leaf)?;

        // the publish set must be exactly the refreshed path (leaf for
        // update/join, intermediates, root), nothing else
        let mut expected: Vec<NodeIndex> = Vec::new();
        if include_leaf {
            expected.push(updated_leaf);
        }
        for level in 1..height {
            expected.push(path[level as usize]);
        }
        if height > 0 {
            expected.push(1);
        } else {
            expected.push(updated_leaf);
            expected.dedup();
        }
        let mut got: Vec<NodeIndex> = publish.iter().map(|p| p.node_index).collect();
        got.sort_unstable();
        let mut want = expected.clone();
        want.sort_unstable();
        want.dedup();
        if got != want {
            return Err(EngineError::TreeMismatch);
        }

        // locate the one ciphertext sealed to a key on our path
        let mut opened: Option<(usize, Vec<u8>)> = None;
        for unsk in secrets {
            if !tree.is_valid(unsk.recipient_node) || !tree.is_valid(unsk.node_index) {
                return Err(EngineError::TreeMismatch);
            }
            if !tree.is_ancestor_or_self(unsk.recipient_node, own_leaf) {
                continue;
            }
            let Some(private) = tree.node(unsk.recipient_node)?.private_key.clone() else {
                continue;
            };
            let level = path
                .iter()
                .position(|&p| p == unsk.node_index)
                .ok_or(EngineError::TreeMismatch)?;
            let secret = provider.open(&private, &unsk.ciphertext)?;
            opened = Some((level, secret));
            break;
        }
        let (mut level, mut secret) = opened.ok_or(EngineError::NoDecryptableCiphertext)?;

        tree.apply_public_update(
            &publish
                .iter()
                .map(|p| (p.node_index, p.public_key.clone()))
                .collect::<Vec<_>>(),
        )?;

        // walk up: re-derive pairs for shared path nodes, hash to the root
        loop {
            if level < height as usize {
                let node = path[level];
                if tree.is_ancestor_or_self(node, own_leaf) {
                    let pair = provider.keypair_from_seed(&secret)?;
                    if tree.node(node)?.public_key.as_deref() != Some(&pair.public[..]) {
                        return Err(EngineError::TreeMismatch);
                    }
                    tree.node_mut(node)?.private_key = Some(pair.private.clone());
                }
            }
            if level == height as usize {
                break;
            }
            secret = provider.hash(&secret);
            level += 1;
        }
        Ok(secret)
    }

    fn on_update(&mut self, bytes: &[u8]) -> DeliveryOutcome {
        if self.group.is_none() {
            return DeliveryOutcome::ignored("not a member");
        }
        let frame = decode(bytes).expect("decoded in deliver");
        let MessageBody::Update { publish, secrets } = &frame.message.body else {
            unreachable!()
        };

        let group = self.group.as_ref().expect("member path");
        let before = self.provider.counters();
        let key = group.epoch.key().to_vec();
        let auth = check_auth(
            bytes,
            &CheckContext {
                expected_epoch: Some(group.epoch.epoch()),
                epoch_key: Some(&key),
                signer_public: None,
            },
            self.provider.as_ref(),
        );
        self.push_cost(CostRow::Update, CostPhase::Verification, before);
        if let Err(e) = auth {
            return DeliveryOutcome::rejected(format!("auth: {e}"));
        }

        let sender_leaf = frame.message.sender_leaf;
        let group = self.group.as_ref().expect("member path");
        let sender_identity = match group
            .tree
            .node(sender_leaf)
            .ok()
            .and_then(|n| n.identity().map(str::to_string))
        {
            Some(id) => id,
            None => return DeliveryOutcome::rejected("sender is not an occupied leaf".into()),
        };

        let before = self.provider.counters();
        let result = (|| -> Result<(), EngineError> {
            let group = self.group.as_mut().expect("member path");
            let mut tree = group.tree.clone();
            let secret = Self::apply_path_message(
                self.provider.as_ref(),
                &mut tree,
                group.own_leaf,
                sender_leaf,
                publish,
                secrets,
                true,
            )?;
            group.tree = tree;
            group.epoch.advance(self.provider.as_ref(), &secret)?;
            let epoch_now = group.epoch.epoch();
            group.last_update.insert(sender_identity.clone(), epoch_now);
            Ok(())
        })();
        self.push_cost(CostRow::Update, CostPhase::Update, before);
        match result {
            Ok(()) => DeliveryOutcome::accepted(Vec::new()),
            Err(e) => DeliveryOutcome::rejected(format!("apply: {e}")),
        }
    }

    fn on_leave_request(&mut self, bytes: &[u8]) -> DeliveryOutcome {
        if self.group.is_none() {
            return DeliveryOutcome::ignored("not a member");
        }
        let frame = decode(bytes).expect("decoded in deliver");
        let MessageBody::LeaveRequest { leaver_leaf } = frame.message.body else {
            unreachable!()
        };

        let group = self.group.as_ref().expect("member path");
        let before = self.provider.counters();
        let key = group.epoch.key().to_vec();
        let auth = check_auth(
            bytes,
            &CheckContext {
                expected_epoch: Some(group.epoch.epoch()),
                epoch_key: Some(&key),
                signer_public: None,
            },
            self.provider.as_ref(),
        );
        self.push_cost(CostRow::LeaveRequest, CostPhase::Verification, before);
        if let Err(e) = auth {
            return DeliveryOutcome::rejected(format!("auth: {e}"));
        }
        if frame.message.sender_leaf != leaver_leaf {
            return DeliveryOutcome::rejected("leave request for another leaf".into());
        }
        let group = self.group.as_ref().expect("member path");
        if !group
            .tree
            .node(leaver_leaf)
            .map(|n| n.is_occupied())
            .unwrap_or(false)
        {
            return DeliveryOutcome::rejected("leaver leaf not occupied".into());
        }

        // only the executor responds
        if Self::executor_leaf(&group.tree, leaver_leaf) != Some(group.own_leaf) {
            return DeliveryOutcome::accepted(Vec::new());
        }
        match self.build_leave_update(leaver_leaf) {
            Ok(bytes) => DeliveryOutcome::accepted(vec![bytes]),
            Err(e) => DeliveryOutcome::rejected(format!("leave update build: {e}")),
        }
    }

    fn on_leave_update(&mut self, bytes: &[u8]) -> DeliveryOutcome {
        if self.group.is_none() {
            return DeliveryOutcome::ignored("not a member");
        }
        let frame = decode(bytes).expect("decoded in deliver");
        let MessageBody::LeaveUpdate {
            leaver_leaf,
            publish,
            secrets,
        } = &frame.message.body
        else {
            unreachable!()
        };

        let group = self.group.as_ref().expect("member path");
        let before = self.provider.counters();
        let key = group.epoch.key().to_vec();
        let auth = check_auth(
            bytes,
            &CheckContext {
                expected_epoch: Some(group.epoch.epoch()),
                epoch_key: Some(&key),
                signer_public: None,
            },
            self.provider.as_ref(),
        );
        self.push_cost(CostRow::LeaveUpdate, CostPhase::Verification, before);
        if let Err(e) = auth {
            return DeliveryOutcome::rejected(format!("auth: {e}"));
        }

        let group = self.group.as_ref().expect("member path");
        if *leaver_leaf == group.own_leaf {
            // the group is removing us; nothing in this message opens for us
            self.departed = true;
            return DeliveryOutcome::accepted(Vec::new());
        }
        if !group
            .tree
            .node(*leaver_leaf)
            .map(|n| n.is_occupied())
            .unwrap_or(false)
        {
            return DeliveryOutcome::rejected("leaver leaf not occupied".into());
        }
        if Self::executor_leaf(&group.tree, *leaver_leaf) != Some(frame.message.sender_leaf) {
            return DeliveryOutcome::rejected("sender is not the executor".into());
        }

        let before = self.provider.counters();
        let result = (|| -> Result<(), EngineError> {
            let group = self.group.as_mut().expect("member path");
            let leaver_identity = group
                .tree
                .node(*leaver_leaf)?
                .identity()
                .map(str::to_string);
            let mut tree = group.tree.clone();
            {
                let node = tree.node_mut(*leaver_leaf)?;
                node.occupancy = Some(Occupancy::Blank);
                node.public_key = None;
                node.private_key = None;
            }
            let secret = Self::apply_path_message(
                self.provider.as_ref(),
                &mut tree,
                group.own_leaf,
                *leaver_leaf,
                publish,
                secrets,
                false,
            )?;
            tree.truncate_if_possible();
            group.own_leaf = tree
                .leaf_of_identity(&self.identity)
                .ok_or(EngineError::TreeMismatch)?;
            group.tree = tree;
            group.epoch.advance(self.provider.as_ref(), &secret)?;
            if let Some(id) = leaver_identity {
                group.last_update.remove(&id);
            }
            Ok(())
        })();
        self.push_cost(CostRow::LeaveUpdate, CostPhase::Update, before);
        match result {
            Ok(()) => DeliveryOutcome::accepted(Vec::new()),
            Err(e) => DeliveryOutcome::rejected(format!("apply: {e}")),
        }
    }

    fn on_join_failed(&mut self, bytes: &[u8]) -> DeliveryOutcome {
        let Handshake::Responded {
            joiner_nonce,
            sponsor_public,
            ..
        } = &self.handshake
        else {
            return DeliveryOutcome::ignored("no handshake response outstanding");
        };
        let frame = decode(bytes).expect("decoded in deliver");
        let MessageBody::JoinFailed { rejected_nonces } = &frame.message.body else {
            unreachable!()
        };
        if !rejected_nonces.iter().any(|n| n == joiner_nonce) {
            return DeliveryOutcome::ignored("failure for another joiner");
        }
        let sponsor_public = sponsor_public.clone();
        let before = self.provider.counters();
        let sig_ok = check_auth(
            bytes,
            &CheckContext {
                expected_epoch: None,
                epoch_key: None,
                signer_public: Some(&sponsor_public),
            },
            self.provider.as_ref(),
        )
        .is_ok();
        self.push_cost(CostRow::JoinFailed, CostPhase::Verification, before);
        if !sig_ok {
            return DeliveryOutcome::rejected("join failed signature invalid".to_string());
        }
        self.handshake = Handshake::None;
        DeliveryOutcome::accepted(Vec::new())
    }

    // -- inspection ---------------------------------------------------------

    fn welcome_image(tree: &RatchetTree) -> Vec<WelcomeNode> {
        (1..=tree.node_count())
            .map(|i| {
                let node = tree.node(i).expect("in range");
                WelcomeNode {
                    public_key: node.public_key.clone(),
                    identity: node.identity().map(str::to_string),
                    ballast: node.ballast,
                }
            })
            .collect()
    }

    pub fn inspect(&self) -> InspectReport {
        let role = if self.departed {
            "departed"
        } else if self.group.is_some() {
            "member"
        } else {
            match self.handshake {
                Handshake::None => "idle",
                Handshake::Requested { .. } => "joiner-requested",
                Handshake::Responded { .. } => "joiner-responded",
            }
        };
        let storage = StorageCounts {
            public_keys: self
                .group
                .as_ref()
                .map(|g| g.tree.stored_public_keys())
                .unwrap_or(0)
                + 2, // own certificate key + trust anchor key
            private_keys: self
                .group
                .as_ref()
                .map(|g| g.tree.stored_private_keys())
                .unwrap_or(0)
                + 1, // certificate private key
            epoch_keys: usize::from(self.group.is_some()),
        };
        InspectReport {
            identity: self.identity.clone(),
            role: role.to_string(),
            epoch: self.group.as_ref().map(|g| g.epoch.epoch()),
            epoch_key: self.group.as_ref().map(|g| g.epoch.key().to_vec()),
            own_leaf: self.group.as_ref().map(|g| g.own_leaf),
            tree_height: self.group.as_ref().map(|g| g.tree.height()),
            tree_fingerprint: self
                .group
                .as_ref()
                .map(|g| format!("{:016x}", g.tree.fingerprint())),
            storage,
            counters: self.provider.counters(),
        }
    }

    /// Every private key this engine still holds (tree path keys plus the
    /// certificate key). Compromise experiments probe ciphertexts with these.
    pub fn held_private_keys(&self) -> Vec<Vec<u8>> {
        let mut out = Vec::new();
        if let Some(group) = &self.group {
            for i in 1..=group.tree.node_count() {
                if let Ok(node) = group.tree.node(i) {
                    if let Some(private) = &node.private_key {
                        out.push(private.clone());
                    }
                }
            }
        }
        out.push(self.certificate_private.clone());
        out
    }

    /// Canonical serialization of all retained protocol state, for the
    /// forward-secrecy checks (the deterministic rng is harness plumbing and
    /// not part of protocol state).
    pub fn state_dump(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let mut put = |tag: &str, bytes: &[u8]| {
            out.extend_from_slice(tag.as_bytes());
            out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
            out.extend_from_slice(bytes);
        };
        put("identity", self.identity.as_bytes());
        put("cert.pub", &self.certificate.subject_public);
        put("cert.sig", &self.certificate.signature);
        put("cert.priv", &self.certificate_private);
        put("anchor", &self.anchor.ca_public);
        if let Some(group) = &self.group {
            put("epoch", &group.epoch.epoch().to_be_bytes());
            put("epoch.key", group.epoch.key());
            put("own_leaf", &group.own_leaf.to_be_bytes());
            for i in 1..=group.tree.node_count() {
                let node = group.tree.node(i).expect("in range");
                if let Some(pk) = &node.public_key {
                    put("node.pub", pk);
                }
                if let Some(sk) = &node.private_key {
                    put("node.priv", sk);
                }
                if let Some(id) = node.identity() {
                    put("node.id", id.as_bytes());
                }
            }
            for (id, epoch) in &group.last_update {
                put("seen.id", id.as_bytes());
                put("seen.epoch", &epoch.to_be_bytes());
            }
        }
        match &self.handshake {
            Handshake::None => {}
            Handshake::Requested { joiner_nonce } => put("hs.nonce", joiner_nonce),
            Handshake::Responded {
                joiner_nonce,
                sponsor_nonce,
                response_nonce,
                sponsor_public,
                leaf_secret,
                hashed_secret,
                leaf_public,
            } => {
                put("hs.nonce", joiner_nonce);
                put("hs.sponsor_nonce", sponsor_nonce);
                put("hs.response_nonce", response_nonce);
                put("hs.sponsor_pub", sponsor_public);
                put("hs.leaf_secret", leaf_secret);
                put("hs.hashed", hashed_secret);
                put("hs.leaf_pub", leaf_public);
            }
        }
        if let Some(p) = &self.pending_sponsor {
            put("sp.joiner", p.joiner_identity.as_bytes());
            put("sp.nonce", &p.joiner_nonce);
            put("sp.sponsor_nonce", &p.sponsor_nonce);
            put("sp.prelim", &p.preliminary_public);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::TestCa;
    use crate::sim::{Bus, Origin};
    use crate::tree::Occupancy;

    fn group_of(n: u32, seed: u64) -> Bus {
        let ca = TestCa::new(seed);
        let mut bus = Bus::new();
        bus.attach(ca.member_engine("d000", 8, seed + 100)).unwrap();
        for i in 1..n {
            let name = format!("d{i:03}");
            let id = bus
                .attach(ca.joiner_engine(&name, 8, seed + 100 + u64::from(i)))
                .unwrap();
            let req = bus.engine_mut(id).unwrap().request_join().unwrap();
            bus.broadcast(Origin::Member(id), req);
            bus.run_until_quiescent(256).unwrap();
        }
        assert!(bus.converged());
        bus
    }

    #[test]
    fn create_group_storage_and_epoch() {
        let ca = TestCa::new(1);
        let engine = ca.member_engine("solo", 8, 5);
        let report = engine.inspect();
        assert_eq!(report.epoch, Some(0));
        // n=1: one tree key each way, plus certificate and CA material
        assert_eq!(report.storage.public_keys, 3);
        assert_eq!(report.storage.private_keys, 2);
        assert_eq!(report.storage.epoch_keys, 1);
        assert_eq!(report.own_leaf, Some(1));
    }

    #[test]
    fn create_group_rejects_rogue_certificate() {
        let ca = TestCa::new(2);
        let (cert, private) = ca.rogue_cert("evil", 9);
        let result = MemberState::create_group(
            "evil",
            ca.suite(),
            cert,
            private,
            ca.anchor().clone(),
            8,
            9,
        );
        assert!(matches!(result, Err(EngineError::BadCertificate)));
    }

    #[test]
    fn singleton_update_has_one_publish_and_no_secrets() {
        let ca = TestCa::new(3);
        let mut engine = ca.member_engine("solo", 8, 5);
        let bytes = engine.make_update().unwrap();
        let frame = decode(&bytes).unwrap();
        let MessageBody::Update { publish, secrets } = frame.message.body else {
            panic!("not an update");
        };
        assert_eq!(publish.len(), 1);
        assert!(secrets.is_empty());
        assert_eq!(engine.inspect().epoch, Some(1));
    }

    #[test]
    fn update_requires_membership() {
        let ca = TestCa::new(4);
        let mut joiner = ca.joiner_engine("lonely", 8, 6);
        assert!(matches!(joiner.make_update(), Err(EngineError::NotInGroup)));
        assert!(matches!(
            joiner.make_leave_request(),
            Err(EngineError::NotInGroup)
        ));
    }

    #[test]
    fn all_members_derive_identical_epoch_key_after_update() {
        let mut bus = group_of(8, 10);
        let update = bus.engine_mut(3).unwrap().make_update().unwrap();
        bus.broadcast(Origin::Member(3), update);
        bus.run_until_quiescent(32).unwrap();
        assert!(bus.converged());
        let views = bus.member_views();
        assert_eq!(views.len(), 8);
        assert_eq!(views[0].1, 8); // 7 joins + 1 update
    }

    #[test]
    fn replayed_update_is_rejected_and_state_unchanged() {
        let mut bus = group_of(4, 11);
        let update = bus.engine_mut(0).unwrap().make_update().unwrap();
        bus.broadcast(Origin::Member(0), update.clone());
        bus.run_until_quiescent(32).unwrap();
        let before = bus.engine(1).unwrap().inspect();
        let outcome = bus.engine_mut(1).unwrap().deliver(&update);
        assert!(matches!(outcome.disposition, Disposition::Rejected(_)));
        let after = bus.engine(1).unwrap().inspect();
        assert_eq!(before.epoch, after.epoch);
        assert_eq!(before.tree_fingerprint, after.tree_fingerprint);
    }

    #[test]
    fn epoch_never_decreases_across_a_long_run() {
        let mut bus = group_of(4, 12);
        let mut last = bus.engine(0).unwrap().inspect().epoch.unwrap();
        for round in 0..12 {
            let id = round % 4;
            let update = bus.engine_mut(id).unwrap().make_update().unwrap();
            bus.broadcast(Origin::Member(id), update);
            bus.run_until_quiescent(32).unwrap();
            let now = bus.engine(0).unwrap().inspect().epoch.unwrap();
            assert!(now >= last);
            last = now;
        }
    }

    #[test]
    fn sponsor_election_is_unique_for_every_occupancy() {
        for h in 0..=3u32 {
            let slots = 1u32 << h;
            let first = 1u32 << h;
            for mask in 1u64..(1 << slots) {
                let mut tree = RatchetTree::blank(h);
                for b in 0..slots {
                    if mask & (1 << b) != 0 {
                        tree.node_mut(first + b).unwrap().occupancy =
                            Some(Occupancy::Occupied {
                                identity: format!("m{b}"),
                            });
                    }
                }
                let sponsor = MemberState::sponsor_leaf(&tree).unwrap();
                let rightmost = tree.occupied_leaves().into_iter().max().unwrap();
                assert_eq!(sponsor, rightmost, "h={h} mask={mask:b}");
            }
        }
    }

    #[test]
    fn executor_prefers_the_leaver_sibling_subtree() {
        let mut tree = RatchetTree::blank(2);
        for (leaf, name) in [(4, "a"), (5, "b"), (6, "c"), (7, "d")] {
            tree.node_mut(leaf).unwrap().occupancy = Some(Occupancy::Occupied {
                identity: name.to_string(),
            });
        }
        assert_eq!(MemberState::executor_leaf(&tree, 5), Some(4));
        assert_eq!(MemberState::executor_leaf(&tree, 4), Some(5));
        // sibling blank: nearest in the smallest enclosing subtree
        tree.node_mut(4).unwrap().occupancy = Some(Occupancy::Blank);
        assert_eq!(MemberState::executor_leaf(&tree, 5), Some(6));
        tree.node_mut(6).unwrap().occupancy = Some(Occupancy::Blank);
        assert_eq!(MemberState::executor_leaf(&tree, 5), Some(7));
        // nobody else: no executor
        tree.node_mut(7).unwrap().occupancy = Some(Occupancy::Blank);
        assert_eq!(MemberState::executor_leaf(&tree, 5), None);
    }

    #[test]
    fn eviction_window_boundary() {
        // window 3: a member lagging exactly 3 epochs is retained, 4 evicts
        let mut bus = group_of(3, 13);
        for id in bus.member_ids() {
            bus.engine_mut(id).unwrap().drain_cost_records();
        }
        // d002 joined at epoch 2 and stays silent; d000/d001 alternate
        // updates so only d002 goes stale (window is 8)
        let window = 8u64;
        let baseline = 2u64;
        for round in 0..window {
            let id = (round % 2) as usize;
            let update = bus.engine_mut(id).unwrap().make_update().unwrap();
            bus.broadcast(Origin::Member(id), update);
            bus.run_until_quiescent(32).unwrap();
        }
        assert_eq!(
            bus.engine(0).unwrap().inspect().epoch,
            Some(baseline + window)
        );
        // lag == W: retained
        bus.tick_all();
        bus.run_until_quiescent(32).unwrap();
        assert!(bus.engine(2).unwrap().is_member());
        // one more epoch: lag == W+1, evicted on the next tick
        let update = bus.engine_mut(1).unwrap().make_update().unwrap();
        bus.broadcast(Origin::Member(1), update);
        bus.run_until_quiescent(32).unwrap();
        bus.tick_all();
        bus.run_until_quiescent(32).unwrap();
        assert!(bus.engine(2).unwrap().is_departed());
        assert!(bus.converged());
        let views = bus.member_views();
        assert_eq!(views.len(), 2);
    }

    #[test]
    fn evicted_member_update_is_rejected() {
        let mut bus = group_of(3, 14);
        // silence d002 past the window while the others stay live
        for round in 0..9 {
            let id = (round % 2) as usize;
            let update = bus.engine_mut(id).unwrap().make_update().unwrap();
            bus.broadcast(Origin::Member(id), update);
            bus.run_until_quiescent(32).unwrap();
        }
        bus.tick_all();
        bus.run_until_quiescent(32).unwrap();
        assert!(bus.engine(2).unwrap().is_departed());
        // its stale update is rejected by everyone
        let stale = {
            let clone = bus.engine(2).unwrap().clone_state();
            let mut revived = clone;
            revived.departed = false;
            revived.make_update().unwrap()
        };
        let views = bus.member_views();
        bus.broadcast(Origin::Adversary, stale);
        bus.run_until_quiescent(32).unwrap();
        assert_eq!(bus.member_views(), views);
    }

    #[test]
    fn rogue_certificate_join_gets_join_failed() {
        let ca = TestCa::new(15);
        let mut bus = Bus::new();
        bus.attach(ca.member_engine("d000", 8, 300)).unwrap();
        let rogue = bus.attach(ca.rogue_joiner_engine("mallory", 8, 301)).unwrap();
        let req = bus.engine_mut(rogue).unwrap().request_join().unwrap();
        bus.broadcast(Origin::Member(rogue), req);
        bus.run_until_quiescent(64).unwrap();
        let types: Vec<_> = bus
            .log()
            .iter()
            .filter_map(|r| r.msg_type.clone())
            .collect();
        assert!(types.contains(&"JoinFailed".to_string()));
        assert!(!bus.engine(rogue).unwrap().is_member());
        // the group is unchanged: still a singleton at epoch 0
        assert_eq!(bus.engine(0).unwrap().inspect().epoch, Some(0));
    }

    #[test]
    fn leave_request_from_non_member_key_is_rejected() {
        let mut bus = group_of(2, 16);
        // forge a leave request without the epoch key
        let forged = {
            let msg = WireMessage {
                suite: CipherSuiteId::TOY,
                epoch: bus.engine(0).unwrap().inspect().epoch.unwrap(),
                sender_leaf: 2,
                body: MessageBody::LeaveRequest { leaver_leaf: 2 },
            };
            let provider = crate::crypto::provider_for(CipherSuiteId::TOY).unwrap();
            let wrong_key = [9u8; 8];
            crate::wire::seal_auth(
                &msg,
                &AuthCredentials {
                    epoch_key: Some(&wrong_key),
                    signing_key: None,
                },
                provider.as_ref(),
            )
            .unwrap()
        };
        let views = bus.member_views();
        bus.broadcast(Origin::Adversary, forged);
        bus.run_until_quiescent(32).unwrap();
        assert_eq!(bus.member_views(), views);
    }

    #[test]
    fn mid_handshake_sponsor_refuses_update_and_parks_other_joins() {
        let ca = TestCa::new(17);
        let mut bus = Bus::new();
        bus.attach(ca.member_engine("d000", 8, 400)).unwrap();
        let j1 = bus.attach(ca.joiner_engine("d001", 8, 401)).unwrap();
        let j2 = bus.attach(ca.joiner_engine("d002", 8, 402)).unwrap();
        let req = bus.engine_mut(j1).unwrap().request_join().unwrap();
        bus.broadcast(Origin::Member(j1), req);
        bus.step(); // only the request delivered: sponsor now has a pending
        assert!(matches!(
            bus.engine_mut(0).unwrap().make_update(),
            Err(EngineError::MidHandshake)
        ));
        // a second join request is parked, not challenged
        let req2 = bus.engine_mut(j2).unwrap().request_join().unwrap();
        bus.broadcast(Origin::Member(j2), req2);
        bus.run_until_quiescent(64).unwrap();
        assert!(bus.engine(j1).unwrap().is_member());
        assert!(!bus.engine(j2).unwrap().is_member());
    }

    #[test]
    fn state_dump_contains_no_previous_epoch_key() {
        let mut bus = group_of(4, 18);
        let old_key = bus.engine(0).unwrap().inspect().epoch_key.unwrap();
        let update = bus.engine_mut(1).unwrap().make_update().unwrap();
        bus.broadcast(Origin::Member(1), update);
        bus.run_until_quiescent(32).unwrap();
        for id in bus.member_ids() {
            let dump = bus.engine(id).unwrap().state_dump();
            assert!(
                !dump.windows(old_key.len()).any(|w| w == &old_key[..]),
                "member {id} retains the superseded epoch key"
            );
        }
    }
}
