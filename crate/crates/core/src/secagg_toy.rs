//! A scalar secure-aggregation toy over a prime field: pairwise one-time
//! pads, Shamir shares for dropout recovery and per-user blinding values.
//!
//! Users are indexed from 0. User `i` uploads
//! `Y_i = x_i + sum_{j>i} S_ij - sum_{j<i} S_ij + b_i`.
//!
//! Rounds:
//! 0. offline: pads are agreed and every pad `S_ij` (owned by `i < j`) and
//!    every blinding value `b_i` is Shamir-shared to all `n` users;
//! 1. live users upload; the responders form `U`;
//! 2. the server announces the dropouts and asks each member of `U`
//!    for its own `b_i` and its pads with dropped users;
//! 3. values that went missing in round 2 are rebuilt from shares held
//!    by the users still live.
//!
//! A dropout schedule lists who disappears before rounds 1, 2 and 3. The
//! run fails as soon as fewer than `t` users are live in a round that needs
//! them.

use crate::error::{Error, Result};
use crate::rng::{Seed, Stream};
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Add, Mul, Neg, Sub};

/// The Mersenne prime `2^31 - 1`.
pub const DEFAULT_Q: u64 = (1 << 31) - 1;

fn mul_mod(a: u64, b: u64, q: u64) -> u64 {
    ((a as u128 * b as u128) % q as u128) as u64
}

fn pow_mod(mut b: u64, mut e: u64, q: u64) -> u64 {
    let mut acc = 1 % q;
    b %= q;
    while e > 0 {
        if e & 1 == 1 {
            acc = mul_mod(acc, b, q);
        }
        b = mul_mod(b, b, q);
        e >>= 1;
    }
    acc
}

/// Deterministic Miller-Rabin, exact for all `u64`.
pub fn is_prime(q: u64) -> bool {
    if q < 2 {
        return false;
    }
    const BASES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    for p in BASES {
        if q.is_multiple_of(p) {
            return q == p;
        }
    }
    let mut d = q - 1;
    let mut s = 0;
    while d.is_multiple_of(2) {
        d /= 2;
        s += 1;
    }
    'outer: for a in BASES {
        let mut x = pow_mod(a, d, q);
        if x == 1 || x == q - 1 {
            continue;
        }
        for _ in 1..s {
            x = mul_mod(x, x, q);
            if x == q - 1 {
                continue 'outer;
            }
        }
        return false;
    }
    true
}

/// Element of `F_q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FieldElement {
    value: u64,
    q: u64,
}

impl FieldElement {
    /// Reduces `value` modulo a prime `q`.
    pub fn new(value: u64, q: u64) -> Result<Self> {
        if !is_prime(q) {
            return Err(Error::Domain(format!("modulus {q} is not prime")));
        }
        Ok(Self { value: value % q, q })
    }

    fn raw(value: u64, q: u64) -> Self {
        Self { value: value % q, q }
    }

    pub fn value(&self) -> u64 {
        self.value
    }
    pub fn modulus(&self) -> u64 {
        self.q
    }

    pub fn zero(q: u64) -> Self {
        Self { value: 0, q }
    }

    /// Multiplicative inverse; `None` for zero.
    pub fn inv(self) -> Option<Self> {
        (self.value != 0).then(|| Self::raw(pow_mod(self.value, self.q - 2, self.q), self.q))
    }

    /// Uniform element.
    pub fn random(q: u64, stream: &mut Stream) -> Self {
        Self::raw(stream.below(q), q)
    }
}

impl Add for FieldElement {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        debug_assert_eq!(self.q, o.q);
        let (s, over) = self.value.overflowing_add(o.value);
        Self::raw(if over || s >= self.q { s.wrapping_sub(self.q) } else { s }, self.q)
    }
}

impl Neg for FieldElement {
    type Output = Self;

    fn neg(self) -> Self {
        Self::raw(if self.value == 0 { 0 } else { self.q - self.value }, self.q)
    }
}

impl Sub for FieldElement {
    type Output = Self;

    fn sub(self, o: Self) -> Self {
        self + (-o)
    }
}

impl Mul for FieldElement {
    type Output = Self;

    fn mul(self, o: Self) -> Self {
        Self::raw(mul_mod(self.value, o.value, self.q), self.q)
    }
}

/// Which secret a share belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SecretLabel {
    /// Pad shared by users `i < j`.
    Pad { i: usize, j: usize },
    /// Blinding value of a user.
    Blind { user: usize },
}

impl SecretLabel {
    fn owner(&self) -> usize {
        match *self {
            SecretLabel::Pad { i, .. } => i,
            SecretLabel::Blind { user } => user,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShamirShare {
    pub holder: usize,
    /// Non-zero point the polynomial was evaluated at.
    pub point: FieldElement,
    pub value: FieldElement,
    pub threshold: usize,
    pub secret_owner: usize,
    pub label: SecretLabel,
}

/// Splits `secret` into `n` shares, any `t` of which reconstruct it.
/// Holder `k` receives the evaluation at `k + 1`.
pub fn shamir_share(
    secret: FieldElement,
    t: usize,
    n: usize,
    label: SecretLabel,
    stream: &mut Stream,
) -> Result<Vec<ShamirShare>> {
    let q = secret.q;
    if n as u64 >= q {
        return Err(Error::FieldTooSmall { q, n });
    }
    if t == 0 || t > n {
        return Err(Error::Domain(format!("need 1 <= t <= n (t={t}, n={n})")));
    }
    let coeffs: Vec<FieldElement> = core::iter::once(secret)
        .chain((1..t).map(|_| FieldElement::random(q, stream)))
        .collect();
    Ok((0..n)
        .map(|k| {
            let x = FieldElement::raw(k as u64 + 1, q);
            let value = coeffs.iter().rev().fold(FieldElement::zero(q), |acc, &c| acc.mul(x).add(c));
            ShamirShare { holder: k, point: x, value, threshold: t, secret_owner: label.owner(), label }
        })
        .collect())
}

/// Lagrange interpolation at zero over all given shares.
pub fn shamir_reconstruct(shares: &[ShamirShare]) -> Result<FieldElement> {
    let first = shares.first().ok_or(Error::InsufficientShares { needed: 1, got: 0 })?;
    if shares.iter().any(|s| {
        s.label != first.label
            || s.secret_owner != first.secret_owner
            || s.threshold != first.threshold
            || s.point.q != first.point.q
    }) {
        return Err(Error::ShareLabel);
    }
    if shares.len() < first.threshold {
        return Err(Error::InsufficientShares { needed: first.threshold, got: shares.len() });
    }
    let mut seen = BTreeSet::new();
    for s in shares {
        if !seen.insert(s.point.value) {
            return Err(Error::DuplicatePoint(s.point.value));
        }
    }
    let q = first.point.q;
    let mut acc = FieldElement::zero(q);
    for (a, sa) in shares.iter().enumerate() {
        let mut num = FieldElement::raw(1, q);
        let mut den = FieldElement::raw(1, q);
        for (b, sb) in shares.iter().enumerate() {
            if a != b {
                num = num.mul(sb.point.neg());
                den = den.mul(sa.point.sub(sb.point));
            }
        }
        let w = num.mul(den.inv().ok_or(Error::DuplicatePoint(sa.point.value))?);
        acc = acc.add(sa.value.mul(w));
    }
    Ok(acc)
}

/// Endpoint of a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Party {
    Server,
    User(usize),
}

/// What a message carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageKind {
    PairSeed,
    PadShare,
    BlindShare,
    Upload,
    DropoutNotice,
    PadReveal,
    BlindReveal,
    ShareRequest,
    ShareReveal,
}

impl MessageKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MessageKind::PairSeed => "pair_seed",
            MessageKind::PadShare => "pad_share",
            MessageKind::BlindShare => "blind_share",
            MessageKind::Upload => "upload",
            MessageKind::DropoutNotice => "dropout_notice",
            MessageKind::PadReveal => "pad_reveal",
            MessageKind::BlindReveal => "blind_reveal",
            MessageKind::ShareRequest => "share_request",
            MessageKind::ShareReveal => "share_reveal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub round: usize,
    pub sender: Party,
    pub receiver: Party,
    pub kind: MessageKind,
    pub bytes: Vec<u8>,
}

/// Outcome of the aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Sum(FieldElement),
    /// Only `live` users remained in `round`, fewer than the threshold.
    Failure { round: usize, live: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SecAggTranscript {
    pub messages: Vec<Message>,
    pub outcome: Outcome,
    /// Users whose uploads arrived.
    pub responders: Vec<usize>,
    /// Pads the server learned, keyed by `(i, j)` with `i < j`.
    pub recovered_pads: BTreeMap<(usize, usize), FieldElement>,
    /// Blinding values the server learned.
    pub recovered_blinds: BTreeMap<usize, FieldElement>,
}

impl SecAggTranscript {
    /// Number of online rounds with at least one message.
    pub fn online_rounds(&self) -> usize {
        self.messages.iter().filter(|m| m.round > 0).map(|m| m.round).collect::<BTreeSet<_>>().len()
    }

    pub fn online_bytes(&self) -> usize {
        self.messages.iter().filter(|m| m.round > 0).map(|m| m.bytes.len()).sum()
    }
}

/// Who drops before each online round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DropoutSchedule {
    /// `waves[r]` drop before online round `r + 1`; at most three waves.
    pub waves: Vec<Vec<usize>>,
}

impl DropoutSchedule {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(waves: Vec<Vec<usize>>) -> Self {
        Self { waves }
    }

    fn wave(&self, r: usize) -> &[usize] {
        self.waves.get(r).map_or(&[], |w| w.as_slice())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SecAggOptions {
    pub q: u64,
    pub t: usize,
    pub blinding: bool,
    /// Forces this user's blinding value to zero.
    pub zero_blind: Option<usize>,
}

impl SecAggOptions {
    pub fn new(t: usize) -> Self {
        Self { q: DEFAULT_Q, t, blinding: true, zero_blind: None }
    }
}

fn encode_elem(v: FieldElement) -> Vec<u8> {
    v.value.to_le_bytes().to_vec()
}

fn encode_share(s: &ShamirShare) -> Vec<u8> {
    let (tag, a, b) = match s.label {
        SecretLabel::Pad { i, j } => (0u8, i as u32, j as u32),
        SecretLabel::Blind { user } => (1u8, user as u32, 0),
    };
    let mut out = vec![tag];
    out.extend_from_slice(&a.to_le_bytes());
    out.extend_from_slice(&b.to_le_bytes());
    out.extend_from_slice(&s.point.value.to_le_bytes());
    out.extend_from_slice(&s.value.value.to_le_bytes());
    out
}

fn encode_label(l: &SecretLabel) -> Vec<u8> {
    match *l {
        SecretLabel::Pad { i, j } => [&[0u8][..], &(i as u32).to_le_bytes(), &(j as u32).to_le_bytes()].concat(),
        SecretLabel::Blind { user } => [&[1u8][..], &(user as u32).to_le_bytes()].concat(),
    }
}

/// Secrets dealt in the offline round.
struct Offline {
    pads: BTreeMap<(usize, usize), FieldElement>,
    blinds: Vec<FieldElement>,
    /// shares[label][holder]
    shares: BTreeMap<SecretLabel, Vec<ShamirShare>>,
}

fn offline(n: usize, opts: &SecAggOptions, stream: &mut Stream, log: &mut Vec<Message>) -> Result<Offline> {
    let q = opts.q;
    let mut pads = BTreeMap::new();
    let mut shares = BTreeMap::new();
    for i in 0..n {
        for j in i + 1..n {
            let s = FieldElement::random(q, stream);
            pads.insert((i, j), s);
            log.push(Message {
                round: 0,
                sender: Party::User(i),
                receiver: Party::User(j),
                kind: MessageKind::PairSeed,
                bytes: encode_elem(s),
            });
            let label = SecretLabel::Pad { i, j };
            let sh = shamir_share(s, opts.t, n, label, stream)?;
            for share in &sh {
                if share.holder != i {
                    log.push(Message {
                        round: 0,
                        sender: Party::User(i),
                        receiver: Party::User(share.holder),
                        kind: MessageKind::PadShare,
                        bytes: encode_share(share),
                    });
                }
            }
            shares.insert(label, sh);
        }
    }
    let mut blinds = Vec::with_capacity(n);
    for i in 0..n {
        let b = if !opts.blinding || opts.zero_blind == Some(i) {
            FieldElement::zero(q)
        } else {
            FieldElement::random(q, stream)
        };
        blinds.push(b);
        if opts.blinding {
            let label = SecretLabel::Blind { user: i };
            let sh = shamir_share(b, opts.t, n, label, stream)?;
            for share in &sh {
                if share.holder != i {
                    log.push(Message {
                        round: 0,
                        sender: Party::User(i),
                        receiver: Party::User(share.holder),
                        kind: MessageKind::BlindShare,
                        bytes: encode_share(share),
                    });
                }
            }
            shares.insert(label, sh);
        }
    }
    Ok(Offline { pads, blinds, shares })
}

/// `x_i + sum_{j>i} S_ij - sum_{j<i} S_ij + b_i`.
fn upload(i: usize, n: usize, x: FieldElement, off: &Offline) -> FieldElement {
    let mut y = x.add(off.blinds[i]);
    for j in 0..n {
        if j > i {
            y = y.add(off.pads[&(i, j)]);
        } else if j < i {
            y = y.sub(off.pads[&(j, i)]);
        }
    }
    y
}

fn pad_key(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

fn validate(inputs: &[FieldElement], schedule: &DropoutSchedule, opts: &SecAggOptions) -> Result<usize> {
    let n = inputs.len();
    if n < 2 {
        return Err(Error::Config(format!("need at least two users, got {n}")));
    }
    if !is_prime(opts.q) {
        return Err(Error::Domain(format!("modulus {} is not prime", opts.q)));
    }
    if n as u64 >= opts.q {
        return Err(Error::FieldTooSmall { q: opts.q, n });
    }
    if opts.t == 0 || opts.t > n {
        return Err(Error::Config(format!("need 1 <= t <= n (t={}, n={n})", opts.t)));
    }
    if inputs.iter().any(|x| x.q != opts.q) {
        return Err(Error::Domain("input from a different field".into()));
    }
    if schedule.waves.len() > 3 {
        return Err(Error::Config(format!("at most three dropout waves, got {}", schedule.waves.len())));
    }
    let mut seen = BTreeSet::new();
    for &u in schedule.waves.iter().flatten() {
        if u >= n || !seen.insert(u) {
            return Err(Error::Config(format!("bad or repeated user {u} in dropout schedule")));
        }
    }
    Ok(n)
}

/// Runs the protocol on scalar inputs.
pub fn secagg_run(
    inputs: &[FieldElement],
    schedule: &DropoutSchedule,
    opts: &SecAggOptions,
    seed: &Seed,
) -> Result<SecAggTranscript> {
    let n = validate(inputs, schedule, opts)?;
    let q = opts.q;
    let mut stream = seed.child(b"cordp/secagg", &[]).stream();
    let mut log = Vec::new();
    let off = offline(n, opts, &mut stream, &mut log)?;
    let mut live: BTreeSet<usize> = (0..n).collect();
    let mut recovered_pads = BTreeMap::new();
    let mut recovered_blinds = BTreeMap::new();
    let fail = |log: Vec<Message>, round, live: usize, responders, pads, blinds| SecAggTranscript {
        messages: log,
        outcome: Outcome::Failure { round, live },
        responders,
        recovered_pads: pads,
        recovered_blinds: blinds,
    };

    // Round 1: uploads.
    for u in schedule.wave(0) {
        live.remove(u);
    }
    let responders: Vec<usize> = live.iter().copied().collect();
    if live.len() < opts.t {
        return Ok(fail(log, 1, live.len(), responders, recovered_pads, recovered_blinds));
    }
    let mut a1 = FieldElement::zero(q);
    for &i in &responders {
        let y = upload(i, n, inputs[i], &off);
        a1 = a1.add(y);
        log.push(Message { round: 1, sender: Party::User(i), receiver: Party::Server, kind: MessageKind::Upload, bytes: encode_elem(y) });
    }
    let dropped: Vec<usize> = (0..n).filter(|u| !live.contains(u)).collect();

    // Pads to cancel and blinds to remove.
    let mut needed: Vec<SecretLabel> = Vec::new();
    for &v in &dropped {
        for &j in &responders {
            let (i, j) = pad_key(v, j);
            needed.push(SecretLabel::Pad { i, j });
        }
    }
    if opts.blinding {
        needed.extend(responders.iter().map(|&u| SecretLabel::Blind { user: u }));
    }

    if !needed.is_empty() {
        // Round 2: announce dropouts, collect values directly.
        for u in schedule.wave(1) {
            live.remove(u);
        }
        let notice: Vec<u8> = dropped.iter().flat_map(|&v| (v as u32).to_le_bytes()).collect();
        for &u in &responders {
            log.push(Message { round: 2, sender: Party::Server, receiver: Party::User(u), kind: MessageKind::DropoutNotice, bytes: notice.clone() });
        }
        if live.len() < opts.t {
            return Ok(fail(log, 2, live.len(), responders, recovered_pads, recovered_blinds));
        }
        for &label in &needed {
            match label {
                SecretLabel::Pad { i, j } => {
                    // The responder end of the pad reveals it.
                    let holder = if live.contains(&i) && responders.contains(&i) { i } else { j };
                    if live.contains(&holder) && responders.contains(&holder) {
                        let s = off.pads[&(i, j)];
                        recovered_pads.insert((i, j), s);
                        log.push(Message { round: 2, sender: Party::User(holder), receiver: Party::Server, kind: MessageKind::PadReveal, bytes: [encode_label(&label), encode_elem(s)].concat() });
                    }
                }
                SecretLabel::Blind { user } => {
                    if live.contains(&user) {
                        let b = off.blinds[user];
                        recovered_blinds.insert(user, b);
                        log.push(Message { round: 2, sender: Party::User(user), receiver: Party::Server, kind: MessageKind::BlindReveal, bytes: [encode_label(&label), encode_elem(b)].concat() });
                    }
                }
            }
        }
        let missing: Vec<SecretLabel> = needed
            .iter()
            .copied()
            .filter(|l| match *l {
                SecretLabel::Pad { i, j } => !recovered_pads.contains_key(&(i, j)),
                SecretLabel::Blind { user } => !recovered_blinds.contains_key(&user),
            })
            .collect();

        if !missing.is_empty() {
            // Round 3: rebuild the rest from shares.
            for u in schedule.wave(2) {
                live.remove(u);
            }
            let request: Vec<u8> = missing.iter().flat_map(encode_label).collect();
            for &u in &responders {
                log.push(Message { round: 3, sender: Party::Server, receiver: Party::User(u), kind: MessageKind::ShareRequest, bytes: request.clone() });
            }
            if live.len() < opts.t {
                return Ok(fail(log, 3, live.len(), responders, recovered_pads, recovered_blinds));
            }
            for &label in &missing {
                let pool: Vec<ShamirShare> = off.shares[&label]
                    .iter()
                    .filter(|s| live.contains(&s.holder))
                    .take(opts.t)
                    .copied()
                    .collect();
                for s in &pool {
                    log.push(Message { round: 3, sender: Party::User(s.holder), receiver: Party::Server, kind: MessageKind::ShareReveal, bytes: encode_share(s) });
                }
                let secret = shamir_reconstruct(&pool)?;
                match label {
                    SecretLabel::Pad { i, j } => {
                        recovered_pads.insert((i, j), secret);
                    }
                    SecretLabel::Blind { user } => {
                        recovered_blinds.insert(user, secret);
                    }
                }
            }
        }
    }

    // Unmask: remove blinds, cancel pads of dropped users.
    let mut a2 = a1;
    for b in recovered_blinds.values() {
        a2 = a2.sub(*b);
    }
    for &v in &dropped {
        for &j in &responders {
            let s = recovered_pads[&pad_key(v, j)];
            // Y_j carries +S_jv when j < v and -S_vj when j > v.
            a2 = if j < v { a2.sub(s) } else { a2.add(s) };
        }
    }
    Ok(SecAggTranscript { messages: log, outcome: Outcome::Sum(a2), responders, recovered_pads, recovered_blinds })
}

/// What the server can extract from a late upload.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelayedResponseReport {
    pub planted_x2: FieldElement,
    /// Late upload minus the pads the server recovered, without blinding.
    pub unblinded_recovered: FieldElement,
    /// The same quantity with blinding: `x_2 + b_2`.
    pub blinded_residual: FieldElement,
    pub b2: FieldElement,
    pub unblinded_sum: Outcome,
    pub blinded_sum: Outcome,
}

/// The four-user scenario: user 2 (index 1) misses round 1, user 3
/// (index 2) drops before round 2, `t = 2`. Afterwards user 2's upload
/// arrives late and the server strips the pads it recovered.
pub fn delayed_response_demo(q: u64, seed: &Seed, force_zero_b2: bool) -> Result<DelayedResponseReport> {
    let mut stream = seed.child(b"cordp/delayed", &[]).stream();
    let inputs: Vec<FieldElement> = (0..4).map(|_| FieldElement::random(q, &mut stream)).collect();
    let schedule = DropoutSchedule::new(vec![vec![1], vec![2]]);
    let run = |blinding: bool| -> Result<(FieldElement, FieldElement, Outcome)> {
        let opts = SecAggOptions { q, t: 2, blinding, zero_blind: force_zero_b2.then_some(1) };
        let tr = secagg_run(&inputs, &schedule, &opts, seed)?;
        // Rebuild the late upload exactly as user 2 would have sent it.
        let mut sub = stream_for(seed);
        let off = offline(4, &opts, &mut sub, &mut Vec::new())?;
        let late = upload(1, 4, inputs[1], &off);
        let mut residual = late;
        for j in 0..4 {
            if j == 1 {
                continue;
            }
            let s = tr.recovered_pads.get(&pad_key(1, j)).copied().ok_or_else(|| {
                Error::Domain(format!("pad (1, {j}) was not recovered"))
            })?;
            residual = if j > 1 { residual.sub(s) } else { residual.add(s) };
        }
        Ok((residual, off.blinds[1], tr.outcome))
    };
    let (unblinded_recovered, _, unblinded_sum) = run(false)?;
    let (blinded_residual, b2, blinded_sum) = run(true)?;
    Ok(DelayedResponseReport { planted_x2: inputs[1], unblinded_recovered, blinded_residual, b2, unblinded_sum, blinded_sum })
}

fn stream_for(seed: &Seed) -> Stream {
    seed.child(b"cordp/secagg", &[]).stream()
}
