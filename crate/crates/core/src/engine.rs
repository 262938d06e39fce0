//! Additive secret sharing with two executable backends.
//!
//! `Dealer2Pc` runs two computing parties plus a trusted dealer that issues
//! Beaver triples from a seeded PRNG during preprocessing (dealer traffic is
//! not metered). `Rep3Pc` runs replicated three-party sharing where party `i`
//! holds parts `(x_i, x_{i+1})` of `x = x_1 + x_2 + x_3`.
//!
//! Non-arithmetic operations (truncation, softmax pieces, activations,
//! comparisons, rsqrt) go through an ideal oracle: shares are reconstructed
//! inside the oracle, the exact plaintext fixed-point kernel is applied, and
//! fresh shares are returned. This keeps every circuit bit-equal to the
//! plaintext reference while the oracle charges modeled cost from the active
//! [`CostTable`].
//!
//! The engine owns all party state and schedules them deterministically on one
//! thread; channels still carry every message so byte counters and the
//! transcript reflect what a distributed deployment would send.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{Channels, Endpoint, MessageEvent, MsgLabel, Payload};
use crate::cost::{CostReport, CostTable, NonArithKind, Site, Stage, StageCounters};
use crate::error::{Error, Result};
use crate::linalg;
use crate::ring::{FixedPointFormat, RingElement};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Dealer2Pc,
    Rep3Pc,
}

impl BackendKind {
    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Dealer2Pc => "dealer2pc",
            BackendKind::Rep3Pc => "rep3pc",
        }
    }

    pub fn party_count(self) -> usize {
        match self {
            BackendKind::Dealer2Pc => 2,
            BackendKind::Rep3Pc => 3,
        }
    }
}

impl std::str::FromStr for BackendKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dealer2pc" => Ok(BackendKind::Dealer2Pc),
            "rep3pc" => Ok(BackendKind::Rep3Pc),
            other => Err(Error::InvalidConfig(format!("unknown backend `{other}`"))),
        }
    }
}

/// Additive parts of a shared vector. For `Rep3Pc`, party `i` holds
/// `(parts[i], parts[(i+1) % 3])`; for `Dealer2Pc`, party `i` holds
/// `parts[i]`. The engine keeps the global view; per-party holdings only
/// matter for what crosses channels.
#[derive(Clone, Debug)]
pub struct SharedVec {
    pub backend: BackendKind,
    pub parts: Vec<Vec<RingElement>>,
}

impl SharedVec {
    pub fn len(&self) -> usize {
        self.parts[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Apply a local reshaping (transpose, slice, repeat, ...) to every part.
    pub fn map_parts(&self, f: impl Fn(&[RingElement]) -> Vec<RingElement>) -> SharedVec {
        SharedVec {
            backend: self.backend,
            parts: self.parts.iter().map(|p| f(p)).collect(),
        }
    }

    fn check_match(&self, other: &SharedVec) -> Result<()> {
        if self.backend != other.backend {
            return Err(Error::BackendMismatch {
                expected: self.backend.name().into(),
                actual: other.backend.name().into(),
            });
        }
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!(
                "shared vectors of length {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub backend: BackendKind,
    pub fmt: FixedPointFormat,
    pub cost_table: CostTable,
    pub seed: u64,
    /// Maximum scalar triples the dealer will issue; `None` = unbounded.
    pub triple_budget: Option<u64>,
    /// Record per-receiver byte histograms for uniformity testing.
    pub capture_stats: bool,
}

impl EngineConfig {
    pub fn new(backend: BackendKind, seed: u64) -> Self {
        EngineConfig {
            backend,
            fmt: FixedPointFormat::default(),
            cost_table: CostTable::default(),
            seed,
            triple_budget: None,
            capture_stats: false,
        }
    }
}

pub const SERVER: usize = 0;
pub const CLIENT: usize = 1;

/// Per-party shares of dealer-issued multiplication randomness
/// (a, b, c = a.b). Scalar triples have unit inner dimensions; matrix
/// triples carry whole operand matrices.
struct BeaverTriple {
    a_parts: Vec<Vec<RingElement>>,
    b_parts: Vec<Vec<RingElement>>,
    c_parts: Vec<Vec<RingElement>>,
}

pub struct Engine {
    backend: BackendKind,
    fmt: FixedPointFormat,
    cost_table: CostTable,
    rng: ChaCha12Rng,
    dealer_rng: ChaCha12Rng,
    channels: Channels,
    stage: Stage,
    site: Site,
    prefill: StageCounters,
    decode: StageCounters,
    triples_used: u64,
    triple_budget: Option<u64>,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Self {
        Engine {
            backend: cfg.backend,
            fmt: cfg.fmt,
            cost_table: cfg.cost_table,
            rng: ChaCha12Rng::seed_from_u64(cfg.seed),
            dealer_rng: ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e3779b97f4a7c15)),
            channels: Channels::new(cfg.capture_stats),
            stage: Stage::Prefill,
            site: Site::Other,
            prefill: StageCounters::default(),
            decode: StageCounters::default(),
            triples_used: 0,
            triple_budget: cfg.triple_budget,
        }
    }

    pub fn backend(&self) -> BackendKind {
        self.backend
    }

    pub fn fmt(&self) -> FixedPointFormat {
        self.fmt
    }

    pub fn cost_table(&self) -> &CostTable {
        &self.cost_table
    }

    pub fn set_stage(&mut self, stage: Stage) {
        self.stage = stage;
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn set_site(&mut self, site: Site) {
        self.site = site;
    }

    pub fn counters(&self, stage: Stage) -> &StageCounters {
        match stage {
            Stage::Prefill => &self.prefill,
            Stage::Decode => &self.decode,
        }
    }

    pub fn report(&self) -> CostReport {
        CostReport {
            schema_version: CostReport::SCHEMA_VERSION,
            backend: self.backend.name().to_string(),
            scale_bits: self.fmt.scale_bits,
            prefill: self.prefill.clone(),
            decode: self.decode.clone(),
        }
    }

    pub fn events(&self) -> &[MessageEvent] {
        self.channels.events()
    }

    pub fn channels(&self) -> &Channels {
        &self.channels
    }

    /// Total bytes across stage counters must equal channel totals.
    pub fn bytes_conserved(&self) -> bool {
        self.prefill.measured_bytes + self.decode.measured_bytes == self.channels.total_bytes()
            && self.channels.all_drained()
    }

    fn tally(&mut self) -> &mut StageCounters {
        match self.stage {
            Stage::Prefill => &mut self.prefill,
            Stage::Decode => &mut self.decode,
        }
    }

    fn site_tally(&mut self) -> &mut crate::cost::SiteCounters {
        let site = self.site;
        self.tally().sites.entry(site).or_default()
    }

    fn send(&mut self, from: Endpoint, to: Endpoint, label: MsgLabel, payload: Payload) {
        let bytes = self.channels.send(self.stage, from, to, label, payload);
        self.tally().measured_bytes += bytes;
    }

    fn recv(&mut self, from: Endpoint, to: Endpoint) -> Payload {
        self.channels
            .recv(from, to)
            .expect("deterministic schedule never reads an empty channel")
    }

    fn rand_vec(&mut self, len: usize) -> Vec<RingElement> {
        (0..len).map(|_| RingElement(self.rng.gen())).collect()
    }

    fn parties(&self) -> usize {
        self.backend.party_count()
    }

    /// Split `values` into fresh uniform additive parts.
    fn sample_parts(
        rng: &mut ChaCha12Rng,
        n_parts: usize,
        values: &[RingElement],
    ) -> Vec<Vec<RingElement>> {
        let mut parts: Vec<Vec<RingElement>> = Vec::with_capacity(n_parts);
        let mut acc: Vec<RingElement> = values.to_vec();
        for _ in 0..n_parts - 1 {
            let part: Vec<RingElement> = (0..values.len()).map(|_| RingElement(rng.gen())).collect();
            for (a, p) in acc.iter_mut().zip(&part) {
                *a = *a - *p;
            }
            parts.push(part);
        }
        parts.push(acc);
        parts
    }

    /// Share without attributing the distribution to any party (tests and
    /// oracle-internal use).
    pub fn share(&mut self, values: &[RingElement]) -> SharedVec {
        let n_parts = self.parties();
        let parts = Self::sample_parts(&mut self.rng, n_parts, values);
        SharedVec {
            backend: self.backend,
            parts,
        }
    }

    /// Share `values` held by `owner`, sending every other party its holding.
    pub fn share_from(&mut self, owner: usize, values: &[RingElement]) -> SharedVec {
        let shared = self.share(values);
        let n = self.parties();
        for p in 0..n {
            if p == owner {
                continue;
            }
            let payload = match self.backend {
                BackendKind::Dealer2Pc => shared.parts[p].clone(),
                BackendKind::Rep3Pc => {
                    let mut both = shared.parts[p].clone();
                    both.extend_from_slice(&shared.parts[(p + 1) % 3]);
                    both
                }
            };
            self.send(
                Endpoint::Party(owner),
                Endpoint::Party(p),
                MsgLabel::ShareInput,
                Payload::Elems(payload),
            );
        }
        // drain: receivers consume their holdings
        for p in 0..n {
            if p != owner {
                let _ = self.recv(Endpoint::Party(owner), Endpoint::Party(p));
            }
        }
        self.tally().rounds += 1;
        shared
    }

    /// Deterministic sharing of a public value: part 0 carries it, the rest
    /// are zero. No randomness, no traffic.
    pub fn public_share(&self, values: &[RingElement]) -> SharedVec {
        let mut parts = vec![vec![RingElement::ZERO; values.len()]; self.parties()];
        parts[0] = values.to_vec();
        SharedVec {
            backend: self.backend,
            parts,
        }
    }

    /// Engine-internal reconstruction (global view). Protocol outputs are
    /// revealed only through `reveal_argmax`.
    pub fn reconstruct(&self, x: &SharedVec) -> Vec<RingElement> {
        let mut out = x.parts[0].clone();
        for part in &x.parts[1..] {
            for (o, p) in out.iter_mut().zip(part) {
                *o = *o + *p;
            }
        }
        out
    }

    pub fn add(&self, x: &SharedVec, y: &SharedVec) -> Result<SharedVec> {
        x.check_match(y)?;
        Ok(SharedVec {
            backend: x.backend,
            parts: x
                .parts
                .iter()
                .zip(&y.parts)
                .map(|(a, b)| a.iter().zip(b).map(|(u, v)| *u + *v).collect())
                .collect(),
        })
    }

    pub fn sub(&self, x: &SharedVec, y: &SharedVec) -> Result<SharedVec> {
        x.check_match(y)?;
        Ok(SharedVec {
            backend: x.backend,
            parts: x
                .parts
                .iter()
                .zip(&y.parts)
                .map(|(a, b)| a.iter().zip(b).map(|(u, v)| *u - *v).collect())
                .collect(),
        })
    }

    /// Add a public vector (elementwise): only part 0 changes.
    pub fn add_public(&self, x: &SharedVec, c: &[RingElement]) -> Result<SharedVec> {
        if x.len() != c.len() {
            return Err(Error::ShapeMismatch(format!(
                "add_public lengths {} vs {}",
                x.len(),
                c.len()
            )));
        }
        let mut out = x.clone();
        for (o, v) in out.parts[0].iter_mut().zip(c) {
            *o = *o + *v;
        }
        Ok(out)
    }

    pub fn add_scalar_public(&self, x: &SharedVec, c: RingElement) -> SharedVec {
        let mut out = x.clone();
        for o in out.parts[0].iter_mut() {
            *o = *o + c;
        }
        out
    }

    /// X (rows x n, shared) times public W (n x k): purely local, free of
    /// opening traffic. Output is a 2s-scale accumulator awaiting truncation.
    pub fn matmul_public_raw(
        &mut self,
        x: &SharedVec,
        rows: usize,
        n: usize,
        w: &[RingElement],
        k: usize,
    ) -> Result<SharedVec> {
        if x.len() != rows * n || w.len() != n * k {
            return Err(Error::ShapeMismatch(format!(
                "public matmul {}x{n} . {n}x{k} with lens {} and {}",
                rows,
                x.len(),
                w.len()
            )));
        }
        let parts = x
            .parts
            .iter()
            .map(|p| linalg::matmul(p, w, rows, n, k))
            .collect();
        let mults = (rows * n * k) as u64;
        self.tally().public_mults += mults;
        self.site_tally().public_mults += mults;
        Ok(SharedVec {
            backend: x.backend,
            parts,
        })
    }

    /// Elementwise product with a public vector; local and free.
    pub fn mul_elem_public_raw(&mut self, x: &SharedVec, w: &[RingElement]) -> Result<SharedVec> {
        if x.len() != w.len() {
            return Err(Error::ShapeMismatch(format!(
                "public elementwise mul lengths {} vs {}",
                x.len(),
                w.len()
            )));
        }
        let out = x.map_parts(|p| p.iter().zip(w).map(|(a, b)| *a * *b).collect());
        let mults = x.len() as u64;
        self.tally().public_mults += mults;
        self.site_tally().public_mults += mults;
        Ok(out)
    }

    /// Multiply by a public scalar; local and free.
    pub fn scale_public_raw(&mut self, x: &SharedVec, c: RingElement) -> SharedVec {
        let out = x.map_parts(|p| p.iter().map(|a| *a * c).collect());
        let mults = x.len() as u64;
        self.tally().public_mults += mults;
        self.site_tally().public_mults += mults;
        out
    }

    fn consume_triples(&mut self, n: u64) -> Result<()> {
        if let Some(budget) = self.triple_budget {
            if self.triples_used + n > budget {
                return Err(Error::TripleExhausted {
                    requested: self.triples_used + n,
                    budget,
                });
            }
        }
        self.triples_used += n;
        self.tally().triples_consumed += n;
        Ok(())
    }

    fn charge_open(&mut self, opened: u64) {
        let bpe = self.cost_table.open_bytes(self.backend.name());
        self.tally().opened_elements += opened;
        self.tally().modeled_bytes += opened as f64 * bpe;
        self.tally().modeled_rounds += 1.0;
        self.tally().rounds += 1;
    }

    fn charge_private_mults(&mut self, mults: u64) {
        self.tally().triple_mults += mults;
        self.site_tally().triple_mults += mults;
    }

    /// Elementwise private product. Dealer2Pc consumes one Beaver triple per
    /// element and opens d = x - a, e = y - b (2k elements per party, one
    /// round); Rep3Pc computes local cross terms and reshapes with
    /// correlated-zero masking in one round.
    pub fn mul_elementwise(&mut self, x: &SharedVec, y: &SharedVec) -> Result<SharedVec> {
        x.check_match(y)?;
        match self.backend {
            BackendKind::Dealer2Pc => self.mul_beaver(x, y, x.len(), 1, 1),
            BackendKind::Rep3Pc => self.mul_replicated_general(x, y, None),
        }
    }

    /// Private matrix product X (rows x n) . Y (n x k). Openings are
    /// matrix-level (D = X - A and E = Y - B once per product), so a batch
    /// opens rows*n + n*k elements in one round; the multiplication count is
    /// still rows*n*k.
    pub fn matmul_private_raw(
        &mut self,
        x: &SharedVec,
        rows: usize,
        n: usize,
        y: &SharedVec,
        k: usize,
    ) -> Result<SharedVec> {
        if x.backend != y.backend {
            return Err(Error::BackendMismatch {
                expected: x.backend.name().into(),
                actual: y.backend.name().into(),
            });
        }
        if x.len() != rows * n || y.len() != n * k {
            return Err(Error::ShapeMismatch(format!(
                "private matmul {rows}x{n} . {n}x{k} with lens {} and {}",
                x.len(),
                y.len()
            )));
        }
        match self.backend {
            BackendKind::Dealer2Pc => self.mul_beaver(x, y, rows, n, k),
            BackendKind::Rep3Pc => self.mul_replicated_general(x, y, Some((rows, n, k))),
        }
    }

    /// Dealer preprocessing: correlated randomness with c = a.b in the ring,
    /// shared between the two parties. Issued fresh per multiplication and
    /// never metered; the dealer sees no live data.
    fn issue_triple(
        &mut self,
        a_len: usize,
        b_len: usize,
        elementwise: bool,
        rows: usize,
        n: usize,
        k: usize,
    ) -> BeaverTriple {
        let a: Vec<RingElement> = (0..a_len)
            .map(|_| RingElement(self.dealer_rng.gen()))
            .collect();
        let b: Vec<RingElement> = (0..b_len)
            .map(|_| RingElement(self.dealer_rng.gen()))
            .collect();
        let c: Vec<RingElement> = if elementwise {
            a.iter().zip(&b).map(|(u, v)| *u * *v).collect()
        } else {
            linalg::matmul(&a, &b, rows, n, k)
        };
        BeaverTriple {
            a_parts: Self::sample_parts(&mut self.dealer_rng, 2, &a),
            b_parts: Self::sample_parts(&mut self.dealer_rng, 2, &b),
            c_parts: Self::sample_parts(&mut self.dealer_rng, 2, &c),
        }
    }

    /// Beaver multiplication. `rows/n/k` describe the matrix shapes; the
    /// elementwise case is `rows = len, n = k = 1`.
    fn mul_beaver(
        &mut self,
        x: &SharedVec,
        y: &SharedVec,
        rows: usize,
        n: usize,
        k: usize,
    ) -> Result<SharedVec> {
        let elementwise = n == 1 && k == 1;
        let (mults, opened) = if elementwise {
            (rows as u64, 2 * rows as u64)
        } else {
            ((rows * n * k) as u64, (rows * n + n * k) as u64)
        };
        self.consume_triples(mults)?;
        self.charge_private_mults(mults);

        let triple = self.issue_triple(x.len(), y.len(), elementwise, rows, n, k);
        let BeaverTriple {
            a_parts,
            b_parts,
            c_parts,
        } = triple;

        // masked openings: each party sends its share of d = x - a and
        // e = y - b to the other, batched in one round
        let mut d_parts = Vec::new();
        let mut e_parts = Vec::new();
        for p in 0..2 {
            let d: Vec<RingElement> = x.parts[p]
                .iter()
                .zip(&a_parts[p])
                .map(|(u, v)| *u - *v)
                .collect();
            let e: Vec<RingElement> = y.parts[p]
                .iter()
                .zip(&b_parts[p])
                .map(|(u, v)| *u - *v)
                .collect();
            let mut payload = d.clone();
            payload.extend_from_slice(&e);
            self.send(
                Endpoint::Party(p),
                Endpoint::Party(1 - p),
                MsgLabel::Open,
                Payload::Elems(payload),
            );
            d_parts.push(d);
            e_parts.push(e);
        }
        for p in 0..2 {
            let _ = self.recv(Endpoint::Party(1 - p), Endpoint::Party(p));
        }
        self.charge_open(opened);

        let d: Vec<RingElement> = d_parts[0]
            .iter()
            .zip(&d_parts[1])
            .map(|(u, v)| *u + *v)
            .collect();
        let e: Vec<RingElement> = e_parts[0]
            .iter()
            .zip(&e_parts[1])
            .map(|(u, v)| *u + *v)
            .collect();

        let mut parts = Vec::with_capacity(2);
        for p in 0..2 {
            let mut z = c_parts[p].clone();
            let (db, ae) = if elementwise {
                (
                    d.iter().zip(&b_parts[p]).map(|(u, v)| *u * *v).collect::<Vec<_>>(),
                    e.iter().zip(&a_parts[p]).map(|(u, v)| *u * *v).collect::<Vec<_>>(),
                )
            } else {
                (
                    linalg::matmul(&d, &b_parts[p], rows, n, k),
                    linalg::matmul(&a_parts[p], &e, rows, n, k),
                )
            };
            for ((zi, dbi), aei) in z.iter_mut().zip(&db).zip(&ae) {
                *zi = *zi + *dbi + *aei;
            }
            if p == 0 {
                let de: Vec<RingElement> = if elementwise {
                    d.iter().zip(&e).map(|(u, v)| *u * *v).collect()
                } else {
                    linalg::matmul(&d, &e, rows, n, k)
                };
                for (zi, dei) in z.iter_mut().zip(&de) {
                    *zi = *zi + *dei;
                }
            }
            parts.push(z);
        }
        Ok(SharedVec {
            backend: self.backend,
            parts,
        })
    }

    /// Replicated 3PC multiplication: local cross terms, correlated-zero
    /// masking, then a reshare round restoring the replication invariant.
    #[allow(clippy::needless_range_loop)]
    fn mul_replicated_general(
        &mut self,
        x: &SharedVec,
        y: &SharedVec,
        matmul: Option<(usize, usize, usize)>,
    ) -> Result<SharedVec> {
        let (mults, opened, out_len) = match matmul {
            Some((rows, n, k)) => ((rows * n * k) as u64, (rows * k) as u64, rows * k),
            None => (x.len() as u64, x.len() as u64, x.len()),
        };
        self.charge_private_mults(mults);

        // correlated zero shares
        let a0 = self.rand_vec(out_len);
        let a1 = self.rand_vec(out_len);
        let a2: Vec<RingElement> = a0
            .iter()
            .zip(&a1)
            .map(|(u, v)| -(*u + *v))
            .collect();
        let alphas = [a0, a1, a2];

        let term = |xa: &[RingElement], yb: &[RingElement]| -> Vec<RingElement> {
            match matmul {
                Some((rows, n, k)) => linalg::matmul(xa, yb, rows, n, k),
                None => xa.iter().zip(yb).map(|(u, v)| *u * *v).collect(),
            }
        };

        let mut parts = Vec::with_capacity(3);
        for i in 0..3 {
            let j = (i + 1) % 3;
            let mut z = term(&x.parts[i], &y.parts[i]);
            for (zi, v) in z.iter_mut().zip(term(&x.parts[i], &y.parts[j])) {
                *zi = *zi + v;
            }
            for (zi, v) in z.iter_mut().zip(term(&x.parts[j], &y.parts[i])) {
                *zi = *zi + v;
            }
            for (zi, v) in z.iter_mut().zip(&alphas[i]) {
                *zi = *zi + *v;
            }
            parts.push(z);
        }

        // reshare: party i sends its masked z_i to party i-1
        for i in 0..3 {
            let prev = (i + 2) % 3;
            self.send(
                Endpoint::Party(i),
                Endpoint::Party(prev),
                MsgLabel::Reshare,
                Payload::Elems(parts[i].clone()),
            );
        }
        for i in 0..3 {
            let prev = (i + 2) % 3;
            let _ = self.recv(Endpoint::Party(i), Endpoint::Party(prev));
        }
        self.charge_open(opened);

        Ok(SharedVec {
            backend: self.backend,
            parts,
        })
    }

    /// Ideal non-arithmetic call: reconstruct inside the oracle, apply the
    /// plaintext kernel `f`, reshare fresh. Charges `charged` elements of
    /// `kind` plus modeled bytes/rounds from the cost table.
    pub fn oracle(
        &mut self,
        kind: NonArithKind,
        charged: u64,
        inputs: &[&SharedVec],
        f: impl FnOnce(&[Vec<RingElement>]) -> Vec<RingElement>,
    ) -> SharedVec {
        let n = self.parties();
        for input in inputs {
            for p in 0..n {
                self.send(
                    Endpoint::Party(p),
                    Endpoint::Oracle,
                    MsgLabel::OracleIn,
                    Payload::Elems(input.parts[p].clone()),
                );
            }
            for p in 0..n {
                let _ = self.recv(Endpoint::Party(p), Endpoint::Oracle);
            }
        }
        let plain: Vec<Vec<RingElement>> = inputs.iter().map(|i| self.reconstruct(i)).collect();
        let out_plain = f(&plain);
        let out = self.share(&out_plain);
        for p in 0..n {
            let payload = match self.backend {
                BackendKind::Dealer2Pc => out.parts[p].clone(),
                BackendKind::Rep3Pc => {
                    let mut both = out.parts[p].clone();
                    both.extend_from_slice(&out.parts[(p + 1) % 3]);
                    both
                }
            };
            self.send(
                Endpoint::Oracle,
                Endpoint::Party(p),
                MsgLabel::OracleOut,
                Payload::Elems(payload),
            );
        }
        for p in 0..n {
            let _ = self.recv(Endpoint::Oracle, Endpoint::Party(p));
        }
        let op = self.cost_table.op(kind);
        let tally = self.tally();
        tally.rounds += 2;
        tally.modeled_bytes += op.bytes_per_element * charged as f64;
        tally.modeled_rounds += op.rounds_per_batch;
        *tally.nonarith.entry(kind).or_insert(0) += charged;
        *self.site_tally().nonarith.entry(kind).or_insert(0) += charged;
        out
    }

    /// Truncate every element (ideal Trunc, one element charged per entry).
    pub fn truncate(&mut self, x: &SharedVec) -> SharedVec {
        let fmt = self.fmt;
        self.oracle(NonArithKind::Trunc, x.len() as u64, &[x], |ins| {
            ins[0].iter().map(|e| fmt.truncate(*e)).collect()
        })
    }

    /// Reveal the argmax of a shared row to one party. Charged as len-1
    /// comparisons; only the 4-byte token crosses the wire.
    pub fn reveal_argmax(&mut self, logits: &SharedVec, to_party: usize) -> usize {
        let n = self.parties();
        for p in 0..n {
            self.send(
                Endpoint::Party(p),
                Endpoint::Oracle,
                MsgLabel::OracleIn,
                Payload::Elems(logits.parts[p].clone()),
            );
        }
        for p in 0..n {
            let _ = self.recv(Endpoint::Party(p), Endpoint::Oracle);
        }
        let plain = self.reconstruct(logits);
        let idx = crate::ring::kernels::argmax(&plain);
        self.send(
            Endpoint::Oracle,
            Endpoint::Party(to_party),
            MsgLabel::TokenReveal,
            Payload::Token(idx as u32),
        );
        let _ = self.recv(Endpoint::Oracle, Endpoint::Party(to_party));
        let charged = logits.len().saturating_sub(1) as u64;
        let op = self.cost_table.op(NonArithKind::Compare);
        let tally = self.tally();
        tally.rounds += 2;
        tally.modeled_bytes += op.bytes_per_element * charged as f64;
        tally.modeled_rounds += op.rounds_per_batch;
        *tally.nonarith.entry(NonArithKind::Compare).or_insert(0) += charged;
        *self
            .site_tally()
            .nonarith
            .entry(NonArithKind::Compare)
            .or_insert(0) += charged;
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc(fmt: &FixedPointFormat, xs: &[f64]) -> Vec<RingElement> {
        xs.iter().map(|x| fmt.encode(*x).unwrap()).collect()
    }

    fn engine(backend: BackendKind) -> Engine {
        Engine::new(EngineConfig::new(backend, 42))
    }

    #[test]
    fn share_reconstruct_roundtrip() {
        for backend in [BackendKind::Dealer2Pc, BackendKind::Rep3Pc] {
            let mut eng = engine(backend);
            let fmt = eng.fmt();
            let vals = enc(&fmt, &[2.0, -3.5, 0.0]);
            let shared = eng.share(&vals);
            assert_eq!(shared.parts.len(), backend.party_count());
            assert_eq!(eng.reconstruct(&shared), vals);
        }
    }

    #[test]
    fn different_seeds_different_shares_same_secret() {
        let vals = vec![RingElement::ZERO; 4];
        let mut e1 = Engine::new(EngineConfig::new(BackendKind::Dealer2Pc, 1));
        let mut e2 = Engine::new(EngineConfig::new(BackendKind::Dealer2Pc, 2));
        let s1 = e1.share(&vals);
        let s2 = e2.share(&vals);
        assert_ne!(s1.parts[0], s2.parts[0]);
        assert_eq!(e1.reconstruct(&s1), e2.reconstruct(&s2));
    }

    #[test]
    fn add_local_is_free() {
        for backend in [BackendKind::Dealer2Pc, BackendKind::Rep3Pc] {
            let mut eng = engine(backend);
            let fmt = eng.fmt();
            let x = eng.share(&enc(&fmt, &[3.0]));
            let y = eng.share(&enc(&fmt, &[4.0]));
            let z = eng.add(&x, &y).unwrap();
            assert_eq!(eng.reconstruct(&z), enc(&fmt, &[7.0]));
            assert_eq!(eng.channels().total_bytes(), 0);
            // x + shares-of-zero reconstructs x
            let zero = eng.share(&[RingElement::ZERO]);
            let same = eng.add(&x, &zero).unwrap();
            assert_eq!(eng.reconstruct(&same), enc(&fmt, &[3.0]));
        }
    }

    #[test]
    fn add_random_pairs_match_plaintext() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for backend in [BackendKind::Dealer2Pc, BackendKind::Rep3Pc] {
            let mut eng = engine(backend);
            for _ in 0..100 {
                let a = RingElement(rng.gen());
                let b = RingElement(rng.gen());
                let x = eng.share(&[a]);
                let y = eng.share(&[b]);
                let z = eng.add(&x, &y).unwrap();
                assert_eq!(eng.reconstruct(&z)[0], a + b);
            }
        }
    }

    #[test]
    fn backend_mismatch_rejected() {
        let mut d = engine(BackendKind::Dealer2Pc);
        let mut r = engine(BackendKind::Rep3Pc);
        let x = d.share(&[RingElement(1)]);
        let y = r.share(&[RingElement(2)]);
        assert!(matches!(d.add(&x, &y), Err(Error::BackendMismatch { .. })));
    }

    #[test]
    fn beaver_batch_round_and_element_accounting() {
        let mut eng = engine(BackendKind::Dealer2Pc);
        let fmt = eng.fmt();
        let k = 5;
        let x = eng.share(&enc(&fmt, &[1.0, 2.0, 3.0, -1.0, 0.5]));
        let y = eng.share(&enc(&fmt, &[2.0, 2.0, -2.0, 4.0, 1.0]));
        let before = eng.channels().total_bytes();
        let z = eng.mul_elementwise(&x, &y).unwrap();
        let delta = eng.channels().total_bytes() - before;
        // 2k elements per party, two parties, 8 bytes each, one round
        assert_eq!(delta, 2 * (2 * k as u64) * 8);
        assert_eq!(eng.counters(Stage::Prefill).rounds, 1);
        assert_eq!(eng.counters(Stage::Prefill).triple_mults, k as u64);
        assert_eq!(eng.counters(Stage::Prefill).triples_consumed, k as u64);
        assert_eq!(eng.counters(Stage::Prefill).opened_elements, 2 * k as u64);
        // products reconstruct in the ring (2s scale), truncate brings them home
        let t = eng.truncate(&z);
        let got = eng.reconstruct(&t);
        assert_eq!(got, enc(&fmt, &[2.0, 4.0, -6.0, -4.0, 0.5]));
    }

    #[test]
    fn beaver_random_products_match_plaintext() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let mut eng = engine(BackendKind::Dealer2Pc);
        for _ in 0..200 {
            let a = RingElement(rng.gen());
            let b = RingElement(rng.gen());
            let x = eng.share(&[a]);
            let y = eng.share(&[b]);
            let z = eng.mul_elementwise(&x, &y).unwrap();
            assert_eq!(eng.reconstruct(&z)[0], a * b);
        }
    }

    #[test]
    fn replicated_random_products_match_plaintext() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let mut eng = engine(BackendKind::Rep3Pc);
        for _ in 0..200 {
            let a = RingElement(rng.gen());
            let b = RingElement(rng.gen());
            let x = eng.share(&[a]);
            let y = eng.share(&[b]);
            let z = eng.mul_elementwise(&x, &y).unwrap();
            assert_eq!(eng.reconstruct(&z)[0], a * b);
        }
    }

    #[test]
    fn triple_exhaustion_errors() {
        let mut cfg = EngineConfig::new(BackendKind::Dealer2Pc, 3);
        cfg.triple_budget = Some(4);
        let mut eng = Engine::new(cfg);
        let x = eng.share(&[RingElement(1), RingElement(2), RingElement(3)]);
        let y = eng.share(&[RingElement(4), RingElement(5), RingElement(6)]);
        assert!(eng.mul_elementwise(&x, &y).is_ok());
        assert!(matches!(
            eng.mul_elementwise(&x, &y),
            Err(Error::TripleExhausted { .. })
        ));
    }

    #[test]
    fn public_matmul_is_local_and_correct() {
        for backend in [BackendKind::Dealer2Pc, BackendKind::Rep3Pc] {
            let mut eng = engine(backend);
            let fmt = eng.fmt();
            // X = identity (2x2), W arbitrary: X.W reconstructs W after trunc
            let x = eng.share(&enc(&fmt, &[1.0, 0.0, 0.0, 1.0]));
            let w = enc(&fmt, &[1.25, -2.0, 0.5, 3.0]);
            let before = eng.channels().total_bytes();
            let raw = eng.matmul_public_raw(&x, 2, 2, &w, 2).unwrap();
            assert_eq!(eng.channels().total_bytes(), before, "matmul itself is free");
            assert_eq!(eng.counters(Stage::Prefill).triple_mults, 0);
            assert_eq!(eng.counters(Stage::Prefill).public_mults, 8);
            let out = eng.truncate(&raw);
            assert_eq!(eng.reconstruct(&out), w);
        }
    }

    #[test]
    fn public_matmuls_match_plaintext_oracle() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let mut eng = engine(BackendKind::Dealer2Pc);
        let fmt = eng.fmt();
        for _ in 0..50 {
            let xs: Vec<f64> = (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let ws: Vec<f64> = (0..6).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let xe = enc(&fmt, &xs);
            let we = enc(&fmt, &ws);
            let shared = eng.share(&xe);
            let raw = eng.matmul_public_raw(&shared, 2, 3, &we, 2).unwrap();
            let out = eng.truncate(&raw);
            let expected: Vec<RingElement> = linalg::matmul(&xe, &we, 2, 3, 2)
                .into_iter()
                .map(|e| fmt.truncate(e))
                .collect();
            assert_eq!(eng.reconstruct(&out), expected);
        }
    }

    #[test]
    fn private_matmuls_match_plaintext_oracle() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        for backend in [BackendKind::Dealer2Pc, BackendKind::Rep3Pc] {
            let mut eng = engine(backend);
            for _ in 0..25 {
                let xs: Vec<RingElement> = (0..6).map(|_| RingElement(rng.gen())).collect();
                let ys: Vec<RingElement> = (0..6).map(|_| RingElement(rng.gen())).collect();
                let x = eng.share(&xs);
                let y = eng.share(&ys);
                let z = eng.matmul_private_raw(&x, 2, 3, &y, 2).unwrap();
                assert_eq!(eng.reconstruct(&z), linalg::matmul(&xs, &ys, 2, 3, 2));
            }
        }
    }

    #[test]
    fn private_matmul_mult_count() {
        let mut eng = engine(BackendKind::Dealer2Pc);
        let x = eng.share(&[RingElement(1); 6]);
        let y = eng.share(&[RingElement(1); 6]);
        let _ = eng.matmul_private_raw(&x, 2, 3, &y, 2).unwrap();
        assert_eq!(eng.counters(Stage::Prefill).triple_mults, 12);
    }

    #[test]
    fn oracle_output_shares_are_fresh() {
        let mut eng = engine(BackendKind::Dealer2Pc);
        let fmt = eng.fmt();
        let prod = fmt.encode(1.5).unwrap() * fmt.encode(2.0).unwrap();
        let x = eng.share(&[prod]);
        let t1 = eng.truncate(&x);
        let t2 = eng.truncate(&x);
        assert_ne!(t1.parts[0], t2.parts[0], "resharing is fresh");
        assert_eq!(eng.reconstruct(&t1), eng.reconstruct(&t2));
        assert_eq!(eng.reconstruct(&t1), vec![fmt.encode(3.0).unwrap()]);
    }

    #[test]
    fn byte_conservation_across_stages() {
        let mut eng = engine(BackendKind::Rep3Pc);
        let x = eng.share(&[RingElement(1), RingElement(2)]);
        let y = eng.share(&[RingElement(3), RingElement(4)]);
        let _ = eng.mul_elementwise(&x, &y).unwrap();
        eng.set_stage(Stage::Decode);
        let _ = eng.mul_elementwise(&x, &y).unwrap();
        assert!(eng.bytes_conserved());
        assert!(eng.counters(Stage::Decode).measured_bytes > 0);
    }

    #[test]
    fn share_from_counts_distribution_bytes() {
        let mut eng = engine(BackendKind::Dealer2Pc);
        let before = eng.channels().total_bytes();
        let _ = eng.share_from(SERVER, &[RingElement(9); 10]);
        assert_eq!(eng.channels().total_bytes() - before, 80);
    }

    proptest::proptest! {
        #[test]
        fn share_reconstruct_roundtrip_property(
            vals in proptest::collection::vec(proptest::prelude::any::<u64>(), 1..16),
            seed in proptest::prelude::any::<u64>(),
            dealer in proptest::prelude::any::<bool>(),
        ) {
            let backend = if dealer { BackendKind::Dealer2Pc } else { BackendKind::Rep3Pc };
            let mut eng = Engine::new(EngineConfig::new(backend, seed));
            let elems: Vec<RingElement> = vals.iter().map(|v| RingElement(*v)).collect();
            let shared = eng.share(&elems);
            proptest::prop_assert_eq!(eng.reconstruct(&shared), elems);
        }

        #[test]
        fn linear_ops_are_homomorphic(
            a in proptest::collection::vec(proptest::prelude::any::<u64>(), 4),
            b in proptest::collection::vec(proptest::prelude::any::<u64>(), 4),
            seed in proptest::prelude::any::<u64>(),
        ) {
            let mut eng = Engine::new(EngineConfig::new(BackendKind::Rep3Pc, seed));
            let ae: Vec<RingElement> = a.iter().map(|v| RingElement(*v)).collect();
            let be: Vec<RingElement> = b.iter().map(|v| RingElement(*v)).collect();
            let xs = eng.share(&ae);
            let ys = eng.share(&be);
            let sum = eng.add(&xs, &ys).unwrap();
            let want: Vec<RingElement> = ae.iter().zip(&be).map(|(x, y)| *x + *y).collect();
            proptest::prop_assert_eq!(eng.reconstruct(&sum), want);
            let prod = eng.mul_elementwise(&xs, &ys).unwrap();
            let want: Vec<RingElement> = ae.iter().zip(&be).map(|(x, y)| *x * *y).collect();
            proptest::prop_assert_eq!(eng.reconstruct(&prod), want);
        }
    }

    #[test]
    fn reveal_argmax_reveals_only_token() {
        let mut eng = engine(BackendKind::Dealer2Pc);
        let fmt = eng.fmt();
        let logits = eng.share(&enc(&fmt, &[0.5, 2.0, -1.0, 2.0]));
        let before = eng.channels().total_bytes();
        let idx = eng.reveal_argmax(&logits, CLIENT);
        assert_eq!(idx, 1, "lowest index wins ties");
        let delta = eng.channels().total_bytes() - before;
        // 2 parties send 4 shares each (64 bytes) plus the 4-byte token
        assert_eq!(delta, 2 * 4 * 8 + 4);
        assert_eq!(
            eng.counters(Stage::Prefill).nonarith_count(NonArithKind::Compare),
            3
        );
    }
}
