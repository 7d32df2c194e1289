//! Captcha authorization for newly attached keyboards and mice.
//!
//! A keyboard must type a random 5-symbol code over `A-Z0-9`. A mouse must
//! join three pairs of targets on a 6x4 grid. In each pair the message text
//! occupies display rows away from the first target: two rows for the first
//! pair and one row for the other two. So the second target has 11
//! candidate positions in the first pair and 17 in the other two.
//!
//! Every wrong element restarts the whole challenge with a fresh one. The
//! third failure blocks the device until it is re-attached.

use std::fmt;

use num_rational::Ratio;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const ALPHABET: &[u8; 36] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
pub const CODE_LEN: usize = 5;
pub const MAX_ATTEMPTS: u32 = 3;
pub const MOUSE_PAIRS: usize = 3;

pub const DISPLAY_WIDTH: i32 = 480;
pub const DISPLAY_HEIGHT: i32 = 320;
pub const GRID_COLUMNS: u8 = 6;
pub const GRID_ROWS: u8 = 4;
pub const GRID_TARGETS: u8 = GRID_COLUMNS * GRID_ROWS;
pub const CELL: i32 = 80;
/// Clicks strictly closer than this to a target center hit it.
pub const RADIUS: i32 = 26;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HidKind {
    Keyboard,
    Mouse,
}

impl HidKind {
    pub fn name(self) -> &'static str {
        match self {
            HidKind::Keyboard => "keyboard",
            HidKind::Mouse => "mouse",
        }
    }
}

impl fmt::Display for HidKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeyboardChallenge {
    code: [u8; CODE_LEN],
}

impl KeyboardChallenge {
    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut code = [0u8; CODE_LEN];
        for c in &mut code {
            *c = ALPHABET[rng.gen_range(0..ALPHABET.len())];
        }
        KeyboardChallenge { code }
    }

    /// Parses a code, case-insensitively.
    pub fn parse(s: &str) -> Option<Self> {
        let bytes = s.as_bytes();
        if bytes.len() != CODE_LEN {
            return None;
        }
        let mut code = [0u8; CODE_LEN];
        for (dst, &b) in code.iter_mut().zip(bytes) {
            *dst = canonical_symbol(b as char)?;
        }
        Some(KeyboardChallenge { code })
    }

    pub fn symbols(&self) -> &[u8; CODE_LEN] {
        &self.code
    }

    pub fn as_str(&self) -> &str {
        std::str::from_utf8(&self.code).expect("ASCII alphabet")
    }
}

impl fmt::Display for KeyboardChallenge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn canonical_symbol(c: char) -> Option<u8> {
    let c = c.to_ascii_uppercase();
    (c.is_ascii() && ALPHABET.contains(&(c as u8))).then_some(c as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Point {
    pub x: i32,
    pub y: i32,
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.x, self.y)
    }
}

/// Grid position `0..24`, numbered row by row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Target(u8);

impl Target {
    pub fn new(index: u8) -> Option<Self> {
        (index < GRID_TARGETS).then_some(Target(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn row(self) -> u8 {
        self.0 / GRID_COLUMNS
    }

    pub fn column(self) -> u8 {
        self.0 % GRID_COLUMNS
    }

    pub fn center(self) -> Point {
        Point {
            x: CELL / 2 + CELL * self.column() as i32,
            y: CELL / 2 + CELL * self.row() as i32,
        }
    }

    pub fn hit_by(self, p: Point) -> bool {
        let c = self.center();
        let (dx, dy) = ((p.x - c.x) as i64, (p.y - c.y) as i64);
        dx * dx + dy * dy < (RADIUS as i64) * (RADIUS as i64)
    }

    pub fn all() -> impl Iterator<Item = Target> {
        (0..GRID_TARGETS).map(Target)
    }
}

/// Display rows taken by the instruction text of pair `pair`, given the
/// row of its first target.
pub fn message_rows(pair: usize, first_row: u8) -> &'static [u8] {
    match (pair, first_row < 2) {
        (0, true) => &[2, 3],
        (0, false) => &[0, 1],
        (_, true) => &[3],
        (_, false) => &[0],
    }
}

/// Positions the second target of pair `pair` may take.
pub fn admissible_second(pair: usize, first: Target) -> Vec<Target> {
    let rows = message_rows(pair, first.row());
    Target::all()
        .filter(|t| *t != first && !rows.contains(&t.row()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MouseChallenge {
    pairs: [(Target, Target); MOUSE_PAIRS],
}

impl MouseChallenge {
    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut pairs = [(Target(0), Target(0)); MOUSE_PAIRS];
        for (i, pair) in pairs.iter_mut().enumerate() {
            let first = Target(rng.gen_range(0..GRID_TARGETS));
            let options = admissible_second(i, first);
            *pair = (first, options[rng.gen_range(0..options.len())]);
        }
        MouseChallenge { pairs }
    }

    /// Builds a challenge, checking each second target is admissible.
    pub fn from_pairs(pairs: [(Target, Target); MOUSE_PAIRS]) -> Option<Self> {
        pairs
            .iter()
            .enumerate()
            .all(|(i, (a, b))| admissible_second(i, *a).contains(b))
            .then_some(MouseChallenge { pairs })
    }

    pub fn pairs(&self) -> &[(Target, Target); MOUSE_PAIRS] {
        &self.pairs
    }

    /// The `k`-th expected click, `k < 6`.
    pub fn element(&self, k: usize) -> Target {
        let (a, b) = self.pairs[k / 2];
        if k.is_multiple_of(2) {
            a
        } else {
            b
        }
    }
}

/// Number of distinct challenges of each kind.
pub fn challenge_space(kind: HidKind) -> u64 {
    match kind {
        HidKind::Keyboard => (ALPHABET.len() as u64).pow(CODE_LEN as u32),
        HidKind::Mouse => (0..MOUSE_PAIRS)
            .map(|pair| {
                Target::all()
                    .map(|first| admissible_second(pair, first).len() as u64)
                    .sum::<u64>()
            })
            .product(),
    }
}

/// Chance that a device guessing uniformly succeeds within the allowed
/// attempts, to first order: attempts over the challenge space.
pub fn attack_success_probability(kind: HidKind) -> Ratio<u64> {
    Ratio::new(MAX_ATTEMPTS as u64, challenge_space(kind))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AuthStatus {
    InProgress,
    Authorized,
    Blocked,
}

/// What the authorizator tells the user after an input. Never visible to
/// the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Feedback {
    /// A key or a complete pair matched.
    ElementOk,
    /// The first click of a pair matched.
    PointOk,
    Restarted,
    Authorized,
    Blocked,
    /// Input after the outcome was decided, or input the device kind does
    /// not produce.
    Ignored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Challenge {
    Keyboard(KeyboardChallenge),
    Mouse(MouseChallenge),
}

impl Challenge {
    fn generate(kind: HidKind, rng: &mut ChaCha20Rng) -> Self {
        match kind {
            HidKind::Keyboard => Challenge::Keyboard(KeyboardChallenge::generate(rng)),
            HidKind::Mouse => Challenge::Mouse(MouseChallenge::generate(rng)),
        }
    }

    fn len(&self) -> usize {
        match self {
            Challenge::Keyboard(_) => CODE_LEN,
            Challenge::Mouse(_) => 2 * MOUSE_PAIRS,
        }
    }
}

pub fn prompt_message(challenge: &Challenge) -> String {
    match challenge {
        Challenge::Keyboard(c) => format!("To start using the keyboard pls type:\n{c}"),
        Challenge::Mouse(m) => {
            let (a, b) = m.pairs[0];
            format!(
                "To start using the mouse pls draw a line:\n{} -> {}",
                a.center(),
                b.center()
            )
        }
    }
}

pub fn retry_message(challenge: &Challenge) -> String {
    match challenge {
        Challenge::Keyboard(_) => format!("Wrong code - try again.\n{}", prompt_message(challenge)),
        Challenge::Mouse(_) => format!("Wrong line - try again.\n{}", prompt_message(challenge)),
    }
}

pub fn failure_message(kind: HidKind) -> String {
    format!(
        "*** Authorization failed ***\nDevice claims to be a {kind}.\nIs it true? Is the device malicious?\nTo check it again, re-attach it."
    )
}

pub fn authorized_message(kind: HidKind) -> String {
    format!("Device authorized.\nThe {kind} can be used now.")
}

/// State machine for one attached HID.
#[derive(Debug, Clone)]
pub struct HidAuthorizator {
    kind: HidKind,
    challenge: Challenge,
    cursor: usize,
    attempts_used: u32,
    status: AuthStatus,
    display: String,
    rng: ChaCha20Rng,
}

impl HidAuthorizator {
    pub fn new(kind: HidKind, seed: u64) -> Self {
        Self::with_rng(kind, ChaCha20Rng::seed_from_u64(seed))
    }

    pub fn with_rng(kind: HidKind, mut rng: ChaCha20Rng) -> Self {
        let challenge = Challenge::generate(kind, &mut rng);
        HidAuthorizator {
            kind,
            display: prompt_message(&challenge),
            challenge,
            cursor: 0,
            attempts_used: 0,
            status: AuthStatus::InProgress,
            rng,
        }
    }

    pub fn kind(&self) -> HidKind {
        self.kind
    }

    pub fn challenge(&self) -> &Challenge {
        &self.challenge
    }

    /// Elements of the current challenge already matched; the display
    /// highlights them.
    pub fn progress(&self) -> usize {
        self.cursor
    }

    pub fn attempts_used(&self) -> u32 {
        self.attempts_used
    }

    pub fn status(&self) -> AuthStatus {
        self.status
    }

    pub fn display(&self) -> &str {
        &self.display
    }

    pub fn submit_key(&mut self, symbol: char) -> Feedback {
        if self.status != AuthStatus::InProgress {
            return Feedback::Ignored;
        }
        let Challenge::Keyboard(code) = self.challenge else {
            return Feedback::Ignored;
        };
        let ok = canonical_symbol(symbol) == Some(code.code[self.cursor]);
        self.advance(ok)
    }

    pub fn submit_click(&mut self, p: Point) -> Feedback {
        if self.status != AuthStatus::InProgress {
            return Feedback::Ignored;
        }
        let Challenge::Mouse(m) = self.challenge else {
            return Feedback::Ignored;
        };
        let ok = m.element(self.cursor).hit_by(p);
        match self.advance(ok) {
            Feedback::ElementOk if self.cursor % 2 == 1 => Feedback::PointOk,
            Feedback::ElementOk => {
                if let Some((a, b)) = m.pairs.get(self.cursor / 2) {
                    self.display = format!(
                        "To start using the mouse pls draw a line:\n{} -> {}",
                        a.center(),
                        b.center()
                    );
                }
                Feedback::ElementOk
            }
            other => other,
        }
    }

    fn advance(&mut self, ok: bool) -> Feedback {
        if ok {
            self.cursor += 1;
            if self.cursor == self.challenge.len() {
                self.status = AuthStatus::Authorized;
                self.display = authorized_message(self.kind);
                return Feedback::Authorized;
            }
            return Feedback::ElementOk;
        }
        self.attempts_used += 1;
        self.cursor = 0;
        if self.attempts_used >= MAX_ATTEMPTS {
            self.status = AuthStatus::Blocked;
            self.display = failure_message(self.kind);
            return Feedback::Blocked;
        }
        self.challenge = Challenge::generate(self.kind, &mut self.rng);
        self.display = retry_message(&self.challenge);
        Feedback::Restarted
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn keyboard_with(code: &str) -> HidAuthorizator {
        let mut a = HidAuthorizator::new(HidKind::Keyboard, 0);
        a.challenge = Challenge::Keyboard(KeyboardChallenge::parse(code).unwrap());
        a
    }

    #[test]
    fn paper_code_authorizes() {
        let mut a = keyboard_with("7E5N3");
        let fb: Vec<_> = "7e5N3".chars().map(|c| a.submit_key(c)).collect();
        assert_eq!(fb[..4], [Feedback::ElementOk; 4]);
        assert_eq!(fb[4], Feedback::Authorized);
        assert_eq!(a.status(), AuthStatus::Authorized);
        assert_eq!(a.submit_key('x'), Feedback::Ignored);
    }

    #[test]
    fn three_wrong_attempts_block() {
        let mut a = HidAuthorizator::new(HidKind::Keyboard, 7);
        for attempt in 1..=3 {
            let Challenge::Keyboard(code) = *a.challenge() else {
                unreachable!()
            };
            let wrong = if code.code[0] == b'A' { 'B' } else { 'A' };
            let fb = a.submit_key(wrong);
            if attempt < 3 {
                assert_eq!(fb, Feedback::Restarted);
                assert!(a.display().starts_with("Wrong code - try again.\n"));
            } else {
                assert_eq!(fb, Feedback::Blocked);
            }
        }
        assert_eq!(a.attempts_used(), 3);
        assert_eq!(
            a.display(),
            "*** Authorization failed ***\nDevice claims to be a keyboard.\nIs it true? Is the device malicious?\nTo check it again, re-attach it."
        );
        let frozen = a.clone();
        for c in "ABCDE".chars() {
            assert_eq!(a.submit_key(c), Feedback::Ignored);
        }
        assert_eq!(a.attempts_used(), frozen.attempts_used());
        assert_eq!(a.display(), frozen.display());
    }

    #[test]
    fn late_mismatch_restarts_whole_code() {
        let mut a = keyboard_with("ABCDE");
        for c in "ABCD".chars() {
            assert_eq!(a.submit_key(c), Feedback::ElementOk);
        }
        assert_eq!(a.submit_key('Z'), Feedback::Restarted);
        assert_eq!(a.attempts_used(), 1);
        assert_eq!(a.progress(), 0);
        let Challenge::Keyboard(code) = a.challenge() else {
            unreachable!()
        };
        assert_eq!(
            a.display(),
            format!("Wrong code - try again.\nTo start using the keyboard pls type:\n{code}")
        );
    }

    #[test]
    fn non_alphabet_symbol_is_a_mismatch() {
        let mut a = keyboard_with("AAAAA");
        assert_eq!(a.submit_key('#'), Feedback::Restarted);
    }

    #[test]
    fn grid_targets_do_not_overlap() {
        for a in Target::all() {
            for b in Target::all().filter(|b| *b > a) {
                let (p, q) = (a.center(), b.center());
                let d2 = (p.x - q.x).pow(2) + (p.y - q.y).pow(2);
                assert!(d2 >= (2 * RADIUS).pow(2));
            }
            let c = a.center();
            assert!(c.x - RADIUS >= 0 && c.x + RADIUS <= DISPLAY_WIDTH);
            assert!(c.y - RADIUS >= 0 && c.y + RADIUS <= DISPLAY_HEIGHT);
        }
    }

    #[test]
    fn radius_boundary_is_strict() {
        let t = Target::new(8).unwrap();
        let c = t.center();
        assert!(t.hit_by(c));
        assert!(t.hit_by(Point {
            x: c.x + RADIUS - 1,
            y: c.y
        }));
        assert!(!t.hit_by(Point {
            x: c.x + RADIUS,
            y: c.y
        }));
        assert!(!t.hit_by(Point {
            x: c.x,
            y: c.y - RADIUS
        }));
        // 10^2 + 24^2 = 676 = 26^2
        assert!(!t.hit_by(Point {
            x: c.x + 10,
            y: c.y + 24
        }));
        assert!(t.hit_by(Point {
            x: c.x + 10,
            y: c.y + 23
        }));
    }

    #[test]
    fn admissible_counts() {
        for first in Target::all() {
            assert_eq!(admissible_second(0, first).len(), 11);
            assert_eq!(admissible_second(1, first).len(), 17);
            assert_eq!(admissible_second(2, first).len(), 17);
        }
    }

    #[test]
    fn exact_spaces_and_probabilities() {
        assert_eq!(challenge_space(HidKind::Keyboard), 60_466_176);
        assert_eq!(challenge_space(HidKind::Mouse), 24u64.pow(3) * 11 * 17 * 17);
        assert_eq!(challenge_space(HidKind::Mouse), 43_946_496);
        assert_eq!(
            attack_success_probability(HidKind::Keyboard),
            Ratio::new(3, 60_466_176)
        );
        assert_eq!(
            attack_success_probability(HidKind::Mouse),
            Ratio::new(3, 43_946_496)
        );
        assert_eq!(
            attack_success_probability(HidKind::Keyboard).recip(),
            Ratio::from_integer(20_155_392)
        );
        assert_eq!(
            attack_success_probability(HidKind::Mouse).recip(),
            Ratio::from_integer(14_648_832)
        );
    }

    #[test]
    fn mouse_authorizes_on_exact_clicks() {
        let mut a = HidAuthorizator::new(HidKind::Mouse, 3);
        let Challenge::Mouse(m) = *a.challenge() else {
            unreachable!()
        };
        for k in 0..6 {
            let fb = a.submit_click(m.element(k).center());
            let want = match k {
                5 => Feedback::Authorized,
                k if k % 2 == 0 => Feedback::PointOk,
                _ => Feedback::ElementOk,
            };
            assert_eq!(fb, want, "click {k}");
        }
        assert_eq!(
            a.display(),
            "Device authorized.\nThe mouse can be used now."
        );
    }

    #[test]
    fn mouse_ignores_keys_and_keyboard_ignores_clicks() {
        let mut m = HidAuthorizator::new(HidKind::Mouse, 1);
        assert_eq!(m.submit_key('A'), Feedback::Ignored);
        let mut k = HidAuthorizator::new(HidKind::Keyboard, 1);
        assert_eq!(k.submit_click(Point { x: 40, y: 40 }), Feedback::Ignored);
        assert_eq!((m.attempts_used(), k.attempts_used()), (0, 0));
    }

    #[test]
    fn keyboard_symbol_frequencies_uniform() {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let samples = 100_000u32;
        let mut counts = [[0u32; 36]; CODE_LEN];
        for _ in 0..samples {
            let c = KeyboardChallenge::generate(&mut rng);
            for (pos, s) in c.symbols().iter().enumerate() {
                counts[pos][ALPHABET.iter().position(|a| a == s).unwrap()] += 1;
            }
        }
        let p = 1.0 / 36.0;
        let mean = samples as f64 * p;
        let sigma = (samples as f64 * p * (1.0 - p)).sqrt();
        for row in counts {
            for c in row {
                // Per-cell bound, Bonferroni-widened over 180 cells.
                assert!((c as f64 - mean).abs() < 4.5 * sigma, "{c} vs {mean}");
            }
        }
    }

    proptest! {
        #[test]
        fn generated_mouse_challenges_admissible(seed in any::<u64>()) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let m = MouseChallenge::generate(&mut rng);
            prop_assert!(MouseChallenge::from_pairs(m.pairs).is_some());
            let (a, b) = m.pairs[0];
            prop_assert!(!message_rows(0, a.row()).contains(&b.row()));
        }

        #[test]
        fn attempts_bounded(seed in any::<u64>(), keys in proptest::collection::vec(any::<char>(), 0..40)) {
            let mut a = HidAuthorizator::new(HidKind::Keyboard, seed);
            for k in keys {
                a.submit_key(k);
                prop_assert!(a.attempts_used() <= MAX_ATTEMPTS);
                prop_assert_eq!(a.status() == AuthStatus::Blocked, a.attempts_used() == MAX_ATTEMPTS);
            }
        }
    }
}
