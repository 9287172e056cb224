//! The fourteen formal-language tasks.
//!
//! Inputs and answers are token ids into per-task alphabets. Each task has
//! a reference solver ([`TaskId::solve`]) used to label generated inputs
//! and an independent checker ([`TaskId::check`]) that verifies a labelled
//! instance by a different route: inverting the transformation,
//! recomputing through another algorithm, or re-parsing.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::expr::{self, Sym};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskId {
    EvenPairs,
    ModularArithmeticSimple,
    ParityCheck,
    CycleNavigation,
    StackManipulation,
    ReverseString,
    ModularArithmetic,
    SolveEquation,
    DuplicateString,
    MissingDuplicate,
    OddsFirst,
    BinaryAddition,
    ComputeSqrt,
    BucketSort,
}

/// Chomsky-hierarchy level of a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskClass {
    /// Regular.
    R,
    /// Deterministic context-free.
    Dcf,
    /// Context-sensitive.
    Cs,
}

/// One labelled example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskInstance {
    pub task: TaskId,
    /// Number of input tokens.
    pub length: usize,
    pub input: Vec<usize>,
    /// Answer tokens, padded to [`TaskId::answer_len`] where answers vary.
    pub target: Vec<usize>,
}

impl TaskInstance {
    /// Input followed by one placeholder per answer slot.
    pub fn sequence(&self, placeholder: usize) -> Vec<usize> {
        let mut s = self.input.clone();
        s.extend(std::iter::repeat_n(placeholder, self.target.len()));
        s
    }

    /// True exactly on the answer slots of [`TaskInstance::sequence`].
    pub fn loss_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.input.len()];
        m.extend(std::iter::repeat_n(true, self.target.len()));
        m
    }
}

const AB: &[&str] = &["a", "b"];
const BOOL: &[&str] = &["False", "True"];
const D3: &[&str] = &["0", "1", "2"];
const D5: &[&str] = &["0", "1", "2", "3", "4"];
const BITS: &[&str] = &["0", "1"];
const SIMPLE: &[&str] = &["0", "1", "2", "3", "4", "+", "-", "*"];
const FULL: &[&str] = &["0", "1", "2", "3", "4", "+", "-", "*", "(", ")"];
const EQUATION: &[&str] = &["0", "1", "2", "3", "4", "+", "-", "*", "(", ")", "x", "="];
const STACK_IN: &[&str] = &["a", "b", "POP", "PUSHa", "PUSHb"];
const STACK_OUT: &[&str] = &["a", "b", "_"];
const ADD_IN: &[&str] = &["0", "1", "+"];
const BITS_PAD: &[&str] = &["0", "1", "_"];

const POP: usize = 2;
const PUSH_A: usize = 3;
const PUSH_B: usize = 4;
/// Padding id in alphabets that end with `_`.
const PAD: usize = 2;
/// Marker that hides one symbol in missing-duplicate inputs.
const HOLE: usize = 2;

fn bad_len(len: usize, reason: &str) -> Error {
    Error::UnsupportedLength {
        len,
        reason: reason.into(),
    }
}

fn sym_of(t: usize) -> Sym {
    match t {
        0..=4 => Sym::Digit(t as u8),
        5 => Sym::Plus,
        6 => Sym::Minus,
        7 => Sym::Times,
        8 => Sym::Open,
        9 => Sym::Close,
        _ => Sym::X,
    }
}

fn token_of(s: Sym) -> usize {
    match s {
        Sym::Digit(d) => d as usize,
        Sym::Plus => 5,
        Sym::Minus => 6,
        Sym::Times => 7,
        Sym::Open => 8,
        Sym::Close => 9,
        Sym::X => 10,
    }
}

const X_TOKEN: usize = 10;
const EQ_TOKEN: usize = 11;

fn bits_to_big(bits: &[usize]) -> num_bigint::BigUint {
    bits.iter()
        .fold(num_bigint::BigUint::default(), |acc, &b| (acc << 1u32) + b as u32)
}

fn big_to_bits(v: &num_bigint::BigUint) -> Vec<usize> {
    if v.bits() == 0 {
        return vec![0];
    }
    (0..v.bits()).rev().map(|i| v.bit(i) as usize).collect()
}

/// Schoolbook addition of two big-endian bit strings.
fn add_bits(a: &[usize], b: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(a.len().max(b.len()) + 1);
    let (mut i, mut j, mut carry) = (a.len(), b.len(), 0);
    while i > 0 || j > 0 || carry > 0 {
        let mut s = carry;
        if i > 0 {
            i -= 1;
            s += a[i];
        }
        if j > 0 {
            j -= 1;
            s += b[j];
        }
        out.push(s % 2);
        carry = s / 2;
    }
    out.reverse();
    strip_zeros(out)
}

fn strip_zeros(mut v: Vec<usize>) -> Vec<usize> {
    let lead = v.iter().take_while(|&&b| b == 0).count().min(v.len().saturating_sub(1));
    v.drain(..lead);
    v
}

/// Floor square root of a big-endian bit string.
fn sqrt_bits(bits: &[usize]) -> Vec<usize> {
    big_to_bits(&bits_to_big(bits).sqrt())
}

fn pad_to(mut v: Vec<usize>, len: usize, pad: usize) -> Vec<usize> {
    v.resize(len, pad);
    v
}

fn left_pad(v: Vec<usize>, len: usize) -> Vec<usize> {
    let mut out = vec![0; len.saturating_sub(v.len())];
    out.extend(v);
    out
}

/// Splits a binary-addition input at `+`.
fn operands(input: &[usize]) -> Result<(&[usize], &[usize])> {
    let plus = input
        .iter()
        .position(|&t| t == 2)
        .ok_or_else(|| Error::contract("addition input has no `+`"))?;
    let (a, b) = (&input[..plus], &input[plus + 1..]);
    if a.is_empty() || b.is_empty() || b.contains(&2) {
        return Err(Error::contract("addition input needs exactly two operands"));
    }
    Ok((a, b))
}

impl TaskId {
    pub const ALL: [TaskId; 14] = [
        TaskId::EvenPairs,
        TaskId::ModularArithmeticSimple,
        TaskId::ParityCheck,
        TaskId::CycleNavigation,
        TaskId::StackManipulation,
        TaskId::ReverseString,
        TaskId::ModularArithmetic,
        TaskId::SolveEquation,
        TaskId::DuplicateString,
        TaskId::MissingDuplicate,
        TaskId::OddsFirst,
        TaskId::BinaryAddition,
        TaskId::ComputeSqrt,
        TaskId::BucketSort,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskId::EvenPairs => "even_pairs",
            TaskId::ModularArithmeticSimple => "modular_arithmetic_simple",
            TaskId::ParityCheck => "parity_check",
            TaskId::CycleNavigation => "cycle_navigation",
            TaskId::StackManipulation => "stack_manipulation",
            TaskId::ReverseString => "reverse_string",
            TaskId::ModularArithmetic => "modular_arithmetic",
            TaskId::SolveEquation => "solve_equation",
            TaskId::DuplicateString => "duplicate_string",
            TaskId::MissingDuplicate => "missing_duplicate",
            TaskId::OddsFirst => "odds_first",
            TaskId::BinaryAddition => "binary_addition",
            TaskId::ComputeSqrt => "compute_sqrt",
            TaskId::BucketSort => "bucket_sort",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn class(self) -> TaskClass {
        use TaskId::*;
        match self {
            EvenPairs | ModularArithmeticSimple | ParityCheck | CycleNavigation => TaskClass::R,
            StackManipulation | ReverseString | ModularArithmetic | SolveEquation => TaskClass::Dcf,
            _ => TaskClass::Cs,
        }
    }

    /// Whether the answer is unchanged by any reordering of the input.
    pub fn permutation_invariant(self) -> bool {
        matches!(self, TaskId::ParityCheck | TaskId::CycleNavigation | TaskId::BucketSort)
    }

    /// Accuracy of uniform guessing as reported for the benchmark.
    pub fn random_baseline(self) -> f64 {
        use TaskId::*;
        match self {
            ModularArithmeticSimple | CycleNavigation | BucketSort | SolveEquation | ModularArithmetic => 0.2,
            _ => 0.5,
        }
    }

    pub fn input_alphabet(self) -> &'static [&'static str] {
        use TaskId::*;
        match self {
            EvenPairs | ParityCheck | ReverseString | DuplicateString | OddsFirst => AB,
            ModularArithmeticSimple => SIMPLE,
            CycleNavigation | MissingDuplicate => D3,
            StackManipulation => STACK_IN,
            ModularArithmetic => FULL,
            SolveEquation => EQUATION,
            BinaryAddition => ADD_IN,
            ComputeSqrt => BITS,
            BucketSort => D5,
        }
    }

    pub fn output_alphabet(self) -> &'static [&'static str] {
        use TaskId::*;
        match self {
            EvenPairs | ParityCheck => BOOL,
            ModularArithmeticSimple | CycleNavigation | ModularArithmetic | SolveEquation | BucketSort => D5,
            StackManipulation => STACK_OUT,
            ReverseString | DuplicateString | OddsFirst => AB,
            MissingDuplicate | ComputeSqrt => BITS,
            BinaryAddition => BITS_PAD,
        }
    }

    /// Model input vocabulary: the input alphabet plus one placeholder.
    pub fn model_vocab(self) -> usize {
        self.input_alphabet().len() + 1
    }

    pub fn placeholder(self) -> usize {
        self.input_alphabet().len()
    }

    pub fn min_len(self) -> usize {
        match self {
            TaskId::MissingDuplicate => 2,
            TaskId::BinaryAddition | TaskId::SolveEquation => 3,
            _ => 1,
        }
    }

    pub fn supports_len(self, len: usize) -> bool {
        len >= self.min_len()
            && match self {
                TaskId::ModularArithmeticSimple => len % 2 == 1,
                TaskId::MissingDuplicate => len % 2 == 0,
                _ => true,
            }
    }

    /// Largest supported length not above `len`, or the minimum length.
    pub fn fit_length(self, len: usize) -> usize {
        (self.min_len()..=len.max(self.min_len()))
            .rev()
            .find(|&l| self.supports_len(l))
            .unwrap_or(self.min_len())
    }

    /// Number of answer slots for an input of `len` tokens.
    pub fn answer_len(self, len: usize) -> usize {
        use TaskId::*;
        match self {
            StackManipulation | ReverseString | OddsFirst | BucketSort => len,
            DuplicateString => 2 * len,
            BinaryAddition => len - 1,
            ComputeSqrt => len.div_ceil(2),
            _ => 1,
        }
    }

    /// Reference answer for `input`.
    pub fn solve(self, input: &[usize]) -> Result<Vec<usize>> {
        use TaskId::*;
        let n = input.len();
        if !self.supports_len(n) {
            return Err(bad_len(n, "length not supported by this task"));
        }
        if let Some(&bad) = input.iter().find(|&&t| t >= self.input_alphabet().len()) {
            return Err(Error::Index {
                what: "task input token",
                index: bad,
                size: self.input_alphabet().len(),
            });
        }
        Ok(match self {
            EvenPairs => {
                let changes = input.windows(2).filter(|w| w[0] != w[1]).count();
                vec![(changes % 2 == 0) as usize]
            }
            ParityCheck => vec![(input.iter().filter(|&&t| t == 1).count() % 2 == 0) as usize],
            CycleNavigation => {
                let pos = input.iter().fold(0i64, |p, &t| match t {
                    1 => p + 1,
                    2 => p - 1,
                    _ => p,
                });
                vec![pos.rem_euclid(5) as usize]
            }
            ModularArithmeticSimple | ModularArithmetic => {
                let syms: Vec<Sym> = input.iter().map(|&t| sym_of(t)).collect();
                vec![expr::parse_eval(&syms, None)? as usize]
            }
            SolveEquation => {
                let (lhs, value) = split_equation(input)?;
                let syms: Vec<Sym> = lhs.iter().map(|&t| sym_of(t)).collect();
                let mut hits = (0..5).filter(|&x| expr::parse_eval(&syms, Some(x)).ok() == Some(value as i64));
                vec![hits.next().ok_or_else(|| Error::contract("equation has no solution"))? as usize]
            }
            StackManipulation => {
                let mut stack = Vec::new();
                for &t in input {
                    match t {
                        0 | 1 => stack.push(t),
                        POP => {
                            stack.pop().ok_or_else(|| Error::contract("pop from an empty stack"))?;
                        }
                        PUSH_A => stack.push(0),
                        _ => stack.push(1),
                    }
                }
                if stack.is_empty() {
                    return Err(Error::contract("stack ends empty"));
                }
                pad_to(stack, n, PAD)
            }
            ReverseString => input.iter().rev().copied().collect(),
            DuplicateString => input.iter().chain(input).copied().collect(),
            MissingDuplicate => {
                let half = n / 2;
                let holes: Vec<usize> = (0..n).filter(|&i| input[i] == HOLE).collect();
                let [i] = holes[..] else {
                    return Err(Error::contract("expected exactly one hidden symbol"));
                };
                let twin = if i < half { i + half } else { i - half };
                vec![input[twin]]
            }
            OddsFirst => {
                let mut v: Vec<usize> = input.iter().step_by(2).copied().collect();
                v.extend(input.iter().skip(1).step_by(2));
                v
            }
            BinaryAddition => {
                let (a, b) = operands(input)?;
                pad_to(add_bits(a, b), n - 1, PAD)
            }
            ComputeSqrt => left_pad(sqrt_bits(input), n.div_ceil(2)),
            BucketSort => {
                let mut counts = [0usize; 5];
                input.iter().for_each(|&t| counts[t] += 1);
                counts.iter().enumerate().flat_map(|(d, &c)| std::iter::repeat_n(d, c)).collect()
            }
        })
    }

    /// Samples an input of exactly `len` tokens and labels it.
    pub fn generate<R: Rng>(self, len: usize, rng: &mut R) -> Result<TaskInstance> {
        use TaskId::*;
        if !self.supports_len(len) {
            return Err(bad_len(len, &format!("{} does not support this length", self.name())));
        }
        let uniform = |k: usize, rng: &mut R| -> Vec<usize> { (0..len).map(|_| rng.gen_range(0..k)).collect() };
        let (input, target) = match self {
            ModularArithmeticSimple => {
                let input: Vec<usize> = (0..len)
                    .map(|i| if i % 2 == 0 { rng.gen_range(0..5) } else { rng.gen_range(5..8) })
                    .collect();
                (input, None)
            }
            ModularArithmetic => {
                let e = expr::generate(len, rng)?;
                let input = e.symbols().into_iter().map(token_of).collect();
                (input, Some(vec![e.eval() as usize]))
            }
            SolveEquation => {
                let e = expr::generate(len - 2, rng)?;
                let tokens: Vec<usize> = e.symbols().into_iter().map(token_of).collect();
                let digits: Vec<usize> = (0..tokens.len()).filter(|&i| tokens[i] < 5).collect();
                let at = *digits.choose(rng).expect("every expression holds a digit");
                let inst = equation_from_expression(&tokens, at)?;
                (inst.input, Some(inst.target))
            }
            StackManipulation => loop {
                let depth = rng.gen_range(1..=len);
                let mut input: Vec<usize> = (0..depth).map(|_| rng.gen_range(0..2)).collect();
                input.extend((depth..len).map(|_| rng.gen_range(POP..=PUSH_B)));
                if let Ok(t) = self.solve(&input) {
                    break (input, Some(t));
                }
            },
            MissingDuplicate => {
                let half: Vec<usize> = (0..len / 2).map(|_| rng.gen_range(0..2)).collect();
                let mut input = half.clone();
                input.extend(&half);
                let at = rng.gen_range(0..len);
                let hidden = input[at];
                input[at] = HOLE;
                (input, Some(vec![hidden]))
            }
            BinaryAddition => {
                let la = rng.gen_range(1..=len - 2);
                let mut operand = |l: usize| -> Vec<usize> {
                    if l == 1 {
                        vec![rng.gen_range(0..2)]
                    } else {
                        std::iter::once(1).chain((1..l).map(|_| rng.gen_range(0..2))).collect()
                    }
                };
                let mut input = operand(la);
                input.push(2);
                input.extend(operand(len - 1 - la));
                (input, None)
            }
            CycleNavigation | BucketSort | ComputeSqrt | EvenPairs | ParityCheck
            | ReverseString | DuplicateString | OddsFirst => (uniform(self.input_alphabet().len(), rng), None),
        };
        let target = match target {
            Some(t) => t,
            None => self.solve(&input)?,
        };
        Ok(TaskInstance {
            task: self,
            length: len,
            input,
            target,
        })
    }

    /// Independent verification of a labelled instance.
    pub fn check(self, inst: &TaskInstance) -> bool {
        use TaskId::*;
        let (x, y) = (&inst.input, &inst.target);
        let n = x.len();
        if inst.task != self
            || n != inst.length
            || y.len() != self.answer_len(n)
            || x.iter().any(|&t| t >= self.input_alphabet().len())
            || y.iter().any(|&t| t >= self.output_alphabet().len())
        {
            return false;
        }
        match self {
            EvenPairs => {
                // Equal end symbols ⇔ an even number of ab/ba transitions.
                y[0] == (x[0] == x[n - 1]) as usize
            }
            ParityCheck => {
                let bs = x.iter().map(|&t| t as u32).sum::<u32>();
                y[0] == (1 - bs % 2) as usize
            }
            CycleNavigation => {
                let steps: i64 = x.iter().map(|&t| [0, 1, 4][t]).sum();
                y[0] as i64 == steps % 5
            }
            ModularArithmeticSimple => {
                // Collapse products first, then fold signed terms.
                let mut terms: Vec<(i64, i64)> = vec![(1, x[0] as i64)];
                for pair in x[1..].chunks(2) {
                    let d = pair[1] as i64;
                    match pair[0] {
                        7 => terms.last_mut().expect("non-empty").1 *= d,
                        5 => terms.push((1, d)),
                        _ => terms.push((-1, d)),
                    }
                }
                let v = terms.iter().map(|(s, t)| s * t).sum::<i64>().rem_euclid(5);
                y[0] as i64 == v
            }
            ModularArithmetic => {
                let syms: Vec<Sym> = x.iter().map(|&t| sym_of(t)).collect();
                expr::parse_eval(&syms, None).ok() == Some(y[0] as i64)
            }
            SolveEquation => {
                let Ok((lhs, value)) = split_equation(x) else { return false };
                let syms: Vec<Sym> = lhs.iter().map(|&t| sym_of(t)).collect();
                syms.iter().filter(|&&s| s == Sym::X).count() == 1
                    && expr::parse_eval(&syms, Some(y[0] as i64)).ok() == Some(value as i64)
            }
            StackManipulation => {
                // Undo the actions from the answer backwards: each push must
                // match the current top, each pop restores an unknown symbol
                // that the initial stack prefix has to agree with.
                let depth = x.iter().position(|&t| t >= POP).unwrap_or(n);
                if x[depth..].iter().any(|&t| t < POP) {
                    return false;
                }
                let len = y.iter().position(|&t| t == PAD).unwrap_or(n);
                if len == 0 || y[len..].iter().any(|&t| t != PAD) {
                    return false;
                }
                let mut stack: Vec<Option<usize>> = y[..len].iter().map(|&t| Some(t)).collect();
                for &a in x[depth..].iter().rev() {
                    match a {
                        POP => stack.push(None),
                        _ => match stack.pop() {
                            Some(Some(t)) if t == a - PUSH_A => {}
                            Some(None) => {}
                            _ => return false,
                        },
                    }
                }
                stack.len() == depth && stack.iter().zip(&x[..depth]).all(|(s, &t)| s.is_none_or(|s| s == t))
            }
            ReverseString => y.iter().rev().eq(x.iter()),
            DuplicateString => y[..n] == y[n..] && y[..n] == x[..],
            MissingDuplicate => {
                let mut filled = x.clone();
                match filled.iter().position(|&t| t == HOLE) {
                    Some(i) => filled[i] = y[0],
                    None => return false,
                }
                filled[..n / 2] == filled[n / 2..] && !filled.contains(&HOLE)
            }
            OddsFirst => {
                let h = n.div_ceil(2);
                (0..n).all(|i| x[i] == if i % 2 == 0 { y[i / 2] } else { y[h + i / 2] })
            }
            BinaryAddition => {
                let Ok((a, b)) = operands(x) else { return false };
                let len = y.iter().position(|&t| t == PAD).unwrap_or(y.len());
                if y[len..].iter().any(|&t| t != PAD) || len == 0 {
                    return false;
                }
                bits_to_big(&y[..len]) == bits_to_big(a) + bits_to_big(b) && big_to_bits(&bits_to_big(&y[..len])) == y[..len]
            }
            ComputeSqrt => {
                let v = bits_to_big(x);
                let r = bits_to_big(y);
                let r1: num_bigint::BigUint = &r + 1u32;
                &r * &r <= v && v < &r1 * &r1 && r.bits() as usize <= y.len()
            }
            BucketSort => {
                let mut sorted = x.clone();
                sorted.sort_unstable();
                *y == sorted
            }
        }
    }

    /// Tokenizes text over the input alphabet, ignoring whitespace and
    /// taking the longest matching symbol at each step.
    pub fn encode_input(self, text: &str) -> Result<Vec<usize>> {
        encode(text, self.input_alphabet())
    }

    pub fn encode_output(self, text: &str) -> Result<Vec<usize>> {
        encode(text, self.output_alphabet())
    }

    pub fn render_input(self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.input_alphabet()[t]).collect()
    }

    /// Renders an answer, dropping padding.
    pub fn render_output(self, tokens: &[usize]) -> String {
        tokens.iter().map(|&t| self.output_alphabet()[t]).filter(|&s| s != "_").collect()
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Turns a modular-arithmetic expression into an equation by hiding the
/// digit at `at` behind `x`; the answer is the hidden digit, which may not
/// be the only solution.
pub fn equation_from_expression(expr_tokens: &[usize], at: usize) -> Result<TaskInstance> {
    if expr_tokens.get(at).is_none_or(|&t| t >= 5) {
        return Err(Error::contract(format!("no digit at position {at}")));
    }
    let syms: Vec<Sym> = expr_tokens.iter().map(|&t| sym_of(t)).collect();
    let value = expr::parse_eval(&syms, None)? as usize;
    let mut input = expr_tokens.to_vec();
    let hidden = std::mem::replace(&mut input[at], X_TOKEN);
    input.extend([EQ_TOKEN, value]);
    Ok(TaskInstance {
        task: TaskId::SolveEquation,
        length: input.len(),
        input,
        target: vec![hidden],
    })
}

fn split_equation(input: &[usize]) -> Result<(&[usize], usize)> {
    match input {
        [lhs @ .., EQ_TOKEN, v] if *v < 5 && !lhs.is_empty() => Ok((lhs, *v)),
        _ => Err(Error::contract("equation must end with `=` and a digit")),
    }
}

fn encode(text: &str, alphabet: &[&str]) -> Result<Vec<usize>> {
    let s: String = text.chars().filter(|c| !c.is_whitespace()).collect();
    let mut rest = s.as_str();
    let mut out = Vec::new();
    while !rest.is_empty() {
        let (id, sym) = alphabet
            .iter()
            .enumerate()
            .filter(|(_, a)| rest.starts_with(**a))
            .max_by_key(|(_, a)| a.len())
            .ok_or_else(|| Error::config(format!("cannot tokenize `{rest}`")))?;
        out.push(id);
        rest = &rest[sym.len()..];
    }
    Ok(out)
}

/// Uniform length in `[1, max_len]`.
pub fn sample_training_length<R: Rng>(max_len: usize, rng: &mut R) -> usize {
    rng.gen_range(1..=max_len.max(1))
}

/// Shuffles an instance's input in place (used to probe permutation invariance).
pub fn shuffled_input<R: Rng>(inst: &TaskInstance, rng: &mut R) -> Vec<usize> {
    let mut v = inst.input.clone();
    v.shuffle(rng);
    v
}
