//! Pairwise tensor contraction with a cached evaluation order.
//!
//! A contraction is written einsum-style (`"ftk,ftm,ftn->fkmn"`). The
//! planner searches pairwise contraction orders for the one with the fewest
//! multiply-adds and caches it per shape signature, so repeated calls inside
//! EM iterations pay for the search once.

use std::borrow::Cow;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock, RwLock};

use num_complex::Complex64 as C64;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Operand counts above this use greedy pair selection instead of exhaustive search.
const MAX_EXHAUSTIVE_OPERANDS: usize = 6;

/// Dense row-major complex tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<C64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<C64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![C64::new(0.0, 0.0); n],
        }
    }

    pub fn from_real(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn conj(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x.conj()).collect(),
        }
    }
}

/// Parsed contraction: axis labels per operand and for the output.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ContractionSpec {
    inputs: Vec<Vec<char>>,
    output: Vec<char>,
}

impl ContractionSpec {
    pub fn inputs(&self) -> &[Vec<char>] {
        &self.inputs
    }

    pub fn output(&self) -> &[char] {
        &self.output
    }
}

impl FromStr for ContractionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (lhs, rhs) = s
            .split_once("->")
            .ok_or_else(|| Error::Shape(format!("contraction spec {s:?} lacks '->'")))?;
        let parse_labels = |part: &str| -> Result<Vec<char>> {
            let labels: Vec<char> = part.trim().chars().collect();
            let mut seen = HashSet::new();
            for &c in &labels {
                if !c.is_ascii_alphabetic() {
                    return Err(Error::Shape(format!("bad axis label {c:?} in {s:?}")));
                }
                if !seen.insert(c) {
                    return Err(Error::Shape(format!("repeated axis label {c:?} in {s:?}")));
                }
            }
            Ok(labels)
        };
        let inputs = lhs.split(',').map(parse_labels).collect::<Result<Vec<_>>>()?;
        let output = parse_labels(rhs)?;
        for c in &output {
            if !inputs.iter().any(|l| l.contains(c)) {
                return Err(Error::Shape(format!("output label {c:?} not in any input")));
            }
        }
        Ok(Self { inputs, output })
    }
}

impl fmt::Display for ContractionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ins: Vec<String> = self.inputs.iter().map(|l| l.iter().collect()).collect();
        let out: String = self.output.iter().collect();
        write!(f, "{}->{}", ins.join(","), out)
    }
}

/// Cache key: the contraction together with every operand's extents.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ShapeSignature {
    pub spec: ContractionSpec,
    pub shapes: Vec<Vec<usize>>,
}

/// One pairwise contraction. `lhs < rhs` index the current operand list;
/// both are removed and the result is appended.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlanStep {
    pub lhs: usize,
    pub rhs: usize,
    pub result_labels: Vec<char>,
    pub flops: u128,
}

#[derive(Clone, Debug)]
pub struct ContractionPlan {
    pub signature: ShapeSignature,
    pub steps: Vec<PlanStep>,
    pub flop_estimate: u128,
    pub naive_flop_estimate: u128,
}

impl ContractionPlan {
    fn build(signature: ShapeSignature) -> Result<Self> {
        let extents = extents_of(&signature)?;
        let ops = signature.spec.inputs.clone();
        let out = &signature.spec.output;
        let (naive_flop_estimate, naive_steps) = left_to_right(&ops, out, &extents);
        let (flop_estimate, steps) = if ops.len() <= MAX_EXHAUSTIVE_OPERANDS {
            exhaustive(&ops, out, &extents)
        } else {
            greedy(&ops, out, &extents)
        };
        // ties go to the naive order so the plan is never worse by construction
        let (flop_estimate, steps) = if naive_flop_estimate <= flop_estimate {
            (naive_flop_estimate, naive_steps)
        } else {
            (flop_estimate, steps)
        };
        Ok(Self {
            signature,
            steps,
            flop_estimate,
            naive_flop_estimate,
        })
    }

    /// Plan that contracts operands strictly left to right.
    pub fn naive(signature: ShapeSignature) -> Result<Self> {
        let extents = extents_of(&signature)?;
        let (cost, steps) = left_to_right(&signature.spec.inputs, &signature.spec.output, &extents);
        Ok(Self {
            signature,
            steps,
            flop_estimate: cost,
            naive_flop_estimate: cost,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn evaluate(&self, operands: &[&Tensor]) -> Result<Tensor> {
        let spec = &self.signature.spec;
        if operands.len() != spec.inputs.len() {
            return Err(Error::Shape(format!(
                "plan expects {} operands, got {}",
                spec.inputs.len(),
                operands.len()
            )));
        }
        for (op, shape) in operands.iter().zip(&self.signature.shapes) {
            if op.shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "operand shape {:?} does not match planned {:?}",
                    op.shape(),
                    shape
                )));
            }
        }
        let mut live: Vec<(Vec<char>, Operand<'_>)> = spec
            .inputs
            .iter()
            .cloned()
            .zip(operands.iter().map(|t| Operand::Borrowed(t)))
            .collect();
        for step in &self.steps {
            let (lb, b) = live.remove(step.rhs);
            let (la, a) = live.remove(step.lhs);
            let t = pairwise(a.get(), &la, b.get(), &lb, &step.result_labels);
            live.push((step.result_labels.clone(), Operand::Owned(t)));
        }
        let (labels, t) = live.pop().expect("at least one operand");
        match t {
            Operand::Owned(t) if labels == spec.output => Ok(t),
            t => Ok(reduce_to(t.get(), &labels, &spec.output)),
        }
    }
}

enum Operand<'a> {
    Borrowed(&'a Tensor),
    Owned(Tensor),
}

impl Operand<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Operand::Borrowed(t) => t,
            Operand::Owned(t) => t,
        }
    }
}

fn extents_of(sig: &ShapeSignature) -> Result<HashMap<char, usize>> {
    if sig.shapes.len() != sig.spec.inputs.len() {
        return Err(Error::Shape(format!(
            "{} shapes for {} operands",
            sig.shapes.len(),
            sig.spec.inputs.len()
        )));
    }
    let mut extents = HashMap::new();
    for (labels, shape) in sig.spec.inputs.iter().zip(&sig.shapes) {
        if labels.len() != shape.len() {
            return Err(Error::Shape(format!(
                "operand labelled {:?} has rank {}",
                labels.iter().collect::<String>(),
                shape.len()
            )));
        }
        for (&c, &n) in labels.iter().zip(shape) {
            if let Some(&prev) = extents.get(&c) {
                if prev != n {
                    return Err(Error::Shape(format!(
                        "axis {c:?} has inconsistent extents {prev} and {n}"
                    )));
                }
            } else {
                extents.insert(c, n);
            }
        }
    }
    Ok(extents)
}

/// Labels produced by contracting `a` with `b` while keeping everything in `keep`:
/// shared kept labels (in `a` order), then `a`-only, then `b`-only.
fn pair_result_labels(a: &[char], b: &[char], keep: &HashSet<char>) -> Vec<char> {
    let batch = a.iter().filter(|c| b.contains(c) && keep.contains(c));
    let left = a.iter().filter(|c| !b.contains(c) && keep.contains(c));
    let right = b.iter().filter(|c| !a.contains(c) && keep.contains(c));
    batch.chain(left).chain(right).copied().collect()
}

fn pair_cost(a: &[char], b: &[char], extents: &HashMap<char, usize>) -> u128 {
    let mut seen = HashSet::new();
    a.iter()
        .chain(b)
        .filter(|c| seen.insert(**c))
        .map(|c| extents[c] as u128)
        .product()
}

fn keep_set(ops: &[Vec<char>], skip: (usize, usize), out: &[char]) -> HashSet<char> {
    let mut keep: HashSet<char> = out.iter().copied().collect();
    for (i, l) in ops.iter().enumerate() {
        if i != skip.0 && i != skip.1 {
            keep.extend(l.iter().copied());
        }
    }
    keep
}

fn apply_step(
    ops: &[Vec<char>],
    i: usize,
    j: usize,
    out: &[char],
    extents: &HashMap<char, usize>,
) -> (Vec<Vec<char>>, PlanStep) {
    let keep = keep_set(ops, (i, j), out);
    let result_labels = pair_result_labels(&ops[i], &ops[j], &keep);
    let flops = pair_cost(&ops[i], &ops[j], extents);
    let mut next: Vec<Vec<char>> = ops
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != i && *k != j)
        .map(|(_, l)| l.clone())
        .collect();
    next.push(result_labels.clone());
    (
        next,
        PlanStep {
            lhs: i,
            rhs: j,
            result_labels,
            flops,
        },
    )
}

fn left_to_right(
    ops: &[Vec<char>],
    out: &[char],
    extents: &HashMap<char, usize>,
) -> (u128, Vec<PlanStep>) {
    let mut ops = ops.to_vec();
    let mut steps = Vec::new();
    let mut total = 0;
    while ops.len() > 1 {
        // operand 0 is always the oldest; the running result is appended at the end,
        // so contract the last (running result) with the next original operand
        let (i, j) = if steps.is_empty() { (0, 1) } else { (0, ops.len() - 1) };
        let (next, step) = apply_step(&ops, i, j, out, extents);
        total += step.flops;
        steps.push(step);
        ops = next;
    }
    (total, steps)
}

fn exhaustive(
    ops: &[Vec<char>],
    out: &[char],
    extents: &HashMap<char, usize>,
) -> (u128, Vec<PlanStep>) {
    if ops.len() <= 1 {
        return (0, Vec::new());
    }
    let mut best: Option<(u128, Vec<PlanStep>)> = None;
    for i in 0..ops.len() {
        for j in (i + 1)..ops.len() {
            let (next, step) = apply_step(ops, i, j, out, extents);
            let (rest_cost, rest) = exhaustive(&next, out, extents);
            let cost = step.flops + rest_cost;
            if best.as_ref().map_or(true, |(c, _)| cost < *c) {
                let mut steps = vec![step];
                steps.extend(rest);
                best = Some((cost, steps));
            }
        }
    }
    best.expect("at least one pair")
}

fn greedy(ops: &[Vec<char>], out: &[char], extents: &HashMap<char, usize>) -> (u128, Vec<PlanStep>) {
    let mut ops = ops.to_vec();
    let mut steps = Vec::new();
    let mut total = 0;
    while ops.len() > 1 {
        let mut best: Option<(Vec<Vec<char>>, PlanStep)> = None;
        for i in 0..ops.len() {
            for j in (i + 1)..ops.len() {
                let cand = apply_step(&ops, i, j, out, extents);
                if best.as_ref().map_or(true, |(_, s)| cand.1.flops < s.flops) {
                    best = Some(cand);
                }
            }
        }
        let (next, step) = best.expect("at least one pair");
        total += step.flops;
        steps.push(step);
        ops = next;
    }
    (total, steps)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes so that the result is labelled `to` (a permutation of `from`).
fn permute<'a>(t: &'a Tensor, from: &[char], to: &[char]) -> Cow<'a, Tensor> {
    if from == to {
        return Cow::Borrowed(t);
    }
    Cow::Owned(permute_owned(t, from, to))
}

fn permute_owned(t: &Tensor, from: &[char], to: &[char]) -> Tensor {
    let src_strides = strides(&t.shape);
    let axes: Vec<usize> = to
        .iter()
        .map(|c| from.iter().position(|x| x == c).expect("label present"))
        .collect();
    let shape: Vec<usize> = axes.iter().map(|&a| t.shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let total: usize = shape.iter().product();
    let mut data = Vec::with_capacity(total);
    if total == 0 {
        return Tensor { shape, data };
    }
    let rank = shape.len();
    let inner = shape[rank - 1];
    let inner_step = step[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        for k in 0..inner {
            data.push(t.data[base + k * inner_step]);
        }
        // odometer over all but the innermost axis
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return Tensor { shape, data };
            }
            axis -= 1;
            idx[axis] += 1;
            base += step[axis];
            if idx[axis] < shape[axis] {
                break;
            }
            base -= step[axis] * shape[axis];
            idx[axis] = 0;
        }
    }
}

/// Sums away labels not in `keep`, preserving the order of the rest.
fn sum_out<'a>(t: &'a Tensor, labels: &[char], keep: &[char]) -> (Cow<'a, Tensor>, Vec<char>) {
    let kept: Vec<char> = labels.iter().copied().filter(|c| keep.contains(c)).collect();
    if kept.len() == labels.len() {
        return (Cow::Borrowed(t), kept);
    }
    let dropped: Vec<char> = labels.iter().copied().filter(|c| !keep.contains(c)).collect();
    let order: Vec<char> = kept.iter().chain(&dropped).copied().collect();
    let p = permute(t, labels, &order);
    let block: usize = dropped
        .iter()
        .map(|c| t.shape[labels.iter().position(|x| x == c).unwrap()])
        .product();
    let shape: Vec<usize> = kept
        .iter()
        .map(|c| t.shape[labels.iter().position(|x| x == c).unwrap()])
        .collect();
    let data = if block == 0 {
        vec![C64::new(0.0, 0.0); shape.iter().product()]
    } else {
        p.data.chunks(block).map(|ch| ch.iter().sum()).collect()
    };
    (Cow::Owned(Tensor { shape, data }), kept)
}

fn reduce_to(t: &Tensor, labels: &[char], out: &[char]) -> Tensor {
    let (r, kept) = sum_out(t, labels, out);
    permute(&r, &kept, out).into_owned()
}

fn pairwise(a: &Tensor, la: &[char], b: &Tensor, lb: &[char], result: &[char]) -> Tensor {
    // labels private to one operand and not kept are summed first
    let a_keep: Vec<char> = la
        .iter()
        .copied()
        .filter(|c| lb.contains(c) || result.contains(c))
        .collect();
    let b_keep: Vec<char> = lb
        .iter()
        .copied()
        .filter(|c| la.contains(c) || result.contains(c))
        .collect();
    let (a, la) = sum_out(a, la, &a_keep);
    let (b, lb) = sum_out(b, lb, &b_keep);

    let batch: Vec<char> = result
        .iter()
        .copied()
        .filter(|c| la.contains(c) && lb.contains(c))
        .collect();
    let left: Vec<char> = la.iter().copied().filter(|c| !lb.contains(c)).collect();
    let right: Vec<char> = lb.iter().copied().filter(|c| !la.contains(c)).collect();
    let contracted: Vec<char> = la
        .iter()
        .copied()
        .filter(|c| lb.contains(c) && !result.contains(c))
        .collect();

    let extent = |c: &char| -> usize {
        if let Some(p) = la.iter().position(|x| x == c) {
            a.shape[p]
        } else {
            b.shape[lb.iter().position(|x| x == c).unwrap()]
        }
    };
    let nb: usize = batch.iter().map(extent).product();
    let nl: usize = left.iter().map(extent).product();
    let nr: usize = right.iter().map(extent).product();
    let nc: usize = contracted.iter().map(extent).product();

    let a_order: Vec<char> = batch.iter().chain(&left).chain(&contracted).copied().collect();
    let b_order: Vec<char> = batch.iter().chain(&right).chain(&contracted).copied().collect();
    let ap = permute(&a, &la, &a_order);
    let bp = permute(&b, &lb, &b_order);

    let mut out = vec![C64::new(0.0, 0.0); nb * nl * nr];
    let work = |(bi, chunk): (usize, &mut [C64])| {
        let ab = &ap.data[bi * nl * nc..(bi + 1) * nl * nc];
        let bb = &bp.data[bi * nr * nc..(bi + 1) * nr * nc];
        for l in 0..nl {
            let arow = &ab[l * nc..(l + 1) * nc];
            for r in 0..nr {
                let brow = &bb[r * nc..(r + 1) * nc];
                chunk[l * nr + r] = dot(arow, brow);
            }
        }
    };
    let block = nl * nr;
    if block > 0 {
        if nb * block * nc.max(1) > 1 << 16 && nb > 1 {
            out.par_chunks_mut(block).enumerate().for_each(work);
        } else {
            out.chunks_mut(block).enumerate().for_each(work);
        }
    }
    let produced: Vec<char> = batch.iter().chain(&left).chain(&right).copied().collect();
    let shape: Vec<usize> = produced.iter().map(extent).collect();
    let t = Tensor { shape, data: out };
    if produced == result {
        return t;
    }
    permute_owned(&t, &produced, result)
}

#[inline]
fn dot(a: &[C64], b: &[C64]) -> C64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        re += x.re * y.re - x.im * y.im;
        im += x.re * y.im + x.im * y.re;
    }
    C64::new(re, im)
}

/// Insert-once plan cache keyed by shape signature.
#[derive(Default)]
pub struct PlanCache {
    plans: RwLock<HashMap<ShapeSignature, Arc<ContractionPlan>>>,
    computed: AtomicUsize,
    hits: AtomicUsize,
}

impl PlanCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Process-wide cache used by the processing stages.
    pub fn global() -> &'static PlanCache {
        static CACHE: OnceLock<PlanCache> = OnceLock::new();
        CACHE.get_or_init(PlanCache::new)
    }

    pub fn plan(&self, spec: &ContractionSpec, shapes: &[&[usize]]) -> Result<Arc<ContractionPlan>> {
        let sig = ShapeSignature {
            spec: spec.clone(),
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        };
        if let Some(p) = self.plans.read().expect("plan cache poisoned").get(&sig) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(p));
        }
        let mut plans = self.plans.write().expect("plan cache poisoned");
        if let Some(p) = plans.get(&sig) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(p));
        }
        let plan = Arc::new(ContractionPlan::build(sig.clone())?);
        self.computed.fetch_add(1, Ordering::Relaxed);
        plans.insert(sig, Arc::clone(&plan));
        Ok(plan)
    }

    /// Number of plans computed (cache misses).
    pub fn computed(&self) -> usize {
        self.computed.load(Ordering::Relaxed)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    /// Number of distinct shape signatures stored.
    pub fn len(&self) -> usize {
        self.plans.read().expect("plan cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Plans (or fetches from the global cache) a contraction.
pub fn plan_contraction(spec: &str, shapes: &[&[usize]]) -> Result<Arc<ContractionPlan>> {
    PlanCache::global().plan(&spec.parse()?, shapes)
}

pub fn contract(spec: &str, operands: &[&Tensor]) -> Result<Tensor> {
    contract_with_cache(PlanCache::global(), spec, operands)
}

pub fn contract_with_cache(cache: &PlanCache, spec: &str, operands: &[&Tensor]) -> Result<Tensor> {
    let spec: ContractionSpec = spec.parse()?;
    let shapes: Vec<&[usize]> = operands.iter().map(|t| t.shape()).collect();
    cache.plan(&spec, &shapes)?.evaluate(operands)
}
